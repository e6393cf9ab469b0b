#include "subformer/nn.hpp"

#include <cmath>
#include <string>

#include "subformer/errors.hpp"

namespace subformer {

// ---- Mask -----------------------------------------------------------------

Mask::Mask(std::size_t rows, std::size_t cols, Kind kind, unsigned char fill)
    : rows_(rows), cols_(cols), kind_(kind), flags_(rows * cols, fill) {}

Mask Mask::none(std::size_t rows, std::size_t cols) { return Mask(rows, cols, Kind::none, 1); }

Mask Mask::causal(std::size_t n) {
  if (n == 0) throw ConfigError("causal mask needs n >= 1");
  Mask m(n, n, Kind::causal, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.flags_[i * n + j] = 1;
  return m;
}

Mask Mask::padding(std::size_t rows, std::size_t cols, std::size_t valid_keys) {
  Mask m(rows, cols, Kind::padding, 0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols && j < valid_keys; ++j) m.flags_[i * cols + j] = 1;
  return m;
}

Mask Mask::operator&(const Mask& other) const {
  if (rows_ != other.rows_ || cols_ != other.cols_) {
    throw DimensionError("cannot combine masks " + std::to_string(rows_) + "x" + std::to_string(cols_) + " and " +
                         std::to_string(other.rows_) + "x" + std::to_string(other.cols_));
  }
  Mask m(rows_, cols_, Kind::combined, 0);
  for (std::size_t i = 0; i < flags_.size(); ++i) m.flags_[i] = flags_[i] & other.flags_[i];
  return m;
}

// ---- construction ---------------------------------------------------------

namespace {
constexpr double kInitStd = 0.02;

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.mutable_data()) v = rng.truncated_normal(stddev);
  return t;
}
}  // namespace

Linear make_linear(std::size_t in, std::size_t out, Rng& rng, Init init) {
  const double stddev = init == Init::fan_in ? 1.0 / std::sqrt(static_cast<double>(in)) : kInitStd;
  return Linear{normal_tensor({in, out}, stddev, rng), Tensor::zeros({out}, true)};
}

LayerNormParams make_layer_norm(std::size_t width) {
  return LayerNormParams{Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
}

AttentionParams make_attention(std::size_t width, std::size_t heads, Rng& rng) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  AttentionParams p;
  p.q = make_linear(width, width, rng);
  p.k = make_linear(width, width, rng);
  p.v = make_linear(width, width, rng);
  p.o = make_linear(width, width, rng);
  p.n_heads = heads;
  return p;
}

FeedForwardParams make_feed_forward(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, Init init,
                                    Activation activation) {
  FeedForwardParams f;
  f.in = make_linear(in, hidden, rng, init);
  f.out = make_linear(hidden, out, rng, init);
  f.activation = activation;
  return f;
}

TransformerLayer make_layer(std::size_t width, std::size_t ffn_width, std::size_t heads, bool cross_attention,
                            Rng& rng) {
  TransformerLayer layer;
  layer.self_norm = make_layer_norm(width);
  layer.self_attn = make_attention(width, heads, rng);
  if (cross_attention) {
    layer.cross_norm = make_layer_norm(width);
    layer.cross_attn = make_attention(width, heads, rng);
  }
  layer.ffn_norm = make_layer_norm(width);
  layer.ffn = make_feed_forward(width, ffn_width, width, rng);
  return layer;
}

// ---- forward --------------------------------------------------------------

Tensor sinusoidal_pe(std::size_t max_len, std::size_t d) {
  if (d == 0 || d % 2 != 0) throw ConfigError("positional encoding width must be even, got " + std::to_string(d));
  if (max_len == 0) throw ConfigError("positional table needs max_len >= 1");
  Tensor pe = Tensor::zeros({max_len, d});
  auto values = pe.mutable_data();
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      values[pos * d + 2 * i] = std::sin(angle);
      values[pos * d + 2 * i + 1] = std::cos(angle);
    }
  }
  return pe;
}

Tensor linear(const Tensor& x, const Linear& layer) {
  if (x.shape().back() != layer.in_dim()) {
    throw ConfigError("linear layer expects width " + std::to_string(layer.in_dim()) + ", got " +
                      shape_string(x.shape()));
  }
  return add(matmul(x, layer.weight), layer.bias);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& norm) { return layer_norm(x, norm.gamma, norm.beta); }

Tensor activate(const Tensor& x, Activation activation) {
  return activation == Activation::gelu ? gelu(x) : relu(x);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& ffn) {
  return linear(activate(linear(x, ffn.in), ffn.activation), ffn.out);
}

namespace {

void check_attention_inputs(const Tensor& query, const Tensor& key, const AttentionParams& params,
                            std::span<const Mask> masks) {
  const std::size_t width = params.width();
  if (params.n_heads == 0 || width % params.n_heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " not divisible by " +
                      std::to_string(params.n_heads) + " heads");
  }
  if (query.rank() != 3 || key.rank() != 3 || query.dim(2) != width || key.dim(2) != width) {
    throw ConfigError("attention of width " + std::to_string(width) + " got query " + shape_string(query.shape()) +
                      " and key " + shape_string(key.shape()));
  }
  if (query.dim(0) != key.dim(0) || masks.size() != query.dim(0)) {
    throw DimensionError("attention batch mismatch: " + std::to_string(query.dim(0)) + " queries, " +
                         std::to_string(key.dim(0)) + " keys, " + std::to_string(masks.size()) + " masks");
  }
  for (const Mask& m : masks) {
    if (m.rows() != query.dim(1) || m.cols() != key.dim(1)) {
      throw DimensionError("mask " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                           " does not match attention " + std::to_string(query.dim(1)) + "x" +
                           std::to_string(key.dim(1)));
    }
  }
}

Tensor as_batch(const Tensor& x) { return x.rank() == 2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x; }

Tensor maybe_dropout(const Tensor& x, const DropoutContext& ctx) {
  return ctx.active() ? dropout(x, ctx.p, *ctx.rng) : x;
}

}  // namespace

Tensor attention_weights(const Tensor& query, const Tensor& key, const AttentionParams& params,
                         std::span<const Mask> masks) {
  check_attention_inputs(query, key, params, masks);
  const std::size_t heads = params.n_heads;
  const Tensor q = split_heads(linear(query, params.q), heads);
  const Tensor k = split_heads(linear(key, params.k), heads);
  const Tensor scores = scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(params.head_dim())));
  std::vector<unsigned char> flags;
  flags.reserve(masks.size() * masks.front().flags().size());
  for (const Mask& m : masks) flags.insert(flags.end(), m.flags().begin(), m.flags().end());
  return softmax(mask_fill(scores, flags, heads));
}

Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const AttentionParams& params, std::span<const Mask> masks) {
  if (value.rank() != 3 || value.dim(2) != params.width() || value.dim(1) != key.dim(1)) {
    throw ConfigError("attention value " + shape_string(value.shape()) + " does not match key " +
                      shape_string(key.shape()));
  }
  const Tensor probs = attention_weights(query, key, params, masks);
  const Tensor v = split_heads(linear(value, params.v), params.n_heads);
  return linear(merge_heads(bmm(probs, v), params.n_heads), params.o);
}

Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const AttentionParams& params, const Mask& mask) {
  if (query.rank() != 2 || key.rank() != 2 || value.rank() != 2) {
    throw DimensionError("single-sequence attention expects [n x d] inputs");
  }
  const Tensor out = multi_head_attention(as_batch(query), as_batch(key), as_batch(value), params,
                                          std::span<const Mask>(&mask, 1));
  return reshape(out, {query.dim(0), params.width()});
}

Tensor encoder_layer_forward(const Tensor& x, const TransformerLayer& layer, std::span<const Mask> masks,
                             const DropoutContext& dropout) {
  if (x.shape().back() != layer.width()) {
    throw ConfigError("layer of width " + std::to_string(layer.width()) + " got input " + shape_string(x.shape()));
  }
  const Tensor h = as_batch(x);
  const Tensor normed = layer_norm(h, layer.self_norm);
  Tensor out = add(h, maybe_dropout(multi_head_attention(normed, normed, normed, layer.self_attn, masks), dropout));
  out = add(out, maybe_dropout(feed_forward(layer_norm(out, layer.ffn_norm), layer.ffn), dropout));
  return x.rank() == 2 ? reshape(out, x.shape()) : out;
}

Tensor decoder_layer_forward(const Tensor& x, const Tensor* memory, const TransformerLayer& layer,
                             std::span<const Mask> self_masks, std::span<const Mask> cross_masks,
                             const DropoutContext& dropout) {
  if (x.shape().back() != layer.width()) {
    throw ConfigError("layer of width " + std::to_string(layer.width()) + " got input " + shape_string(x.shape()));
  }
  if (layer.has_cross_attention() && (memory == nullptr || !memory->defined())) {
    throw ContractError("decoder layer with cross-attention called without encoder memory");
  }
  const Tensor h = as_batch(x);
  const Tensor normed = layer_norm(h, layer.self_norm);
  Tensor out =
      add(h, maybe_dropout(multi_head_attention(normed, normed, normed, layer.self_attn, self_masks), dropout));
  if (layer.has_cross_attention()) {
    if (memory->shape().back() != layer.width()) {
      throw ConfigError("cross-attention of width " + std::to_string(layer.width()) + " got memory " +
                        shape_string(memory->shape()));
    }
    const Tensor mem = as_batch(*memory);
    const Tensor q = layer_norm(out, *layer.cross_norm);
    out = add(out, maybe_dropout(multi_head_attention(q, mem, mem, *layer.cross_attn, cross_masks), dropout));
  }
  out = add(out, maybe_dropout(feed_forward(layer_norm(out, layer.ffn_norm), layer.ffn), dropout));
  return x.rank() == 2 ? reshape(out, x.shape()) : out;
}

}  // namespace subformer
