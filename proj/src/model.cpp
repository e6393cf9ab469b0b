#include "subformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "subformer/errors.hpp"

namespace subformer {

// ---- TokenBatch -----------------------------------------------------------

TokenBatch TokenBatch::from(const std::vector<std::vector<int>>& rows, int pad) {
  if (rows.empty()) throw DataError("empty token batch");
  TokenBatch b;
  b.batch = rows.size();
  for (const auto& r : rows) b.length = std::max(b.length, r.size());
  if (b.length == 0) throw DataError("token batch of empty sequences");
  b.ids.assign(b.batch * b.length, pad);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].empty()) throw DataError("empty sequence in token batch");
    std::copy(rows[i].begin(), rows[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.length));
    b.lengths.push_back(rows[i].size());
  }
  return b;
}

TokenBatch TokenBatch::single(std::span<const int> ids) {
  return from({std::vector<int>(ids.begin(), ids.end())});
}

// ---- build ----------------------------------------------------------------

namespace {

void register_linear(ParameterRegistry& reg, const std::string& prefix, const Linear& l) {
  reg.add(prefix + ".weight", l.weight);
  reg.add(prefix + ".bias", l.bias);
}

void register_norm(ParameterRegistry& reg, const std::string& prefix, const LayerNormParams& n) {
  reg.add(prefix + ".gamma", n.gamma);
  reg.add(prefix + ".beta", n.beta);
}

void register_attention(ParameterRegistry& reg, const std::string& prefix, const AttentionParams& a) {
  register_linear(reg, prefix + ".q", a.q);
  register_linear(reg, prefix + ".k", a.k);
  register_linear(reg, prefix + ".v", a.v);
  register_linear(reg, prefix + ".o", a.o);
}

void register_ffn(ParameterRegistry& reg, const std::string& prefix, const FeedForwardParams& f) {
  register_linear(reg, prefix + ".in", f.in);
  register_linear(reg, prefix + ".out", f.out);
}

void register_layer(ParameterRegistry& reg, const std::string& prefix, const TransformerLayer& layer) {
  register_norm(reg, prefix + ".self_norm", layer.self_norm);
  register_attention(reg, prefix + ".self_attn", layer.self_attn);
  if (layer.cross_attn) {
    register_norm(reg, prefix + ".cross_norm", *layer.cross_norm);
    register_attention(reg, prefix + ".cross_attn", *layer.cross_attn);
  }
  register_norm(reg, prefix + ".ffn_norm", layer.ffn_norm);
  register_ffn(reg, prefix + ".ffn", layer.ffn);
}

LayerStack build_stack(const ModelConfig& c, std::size_t layers, bool cross_attention, const std::string& name,
                       Rng& rng, ParameterRegistry& reg) {
  const auto attn_groups = share_map(c.scheme, layers);
  const auto ffn_groups = ffn_share_map(c.scheme, layers);
  const bool sandwich = c.scheme == Scheme::sandwich;

  LayerStack stack;
  std::map<int, TransformerLayer> attn_by_group;
  std::map<int, FeedForwardParams> ffn_by_group;
  for (std::size_t l = 0; l < layers; ++l) {
    const bool middle = sandwich && l > 0 && l + 1 < layers;
    const std::size_t width = middle ? c.d_sandwich : c.d_model;
    const std::size_t hidden = middle ? c.ffn_sandwich : c.ffn_model;

    TransformerLayer layer;
    if (auto it = attn_by_group.find(attn_groups[l]); it != attn_by_group.end()) {
      layer = it->second;
    } else {
      layer.self_norm = make_layer_norm(width);
      layer.self_attn = make_attention(width, c.heads, rng);
      if (cross_attention) {
        layer.cross_norm = make_layer_norm(width);
        layer.cross_attn = make_attention(width, c.heads, rng);
      }
      layer.ffn_norm = make_layer_norm(width);
      attn_by_group.emplace(attn_groups[l], layer);
    }
    if (auto it = ffn_by_group.find(ffn_groups[l]); it != ffn_by_group.end()) {
      layer.ffn = it->second;
    } else {
      layer.ffn = make_feed_forward(width, hidden, width, rng);
      ffn_by_group.emplace(ffn_groups[l], layer.ffn);
    }
    stack.layers.push_back(layer);
  }

  if (c.has_projection_pair()) {
    ProjectionPair bridge;
    bridge.up = make_feed_forward(c.d_model, c.d_sandwich, c.d_sandwich, rng, Init::fan_in);
    bridge.up_norm = make_layer_norm(c.d_sandwich);
    bridge.down_norm = make_layer_norm(c.d_model);
    bridge.down = make_feed_forward(c.d_sandwich, c.d_model, c.d_model, rng, Init::fan_in);
    stack.bridge = bridge;
  }
  stack.final_norm = make_layer_norm(c.d_model);

  for (std::size_t l = 0; l < layers; ++l)
    register_layer(reg, name + ".layers." + std::to_string(l), stack.layers[l]);
  if (stack.bridge) {
    register_norm(reg, name + ".up_norm", stack.bridge->up_norm);
    register_ffn(reg, name + ".up", stack.bridge->up);
    register_norm(reg, name + ".down_norm", stack.bridge->down_norm);
    register_ffn(reg, name + ".down", stack.bridge->down);
  }
  register_norm(reg, name + ".final_norm", stack.final_norm);
  reg.set_groups(name, ParameterRegistry::StackGroups{attn_groups, ffn_groups});
  return stack;
}

// N(0, 1/width), so the sqrt(width)-scaled lookup has unit-variance entries.
Tensor make_table(std::size_t vocab, std::size_t width, Rng& rng) {
  Tensor t = Tensor::zeros({vocab, width}, true);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(width));
  for (double& v : t.mutable_data()) v = rng.truncated_normal(stddev);
  return t;
}

SafeEmbedding build_embedding(const ModelConfig& c, const Tensor& table, const std::string& name, Rng& rng,
                              ParameterRegistry& reg) {
  SafeEmbedding e;
  e.mode = c.embed_mode;
  e.table = table;
  e.positions = sinusoidal_pe(c.max_len, c.d_embed);
  reg.add(name + ".table", e.table);
  switch (c.embed_mode) {
    case EmbedMode::standard: break;
    case EmbedMode::linear:
      e.project = make_linear(c.d_embed, c.d_model, rng, Init::fan_in);
      register_linear(reg, name + ".project", *e.project);
      break;
    case EmbedMode::linear2:
      e.inner = make_linear(c.d_embed, c.d_embed, rng, Init::fan_in);
      e.project = make_linear(c.d_embed, c.d_model, rng, Init::fan_in);
      register_linear(reg, name + ".inner", *e.inner);
      register_linear(reg, name + ".project", *e.project);
      break;
    case EmbedMode::safe:
      e.attn_norm = make_layer_norm(c.d_embed);
      e.attn = make_attention(c.d_embed, c.heads_safe, rng);
      e.ffn_norm = make_layer_norm(c.d_embed);
      e.ffn = make_feed_forward(c.d_embed, c.d_model, c.d_model, rng, Init::fan_in);
      register_norm(reg, name + ".attn_norm", *e.attn_norm);
      register_attention(reg, name + ".attn", *e.attn);
      register_norm(reg, name + ".ffn_norm", *e.ffn_norm);
      register_ffn(reg, name + ".ffn", *e.ffn);
      break;
  }
  return e;
}

}  // namespace

Subformer build(const ModelConfig& config, Rng& rng) {
  config.validate();
  Subformer m;
  m.config = config;
  const bool seq2seq = config.arch == Arch::seq2seq;

  const Tensor target_table = make_table(config.vocab_size, config.d_embed, rng);
  if (seq2seq) {
    const Tensor source_table = config.tie ? target_table : make_table(config.vocab_size, config.d_embed, rng);
    m.source = build_embedding(config, source_table, "source_embed", rng, m.registry);
    m.encoder = build_stack(config, config.layers_enc, false, "encoder", rng, m.registry);
  }
  m.target = build_embedding(config, target_table, "target_embed", rng, m.registry);
  m.decoder = build_stack(config, config.layers_dec, seq2seq, "decoder", rng, m.registry);

  if (config.tie) {
    m.head.table = target_table;
    m.registry.add("head.table", m.head.table);
    if (config.has_output_projection()) {
      m.head.to_embedding = make_linear(config.d_model, config.d_embed, rng, Init::fan_in);
      register_linear(m.registry, "head.to_embedding", *m.head.to_embedding);
    }
  } else {
    m.head.vocab = make_linear(config.d_model, config.vocab_size, rng);
    register_linear(m.registry, "head.vocab", *m.head.vocab);
  }
  return m;
}

Subformer clone(const Subformer& model) {
  Rng rng(0);
  Subformer copy = build(model.config, rng);
  for (const auto& entry : model.registry.distinct()) {
    Tensor dst = *copy.registry.find(entry.name);
    std::copy(entry.tensor.data().begin(), entry.tensor.data().end(), dst.mutable_data().begin());
  }
  return copy;
}

// ---- forward --------------------------------------------------------------

namespace {

std::vector<Mask> self_masks(std::size_t n, std::span<const std::size_t> lengths, bool causal) {
  std::vector<Mask> masks;
  masks.reserve(lengths.size());
  for (std::size_t len : lengths) {
    Mask m = Mask::padding(n, n, len);
    masks.push_back(causal ? Mask::causal(n) & m : m);
  }
  return masks;
}

std::vector<Mask> cross_masks(std::size_t n, std::size_t m, std::span<const std::size_t> lengths) {
  std::vector<Mask> masks;
  masks.reserve(lengths.size());
  for (std::size_t len : lengths) masks.push_back(Mask::padding(n, m, len));
  return masks;
}

Tensor maybe_dropout(const Tensor& x, const DropoutContext& ctx) {
  return ctx.active() ? dropout(x, ctx.p, *ctx.rng) : x;
}

Tensor bridge_forward(const Tensor& x, const LayerNormParams& norm, const FeedForwardParams& ffn) {
  return layer_norm(feed_forward(x, ffn), norm);
}

Tensor positions_prefix(const Tensor& table, std::size_t n) {
  const std::size_t d = table.dim(1);
  return Tensor::from({n, d}, std::vector<double>(table.data().begin(), table.data().begin() + n * d));
}

}  // namespace

Tensor safe_forward(const TokenBatch& ids, const SafeEmbedding& e, bool causal, const DropoutContext& dropout) {
  if (ids.length > e.max_len()) {
    throw LengthError("sequence of length " + std::to_string(ids.length) + " exceeds max_len " +
                      std::to_string(e.max_len()));
  }
  const std::size_t d_e = e.table.dim(1);
  Tensor x = scale(embedding_lookup(e.table, ids.ids), std::sqrt(static_cast<double>(d_e)));
  x = reshape(x, {ids.batch, ids.length, d_e});
  x = add(x, positions_prefix(e.positions, ids.length));
  switch (e.mode) {
    case EmbedMode::standard: return x;
    case EmbedMode::linear: return linear(x, *e.project);
    case EmbedMode::linear2: return linear(linear(x, *e.inner), *e.project);
    case EmbedMode::safe: {
      const auto masks = self_masks(ids.length, ids.lengths, causal);
      const Tensor normed = layer_norm(x, *e.attn_norm);
      x = add(x, maybe_dropout(multi_head_attention(normed, normed, normed, *e.attn, masks), dropout));
      return feed_forward(layer_norm(x, *e.ffn_norm), *e.ffn);
    }
  }
  throw ContractError("unknown embedding mode");
}

Tensor safe_forward(std::span<const int> ids, const SafeEmbedding& embedding, bool causal) {
  const Tensor out = safe_forward(TokenBatch::single(ids), embedding, causal);
  return reshape(out, {ids.size(), out.dim(2)});
}

Tensor stack_forward(const Tensor& x, const LayerStack& stack, std::span<const std::size_t> lengths, bool causal,
                     const Tensor* memory, std::span<const std::size_t> memory_lengths,
                     const DropoutContext& dropout) {
  const std::size_t n = x.dim(1);
  const auto masks = self_masks(n, lengths, causal);
  std::vector<Mask> mem_masks;
  if (memory != nullptr) mem_masks = cross_masks(n, memory->dim(1), memory_lengths);

  auto apply = [&](const Tensor& h, const TransformerLayer& layer, const Tensor* mem) {
    if (layer.has_cross_attention() || causal) return decoder_layer_forward(h, mem, layer, masks, mem_masks, dropout);
    return encoder_layer_forward(h, layer, masks, dropout);
  };

  const std::size_t layers = stack.layers.size();
  Tensor h = apply(x, stack.layers.front(), memory);
  if (stack.bridge) {
    // Sandwich module at d_s: project activations and memory up, run the
    // shared layer L-2 times, project back down.
    h = bridge_forward(h, stack.bridge->up_norm, stack.bridge->up);
    Tensor memory_up;
    if (memory != nullptr) memory_up = bridge_forward(*memory, stack.bridge->up_norm, stack.bridge->up);
    for (std::size_t l = 1; l + 1 < layers; ++l)
      h = apply(h, stack.layers[l], memory != nullptr ? &memory_up : nullptr);
    h = bridge_forward(h, stack.bridge->down_norm, stack.bridge->down);
  } else {
    for (std::size_t l = 1; l + 1 < layers; ++l) h = apply(h, stack.layers[l], memory);
  }
  if (layers > 1) h = apply(h, stack.layers.back(), memory);
  return layer_norm(h, stack.final_norm);
}

Tensor output_logits(const Tensor& hidden, const Subformer& model) {
  if (model.head.vocab) return linear(hidden, *model.head.vocab);
  if (!model.head.table.defined()) throw ContractError("tied output head without an embedding matrix");
  const Tensor h = model.head.to_embedding ? linear(hidden, *model.head.to_embedding) : hidden;
  return matmul_nt(h, model.head.table);
}

Tensor encoder_forward(const TokenBatch& src, const Subformer& model, const DropoutContext& dropout) {
  if (!model.encoder || !model.source) throw ContractError("encoder_forward on a decoder-only model");
  const Tensor x = maybe_dropout(safe_forward(src, *model.source, false, dropout), dropout);
  return stack_forward(x, *model.encoder, src.lengths, false, nullptr, {}, dropout);
}

Tensor decoder_forward(const TokenBatch& tgt, const Tensor& memory, std::span<const std::size_t> memory_lengths,
                       const Subformer& model, const DropoutContext& dropout) {
  if (model.config.arch != Arch::seq2seq) throw ContractError("decoder_forward with memory on an lm model");
  if (!memory.defined()) throw ContractError("decoder_forward requires encoder memory");
  if (memory.dim(0) != tgt.batch || memory_lengths.size() != tgt.batch)
    throw DimensionError("memory batch does not match target batch");
  const Tensor x = maybe_dropout(safe_forward(tgt, model.target, true, dropout), dropout);
  return stack_forward(x, model.decoder, tgt.lengths, true, &memory, memory_lengths, dropout);
}

Tensor forward(const TokenBatch& src, const TokenBatch& tgt, const Subformer& model, const DropoutContext& dropout) {
  if (model.config.arch != Arch::seq2seq) throw ContractError("forward() needs arch=seq2seq, use lm_forward()");
  if (src.batch != tgt.batch) throw DimensionError("source and target batch sizes differ");
  const Tensor memory = encoder_forward(src, model, dropout);
  return output_logits(decoder_forward(tgt, memory, src.lengths, model, dropout), model);
}

Tensor lm_forward(const TokenBatch& ids, const Subformer& model, const DropoutContext& dropout) {
  if (model.config.arch != Arch::lm) throw ContractError("lm_forward() needs arch=lm, use forward()");
  const Tensor x = maybe_dropout(safe_forward(ids, model.target, true, dropout), dropout);
  return output_logits(stack_forward(x, model.decoder, ids.lengths, true, nullptr, {}, dropout), model);
}

Tensor forward(std::span<const int> src, std::span<const int> tgt, const Subformer& model) {
  const Tensor logits = forward(TokenBatch::single(src), TokenBatch::single(tgt), model);
  return reshape(logits, {tgt.size(), logits.dim(2)});
}

Tensor lm_forward(std::span<const int> ids, const Subformer& model) {
  const Tensor logits = lm_forward(TokenBatch::single(ids), model);
  return reshape(logits, {ids.size(), logits.dim(2)});
}

}  // namespace subformer
