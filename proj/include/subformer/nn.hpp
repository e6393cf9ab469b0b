#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "subformer/rng.hpp"
#include "subformer/tensor.hpp"

namespace subformer {

enum class Activation { gelu, relu };

// standard: N(0, 0.02). fan_in: N(0, 1/in), for width-changing maps with no residual.
enum class Init { standard, fan_in };

// y = x W + b with W stored [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  std::size_t width() const { return gamma.numel(); }
};

struct AttentionParams {
  Linear q, k, v, o;
  std::size_t n_heads = 1;

  std::size_t width() const { return q.in_dim(); }
  std::size_t head_dim() const { return width() / n_heads; }
};

struct FeedForwardParams {
  Linear in, out;
  Activation activation = Activation::gelu;

  std::size_t hidden() const { return in.out_dim(); }
};

// Pre-norm transformer layer. Decoder layers carry cross-attention.
struct TransformerLayer {
  LayerNormParams self_norm;
  AttentionParams self_attn;
  std::optional<LayerNormParams> cross_norm;
  std::optional<AttentionParams> cross_attn;
  LayerNormParams ffn_norm;
  FeedForwardParams ffn;

  std::size_t width() const { return self_attn.width(); }
  std::size_t ffn_width() const { return ffn.hidden(); }
  bool has_cross_attention() const { return cross_attn.has_value(); }
};

// Boolean attention pattern, true = query row may attend to key column.
class Mask {
 public:
  enum class Kind { none, causal, padding, combined };

  static Mask none(std::size_t rows, std::size_t cols);
  static Mask causal(std::size_t n);
  // Keys at columns >= valid_keys are blocked.
  static Mask padding(std::size_t rows, std::size_t cols, std::size_t valid_keys);

  // Elementwise AND; shapes must match.
  Mask operator&(const Mask& other) const;

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  Kind kind() const { return kind_; }
  bool allowed(std::size_t i, std::size_t j) const { return flags_[i * cols_ + j] != 0; }
  std::span<const unsigned char> flags() const { return flags_; }

 private:
  Mask(std::size_t rows, std::size_t cols, Kind kind, unsigned char fill);
  std::size_t rows_ = 0, cols_ = 0;
  Kind kind_ = Kind::none;
  std::vector<unsigned char> flags_;
};

// Dropout applied to every sub-layer output before the residual add.
struct DropoutContext {
  double p = 0.0;
  Rng* rng = nullptr;

  bool active() const { return p > 0.0 && rng != nullptr; }
};

// ---- construction ---------------------------------------------------------

// Weights normal, truncated at 2 sigma; zero biases, unit/zero norms.
Linear make_linear(std::size_t in, std::size_t out, Rng& rng, Init init = Init::standard);
LayerNormParams make_layer_norm(std::size_t width);
AttentionParams make_attention(std::size_t width, std::size_t heads, Rng& rng);
FeedForwardParams make_feed_forward(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
                                    Init init = Init::standard, Activation activation = Activation::gelu);
TransformerLayer make_layer(std::size_t width, std::size_t ffn_width, std::size_t heads, bool cross_attention,
                            Rng& rng);

// ---- forward --------------------------------------------------------------

Tensor sinusoidal_pe(std::size_t max_len, std::size_t d);

Tensor linear(const Tensor& x, const Linear& layer);
Tensor layer_norm(const Tensor& x, const LayerNormParams& norm);
Tensor activate(const Tensor& x, Activation activation);
Tensor feed_forward(const Tensor& x, const FeedForwardParams& ffn);

// Softmax attention probabilities [B*H, n, m] for query [B, n, d] and key
// [B, m, d] inputs (before projection). One mask per batch entry.
Tensor attention_weights(const Tensor& query, const Tensor& key, const AttentionParams& params,
                         std::span<const Mask> masks);

// Scaled dot-product multi-head attention over batched [B, n, d] inputs.
Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const AttentionParams& params, std::span<const Mask> masks);
// Single sequence: [n, d] inputs and one n x m mask.
Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const AttentionParams& params, const Mask& mask);

// x + attn(LN(x)), then + ffn(LN(.)). `masks` holds one self-attention
// mask per batch entry. Accepts [n, d] (single mask) or [B, n, d].
Tensor encoder_layer_forward(const Tensor& x, const TransformerLayer& layer, std::span<const Mask> masks,
                             const DropoutContext& dropout = {});

// Causal self-attention, cross-attention over `memory`, then ffn; each
// pre-norm residual. `memory` may be null only for layers without
// cross-attention (decoder-only stacks).
Tensor decoder_layer_forward(const Tensor& x, const Tensor* memory, const TransformerLayer& layer,
                             std::span<const Mask> self_masks, std::span<const Mask> cross_masks,
                             const DropoutContext& dropout = {});

}  // namespace subformer
