#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "subformer/config.hpp"
#include "subformer/nn.hpp"
#include "subformer/registry.hpp"
#include "subformer/rng.hpp"
#include "subformer/tensor.hpp"

namespace subformer {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;

// Right-padded batch of token sequences.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;               // batch * length, row-major
  std::vector<std::size_t> lengths;   // unpadded length per row

  static TokenBatch from(const std::vector<std::vector<int>>& rows, int pad = kPadId);
  static TokenBatch single(std::span<const int> ids);
  std::span<const int> row(std::size_t b) const { return {ids.data() + b * length, length}; }
};

// Token embedding E, positional table at width d_e, and the mode-dependent
// map to model width.
struct SafeEmbedding {
  EmbedMode mode = EmbedMode::standard;
  Tensor table;      // [V, d_e]
  Tensor positions;  // [max_len, d_e], constant
  std::optional<Linear> inner;   // linear2: d_e -> d_e
  std::optional<Linear> project; // linear, linear2: d_e -> d_m
  std::optional<LayerNormParams> attn_norm;
  std::optional<AttentionParams> attn;
  std::optional<LayerNormParams> ffn_norm;
  std::optional<FeedForwardParams> ffn;  // safe: d_e -> d_m, hidden d_m

  std::size_t max_len() const { return positions.dim(0); }
};

// Feed-forward bridges around a wider (or narrower) sandwich module, each
// followed by a layer norm at its output width.
struct ProjectionPair {
  FeedForwardParams up;    // d_m -> d_s, hidden d_s
  LayerNormParams up_norm;
  FeedForwardParams down;  // d_s -> d_m, hidden d_m
  LayerNormParams down_norm;
};

// One encoder or decoder stack. `layers` holds one entry per position; shared
// positions hold handles to the same tensors. With a bridge, layers
// 1..L-2 run at the sandwich width between the up and down projections.
struct LayerStack {
  std::vector<TransformerLayer> layers;
  std::optional<ProjectionPair> bridge;
  LayerNormParams final_norm;
};

struct OutputHead {
  std::optional<Linear> to_embedding;  // tied with d_e != d_m: d_m -> d_e
  std::optional<Linear> vocab;         // untied: d_m -> V
  Tensor table;                        // tied: the embedding matrix E
};

// Encoder-decoder (arch=seq2seq) or decoder-only (arch=lm) model.
struct Subformer {
  ModelConfig config;
  std::optional<SafeEmbedding> source;
  SafeEmbedding target;
  std::optional<LayerStack> encoder;
  LayerStack decoder;
  OutputHead head;
  ParameterRegistry registry;
};

// Allocates parameters per the sharing scheme and embedding mode.
Subformer build(const ModelConfig& config, Rng& rng);

// Independent copy with fresh storage and the same aliasing structure.
Subformer clone(const Subformer& model);

Tensor safe_forward(const TokenBatch& ids, const SafeEmbedding& embedding, bool causal,
                    const DropoutContext& dropout = {});
Tensor safe_forward(std::span<const int> ids, const SafeEmbedding& embedding, bool causal);

// Applies the layers, projections and final norm of a stack. `memory` and
// `memory_lengths` are required for stacks with cross-attention.
Tensor stack_forward(const Tensor& x, const LayerStack& stack, std::span<const std::size_t> lengths, bool causal,
                     const Tensor* memory = nullptr, std::span<const std::size_t> memory_lengths = {},
                     const DropoutContext& dropout = {});

Tensor output_logits(const Tensor& hidden, const Subformer& model);

Tensor encoder_forward(const TokenBatch& src, const Subformer& model, const DropoutContext& dropout = {});
Tensor decoder_forward(const TokenBatch& tgt, const Tensor& memory, std::span<const std::size_t> memory_lengths,
                       const Subformer& model, const DropoutContext& dropout = {});

// Logits [B, n_tgt, V].
Tensor forward(const TokenBatch& src, const TokenBatch& tgt, const Subformer& model,
               const DropoutContext& dropout = {});
Tensor lm_forward(const TokenBatch& ids, const Subformer& model, const DropoutContext& dropout = {});

// Single-sequence conveniences returning [n, V].
Tensor forward(std::span<const int> src, std::span<const int> tgt, const Subformer& model);
Tensor lm_forward(std::span<const int> ids, const Subformer& model);

}  // namespace subformer
