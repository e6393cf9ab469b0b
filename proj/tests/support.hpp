#pragma once

#include <cmath>
#include <vector>

#include "subformer/config.hpp"
#include "subformer/rng.hpp"
#include "subformer/tensor.hpp"

namespace subformer::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (double& v : t.mutable_data()) v = scale * rng.normal();
  return t;
}

// sum(out * R) for a fixed random R, so every output entry carries a
// distinct weight in the loss.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, random_tensor(out.shape(), rng, 1.0, false)));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

// V=7, d_e=4, d_m=8, d_s=12, L=3 sandwich seq2seq with SAFE embeddings.
inline ModelConfig tiny_seq2seq() {
  ModelConfig c;
  c.vocab_size = 7;
  c.d_embed = 4;
  c.d_model = 8;
  c.d_sandwich = 12;
  c.ffn_model = 16;
  c.ffn_sandwich = 24;
  c.layers_enc = c.layers_dec = 3;
  c.heads = 2;
  c.heads_safe = 2;
  c.scheme = Scheme::sandwich;
  c.embed_mode = EmbedMode::safe;
  c.tie = true;
  c.max_len = 10;
  c.arch = Arch::seq2seq;
  return c;
}

}  // namespace subformer::testing
