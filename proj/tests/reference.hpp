#pragma once

// Plain-loop encoder-decoder transformer on std::vector, independent of the
// tape. Reads weights from an unshared, standard-embedding, tied Subformer
// and evaluates one unpadded sequence pair.

#include <cmath>
#include <limits>
#include <vector>

#include "subformer/model.hpp"

namespace subformer::reference {

using Mat = std::vector<double>;  // row-major, n rows

inline Mat linear(const Mat& x, std::size_t n, const Linear& l) {
  const std::size_t in = l.in_dim(), out = l.out_dim();
  Mat y(n * out);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < out; ++j) {
      double acc = l.bias.at(j);
      for (std::size_t p = 0; p < in; ++p) acc += x[r * in + p] * l.weight.at(p * out + j);
      y[r * out + j] = acc;
    }
  return y;
}

inline Mat layer_norm(const Mat& x, std::size_t n, const LayerNormParams& norm) {
  const std::size_t d = norm.width();
  Mat y(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[r * d + j];
    mu /= d;
    for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - mu) * (x[r * d + j] - mu);
    var /= d;
    for (std::size_t j = 0; j < d; ++j)
      y[r * d + j] = norm.gamma.at(j) * (x[r * d + j] - mu) / std::sqrt(var + 1e-5) + norm.beta.at(j);
  }
  return y;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

inline Mat attention(const Mat& q_in, std::size_t n, const Mat& kv_in, std::size_t m, const AttentionParams& p,
                     bool causal) {
  const std::size_t d = p.width(), heads = p.n_heads, dh = d / heads;
  const Mat q = linear(q_in, n, p.q), k = linear(kv_in, m, p.k), v = linear(kv_in, m, p.v);
  Mat ctx(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(m, -std::numeric_limits<double>::infinity());
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < m; ++j) {
        if (causal && j > i) continue;
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        top = std::max(top, s[j]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - top));
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t c = 0; c < dh; ++c) ctx[i * d + h * dh + c] += s[j] / z * v[j * d + h * dh + c];
    }
  return linear(ctx, n, p.o);
}

inline Mat ffn(const Mat& x, std::size_t n, const FeedForwardParams& f) {
  Mat h = linear(x, n, f.in);
  for (double& v : h) v = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
  return linear(h, n, f.out);
}

inline Mat embed(std::span<const int> ids, const SafeEmbedding& e) {
  const std::size_t d = e.table.dim(1);
  const double gain = std::sqrt(static_cast<double>(d));
  Mat x(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      x[i * d + j] = gain * e.table.at(ids[i] * d + j) + e.positions.at(i * d + j);
  return x;
}

// Logits [n_tgt x V].
inline Mat forward(const Subformer& model, std::span<const int> src, std::span<const int> tgt) {
  const std::size_t n = src.size(), t = tgt.size();
  Mat enc = embed(src, *model.source);
  for (const TransformerLayer& layer : model.encoder->layers) {
    enc = add(enc, attention(layer_norm(enc, n, layer.self_norm), n, layer_norm(enc, n, layer.self_norm), n,
                             layer.self_attn, false));
    enc = add(enc, ffn(layer_norm(enc, n, layer.ffn_norm), n, layer.ffn));
  }
  enc = layer_norm(enc, n, model.encoder->final_norm);

  Mat dec = embed(tgt, model.target);
  for (const TransformerLayer& layer : model.decoder.layers) {
    const Mat normed = layer_norm(dec, t, layer.self_norm);
    dec = add(dec, attention(normed, t, normed, t, layer.self_attn, true));
    dec = add(dec, attention(layer_norm(dec, t, *layer.cross_norm), t, enc, n, *layer.cross_attn, false));
    dec = add(dec, ffn(layer_norm(dec, t, layer.ffn_norm), t, layer.ffn));
  }
  dec = layer_norm(dec, t, model.decoder.final_norm);

  const std::size_t d = model.config.d_model, vocab = model.config.vocab_size;
  Mat logits(t * vocab, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t v = 0; v < vocab; ++v)
      for (std::size_t j = 0; j < d; ++j) logits[i * vocab + v] += dec[i * d + j] * model.head.table.at(v * d + j);
  return logits;
}

}  // namespace subformer::reference
