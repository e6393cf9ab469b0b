#include <gtest/gtest.h>

#include <set>

#include "reference.hpp"
#include "subformer/errors.hpp"
#include "subformer/gradcheck.hpp"
#include "subformer/model.hpp"
#include "subformer/training.hpp"
#include "support.hpp"

namespace subformer {
namespace {

using testing::max_abs_diff;
using testing::tiny_seq2seq;

// Spreads the weights so that layer outputs are far from their
// initialisation regime and differences show.
void randomise(const Subformer& model, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (const auto& e : model.registry.distinct())
    for (double& v : e.tensor.mutable_data()) v += scale * rng.normal();
}

ModelConfig vanilla() {
  ModelConfig c;
  c.vocab_size = 9;
  c.d_embed = c.d_model = c.d_sandwich = 8;
  c.ffn_model = c.ffn_sandwich = 12;
  c.layers_enc = 2;
  c.layers_dec = 3;
  c.heads = 2;
  c.scheme = Scheme::none;
  c.embed_mode = EmbedMode::standard;
  c.max_len = 12;
  return c;
}

TEST(ShareMap, Schemes) {
  EXPECT_EQ(share_map(Scheme::none, 4), (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(share_map(Scheme::all, 4), (std::vector<int>{0, 0, 0, 0}));
  EXPECT_EQ(share_map(Scheme::all_except_last, 4), (std::vector<int>{0, 0, 0, 1}));
  EXPECT_EQ(share_map(Scheme::every2, 6), (std::vector<int>{0, 0, 1, 1, 2, 2}));
  EXPECT_EQ(share_map(Scheme::sandwich, 6), (std::vector<int>{0, 1, 1, 1, 1, 2}));
  EXPECT_EQ(share_map(Scheme::sandwich, 3), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(share_map(Scheme::all_indep_ffn, 3), (std::vector<int>{0, 0, 0}));
  EXPECT_EQ(ffn_share_map(Scheme::all_indep_ffn, 3), (std::vector<int>{0, 1, 1}));
  EXPECT_EQ(distinct_groups(share_map(Scheme::sandwich, 6)), 3u);
}

TEST(ShareMap, RejectsImpossibleStacks) {
  EXPECT_THROW(share_map(Scheme::sandwich, 2), ConfigError);
  EXPECT_THROW(share_map(Scheme::every2, 5), ConfigError);
  ModelConfig c = tiny_seq2seq();
  c.layers_dec = 2;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("sandwich requires L"), std::string::npos);
  }
}

TEST(Build, SharedLayersAliasStorage) {
  Rng rng(1);
  ModelConfig c = tiny_seq2seq();
  c.layers_enc = c.layers_dec = 5;
  const Subformer m = build(c, rng);
  const auto& layers = m.decoder.layers;
  EXPECT_TRUE(layers[1].self_attn.q.weight.same_storage(layers[3].self_attn.q.weight));
  EXPECT_TRUE(layers[1].ffn.out.bias.same_storage(layers[2].ffn.out.bias));
  EXPECT_FALSE(layers[0].self_attn.q.weight.same_storage(layers[4].self_attn.q.weight));
  EXPECT_EQ(layers[1].width(), 12u);
  EXPECT_EQ(layers[0].width(), 8u);
  ASSERT_TRUE(m.decoder.bridge.has_value());
  EXPECT_TRUE(m.head.table.same_storage(m.target.table));
  EXPECT_TRUE(m.source->table.same_storage(m.target.table));

  const auto* entry = m.registry.entry_for(layers[3].self_attn.q.weight);
  ASSERT_NE(entry, nullptr);
  EXPECT_EQ(entry->name, "decoder.layers.1.self_attn.q.weight");
  EXPECT_NE(std::find(entry->aliases.begin(), entry->aliases.end(), "decoder.layers.3.self_attn.q.weight"),
            entry->aliases.end());
}

TEST(Build, RegistryListsEachTensorOnce) {
  for (Scheme scheme : kAllSchemes) {
    ModelConfig c = tiny_seq2seq();
    c.scheme = scheme;
    c.layers_enc = c.layers_dec = 4;
    if (scheme != Scheme::sandwich) c.d_sandwich = c.d_model;
    Rng rng(2);
    const Subformer m = build(c, rng);
    std::set<const double*> storage;
    for (const auto& e : m.registry.distinct()) storage.insert(e.tensor.data().data());
    EXPECT_EQ(storage.size(), m.registry.distinct().size()) << to_string(scheme);
  }
}

TEST(Build, NoBridgeWhenWidthsMatch) {
  ModelConfig c = tiny_seq2seq();
  c.d_sandwich = c.d_model;
  c.ffn_sandwich = c.ffn_model;
  Rng rng(3);
  const Subformer m = build(c, rng);
  EXPECT_FALSE(m.decoder.bridge.has_value());
  EXPECT_FALSE(m.registry.find("decoder.up.in.weight").has_value());
}

TEST(Build, EmbeddingModesOwnTheirMaps) {
  ModelConfig c = tiny_seq2seq();
  Rng rng(4);
  c.embed_mode = EmbedMode::linear;
  EXPECT_TRUE(build(c, rng).target.project.has_value());
  c.embed_mode = EmbedMode::linear2;
  const Subformer l2 = build(c, rng);
  EXPECT_TRUE(l2.target.inner.has_value());
  EXPECT_EQ(l2.target.inner->out_dim(), c.d_embed);
  c.embed_mode = EmbedMode::safe;
  const Subformer safe = build(c, rng);
  EXPECT_EQ(safe.target.ffn->hidden(), c.d_model);
  EXPECT_EQ(safe.target.attn->n_heads, c.heads_safe);
  EXPECT_TRUE(safe.head.to_embedding.has_value());
}

TEST(Build, CloneCopiesValuesIntoFreshStorage) {
  Rng rng(5);
  const Subformer m = build(tiny_seq2seq(), rng);
  randomise(m, 6);
  const Subformer c = clone(m);
  ASSERT_EQ(c.registry.distinct().size(), m.registry.distinct().size());
  for (std::size_t i = 0; i < m.registry.distinct().size(); ++i) {
    const auto& a = m.registry.distinct()[i];
    const auto& b = c.registry.distinct()[i];
    EXPECT_EQ(a.name, b.name);
    EXPECT_EQ(a.aliases, b.aliases);
    EXPECT_FALSE(a.tensor.same_storage(b.tensor));
    EXPECT_EQ(max_abs_diff(a.tensor.data(), b.tensor.data()), 0.0);
  }
}

TEST(Forward, ShapesAndErrors) {
  Rng rng(7);
  const Subformer m = build(tiny_seq2seq(), rng);
  const std::vector<int> src{3, 4, 5}, tgt{1, 3, 4, 5};
  EXPECT_EQ(forward(src, tgt, m).shape(), (Shape{4, 7}));
  EXPECT_THROW(lm_forward(tgt, m), ContractError);
  const std::vector<int> long_seq(11, 3);
  EXPECT_THROW(forward(long_seq, tgt, m), LengthError);
  const std::vector<int> bad{3, 7};
  EXPECT_THROW(forward(bad, tgt, m), VocabularyError);
}

TEST(Forward, BatchedMatchesSingleSequences) {
  Rng rng(8);
  const Subformer m = build(tiny_seq2seq(), rng);
  randomise(m, 9);
  const std::vector<std::vector<int>> src{{3, 4, 5, 6}, {6, 5}};
  const std::vector<std::vector<int>> tgt{{1, 3}, {1, 6, 5}};
  const Tensor batched = forward(TokenBatch::from(src), TokenBatch::from(tgt), m);
  for (std::size_t b = 0; b < 2; ++b) {
    const Tensor single = forward(src[b], tgt[b], m);
    EXPECT_LE(max_abs_diff(single.data(), batched.data().subspan(b * 3 * 7, tgt[b].size() * 7)), 1e-12);
  }
}

TEST(Forward, DegeneratesToPlainTransformer) {
  Rng rng(10);
  const Subformer m = build(vanilla(), rng);
  randomise(m, 11);
  const std::vector<int> src{3, 8, 4, 4, 2}, tgt{1, 5, 6, 7};
  const Tensor logits = forward(src, tgt, m);
  const auto expect = reference::forward(m, src, tgt);
  EXPECT_LE(max_abs_diff(logits.data(), expect), 1e-10);
}

TEST(Forward, DecoderIsCausal) {
  for (EmbedMode mode : {EmbedMode::linear, EmbedMode::safe}) {
    ModelConfig c = tiny_seq2seq();
    c.embed_mode = mode;
    Rng rng(12);
    const Subformer m = build(c, rng);
    randomise(m, 13);
    const std::vector<int> src{3, 4, 5};
    std::vector<int> tgt{1, 3, 4, 5, 6};
    const Tensor base = forward(src, tgt, m);
    tgt[3] = 3;
    const Tensor changed = forward(src, tgt, m);
    EXPECT_EQ(max_abs_diff(base.data().first(3 * 7), changed.data().first(3 * 7)), 0.0);
    EXPECT_GT(max_abs_diff(base.data().subspan(3 * 7), changed.data().subspan(3 * 7)), 0.0);
  }
}

TEST(SharedGradients, EqualSumOfUnsharedLayerGradients) {
  ModelConfig c;
  c.arch = Arch::lm;
  c.vocab_size = 6;
  c.d_embed = c.d_model = c.d_sandwich = 8;
  c.ffn_model = c.ffn_sandwich = 12;
  c.layers_dec = 2;
  c.heads = 2;
  c.max_len = 8;
  c.scheme = Scheme::all;
  Rng rng(14);
  const Subformer shared = build(c, rng);
  randomise(shared, 15);
  c.scheme = Scheme::none;
  Rng rng2(16);
  const Subformer plain = build(c, rng2);
  for (const auto& e : plain.registry.distinct()) {
    std::string name = e.name;
    if (auto pos = name.find("layers.1."); pos != std::string::npos) name.replace(pos, 9, "layers.0.");
    const Tensor src = *shared.registry.find(name);
    std::copy(src.data().begin(), src.data().end(), e.tensor.mutable_data().begin());
  }

  Batch batch;
  batch.input = TokenBatch::from({{0, 3, 4, 5, 1}, {0, 2, 2}});
  batch.labels = {3, 4, 5, 1, 2, 2, 2, 5, kIgnoreLabel, kIgnoreLabel};
  auto grads = [&](const Subformer& m) {
    Tape::current().clear();
    for (const auto& e : m.registry.distinct()) e.tensor.zero_grad();
    const Tensor loss = batch_loss(m, batch, 0.1);
    backward(loss);
    Tape::current().clear();
    return loss.item();
  };
  EXPECT_EQ(grads(shared), grads(plain));

  double worst = 0.0;
  for (const auto& e : shared.registry.distinct()) {
    std::vector<double> expect(e.tensor.numel(), 0.0);
    auto accumulate = [&](const std::string& name) {
      const Tensor t = *plain.registry.find(name);
      for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += t.grad()[i];
    };
    if (e.name.find("layers.0.") != std::string::npos) {
      std::string other = e.name;
      other.replace(other.find("layers.0."), 9, "layers.1.");
      accumulate(e.name);
      accumulate(other);
    } else {
      accumulate(e.name);
    }
    worst = std::max(worst, max_abs_diff(e.tensor.grad(), expect));
  }
  EXPECT_LE(worst, 1e-10);
}

}  // namespace
}  // namespace subformer
