// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "bplm/model.hpp"
#include "bplm/rng.hpp"

using namespace bplm;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.layers = 2;
  c.embed_dim = 16;
  c.ffn_dim = 32;
  c.heads = 4;
  c.kv_heads = 2;
  c.vocab_size = 20;
  c.max_seq_len = 16;
  return c;
}

std::vector<TokenId> seq(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenId> t(n);
  for (auto& x : t) x = 3 + static_cast<TokenId>(rng.below(17));
  return t;
}

}  // namespace

TEST(Model, ValidateRejectsBadShapes) {
  auto c = small();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small();
  c.kv_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small();
  c.embed_dim = 12;  // head_dim 3 is odd, rotary pairs need an even width
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_NO_THROW(small().validate());
}

TEST(Model, LayoutAndInit) {
  const auto c = small();
  const auto p = init_params(c, 1);
  const auto layout = parameter_layout(c);
  EXPECT_EQ(p.size(), layout.size());
  EXPECT_EQ(p.size(), 1 + 9 * c.layers + 1 + 1);
  EXPECT_EQ(p.at("layer.0.attn.wk").shape(), (Shape{16, 8}));
  EXPECT_EQ(p.at("head.weight").shape(), (Shape{16, 20}));
  for (double g : p.at("final_norm.weight").data()) EXPECT_EQ(g, 1.0);
  EXPECT_TRUE(is_norm_gain("layer.1.ffn_norm.weight"));
  EXPECT_FALSE(is_norm_gain("layer.1.ffn.w_up"));
  EXPECT_NO_THROW(check_parameters(p, c));

  EXPECT_TRUE(p.bit_equal(init_params(c, 1)));
  EXPECT_FALSE(p.bit_equal(init_params(c, 2)));

  auto tied = c;
  tied.tie_embeddings = true;
  EXPECT_FALSE(init_params(tied, 1).contains("head.weight"));
  EXPECT_THROW(check_parameters(p, tied), std::invalid_argument);
}

TEST(Model, InitStdMatchesConfig) {
  auto c = small();
  c.embed_dim = 64;
  c.ffn_dim = 128;
  c.vocab_size = 256;
  const auto p = init_params(c, 9);
  double ss = 0;
  std::size_t n = 0;
  for (const auto& [name, t] : p) {
    if (is_norm_gain(name)) continue;
    for (double x : t.data()) ss += x * x;
    n += t.numel();
  }
  EXPECT_NEAR(std::sqrt(ss / n), c.init_std, 0.01);
}

TEST(Model, ForwardShapesAndModes) {
  const auto c = small();
  const auto p = init_params(c, 1);
  Tape tape = Tape::inference();
  const auto tokens = seq(9, 1);
  auto r = forward(tape, p, c, tokens, AttentionMode::kCausal);
  EXPECT_EQ(r.hidden.shape(), (Shape{9, 16}));
  EXPECT_EQ(r.logits.shape(), (Shape{9, 20}));
  auto h = forward(tape, p, c, tokens, AttentionMode::kBidirectional, {}, false);
  EXPECT_FALSE(h.logits.defined());
  EXPECT_ANY_THROW(forward(tape, p, c, seq(17, 1), AttentionMode::kCausal));
  std::vector<TokenId> bad{3, 20};
  EXPECT_ANY_THROW(forward(tape, p, c, bad, AttentionMode::kCausal));
}

TEST(Model, CausalAttentionProbabilitiesAreLowerTriangular) {
  const auto c = small();
  const auto p = init_params(c, 1);
  Tape tape = Tape::inference();
  auto h = Tensor::from({5, 16}, std::vector<double>(80, 0.3));
  Rng rng(2);
  for (auto& x : h.mutable_data()) x = rng.normal();
  AttentionProbe probe;
  attention(tape, h, attention_weights(p, 0), c, AttentionMode::kCausal, {}, &probe);
  ASSERT_EQ(probe.head_probs.size(), c.heads);
  for (const auto& pr : probe.head_probs) {
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        if (j > i) EXPECT_EQ(pr.at(i, j), 0.0);
        s += pr.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Model, PaddedKeysNeverInfluenceRealPositions) {
  const auto c = small();
  const auto p = init_params(c, 4);
  auto a = seq(10, 3);
  auto b = a;
  b[8] = 5;
  b[9] = 6;
  const Mask pad{0, 0, 0, 0, 0, 0, 0, 0, 1, 1};
  Tape tape = Tape::inference();
  for (auto mode : {AttentionMode::kCausal, AttentionMode::kBidirectional}) {
    const auto la = forward(tape, p, c, a, mode, pad).logits;
    const auto lb = forward(tape, p, c, b, mode, pad).logits;
    for (std::size_t i = 0; i < 8 * c.vocab_size; ++i) ASSERT_EQ(la.at(i), lb.at(i));
  }
}

TEST(Model, MultiQueryAndFullHeadsBothWork) {
  for (std::size_t kv : {1u, 4u}) {
    auto c = small();
    c.kv_heads = kv;
    const auto p = init_params(c, 1);
    Tape tape = Tape::inference();
    EXPECT_EQ(forward(tape, p, c, seq(6, 2), AttentionMode::kCausal).logits.shape(), (Shape{6, 20}));
  }
}

TEST(Model, CloneIsDeep) {
  const auto c = small();
  auto p = init_params(c, 1);
  auto q = p.clone();
  EXPECT_TRUE(p.bit_equal(q));
  q.at("embed.tokens").clone();
  auto t = q.at("embed.tokens");
  t.mutable_data()[0] += 1.0;
  EXPECT_FALSE(p.bit_equal(q));
}
