// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "bplm/data.hpp"
#include "bplm/objectives.hpp"
#include "bplm/rng.hpp"

using namespace bplm;

namespace {

ModelConfig small(std::size_t vocab = 16) {
  ModelConfig c;
  c.layers = 1;
  c.embed_dim = 8;
  c.ffn_dim = 16;
  c.heads = 2;
  c.kv_heads = 1;
  c.vocab_size = vocab;
  c.max_seq_len = 32;
  return c;
}

}  // namespace

TEST(Objectives, NamesRoundTrip) {
  EXPECT_EQ(parse_objective("clm"), Objective::kClm);
  EXPECT_EQ(parse_objective(to_string(Objective::kMlm)), Objective::kMlm);
  EXPECT_ANY_THROW(parse_objective("mlm2"));
  EXPECT_EQ(attention_mode_for(Objective::kClm), AttentionMode::kCausal);
  EXPECT_EQ(attention_mode_for(Objective::kMlm), AttentionMode::kBidirectional);
  EXPECT_TRUE(is_study_ratio(0.3));
  EXPECT_FALSE(is_study_ratio(0.15));
}

TEST(Objectives, ClmTargetsShiftAndSkipPadding) {
  const std::vector<TokenId> t{5, 6, 7, 0};
  const Mask pad{0, 0, 0, 1};
  const auto tg = clm_targets(t, pad);
  EXPECT_EQ(tg, (std::vector<std::int64_t>{6, 7, kIgnoreIndex, kIgnoreIndex}));
  EXPECT_EQ(clm_targets(std::vector<TokenId>{5, 6}, {}), (std::vector<std::int64_t>{6, kIgnoreIndex}));
}

TEST(Objectives, SelectMaskSkipsPaddingAndIsNeverEmpty) {
  std::vector<TokenId> t{5, 6, 7, 8, 0, 0};
  const Mask pad{0, 0, 0, 0, 1, 1};
  for (std::uint64_t s = 0; s < 500; ++s) {
    const auto plan = select_mask(t, pad, 0.2, s);
    ASSERT_FALSE(plan.masked_positions.empty());
    ASSERT_TRUE(std::is_sorted(plan.masked_positions.begin(), plan.masked_positions.end()));
    for (std::size_t i = 0; i < plan.masked_positions.size(); ++i) {
      const auto p = plan.masked_positions[i];
      ASSERT_LT(p, 4u);
      ASSERT_EQ(plan.original_targets[i], t[p]);
    }
  }
  EXPECT_EQ(select_mask(t, pad, 0.4, 17), select_mask(t, pad, 0.4, 17));
}

TEST(Objectives, ApplyMaskDefaultAndMix) {
  std::vector<TokenId> t(200, 9);
  const auto plan = select_mask(t, {}, 0.5, 3);
  const auto c = apply_mask(t, plan);
  std::set<std::size_t> chosen(plan.masked_positions.begin(), plan.masked_positions.end());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(c[i], chosen.count(i) ? Vocab::kMask : 9);

  CorruptionMix keep{0.0, 0.0, 1.0};
  EXPECT_EQ(apply_mask(t, plan, keep, 1), t);
  CorruptionMix rnd{0.0, 1.0, 0.0};
  const auto r = apply_mask(t, plan, rnd, 1, Vocab::kFirstSymbol, 9);
  for (auto p : plan.masked_positions) {
    EXPECT_GE(r[p], Vocab::kFirstSymbol);
    EXPECT_LT(r[p], 9);
  }
  CorruptionMix bad{0.5, 0.1, 0.1};
  EXPECT_ANY_THROW(bad.validate());
}

TEST(Objectives, AttachMasksIsReproducible) {
  LmBatch b;
  b.rows = 2;
  b.width = 4;
  b.tokens = {5, 6, 7, 8, 5, 6, 0, 0};
  b.is_pad = {0, 0, 0, 0, 0, 0, 1, 1};
  auto b2 = b;
  attach_masks(b, 0.4, 11);
  attach_masks(b2, 0.4, 11);
  EXPECT_EQ(b, b2);
  ASSERT_EQ(b.plans.size(), 2u);
  std::size_t masked = b.plans[0].masked_positions.size() + b.plans[1].masked_positions.size();
  EXPECT_DOUBLE_EQ(masked_fraction(b), masked / 6.0);
}

TEST(Objectives, UniformLogitsGiveLogV) {
  Tape tape;
  const std::vector<TokenId> t{3, 4, 5, 6};
  auto logits = Tensor::zeros({4, 12}, true);
  EXPECT_NEAR(clm_loss(tape, logits, t).item(), std::log(12.0), 1e-14);
  const auto plan = select_mask(t, {}, 0.5, 2);
  EXPECT_NEAR(mlm_loss(tape, logits, plan).item(), std::log(12.0), 1e-14);
}

TEST(Objectives, PretrainLossIsMeanOfRowLosses) {
  const auto cfg = small();
  const auto p = init_params(cfg, 1);
  LmBatch b;
  b.rows = 2;
  b.width = 5;
  b.tokens = {3, 4, 5, 6, 7, 8, 9, 10, 0, 0};
  b.is_pad = {0, 0, 0, 0, 0, 0, 0, 0, 1, 1};
  Tape tape = Tape::inference();
  const double both = pretrain_loss(tape, Objective::kClm, p, cfg, b).item();
  const std::vector<TokenId> r0{3, 4, 5, 6, 7}, r1{8, 9, 10};
  const double l0 = clm_loss(tape, forward(tape, p, cfg, r0, AttentionMode::kCausal).logits, r0).item();
  const double l1 = clm_loss(tape, forward(tape, p, cfg, r1, AttentionMode::kCausal).logits, r1).item();
  EXPECT_NEAR(both, 0.5 * (l0 + l1), 1e-12);
}

TEST(Objectives, SourceCrossEntropyIsAtLeastEntropyRate) {
  CorpusSpec spec;
  spec.alphabet = 6;
  spec.rows = RowMode::kPermutedShared;
  spec.seed = 4;
  const auto src = MarkovSource::random(spec);
  std::vector<std::vector<TokenId>> seqs;
  for (std::uint64_t i = 0; i < 5; ++i) seqs.push_back(src.sample(20, i));
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto cfg = small();
    EXPECT_GE(source_cross_entropy(init_params(cfg, s), cfg, seqs, src), src.entropy_rate() - 1e-9);
  }
}
