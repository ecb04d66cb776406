// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "bplm/pretrain.hpp"

using namespace bplm;

namespace {

struct Fixture {
  ModelConfig model;
  BatchStream stream;
  TrainConfig base;

  static BatchStream make_stream(std::size_t max_epochs = 0) {
    CorpusSpec cs;
    cs.alphabet = 8;
    cs.min_len = 6;
    cs.max_len = 12;
    cs.target_tokens = 1500;
    PackingSpec ps;
    ps.batch_rows = 2;
    ps.min_len = 6;
    ps.max_len = 12;
    ps.max_epochs = max_epochs;
    return BatchStream(gen_corpus(cs).sequences, ps);
  }

  Fixture() : stream(make_stream()) {
    model.layers = 1;
    model.embed_dim = 8;
    model.ffn_dim = 16;
    model.heads = 2;
    model.kv_heads = 1;
    model.vocab_size = 12;
    model.max_seq_len = 12;
    base.schedule = {1e-3, 1, 8, 2};
    base.seed = 5;
  }

  TrainConfig with(std::vector<PhaseSpec> plan) const {
    auto c = base;
    c.plan = std::move(plan);
    return c;
  }
};

}  // namespace

TEST(Pretrain, PlanValidation) {
  Fixture f;
  EXPECT_THROW(run_pfs(f.model, f.with(pfs_plan(Objective::kClm, 7)), f.stream), ConfigError);
  EXPECT_THROW(run_pfs(f.model, f.with(biphasic_plan(4, 4)), f.stream), ConfigError);
  EXPECT_THROW(run_biphasic(f.model, f.with({{Objective::kMlm, 4}, {Objective::kClm, 4}}), f.stream),
               ConfigError);
  // Switch inside the decay window.
  EXPECT_THROW(run_biphasic(f.model, f.with(biphasic_plan(7, 1)), f.stream), ConfigError);
  EXPECT_NO_THROW(run_biphasic(f.model, f.with(biphasic_plan(6, 2)), f.stream));
  auto big = f.model;
  big.max_seq_len = 8;
  EXPECT_THROW(run_pfs(big, f.with(pfs_plan(Objective::kClm, 8)), f.stream), ConfigError);
  auto budget = f.with(pfs_plan(Objective::kClm, 8));
  budget.tokens_per_step = 10;
  EXPECT_THROW(run_pfs(f.model, budget, f.stream), ConfigError);
}

TEST(Pretrain, DataExhaustionIsReportedUpFront) {
  Fixture f;
  const auto tiny = Fixture::make_stream(1);
  auto cfg = f.with(pfs_plan(Objective::kClm, 8));
  cfg.schedule.total_steps = static_cast<std::int64_t>(tiny.capacity()) + 4;
  cfg.plan = pfs_plan(Objective::kClm, cfg.schedule.total_steps);
  EXPECT_THROW(run_pfs(f.model, cfg, tiny), DataExhausted);
}

TEST(Pretrain, DeterministicTraceAndHistory) {
  Fixture f;
  const auto cfg = f.with(biphasic_plan(3, 5));
  const auto a = run_biphasic(f.model, cfg, f.stream);
  const auto b = run_biphasic(f.model, cfg, f.stream);
  EXPECT_TRUE(a.checkpoint.bit_equal(b.checkpoint));
  EXPECT_EQ(history_str(a.checkpoint.history), "clm:3,mlm:5");
  ASSERT_EQ(a.trace.size(), 8u);
  EXPECT_EQ(a.trace[2].objective, Objective::kClm);
  EXPECT_EQ(a.trace[3].objective, Objective::kMlm);
  EXPECT_EQ(a.trace[3].phase, 1u);
  EXPECT_EQ(a.trace[0].masked_fraction, 0.0);
  EXPECT_GT(a.trace[4].masked_fraction, 0.0);
  EXPECT_EQ(a.checkpoint.optimizer.step_count, 8);
  EXPECT_TRUE(a.checkpoint.decayed());

  std::ostringstream csv;
  write_trace_csv(csv, a.trace, false);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "step,phase,objective,lr,loss,masked_fraction,wall_ms");
}

TEST(Pretrain, SeedChangesTheRun) {
  Fixture f;
  auto cfg = f.with(pfs_plan(Objective::kMlm, 8));
  const auto a = run_pfs(f.model, cfg, f.stream);
  cfg.seed = 6;
  EXPECT_FALSE(run_pfs(f.model, cfg, f.stream).checkpoint.params.bit_equal(a.checkpoint.params));
}

TEST(Pretrain, CheckpointCadence) {
  Fixture f;
  auto cfg = f.with(pfs_plan(Objective::kClm, 8));
  std::vector<std::int64_t> steps;
  RunHooks hooks;
  hooks.on_checkpoint = [&](const Checkpoint& c) { steps.push_back(c.step); };
  cfg.checkpoint_every = 3;
  run_pfs(f.model, cfg, f.stream, hooks);
  EXPECT_EQ(steps, (std::vector<std::int64_t>{3, 6, 8}));
  steps.clear();
  cfg.checkpoint_every = 4;
  run_pfs(f.model, cfg, f.stream, hooks);
  EXPECT_EQ(steps, (std::vector<std::int64_t>{4, 8}));
}

TEST(Pretrain, OptimizerResetAtSwitchIsOptIn) {
  Fixture f;
  auto cfg = f.with(biphasic_plan(4, 4));
  std::optional<AdamWState> at_switch;
  RunHooks hooks;
  hooks.on_phase_start = [&](std::size_t phase, const PhaseSpec&, const Checkpoint& c) {
    if (phase == 1) at_switch = c.optimizer;
  };
  run_biphasic(f.model, cfg, f.stream, hooks);
  ASSERT_TRUE(at_switch);
  EXPECT_NE(at_switch->moments.begin()->second.m, std::vector<double>(at_switch->moments.begin()->second.m.size()));
  cfg.reset_optimizer_at_switch = true;
  const auto reset = run_biphasic(f.model, cfg, f.stream).checkpoint;
  EXPECT_EQ(reset.optimizer.step_count, 8);
}

TEST(Pretrain, NoDecayEndsOnPlateau) {
  Fixture f;
  auto cfg = f.with(pfs_plan(Objective::kClm, 8));
  cfg.decay_applied_at_end = false;
  const auto r = run_pfs(f.model, cfg, f.stream);
  EXPECT_EQ(r.trace.back().lr, cfg.schedule.peak_lr);
  EXPECT_FALSE(r.checkpoint.decayed());
}

TEST(Pretrain, ContinuedPretraining) {
  Fixture f;
  const auto base = run_pfs(f.model, f.with(pfs_plan(Objective::kClm, 8)), f.stream).checkpoint;
  const auto cfg = f.base;
  const auto cpt = run_cpt(base, 6, cfg, f.stream);
  EXPECT_EQ(history_str(cpt.checkpoint.history), "clm:8,mlm:6");
  EXPECT_EQ(cpt.checkpoint.schedule, cpt_schedule(cfg.schedule.peak_lr, 6));
  EXPECT_EQ(cpt.checkpoint.optimizer.step_count, 6);
  EXPECT_TRUE(run_cpt(base, 0, cfg, f.stream).checkpoint.bit_equal(base));

  auto plateau_cfg = f.with(pfs_plan(Objective::kClm, 8));
  plateau_cfg.decay_applied_at_end = false;
  const auto plateau = run_pfs(f.model, plateau_cfg, f.stream).checkpoint;
  EXPECT_THROW(run_cpt(plateau, 6, cfg, f.stream), NotDecayedError);
  EXPECT_NO_THROW(run_cpt(plateau, 6, cfg, f.stream, {}, true));

  const auto s = cpt_schedule(1e-3, 2000);
  EXPECT_EQ(s.warmup_steps, 200);
  EXPECT_EQ(s.decay_steps, 100);
  EXPECT_EQ(cpt_schedule(1e-3, 15).warmup_steps, 2);
}
