// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "bplm/finetune.hpp"
#include "bplm/pretrain.hpp"

using namespace bplm;

namespace {

Checkpoint backbone() {
  ModelConfig m;
  m.layers = 1;
  m.embed_dim = 8;
  m.ffn_dim = 16;
  m.heads = 2;
  m.kv_heads = 1;
  m.vocab_size = 64;
  m.max_seq_len = 32;
  TrainConfig t;
  t.seed = 1;
  return initial_state(m, t);
}

std::size_t count_lines(const std::string& s) { return std::count(s.begin(), s.end(), '\n'); }

}  // namespace

TEST(Finetune, HeadShapes) {
  const auto o = TaskDataOptions::fitted(64);
  EXPECT_EQ(infer_head(Task::kSc, gen_task_data(Task::kSc, 40, 1, o)).outputs, 2u);
  EXPECT_EQ(infer_head(Task::kTc, gen_task_data(Task::kTc, 40, 1, o)).outputs, 1 + 2 * o.entity_types);
  EXPECT_EQ(infer_head(Task::kQa, gen_task_data(Task::kQa, 40, 1, o)).outputs, 2u);
  EXPECT_EQ(infer_head(Task::kIr, gen_task_data(Task::kIr, 40, 1, o)).outputs, 0u);
}

TEST(Finetune, ModelDropsLmHeadAndAddsTaskHead) {
  const auto base = backbone();
  const auto m = make_finetune_model(base, {Task::kSc, 3}, 0);
  EXPECT_FALSE(m.params.contains("head.weight"));
  ASSERT_TRUE(m.params.contains(kTaskHeadName));
  EXPECT_EQ(m.params.at(kTaskHeadName).shape(), (Shape{8, 3}));
  EXPECT_FALSE(m.params.at("embed.tokens").same_storage(base.params.at("embed.tokens")));
  EXPECT_TRUE(m.params.at("embed.tokens").clone().data().size() > 0);
  EXPECT_FALSE(make_finetune_model(base, {Task::kIr, 0}, 0).params.contains(kTaskHeadName));
}

TEST(Finetune, DecodeQa) {
  const std::vector<double> s{5, 1, 0}, e{0, 0, 9};
  EXPECT_FALSE(decode_qa(s, e).has_value());
  const std::vector<double> s2{0, 1, 9, 0}, e2{0, 8, 1, 0};
  EXPECT_EQ(decode_qa(s2, e2), (TokenSpan{2, 2}));
  const std::vector<double> e3{0, 0, 1, 8};
  EXPECT_EQ(decode_qa(s2, e3), (TokenSpan{2, 3}));
}

TEST(Finetune, InfoNceMatchesHandComputation) {
  Tape tape;
  auto q = Tensor::from({2, 2}, {1, 0, 0, 2});
  auto d = Tensor::from({2, 2}, {3, 0, 1, 1});
  const std::vector<std::int64_t> tgt{0, 1};
  const double loss = info_nce(tape, q, d, tgt, 0.5).item();
  const double c = 1 / std::sqrt(2.0);
  // row 0: sims {1, c}; row 1: sims {0, c}
  const double l0 = -(1 / 0.5) + std::log(std::exp(1 / 0.5) + std::exp(c / 0.5));
  const double l1 = -(c / 0.5) + std::log(std::exp(0.0) + std::exp(c / 0.5));
  EXPECT_NEAR(loss, 0.5 * (l0 + l1), 1e-12);
}

TEST(Finetune, StepsAreOneEpochCappedByMax) {
  FinetuneOptions o;
  EXPECT_EQ(finetune_steps(100, o), 4);
  EXPECT_EQ(finetune_steps(64, o), 2);
  o.max_steps = 3;
  EXPECT_EQ(finetune_steps(1000, o), 3);
}

TEST(Finetune, DeterministicAndLearnsPlantedKeywords) {
  const auto base = backbone();
  const auto splits = gen_task_data(Task::kSc, 400, 2, TaskDataOptions::fitted(64));
  FinetuneOptions o;
  o.batch_size = 8;
  const auto a = finetune(base, Task::kSc, splits, 5e-4, 0, o, 2e-2);
  const auto b = finetune(base, Task::kSc, splits, 5e-4, 0, o, 2e-2);
  EXPECT_TRUE(a.params.bit_equal(b.params));
  EXPECT_GT(evaluate(a, splits.test).value, 0.8);
  EXPECT_EQ(evaluate(a, splits.test).metric, "accuracy");
}

TEST(Finetune, EvaluateEveryTask) {
  const auto base = backbone();
  const auto o = TaskDataOptions::fitted(64);
  FinetuneOptions fo;
  fo.max_steps = 2;
  for (Task task : {Task::kTc, Task::kQa, Task::kIr}) {
    const auto splits = gen_task_data(task, 60, 3, o);
    const auto m = finetune(base, task, splits, 1e-4, 0, fo);
    const auto r = evaluate(m, splits.test);
    EXPECT_EQ(r.metric, metric_name(task));
    EXPECT_GE(r.value, 0.0);
    EXPECT_LE(r.value, 1.0);
  }
}

TEST(Grid, SelectionTiesGoToSmallerRate) {
  const std::vector<RunCell> cells{{2e-5, 0, 0.5, 0}, {1e-5, 0, 0.5, 0}, {5e-5, 0, 0.4, 0}};
  EXPECT_EQ(select_learning_rate(cells), 1e-5);
}

TEST(Grid, SpecValidation) {
  GridSearchSpec s;
  EXPECT_NO_THROW(s.validate());
  s.learning_rates = {1e-3};
  EXPECT_ANY_THROW(s.validate());
  EXPECT_NO_THROW(s.validate(true));
  GridSearchSpec seeds;
  seeds.seeds = {0, 1};
  EXPECT_ANY_THROW(seeds.validate());
}

TEST(Grid, ThreadCountDoesNotChangeResults) {
  const GridSearchSpec spec;
  auto runner = [](double lr, std::uint64_t seed) {
    return RunCell{lr, seed, std::sin(lr * 1e5 + seed), std::cos(lr * 1e5 + seed)};
  };
  const auto a = run_grid(Task::kSc, "x", spec, runner, 1);
  const auto b = run_grid(Task::kSc, "x", spec, runner, 4);
  ASSERT_EQ(a.runs.size(), 30u);
  std::ostringstream ra, rb, aa, ab;
  write_runs_csv(ra, a);
  write_runs_csv(rb, b);
  write_aggregate_csv(aa, a);
  write_aggregate_csv(ab, b);
  EXPECT_EQ(ra.str(), rb.str());
  EXPECT_EQ(aa.str(), ab.str());
  EXPECT_EQ(count_lines(ra.str()), 61u);
  EXPECT_EQ(ra.str().substr(0, ra.str().find('\n')), "task,dataset,lr,seed,split,metric,value");
  EXPECT_EQ(aa.str().substr(0, aa.str().find('\n')), "task,dataset,metric,selected_lr,split,mean,ci95,n,note");

  EXPECT_THROW(run_grid(Task::kSc, "x", spec,
                        [](double lr, std::uint64_t seed) -> RunCell {
                          if (seed == 3) throw std::runtime_error("cell failed");
                          return {lr, seed, 0, 0};
                        },
                        3),
               std::runtime_error);
}

TEST(Grid, SingleSeedHasNoInterval) {
  GridSearchSpec spec;
  spec.seeds = {0};
  const auto r = run_grid(Task::kSc, "x", spec, [](double lr, std::uint64_t s) { return RunCell{lr, s, lr, 0.5}; });
  EXPECT_EQ(r.selected_lr, 5e-4);
  EXPECT_FALSE(r.test.ci95.has_value());
  std::ostringstream os;
  write_aggregate_csv(os, r);
  EXPECT_NE(os.str().find("single_seed"), std::string::npos);
}
