// SPDX-License-Identifier: Apache-2.0
//
// Task heads, fine-tuning, and the learning-rate grid search.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bplm/checkpoint.hpp"
#include "bplm/data.hpp"
#include "bplm/metrics.hpp"
#include "bplm/model.hpp"
#include "bplm/optim.hpp"

namespace bplm {

inline constexpr std::array<double, 6> kStudyLearningRates = {1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4};
inline constexpr std::size_t kStudySeedCount = 5;
inline constexpr const char* kTaskHeadName = "task_head.weight";

/// Encoder forward pass; always bidirectional.
ForwardResult encode(Tape& tape, const Parameters& params, const ModelConfig& cfg,
                     std::span<const TokenId> tokens);

/// Mean-pooled bidirectional embedding -> [d].
Tensor embed_sequence(Tape& tape, const Parameters& params, const ModelConfig& cfg,
                      std::span<const TokenId> tokens);

/// Output width of the linear head (0 for IR, which has none).
struct HeadShape {
  Task task = Task::kSc;
  std::size_t outputs = 0;
};

/// Head width implied by the labels present in `splits`.
HeadShape infer_head(Task task, const TaskSplits& splits);

struct FinetuneOptions {
  std::size_t batch_size = 32;
  std::int64_t max_steps = 1000;
  double temperature = 0.05;
  /// Adds each query's labeled negatives to the in-batch candidates.
  bool ir_hard_negatives = false;
  double head_init_std = 0.02;
  double clip_norm = 1.0;
  AdamWHyper adam;
};

/// Backbone copy plus task head. The LM output projection is dropped.
struct FinetunedModel {
  ModelConfig cfg;
  HeadShape head;
  Parameters params;
};

FinetunedModel make_finetune_model(const Checkpoint& base, const HeadShape& head, std::uint64_t seed,
                                   const FinetuneOptions& opts = {});

/// InfoNCE: row i of `queries` [B×d] should pick document targets[i] among
/// the rows of `docs` [N×d]; similarity is cosine / temperature.
Tensor info_nce(Tape& tape, const Tensor& queries, const Tensor& docs,
                std::span<const std::int64_t> targets, double temperature);

/// Mean loss over a batch of examples of one task.
Tensor task_loss(Tape& tape, const FinetunedModel& model, std::span<const TaskExample> batch,
                 const FinetuneOptions& opts = {});

struct Prediction {
  int label = -1;
  std::vector<int> tags;
  std::optional<TokenSpan> answer;
  std::vector<std::size_t> ranking;  // IR: candidate indices, positive = 0
};

/// QA decoding: independent argmax of start and end scores; start at the
/// sentinel position 0 means no answer, end < start is repaired to end = start.
std::optional<TokenSpan> decode_qa(std::span<const double> start_scores, std::span<const double> end_scores);

Prediction predict(const FinetunedModel& model, const TaskExample& example);

struct EvalResult {
  std::string metric;
  double value = 0.0;
  std::size_t skipped = 0;  // IR queries without a relevant document
  double token_f1 = 0.0;    // TC only
};

const char* metric_name(Task task);
EvalResult evaluate(const FinetunedModel& model, std::span<const TaskExample> examples);

/// min(max_steps, ceil(train_size / batch_size)).
std::int64_t finetune_steps(std::size_t train_size, const FinetuneOptions& opts);

/// One fine-tuning run with the warmup/linear-decay schedule.
/// `fixed_lr` replaces the schedule with a constant rate when set.
FinetunedModel finetune(const Checkpoint& base, Task task, const TaskSplits& splits, double lr,
                        std::uint64_t seed, const FinetuneOptions& opts = {},
                        std::optional<double> fixed_lr = std::nullopt);

struct GridSearchSpec {
  std::vector<double> learning_rates{kStudyLearningRates.begin(), kStudyLearningRates.end()};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::int64_t max_steps = 1000;
  std::size_t batch_size = 32;

  /// Rejects grids other than the study grid unless `allow_nonstudy`.
  void validate(bool allow_nonstudy = false) const;
};

struct RunCell {
  double lr = 0.0;
  std::uint64_t seed = 0;
  double validation = 0.0;
  double test = 0.0;
};

struct RunReport {
  Task task = Task::kSc;
  std::string dataset;
  std::string metric;
  std::vector<RunCell> runs;
  double selected_lr = 0.0;
  SeedStats validation;
  SeedStats test;
};

/// Learning rate with the highest mean validation metric; ties go to the
/// smaller rate.
double select_learning_rate(std::span<const RunCell> runs);

/// Builds the report from finished cells.
RunReport aggregate_runs(Task task, const std::string& dataset, const std::string& metric,
                         std::vector<RunCell> runs);

using CellRunner = std::function<RunCell(double lr, std::uint64_t seed)>;

/// Evaluates every (lr, seed) cell with `runner` on up to `jobs` threads.
RunReport run_grid(Task task, const std::string& dataset, const GridSearchSpec& spec,
                   const CellRunner& runner, std::size_t jobs = 1);

/// Fine-tunes `base` for every cell and reports validation/test metrics.
RunReport run_grid_search(const Checkpoint& base, Task task, const std::string& dataset,
                          const TaskSplits& splits, const GridSearchSpec& spec,
                          const FinetuneOptions& opts = {}, std::size_t jobs = 1);

/// NDCG@10 of an IR model on another dataset, without further training.
EvalResult zero_shot_eval(const FinetunedModel& model, std::span<const TaskExample> examples);

/// task,dataset,lr,seed,split,metric,value
void write_runs_csv(std::ostream& os, const RunReport& report, bool header = true);
/// task,dataset,metric,selected_lr,split,mean,ci95,n,note
void write_aggregate_csv(std::ostream& os, const RunReport& report, bool header = true);

}  // namespace bplm
