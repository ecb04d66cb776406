// SPDX-License-Identifier: Apache-2.0
//
// Pretraining regimes: a single objective (PFS), CLM followed by MLM
// (biphasic), and MLM continued pretraining from a saved checkpoint (CPT).

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "bplm/checkpoint.hpp"
#include "bplm/data.hpp"
#include "bplm/objectives.hpp"
#include "bplm/optim.hpp"

namespace bplm {

struct PhaseSpec {
  Objective objective = Objective::kClm;
  std::int64_t steps = 0;
  bool operator==(const PhaseSpec&) const = default;
};

struct TrainConfig {
  std::vector<PhaseSpec> plan;
  WsdSchedule schedule;
  /// When false the decay window is dropped and the run ends on the plateau.
  bool decay_applied_at_end = true;
  double mask_ratio = 0.4;
  CorruptionMix corruption;
  /// Upper bound on rows × max sequence length per step; 0 disables the check.
  std::size_t tokens_per_step = 0;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;
  AdamWHyper adam;
  double clip_norm = 1.0;
  bool reset_optimizer_at_switch = false;

  std::int64_t total_steps() const;
  WsdSchedule effective_schedule() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NotDecayedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  std::int64_t step = 0;
  std::size_t phase = 0;
  Objective objective = Objective::kClm;
  double lr = 0.0;
  double loss = 0.0;
  double masked_fraction = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

struct RunHooks {
  /// Called every `checkpoint_every` steps and once at the end of the run.
  std::function<void(const Checkpoint&)> on_checkpoint;
  /// Called before the first step of each non-empty phase.
  std::function<void(std::size_t phase, const PhaseSpec&, const Checkpoint&)> on_phase_start;
  std::function<void(const StepRecord&)> on_step;
};

struct RunResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> trace;
};

/// Fresh model and optimizer state for `cfg`.
Checkpoint initial_state(const ModelConfig& model, const TrainConfig& cfg);

RunResult run_pfs(const ModelConfig& model, const TrainConfig& cfg, const BatchStream& data,
                  const RunHooks& hooks = {});
RunResult run_biphasic(const ModelConfig& model, const TrainConfig& cfg,
                       const BatchStream& data, const RunHooks& hooks = {});

/// Continues a PFS or biphasic run from an intermediate checkpoint. The
/// result is bit-identical to the uninterrupted run.
RunResult resume_run(const Checkpoint& from, const TrainConfig& cfg, const BatchStream& data,
                     const RunHooks& hooks = {});

/// Schedule used for continued pretraining: warmup over ceil(10%) of the
/// steps and decay over the final ceil(5%).
WsdSchedule cpt_schedule(double peak_lr, std::int64_t cpt_steps);

/// MLM continued pretraining from `base` with fresh optimizer moments.
/// Refuses a base that has not finished its decay unless `force` is set.
/// cpt_steps == 0 returns `base` unchanged.
RunResult run_cpt(const Checkpoint& base, std::int64_t cpt_steps, const TrainConfig& cfg,
                  const BatchStream& data, const RunHooks& hooks = {}, bool force = false);

/// Continues an interrupted CPT run.
RunResult resume_cpt(const Checkpoint& from, std::int64_t cpt_steps, const TrainConfig& cfg,
                     const BatchStream& data, const RunHooks& hooks = {});

/// Phase plans for the two regimes.
std::vector<PhaseSpec> pfs_plan(Objective objective, std::int64_t steps);
std::vector<PhaseSpec> biphasic_plan(std::int64_t clm_steps, std::int64_t mlm_steps);

/// step,phase,objective,lr,loss,masked_fraction,wall_ms
/// wall_ms is written as 0 unless `timing` is set, keeping reruns byte-identical.
void write_trace_csv(std::ostream& os, const std::vector<StepRecord>& trace, bool timing);

}  // namespace bplm
