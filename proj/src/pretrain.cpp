// SPDX-License-Identifier: Apache-2.0

#include "bplm/pretrain.hpp"

#include <chrono>
#include <cstdio>
#include <cmath>
#include <ostream>

#include "bplm/rng.hpp"

namespace bplm {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kMaskStream = 2;
constexpr std::uint64_t kCptMaskStream = 3;

std::string rng_tag(std::uint64_t seed) { return "seed=" + std::to_string(seed); }

void check_data(const ModelConfig& model, const TrainConfig& cfg, const BatchStream& data,
                std::int64_t steps) {
  const auto& spec = data.spec();
  if (spec.max_len > model.max_seq_len) {
    throw ConfigError("data max_len " + std::to_string(spec.max_len) + " exceeds model max_seq_len " +
                      std::to_string(model.max_seq_len));
  }
  if (cfg.tokens_per_step > 0 && spec.batch_rows * spec.max_len > cfg.tokens_per_step) {
    throw ConfigError("batch of " + std::to_string(spec.batch_rows) + " × " + std::to_string(spec.max_len) +
                      " tokens exceeds tokens_per_step " + std::to_string(cfg.tokens_per_step));
  }
  if (steps > 0 && data.capacity() < static_cast<std::size_t>(steps)) {
    throw DataExhausted("data stream holds " + std::to_string(data.capacity()) + " batches, run needs " +
                        std::to_string(steps));
  }
}

void check_common(const TrainConfig& cfg) {
  if (!(cfg.clip_norm > 0)) throw ConfigError("clip_norm must be positive");
  if (cfg.checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (!(cfg.mask_ratio > 0 && cfg.mask_ratio <= 1)) throw ConfigError("mask_ratio must be in (0, 1]");
  cfg.corruption.validate();
  for (const auto& p : cfg.plan) {
    if (p.steps < 0) throw ConfigError("phase step counts must be non-negative");
  }
}

void check_plan_total(const TrainConfig& cfg) {
  const auto sched = cfg.effective_schedule();
  try {
    sched.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (cfg.total_steps() != sched.total_steps) {
    throw ConfigError("phase steps sum to " + std::to_string(cfg.total_steps()) + " but schedule has " +
                      std::to_string(sched.total_steps) + " total steps");
  }
}

void validate_pfs(const TrainConfig& cfg) {
  check_common(cfg);
  if (cfg.plan.size() != 1 || cfg.plan[0].steps <= 0) {
    throw ConfigError("PFS needs exactly one phase with a positive step count");
  }
  check_plan_total(cfg);
}

void validate_biphasic(const TrainConfig& cfg) {
  check_common(cfg);
  if (cfg.plan.size() != 2 || cfg.plan[0].objective != Objective::kClm ||
      cfg.plan[1].objective != Objective::kMlm) {
    throw ConfigError("biphasic runs are one CLM phase followed by one MLM phase");
  }
  check_plan_total(cfg);
  const auto sched = cfg.effective_schedule();
  const std::int64_t boundary = cfg.plan[0].steps;
  if (boundary > 0 && boundary < sched.total_steps && boundary > sched.decay_start()) {
    throw ConfigError("objective switch at step " + std::to_string(boundary) +
                      " falls inside the decay window starting at " + std::to_string(sched.decay_start()));
  }
}

// Runs steps [state.step, end of plan). `plan` offsets are relative to
// step 0 of `state.schedule`.
void train_loop(Checkpoint& state, const std::vector<PhaseSpec>& plan, const TrainConfig& cfg,
                std::uint64_t mask_stream, const BatchStream& data, const RunHooks& hooks,
                std::vector<StepRecord>& trace) {
  std::int64_t total = 0;
  for (const auto& p : plan) total += p.steps;
  if (state.step > total) throw ConfigError("checkpoint is past the end of the plan");

  std::int64_t last_saved = -1;
  for (std::int64_t step = state.step; step < total; ++step) {
    // Locate the phase; empty phases never become active.
    std::size_t phase_idx = 0, ordinal = 0;
    std::int64_t start = 0;
    for (std::size_t i = 0; i < plan.size(); ++i) {
      if (plan[i].steps == 0) continue;
      if (step < start + plan[i].steps) {
        phase_idx = i;
        break;
      }
      start += plan[i].steps;
      ++ordinal;
    }
    const PhaseSpec& phase = plan[phase_idx];

    if (step == start) {
      if (ordinal > 0 && cfg.reset_optimizer_at_switch) {
        const auto count = state.optimizer.step_count;
        state.optimizer = AdamWState::fresh(state.params, cfg.adam);
        state.optimizer.step_count = count;
      }
      state.history.push_back({phase.objective, 0});
      if (hooks.on_phase_start) hooks.on_phase_start(ordinal, phase, state);
    }

    const auto t0 = std::chrono::steady_clock::now();
    LmBatch batch = data.batch(static_cast<std::size_t>(step));
    StepRecord rec;
    rec.step = step;
    rec.phase = ordinal;
    rec.objective = phase.objective;
    if (phase.objective == Objective::kMlm) {
      attach_masks(batch, cfg.mask_ratio, derive_seed(cfg.seed, mask_stream, static_cast<std::uint64_t>(step)),
                   Vocab::kMask, cfg.corruption, static_cast<TokenId>(state.model.vocab_size));
      rec.masked_fraction = masked_fraction(batch);
    }

    Tape tape;
    const Tensor loss = pretrain_loss(tape, phase.objective, state.params, state.model, batch);
    tape.backward(loss);
    rec.loss = loss.item();
    rec.grad_norm = global_grad_norm(state.params);
    clip_global_norm(state.params, cfg.clip_norm);
    rec.lr = wsd_lr(state.schedule, step);
    adamw_step(state.params, state.optimizer, rec.lr);
    state.params.zero_grad();

    state.step = step + 1;
    state.history.back().steps += 1;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    trace.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);

    if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(state);
      last_saved = state.step;
    }
  }
  if (hooks.on_checkpoint && last_saved != state.step) hooks.on_checkpoint(state);
}

void check_resume(const Checkpoint& from, const TrainConfig& cfg, const WsdSchedule& expected) {
  check_parameters(from.params, from.model);
  if (from.rng_state != rng_tag(cfg.seed)) {
    throw ConfigError("checkpoint was produced with '" + from.rng_state + "', config has '" +
                      rng_tag(cfg.seed) + "'");
  }
  if (!(from.schedule == expected)) throw ConfigError("checkpoint schedule does not match the run config");
}

}  // namespace

std::int64_t TrainConfig::total_steps() const {
  std::int64_t t = 0;
  for (const auto& p : plan) t += p.steps;
  return t;
}

WsdSchedule TrainConfig::effective_schedule() const {
  WsdSchedule s = schedule;
  if (!decay_applied_at_end) s.decay_steps = 0;
  return s;
}

std::vector<PhaseSpec> pfs_plan(Objective objective, std::int64_t steps) { return {{objective, steps}}; }

std::vector<PhaseSpec> biphasic_plan(std::int64_t clm_steps, std::int64_t mlm_steps) {
  return {{Objective::kClm, clm_steps}, {Objective::kMlm, mlm_steps}};
}

Checkpoint initial_state(const ModelConfig& model, const TrainConfig& cfg) {
  model.validate();
  Checkpoint c;
  c.model = model;
  c.params = init_params(model, derive_seed(cfg.seed, kInitStream));
  c.optimizer = AdamWState::fresh(c.params, cfg.adam);
  c.schedule = cfg.effective_schedule();
  c.rng_state = rng_tag(cfg.seed);
  return c;
}

RunResult run_pfs(const ModelConfig& model, const TrainConfig& cfg, const BatchStream& data,
                  const RunHooks& hooks) {
  validate_pfs(cfg);
  check_data(model, cfg, data, cfg.total_steps());
  RunResult out{initial_state(model, cfg), {}};
  train_loop(out.checkpoint, cfg.plan, cfg, kMaskStream, data, hooks, out.trace);
  return out;
}

RunResult run_biphasic(const ModelConfig& model, const TrainConfig& cfg, const BatchStream& data,
                       const RunHooks& hooks) {
  validate_biphasic(cfg);
  check_data(model, cfg, data, cfg.total_steps());
  RunResult out{initial_state(model, cfg), {}};
  train_loop(out.checkpoint, cfg.plan, cfg, kMaskStream, data, hooks, out.trace);
  return out;
}

RunResult resume_run(const Checkpoint& from, const TrainConfig& cfg, const BatchStream& data,
                     const RunHooks& hooks) {
  if (cfg.plan.size() == 1) {
    validate_pfs(cfg);
  } else {
    validate_biphasic(cfg);
  }
  check_resume(from, cfg, cfg.effective_schedule());
  check_data(from.model, cfg, data, cfg.total_steps());
  RunResult out{from.clone(), {}};
  train_loop(out.checkpoint, cfg.plan, cfg, kMaskStream, data, hooks, out.trace);
  return out;
}

WsdSchedule cpt_schedule(double peak_lr, std::int64_t cpt_steps) {
  WsdSchedule s;
  s.peak_lr = peak_lr;
  s.total_steps = cpt_steps;
  s.warmup_steps = (cpt_steps + 9) / 10;
  s.decay_steps = (cpt_steps + 19) / 20;
  return s;
}

RunResult run_cpt(const Checkpoint& base, std::int64_t cpt_steps, const TrainConfig& cfg,
                  const BatchStream& data, const RunHooks& hooks, bool force) {
  if (cpt_steps < 0) throw ConfigError("cpt_steps must be non-negative");
  check_common(cfg);
  check_parameters(base.params, base.model);
  if (!base.decayed() && !force) {
    throw NotDecayedError("base checkpoint stopped at step " + std::to_string(base.step) + " of " +
                          std::to_string(base.schedule.total_steps) +
                          " without a completed decay; pass force to continue anyway");
  }
  if (cpt_steps == 0) return {base.clone(), {}};
  check_data(base.model, cfg, data, cpt_steps);

  RunResult out;
  Checkpoint& c = out.checkpoint;
  c.model = base.model;
  c.params = base.params.clone();
  c.optimizer = AdamWState::fresh(c.params, cfg.adam);
  c.schedule = cpt_schedule(cfg.schedule.peak_lr, cpt_steps);
  c.step = 0;
  c.history = base.history;
  c.rng_state = rng_tag(cfg.seed);
  train_loop(c, pfs_plan(Objective::kMlm, cpt_steps), cfg, kCptMaskStream, data, hooks, out.trace);
  return out;
}

RunResult resume_cpt(const Checkpoint& from, std::int64_t cpt_steps, const TrainConfig& cfg,
                     const BatchStream& data, const RunHooks& hooks) {
  check_common(cfg);
  check_resume(from, cfg, cpt_schedule(cfg.schedule.peak_lr, cpt_steps));
  check_data(from.model, cfg, data, cpt_steps);
  RunResult out{from.clone(), {}};
  train_loop(out.checkpoint, pfs_plan(Objective::kMlm, cpt_steps), cfg, kCptMaskStream, data, hooks,
             out.trace);
  return out;
}

void write_trace_csv(std::ostream& os, const std::vector<StepRecord>& trace, bool timing) {
  os << "step,phase,objective,lr,loss,masked_fraction,wall_ms\n";
  char buf[256];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%lld,%zu,%s,%.10g,%.10g,%.6f,%.3f\n", static_cast<long long>(r.step),
                  r.phase, to_string(r.objective), r.lr, r.loss, r.masked_fraction,
                  timing ? r.wall_ms : 0.0);
    os << buf;
  }
}

}  // namespace bplm
