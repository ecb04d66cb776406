// SPDX-License-Identifier: Apache-2.0
//
// AdamW, global-norm clipping, and learning-rate schedules.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bplm/model.hpp"

namespace bplm {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-5;
  double weight_decay = 0.1;
  /// RMSNorm gains are exempt from decay unless this is set.
  bool decay_norm_gains = false;
  bool operator==(const AdamWHyper&) const = default;
};

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
  bool operator==(const Moments&) const = default;
};

struct AdamWState {
  AdamWHyper hyper;
  std::int64_t step_count = 0;
  std::map<std::string, Moments> moments;

  /// Zeroed moments for every parameter.
  static AdamWState fresh(const Parameters& params, const AdamWHyper& hyper = {});
  bool operator==(const AdamWState&) const = default;
};

/// One AdamW update using the gradients stored on `params`:
///   m ← β1 m + (1-β1) g,  v ← β2 v + (1-β2) g²
///   θ ← θ (1 - lr·wd) - lr · m̂ / (√v̂ + eps)
/// Parameters without a gradient are treated as g = 0.
void adamw_step(Parameters& params, AdamWState& state, double lr);

/// Scales all gradients by max_norm / ‖g‖ when the global L2 norm exceeds
/// max_norm. Returns the factor applied (1 when unchanged).
double clip_global_norm(Parameters& params, double max_norm);
double global_grad_norm(const Parameters& params);

/// Warmup-stable-decay: linear warmup to peak over warmup_steps, constant
/// plateau, then linear decay to 0 over the final decay_steps.
struct WsdSchedule {
  double peak_lr = 5e-4;
  std::int64_t warmup_steps = 2000;
  std::int64_t total_steps = 42000;
  std::int64_t decay_steps = 2000;

  void validate() const;
  std::int64_t decay_start() const { return total_steps - decay_steps; }
  bool operator==(const WsdSchedule&) const = default;
};

double wsd_lr(const WsdSchedule& s, std::int64_t step);

/// Fine-tuning schedule: warmup over ceil(0.1 · total) steps, then linear
/// decay to 0 at total_steps.
double finetune_lr(double peak_lr, std::int64_t total_steps, std::int64_t step);
std::int64_t finetune_warmup_steps(std::int64_t total_steps);

}  // namespace bplm
