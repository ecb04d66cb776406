// SPDX-License-Identifier: Apache-2.0

#include "bplm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace bplm {

AdamWState AdamWState::fresh(const Parameters& params, const AdamWHyper& hyper) {
  AdamWState state;
  state.hyper = hyper;
  for (const auto& [name, t] : params) {
    state.moments[name] = Moments{std::vector<double>(t.numel(), 0.0), std::vector<double>(t.numel(), 0.0)};
  }
  return state;
}

void adamw_step(Parameters& params, AdamWState& state, double lr) {
  const auto& h = state.hyper;
  if (state.moments.size() != params.size()) {
    throw std::invalid_argument("adamw_step: optimizer state does not match parameters");
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  for (const auto& [name, param] : params) {
    auto it = state.moments.find(name);
    if (it == state.moments.end() || it->second.m.size() != param.numel()) {
      throw std::invalid_argument("adamw_step: shape mismatch for '" + name + "'");
    }
    auto& [m, v] = it->second;
    Tensor p = param;
    auto theta = p.mutable_data();
    const auto g = param.grad();
    const bool has_grad = !g.empty();
    const double decay =
        (is_norm_gain(name) && !h.decay_norm_gains) ? 1.0 : 1.0 - lr * h.weight_decay;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] *= decay;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

double global_grad_norm(const Parameters& params) {
  double sq = 0.0;
  for (const auto& [_, t] : params) {
    for (double g : t.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_global_norm(Parameters& params, double max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  double factor = max_norm / norm;
  auto rescale = [&](double f) {
    for (const auto& [_, t] : params) {
      if (!t.has_grad()) continue;
      Tensor handle = t;
      for (double& g : handle.mutable_grad()) g *= f;
    }
  };
  rescale(factor);
  // Rounding can leave the norm an ulp above the bound.
  while (global_grad_norm(params) > max_norm) {
    const double nudge = 1.0 - 4 * std::numeric_limits<double>::epsilon();
    rescale(nudge);
    factor *= nudge;
  }
  return factor;
}

void WsdSchedule::validate() const {
  if (!(peak_lr > 0)) throw std::invalid_argument("WsdSchedule: peak_lr must be positive");
  if (warmup_steps < 0 || decay_steps < 0 || total_steps <= 0) {
    throw std::invalid_argument("WsdSchedule: step counts must be non-negative, total positive");
  }
  if (warmup_steps + decay_steps > total_steps) {
    throw std::invalid_argument("WsdSchedule: warmup + decay exceeds total steps");
  }
}

double wsd_lr(const WsdSchedule& s, std::int64_t step) {
  s.validate();
  if (step < 0 || step >= s.total_steps) {
    throw std::out_of_range("wsd_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(s.total_steps) + ")");
  }
  if (step < s.warmup_steps) {
    return s.peak_lr * (static_cast<double>(step + 1) / static_cast<double>(s.warmup_steps));
  }
  if (s.decay_steps > 0 && step >= s.decay_start()) {
    const double frac =
        static_cast<double>(s.total_steps - step) / static_cast<double>(s.decay_steps);
    return std::clamp(s.peak_lr * frac, 0.0, s.peak_lr);
  }
  return s.peak_lr;
}

std::int64_t finetune_warmup_steps(std::int64_t total_steps) {
  return (total_steps + 9) / 10;
}

double finetune_lr(double peak_lr, std::int64_t total_steps, std::int64_t step) {
  if (total_steps <= 0) throw std::invalid_argument("finetune_lr: total_steps must be positive");
  if (step < 0 || step >= total_steps) {
    throw std::out_of_range("finetune_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + ")");
  }
  const std::int64_t warmup = finetune_warmup_steps(total_steps);
  if (step < warmup) {
    return peak_lr * (static_cast<double>(step + 1) / static_cast<double>(warmup));
  }
  return peak_lr * (static_cast<double>(total_steps - step) /
                    static_cast<double>(total_steps - warmup));
}

}  // namespace bplm
