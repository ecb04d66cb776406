// SPDX-License-Identifier: Apache-2.0

#include "bplm/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bplm {

GradCheckResult grad_check_detailed(const std::function<Tensor(Tape&)>& f,
                                    std::vector<Tensor> leaves, double eps) {
  if (!(eps > 0.0 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must be in (0, 1e-3]");

  std::vector<bool> saved_flags;
  for (auto& leaf : leaves) {
    saved_flags.push_back(leaf.requires_grad());
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
    for (auto& leaf : leaves) {
      if (leaf.has_grad()) {
        analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
      } else {
        analytic.emplace_back(leaf.numel(), 0.0);
      }
      leaf.zero_grad();
    }
  }

  auto eval = [&] {
    Tape tape = Tape::inference();
    return f(tape).item();
  };

  GradCheckResult result;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double plus = eval();
      values[i] = orig - eps;
      const double minus = eval();
      values[i] = orig;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[l][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_leaf = l;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }

  for (std::size_t l = 0; l < leaves.size(); ++l) leaves[l].set_requires_grad(saved_flags[l]);
  return result;
}

double grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> leaves, double eps) {
  return grad_check_detailed(f, std::move(leaves), eps).max_rel_error;
}

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor x, double eps) {
  return grad_check([&](Tape& tape) { return f(tape, x); }, {x}, eps);
}

}  // namespace bplm
