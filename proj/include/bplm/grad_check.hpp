// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "bplm/tensor.hpp"

namespace bplm {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares tape gradients of a scalar function against central differences
/// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) on every coordinate of every
/// leaf. Relative error uses max(|a|, |b|, 1e-8) as the denominator.
///
/// `f` must rebuild its graph from the current leaf values on each call.
/// Leaves are restored to their original values before returning.
GradCheckResult grad_check_detailed(const std::function<Tensor(Tape&)>& f,
                                    std::vector<Tensor> leaves, double eps);

double grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> leaves, double eps);

/// Single-input form: f(tape, x).
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor x, double eps);

}  // namespace bplm
