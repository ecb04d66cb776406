// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bplm/tensor.hpp"

namespace bplm {

/// Masked positions of one sequence and the tokens they hid.
struct MaskingPlan {
  double ratio = 0.0;
  TokenId mask_token_id = 1;
  std::vector<std::size_t> masked_positions;  // sorted, unique
  std::vector<TokenId> original_targets;      // aligned with masked_positions

  bool operator==(const MaskingPlan&) const = default;
};

/// Row-major [rows × width] token matrix, right-padded.
struct LmBatch {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<TokenId> tokens;
  Mask is_pad;
  /// MLM only: one plan per row plus the corrupted inputs.
  std::vector<MaskingPlan> plans;
  std::vector<TokenId> corrupted;

  std::span<const TokenId> row(std::size_t r) const {
    return std::span<const TokenId>(tokens).subspan(r * width, width);
  }
  std::span<const TokenId> corrupted_row(std::size_t r) const {
    return std::span<const TokenId>(corrupted).subspan(r * width, width);
  }
  /// Count of leading non-pad positions of row r.
  std::size_t row_length(std::size_t r) const {
    std::size_t n = 0;
    while (n < width && !is_pad[r * width + n]) ++n;
    return n;
  }
  bool has_plans() const { return !plans.empty(); }

  bool operator==(const LmBatch&) const = default;
};

}  // namespace bplm
