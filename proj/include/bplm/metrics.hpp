// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics and seed aggregation.
//
// BIO tag ids: 0 = O, 1 + 2k = B of entity type k, 2 + 2k = I of type k.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "bplm/tensor.hpp"

namespace bplm {

double accuracy(std::span<const int> preds, std::span<const int> golds);

inline int bio_begin(int type) { return 1 + 2 * type; }
inline int bio_inside(int type) { return 2 + 2 * type; }

struct EntitySpan {
  int type = 0;
  std::size_t start = 0;
  std::size_t end = 0;  // inclusive
  auto operator<=>(const EntitySpan&) const = default;
};

/// Decodes BIO spans. An I tag that does not continue a span of the same
/// type opens a new span (the usual repair for stray I tags).
std::vector<EntitySpan> decode_bio(std::span<const int> tags);

struct F1Counts {
  std::size_t true_positive = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;

  double precision() const;
  double recall() const;
  /// 1.0 when there is nothing to predict and nothing was predicted.
  double f1() const;
  F1Counts& operator+=(const F1Counts& o);
};

F1Counts entity_counts(std::span<const int> pred, std::span<const int> gold);
/// Micro-averaged entity-level F1 over exact (type, start, end) matches.
double entity_f1(std::span<const int> pred, std::span<const int> gold);
double entity_f1(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& gold);
/// Micro F1 over individual non-O tags.
double token_tag_f1(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& gold);

/// Token-multiset overlap F1; both empty is 1.0, exactly one empty is 0.0.
double qa_f1(std::span<const TokenId> pred, std::span<const TokenId> gold);

/// NDCG@10 of a ranking. `relevance[id]` is the graded label of document id.
/// Returns nullopt when no document is relevant (the query is skipped).
std::optional<double> ndcg_at_10(std::span<const std::size_t> ranked, std::span<const double> relevance);

struct NdcgSummary {
  double mean = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

struct SeedStats {
  double mean = 0.0;
  std::optional<double> ci95;  // absent for a single score
  std::size_t n = 0;
};

/// mean and 1.96 · sample_std / √n.
SeedStats mean_ci95(std::span<const double> scores);

}  // namespace bplm
