// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used by the unit and acceptance
// tests. They deliberately avoid the library code paths they check.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

namespace oracle {

inline double accuracy(const std::vector<int>& p, const std::vector<int>& g) {
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < p.size(); ++i) wrong += p[i] != g[i];
  return static_cast<double>(p.size() - wrong) / static_cast<double>(p.size());
}

// Is [s, e] of `type` a maximal entity under BIO decoding with stray-I repair?
// Checked from the definition: the run opens at s, every following tag
// continues it, and the next tag does not.
inline bool is_entity(const std::vector<int>& tags, std::size_t s, std::size_t e, int type) {
  const int b = 1 + 2 * type, in = 2 + 2 * type;
  if (tags[s] != b && tags[s] != in) return false;
  if (tags[s] == in && s > 0 && (tags[s - 1] == b || tags[s - 1] == in)) return false;
  for (std::size_t k = s + 1; k <= e; ++k) {
    if (tags[k] != in) return false;
  }
  return e + 1 == tags.size() || tags[e + 1] != in;
}

struct Counts {
  std::size_t tp = 0, pred = 0, gold = 0;
};

inline Counts entity_counts(const std::vector<int>& pred, const std::vector<int>& gold, int types) {
  Counts c;
  const std::size_t n = pred.size();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t e = s; e < n; ++e) {
      for (int t = 0; t < types; ++t) {
        const bool p = is_entity(pred, s, e, t), g = is_entity(gold, s, e, t);
        c.pred += p;
        c.gold += g;
        c.tp += p && g;
      }
    }
  }
  return c;
}

inline double f1_from(const Counts& c) {
  if (c.pred == 0 && c.gold == 0) return 1.0;
  if (c.tp == 0) return 0.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(c.pred + c.gold);
}

template <typename T>
double token_f1(std::vector<T> pred, std::vector<T> gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::sort(pred.begin(), pred.end());
  std::sort(gold.begin(), gold.end());
  std::size_t i = 0, j = 0, common = 0;
  while (i < pred.size() && j < gold.size()) {
    if (pred[i] == gold[j]) {
      ++common, ++i, ++j;
    } else if (pred[i] < gold[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  if (common == 0) return 0.0;
  return 2.0 * static_cast<double>(common) / static_cast<double>(pred.size() + gold.size());
}

inline double dcg10(const std::vector<std::size_t>& order, const std::vector<double>& rel) {
  double d = 0.0;
  for (std::size_t r = 0; r < order.size() && r < 10; ++r) d += rel[order[r]] / std::log2(r + 2.0);
  return d;
}

// Ideal DCG by exhaustive search over permutations (small pools only).
inline std::optional<double> ndcg10(const std::vector<std::size_t>& ranked, const std::vector<double>& rel) {
  std::vector<std::size_t> perm(rel.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = 0.0;
  do {
    best = std::max(best, dcg10(perm, rel));
  } while (std::next_permutation(perm.begin(), perm.end()));
  if (best == 0.0) return std::nullopt;
  return dcg10(ranked, rel) / best;
}

// Expected NDCG@10 of a uniformly random ranking with one relevant document
// among n candidates.
inline double random_ndcg_one_relevant(std::size_t n) {
  double s = 0.0;
  for (std::size_t r = 1; r <= std::min<std::size_t>(n, 10); ++r) s += 1.0 / std::log2(r + 1.0);
  return s / static_cast<double>(n);
}

inline double ci95(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return 1.96 * std::sqrt(ss / (n - 1)) / std::sqrt(n);
}

// Stationary distribution of a row-stochastic matrix: solve π(P - I) = 0,
// Σπ = 1 by Gaussian elimination with partial pivoting.
inline std::vector<double> stationary(const std::vector<std::vector<double>>& P) {
  const std::size_t n = P.size();
  std::vector<std::vector<double>> A(n, std::vector<double>(n + 1, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) A[i][j] = P[j][i] - (i == j ? 1.0 : 0.0);
  }
  for (std::size_t j = 0; j <= n; ++j) A[n - 1][j] = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(A[r][c]) > std::abs(A[piv][c])) piv = r;
    }
    std::swap(A[c], A[piv]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = A[r][c] / A[c][c];
      for (std::size_t k = c; k <= n; ++k) A[r][k] -= f * A[c][k];
    }
  }
  std::vector<double> pi(n);
  for (std::size_t i = 0; i < n; ++i) pi[i] = A[i][n] / A[i][i];
  return pi;
}

// One AdamW step from zero moments (t = 1): m̂ = g, v̂ = g².
inline double adamw_first_step(double theta, double g, double lr, double wd, double eps) {
  return theta * (1.0 - lr * wd) - lr * g / (std::abs(g) + eps);
}

}  // namespace oracle
