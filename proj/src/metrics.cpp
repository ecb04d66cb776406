// SPDX-License-Identifier: Apache-2.0

#include "bplm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace bplm {

double accuracy(std::span<const int> preds, std::span<const int> golds) {
  if (preds.size() != golds.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (preds.empty()) throw std::invalid_argument("accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == golds[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

std::vector<EntitySpan> decode_bio(std::span<const int> tags) {
  std::vector<EntitySpan> spans;
  bool open = false;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const int tag = tags[i];
    if (tag < 0) throw std::invalid_argument("decode_bio: negative tag id");
    if (tag == 0) {
      open = false;
      continue;
    }
    const int type = (tag - 1) / 2;
    const bool inside = tag % 2 == 0;
    if (inside && open && spans.back().type == type) {
      spans.back().end = i;
    } else {
      spans.push_back({type, i, i});
      open = true;
    }
  }
  return spans;
}

double F1Counts::precision() const {
  return predicted == 0 ? (gold == 0 ? 1.0 : 0.0)
                        : static_cast<double>(true_positive) / static_cast<double>(predicted);
}

double F1Counts::recall() const {
  return gold == 0 ? (predicted == 0 ? 1.0 : 0.0)
                   : static_cast<double>(true_positive) / static_cast<double>(gold);
}

double F1Counts::f1() const {
  if (predicted == 0 && gold == 0) return 1.0;
  if (true_positive == 0) return 0.0;
  return 2.0 * static_cast<double>(true_positive) / static_cast<double>(predicted + gold);
}

F1Counts& F1Counts::operator+=(const F1Counts& o) {
  true_positive += o.true_positive;
  predicted += o.predicted;
  gold += o.gold;
  return *this;
}

F1Counts entity_counts(std::span<const int> pred, std::span<const int> gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("entity_f1: length mismatch");
  auto p = decode_bio(pred);
  auto g = decode_bio(gold);
  std::sort(p.begin(), p.end());
  std::sort(g.begin(), g.end());
  std::vector<EntitySpan> common;
  std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(common));
  return {common.size(), p.size(), g.size()};
}

double entity_f1(std::span<const int> pred, std::span<const int> gold) {
  return entity_counts(pred, gold).f1();
}

double entity_f1(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("entity_f1: sequence count mismatch");
  F1Counts total;
  for (std::size_t i = 0; i < pred.size(); ++i) total += entity_counts(pred[i], gold[i]);
  return total.f1();
}

double token_tag_f1(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("token_tag_f1: sequence count mismatch");
  F1Counts total;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != gold[i].size()) throw std::invalid_argument("token_tag_f1: length mismatch");
    for (std::size_t t = 0; t < pred[i].size(); ++t) {
      total.predicted += pred[i][t] != 0 ? 1 : 0;
      total.gold += gold[i][t] != 0 ? 1 : 0;
      total.true_positive += (pred[i][t] != 0 && pred[i][t] == gold[i][t]) ? 1 : 0;
    }
  }
  return total.f1();
}

double qa_f1(std::span<const TokenId> pred, std::span<const TokenId> gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<TokenId, std::size_t> counts;
  for (auto t : gold) ++counts[t];
  std::size_t common = 0;
  for (auto t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  // 2PR/(P+R) reduces to 2c/(|pred|+|gold|).
  return 2.0 * static_cast<double>(common) / static_cast<double>(pred.size() + gold.size());
}

std::optional<double> ndcg_at_10(std::span<const std::size_t> ranked, std::span<const double> relevance) {
  constexpr std::size_t k = 10;
  auto gain = [&](std::size_t id) {
    if (id >= relevance.size()) throw std::out_of_range("ndcg_at_10: document id without a label");
    return relevance[id];
  };
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
    dcg += gain(ranked[r]) / std::log2(static_cast<double>(r) + 2.0);
  }
  std::vector<double> ideal(relevance.begin(), relevance.end());
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ideal.size()); ++r) {
    idcg += ideal[r] / std::log2(static_cast<double>(r) + 2.0);
  }
  if (!(idcg > 0.0)) return std::nullopt;
  return dcg / idcg;
}

SeedStats mean_ci95(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("mean_ci95: no scores");
  SeedStats s;
  s.n = scores.size();
  double sum = 0.0;
  for (double x : scores) sum += x;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double x : scores) ss += (x - s.mean) * (x - s.mean);
    const double sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    s.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(s.n));
  }
  return s;
}

}  // namespace bplm
