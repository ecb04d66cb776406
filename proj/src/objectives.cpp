// SPDX-License-Identifier: Apache-2.0

#include "bplm/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "bplm/rng.hpp"

namespace bplm {

const char* to_string(Objective objective) {
  return objective == Objective::kClm ? "clm" : "mlm";
}

Objective parse_objective(std::string_view name) {
  if (name == "clm" || name == "CLM") return Objective::kClm;
  if (name == "mlm" || name == "MLM") return Objective::kMlm;
  throw std::invalid_argument("unknown objective '" + std::string(name) + "'");
}

AttentionMode attention_mode_for(Objective objective) {
  return objective == Objective::kClm ? AttentionMode::kCausal : AttentionMode::kBidirectional;
}

bool is_study_ratio(double ratio) {
  return std::any_of(kStudyMaskRatios.begin(), kStudyMaskRatios.end(),
                     [&](double r) { return std::abs(r - ratio) < 1e-12; });
}

void CorruptionMix::validate() const {
  if (mask < 0 || random < 0 || keep < 0 || std::abs(mask + random + keep - 1.0) > 1e-9) {
    throw std::invalid_argument("CorruptionMix: fractions must be non-negative and sum to 1");
  }
}

MaskingPlan select_mask(std::span<const TokenId> tokens, const Mask& is_pad, double ratio,
                        std::uint64_t seed, TokenId mask_token_id) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("select_mask: ratio must be in (0, 1]");
  if (!is_pad.empty() && is_pad.size() != tokens.size()) {
    throw ShapeError("select_mask: pad mask length mismatch");
  }
  auto pad = [&](std::size_t i) { return !is_pad.empty() && is_pad[i] != 0; };
  std::size_t live = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) live += pad(i) ? 0 : 1;
  if (live == 0) throw std::invalid_argument("select_mask: no non-pad tokens");

  MaskingPlan plan;
  plan.ratio = ratio;
  plan.mask_token_id = mask_token_id;
  Rng rng(seed);
  for (int attempt = 0; attempt < kMaskResampleLimit; ++attempt) {
    plan.masked_positions.clear();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (pad(i)) continue;
      if (rng.bernoulli(ratio)) plan.masked_positions.push_back(i);
    }
    if (!plan.masked_positions.empty()) {
      for (auto p : plan.masked_positions) plan.original_targets.push_back(tokens[p]);
      return plan;
    }
  }
  throw MaskingError("select_mask: no position selected after " +
                     std::to_string(kMaskResampleLimit) + " attempts");
}

std::vector<TokenId> apply_mask(std::span<const TokenId> tokens, const MaskingPlan& plan,
                                const CorruptionMix& mix, std::uint64_t seed, TokenId random_lo,
                                TokenId random_hi) {
  mix.validate();
  std::vector<TokenId> out(tokens.begin(), tokens.end());
  const bool pure = mix.mask == 1.0;
  if (!pure && random_hi <= random_lo && mix.random > 0) {
    throw std::invalid_argument("apply_mask: random replacement needs a token range");
  }
  Rng rng(seed);
  for (auto p : plan.masked_positions) {
    if (p >= out.size()) throw std::out_of_range("apply_mask: masked position out of range");
    if (pure) {
      out[p] = plan.mask_token_id;
      continue;
    }
    const double u = rng.uniform();
    if (u < mix.mask) {
      out[p] = plan.mask_token_id;
    } else if (u < mix.mask + mix.random) {
      out[p] = random_lo + static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(random_hi - random_lo)));
    }
  }
  return out;
}

void attach_masks(LmBatch& batch, double ratio, std::uint64_t seed, TokenId mask_token_id,
                  const CorruptionMix& mix, TokenId random_hi) {
  batch.plans.clear();
  batch.corrupted.assign(batch.tokens.begin(), batch.tokens.end());
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const auto row = batch.row(r);
    const Mask pad(batch.is_pad.begin() + static_cast<std::ptrdiff_t>(r * batch.width),
                   batch.is_pad.begin() + static_cast<std::ptrdiff_t>((r + 1) * batch.width));
    auto plan = select_mask(row, pad, ratio, derive_seed(seed, r), mask_token_id);
    const auto corrupted =
        apply_mask(row, plan, mix, derive_seed(seed, r, 1), Vocab::kFirstSymbol, random_hi);
    std::copy(corrupted.begin(), corrupted.end(),
              batch.corrupted.begin() + static_cast<std::ptrdiff_t>(r * batch.width));
    batch.plans.push_back(std::move(plan));
  }
}

double masked_fraction(const LmBatch& batch) {
  std::size_t live = 0, masked = 0;
  for (auto p : batch.is_pad) live += p ? 0 : 1;
  for (const auto& plan : batch.plans) masked += plan.masked_positions.size();
  return live == 0 ? 0.0 : static_cast<double>(masked) / static_cast<double>(live);
}

Tensor mlm_loss(Tape& tape, const Tensor& logits, const MaskingPlan& plan) {
  if (plan.masked_positions.empty()) throw std::invalid_argument("mlm_loss: empty masking plan");
  std::vector<std::int64_t> targets(logits.dim(0), kIgnoreIndex);
  for (std::size_t i = 0; i < plan.masked_positions.size(); ++i) {
    const auto p = plan.masked_positions[i];
    if (p >= targets.size()) throw std::out_of_range("mlm_loss: masked position out of range");
    targets[p] = plan.original_targets[i];
  }
  return cross_entropy_from_logits(tape, logits, targets);
}

std::vector<std::int64_t> clm_targets(std::span<const TokenId> tokens, const Mask& is_pad) {
  std::vector<std::int64_t> targets(tokens.size(), kIgnoreIndex);
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const bool pad = !is_pad.empty() && (is_pad[t] || is_pad[t + 1]);
    if (!pad) targets[t] = tokens[t + 1];
  }
  return targets;
}

Tensor clm_loss(Tape& tape, const Tensor& logits, std::span<const TokenId> tokens,
                const Mask& is_pad) {
  std::size_t live = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) live += (!is_pad.empty() && is_pad[i]) ? 0 : 1;
  if (live < 2) throw std::invalid_argument("clm_loss: need at least 2 non-pad tokens");
  return cross_entropy_from_logits(tape, logits, clm_targets(tokens, is_pad));
}

Tensor pretrain_loss(Tape& tape, Objective objective, const Parameters& params,
                     const ModelConfig& cfg, const LmBatch& batch) {
  if (batch.rows == 0) throw std::invalid_argument("pretrain_loss: empty batch");
  if (objective == Objective::kMlm && batch.plans.size() != batch.rows) {
    throw std::invalid_argument("pretrain_loss: MLM batch without masking plans");
  }
  const AttentionMode mode = attention_mode_for(objective);
  std::vector<Tensor> row_losses;
  row_losses.reserve(batch.rows);
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const std::size_t len = batch.row_length(r);
    if (objective == Objective::kClm) {
      const auto row = batch.row(r).first(len);
      const auto out = forward(tape, params, cfg, row, mode);
      row_losses.push_back(clm_loss(tape, out.logits, row));
    } else {
      const auto row = batch.corrupted_row(r).first(len);
      const auto out = forward(tape, params, cfg, row, mode);
      row_losses.push_back(mlm_loss(tape, out.logits, batch.plans[r]));
    }
  }
  return mean_of(tape, row_losses);
}

double source_cross_entropy(const Parameters& params, const ModelConfig& cfg,
                            const std::vector<std::vector<TokenId>>& sequences,
                            const MarkovSource& source) {
  double total = 0.0;
  std::size_t count = 0;
  const std::size_t k = source.order();
  for (const auto& seq : sequences) {
    if (seq.size() < 2) continue;
    Tape tape = Tape::inference();
    const auto out = forward(tape, params, cfg, seq, AttentionMode::kCausal);
    const std::size_t V = cfg.vocab_size;
    const auto logits = out.logits.data();
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      if (t + 1 < k) continue;
      const double* row = logits.data() + t * V;
      const double mx = *std::max_element(row, row + V);
      double z = 0.0;
      for (std::size_t c = 0; c < V; ++c) z += std::exp(row[c] - mx);
      const double log_z = mx + std::log(z);
      const auto& dist = source.next_distribution(std::span<const TokenId>(seq).first(t + 1));
      double expected = 0.0;
      for (std::size_t j = 0; j < dist.size(); ++j) {
        if (dist[j] == 0.0) continue;
        const auto id = static_cast<std::size_t>(source.first_token()) + j;
        expected += dist[j] * (log_z - row[id]);
      }
      total += expected;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("source_cross_entropy: no predicted positions");
  return total / static_cast<double>(count);
}

double corpus_clm_loss(const Parameters& params, const ModelConfig& cfg,
                       const std::vector<std::vector<TokenId>>& sequences) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) continue;
    Tape tape = Tape::inference();
    const auto out = forward(tape, params, cfg, seq, AttentionMode::kCausal);
    const double loss = clm_loss(tape, out.logits, seq).item();
    total += loss * static_cast<double>(seq.size() - 1);
    count += seq.size() - 1;
  }
  if (count == 0) throw std::invalid_argument("corpus_clm_loss: no predicted positions");
  return total / static_cast<double>(count);
}

}  // namespace bplm
