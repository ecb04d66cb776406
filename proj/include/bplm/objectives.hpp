// SPDX-License-Identifier: Apache-2.0
//
// Causal and masked language-modeling objectives.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "bplm/batch.hpp"
#include "bplm/data.hpp"
#include "bplm/model.hpp"
#include "bplm/tensor.hpp"

namespace bplm {

enum class Objective { kClm, kMlm };

const char* to_string(Objective objective);
Objective parse_objective(std::string_view name);

/// CLM trains causally on clean tokens; MLM bidirectionally on corrupted ones.
AttentionMode attention_mode_for(Objective objective);

inline constexpr std::array<double, 4> kStudyMaskRatios{0.20, 0.30, 0.40, 0.50};
bool is_study_ratio(double ratio);

/// Fate of a selected position. Default: always the placeholder.
struct CorruptionMix {
  double mask = 1.0;
  double random = 0.0;
  double keep = 0.0;
  void validate() const;
};

class MaskingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kMaskResampleLimit = 100;

/// Selects each non-pad position independently with probability `ratio`;
/// redraws (up to kMaskResampleLimit times) when nothing is selected.
/// `is_pad` may be empty (no padding).
MaskingPlan select_mask(std::span<const TokenId> tokens, const Mask& is_pad, double ratio,
                        std::uint64_t seed, TokenId mask_token_id = Vocab::kMask);

/// Corrupted copy of `tokens`: selected positions become the placeholder (or
/// per `mix`, a random id in [random_lo, random_hi) or the original).
std::vector<TokenId> apply_mask(std::span<const TokenId> tokens, const MaskingPlan& plan,
                                const CorruptionMix& mix = {}, std::uint64_t seed = 0,
                                TokenId random_lo = Vocab::kFirstSymbol, TokenId random_hi = 0);

/// Fills `batch.plans` and `batch.corrupted`; row r uses
/// derive_seed(seed, r) so plans are reproducible per (seed, row).
void attach_masks(LmBatch& batch, double ratio, std::uint64_t seed,
                  TokenId mask_token_id = Vocab::kMask, const CorruptionMix& mix = {},
                  TokenId random_hi = 0);

/// Masked positions / non-pad positions over the whole batch.
double masked_fraction(const LmBatch& batch);

/// Mean NLL of the original tokens at masked positions.
Tensor mlm_loss(Tape& tape, const Tensor& logits, const MaskingPlan& plan);

/// Next-token targets for CLM: target[t] = tokens[t+1], ignored at the last
/// position and wherever the target is padding.
std::vector<std::int64_t> clm_targets(std::span<const TokenId> tokens, const Mask& is_pad);

/// Mean NLL of x[t+1] given x[<=t] over non-pad targets.
Tensor clm_loss(Tape& tape, const Tensor& logits, std::span<const TokenId> tokens,
                const Mask& is_pad = {});

/// Mean over batch rows of the objective's per-row loss. Rows are trimmed to
/// their non-pad prefix before the forward pass.
Tensor pretrain_loss(Tape& tape, Objective objective, const Parameters& params,
                     const ModelConfig& cfg, const LmBatch& batch);

/// Expected causal cross-entropy against a known Markov source: at each
/// predicted position the model's log-probabilities are averaged under the
/// source's true next-token distribution instead of the sampled token.
/// Positions before the source's order are skipped. By Gibbs' inequality the
/// result is at least the mean conditional entropy of the visited states.
double source_cross_entropy(const Parameters& params, const ModelConfig& cfg,
                            const std::vector<std::vector<TokenId>>& sequences,
                            const MarkovSource& source);

/// Plain (sampled-token) CLM loss averaged over all predicted tokens.
double corpus_clm_loss(const Parameters& params, const ModelConfig& cfg,
                       const std::vector<std::vector<TokenId>>& sequences);

}  // namespace bplm
