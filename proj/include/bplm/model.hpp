// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm transformer encoder/decoder stack: RMSNorm, grouped-query
// attention with rotary positions, SwiGLU feed-forward, untied output head.
// The attention mask mode is chosen per call, so one set of weights serves
// both causal and bidirectional training.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bplm/tensor.hpp"

namespace bplm {

enum class AttentionMode { kCausal, kBidirectional };

const char* to_string(AttentionMode mode);

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t embed_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t heads = 4;
  std::size_t kv_heads = 2;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;
  double rope_theta = 10000.0;
  double rmsnorm_eps = 1e-5;
  double init_std = std::sqrt(0.2);
  bool tie_embeddings = false;

  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t group_size() const { return heads / kv_heads; }

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors in canonical (lexicographic) order.
class Parameters {
 public:
  using Map = std::map<std::string, Tensor>;

  void insert(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  std::size_t size() const { return tensors_.size(); }
  std::size_t numel() const;

  Map::const_iterator begin() const { return tensors_.begin(); }
  Map::const_iterator end() const { return tensors_.end(); }

  std::vector<std::string> names() const;
  std::vector<Tensor> tensors() const;

  /// Deep copy; the clone shares no storage with the original.
  Parameters clone() const;
  void zero_grad();
  void set_requires_grad(bool on);

  /// Bitwise equality of names, shapes, and values.
  bool bit_equal(const Parameters& other) const;

 private:
  Map tensors_;
};

/// Canonical parameter names and shapes for a config:
///   embed.tokens                    [vocab × d]
///   layer.{i}.attn_norm.weight      [d]
///   layer.{i}.attn.wq               [d × heads·head_dim]
///   layer.{i}.attn.wk, .wv          [d × kv_heads·head_dim]
///   layer.{i}.attn.wo               [heads·head_dim × d]
///   layer.{i}.ffn_norm.weight       [d]
///   layer.{i}.ffn.w_gate, .w_up     [d × ffn]
///   layer.{i}.ffn.w_down            [ffn × d]
///   final_norm.weight               [d]
///   head.weight                     [d × vocab]   (absent when tied)
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg);

/// RMSNorm gains are excluded from weight decay.
bool is_norm_gain(const std::string& name);

/// Weights ~ N(0, init_std²), RMSNorm gains = 1. Deterministic in seed.
Parameters init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Throws if `params` does not hold exactly the layout of `cfg`.
void check_parameters(const Parameters& params, const ModelConfig& cfg);

struct AttentionWeights {
  Tensor wq, wk, wv, wo;
};

AttentionWeights attention_weights(const Parameters& params, std::size_t layer);

/// Optional capture of per-head attention probabilities ([T×T] each).
struct AttentionProbe {
  std::vector<Tensor> head_probs;
};

/// Grouped-query self-attention over `hidden` [T×d]. `is_pad` marks padding
/// positions (empty = none); padded keys are never attended.
Tensor attention(Tape& tape, const Tensor& hidden, const AttentionWeights& weights,
                 const ModelConfig& cfg, AttentionMode mode, const Mask& is_pad,
                 AttentionProbe* probe = nullptr);

struct ForwardResult {
  Tensor hidden;  // [T×d], after the final norm
  Tensor logits;  // [T×vocab]; undefined when logits were not requested
  AttentionMode mode = AttentionMode::kCausal;
};

ForwardResult forward(Tape& tape, const Parameters& params, const ModelConfig& cfg,
                      std::span<const TokenId> tokens, AttentionMode mode, const Mask& is_pad = {},
                      bool with_logits = true);

}  // namespace bplm
