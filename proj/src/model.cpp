// SPDX-License-Identifier: Apache-2.0

#include "bplm/model.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

#include "bplm/rng.hpp"

namespace bplm {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string layer_name(std::size_t layer, const char* suffix) {
  return "layer." + std::to_string(layer) + "." + suffix;
}

}  // namespace

const char* to_string(AttentionMode mode) {
  return mode == AttentionMode::kCausal ? "causal" : "bidirectional";
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ModelConfig: " + what); };
  if (layers == 0) fail("layers must be positive");
  if (embed_dim == 0 || ffn_dim == 0) fail("dimensions must be positive");
  if (heads == 0 || kv_heads == 0) fail("head counts must be positive");
  if (heads % kv_heads != 0) fail("heads must be divisible by kv_heads");
  if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  if (head_dim() % 2 != 0) fail("head_dim must be even for rotary embeddings");
  if (max_seq_len < 2) fail("max_seq_len must be at least 2");
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (!(rope_theta > 0)) fail("rope_theta must be positive");
  if (!(rmsnorm_eps > 0)) fail("rmsnorm_eps must be positive");
  if (!(init_std >= 0)) fail("init_std must be non-negative");
}

// ---- Parameters ------------------------------------------------------------

void Parameters::insert(const std::string& name, Tensor t) {
  if (!t.defined()) throw std::invalid_argument("Parameters: undefined tensor for " + name);
  tensors_[name] = std::move(t);
}

const Tensor& Parameters::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t Parameters::numel() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

std::vector<std::string> Parameters::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

std::vector<Tensor> Parameters::tensors() const {
  std::vector<Tensor> out;
  for (const auto& [_, t] : tensors_) out.push_back(t);
  return out;
}

Parameters Parameters::clone() const {
  Parameters out;
  for (const auto& [name, t] : tensors_) out.tensors_[name] = t.clone();
  return out;
}

void Parameters::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

void Parameters::set_requires_grad(bool on) {
  for (auto& [_, t] : tensors_) t.set_requires_grad(on);
}

bool Parameters::bit_equal(const Parameters& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  auto it = other.tensors_.begin();
  for (const auto& [name, t] : tensors_) {
    if (it->first != name || it->second.shape() != t.shape()) return false;
    const auto a = t.data(), b = it->second.data();
    if (std::memcmp(a.data(), b.data(), a.size_bytes()) != 0) return false;
    ++it;
  }
  return true;
}

// ---- layout / init ---------------------------------------------------------

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim, hd = cfg.head_dim();
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed.tokens", Shape{cfg.vocab_size, d});
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    out.emplace_back(layer_name(l, "attn_norm.weight"), Shape{d});
    out.emplace_back(layer_name(l, "attn.wq"), Shape{d, cfg.heads * hd});
    out.emplace_back(layer_name(l, "attn.wk"), Shape{d, cfg.kv_heads * hd});
    out.emplace_back(layer_name(l, "attn.wv"), Shape{d, cfg.kv_heads * hd});
    out.emplace_back(layer_name(l, "attn.wo"), Shape{cfg.heads * hd, d});
    out.emplace_back(layer_name(l, "ffn_norm.weight"), Shape{d});
    out.emplace_back(layer_name(l, "ffn.w_gate"), Shape{d, cfg.ffn_dim});
    out.emplace_back(layer_name(l, "ffn.w_up"), Shape{d, cfg.ffn_dim});
    out.emplace_back(layer_name(l, "ffn.w_down"), Shape{cfg.ffn_dim, d});
  }
  out.emplace_back("final_norm.weight", Shape{d});
  if (!cfg.tie_embeddings) out.emplace_back("head.weight", Shape{d, cfg.vocab_size});
  return out;
}

bool is_norm_gain(const std::string& name) {
  constexpr std::string_view suffix = "norm.weight";
  return name.size() >= suffix.size() &&
         name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Parameters init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Parameters params;
  for (const auto& [name, shape] : parameter_layout(cfg)) {
    std::vector<double> values(shape_numel(shape));
    if (is_norm_gain(name)) {
      std::fill(values.begin(), values.end(), 1.0);
    } else {
      // Per-tensor streams: a tensor's values depend only on (seed, name).
      Rng rng(derive_seed(seed, fnv1a(name)));
      for (double& v : values) v = cfg.init_std * rng.normal();
    }
    params.insert(name, Tensor::from(shape, std::move(values), true));
  }
  return params;
}

void check_parameters(const Parameters& params, const ModelConfig& cfg) {
  const auto layout = parameter_layout(cfg);
  if (params.size() != layout.size()) {
    throw std::invalid_argument("parameter set has " + std::to_string(params.size()) +
                                " tensors, config expects " + std::to_string(layout.size()));
  }
  for (const auto& [name, shape] : layout) {
    if (!params.contains(name)) throw std::invalid_argument("missing parameter '" + name + "'");
    if (params.at(name).shape() != shape) {
      throw std::invalid_argument("parameter '" + name + "' has shape " +
                                  shape_str(params.at(name).shape()) + ", expected " +
                                  shape_str(shape));
    }
  }
}

AttentionWeights attention_weights(const Parameters& params, std::size_t layer) {
  return {params.at(layer_name(layer, "attn.wq")), params.at(layer_name(layer, "attn.wk")),
          params.at(layer_name(layer, "attn.wv")), params.at(layer_name(layer, "attn.wo"))};
}

// ---- attention / forward ---------------------------------------------------

Tensor attention(Tape& tape, const Tensor& hidden, const AttentionWeights& w,
                 const ModelConfig& cfg, AttentionMode mode, const Mask& is_pad,
                 AttentionProbe* probe) {
  const std::size_t T = hidden.dim(0);
  const std::size_t hd = cfg.head_dim();
  if (T > cfg.max_seq_len) throw std::invalid_argument("attention: sequence longer than max_seq_len");
  if (!is_pad.empty() && is_pad.size() != T) throw ShapeError("attention: pad mask length mismatch");
  const bool all_pad =
      !is_pad.empty() && std::all_of(is_pad.begin(), is_pad.end(), [](auto p) { return p != 0; });
  if (all_pad) throw std::invalid_argument("attention: all positions are padding");

  std::vector<std::int64_t> positions(T);
  for (std::size_t t = 0; t < T; ++t) positions[t] = static_cast<std::int64_t>(t);

  auto rotate = [&](const Tensor& x, std::size_t nheads) {
    Tensor r = rope_apply(tape, reshape(tape, x, {T, nheads, hd}), positions, cfg.rope_theta);
    return reshape(tape, r, {T, nheads * hd});
  };
  const Tensor q = rotate(matmul(tape, hidden, w.wq), cfg.heads);
  const Tensor k = rotate(matmul(tape, hidden, w.wk), cfg.kv_heads);
  const Tensor v = matmul(tape, hidden, w.wv);

  Mask allowed(T * T, 0);
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j < T; ++j) {
      const bool pad = !is_pad.empty() && is_pad[j];
      const bool future = mode == AttentionMode::kCausal && j > i;
      allowed[i * T + j] = (!pad && !future) ? 1 : 0;
    }
  }

  std::vector<Tensor> k_t(cfg.kv_heads), v_g(cfg.kv_heads);
  for (std::size_t g = 0; g < cfg.kv_heads; ++g) {
    k_t[g] = transpose(tape, slice_cols(tape, k, g * hd, hd));
    v_g[g] = slice_cols(tape, v, g * hd, hd);
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t g = h / cfg.group_size();
    const Tensor qh = slice_cols(tape, q, h * hd, hd);
    const Tensor scores = scale(tape, matmul(tape, qh, k_t[g]), inv_sqrt);
    const Tensor probs = masked_softmax_rows(tape, scores, allowed);
    if (probe) probe->head_probs.push_back(probs);
    heads.push_back(matmul(tape, probs, v_g[g]));
  }
  return matmul(tape, concat_cols(tape, heads), w.wo);
}

ForwardResult forward(Tape& tape, const Parameters& params, const ModelConfig& cfg,
                      std::span<const TokenId> tokens, AttentionMode mode, const Mask& is_pad,
                      bool with_logits) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (TokenId id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(id) + " out of range");
    }
  }

  Tensor x = embedding(tape, params.at("embed.tokens"), tokens);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const Tensor h = rms_norm(tape, x, params.at(layer_name(l, "attn_norm.weight")), cfg.rmsnorm_eps);
    x = add(tape, x, attention(tape, h, attention_weights(params, l), cfg, mode, is_pad));
    const Tensor h2 = rms_norm(tape, x, params.at(layer_name(l, "ffn_norm.weight")), cfg.rmsnorm_eps);
    const Tensor gate = matmul(tape, h2, params.at(layer_name(l, "ffn.w_gate")));
    const Tensor up = matmul(tape, h2, params.at(layer_name(l, "ffn.w_up")));
    x = add(tape, x, matmul(tape, swiglu(tape, gate, up), params.at(layer_name(l, "ffn.w_down"))));
  }

  ForwardResult out;
  out.mode = mode;
  out.hidden = rms_norm(tape, x, params.at("final_norm.weight"), cfg.rmsnorm_eps);
  if (with_logits) {
    const Tensor head = cfg.tie_embeddings ? transpose(tape, params.at("embed.tokens"))
                                           : params.at("head.weight");
    out.logits = matmul(tape, out.hidden, head);
  }
  return out;
}

}  // namespace bplm
