// SPDX-License-Identifier: Apache-2.0

#include "bplm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

namespace bplm {

namespace {

std::atomic<std::uint64_t> g_next_tape_id{1};

void require_finite(const std::vector<double>& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// C[m×n] += A[m×k] · B[k×n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×k] += G[m×n] · B[k×n]^T
void gemm_nt_acc(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
                 std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k×n] += A[m×k]^T · G[m×n]
void gemm_tn_acc(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  require_finite(values, "Tensor::from");
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("use of undefined Tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }
std::span<const double> Tensor::data() const { return impl().data; }
std::span<double> Tensor::mutable_data() { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
  return impl().data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require_rank(*this, 2, "at");
  return impl().data[r * shape()[1] + c];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool on) { impl().requires_grad = on; }
bool Tensor::has_grad() const { return !impl().grad.empty(); }
std::span<const double> Tensor::grad() const { return impl().grad; }

std::span<double> Tensor::mutable_grad() { return grad_buffer(*this); }

void Tensor::zero_grad() { impl().grad.clear(); }

Tensor Tensor::clone() const {
  auto copy = std::make_shared<Impl>();
  copy->shape = impl().shape;
  copy->data = impl().data;
  copy->requires_grad = impl().requires_grad;
  return Tensor(std::move(copy));
}

struct TensorAccess {
  static std::vector<double>& grad(const Tensor& t) { return t.impl().grad; }
  static std::size_t size(const Tensor& t) { return t.impl().data.size(); }
};

std::span<double> grad_buffer(const Tensor& t) {
  auto& g = TensorAccess::grad(t);
  if (g.empty()) g.assign(TensorAccess::size(t), 0.0);
  return g;
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : Tape(true) {}
Tape::Tape(bool recording) : id_(g_next_tape_id.fetch_add(1)), recording_(recording) {}
Tape Tape::inference() { return Tape(false); }

Tensor Tape::emit(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                  const std::function<BackwardFn(const Tensor& out)>& make_backward) {
  return emit(std::move(shape), std::move(values), std::vector<Tensor>(inputs), make_backward);
}

Tensor Tape::emit(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                  const std::function<BackwardFn(const Tensor& out)>& make_backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  if (!recording_) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  if (consumed_) throw TapeError("tape already consumed by backward(); call reset()");
  out.impl_->requires_grad = true;
  out.impl_->tape_id = id_;
  out.impl_->node = static_cast<std::int64_t>(nodes_.size());
  nodes_.push_back(Node{out, make_backward(out)});
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("backward() called twice on the same tape without reset()");
  if (loss.numel() != 1) throw TapeError("backward() requires a scalar loss, got " +
                                         shape_str(loss.shape()));
  if (loss.impl_->tape_id != id_ || loss.impl_->node < 0) {
    throw TapeError("loss is not recorded on this tape (detached)");
  }
  consumed_ = true;
  grad_buffer(loss)[0] = 1.0;
  for (std::int64_t i = loss.impl_->node; i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.output.has_grad()) continue;  // not on a path to the loss
    node.backward(node.output.grad());
  }
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return tape.emit({m, n}, std::move(out), {a, b}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      if (a.requires_grad()) gemm_nt_acc(g.data(), b.data().data(), grad_buffer(a).data(), m, n, k);
      if (b.requires_grad()) gemm_tn_acc(a.data().data(), g.data(), grad_buffer(b).data(), m, k, n);
    };
  });
}

Tensor transpose(Tape& tape, const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return tape.emit({n, m}, std::move(out), {a}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      auto ga = grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    };
  });
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return tape.emit(std::move(shape), std::move(out), {a}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      auto ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return tape.emit(a.shape(), std::move(out), {a, b}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = grad_buffer(*t);
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    };
  });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return tape.emit(a.shape(), std::move(out), {a, b}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      const auto xa = a.data(), xb = b.data();
      if (a.requires_grad()) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
      }
      if (b.requires_grad()) {
        auto gb = grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
      }
    };
  });
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return tape.emit(a.shape(), std::move(out), {a}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      auto ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    };
  });
}

Tensor sum(Tape& tape, const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return tape.emit({1}, {total}, {a}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      for (double& v : grad_buffer(a)) v += g[0];
    };
  });
}

Tensor mean_of(Tape& tape, const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ShapeError("mean_of: no inputs");
  double total = 0.0;
  for (const auto& s : scalars) total += s.item();
  const double inv = 1.0 / static_cast<double>(scalars.size());
  return tape.emit({1}, {total * inv}, scalars, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      for (const auto& s : scalars) {
        if (s.requires_grad()) grad_buffer(s)[0] += g[0] * inv;
      }
    };
  });
}

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) throw ShapeError("softmax: axis out of range for " + shape_str(shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  return tape.emit(shape, std::move(out), {x}, [=](const Tensor& y) {
    return [=](std::span<const double> g) {
      const auto p = y.data();
      auto gx = grad_buffer(x);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * p[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += p[idx] * (g[idx] - dot);
          }
        }
      }
    };
  });
}

Tensor masked_softmax_rows(Tape& tape, const Tensor& x, const Mask& allowed) {
  require_rank(x, 2, "masked_softmax_rows");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (allowed.size() != n * m) throw ShapeError("masked_softmax_rows: mask size mismatch");
  std::vector<double> out(n * m, 0.0);
  const auto in = x.data();
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c)
      if (allowed[r * m + c]) mx = std::max(mx, in[r * m + c]);
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      if (!allowed[r * m + c]) continue;
      const double e = std::exp(in[r * m + c] - mx);
      out[r * m + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] /= z;
  }
  return tape.emit({n, m}, std::move(out), {x}, [=](const Tensor& y) {
    return [=](std::span<const double> g) {
      const auto p = y.data();
      auto gx = grad_buffer(x);
      for (std::size_t r = 0; r < n; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < m; ++c) dot += g[r * m + c] * p[r * m + c];
        for (std::size_t c = 0; c < m; ++c) gx[r * m + c] += p[r * m + c] * (g[r * m + c] - dot);
      }
    };
  });
}

Tensor rms_norm(Tape& tape, const Tensor& x, const Tensor& weight, double eps) {
  require_rank(weight, 1, "rms_norm");
  const std::size_t d = weight.dim(0);
  if (x.shape().back() != d) {
    throw ShapeError("rms_norm: last dimension " + shape_str(x.shape()) +
                     " does not match weight " + shape_str(weight.shape()));
  }
  if (eps < 0) throw std::invalid_argument("rms_norm: eps must be non-negative");
  const std::size_t rows = x.numel() / d;
  const auto in = x.data();
  const auto w = weight.data();
  std::vector<double> out(x.numel());
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double ms = 0.0;
    for (std::size_t i = 0; i < d; ++i) ms += row[i] * row[i];
    ms /= static_cast<double>(d);
    // Zero rows map to zero; with eps == 0 the formula would be 0/0.
    inv_rms[r] = (ms + eps) > 0.0 ? 1.0 / std::sqrt(ms + eps) : 0.0;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = w[i] * row[i] * inv_rms[r];
  }
  return tape.emit(x.shape(), std::move(out), {x, weight}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      const auto xin = x.data();
      const auto wv = weight.data();
      const double dd = static_cast<double>(d);
      std::span<double> gx, gw;
      if (x.requires_grad()) gx = grad_buffer(x);
      if (weight.requires_grad()) gw = grad_buffer(weight);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xin.data() + r * d;
        const double* grow = g.data() + r * d;
        const double s = inv_rms[r];
        if (!gw.empty()) {
          for (std::size_t i = 0; i < d; ++i) gw[i] += grow[i] * row[i] * s;
        }
        if (!gx.empty()) {
          // d/dx_j [w_i x_i s] = w_i s δ_ij - w_i x_i s^3 x_j / d
          double dot = 0.0;
          for (std::size_t i = 0; i < d; ++i) dot += grow[i] * wv[i] * row[i];
          const double c = dot * s * s * s / dd;
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += grow[j] * wv[j] * s - c * row[j];
        }
      }
    };
  });
}

Tensor silu(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * sigmoid(in[i]);
  return tape.emit(x.shape(), std::move(out), {x}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      const auto z = x.data();
      auto gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = sigmoid(z[i]);
        gx[i] += g[i] * (s + z[i] * s * (1.0 - s));
      }
    };
  });
}

Tensor swiglu(Tape& tape, const Tensor& gate, const Tensor& up) {
  require_same_shape(gate, up, "swiglu");
  std::vector<double> out(gate.numel());
  const auto a = gate.data(), b = up.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * sigmoid(a[i]) * b[i];
  return tape.emit(gate.shape(), std::move(out), {gate, up}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      const auto z = gate.data(), u = up.data();
      if (gate.requires_grad()) {
        auto gg = grad_buffer(gate);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = sigmoid(z[i]);
          gg[i] += g[i] * u[i] * (s + z[i] * s * (1.0 - s));
        }
      }
      if (up.requires_grad()) {
        auto gu = grad_buffer(up);
        for (std::size_t i = 0; i < g.size(); ++i) gu[i] += g[i] * z[i] * sigmoid(z[i]);
      }
    };
  });
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const TokenId> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  std::vector<TokenId> idv(ids.begin(), ids.end());
  std::vector<double> out(idv.size() * d);
  const auto w = table.data();
  for (std::size_t t = 0; t < idv.size(); ++t) {
    if (idv[t] < 0 || static_cast<std::size_t>(idv[t]) >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(idv[t]) +
                              " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(w.data() + static_cast<std::size_t>(idv[t]) * d, d, out.data() + t * d);
  }
  return tape.emit({idv.size(), d}, std::move(out), {table}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      auto gw = grad_buffer(table);
      for (std::size_t t = 0; t < idv.size(); ++t) {
        double* dst = gw.data() + static_cast<std::size_t>(idv[t]) * d;
        for (std::size_t i = 0; i < d; ++i) dst[i] += g[t * d + i];
      }
    };
  });
}

Tensor cross_entropy_from_logits(Tape& tape, const Tensor& logits,
                                 std::span<const std::int64_t> targets,
                                 std::int64_t ignore_index) {
  require_rank(logits, 2, "cross_entropy_from_logits");
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != n) throw ShapeError("cross_entropy_from_logits: target count mismatch");
  std::vector<std::int64_t> tv(targets.begin(), targets.end());
  std::size_t kept = 0;
  for (auto t : tv) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::out_of_range("cross_entropy_from_logits: target " + std::to_string(t) +
                              " outside [0, " + std::to_string(vocab) + ")");
    }
    ++kept;
  }
  if (kept == 0) throw std::invalid_argument("empty loss: every position is ignored");

  const auto z = logits.data();
  // Softmax rows are kept for backward; ignored rows stay empty.
  std::vector<double> probs(n * vocab, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (tv[r] == ignore_index) continue;
    const double* row = z.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double s = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs[r * vocab + c] = std::exp(row[c] - mx);
      s += probs[r * vocab + c];
    }
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] /= s;
    total += -(row[tv[r]] - mx - std::log(s));
  }
  const double inv = 1.0 / static_cast<double>(kept);
  return tape.emit({1}, {total * inv}, {logits}, [=, probs = std::move(probs)](const Tensor&) {
    return [=](std::span<const double> g) {
      auto gl = grad_buffer(logits);
      const double coef = g[0] * inv;
      for (std::size_t r = 0; r < n; ++r) {
        if (tv[r] == ignore_index) continue;
        for (std::size_t c = 0; c < vocab; ++c) gl[r * vocab + c] += coef * probs[r * vocab + c];
        gl[r * vocab + static_cast<std::size_t>(tv[r])] -= coef;
      }
    };
  });
}

Tensor mean_pool(Tape& tape, const Tensor& hidden, const Mask& keep) {
  require_rank(hidden, 2, "mean_pool");
  const std::size_t rows = hidden.dim(0), d = hidden.dim(1);
  if (keep.size() != rows) throw ShapeError("mean_pool: mask length mismatch");
  const auto kept = static_cast<std::size_t>(std::count_if(keep.begin(), keep.end(),
                                                           [](auto k) { return k != 0; }));
  if (kept == 0) throw std::invalid_argument("mean_pool: no kept positions");
  const double inv = 1.0 / static_cast<double>(kept);
  std::vector<double> out(d, 0.0);
  const auto h = hidden.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (!keep[r]) continue;
    for (std::size_t i = 0; i < d; ++i) out[i] += h[r * d + i];
  }
  for (double& v : out) v *= inv;
  return tape.emit({d}, std::move(out), {hidden}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      auto gh = grad_buffer(hidden);
      for (std::size_t r = 0; r < rows; ++r) {
        if (!keep[r]) continue;
        for (std::size_t i = 0; i < d; ++i) gh[r * d + i] += g[i] * inv;
      }
    };
  });
}

Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (count == 0 || start + count > m) throw ShapeError("slice_cols: range out of bounds");
  std::vector<double> out(n * count);
  const auto in = x.data();
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(in.data() + r * m + start, count, out.data() + r * count);
  return tape.emit({n, count}, std::move(out), {x}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      auto gx = grad_buffer(x);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < count; ++c) gx[r * m + start + c] += g[r * count + c];
    };
  });
}

Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts.front().dim(0);
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != n) throw ShapeError("concat_cols: row count mismatch");
    m += p.dim(1);
  }
  std::vector<double> out(n * m);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    const auto in = p.data();
    for (std::size_t r = 0; r < n; ++r) std::copy_n(in.data() + r * w, w, out.data() + r * m + offset);
    offset += w;
  }
  return tape.emit({n, m}, std::move(out), parts, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        if (p.requires_grad()) {
          auto gp = grad_buffer(p);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * m + off + c];
        }
        off += w;
      }
    };
  });
}

Tensor stack_rows(Tape& tape, const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no inputs");
  const std::size_t d = rows.front().numel();
  std::vector<double> out;
  out.reserve(rows.size() * d);
  for (const auto& r : rows) {
    if (r.numel() != d) throw ShapeError("stack_rows: length mismatch");
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  return tape.emit({rows.size(), d}, std::move(out), rows, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!rows[i].requires_grad()) continue;
        auto gr = grad_buffer(rows[i]);
        for (std::size_t c = 0; c < d; ++c) gr[c] += g[i * d + c];
      }
    };
  });
}

Tensor l2_normalize_rows(Tape& tape, const Tensor& x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto in = x.data();
  std::vector<double> out(n * d);
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += in[r * d + c] * in[r * d + c];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = in[r * d + c] / norms[r];
  }
  return tape.emit({n, d}, std::move(out), {x}, [=](const Tensor& y) {
    return [=](std::span<const double> g) {
      const auto yv = y.data();
      auto gx = grad_buffer(x);
      for (std::size_t r = 0; r < n; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * yv[r * d + c];
        // Below the floor the map is linear (x / eps).
        const bool floored = norms[r] == eps;
        for (std::size_t c = 0; c < d; ++c) {
          const double proj = floored ? 0.0 : dot * yv[r * d + c];
          gx[r * d + c] += (g[r * d + c] - proj) / norms[r];
        }
      }
    };
  });
}

Tensor rope_apply(Tape& tape, const Tensor& x, std::span<const std::int64_t> positions,
                  double theta) {
  require_rank(x, 3, "rope_apply");
  const std::size_t T = x.dim(0), heads = x.dim(1), hd = x.dim(2);
  if (hd % 2 != 0) throw ShapeError("rope_apply: head_dim must be even, got " + std::to_string(hd));
  if (positions.size() != T) throw ShapeError("rope_apply: position count mismatch");
  const std::size_t pairs = hd / 2;
  std::vector<double> cosv(T * pairs), sinv(T * pairs);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < pairs; ++i) {
      const double freq =
          std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double angle = static_cast<double>(positions[t]) * freq;
      cosv[t * pairs + i] = std::cos(angle);
      sinv[t * pairs + i] = std::sin(angle);
    }
  }
  const auto in = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = (t * heads + h) * hd;
      for (std::size_t i = 0; i < pairs; ++i) {
        const double c = cosv[t * pairs + i], s = sinv[t * pairs + i];
        const double a = in[base + 2 * i], b = in[base + 2 * i + 1];
        out[base + 2 * i] = a * c - b * s;
        out[base + 2 * i + 1] = a * s + b * c;
      }
    }
  }
  return tape.emit(x.shape(), std::move(out), {x}, [=](const Tensor&) {
    return [=](std::span<const double> g) {
      auto gx = grad_buffer(x);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t base = (t * heads + h) * hd;
          for (std::size_t i = 0; i < pairs; ++i) {
            const double c = cosv[t * pairs + i], s = sinv[t * pairs + i];
            const double ga = g[base + 2 * i], gb = g[base + 2 * i + 1];
            gx[base + 2 * i] += ga * c + gb * s;
            gx[base + 2 * i + 1] += -ga * s + gb * c;
          }
        }
      }
    };
  });
}

}  // namespace bplm
