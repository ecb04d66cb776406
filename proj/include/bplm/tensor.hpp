// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors and a reverse-mode gradient tape.
//
// Tensors have reference semantics: copies share storage, like most
// define-by-run engines. Every differentiable op takes the Tape it records
// onto; ops whose inputs do not require gradients (or that run on an
// inference tape) record nothing.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bplm {

using Shape = std::vector<std::size_t>;
using Mask = std::vector<std::uint8_t>;

/// Token and class ids. Negative values are reserved for sentinels.
using TokenId = std::int32_t;

inline constexpr std::int64_t kIgnoreIndex = -100;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct write access. Only meaningful on leaves (parameters, inputs);
  /// mutating a recorded intermediate invalidates its tape.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Deep copy of shape, values, and requires_grad; no grad, no tape link.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape;
  friend struct TensorAccess;

  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t tape_id = 0;
    std::int64_t node = -1;
  };

  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl() const;

  std::shared_ptr<Impl> impl_;
};

/// Records the ops of one forward pass. A tape supports exactly one backward
/// pass; reset() clears it for reuse.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  Tape();
  /// A tape that never records; use for evaluation.
  static Tape inference();

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  std::uint64_t id() const { return id_; }
  bool consumed() const { return consumed_; }

  /// Builds an op result. Records a node (and marks the result as requiring
  /// grad) when recording and any input requires grad. `make_backward` is
  /// only invoked when a node is recorded; it receives the output tensor.
  Tensor emit(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
              const std::function<BackwardFn(const Tensor& out)>& make_backward);
  Tensor emit(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
              const std::function<BackwardFn(const Tensor& out)>& make_backward);

  /// Populates grad on every requires_grad tensor reachable from `loss`.
  void backward(const Tensor& loss);
  void reset();

 private:
  struct Node {
    Tensor output;
    BackwardFn backward;
  };

  explicit Tape(bool recording);

  std::uint64_t id_ = 0;
  bool recording_ = true;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

/// Gradient buffer of `t`, allocated (zeroed) on first use.
std::span<double> grad_buffer(const Tensor& t);

// ---- ops -------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);
Tensor reshape(Tape& tape, const Tensor& a, Shape shape);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor sum(Tape& tape, const Tensor& a);
/// Mean of scalar tensors.
Tensor mean_of(Tape& tape, const std::vector<Tensor>& scalars);

/// Softmax along `axis`, max-subtracted.
Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);
/// Row softmax of a [n×m] matrix over entries where `allowed` is nonzero.
/// Disallowed entries get probability exactly 0 (the -inf logit convention);
/// a row with no allowed entries is all zeros.
Tensor masked_softmax_rows(Tape& tape, const Tensor& x, const Mask& allowed);

Tensor rms_norm(Tape& tape, const Tensor& x, const Tensor& weight, double eps);
Tensor silu(Tape& tape, const Tensor& x);
Tensor swiglu(Tape& tape, const Tensor& gate, const Tensor& up);

/// Gathers rows of `table` [V×d] for the given ids -> [T×d].
Tensor embedding(Tape& tape, const Tensor& table, std::span<const TokenId> ids);

/// Mean over rows i < n of -log softmax(logits[i])[targets[i]], skipping
/// rows whose target equals `ignore_index`. Throws when every row is ignored.
Tensor cross_entropy_from_logits(Tape& tape, const Tensor& logits,
                                 std::span<const std::int64_t> targets,
                                 std::int64_t ignore_index = kIgnoreIndex);

/// Mean of the rows of `hidden` [T×d] where keep[t] != 0 -> [d].
Tensor mean_pool(Tape& tape, const Tensor& hidden, const Mask& keep);

Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts);
/// Stacks rank-1 tensors of equal length into a matrix.
Tensor stack_rows(Tape& tape, const std::vector<Tensor>& rows);
/// Divides each row of a matrix by its L2 norm (floored at `eps`).
Tensor l2_normalize_rows(Tape& tape, const Tensor& x, double eps = 1e-12);

/// Rotary position embedding on [T×heads×head_dim]: coordinate pair
/// (2i, 2i+1) at position p is rotated by p * theta^(-2i/head_dim).
Tensor rope_apply(Tape& tape, const Tensor& x, std::span<const std::int64_t> positions,
                  double theta);

}  // namespace bplm
