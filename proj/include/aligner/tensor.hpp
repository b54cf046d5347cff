// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_TENSOR_HPP_
#define ALIGNER_TENSOR_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aligner {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using TokenSeq = std::vector<std::int32_t>;

std::string shape_str(const std::vector<std::size_t>& shape);

class Tape;

/// Shared storage behind a Tensor handle. Grad is allocated lazily on the
/// first accumulation during backward.
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  int node_id = -1;  // producing tape entry, -1 for leaves
  Tape* tape = nullptr;
};

/// Dense 64-bit float tensor with reverse-mode autodiff. Value-semantics
/// handle over shared storage; confined to one thread / one tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor param(std::vector<std::size_t> shape, std::vector<double> data);

  bool defined() const { return n_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return n_->shape; }
  std::size_t size() const { return n_->value.size(); }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double item() const;
  double at(std::size_t i) const { return n_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return n_->value[r * cols() + c]; }

  std::span<const double> values() const { return n_->value; }
  std::span<double> values_mut() { return n_->value; }
  const std::vector<double>& grad() const;

  bool requires_grad() const { return n_ && n_->requires_grad; }
  Tensor& set_requires_grad(bool b);
  void zero_grad();

  const std::shared_ptr<TensorNode>& node() const { return n_; }

 private:
  std::shared_ptr<TensorNode> n_;
};

/// Ordered record of differentiable operations. Backward visits entries
/// exactly once, in reverse creation order.
class Tape {
 public:
  int record(std::function<void()> backward_fn);
  void backward(const Tensor& loss);
  void clear();
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

/// Installs a tape as the thread-local recording target for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

Tape* current_tape();

/// Seeds d(loss)=1 and propagates through the loss's tape.
void backward(const Tensor& loss);

// Elementwise binary ops; shapes must match or one side may be a scalar
// tensor (the only broadcast supported).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor vexp(const Tensor& a);
Tensor vlog(const Tensor& a);
Tensor vtanh(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);

// [m×k]·[k×n] and [m×k]·[n×k]^T.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Log-softmax / softmax over the last axis (rank 1 or 2).
Tensor log_softmax(const Tensor& logits);
Tensor softmax(const Tensor& logits);

// out[t] = logprobs[t][tokens[t]].
Tensor gather_token_logprobs(const Tensor& logprobs, const TokenSeq& tokens);

// Row lookup: table[V×d], ids → [T×d].
Tensor embedding(const Tensor& table, const TokenSeq& ids);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Σ(a⊙mask)/Σmask with a constant 0/1 mask; all-zero mask is a contract error.
Tensor masked_mean(const Tensor& a, const std::vector<double>& mask);
Tensor masked_sum(const Tensor& a, const std::vector<double>& mask);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Same element count, new shape; gradient passes through unchanged.
Tensor reshape(const Tensor& a, std::vector<std::size_t> new_shape);

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

}  // namespace aligner

#endif  // ALIGNER_TENSOR_HPP_
