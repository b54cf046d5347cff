// SPDX-License-Identifier: Apache-2.0

#include "aligner/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace aligner {

namespace {

thread_local Tape* g_current_tape = nullptr;

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>& grad_ref(const std::shared_ptr<TensorNode>& n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
  return n->grad;
}

bool has_out_grad(const std::shared_ptr<TensorNode>& n) { return !n->grad.empty(); }

// Marks `out` as produced by a recorded op when recording is active.
void record_op(Tensor& out, bool any_input_grad, std::function<void()> backward_fn) {
  Tape* tape = g_current_tape;
  if (!tape || !any_input_grad) return;
  auto n = out.node();
  n->requires_grad = true;
  n->tape = tape;
  n->node_id = tape->record(std::move(backward_fn));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill) {
  n_ = std::make_shared<TensorNode>();
  n_->shape = std::move(shape);
  n_->value.assign(shape_numel(n_->shape), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  n_ = std::make_shared<TensorNode>();
  n_->shape = std::move(shape);
  n_->value = std::move(data);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::param(std::vector<std::size_t> shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() == 1) return 1;
  if (rank() == 2) return n_->shape[0];
  throw ShapeError("rows: expected rank 1 or 2, got " + shape_str(n_->shape));
}

std::size_t Tensor::cols() const {
  if (rank() == 1) return n_->shape[0];
  if (rank() == 2) return n_->shape[1];
  throw ShapeError("cols: expected rank 1 or 2, got " + shape_str(n_->shape));
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor is not scalar, shape " + shape_str(shape()));
  return n_->value[0];
}

const std::vector<double>& Tensor::grad() const {
  grad_ref(n_);
  return n_->grad;
}

Tensor& Tensor::set_requires_grad(bool b) {
  n_->requires_grad = b;
  return *this;
}

void Tensor::zero_grad() {
  if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

int Tape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  grad_ref(loss.node())[0] += 1.0;
  const int start = loss.node()->node_id;
  for (int i = start; i >= 0; --i) nodes_[static_cast<std::size_t>(i)]();
}

void Tape::clear() { nodes_.clear(); }

TapeScope::TapeScope(Tape& tape) : prev_(g_current_tape) { g_current_tape = &tape; }
TapeScope::~TapeScope() { g_current_tape = prev_; }

Tape* current_tape() { return g_current_tape; }

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  Tape* tape = loss.node()->tape;
  if (!tape) {
    grad_ref(loss.node())[0] += 1.0;
    return;
  }
  tape->backward(loss);
}

namespace {

// Shared core for elementwise binary ops with scalar-tensor broadcast.
template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  if (!a_scalar && !b_scalar) check_same_shape(a, b, name);

  const Tensor& big = a_scalar ? b : a;
  const std::size_t n = big.size();
  std::vector<double> out(n);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  }
  Tensor res(big.shape(), std::move(out));
  auto an = a.node(), bn = b.node(), on = res.node();
  record_op(res, a.requires_grad() || b.requires_grad(),
            [an, bn, on, a_scalar, b_scalar, n, bwd] {
              if (!has_out_grad(on)) return;
              const auto& g = on->grad;
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t ia = a_scalar ? 0 : i;
                const std::size_t ib = b_scalar ? 0 : i;
                double da = 0.0, db = 0.0;
                bwd(an->value[ia], bn->value[ib], g[i], da, db);
                if (an->requires_grad) grad_ref(an)[ia] += da;
                if (bn->requires_grad) grad_ref(bn)[ib] += db;
              }
            });
  return res;
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const auto& av = a.node()->value;
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  Tensor res(a.shape(), std::move(out));
  auto an = a.node(), on = res.node();
  record_op(res, a.requires_grad(), [an, on, n, bwd] {
    if (!has_out_grad(on) || !an->requires_grad) return;
    auto& ag = grad_ref(an);
    for (std::size_t i = 0; i < n; ++i) ag[i] += bwd(an->value[i], on->value[i]) * on->grad[i];
  });
  return res;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

// Ties route the gradient to the first argument.
Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double g, double& da, double& db) {
        if (x <= y)
          da = g;
        else
          db = g;
      });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double g, double& da, double& db) {
        if (x >= y)
          da = g;
        else
          db = g;
      });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor vexp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor vlog(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor vtanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary_op(
      a,
      [](double x) {
        const double u = kC * (x + kA * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
      },
      [](double x, double) {
        const double u = kC * (x + kA * x * x * x);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) { return x < 0.0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x)); },
      [](double x, double) { return stable_sigmoid(-x); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  Tensor res({m, n}, std::move(out));
  auto an = a.node(), bn = b.node(), on = res.node();
  record_op(res, a.requires_grad() || b.requires_grad(), [an, bn, on, m, k, n] {
    if (!has_out_grad(on)) return;
    const auto& g = on->grad;
    if (an->requires_grad) {
      auto& ag = grad_ref(an);  // dA = dC · B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = g.data() + i * n;
          const double* brow = bn->value.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ag[i * k + p] += acc;
        }
    }
    if (bn->requires_grad) {
      auto& bg = grad_ref(bn);  // dB = A^T · dC
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = an->value[i * k + p];
          if (aip == 0.0) continue;
          double* brow = bg.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
        }
      }
    }
  });
  return res;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      const double* arow = av.data() + i * k;
      const double* brow = bv.data() + j * k;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * n + j] = acc;
    }
  Tensor res({m, n}, std::move(out));
  auto an = a.node(), bn = b.node(), on = res.node();
  record_op(res, a.requires_grad() || b.requires_grad(), [an, bn, on, m, k, n] {
    if (!has_out_grad(on)) return;
    const auto& g = on->grad;
    if (an->requires_grad) {
      auto& ag = grad_ref(an);  // dA = dC · B
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          if (gij == 0.0) continue;
          const double* brow = bn->value.data() + j * k;
          double* arow = ag.data() + i * k;
          for (std::size_t p = 0; p < k; ++p) arow[p] += gij * brow[p];
        }
    }
    if (bn->requires_grad) {
      auto& bg = grad_ref(bn);  // dB = dC^T · A
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          if (gij == 0.0) continue;
          const double* arow = an->value.data() + i * k;
          double* brow = bg.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) brow[p] += gij * arow[p];
        }
    }
  });
  return res;
}

namespace {

void check_last_axis(const Tensor& t, const char* op) {
  if (t.rank() != 1 && t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(t.shape()));
  }
  if (t.cols() == 0) throw ShapeError(std::string(op) + ": empty last axis");
}

}  // namespace

Tensor log_softmax(const Tensor& logits) {
  check_last_axis(logits, "log_softmax");
  const std::size_t rows = logits.rows(), v = logits.cols();
  std::vector<double> out(rows * v);
  const auto& x = logits.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * v;
    double mx = in[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, in[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < v; ++j) se += std::exp(in[j] - mx);
    const double lse = mx + std::log(se);
    for (std::size_t j = 0; j < v; ++j) out[r * v + j] = in[j] - lse;
  }
  Tensor res(logits.shape(), std::move(out));
  auto an = logits.node(), on = res.node();
  record_op(res, logits.requires_grad(), [an, on, rows, v] {
    if (!has_out_grad(on) || !an->requires_grad) return;
    auto& ag = grad_ref(an);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = on->grad.data() + r * v;
      const double* y = on->value.data() + r * v;
      double gs = 0.0;
      for (std::size_t j = 0; j < v; ++j) gs += g[j];
      for (std::size_t j = 0; j < v; ++j) ag[r * v + j] += g[j] - std::exp(y[j]) * gs;
    }
  });
  return res;
}

Tensor softmax(const Tensor& logits) {
  check_last_axis(logits, "softmax");
  const std::size_t rows = logits.rows(), v = logits.cols();
  std::vector<double> out(rows * v);
  const auto& x = logits.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * v;
    double mx = in[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, in[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double e = std::exp(in[j] - mx);
      out[r * v + j] = e;
      se += e;
    }
    for (std::size_t j = 0; j < v; ++j) out[r * v + j] /= se;
  }
  Tensor res(logits.shape(), std::move(out));
  auto an = logits.node(), on = res.node();
  record_op(res, logits.requires_grad(), [an, on, rows, v] {
    if (!has_out_grad(on) || !an->requires_grad) return;
    auto& ag = grad_ref(an);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = on->grad.data() + r * v;
      const double* y = on->value.data() + r * v;
      double dot = 0.0;
      for (std::size_t j = 0; j < v; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < v; ++j) ag[r * v + j] += y[j] * (g[j] - dot);
    }
  });
  return res;
}

Tensor gather_token_logprobs(const Tensor& logprobs, const TokenSeq& tokens) {
  if (logprobs.rank() != 2) {
    throw ShapeError("gather_token_logprobs: expected [T x V], got " + shape_str(logprobs.shape()));
  }
  const std::size_t t_len = logprobs.rows(), v = logprobs.cols();
  if (tokens.size() != t_len) {
    throw ShapeError("gather_token_logprobs: " + std::to_string(tokens.size()) + " tokens for " +
                     std::to_string(t_len) + " rows");
  }
  std::vector<double> out(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    const auto id = tokens[t];
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw IndexError("gather_token_logprobs: token id " + std::to_string(id) + " at position " +
                       std::to_string(t) + " out of range [0," + std::to_string(v) + ")");
    }
    out[t] = logprobs.at(t, static_cast<std::size_t>(id));
  }
  Tensor res({t_len}, std::move(out));
  auto an = logprobs.node(), on = res.node();
  record_op(res, logprobs.requires_grad(), [an, on, tokens, v] {
    if (!has_out_grad(on) || !an->requires_grad) return;
    auto& ag = grad_ref(an);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      ag[t * v + static_cast<std::size_t>(tokens[t])] += on->grad[t];
    }
  });
  return res;
}

Tensor embedding(const Tensor& table, const TokenSeq& ids) {
  if (table.rank() != 2) {
    throw ShapeError("embedding: table must be [V x d], got " + shape_str(table.shape()));
  }
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto id = ids[t];
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw IndexError("embedding: token id " + std::to_string(id) + " at position " +
                       std::to_string(t) + " out of range [0," + std::to_string(v) + ")");
    }
    const double* row = table.node()->value.data() + static_cast<std::size_t>(id) * d;
    std::copy(row, row + d, out.data() + t * d);
  }
  Tensor res({ids.size(), d}, std::move(out));
  auto an = table.node(), on = res.node();
  record_op(res, table.requires_grad(), [an, on, ids, d] {
    if (!has_out_grad(on) || !an->requires_grad) return;
    auto& ag = grad_ref(an);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const double* g = on->grad.data() + t * d;
      double* row = ag.data() + static_cast<std::size_t>(ids[t]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
    }
  });
  return res;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.node()->value) s += x;
  Tensor res = Tensor::scalar(s);
  auto an = a.node(), on = res.node();
  record_op(res, a.requires_grad(), [an, on] {
    if (!has_out_grad(on) || !an->requires_grad) return;
    const double g = on->grad[0];
    auto& ag = grad_ref(an);
    for (double& x : ag) x += g;
  });
  return res;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean: empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor masked_sum(const Tensor& a, const std::vector<double>& mask) {
  if (mask.size() != a.size()) {
    throw ShapeError("masked_sum: mask length " + std::to_string(mask.size()) +
                     " vs tensor size " + std::to_string(a.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) s += a.node()->value[i] * mask[i];
  Tensor res = Tensor::scalar(s);
  auto an = a.node(), on = res.node();
  record_op(res, a.requires_grad(), [an, on, mask] {
    if (!has_out_grad(on) || !an->requires_grad) return;
    const double g = on->grad[0];
    auto& ag = grad_ref(an);
    for (std::size_t i = 0; i < mask.size(); ++i) ag[i] += g * mask[i];
  });
  return res;
}

Tensor masked_mean(const Tensor& a, const std::vector<double>& mask) {
  double denom = 0.0;
  for (double m : mask) denom += m;
  if (denom == 0.0) throw ContractError("masked_mean: mask selects no elements");
  return mul_scalar(masked_sum(a, mask), 1.0 / denom);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 2) throw ShapeError("layer_norm: x must be [T x d], got " + shape_str(x.shape()));
  const std::size_t t_len = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: gamma/beta size mismatch with d=" + std::to_string(d));
  }
  std::vector<double> out(t_len * d);
  std::vector<double> xhat(t_len * d);
  std::vector<double> inv_std(t_len);
  const auto& xv = x.node()->value;
  const auto& gv = gamma.node()->value;
  const auto& bv = beta.node()->value;
  for (std::size_t r = 0; r < t_len; ++r) {
    const double* in = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = in[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  Tensor res({t_len, d}, std::move(out));
  auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = res.node();
  record_op(res, x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
            [xn, gn, bn, on, t_len, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
              if (!has_out_grad(on)) return;
              for (std::size_t r = 0; r < t_len; ++r) {
                const double* g = on->grad.data() + r * d;
                const double* h = xhat.data() + r * d;
                if (bn->requires_grad) {
                  auto& bg = grad_ref(bn);
                  for (std::size_t j = 0; j < d; ++j) bg[j] += g[j];
                }
                if (gn->requires_grad) {
                  auto& gg = grad_ref(gn);
                  for (std::size_t j = 0; j < d; ++j) gg[j] += g[j] * h[j];
                }
                if (xn->requires_grad) {
                  auto& xg = grad_ref(xn);
                  double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat ⊙ xhat)
                  for (std::size_t j = 0; j < d; ++j) {
                    const double dh = g[j] * gn->value[j];
                    m1 += dh;
                    m2 += dh * h[j];
                  }
                  m1 /= static_cast<double>(d);
                  m2 /= static_cast<double>(d);
                  for (std::size_t j = 0; j < d; ++j) {
                    const double dh = g[j] * gn->value[j];
                    xg[r * d + j] += inv_std[r] * (dh - m1 - h[j] * m2);
                  }
                }
              }
            });
  return res;
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> new_shape) {
  if (shape_numel(new_shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(new_shape));
  }
  Tensor res(std::move(new_shape),
             std::vector<double>(a.node()->value.begin(), a.node()->value.end()));
  auto an = a.node(), on = res.node();
  record_op(res, a.requires_grad(), [an, on] {
    if (!has_out_grad(on) || !an->requires_grad) return;
    auto& ag = grad_ref(an);
    for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += on->grad[i];
  });
  return res;
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (a.rank() != 2 || r0 > r1 || r1 > a.rows()) {
    throw ShapeError("slice_rows: invalid range [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ") for " + shape_str(a.shape()));
  }
  const std::size_t c = a.cols();
  std::vector<double> out((r1 - r0) * c);
  std::copy(a.node()->value.begin() + static_cast<std::ptrdiff_t>(r0 * c),
            a.node()->value.begin() + static_cast<std::ptrdiff_t>(r1 * c), out.begin());
  Tensor res({r1 - r0, c}, std::move(out));
  auto an = a.node(), on = res.node();
  record_op(res, a.requires_grad(), [an, on, r0, c] {
    if (!has_out_grad(on) || !an->requires_grad) return;
    auto& ag = grad_ref(an);
    for (std::size_t i = 0; i < on->grad.size(); ++i) ag[r0 * c + i] += on->grad[i];
  });
  return res;
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.rank() != 2 || c0 > c1 || c1 > a.cols()) {
    throw ShapeError("slice_cols: invalid range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") for " + shape_str(a.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols(), w = c1 - c0;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.at(i, c0 + j);
  Tensor res({r, w}, std::move(out));
  auto an = a.node(), on = res.node();
  record_op(res, a.requires_grad(), [an, on, r, c, c0, w] {
    if (!has_out_grad(on) || !an->requires_grad) return;
    auto& ag = grad_ref(an);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) ag[i * c + c0 + j] += on->grad[i * w + j];
  });
  return res;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != c) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
    }
    total += p.rows();
    any_grad = any_grad || p.requires_grad();
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const auto& p : parts) {
    out.insert(out.end(), p.node()->value.begin(), p.node()->value.end());
  }
  Tensor res({total, c}, std::move(out));
  std::vector<std::shared_ptr<TensorNode>> ins;
  ins.reserve(parts.size());
  for (const auto& p : parts) ins.push_back(p.node());
  auto on = res.node();
  record_op(res, any_grad, [ins, on] {
    if (!has_out_grad(on)) return;
    std::size_t off = 0;
    for (const auto& in : ins) {
      const std::size_t n = in->value.size();
      if (in->requires_grad) {
        auto& ig = grad_ref(in);
        for (std::size_t i = 0; i < n; ++i) ig[i] += on->grad[off + i];
      }
      off += n;
    }
  });
  return res;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != r) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
    }
    total += p.cols();
    any_grad = any_grad || p.requires_grad();
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p.at(i, j);
    off += w;
  }
  Tensor res({r, total}, std::move(out));
  std::vector<std::shared_ptr<TensorNode>> ins;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    ins.push_back(p.node());
    widths.push_back(p.cols());
  }
  auto on = res.node();
  record_op(res, any_grad, [ins, widths, on, r, total] {
    if (!has_out_grad(on)) return;
    std::size_t off = 0;
    for (std::size_t k = 0; k < ins.size(); ++k) {
      const std::size_t w = widths[k];
      if (ins[k]->requires_grad) {
        auto& ig = grad_ref(ins[k]);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) ig[i * w + j] += on->grad[i * total + off + j];
      }
      off += w;
    }
  });
  return res;
}

}  // namespace aligner
