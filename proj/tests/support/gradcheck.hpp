// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_TESTS_SUPPORT_GRADCHECK_HPP_
#define ALIGNER_TESTS_SUPPORT_GRADCHECK_HPP_

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "aligner/tensor.hpp"

namespace aligner::testing {

// Central finite differences of a scalar function w.r.t. the raw storage of
// one leaf tensor. The function must recompute the loss from current values.
inline std::vector<double> finite_diff(const std::function<double()>& loss_fn, Tensor& leaf,
                                       double eps = 1e-5) {
  std::vector<double> grads(leaf.size());
  auto vals = leaf.values_mut();
  for (std::size_t i = 0; i < leaf.size(); ++i) {
    const double saved = vals[i];
    vals[i] = saved + eps;
    const double up = loss_fn();
    vals[i] = saved - eps;
    const double down = loss_fn();
    vals[i] = saved;
    grads[i] = (up - down) / (2.0 * eps);
  }
  return grads;
}

struct GradCheckResult {
  bool ok = true;
  double worst_rel_err = 0.0;
  std::size_t worst_index = 0;
  std::string detail;
};

inline GradCheckResult compare_grads(const std::vector<double>& analytic,
                                     const std::vector<double>& numeric, double rel_tol = 1e-4) {
  GradCheckResult r;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric[i])});
    const double rel = std::abs(analytic[i] - numeric[i]) / denom;
    if (rel > r.worst_rel_err) {
      r.worst_rel_err = rel;
      r.worst_index = i;
    }
  }
  r.ok = r.worst_rel_err <= rel_tol;
  if (!r.ok) {
    r.detail = "worst rel err " + std::to_string(r.worst_rel_err) + " at index " +
               std::to_string(r.worst_index) + ": analytic " +
               std::to_string(analytic[r.worst_index]) + " vs numeric " +
               std::to_string(numeric[r.worst_index]);
  }
  return r;
}

// Runs backward on loss_builder() and checks every listed leaf against
// central finite differences.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_builder,
                                  std::vector<Tensor> leaves, double eps = 1e-5,
                                  double rel_tol = 1e-4) {
  Tape tape;
  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) leaf.zero_grad();
  {
    TapeScope scope(tape);
    Tensor loss = loss_builder();
    backward(loss);
  }
  for (auto& leaf : leaves) analytic.push_back(leaf.grad());

  const auto loss_value = [&] {
    Tape t;
    TapeScope scope(t);
    return loss_builder().item();
  };
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto numeric = finite_diff(loss_value, leaves[k], eps);
    const auto res = compare_grads(analytic[k], numeric, rel_tol);
    if (!res.ok) return res;
  }
  return {};
}

}  // namespace aligner::testing

#endif  // ALIGNER_TESTS_SUPPORT_GRADCHECK_HPP_
