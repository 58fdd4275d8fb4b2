// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient verification for autograd ops. The op library
// is generic over its scalar type; the oracle instantiates it in double so
// the check is limited by truncation error, not rounding. The pipeline
// itself runs the float instantiation of the very same code.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "histrec/autograd.hpp"

namespace histrec {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t n_checked = 0;
  std::vector<std::pair<std::string, double>> per_param;  // worst rel. err per input
  std::string worst_param;
  int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool ok(double tol) const { return n_checked > 0 && max_rel_err < tol; }
};

template <typename S = double>
struct GradCheckInputT {
  std::string name;
  NodePtrT<S> node;  // leaf with requires_grad
};

using GradCheckInput = GradCheckInputT<double>;

// build() must assemble a fresh graph over the given leaves and return the
// scalar loss node. Every coordinate of every input is perturbed by +/-h
// unless stride > 1, which checks every stride-th coordinate.
template <typename S = double>
GradCheckReport check_gradients(const std::vector<GradCheckInputT<S>>& inputs,
                                const std::function<NodePtrT<S>()>& build, S h = S(1e-3),
                                int64_t stride = 1) {
  // Analytic pass.
  for (const auto& in : inputs) in.node->zero_grad();
  NodePtrT<S> loss = build();
  backward(loss);
  std::vector<TensorT<S>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) analytic.push_back(in.node->ensure_grad());

  GradCheckReport rep;
  for (size_t pi = 0; pi < inputs.size(); ++pi) {
    TensorT<S>& x = inputs[pi].node->value;
    double param_worst = 0.0;
    for (int64_t i = 0; i < x.numel(); i += stride) {
      const S saved = x[i];
      x[i] = saved + h;
      const double f_plus = static_cast<double>(build()->value[0]);
      x[i] = saved - h;
      const double f_minus = static_cast<double>(build()->value[0]);
      x[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[pi][i]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      ++rep.n_checked;
      param_worst = std::max(param_worst, rel);
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = inputs[pi].name;
        rep.worst_index = i;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
    rep.per_param.emplace_back(inputs[pi].name, param_worst);
  }
  return rep;
}

}  // namespace histrec
