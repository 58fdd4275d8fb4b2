// SPDX-License-Identifier: Apache-2.0
//
// Decoupled-weight-decay adaptive-moment optimizer over named parameter
// nodes, with two learning-rate groups (freshly initialized vs transferred
// parameters) sharing one warmup-then-cosine schedule.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "histrec/autograd.hpp"
#include "histrec/config.hpp"
#include "histrec/tensor.hpp"

namespace histrec::opt {

// Linear warmup from zero to the peak over `warmup` steps, then cosine
// decay so the last step lands exactly on the floor of peak/100.
inline double lr_at(int64_t step, int64_t steps, int64_t warmup, double peak) {
  if (step < 0) throw ConfigError("lr schedule: negative step");
  if (warmup > 0 && step < warmup) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double floor = peak / 100.0;
  const int64_t last = steps - 1;
  if (last <= warmup) return floor;
  double prog = static_cast<double>(step - warmup) / static_cast<double>(last - warmup);
  prog = std::min(prog, 1.0);
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(M_PI * prog));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;

  static AdamWConfig from_config(const Config& c) {
    AdamWConfig a;
    a.beta1 = c.get_float("train.beta1");
    a.beta2 = c.get_float("train.beta2");
    a.weight_decay = c.get_float("train.weight_decay");
    if (a.beta1 < 0.0 || a.beta1 >= 1.0 || a.beta2 < 0.0 || a.beta2 >= 1.0) {
      throw ConfigError("optimizer: betas must lie in [0,1)");
    }
    return a;
  }
};

// Rate-group index per parameter.
inline constexpr int kFreshGroup = 0;
inline constexpr int kPretrainedGroup = 1;

struct TrackedParam {
  std::string name;
  NodePtr node;
  bool decay = false;  // weight decay applies (matrix-shaped parameters)
  int group = kFreshGroup;
};

class AdamW {
 public:
  AdamW(std::vector<TrackedParam> params, AdamWConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    // Every parameter sits in exactly one rate group and appears once.
    std::unordered_set<std::string> seen;
    for (const auto& p : params_) {
      if (!p.node) throw ConfigError("optimizer: null parameter node '" + p.name + "'");
      if (!p.node->requires_grad) {
        throw ConfigError("optimizer: parameter '" + p.name + "' does not take gradients");
      }
      if (p.group != kFreshGroup && p.group != kPretrainedGroup) {
        throw ConfigError("optimizer: parameter '" + p.name + "' has no rate group");
      }
      if (!seen.insert(p.name).second) {
        throw ConfigError("optimizer: duplicate parameter '" + p.name + "'");
      }
      m_.emplace_back(p.node->value.shape());
      v_.emplace_back(p.node->value.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.node->grad = Tensor();
  }

  // One update using per-group learning rates; parameters whose gradient
  // never materialized this step are left untouched.
  void step(const std::array<double, 2>& group_rates) {
    ++t_;
    const float bc1 = 1.0f - static_cast<float>(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const float bc2 = 1.0f - static_cast<float>(std::pow(cfg_.beta2, static_cast<double>(t_)));
    const float b1 = static_cast<float>(cfg_.beta1);
    const float b2 = static_cast<float>(cfg_.beta2);
    const float eps = static_cast<float>(cfg_.eps);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.node->grad.numel() == 0) continue;
      const float lr = static_cast<float>(group_rates[static_cast<size_t>(p.group)]);
      const float wd = p.decay ? static_cast<float>(cfg_.weight_decay) : 0.0f;
      float* w = p.node->value.data();
      const float* g = p.node->grad.data();
      float* m = m_[i].data();
      float* v = v_[i].data();
      for (int64_t j = 0; j < p.node->value.numel(); ++j) {
        m[j] = b1 * m[j] + (1.0f - b1) * g[j];
        v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
        const float mhat = m[j] / bc1;
        const float vhat = v[j] / bc2;
        w[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[j]);
      }
    }
  }

  int64_t update_count() const { return t_; }
  const std::vector<TrackedParam>& params() const { return params_; }
  const Tensor& moment1(size_t i) const { return m_[i]; }
  const Tensor& moment2(size_t i) const { return v_[i]; }

  // Checkpoint restore: moments by parameter name plus the update counter.
  void load_state(int64_t t, const std::vector<std::pair<std::string, Tensor>>& m,
                  const std::vector<std::pair<std::string, Tensor>>& v) {
    if (m.size() != params_.size() || v.size() != params_.size()) {
      throw DataError("optimizer: checkpoint has " + std::to_string(m.size()) +
                      " moment arrays, expected " + std::to_string(params_.size()));
    }
    t_ = t;
    for (size_t i = 0; i < params_.size(); ++i) {
      load_one(m[i], params_[i], m_[i]);
      load_one(v[i], params_[i], v_[i]);
    }
  }

  // True when every materialized gradient is finite.
  bool gradients_finite() const {
    for (const auto& p : params_) {
      for (int64_t j = 0; j < p.node->grad.numel(); ++j) {
        if (!std::isfinite(p.node->grad[j])) return false;
      }
    }
    return true;
  }

  // "name=|w|" pairs for diagnostics on aborts.
  std::string norm_summary() const {
    std::string out;
    for (const auto& p : params_) {
      double sq = 0.0;
      for (int64_t j = 0; j < p.node->value.numel(); ++j) {
        sq += static_cast<double>(p.node->value[j]) * p.node->value[j];
      }
      if (!out.empty()) out += ", ";
      out += p.name + "=" + std::to_string(std::sqrt(sq));
    }
    return out;
  }

 private:
  static void load_one(const std::pair<std::string, Tensor>& src, const TrackedParam& p,
                       Tensor& dst) {
    if (src.first != p.name || src.second.shape() != dst.shape()) {
      throw DataError("optimizer: checkpoint moment '" + src.first + "' does not match '" +
                      p.name + "'");
    }
    dst = src.second;
  }

  std::vector<TrackedParam> params_;
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

}  // namespace histrec::opt
