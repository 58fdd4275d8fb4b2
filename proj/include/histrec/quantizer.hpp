// SPDX-License-Identifier: Apache-2.0
//
// Multi-level residual vector quantizer. Each level snaps the incoming
// residual to its nearest codebook row; the straight-through output sums
// the per-level estimators (value: sum of selected codes; gradient: one
// identity per level). Codebooks learn by exponential-moving-average
// k-means, never by gradient, with dead codes reseeded from batch data.
// Code-usage histograms over a user's sequence form the downstream
// interest feature.
#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "histrec/config.hpp"
#include "histrec/ops.hpp"

namespace histrec::quant {

struct QuantizerConfig {
  std::vector<int> level_sizes{32, 16, 16};  // codes per level
  int dim = 64;                              // code width = model width
  double ema_decay = 0.99;
  double commit_weight = 0.25;
  double dead_threshold = 0.05;  // EMA size below this reseeds the code

  static QuantizerConfig from_config(const Config& c, int d_model) {
    QuantizerConfig q;
    q.level_sizes = c.get_int_list("quantizer.K");
    q.dim = d_model;
    q.ema_decay = c.get_float("quantizer.ema_decay");
    q.commit_weight = c.get_float("quantizer.commit_weight");
    q.dead_threshold = c.get_float("quantizer.dead_threshold");
    q.validate();
    return q;
  }

  int num_levels() const { return static_cast<int>(level_sizes.size()); }

  int histogram_width() const {
    int w = 0;
    for (int k : level_sizes) w += k;
    return w;
  }

  void validate() const {
    if (level_sizes.empty()) throw ConfigError("quantizer: needs at least one level");
    for (int k : level_sizes) {
      if (k < 2) throw ConfigError("quantizer: every level needs >= 2 codes");
    }
    if (dim < 1) throw ConfigError("quantizer: code width must be >= 1");
    if (ema_decay < 0.0 || ema_decay > 1.0) {
      throw ConfigError("quantizer: ema_decay must lie in [0,1]");
    }
  }
};

struct QuantizerState {
  QuantizerConfig cfg;
  std::vector<Tensor> codebooks;               // per level [K_m, dim]
  std::vector<std::vector<double>> ema_size;   // per level [K_m]
  std::vector<std::vector<double>> ema_sum;    // per level [K_m * dim]
  bool initialized = false;

  static QuantizerState create(const QuantizerConfig& cfg) {
    cfg.validate();
    QuantizerState s;
    s.cfg = cfg;
    for (int k : cfg.level_sizes) {
      s.codebooks.push_back(Tensor::zeros({k, cfg.dim}));
      s.ema_size.emplace_back(static_cast<size_t>(k), 0.0);
      s.ema_sum.emplace_back(static_cast<size_t>(k) * cfg.dim, 0.0);
    }
    return s;
  }
};

// Index of the L2-nearest codebook row; ties resolve to the lowest index.
inline int nearest_code(const float* x, const Tensor& codebook) {
  const int K = codebook.dim(0);
  const int D = codebook.dim(1);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) {
    const float* row = codebook.data() + static_cast<int64_t>(k) * D;
    double d = 0.0;
    for (int j = 0; j < D; ++j) {
      const double diff = static_cast<double>(x[j]) - static_cast<double>(row[j]);
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

namespace detail {

// One pass of the residual recursion over every valid position. Padded
// positions get code -1 and zero outputs.
struct ScanResult {
  std::vector<std::vector<int32_t>> codes;  // per level, flat [B*T]
  Tensor quantized;    // [B,T,D]: sum of selected codes per position
  Tensor residual_sum; // [B,T,D]: sum over levels of (input - code)
  Tensor final_residual;  // [B,T,D]: residual after the last level
  double commit_total = 0.0;  // sum of squared residuals, all levels
  int64_t n_valid = 0;
};

inline ScanResult scan(const Tensor& b_seq, const std::vector<int>& lengths,
                       const QuantizerState& state) {
  const int B = b_seq.dim(0);
  const int T = b_seq.dim(1);
  const int D = b_seq.dim(2);
  if (D != state.cfg.dim) {
    throw ConfigError("quantizer: input width " + std::to_string(D) + " != code width " +
                      std::to_string(state.cfg.dim));
  }
  const int M = state.cfg.num_levels();
  ScanResult out;
  out.codes.assign(static_cast<size_t>(M),
                   std::vector<int32_t>(static_cast<size_t>(B) * T, -1));
  out.quantized = Tensor::zeros({B, T, D});
  out.residual_sum = Tensor::zeros({B, T, D});
  out.final_residual = Tensor::zeros({B, T, D});

  std::vector<float> r(static_cast<size_t>(D));
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < lengths[static_cast<size_t>(b)]; ++t) {
      const int64_t pos = static_cast<int64_t>(b) * T + t;
      const float* x = b_seq.data() + pos * D;
      std::copy(x, x + D, r.begin());
      float* q = out.quantized.data() + pos * D;
      float* rs = out.residual_sum.data() + pos * D;
      for (int m = 0; m < M; ++m) {
        const int k = nearest_code(r.data(), state.codebooks[static_cast<size_t>(m)]);
        out.codes[static_cast<size_t>(m)][static_cast<size_t>(pos)] = k;
        const float* c =
            state.codebooks[static_cast<size_t>(m)].data() + static_cast<int64_t>(k) * D;
        for (int j = 0; j < D; ++j) {
          q[j] += c[j];
          r[static_cast<size_t>(j)] -= c[j];
          rs[j] += r[static_cast<size_t>(j)];
          out.commit_total +=
              static_cast<double>(r[static_cast<size_t>(j)]) * r[static_cast<size_t>(j)];
        }
      }
      std::copy(r.begin(), r.end(), out.final_residual.data() + pos * D);
      ++out.n_valid;
    }
  }
  return out;
}

}  // namespace detail

// Lowest-level code assignment without graph construction (encoding path).
inline std::vector<std::vector<int32_t>> assign_codes(const Tensor& b_seq,
                                                      const std::vector<int>& lengths,
                                                      const QuantizerState& state) {
  return detail::scan(b_seq, lengths, state).codes;
}

struct QuantizeResult {
  NodePtr quantized;  // [B,T,D] straight-through sum of level estimators
  NodePtr commit;     // scalar: mean squared residual over valid positions
  std::vector<std::vector<int32_t>> codes;  // per level, flat [B*T], -1 pad
  Tensor final_residual;                    // [B,T,D]
  int64_t n_valid = 0;
};

// Training-path quantization. The output's forward value is the sum of
// the selected codes (the estimator sum telescopes to it); its gradient
// w.r.t. the input is num_levels * identity at valid positions. The
// commitment term pulls the input toward the frozen codes.
inline QuantizeResult quantize_train(const NodePtr& b_seq, const std::vector<int>& lengths,
                                     const QuantizerState& state) {
  if (!state.initialized) {
    throw TrainError("quantizer: codebooks not initialized before training use");
  }
  auto scan = std::make_shared<detail::ScanResult>(detail::scan(b_seq->value, lengths, state));
  const int M = state.cfg.num_levels();
  const int64_t n_valid = std::max<int64_t>(scan->n_valid, 1);

  QuantizeResult out;
  out.codes = scan->codes;
  out.final_residual = scan->final_residual;
  out.n_valid = scan->n_valid;

  std::vector<int> lens = lengths;
  const int T = b_seq->value.dim(1);
  const int D = b_seq->value.dim(2);

  Tensor qv = scan->quantized;
  out.quantized = make_op<float>(
      "rvq_straight_through", {b_seq}, std::move(qv), [lens, T, D, M](Node& node) {
        auto b = node.parents[0];
        if (!b->requires_grad) return;
        b->ensure_grad();
        for (int bi = 0; bi < static_cast<int>(lens.size()); ++bi) {
          for (int t = 0; t < lens[static_cast<size_t>(bi)]; ++t) {
            const int64_t pos = static_cast<int64_t>(bi) * T + t;
            const float* g = node.grad.data() + pos * D;
            float* dst = b->grad.data() + pos * D;
            for (int j = 0; j < D; ++j) dst[j] += static_cast<float>(M) * g[j];
          }
        }
      });

  Tensor cv = Tensor::scalar(static_cast<float>(scan->commit_total / static_cast<double>(n_valid)));
  out.commit = make_op<float>(
      "rvq_commit", {b_seq}, std::move(cv), [scan, lens, T, D, n_valid](Node& node) {
        auto b = node.parents[0];
        if (!b->requires_grad) return;
        b->ensure_grad();
        const float g = node.grad.values()[0];
        const float coeff = 2.0f * g / static_cast<float>(n_valid);
        for (int bi = 0; bi < static_cast<int>(lens.size()); ++bi) {
          for (int t = 0; t < lens[static_cast<size_t>(bi)]; ++t) {
            const int64_t pos = static_cast<int64_t>(bi) * T + t;
            const float* rs = scan->residual_sum.data() + pos * D;
            float* dst = b->grad.data() + pos * D;
            for (int j = 0; j < D; ++j) dst[j] += coeff * rs[j];
          }
        }
      });
  return out;
}

// First-batch initialization: level by level, sample distinct residual
// vectors as the initial codes (residuals computed against the levels
// already initialized), seeding the EMA accumulators consistently.
inline void init_from_batch(QuantizerState& state, const Tensor& b_seq,
                            const std::vector<int>& lengths, Rng& rng) {
  const int D = state.cfg.dim;
  const int T = b_seq.dim(1);
  std::vector<int64_t> valid;
  for (int b = 0; b < b_seq.dim(0); ++b) {
    for (int t = 0; t < lengths[static_cast<size_t>(b)]; ++t) {
      valid.push_back(static_cast<int64_t>(b) * T + t);
    }
  }
  const int M = state.cfg.num_levels();
  for (int m = 0; m < M; ++m) {
    const int K = state.cfg.level_sizes[static_cast<size_t>(m)];
    if (static_cast<int64_t>(valid.size()) < K) {
      throw TrainError("quantizer: first batch has " + std::to_string(valid.size()) +
                       " valid positions, fewer than " + std::to_string(K) + " codes");
    }
  }

  // Residuals start as the raw inputs and shrink as levels initialize.
  std::vector<float> resid(valid.size() * static_cast<size_t>(D));
  for (size_t i = 0; i < valid.size(); ++i) {
    const float* x = b_seq.data() + valid[i] * D;
    std::copy(x, x + D, resid.begin() + static_cast<int64_t>(i) * D);
  }

  for (int m = 0; m < M; ++m) {
    const int K = state.cfg.level_sizes[static_cast<size_t>(m)];
    // Distinct sample of K residual rows.
    std::vector<int64_t> order(valid.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    rng.shuffle(order);
    Tensor& cb = state.codebooks[static_cast<size_t>(m)];
    for (int k = 0; k < K; ++k) {
      const float* src = resid.data() + order[static_cast<size_t>(k)] * D;
      std::copy(src, src + D, cb.data() + static_cast<int64_t>(k) * D);
      state.ema_size[static_cast<size_t>(m)][static_cast<size_t>(k)] = 1.0;
      for (int j = 0; j < D; ++j) {
        state.ema_sum[static_cast<size_t>(m)][static_cast<size_t>(k) * D + j] =
            static_cast<double>(src[j]);
      }
    }
    // Advance residuals through the freshly initialized level.
    for (size_t i = 0; i < valid.size(); ++i) {
      float* r = resid.data() + static_cast<int64_t>(i) * D;
      const int k = nearest_code(r, cb);
      const float* c = cb.data() + static_cast<int64_t>(k) * D;
      for (int j = 0; j < D; ++j) r[j] -= c[j];
    }
  }
  state.initialized = true;
}

// EMA k-means step. Per level: decay sizes/sums toward this batch's
// assignment counts and vector sums (of that level's residual inputs),
// re-derive code rows, then reseed any code whose EMA size fell below the
// dead threshold from a random residual vector of this batch.
inline void ema_update(QuantizerState& state, const Tensor& b_seq,
                       const std::vector<int>& lengths,
                       const std::vector<std::vector<int32_t>>& codes, Rng& rng) {
  const int D = state.cfg.dim;
  const int T = b_seq.dim(1);
  const int M = state.cfg.num_levels();
  const double g = state.cfg.ema_decay;
  constexpr double kEps = 1e-8;

  std::vector<int64_t> valid;
  for (int b = 0; b < b_seq.dim(0); ++b) {
    for (int t = 0; t < lengths[static_cast<size_t>(b)]; ++t) {
      valid.push_back(static_cast<int64_t>(b) * T + t);
    }
  }
  if (valid.empty()) return;

  // Residual input to the level currently being updated.
  std::vector<double> resid(valid.size() * static_cast<size_t>(D));
  for (size_t i = 0; i < valid.size(); ++i) {
    const float* x = b_seq.data() + valid[i] * D;
    for (int j = 0; j < D; ++j) resid[static_cast<size_t>(i) * D + j] = static_cast<double>(x[j]);
  }

  for (int m = 0; m < M; ++m) {
    const int K = state.cfg.level_sizes[static_cast<size_t>(m)];
    std::vector<double> count(static_cast<size_t>(K), 0.0);
    std::vector<double> sum(static_cast<size_t>(K) * D, 0.0);
    for (size_t i = 0; i < valid.size(); ++i) {
      const int32_t k = codes[static_cast<size_t>(m)][static_cast<size_t>(valid[i])];
      count[static_cast<size_t>(k)] += 1.0;
      for (int j = 0; j < D; ++j) {
        sum[static_cast<size_t>(k) * D + j] += resid[static_cast<size_t>(i) * D + j];
      }
    }

    auto& size_m = state.ema_size[static_cast<size_t>(m)];
    auto& sum_m = state.ema_sum[static_cast<size_t>(m)];
    Tensor& cb = state.codebooks[static_cast<size_t>(m)];
    // Snapshot the rows used for assignment before rewriting them, so the
    // residual advance below matches what the codes actually meant.
    const Tensor cb_before = cb;
    for (int k = 0; k < K; ++k) {
      size_m[static_cast<size_t>(k)] =
          g * size_m[static_cast<size_t>(k)] + (1.0 - g) * count[static_cast<size_t>(k)];
      for (int j = 0; j < D; ++j) {
        const size_t idx = static_cast<size_t>(k) * D + j;
        sum_m[idx] = g * sum_m[idx] + (1.0 - g) * sum[idx];
        cb.data()[static_cast<int64_t>(k) * D + j] = static_cast<float>(
            sum_m[idx] / std::max(size_m[static_cast<size_t>(k)], kEps));
      }
      if (size_m[static_cast<size_t>(k)] < state.cfg.dead_threshold) {
        // Revive from a random residual vector of this batch.
        const int64_t pick = static_cast<int64_t>(rng.uniform_int(valid.size()));
        size_m[static_cast<size_t>(k)] = 1.0;
        for (int j = 0; j < D; ++j) {
          const double v = resid[static_cast<size_t>(pick) * D + j];
          sum_m[static_cast<size_t>(k) * D + j] = v;
          cb.data()[static_cast<int64_t>(k) * D + j] = static_cast<float>(v);
        }
      }
    }

    // Advance residuals using the pre-update rows the codes refer to.
    for (size_t i = 0; i < valid.size(); ++i) {
      const int32_t k = codes[static_cast<size_t>(m)][static_cast<size_t>(valid[i])];
      const float* c = cb_before.data() + static_cast<int64_t>(k) * D;
      for (int j = 0; j < D; ++j) {
        resid[static_cast<size_t>(i) * D + j] -= static_cast<double>(c[j]);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Interest histograms

struct InterestHistogram {
  int32_t user_id = -1;
  std::vector<float> values;  // [sum of level sizes]
  bool empty_input = false;   // sequence had no valid positions
};

// Code-frequency histograms, one per sequence in the batch. Each level's
// slice holds assignment counts over valid positions divided by the valid
// count; an empty sequence yields a uniform slice per level and a flag.
inline std::vector<InterestHistogram> encode_histograms(const Tensor& b_seq,
                                                        const std::vector<int>& lengths,
                                                        const std::vector<int32_t>& user_ids,
                                                        const QuantizerState& state) {
  const int B = b_seq.dim(0);
  const int T = b_seq.dim(1);
  if (static_cast<int>(lengths.size()) != B || static_cast<int>(user_ids.size()) != B) {
    throw ConfigError("histograms: lengths/user_ids do not match batch");
  }
  const auto codes = assign_codes(b_seq, lengths, state);
  const int M = state.cfg.num_levels();

  std::vector<InterestHistogram> out(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) {
    auto& h = out[static_cast<size_t>(b)];
    h.user_id = user_ids[static_cast<size_t>(b)];
    h.values.assign(static_cast<size_t>(state.cfg.histogram_width()), 0.0f);
    const int len = lengths[static_cast<size_t>(b)];
    int offset = 0;
    for (int m = 0; m < M; ++m) {
      const int K = state.cfg.level_sizes[static_cast<size_t>(m)];
      if (len == 0) {
        for (int k = 0; k < K; ++k) {
          h.values[static_cast<size_t>(offset + k)] = 1.0f / static_cast<float>(K);
        }
        h.empty_input = true;
      } else {
        for (int t = 0; t < len; ++t) {
          const int32_t k =
              codes[static_cast<size_t>(m)][static_cast<size_t>(b) * T + t];
          h.values[static_cast<size_t>(offset + k)] += 1.0f;
        }
        for (int k = 0; k < K; ++k) {
          h.values[static_cast<size_t>(offset + k)] /= static_cast<float>(len);
        }
      }
      offset += K;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Usage metrics

struct CodebookMetrics {
  std::vector<double> hit_ratio;   // activated codes / K, per level
  std::vector<double> perplexity;  // 2^entropy of the code distribution
};

inline CodebookMetrics codebook_metrics(const std::vector<std::vector<int32_t>>& codes,
                                        const QuantizerConfig& cfg) {
  if (codes.size() != static_cast<size_t>(cfg.num_levels())) {
    throw ConfigError("codebook_metrics: level count mismatch");
  }
  CodebookMetrics out;
  for (int m = 0; m < cfg.num_levels(); ++m) {
    const int K = cfg.level_sizes[static_cast<size_t>(m)];
    std::vector<int64_t> count(static_cast<size_t>(K), 0);
    int64_t total = 0;
    for (int32_t k : codes[static_cast<size_t>(m)]) {
      if (k < 0) continue;  // padding
      count[static_cast<size_t>(k)] += 1;
      ++total;
    }
    if (total == 0) throw DataError("codebook_metrics: no assignments at level " +
                                    std::to_string(m));
    int used = 0;
    double entropy = 0.0;
    for (int k = 0; k < K; ++k) {
      if (count[static_cast<size_t>(k)] == 0) continue;
      ++used;
      const double p = static_cast<double>(count[static_cast<size_t>(k)]) /
                       static_cast<double>(total);
      entropy -= p * std::log2(p);
    }
    out.hit_ratio.push_back(static_cast<double>(used) / static_cast<double>(K));
    out.perplexity.push_back(std::pow(2.0, entropy));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization (checkpoint participation and codebook dumps)

inline nlohmann::json state_to_json(const QuantizerState& s) {
  nlohmann::json j;
  j["level_sizes"] = s.cfg.level_sizes;
  j["dim"] = s.cfg.dim;
  j["ema_decay"] = s.cfg.ema_decay;
  j["commit_weight"] = s.cfg.commit_weight;
  j["dead_threshold"] = s.cfg.dead_threshold;
  j["initialized"] = s.initialized;
  j["codebooks"] = nlohmann::json::array();
  for (const auto& cb : s.codebooks) j["codebooks"].push_back(cb.values());
  j["ema_size"] = s.ema_size;
  j["ema_sum"] = s.ema_sum;
  return j;
}

inline QuantizerState state_from_json(const nlohmann::json& j) {
  QuantizerConfig cfg;
  cfg.level_sizes = j.at("level_sizes").get<std::vector<int>>();
  cfg.dim = j.at("dim").get<int>();
  cfg.ema_decay = j.at("ema_decay").get<double>();
  cfg.commit_weight = j.at("commit_weight").get<double>();
  cfg.dead_threshold = j.at("dead_threshold").get<double>();
  QuantizerState s = QuantizerState::create(cfg);
  s.initialized = j.at("initialized").get<bool>();
  const auto& cbs = j.at("codebooks");
  if (cbs.size() != s.codebooks.size()) throw DataError("quantizer state: level count mismatch");
  for (size_t m = 0; m < s.codebooks.size(); ++m) {
    auto vals = cbs[m].get<std::vector<float>>();
    if (static_cast<int64_t>(vals.size()) != s.codebooks[m].numel()) {
      throw DataError("quantizer state: codebook " + std::to_string(m) + " has wrong size");
    }
    s.codebooks[m] = Tensor(s.codebooks[m].shape(), std::move(vals));
  }
  s.ema_size = j.at("ema_size").get<std::vector<std::vector<double>>>();
  s.ema_sum = j.at("ema_sum").get<std::vector<std::vector<double>>>();
  for (size_t m = 0; m < s.codebooks.size(); ++m) {
    if (s.ema_size[m].size() != static_cast<size_t>(s.cfg.level_sizes[m]) ||
        s.ema_sum[m].size() != static_cast<size_t>(s.cfg.level_sizes[m]) * s.cfg.dim) {
      throw DataError("quantizer state: EMA arrays have wrong size");
    }
  }
  return s;
}

}  // namespace histrec::quant
