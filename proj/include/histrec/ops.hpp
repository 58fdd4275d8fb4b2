// SPDX-License-Identifier: Apache-2.0
//
// Differentiable op library over the autograd graph. Shapes are documented
// as [leading..., last]; "rows" means the product of leading extents.
// Dense matrix products go through Eigen; everything else is plain loops.
// Everything is generic over the scalar type: the pipeline uses float, the
// finite-difference oracle instantiates double.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "histrec/autograd.hpp"

namespace histrec {

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<const EMat<S>> as_rows(const TensorT<S>& t) {
  return Eigen::Map<const EMat<S>>(t.data(), t.rows(), t.last_dim());
}
template <typename S>
Eigen::Map<EMat<S>> as_rows(TensorT<S>& t) {
  return Eigen::Map<EMat<S>>(t.data(), t.rows(), t.last_dim());
}

// One attention head's rows x dh block of a [B,T,D] tensor, strided by D.
template <typename S>
Eigen::Map<const EMat<S>, 0, Eigen::OuterStride<>> head_block(const TensorT<S>& t, int b, int h,
                                                              int T, int D, int dh, int rows) {
  return {t.data() + static_cast<int64_t>(b) * T * D + h * dh, rows, dh,
          Eigen::OuterStride<>(D)};
}
template <typename S>
Eigen::Map<EMat<S>, 0, Eigen::OuterStride<>> head_block_mut(TensorT<S>& t, int b, int h, int T,
                                                            int D, int dh, int rows) {
  return {t.data() + static_cast<int64_t>(b) * T * D + h * dh, rows, dh,
          Eigen::OuterStride<>(D)};
}

template <typename S>
S sigmoid_s(S x) {
  if (x >= S(0)) {
    const S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Basic algebra

// a: [leading..., k] x b: [k, m] -> [leading..., m].
template <typename S>
NodePtrT<S> matmul(const NodePtrT<S>& a, const NodePtrT<S>& b) {
  const TensorT<S>& A = a->value;
  const TensorT<S>& B = b->value;
  if (B.rank() != 2 || A.rank() < 1 || A.last_dim() != B.dim(0)) {
    throw ConfigError("matmul: incompatible shapes " + shape_str(A.shape()) + " x " +
                      shape_str(B.shape()));
  }
  Shape out_shape = A.shape();
  out_shape.back() = B.dim(1);
  TensorT<S> out(out_shape);
  detail::as_rows(out).noalias() = detail::as_rows(A) * detail::as_rows(B);
  return make_op<S>("matmul", {a, b}, std::move(out), [a, b](NodeT<S>& n) {
    auto g = detail::as_rows(std::as_const(n).grad);
    if (a->requires_grad) {
      auto da = detail::as_rows(a->ensure_grad());
      da.noalias() += g * detail::as_rows(std::as_const(b)->value).transpose();
    }
    if (b->requires_grad) {
      auto db = detail::as_rows(b->ensure_grad());
      db.noalias() += detail::as_rows(std::as_const(a)->value).transpose() * g;
    }
  });
}

template <typename S>
NodePtrT<S> add(const NodePtrT<S>& a, const NodePtrT<S>& b) {
  if (!a->value.same_shape(b->value)) {
    throw ConfigError("add: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                      shape_str(b->value.shape()));
  }
  TensorT<S> out = a->value;
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] += b->value[i];
  return make_op<S>("add", {a, b}, std::move(out), [a, b](NodeT<S>& nd) {
    const int64_t n = nd.grad.numel();
    if (a->requires_grad) {
      TensorT<S>& da = a->ensure_grad();
      for (int64_t i = 0; i < n; ++i) da[i] += nd.grad[i];
    }
    if (b->requires_grad) {
      TensorT<S>& db = b->ensure_grad();
      for (int64_t i = 0; i < n; ++i) db[i] += nd.grad[i];
    }
  });
}

// a: [leading..., m] + bias: [m], broadcast over rows.
template <typename S>
NodePtrT<S> add_bias(const NodePtrT<S>& a, const NodePtrT<S>& bias) {
  const int m = a->value.last_dim();
  if (bias->value.rank() != 1 || bias->value.dim(0) != m) {
    throw ConfigError("add_bias: bias " + shape_str(bias->value.shape()) + " does not match " +
                      shape_str(a->value.shape()));
  }
  TensorT<S> out = a->value;
  const int64_t rows = out.rows();
  for (int64_t r = 0; r < rows; ++r) {
    S* p = out.data() + r * m;
    for (int j = 0; j < m; ++j) p[j] += bias->value[j];
  }
  return make_op<S>("add_bias", {a, bias}, std::move(out), [a, bias, m](NodeT<S>& nd) {
    const int64_t rows = nd.grad.rows();
    if (a->requires_grad) {
      TensorT<S>& da = a->ensure_grad();
      const int64_t n = nd.grad.numel();
      for (int64_t i = 0; i < n; ++i) da[i] += nd.grad[i];
    }
    if (bias->requires_grad) {
      TensorT<S>& db = bias->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const S* g = nd.grad.data() + r * m;
        for (int j = 0; j < m; ++j) db[j] += g[j];
      }
    }
  });
}

template <typename S>
NodePtrT<S> scale(const NodePtrT<S>& a, S s) {
  TensorT<S> out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return make_op<S>("scale", {a}, std::move(out), [a, s](NodeT<S>& nd) {
    TensorT<S>& da = a->ensure_grad();
    for (int64_t i = 0; i < nd.grad.numel(); ++i) da[i] += s * nd.grad[i];
  });
}

template <typename S>
NodePtrT<S> mul(const NodePtrT<S>& a, const NodePtrT<S>& b) {
  if (!a->value.same_shape(b->value)) {
    throw ConfigError("mul: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                      shape_str(b->value.shape()));
  }
  TensorT<S> out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_op<S>("mul", {a, b}, std::move(out), [a, b](NodeT<S>& nd) {
    const int64_t n = nd.grad.numel();
    if (a->requires_grad) {
      TensorT<S>& da = a->ensure_grad();
      for (int64_t i = 0; i < n; ++i) da[i] += b->value[i] * nd.grad[i];
    }
    if (b->requires_grad) {
      TensorT<S>& db = b->ensure_grad();
      for (int64_t i = 0; i < n; ++i) db[i] += a->value[i] * nd.grad[i];
    }
  });
}

// Concatenation along the last axis; all parts share leading extents.
template <typename S>
NodePtrT<S> concat_last(const std::vector<NodePtrT<S>>& parts) {
  if (parts.empty()) throw ConfigError("concat_last: no inputs");
  Shape lead = parts[0]->value.shape();
  lead.pop_back();
  int total = 0;
  for (const auto& p : parts) {
    Shape pl = p->value.shape();
    const int w = pl.back();
    pl.pop_back();
    if (pl != lead) {
      throw ConfigError("concat_last: leading shape mismatch " +
                        shape_str(parts[0]->value.shape()) + " vs " +
                        shape_str(p->value.shape()));
    }
    total += w;
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  TensorT<S> out(out_shape);
  const int64_t rows = out.rows();
  int offset = 0;
  for (const auto& p : parts) {
    const int w = p->value.last_dim();
    for (int64_t r = 0; r < rows; ++r) {
      const S* src = p->value.data() + r * w;
      std::copy(src, src + w, out.data() + r * total + offset);
    }
    offset += w;
  }
  return make_op<S>("concat_last", parts, std::move(out), [parts, total](NodeT<S>& nd) {
    const int64_t rows = nd.grad.rows();
    int offset = 0;
    for (const auto& p : parts) {
      const int w = p->value.last_dim();
      if (p->requires_grad) {
        TensorT<S>& dp = p->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const S* g = nd.grad.data() + r * total + offset;
          S* dst = dp.data() + r * w;
          for (int j = 0; j < w; ++j) dst[j] += g[j];
        }
      }
      offset += w;
    }
  });
}

// table: [V, d], indices laid out as lead_shape -> [lead_shape..., d].
// field_name feeds the out-of-range error message.
template <typename S>
NodePtrT<S> embedding_gather(const NodePtrT<S>& table, const std::vector<int32_t>& indices,
                             Shape lead_shape, const std::string& field_name) {
  const TensorT<S>& T = table->value;
  if (T.rank() != 2) {
    throw ConfigError("embedding_gather: table must be 2-D, got " + shape_str(T.shape()));
  }
  if (static_cast<int64_t>(indices.size()) != shape_numel(lead_shape)) {
    throw ConfigError("embedding_gather: " + std::to_string(indices.size()) +
                      " indices do not fill " + shape_str(lead_shape));
  }
  const int V = T.dim(0);
  const int d = T.dim(1);
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= V) {
      throw DataError("embedding_gather: " + field_name + " index " +
                      std::to_string(indices[i]) + " out of range [0," + std::to_string(V) +
                      ") at row " + std::to_string(i));
    }
  }
  Shape out_shape = lead_shape;
  out_shape.push_back(d);
  TensorT<S> out(out_shape);
  for (size_t i = 0; i < indices.size(); ++i) {
    const S* src = T.data() + static_cast<int64_t>(indices[i]) * d;
    std::copy(src, src + d, out.data() + static_cast<int64_t>(i) * d);
  }
  auto idx = std::make_shared<std::vector<int32_t>>(indices);
  return make_op<S>("embedding_gather", {table}, std::move(out), [table, idx, d](NodeT<S>& nd) {
    TensorT<S>& dt = table->ensure_grad();
    for (size_t i = 0; i < idx->size(); ++i) {
      const S* g = nd.grad.data() + static_cast<int64_t>(i) * d;
      S* dst = dt.data() + static_cast<int64_t>((*idx)[i]) * d;
      for (int j = 0; j < d; ++j) dst[j] += g[j];
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

template <typename S>
NodePtrT<S> silu(const NodePtrT<S>& a) {
  TensorT<S> out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) {
    const S x = out[i];
    out[i] = x * detail::sigmoid_s(x);
  }
  return make_op<S>("silu", {a}, std::move(out), [a](NodeT<S>& nd) {
    TensorT<S>& da = a->ensure_grad();
    for (int64_t i = 0; i < nd.grad.numel(); ++i) {
      const S x = a->value[i];
      const S s = detail::sigmoid_s(x);
      da[i] += nd.grad[i] * s * (S(1) + x * (S(1) - s));
    }
  });
}

template <typename S>
NodePtrT<S> sigmoid(const NodePtrT<S>& a) {
  TensorT<S> out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = detail::sigmoid_s(out[i]);
  auto cache = std::make_shared<TensorT<S>>(out);
  return make_op<S>("sigmoid", {a}, std::move(out), [a, cache](NodeT<S>& nd) {
    TensorT<S>& da = a->ensure_grad();
    for (int64_t i = 0; i < nd.grad.numel(); ++i) {
      const S s = (*cache)[i];
      da[i] += nd.grad[i] * s * (S(1) - s);
    }
  });
}

// Root-mean-square normalization over the last axis with a learned gain.
template <typename S>
NodePtrT<S> rms_norm(const NodePtrT<S>& a, const NodePtrT<S>& gain, S eps = S(1e-6)) {
  const int d = a->value.last_dim();
  if (gain->value.rank() != 1 || gain->value.dim(0) != d) {
    throw ConfigError("rms_norm: gain " + shape_str(gain->value.shape()) + " does not match " +
                      shape_str(a->value.shape()));
  }
  const int64_t rows = a->value.rows();
  TensorT<S> out(a->value.shape());
  std::vector<S> inv_rms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const S* x = a->value.data() + r * d;
    S ms = S(0);
    for (int j = 0; j < d; ++j) ms += x[j] * x[j];
    const S inv = S(1) / std::sqrt(ms / static_cast<S>(d) + eps);
    inv_rms[static_cast<size_t>(r)] = inv;
    S* y = out.data() + r * d;
    for (int j = 0; j < d; ++j) y[j] = gain->value[j] * x[j] * inv;
  }
  auto cache = std::make_shared<std::vector<S>>(std::move(inv_rms));
  return make_op<S>("rms_norm", {a, gain}, std::move(out), [a, gain, cache, d](NodeT<S>& nd) {
    const int64_t rows = nd.grad.rows();
    for (int64_t r = 0; r < rows; ++r) {
      const S inv = (*cache)[static_cast<size_t>(r)];
      const S* x = a->value.data() + r * d;
      const S* g = nd.grad.data() + r * d;
      if (a->requires_grad) {
        S dot = S(0);
        for (int j = 0; j < d; ++j) dot += gain->value[j] * g[j] * x[j];
        const S c = dot * inv * inv * inv / static_cast<S>(d);
        S* da = a->ensure_grad().data() + r * d;
        for (int j = 0; j < d; ++j) da[j] += gain->value[j] * g[j] * inv - c * x[j];
      }
      if (gain->requires_grad) {
        S* dg = gain->ensure_grad().data();
        for (int j = 0; j < d; ++j) dg[j] += g[j] * x[j] * inv;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Sequence ops. Batches are [B, T, D] with right-padding: row (b, t) is
// valid iff t < lengths[b].

// Rotary position encoding applied per attention head.
template <typename S>
NodePtrT<S> rope(const NodePtrT<S>& a, int num_heads, double base = 10000.0) {
  const TensorT<S>& X = a->value;
  if (X.rank() != 3) throw ConfigError("rope: expected [B,T,D], got " + shape_str(X.shape()));
  const int B = X.dim(0), T = X.dim(1), D = X.dim(2);
  if (D % num_heads != 0) {
    throw ConfigError("rope: width " + std::to_string(D) + " not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  const int dh = D / num_heads;
  if (dh % 2 != 0) throw ConfigError("rope: head width must be even");
  // Precompute cos/sin per (t, pair).
  const int pairs = dh / 2;
  auto cs = std::make_shared<std::vector<S>>(static_cast<size_t>(T) * pairs * 2);
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < pairs; ++i) {
      const double theta = static_cast<double>(t) * std::pow(base, -2.0 * i / dh);
      (*cs)[(static_cast<size_t>(t) * pairs + i) * 2] = static_cast<S>(std::cos(theta));
      (*cs)[(static_cast<size_t>(t) * pairs + i) * 2 + 1] = static_cast<S>(std::sin(theta));
    }
  }
  TensorT<S> out(X.shape());
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < T; ++t) {
      const S* x = X.data() + (static_cast<int64_t>(b) * T + t) * D;
      S* y = out.data() + (static_cast<int64_t>(b) * T + t) * D;
      for (int h = 0; h < num_heads; ++h) {
        for (int i = 0; i < pairs; ++i) {
          const S c = (*cs)[(static_cast<size_t>(t) * pairs + i) * 2];
          const S s = (*cs)[(static_cast<size_t>(t) * pairs + i) * 2 + 1];
          const int k = h * dh + 2 * i;
          y[k] = x[k] * c - x[k + 1] * s;
          y[k + 1] = x[k] * s + x[k + 1] * c;
        }
      }
    }
  }
  return make_op<S>("rope", {a}, std::move(out), [a, cs, num_heads, B, T, D](NodeT<S>& nd) {
    const int dh = D / num_heads;
    const int pairs = dh / 2;
    TensorT<S>& da = a->ensure_grad();
    for (int b = 0; b < B; ++b) {
      for (int t = 0; t < T; ++t) {
        const S* g = nd.grad.data() + (static_cast<int64_t>(b) * T + t) * D;
        S* dx = da.data() + (static_cast<int64_t>(b) * T + t) * D;
        for (int h = 0; h < num_heads; ++h) {
          for (int i = 0; i < pairs; ++i) {
            const S c = (*cs)[(static_cast<size_t>(t) * pairs + i) * 2];
            const S s = (*cs)[(static_cast<size_t>(t) * pairs + i) * 2 + 1];
            const int k = h * dh + 2 * i;
            // Inverse rotation.
            dx[k] += g[k] * c + g[k + 1] * s;
            dx[k + 1] += -g[k] * s + g[k + 1] * c;
          }
        }
      }
    }
  });
}

// Multi-head scaled dot-product attention with a causal mask. Position t
// attends to valid positions <= t; fully padded rows yield zero vectors.
template <typename S>
NodePtrT<S> causal_attention(const NodePtrT<S>& q, const NodePtrT<S>& k, const NodePtrT<S>& v,
                             const std::vector<int>& lengths, int num_heads) {
  const TensorT<S>& Q = q->value;
  if (Q.rank() != 3 || !Q.same_shape(k->value) || !Q.same_shape(v->value)) {
    throw ConfigError("causal_attention: q/k/v shapes must match, got " + shape_str(Q.shape()) +
                      " / " + shape_str(k->value.shape()) + " / " + shape_str(v->value.shape()));
  }
  const int B = Q.dim(0), T = Q.dim(1), D = Q.dim(2);
  if (D % num_heads != 0) {
    throw ConfigError("causal_attention: width " + std::to_string(D) + " not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  if (static_cast<int>(lengths.size()) != B) {
    throw ConfigError("causal_attention: lengths size " + std::to_string(lengths.size()) +
                      " != batch " + std::to_string(B));
  }
  const int dh = D / num_heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  const bool needs_grad = q->requires_grad || k->requires_grad || v->requires_grad;

  TensorT<S> out(Q.shape());
  // Attention probabilities kept only when a backward pass can happen.
  std::shared_ptr<TensorT<S>> probs;
  if (needs_grad) probs = std::make_shared<TensorT<S>>(Shape{B, num_heads, T, T});

  // Each (sequence, head) pair works on a strided T x dh block, so scores
  // and mixes run as dense matrix products with the upper triangle masked
  // after the fact.
  detail::EMat<S> local;
  for (int b = 0; b < B; ++b) {
    const int len = std::min(lengths[b], T);
    if (len == 0) continue;
    for (int h = 0; h < num_heads; ++h) {
      const auto Qh = detail::head_block(Q, b, h, T, D, dh, len);
      const auto Kh = detail::head_block(k->value, b, h, T, D, dh, len);
      const auto Vh = detail::head_block(v->value, b, h, T, D, dh, len);
      S* pbase = probs ? probs->data() + (static_cast<int64_t>(b) * num_heads + h) * T * T
                       : (local.resize(len, len), local.data());
      Eigen::Map<detail::EMat<S>, 0, Eigen::OuterStride<>> P(
          pbase, len, len, Eigen::OuterStride<>(probs ? T : len));
      P.noalias() = Qh * Kh.transpose() * inv_sqrt;
      // Scalar softmax rows: vectorized exp and sums round differently
      // depending on the buffer's alignment, which varies per allocation,
      // so expression-template versions are not reproducible run to run.
      for (int t = 0; t < len; ++t) {
        S* prow = pbase + static_cast<int64_t>(t) * (probs ? T : len);
        S mx = prow[0];
        for (int j = 1; j <= t; ++j) mx = std::max(mx, prow[j]);
        S denom = S(0);
        for (int j = 0; j <= t; ++j) {
          prow[j] = std::exp(prow[j] - mx);
          denom += prow[j];
        }
        const S inv = S(1) / denom;
        for (int j = 0; j <= t; ++j) prow[j] *= inv;
        for (int j = t + 1; j < len; ++j) prow[j] = S(0);
      }
      detail::head_block_mut(out, b, h, T, D, dh, len).noalias() = P * Vh;
    }
  }
  auto lens = std::make_shared<std::vector<int>>(lengths);
  return make_op<S>(
      "causal_attention", {q, k, v}, std::move(out),
      [q, k, v, probs, lens, num_heads, B, T, D, dh, inv_sqrt](NodeT<S>& nd) {
        detail::EMat<S> dp, ds;
        for (int b = 0; b < B; ++b) {
          const int len = std::min((*lens)[b], T);
          if (len == 0) continue;
          for (int h = 0; h < num_heads; ++h) {
            const auto G = detail::head_block(nd.grad, b, h, T, D, dh, len);
            const auto Qh = detail::head_block(q->value, b, h, T, D, dh, len);
            const auto Kh = detail::head_block(k->value, b, h, T, D, dh, len);
            const auto Vh = detail::head_block(v->value, b, h, T, D, dh, len);
            const Eigen::Map<const detail::EMat<S>, 0, Eigen::OuterStride<>> P(
                probs->data() + (static_cast<int64_t>(b) * num_heads + h) * T * T, len, len,
                Eigen::OuterStride<>(T));
            // dP = G V^T; dS = P .* (dP - rowwise sum of P .* dP). Masked
            // entries stay zero because P is zero there.
            dp.noalias() = G * Vh.transpose();
            // Fixed-order row reductions (see the forward pass note).
            for (int r = 0; r < len; ++r) {
              S mix = S(0);
              for (int j = 0; j <= r; ++j) mix += P(r, j) * dp(r, j);
              dp.row(r).array() -= mix;
            }
            ds = P.cwiseProduct(dp);
            if (v->requires_grad) {
              detail::head_block_mut(v->ensure_grad(), b, h, T, D, dh, len).noalias() +=
                  P.transpose() * G;
            }
            if (q->requires_grad) {
              detail::head_block_mut(q->ensure_grad(), b, h, T, D, dh, len).noalias() +=
                  ds * Kh * inv_sqrt;
            }
            if (k->requires_grad) {
              detail::head_block_mut(k->ensure_grad(), b, h, T, D, dh, len).noalias() +=
                  ds.transpose() * Qh * inv_sqrt;
            }
          }
        }
      });
}

// Zero out padded rows of [B, T, D].
template <typename S>
NodePtrT<S> mask_rows(const NodePtrT<S>& a, const std::vector<int>& lengths) {
  const TensorT<S>& X = a->value;
  if (X.rank() != 3) throw ConfigError("mask_rows: expected [B,T,D], got " + shape_str(X.shape()));
  const int B = X.dim(0), T = X.dim(1), D = X.dim(2);
  TensorT<S> out = X;
  for (int b = 0; b < B; ++b) {
    for (int t = std::min(lengths[b], T); t < T; ++t) {
      S* p = out.data() + (static_cast<int64_t>(b) * T + t) * D;
      std::fill(p, p + D, S(0));
    }
  }
  auto lens = std::make_shared<std::vector<int>>(lengths);
  return make_op<S>("mask_rows", {a}, std::move(out), [a, lens, B, T, D](NodeT<S>& nd) {
    TensorT<S>& da = a->ensure_grad();
    for (int b = 0; b < B; ++b) {
      const int len = std::min((*lens)[b], T);
      for (int t = 0; t < len; ++t) {
        const S* g = nd.grad.data() + (static_cast<int64_t>(b) * T + t) * D;
        S* dst = da.data() + (static_cast<int64_t>(b) * T + t) * D;
        for (int c = 0; c < D; ++c) dst[c] += g[c];
      }
    }
  });
}

// Mean over valid rows of [B, T, D] -> [B, D]; empty rows give zeros.
template <typename S>
NodePtrT<S> masked_mean_pool(const NodePtrT<S>& a, const std::vector<int>& lengths) {
  const TensorT<S>& X = a->value;
  if (X.rank() != 3) {
    throw ConfigError("masked_mean_pool: expected [B,T,D], got " + shape_str(X.shape()));
  }
  const int B = X.dim(0), T = X.dim(1), D = X.dim(2);
  TensorT<S> out(Shape{B, D});
  for (int b = 0; b < B; ++b) {
    const int len = std::min(lengths[b], T);
    if (len == 0) continue;
    S* dst = out.data() + static_cast<int64_t>(b) * D;
    for (int t = 0; t < len; ++t) {
      const S* src = X.data() + (static_cast<int64_t>(b) * T + t) * D;
      for (int c = 0; c < D; ++c) dst[c] += src[c];
    }
    const S inv = S(1) / static_cast<S>(len);
    for (int c = 0; c < D; ++c) dst[c] *= inv;
  }
  auto lens = std::make_shared<std::vector<int>>(lengths);
  return make_op<S>("masked_mean_pool", {a}, std::move(out), [a, lens, B, T, D](NodeT<S>& nd) {
    TensorT<S>& da = a->ensure_grad();
    for (int b = 0; b < B; ++b) {
      const int len = std::min((*lens)[b], T);
      if (len == 0) continue;
      const S inv = S(1) / static_cast<S>(len);
      const S* g = nd.grad.data() + static_cast<int64_t>(b) * D;
      for (int t = 0; t < len; ++t) {
        S* dst = da.data() + (static_cast<int64_t>(b) * T + t) * D;
        for (int c = 0; c < D; ++c) dst[c] += g[c] * inv;
      }
    }
  });
}

// Softmax over valid positions of [B, T]; padded entries get weight 0.
template <typename S>
NodePtrT<S> masked_softmax(const NodePtrT<S>& scores, const std::vector<int>& lengths) {
  const TensorT<S>& Sc = scores->value;
  if (Sc.rank() != 2) {
    throw ConfigError("masked_softmax: expected [B,T], got " + shape_str(Sc.shape()));
  }
  const int B = Sc.dim(0), T = Sc.dim(1);
  TensorT<S> out(Sc.shape());
  for (int b = 0; b < B; ++b) {
    const int len = std::min(lengths[b], T);
    if (len == 0) continue;
    const S* s = Sc.data() + static_cast<int64_t>(b) * T;
    S* y = out.data() + static_cast<int64_t>(b) * T;
    S maxs = s[0];
    for (int t = 1; t < len; ++t) maxs = std::max(maxs, s[t]);
    S denom = S(0);
    for (int t = 0; t < len; ++t) {
      y[t] = std::exp(s[t] - maxs);
      denom += y[t];
    }
    const S inv = S(1) / denom;
    for (int t = 0; t < len; ++t) y[t] *= inv;
  }
  auto cache = std::make_shared<TensorT<S>>(out);
  auto lens = std::make_shared<std::vector<int>>(lengths);
  return make_op<S>("masked_softmax", {scores}, std::move(out),
                    [scores, cache, lens, B, T](NodeT<S>& nd) {
                      TensorT<S>& ds = scores->ensure_grad();
                      for (int b = 0; b < B; ++b) {
                        const int len = std::min((*lens)[b], T);
                        const S* p = cache->data() + static_cast<int64_t>(b) * T;
                        const S* g = nd.grad.data() + static_cast<int64_t>(b) * T;
                        S mix = S(0);
                        for (int t = 0; t < len; ++t) mix += p[t] * g[t];
                        S* dst = ds.data() + static_cast<int64_t>(b) * T;
                        for (int t = 0; t < len; ++t) dst[t] += p[t] * (g[t] - mix);
                      }
                    });
}

// Weighted sum over positions: w [B,T] x v [B,T,D] -> [B,D].
template <typename S>
NodePtrT<S> weighted_pool(const NodePtrT<S>& w, const NodePtrT<S>& v) {
  const TensorT<S>& W = w->value;
  const TensorT<S>& V = v->value;
  if (W.rank() != 2 || V.rank() != 3 || W.dim(0) != V.dim(0) || W.dim(1) != V.dim(1)) {
    throw ConfigError("weighted_pool: shapes " + shape_str(W.shape()) + " and " +
                      shape_str(V.shape()) + " do not align");
  }
  const int B = V.dim(0), T = V.dim(1), D = V.dim(2);
  TensorT<S> out(Shape{B, D});
  for (int b = 0; b < B; ++b) {
    S* dst = out.data() + static_cast<int64_t>(b) * D;
    for (int t = 0; t < T; ++t) {
      const S wv = W.at(b, t);
      if (wv == S(0)) continue;
      const S* src = V.data() + (static_cast<int64_t>(b) * T + t) * D;
      for (int c = 0; c < D; ++c) dst[c] += wv * src[c];
    }
  }
  return make_op<S>("weighted_pool", {w, v}, std::move(out), [w, v, B, T, D](NodeT<S>& nd) {
    for (int b = 0; b < B; ++b) {
      const S* g = nd.grad.data() + static_cast<int64_t>(b) * D;
      for (int t = 0; t < T; ++t) {
        const S* vv = v->value.data() + (static_cast<int64_t>(b) * T + t) * D;
        if (w->requires_grad) {
          S dw = S(0);
          for (int c = 0; c < D; ++c) dw += g[c] * vv[c];
          w->ensure_grad().at(b, t) += dw;
        }
        if (v->requires_grad) {
          const S wv = w->value.at(b, t);
          if (wv != S(0)) {
            S* dv = v->ensure_grad().data() + (static_cast<int64_t>(b) * T + t) * D;
            for (int c = 0; c < D; ++c) dv[c] += wv * g[c];
          }
        }
      }
    }
  });
}

// Select k positions per batch row: x [B,T,D], idx [B][k] -> [B,k,D].
template <typename S>
NodePtrT<S> gather_positions(const NodePtrT<S>& a, const std::vector<std::vector<int>>& idx) {
  const TensorT<S>& X = a->value;
  if (X.rank() != 3) {
    throw ConfigError("gather_positions: expected [B,T,D], got " + shape_str(X.shape()));
  }
  const int B = X.dim(0), T = X.dim(1), D = X.dim(2);
  if (static_cast<int>(idx.size()) != B) {
    throw ConfigError("gather_positions: index rows " + std::to_string(idx.size()) +
                      " != batch " + std::to_string(B));
  }
  const int K = idx.empty() ? 0 : static_cast<int>(idx[0].size());
  TensorT<S> out(Shape{B, K, D});
  for (int b = 0; b < B; ++b) {
    for (int j = 0; j < K; ++j) {
      const int t = idx[static_cast<size_t>(b)][static_cast<size_t>(j)];
      if (t < 0 || t >= T) {
        throw DataError("gather_positions: position " + std::to_string(t) +
                        " out of range at row " + std::to_string(b));
      }
      const S* src = X.data() + (static_cast<int64_t>(b) * T + t) * D;
      std::copy(src, src + D, out.data() + (static_cast<int64_t>(b) * K + j) * D);
    }
  }
  auto ix = std::make_shared<std::vector<std::vector<int>>>(idx);
  return make_op<S>("gather_positions", {a}, std::move(out), [a, ix, B, T, D, K](NodeT<S>& nd) {
    TensorT<S>& da = a->ensure_grad();
    for (int b = 0; b < B; ++b) {
      for (int j = 0; j < K; ++j) {
        const int t = (*ix)[static_cast<size_t>(b)][static_cast<size_t>(j)];
        const S* g = nd.grad.data() + (static_cast<int64_t>(b) * K + j) * D;
        S* dst = da.data() + (static_cast<int64_t>(b) * T + t) * D;
        for (int c = 0; c < D; ++c) dst[c] += g[c];
      }
    }
  });
}

// Same data, different extents.
template <typename S>
NodePtrT<S> reshape(const NodePtrT<S>& a, Shape shape) {
  if (shape_numel(shape) != a->value.numel()) {
    throw ConfigError("reshape: " + shape_str(a->value.shape()) + " does not fill " +
                      shape_str(shape));
  }
  TensorT<S> out(std::move(shape), a->value.values());
  return make_op<S>("reshape", {a}, std::move(out), [a](NodeT<S>& nd) {
    if (!a->requires_grad) return;
    TensorT<S>& da = a->ensure_grad();
    for (int64_t i = 0; i < nd.grad.numel(); ++i) da[i] += nd.grad[i];
  });
}

// Broadcast [B, D] to [B, T, D].
template <typename S>
NodePtrT<S> tile_rows(const NodePtrT<S>& a, int T) {
  const TensorT<S>& X = a->value;
  if (X.rank() != 2) throw ConfigError("tile_rows: expected [B,D], got " + shape_str(X.shape()));
  const int B = X.dim(0), D = X.dim(1);
  TensorT<S> out(Shape{B, T, D});
  for (int b = 0; b < B; ++b) {
    const S* src = X.data() + static_cast<int64_t>(b) * D;
    for (int t = 0; t < T; ++t) {
      std::copy(src, src + D, out.data() + (static_cast<int64_t>(b) * T + t) * D);
    }
  }
  return make_op<S>("tile_rows", {a}, std::move(out), [a, B, T, D](NodeT<S>& nd) {
    TensorT<S>& da = a->ensure_grad();
    for (int b = 0; b < B; ++b) {
      S* dst = da.data() + static_cast<int64_t>(b) * D;
      for (int t = 0; t < T; ++t) {
        const S* g = nd.grad.data() + (static_cast<int64_t>(b) * T + t) * D;
        for (int c = 0; c < D; ++c) dst[c] += g[c];
      }
    }
  });
}

// Sum of all entries -> scalar (accumulated in double).
template <typename S>
NodePtrT<S> sum_all(const NodePtrT<S>& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a->value.numel(); ++i) s += static_cast<double>(a->value[i]);
  return make_op<S>("sum_all", {a}, TensorT<S>::scalar(static_cast<S>(s)), [a](NodeT<S>& nd) {
    TensorT<S>& da = a->ensure_grad();
    const S g = nd.grad[0];
    for (int64_t i = 0; i < da.numel(); ++i) da[i] += g;
  });
}

// ---------------------------------------------------------------------------
// Scalar losses

// Mean binary cross-entropy over logits; labels in {0, 1}.
template <typename S>
NodePtrT<S> bce_with_logits(const NodePtrT<S>& logits, const std::vector<float>& labels) {
  const TensorT<S>& X = logits->value;
  if (static_cast<int64_t>(labels.size()) != X.numel()) {
    throw ConfigError("bce_with_logits: " + std::to_string(labels.size()) +
                      " labels for logits " + shape_str(X.shape()));
  }
  const int64_t n = X.numel();
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(X[i]);
    const double y = labels[static_cast<size_t>(i)];
    // -[y log s + (1-y) log(1-s)] = softplus(x) - y*x
    sum += detail::softplus(x) - y * x;
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(sum / static_cast<double>(n)));
  auto lab = std::make_shared<std::vector<float>>(labels);
  return make_op<S>("bce_with_logits", {logits}, std::move(out), [logits, lab, n](NodeT<S>& nd) {
    const S g = nd.grad[0] / static_cast<S>(n);
    TensorT<S>& dx = logits->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      dx[i] += g * (detail::sigmoid_s(logits->value[i]) -
                    static_cast<S>((*lab)[static_cast<size_t>(i)]));
    }
  });
}

// Mean softmax cross-entropy over the valid rows of [rows, V].
template <typename S>
NodePtrT<S> softmax_cross_entropy(const NodePtrT<S>& logits, const std::vector<int32_t>& targets,
                                  const std::vector<uint8_t>& valid) {
  const TensorT<S>& X = logits->value;
  if (X.rank() != 2) {
    throw ConfigError("softmax_cross_entropy: expected [N,V], got " + shape_str(X.shape()));
  }
  const int64_t rows = X.dim(0);
  const int V = X.dim(1);
  if (static_cast<int64_t>(targets.size()) != rows || valid.size() != targets.size()) {
    throw ConfigError("softmax_cross_entropy: row count mismatch");
  }
  int64_t n_valid = 0;
  double sum = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    if (!valid[static_cast<size_t>(r)]) continue;
    ++n_valid;
    const S* x = X.data() + r * V;
    S maxs = x[0];
    for (int j = 1; j < V; ++j) maxs = std::max(maxs, x[j]);
    double denom = 0.0;
    for (int j = 0; j < V; ++j) denom += std::exp(static_cast<double>(x[j] - maxs));
    sum += std::log(denom) - static_cast<double>(x[targets[static_cast<size_t>(r)]] - maxs);
  }
  if (n_valid == 0) {
    return make_op<S>("softmax_cross_entropy", {logits}, TensorT<S>::scalar(S(0)),
                      [](NodeT<S>&) {});
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(sum / static_cast<double>(n_valid)));
  auto tg = std::make_shared<std::vector<int32_t>>(targets);
  auto vd = std::make_shared<std::vector<uint8_t>>(valid);
  return make_op<S>("softmax_cross_entropy", {logits}, std::move(out),
                    [logits, tg, vd, rows, V, n_valid](NodeT<S>& nd) {
                      const S g = nd.grad[0] / static_cast<S>(n_valid);
                      TensorT<S>& dx = logits->ensure_grad();
                      for (int64_t r = 0; r < rows; ++r) {
                        if (!(*vd)[static_cast<size_t>(r)]) continue;
                        const S* x = logits->value.data() + r * V;
                        S maxs = x[0];
                        for (int j = 1; j < V; ++j) maxs = std::max(maxs, x[j]);
                        double denom = 0.0;
                        for (int j = 0; j < V; ++j) {
                          denom += std::exp(static_cast<double>(x[j] - maxs));
                        }
                        S* d = dx.data() + r * V;
                        for (int j = 0; j < V; ++j) {
                          const S p = static_cast<S>(
                              std::exp(static_cast<double>(x[j] - maxs)) / denom);
                          d[j] += g * (p - (j == (*tg)[static_cast<size_t>(r)] ? S(1) : S(0)));
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// Composite blocks

// x [.., in] -> [.., out] through W [in, out] + b [out].
template <typename S>
NodePtrT<S> linear(const NodePtrT<S>& x, const NodePtrT<S>& w, const NodePtrT<S>& b) {
  return add_bias(matmul(x, w), b);
}

template <typename S>
struct GluParamsT {
  NodePtrT<S> w_gate, b_gate;  // [in, out], [out]
  NodePtrT<S> w_value, b_value;
};

using GluParams = GluParamsT<float>;

// Fresh GLU parameters: fan-in scaled weights, zero biases.
template <typename S>
GluParamsT<S> glu_init(int in, int out, Rng& rng) {
  const S std = static_cast<S>(1.0 / std::sqrt(static_cast<double>(in)));
  GluParamsT<S> p;
  p.w_gate = make_param(TensorT<S>::randn(rng, {in, out}, std));
  p.b_gate = make_param(TensorT<S>::zeros({out}));
  p.w_value = make_param(TensorT<S>::randn(rng, {in, out}, std));
  p.b_value = make_param(TensorT<S>::zeros({out}));
  return p;
}

// Gated linear unit: silu(x Wg + bg) * (x Wv + bv).
template <typename S>
NodePtrT<S> glu_block(const NodePtrT<S>& x, const GluParamsT<S>& p) {
  return mul(silu(linear(x, p.w_gate, p.b_gate)), linear(x, p.w_value, p.b_value));
}

}  // namespace histrec
