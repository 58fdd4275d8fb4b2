// SPDX-License-Identifier: Apache-2.0
//
// Sequence representation: a causal pre-norm decoder over adapted user
// inputs, pointwise gated heads mapping to the scoring space, and the two
// contrastive losses (long-range multi-positive InfoNCE over future
// events, and a next-event sigmoid loss with a trainable bias).
//
// Everything is templated on the scalar type: the pipeline instantiates
// float, the finite-difference test oracle instantiates double.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "histrec/config.hpp"
#include "histrec/ops.hpp"

namespace histrec::repr {

struct BackboneConfig {
  int num_layers = 4;
  int d_model = 64;
  int num_heads = 4;
  int ffn_dim = 256;
  int d_z = 32;

  static BackboneConfig from_config(const Config& c, int d_model) {
    BackboneConfig b;
    b.num_layers = static_cast<int>(c.get_int("model.layers"));
    b.d_model = d_model;
    b.num_heads = static_cast<int>(c.get_int("model.heads"));
    b.ffn_dim = static_cast<int>(c.get_int("model.ffn_dim"));
    b.d_z = static_cast<int>(c.get_int("model.d_z"));
    b.validate();
    return b;
  }

  void validate() const {
    // num_layers = 0 is permitted as the identity stack used in tests.
    if (num_layers < 0 || num_heads < 1 || d_model < 1 || ffn_dim < 1 || d_z < 1) {
      throw ConfigError("backbone: layer/width counts out of range");
    }
    if (d_model % num_heads != 0) {
      throw ConfigError("backbone: d_model " + std::to_string(d_model) +
                        " not divisible by num_heads " + std::to_string(num_heads));
    }
  }
};

template <typename S>
struct BlockParamsT {
  NodePtrT<S> attn_gain;                 // pre-attention norm gain [d]
  NodePtrT<S> wq, bq, wk, bk, wv, bv;    // projections [d,d] / [d]
  NodePtrT<S> wo, bo;                    // output projection
  NodePtrT<S> ffn_gain;                  // pre-FFN norm gain [d]
  GluParamsT<S> ffn_glu;                 // d -> ffn_dim gated expansion
  NodePtrT<S> ffn_down_w, ffn_down_b;    // ffn_dim -> d
};

template <typename S>
struct BackboneParamsT {
  std::vector<BlockParamsT<S>> blocks;
  NodePtrT<S> final_gain;  // applied only when the stack is nonempty

  static BackboneParamsT init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    const int d = cfg.d_model;
    const S wstd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
    BackboneParamsT p;
    for (int l = 0; l < cfg.num_layers; ++l) {
      BlockParamsT<S> blk;
      blk.attn_gain = make_param(TensorT<S>::ones({d}));
      blk.wq = make_param(TensorT<S>::randn(rng, {d, d}, wstd));
      blk.bq = make_param(TensorT<S>::zeros({d}));
      blk.wk = make_param(TensorT<S>::randn(rng, {d, d}, wstd));
      blk.bk = make_param(TensorT<S>::zeros({d}));
      blk.wv = make_param(TensorT<S>::randn(rng, {d, d}, wstd));
      blk.bv = make_param(TensorT<S>::zeros({d}));
      blk.wo = make_param(TensorT<S>::randn(rng, {d, d}, wstd));
      blk.bo = make_param(TensorT<S>::zeros({d}));
      blk.ffn_gain = make_param(TensorT<S>::ones({d}));
      blk.ffn_glu = glu_init<S>(d, cfg.ffn_dim, rng);
      blk.ffn_down_w = make_param(TensorT<S>::randn(
          rng, {cfg.ffn_dim, d}, static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim)))));
      blk.ffn_down_b = make_param(TensorT<S>::zeros({d}));
      p.blocks.push_back(std::move(blk));
    }
    p.final_gain = make_param(TensorT<S>::ones({d}));
    return p;
  }

  std::vector<std::pair<std::string, NodePtrT<S>>> named_params() {
    std::vector<std::pair<std::string, NodePtrT<S>>> out;
    for (size_t l = 0; l < blocks.size(); ++l) {
      const std::string pre = "backbone.block" + std::to_string(l) + ".";
      auto& b = blocks[l];
      out.emplace_back(pre + "attn_gain", b.attn_gain);
      out.emplace_back(pre + "wq", b.wq);
      out.emplace_back(pre + "bq", b.bq);
      out.emplace_back(pre + "wk", b.wk);
      out.emplace_back(pre + "bk", b.bk);
      out.emplace_back(pre + "wv", b.wv);
      out.emplace_back(pre + "bv", b.bv);
      out.emplace_back(pre + "wo", b.wo);
      out.emplace_back(pre + "bo", b.bo);
      out.emplace_back(pre + "ffn_gain", b.ffn_gain);
      out.emplace_back(pre + "ffn.w_gate", b.ffn_glu.w_gate);
      out.emplace_back(pre + "ffn.b_gate", b.ffn_glu.b_gate);
      out.emplace_back(pre + "ffn.w_value", b.ffn_glu.w_value);
      out.emplace_back(pre + "ffn.b_value", b.ffn_glu.b_value);
      out.emplace_back(pre + "ffn.down_w", b.ffn_down_w);
      out.emplace_back(pre + "ffn.down_b", b.ffn_down_b);
    }
    out.emplace_back("backbone.final_gain", final_gain);
    return out;
  }
};

using BlockParams = BlockParamsT<float>;
using BackboneParams = BackboneParamsT<float>;

// Causal decoder stack; position t of the output depends on inputs at
// positions <= t only. Padded rows of the output are zero. An empty stack
// is the identity (inputs pass through untouched, no final norm).
template <typename S>
NodePtrT<S> backbone_forward(const NodePtrT<S>& e_u, const std::vector<int>& lengths,
                             const BackboneConfig& cfg, const BackboneParamsT<S>& params) {
  cfg.validate();
  if (e_u->value.rank() != 3 || e_u->value.dim(2) != cfg.d_model) {
    throw ConfigError("backbone: input must be [B,T," + std::to_string(cfg.d_model) + "], got " +
                      shape_str(e_u->value.shape()));
  }
  if (cfg.num_layers == 0) return mask_rows(e_u, lengths);

  NodePtrT<S> x = e_u;
  for (const auto& blk : params.blocks) {
    auto h = rms_norm(x, blk.attn_gain);
    auto q = rope(linear(h, blk.wq, blk.bq), cfg.num_heads);
    auto k = rope(linear(h, blk.wk, blk.bk), cfg.num_heads);
    auto v = linear(h, blk.wv, blk.bv);
    auto attn = causal_attention(q, k, v, lengths, cfg.num_heads);
    x = add(x, linear(attn, blk.wo, blk.bo));

    auto f = rms_norm(x, blk.ffn_gain);
    x = add(x, linear(glu_block(f, blk.ffn_glu), blk.ffn_down_w, blk.ffn_down_b));
  }
  return mask_rows(rms_norm(x, params.final_gain), lengths);
}

// Pointwise gated heads into the shared scoring space.
template <typename S>
struct HeadParamsT {
  GluParamsT<S> user_glu;  // d_model -> d_z
  GluParamsT<S> item_glu;  // d_item  -> d_z

  static HeadParamsT init(int d_model, int d_item, int d_z, Rng& rng) {
    HeadParamsT p;
    p.user_glu = glu_init<S>(d_model, d_z, rng);
    p.item_glu = glu_init<S>(d_item, d_z, rng);
    return p;
  }

  std::vector<std::pair<std::string, NodePtrT<S>>> named_params() {
    return {{"heads.user.w_gate", user_glu.w_gate},   {"heads.user.b_gate", user_glu.b_gate},
            {"heads.user.w_value", user_glu.w_value}, {"heads.user.b_value", user_glu.b_value},
            {"heads.item.w_gate", item_glu.w_gate},   {"heads.item.b_gate", item_glu.b_gate},
            {"heads.item.w_value", item_glu.w_value}, {"heads.item.b_value", item_glu.b_value}};
  }
};

using HeadParams = HeadParamsT<float>;

template <typename S>
NodePtrT<S> user_head(const NodePtrT<S>& states, const HeadParamsT<S>& p) {
  return glu_block(states, p.user_glu);
}

template <typename S>
NodePtrT<S> item_head(const NodePtrT<S>& item_inputs, const HeadParamsT<S>& p) {
  return glu_block(item_inputs, p.item_glu);
}

// Temperature-scaled inner product between two equal-width vectors.
template <typename T>
double score(const T* z, const T* p, int width, double tau) {
  double dot = 0.0;
  for (int d = 0; d < width; ++d) dot += static_cast<double>(z[d]) * static_cast<double>(p[d]);
  return dot / tau;
}

template <typename T>
double score(const std::vector<T>& z, const std::vector<T>& p, double tau) {
  if (z.size() != p.size()) {
    throw ConfigError("score: width mismatch " + std::to_string(z.size()) + " vs " +
                      std::to_string(p.size()));
  }
  if (!(tau > 0.0)) throw ConfigError("score: temperature must be positive");
  return score(z.data(), p.data(), static_cast<int>(z.size()), tau);
}

// ---------------------------------------------------------------------------
// Long-range loss: for each anchor position, every same-user future
// positive is a softmax target against same-user future negatives plus
// every valid position of the other users in the batch.

template <typename S>
struct HolisticResultT {
  NodePtrT<S> loss;   // scalar; averaged over positive pairs
  int64_t n_pairs = 0;          // N_h
  bool empty = false;           // no positive pair anywhere in the batch
  // Per-anchor raw contribution (before the 1/N_h average), indexed b*T+t;
  // zero where the anchor was skipped. Exposed for tests and stats.
  std::vector<double> anchor_terms;
};

using HolisticResult = HolisticResultT<float>;

template <typename S>
HolisticResultT<S> holistic_loss(const NodePtrT<S>& z_seq, const NodePtrT<S>& p_seq,
                                 const std::vector<float>& labels,
                                 const std::vector<int>& lengths, double tau) {
  if (!(tau > 0.0)) throw ConfigError("holistic loss: temperature must be positive");
  const TensorT<S>& zv = z_seq->value;
  const TensorT<S>& pv = p_seq->value;
  if (zv.rank() != 3 || !zv.same_shape(pv)) {
    throw ConfigError("holistic loss: z " + shape_str(zv.shape()) + " vs p " +
                      shape_str(pv.shape()));
  }
  const int B = zv.dim(0);
  const int T = zv.dim(1);
  const int D = zv.dim(2);
  const int64_t N = static_cast<int64_t>(B) * T;
  if (static_cast<int64_t>(labels.size()) != N || static_cast<int>(lengths.size()) != B) {
    throw ConfigError("holistic loss: labels/lengths do not match [B,T]");
  }

  // Pack valid rows; an anchor's candidate set then covers exactly three
  // contiguous column ranges of one score matrix: users packed before it,
  // its own strict future, and users packed after it.
  std::vector<int64_t> off(static_cast<size_t>(B) + 1, 0);
  for (int b = 0; b < B; ++b) {
    off[static_cast<size_t>(b) + 1] = off[static_cast<size_t>(b)] + lengths[static_cast<size_t>(b)];
  }
  const int64_t A = off[static_cast<size_t>(B)];

  auto zp = std::make_shared<detail::EMat<S>>(A, D);
  auto pp = std::make_shared<detail::EMat<S>>(A, D);
  auto labp = std::make_shared<std::vector<float>>(static_cast<size_t>(A), 0.0f);
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < lengths[static_cast<size_t>(b)]; ++t) {
      const int64_t r = off[static_cast<size_t>(b)] + t;
      const int64_t i = static_cast<int64_t>(b) * T + t;
      zp->row(r) = detail::as_rows(zv).row(i);
      pp->row(r) = detail::as_rows(pv).row(i);
      (*labp)[static_cast<size_t>(r)] = labels[static_cast<size_t>(i)];
    }
  }
  auto smat = std::make_shared<detail::EMat<S>>(A, A);
  if (A > 0) smat->noalias() = (*zp) * pp->transpose() * static_cast<S>(1.0 / tau);

  HolisticResultT<S> out;
  out.anchor_terms.assign(static_cast<size_t>(N), 0.0);
  auto lse = std::make_shared<std::vector<double>>(static_cast<size_t>(N), 0.0);
  auto pos_count = std::make_shared<std::vector<int>>(static_cast<size_t>(N), 0);

  double total = 0.0;
  int64_t n_pairs = 0;
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t + 1 < lengths[static_cast<size_t>(b)]; ++t) {
      const int64_t r = off[static_cast<size_t>(b)] + t;
      const int64_t i = static_cast<int64_t>(b) * T + t;
      // Positives: same-user strictly-future y=+1 positions.
      int m = 0;
      double pos_sum = 0.0;
      for (int64_t c = r + 1; c < off[static_cast<size_t>(b) + 1]; ++c) {
        if ((*labp)[static_cast<size_t>(c)] > 0.0f) {
          ++m;
          pos_sum += static_cast<double>((*smat)(r, c));
        }
      }
      if (m == 0) continue;

      const auto row = smat->row(r);
      const int64_t seg[3][2] = {{0, off[static_cast<size_t>(b)]},
                                 {r + 1, off[static_cast<size_t>(b) + 1]},
                                 {off[static_cast<size_t>(b) + 1], A}};
      S max_s = std::numeric_limits<S>::lowest();
      for (const auto& sg : seg) {
        if (sg[1] > sg[0]) max_s = std::max(max_s, row.segment(sg[0], sg[1] - sg[0]).maxCoeff());
      }
      double denom = 0.0;
      for (const auto& sg : seg) {
        if (sg[1] > sg[0]) {
          denom += static_cast<double>(
              (row.segment(sg[0], sg[1] - sg[0]).array() - max_s).exp().sum());
        }
      }
      const double l = static_cast<double>(max_s) + std::log(denom);
      (*lse)[static_cast<size_t>(i)] = l;
      (*pos_count)[static_cast<size_t>(i)] = m;
      const double term = static_cast<double>(m) * l - pos_sum;
      out.anchor_terms[static_cast<size_t>(i)] = term;
      total += term;
      n_pairs += m;
    }
  }

  out.n_pairs = n_pairs;
  if (n_pairs == 0) {
    out.empty = true;
    out.loss = make_leaf(TensorT<S>::scalar(S(0)));
    return out;
  }

  TensorT<S> value = TensorT<S>::scalar(static_cast<S>(total / static_cast<double>(n_pairs)));
  std::vector<int> lens = lengths;
  out.loss = make_op<S>(
      "holistic_loss", {z_seq, p_seq}, std::move(value),
      [smat, zp, pp, labp, lse, pos_count, off, lens, B, T, A, n_pairs, tau](NodeT<S>& node) {
        const double g = static_cast<double>(node.grad.values()[0]);
        auto z = node.parents[0];
        auto p = node.parents[1];
        // dL/ds(r,c) = (m_r * softmax_r(c) - [c positive for r]) / N_h
        detail::EMat<S> gs = detail::EMat<S>::Zero(A, A);
        for (int b = 0; b < B; ++b) {
          for (int t = 0; t + 1 < lens[static_cast<size_t>(b)]; ++t) {
            const int64_t r = off[static_cast<size_t>(b)] + t;
            const int64_t i = static_cast<int64_t>(b) * T + t;
            const int m = (*pos_count)[static_cast<size_t>(i)];
            if (m == 0) continue;
            const S l = static_cast<S>((*lse)[static_cast<size_t>(i)]);
            const S pos_w = static_cast<S>(g / static_cast<double>(n_pairs));
            const S soft_w = static_cast<S>(m) * pos_w;
            const int64_t seg[3][2] = {{0, off[static_cast<size_t>(b)]},
                                       {r + 1, off[static_cast<size_t>(b) + 1]},
                                       {off[static_cast<size_t>(b) + 1], A}};
            for (const auto& sg : seg) {
              if (sg[1] > sg[0]) {
                gs.row(r).segment(sg[0], sg[1] - sg[0]).array() =
                    (smat->row(r).segment(sg[0], sg[1] - sg[0]).array() - l).exp() * soft_w;
              }
            }
            for (int64_t c = r + 1; c < off[static_cast<size_t>(b) + 1]; ++c) {
              if ((*labp)[static_cast<size_t>(c)] > 0.0f) gs(r, c) -= pos_w;
            }
          }
        }
        const S inv_tau = static_cast<S>(1.0 / tau);
        if (z->requires_grad) {
          z->ensure_grad();
          const detail::EMat<S> dz = gs * (*pp) * inv_tau;
          auto zg = detail::as_rows(z->grad);
          for (int b = 0; b < B; ++b) {
            for (int t = 0; t < lens[static_cast<size_t>(b)]; ++t) {
              zg.row(static_cast<int64_t>(b) * T + t) += dz.row(off[static_cast<size_t>(b)] + t);
            }
          }
        }
        if (p->requires_grad) {
          p->ensure_grad();
          const detail::EMat<S> dp = gs.transpose() * (*zp) * inv_tau;
          auto pg = detail::as_rows(p->grad);
          for (int b = 0; b < B; ++b) {
            for (int t = 0; t < lens[static_cast<size_t>(b)]; ++t) {
              pg.row(static_cast<int64_t>(b) * T + t) += dp.row(off[static_cast<size_t>(b)] + t);
            }
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// Next-event loss: every position with a successor predicts the successor
// item's vector with the successor's label as the sign, against a
// trainable scalar bias.

template <typename S>
struct ImmediateResultT {
  NodePtrT<S> loss;   // scalar; averaged over contributing positions
  int64_t n_terms = 0;          // N_i
  bool empty = false;           // no sequence had length >= 2
  std::vector<double> anchor_terms;  // per anchor b*T+t, zero where skipped
};

using ImmediateResult = ImmediateResultT<float>;

template <typename S>
ImmediateResultT<S> immediate_loss(const NodePtrT<S>& z_seq, const NodePtrT<S>& p_seq,
                                   const std::vector<float>& labels,
                                   const std::vector<int>& lengths, double tau,
                                   const NodePtrT<S>& bias) {
  if (!(tau > 0.0)) throw ConfigError("immediate loss: temperature must be positive");
  const TensorT<S>& zv = z_seq->value;
  const TensorT<S>& pv = p_seq->value;
  if (zv.rank() != 3 || !zv.same_shape(pv)) {
    throw ConfigError("immediate loss: z " + shape_str(zv.shape()) + " vs p " +
                      shape_str(pv.shape()));
  }
  if (bias->value.numel() != 1) {
    throw ConfigError("immediate loss: bias must be a scalar");
  }
  const int B = zv.dim(0);
  const int T = zv.dim(1);
  const int D = zv.dim(2);

  ImmediateResultT<S> out;
  out.anchor_terms.assign(static_cast<size_t>(B) * T, 0.0);

  const double b0 = static_cast<double>(bias->value.values()[0]);
  // Cached per contributing position: (flat anchor index, y, x) where
  // x = y * (s - b).
  auto cached = std::make_shared<std::vector<std::array<double, 3>>>();
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t + 1 < lengths[static_cast<size_t>(b)]; ++t) {
      const int64_t i = static_cast<int64_t>(b) * T + t;
      const double y = labels[static_cast<size_t>(i) + 1] > 0.0f ? 1.0 : -1.0;
      const double s = score(zv.data() + i * D, pv.data() + (i + 1) * D, D, tau);
      const double x = y * (s - b0);
      const double term = detail::softplus(-x);  // = -log sigmoid(x)
      out.anchor_terms[static_cast<size_t>(i)] = term;
      cached->push_back({static_cast<double>(i), y, x});
      total += term;
    }
  }

  out.n_terms = static_cast<int64_t>(cached->size());
  if (out.n_terms == 0) {
    out.empty = true;
    out.loss = make_leaf(TensorT<S>::scalar(S(0)));
    return out;
  }

  const int64_t n = out.n_terms;
  TensorT<S> value = TensorT<S>::scalar(static_cast<S>(total / static_cast<double>(n)));
  out.loss = make_op<S>(
      "immediate_loss", {z_seq, p_seq, bias}, std::move(value),
      [cached, n, tau, D](NodeT<S>& node) {
        const double g = static_cast<double>(node.grad.values()[0]);
        auto z = node.parents[0];
        auto p = node.parents[1];
        auto bias_node = node.parents[2];
        if (z->requires_grad) z->ensure_grad();
        if (p->requires_grad) p->ensure_grad();
        if (bias_node->requires_grad) bias_node->ensure_grad();
        for (const auto& rec : *cached) {
          const int64_t i = static_cast<int64_t>(rec[0]);
          const double y = rec[1];
          const double x = rec[2];
          // d term / d x = -sigmoid(-x); x = y (s - b)
          const double dx = -detail::sigmoid_s(-x) * g / static_cast<double>(n);
          const double ds = dx * y;
          if (z->requires_grad) {
            S* gz = z->grad.data() + i * D;
            const S* pp = p->value.data() + (i + 1) * D;
            for (int d = 0; d < D; ++d)
              gz[d] += static_cast<S>(ds / tau * static_cast<double>(pp[d]));
          }
          if (p->requires_grad) {
            S* gp = p->grad.data() + (i + 1) * D;
            const S* zz = z->value.data() + i * D;
            for (int d = 0; d < D; ++d)
              gp[d] += static_cast<S>(ds / tau * static_cast<double>(zz[d]));
          }
          if (bias_node->requires_grad) {
            bias_node->grad.data()[0] += static_cast<S>(-dx * y);
          }
        }
      });
  return out;
}

// Weighted sum of the already-averaged parts; pass a null commit node when
// the quantizer is disabled.
template <typename S>
NodePtrT<S> total_loss(const NodePtrT<S>& holistic, const NodePtrT<S>& immediate,
                       const NodePtrT<S>& commit, double w_holistic, double w_immediate,
                       double commit_weight) {
  auto out = add(scale(holistic, static_cast<S>(w_holistic)),
                 scale(immediate, static_cast<S>(w_immediate)));
  if (commit) out = add(out, scale(commit, static_cast<S>(commit_weight)));
  return out;
}

}  // namespace histrec::repr
