// SPDX-License-Identifier: Apache-2.0
//
// Utilization stage: ranking models scored with and without compressed
// user features.
//
// Candidates and history events share one behavior embedding: item and
// category table rows plus the item's frozen modality vector. Three
// ranker variants consume them. `mlp` concatenates the candidate with the
// mean-pooled short history and runs a two-hidden-layer MLP to a logit.
// `din` adds a target-attention pool of the short history, weighted by a
// small MLP over each behavior, the candidate, and their product.
// `simsoft` further scans the long history for the candidate's top-k
// inner-product neighbors (on current embedding values, shared with the
// rest of the model) and attention-pools the retrieved set. Per-user
// numeric features — code-usage histograms from the compression stage —
// enter through their own linear projection when enabled.
//
// Training is binary cross-entropy with early stopping on a held-out
// slice of users; the reported model is the best validation state, not
// the last. All randomness derives from the seed, so identical inputs
// reproduce identical reports.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "histrec/config.hpp"
#include "histrec/datagen.hpp"
#include "histrec/metrics.hpp"
#include "histrec/ops.hpp"
#include "histrec/optimizer.hpp"
#include "histrec/rng.hpp"
#include "histrec/trainer.hpp"

namespace histrec::rank {

// ---------------------------------------------------------------------------
// Configuration

struct RankerConfig {
  std::string variant = "mlp";  // mlp | din | simsoft
  bool use_histogram = false;
  int hidden1 = 64;  // trunk widths
  int hidden2 = 32;
  int item_dim = 16;  // behavior embedding widths
  int category_dim = 8;
  int att_hidden = 32;     // attention-score MLP width
  int hist_proj_dim = 16;  // histogram projection width
  int top_k = 32;          // retrieval size (simsoft)
  int short_len = 30;      // history caps
  int long_len = 1000;
  double lr = 5e-4;
  int batch = 256;
  int max_epochs = 8;
  int patience = 2;  // non-improving validation epochs tolerated
  double val_fraction = 0.1;
  uint64_t seed = 0;

  static RankerConfig from_config(const Config& c) {
    RankerConfig r;
    r.variant = c.get_str("rank.variant");
    r.use_histogram = c.get_bool("rank.use_histogram");
    r.hidden1 = static_cast<int>(c.get_int("rank.hidden1"));
    r.hidden2 = static_cast<int>(c.get_int("rank.hidden2"));
    r.item_dim = static_cast<int>(c.get_int("rank.item_dim"));
    r.category_dim = static_cast<int>(c.get_int("rank.category_dim"));
    r.att_hidden = static_cast<int>(c.get_int("rank.att_hidden"));
    r.hist_proj_dim = static_cast<int>(c.get_int("rank.hist_proj_dim"));
    r.top_k = static_cast<int>(c.get_int("rank.top_k"));
    r.short_len = static_cast<int>(c.get_int("rank.short_len"));
    r.long_len = static_cast<int>(c.get_int("rank.long_len"));
    r.lr = c.get_float("rank.lr");
    r.batch = static_cast<int>(c.get_int("rank.batch"));
    r.max_epochs = static_cast<int>(c.get_int("rank.max_epochs"));
    r.patience = static_cast<int>(c.get_int("rank.patience"));
    r.val_fraction = c.get_float("rank.val_fraction");
    r.seed = static_cast<uint64_t>(c.get_int("seed"));
    r.validate();
    return r;
  }

  void validate() const {
    if (variant != "mlp" && variant != "din" && variant != "simsoft") {
      throw ConfigError("rank: variant must be mlp, din, or simsoft, got '" + variant + "'");
    }
    if (hidden1 < 1 || hidden2 < 1 || item_dim < 1 || category_dim < 1 || att_hidden < 1 ||
        hist_proj_dim < 1) {
      throw ConfigError("rank: all widths must be >= 1");
    }
    if (short_len < 1 || long_len < 1) throw ConfigError("rank: history caps must be >= 1");
    if (top_k < 1 || top_k > long_len) {
      throw ConfigError("rank: top_k must lie in [1, long_len], got " + std::to_string(top_k));
    }
    if (lr <= 0.0) throw ConfigError("rank: learning rate must be positive");
    if (batch < 1 || max_epochs < 1) throw ConfigError("rank: batch and epochs must be >= 1");
    if (patience < 0) throw ConfigError("rank: patience must be >= 0");
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
      throw ConfigError("rank: val_fraction must lie in [0,1)");
    }
  }
};

// ---------------------------------------------------------------------------
// Per-user numeric features

struct UserFeatureTable {
  std::vector<int32_t> user_ids;  // ascending
  std::vector<int> lengths;       // valid prefix events per user
  std::vector<std::vector<float>> rows;
  int width = 0;

  const std::vector<float>* find(int32_t user) const {
    auto it = std::lower_bound(user_ids.begin(), user_ids.end(), user);
    if (it == user_ids.end() || *it != user) return nullptr;
    return &rows[static_cast<size_t>(it - user_ids.begin())];
  }
};

// One numeric feature row per user over its representation prefix:
// code-usage histograms when the model quantizes, otherwise the mean of
// the user head outputs over valid positions (average pooling).
inline UserFeatureTable encode_user_features(
    train::CompressionModel& m, const std::vector<datagen::BehaviorSequence>& sequences,
    const datagen::Catalog& catalog, int batch_users, int max_len) {
  if (m.use_quantizer && !m.qstate.initialized) {
    throw TrainError("encode: quantizer state was never initialized");
  }
  UserFeatureTable out;
  out.width = m.use_quantizer ? m.qstate.cfg.histogram_width() : m.bcfg.d_z;
  for (const auto& batch : datagen::build_batches(sequences, catalog, batch_users, max_len)) {
    auto ad = adapt::adapt(batch, m.acfg, m.adapt_p);
    auto b_seq = repr::backbone_forward(ad.user_inputs, batch.lengths, m.bcfg, m.backbone_p);
    if (m.use_quantizer) {
      auto hists = quant::encode_histograms(b_seq->value, batch.lengths, batch.user_ids, m.qstate);
      for (size_t b = 0; b < hists.size(); ++b) {
        out.user_ids.push_back(hists[b].user_id);
        out.lengths.push_back(batch.lengths[b]);
        out.rows.push_back(std::move(hists[b].values));
      }
    } else {
      auto z = repr::user_head(b_seq, m.heads_p);  // [B, T, d_z]
      const int T = batch.T;
      const int D = m.bcfg.d_z;
      for (int b = 0; b < batch.B; ++b) {
        const int len = batch.lengths[static_cast<size_t>(b)];
        std::vector<float> row(static_cast<size_t>(D), 0.0f);
        for (int t = 0; t < len; ++t) {
          const float* src = z->value.data() + (static_cast<int64_t>(b) * T + t) * D;
          for (int d = 0; d < D; ++d) row[static_cast<size_t>(d)] += src[d];
        }
        if (len > 0) {
          for (float& v : row) v /= static_cast<float>(len);
        }
        out.user_ids.push_back(batch.user_ids[static_cast<size_t>(b)]);
        out.lengths.push_back(len);
        out.rows.push_back(std::move(row));
      }
    }
  }
  // Batches follow the input sequence order; sort defensively so find()
  // can binary-search regardless of how the caller ordered sequences.
  std::vector<size_t> order(out.user_ids.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return out.user_ids[a] < out.user_ids[b]; });
  UserFeatureTable sorted;
  sorted.width = out.width;
  for (size_t i : order) {
    sorted.user_ids.push_back(out.user_ids[i]);
    sorted.lengths.push_back(out.lengths[i]);
    sorted.rows.push_back(std::move(out.rows[i]));
  }
  return sorted;
}

// ---------------------------------------------------------------------------
// Samples

struct RankingSample {
  int32_t user_id = 0;
  int32_t item_id = 0;                // candidate; category/modality come off the catalog
  int64_t ts = 0;
  std::vector<int32_t> short_hist;    // most recent positive item ids, time order
  std::vector<int32_t> long_hist;     // longer positive suffix, time order
  int32_t feature_row = -1;           // row into RankDataset::features, -1 = none
  float label = 0.0f;                 // +1 action -> 1, otherwise 0
};

struct RankDataset {
  std::vector<RankingSample> samples;
  std::vector<std::vector<float>> features;  // deduplicated per-user rows
  int feature_width = 0;
};

// Point samples at a feature table: one shared row per user, missing
// users keep -1 and fall back to zeros at batch time.
inline void attach_features(RankDataset& data, const UserFeatureTable& table) {
  data.features.clear();
  data.feature_width = table.width;
  std::unordered_map<int32_t, int32_t> row_of;
  for (auto& s : data.samples) {
    auto it = row_of.find(s.user_id);
    if (it == row_of.end()) {
      const std::vector<float>* row = table.find(s.user_id);
      int32_t idx = -1;
      if (row != nullptr) {
        idx = static_cast<int32_t>(data.features.size());
        data.features.push_back(*row);
      }
      it = row_of.emplace(s.user_id, idx).first;
    }
    s.feature_row = it->second;
  }
}

// Turn split event references into ranking samples. Histories hold only
// positive actions, stay in time order, and strictly precede the sample's
// own timestamp; the most recent short_len/long_len entries survive.
inline RankDataset build_dataset(const datagen::LogSet& logs,
                                 const std::vector<datagen::EventRef>& refs,
                                 const RankerConfig& cfg,
                                 const UserFeatureTable* features = nullptr) {
  RankDataset out;
  out.samples.reserve(refs.size());
  for (const auto& ref : refs) {
    const auto& seq = logs.sequences[static_cast<size_t>(ref.seq_index)];
    const auto& ev = seq.events[static_cast<size_t>(ref.event_index)];
    RankingSample s;
    s.user_id = seq.user_id;
    s.item_id = ev.item_id;
    s.ts = ev.ts;
    s.label = ev.label > 0 ? 1.0f : 0.0f;
    // Newest-first scan of earlier positives, then flip to time order.
    for (int j = ref.event_index - 1;
         j >= 0 && static_cast<int>(s.long_hist.size()) < cfg.long_len; --j) {
      const auto& past = seq.events[static_cast<size_t>(j)];
      if (past.label > 0) s.long_hist.push_back(past.item_id);
    }
    std::reverse(s.long_hist.begin(), s.long_hist.end());
    const int n_short = std::min<int>(cfg.short_len, static_cast<int>(s.long_hist.size()));
    s.short_hist.assign(s.long_hist.end() - n_short, s.long_hist.end());
    out.samples.push_back(std::move(s));
  }
  if (features != nullptr) attach_features(out, *features);
  return out;
}

// ---------------------------------------------------------------------------
// Model

struct AttentionParams {
  NodePtr w1, b1;  // [3*d_e, att_hidden]
  NodePtr w2, b2;  // [att_hidden, 1]
};

struct RankerModel {
  RankerConfig cfg;
  int modality_dim = 0;
  int feature_width = 0;  // histogram width seen at init (0 when unused)
  int d_e = 0;            // item_dim + category_dim + modality_dim

  NodePtr item_table;      // [num_items+1, item_dim], row 0 = unknown/pad
  NodePtr category_table;  // [num_categories+1, category_dim]
  AttentionParams att;     // short-history target attention (din, simsoft)
  AttentionParams ret;     // retrieved-set attention (simsoft)
  NodePtr hist_w, hist_b;  // histogram projection (use_histogram)
  NodePtr fc1_w, fc1_b;    // trunk
  NodePtr fc2_w, fc2_b;
  NodePtr out_w, out_b;

  static RankerModel init(const RankerConfig& cfg, const datagen::Catalog& catalog,
                          int feature_width, Rng& rng) {
    cfg.validate();
    if (cfg.use_histogram && feature_width < 1) {
      throw ConfigError("rank: histogram input requested but feature width is 0");
    }
    RankerModel m;
    m.cfg = cfg;
    m.modality_dim = catalog.modality_dim;
    m.feature_width = cfg.use_histogram ? feature_width : 0;
    m.d_e = cfg.item_dim + cfg.category_dim + catalog.modality_dim;

    const float table_std = 0.02f;
    m.item_table =
        make_param(Tensor::randn(rng, {catalog.num_items + 1, cfg.item_dim}, table_std));
    m.category_table = make_param(
        Tensor::randn(rng, {catalog.num_categories + 1, cfg.category_dim}, table_std));

    auto dense = [&rng](int in, int out) {
      return make_param(
          Tensor::randn(rng, {in, out}, static_cast<float>(1.0 / std::sqrt(in))));
    };
    auto attention = [&](int in, int hidden) {
      AttentionParams p;
      p.w1 = dense(in, hidden);
      p.b1 = make_param(Tensor::zeros({hidden}));
      p.w2 = dense(hidden, 1);
      p.b2 = make_param(Tensor::zeros({1}));
      return p;
    };
    if (cfg.variant != "mlp") m.att = attention(3 * m.d_e, cfg.att_hidden);
    if (cfg.variant == "simsoft") m.ret = attention(3 * m.d_e, cfg.att_hidden);
    if (cfg.use_histogram) {
      m.hist_w = dense(feature_width, cfg.hist_proj_dim);
      m.hist_b = make_param(Tensor::zeros({cfg.hist_proj_dim}));
    }

    int trunk_in = 2 * m.d_e;                          // candidate + mean short history
    if (cfg.variant != "mlp") trunk_in += m.d_e;       // target-attention pool
    if (cfg.variant == "simsoft") trunk_in += m.d_e;   // retrieved pool
    if (cfg.use_histogram) trunk_in += cfg.hist_proj_dim;
    m.fc1_w = dense(trunk_in, cfg.hidden1);
    m.fc1_b = make_param(Tensor::zeros({cfg.hidden1}));
    m.fc2_w = dense(cfg.hidden1, cfg.hidden2);
    m.fc2_b = make_param(Tensor::zeros({cfg.hidden2}));
    m.out_w = dense(cfg.hidden2, 1);
    m.out_b = make_param(Tensor::zeros({1}));
    return m;
  }

  std::vector<std::pair<std::string, NodePtr>> named_params() {
    std::vector<std::pair<std::string, NodePtr>> out = {
        {"rank.item_table", item_table}, {"rank.category_table", category_table}};
    auto push_att = [&out](const char* prefix, const AttentionParams& p) {
      out.emplace_back(std::string(prefix) + ".w1", p.w1);
      out.emplace_back(std::string(prefix) + ".b1", p.b1);
      out.emplace_back(std::string(prefix) + ".w2", p.w2);
      out.emplace_back(std::string(prefix) + ".b2", p.b2);
    };
    if (att.w1) push_att("rank.att", att);
    if (ret.w1) push_att("rank.ret", ret);
    if (hist_w) {
      out.emplace_back("rank.hist.w", hist_w);
      out.emplace_back("rank.hist.b", hist_b);
    }
    out.emplace_back("rank.fc1.w", fc1_w);
    out.emplace_back("rank.fc1.b", fc1_b);
    out.emplace_back("rank.fc2.w", fc2_w);
    out.emplace_back("rank.fc2.b", fc2_b);
    out.emplace_back("rank.out.w", out_w);
    out.emplace_back("rank.out.b", out_b);
    return out;
  }

  int64_t param_count() {
    int64_t n = 0;
    for (auto& [name, node] : named_params()) n += node->value.numel();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

inline void check_item(const datagen::Catalog& catalog, int32_t item) {
  if (item < 0 || item >= catalog.num_items) {
    throw DataError("rank: item id " + std::to_string(item) + " outside catalog [0," +
                    std::to_string(catalog.num_items) + ")");
  }
}

// Behavior embedding for id lists laid out as lead_shape: table lookups
// concatenated with the frozen modality vectors.
inline NodePtr embed(const RankerModel& m, const datagen::Catalog& catalog, Shape lead,
                     const std::vector<int32_t>& item_idx, const std::vector<int32_t>& cat_idx,
                     std::vector<float> modality) {
  auto item_e = embedding_gather(m.item_table, item_idx, lead, "item_id");
  auto cat_e = embedding_gather(m.category_table, cat_idx, lead, "category_id");
  Shape mod_shape = lead;
  mod_shape.push_back(m.modality_dim);
  auto mod_leaf = make_leaf(Tensor(std::move(mod_shape), std::move(modality)),
                            /*requires_grad=*/false);
  return concat_last<float>({item_e, cat_e, mod_leaf});
}

// Target attention: score each behavior against the candidate with a
// small MLP over [behavior, candidate, behavior*candidate], softmax over
// valid positions, and pool. A single valid event gets weight one, so the
// pool returns exactly that event's embedding.
inline NodePtr attention_pool(const NodePtr& behaviors, const std::vector<int>& lengths,
                              const NodePtr& cand, const AttentionParams& p) {
  const int B = behaviors->value.dim(0);
  const int T = behaviors->value.dim(1);
  auto q = tile_rows(cand, T);
  auto interaction = concat_last<float>({behaviors, q, mul(behaviors, q)});
  auto hidden = silu(linear(interaction, p.w1, p.b1));
  auto scores = reshape(linear(hidden, p.w2, p.b2), {B, T});
  return weighted_pool(masked_softmax(scores, lengths), behaviors);
}

// Positions of the k largest inner products between history behaviors and
// the candidate vector, best first; ties break toward the earlier (older)
// position. Scores use current embedding values, so retrieval follows the
// same tables the differentiable path trains.
inline std::vector<int> retrieve_top_k(const RankerModel& m, const datagen::Catalog& catalog,
                                       const std::vector<int32_t>& hist, const float* cand,
                                       int k) {
  const int n = static_cast<int>(hist.size());
  std::vector<double> scores(static_cast<size_t>(n), 0.0);
  const float* items = m.item_table->value.data();
  const float* cats = m.category_table->value.data();
  const int di = m.cfg.item_dim;
  const int dc = m.cfg.category_dim;
  const int dm = m.modality_dim;
  for (int j = 0; j < n; ++j) {
    const int32_t item = hist[static_cast<size_t>(j)];
    check_item(catalog, item);
    const float* ie = items + static_cast<int64_t>(item + 1) * di;
    const float* ce =
        cats + static_cast<int64_t>(catalog.item_category[static_cast<size_t>(item)] + 1) * dc;
    const float* me = catalog.item_modality.data() + static_cast<int64_t>(item) * dm;
    double s = 0.0;
    for (int d = 0; d < di; ++d) s += static_cast<double>(ie[d]) * cand[d];
    for (int d = 0; d < dc; ++d) s += static_cast<double>(ce[d]) * cand[di + d];
    for (int d = 0; d < dm; ++d) s += static_cast<double>(me[d]) * cand[di + dc + d];
    scores[static_cast<size_t>(j)] = s;
  }
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&scores](int a, int b) {
    const double sa = scores[static_cast<size_t>(a)];
    const double sb = scores[static_cast<size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  order.resize(static_cast<size_t>(std::min(k, n)));
  return order;
}

}  // namespace detail

// Logits for the samples selected by `idx`, in that order.
inline NodePtr ranker_logits(const RankerModel& m, const datagen::Catalog& catalog,
                             const RankDataset& data, const std::vector<int32_t>& idx) {
  if (idx.empty()) throw ConfigError("rank: empty batch");
  if (m.cfg.use_histogram && data.feature_width != m.feature_width) {
    throw DataError("rank: dataset feature width " + std::to_string(data.feature_width) +
                    " != model width " + std::to_string(m.feature_width));
  }
  const int B = static_cast<int>(idx.size());
  const int Ts = m.cfg.short_len;
  const int dm = m.modality_dim;

  std::vector<int32_t> c_item(static_cast<size_t>(B)), c_cat(static_cast<size_t>(B));
  std::vector<float> c_mod(static_cast<size_t>(B) * dm);
  std::vector<int32_t> s_item(static_cast<size_t>(B) * Ts, 0);
  std::vector<int32_t> s_cat(static_cast<size_t>(B) * Ts, 0);
  std::vector<float> s_mod(static_cast<size_t>(B) * Ts * dm, 0.0f);
  std::vector<int> s_len(static_cast<size_t>(B));

  auto fill_slot = [&](std::vector<int32_t>& items, std::vector<int32_t>& cats,
                       std::vector<float>& mods, int64_t slot, int32_t item) {
    detail::check_item(catalog, item);
    items[static_cast<size_t>(slot)] = item + 1;
    cats[static_cast<size_t>(slot)] = catalog.item_category[static_cast<size_t>(item)] + 1;
    const float* src = catalog.item_modality.data() + static_cast<int64_t>(item) * dm;
    std::copy(src, src + dm, mods.data() + slot * dm);
  };

  for (int b = 0; b < B; ++b) {
    const auto& s = data.samples[static_cast<size_t>(idx[static_cast<size_t>(b)])];
    fill_slot(c_item, c_cat, c_mod, b, s.item_id);
    const int n = static_cast<int>(s.short_hist.size());
    s_len[static_cast<size_t>(b)] = n;
    for (int t = 0; t < n; ++t) {
      fill_slot(s_item, s_cat, s_mod, static_cast<int64_t>(b) * Ts + t,
                s.short_hist[static_cast<size_t>(t)]);
    }
  }

  auto cand = detail::embed(m, catalog, {B}, c_item, c_cat, std::move(c_mod));  // [B, d_e]
  auto behaviors = detail::embed(m, catalog, {B, Ts}, s_item, s_cat, std::move(s_mod));

  std::vector<NodePtr> feats{cand, masked_mean_pool(behaviors, s_len)};
  if (m.cfg.variant != "mlp") {
    feats.push_back(detail::attention_pool(behaviors, s_len, cand, m.att));
  }
  if (m.cfg.variant == "simsoft") {
    const int K = m.cfg.top_k;
    std::vector<int32_t> r_item(static_cast<size_t>(B) * K, 0);
    std::vector<int32_t> r_cat(static_cast<size_t>(B) * K, 0);
    std::vector<float> r_mod(static_cast<size_t>(B) * K * dm, 0.0f);
    std::vector<int> r_len(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      const auto& s = data.samples[static_cast<size_t>(idx[static_cast<size_t>(b)])];
      const float* cv = cand->value.data() + static_cast<int64_t>(b) * m.d_e;
      const auto picked = detail::retrieve_top_k(m, catalog, s.long_hist, cv, K);
      r_len[static_cast<size_t>(b)] = static_cast<int>(picked.size());
      for (size_t j = 0; j < picked.size(); ++j) {
        fill_slot(r_item, r_cat, r_mod, static_cast<int64_t>(b) * K + static_cast<int64_t>(j),
                  s.long_hist[static_cast<size_t>(picked[j])]);
      }
    }
    auto retrieved = detail::embed(m, catalog, {B, K}, r_item, r_cat, std::move(r_mod));
    feats.push_back(detail::attention_pool(retrieved, r_len, cand, m.ret));
  }
  if (m.cfg.use_histogram) {
    std::vector<float> h(static_cast<size_t>(B) * m.feature_width, 0.0f);
    for (int b = 0; b < B; ++b) {
      const auto& s = data.samples[static_cast<size_t>(idx[static_cast<size_t>(b)])];
      if (s.feature_row >= 0) {
        const auto& row = data.features[static_cast<size_t>(s.feature_row)];
        std::copy(row.begin(), row.end(),
                  h.data() + static_cast<int64_t>(b) * m.feature_width);
      }
    }
    auto leaf = make_leaf(Tensor({B, m.feature_width}, std::move(h)), /*requires_grad=*/false);
    feats.push_back(linear(leaf, m.hist_w, m.hist_b));
  }

  auto x = concat_last<float>(feats);
  auto h1 = silu(linear(x, m.fc1_w, m.fc1_b));
  auto h2 = silu(linear(h1, m.fc2_w, m.fc2_b));
  return reshape(linear(h2, m.out_w, m.out_b), {B});
}

// Predicted positive probabilities for every sample, dataset order.
inline std::vector<double> predict_scores(const RankerModel& m, const datagen::Catalog& catalog,
                                          const RankDataset& data, int batch) {
  if (batch < 1) throw ConfigError("rank: prediction batch must be >= 1");
  std::vector<double> out;
  out.reserve(data.samples.size());
  const int64_t n = static_cast<int64_t>(data.samples.size());
  for (int64_t start = 0; start < n; start += batch) {
    const int64_t stop = std::min<int64_t>(start + batch, n);
    std::vector<int32_t> idx;
    idx.reserve(static_cast<size_t>(stop - start));
    for (int64_t i = start; i < stop; ++i) idx.push_back(static_cast<int32_t>(i));
    auto logits = ranker_logits(m, catalog, data, idx);
    for (float v : logits->value.values()) {
      out.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
  bool has_auc = false;   // both classes present
  bool has_gauc = false;  // at least one user with both classes
  double auc = 0.0;
  double gauc = 0.0;
  double logloss = 0.0;
  int64_t n_samples = 0;
  int64_t n_users = 0;  // distinct users in the evaluated set
  int64_t gauc_users = 0;
  int64_t gauc_skipped = 0;
  std::vector<std::pair<int32_t, double>> per_user_auc;  // eligible users, ascending id
};

inline MetricReport make_report(const std::vector<double>& scores,
                                const std::vector<float>& labels,
                                const std::vector<int32_t>& users) {
  if (scores.size() != labels.size() || scores.size() != users.size()) {
    throw DataError("report: scores/labels/users sizes differ");
  }
  std::vector<int8_t> pm(labels.size());
  bool any_pos = false, any_neg = false;
  for (size_t i = 0; i < labels.size(); ++i) {
    pm[i] = labels[i] > 0.5f ? int8_t{1} : int8_t{-1};
    (pm[i] > 0 ? any_pos : any_neg) = true;
  }

  MetricReport r;
  r.n_samples = static_cast<int64_t>(scores.size());
  r.has_auc = any_pos && any_neg;
  if (r.has_auc) r.auc = metrics::auc(scores, pm);
  r.logloss = metrics::logloss(scores, pm);

  const auto g = metrics::grouped_auc(scores, pm, users);
  r.gauc_users = g.users_counted;
  r.gauc_skipped = g.users_skipped;
  r.n_users = g.users_counted + g.users_skipped;
  r.has_gauc = g.users_counted > 0;
  if (r.has_gauc) r.gauc = g.value;

  // Per-user table: recompute each eligible user's AUC in id order.
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&users](size_t a, size_t b) { return users[a] < users[b]; });
  size_t i = 0;
  std::vector<double> s;
  std::vector<int8_t> y;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && users[order[j]] == users[order[i]]) ++j;
    s.clear();
    y.clear();
    bool pos = false, neg = false;
    for (size_t k = i; k < j; ++k) {
      s.push_back(scores[order[k]]);
      y.push_back(pm[order[k]]);
      (pm[order[k]] > 0 ? pos : neg) = true;
    }
    if (pos && neg) r.per_user_auc.emplace_back(users[order[i]], metrics::auc(s, y));
    i = j;
  }
  return r;
}

inline MetricReport evaluate_ranker(const RankerModel& m, const datagen::Catalog& catalog,
                                    const RankDataset& data, int batch) {
  const auto scores = predict_scores(m, catalog, data, batch);
  std::vector<float> labels;
  std::vector<int32_t> users;
  labels.reserve(data.samples.size());
  users.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    labels.push_back(s.label);
    users.push_back(s.user_id);
  }
  return make_report(scores, labels, users);
}

inline nlohmann::json report_json(const MetricReport& r) {
  nlohmann::json j;
  j["auc"] = r.has_auc ? nlohmann::json(r.auc) : nlohmann::json();
  j["gauc"] = r.has_gauc ? nlohmann::json(r.gauc) : nlohmann::json();
  j["logloss"] = r.logloss;
  j["n_samples"] = r.n_samples;
  j["n_users"] = r.n_users;
  j["gauc_users"] = r.gauc_users;
  j["gauc_skipped"] = r.gauc_skipped;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [user, value] : r.per_user_auc) {
    table.push_back({{"user_id", user}, {"auc", value}});
  }
  j["per_user_auc"] = std::move(table);
  return j;
}

// ---------------------------------------------------------------------------
// Training

struct RankTrainResult {
  RankerModel model;  // best validation state (last state without validation)
  MetricReport val_report;
  std::vector<double> train_loss;   // mean BCE per epoch
  std::vector<double> val_logloss;  // one entry per validated epoch
  int best_epoch = -1;              // -1 when no validation ran
  int epochs_run = 0;
};

// Binary cross-entropy training with user-level validation holdout and
// early stopping; the returned model carries the parameters of the best
// validation epoch, not the last one.
inline RankTrainResult train_ranker(const RankDataset& data, const datagen::Catalog& catalog,
                                    const RankerConfig& cfg) {
  cfg.validate();
  if (data.samples.empty()) throw TrainError("ranker: empty training set");
  if (cfg.use_histogram && data.feature_width < 1) {
    throw ConfigError("ranker: histogram input requested but the dataset carries none");
  }

  // Hold out whole users for validation so early stopping never peeks at
  // impressions of users it trains on.
  std::vector<int32_t> users;
  for (const auto& s : data.samples) users.push_back(s.user_id);
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  std::vector<int32_t> val_users;
  if (cfg.val_fraction > 0.0 && users.size() >= 2) {
    Rng split_rng(derive_seed(cfg.seed, "rank-val-split"));
    std::vector<int32_t> shuffled = users;
    split_rng.shuffle(shuffled);
    const auto n_val = std::min<int64_t>(
        static_cast<int64_t>(users.size()) - 1,
        std::max<int64_t>(1, std::llround(cfg.val_fraction * static_cast<double>(users.size()))));
    val_users.assign(shuffled.begin(), shuffled.begin() + n_val);
    std::sort(val_users.begin(), val_users.end());
  }
  auto in_val = [&val_users](int32_t user) {
    return std::binary_search(val_users.begin(), val_users.end(), user);
  };
  std::vector<int32_t> train_idx, val_idx;
  for (size_t i = 0; i < data.samples.size(); ++i) {
    (in_val(data.samples[i].user_id) ? val_idx : train_idx).push_back(static_cast<int32_t>(i));
  }
  if (train_idx.empty()) throw TrainError("ranker: validation split left no training samples");

  RankDataset val_data;
  val_data.features = data.features;
  val_data.feature_width = data.feature_width;
  for (int32_t i : val_idx) val_data.samples.push_back(data.samples[static_cast<size_t>(i)]);

  Rng init_rng(derive_seed(cfg.seed, "rank-init"));
  RankTrainResult out{RankerModel::init(cfg, catalog, data.feature_width, init_rng),
                      {}, {}, {}, -1, 0};
  RankerModel& model = out.model;

  std::vector<opt::TrackedParam> tracked;
  for (auto& [name, node] : model.named_params()) {
    tracked.push_back({name, node, node->value.rank() >= 2, opt::kFreshGroup});
  }
  opt::AdamW optimizer(std::move(tracked), opt::AdamWConfig{});

  std::vector<Tensor> best_params;
  double best_loss = 0.0;
  int bad_epochs = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<int32_t> order = train_idx;
    Rng epoch_rng(derive_seed(cfg.seed, "rank-epoch-" + std::to_string(epoch)));
    epoch_rng.shuffle(order);

    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
      std::vector<int32_t> idx(order.begin() + static_cast<int64_t>(start),
                               order.begin() + static_cast<int64_t>(stop));
      std::vector<float> labels;
      labels.reserve(idx.size());
      for (int32_t i : idx) labels.push_back(data.samples[static_cast<size_t>(i)].label);

      optimizer.zero_grad();
      auto loss = bce_with_logits(ranker_logits(model, catalog, data, idx), labels);
      const float lv = loss->value.values()[0];
      if (!std::isfinite(lv)) {
        throw TrainError("ranker: non-finite loss at epoch " + std::to_string(epoch) +
                         ", batch " + std::to_string(start / cfg.batch) +
                         "; parameter norms: " + optimizer.norm_summary());
      }
      backward(loss);
      if (!optimizer.gradients_finite()) {
        throw TrainError("ranker: non-finite gradient at epoch " + std::to_string(epoch) +
                         ", batch " + std::to_string(start / cfg.batch) +
                         "; parameter norms: " + optimizer.norm_summary());
      }
      optimizer.step({cfg.lr, cfg.lr});
      loss_sum += static_cast<double>(lv) * static_cast<double>(idx.size());
    }
    out.train_loss.push_back(loss_sum / static_cast<double>(train_idx.size()));
    out.epochs_run = epoch + 1;

    if (val_idx.empty()) continue;
    const auto val_scores = predict_scores(model, catalog, val_data, cfg.batch);
    std::vector<int8_t> val_pm;
    val_pm.reserve(val_data.samples.size());
    for (const auto& s : val_data.samples) {
      val_pm.push_back(s.label > 0.5f ? int8_t{1} : int8_t{-1});
    }
    const double val_ll = metrics::logloss(val_scores, val_pm);
    out.val_logloss.push_back(val_ll);

    if (out.best_epoch < 0 || val_ll < best_loss) {
      best_loss = val_ll;
      out.best_epoch = epoch;
      bad_epochs = 0;
      best_params.clear();
      for (auto& [name, node] : model.named_params()) best_params.push_back(node->value);
    } else if (++bad_epochs > cfg.patience) {
      break;
    }
  }

  if (!best_params.empty()) {
    auto named = model.named_params();
    for (size_t i = 0; i < named.size(); ++i) named[i].second->value = best_params[i];
  }
  if (!val_data.samples.empty()) {
    out.val_report = evaluate_ranker(model, catalog, val_data, cfg.batch);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation grid

inline constexpr std::array<const char*, 4> kAblationVariants = {"full", "no-IL", "no-ICM",
                                                                 "no-IAM"};

struct VariantFeatures {
  std::string variant;  // one of kAblationVariants
  bool available = false;
  UserFeatureTable features;
};

struct AblationRow {
  std::string variant;
  std::string ranker;
  bool absent = false;  // variant features missing
  MetricReport report;
};

// Train every configured ranker on each ablation variant's user features
// and evaluate on the shared test split. Variants without features yield
// rows marked absent instead of failing the whole grid.
inline std::vector<AblationRow> ablation_suite(const RankDataset& train_base,
                                               const RankDataset& test_base,
                                               const datagen::Catalog& catalog,
                                               const std::vector<VariantFeatures>& variants,
                                               const std::vector<std::string>& rankers,
                                               const RankerConfig& base_cfg) {
  if (rankers.empty()) throw ConfigError("ablation: no rankers configured");
  std::vector<AblationRow> rows;
  for (const char* name : kAblationVariants) {
    const VariantFeatures* v = nullptr;
    for (const auto& cand : variants) {
      if (cand.variant == name && cand.available) v = &cand;
    }
    if (v == nullptr) {
      for (const auto& ranker : rankers) rows.push_back({name, ranker, true, {}});
      continue;
    }
    RankDataset train_ds = train_base;
    RankDataset test_ds = test_base;
    attach_features(train_ds, v->features);
    attach_features(test_ds, v->features);
    for (const auto& ranker : rankers) {
      RankerConfig cfg = base_cfg;
      cfg.variant = ranker;
      cfg.use_histogram = true;
      auto trained = train_ranker(train_ds, catalog, cfg);
      rows.push_back(
          {name, ranker, false, evaluate_ranker(trained.model, catalog, test_ds, cfg.batch)});
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV output

namespace detail {

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

// Columns: variant, ranker, auc, gauc, logloss, n_samples, n_users.
// Undefined metrics and missing variants print as "absent".
inline std::string metrics_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,ranker,auc,gauc,logloss,n_samples,n_users\n";
  for (const auto& row : rows) {
    out += row.variant + "," + row.ranker + ",";
    if (row.absent) {
      out += "absent,absent,absent,0,0\n";
      continue;
    }
    const auto& r = row.report;
    out += (r.has_auc ? detail::fmt6(r.auc) : std::string("absent")) + ",";
    out += (r.has_gauc ? detail::fmt6(r.gauc) : std::string("absent")) + ",";
    out += detail::fmt6(r.logloss) + "," + std::to_string(r.n_samples) + "," +
           std::to_string(r.n_users) + "\n";
  }
  return out;
}

inline void write_metrics_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("csv: cannot open '" + path + "' for writing");
  f << metrics_csv(rows);
  if (!f.good()) throw DataError("csv: write to '" + path + "' failed");
}

// One line per sample, dataset order: user_id, item_id, score, label.
inline void write_predictions_csv(const std::string& path, const RankDataset& data,
                                  const std::vector<double>& scores) {
  if (scores.size() != data.samples.size()) {
    throw DataError("csv: " + std::to_string(scores.size()) + " scores for " +
                    std::to_string(data.samples.size()) + " samples");
  }
  std::ofstream f(path);
  if (!f) throw DataError("csv: cannot open '" + path + "' for writing");
  f << "user_id,item_id,score,label\n";
  for (size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    f << s.user_id << "," << s.item_id << "," << detail::fmt6(scores[i]) << ","
      << (s.label > 0.5f ? 1 : 0) << "\n";
  }
  if (!f.good()) throw DataError("csv: write to '" + path + "' failed");
}

}  // namespace histrec::rank
