// SPDX-License-Identifier: Apache-2.0
//
// Synthetic behavior-log generator with a planted long-term interest
// signal, plus time-threshold splitting and padded batch assembly.
//
// Each user draws a persistent interest mixture over clusters; a transient
// mixture drifts on top of it. Events sample a cluster from the blend and
// an item from that cluster, but the action label depends only on the
// user's *persistent* affinity for the cluster — so short recent windows
// carry a weak signal while the full history identifies the user's taste.
#pragma once

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "histrec/config.hpp"
#include "histrec/rng.hpp"

namespace histrec::datagen {

// Timestamps are integers in [1, kHorizon]; split thresholds default to
// fractions of this range.
constexpr int64_t kHorizon = 1000000;

struct BehaviorEvent {
  int32_t item_id = 0;
  int32_t category_id = 0;
  int8_t label = 1;  // +1 or -1
  int64_t ts = 0;
};

struct BehaviorSequence {
  int32_t user_id = 0;
  std::vector<BehaviorEvent> events;  // strictly increasing ts
};

struct Catalog {
  int num_items = 0;
  int num_categories = 0;
  int num_clusters = 0;
  int modality_dim = 0;
  std::vector<int32_t> item_category;            // [num_items]
  std::vector<int32_t> item_cluster;             // [num_items]
  std::vector<float> item_modality;              // [num_items * modality_dim]
  std::vector<std::vector<int32_t>> cluster_items;

  const float* modality(int32_t item) const {
    return item_modality.data() + static_cast<int64_t>(item) * modality_dim;
  }
};

struct GenParams {
  int num_users = 0;
  int num_items = 0;
  int num_categories = 0;
  int num_clusters = 0;
  int modality_dim = 0;
  double modality_noise = 0.25;
  double concentration = 0.2;
  double drift_rate = 0.5;
  int drift_every = 25;
  double transient_weight = 0.5;
  double link_scale = 10.0;
  double link_bias = -3.0;
  int mean_len = 200;
  int min_len = 8;
  double t1_frac = 0.7;
  double t2_frac = 0.85;
  uint64_t seed = 1;

  static GenParams from_config(const Config& c) {
    GenParams p;
    p.num_users = static_cast<int>(c.get_int("gen.num_users"));
    p.num_items = static_cast<int>(c.get_int("gen.num_items"));
    p.num_categories = static_cast<int>(c.get_int("gen.num_categories"));
    p.num_clusters = static_cast<int>(c.get_int("gen.num_clusters"));
    p.modality_dim = static_cast<int>(c.get_int("gen.modality_dim"));
    p.modality_noise = c.get_float("gen.modality_noise");
    p.concentration = c.get_float("gen.concentration");
    p.drift_rate = c.get_float("gen.drift_rate");
    p.drift_every = static_cast<int>(c.get_int("gen.drift_every"));
    p.transient_weight = c.get_float("gen.transient_weight");
    p.link_scale = c.get_float("gen.link_scale");
    p.link_bias = c.get_float("gen.link_bias");
    p.mean_len = static_cast<int>(c.get_int("gen.mean_len"));
    p.min_len = static_cast<int>(c.get_int("gen.min_len"));
    p.t1_frac = c.get_float("gen.t1_frac");
    p.t2_frac = c.get_float("gen.t2_frac");
    p.seed = static_cast<uint64_t>(c.get_int("seed"));
    return p;
  }

  void validate() const {
    if (num_users < 1 || num_items < 1 || num_categories < 1 || num_clusters < 1 ||
        modality_dim < 1 || mean_len < 1 || min_len < 1) {
      throw ConfigError("gen: all counts must be >= 1");
    }
    if (drift_rate < 0.0 || drift_rate > 1.0) {
      throw ConfigError("gen: drift_rate must lie in [0,1], got " + std::to_string(drift_rate));
    }
    if (num_items < num_clusters) {
      throw ConfigError("gen: " + std::to_string(num_items) + " items over " +
                        std::to_string(num_clusters) +
                        " clusters leaves at least one cluster with zero items");
    }
    if (drift_every < 1) throw ConfigError("gen: drift_every must be >= 1");
  }
};

struct LogSet {
  std::vector<BehaviorSequence> sequences;  // sorted by user_id
  Catalog catalog;
  GenParams params;
  // Ground-truth persistent mixtures, one per user. Filled by
  // generate_logs; empty after loading from disk (regenerate to recover).
  std::vector<std::vector<double>> user_mixture;

  int64_t total_events() const {
    int64_t n = 0;
    for (const auto& s : sequences) n += static_cast<int64_t>(s.events.size());
    return n;
  }
};

namespace detail {

// Items are assigned to clusters round-robin; categories nest inside
// clusters so that category is informative about the cluster.
inline Catalog build_catalog(const GenParams& p) {
  Catalog cat;
  cat.num_items = p.num_items;
  cat.num_categories = p.num_categories;
  cat.num_clusters = p.num_clusters;
  cat.modality_dim = p.modality_dim;
  cat.item_category.resize(static_cast<size_t>(p.num_items));
  cat.item_cluster.resize(static_cast<size_t>(p.num_items));
  cat.item_modality.resize(static_cast<size_t>(p.num_items) * p.modality_dim);
  cat.cluster_items.resize(static_cast<size_t>(p.num_clusters));

  Rng rng(derive_seed(p.seed, "catalog"));
  std::vector<float> centroids(static_cast<size_t>(p.num_clusters) * p.modality_dim);
  for (float& v : centroids) v = static_cast<float>(rng.normal());

  const int cats_per_cluster = std::max(1, p.num_categories / p.num_clusters);
  for (int i = 0; i < p.num_items; ++i) {
    const int cl = i % p.num_clusters;
    cat.item_cluster[static_cast<size_t>(i)] = cl;
    cat.cluster_items[static_cast<size_t>(cl)].push_back(i);
    const int within = (i / p.num_clusters) % cats_per_cluster;
    cat.item_category[static_cast<size_t>(i)] =
        static_cast<int32_t>((cl * cats_per_cluster + within) % p.num_categories);
    float* m = cat.item_modality.data() + static_cast<int64_t>(i) * p.modality_dim;
    const float* c = centroids.data() + static_cast<int64_t>(cl) * p.modality_dim;
    for (int d = 0; d < p.modality_dim; ++d) {
      m[d] = c[d] + static_cast<float>(rng.normal() * p.modality_noise);
    }
  }
  return cat;
}

inline int sample_categorical(Rng& rng, const std::vector<double>& w) {
  double u = rng.uniform();
  for (size_t i = 0; i < w.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(w.size()) - 1;
}

}  // namespace detail

// Probability that the user acts positively, as a function of the
// persistent affinity for the item's cluster. The matching oracle score
// (the log-odds) is what a Bayes-optimal ranker would use.
inline double positive_probability(const GenParams& p, double affinity) {
  const double logit = p.link_scale * affinity + p.link_bias;
  return 1.0 / (1.0 + std::exp(-logit));
}

inline double oracle_score(const LogSet& logs, size_t seq_index, int32_t item_id) {
  const auto& pi = logs.user_mixture.at(seq_index);
  const int cl = logs.catalog.item_cluster.at(static_cast<size_t>(item_id));
  return logs.params.link_scale * pi[static_cast<size_t>(cl)] + logs.params.link_bias;
}

// Deterministic in (params.seed); users are generated from independent
// derived streams, so any user subset is reproducible in isolation.
inline LogSet generate_logs(const GenParams& params) {
  params.validate();
  LogSet logs;
  logs.params = params;
  logs.catalog = detail::build_catalog(params);
  logs.sequences.resize(static_cast<size_t>(params.num_users));
  logs.user_mixture.resize(static_cast<size_t>(params.num_users));

  for (int u = 0; u < params.num_users; ++u) {
    Rng rng(derive_seed(params.seed, "user-" + std::to_string(u)));
    auto& seq = logs.sequences[static_cast<size_t>(u)];
    seq.user_id = u;

    // Persistent taste and the transient state drifting on top of it.
    std::vector<double> pi = rng.dirichlet(params.num_clusters, params.concentration);
    std::vector<double> theta = rng.dirichlet(params.num_clusters, params.concentration);
    logs.user_mixture[static_cast<size_t>(u)] = pi;

    // Length: minimum plus an exponential tail around the configured mean;
    // mean_len == min_len gives every user exactly that length.
    int len = params.min_len;
    if (params.mean_len > params.min_len) {
      const double tail_mean = static_cast<double>(params.mean_len - params.min_len);
      len += static_cast<int>(std::floor(-tail_mean * std::log(1.0 - rng.uniform())));
      len = std::min(len, std::max(params.mean_len * 8, 64));
    }

    // Event times: sorted uniform draws over the horizon, strictly increasing.
    std::vector<int64_t> ts(static_cast<size_t>(len));
    for (auto& t : ts) t = static_cast<int64_t>(rng.uniform_int(kHorizon)) + 1;
    std::sort(ts.begin(), ts.end());
    for (size_t i = 1; i < ts.size(); ++i) ts[i] = std::max(ts[i], ts[i - 1] + 1);

    std::vector<double> blend(static_cast<size_t>(params.num_clusters));
    seq.events.resize(static_cast<size_t>(len));
    for (int j = 0; j < len; ++j) {
      if (j > 0 && j % params.drift_every == 0) {
        // Convex step toward a fresh transient draw.
        auto fresh = rng.dirichlet(params.num_clusters, params.concentration);
        for (int c = 0; c < params.num_clusters; ++c) {
          theta[static_cast<size_t>(c)] = (1.0 - params.drift_rate) * theta[static_cast<size_t>(c)] +
                                          params.drift_rate * fresh[static_cast<size_t>(c)];
        }
      }
      for (int c = 0; c < params.num_clusters; ++c) {
        blend[static_cast<size_t>(c)] = params.transient_weight * theta[static_cast<size_t>(c)] +
                                        (1.0 - params.transient_weight) * pi[static_cast<size_t>(c)];
      }
      const int cl = detail::sample_categorical(rng, blend);
      const auto& pool = logs.catalog.cluster_items[static_cast<size_t>(cl)];
      const int32_t item = pool[rng.uniform_int(pool.size())];

      auto& ev = seq.events[static_cast<size_t>(j)];
      ev.item_id = item;
      ev.category_id = logs.catalog.item_category[static_cast<size_t>(item)];
      ev.ts = ts[static_cast<size_t>(j)];
      const double p_pos = positive_probability(params, pi[static_cast<size_t>(cl)]);
      ev.label = rng.uniform() < p_pos ? int8_t{1} : int8_t{-1};
    }
  }
  return logs;
}

// ---------------------------------------------------------------------------
// Time-threshold split

// Reference to one event of a LogSet: (sequence index, event index).
struct EventRef {
  int32_t seq_index = 0;
  int32_t event_index = 0;
};

struct SplitLogs {
  int64_t t1 = 0;
  int64_t t2 = 0;
  // Prefixes with ts < t1, for representation training; users whose prefix
  // is empty are dropped here (their events can still be train/test).
  std::vector<BehaviorSequence> rep_sequences;
  // Training/test samples; each carries its full same-user earlier history
  // implicitly (all events before event_index in the base sequence).
  std::vector<EventRef> train_events;
  std::vector<EventRef> test_events;
  int64_t rep_event_count = 0;
  std::vector<std::string> warnings;
};

inline SplitLogs split_by_time(const LogSet& logs, int64_t t1, int64_t t2) {
  if (t1 >= t2) {
    throw ConfigError("split: t1 (" + std::to_string(t1) + ") must be < t2 (" +
                      std::to_string(t2) + ")");
  }
  SplitLogs out;
  out.t1 = t1;
  out.t2 = t2;
  for (size_t si = 0; si < logs.sequences.size(); ++si) {
    const auto& seq = logs.sequences[si];
    BehaviorSequence prefix;
    prefix.user_id = seq.user_id;
    for (size_t ei = 0; ei < seq.events.size(); ++ei) {
      const auto& ev = seq.events[ei];
      if (ev.ts < t1) {
        prefix.events.push_back(ev);
      } else if (ev.ts < t2) {
        out.train_events.push_back({static_cast<int32_t>(si), static_cast<int32_t>(ei)});
      } else {
        out.test_events.push_back({static_cast<int32_t>(si), static_cast<int32_t>(ei)});
      }
    }
    if (!prefix.events.empty()) {
      out.rep_event_count += static_cast<int64_t>(prefix.events.size());
      out.rep_sequences.push_back(std::move(prefix));
    }
  }
  if (out.rep_sequences.empty()) out.warnings.push_back("representation set is empty");
  if (out.train_events.empty()) out.warnings.push_back("training set is empty");
  if (out.test_events.empty()) out.warnings.push_back("test set is empty");
  return out;
}

// ---------------------------------------------------------------------------
// Padded batches for the representation stage

// Index-level padded batch; adaptation turns ids into embeddings. Padding
// slots hold item_id/category_id = -1, label 0, zero modality.
struct PaddedBatch {
  int B = 0;
  int T = 0;
  std::vector<int32_t> user_ids;      // [B]
  std::vector<int> lengths;           // [B], values in [0, T]
  std::vector<int32_t> item_ids;      // [B*T]
  std::vector<int32_t> category_ids;  // [B*T]
  std::vector<float> labels;          // [B*T], +1/-1, 0 at padding
  std::vector<float> modality;        // [B*T*modality_dim]
  int modality_dim = 0;
};

// Groups whole users, keeps each user's most recent max_len events, pads
// on the right to exactly max_len positions.
inline std::vector<PaddedBatch> build_batches(const std::vector<BehaviorSequence>& sequences,
                                              const Catalog& catalog, int batch_users,
                                              int max_len) {
  if (max_len < 1) throw ConfigError("batches: max_len must be >= 1");
  if (batch_users < 1) throw ConfigError("batches: batch size must be >= 1");
  std::vector<PaddedBatch> out;
  for (size_t start = 0; start < sequences.size(); start += static_cast<size_t>(batch_users)) {
    const int B = static_cast<int>(
        std::min(static_cast<size_t>(batch_users), sequences.size() - start));
    PaddedBatch batch;
    batch.B = B;
    batch.T = max_len;
    batch.modality_dim = catalog.modality_dim;
    batch.user_ids.resize(static_cast<size_t>(B));
    batch.lengths.resize(static_cast<size_t>(B));
    batch.item_ids.assign(static_cast<size_t>(B) * max_len, -1);
    batch.category_ids.assign(static_cast<size_t>(B) * max_len, -1);
    batch.labels.assign(static_cast<size_t>(B) * max_len, 0.0f);
    batch.modality.assign(static_cast<size_t>(B) * max_len * catalog.modality_dim, 0.0f);
    for (int b = 0; b < B; ++b) {
      const auto& seq = sequences[start + static_cast<size_t>(b)];
      const int T_u = static_cast<int>(seq.events.size());
      const int len = std::min(T_u, max_len);
      const int offset = T_u - len;  // keep the most recent events
      batch.user_ids[static_cast<size_t>(b)] = seq.user_id;
      batch.lengths[static_cast<size_t>(b)] = len;
      for (int t = 0; t < len; ++t) {
        const auto& ev = seq.events[static_cast<size_t>(offset + t)];
        const size_t pos = static_cast<size_t>(b) * max_len + t;
        batch.item_ids[pos] = ev.item_id;
        batch.category_ids[pos] = ev.category_id;
        batch.labels[pos] = static_cast<float>(ev.label);
        const float* m = catalog.modality(ev.item_id);
        std::copy(m, m + catalog.modality_dim,
                  batch.modality.data() + pos * catalog.modality_dim);
      }
    }
    out.push_back(std::move(batch));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: JSONL events + JSON catalog + JSON manifest

inline void write_logs(const LogSet& logs, const std::string& dir) {
  {
    std::ofstream out(dir + "/events.jsonl");
    if (!out) throw IoError("datagen: cannot write " + dir + "/events.jsonl");
    for (const auto& seq : logs.sequences) {
      for (const auto& ev : seq.events) {
        nlohmann::json j;
        j["user_id"] = seq.user_id;
        j["item_id"] = ev.item_id;
        j["category_id"] = ev.category_id;
        j["label"] = static_cast<int>(ev.label);
        j["ts"] = ev.ts;
        const float* m = logs.catalog.modality(ev.item_id);
        j["modality"] = std::vector<float>(m, m + logs.catalog.modality_dim);
        out << j.dump() << "\n";
      }
    }
  }
  {
    nlohmann::json j;
    j["num_items"] = logs.catalog.num_items;
    j["num_categories"] = logs.catalog.num_categories;
    j["num_clusters"] = logs.catalog.num_clusters;
    j["modality_dim"] = logs.catalog.modality_dim;
    j["item_category"] = logs.catalog.item_category;
    j["item_cluster"] = logs.catalog.item_cluster;
    j["item_modality"] = logs.catalog.item_modality;
    std::ofstream out(dir + "/catalog.json");
    if (!out) throw IoError("datagen: cannot write " + dir + "/catalog.json");
    out << j.dump(2) << "\n";
  }
}

inline Catalog read_catalog(const std::string& dir) {
  std::ifstream in(dir + "/catalog.json");
  if (!in) throw IoError("datagen: cannot open " + dir + "/catalog.json");
  nlohmann::json j;
  in >> j;
  Catalog cat;
  cat.num_items = j.at("num_items").get<int>();
  cat.num_categories = j.at("num_categories").get<int>();
  cat.num_clusters = j.at("num_clusters").get<int>();
  cat.modality_dim = j.at("modality_dim").get<int>();
  cat.item_category = j.at("item_category").get<std::vector<int32_t>>();
  cat.item_cluster = j.at("item_cluster").get<std::vector<int32_t>>();
  cat.item_modality = j.at("item_modality").get<std::vector<float>>();
  if (static_cast<int>(cat.item_category.size()) != cat.num_items ||
      static_cast<int>(cat.item_cluster.size()) != cat.num_items ||
      static_cast<int64_t>(cat.item_modality.size()) !=
          static_cast<int64_t>(cat.num_items) * cat.modality_dim) {
    throw DataError("datagen: catalog arrays do not match num_items");
  }
  cat.cluster_items.resize(static_cast<size_t>(cat.num_clusters));
  for (int i = 0; i < cat.num_items; ++i) {
    const int32_t cl = cat.item_cluster[static_cast<size_t>(i)];
    if (cl < 0 || cl >= cat.num_clusters) {
      throw DataError("datagen: item " + std::to_string(i) + " has cluster " +
                      std::to_string(cl) + " outside [0," + std::to_string(cat.num_clusters) +
                      ")");
    }
    cat.cluster_items[static_cast<size_t>(cl)].push_back(i);
  }
  return cat;
}

// Reads events.jsonl + catalog.json. Ground-truth mixtures are not stored
// on disk; params are restored by the caller from the dataset manifest.
inline LogSet read_logs(const std::string& dir) {
  LogSet logs;
  logs.catalog = read_catalog(dir);
  std::ifstream in(dir + "/events.jsonl");
  if (!in) throw IoError("datagen: cannot open " + dir + "/events.jsonl");
  std::string line;
  int64_t lineno = 0;
  std::vector<BehaviorSequence>& seqs = logs.sequences;
  // user_id -> position in seqs
  std::vector<int32_t> index;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("events.jsonl:" + std::to_string(lineno) + ": " + e.what());
    }
    const int32_t user = j.at("user_id").get<int32_t>();
    BehaviorEvent ev;
    ev.item_id = j.at("item_id").get<int32_t>();
    ev.category_id = j.at("category_id").get<int32_t>();
    const int label = j.at("label").get<int>();
    ev.ts = j.at("ts").get<int64_t>();
    if (label != 1 && label != -1) {
      throw DataError("events.jsonl:" + std::to_string(lineno) + ": label must be +1 or -1, got " +
                      std::to_string(label));
    }
    ev.label = static_cast<int8_t>(label);
    if (user < 0) {
      throw DataError("events.jsonl:" + std::to_string(lineno) + ": negative user_id");
    }
    if (ev.item_id < 0 || ev.item_id >= logs.catalog.num_items) {
      throw DataError("events.jsonl:" + std::to_string(lineno) + ": item_id " +
                      std::to_string(ev.item_id) + " not in catalog");
    }
    if (j.at("modality").size() != static_cast<size_t>(logs.catalog.modality_dim)) {
      throw DataError("events.jsonl:" + std::to_string(lineno) + ": modality width " +
                      std::to_string(j.at("modality").size()) + " != catalog width " +
                      std::to_string(logs.catalog.modality_dim));
    }
    if (static_cast<size_t>(user) >= index.size()) index.resize(static_cast<size_t>(user) + 1, -1);
    if (index[static_cast<size_t>(user)] < 0) {
      index[static_cast<size_t>(user)] = static_cast<int32_t>(seqs.size());
      seqs.emplace_back();
      seqs.back().user_id = user;
    }
    auto& seq = seqs[static_cast<size_t>(index[static_cast<size_t>(user)])];
    if (!seq.events.empty() && ev.ts <= seq.events.back().ts) {
      throw DataError("events.jsonl:" + std::to_string(lineno) + ": timestamps for user " +
                      std::to_string(user) + " are not strictly increasing");
    }
    seq.events.push_back(ev);
  }
  std::sort(seqs.begin(), seqs.end(),
            [](const BehaviorSequence& a, const BehaviorSequence& b) {
              return a.user_id < b.user_id;
            });
  return logs;
}

}  // namespace histrec::datagen
