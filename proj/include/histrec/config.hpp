// SPDX-License-Identifier: Apache-2.0
//
// Flat key-value configuration with dotted section keys, e.g.
//   quantizer.K = 32,16,16
// Precedence is flag > config file > built-in default; commands start from
// the defaults, merge a file, then merge flag overrides.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "histrec/errors.hpp"

namespace histrec {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

class Config {
 public:
  Config() = default;

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  void set(const std::string& key, std::string value) { kv_[key] = std::move(value); }

  // Parses `key = value` lines; '#' starts a comment, blank lines ignored.
  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    load_stream(in, path);
  }

  void load_text(const std::string& text, const std::string& origin = "<inline>") {
    std::istringstream in(text);
    load_stream(in, origin);
  }

 private:
  void load_stream(std::istream& in, const std::string& path) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config: " + path + ":" + std::to_string(lineno) +
                          ": expected 'key = value', got '" + line + "'");
      }
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError("config: " + path + ":" + std::to_string(lineno) + ": empty key");
      }
      kv_[key] = value;
    }
  }

 public:
  const std::string& get_str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("config: missing key '" + key + "'");
    return it->second;
  }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  int64_t get_int(const std::string& key) const { return parse_int(key, get_str(key)); }

  double get_float(const std::string& key) const { return parse_float(key, get_str(key)); }

  bool get_bool(const std::string& key) const {
    const std::string& v = get_str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config: key '" + key + "' is not a boolean: '" + v + "'");
  }

  // Comma-separated integer list, e.g. "32,16,16".
  std::vector<int> get_int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(get_str(key));
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = detail::trim(part);
      if (part.empty()) continue;
      out.push_back(static_cast<int>(parse_int(key, part)));
    }
    if (out.empty()) throw ConfigError("config: key '" + key + "' holds an empty list");
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

  // Canonical text form (sorted keys) for manifests and reproducibility.
  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
    return os.str();
  }

 private:
  static int64_t parse_int(const std::string& key, const std::string& v) {
    try {
      size_t pos = 0;
      const int64_t x = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' is not an integer: '" + v + "'");
    }
  }

  static double parse_float(const std::string& key, const std::string& v) {
    try {
      size_t pos = 0;
      const double x = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' is not a number: '" + v + "'");
    }
  }

  std::map<std::string, std::string> kv_;
};

// Every tunable in one place. Commands copy this, then layer file + flags.
inline Config default_config() {
  Config c;
  // Synthetic log generation.
  c.set("gen.num_users", "2000");
  c.set("gen.num_items", "5000");
  c.set("gen.num_categories", "64");
  c.set("gen.num_clusters", "16");
  c.set("gen.modality_dim", "16");
  c.set("gen.modality_noise", "0.25");
  c.set("gen.concentration", "0.2");
  c.set("gen.drift_rate", "0.5");
  c.set("gen.drift_every", "25");
  c.set("gen.transient_weight", "0.5");
  c.set("gen.link_scale", "10.0");
  c.set("gen.link_bias", "-3.0");
  c.set("gen.mean_len", "200");
  c.set("gen.min_len", "8");
  c.set("gen.t1_frac", "0.7");
  c.set("gen.t2_frac", "0.85");
  // Interest adaptation (input embedding dims).
  c.set("adapt.item_dim", "24");
  c.set("adapt.category_dim", "12");
  c.set("adapt.modality_dim", "20");
  c.set("adapt.action_dim", "8");
  c.set("adapt.enabled", "true");
  // Backbone.
  c.set("model.layers", "4");
  c.set("model.heads", "4");
  c.set("model.ffn_dim", "256");
  c.set("model.d_z", "32");
  c.set("model.use_quantizer", "true");
  // Losses.
  c.set("loss.tau_holistic", "0.2");
  c.set("loss.tau_immediate", "0.07");
  c.set("loss.weight_holistic", "1.0");
  c.set("loss.weight_immediate", "1.0");
  // Residual quantizer.
  c.set("quantizer.K", "32,16,16");
  c.set("quantizer.ema_decay", "0.99");
  c.set("quantizer.commit_weight", "0.25");
  c.set("quantizer.dead_threshold", "0.05");
  // Compression training.
  c.set("train.steps", "2000");
  c.set("train.batch_users", "16");
  c.set("train.grad_accum", "4");
  c.set("train.max_len", "256");
  c.set("train.lr_fresh", "7e-4");
  c.set("train.lr_pretrained", "7e-6");
  c.set("train.warmup_steps", "50");
  c.set("train.weight_decay", "0.01");
  c.set("train.beta1", "0.9");
  c.set("train.beta2", "0.95");
  c.set("train.eval_interval", "50");
  c.set("train.eval_fraction", "0.1");
  c.set("train.init", "random");  // random | transfer
  c.set("train.snapshot_step", "0");  // extra mid-run checkpoint; 0 = none
  // Pretraining surrogate (next-item prediction on a disjoint corpus).
  c.set("pretrain.steps", "600");
  c.set("pretrain.num_users", "500");
  c.set("pretrain.lr", "7e-4");
  c.set("pretrain.transfer_layers", "4");
  // Initialization experiment grid (comma-separated layer counts).
  c.set("initexp.layers", "4");
  // Ranking / utilization stage.
  c.set("rank.variant", "mlp");  // mlp | din | simsoft
  c.set("rank.hidden1", "64");
  c.set("rank.hidden2", "32");
  c.set("rank.item_dim", "16");
  c.set("rank.category_dim", "8");
  c.set("rank.att_hidden", "32");
  c.set("rank.hist_proj_dim", "16");
  c.set("rank.top_k", "32");
  c.set("rank.short_len", "30");
  c.set("rank.long_len", "1000");
  c.set("rank.lr", "5e-4");
  c.set("rank.batch", "256");
  c.set("rank.max_epochs", "8");
  c.set("rank.patience", "2");
  c.set("rank.val_fraction", "0.1");
  c.set("rank.use_histogram", "false");
  // Global.
  c.set("seed", "1");
  return c;
}

}  // namespace histrec
