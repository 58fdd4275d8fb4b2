// SPDX-License-Identifier: Apache-2.0
//
// Compression-stage training: the full model bundle (adaptation tables,
// causal backbone, heads, quantizer), the optimization loop with gradient
// accumulation and per-group learning rates, held-out-user evaluation,
// checkpoint save/resume, surrogate backbone pretraining on a disjoint
// corpus, and the random-vs-transferred initialization experiment.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "histrec/adaptation.hpp"
#include "histrec/checkpoint.hpp"
#include "histrec/config.hpp"
#include "histrec/datagen.hpp"
#include "histrec/optimizer.hpp"
#include "histrec/quantizer.hpp"
#include "histrec/representation.hpp"
#include "histrec/rng.hpp"

namespace histrec::train {

struct LossConfig {
  double tau_holistic = 0.2;
  double tau_immediate = 0.07;
  double weight_holistic = 1.0;
  double weight_immediate = 1.0;
  double commit_weight = 0.25;

  static LossConfig from_config(const Config& c) {
    LossConfig l;
    l.tau_holistic = c.get_float("loss.tau_holistic");
    l.tau_immediate = c.get_float("loss.tau_immediate");
    l.weight_holistic = c.get_float("loss.weight_holistic");
    l.weight_immediate = c.get_float("loss.weight_immediate");
    l.commit_weight = c.get_float("quantizer.commit_weight");
    if (!(l.tau_holistic > 0.0) || !(l.tau_immediate > 0.0)) {
      throw ConfigError("loss: temperatures must be positive");
    }
    return l;
  }
};

struct TrainConfig {
  int64_t steps = 2000;
  int batch_users = 16;
  int grad_accum = 4;
  int max_len = 256;
  double lr_fresh = 7e-4;
  double lr_pretrained = 7e-6;
  int64_t warmup_steps = 50;
  int64_t eval_interval = 50;
  double eval_fraction = 0.1;
  std::string init = "random";  // random | transfer
  int64_t snapshot_step = 0;    // extra mid-run checkpoint; 0 = none
  uint64_t seed = 1;

  static TrainConfig from_config(const Config& c) {
    TrainConfig t;
    t.steps = c.get_int("train.steps");
    t.batch_users = static_cast<int>(c.get_int("train.batch_users"));
    t.grad_accum = static_cast<int>(c.get_int("train.grad_accum"));
    t.max_len = static_cast<int>(c.get_int("train.max_len"));
    t.lr_fresh = c.get_float("train.lr_fresh");
    t.lr_pretrained = c.get_float("train.lr_pretrained");
    t.warmup_steps = c.get_int("train.warmup_steps");
    t.eval_interval = c.get_int("train.eval_interval");
    t.eval_fraction = c.get_float("train.eval_fraction");
    t.init = c.get_str("train.init");
    t.snapshot_step = c.get_int("train.snapshot_step");
    t.seed = static_cast<uint64_t>(c.get_int("seed"));
    t.validate();
    return t;
  }

  void validate() const {
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
    if (warmup_steps < 0 || warmup_steps > steps) {
      throw ConfigError("train: warmup " + std::to_string(warmup_steps) +
                        " exceeds steps " + std::to_string(steps));
    }
    if (batch_users < 1 || grad_accum < 1 || max_len < 1) {
      throw ConfigError("train: batch_users, grad_accum, max_len must be >= 1");
    }
    if (!(lr_fresh > 0.0) || !(lr_pretrained > 0.0)) {
      throw ConfigError("train: learning rates must be positive");
    }
    if (eval_fraction < 0.0 || eval_fraction >= 1.0) {
      throw ConfigError("train: eval_fraction must lie in [0,1)");
    }
    if (eval_interval < 0 || snapshot_step < 0) {
      throw ConfigError("train: eval_interval and snapshot_step must be >= 0");
    }
    if (init != "random" && init != "transfer") {
      throw ConfigError("train: init must be 'random' or 'transfer', got '" + init + "'");
    }
  }
};

// ---------------------------------------------------------------------------
// Model bundle

struct CompressionModel {
  adapt::AdaptConfig acfg;
  repr::BackboneConfig bcfg;
  LossConfig lcfg;
  bool use_quantizer = true;

  adapt::AdaptParams adapt_p;
  repr::BackboneParams backbone_p;
  repr::HeadParams heads_p;
  NodePtr bias;  // next-event loss offset
  quant::QuantizerState qstate;

  static CompressionModel init(const Config& cfg, const datagen::Catalog& catalog, Rng& rng) {
    CompressionModel m;
    m.acfg = adapt::AdaptConfig::from_config(cfg, catalog);
    m.bcfg = repr::BackboneConfig::from_config(cfg, m.acfg.d_model());
    m.lcfg = LossConfig::from_config(cfg);
    m.use_quantizer = cfg.get_bool("model.use_quantizer");
    m.adapt_p = adapt::AdaptParams::init(m.acfg, rng);
    m.backbone_p = repr::BackboneParams::init(m.bcfg, rng);
    m.heads_p = repr::HeadParams::init(m.bcfg.d_model, m.acfg.d_item(), m.bcfg.d_z, rng);
    m.bias = make_param(Tensor::scalar(0.0f));
    m.qstate =
        quant::QuantizerState::create(quant::QuantizerConfig::from_config(cfg, m.bcfg.d_model));
    return m;
  }

  std::vector<std::pair<std::string, NodePtr>> named_params() {
    auto out = adapt_p.named_params();
    for (auto& kv : backbone_p.named_params()) out.push_back(std::move(kv));
    for (auto& kv : heads_p.named_params()) out.push_back(std::move(kv));
    out.emplace_back("bias", bias);
    return out;
  }
};

struct ForwardOut {
  NodePtr total;
  repr::HolisticResult holistic;
  repr::ImmediateResult immediate;
  NodePtr commit;                           // null without a quantizer
  Tensor b_values;                          // pre-quantizer states, for EMA
  std::vector<std::vector<int32_t>> codes;  // per-level assignments
};

// One loss-producing pass over a padded batch. `init_rng` lets the very
// first training batch seed the codebooks; evaluation passes none.
inline ForwardOut forward_losses(CompressionModel& m, const datagen::PaddedBatch& batch,
                                 Rng* init_rng = nullptr) {
  auto ad = adapt::adapt(batch, m.acfg, m.adapt_p);
  auto b_seq = repr::backbone_forward(ad.user_inputs, batch.lengths, m.bcfg, m.backbone_p);

  ForwardOut out;
  NodePtr rep = b_seq;
  if (m.use_quantizer) {
    if (!m.qstate.initialized) {
      if (init_rng == nullptr) {
        throw TrainError("model: quantizer used before any training batch initialized it");
      }
      quant::init_from_batch(m.qstate, b_seq->value, batch.lengths, *init_rng);
    }
    auto q = quant::quantize_train(b_seq, batch.lengths, m.qstate);
    rep = q.quantized;
    out.commit = q.commit;
    out.codes = std::move(q.codes);
    out.b_values = b_seq->value;
  }
  auto z = repr::user_head(rep, m.heads_p);
  auto p = repr::item_head(ad.item_inputs, m.heads_p);
  out.holistic = repr::holistic_loss(z, p, ad.labels, batch.lengths, m.lcfg.tau_holistic);
  out.immediate =
      repr::immediate_loss(z, p, ad.labels, batch.lengths, m.lcfg.tau_immediate, m.bias);
  out.total = repr::total_loss(out.holistic.loss, out.immediate.loss, out.commit,
                               m.lcfg.weight_holistic, m.lcfg.weight_immediate,
                               m.lcfg.commit_weight);
  return out;
}

// Copy matching backbone arrays from a pretrained checkpoint; everything
// else stays at its fresh initialization. Returns the copied names, which
// become the low-rate parameter group.
inline std::vector<std::string> apply_backbone_transfer(CompressionModel& m,
                                                        const ckpt::Checkpoint& pre) {
  std::vector<std::string> copied;
  for (auto& [name, node] : m.named_params()) {
    if (name.rfind("backbone.", 0) != 0) continue;
    const Tensor* src = pre.find(name);
    if (src == nullptr) continue;
    if (src->shape() != node->value.shape()) {
      throw DataError("transfer: shape mismatch for '" + name + "'");
    }
    node->value = *src;
    copied.push_back(name);
  }
  if (copied.empty()) {
    throw DataError("transfer: checkpoint contains no usable backbone parameters");
  }
  return copied;
}

// Overwrite a freshly initialized model with a checkpoint's arrays. The
// checkpoint must come from the identical configuration: parameter order,
// names, and shapes all have to line up.
inline void restore_model(CompressionModel& m, const ckpt::Checkpoint& c) {
  auto named = m.named_params();
  if (c.params.size() != named.size()) {
    throw DataError("restore: checkpoint holds " + std::to_string(c.params.size()) +
                    " parameters, model expects " + std::to_string(named.size()));
  }
  for (size_t i = 0; i < named.size(); ++i) {
    const auto& [name, tensor] = c.params[i];
    if (name != named[i].first || tensor.shape() != named[i].second->value.shape()) {
      throw DataError("restore: parameter '" + name + "' does not match model");
    }
    named[i].second->value = tensor;
  }
  if (m.use_quantizer) {
    if (c.quantizer.is_null()) throw DataError("restore: checkpoint lacks quantizer state");
    m.qstate = quant::state_from_json(c.quantizer);
  }
}

// Rebuild a trained model from its checkpoint under the identical config.
inline CompressionModel load_compression_model(const Config& cfg,
                                               const datagen::Catalog& catalog,
                                               const ckpt::Checkpoint& c) {
  if (c.config_fingerprint != ckpt::config_fingerprint(cfg)) {
    throw ConfigError("restore: checkpoint was written under a different config");
  }
  Rng rng(derive_seed(0, "restore-init"));  // placeholder values, overwritten below
  CompressionModel m = CompressionModel::init(cfg, catalog, rng);
  restore_model(m, c);
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalPoint {
  int64_t step = 0;
  double holistic = 0.0;
  double immediate = 0.0;
};
using EvalCurve = std::vector<EvalPoint>;

// Pair-weighted mean losses over held-out batches (forward only).
inline EvalPoint evaluate(CompressionModel& m, const std::vector<datagen::PaddedBatch>& batches,
                          int64_t step) {
  double h_sum = 0.0, i_sum = 0.0;
  int64_t h_n = 0, i_n = 0;
  for (const auto& b : batches) {
    auto fw = forward_losses(m, b);
    h_sum += static_cast<double>(fw.holistic.loss->value.values()[0]) *
             static_cast<double>(fw.holistic.n_pairs);
    h_n += fw.holistic.n_pairs;
    i_sum += static_cast<double>(fw.immediate.loss->value.values()[0]) *
             static_cast<double>(fw.immediate.n_terms);
    i_n += fw.immediate.n_terms;
  }
  return {step, h_n > 0 ? h_sum / static_cast<double>(h_n) : 0.0,
          i_n > 0 ? i_sum / static_cast<double>(i_n) : 0.0};
}

// ---------------------------------------------------------------------------
// Training loop

namespace detail {

// Deterministic batch sequence: a fresh permutation of batch indices per
// pass over the data, derived from (seed, pass index) so a resumed run
// replays the identical order.
class BatchOrder {
 public:
  BatchOrder(size_t n, uint64_t seed) : n_(n), seed_(seed) {}

  size_t at(int64_t flat) {
    const int64_t pass = flat / static_cast<int64_t>(n_);
    if (pass != pass_) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), size_t{0});
      Rng rng(derive_seed(seed_, "batch-order-" + std::to_string(pass)));
      rng.shuffle(perm_);
      pass_ = pass;
    }
    return perm_[static_cast<size_t>(flat % static_cast<int64_t>(n_))];
  }

 private:
  size_t n_;
  uint64_t seed_;
  std::vector<size_t> perm_;
  int64_t pass_ = -1;
};

struct EmaPayload {
  Tensor b_values;
  std::vector<int> lengths;
  std::vector<std::vector<int32_t>> codes;
};

inline ckpt::Checkpoint snapshot(CompressionModel& model, const opt::AdamW& optimizer,
                                 int64_t step, const std::string& fingerprint) {
  ckpt::Checkpoint c;
  c.step = step;
  c.opt_t = optimizer.update_count();
  c.config_fingerprint = fingerprint;
  for (auto& [name, node] : model.named_params()) c.params.emplace_back(name, node->value);
  const auto& tracked = optimizer.params();
  for (size_t i = 0; i < tracked.size(); ++i) {
    c.opt_m.emplace_back(tracked[i].name, optimizer.moment1(i));
    c.opt_v.emplace_back(tracked[i].name, optimizer.moment2(i));
  }
  c.quantizer = model.use_quantizer ? quant::state_to_json(model.qstate) : nlohmann::json();
  return c;
}

}  // namespace detail

struct TrainOutcome {
  CompressionModel model;
  EvalCurve curve;
  double first_loss = 0.0;  // accumulated loss of the first step taken
  double final_loss = 0.0;  // accumulated loss of the last step taken
  ckpt::Checkpoint checkpoint;
  std::optional<ckpt::Checkpoint> mid_checkpoint;  // at train.snapshot_step
};

// End-to-end compression training on the representation slice of `logs`.
// `pretrained` supplies backbone arrays when train.init = transfer;
// `resume` continues a previous run bit-identically.
inline TrainOutcome train_compression(const datagen::LogSet& logs, const Config& cfg,
                                      const ckpt::Checkpoint* pretrained = nullptr,
                                      const ckpt::Checkpoint* resume = nullptr) {
  const TrainConfig tc = TrainConfig::from_config(cfg);
  const std::string fingerprint = ckpt::config_fingerprint(cfg);

  const auto t1 = static_cast<int64_t>(
      std::llround(cfg.get_float("gen.t1_frac") * static_cast<double>(datagen::kHorizon)));
  const auto t2 = static_cast<int64_t>(
      std::llround(cfg.get_float("gen.t2_frac") * static_cast<double>(datagen::kHorizon)));
  const auto split = datagen::split_by_time(logs, t1, t2);
  if (split.rep_sequences.empty()) {
    throw TrainError("training: representation set is empty");
  }

  // Hold out a fixed fraction of representation users for evaluation.
  std::vector<size_t> order(split.rep_sequences.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng(derive_seed(tc.seed, "eval-split")).shuffle(order);
  size_t n_eval = 0;
  if (order.size() >= 2 && tc.eval_fraction > 0.0) {
    n_eval = std::max<size_t>(
        1, static_cast<size_t>(std::llround(tc.eval_fraction * static_cast<double>(order.size()))));
    n_eval = std::min(n_eval, order.size() - 1);
  }
  std::vector<size_t> eval_idx(order.begin(), order.begin() + static_cast<int64_t>(n_eval));
  std::vector<size_t> train_idx(order.begin() + static_cast<int64_t>(n_eval), order.end());
  std::sort(eval_idx.begin(), eval_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::vector<datagen::BehaviorSequence> train_seqs, eval_seqs;
  for (size_t i : train_idx) train_seqs.push_back(split.rep_sequences[i]);
  for (size_t i : eval_idx) eval_seqs.push_back(split.rep_sequences[i]);

  const auto train_batches =
      datagen::build_batches(train_seqs, logs.catalog, tc.batch_users, tc.max_len);
  const auto eval_batches =
      datagen::build_batches(eval_seqs, logs.catalog, tc.batch_users, tc.max_len);
  if (train_batches.empty()) throw TrainError("training: no training batches");

  Rng init_rng(derive_seed(tc.seed, "model-init"));
  TrainOutcome out{CompressionModel::init(cfg, logs.catalog, init_rng), {}, 0.0, 0.0, {}};
  CompressionModel& model = out.model;

  std::vector<std::string> transferred;
  if (tc.init == "transfer") {
    if (pretrained == nullptr) {
      throw ConfigError("training: init=transfer requires a pretrained checkpoint");
    }
    transferred = apply_backbone_transfer(model, *pretrained);
  }

  // Two rate groups partition the trainable parameters: transferred
  // arrays move slowly, everything else at the fresh rate.
  std::vector<opt::TrackedParam> tracked;
  for (auto& [name, node] : model.named_params()) {
    const bool slow = std::find(transferred.begin(), transferred.end(), name) != transferred.end();
    tracked.push_back({name, node, node->value.rank() >= 2,
                       slow ? opt::kPretrainedGroup : opt::kFreshGroup});
  }
  opt::AdamW optimizer(std::move(tracked), opt::AdamWConfig::from_config(cfg));

  int64_t start_step = 0;
  if (resume != nullptr) {
    if (resume->config_fingerprint != fingerprint) {
      throw ConfigError("training: resume checkpoint was written under a different config");
    }
    restore_model(model, *resume);
    optimizer.load_state(resume->opt_t, resume->opt_m, resume->opt_v);
    start_step = resume->step;
  }

  detail::BatchOrder batch_order(train_batches.size(), tc.seed);
  const float inv_accum = 1.0f / static_cast<float>(tc.grad_accum);

  for (int64_t step = start_step; step < tc.steps; ++step) {
    optimizer.zero_grad();
    Rng step_rng(derive_seed(tc.seed, "step-" + std::to_string(step)));
    std::vector<detail::EmaPayload> payloads;
    double step_loss = 0.0;

    for (int j = 0; j < tc.grad_accum; ++j) {
      const auto& batch =
          train_batches[batch_order.at(step * tc.grad_accum + j)];
      auto fw = forward_losses(model, batch, &step_rng);
      const float lv = fw.total->value.values()[0];
      if (!std::isfinite(lv)) {
        throw TrainError("training: non-finite loss at step " + std::to_string(step) +
                         "; parameter norms: " + optimizer.norm_summary());
      }
      step_loss += static_cast<double>(lv) / tc.grad_accum;
      backward(fw.total, inv_accum);
      if (model.use_quantizer) {
        payloads.push_back({std::move(fw.b_values), batch.lengths, std::move(fw.codes)});
      }
    }
    if (!optimizer.gradients_finite()) {
      throw TrainError("training: non-finite gradient at step " + std::to_string(step) +
                       "; parameter norms: " + optimizer.norm_summary());
    }

    optimizer.step({opt::lr_at(step, tc.steps, tc.warmup_steps, tc.lr_fresh),
                    opt::lr_at(step, tc.steps, tc.warmup_steps, tc.lr_pretrained)});
    for (const auto& pl : payloads) {
      quant::ema_update(model.qstate, pl.b_values, pl.lengths, pl.codes, step_rng);
    }

    if (step == 0) out.first_loss = step_loss;
    out.final_loss = step_loss;

    if (!eval_batches.empty() && tc.eval_interval > 0 &&
        ((step + 1) % tc.eval_interval == 0 || step + 1 == tc.steps)) {
      out.curve.push_back(evaluate(model, eval_batches, step + 1));
    }
    if (step + 1 == tc.snapshot_step) {
      out.mid_checkpoint = detail::snapshot(model, optimizer, step + 1, fingerprint);
    }
  }

  out.checkpoint = detail::snapshot(model, optimizer, tc.steps, fingerprint);
  out.checkpoint.extra["first_loss"] = out.first_loss;
  out.checkpoint.extra["final_loss"] = out.final_loss;
  return out;
}

// ---------------------------------------------------------------------------
// Surrogate pretraining: next-item classification on a disjoint corpus.
// Only the backbone arrays carry over; the classifier and the corpus's
// adaptation tables are discarded at transfer time.

struct PretrainOutcome {
  ckpt::Checkpoint checkpoint;  // backbone.* arrays only
  double accuracy = 0.0;        // top-1 next-item accuracy on the corpus
  double chance = 0.0;          // 1 / item count
};

inline PretrainOutcome pretrain_backbone(const datagen::LogSet& corpus, const Config& cfg) {
  const int64_t steps = cfg.get_int("pretrain.steps");
  const double lr = cfg.get_float("pretrain.lr");
  const int layers = static_cast<int>(cfg.get_int("pretrain.transfer_layers"));
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed"));
  const int batch_users = static_cast<int>(cfg.get_int("train.batch_users"));
  const int max_len = static_cast<int>(cfg.get_int("train.max_len"));
  const int64_t warmup = std::min<int64_t>(cfg.get_int("train.warmup_steps"), steps);
  if (steps < 1) throw ConfigError("pretrain: steps must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("pretrain: learning rate must be positive");

  Config pcfg = cfg;
  pcfg.set("model.layers", std::to_string(layers));

  Rng rng(derive_seed(seed, "pretrain-init"));
  const auto acfg = adapt::AdaptConfig::from_config(pcfg, corpus.catalog);
  const auto bcfg = repr::BackboneConfig::from_config(pcfg, acfg.d_model());
  auto adapt_p = adapt::AdaptParams::init(acfg, rng);
  auto backbone_p = repr::BackboneParams::init(bcfg, rng);
  const int vocab = corpus.catalog.num_items;
  auto cls_w = make_param(Tensor::randn(
      rng, {bcfg.d_model, vocab}, static_cast<float>(1.0 / std::sqrt(bcfg.d_model))));
  auto cls_b = make_param(Tensor::zeros({vocab}));

  std::vector<opt::TrackedParam> tracked;
  for (auto& [name, node] : adapt_p.named_params()) {
    tracked.push_back({name, node, node->value.rank() >= 2, opt::kFreshGroup});
  }
  for (auto& [name, node] : backbone_p.named_params()) {
    tracked.push_back({name, node, node->value.rank() >= 2, opt::kFreshGroup});
  }
  tracked.push_back({"cls.w", cls_w, true, opt::kFreshGroup});
  tracked.push_back({"cls.b", cls_b, false, opt::kFreshGroup});
  opt::AdamW optimizer(std::move(tracked), opt::AdamWConfig::from_config(cfg));

  const auto batches =
      datagen::build_batches(corpus.sequences, corpus.catalog, batch_users, max_len);
  if (batches.empty()) throw TrainError("pretrain: corpus produced no batches");

  // Targets: the next event's item id at every position with a successor.
  const auto targets_of = [](const datagen::PaddedBatch& b) {
    std::vector<int32_t> targets(static_cast<size_t>(b.B) * b.T, 0);
    std::vector<uint8_t> valid(targets.size(), 0);
    for (int bi = 0; bi < b.B; ++bi) {
      for (int t = 0; t + 1 < b.lengths[static_cast<size_t>(bi)]; ++t) {
        const size_t r = static_cast<size_t>(bi) * b.T + t;
        targets[r] = b.item_ids[r + 1];
        valid[r] = 1;
      }
    }
    return std::make_pair(std::move(targets), std::move(valid));
  };

  const auto logits_for = [&](const datagen::PaddedBatch& batch) {
    auto ad = adapt::adapt(batch, acfg, adapt_p);
    auto b_seq = repr::backbone_forward(ad.user_inputs, batch.lengths, bcfg, backbone_p);
    auto flat = reshape(b_seq, {batch.B * batch.T, bcfg.d_model});
    return add_bias(matmul(flat, cls_w), cls_b);
  };

  detail::BatchOrder order(batches.size(), derive_seed(seed, "pretrain-order"));
  for (int64_t step = 0; step < steps; ++step) {
    optimizer.zero_grad();
    const auto& batch = batches[order.at(step)];
    const auto [targets, valid] = targets_of(batch);
    auto loss = softmax_cross_entropy(logits_for(batch), targets, valid);
    if (!std::isfinite(loss->value.values()[0])) {
      throw TrainError("pretrain: non-finite loss at step " + std::to_string(step) +
                       "; parameter norms: " + optimizer.norm_summary());
    }
    backward(loss);
    const double rate = opt::lr_at(step, steps, warmup, lr);
    optimizer.step({rate, rate});
  }

  // Corpus top-1 accuracy vs the uniform-guess chance level.
  int64_t hits = 0, total = 0;
  for (const auto& batch : batches) {
    auto logits = logits_for(batch);
    const auto [targets, valid] = targets_of(batch);
    for (size_t r = 0; r < valid.size(); ++r) {
      if (!valid[r]) continue;
      const float* row = logits->value.data() + static_cast<int64_t>(r) * vocab;
      const int argmax =
          static_cast<int>(std::max_element(row, row + vocab) - row);
      hits += (argmax == targets[r]) ? 1 : 0;
      ++total;
    }
  }

  PretrainOutcome out;
  out.accuracy = total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  out.chance = 1.0 / static_cast<double>(vocab);
  out.checkpoint.step = steps;
  out.checkpoint.config_fingerprint = ckpt::config_fingerprint(pcfg);
  for (auto& [name, node] : backbone_p.named_params()) {
    out.checkpoint.params.emplace_back(name, node->value);
  }
  out.checkpoint.extra["accuracy"] = out.accuracy;
  out.checkpoint.extra["chance"] = out.chance;
  return out;
}

// ---------------------------------------------------------------------------
// Initialization experiment: random vs transferred backbones per depth,
// with identical data order inside each pair.

struct InitExperimentRow {
  int layers = 0;
  std::string init;
  double final_holistic = 0.0;
  double final_immediate = 0.0;
};

inline std::vector<InitExperimentRow> init_experiment(
    const datagen::LogSet& logs, const Config& cfg, const std::vector<int>& layer_list,
    const ckpt::Checkpoint& pretrained, std::vector<TrainOutcome>* outcomes = nullptr) {
  std::vector<InitExperimentRow> rows;
  for (int layers : layer_list) {
    for (const char* init : {"random", "transfer"}) {
      Config run_cfg = cfg;
      run_cfg.set("model.layers", std::to_string(layers));
      run_cfg.set("train.init", init);
      auto outcome = train_compression(logs, run_cfg, &pretrained);
      InitExperimentRow row;
      row.layers = layers;
      row.init = init;
      if (!outcome.curve.empty()) {
        row.final_holistic = outcome.curve.back().holistic;
        row.final_immediate = outcome.curve.back().immediate;
      }
      rows.push_back(row);
      if (outcomes != nullptr) outcomes->push_back(std::move(outcome));
    }
  }
  return rows;
}

}  // namespace histrec::train
