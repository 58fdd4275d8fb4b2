// SPDX-License-Identifier: Apache-2.0
//
// Training stack: learning-rate schedule against hand-computed points,
// the optimizer against a scalar closed-form trace, checkpoint round
// trips, gradient-accumulation equivalence, end-to-end loss descent,
// bit-identical resume, backbone transfer, and surrogate pretraining.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "histrec/checkpoint.hpp"
#include "histrec/optimizer.hpp"
#include "histrec/trainer.hpp"

using histrec::Config;
using histrec::ConfigError;
using histrec::DataError;
using histrec::NodePtr;
using histrec::Rng;
using histrec::Tensor;
using histrec::TrainError;
using histrec::derive_seed;
namespace ckpt = histrec::ckpt;
namespace dg = histrec::datagen;
namespace opt = histrec::opt;
namespace train = histrec::train;

namespace {

// Small end-to-end configuration: tiny catalog, one shallow block, short
// sequences. Keeps a full training step in the low milliseconds.
Config tiny_config(uint64_t seed) {
  Config c = histrec::default_config();
  c.set("gen.num_users", "24");
  c.set("gen.num_items", "40");
  c.set("gen.num_categories", "8");
  c.set("gen.num_clusters", "4");
  c.set("gen.modality_dim", "8");
  c.set("gen.mean_len", "24");
  c.set("gen.min_len", "8");
  c.set("adapt.item_dim", "8");
  c.set("adapt.category_dim", "4");
  c.set("adapt.modality_dim", "8");
  c.set("adapt.action_dim", "4");
  c.set("model.layers", "1");
  c.set("model.heads", "2");
  c.set("model.ffn_dim", "32");
  c.set("model.d_z", "8");
  c.set("quantizer.K", "4,4");
  c.set("train.steps", "8");
  c.set("train.batch_users", "6");
  c.set("train.grad_accum", "2");
  c.set("train.max_len", "32");
  c.set("train.warmup_steps", "2");
  c.set("train.eval_interval", "4");
  c.set("train.eval_fraction", "0.2");
  c.set("pretrain.steps", "60");
  c.set("pretrain.transfer_layers", "1");
  c.set("seed", std::to_string(seed));
  return c;
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.numel())) == 0;
}

std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("histrec-test-" + tag);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

// ---------------------------------------------------------------------------
// Learning-rate schedule

TEST_CASE("schedule warms up linearly from zero and lands on the floor") {
  const double peak = 7e-4;
  CHECK(opt::lr_at(0, 200, 50, peak) == 0.0);
  CHECK_THAT(opt::lr_at(25, 200, 50, peak), Catch::Matchers::WithinRel(0.5 * peak, 1e-12));
  // First post-warmup step starts the cosine at the peak.
  CHECK_THAT(opt::lr_at(50, 200, 50, peak), Catch::Matchers::WithinRel(peak, 1e-12));
  // The final step sits exactly on the floor of peak/100.
  CHECK_THAT(opt::lr_at(199, 200, 50, peak), Catch::Matchers::WithinRel(peak / 100.0, 1e-12));
  // Halfway through the cosine leg: floor + (peak-floor)/2.
  const double mid = opt::lr_at(50 + (199 - 50) / 2 + 1, 200, 50, peak);
  CHECK(mid < peak);
  CHECK(mid > peak / 100.0);

  // Monotone non-increasing after warmup.
  double prev = opt::lr_at(50, 200, 50, peak);
  for (int64_t s = 51; s < 200; ++s) {
    const double cur = opt::lr_at(s, 200, 50, peak);
    CHECK(cur <= prev + 1e-18);
    prev = cur;
  }

  // Degenerate horizons: no cosine leg leaves only the floor.
  CHECK(opt::lr_at(3, 4, 3, peak) == peak / 100.0);
  CHECK_THROWS_AS(opt::lr_at(-1, 10, 2, peak), ConfigError);
}

// ---------------------------------------------------------------------------
// Optimizer

TEST_CASE("optimizer matches a hand-run scalar moment recursion") {
  auto w = histrec::make_param(Tensor({2}, {1.0f, -2.0f}));
  opt::AdamWConfig cfg;  // betas 0.9 / 0.95, eps 1e-8, decay 0.01
  opt::AdamW adam({{"w", w, /*decay=*/false, opt::kFreshGroup}}, cfg);

  const double g[2] = {0.1, -0.2};
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
  const double lr = 0.01;
  for (int step = 1; step <= 3; ++step) {
    w->grad = Tensor({2}, {static_cast<float>(g[0]), static_cast<float>(g[1])});
    adam.step({lr, lr});
    for (int j = 0; j < 2; ++j) {
      m[j] = 0.9 * m[j] + 0.1 * g[j];
      v[j] = 0.95 * v[j] + 0.05 * g[j] * g[j];
      const double mh = m[j] / (1.0 - std::pow(0.9, step));
      const double vh = v[j] / (1.0 - std::pow(0.95, step));
      x[j] -= lr * mh / (std::sqrt(vh) + 1e-8);
      CHECK_THAT(static_cast<double>(w->value[j]), Catch::Matchers::WithinAbs(x[j], 1e-6));
    }
  }
  CHECK(adam.update_count() == 3);
}

TEST_CASE("weight decay applies only to parameters flagged as matrices") {
  auto mat = histrec::make_param(Tensor({1, 1}, {2.0f}));
  auto vec = histrec::make_param(Tensor({1}, {2.0f}));
  opt::AdamWConfig cfg;
  opt::AdamW adam({{"mat", mat, true, opt::kFreshGroup}, {"vec", vec, false, opt::kFreshGroup}},
                  cfg);
  mat->grad = Tensor({1, 1}, {1.0f});
  vec->grad = Tensor({1}, {1.0f});
  adam.step({0.1, 0.1});
  // Identical gradients; the matrix additionally shrinks by lr*wd*w.
  const double base = 2.0 - 0.1 * (1.0 / (1.0 + 1e-8));
  CHECK_THAT(static_cast<double>(vec->value[0]), Catch::Matchers::WithinAbs(base, 1e-6));
  CHECK_THAT(static_cast<double>(mat->value[0]),
             Catch::Matchers::WithinAbs(base - 0.1 * 0.01 * 2.0, 1e-6));
}

TEST_CASE("optimizer rejects malformed parameter sets and skips absent gradients") {
  auto a = histrec::make_param(Tensor({2}, {1.0f, 1.0f}));
  auto b = histrec::make_param(Tensor({2}, {1.0f, 1.0f}));
  opt::AdamWConfig cfg;
  CHECK_THROWS_AS(opt::AdamW({{"a", a, false, 0}, {"a", b, false, 0}}, cfg), ConfigError);
  CHECK_THROWS_AS(opt::AdamW({{"a", nullptr, false, 0}}, cfg), ConfigError);
  CHECK_THROWS_AS(opt::AdamW({{"a", a, false, 7}}, cfg), ConfigError);
  auto frozen = histrec::make_leaf(Tensor({1}, {1.0f}));
  CHECK_THROWS_AS(opt::AdamW({{"f", frozen, false, 0}}, cfg), ConfigError);

  // No gradient materialized: the parameter must not move.
  opt::AdamW adam({{"a", a, false, 0}, {"b", b, false, 0}}, cfg);
  adam.zero_grad();
  a->grad = Tensor({2}, {1.0f, 1.0f});
  adam.step({0.1, 0.1});
  CHECK(b->value[0] == 1.0f);
  CHECK(a->value[0] != 1.0f);

  // Rate groups are honored: group 1 at rate zero freezes its members.
  auto c1 = histrec::make_param(Tensor({1}, {1.0f}));
  auto c2 = histrec::make_param(Tensor({1}, {1.0f}));
  opt::AdamW groups({{"c1", c1, false, opt::kFreshGroup}, {"c2", c2, false, opt::kPretrainedGroup}},
                    cfg);
  c1->grad = Tensor({1}, {1.0f});
  c2->grad = Tensor({1}, {1.0f});
  groups.step({0.1, 0.0});
  CHECK(c1->value[0] != 1.0f);
  CHECK(c2->value[0] == 1.0f);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST_CASE("checkpoint directory round-trips every field bit-exactly") {
  Rng rng(7);
  ckpt::Checkpoint c;
  c.step = 123;
  c.opt_t = 456;
  c.config_fingerprint = "00000000deadbeef";
  c.params.emplace_back("w1", Tensor::randn(rng, {3, 4}));
  c.params.emplace_back("w2", Tensor::randn(rng, {5}));
  c.opt_m.emplace_back("w1", Tensor::randn(rng, {3, 4}));
  c.opt_m.emplace_back("w2", Tensor::randn(rng, {5}));
  c.opt_v.emplace_back("w1", Tensor::randn(rng, {3, 4}));
  c.opt_v.emplace_back("w2", Tensor::randn(rng, {5}));
  c.quantizer = {{"probe", 1}};
  c.extra["note"] = 2.5;

  const auto dir = temp_dir("ckpt-roundtrip");
  ckpt::save_checkpoint(c, dir);
  const auto r = ckpt::load_checkpoint(dir);

  CHECK(r.step == c.step);
  CHECK(r.opt_t == c.opt_t);
  CHECK(r.config_fingerprint == c.config_fingerprint);
  REQUIRE(r.params.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(r.params[i].first == c.params[i].first);
    CHECK(same_values(r.params[i].second, c.params[i].second));
    CHECK(same_values(r.opt_m[i].second, c.opt_m[i].second));
    CHECK(same_values(r.opt_v[i].second, c.opt_v[i].second));
  }
  CHECK(r.quantizer == c.quantizer);
  CHECK(r.extra.at("note").get<double>() == 2.5);

  // A truncated blob is detected by name.
  std::filesystem::resize_file(dir / "params.bin", 8);
  CHECK_THROWS_AS(ckpt::load_checkpoint(dir), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config fingerprints track config content") {
  Config a = tiny_config(3);
  Config b = tiny_config(3);
  CHECK(ckpt::config_fingerprint(a) == ckpt::config_fingerprint(b));
  b.set("train.steps", "9");
  CHECK(ckpt::config_fingerprint(a) != ckpt::config_fingerprint(b));
  CHECK(ckpt::config_fingerprint(a).size() == 16);
}

// ---------------------------------------------------------------------------
// Gradient accumulation

TEST_CASE("accumulated micro-batch gradients match the joint mean graph") {
  const int k = 4;
  Rng rng(21);
  const Tensor w0 = Tensor::randn(rng, {6, 3});
  std::vector<Tensor> xs;
  for (int j = 0; j < k; ++j) xs.push_back(Tensor::randn(rng, {5, 6}));

  // Accumulation path: k separate graphs, each backward seeded with 1/k.
  auto w_acc = histrec::make_param(w0);
  double acc_loss = 0.0;
  for (int j = 0; j < k; ++j) {
    auto y = histrec::matmul(histrec::make_leaf(xs[static_cast<size_t>(j)]), w_acc);
    auto loss = histrec::sum_all(histrec::mul(y, y));
    acc_loss += static_cast<double>(loss->value[0]) / k;
    histrec::backward(loss, 1.0f / k);
  }

  // Joint path: one graph holding the mean of the k losses.
  auto w_joint = histrec::make_param(w0);
  NodePtr total;
  for (int j = 0; j < k; ++j) {
    auto y = histrec::matmul(histrec::make_leaf(xs[static_cast<size_t>(j)]), w_joint);
    auto loss = histrec::sum_all(histrec::mul(y, y));
    total = total ? histrec::add(total, loss) : loss;
  }
  total = histrec::scale(total, 1.0f / k);
  histrec::backward(total);

  CHECK_THAT(acc_loss,
             Catch::Matchers::WithinRel(static_cast<double>(total->value[0]), 1e-6));
  REQUIRE(w_acc->grad.numel() == w_joint->grad.numel());
  for (int64_t i = 0; i < w_acc->grad.numel(); ++i) {
    CHECK_THAT(static_cast<double>(w_acc->grad[i]),
               Catch::Matchers::WithinRel(static_cast<double>(w_joint->grad[i]), 1e-5));
  }
}

// ---------------------------------------------------------------------------
// End-to-end training

TEST_CASE("a short run reduces the training loss and reports an eval curve") {
  const Config cfg = tiny_config(5);
  const auto logs = dg::generate_logs(dg::GenParams::from_config(cfg));
  auto out = train::train_compression(logs, cfg);

  CHECK(out.final_loss < out.first_loss);
  REQUIRE_FALSE(out.curve.empty());
  CHECK(out.curve.back().step == 8);
  CHECK(out.curve.front().step == 4);
  for (const auto& p : out.curve) {
    CHECK(std::isfinite(p.holistic));
    CHECK(std::isfinite(p.immediate));
  }
  CHECK(out.checkpoint.step == 8);
  CHECK(out.checkpoint.extra.at("first_loss").get<double>() == out.first_loss);
  CHECK(out.checkpoint.extra.at("final_loss").get<double>() == out.final_loss);
  CHECK_FALSE(out.checkpoint.quantizer.is_null());
}

TEST_CASE("zero steps returns the untouched initialization") {
  Config cfg = tiny_config(9);
  cfg.set("train.steps", "0");
  cfg.set("train.warmup_steps", "0");
  const auto logs = dg::generate_logs(dg::GenParams::from_config(cfg));
  auto out = train::train_compression(logs, cfg);

  Rng rng(derive_seed(9, "model-init"));
  auto fresh = train::CompressionModel::init(cfg, logs.catalog, rng);
  auto fresh_named = fresh.named_params();
  REQUIRE(out.checkpoint.params.size() == fresh_named.size());
  for (size_t i = 0; i < fresh_named.size(); ++i) {
    CHECK(out.checkpoint.params[i].first == fresh_named[i].first);
    CHECK(same_values(out.checkpoint.params[i].second, fresh_named[i].second->value));
  }
  CHECK(out.curve.empty());
  CHECK(out.checkpoint.opt_t == 0);
}

TEST_CASE("identical configs train to bit-identical parameters") {
  const Config cfg = tiny_config(11);
  const auto logs = dg::generate_logs(dg::GenParams::from_config(cfg));
  auto a = train::train_compression(logs, cfg);
  auto b = train::train_compression(logs, cfg);
  REQUIRE(a.checkpoint.params.size() == b.checkpoint.params.size());
  for (size_t i = 0; i < a.checkpoint.params.size(); ++i) {
    CHECK(same_values(a.checkpoint.params[i].second, b.checkpoint.params[i].second));
  }
  CHECK(a.final_loss == b.final_loss);
  REQUIRE(a.curve.size() == b.curve.size());
  for (size_t i = 0; i < a.curve.size(); ++i) {
    CHECK(a.curve[i].holistic == b.curve[i].holistic);
    CHECK(a.curve[i].immediate == b.curve[i].immediate);
  }
}

TEST_CASE("resuming from a mid-run snapshot replays the run bit-identically") {
  Config cfg = tiny_config(13);
  cfg.set("train.snapshot_step", "4");
  const auto logs = dg::generate_logs(dg::GenParams::from_config(cfg));

  auto full = train::train_compression(logs, cfg);
  REQUIRE(full.mid_checkpoint.has_value());
  CHECK(full.mid_checkpoint->step == 4);

  auto resumed = train::train_compression(logs, cfg, nullptr, &*full.mid_checkpoint);

  // The resumed curve is exactly the tail of the uninterrupted curve.
  std::vector<train::EvalPoint> tail;
  for (const auto& p : full.curve) {
    if (p.step > 4) tail.push_back(p);
  }
  REQUIRE(resumed.curve.size() == tail.size());
  for (size_t i = 0; i < tail.size(); ++i) {
    CHECK(resumed.curve[i].step == tail[i].step);
    CHECK(resumed.curve[i].holistic == tail[i].holistic);
    CHECK(resumed.curve[i].immediate == tail[i].immediate);
  }

  REQUIRE(resumed.checkpoint.params.size() == full.checkpoint.params.size());
  for (size_t i = 0; i < full.checkpoint.params.size(); ++i) {
    CHECK(same_values(resumed.checkpoint.params[i].second, full.checkpoint.params[i].second));
    CHECK(same_values(resumed.checkpoint.opt_m[i].second, full.checkpoint.opt_m[i].second));
    CHECK(same_values(resumed.checkpoint.opt_v[i].second, full.checkpoint.opt_v[i].second));
  }
  CHECK(resumed.checkpoint.quantizer == full.checkpoint.quantizer);
  CHECK(resumed.final_loss == full.final_loss);

  // A checkpoint written under a different config is refused.
  Config other = cfg;
  other.set("model.d_z", "4");
  CHECK_THROWS_AS(train::train_compression(logs, other, nullptr, &*full.mid_checkpoint),
                  ConfigError);
}

TEST_CASE("non-finite inputs abort with the failing step in the message") {
  const Config cfg = tiny_config(15);
  auto logs = dg::generate_logs(dg::GenParams::from_config(cfg));
  logs.catalog.item_modality[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train::train_compression(logs, cfg);
    FAIL("expected TrainError");
  } catch (const TrainError& e) {
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("step 0"));
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("norms"));
  }
}

TEST_CASE("training configuration is validated") {
  Config cfg = tiny_config(17);
  const auto logs = dg::generate_logs(dg::GenParams::from_config(cfg));

  Config bad = cfg;
  bad.set("train.init", "sideways");
  CHECK_THROWS_AS(train::train_compression(logs, bad), ConfigError);

  bad = cfg;
  bad.set("train.warmup_steps", "99");
  CHECK_THROWS_AS(train::train_compression(logs, bad), ConfigError);

  bad = cfg;
  bad.set("train.eval_fraction", "1.0");
  CHECK_THROWS_AS(train::train_compression(logs, bad), ConfigError);

  // Transfer initialization demands a checkpoint.
  bad = cfg;
  bad.set("train.init", "transfer");
  CHECK_THROWS_AS(train::train_compression(logs, bad), ConfigError);
}

// ---------------------------------------------------------------------------
// Pretraining and transfer

TEST_CASE("surrogate pretraining beats chance and exports only the backbone") {
  Config cfg = tiny_config(19);
  const auto corpus = dg::generate_logs(dg::GenParams::from_config(cfg));
  const auto pre = train::pretrain_backbone(corpus, cfg);

  CHECK(pre.chance == 1.0 / 40.0);
  CHECK(pre.accuracy > pre.chance);
  CHECK(pre.accuracy <= 1.0);
  REQUIRE_FALSE(pre.checkpoint.params.empty());
  for (const auto& [name, t] : pre.checkpoint.params) {
    CHECK(name.rfind("backbone.", 0) == 0);
  }
  CHECK(pre.checkpoint.extra.at("accuracy").get<double>() == pre.accuracy);
}

TEST_CASE("transfer seeds backbone arrays and leaves the rest fresh") {
  Config cfg = tiny_config(23);
  const auto logs = dg::generate_logs(dg::GenParams::from_config(cfg));
  const auto pre = train::pretrain_backbone(logs, cfg);

  // Zero steps isolates initialization: transferred arrays must equal the
  // pretrained ones, everything else must match a fresh random init.
  Config zero = cfg;
  zero.set("train.steps", "0");
  zero.set("train.warmup_steps", "0");
  zero.set("train.init", "transfer");
  auto out = train::train_compression(logs, zero, &pre.checkpoint);

  Rng rng(derive_seed(23, "model-init"));
  auto fresh = train::CompressionModel::init(zero, logs.catalog, rng);
  auto fresh_named = fresh.named_params();
  size_t transferred = 0;
  for (size_t i = 0; i < out.checkpoint.params.size(); ++i) {
    const auto& [name, tensor] = out.checkpoint.params[i];
    const Tensor* from_pre = pre.checkpoint.find(name);
    if (from_pre != nullptr) {
      CHECK(same_values(tensor, *from_pre));
      ++transferred;
    } else {
      CHECK(same_values(tensor, fresh_named[i].second->value));
    }
  }
  CHECK(transferred == pre.checkpoint.params.size());

  // A checkpoint with no backbone overlap is rejected.
  ckpt::Checkpoint empty;
  empty.params.emplace_back("cls.w", Tensor::zeros({2, 2}));
  train::CompressionModel model = std::move(out.model);
  CHECK_THROWS_AS(train::apply_backbone_transfer(model, empty), DataError);
}

TEST_CASE("the initialization experiment produces one row per grid cell") {
  Config cfg = tiny_config(29);
  cfg.set("train.steps", "4");
  cfg.set("train.eval_interval", "2");
  const auto logs = dg::generate_logs(dg::GenParams::from_config(cfg));
  const auto pre = train::pretrain_backbone(logs, cfg);

  const auto rows = train::init_experiment(logs, cfg, {1, 2}, pre.checkpoint);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].layers == 1);
  CHECK(rows[0].init == "random");
  CHECK(rows[1].layers == 1);
  CHECK(rows[1].init == "transfer");
  CHECK(rows[2].layers == 2);
  CHECK(rows[3].layers == 2);
  for (const auto& r : rows) {
    CHECK(std::isfinite(r.final_holistic));
    CHECK(std::isfinite(r.final_immediate));
  }
}
