// SPDX-License-Identifier: Apache-2.0
//
// Synthetic log generation: determinism, planted-signal strength, time
// splits, batch assembly, and on-disk round-trips.

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "histrec/config.hpp"
#include "histrec/datagen.hpp"
#include "histrec/metrics.hpp"
#include "histrec/rng.hpp"

using histrec::ConfigError;
using histrec::DataError;
using histrec::Rng;
namespace dg = histrec::datagen;
namespace metrics = histrec::metrics;

namespace {

// Oracle AUC measured once on the default config (seed 1); the guard sits
// 0.02 below that measurement so regressions surface without flaking.
constexpr double kMeasuredOracleAuc = 0.8853;
constexpr double kOracleAucFloor = kMeasuredOracleAuc - 0.02;

dg::GenParams small_params(uint64_t seed) {
  dg::GenParams p;
  p.num_users = 40;
  p.num_items = 200;
  p.num_categories = 16;
  p.num_clusters = 8;
  p.modality_dim = 4;
  p.mean_len = 30;
  p.min_len = 4;
  p.seed = seed;
  return p;
}

bool identical(const dg::LogSet& a, const dg::LogSet& b) {
  if (a.sequences.size() != b.sequences.size()) return false;
  for (size_t i = 0; i < a.sequences.size(); ++i) {
    const auto& sa = a.sequences[i];
    const auto& sb = b.sequences[i];
    if (sa.user_id != sb.user_id || sa.events.size() != sb.events.size()) return false;
    for (size_t j = 0; j < sa.events.size(); ++j) {
      const auto& ea = sa.events[j];
      const auto& eb = sb.events[j];
      if (ea.item_id != eb.item_id || ea.category_id != eb.category_id ||
          ea.label != eb.label || ea.ts != eb.ts) {
        return false;
      }
    }
  }
  return a.catalog.item_category == b.catalog.item_category &&
         a.catalog.item_cluster == b.catalog.item_cluster &&
         std::memcmp(a.catalog.item_modality.data(), b.catalog.item_modality.data(),
                     a.catalog.item_modality.size() * sizeof(float)) == 0;
}

std::string fresh_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("histrec-test-" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("generation is bit-identical for a repeated seed and differs across seeds") {
  const auto a = dg::generate_logs(small_params(9));
  const auto b = dg::generate_logs(small_params(9));
  const auto c = dg::generate_logs(small_params(10));
  CHECK(identical(a, b));
  CHECK_FALSE(identical(a, c));
}

TEST_CASE("fixed-length generation produces exact event counts") {
  auto p = small_params(3);
  p.num_users = 10;
  p.mean_len = 50;
  p.min_len = 50;
  const auto logs = dg::generate_logs(p);
  REQUIRE(logs.sequences.size() == 10);
  for (const auto& s : logs.sequences) CHECK(s.events.size() == 50);
  CHECK(logs.total_events() == 500);
}

TEST_CASE("generated logs respect the event contract") {
  const auto logs = dg::generate_logs(small_params(21));
  REQUIRE(logs.user_mixture.size() == logs.sequences.size());
  for (const auto& seq : logs.sequences) {
    REQUIRE(seq.events.size() >= 4);
    int64_t prev_ts = 0;
    for (const auto& ev : seq.events) {
      CHECK((ev.label == 1 || ev.label == -1));
      CHECK(ev.ts > prev_ts);
      prev_ts = ev.ts;
      REQUIRE(ev.item_id >= 0);
      REQUIRE(ev.item_id < logs.catalog.num_items);
      CHECK(ev.category_id == logs.catalog.item_category[static_cast<size_t>(ev.item_id)]);
    }
  }
  // Round-robin assignment leaves no cluster empty.
  for (const auto& pool : logs.catalog.cluster_items) CHECK_FALSE(pool.empty());
}

TEST_CASE("generation rejects unusable parameter sets") {
  auto p = small_params(1);
  p.num_items = 4;
  p.num_clusters = 8;
  CHECK_THROWS_MATCHES(dg::generate_logs(p), ConfigError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("zero items")));
  p = small_params(1);
  p.drift_rate = 1.5;
  CHECK_THROWS_AS(dg::generate_logs(p), ConfigError);
  p = small_params(1);
  p.min_len = 0;
  CHECK_THROWS_AS(dg::generate_logs(p), ConfigError);
}

TEST_CASE("default config parses into generator parameters") {
  const auto p = dg::GenParams::from_config(histrec::default_config());
  CHECK(p.num_users == 2000);
  CHECK(p.num_clusters == 16);
  CHECK(p.mean_len == 200);
  CHECK_NOTHROW(p.validate());
}

TEST_CASE("true-mixture oracle separates labels; shuffling destroys it") {
  const auto p = dg::GenParams::from_config(histrec::default_config());
  const auto logs = dg::generate_logs(p);

  std::vector<double> scores;
  std::vector<int8_t> labels;
  for (size_t si = 0; si < logs.sequences.size(); ++si) {
    for (const auto& ev : logs.sequences[si].events) {
      scores.push_back(dg::oracle_score(logs, si, ev.item_id));
      labels.push_back(ev.label);
    }
  }
  double pos_rate = 0.0;
  for (int8_t y : labels) pos_rate += (y > 0);
  pos_rate /= static_cast<double>(labels.size());

  const double auc = metrics::auc(scores, labels);
  WARN("oracle AUC on default config = " << auc << ", positive rate = " << pos_rate
                                         << ", events = " << labels.size());
  CHECK(auc >= 0.75);
  CHECK(auc >= kOracleAucFloor);
  CHECK(pos_rate > 0.15);
  CHECK(pos_rate < 0.5);

  // Scores carry no information about permuted labels.
  Rng rng(histrec::derive_seed(7, "label-shuffle"));
  rng.shuffle(labels);
  const double shuffled = metrics::auc(scores, labels);
  CHECK_THAT(shuffled, Catch::Matchers::WithinAbs(0.5, 0.02));
}

TEST_CASE("time split follows threshold semantics exactly") {
  dg::LogSet logs;
  logs.catalog.num_items = 1;
  logs.catalog.num_categories = 1;
  logs.catalog.num_clusters = 1;
  logs.catalog.modality_dim = 1;
  logs.catalog.item_category = {0};
  logs.catalog.item_cluster = {0};
  logs.catalog.item_modality = {0.0f};
  logs.catalog.cluster_items = {{0}};
  dg::BehaviorSequence seq;
  seq.user_id = 0;
  for (int64_t t = 1; t <= 10; ++t) seq.events.push_back({0, 0, 1, t});
  logs.sequences.push_back(seq);

  const auto split = dg::split_by_time(logs, 4, 8);
  REQUIRE(split.rep_sequences.size() == 1);
  REQUIRE(split.rep_sequences[0].events.size() == 3);
  CHECK(split.rep_sequences[0].events.back().ts == 3);
  REQUIRE(split.train_events.size() == 4);
  CHECK(logs.sequences[0].events[static_cast<size_t>(split.train_events.front().event_index)].ts ==
        4);
  CHECK(logs.sequences[0].events[static_cast<size_t>(split.train_events.back().event_index)].ts ==
        7);
  REQUIRE(split.test_events.size() == 3);
  CHECK(logs.sequences[0].events[static_cast<size_t>(split.test_events.front().event_index)].ts ==
        8);
  CHECK(split.warnings.empty());

  // Threshold at the earliest timestamp: empty representation set is a
  // warning, not an error.
  const auto empty_rep = dg::split_by_time(logs, 1, 8);
  CHECK(empty_rep.rep_sequences.empty());
  REQUIRE_FALSE(empty_rep.warnings.empty());
  CHECK_THAT(empty_rep.warnings.front(), Catch::Matchers::ContainsSubstring("representation"));

  CHECK_THROWS_AS(dg::split_by_time(logs, 8, 4), ConfigError);
  CHECK_THROWS_AS(dg::split_by_time(logs, 5, 5), ConfigError);
}

TEST_CASE("split partitions are complete and histories recount exactly") {
  const auto logs = dg::generate_logs(small_params(33));
  const int64_t t1 = dg::kHorizon * 7 / 10;
  const int64_t t2 = dg::kHorizon * 85 / 100;
  const auto split = dg::split_by_time(logs, t1, t2);

  CHECK(split.rep_event_count +
            static_cast<int64_t>(split.train_events.size()) +
            static_cast<int64_t>(split.test_events.size()) ==
        logs.total_events());

  // Each sample's implicit history is every earlier same-user event;
  // recount it by brute-force timestamp scan.
  auto check_history = [&](const std::vector<dg::EventRef>& refs) {
    for (const auto& r : refs) {
      const auto& seq = logs.sequences[static_cast<size_t>(r.seq_index)];
      const int64_t ts = seq.events[static_cast<size_t>(r.event_index)].ts;
      int64_t earlier = 0;
      for (const auto& ev : seq.events) earlier += (ev.ts < ts);
      REQUIRE(earlier == r.event_index);
    }
  };
  check_history(split.train_events);
  check_history(split.test_events);

  // Partition membership matches the thresholds.
  for (const auto& r : split.train_events) {
    const int64_t ts =
        logs.sequences[static_cast<size_t>(r.seq_index)].events[static_cast<size_t>(r.event_index)].ts;
    CHECK(ts >= t1);
    CHECK(ts < t2);
  }
  for (const auto& r : split.test_events) {
    CHECK(logs.sequences[static_cast<size_t>(r.seq_index)]
              .events[static_cast<size_t>(r.event_index)]
              .ts >= t2);
  }
  for (const auto& seq : split.rep_sequences) {
    for (const auto& ev : seq.events) CHECK(ev.ts < t1);
  }
}

TEST_CASE("batches pad, truncate to the most recent events, and keep users whole") {
  auto p = small_params(5);
  p.num_users = 10;
  const auto logs = dg::generate_logs(p);

  // Hand-sized sequences: lengths 3 and 20 against max_len 8.
  std::vector<dg::BehaviorSequence> seqs(2);
  seqs[0].user_id = 100;
  for (int64_t t = 1; t <= 3; ++t)
    seqs[0].events.push_back({static_cast<int32_t>(t % logs.catalog.num_items),
                              0, 1, t});
  seqs[1].user_id = 101;
  for (int64_t t = 1; t <= 20; ++t)
    seqs[1].events.push_back({static_cast<int32_t>(t % logs.catalog.num_items),
                              0, static_cast<int8_t>(t % 2 == 0 ? 1 : -1), t});
  for (auto& s : seqs)
    for (auto& e : s.events)
      e.category_id = logs.catalog.item_category[static_cast<size_t>(e.item_id)];

  const auto batches = dg::build_batches(seqs, logs.catalog, 8, 8);
  REQUIRE(batches.size() == 1);
  const auto& b = batches[0];
  CHECK(b.B == 2);
  CHECK(b.T == 8);
  CHECK(b.lengths == std::vector<int>{3, 8});
  // User 100: three valid slots then five padded ones.
  for (int t = 0; t < 3; ++t) CHECK(b.item_ids[static_cast<size_t>(t)] >= 0);
  for (int t = 3; t < 8; ++t) {
    CHECK(b.item_ids[static_cast<size_t>(t)] == -1);
    CHECK(b.category_ids[static_cast<size_t>(t)] == -1);
    CHECK(b.labels[static_cast<size_t>(t)] == 0.0f);
    for (int d = 0; d < b.modality_dim; ++d) {
      CHECK(b.modality[static_cast<size_t>(t) * b.modality_dim + d] == 0.0f);
    }
  }
  // User 101: the 8 retained events are ts 13..20.
  for (int t = 0; t < 8; ++t) {
    const auto& ev = seqs[1].events[static_cast<size_t>(12 + t)];
    CHECK(b.item_ids[static_cast<size_t>(8 + t)] == ev.item_id);
    CHECK(b.labels[static_cast<size_t>(8 + t)] == static_cast<float>(ev.label));
  }
  CHECK(sizeof(b.modality[0]) * b.modality.size() ==
        sizeof(float) * static_cast<size_t>(b.B) * b.T * b.modality_dim);

  // Whole generated set: conservation and whole-user grouping.
  const auto all = dg::build_batches(logs.sequences, logs.catalog, 4, 16);
  REQUIRE(all.size() == 3);  // 10 users in groups of 4
  CHECK(all[0].B == 4);
  CHECK(all[2].B == 2);
  int64_t mask_sum = 0;
  std::vector<int32_t> seen_users;
  for (const auto& pb : all) {
    for (int i = 0; i < pb.B; ++i) {
      mask_sum += pb.lengths[static_cast<size_t>(i)];
      seen_users.push_back(pb.user_ids[static_cast<size_t>(i)]);
    }
  }
  int64_t expect = 0;
  for (const auto& s : logs.sequences)
    expect += std::min<int64_t>(static_cast<int64_t>(s.events.size()), 16);
  CHECK(mask_sum == expect);
  std::sort(seen_users.begin(), seen_users.end());
  CHECK(std::adjacent_find(seen_users.begin(), seen_users.end()) == seen_users.end());
  CHECK(seen_users.size() == logs.sequences.size());
}

TEST_CASE("logs round-trip through the on-disk format") {
  auto p = small_params(17);
  p.num_users = 12;
  p.mean_len = 10;
  p.min_len = 10;
  const auto logs = dg::generate_logs(p);
  const auto dir = fresh_dir("roundtrip");
  dg::write_logs(logs, dir);

  const auto loaded = dg::read_logs(dir);
  CHECK(identical(logs, loaded));
  CHECK(loaded.catalog.num_clusters == logs.catalog.num_clusters);
  CHECK(loaded.user_mixture.empty());  // ground truth never touches disk
}

TEST_CASE("reading rejects corrupted event files with line numbers") {
  auto p = small_params(19);
  p.num_users = 2;
  p.mean_len = 3;
  p.min_len = 3;
  const auto logs = dg::generate_logs(p);
  const auto dir = fresh_dir("corrupt");
  dg::write_logs(logs, dir);

  auto write_events = [&](const std::string& body) {
    std::ofstream out(dir + "/events.jsonl");
    out << body;
  };
  const std::string good =
      R"({"user_id":0,"item_id":1,"category_id":)" +
      std::to_string(logs.catalog.item_category[1]) +
      R"(,"label":1,"ts":5,"modality":[0,0,0,0]})";

  write_events("not json at all\n");
  CHECK_THROWS_MATCHES(dg::read_logs(dir), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("events.jsonl:1")));

  write_events(good + "\n" +
               R"({"user_id":0,"item_id":1,"category_id":0,"label":2,"ts":9,"modality":[0,0,0,0]})" +
               "\n");
  CHECK_THROWS_MATCHES(dg::read_logs(dir), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("events.jsonl:2")));

  // Item outside the catalog.
  write_events(
      R"({"user_id":0,"item_id":999,"category_id":0,"label":1,"ts":5,"modality":[0,0,0,0]})" "\n");
  CHECK_THROWS_MATCHES(dg::read_logs(dir), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("not in catalog")));

  // Non-increasing timestamps within a user.
  write_events(good + "\n" + good + "\n");
  CHECK_THROWS_MATCHES(dg::read_logs(dir), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("strictly increasing")));

  // Wrong modality width.
  write_events(
      R"({"user_id":0,"item_id":1,"category_id":0,"label":1,"ts":5,"modality":[0,0]})" "\n");
  CHECK_THROWS_MATCHES(dg::read_logs(dir), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("modality width")));
}
