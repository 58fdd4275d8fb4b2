// SPDX-License-Identifier: Apache-2.0
//
// Key-value config parsing: syntax, typed accessors, defaults, round-trip.

#include <catch2/catch_amalgamated.hpp>

#include "histrec/config.hpp"

using histrec::Config;
using histrec::ConfigError;
using histrec::IoError;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

TEST_CASE("config parses comments, blanks, and trimmed pairs") {
  Config c;
  c.load_text(
      "# a comment\n"
      "\n"
      "  train.steps =  250  \n"
      "rank.variant = din\n"
      "flag = true\n"
      "quantizer.K = 32, 16,16\n");
  CHECK(c.get_int("train.steps") == 250);
  CHECK(c.get_str("rank.variant") == "din");
  CHECK(c.get_bool("flag"));
  CHECK(c.get_int_list("quantizer.K") == std::vector<int>{32, 16, 16});
}

TEST_CASE("config reports the origin and line of malformed input") {
  Config c;
  CHECK_THROWS_MATCHES(c.load_text("a = 1\nno equals sign here\n", "bad.cfg"), ConfigError,
                       MessageMatches(ContainsSubstring("bad.cfg:2")));
  CHECK_THROWS_MATCHES(c.load_text("= value\n", "bad.cfg"), ConfigError,
                       MessageMatches(ContainsSubstring("bad.cfg:1")));
  CHECK_THROWS_AS(c.load_file("/nonexistent/path.cfg"), IoError);
}

TEST_CASE("config typed accessors reject junk and missing keys") {
  Config c;
  c.load_text("n = 12x\nf = hello\nb = maybe\nempty_list = \n");
  CHECK_THROWS_MATCHES(c.get_int("n"), ConfigError, MessageMatches(ContainsSubstring("n")));
  CHECK_THROWS_AS(c.get_float("f"), ConfigError);
  CHECK_THROWS_AS(c.get_bool("b"), ConfigError);
  CHECK_THROWS_MATCHES(c.get_str("absent"), ConfigError,
                       MessageMatches(ContainsSubstring("absent")));
  CHECK(c.get_str("absent", "dflt") == "dflt");
}

TEST_CASE("config later assignments win") {
  Config c;
  c.load_text("k = 1\nk = 2\n");
  CHECK(c.get_int("k") == 2);
  c.set("k", "3");
  CHECK(c.get_int("k") == 3);
}

TEST_CASE("config text round-trips") {
  Config a = histrec::default_config();
  a.set("rank.variant", "simsoft");
  Config b;
  b.load_text(a.to_text());
  CHECK(a.to_text() == b.to_text());
  CHECK(b.get_str("rank.variant") == "simsoft");
}

TEST_CASE("default config supplies every subsystem's keys") {
  Config c = histrec::default_config();
  CHECK(c.get_int("gen.num_users") > 0);
  CHECK(c.get_int("model.layers") > 0);
  CHECK(c.get_float("loss.tau_holistic") > 0.0);
  CHECK(c.get_int_list("quantizer.K").size() == 3);
  CHECK(c.get_int("train.steps") > 0);
  CHECK(c.get_int("seed") >= 0);
  // Adaptation widths must sum to the model width.
  const auto d = c.get_int("adapt.item_dim") + c.get_int("adapt.category_dim") +
                 c.get_int("adapt.modality_dim") + c.get_int("adapt.action_dim");
  CHECK(d == 64);
}
