#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "prefalign/curation.hpp"
#include "prefalign/error.hpp"

using namespace prefalign;
using namespace prefalign::curation;

namespace {

CurationGroup group(std::string prompt, std::vector<double> scores) {
  CurationGroup g{std::move(prompt), {}};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    g.members.push_back({g.prompt + "#" + std::to_string(i), scores[i]});
  }
  return g;
}

// exp(v*) / sum exp(v) without max subtraction, in long double.
long double brute_probability(const std::vector<double>& v, std::size_t k) {
  long double z = 0;
  for (double x : v) z += std::exp(static_cast<long double>(x));
  return std::exp(static_cast<long double>(v[k])) / z;
}

}  // namespace

TEST_CASE("group_by_prompt") {
  const std::vector<ScoredItem> items{{"a", "1", 1.0}, {"b", "2", 2.0}, {"a", "3", 3.0}};
  const auto r = group_by_prompt(items);
  REQUIRE(r.groups.size() == 2);
  CHECK(r.groups[0].prompt == "a");
  CHECK(r.groups[0].members.size() == 2);
  CHECK(r.groups[0].members[1].image_id == "3");
  CHECK(r.groups[1].members.size() == 1);
  CHECK(r.duplicates_dropped == 0);

  const auto d = group_by_prompt({{"a", "1", 1.0}, {"a", "1", 9.0}, {"A", "1", 2.0}});
  CHECK(d.duplicates_dropped == 1);
  REQUIRE(d.groups.size() == 2);
  CHECK(d.groups[0].members.front().hps == 1.0);

  CHECK_THROWS_AS(group_by_prompt({{"a", "1", std::nan("")}}), Error);
}

TEST_CASE("group_by_prompt: sizes are conserved on a large fuzz") {
  Rng rng(1);
  std::vector<ScoredItem> items;
  std::set<std::pair<std::string, std::string>> distinct;
  for (int i = 0; i < 10000; ++i) {
    ScoredItem it{"prompt " + std::to_string(rng.below(700)), "img" + std::to_string(rng.below(40)),
                  rng.normal()};
    distinct.insert({it.prompt, it.image_id});
    items.push_back(it);
  }
  const auto r = group_by_prompt(items);
  std::size_t total = 0;
  for (const auto& g : r.groups) total += g.members.size();
  CHECK(total == distinct.size());
  CHECK(total + r.duplicates_dropped == items.size());
}

TEST_CASE("softmax_select: worked values") {
  const auto eq = softmax_select(group("p", {5, 5, 5, 5}), 2.0, Direction::Preferred);
  CHECK(eq.threshold == 0.5);
  CHECK(eq.probability == doctest::Approx(0.25).epsilon(1e-15));
  CHECK_FALSE(eq.accepted);
  CHECK(eq.tie);

  const auto top = softmax_select(group("p", {20, 10, 10, 10}), 2.0, Direction::Preferred);
  CHECK(top.candidate == 0);
  CHECK(top.probability == doctest::Approx(1.0 / (1.0 + 3.0 * std::exp(-10.0))).epsilon(1e-14));
  CHECK(std::abs(top.probability - 0.999864) < 1e-6);
  CHECK(top.accepted);

  const auto low = softmax_select(group("p", {20, 10, 10, 10}), 2.0, Direction::NonPreferred);
  CHECK(low.candidate == 1);
  CHECK(low.tie);
  CHECK_FALSE(low.accepted);

  const auto bottom = softmax_select(group("p", {30, 31, 10}), 2.0, Direction::NonPreferred);
  CHECK(bottom.candidate == 2);
  CHECK(bottom.accepted);
}

TEST_CASE("softmax_select: extreme scores do not overflow") {
  const auto r = softmax_select(group("p", {1e6, -1e6, 0}), 2.0, Direction::Preferred);
  CHECK(r.probability == 1.0);
  CHECK(r.accepted);
  const auto s = softmax_select(group("p", {1e6, -1e6, 0}), 2.0, Direction::NonPreferred);
  CHECK(s.candidate == 1);
  CHECK(s.accepted);
}

TEST_CASE("softmax_select: brute-force oracle, shift invariance, monotonicity") {
  Rng rng(2);
  for (int i = 0; i < 4000; ++i) {
    const std::size_t n = 1 + rng.below(8);
    const double spread = 0.05 + rng.uniform() * 4;
    const double base = rng.normal() * 30;
    std::vector<double> v(n);
    for (auto& x : v) x = base + spread * rng.normal();
    const double alpha = 0.5 + rng.uniform() * 3;
    const auto g = group("p", v);

    for (const auto dir : {Direction::Preferred, Direction::NonPreferred}) {
      const auto s = softmax_select(g, alpha, dir);
      std::vector<double> signed_v = v;
      if (dir == Direction::NonPreferred) {
        for (auto& x : signed_v) x = -x;
      }
      const auto best = static_cast<std::size_t>(
          std::max_element(signed_v.begin(), signed_v.end()) - signed_v.begin());
      CHECK(s.candidate == best);
      const long double p = brute_probability(signed_v, best);
      CHECK(std::abs(static_cast<double>(p) - s.probability) <= 1e-12);
      if (std::abs(p - alpha / n) > 1e-12) CHECK(s.accepted == (p > alpha / n));

      auto shifted = g;
      const double c = rng.normal() * 50;
      for (auto& m : shifted.members) m.hps += c;
      CHECK(softmax_select(shifted, alpha, dir).accepted == s.accepted);
      CHECK(softmax_select(shifted, alpha, dir).candidate == s.candidate);
    }

    const auto before = softmax_select(g, alpha, Direction::Preferred);
    auto raised = g;
    raised.members[before.candidate].hps += rng.uniform() * 5;
    if (before.accepted) CHECK(softmax_select(raised, alpha, Direction::Preferred).accepted);
  }
}

TEST_CASE("softmax_select: all-equal groups never pass for alpha >= 1") {
  for (std::size_t n = 1; n <= 10; ++n) {
    for (const double alpha : {1.0, 1.5, 2.0, 7.0}) {
      const auto g = group("p", std::vector<double>(n, 3.25));
      CHECK_FALSE(softmax_select(g, alpha, Direction::Preferred).accepted);
      CHECK_FALSE(softmax_select(g, alpha, Direction::NonPreferred).accepted);
    }
  }
}

TEST_CASE("tag_caption") {
  CHECK(tag_caption("a red fox", true, "Weird image.") == "a red fox");
  CHECK(tag_caption("a red fox", false, "Weird image.") == "Weird image. a red fox");
  CHECK(tag_caption("", false, "Weird image.") == "Weird image. ");
}

TEST_CASE("CurationConfig checks") {
  CHECK_NOTHROW(CurationConfig{}.check());
  CHECK_THROWS_AS((CurationConfig{0.0, "x"}.check()), Error);
  CHECK_THROWS_AS((CurationConfig{-1.0, "x"}.check()), Error);
  CHECK_THROWS_AS((CurationConfig{2.0, ""}.check()), Error);
  CHECK_THROWS_AS((CurationConfig{std::nan(""), "x"}.check()), Error);
}

TEST_CASE("build_manifest: all-equal group yields nothing") {
  const auto m = build_manifest({group("p", {1, 1, 1, 1})}, CurationConfig{});
  CHECK(m.entries.empty());
  CHECK(m.summary.preferred == 0);
  CHECK(m.summary.non_preferred == 0);
  CHECK(m.summary.groups == 1);
}

TEST_CASE("build_manifest: fixture with planted winners") {
  Rng rng(3);
  std::vector<CurationGroup> groups;
  std::size_t want_pref = 0, want_non = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 3 + rng.below(2);
    std::vector<double> v(n, 25.0);
    const bool high = i % 2 == 0, low = i % 3 == 0;
    // Distinct small jitter keeps argmax/argmin unique without clearing the bar.
    for (std::size_t k = 0; k < n; ++k) v[k] += 0.001 * static_cast<double>(k);
    if (high) v[0] = 40.0;
    if (low) v[n - 1] = 5.0;
    want_pref += high;
    want_non += low;
    groups.push_back(group("prompt " + std::to_string(i), v));
  }
  const std::vector<RegularizationItem> reg{{"real1", "a photo"}, {"real2", "a dog"}};
  const auto m = build_manifest(groups, CurationConfig{}, reg);
  CHECK(m.summary.preferred == want_pref);
  CHECK(m.summary.non_preferred == want_non);
  CHECK(m.summary.regularization == 2);
  CHECK(m.entries.size() == want_pref + want_non + 2);
  for (const auto& e : m.entries) {
    if (e.source == Source::Regularization) {
      CHECK_FALSE(e.preferred.has_value());
      continue;
    }
    REQUIRE(e.preferred.has_value());
    if (!*e.preferred) CHECK(e.caption.rfind("Weird image. ", 0) == 0);
    else CHECK(e.caption.rfind("prompt ", 0) == 0);
  }
  CHECK(m.entries[m.entries.size() - 2].image_id == "real1");
  CHECK(m.entries.back().caption == "a dog");
}

TEST_CASE("build_manifest: single-member group is flagged") {
  const auto m = build_manifest({group("solo", {12})}, CurationConfig{0.5, "Weird image."});
  CHECK(m.entries.size() == 2);
  CHECK_FALSE(m.summary.warnings.empty());
}

TEST_CASE("build_manifest: ties are counted") {
  const auto m = build_manifest({group("p", {9, 9, 0})}, CurationConfig{0.1, "X"});
  CHECK(m.summary.ties >= 1);
}

TEST_CASE("manifest and scored-item I/O") {
  std::stringstream scored("{\"prompt\":\"a\",\"image_id\":\"1\",\"hps\":20}\n\n"
                           "{\"prompt\":\"a\",\"image_id\":\"2\",\"hps\":10,\"extra\":1}\n");
  const auto items = read_scored_items(scored);
  REQUIRE(items.size() == 2);
  CHECK(items[1].hps == 10.0);
  std::stringstream bad("{\"prompt\":\"a\",\"hps\":20}\n");
  CHECK_THROWS_AS(read_scored_items(bad), Error);

  std::stringstream reg_in("{\"image_id\":\"r\",\"caption\":\"c\"}\n");
  const auto reg = read_regularization(reg_in);
  // n = 2 needs alpha < 2 for anything to pass.
  const auto m =
      build_manifest(group_by_prompt(items).groups, CurationConfig{1.0, "Weird image."}, reg);
  std::stringstream out;
  write_manifest(m, out);
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(out, line)) rows.push_back(nlohmann::json::parse(line));
  REQUIRE(rows.size() == 3);
  CHECK(rows[0]["preferred"] == true);
  CHECK(rows[0]["source"] == "generated");
  CHECK(rows[1]["caption"] == "Weird image. a");
  CHECK(rows[2]["source"] == "regularization");
  CHECK_FALSE(rows[2].contains("preferred"));

  const auto summary = nlohmann::json::parse(summary_json(m.summary));
  CHECK(summary["preferred"] == 1);
  CHECK(summary["non_preferred"] == 1);
  CHECK(summary["regularization"] == 1);
}
