#include <doctest.h>

#include <fstream>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
// After Eigen: <resolv.h> defines a `res` macro.
#include <httplib.h>
#include "prefalign/error.hpp"
#include "prefalign/study_service.hpp"

using namespace prefalign;
using namespace prefalign::study;
using nlohmann::json;

namespace {

json manifest(std::size_t pairs, bool with_model = false) {
  json m = {{"pairs", json::array()}};
  json choices = json::object();
  for (std::size_t i = 0; i < pairs; ++i) {
    const auto id = "pair" + std::to_string(i);
    m["pairs"].push_back({{"pair_id", id},
                          {"prompt", "prompt " + std::to_string(i)},
                          {"image_a_id", id + "_a"},
                          {"image_b_id", id + "_b"},
                          {"model_a_label", "tuned"},
                          {"model_b_label", "base"}});
    choices[id] = i % 2 == 0 ? "A" : "B";
  }
  if (with_model) m["model_choices"] = {{"rater_id", "hps"}, {"choices", choices}};
  return m;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::InvalidArgument;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("parse_manifest rejects malformed input") {
  CHECK(parse_manifest(manifest(3)).pairs.size() == 3);
  CHECK(kind_of([] { parse_manifest(json::array()); }) == ErrorKind::InvalidManifest);
  CHECK(kind_of([] { parse_manifest({{"pairs", json::array()}}); }) == ErrorKind::InvalidManifest);

  auto dup = manifest(2);
  dup["pairs"][1]["pair_id"] = "pair0";
  CHECK(kind_of([&] { parse_manifest(dup); }) == ErrorKind::InvalidManifest);

  auto missing = manifest(2);
  missing["pairs"][0].erase("image_b_id");
  CHECK(kind_of([&] { parse_manifest(missing); }) == ErrorKind::InvalidManifest);

  auto partial = manifest(3, true);
  partial["model_choices"]["choices"].erase("pair1");
  CHECK(kind_of([&] { parse_manifest(partial); }) == ErrorKind::InvalidManifest);

  auto bad_side = manifest(2, true);
  bad_side["model_choices"]["choices"]["pair0"] = "C";
  CHECK(kind_of([&] { parse_manifest(bad_side); }) == ErrorKind::InvalidManifest);

  const auto s = parse_manifest(manifest(2, true));
  REQUIRE(s.model_rater_id);
  CHECK(s.model_choices.at("pair1") == Side::B);
}

TEST_CASE("create_study is idempotent on content") {
  fixtures::TempDir dir("study");
  StudyStore store(dir.path(), false);
  const auto a = store.create_study(manifest(4));
  auto reordered = manifest(4);
  // Key order inside objects does not matter.
  reordered["pairs"][0] = json::parse(reordered["pairs"][0].dump());
  CHECK(store.create_study(reordered) == a);
  CHECK(store.create_study(manifest(5)) != a);
  CHECK(store.has_study(a));
  CHECK_FALSE(store.has_study("s_nope"));
}

TEST_CASE("next_pair walks pairs in order and keeps the side stable") {
  fixtures::TempDir dir("study");
  StudyStore store(dir.path(), false);
  const auto id = store.create_study(manifest(3));

  const auto first = store.next_pair(id, "alice");
  REQUIRE(first);
  CHECK(first->pair_index == 0);
  CHECK(first->completed == 0);
  CHECK(first->total == 3);
  const auto again = store.next_pair(id, "alice");
  CHECK(again->presented_left == first->presented_left);
  CHECK(again->left_image_id == first->left_image_id);
  std::set<std::string> shown{first->left_image_id, first->right_image_id};
  CHECK(shown == std::set<std::string>{"pair0_a", "pair0_b"});

  store.record_choice(id, "alice", "pair1", Side::A);
  CHECK(store.next_pair(id, "alice")->pair_index == 0);
  store.record_choice(id, "alice", "pair0", Side::B);
  const auto third = store.next_pair(id, "alice");
  CHECK(third->pair_index == 2);
  CHECK(third->completed == 2);
  store.record_choice(id, "alice", "pair2", Side::B);
  CHECK_FALSE(store.next_pair(id, "alice"));
  CHECK(store.next_pair(id, "bob")->pair_index == 0);
}

TEST_CASE("record_choice errors") {
  fixtures::TempDir dir("study");
  StudyStore store(dir.path(), false);
  const auto id = store.create_study(manifest(2));
  const auto rec = store.record_choice(id, "p", "pair0", Side::A);
  CHECK(rec.presented_left == presentation_side(id, "p", "pair0"));
  CHECK(kind_of([&] { store.record_choice(id, "p", "pair0", Side::B); }) == ErrorKind::Conflict);
  CHECK(kind_of([&] { store.record_choice(id, "p", "pairX", Side::A); }) == ErrorKind::UnknownPair);
  CHECK(kind_of([&] { store.record_choice("s_x", "p", "pair0", Side::A); }) ==
        ErrorKind::UnknownStudy);
  CHECK(kind_of([&] { store.record_choice(id, "", "pair1", Side::A); }) ==
        ErrorKind::InvalidArgument);
  CHECK(kind_of([&] { store.next_pair("s_x", "p"); }) == ErrorKind::UnknownStudy);
  CHECK(kind_of([&] { store.results("s_x"); }) == ErrorKind::UnknownStudy);
  CHECK(store.total_votes(id) == 1);
}

TEST_CASE("results: empty study, unanimous panel, agreement") {
  fixtures::TempDir dir("study");
  StudyStore store(dir.path(), false);
  const auto id = store.create_study(manifest(4, true));

  const auto empty = store.results(id);
  CHECK(empty["total_votes"] == 0);
  CHECK(empty["participants"] == 0);
  CHECK(empty["vote_histogram"]["tuned"] == json::array({4}));
  CHECK(empty["agreement"]["model_vs_human"].is_null());

  // Three raters copy the model exactly: tuned wins on even pairs.
  for (const auto* p : {"r1", "r2", "r3"}) {
    for (std::size_t i = 0; i < 4; ++i) {
      store.record_choice(id, p, "pair" + std::to_string(i), i % 2 == 0 ? Side::A : Side::B);
    }
  }
  const auto r = store.results(id);
  CHECK(r["total_votes"] == 12);
  CHECK(r["participants"] == 3);
  CHECK(r["vote_histogram"]["tuned"] == json::array({2, 0, 0, 2}));
  CHECK(r["vote_histogram"]["base"] == json::array({2, 0, 0, 2}));
  CHECK(r["fraction_above_half"]["tuned"].get<double>() == 0.5);
  CHECK(r["participant_completion"]["r2"] == 4);
  const auto& ag = r["agreement"];
  CHECK(ag["complete_raters"] == 3);
  CHECK(ag["model_vs_human"]["mean"].get<double>() == 1.0);
  CHECK(ag["model_vs_human"]["std"].get<double>() == 0.0);
  CHECK(ag["human_vs_human"]["mean"].get<double>() == 1.0);
  CHECK(ag["model_vs_majority"].get<double>() == 1.0);
  CHECK(ag["majority_pairs"] == 4);
}

TEST_CASE("results conserve votes across random sessions") {
  fixtures::TempDir dir("study");
  StudyStore store(dir.path(), false);
  const std::size_t pairs = 12;
  const auto id = store.create_study(manifest(pairs));
  Rng rng(5);
  std::size_t cast = 0;
  for (int p = 0; p < 9; ++p) {
    const auto who = "p" + std::to_string(p);
    for (std::size_t i = 0; i < pairs; ++i) {
      if (rng.uniform() < 0.3) continue;
      store.record_choice(id, who, "pair" + std::to_string(i), rng.below(2) ? Side::A : Side::B);
      ++cast;
    }
  }
  const auto r = store.results(id);
  CHECK(r["total_votes"] == cast);
  std::size_t sum = 0;
  for (const auto& v : r["votes"]) sum += v["votes_a"].get<std::size_t>() + v["votes_b"].get<std::size_t>();
  CHECK(sum == cast);
  for (const auto& label : {"tuned", "base"}) {
    std::size_t images = 0, weighted = 0;
    const auto& h = r["vote_histogram"][label];
    for (std::size_t k = 0; k < h.size(); ++k) {
      images += h[k].get<std::size_t>();
      weighted += k * h[k].get<std::size_t>();
    }
    CHECK(images == pairs);
    (void)weighted;
  }
  std::size_t tuned_weighted = 0, base_weighted = 0;
  for (std::size_t k = 0; k < r["vote_histogram"]["tuned"].size(); ++k) {
    tuned_weighted += k * r["vote_histogram"]["tuned"][k].get<std::size_t>();
    base_weighted += k * r["vote_histogram"]["base"][k].get<std::size_t>();
  }
  CHECK(tuned_weighted + base_weighted == cast);
}

TEST_CASE("presentation side is balanced") {
  std::size_t left_a = 0;
  const std::size_t draws = 4000;
  for (std::size_t i = 0; i < draws; ++i) {
    left_a += presentation_side("s_x", "p" + std::to_string(i % 97),
                                "pair" + std::to_string(i)) == Side::A;
  }
  const double frac = static_cast<double>(left_a) / draws;
  CHECK(frac >= 0.45);
  CHECK(frac <= 0.55);
}

TEST_CASE("replay reproduces results byte for byte") {
  fixtures::TempDir dir("study");
  std::string id, before;
  {
    StudyStore store(dir.path());
    id = store.create_study(manifest(6, true));
    for (int p = 0; p < 4; ++p) {
      for (int i = 0; i < 6; ++i) {
        store.record_choice(id, "p" + std::to_string(p), "pair" + std::to_string(i),
                            (p + i) % 3 ? Side::A : Side::B);
      }
    }
    before = store.results(id).dump();
  }
  StudyStore again(dir.path());
  CHECK(again.results(id).dump() == before);
  CHECK(kind_of([&] { again.record_choice(id, "p0", "pair0", Side::A); }) == ErrorKind::Conflict);
}

TEST_CASE("torn final line is discarded on replay") {
  fixtures::TempDir dir("study");
  std::string id, before;
  std::filesystem::path log;
  {
    StudyStore store(dir.path());
    id = store.create_study(manifest(2));
    store.record_choice(id, "p", "pair0", Side::A);
    before = store.results(id).dump();
    log = store.log_path();
  }
  const auto clean = slurp(log);
  {
    std::ofstream out(log, std::ios::binary | std::ios::app);
    out << R"({"type":"choice","study_id":")" << id << R"(","partic)";
  }
  StudyStore again(dir.path());
  CHECK(again.results(id).dump() == before);
  CHECK(slurp(log) == clean);
  again.record_choice(id, "p", "pair1", Side::B);
  CHECK(again.total_votes(id) == 2);
}

TEST_CASE("corrupt interior line is an error") {
  fixtures::TempDir dir("study");
  std::filesystem::path log;
  {
    StudyStore store(dir.path());
    store.create_study(manifest(2));
    log = store.log_path();
  }
  {
    std::ofstream out(log, std::ios::binary | std::ios::app);
    out << "not json\n";
  }
  CHECK(kind_of([&] { StudyStore s(dir.path()); }) == ErrorKind::IoError);
}

TEST_CASE("http routes") {
  fixtures::TempDir dir("study");
  fixtures::TempDir images("img");
  {
    std::ofstream(images / "pair0_a.png", std::ios::binary) << "\x89PNGdata";
  }
  StudyStore store(dir.path(), false);
  StudyServer server(store, images.path());
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread t([&] { server.listen(); });

  httplib::Client cli("127.0.0.1", port);
  auto post = [&](const std::string& path, const json& body) {
    return cli.Post(path, body.dump(), "application/json");
  };

  auto created = post("/studies", manifest(2));
  REQUIRE(created);
  CHECK(created->status == 200);
  const auto id = json::parse(created->body)["study_id"].get<std::string>();
  CHECK(post("/studies", json{{"pairs", 3}})->status == 400);
  CHECK(cli.Post("/studies", "{", "application/json")->status == 400);

  auto next = cli.Get("/studies/" + id + "/next?participant=ann");
  REQUIRE(next);
  CHECK(next->status == 200);
  const auto task = json::parse(next->body);
  CHECK(task["pair_id"] == "pair0");
  CHECK(task["done"] == false);
  CHECK(cli.Get("/studies/" + id + "/next")->status == 400);
  CHECK(cli.Get("/studies/s_missing/next?participant=ann")->status == 404);

  auto vote = post("/studies/" + id + "/choices",
                   {{"participant_id", "ann"}, {"pair_id", "pair0"}, {"choice", "A"}});
  CHECK(vote->status == 200);
  CHECK(json::parse(vote->body)["ok"] == true);
  CHECK(post("/studies/" + id + "/choices",
             {{"participant_id", "ann"}, {"pair_id", "pair0"}, {"choice", "B"}})
            ->status == 409);
  CHECK(post("/studies/" + id + "/choices",
             {{"participant_id", "ann"}, {"pair_id", "zzz"}, {"choice", "B"}})
            ->status == 404);
  CHECK(post("/studies/" + id + "/choices",
             {{"participant_id", "ann"}, {"pair_id", "pair1"}, {"choice", "C"}})
            ->status == 400);
  CHECK(post("/studies/" + id + "/choices", {{"pair_id", "pair1"}, {"choice", "A"}})->status ==
        400);
  post("/studies/" + id + "/choices",
       {{"participant_id", "ann"}, {"pair_id", "pair1"}, {"choice", "B"}});
  CHECK(json::parse(cli.Get("/studies/" + id + "/next?participant=ann")->body)["done"] == true);

  auto results = cli.Get("/studies/" + id + "/results");
  CHECK(results->status == 200);
  CHECK(json::parse(results->body)["total_votes"] == 2);
  CHECK(cli.Get("/studies/s_missing/results")->status == 404);

  auto img = cli.Get("/images/pair0_a");
  REQUIRE(img);
  CHECK(img->status == 200);
  CHECK(img->body == "\x89PNGdata");
  CHECK(img->get_header_value("Content-Type") == "image/png");
  CHECK(cli.Get("/images/pair0_b")->status == 404);
  CHECK(cli.Get("/images/..")->status != 200);

  server.stop();
  t.join();
}

TEST_CASE("concurrent voters over http") {
  fixtures::TempDir dir("study");
  StudyStore store(dir.path(), false);
  const auto id = store.create_study(manifest(10));
  StudyServer server(store, dir.path());
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread t([&] { server.listen(); });

  std::vector<std::thread> voters;
  std::atomic<int> failures{0};
  for (int p = 0; p < 8; ++p) {
    voters.emplace_back([&, p] {
      httplib::Client cli("127.0.0.1", port);
      const auto who = "v" + std::to_string(p);
      for (;;) {
        auto next = cli.Get("/studies/" + id + "/next?participant=" + who);
        if (!next || next->status != 200) {
          ++failures;
          return;
        }
        const auto task = json::parse(next->body);
        if (task["done"] == true) return;
        json body = {{"participant_id", who}, {"pair_id", task["pair_id"]}, {"choice", "A"}};
        auto res = cli.Post("/studies/" + id + "/choices", body.dump(), "application/json");
        if (!res || res->status != 200) ++failures;
      }
    });
  }
  for (auto& v : voters) v.join();
  CHECK(failures == 0);
  CHECK(store.total_votes(id) == 80);
  server.stop();
  t.join();
}
