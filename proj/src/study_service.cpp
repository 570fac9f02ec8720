#include "prefalign/study_service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>
#include <mutex>
#include <set>

#include <httplib.h>

#include "prefalign/error.hpp"
#include "prefalign/hashing.hpp"
#include "prefalign/scoring.hpp"

namespace prefalign::study {
namespace {

constexpr const char* kLogName = "records.jsonl";

std::int64_t now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

std::string required_string(const json& obj, const char* field, std::size_t index) {
  const auto it = obj.find(field);
  if (it == obj.end() || !it->is_string()) {
    throw Error(ErrorKind::InvalidManifest, "pair " + std::to_string(index) +
                                                ": missing string field '" + field + "'");
  }
  return it->get<std::string>();
}

// Canonical form of a validated manifest; the study id hashes this.
json normalized(const Study& s) {
  json pairs = json::array();
  for (const auto& p : s.pairs) {
    pairs.push_back({{"pair_id", p.pair_id},
                     {"prompt", p.prompt},
                     {"image_a_id", p.image_a_id},
                     {"image_b_id", p.image_b_id},
                     {"model_a_label", p.model_a_label},
                     {"model_b_label", p.model_b_label}});
  }
  json out = {{"pairs", std::move(pairs)}};
  if (s.model_rater_id) {
    json choices = json::object();
    for (const auto& [pair, side] : s.model_choices) choices[pair] = to_string(side);
    out["model_choices"] = {{"rater_id", *s.model_rater_id}, {"choices", std::move(choices)}};
  }
  return out;
}

json mean_std_json(const scoring::MeanStd& ms) {
  return {{"mean", ms.mean}, {"std", ms.std}};
}

}  // namespace

std::string to_string(Side side) { return side == Side::A ? "A" : "B"; }

std::optional<Side> parse_side(const json& value) {
  if (value.is_string()) {
    const auto s = value.get<std::string>();
    if (s == "A" || s == "a") return Side::A;
    if (s == "B" || s == "b") return Side::B;
  }
  if (value.is_number_integer()) {
    const auto v = value.get<long long>();
    if (v == 0) return Side::A;
    if (v == 1) return Side::B;
  }
  return std::nullopt;
}

Study parse_manifest(const json& manifest) {
  if (!manifest.is_object() || !manifest.contains("pairs") || !manifest["pairs"].is_array()) {
    throw Error(ErrorKind::InvalidManifest, "manifest must be an object with a 'pairs' array");
  }
  const auto& pairs = manifest["pairs"];
  if (pairs.empty()) throw Error(ErrorKind::InvalidManifest, "manifest has no pairs");

  Study s;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (!p.is_object()) {
      throw Error(ErrorKind::InvalidManifest, "pair " + std::to_string(i) + " is not an object");
    }
    StudyPair pair{required_string(p, "pair_id", i),       required_string(p, "prompt", i),
                   required_string(p, "image_a_id", i),    required_string(p, "image_b_id", i),
                   required_string(p, "model_a_label", i), required_string(p, "model_b_label", i)};
    if (pair.pair_id.empty() || pair.image_a_id.empty() || pair.image_b_id.empty()) {
      throw Error(ErrorKind::InvalidManifest,
                  "pair " + std::to_string(i) + " has an empty id");
    }
    if (!ids.insert(pair.pair_id).second) {
      throw Error(ErrorKind::InvalidManifest, "duplicate pair_id '" + pair.pair_id + "'");
    }
    s.pairs.push_back(std::move(pair));
  }

  if (const auto it = manifest.find("model_choices"); it != manifest.end() && !it->is_null()) {
    if (!it->is_object() || !it->contains("rater_id") || !(*it)["rater_id"].is_string() ||
        !it->contains("choices") || !(*it)["choices"].is_object()) {
      throw Error(ErrorKind::InvalidManifest,
                  "model_choices must be {\"rater_id\": string, \"choices\": object}");
    }
    s.model_rater_id = (*it)["rater_id"].get<std::string>();
    for (const auto& [pair, value] : (*it)["choices"].items()) {
      const auto side = parse_side(value);
      if (!ids.count(pair) || !side) {
        throw Error(ErrorKind::InvalidManifest, "bad model choice for pair '" + pair + "'");
      }
      s.model_choices[pair] = *side;
    }
    if (s.model_choices.size() != ids.size()) {
      throw Error(ErrorKind::InvalidManifest, "model_choices must cover every pair");
    }
  }
  return s;
}

std::string study_id_for(const json& normalized_manifest) {
  return "s_" + content_hash_hex(normalized_manifest.dump(), 16);
}

Side presentation_side(const std::string& study_id, const std::string& participant_id,
                       const std::string& pair_id) {
  const auto key = derive_key("presentation:" + study_id);
  std::string msg = participant_id;
  msg.push_back('\x1f');
  msg += pair_id;
  return (keyed_hash_u64(key, msg) & 1u) ? Side::B : Side::A;
}

json to_json(const PairTask& t) {
  return {{"done", false},
          {"study_id", t.study_id},
          {"pair_id", t.pair_id},
          {"pair_index", t.pair_index},
          {"prompt", t.prompt},
          {"left_image_id", t.left_image_id},
          {"right_image_id", t.right_image_id},
          {"presented_left", to_string(t.presented_left)},
          {"completed", t.completed},
          {"total", t.total}};
}

json to_json(const ChoiceRecord& r) {
  return {{"study_id", r.study_id},
          {"participant_id", r.participant_id},
          {"pair_id", r.pair_id},
          {"choice", to_string(r.choice)},
          {"presented_left", to_string(r.presented_left)},
          {"received_at", r.received_at}};
}

// ---------------------------------------------------------------------------
// StudyStore

StudyStore::StudyStore(std::filesystem::path data_dir, bool sync_writes)
    : data_dir_(std::move(data_dir)), sync_writes_(sync_writes) {
  std::error_code ec;
  std::filesystem::create_directories(data_dir_, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + data_dir_.string());
  log_path_ = data_dir_ / kLogName;
  replay();
  fd_ = ::open(log_path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) {
    throw Error(ErrorKind::IoError,
                "cannot open " + log_path_.string() + ": " + std::strerror(errno));
  }
}

StudyStore::~StudyStore() {
  if (fd_ >= 0) ::close(fd_);
}

void StudyStore::replay() {
  std::ifstream in(log_path_, std::ios::binary);
  if (!in) return;
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();

  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < data.size()) {
    const auto nl = data.find('\n', pos);
    if (nl == std::string::npos) {
      // Partial final write from an interrupted process.
      std::filesystem::resize_file(log_path_, pos);
      break;
    }
    ++line_no;
    const std::string_view line(data.data() + pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
      const auto type = rec.at("type").get<std::string>();
      if (type == "study") {
        Study s = parse_manifest(rec.at("manifest"));
        s.study_id = rec.at("study_id").get<std::string>();
        s.created_at = rec.at("created_at").get<std::int64_t>();
        apply_study(std::move(s));
      } else if (type == "choice") {
        ChoiceRecord c;
        c.study_id = rec.at("study_id").get<std::string>();
        c.participant_id = rec.at("participant_id").get<std::string>();
        c.pair_id = rec.at("pair_id").get<std::string>();
        c.choice = parse_side(rec.at("choice")).value();
        c.presented_left = parse_side(rec.at("presented_left")).value();
        c.received_at = rec.at("received_at").get<std::int64_t>();
        apply_choice(c);
      }
    } catch (const std::exception& e) {
      throw Error(ErrorKind::IoError, "corrupt record log " + log_path_.string() + " line " +
                                          std::to_string(line_no) + ": " + e.what());
    }
  }
}

void StudyStore::append(const json& record) {
  const std::string line = record.dump() + "\n";
  std::size_t written = 0;
  while (written < line.size()) {
    const auto n = ::write(fd_, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorKind::IoError, std::string("log append failed: ") + std::strerror(errno));
    }
    written += static_cast<std::size_t>(n);
  }
  if (sync_writes_ && ::fdatasync(fd_) != 0) {
    throw Error(ErrorKind::IoError, std::string("log sync failed: ") + std::strerror(errno));
  }
}

void StudyStore::apply_study(Study study) {
  StudyState st;
  for (std::size_t i = 0; i < study.pairs.size(); ++i) st.pair_index[study.pairs[i].pair_id] = i;
  const auto id = study.study_id;
  st.study = std::move(study);
  studies_.emplace(id, std::move(st));
}

void StudyStore::apply_choice(const ChoiceRecord& rec) {
  auto it = studies_.find(rec.study_id);
  if (it == studies_.end()) throw Error(ErrorKind::UnknownStudy, rec.study_id);
  const auto p = it->second.pair_index.find(rec.pair_id);
  if (p == it->second.pair_index.end()) throw Error(ErrorKind::UnknownPair, rec.pair_id);
  it->second.answers[rec.participant_id].emplace(p->second, rec);
}

const StudyStore::StudyState& StudyStore::state_for(const std::string& study_id) const {
  const auto it = studies_.find(study_id);
  if (it == studies_.end()) throw Error(ErrorKind::UnknownStudy, "no study '" + study_id + "'");
  return it->second;
}

std::string StudyStore::create_study(const json& manifest) {
  Study s = parse_manifest(manifest);
  const json canonical = normalized(s);
  s.study_id = study_id_for(canonical);

  std::unique_lock lock(mutex_);
  if (studies_.count(s.study_id)) return s.study_id;
  s.created_at = now_ms();
  append({{"type", "study"},
          {"study_id", s.study_id},
          {"created_at", s.created_at},
          {"manifest", canonical}});
  const auto id = s.study_id;
  apply_study(std::move(s));
  return id;
}

std::optional<PairTask> StudyStore::next_pair(const std::string& study_id,
                                              const std::string& participant_id) const {
  std::shared_lock lock(mutex_);
  const auto& st = state_for(study_id);
  const std::map<std::size_t, ChoiceRecord>* done = nullptr;
  if (const auto it = st.answers.find(participant_id); it != st.answers.end()) done = &it->second;

  for (std::size_t i = 0; i < st.study.pairs.size(); ++i) {
    if (done && done->count(i)) continue;
    const auto& pair = st.study.pairs[i];
    PairTask t;
    t.study_id = study_id;
    t.pair_id = pair.pair_id;
    t.pair_index = i;
    t.prompt = pair.prompt;
    t.presented_left = presentation_side(study_id, participant_id, pair.pair_id);
    t.left_image_id = t.presented_left == Side::A ? pair.image_a_id : pair.image_b_id;
    t.right_image_id = t.presented_left == Side::A ? pair.image_b_id : pair.image_a_id;
    t.completed = done ? done->size() : 0;
    t.total = st.study.pairs.size();
    return t;
  }
  return std::nullopt;
}

ChoiceRecord StudyStore::record_choice(const std::string& study_id,
                                       const std::string& participant_id,
                                       const std::string& pair_id, Side choice) {
  if (participant_id.empty()) {
    throw Error(ErrorKind::InvalidArgument, "participant_id must be nonempty");
  }
  std::unique_lock lock(mutex_);
  const auto& st = state_for(study_id);
  const auto p = st.pair_index.find(pair_id);
  if (p == st.pair_index.end()) {
    throw Error(ErrorKind::UnknownPair, "study '" + study_id + "' has no pair '" + pair_id + "'");
  }
  if (const auto it = st.answers.find(participant_id);
      it != st.answers.end() && it->second.count(p->second)) {
    throw Error(ErrorKind::Conflict,
                "participant '" + participant_id + "' already answered pair '" + pair_id + "'");
  }
  ChoiceRecord rec{study_id, participant_id, pair_id, choice,
                   presentation_side(study_id, participant_id, pair_id), now_ms()};
  json line = to_json(rec);
  line["type"] = "choice";
  append(line);
  apply_choice(rec);
  return rec;
}

bool StudyStore::has_study(const std::string& study_id) const {
  std::shared_lock lock(mutex_);
  return studies_.count(study_id) > 0;
}

std::size_t StudyStore::total_votes(const std::string& study_id) const {
  std::shared_lock lock(mutex_);
  std::size_t n = 0;
  for (const auto& [participant, answers] : state_for(study_id).answers) n += answers.size();
  return n;
}

json StudyStore::results(const std::string& study_id) const {
  std::shared_lock lock(mutex_);
  const auto& st = state_for(study_id);
  const auto& pairs = st.study.pairs;
  const std::size_t participants = st.answers.size();

  std::vector<std::size_t> votes_a(pairs.size(), 0), votes_b(pairs.size(), 0);
  json completion = json::object();
  std::size_t total = 0;
  for (const auto& [participant, answers] : st.answers) {
    completion[participant] = answers.size();
    total += answers.size();
    for (const auto& [idx, rec] : answers) {
      ++(rec.choice == Side::A ? votes_a : votes_b)[idx];
    }
  }

  // Per model label: how many of its images received k positive votes.
  std::map<std::string, std::vector<std::size_t>> histograms;
  std::map<std::string, std::pair<std::size_t, std::size_t>> majority;  // (above half, images)
  json per_pair = json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    per_pair.push_back({{"pair_id", p.pair_id},
                        {"model_a_label", p.model_a_label},
                        {"model_b_label", p.model_b_label},
                        {"votes_a", votes_a[i]},
                        {"votes_b", votes_b[i]}});
    for (const auto& [label, votes] :
         {std::pair{p.model_a_label, votes_a[i]}, std::pair{p.model_b_label, votes_b[i]}}) {
      auto& h = histograms[label];
      h.resize(participants + 1, 0);
      ++h[votes];
      auto& m = majority[label];
      ++m.second;
      if (2 * votes > participants) ++m.first;
    }
  }
  json hist_json = json::object();
  json majority_json = json::object();
  for (const auto& [label, h] : histograms) hist_json[label] = h;
  for (const auto& [label, m] : majority) {
    majority_json[label] = participants ? static_cast<double>(m.first) / static_cast<double>(m.second) : 0.0;
  }

  json out = {{"study_id", study_id},
              {"created_at", st.study.created_at},
              {"pairs", pairs.size()},
              {"participants", participants},
              {"total_votes", total},
              {"votes", std::move(per_pair)},
              {"vote_histogram", std::move(hist_json)},
              {"fraction_above_half", std::move(majority_json)},
              {"participant_completion", std::move(completion)}};

  if (st.study.model_rater_id) {
    auto as_index = [](Side s) { return s == Side::A ? std::size_t{0} : std::size_t{1}; };
    scoring::ChoiceVector model{*st.study.model_rater_id, {}};
    for (const auto& [pair, side] : st.study.model_choices) model.choices[pair] = as_index(side);

    std::vector<scoring::ChoiceVector> complete;
    for (const auto& [participant, answers] : st.answers) {
      if (answers.size() != pairs.size()) continue;
      scoring::ChoiceVector cv{participant, {}};
      for (const auto& [idx, rec] : answers) cv.choices[rec.pair_id] = as_index(rec.choice);
      complete.push_back(std::move(cv));
    }

    // Majority vote over pairs without a tie.
    scoring::ChoiceVector majority_rater{"majority", {}};
    scoring::ChoiceVector model_on_majority{model.rater_id, {}};
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (votes_a[i] == votes_b[i]) continue;
      majority_rater.choices[pairs[i].pair_id] = votes_a[i] > votes_b[i] ? 0 : 1;
      model_on_majority.choices[pairs[i].pair_id] = model.choices.at(pairs[i].pair_id);
    }

    json agreement = {{"model_rater_id", model.rater_id},
                      {"complete_raters", complete.size()},
                      {"model_vs_human", nullptr},
                      {"human_vs_human", nullptr},
                      {"model_vs_majority", nullptr},
                      {"majority_pairs", majority_rater.choices.size()}};
    if (!complete.empty()) {
      agreement["model_vs_human"] = mean_std_json(scoring::panel_agreement(model, complete));
    }
    if (complete.size() >= 2) {
      agreement["human_vs_human"] = mean_std_json(scoring::human_agreement(complete));
    }
    if (!majority_rater.choices.empty()) {
      agreement["model_vs_majority"] = scoring::pairwise_agreement(model_on_majority, majority_rater);
    }
    out["agreement"] = std::move(agreement);
  }
  return out;
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::UnknownStudy:
    case ErrorKind::UnknownPair: return 404;
    case ErrorKind::Conflict: return 409;
    case ErrorKind::InvalidManifest:
    case ErrorKind::InvalidArgument: return 400;
    default: return 500;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view kind, const std::string& msg) {
  send_json(res, status, {{"error", kind}, {"message", msg}});
}

template <typename F>
void guarded(httplib::Response& res, F&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    send_error(res, http_status(e.kind()), to_string(e.kind()), e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, "BadRequest", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "Internal", e.what());
  }
}

const char* content_type_for(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".webp") return "image/webp";
  if (ext == ".gif") return "image/gif";
  return "application/octet-stream";
}

bool safe_image_id(const std::string& id) {
  return !id.empty() && id != "." && id != ".." &&
         id.find_first_of("/\\") == std::string::npos && id.find('\0') == std::string::npos;
}

}  // namespace

struct StudyServer::Impl {
  StudyStore& store;
  std::filesystem::path image_dir;
  httplib::Server server;

  Impl(StudyStore& s, std::filesystem::path dir) : store(s), image_dir(std::move(dir)) {
    server.Post("/studies", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto id = store.create_study(json::parse(req.body));
        send_json(res, 200, {{"study_id", id}});
      });
    });

    server.Get("/studies/:id/next", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto participant = req.get_param_value("participant");
        if (participant.empty()) {
          throw Error(ErrorKind::InvalidArgument, "query parameter 'participant' is required");
        }
        const auto& id = req.path_params.at("id");
        if (const auto task = store.next_pair(id, participant)) {
          send_json(res, 200, to_json(*task));
        } else {
          send_json(res, 200, {{"done", true}, {"study_id", id}});
        }
      });
    });

    server.Post("/studies/:id/choices", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = json::parse(req.body);
        const auto side = parse_side(body.at("choice"));
        if (!side) throw Error(ErrorKind::InvalidArgument, "choice must be \"A\" or \"B\"");
        const auto rec = store.record_choice(req.path_params.at("id"),
                                             body.at("participant_id").get<std::string>(),
                                             body.at("pair_id").get<std::string>(), *side);
        json ack = to_json(rec);
        ack["ok"] = true;
        send_json(res, 200, ack);
      });
    });

    server.Get("/studies/:id/results", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, store.results(req.path_params.at("id"))); });
    });

    server.Get("/images/:image_id", [this](const httplib::Request& req, httplib::Response& res) {
      const auto& id = req.path_params.at("image_id");
      if (!safe_image_id(id)) {
        send_error(res, 400, "BadRequest", "invalid image id");
        return;
      }
      std::filesystem::path found;
      const auto exact = image_dir / id;
      if (std::filesystem::is_regular_file(exact)) {
        found = exact;
      } else {
        for (const char* ext : {".png", ".jpg", ".jpeg", ".webp", ".gif"}) {
          const auto candidate = image_dir / (id + ext);
          if (std::filesystem::is_regular_file(candidate)) {
            found = candidate;
            break;
          }
        }
      }
      if (found.empty()) {
        send_error(res, 404, "NotFound", "no image '" + id + "'");
        return;
      }
      std::ifstream in(found, std::ios::binary);
      std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      res.status = 200;
      res.set_content(std::move(bytes), content_type_for(found));
    });
  }
};

StudyServer::StudyServer(StudyStore& store, std::filesystem::path image_dir)
    : impl_(std::make_unique<Impl>(store, std::move(image_dir))) {}

StudyServer::~StudyServer() { stop(); }

int StudyServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

void StudyServer::listen() { impl_->server.listen_after_bind(); }

void StudyServer::stop() {
  if (impl_) impl_->server.stop();
}

ServiceConfig ServiceConfig::from_env() {
  ServiceConfig cfg;
  if (const char* p = std::getenv("PREFALIGN_PORT"); p && *p) cfg.port = std::atoi(p);
  if (const char* d = std::getenv("PREFALIGN_DATA_DIR"); d && *d) cfg.data_dir = d;
  if (const char* i = std::getenv("PREFALIGN_IMAGE_DIR"); i && *i) cfg.image_dir = i;
  return cfg;
}

}  // namespace prefalign::study
