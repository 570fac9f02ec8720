#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace prefalign::study {

using nlohmann::json;

enum class Side { A, B };

struct StudyPair {
  std::string pair_id;
  std::string prompt;
  std::string image_a_id;
  std::string image_b_id;
  std::string model_a_label;
  std::string model_b_label;
};

struct Study {
  std::string study_id;
  std::vector<StudyPair> pairs;
  std::int64_t created_at = 0;  // ms since epoch
  // Optional model predictions: pair_id -> chosen side.
  std::optional<std::string> model_rater_id;
  std::map<std::string, Side> model_choices;
};

struct ChoiceRecord {
  std::string study_id;
  std::string participant_id;
  std::string pair_id;
  Side choice = Side::A;
  Side presented_left = Side::A;
  std::int64_t received_at = 0;
};

struct PairTask {
  std::string study_id;
  std::string pair_id;
  std::size_t pair_index = 0;
  std::string prompt;
  std::string left_image_id;
  std::string right_image_id;
  Side presented_left = Side::A;  // which image of the pair is on the left
  std::size_t completed = 0;
  std::size_t total = 0;
};

// Parses and validates a pairs manifest:
//   {"pairs": [{pair_id, prompt, image_a_id, image_b_id, model_a_label,
//               model_b_label}, ...],
//    "model_choices": {"rater_id": "...", "choices": {pair_id: "A"|"B"}}}
// model_choices is optional but must cover every pair when present.
// Throws InvalidManifest.
Study parse_manifest(const json& manifest);

// Study id derived from the normalized manifest content.
std::string study_id_for(const json& normalized_manifest);

// Deterministic per (study, participant, pair) left/right assignment.
Side presentation_side(const std::string& study_id, const std::string& participant_id,
                       const std::string& pair_id);

// In-memory study state backed by an append-only JSONL record log in
// data_dir. Every mutation is appended (and synced) before it becomes
// visible; construction replays the log. A torn final line left by a crash
// is discarded. Thread-safe.
class StudyStore {
 public:
  explicit StudyStore(std::filesystem::path data_dir, bool sync_writes = true);
  ~StudyStore();

  StudyStore(const StudyStore&) = delete;
  StudyStore& operator=(const StudyStore&) = delete;

  // Idempotent on identical manifest content.
  std::string create_study(const json& manifest);

  // Lowest-index unanswered pair, or nullopt when the participant is done.
  // Throws UnknownStudy.
  std::optional<PairTask> next_pair(const std::string& study_id,
                                    const std::string& participant_id) const;

  // Throws UnknownStudy, UnknownPair, Conflict (repeat submission).
  ChoiceRecord record_choice(const std::string& study_id, const std::string& participant_id,
                             const std::string& pair_id, Side choice);

  // Vote counts, positive-vote histograms per model label, per-participant
  // completion and, when model choices were supplied, agreement statistics.
  json results(const std::string& study_id) const;

  bool has_study(const std::string& study_id) const;
  std::size_t total_votes(const std::string& study_id) const;

  const std::filesystem::path& log_path() const noexcept { return log_path_; }

 private:
  struct StudyState {
    Study study;
    std::unordered_map<std::string, std::size_t> pair_index;
    // participant -> pair index -> record
    std::map<std::string, std::map<std::size_t, ChoiceRecord>> answers;
  };

  void replay();
  void append(const json& record);
  void apply_study(Study study);
  void apply_choice(const ChoiceRecord& rec);
  const StudyState& state_for(const std::string& study_id) const;

  std::filesystem::path data_dir_;
  std::filesystem::path log_path_;
  bool sync_writes_;
  int fd_ = -1;
  mutable std::shared_mutex mutex_;
  std::map<std::string, StudyState> studies_;
};

json to_json(const PairTask& task);
json to_json(const ChoiceRecord& record);
std::string to_string(Side side);
std::optional<Side> parse_side(const json& value);

// HTTP front end over a StudyStore:
//   POST /studies                      manifest -> {study_id}
//   GET  /studies/{id}/next?participant=p  -> PairTask or {"done": true}
//   POST /studies/{id}/choices         {participant_id, pair_id, choice}
//   GET  /studies/{id}/results         -> results JSON
//   GET  /images/{image_id}            -> bytes from image_dir
class StudyServer {
 public:
  StudyServer(StudyStore& store, std::filesystem::path image_dir);
  ~StudyServer();

  // Binds to host:port (port 0 picks a free port); returns the bound port,
  // or -1 on failure.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct ServiceConfig {
  int port = 8080;
  std::filesystem::path data_dir = "study_data";
  std::filesystem::path image_dir = "images";

  // PREFALIGN_PORT, PREFALIGN_DATA_DIR, PREFALIGN_IMAGE_DIR override defaults.
  static ServiceConfig from_env();
};

}  // namespace prefalign::study
