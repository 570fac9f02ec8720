#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace prefalign::curation {

inline constexpr double kDefaultAlpha = 2.0;
inline constexpr std::string_view kDefaultIdentifier = "Weird image.";

struct ScoredItem {
  std::string prompt;
  std::string image_id;
  double hps = 0.0;
};

struct Member {
  std::string image_id;
  double hps = 0.0;
};

struct CurationGroup {
  std::string prompt;
  std::vector<Member> members;  // input order
};

struct GroupingResult {
  std::vector<CurationGroup> groups;  // order of first appearance
  std::size_t duplicates_dropped = 0;
};

// Groups by exact prompt string. Repeated (prompt, image_id) pairs keep their
// first occurrence.
GroupingResult group_by_prompt(const std::vector<ScoredItem>& items);

enum class Direction { Preferred, NonPreferred };

struct Selection {
  std::size_t candidate = 0;  // argmax of HPS (or of -HPS)
  double probability = 0.0;   // softmax mass of the candidate
  double threshold = 0.0;     // alpha / n
  bool accepted = false;      // probability > threshold
  bool tie = false;           // several members share the extreme score
};

// Softmax over HPS (or -HPS) with max-subtraction; the extreme member is
// accepted iff its probability exceeds alpha / n. Lowest index wins ties.
Selection softmax_select(const CurationGroup& group, double alpha, Direction direction);

// Preferred captions are the prompt; others get identifier + " " + prompt.
std::string tag_caption(std::string_view prompt, bool preferred, std::string_view identifier);

struct CurationConfig {
  double alpha = kDefaultAlpha;
  std::string identifier = std::string(kDefaultIdentifier);

  void check() const;  // throws InvalidArgument
};

enum class Source { Generated, Regularization };

struct ManifestEntry {
  std::string image_id;
  std::string caption;
  Source source = Source::Generated;
  std::optional<bool> preferred;  // absent for regularization entries

  bool operator==(const ManifestEntry&) const = default;
};

struct RegularizationItem {
  std::string image_id;
  std::string caption;
};

struct ManifestSummary {
  std::size_t groups = 0;
  std::size_t preferred = 0;
  std::size_t non_preferred = 0;
  std::size_t regularization = 0;
  std::size_t ties = 0;
  std::vector<std::string> warnings;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  ManifestSummary summary;
};

Manifest build_manifest(const std::vector<CurationGroup>& groups, const CurationConfig& config,
                        const std::vector<RegularizationItem>& regularization = {});

// JSONL {prompt, image_id, hps}.
std::vector<ScoredItem> read_scored_items(std::istream& in);
// JSONL {image_id, caption}.
std::vector<RegularizationItem> read_regularization(std::istream& in);
// JSONL {image_id, caption, source, preferred?}.
void write_manifest(const Manifest& manifest, std::ostream& out);
std::string summary_json(const ManifestSummary& summary);

}  // namespace prefalign::curation
