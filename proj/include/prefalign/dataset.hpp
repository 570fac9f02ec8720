#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "prefalign/preference.hpp"

namespace prefalign::dataset {

struct Dataset {
  std::vector<PreferenceInstance> instances;

  std::size_t size() const noexcept { return instances.size(); }
  bool operator==(const Dataset&) const = default;
};

struct Violation {
  std::size_t index;
  std::string kind;  // e.g. "index_out_of_range", "duplicate_prompt_id"
  std::string detail;
};

using ValidationReport = std::vector<Violation>;

ValidationReport validate(const Dataset& dataset);

struct DatasetStats {
  std::size_t total_prompts = 0;
  std::size_t total_images = 0;
  std::map<std::size_t, std::size_t> counts_by_n;  // keys 2, 3, 4 always present
  std::size_t distinct_users = 0;
  std::size_t max_choices_per_user = 0;
};

DatasetStats stats(const Dataset& dataset);

// Stats for a bare n -> count composition (no user information).
DatasetStats stats_from_composition(const std::map<std::size_t, std::size_t>& counts);

// Expected accuracy of a uniform random pick per prompt. Throws EmptyDataset.
double random_guess_accuracy(const DatasetStats& stats);

struct Split {
  Dataset train;
  Dataset val;
};

// Deterministic split by prompt. Prompt ids are sorted, shuffled with the
// seeded Fisher-Yates, and the first val_size go to validation. Both halves
// keep the input order. With stratify_by_n, each n-stratum contributes its
// proportional share (largest remainder) to validation.
Split split(const Dataset& dataset, std::uint64_t seed, std::size_t val_size,
            bool stratify_by_n = false);

// JSONL, one instance per line.
Dataset read_jsonl(std::istream& in);
Dataset load_jsonl(const std::filesystem::path& path);
void write_jsonl(const Dataset& dataset, std::ostream& out);
void save_jsonl(const Dataset& dataset, const std::filesystem::path& path);

std::string instance_to_json_line(const PreferenceInstance& inst);

}  // namespace prefalign::dataset
