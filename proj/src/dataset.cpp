#include "prefalign/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "prefalign/error.hpp"
#include "prefalign/rng.hpp"

namespace prefalign::dataset {

using nlohmann::json;

ValidationReport validate(const Dataset& dataset) {
  ValidationReport report;
  std::unordered_map<std::string, std::size_t> first_seen;
  for (std::size_t i = 0; i < dataset.instances.size(); ++i) {
    const auto& inst = dataset.instances[i];
    const auto n = inst.image_ids.size();
    if (inst.prompt_id.empty()) {
      report.push_back({i, "empty_prompt_id", "prompt_id is empty"});
    } else if (const auto [it, fresh] = first_seen.emplace(inst.prompt_id, i); !fresh) {
      report.push_back({i, "duplicate_prompt_id",
                        "prompt_id '" + inst.prompt_id + "' first seen at " +
                            std::to_string(it->second)});
    }
    if (n < kMinImages || n > kMaxImages) {
      report.push_back({i, "image_count_out_of_range",
                        "expected 2..4 images, got " + std::to_string(n)});
    }
    if (inst.preferred_index >= n) {
      report.push_back({i, "index_out_of_range",
                        "preferred_index " + std::to_string(inst.preferred_index) +
                            " with " + std::to_string(n) + " images"});
    }
    std::unordered_set<std::string_view> ids;
    for (const auto& id : inst.image_ids) {
      if (id.empty()) {
        report.push_back({i, "empty_image_id", "image id is empty"});
      } else if (!ids.insert(id).second) {
        report.push_back({i, "duplicate_image_id", "image '" + id + "' repeated"});
      }
    }
  }
  return report;
}

DatasetStats stats_from_composition(const std::map<std::size_t, std::size_t>& counts) {
  DatasetStats s;
  for (std::size_t n = kMinImages; n <= kMaxImages; ++n) s.counts_by_n[n] = 0;
  for (const auto& [n, c] : counts) {
    s.counts_by_n[n] += c;
    s.total_prompts += c;
    s.total_images += n * c;
  }
  return s;
}

DatasetStats stats(const Dataset& dataset) {
  std::map<std::size_t, std::size_t> counts;
  std::unordered_map<std::string_view, std::size_t> per_user;
  for (const auto& inst : dataset.instances) {
    ++counts[inst.image_ids.size()];
    ++per_user[inst.user_id];
  }
  DatasetStats s = stats_from_composition(counts);
  s.distinct_users = per_user.size();
  for (const auto& [user, c] : per_user) {
    s.max_choices_per_user = std::max(s.max_choices_per_user, c);
  }
  return s;
}

double random_guess_accuracy(const DatasetStats& stats) {
  if (stats.total_prompts == 0) {
    throw Error(ErrorKind::EmptyDataset, "random-guess accuracy needs at least one prompt");
  }
  double expected_hits = 0.0;
  for (const auto& [n, c] : stats.counts_by_n) {
    if (n == 0 || c == 0) continue;
    expected_hits += static_cast<double>(c) / static_cast<double>(n);
  }
  return expected_hits / static_cast<double>(stats.total_prompts);
}

namespace {

// Picks `want` prompt ids from `ids` (sorted first) by seeded shuffle.
void draw_validation(std::vector<std::string> ids, std::size_t want, Rng& rng,
                     std::unordered_set<std::string>& out) {
  std::sort(ids.begin(), ids.end());
  rng.shuffle(std::span<std::string>(ids));
  for (std::size_t i = 0; i < want && i < ids.size(); ++i) out.insert(ids[i]);
}

}  // namespace

Split split(const Dataset& dataset, std::uint64_t seed, std::size_t val_size,
            bool stratify_by_n) {
  const std::size_t total = dataset.size();
  if (val_size > 0 && val_size >= total) {
    throw Error(ErrorKind::ValSizeTooLarge,
                "val_size " + std::to_string(val_size) + " must be below " +
                    std::to_string(total) + " prompts");
  }

  Rng rng(seed);
  std::unordered_set<std::string> val_ids;
  if (!stratify_by_n) {
    std::vector<std::string> ids;
    ids.reserve(total);
    for (const auto& inst : dataset.instances) ids.push_back(inst.prompt_id);
    draw_validation(std::move(ids), val_size, rng, val_ids);
  } else {
    std::map<std::size_t, std::vector<std::string>> strata;
    for (const auto& inst : dataset.instances) {
      strata[inst.image_ids.size()].push_back(inst.prompt_id);
    }
    // Largest-remainder allocation of val_size across strata.
    std::vector<std::pair<std::size_t, std::size_t>> quota;  // (n, count)
    std::vector<std::pair<std::size_t, std::size_t>> remainder;  // (rem, n)
    std::size_t allocated = 0;
    for (const auto& [n, ids] : strata) {
      const std::size_t scaled = ids.size() * val_size;
      quota.emplace_back(n, scaled / total);
      remainder.emplace_back(scaled % total, n);
      allocated += scaled / total;
    }
    std::stable_sort(remainder.begin(), remainder.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; allocated < val_size && k < remainder.size(); ++k, ++allocated) {
      for (auto& q : quota) {
        if (q.first == remainder[k].second) ++q.second;
      }
    }
    for (const auto& [n, want] : quota) {
      draw_validation(strata[n], want, rng, val_ids);
    }
  }

  Split out;
  for (const auto& inst : dataset.instances) {
    (val_ids.count(inst.prompt_id) ? out.val : out.train).instances.push_back(inst);
  }
  return out;
}

std::string instance_to_json_line(const PreferenceInstance& inst) {
  json j = {{"prompt_id", inst.prompt_id},
            {"prompt", inst.prompt},
            {"user_id", inst.user_id},
            {"image_ids", inst.image_ids},
            {"preferred_index", inst.preferred_index}};
  return j.dump();
}

Dataset read_jsonl(std::istream& in) {
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      PreferenceInstance inst;
      inst.prompt_id = j.at("prompt_id").get<std::string>();
      inst.prompt = j.at("prompt").get<std::string>();
      inst.user_id = j.at("user_id").get<std::string>();
      inst.image_ids = j.at("image_ids").get<std::vector<std::string>>();
      const auto idx = j.at("preferred_index").get<long long>();
      if (idx < 0) throw Error(ErrorKind::MalformedInput, "negative preferred_index");
      inst.preferred_index = static_cast<std::size_t>(idx);
      ds.instances.push_back(std::move(inst));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedInput,
                  "dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ds;
}

Dataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  return read_jsonl(in);
}

void write_jsonl(const Dataset& dataset, std::ostream& out) {
  for (const auto& inst : dataset.instances) out << instance_to_json_line(inst) << '\n';
}

void save_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  write_jsonl(dataset, out);
  if (!out) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

}  // namespace prefalign::dataset
