#include "prefalign/curation.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "prefalign/error.hpp"

namespace prefalign::curation {

using nlohmann::json;

GroupingResult group_by_prompt(const std::vector<ScoredItem>& items) {
  GroupingResult out;
  std::unordered_map<std::string, std::size_t> slot;
  std::set<std::pair<std::string_view, std::string_view>> seen;
  for (const auto& item : items) {
    if (!std::isfinite(item.hps)) {
      throw Error(ErrorKind::NonFiniteValue, "non-finite HPS for image '" + item.image_id + "'");
    }
    if (!seen.emplace(item.prompt, item.image_id).second) {
      ++out.duplicates_dropped;
      continue;
    }
    const auto [it, fresh] = slot.emplace(item.prompt, out.groups.size());
    if (fresh) out.groups.push_back(CurationGroup{item.prompt, {}});
    out.groups[it->second].members.push_back(Member{item.image_id, item.hps});
  }
  return out;
}

Selection softmax_select(const CurationGroup& group, double alpha, Direction direction) {
  if (group.members.empty()) {
    throw Error(ErrorKind::InvalidArgument, "softmax selection over an empty group");
  }
  const double sign = direction == Direction::Preferred ? 1.0 : -1.0;
  const std::size_t n = group.members.size();

  Selection sel;
  double top = sign * group.members[0].hps;
  for (std::size_t i = 1; i < n; ++i) {
    const double v = sign * group.members[i].hps;
    if (v > top) {
      top = v;
      sel.candidate = i;
    }
  }
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = sign * group.members[i].hps;
    if (i != sel.candidate && v == top) sel.tie = true;
    z += std::exp(v - top);
  }
  sel.probability = 1.0 / z;  // exp(top - top) / z
  sel.threshold = alpha / static_cast<double>(n);
  sel.accepted = sel.probability > sel.threshold;
  return sel;
}

std::string tag_caption(std::string_view prompt, bool preferred, std::string_view identifier) {
  if (preferred) return std::string(prompt);
  std::string out;
  out.reserve(identifier.size() + 1 + prompt.size());
  out.append(identifier).append(" ").append(prompt);
  return out;
}

void CurationConfig::check() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw Error(ErrorKind::InvalidArgument, "alpha must be positive");
  }
  if (identifier.empty()) throw Error(ErrorKind::InvalidArgument, "identifier must be nonempty");
}

Manifest build_manifest(const std::vector<CurationGroup>& groups, const CurationConfig& config,
                        const std::vector<RegularizationItem>& regularization) {
  config.check();
  Manifest m;
  auto& sum = m.summary;
  for (const auto& group : groups) {
    if (group.members.empty()) continue;
    ++sum.groups;
    const auto best = softmax_select(group, config.alpha, Direction::Preferred);
    const auto worst = softmax_select(group, config.alpha, Direction::NonPreferred);
    if (best.tie || worst.tie) {
      ++sum.ties;
      sum.warnings.push_back("tie at the extreme HPS for prompt '" + group.prompt +
                             "'; lowest index used");
    }
    if (best.accepted) {
      m.entries.push_back({group.members[best.candidate].image_id,
                           tag_caption(group.prompt, true, config.identifier),
                           Source::Generated, true});
      ++sum.preferred;
    }
    if (worst.accepted) {
      m.entries.push_back({group.members[worst.candidate].image_id,
                           tag_caption(group.prompt, false, config.identifier),
                           Source::Generated, false});
      ++sum.non_preferred;
    }
    if (best.accepted && worst.accepted && best.candidate == worst.candidate) {
      sum.warnings.push_back("image '" + group.members[best.candidate].image_id +
                             "' selected as both preferred and non-preferred");
    }
  }
  for (const auto& reg : regularization) {
    m.entries.push_back({reg.image_id, reg.caption, Source::Regularization, std::nullopt});
    ++sum.regularization;
  }
  return m;
}

namespace {

template <typename F>
void for_each_json_line(std::istream& in, const char* what, F&& fn) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedInput,
                  std::string(what) + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace

std::vector<ScoredItem> read_scored_items(std::istream& in) {
  std::vector<ScoredItem> items;
  for_each_json_line(in, "scored items", [&](const json& j) {
    items.push_back({j.at("prompt").get<std::string>(), j.at("image_id").get<std::string>(),
                     j.at("hps").get<double>()});
  });
  return items;
}

std::vector<RegularizationItem> read_regularization(std::istream& in) {
  std::vector<RegularizationItem> items;
  for_each_json_line(in, "regularization", [&](const json& j) {
    items.push_back({j.at("image_id").get<std::string>(), j.at("caption").get<std::string>()});
  });
  return items;
}

void write_manifest(const Manifest& manifest, std::ostream& out) {
  for (const auto& e : manifest.entries) {
    json j = {{"image_id", e.image_id},
              {"caption", e.caption},
              {"source", e.source == Source::Generated ? "generated" : "regularization"}};
    if (e.preferred) j["preferred"] = *e.preferred;
    out << j.dump() << '\n';
  }
}

std::string summary_json(const ManifestSummary& s) {
  return json{{"groups", s.groups},
              {"preferred", s.preferred},
              {"non_preferred", s.non_preferred},
              {"regularization", s.regularization},
              {"ties", s.ties},
              {"warnings", s.warnings}}
      .dump();
}

}  // namespace prefalign::curation
