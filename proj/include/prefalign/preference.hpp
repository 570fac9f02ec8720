#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace prefalign {

inline constexpr std::size_t kMinImages = 2;
inline constexpr std::size_t kMaxImages = 4;

// One prompt, its candidate images, and the index of the human choice.
struct PreferenceInstance {
  std::string prompt_id;
  std::string prompt;
  std::string user_id;
  std::vector<std::string> image_ids;
  std::size_t preferred_index = 0;

  bool operator==(const PreferenceInstance&) const = default;
};

}  // namespace prefalign
