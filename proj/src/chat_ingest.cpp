#include "prefalign/chat_ingest.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "prefalign/error.hpp"

namespace prefalign::ingest {
namespace {

using nlohmann::json;

// Minimal structural walker over already-validated JSON text. Used only to
// recover the byte offset of each message so schema errors can point at it.
class OffsetScanner {
 public:
  explicit OffsetScanner(std::string_view text) : text_(text) {}

  std::vector<std::size_t> message_offsets() {
    pos_ = 0;
    skip_ws();
    if (peek() == '[') return array_elements();
    if (peek() != '{') return {};
    ++pos_;
    while (true) {
      skip_ws();
      if (peek() == '}') return {};
      const std::size_t key_start = pos_;
      skip_string();
      const auto key = text_.substr(key_start + 1, pos_ - key_start - 2);
      skip_ws();
      ++pos_;  // ':'
      skip_ws();
      if (key == "messages" && peek() == '[') return array_elements();
      skip_value();
      skip_ws();
      if (peek() == ',') ++pos_;
      else return {};
    }
  }

 private:
  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

  void skip_ws() {
    while (pos_ < text_.size() &&
           (text_[pos_] == ' ' || text_[pos_] == '\n' || text_[pos_] == '\r' ||
            text_[pos_] == '\t')) {
      ++pos_;
    }
  }

  void skip_string() {
    ++pos_;
    while (pos_ < text_.size() && text_[pos_] != '"') {
      pos_ += text_[pos_] == '\\' ? 2 : 1;
    }
    ++pos_;
  }

  void skip_value() {
    const char c = peek();
    if (c == '"') {
      skip_string();
    } else if (c == '{' || c == '[') {
      int depth = 0;
      while (pos_ < text_.size()) {
        const char d = text_[pos_];
        if (d == '"') {
          skip_string();
          continue;
        }
        if (d == '{' || d == '[') ++depth;
        if (d == '}' || d == ']') --depth;
        ++pos_;
        if (depth == 0) break;
      }
    } else {
      while (pos_ < text_.size() && text_[pos_] != ',' && text_[pos_] != '}' &&
             text_[pos_] != ']') {
        ++pos_;
      }
    }
  }

  std::vector<std::size_t> array_elements() {
    std::vector<std::size_t> out;
    ++pos_;  // '['
    skip_ws();
    if (peek() == ']') return out;
    while (pos_ < text_.size()) {
      skip_ws();
      out.push_back(pos_);
      skip_value();
      skip_ws();
      if (peek() != ',') break;
      ++pos_;
    }
    return out;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

template <typename T>
T required(const json& obj, const char* field, std::size_t offset, long index) {
  const auto it = obj.find(field);
  if (it == obj.end()) {
    throw MalformedExport(offset, index,
                          std::string("missing required field '") + field + "'");
  }
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw MalformedExport(offset, index,
                          std::string("field '") + field + "' has wrong type");
  }
}

bool optional_flag(const json& obj, const char* field, std::size_t offset,
                   long index) {
  const auto it = obj.find(field);
  if (it == obj.end() || it->is_null()) return false;
  if (!it->is_boolean()) {
    throw MalformedExport(offset, index,
                          std::string("field '") + field + "' must be boolean");
  }
  return it->get<bool>();
}

ChatMessage message_from_json(const json& m, std::size_t offset, long index) {
  if (!m.is_object()) throw MalformedExport(offset, index, "message is not an object");
  ChatMessage msg;
  msg.message_id = required<std::string>(m, "message_id", offset, index);
  msg.author_id = required<std::string>(m, "author_id", offset, index);
  msg.is_bot = required<bool>(m, "is_bot", offset, index);
  msg.content = required<std::string>(m, "content", offset, index);
  msg.timestamp = required<std::int64_t>(m, "timestamp", offset, index);
  if (const auto it = m.find("reply_to"); it != m.end() && !it->is_null()) {
    if (!it->is_string()) {
      throw MalformedExport(offset, index, "field 'reply_to' must be a string");
    }
    msg.reply_to = it->get<std::string>();
  }
  if (const auto it = m.find("attachments"); it != m.end() && !it->is_null()) {
    if (!it->is_array()) {
      throw MalformedExport(offset, index, "field 'attachments' must be an array");
    }
    for (const auto& a : *it) {
      if (!a.is_object()) {
        throw MalformedExport(offset, index, "attachment is not an object");
      }
      Attachment att;
      att.attachment_id = required<std::string>(a, "attachment_id", offset, index);
      att.uploaded_by_user = optional_flag(a, "uploaded_by_user", offset, index);
      att.nsfw_flag = optional_flag(a, "nsfw_flag", offset, index);
      msg.attachments.push_back(std::move(att));
    }
  }
  return msg;
}

bool has_distinct_ids(const std::vector<Attachment>& atts) {
  std::unordered_set<std::string_view> seen;
  for (const auto& a : atts) {
    if (!seen.insert(a.attachment_id).second) return false;
  }
  return true;
}

}  // namespace

ChatLog parse_export(std::string_view raw) {
  json doc;
  try {
    doc = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw MalformedExport(e.byte, -1, "invalid JSON");
  }

  const json* messages = nullptr;
  if (doc.is_array()) {
    messages = &doc;
  } else if (doc.is_object() && doc.contains("messages") &&
             doc["messages"].is_array()) {
    messages = &doc["messages"];
  } else {
    throw MalformedExport(0, -1, "expected a message array or {\"messages\": [...]}");
  }

  const auto offsets = OffsetScanner(raw).message_offsets();
  ChatLog log;
  log.reserve(messages->size());
  std::unordered_set<std::string> ids;
  for (std::size_t i = 0; i < messages->size(); ++i) {
    const std::size_t offset = i < offsets.size() ? offsets[i] : 0;
    auto msg = message_from_json((*messages)[i], offset, static_cast<long>(i));
    if (!ids.insert(msg.message_id).second) {
      throw MalformedExport(offset, static_cast<long>(i),
                            "duplicate message_id '" + msg.message_id + "'");
    }
    log.push_back(std::move(msg));
  }
  std::stable_sort(log.begin(), log.end(),
                   [](const ChatMessage& a, const ChatMessage& b) {
                     return a.timestamp < b.timestamp;
                   });
  return log;
}

std::string serialize_export(const ChatLog& log) {
  json messages = json::array();
  for (const auto& m : log) {
    json atts = json::array();
    for (const auto& a : m.attachments) {
      atts.push_back({{"attachment_id", a.attachment_id},
                      {"uploaded_by_user", a.uploaded_by_user},
                      {"nsfw_flag", a.nsfw_flag}});
    }
    json j = {{"message_id", m.message_id},
              {"author_id", m.author_id},
              {"is_bot", m.is_bot},
              {"content", m.content},
              {"attachments", std::move(atts)},
              {"timestamp", m.timestamp}};
    j["reply_to"] = m.reply_to ? json(*m.reply_to) : json(nullptr);
    messages.push_back(std::move(j));
  }
  return json{{"messages", std::move(messages)}}.dump(2) + "\n";
}

ExtractionResult extract_sessions(const ChatLog& log) {
  struct Generation {
    std::size_t message;
    std::string prompt;
    std::optional<std::size_t> prompt_message;
    bool chosen = false;
  };

  ExtractionResult result;
  auto& diag = result.diagnostics;
  std::unordered_map<std::string_view, std::size_t> index_of;
  std::unordered_map<std::size_t, std::size_t> generation_at;  // msg -> gen
  std::unordered_map<std::string, std::vector<std::size_t>> by_prompt;
  std::vector<Generation> generations;
  std::vector<bool> used(log.size(), false);

  auto earlier = [&](const std::optional<std::string>& ref,
                     std::size_t self) -> std::optional<std::size_t> {
    if (!ref) return std::nullopt;
    const auto it = index_of.find(*ref);
    if (it == index_of.end() || it->second >= self) return std::nullopt;
    return it->second;
  };

  for (std::size_t i = 0; i < log.size(); ++i) {
    const ChatMessage& m = log[i];
    index_of.emplace(m.message_id, i);

    if (m.is_bot) {
      const auto n = m.attachments.size();
      if (n < kMinImages || n > kMaxImages || !has_distinct_ids(m.attachments)) {
        continue;
      }
      Generation g{i, m.content, std::nullopt};
      if (const auto parent = earlier(m.reply_to, i);
          parent && !log[*parent].is_bot) {
        g.prompt = log[*parent].content;
        g.prompt_message = *parent;
      }
      generation_at.emplace(i, generations.size());
      by_prompt[g.prompt].push_back(generations.size());
      generations.push_back(std::move(g));
      continue;
    }

    if (m.attachments.size() != 1) continue;

    std::optional<std::size_t> gen;
    if (m.reply_to) {
      const auto parent = earlier(m.reply_to, i);
      if (!parent) continue;
      const auto it = generation_at.find(*parent);
      if (it == generation_at.end()) continue;
      gen = it->second;
    } else {
      const auto it = by_prompt.find(m.content);
      if (it == by_prompt.end()) continue;
      std::vector<std::size_t> open;
      for (const auto g : it->second) {
        if (!generations[g].chosen) open.push_back(g);
      }
      if (open.empty()) {
        ++diag.dropped_repeat_choice;
        continue;
      }
      if (open.size() > 1) {
        ++diag.dropped_ambiguous;
        continue;
      }
      gen = open.front();
    }

    Generation& g = generations[*gen];
    const ChatMessage& gm = log[g.message];
    const Attachment& chosen = m.attachments.front();
    if (chosen.uploaded_by_user) {
      ++diag.dropped_user_upload;
      continue;
    }
    if (g.chosen) {
      ++diag.dropped_repeat_choice;
      continue;
    }
    const bool matches = std::any_of(
        gm.attachments.begin(), gm.attachments.end(),
        [&](const Attachment& a) { return a.attachment_id == chosen.attachment_id; });
    if (!matches) {
      ++diag.dropped_no_match;
      continue;
    }
    const bool nsfw =
        chosen.nsfw_flag ||
        std::any_of(gm.attachments.begin(), gm.attachments.end(),
                    [](const Attachment& a) { return a.nsfw_flag; });
    if (nsfw) {
      ++diag.dropped_nsfw;
      continue;
    }
    if (g.prompt_message && log[*g.prompt_message].author_id != m.author_id) {
      ++diag.dropped_author_mismatch;
      continue;
    }

    g.chosen = true;
    used[g.message] = true;
    used[i] = true;
    if (g.prompt_message) used[*g.prompt_message] = true;
    result.sessions.push_back(InteractionSession{g.prompt, gm, m});
  }

  diag.sessions = result.sessions.size();
  diag.unmatched_messages =
      static_cast<std::size_t>(std::count(used.begin(), used.end(), false));
  return result;
}

Anonymizer Anonymizer::from_passphrase(std::string_view passphrase) {
  return Anonymizer(derive_key(passphrase));
}

Anonymizer Anonymizer::random() { return Anonymizer(random_key()); }

std::string Anonymizer::token(std::string_view author_id) const {
  return "u_" + keyed_hash_hex(key_, author_id, 16);
}

std::string Anonymizer::key_hex() const { return to_hex(key_.data(), key_.size()); }

std::vector<PreferenceInstance> sessions_to_instances(
    const std::vector<InteractionSession>& sessions,
    const Anonymizer& anonymizer) {
  std::vector<PreferenceInstance> out;
  out.reserve(sessions.size());
  std::unordered_set<std::string> seen;
  for (const auto& s : sessions) {
    const auto& gen = s.generation_message;
    if (!seen.insert(gen.message_id).second) {
      throw Error(ErrorKind::DuplicateSession,
                  "generation message '" + gen.message_id +
                      "' appears in more than one session");
    }
    PreferenceInstance inst;
    inst.prompt_id = gen.message_id;
    inst.prompt = s.prompt;
    inst.user_id = anonymizer.token(s.choice_message.author_id);
    const auto& chosen = s.choice_message.attachments.at(0).attachment_id;
    for (std::size_t k = 0; k < gen.attachments.size(); ++k) {
      inst.image_ids.push_back(gen.attachments[k].attachment_id);
      if (gen.attachments[k].attachment_id == chosen) inst.preferred_index = k;
    }
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace prefalign::ingest
