#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prefalign/hashing.hpp"
#include "prefalign/preference.hpp"

namespace prefalign::ingest {

struct Attachment {
  std::string attachment_id;
  bool uploaded_by_user = false;
  bool nsfw_flag = false;

  bool operator==(const Attachment&) const = default;
};

struct ChatMessage {
  std::string message_id;
  std::string author_id;
  bool is_bot = false;
  std::string content;
  std::vector<Attachment> attachments;
  std::optional<std::string> reply_to;
  std::int64_t timestamp = 0;  // milliseconds since epoch

  bool operator==(const ChatMessage&) const = default;
};

using ChatLog = std::vector<ChatMessage>;

struct InteractionSession {
  std::string prompt;
  ChatMessage generation_message;
  ChatMessage choice_message;
};

// Counts of message subsequences that did not yield a session.
struct ExtractionDiagnostics {
  std::size_t sessions = 0;
  std::size_t unmatched_messages = 0;     // neither generation nor choice
  std::size_t dropped_user_upload = 0;    // choice attaches a user upload
  std::size_t dropped_nsfw = 0;           // flagged generation or choice
  std::size_t dropped_ambiguous = 0;      // several candidate generations
  std::size_t dropped_no_match = 0;       // attachment not in generation
  std::size_t dropped_author_mismatch = 0;
  std::size_t dropped_repeat_choice = 0;  // generation already chosen from

  bool operator==(const ExtractionDiagnostics&) const = default;
};

struct ExtractionResult {
  std::vector<InteractionSession> sessions;
  ExtractionDiagnostics diagnostics;
};

// Parses the normalized chat-export JSON. Accepts either a bare array of
// messages or an object with a "messages" array; unknown fields are ignored.
// Messages come back stably sorted by timestamp.
ChatLog parse_export(std::string_view raw);

// Inverse of parse_export (object form, two-space indent).
std::string serialize_export(const ChatLog& log);

// Recognizes prompt -> generation -> choice:
//  - a generation is a bot message with 2..4 attachments; its prompt is the
//    content of the user message it replies to, or its own content otherwise;
//  - a choice is a user message with exactly one attachment that replies to a
//    generation, or (without reply_to) whose content equals the prompt of
//    earlier generations. The attachment id must match a generation
//    attachment; quoting that matches several generations is ambiguous.
ExtractionResult extract_sessions(const ChatLog& log);

// Replaces author ids with keyed digests.
class Anonymizer {
 public:
  explicit Anonymizer(const HashKey& key) : key_(key) {}
  static Anonymizer from_passphrase(std::string_view passphrase);
  // Fresh random key; report key_hex() if the run needs to be repeatable.
  static Anonymizer random();

  std::string token(std::string_view author_id) const;
  std::string key_hex() const;

 private:
  HashKey key_;
};

// One instance per session; prompt_id is the generation message id.
// Throws DuplicateSession when two sessions share a generation message.
std::vector<PreferenceInstance> sessions_to_instances(
    const std::vector<InteractionSession>& sessions,
    const Anonymizer& anonymizer);

}  // namespace prefalign::ingest
