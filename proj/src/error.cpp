#include "prefalign/error.hpp"

#include <utility>

namespace prefalign {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedExport: return "MalformedExport";
    case ErrorKind::MalformedInput: return "MalformedInput";
    case ErrorKind::DuplicateSession: return "DuplicateSession";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::ValSizeTooLarge: return "ValSizeTooLarge";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::DuplicateId: return "DuplicateId";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::MissingPrediction: return "MissingPrediction";
    case ErrorKind::KeyMismatch: return "KeyMismatch";
    case ErrorKind::EmptySplit: return "EmptySplit";
    case ErrorKind::InvalidProbabilities: return "InvalidProbabilities";
    case ErrorKind::TooFewRows: return "TooFewRows";
    case ErrorKind::NotSymmetric: return "NotSymmetric";
    case ErrorKind::IndefiniteMatrix: return "IndefiniteMatrix";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
    case ErrorKind::MissingFeature: return "MissingFeature";
    case ErrorKind::MissingEmbedding: return "MissingEmbedding";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::InvalidManifest: return "InvalidManifest";
    case ErrorKind::UnknownStudy: return "UnknownStudy";
    case ErrorKind::UnknownPair: return "UnknownPair";
    case ErrorKind::Conflict: return "Conflict";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message),
      kind_(kind) {}

MalformedExport::MalformedExport(std::size_t byte_offset, long message_index,
                                 const std::string& detail)
    : Error(ErrorKind::MalformedExport,
            detail + " (byte " + std::to_string(byte_offset) +
                (message_index >= 0
                     ? ", message " + std::to_string(message_index)
                     : std::string()) +
                ")"),
      byte_offset_(byte_offset),
      message_index_(message_index) {}

TruncatedFile::TruncatedFile(std::size_t expected_bytes,
                             std::size_t actual_bytes,
                             const std::string& what_part)
    : Error(ErrorKind::TruncatedFile,
            "file ends inside " + what_part + ": expected at least " +
                std::to_string(expected_bytes) + " bytes, got " +
                std::to_string(actual_bytes)),
      expected_(expected_bytes),
      actual_(actual_bytes) {}

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
  constexpr std::size_t kShown = 10;
  std::string out;
  for (std::size_t i = 0; i < ids.size() && i < kShown; ++i) {
    if (i) out += ", ";
    out += ids[i];
  }
  if (ids.size() > kShown) {
    out += ", ... (" + std::to_string(ids.size()) + " total)";
  }
  return out;
}

}  // namespace

IdListError::IdListError(ErrorKind kind, std::vector<std::string> ids,
                         std::string_view what_missing)
    : Error(kind, std::string(what_missing) + ": " + join_ids(ids)),
      ids_(std::move(ids)) {}

}  // namespace prefalign
