#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace prefalign {

enum class ErrorKind {
  MalformedExport,
  MalformedInput,
  DuplicateSession,
  EmptyDataset,
  ValSizeTooLarge,
  BadMagic,
  TruncatedFile,
  DuplicateId,
  NonFiniteValue,
  IoError,
  ZeroVector,
  DimensionMismatch,
  MissingPrediction,
  KeyMismatch,
  EmptySplit,
  InvalidProbabilities,
  TooFewRows,
  NotSymmetric,
  IndefiniteMatrix,
  NumericalFailure,
  MissingFeature,
  MissingEmbedding,
  NonFiniteLoss,
  InvalidArgument,
  InvalidManifest,
  UnknownStudy,
  UnknownPair,
  Conflict,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so callers (the CLI, the
// HTTP layer, tests) can dispatch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class MalformedExport : public Error {
 public:
  // message_index is -1 when the failure precedes any message (syntax errors).
  MalformedExport(std::size_t byte_offset, long message_index,
                  const std::string& detail);

  std::size_t byte_offset() const noexcept { return byte_offset_; }
  long message_index() const noexcept { return message_index_; }

 private:
  std::size_t byte_offset_;
  long message_index_;
};

class TruncatedFile : public Error {
 public:
  TruncatedFile(std::size_t expected_bytes, std::size_t actual_bytes,
                const std::string& what_part);

  std::size_t expected_bytes() const noexcept { return expected_; }
  std::size_t actual_bytes() const noexcept { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

// Errors that name a set of offending ids (missing embeddings, predictions,
// features).
class IdListError : public Error {
 public:
  IdListError(ErrorKind kind, std::vector<std::string> ids,
              std::string_view what_missing);

  const std::vector<std::string>& ids() const noexcept { return ids_; }

 private:
  std::vector<std::string> ids_;
};

}  // namespace prefalign
