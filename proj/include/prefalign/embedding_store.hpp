#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace prefalign::emb {

// Read-only access to id-keyed vectors of a fixed dimension. Stands in for
// the image and text encoders, whose outputs arrive as files.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dim() const = 0;
  virtual std::optional<std::span<const float>> lookup(std::string_view id) const = 0;
};

class EmbeddingMatrix final : public EmbeddingProvider {
 public:
  explicit EmbeddingMatrix(std::size_t dim);

  std::size_t dim() const override { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  std::optional<std::span<const float>> lookup(std::string_view id) const override;

  // Throws DimensionMismatch, DuplicateId or NonFiniteValue.
  void insert(std::string id, std::vector<float> values);
  // Widens to 64-bit before insertion checks.
  void insert(std::string id, std::span<const double> values);

  // Entries in lexicographic id order.
  const std::map<std::string, std::vector<float>, std::less<>>& entries() const noexcept {
    return entries_;
  }

  bool operator==(const EmbeddingMatrix& other) const {
    return dim_ == other.dim_ && entries_ == other.entries_;
  }

 private:
  std::size_t dim_;
  std::map<std::string, std::vector<float>, std::less<>> entries_;
};

// EMB1, little-endian: "EMB1", u32 count, u32 dim, then per record
// u16 id length, id bytes, dim f32 values. Records in lexicographic id order.
std::string encode_emb(const EmbeddingMatrix& matrix);
EmbeddingMatrix decode_emb(std::string_view bytes);

EmbeddingMatrix load_emb(const std::filesystem::path& path);
void save_emb(const EmbeddingMatrix& matrix, const std::filesystem::path& path);

// u.v / (|u||v|) in double precision, clamped to [-1, 1].
// Throws DimensionMismatch or ZeroVector.
double cosine(std::span<const double> u, std::span<const double> v);
double cosine(std::span<const float> u, std::span<const float> v);

std::vector<double> widen(std::span<const float> v);

}  // namespace prefalign::emb
