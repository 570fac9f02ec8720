#include "prefalign/embedding_store.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "binary_io.hpp"
#include "prefalign/error.hpp"

namespace prefalign::emb {
namespace {

constexpr std::string_view kMagic = "EMB1";

template <typename T>
double cosine_impl(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) {
    throw Error(ErrorKind::DimensionMismatch,
                "cosine of vectors with lengths " + std::to_string(u.size()) +
                    " and " + std::to_string(v.size()));
  }
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double a = u[i], b = v[i];
    dot += a * b;
    uu += a * a;
    vv += b * b;
  }
  if (uu == 0.0 || vv == 0.0) throw Error(ErrorKind::ZeroVector, "cosine of a zero vector");
  const double c = dot / (std::sqrt(uu) * std::sqrt(vv));
  return std::clamp(c, -1.0, 1.0);
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(std::size_t dim) : dim_(dim) {
  if (dim == 0) throw Error(ErrorKind::InvalidArgument, "embedding dim must be positive");
}

std::optional<std::span<const float>> EmbeddingMatrix::lookup(std::string_view id) const {
  const auto it = entries_.find(id);
  if (it == entries_.end()) return std::nullopt;
  return std::span<const float>(it->second);
}

void EmbeddingMatrix::insert(std::string id, std::vector<float> values) {
  if (values.size() != dim_) {
    throw Error(ErrorKind::DimensionMismatch,
                "vector '" + id + "' has length " + std::to_string(values.size()) +
                    ", expected " + std::to_string(dim_));
  }
  if (!std::all_of(values.begin(), values.end(), [](float x) { return std::isfinite(x); })) {
    throw Error(ErrorKind::NonFiniteValue, "vector '" + id + "' has a non-finite component");
  }
  if (entries_.contains(id)) throw Error(ErrorKind::DuplicateId, "id '" + id + "' repeated");
  entries_.emplace(std::move(id), std::move(values));
}

void EmbeddingMatrix::insert(std::string id, std::span<const double> values) {
  std::vector<float> narrowed(values.begin(), values.end());
  insert(std::move(id), std::move(narrowed));
}

std::string encode_emb(const EmbeddingMatrix& matrix) {
  detail::ByteWriter w;
  w.bytes(kMagic);
  w.u32(static_cast<std::uint32_t>(matrix.size()));
  w.u32(static_cast<std::uint32_t>(matrix.dim()));
  for (const auto& [id, values] : matrix.entries()) {
    if (id.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw Error(ErrorKind::InvalidArgument, "id longer than 65535 bytes");
    }
    w.u16(static_cast<std::uint16_t>(id.size()));
    w.bytes(id);
    for (float x : values) w.f32(x);
  }
  return w.data();
}

EmbeddingMatrix decode_emb(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(kMagic.size(), "magic") != kMagic) {
    throw Error(ErrorKind::BadMagic, "expected EMB1 header");
  }
  const std::uint32_t count = r.u32("record count");
  const std::uint32_t dim = r.u32("dim");
  if (dim == 0) throw Error(ErrorKind::MalformedInput, "EMB1 dim is zero");
  EmbeddingMatrix m(dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t id_len = r.u16("record id length");
    // Check the whole record up front so the error reports its full extent.
    r.need(id_len + std::size_t{4} * dim, "record body");
    std::string id(r.bytes(id_len, "record id"));
    std::vector<float> values(dim);
    for (auto& x : values) x = r.f32("record values");
    m.insert(std::move(id), std::move(values));
  }
  if (!r.at_end()) {
    throw Error(ErrorKind::MalformedInput,
                std::to_string(r.size() - r.offset()) + " trailing bytes after " +
                    std::to_string(count) + " records");
  }
  return m;
}

EmbeddingMatrix load_emb(const std::filesystem::path& path) {
  return decode_emb(detail::read_file(path));
}

void save_emb(const EmbeddingMatrix& matrix, const std::filesystem::path& path) {
  detail::write_file(path, encode_emb(matrix));
}

double cosine(std::span<const double> u, std::span<const double> v) {
  return cosine_impl(u, v);
}

double cosine(std::span<const float> u, std::span<const float> v) {
  return cosine_impl(u, v);
}

std::vector<double> widen(std::span<const float> v) { return {v.begin(), v.end()}; }

}  // namespace prefalign::emb
