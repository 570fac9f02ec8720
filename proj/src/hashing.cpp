#include "prefalign/hashing.hpp"

#include <sodium.h>

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace prefalign {
namespace {

void ensure_sodium() {
  static const bool ready = sodium_init() >= 0;
  if (!ready) throw std::runtime_error("libsodium initialization failed");
}

std::vector<std::uint8_t> digest(const std::uint8_t* key, std::size_t key_len,
                                 std::string_view data, std::size_t out_bytes) {
  ensure_sodium();
  if (out_bytes < crypto_generichash_BYTES_MIN ||
      out_bytes > crypto_generichash_BYTES_MAX) {
    throw std::invalid_argument("digest length out of range");
  }
  std::vector<std::uint8_t> out(out_bytes);
  crypto_generichash(out.data(), out.size(),
                     reinterpret_cast<const unsigned char*>(data.data()),
                     data.size(), key, key_len);
  return out;
}

}  // namespace

std::string to_hex(const std::uint8_t* bytes, std::size_t n) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(kDigits[bytes[i] >> 4]);
    out.push_back(kDigits[bytes[i] & 0xF]);
  }
  return out;
}

std::string content_hash_hex(std::string_view data, std::size_t out_bytes) {
  const auto d = digest(nullptr, 0, data, out_bytes);
  return to_hex(d.data(), d.size());
}

std::string keyed_hash_hex(const HashKey& key, std::string_view data,
                           std::size_t out_bytes) {
  const auto d = digest(key.data(), key.size(), data, out_bytes);
  return to_hex(d.data(), d.size());
}

std::uint64_t keyed_hash_u64(const HashKey& key, std::string_view data) {
  const auto d = digest(key.data(), key.size(), data, 16);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | d[static_cast<std::size_t>(i)];
  return v;
}

HashKey derive_key(std::string_view passphrase) {
  const auto d = digest(nullptr, 0, passphrase, kHashKeyBytes);
  HashKey key{};
  std::copy(d.begin(), d.end(), key.begin());
  return key;
}

HashKey random_key() {
  ensure_sodium();
  HashKey key{};
  randombytes_buf(key.data(), key.size());
  return key;
}

}  // namespace prefalign
