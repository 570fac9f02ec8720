#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace prefalign {

inline constexpr std::size_t kHashKeyBytes = 32;
using HashKey = std::array<std::uint8_t, kHashKeyBytes>;

// Unkeyed BLAKE2b digest of `data`, hex-encoded, `out_bytes` long (16..64).
std::string content_hash_hex(std::string_view data, std::size_t out_bytes = 16);

// Keyed BLAKE2b digest, hex-encoded.
std::string keyed_hash_hex(const HashKey& key, std::string_view data,
                           std::size_t out_bytes = 16);

// First 8 bytes of a keyed digest as an integer.
std::uint64_t keyed_hash_u64(const HashKey& key, std::string_view data);

// Stretches an arbitrary passphrase into a fixed-size key.
HashKey derive_key(std::string_view passphrase);

HashKey random_key();

std::string to_hex(const std::uint8_t* bytes, std::size_t n);

}  // namespace prefalign
