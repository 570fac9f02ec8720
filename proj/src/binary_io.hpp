#pragma once

// Little-endian readers/writers shared by the EMB1, MLP1 and ADP1 formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "prefalign/error.hpp"

namespace prefalign::detail {

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.append(s); }

  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

  void u16(std::uint16_t v) { put_le(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }

  const std::string& data() const noexcept { return buf_; }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
  }

  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool at_end() const noexcept { return pos_ == data_.size(); }

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint8_t u8(const char* what) { return get_le<std::uint8_t>(what); }
  std::uint16_t u16(const char* what) { return get_le<std::uint16_t>(what); }
  std::uint32_t u32(const char* what) { return get_le<std::uint32_t>(what); }
  float f32(const char* what) { return std::bit_cast<float>(get_le<std::uint32_t>(what)); }

  // Throws TruncatedFile unless n more bytes are available.
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) throw TruncatedFile(pos_ + n, data_.size(), what);
  }

 private:
  template <typename U>
  U get_le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(data_[pos_ + i]))
                          << (8 * i));
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view data);

}  // namespace prefalign::detail
