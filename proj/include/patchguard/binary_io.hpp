#pragma once

// Little-endian byte encoding shared by the archive and checkpoint formats.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "patchguard/error.hpp"

namespace patchguard::binary {

class Writer {
 public:
  void magic(std::string_view tag) {
    for (char c : tag) bytes_.push_back(static_cast<std::byte>(c));
  }
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<std::byte>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFFu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFFu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void string(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    for (char c : s) bytes_.push_back(static_cast<std::byte>(c));
  }
  void f32s(std::span<const float> values) {
    for (float v : values) f32(v);
  }
  void raw(std::span<const std::byte> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }

  const std::vector<std::byte>& bytes() const { return bytes_; }
  std::vector<std::byte> take() { return std::move(bytes_); }

 private:
  std::vector<std::byte> bytes_;
};

class Reader {
 public:
  // `underflow` is the error kind raised when a read runs past the end.
  Reader(std::span<const std::byte> bytes, ErrorKind underflow)
      : bytes_(bytes), underflow_(underflow) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  void require(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw Error(underflow_, std::string(what) + " needs " + std::to_string(n) + " bytes at offset " +
                                  std::to_string(pos_) + ", " + std::to_string(remaining()) +
                                  " remain");
    }
  }

  bool magic(std::string_view tag) {
    require(tag.size(), "magic");
    const bool ok = std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) == 0;
    pos_ += tag.size();
    return ok;
  }
  std::uint8_t u8(std::string_view what = "u8") {
    require(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32(std::string_view what = "u32") {
    require(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(std::string_view what = "u64") {
    require(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(std::string_view what = "f32") { return std::bit_cast<float>(u32(what)); }
  std::string string(std::string_view what = "string") {
    const std::uint32_t n = u32(what);
    require(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void f32s(std::span<float> out, std::string_view what = "f32 payload") {
    require(out.size() * 4, what);
    for (float& v : out) v = f32(what);
  }
  std::span<const std::byte> raw(std::size_t n, std::string_view what = "payload") {
    require(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
  ErrorKind underflow_;
};

std::vector<std::byte> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace patchguard::binary
