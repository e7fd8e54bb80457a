#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "quantod/error.hpp"

namespace quantod::detail {

// Little-endian encoding into / decoding out of an in-memory byte buffer.

template <typename U>
inline U byteswap_if_big(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xff));
    }
    return out;
  } else {
    return v;
  }
}

class ByteWriter {
 public:
  void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void pad(std::size_t n) { bytes_.insert(bytes_.end(), n, 0); }
  void u32(std::uint32_t v) { raw(byteswap_if_big(v)); }
  void f32(float v) { raw(byteswap_if_big(std::bit_cast<std::uint32_t>(v))); }
  void f64(double v) { raw(byteswap_if_big(std::bit_cast<std::uint64_t>(v))); }

  const std::vector<char>& bytes() const { return bytes_; }

  void write_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open for writing: " + path);
    out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw InputError("write failed: " + path);
  }

 private:
  template <typename U>
  void raw(U v) {
    std::array<char, sizeof(U)> buf;
    std::memcpy(buf.data(), &v, sizeof(U));
    bytes_.insert(bytes_.end(), buf.begin(), buf.end());
  }

  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes, std::string origin)
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    return ByteReader(std::move(bytes), path);
  }

  bool has(std::size_t n) const { return bytes_.size() - pos_ >= n; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& origin() const { return origin_; }

  bool magic(std::string_view tag) {
    if (!has(tag.size())) return false;
    const bool ok = std::string_view(bytes_.data() + pos_, tag.size()) == tag;
    pos_ += tag.size();
    return ok;
  }
  std::uint8_t u8() { need(1); return static_cast<std::uint8_t>(bytes_[pos_++]); }
  void skip(std::size_t n) { need(n); pos_ += n; }
  std::uint32_t u32() { return byteswap_if_big(raw<std::uint32_t>()); }
  float f32() { return std::bit_cast<float>(byteswap_if_big(raw<std::uint32_t>())); }
  double f64() { return std::bit_cast<double>(byteswap_if_big(raw<std::uint64_t>())); }

  void need(std::size_t n) const {
    if (!has(n)) {
      throw FormatError(FormatErrc::kTruncated,
                        origin_ + " ends " + std::to_string(n - remaining()) +
                            " bytes early");
    }
  }

 private:
  template <typename U>
  U raw() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::vector<char> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace quantod::detail
