#pragma once

// Little-endian byte buffers shared by the EMB1/LBL1/SUB1/CKP1 codecs.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "subalign/errors.hpp"

namespace subalign::io {

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
 public:
  void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

  template <class Range>
  void f32_array(const Range& values) {
    for (double v : values) f32(v);
  }

  [[nodiscard]] const Bytes& bytes() const noexcept { return bytes_; }
  Bytes take() noexcept { return std::move(bytes_); }

 private:
  Bytes bytes_;
};

class ByteReader {
 public:
  ByteReader(const Bytes& bytes, std::string label) : bytes_(bytes), label_(std::move(label)) {}

  void expect_magic(std::string_view tag) {
    need(tag.size(), "magic");
    if (std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) != 0) {
      throw FormatError(label_ + ": bad magic, expected \"" + std::string(tag) + "\"", pos_);
    }
    pos_ += tag.size();
  }

  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f32(const char* field) {
    const std::size_t at = pos_;
    const float f = std::bit_cast<float>(u32(field));
    if (!std::isfinite(f)) throw FormatError(label_ + ": non-finite value in " + field, at);
    return static_cast<double>(f);
  }

  std::vector<double> f32_array(std::size_t count, const char* field) {
    need_payload(count, 4, field);
    std::vector<double> out(count);
    for (double& v : out) v = f32(field);
    return out;
  }

  /// Fails unless a payload of `count` elements of `width` bytes is fully present.
  void need_payload(std::size_t count, std::size_t width, const char* field) const {
    const std::size_t remaining = bytes_.size() - pos_;
    if (width != 0 && count > remaining / width) {
      throw TruncationError(label_ + ": truncated " + field + " payload: header declares " +
                                std::to_string(count) + " elements, " + std::to_string(remaining) +
                                " bytes remain",
                            pos_);
    }
  }

  void expect_end() const {
    if (pos_ != bytes_.size()) {
      throw FormatError(label_ + ": " + std::to_string(bytes_.size() - pos_) +
                            " trailing bytes after declared payload",
                        pos_);
    }
  }

  [[nodiscard]] std::size_t offset() const noexcept { return pos_; }

 private:
  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) {
      throw TruncationError(label_ + ": file ends inside " + std::string(field), pos_);
    }
  }

  const Bytes& bytes_;
  std::string label_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

/// Value after a round trip through 32-bit storage.
inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace subalign::io
