#pragma once

// Little-endian binary encoding shared by the dataset and weight formats, and
// SHA-256 content digests for provenance and stage caching.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tes {

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t position)
      : std::runtime_error(what + " (at byte " + std::to_string(position) + ")"),
        position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> bytes);
std::string to_hex(const Digest& digest);
bool is_zero(const Digest& digest);

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void raw(std::span<const std::uint8_t> data);
  void raw(std::string_view text);
  /// u16 length prefix + bytes.
  void str16(std::string_view text);

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string raw(std::size_t n);
  std::string str16();

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  /// Throws FormatError naming expected vs actual size when fewer than n bytes remain.
  void need(std::size_t n, std::string_view what) const;

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

/// Incremental digest input used to key cached pipeline stages.
class DigestBuilder {
 public:
  DigestBuilder& add(std::string_view text);
  DigestBuilder& add(std::uint64_t v);
  DigestBuilder& add(double v);
  DigestBuilder& add(const Digest& d);
  Digest finish() const { return sha256(w_.bytes()); }

 private:
  ByteWriter w_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes via a temporary file and rename so readers never see partial files.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace tes
