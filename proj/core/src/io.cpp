#include "tes/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace tes {

Digest sha256(std::span<const std::uint8_t> bytes) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size())
    throw std::runtime_error("sha256: digest computation failed");
  return out;
}

std::string to_hex(const Digest& digest) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (std::uint8_t b : digest) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 15]);
  }
  return s;
}

bool is_zero(const Digest& digest) {
  for (std::uint8_t b : digest)
    if (b) return false;
  return true;
}

// ---- writer ---------------------------------------------------------------------

void ByteWriter::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
void ByteWriter::raw(std::span<const std::uint8_t> data) {
  bytes_.insert(bytes_.end(), data.begin(), data.end());
}
void ByteWriter::raw(std::string_view text) { bytes_.insert(bytes_.end(), text.begin(), text.end()); }
void ByteWriter::str16(std::string_view text) {
  if (text.size() > 0xffff) throw std::length_error("string too long for u16 length prefix");
  u16(static_cast<std::uint16_t>(text.size()));
  raw(text);
}

// ---- reader ---------------------------------------------------------------------

void ByteReader::need(std::size_t n, std::string_view what) const {
  if (remaining() < n)
    throw FormatError("truncated input reading " + std::string(what) + ": expected " +
                          std::to_string(pos_ + n) + " bytes, file has " +
                          std::to_string(bytes_.size()),
                      pos_);
}

std::uint8_t ByteReader::u8() {
  need(1, "u8");
  return bytes_[pos_++];
}
std::uint16_t ByteReader::u16() {
  need(2, "u16");
  std::uint16_t v = 0;
  for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(bytes_[pos_++]) << (8 * i);
  return v;
}
std::uint32_t ByteReader::u32() {
  need(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
  return v;
}
std::uint64_t ByteReader::u64() {
  need(8, "u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
  return v;
}
float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }
std::string ByteReader::raw(std::size_t n) {
  need(n, "bytes");
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}
std::string ByteReader::str16() { return raw(u16()); }

// ---- digests --------------------------------------------------------------------------

DigestBuilder& DigestBuilder::add(std::string_view text) {
  w_.u64(text.size());
  w_.raw(text);
  return *this;
}
DigestBuilder& DigestBuilder::add(std::uint64_t v) {
  w_.u64(v);
  return *this;
}
DigestBuilder& DigestBuilder::add(double v) {
  w_.f64(v);
  return *this;
}
DigestBuilder& DigestBuilder::add(const Digest& d) {
  w_.raw(d);
  return *this;
}

// ---- files ----------------------------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace tes
