#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "afa/types.hpp"

// Little-endian archive primitives with a trailing FNV-1a checksum.
namespace afa::binio {

static_assert(std::endian::native == std::endian::little, "archives assume a little-endian host");

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  void bytes(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
    os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void i64(std::int64_t v) { bytes(&v, sizeof v); }
  void doubles(const double* d, std::size_t n) { bytes(d, n * sizeof(double)); }
  void string(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void finish() {
    const std::uint64_t h = hash_;
    os_.write(reinterpret_cast<const char*>(&h), sizeof h);
  }

 private:
  std::ostream& os_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  void bytes(void* data, std::size_t len) {
    is_.read(static_cast<char*>(data), static_cast<std::streamsize>(len));
    if (static_cast<std::size_t>(is_.gcount()) != len) throw CorruptArchiveError("archive truncated");
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  void doubles(double* d, std::size_t n) { bytes(d, n * sizeof(double)); }
  std::string string(std::size_t max_len = 1u << 26) {
    const auto n = u64();
    if (n > max_len) throw CorruptArchiveError("archive string length implausible");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  void verify_checksum() {
    const std::uint64_t expected = hash_;
    std::uint64_t stored = 0;
    is_.read(reinterpret_cast<char*>(&stored), sizeof stored);
    if (is_.gcount() != sizeof stored) throw CorruptArchiveError("archive checksum missing");
    if (stored != expected) throw CorruptArchiveError("archive checksum mismatch");
  }

 private:
  std::istream& is_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace afa::binio
