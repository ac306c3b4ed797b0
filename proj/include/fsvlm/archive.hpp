#pragma once

// Flat binary parameter archive.
//
//   "FSVLMAR1"                      8 bytes magic
//   u64 metadata length, bytes      JSON document
//   u64 entry count
//   per entry: u32 name length, name, u64 rows, u64 cols, rows*cols f64
//   32 bytes                        SHA-256 of everything above
//
// Integers and doubles are little-endian; values round-trip bit-exactly.

#include "fsvlm/errors.hpp"
#include "fsvlm/parameters.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

namespace fsvlm {

static_assert(std::endian::native == std::endian::little, "archive format assumes little-endian");

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(const void* data, std::size_t size) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(data, size, out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size())
    throw std::runtime_error("sha256 failed");
  return out;
}

inline std::string to_hex(const Digest& d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (auto b : d) {
    out += kHex[b >> 4];
    out += kHex[b & 0xF];
  }
  return out;
}

struct NamedMatrix {
  std::string name;
  Matrix value;
};

struct Archive {
  nlohmann::json metadata;
  std::vector<NamedMatrix> entries;

  const Matrix* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e.value;
    return nullptr;
  }
};

namespace archive_detail {

inline constexpr char kMagic[8] = {'F', 'S', 'V', 'L', 'M', 'A', 'R', '1'};

template <typename T>
void put(std::vector<char>& buf, T v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::size_t limit) : buf_(buf), limit_(limit) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void read_doubles(double* dst, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(dst, buf_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > limit_ || pos_ > limit_ - n) throw FormatError("archive truncated");
  }
  const std::vector<char>& buf_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace archive_detail

inline std::vector<char> serialize_archive(const Archive& a) {
  using archive_detail::put;
  std::vector<char> buf(std::begin(archive_detail::kMagic), std::end(archive_detail::kMagic));
  const std::string meta = a.metadata.dump();
  put<std::uint64_t>(buf, meta.size());
  buf.insert(buf.end(), meta.begin(), meta.end());
  put<std::uint64_t>(buf, a.entries.size());
  for (const auto& e : a.entries) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.name.size()));
    buf.insert(buf.end(), e.name.begin(), e.name.end());
    put<std::uint64_t>(buf, static_cast<std::uint64_t>(e.value.rows()));
    put<std::uint64_t>(buf, static_cast<std::uint64_t>(e.value.cols()));
    const auto* p = reinterpret_cast<const char*>(e.value.data());
    buf.insert(buf.end(), p, p + e.value.size() * sizeof(double));
  }
  const Digest d = sha256(buf.data(), buf.size());
  buf.insert(buf.end(), d.begin(), d.end());
  return buf;
}

inline Archive deserialize_archive(const std::vector<char>& buf) {
  if (buf.size() < sizeof(archive_detail::kMagic) + 32) throw FormatError("archive too short");
  if (std::memcmp(buf.data(), archive_detail::kMagic, sizeof(archive_detail::kMagic)) != 0)
    throw FormatError("not a parameter archive");
  const std::size_t body = buf.size() - 32;
  const Digest expected = sha256(buf.data(), body);
  if (std::memcmp(expected.data(), buf.data() + body, 32) != 0)
    throw IntegrityError("archive checksum mismatch");

  archive_detail::Reader r(buf, body);
  r.bytes(sizeof(archive_detail::kMagic));
  Archive a;
  const auto meta_len = r.get<std::uint64_t>();
  try {
    a.metadata = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("archive metadata: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedMatrix e;
    e.name = r.bytes(r.get<std::uint32_t>());
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (rows > (1u << 28) || cols > (1u << 28)) throw FormatError("archive entry too large");
    e.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    r.read_doubles(e.value.data(), static_cast<std::size_t>(rows * cols));
    a.entries.push_back(std::move(e));
  }
  if (r.position() != body) throw FormatError("archive has trailing bytes");
  return a;
}

inline void write_archive(const std::filesystem::path& path, const Archive& a) {
  const auto buf = serialize_archive(a);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write archive " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write on " + path.string());
}

inline Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read archive " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_archive(buf);
}

/// Order-sensitive digest over names, shapes and values.
inline std::string parameter_hash(const ParameterList& params) {
  std::vector<char> buf;
  for (const Parameter* p : params) {
    buf.insert(buf.end(), p->name.begin(), p->name.end());
    archive_detail::put<std::uint64_t>(buf, static_cast<std::uint64_t>(p->value.rows()));
    archive_detail::put<std::uint64_t>(buf, static_cast<std::uint64_t>(p->value.cols()));
    const auto* d = reinterpret_cast<const char*>(p->value.data());
    buf.insert(buf.end(), d, d + p->value.size() * sizeof(double));
  }
  return to_hex(sha256(buf.data(), buf.size()));
}

}  // namespace fsvlm
