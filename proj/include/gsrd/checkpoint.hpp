#pragma once

// MG3D checkpoint container: "MG3D", u32 version, u64 entry count, then per
// entry (u32 name length, name, u8 rank, u64 dims, f32 payload), all little
// endian, followed by a CRC32 of everything before it.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gsrd/errors.hpp"
#include "gsrd/nn.hpp"

namespace gsrd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if (bytes_.size() - pos_ < sizeof(T))
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
    unsigned char b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::set<std::string> seen;
  std::string out = "MG3D";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, entries.size());
  for (const auto& e : entries) {
    if (!seen.insert(e.name).second) throw CheckpointError("duplicate checkpoint entry " + e.name);
    if (e.dims.size() > 255) throw CheckpointError("rank too large for " + e.name);
    if (e.numel() != e.data.size()) throw CheckpointError("payload size mismatch for " + e.name);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) detail::put_le<std::uint64_t>(out, d);
    for (float v : e.data) detail::put_le<float>(out, v);
  }
  detail::put_le<std::uint32_t>(out, detail::crc32_of(out));
  return out;
}

inline std::vector<CheckpointEntry> decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 + 4 + 8 + 4) throw CheckpointError("checkpoint too short");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  detail::Reader tail(bytes.substr(bytes.size() - 4));
  if (tail.get<std::uint32_t>("crc") != detail::crc32_of(body)) throw CheckpointError("checkpoint CRC mismatch");
  detail::Reader r(body);
  if (r.take(4, "magic") != "MG3D") throw CheckpointError("bad checkpoint magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>("entry count");
  std::vector<CheckpointEntry> entries;
  std::set<std::string> seen;
  for (std::uint64_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const auto len = r.get<std::uint32_t>("name length");
    e.name = std::string(r.take(len, "name"));
    if (!seen.insert(e.name).second) throw CheckpointError("duplicate checkpoint entry " + e.name);
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t d = 0; d < rank; ++d) e.dims.push_back(r.get<std::uint64_t>("dims"));
    const auto n = e.numel();
    if (n > r.remaining() / 4) throw CheckpointError("payload of " + e.name + " exceeds file size");
    e.data.resize(n);
    for (auto& v : e.data) v = r.get<float>("payload");
    entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint entries");
  return entries;
}

inline std::vector<CheckpointEntry> to_entries(const ParamStore& store) {
  std::vector<CheckpointEntry> out;
  for (const auto& p : store.entries()) {
    CheckpointEntry e;
    e.name = p.name;
    e.dims = {p.value.rows(), p.value.cols()};
    e.data.reserve(p.value.size());
    for (double v : p.value.data()) e.data.push_back(static_cast<float>(v));
    out.push_back(std::move(e));
  }
  return out;
}

/// Copies matching entries into `store`. Every store parameter whose name
/// starts with one of `required` must be present with the same shape;
/// entries unknown to the store are ignored. Returns the number loaded.
inline std::size_t load_into(ParamStore& store, const std::vector<CheckpointEntry>& entries,
                             const std::vector<std::string>& required = {""}) {
  std::size_t loaded = 0;
  std::set<std::string> have;
  for (const auto& e : entries) {
    if (!store.contains(e.name)) continue;
    Value p = store.get(e.name);
    if (e.dims.size() != 2 || e.dims[0] != p.rows() || e.dims[1] != p.cols()) {
      std::ostringstream o;
      o << "shape mismatch for " << e.name << ": checkpoint [";
      for (std::size_t k = 0; k < e.dims.size(); ++k) o << (k ? " x " : "") << e.dims[k];
      o << "] vs model " << p.shape();
      throw CheckpointError(o.str());
    }
    auto d = p.mutable_data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = static_cast<double>(e.data[k]);
    have.insert(e.name);
    ++loaded;
  }
  for (const auto& p : store.entries())
    for (const auto& prefix : required)
      if (p.name.rfind(prefix, 0) == 0 && have.count(p.name) == 0)
        throw CheckpointError("checkpoint lacks parameter " + p.name);
  return loaded;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path);
}

inline void save_checkpoint(const std::string& path, const ParamStore& store) {
  write_file(path, encode_checkpoint(to_entries(store)));
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace gsrd
