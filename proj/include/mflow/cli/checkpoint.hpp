#pragma once

// Binary checkpoint, all integers and floats little-endian:
//   "MFLOWCKP"                       8-byte magic
//   u32 version
//   u32 entry count, then per entry:  u32 len, key bytes, u32 len, value bytes
//   u32 array count, then per array:  u32 len, name bytes, u64 rows, u64 cols, rows*cols f64 (row-major)
//   u32 CRC-32 of every preceding byte
// The whole file is read and verified before anything is decoded, so a
// corrupted file never yields a partial model.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <boost/crc.hpp>

#include "mflow/io/csv.hpp"
#include "mflow/ndiff/tensor.hpp"

namespace mflow::cli {

inline constexpr char kCheckpointMagic[8] = {'M', 'F', 'L', 'O', 'W', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public io::FormatError {
 public:
  using io::FormatError::FormatError;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, nd::Array> arrays;
  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

inline std::uint32_t crc32(const char* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : b_(bytes), end_(end) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  bool done() const { return pos_ == end_; }

 private:
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw CheckpointError("checkpoint: truncated payload");
  }
  const std::string& b_;
  std::size_t end_;
  std::size_t pos_ = sizeof kCheckpointMagic + 4;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    detail::put_string(out, k);
    detail::put_string(out, v);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& [name, a] : c.arrays) {
    detail::put_string(out, name);
    detail::put_u64(out, static_cast<std::uint64_t>(a.rows()));
    detail::put_u64(out, static_cast<std::uint64_t>(a.cols()));
    for (Eigen::Index i = 0; i < a.size(); ++i) detail::put_u64(out, std::bit_cast<std::uint64_t>(a.data()[i]));
  }
  detail::put_u32(out, detail::crc32(out.data(), out.size()));
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  const std::size_t header = sizeof kCheckpointMagic + 4;
  if (bytes.size() < header + 4 || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw CheckpointError("checkpoint: not an mflow checkpoint (bad magic or truncated header)");
  }
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: format version " + std::to_string(version) + " is not supported (this build reads version " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
  if (stored != detail::crc32(bytes.data(), body)) throw CheckpointError("checkpoint: checksum mismatch (file is corrupted or truncated)");

  Checkpoint c;
  detail::Reader r(bytes, body);
  for (auto n = r.u32(); n > 0; --n) {
    auto k = r.str();
    c.meta[k] = r.str();
  }
  for (auto n = r.u32(); n > 0; --n) {
    auto name = r.str();
    const auto rows = r.u64(), cols = r.u64();
    if (cols != 0 && rows > (body / 8) / cols) throw CheckpointError("checkpoint: array '" + name + "' is larger than the file");
    nd::Array a(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = r.f64();
    c.arrays.emplace(std::move(name), std::move(a));
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes before the checksum");
  return c;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io::FormatError("cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw io::FormatError("write to '" + path + "' failed");
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

// CRC-32 of a verified checkpoint's body as 8 hex digits; identifies a
// checkpoint in reports. The trailer is excluded: a CRC over data plus its own
// CRC is the same constant for every file.
inline std::string checkpoint_hash(const std::string& path) {
  const auto bytes = read_file(path);
  (void)decode_checkpoint(bytes);
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", detail::crc32(bytes.data(), bytes.size() - 4));
  return buf;
}

}  // namespace mflow::cli
