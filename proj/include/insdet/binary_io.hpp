#pragma once

// Little-endian encoding and the 16-byte header shared by every binary file
// the engine reads or writes:
//
//   offset  size  field
//   0       4     magic (ASCII, e.g. "IDOW")
//   4       2     version, u16 = 1
//   6       2     reserved, u16 = 0
//   8       4     first extent, u32 (row count, or p)
//   12      4     second extent, u32 (dimension, or q)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "insdet/core.hpp"

namespace insdet::binary {

inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::uint16_t kFormatVersion = 1;

using Bytes = std::vector<std::uint8_t>;

inline void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f32(Bytes& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(Bytes& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint16_t get_u16(std::span<const std::uint8_t> in, std::size_t at) {
  return static_cast<std::uint16_t>(in[at] | (in[at + 1] << 8));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(in[at + i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(in[at + i]) << (8 * i);
  return v;
}

inline float get_f32(std::span<const std::uint8_t> in, std::size_t at) {
  return std::bit_cast<float>(get_u32(in, at));
}
inline double get_f64(std::span<const std::uint8_t> in, std::size_t at) {
  return std::bit_cast<double>(get_u64(in, at));
}

struct Header {
  std::array<char, 4> magic{};
  std::uint32_t extent0 = 0;
  std::uint32_t extent1 = 0;
};

inline void put_header(Bytes& out, std::string_view magic, std::uint32_t e0, std::uint32_t e1) {
  out.insert(out.end(), magic.begin(), magic.begin() + 4);
  put_u16(out, kFormatVersion);
  put_u16(out, 0);
  put_u32(out, e0);
  put_u32(out, e1);
}

/// Checks magic/version/reserved and payload length. `payload_bytes` maps the
/// two header extents to the exact payload size.
template <typename PayloadSize>
Header parse_header(std::span<const std::uint8_t> in, std::string_view magic,
                    PayloadSize payload_bytes, std::string_view what) {
  const std::string label(what);
  if (in.size() < kHeaderSize) {
    throw Error(ErrorCode::Truncated, label + ": file shorter than the 16-byte header");
  }
  if (std::memcmp(in.data(), magic.data(), 4) != 0) {
    throw Error(ErrorCode::BadMagic, label + ": bad magic, expected \"" + std::string(magic) + "\"");
  }
  const auto version = get_u16(in, 4);
  if (version != kFormatVersion) {
    throw Error(ErrorCode::VersionMismatch,
                label + ": unsupported version " + std::to_string(version));
  }
  if (get_u16(in, 6) != 0) {
    throw Error(ErrorCode::SchemaViolation, label + ": reserved header field is non-zero");
  }
  Header h;
  std::memcpy(h.magic.data(), in.data(), 4);
  h.extent0 = get_u32(in, 8);
  h.extent1 = get_u32(in, 12);
  const std::uint64_t expected = kHeaderSize + payload_bytes(std::uint64_t(h.extent0),
                                                             std::uint64_t(h.extent1));
  if (in.size() < expected) {
    throw Error(ErrorCode::Truncated, label + ": payload truncated, expected " +
                                          std::to_string(expected - kHeaderSize) +
                                          " bytes, found " +
                                          std::to_string(in.size() - kHeaderSize));
  }
  if (in.size() > expected) {
    throw Error(ErrorCode::TrailingData, label + ": " + std::to_string(in.size() - expected) +
                                             " unexpected trailing bytes");
  }
  return h;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::Io, "read failure on " + path.string());
  return bytes;
}

/// Writes to a sibling temp file and renames it over the target, so readers
/// never observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error(ErrorCode::Io, "write failure on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorCode::Io, "cannot rename " + tmp.string() + " to " + path.string());
  }
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace insdet::binary
