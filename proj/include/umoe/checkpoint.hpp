// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "umoe/common.hpp"

namespace umoe {

// Binary layout, all integers little-endian:
//   "UMOE" | version u32 | count u32 |
//   count × { name_len u16 | name bytes | rank u8 | dims u32[rank] | f32[prod(dims)] }
inline constexpr char kCheckpointMagic[4] = {'U', 'M', 'O', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(std::istream& is) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == EOF) throw FormatError("checkpoint: unexpected end of file");
    v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(c)) << (8 * i));
  }
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<CheckpointEntry>& entries) {
  os.write(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw FormatError("checkpoint: tensor name too long: " + e.name);
    if (e.shape.size() > 0xFF) throw FormatError("checkpoint: rank too large for " + e.name);
    if (numel(e.shape) != e.data.size()) throw FormatError("checkpoint: data/shape mismatch for " + e.name);
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (float f : e.data) detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f));
  }
  if (!os) throw FormatError("checkpoint: write failed");
}

inline std::vector<CheckpointEntry> read_checkpoint(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("checkpoint: bad magic bytes");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(is);
  std::vector<CheckpointEntry> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = detail::get_le<std::uint16_t>(is);
    e.name.resize(len);
    is.read(e.name.data(), len);
    if (!is) throw FormatError("checkpoint: truncated tensor name");
    const auto rank = detail::get_le<std::uint8_t>(is);
    for (std::uint8_t r = 0; r < rank; ++r) e.shape.push_back(detail::get_le<std::uint32_t>(is));
    e.data.resize(numel(e.shape));
    for (auto& f : e.data) f = std::bit_cast<float>(detail::get_le<std::uint32_t>(is));
    out.push_back(std::move(e));
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot open " + path.string() + " for writing");
  write_checkpoint(os, entries);
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path.string());
  return read_checkpoint(is);
}

/// Content fingerprint of a set of entries (names, shapes, values).
inline std::string checkpoint_hash(const std::vector<CheckpointEntry>& entries) {
  Fnv1a h;
  for (const auto& e : entries) {
    h.update(e.name);
    for (auto d : e.shape) {
      const auto d32 = static_cast<std::uint32_t>(d);
      h.update(&d32, sizeof d32);
    }
    h.update(e.data.data(), e.data.size() * sizeof(float));
  }
  return h.hex();
}

}  // namespace umoe
