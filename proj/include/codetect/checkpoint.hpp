#pragma once

// Checkpoint container, format version 1.
//
// All integers are little-endian uint32, all floats little-endian IEEE-754
// binary64, entries stored in registry registration order:
//
//   bytes 0..7   magic "CODETCP1"
//   uint32       format version (1)
//   uint32       mode tag length, then that many bytes (e.g. "collaborative")
//   uint32       epoch counter
//   uint32       number of entries
//   per entry:   uint32 name length, name bytes,
//                uint32 ndim, uint32 dims[ndim],
//                float64 values[prod(dims)]

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "codetect/errors.hpp"
#include "codetect/registry.hpp"

namespace codetect {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

struct CheckpointMeta {
  std::string mode_tag;
  std::uint32_t epoch = 0;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw config_error("checkpoint: truncated file");
  return v;
}

inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& is) {
  const std::uint32_t n = get_u32(is);
  if (n > (1u << 20)) throw config_error("checkpoint: unreasonable string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw config_error("checkpoint: truncated file");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const Registry& reg, const CheckpointMeta& meta,
                            const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw config_error("checkpoint: cannot open '" + path.string() + "' for writing");
  os.write("CODETCP1", 8);
  detail::put_u32(os, 1);
  detail::put_str(os, meta.mode_tag);
  detail::put_u32(os, meta.epoch);
  detail::put_u32(os, static_cast<std::uint32_t>(reg.size()));
  for (int i = 0; i < reg.size(); ++i) {
    const auto& e = reg.entry(i);
    detail::put_str(os, e.name);
    detail::put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(e.value.data()),
             static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  }
  if (!os) throw config_error("checkpoint: write failed for '" + path.string() + "'");
}

// Replaces the registry contents with the file's entries, preserving file
// order as the registration order.
inline CheckpointMeta load_checkpoint(Registry& reg, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw config_error("checkpoint: cannot open '" + path.string() + "'");
  char magic[8] = {};
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "CODETCP1", 8) != 0)
    throw config_error("checkpoint: bad magic in '" + path.string() + "'");
  const std::uint32_t version = detail::get_u32(is);
  if (version != 1) throw config_error("checkpoint: unsupported version");
  CheckpointMeta meta;
  meta.mode_tag = detail::get_str(is);
  meta.epoch = detail::get_u32(is);
  const std::uint32_t n = detail::get_u32(is);
  reg.clear();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = detail::get_str(is);
    const std::uint32_t ndim = detail::get_u32(is);
    if (ndim > 8) throw config_error("checkpoint: unreasonable rank");
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(detail::get_u32(is));
    std::vector<double> vals(static_cast<std::size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(double)));
    if (!is) throw config_error("checkpoint: truncated values");
    reg.add(name, std::move(shape), std::move(vals));
  }
  return meta;
}

}  // namespace codetect
