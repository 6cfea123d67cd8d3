#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ncml/errors.hpp"
#include "ncml/grid.hpp"
#include "ncml/io.hpp"

// Raw grid container: "GRID" magic, u32 sample count, u32 rank, u32 extents,
// u8 bit depth, then count * cells packed u8 values. All integers are
// little-endian. Labels are not persisted. PGM/PPM export is for eyeballing
// samples, not for round-tripping.

namespace ncml {

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

struct ByteReader {
  const std::string& bytes;
  size_t pos = 0;

  std::uint32_t u32(const char* what) {
    if (bytes.size() - pos < 4) throw IoError(std::string("grid file truncated in ") + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }

  std::uint8_t u8(const char* what) {
    if (bytes.size() - pos < 1) throw IoError(std::string("grid file truncated in ") + what);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }
};

}  // namespace detail

inline std::string encode_grid_dataset(const GridDataset& data) {
  data.validate();
  if (data.bit_depth > 8)
    throw ConfigError("grid file: packed u8 values cap the bit depth at 8, got " +
                      std::to_string(data.bit_depth));
  std::string out = "GRID";
  detail::put_u32(out, static_cast<std::uint32_t>(data.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(data.dims.rank()));
  for (std::uint32_t e : data.dims.extents) detail::put_u32(out, e);
  out.push_back(static_cast<char>(data.bit_depth));
  for (const auto& sample : data.samples)
    for (std::int32_t v : sample) out.push_back(static_cast<char>(v));
  return out;
}

inline GridDataset decode_grid_dataset(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "GRID") != 0)
    throw IoError("not a grid file: bad magic");
  detail::ByteReader in{bytes, 4};
  std::uint32_t count = in.u32("sample count");
  std::uint32_t rank = in.u32("rank");
  if (rank == 0 || rank > 8) throw IoError("grid file: implausible rank");
  std::vector<std::uint32_t> extents(rank);
  for (std::uint32_t& e : extents) {
    e = in.u32("extents");
    if (e == 0 || e > 1u << 20) throw IoError("grid file: implausible extent");
  }
  int bit_depth = in.u8("bit depth");
  if (bit_depth < 1 || bit_depth > 8)
    throw IoError("grid file: bit depth " + std::to_string(bit_depth) +
                  " outside the u8 payload range");

  GridDataset data{GridDims{std::move(extents)}, bit_depth, {}, {}};
  const std::int64_t cells = data.dims.cell_count();
  if (bytes.size() - in.pos != static_cast<size_t>(count) * static_cast<size_t>(cells))
    throw IoError("grid file: payload size does not match count * cells");
  const int hi = max_level(bit_depth);
  data.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::vector<std::int32_t> sample(static_cast<size_t>(cells));
    for (std::int64_t c = 0; c < cells; ++c) {
      int v = static_cast<unsigned char>(bytes[in.pos++]);
      if (v > hi)
        throw IoError("grid file: value " + std::to_string(v) + " above level cap " +
                      std::to_string(hi));
      sample[static_cast<size_t>(c)] = v;
    }
    data.samples.push_back(std::move(sample));
  }
  return data;
}

inline void write_grid_dataset(const std::string& path, const GridDataset& data) {
  atomic_write_file(path, encode_grid_dataset(data));
}

inline GridDataset read_grid_dataset(const std::string& path) {
  return decode_grid_dataset(read_file(path));
}

// 8-bit binary PGM of a rank-2 grid, levels stretched to full contrast
inline void write_pgm(const std::string& path, const DiscreteGrid& g) {
  g.validate();
  if (g.dims.rank() != 2) throw ConfigError("pgm export needs a rank-2 grid");
  const int rows = static_cast<int>(g.dims.extents[0]);
  const int cols = static_cast<int>(g.dims.extents[1]);
  std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  const int hi = max_level(g.bit_depth);
  for (std::int32_t v : g.values)
    out.push_back(static_cast<char>(static_cast<int>(v) * 255 / hi));
  atomic_write_file(path, out);
}

// binary PPM of a rank-3 grid with a trailing channel extent of 3
inline void write_ppm(const std::string& path, const DiscreteGrid& g) {
  g.validate();
  if (g.dims.rank() != 3 || g.dims.extents[2] != 3)
    throw ConfigError("ppm export needs a rank-3 grid with 3 channels");
  const int rows = static_cast<int>(g.dims.extents[0]);
  const int cols = static_cast<int>(g.dims.extents[1]);
  std::string out = "P6\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  const int hi = max_level(g.bit_depth);
  for (std::int32_t v : g.values)
    out.push_back(static_cast<char>(static_cast<int>(v) * 255 / hi));
  atomic_write_file(path, out);
}

}  // namespace ncml
