#pragma once

#include <cfenv>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ncml/errors.hpp"

// Quantized grids and their continuous embedding.
//
// A grid sample holds integer values in [0, 2^B - 1] laid out in row-major
// raster order. The continuous embedding rescales values affinely into
// [-1, 1], so one quantization bin spans 2/(2^B - 1) and "one pixel level"
// equals (2^B - 1)/2 in embedded units.

namespace ncml {

struct GridDims {
  std::vector<std::uint32_t> extents;

  int rank() const { return static_cast<int>(extents.size()); }

  std::int64_t cell_count() const {
    std::int64_t n = 1;
    for (std::uint32_t e : extents) n *= static_cast<std::int64_t>(e);
    return n;
  }

  bool operator==(const GridDims& o) const { return extents == o.extents; }
  bool operator!=(const GridDims& o) const { return !(*this == o); }

  std::string to_string() const {
    std::string s;
    for (size_t i = 0; i < extents.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(extents[i]);
    }
    return s.empty() ? "scalar" : s;
  }

  static GridDims validated(std::vector<std::uint32_t> extents) {
    if (extents.empty()) throw ConfigError("grid dims: at least one extent required");
    for (std::uint32_t e : extents)
      if (e == 0) throw ConfigError("grid dims: zero extent in " + GridDims{extents}.to_string());
    return GridDims{std::move(extents)};
  }
};

inline void check_bit_depth(int bit_depth) {
  if (bit_depth < 1 || bit_depth > 16)
    throw ConfigError("bit depth must be in [1, 16], got " + std::to_string(bit_depth));
}

inline int max_level(int bit_depth) { return (1 << bit_depth) - 1; }

// value grid in integer levels, row-major
struct DiscreteGrid {
  GridDims dims;
  int bit_depth = 8;
  std::vector<std::int32_t> values;

  void validate() const {
    check_bit_depth(bit_depth);
    if (static_cast<std::int64_t>(values.size()) != dims.cell_count())
      throw ConfigError("grid value count " + std::to_string(values.size()) +
                        " does not match dims " + dims.to_string());
    int hi = max_level(bit_depth);
    for (std::int32_t v : values)
      if (v < 0 || v > hi)
        throw ConfigError("grid value " + std::to_string(v) + " outside [0, " +
                          std::to_string(hi) + "]");
  }
};

// same layout, embedded coordinates
struct RealVector {
  GridDims dims;
  std::vector<double> values;
};

// v in [0, 2^B-1]  ->  x in [-1, 1]
inline double rescale_level(std::int32_t v, int bit_depth) {
  return 2.0 * static_cast<double>(v) / static_cast<double>(max_level(bit_depth)) - 1.0;
}

// nearest representable level, ties to even, clamped to the valid range
inline std::int32_t snap_level(double x, int bit_depth) {
  double hi = static_cast<double>(max_level(bit_depth));
  double level = (x + 1.0) * 0.5 * hi;
  double r = std::rint(level);  // round-half-even in the default FE mode
  if (r < 0.0) r = 0.0;
  if (r > hi) r = hi;
  return static_cast<std::int32_t>(r);
}

inline RealVector rescale(const DiscreteGrid& g) {
  RealVector out{g.dims, {}};
  out.values.reserve(g.values.size());
  for (std::int32_t v : g.values) out.values.push_back(rescale_level(v, g.bit_depth));
  return out;
}

inline DiscreteGrid snap(const RealVector& x, int bit_depth) {
  DiscreteGrid out{x.dims, bit_depth, {}};
  out.values.reserve(x.values.size());
  for (double v : x.values) out.values.push_back(snap_level(v, bit_depth));
  return out;
}

// embedded units -> integer pixel levels (half-bin = one level step is 2/(2^B-1))
inline double to_pixel_units(double embedded, int bit_depth) {
  return embedded * static_cast<double>(max_level(bit_depth)) / 2.0;
}

struct GridDataset {
  GridDims dims;
  int bit_depth = 8;
  std::vector<std::vector<std::int32_t>> samples;  // each of size dims.cell_count()
  std::vector<std::int32_t> labels;                // empty when unlabeled

  std::int64_t size() const { return static_cast<std::int64_t>(samples.size()); }
  bool labeled() const { return !labels.empty(); }

  void validate() const {
    check_bit_depth(bit_depth);
    const std::int64_t cells = dims.cell_count();
    int hi = max_level(bit_depth);
    for (const auto& s : samples) {
      if (static_cast<std::int64_t>(s.size()) != cells)
        throw ConfigError("dataset sample size " + std::to_string(s.size()) +
                          " does not match dims " + dims.to_string());
      for (std::int32_t v : s)
        if (v < 0 || v > hi)
          throw ConfigError("dataset value " + std::to_string(v) + " outside [0, " +
                            std::to_string(hi) + "]");
    }
    if (!labels.empty() && labels.size() != samples.size())
      throw ConfigError("dataset has " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(samples.size()) + " samples");
  }

  DiscreteGrid sample_grid(std::int64_t i) const {
    return DiscreteGrid{dims, bit_depth, samples[static_cast<size_t>(i)]};
  }
};

}  // namespace ncml
