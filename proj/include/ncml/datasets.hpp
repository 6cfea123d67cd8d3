#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ncml/errors.hpp"
#include "ncml/grid.hpp"
#include "ncml/rng.hpp"

// Synthetic desk-scale datasets. Every generator is deterministic in
// (spec, seed): sample i is drawn from its own counter stream, so datasets
// are reproducible and prefix-stable under count changes.

namespace ncml {

struct DatasetSpec {
  std::string generator;  // one of dataset_generator_names()
  std::int64_t count = 1000;
  int bit_depth = 3;
  std::uint64_t seed = 0;
  std::vector<double> ring_radii = {0.4, 0.85};  // mixture-rings-2d only
  double ring_width = 0.08;

  void validate() const {
    if (count < 1) throw ConfigError("dataset: count must be >= 1");
    if (bit_depth < 2 || bit_depth > 4)
      throw ConfigError("dataset: generators produce bit depths in {2, 3, 4}, got " +
                        std::to_string(bit_depth));
    if (ring_radii.empty()) throw ConfigError("dataset: ring_radii must be nonempty");
    for (double r : ring_radii)
      if (!(r > 0.0)) throw ConfigError("dataset: ring radii must be positive");
    if (!(ring_width > 0.0)) throw ConfigError("dataset: ring_width must be positive");
  }
};

inline const std::vector<std::string>& dataset_generator_names() {
  static const std::vector<std::string> names = {
      "checkerboard-2d", "mixture-rings-2d", "textured-patches-8x8"};
  return names;
}

// Per-ring cell probabilities over the 2-D level grid: cell (v0, v1) gets
// weight exp(-(|center| - radius)^2 / (2 width^2)), normalized within the
// ring. This is the sampling law, exposed so tests and reports can compare
// histograms against it.
inline std::vector<std::vector<double>> ring_cell_probs(const DatasetSpec& spec) {
  spec.validate();
  const int levels = 1 << spec.bit_depth;
  std::vector<std::vector<double>> probs;
  probs.reserve(spec.ring_radii.size());
  for (double radius : spec.ring_radii) {
    std::vector<double> p(static_cast<size_t>(levels) * levels);
    double total = 0.0;
    for (int v0 = 0; v0 < levels; ++v0)
      for (int v1 = 0; v1 < levels; ++v1) {
        double rho = std::hypot(rescale_level(v0, spec.bit_depth),
                                rescale_level(v1, spec.bit_depth));
        double dev = (rho - radius) / spec.ring_width;
        double w = std::exp(-0.5 * dev * dev);
        p[static_cast<size_t>(v0 * levels + v1)] = w;
        total += w;
      }
    for (double& w : p) w /= total;
    probs.push_back(std::move(p));
  }
  return probs;
}

// Uniform-weight mixture of the ring laws.
inline std::vector<double> mixture_ring_probs(const DatasetSpec& spec) {
  std::vector<std::vector<double>> rings = ring_cell_probs(spec);
  std::vector<double> p(rings[0].size(), 0.0);
  for (const auto& ring : rings)
    for (size_t i = 0; i < p.size(); ++i) p[i] += ring[i] / rings.size();
  return p;
}

namespace detail {

inline GridDataset checkerboard_2d(const DatasetSpec& spec) {
  GridDataset data{GridDims{{2}}, spec.bit_depth, {}, {}};
  const std::int64_t levels = 1 << spec.bit_depth;
  data.samples.reserve(static_cast<size_t>(spec.count));
  for (std::int64_t i = 0; i < spec.count; ++i) {
    Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(i));
    std::int32_t v0 = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(levels)));
    // second value keeps the parity of the first, so the sum stays even
    std::int32_t v1 = static_cast<std::int32_t>(
        2 * rng.below(static_cast<std::uint64_t>(levels / 2)) + (v0 & 1));
    data.samples.push_back({v0, v1});
  }
  return data;
}

inline GridDataset mixture_rings_2d(const DatasetSpec& spec) {
  std::vector<std::vector<double>> rings = ring_cell_probs(spec);
  const int levels = 1 << spec.bit_depth;
  GridDataset data{GridDims{{2}}, spec.bit_depth, {}, {}};
  data.samples.reserve(static_cast<size_t>(spec.count));
  data.labels.reserve(static_cast<size_t>(spec.count));
  for (std::int64_t i = 0; i < spec.count; ++i) {
    Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(i));
    int ring = static_cast<int>(rng.below(rings.size()));
    const std::vector<double>& p = rings[static_cast<size_t>(ring)];
    double u = rng.uniform();
    double acc = 0.0;
    size_t cell = p.size() - 1;
    for (size_t c = 0; c < p.size(); ++c) {
      acc += p[c];
      if (u <= acc) {
        cell = c;
        break;
      }
    }
    data.samples.push_back({static_cast<std::int32_t>(cell / levels),
                            static_cast<std::int32_t>(cell % levels)});
    data.labels.push_back(ring);
  }
  return data;
}

inline GridDataset textured_patches_8x8(const DatasetSpec& spec) {
  GridDataset data{GridDims{{8, 8}}, spec.bit_depth, {}, {}};
  data.samples.reserve(static_cast<size_t>(spec.count));
  constexpr double kPi = 3.14159265358979323846;
  for (std::int64_t i = 0; i < spec.count; ++i) {
    Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(i));
    double theta = rng.uniform(0.0, kPi);
    double wavelength = rng.uniform(3.0, 8.0);
    double phase = rng.uniform(0.0, 2.0 * kPi);
    double amplitude = rng.uniform(0.6, 1.0);
    double omega = 2.0 * kPi / wavelength;
    std::vector<std::int32_t> patch(64);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) {
        double u = c * std::cos(theta) + r * std::sin(theta);
        patch[static_cast<size_t>(r * 8 + c)] =
            snap_level(amplitude * std::sin(omega * u + phase), spec.bit_depth);
      }
    data.samples.push_back(std::move(patch));
  }
  return data;
}

}  // namespace detail

inline GridDataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  if (spec.generator == "checkerboard-2d") return detail::checkerboard_2d(spec);
  if (spec.generator == "mixture-rings-2d") return detail::mixture_rings_2d(spec);
  if (spec.generator == "textured-patches-8x8") return detail::textured_patches_8x8(spec);
  std::string names;
  for (const std::string& n : dataset_generator_names()) {
    if (!names.empty()) names += ", ";
    names += n;
  }
  throw ConfigError("unknown dataset generator '" + spec.generator +
                    "'; available: " + names);
}

}  // namespace ncml
