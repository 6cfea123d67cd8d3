#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ncml/errors.hpp"
#include "ncml/grid.hpp"
#include "ncml/io.hpp"
#include "ncml/mixture.hpp"
#include "ncml/parallel.hpp"
#include "ncml/rng.hpp"

// Minimal corruption p_pi and the robustness metric built on it: each
// coordinate is independently bumped one level up with probability pi/2,
// one level down with probability pi/2, and left alone otherwise, clamped
// at the range edges. Delta log p compares dataset bpd clean vs corrupted
// at a shared conditioning value t.

namespace ncml {

struct PiSpec {
  double pi = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(pi >= 0.0 && pi <= 1.0))
      throw ConfigError("pi must be in [0, 1], got " + std::to_string(pi));
  }
};

// One grid, one rng. A decrement at 0 and an increment at the top level
// clamp in place, so the effective change probability at a boundary is pi/2.
inline DiscreteGrid perturb_pi(const DiscreteGrid& x, double pi, Rng& rng) {
  if (!(pi >= 0.0) || pi > 1.0)
    throw ConfigError("pi must be in [0, 1], got " + std::to_string(pi));
  DiscreteGrid out = x;
  if (pi == 0.0) return out;
  const std::int32_t top = max_level(x.bit_depth);
  for (auto& v : out.values) {
    double u = rng.uniform();
    if (u < pi / 2.0)
      v = v >= top ? top : v + 1;
    else if (u < pi)
      v = v <= 0 ? 0 : v - 1;
  }
  return out;
}

// Whole-dataset corruption with one rng stream per sample, so the result is
// identical however the work is partitioned or ordered.
inline GridDataset perturb_dataset(const GridDataset& data, const PiSpec& spec) {
  spec.validate();
  GridDataset out = data;
  for (std::int64_t i = 0; i < data.size(); ++i) {
    Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(i));
    DiscreteGrid g = data.sample_grid(i);
    out.samples[static_cast<size_t>(i)] = perturb_pi(g, spec.pi, rng).values;
  }
  return out;
}

// Mean bpd of `fn` over the dataset. `fn(grid, t, label)` returns the
// discretized log density; label is -1 for unlabeled data. Compensated,
// chunk-deterministic summation keeps the result independent of thread
// count and stable under dataset partitioning to ~1e-9.
template <typename LogDensityFn>
double dataset_bpd(const LogDensityFn& fn, const GridDataset& data, double t) {
  if (data.size() == 0) throw ConfigError("dataset_bpd: empty dataset");
  const std::int64_t d = data.dims.cell_count();
  KahanSum total = parallel_reduce<KahanSum>(
      data.size(), [] { return KahanSum{}; },
      [&](KahanSum& acc, std::int64_t i) {
        std::int32_t label = data.labeled() ? data.labels[static_cast<size_t>(i)] : -1;
        double ld = fn(data.sample_grid(i), t, label);
        if (!std::isfinite(ld))
          throw NumericError("non-finite log density at sample " + std::to_string(i));
        acc.add(bits_per_dim_discrete(ld, d));
      },
      [](KahanSum& a, const KahanSum& b) { a.merge(b); });
  return total.mean();
}

// |E_clean bpd - E_corrupted bpd| at conditioning value t
template <typename LogDensityFn>
double delta_logp(const LogDensityFn& fn, const GridDataset& data, const PiSpec& spec,
                  double t) {
  spec.validate();
  double clean = dataset_bpd(fn, data, t);
  if (spec.pi == 0.0) return 0.0;  // identical datasets, identical sums
  GridDataset corrupted = perturb_dataset(data, spec);
  double noisy = dataset_bpd(fn, corrupted, t);
  return std::abs(clean - noisy);
}

struct RobustnessReport {
  double pi = 0.0;
  std::vector<double> t;
  std::vector<double> nll_clean_bpd;
  std::vector<double> nll_pi_bpd;
  std::vector<double> delta_bpd;
};

// Sweeps the conditioning value over t_grid against one fixed corrupted
// dataset (drawn once from spec), so the delta column varies only through
// the model's t response.
template <typename LogDensityFn>
RobustnessReport robustness_sweep(const LogDensityFn& fn, const GridDataset& data,
                                  const PiSpec& spec, const std::vector<double>& t_grid) {
  spec.validate();
  if (t_grid.empty()) throw ConfigError("robustness_sweep: empty t grid");
  GridDataset corrupted = perturb_dataset(data, spec);
  RobustnessReport report;
  report.pi = spec.pi;
  for (double t : t_grid) {
    double clean = dataset_bpd(fn, data, t);
    double noisy = spec.pi == 0.0 ? clean : dataset_bpd(fn, corrupted, t);
    report.t.push_back(t);
    report.nll_clean_bpd.push_back(clean);
    report.nll_pi_bpd.push_back(noisy);
    report.delta_bpd.push_back(std::abs(clean - noisy));
  }
  return report;
}

inline std::string robustness_csv(const RobustnessReport& r) {
  std::string out = "t,nll_clean_bpd,nll_pi_bpd,delta_bpd\n";
  for (size_t i = 0; i < r.t.size(); ++i) {
    out += format_double(r.t[i]) + "," + format_double(r.nll_clean_bpd[i]) + "," +
           format_double(r.nll_pi_bpd[i]) + "," + format_double(r.delta_bpd[i]) + "\n";
  }
  return out;
}

inline std::string robustness_json(const RobustnessReport& r) {
  std::string out = "{\n  \"pi\": " + format_double(r.pi) + ",\n  \"rows\": [\n";
  for (size_t i = 0; i < r.t.size(); ++i) {
    out += "    {\"t\": " + format_double(r.t[i]) +
           ", \"nll_clean_bpd\": " + format_double(r.nll_clean_bpd[i]) +
           ", \"nll_pi_bpd\": " + format_double(r.nll_pi_bpd[i]) +
           ", \"delta_bpd\": " + format_double(r.delta_bpd[i]) + "}";
    out += i + 1 < r.t.size() ? ",\n" : "\n";
  }
  out += "  ]\n}\n";
  return out;
}

inline void write_robustness_report(const RobustnessReport& r, const std::string& csv_path,
                                    const std::string& json_path) {
  atomic_write_file(csv_path, robustness_csv(r));
  atomic_write_file(json_path, robustness_json(r));
}

}  // namespace ncml
