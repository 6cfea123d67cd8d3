#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ncml/errors.hpp"
#include "ncml/grid.hpp"
#include "ncml/mixture.hpp"
#include "ncml/model.hpp"
#include "ncml/rng.hpp"
#include "ncml/sde.hpp"

// Two-phase sampling: draw from the model's noisy distribution at a start
// scale t* by sequential ancestral sampling, then integrate the reverse SDE
// dx = [f(x,t) - g^2(t) s(x,t)] dt + g(t) dw down to 0 using the model's own
// score, optionally interleaving Langevin corrector steps. Outputs snap to
// bins by round-half-even. Completion clamps a known raster prefix to its
// clean values throughout and restores it exactly at the end.

namespace ncml {

struct SamplerConfig {
  double t_start = 0.0;         // 0 = direct ancestral sampling, no refinement
  int refine_steps = 100;       // N, uniform Euler steps from t_start to 0
  int corrector_steps = 0;      // M Langevin steps after each predictor step
  double corrector_snr = 0.16;  // r
  std::uint64_t seed = 0;

  void validate(const SdeSpec& sde) const {
    if (!(t_start >= 0.0 && t_start <= sde.horizon))
      throw ConfigError("sampler: t_start must lie in [0, horizon]");
    if (refine_steps < 1) throw ConfigError("sampler: refine_steps must be >= 1");
    if (corrector_steps < 0) throw ConfigError("sampler: corrector_steps must be >= 0");
    if (corrector_steps > 0 && !(corrector_snr > 0.0))
      throw ConfigError("sampler: corrector_snr must be positive when the corrector is on");
  }
};

// Sequential coordinate-wise draw from the conditional mixtures at scale t.
// Each dimension's parameters depend only on the coordinates already drawn.
inline RealVector ancestral_sample(const DensityModel& model, double t, Rng& rng,
                                   int cls = -1) {
  const std::int64_t d = model.arch().data_dims();
  RealVector x{model.arch().dims, std::vector<double>(static_cast<size_t>(d), 0.0)};
  for (std::int64_t k = 0; k < d; ++k) {
    MixtureParams p = model.conditional_params(x, t, cls);
    x.values[static_cast<size_t>(k)] = sample_dimension(p, k, rng);
  }
  return x;
}

// Discretized variant: each coordinate is drawn with the exact bin
// probabilities of the discretized mixture; later dimensions condition on
// the rescaled levels.
inline DiscreteGrid ancestral_sample_discrete(const DensityModel& model, double t,
                                              Rng& rng, int cls = -1) {
  const std::int64_t d = model.arch().data_dims();
  const int B = model.arch().bit_depth;
  RealVector x{model.arch().dims, std::vector<double>(static_cast<size_t>(d), 0.0)};
  DiscreteGrid out{model.arch().dims, B,
                   std::vector<std::int32_t>(static_cast<size_t>(d), 0)};
  for (std::int64_t k = 0; k < d; ++k) {
    MixtureParams p = model.conditional_params(x, t, cls);
    std::int32_t v = sample_dimension_discrete(p, k, B, rng);
    out.values[static_cast<size_t>(k)] = v;
    x.values[static_cast<size_t>(k)] = rescale_level(v, B);
  }
  return out;
}

struct LangevinStats {
  std::vector<double> step_sizes;  // epsilon per corrector step
};

// M Langevin steps x <- x + eps*s + sqrt(2 eps) z with eps chosen from the
// signal-to-noise ratio r: eps = 2 (r ||z|| / ||s||)^2. A vanishing score
// norm falls back to the pure random walk eps = 2 r^2.
template <class ScoreFn>
RealVector langevin_correct(const ScoreFn& score, RealVector x, double t, int steps,
                            double snr, Rng& rng, LangevinStats* stats = nullptr) {
  if (steps < 0) throw ConfigError("langevin: steps must be >= 0");
  if (steps > 0 && !(snr > 0.0)) throw ConfigError("langevin: snr must be positive");
  const size_t d = x.values.size();
  std::vector<double> z(d);
  for (int m = 0; m < steps; ++m) {
    for (double& v : z) v = rng.normal();
    RealVector s = score(x, t);
    double zn = 0.0, sn = 0.0;
    for (size_t j = 0; j < d; ++j) {
      zn += z[j] * z[j];
      sn += s.values[j] * s.values[j];
    }
    double ratio = sn > 0.0 ? std::sqrt(zn / sn) : 1.0;
    double eps = 2.0 * (snr * ratio) * (snr * ratio);
    if (stats) stats->step_sizes.push_back(eps);
    double noise = std::sqrt(2.0 * eps);
    for (size_t j = 0; j < d; ++j) x.values[j] += eps * s.values[j] + noise * z[j];
  }
  return x;
}

namespace detail {

inline void check_bounded(const RealVector& x, int step) {
  for (double v : x.values)
    if (!(std::abs(v) <= 1e3))
      throw NumericError("reverse refinement diverged at step " + std::to_string(step));
}

struct NoClamp {
  void operator()(RealVector&) const {}
};

// Integration core shared by refinement and completion. clamp(x) runs after
// every predictor and corrector move; completion uses it to hold observed
// coordinates at their clean values.
template <class ScoreFn, class ClampFn>
RealVector refine_clamped(const ScoreFn& score, RealVector x, double t_start,
                          const SdeSpec& spec, const SamplerConfig& cfg, Rng& rng,
                          const ClampFn& clamp) {
  if (!(t_start > 0.0 && t_start <= spec.horizon))
    throw ConfigError("refine: t_start must lie in (0, horizon]");
  if (cfg.refine_steps < 1) throw ConfigError("refine: refine_steps must be >= 1");
  const int n = cfg.refine_steps;
  const double dt = t_start / n;
  const size_t d = x.values.size();
  for (int i = 0; i < n; ++i) {
    const double t = t_start - i * dt;
    RealVector f = drift(spec, x, t);
    RealVector s = score(x, t);
    const double g = diffusion(spec, t);
    const double gn = g * std::sqrt(dt);
    for (size_t j = 0; j < d; ++j) {
      double rev = f.values[j] - g * g * s.values[j];
      x.values[j] += -rev * dt + gn * rng.normal();
    }
    clamp(x);
    detail::check_bounded(x, i);
    if (cfg.corrector_steps > 0) {
      double t_next = i + 1 == n ? 0.0 : t_start - (i + 1) * dt;
      x = langevin_correct(score, std::move(x), t_next, cfg.corrector_steps,
                           cfg.corrector_snr, rng);
      clamp(x);
      detail::check_bounded(x, i);
    }
  }
  return x;
}

}  // namespace detail

// Euler-Maruyama integration of the reverse SDE from t_start down to 0 in
// cfg.refine_steps uniform steps, with cfg.corrector_steps Langevin steps
// after each predictor step. score(x, t) supplies the score field.
template <class ScoreFn>
RealVector reverse_sde_refine(const ScoreFn& score, RealVector x, double t_start,
                              const SdeSpec& spec, const SamplerConfig& cfg, Rng& rng) {
  return detail::refine_clamped(score, std::move(x), t_start, spec, cfg, rng,
                                detail::NoClamp{});
}

// A raster-order grid whose first cells are known. `known` must be true on
// a contiguous prefix and false afterwards.
struct PartialGrid {
  DiscreteGrid grid;
  std::vector<std::uint8_t> known;

  std::int64_t prefix_length() const {
    if (known.size() != grid.values.size())
      throw ConfigError("completion: mask length does not match the grid");
    std::int64_t n = 0;
    while (n < static_cast<std::int64_t>(known.size()) &&
           known[static_cast<size_t>(n)])
      ++n;
    for (std::int64_t i = n; i < static_cast<std::int64_t>(known.size()); ++i)
      if (known[static_cast<size_t>(i)])
        throw ConfigError("completion: observed cells must form a contiguous prefix");
    return n;
  }
};

// Completion core. The prefix conditions every conditional draw, is reset to
// its clean rescaled values after every refinement step, and is copied back
// verbatim into the output. An empty prefix is unconditional sampling.
inline DiscreteGrid complete_image(const DensityModel& model, const PartialGrid& prefix,
                                   const SdeSpec& sde, const SamplerConfig& cfg,
                                   Rng& rng, int cls = -1) {
  prefix.grid.validate();
  if (prefix.grid.dims != model.arch().dims ||
      prefix.grid.bit_depth != model.arch().bit_depth)
    throw ConfigError("completion: grid does not match the model");
  cfg.validate(sde);
  const std::int64_t n = prefix.prefix_length();
  const std::int64_t d = model.arch().data_dims();
  const int B = model.arch().bit_depth;

  if (cfg.t_start == 0.0) {
    // direct ancestral completion at the clean scale
    RealVector x{model.arch().dims, std::vector<double>(static_cast<size_t>(d), 0.0)};
    DiscreteGrid out = prefix.grid;
    for (std::int64_t k = 0; k < n; ++k)
      x.values[static_cast<size_t>(k)] =
          rescale_level(prefix.grid.values[static_cast<size_t>(k)], B);
    for (std::int64_t k = n; k < d; ++k) {
      MixtureParams p = model.conditional_params(x, 0.0, cls);
      std::int32_t v = sample_dimension_discrete(p, k, B, rng);
      out.values[static_cast<size_t>(k)] = v;
      x.values[static_cast<size_t>(k)] = rescale_level(v, B);
    }
    return out;
  }

  // noisy ancestral phase at t*, prefix held at its clean values
  RealVector x{model.arch().dims, std::vector<double>(static_cast<size_t>(d), 0.0)};
  for (std::int64_t k = 0; k < n; ++k)
    x.values[static_cast<size_t>(k)] =
        rescale_level(prefix.grid.values[static_cast<size_t>(k)], B);
  for (std::int64_t k = n; k < d; ++k) {
    MixtureParams p = model.conditional_params(x, cfg.t_start, cls);
    x.values[static_cast<size_t>(k)] = sample_dimension(p, k, rng);
  }

  // refinement phase, re-clamping the prefix after every step
  auto model_score = [&](const RealVector& xc, double t) {
    return model.score(xc, t, cls);
  };
  auto clamp = [&](RealVector& xc) {
    for (std::int64_t k = 0; k < n; ++k)
      xc.values[static_cast<size_t>(k)] =
          rescale_level(prefix.grid.values[static_cast<size_t>(k)], B);
  };
  x = detail::refine_clamped(model_score, std::move(x), cfg.t_start, sde, cfg, rng,
                             clamp);

  DiscreteGrid out = snap(x, B);
  for (std::int64_t k = 0; k < n; ++k)
    out.values[static_cast<size_t>(k)] = prefix.grid.values[static_cast<size_t>(k)];
  return out;
}

// Noisy ancestral draw at cfg.t_start followed by reverse-SDE refinement to
// the clean scale, snapped to bins.
inline DiscreteGrid two_phase_sample(const DensityModel& model, const SdeSpec& sde,
                                     const SamplerConfig& cfg, Rng& rng, int cls = -1) {
  if (!(cfg.t_start > 0.0))
    throw ConfigError("two-phase sampling needs t_start > 0");
  PartialGrid empty{DiscreteGrid{model.arch().dims, model.arch().bit_depth,
                                 std::vector<std::int32_t>(
                                     static_cast<size_t>(model.arch().data_dims()), 0)},
                    std::vector<std::uint8_t>(
                        static_cast<size_t>(model.arch().data_dims()), 0)};
  return complete_image(model, empty, sde, cfg, rng, cls);
}

// Smallest scale on a uniform grid over (0, horizon] at which the average
// absolute pixel perturbation reaches one pixel unit.
inline double default_start_scale(const SdeSpec& sde, const GridDataset& reference,
                                  int grid_points = 200) {
  if (grid_points < 1) throw ConfigError("default_start_scale: empty grid");
  for (int i = 1; i <= grid_points; ++i) {
    double t = sde.horizon * i / grid_points;
    if (avg_abs_perturbation(sde, t, reference) >= 1.0) return t;
  }
  throw ConfigError(
      "default_start_scale: the horizon never perturbs by a full pixel; "
      "recalibrate the schedule");
}

}  // namespace ncml
