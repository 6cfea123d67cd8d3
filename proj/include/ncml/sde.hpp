#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "ncml/errors.hpp"
#include "ncml/grid.hpp"
#include "ncml/parallel.hpp"
#include "ncml/rng.hpp"

// Forward diffusion schedules: variance exploding, variance preserving, and
// sub-variance-preserving processes dx = f(x,t)dt + g(t)dw over t in [0, T],
// together with their closed-form marginal kernels x_t | x_0 ~ N(alpha x_0,
// sigma^2 I). Data is assumed affinely rescaled to [-1, 1] (data_scale = 1)
// before any schedule math.

namespace ncml {

enum class SdeKind { VE, VP, SubVP };

inline SdeKind parse_sde_kind(const std::string& s) {
  if (s == "ve") return SdeKind::VE;
  if (s == "vp") return SdeKind::VP;
  if (s == "subvp") return SdeKind::SubVP;
  throw ConfigError("unknown sde kind '" + s + "' (expected ve, vp, or subvp)");
}

inline std::string to_string(SdeKind k) {
  switch (k) {
    case SdeKind::VE: return "ve";
    case SdeKind::VP: return "vp";
    case SdeKind::SubVP: return "subvp";
  }
  throw ConfigError("invalid sde kind value");
}

struct SdeSpec {
  SdeKind kind = SdeKind::VP;
  double sigma_min = 0.01;  // VE endpoints
  double sigma_max = 50.0;
  double beta_min = 0.1;    // VP / sub-VP endpoints
  double beta_max = 20.0;
  double horizon = 0.1;     // T
  double data_scale = 1.0;  // half-range of the rescaled pixel domain

  void validate() const {
    if (!(sigma_min > 0.0) || !(sigma_min < sigma_max))
      throw ConfigError("sde: require 0 < sigma_min < sigma_max");
    if (!(beta_min > 0.0) || !(beta_min < beta_max))
      throw ConfigError("sde: require 0 < beta_min < beta_max");
    if (!(horizon > 0.0) || !(horizon <= 1.0))
      throw ConfigError("sde: require 0 < T <= 1, got " + std::to_string(horizon));
    if (!(data_scale > 0.0)) throw ConfigError("sde: require data_scale > 0");
  }

  // horizons chosen so the end-of-horizon perturbation std lands near 10
  // eight-bit pixel units under the default endpoint constants
  static SdeSpec defaults(SdeKind kind) {
    SdeSpec s;
    s.kind = kind;
    switch (kind) {
      case SdeKind::VE: s.horizon = 0.5; break;
      case SdeKind::VP: s.horizon = 0.1; break;
      case SdeKind::SubVP: s.horizon = 0.025; break;
    }
    return s;
  }
};

struct MarginalKernel {
  double mean_scale = 1.0;  // alpha(t)
  double std = 0.0;         // sigma(t)
};

namespace detail {
inline void check_time(const SdeSpec& spec, double t) {
  if (!(t >= 0.0) || !(t <= spec.horizon))
    throw NumericError("sde: t=" + std::to_string(t) + " outside [0, " +
                       std::to_string(spec.horizon) + "]");
}
}  // namespace detail

// beta(t), linear ramp over the horizon
inline double sde_beta(const SdeSpec& spec, double t) {
  detail::check_time(spec, t);
  return spec.beta_min + (t / spec.horizon) * (spec.beta_max - spec.beta_min);
}

// B(t) = integral of beta over [0, t]
inline double sde_beta_integral(const SdeSpec& spec, double t) {
  detail::check_time(spec, t);
  return spec.beta_min * t + (t * t / (2.0 * spec.horizon)) * (spec.beta_max - spec.beta_min);
}

inline RealVector drift(const SdeSpec& spec, const RealVector& x, double t) {
  detail::check_time(spec, t);
  RealVector out{x.dims, x.values};
  if (spec.kind == SdeKind::VE) {
    for (double& v : out.values) v = 0.0;
  } else {
    double c = -0.5 * sde_beta(spec, t);
    for (double& v : out.values) v *= c;
  }
  return out;
}

inline double diffusion(const SdeSpec& spec, double t) {
  detail::check_time(spec, t);
  switch (spec.kind) {
    case SdeKind::VE: {
      double ratio = spec.sigma_max / spec.sigma_min;
      return spec.sigma_min * std::pow(ratio, t / spec.horizon) *
             std::sqrt(2.0 * std::log(ratio) / spec.horizon);
    }
    case SdeKind::VP:
      return std::sqrt(sde_beta(spec, t));
    case SdeKind::SubVP: {
      double B = sde_beta_integral(spec, t);
      return std::sqrt(sde_beta(spec, t) * (1.0 - std::exp(-2.0 * B)));
    }
  }
  throw NumericError("sde: invalid kind");
}

inline MarginalKernel marginal(const SdeSpec& spec, double t) {
  detail::check_time(spec, t);
  MarginalKernel k;
  switch (spec.kind) {
    case SdeKind::VE:
      // sigma(0) = sigma_min rather than exactly 0; perturbing at t=0 adds
      // noise of std sigma_min
      k.mean_scale = 1.0;
      k.std = spec.sigma_min * std::pow(spec.sigma_max / spec.sigma_min, t / spec.horizon);
      break;
    case SdeKind::VP: {
      double B = sde_beta_integral(spec, t);
      k.mean_scale = std::exp(-0.5 * B);
      k.std = spec.data_scale * std::sqrt(-std::expm1(-B));
      break;
    }
    case SdeKind::SubVP: {
      double B = sde_beta_integral(spec, t);
      k.mean_scale = std::exp(-0.5 * B);
      k.std = spec.data_scale * (-std::expm1(-B));
      break;
    }
  }
  return k;
}

inline RealVector perturb(const SdeSpec& spec, const RealVector& x0, double t, Rng& rng) {
  MarginalKernel k = marginal(spec, t);
  RealVector out{x0.dims, {}};
  out.values.reserve(x0.values.size());
  for (double v : x0.values) out.values.push_back(k.mean_scale * v + k.std * rng.normal());
  return out;
}

// mean absolute per-coordinate displacement E|x_t - x_0| in integer pixel
// units. Exact folded-normal value when alpha = 1 (displacement is pure
// noise); Monte Carlo with common random numbers otherwise.
inline double avg_abs_perturbation(const SdeSpec& spec, double t, const GridDataset& reference,
                                   std::int64_t draws_per_coord = 64,
                                   std::uint64_t mc_seed = 0x0a11ab5d15f0u) {
  MarginalKernel k = marginal(spec, t);
  if (reference.size() == 0) throw ConfigError("avg_abs_perturbation: empty reference dataset");
  double to_pixels = static_cast<double>(max_level(reference.bit_depth)) / 2.0;
  if (k.mean_scale == 1.0) {
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    return k.std * kSqrt2OverPi * to_pixels;
  }
  const std::int64_t cells = reference.dims.cell_count();
  const std::int64_t n = reference.size() * cells;
  KahanSum total = parallel_reduce<KahanSum>(
      n, [] { return KahanSum{}; },
      [&](KahanSum& acc, std::int64_t idx) {
        std::int64_t si = idx / cells;
        std::int64_t ci = idx % cells;
        double x0 = rescale_level(reference.samples[static_cast<size_t>(si)]
                                                   [static_cast<size_t>(ci)],
                                  reference.bit_depth);
        double m = (k.mean_scale - 1.0) * x0;
        // draws depend only on (coordinate, draw index): common random
        // numbers across t keep the curve smooth in t
        Rng rng = Rng::stream(mc_seed, static_cast<std::uint64_t>(idx));
        double s = 0.0;
        for (std::int64_t d = 0; d < draws_per_coord; ++d)
          s += std::abs(m + k.std * rng.normal());
        acc.add(s / static_cast<double>(draws_per_coord));
      },
      [](KahanSum& a, const KahanSum& b) { a.merge(b); });
  return total.mean() * to_pixels;
}

// per-pixel perturbation std at t = T, in integer pixel units
inline double pixel_std_at_horizon(const SdeSpec& spec, int bit_depth) {
  return marginal(spec, spec.horizon).std * static_cast<double>(max_level(bit_depth)) / 2.0;
}

// Searches the schedule so that pixel_std_at_horizon hits `target_pixel_std`.
// VP and sub-VP bisect T (their end-of-horizon std grows with T). VE's
// end-of-horizon std equals sigma_max for every T, so the search adjusts
// sigma_max instead.
inline SdeSpec calibrate_horizon(SdeSpec spec, double target_pixel_std, int bit_depth) {
  spec.validate();
  check_bit_depth(bit_depth);
  double scale = static_cast<double>(max_level(bit_depth)) / 2.0;
  double target = target_pixel_std / scale;  // embedded units
  if (!(target > 0.0))
    throw ConfigError("calibrate_horizon: target std must be positive");

  if (spec.kind == SdeKind::VE) {
    if (target <= spec.sigma_min)
      throw ConfigError("calibrate_horizon: target std below sigma_min");
    spec.sigma_max = target;
    return spec;
  }

  // sigma(T) grows with T but never reaches data_scale; require headroom
  // at the T = 1 cap
  SdeSpec probe = spec;
  probe.horizon = 1.0;
  if (target >= marginal(probe, 1.0).std) {
    throw ConfigError("calibrate_horizon: target pixel std " + std::to_string(target_pixel_std) +
                      " unreachable (max " +
                      std::to_string(marginal(probe, 1.0).std * scale) + " at T=1)");
  }
  double lo = 0.0, hi = 1.0;
  for (int iter = 0; iter < 200; ++iter) {
    double mid = 0.5 * (lo + hi);
    probe.horizon = mid;
    if (marginal(probe, mid).std < target)
      lo = mid;
    else
      hi = mid;
  }
  spec.horizon = 0.5 * (lo + hi);
  return spec;
}

}  // namespace ncml
