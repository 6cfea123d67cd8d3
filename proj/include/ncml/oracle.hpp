#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ncml/errors.hpp"
#include "ncml/grid.hpp"
#include "ncml/rng.hpp"
#include "ncml/sde.hpp"

// Closed-form Gaussian-mixture target. Under any schedule the perturbed
// marginal stays a Gaussian mixture (a Gaussian convolved with a Gaussian),
// so log density and score are exact; that makes this the reference against
// which score extraction and reverse-SDE integration are validated.

namespace ncml {

struct GaussianMixtureOracle {
  // component j: weight w_j, mean mu_j (d entries), diagonal variance v_j
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> variances;

  std::int64_t dims() const { return means.empty() ? 0 : static_cast<std::int64_t>(means[0].size()); }
  int components() const { return static_cast<int>(weights.size()); }

  void validate() const {
    if (weights.empty() || weights.size() != means.size() ||
        weights.size() != variances.size())
      throw ConfigError("oracle: weights/means/variances must have equal nonzero length");
    double total = 0.0;
    for (double w : weights) {
      if (!(w > 0.0)) throw ConfigError("oracle: weights must be positive");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw ConfigError("oracle: weights sum to " + std::to_string(total) + ", expected 1");
    size_t d = means[0].size();
    for (size_t j = 0; j < means.size(); ++j) {
      if (means[j].size() != d || variances[j].size() != d)
        throw ConfigError("oracle: inconsistent component dimensionality");
      for (double v : variances[j])
        if (!(v > 0.0)) throw ConfigError("oracle: variances must be positive");
    }
  }
};

namespace detail {

// per-component perturbed moments: N(alpha mu, alpha^2 v + sigma^2)
struct PerturbedComponent {
  std::vector<double> mean;
  std::vector<double> var;
};

inline PerturbedComponent perturbed_component(const GaussianMixtureOracle& gm, int j,
                                              const MarginalKernel& k) {
  PerturbedComponent out;
  const auto& mu = gm.means[static_cast<size_t>(j)];
  const auto& v = gm.variances[static_cast<size_t>(j)];
  out.mean.reserve(mu.size());
  out.var.reserve(mu.size());
  double a2 = k.mean_scale * k.mean_scale;
  for (size_t i = 0; i < mu.size(); ++i) {
    out.mean.push_back(k.mean_scale * mu[i]);
    out.var.push_back(a2 * v[i] + k.std * k.std);
  }
  return out;
}

}  // namespace detail

inline double oracle_perturbed_logdensity(const GaussianMixtureOracle& gm,
                                          const RealVector& x, double t,
                                          const SdeSpec& spec) {
  MarginalKernel k = marginal(spec, t);
  constexpr double kLog2Pi = 1.8378770664093453;
  double best = -1e300;
  std::vector<double> terms;
  terms.reserve(gm.weights.size());
  for (int j = 0; j < gm.components(); ++j) {
    detail::PerturbedComponent c = detail::perturbed_component(gm, j, k);
    double lp = std::log(gm.weights[static_cast<size_t>(j)]);
    for (size_t i = 0; i < c.mean.size(); ++i) {
      double diff = x.values[i] - c.mean[i];
      lp += -0.5 * (kLog2Pi + std::log(c.var[i]) + diff * diff / c.var[i]);
    }
    terms.push_back(lp);
    best = std::max(best, lp);
  }
  double s = 0.0;
  for (double lp : terms) s += std::exp(lp - best);
  return best + std::log(s);
}

// exact gradient of the perturbed log density: responsibility-weighted sum
// of per-component Gaussian scores
inline RealVector oracle_score(const GaussianMixtureOracle& gm, const RealVector& x,
                               double t, const SdeSpec& spec) {
  MarginalKernel k = marginal(spec, t);
  constexpr double kLog2Pi = 1.8378770664093453;
  const size_t d = x.values.size();
  std::vector<double> logr(gm.weights.size());
  std::vector<detail::PerturbedComponent> comps;
  comps.reserve(gm.weights.size());
  double best = -1e300;
  for (int j = 0; j < gm.components(); ++j) {
    comps.push_back(detail::perturbed_component(gm, j, k));
    const auto& c = comps.back();
    double lp = std::log(gm.weights[static_cast<size_t>(j)]);
    for (size_t i = 0; i < d; ++i) {
      double diff = x.values[i] - c.mean[i];
      lp += -0.5 * (kLog2Pi + std::log(c.var[i]) + diff * diff / c.var[i]);
    }
    logr[static_cast<size_t>(j)] = lp;
    best = std::max(best, lp);
  }
  double norm = 0.0;
  for (double lp : logr) norm += std::exp(lp - best);
  RealVector out{x.dims, std::vector<double>(d, 0.0)};
  for (size_t j = 0; j < logr.size(); ++j) {
    double r = std::exp(logr[j] - best) / norm;
    for (size_t i = 0; i < d; ++i)
      out.values[i] += r * (-(x.values[i] - comps[j].mean[i]) / comps[j].var[i]);
  }
  return out;
}

// draw from the unperturbed mixture
inline RealVector oracle_sample(const GaussianMixtureOracle& gm, const GridDims& dims,
                                Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  int j = gm.components() - 1;
  for (int c = 0; c < gm.components(); ++c) {
    acc += gm.weights[static_cast<size_t>(c)];
    if (u <= acc) {
      j = c;
      break;
    }
  }
  RealVector out{dims, {}};
  const auto& mu = gm.means[static_cast<size_t>(j)];
  const auto& v = gm.variances[static_cast<size_t>(j)];
  out.values.reserve(mu.size());
  for (size_t i = 0; i < mu.size(); ++i)
    out.values.push_back(mu[i] + std::sqrt(v[i]) * rng.normal());
  return out;
}

// draw from the perturbed marginal at time t
inline RealVector oracle_sample_perturbed(const GaussianMixtureOracle& gm,
                                          const GridDims& dims, double t,
                                          const SdeSpec& spec, Rng& rng) {
  RealVector x0 = oracle_sample(gm, dims, rng);
  return perturb(spec, x0, t, rng);
}

}  // namespace ncml
