#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ncml/errors.hpp"
#include "ncml/grid.hpp"
#include "ncml/rng.hpp"

// Scalar logistic-mixture math shared by the density head, the samplers,
// and the test oracles. All functions are pure and allocation-free.

namespace ncml {

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double log_sigmoid(double x) { return -softplus(-x); }

inline double logistic_cdf(double x, double mu, double s) {
  return 1.0 / (1.0 + std::exp(-(x - mu) / s));
}

// log pdf of Logistic(mu, s); equals log(1/(4s)) at the mode
inline double logistic_logpdf(double x, double mu, double s) {
  double z = (x - mu) / s;
  return -z - std::log(s) - 2.0 * softplus(-z);
}

// inverse-CDF draw; u stays in the open interval so the logit is finite
inline double sample_logistic(double mu, double s, Rng& rng) {
  double u = rng.uniform_open();
  return mu + s * (std::log(u) - std::log1p(-u));
}

// log(e^x - 1) for x > 0
inline double log_expm1(double x) {
  return x > 0.6931471805599453 ? x + std::log1p(-std::exp(-x))
                                : std::log(std::expm1(x));
}

namespace detail {
inline double logsumexp_n(const double* xs, int n) {
  double m = xs[0];
  for (int i = 1; i < n; ++i) m = std::max(m, xs[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(xs[i] - m);
  return m + std::log(s);
}
}  // namespace detail

// Per-dimension mixture parameters for every dimension of a grid, laid out
// row-major by dimension: entry [dim * K + j] is component j of `dim`.
// Log-scales are already clamped to the model's floor.
struct MixtureParams {
  int mixture_k = 0;
  std::vector<double> logits;
  std::vector<double> means;
  std::vector<double> log_scales;

  std::int64_t dims() const {
    return mixture_k == 0 ? 0 : static_cast<std::int64_t>(logits.size()) / mixture_k;
  }
};

// log p(x) under the K-component logistic mixture for one dimension
inline double mixture_logpdf(const MixtureParams& p, std::int64_t dim, double x) {
  const int K = p.mixture_k;
  const double* lg = p.logits.data() + dim * K;
  double norm = detail::logsumexp_n(lg, K);
  std::vector<double> terms(static_cast<size_t>(K));
  for (int j = 0; j < K; ++j) {
    double s = std::exp(p.log_scales[dim * K + j]);
    terms[static_cast<size_t>(j)] =
        lg[j] - norm + logistic_logpdf(x, p.means[dim * K + j], s);
  }
  return detail::logsumexp_n(terms.data(), K);
}

inline double mixture_cdf(const MixtureParams& p, std::int64_t dim, double x) {
  const int K = p.mixture_k;
  const double* lg = p.logits.data() + dim * K;
  double norm = detail::logsumexp_n(lg, K);
  double c = 0.0;
  for (int j = 0; j < K; ++j) {
    double w = std::exp(lg[j] - norm);
    c += w * logistic_cdf(x, p.means[dim * K + j], std::exp(p.log_scales[dim * K + j]));
  }
  return c;
}

// log P(v) of one quantization bin under a single logistic component. Bins
// are centered on the rescaled levels with half-width 1/(2^B - 1); the two
// edge bins absorb their tails. The interior case uses
//   log P = logexpm1(z+ - z-) - softplus(z+) - softplus(-z-)
// with z+ - z- = 2h e^{-log s} formed directly, so nothing cancels even
// for tiny bins or extreme means.
inline double discretized_logistic_log_prob(std::int32_t v, int bit_depth, double mu,
                                            double log_s) {
  const int top = max_level(bit_depth);
  const double h = 1.0 / static_cast<double>(top);
  const double x = rescale_level(v, bit_depth);
  const double inv_s = std::exp(-log_s);
  if (v <= 0) return log_sigmoid((x + h - mu) * inv_s);
  if (v >= top) return log_sigmoid(-((x - h - mu) * inv_s));
  double z_plus = (x + h - mu) * inv_s;
  double z_minus = (x - h - mu) * inv_s;
  return log_expm1(2.0 * h * inv_s) - softplus(z_plus) - softplus(-z_minus);
}

inline double discretized_mixture_log_prob(const MixtureParams& p, std::int64_t dim,
                                           std::int32_t v, int bit_depth) {
  const int K = p.mixture_k;
  const double* lg = p.logits.data() + dim * K;
  double norm = detail::logsumexp_n(lg, K);
  std::vector<double> terms(static_cast<size_t>(K));
  for (int j = 0; j < K; ++j) {
    terms[static_cast<size_t>(j)] =
        lg[j] - norm +
        discretized_logistic_log_prob(v, bit_depth, p.means[dim * K + j],
                                      p.log_scales[dim * K + j]);
  }
  return detail::logsumexp_n(terms.data(), K);
}

inline int sample_categorical_from_logits(const double* logits, int k, Rng& rng) {
  double norm = detail::logsumexp_n(logits, k);
  double u = rng.uniform_open();
  double acc = 0.0;
  for (int j = 0; j < k; ++j) {
    acc += std::exp(logits[j] - norm);
    if (u <= acc) return j;
  }
  return k - 1;  // guard against accumulated rounding
}

// continuous inverse-CDF draw from the mixture at one dimension
inline double sample_dimension(const MixtureParams& p, std::int64_t dim, Rng& rng) {
  const int K = p.mixture_k;
  int j = sample_categorical_from_logits(p.logits.data() + dim * K, K, rng);
  return sample_logistic(p.means[dim * K + j], std::exp(p.log_scales[dim * K + j]), rng);
}

// Bins the continuous draw. Rounding to the nearest level reproduces the
// discretized bin probabilities exactly: interior bins are the rounding
// cells and the edge bins absorb everything beyond the range.
inline std::int32_t sample_dimension_discrete(const MixtureParams& p, std::int64_t dim,
                                              int bit_depth, Rng& rng) {
  return snap_level(sample_dimension(p, dim, rng), bit_depth);
}

// negative log likelihood in bits per dimension, discrete data
inline double bits_per_dim_discrete(double log_density, std::int64_t dims) {
  if (dims < 1) throw ConfigError("bits_per_dim: dims must be >= 1");
  return -log_density / (static_cast<double>(dims) * std::log(2.0));
}

// Continuous densities live on the rescaled domain, where one integer level
// spans 2/(2^B - 1); the change of variables adds log(bin width) per dim to
// make the result comparable to the discrete bpd.
inline double bits_per_dim_continuous(double log_density, std::int64_t dims, int bit_depth) {
  if (dims < 1) throw ConfigError("bits_per_dim: dims must be >= 1");
  double bin_width = 2.0 / static_cast<double>(max_level(bit_depth));
  return -(log_density + static_cast<double>(dims) * std::log(bin_width)) /
         (static_cast<double>(dims) * std::log(2.0));
}

}  // namespace ncml
