#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ncml/errors.hpp"
#include "ncml/grid.hpp"
#include "ncml/io.hpp"
#include "ncml/model.hpp"
#include "ncml/parallel.hpp"
#include "ncml/perturbation.hpp"
#include "ncml/rng.hpp"
#include "ncml/sde.hpp"
#include "ncml/tensor.hpp"

// Noise-conditional likelihood training. The objective averages the negative
// log density of SDE-perturbed data over noise scales drawn from mu; mu as a
// point mass at 0 recovers plain maximum likelihood on the discretized model.
// All losses are mean negative log density per dimension, in nats.

namespace ncml {

using ad::Tensor;

// Distribution over noise scales: uniform on [0, horizon], or weights on a
// finite scale set. The finite form exists so the regularized objective has
// a literal lambda_t = mu(t)/mu(0) to expand.
struct MuSpec {
  enum class Kind { Uniform, Discrete };
  Kind kind = Kind::Uniform;
  std::vector<double> points;
  std::vector<double> weights;

  static MuSpec uniform() { return {}; }

  static MuSpec discrete(std::vector<double> pts, std::vector<double> w) {
    MuSpec mu;
    mu.kind = Kind::Discrete;
    mu.points = std::move(pts);
    mu.weights = std::move(w);
    return mu;
  }

  static MuSpec delta_at_zero() { return discrete({0.0}, {1.0}); }

  void validate(double horizon) const {
    if (kind == Kind::Uniform) return;
    if (points.empty() || points.size() != weights.size())
      throw ConfigError("mu: scale set and weights must be nonempty and equal length");
    double sum = 0.0;
    for (size_t j = 0; j < points.size(); ++j) {
      if (!(points[j] >= 0.0 && points[j] <= horizon))
        throw ConfigError("mu: scale " + std::to_string(points[j]) + " outside [0, " +
                          std::to_string(horizon) + "]");
      if (!(weights[j] >= 0.0)) throw ConfigError("mu: negative weight");
      sum += weights[j];
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ConfigError("mu: weights sum to " + std::to_string(sum) + ", expected 1");
  }

  double weight_at_zero() const {
    if (kind == Kind::Uniform) return 0.0;
    double w = 0.0;
    for (size_t j = 0; j < points.size(); ++j)
      if (points[j] == 0.0) w += weights[j];
    return w;
  }

  double draw(Rng& rng, double horizon) const {
    if (kind == Kind::Uniform) return rng.uniform() * horizon;
    double u = rng.uniform();
    double acc = 0.0;
    for (size_t j = 0; j < points.size(); ++j) {
      acc += weights[j];
      if (u < acc) return points[j];
    }
    return points.back();
  }
};

struct LossResult {
  double loss = 0.0;
  std::vector<Tensor> grads;  // d loss / d theta, aligned with model.parameters()
};

namespace detail {

// Per-sample randomness is split into two streams so that consuming a
// different number of draws for the scale never shifts the noise draws:
// a point mass at 0 then matches the plain-MLE route bit for bit.
struct SampleStreams {
  Rng scale;
  Rng noise;
};

inline SampleStreams sample_streams(std::uint64_t base, std::int64_t i) {
  return {Rng::stream(base, static_cast<std::uint64_t>(i), 0x7e5ull),
          Rng::stream(base, static_cast<std::uint64_t>(i), 0x153ull)};
}

inline int sample_class(const GridDataset& data, const DensityModel& model,
                        std::int64_t i) {
  if (model.arch().class_count == 0 || !data.labeled()) return -1;
  return data.labels[static_cast<size_t>(i)];
}

template <class DrawScale>
LossResult loss_impl(const DensityModel& model, const GridDataset& batch,
                     const SdeSpec& sde, const DrawScale& draw_scale,
                     std::uint64_t base, double dropout) {
  if (batch.size() == 0) throw ConfigError("loss: empty batch");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw ConfigError("loss: dropout must be in [0, 1)");
  batch.validate();
  const double d = static_cast<double>(batch.dims.cell_count());

  struct Acc {
    KahanSum nll;
    std::vector<Tensor> grads;
  };
  auto make_acc = [&] {
    Acc acc;
    acc.grads.reserve(model.parameters().size());
    for (const auto& p : model.parameters()) acc.grads.push_back(Tensor::zeros_like(p));
    return acc;
  };

  Acc total = parallel_reduce<Acc>(
      batch.size(), make_acc,
      [&](Acc& acc, std::int64_t i) {
        SampleStreams streams = sample_streams(base, i);
        double t = draw_scale(streams.scale);
        int cls = sample_class(batch, model, i);
        DropoutPlan drop{dropout, &streams.noise};
        ad::GradientBundle g;
        double logp;
        try {
          if (t == 0.0) {
            logp = model.log_density_discretized_with_grad(batch.sample_grid(i), 0.0,
                                                           cls, &g, &drop);
          } else {
            RealVector xt = perturb(sde, rescale(batch.sample_grid(i)), t, streams.noise);
            logp = model.log_density_continuous_with_grad(xt, t, cls, &g, &drop);
          }
        } catch (const NumericError& e) {
          throw NumericError("loss: sample " + std::to_string(i) + " at t=" +
                             format_double(t) + ": " + e.what());
        }
        acc.nll.add(-logp / d);
        for (const auto& [id, gt] : g.params) {
          Tensor& dst = acc.grads[static_cast<size_t>(id)];
          for (std::int64_t k = 0; k < gt.size(); ++k) dst[k] += gt[k];
        }
      },
      [](Acc& a, const Acc& b) {
        a.nll.merge(b.nll);
        for (size_t p = 0; p < a.grads.size(); ++p)
          for (std::int64_t k = 0; k < a.grads[p].size(); ++k)
            a.grads[p][k] += b.grads[p][k];
      });

  LossResult out;
  out.loss = total.nll.mean();
  const double scale = -1.0 / (static_cast<double>(batch.size()) * d);
  out.grads = std::move(total.grads);
  for (auto& gt : out.grads)
    for (std::int64_t k = 0; k < gt.size(); ++k) gt[k] *= scale;
  return out;
}

// Mean per-dim nll at one fixed scale; the perturbation draw for sample i is
// keyed by (noise_seed, i, scale_idx) so two callers can share it exactly.
inline double scale_nll(const DensityModel& model, const GridDataset& batch,
                        const SdeSpec& sde, double t, std::uint64_t noise_seed,
                        std::uint64_t scale_idx) {
  const double d = static_cast<double>(batch.dims.cell_count());
  KahanSum s = parallel_reduce<KahanSum>(
      batch.size(), [] { return KahanSum{}; },
      [&](KahanSum& acc, std::int64_t i) {
        int cls = sample_class(batch, model, i);
        double logp;
        if (t == 0.0) {
          logp = model.log_density_discretized(batch.sample_grid(i), 0.0, cls);
        } else {
          Rng rng = Rng::stream(noise_seed, static_cast<std::uint64_t>(i), scale_idx);
          RealVector xt = perturb(sde, rescale(batch.sample_grid(i)), t, rng);
          logp = model.log_density_continuous(xt, t, cls);
        }
        acc.add(-logp / d);
      },
      [](KahanSum& a, const KahanSum& b) { a.merge(b); });
  return s.mean();
}

inline bool all_finite(const std::vector<Tensor>& params) {
  for (const auto& p : params)
    for (std::int64_t k = 0; k < p.size(); ++k)
      if (!std::isfinite(p[k])) return false;
  return true;
}

}  // namespace detail

inline LossResult ncml_loss(const DensityModel& model, const GridDataset& batch,
                            const SdeSpec& sde, const MuSpec& mu, Rng& rng,
                            double dropout = 0.0) {
  sde.validate();
  mu.validate(sde.horizon);
  std::uint64_t base = rng.next_u64();
  return detail::loss_impl(
      model, batch, sde, [&](Rng& r) { return mu.draw(r, sde.horizon); }, base, dropout);
}

inline LossResult mle_loss(const DensityModel& model, const GridDataset& batch,
                           Rng& rng, double dropout = 0.0) {
  std::uint64_t base = rng.next_u64();
  SdeSpec unused;
  return detail::loss_impl(
      model, batch, unused, [](Rng&) { return 0.0; }, base, dropout);
}

inline LossResult mle_loss(const DensityModel& model, const GridDataset& batch) {
  Rng rng(0);
  return mle_loss(model, batch, rng);
}

// Value-only variant over arbitrary density callables, sharing the scale and
// noise derivation of ncml_loss exactly. fc(x, t, label) is the continuous
// log density, fd(grid, label) the discretized one at scale 0.
template <class ContinuousFn, class DiscreteFn>
double ncml_loss_value(const ContinuousFn& fc, const DiscreteFn& fd,
                       const GridDataset& batch, const SdeSpec& sde, const MuSpec& mu,
                       Rng& rng) {
  if (batch.size() == 0) throw ConfigError("loss: empty batch");
  sde.validate();
  mu.validate(sde.horizon);
  batch.validate();
  std::uint64_t base = rng.next_u64();
  const double d = static_cast<double>(batch.dims.cell_count());
  KahanSum s = parallel_reduce<KahanSum>(
      batch.size(), [] { return KahanSum{}; },
      [&](KahanSum& acc, std::int64_t i) {
        detail::SampleStreams streams = detail::sample_streams(base, i);
        double t = mu.draw(streams.scale, sde.horizon);
        std::int32_t label = batch.labeled() ? batch.labels[static_cast<size_t>(i)] : -1;
        double logp;
        if (t == 0.0) {
          logp = fd(batch.sample_grid(i), label);
        } else {
          RealVector xt = perturb(sde, rescale(batch.sample_grid(i)), t, streams.noise);
          logp = fc(xt, t, label);
        }
        if (!std::isfinite(logp))
          throw NumericError("loss: sample " + std::to_string(i) + " at t=" +
                             format_double(t) + ": non-finite log density");
        acc.add(-logp / d);
      },
      [](KahanSum& a, const KahanSum& b) { a.merge(b); });
  return s.mean();
}

// Exact expectation over a finite scale set: sum_j mu_j * nll_j, one shared
// perturbation draw per (sample, scale index).
inline double ncml_expected_loss(const DensityModel& model, const GridDataset& batch,
                                 const SdeSpec& sde, const MuSpec& mu,
                                 std::uint64_t noise_seed) {
  if (mu.kind != MuSpec::Kind::Discrete)
    throw ConfigError("expected-form loss needs a finite scale set");
  sde.validate();
  mu.validate(sde.horizon);
  if (batch.size() == 0) throw ConfigError("loss: empty batch");
  double total = 0.0;
  for (size_t j = 0; j < mu.points.size(); ++j)
    total += mu.weights[j] *
             detail::scale_nll(model, batch, sde, mu.points[j], noise_seed, j);
  return total;
}

// Regularized expansion of the same objective: the scale-0 term taken at
// weight 1 plus lambda_j = mu_j/mu(0) times each noisy term. With shared
// draws this equals ncml_expected_loss / mu(0).
inline double regularized_form_loss(const DensityModel& model, const GridDataset& batch,
                                    const SdeSpec& sde, const MuSpec& mu,
                                    std::uint64_t noise_seed) {
  if (mu.kind != MuSpec::Kind::Discrete)
    throw ConfigError("regularized-form loss needs a finite scale set");
  sde.validate();
  mu.validate(sde.horizon);
  if (batch.size() == 0) throw ConfigError("loss: empty batch");
  double w0 = mu.weight_at_zero();
  if (w0 <= 0.0) throw ConfigError("regularized-form loss needs mu(0) > 0");
  double total = detail::scale_nll(model, batch, sde, 0.0, noise_seed, 0);
  for (size_t j = 0; j < mu.points.size(); ++j) {
    if (mu.points[j] == 0.0) continue;
    total += (mu.weights[j] / w0) *
             detail::scale_nll(model, batch, sde, mu.points[j], noise_seed, j);
  }
  return total;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("adam: lr must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("adam: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("adam: eps must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("adam: clip_norm must be positive");
  }
};

class Adam {
 public:
  Adam(const std::vector<Tensor>& params, AdamConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto& p : params) {
      m_.push_back(Tensor::zeros_like(p));
      v_.push_back(Tensor::zeros_like(p));
    }
  }

  // One update. The global gradient norm is clipped before the moment update.
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw ConfigError("adam: parameter/gradient count mismatch");
    double sq = 0.0;
    for (const auto& g : grads)
      for (std::int64_t k = 0; k < g.size(); ++k) sq += g[k] * g[k];
    double norm = std::sqrt(sq);
    double clip = norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (size_t p = 0; p < params.size(); ++p) {
      Tensor& theta = params[p];
      const Tensor& g = grads[p];
      Tensor& m = m_[p];
      Tensor& v = v_[p];
      for (std::int64_t k = 0; k < theta.size(); ++k) {
        double gk = clip * g[k];
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
        theta[k] -= cfg_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
      }
    }
  }

  std::int64_t steps_taken() const { return steps_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::int64_t steps_ = 0;
};

struct TrainConfig {
  std::int64_t steps = 500;
  int batch_size = 32;
  AdamConfig adam;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  SdeSpec sde;
  MuSpec mu;
  std::int64_t eval_every = 100;  // metrics-row cadence; 0 = final row only
  std::vector<double> probe_t;    // conditioning scales for the delta columns
  double probe_pi = 1.0;
  std::int64_t eval_limit = 0;    // cap on eval-set size; 0 = whole dataset

  void validate() const {
    if (steps < 1) throw ConfigError("train: steps must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    adam.validate();
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw ConfigError("train: dropout must be in [0, 1)");
    if (eval_every < 0) throw ConfigError("train: eval_every must be >= 0");
    if (eval_limit < 0) throw ConfigError("train: eval_limit must be >= 0");
    sde.validate();
    mu.validate(sde.horizon);
    for (double t : probe_t)
      if (!(t >= 0.0 && t <= sde.horizon))
        throw ConfigError("train: probe scale outside [0, horizon]");
    if (!(probe_pi >= 0.0 && probe_pi <= 1.0))
      throw ConfigError("train: probe_pi must be in [0, 1]");
  }
};

struct MetricsRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double bpd_t0 = 0.0;
  std::vector<double> delta;  // one entry per probe scale
};

struct TrainLog {
  std::vector<double> probe_t;
  double probe_pi = 0.0;
  std::vector<double> losses;     // one entry per optimization step
  std::vector<MetricsRow> rows;   // eval cadence
  bool aborted = false;
  std::int64_t abort_step = -1;

  std::string csv() const {
    std::string out = "step,loss,bpd_t0";
    for (double t : probe_t) {
      char buf[48];
      std::snprintf(buf, sizeof buf, ",delta@%g", t);
      out += buf;
    }
    out += "\n";
    for (const auto& r : rows) {
      out += std::to_string(r.step) + "," + format_double(r.loss) + "," +
             format_double(r.bpd_t0);
      for (double d : r.delta) out += "," + format_double(d);
      out += "\n";
    }
    return out;
  }
};

using CheckpointFn = std::function<void(const DensityModel&, std::int64_t step)>;

// Adam loop over minibatches sampled with replacement. Fully derived from
// cfg.seed: batch composition, scale draws and perturbations are all
// counter-keyed, so a rerun reproduces the trajectory exactly. If an update
// ever produces non-finite parameters the loop rolls back to the last
// evaluated state and stops.
inline TrainLog train(DensityModel& model, const GridDataset& data,
                      const TrainConfig& cfg, const CheckpointFn& checkpoint = {}) {
  cfg.validate();
  data.validate();
  if (data.size() == 0) throw ConfigError("train: empty dataset");

  Adam opt(model.parameters(), cfg.adam);
  TrainLog log;
  log.probe_t = cfg.probe_t;
  log.probe_pi = cfg.probe_pi;

  std::vector<Tensor> last_good = model.parameters();

  GridDataset eval = data;
  if (cfg.eval_limit > 0 && cfg.eval_limit < data.size()) {
    eval.samples.assign(data.samples.begin(), data.samples.begin() + cfg.eval_limit);
    if (data.labeled())
      eval.labels.assign(data.labels.begin(), data.labels.begin() + cfg.eval_limit);
  }

  auto density = [&](const DiscreteGrid& g, double t, std::int32_t label) {
    int cls = (model.arch().class_count > 0 && label >= 0) ? label : -1;
    return model.log_density_discretized(g, t, cls);
  };

  auto emit_row = [&](std::int64_t step, double loss) {
    MetricsRow row;
    row.step = step;
    row.loss = loss;
    row.bpd_t0 = dataset_bpd(density, eval, 0.0);
    PiSpec spec{cfg.probe_pi, cfg.seed ^ 0x9d5ull};
    for (double t : cfg.probe_t) row.delta.push_back(delta_logp(density, eval, spec, t));
    log.rows.push_back(std::move(row));
  };

  for (std::int64_t s = 0; s < cfg.steps; ++s) {
    Rng brng = Rng::stream(cfg.seed, 0xba7c4ull, static_cast<std::uint64_t>(s));
    GridDataset batch;
    batch.dims = data.dims;
    batch.bit_depth = data.bit_depth;
    for (int b = 0; b < cfg.batch_size; ++b) {
      auto i = static_cast<size_t>(brng.below(static_cast<std::uint64_t>(data.size())));
      batch.samples.push_back(data.samples[i]);
      if (data.labeled()) batch.labels.push_back(data.labels[i]);
    }

    Rng lrng = Rng::stream(cfg.seed, 0x105eull, static_cast<std::uint64_t>(s));
    LossResult res = ncml_loss(model, batch, cfg.sde, cfg.mu, lrng, cfg.dropout);
    opt.step(model.parameters(), res.grads);
    log.losses.push_back(res.loss);

    if (!detail::all_finite(model.parameters())) {
      model.parameters() = last_good;
      log.aborted = true;
      log.abort_step = s;
      break;
    }

    bool cadence = cfg.eval_every > 0 && (s + 1) % cfg.eval_every == 0;
    if (cadence || s + 1 == cfg.steps) {
      emit_row(s + 1, res.loss);
      last_good = model.parameters();
      if (checkpoint) checkpoint(model, s + 1);
    }
  }
  return log;
}

}  // namespace ncml
