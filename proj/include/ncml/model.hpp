#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ncml/autodiff.hpp"
#include "ncml/errors.hpp"
#include "ncml/grid.hpp"
#include "ncml/mixture.hpp"
#include "ncml/rng.hpp"

// Noise-conditional autoregressive density model: a masked MLP(raster
// ordering) producing per-dimension logistic-mixture parameters, conditioned
// on the noise level t through random Fourier features and optionally on a
// class label through a learned embedding.
//
// Masks enforce that the parameters for dimension k depend only on x_{<k};
// the conditioning embedding feeds every layer unmasked. Differentiating the
// continuous log density w.r.t. x yields the score.

namespace ncml {

struct ModelArch {
  GridDims dims{{1}};
  int bit_depth = 8;
  int hidden_layers = 2;
  int hidden_width = 64;
  int mixture_k = 5;
  int fourier_dim = 16;      // F; the embedding has 2F entries
  int class_count = 0;       // 0 = unconditional
  double log_scale_min = -7.0;
  double time_scale = 1.0;   // t is divided by this before embedding
  std::uint64_t init_seed = 1;

  std::int64_t data_dims() const { return dims.cell_count(); }
  int embed_dim() const { return 2 * fourier_dim; }
  int head_width() const { return 3 * mixture_k; }

  void validate() const {
    check_bit_depth(bit_depth);
    if (hidden_layers < 1 || hidden_width < 1)
      throw ConfigError("model: hidden_layers and hidden_width must be >= 1");
    if (mixture_k < 1) throw ConfigError("model: mixture_k must be >= 1");
    if (fourier_dim < 1) throw ConfigError("model: fourier_dim must be >= 1");
    if (class_count < 0) throw ConfigError("model: class_count must be >= 0");
    if (!(time_scale > 0.0)) throw ConfigError("model: time_scale must be positive");
  }
};

// Inverted dropout on hidden activations, training path only. Masks are
// drawn from *rng per forward pass; kept units are scaled by 1/(1 - rate)
// so evaluation needs no compensation.
struct DropoutPlan {
  double rate = 0.0;
  Rng* rng = nullptr;
};

class DensityModel {
 public:
  using Tensor = ad::Tensor;

  static DensityModel init(const ModelArch& arch) {
    arch.validate();
    DensityModel m;
    m.arch_ = arch;

    // frequencies for the Fourier time embedding, log-normal around 2
    Rng frng = Rng::stream(arch.init_seed, 0xf0u);
    m.freqs_.resize(static_cast<size_t>(arch.fourier_dim));
    for (double& f : m.freqs_) f = std::exp(std::log(2.0) + frng.normal());

    const int d = static_cast<int>(arch.data_dims());
    const int H = arch.hidden_width;
    const int E = arch.embed_dim();
    const int out_rows = d * arch.head_width();

    // autoregressive connectivity degrees (1-based raster order)
    auto hidden_degree = [&](int layer, int u) {
      return d == 1 ? 1 : 1 + (u + layer) % (d - 1);
    };

    std::uint64_t pidx = 0;
    auto add_param = [&](const std::string& name, Tensor t) {
      m.names_.push_back(name);
      m.params_.push_back(std::move(t));
      ++pidx;
    };
    auto random_matrix = [&](int rows, int cols, double gain) {
      Tensor w({rows, cols});
      Rng rng = Rng::stream(arch.init_seed, 0x11u, pidx);
      double sd = gain / std::sqrt(static_cast<double>(cols));
      for (std::int64_t i = 0; i < w.size(); ++i) w[i] = sd * rng.normal();
      return w;
    };

    std::vector<int> prev_degrees;
    for (int l = 0; l < arch.hidden_layers; ++l) {
      int in_dim = l == 0 ? d : H;
      Tensor wx = random_matrix(H, in_dim, 1.0);
      auto mask = std::make_shared<Tensor>(std::vector<int>{H, in_dim});
      for (int u = 0; u < H; ++u) {
        int mu = hidden_degree(l, u);
        for (int j = 0; j < in_dim; ++j) {
          int mj = l == 0 ? j + 1 : prev_degrees[static_cast<size_t>(j)];
          mask->at(u, j) = mu >= mj ? 1.0 : 0.0;
        }
      }
      apply_mask(wx, *mask);
      m.masks_.push_back(std::move(mask));
      add_param("layer" + std::to_string(l) + ".wx", std::move(wx));
      add_param("layer" + std::to_string(l) + ".we", random_matrix(H, E, 1.0));
      add_param("layer" + std::to_string(l) + ".b", Tensor({H}));
      prev_degrees.resize(static_cast<size_t>(H));
      for (int u = 0; u < H; ++u) prev_degrees[static_cast<size_t>(u)] = hidden_degree(l, u);
    }

    // head: masked projection from the last hidden layer, unmasked
    // projection from the embedding, and a strictly masked input skip
    Tensor wo = random_matrix(out_rows, H, 0.01);
    auto out_mask = std::make_shared<Tensor>(std::vector<int>{out_rows, H});
    for (int r = 0; r < out_rows; ++r) {
      int k = r / arch.head_width();  // 0-based target dimension
      for (int u = 0; u < H; ++u)
        out_mask->at(r, u) = prev_degrees[static_cast<size_t>(u)] <= k ? 1.0 : 0.0;
    }
    apply_mask(wo, *out_mask);
    m.masks_.push_back(std::move(out_mask));
    add_param("out.wx", std::move(wo));
    add_param("out.we", random_matrix(out_rows, E, 0.01));
    add_param("out.b", Tensor({out_rows}));

    Tensor skip = random_matrix(out_rows, d, 0.01);
    auto skip_mask = std::make_shared<Tensor>(std::vector<int>{out_rows, d});
    for (int r = 0; r < out_rows; ++r) {
      int k = r / arch.head_width();
      for (int j = 0; j < d; ++j) skip_mask->at(r, j) = j < k ? 1.0 : 0.0;
    }
    apply_mask(skip, *skip_mask);
    m.masks_.push_back(std::move(skip_mask));
    add_param("out.skip", std::move(skip));

    if (arch.class_count > 0)
      add_param("class_embed", Tensor({arch.class_count * E}));
    return m;
  }

  const ModelArch& arch() const { return arch_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  const std::vector<double>& fourier_frequencies() const { return freqs_; }
  void set_fourier_frequencies(std::vector<double> f) {
    if (f.size() != static_cast<size_t>(arch_.fourier_dim))
      throw ConfigError("model: frequency count does not match fourier_dim");
    freqs_ = std::move(f);
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  // mixture parameters for every dimension given the full input
  MixtureParams conditional_params(const RealVector& x, double t, int cls = -1) const {
    ad::Tape tape;
    ad::Var raw = build_raw(tape, tape.constant(to_tensor(x)), t, cls, false);
    return extract_params(tape.value(raw));
  }

  double log_density_continuous(const RealVector& x, double t, int cls = -1) const {
    ad::Tape tape;
    Heads h = build_continuous(tape, tape.constant(to_tensor(x)), t, cls, false);
    return checked_total(tape, h);
  }

  double log_density_discretized(const DiscreteGrid& x, double t, int cls = -1) const {
    x.validate();
    check_grid(x);
    ad::Tape tape;
    Heads h = build_discretized(tape, x, t, cls, false);
    return checked_total(tape, h);
  }

  // input gradient of the continuous log density
  RealVector score(const RealVector& x, double t, int cls = -1) const {
    ad::Tape tape;
    ad::Var xv = tape.input(to_tensor(x));
    Heads h = build_continuous(tape, xv, t, cls, false);
    checked_total(tape, h);
    ad::GradientBundle g = ad::backward(tape, h.total, Tensor::scalar(1.0));
    return RealVector{x.dims, g.input_grad().values()};
  }

  // training-path evaluations: also produce parameter gradients
  double log_density_continuous_with_grad(const RealVector& x, double t, int cls,
                                          ad::GradientBundle* grads,
                                          const DropoutPlan* drop = nullptr) const {
    ad::Tape tape;
    Heads h = build_continuous(tape, tape.constant(to_tensor(x)), t, cls, true, drop);
    double v = checked_total(tape, h);
    *grads = ad::backward(tape, h.total, Tensor::scalar(1.0));
    return v;
  }

  double log_density_discretized_with_grad(const DiscreteGrid& x, double t, int cls,
                                           ad::GradientBundle* grads,
                                           const DropoutPlan* drop = nullptr) const {
    x.validate();
    check_grid(x);
    ad::Tape tape;
    Heads h = build_discretized(tape, x, t, cls, true, drop);
    double v = checked_total(tape, h);
    *grads = ad::backward(tape, h.total, Tensor::scalar(1.0));
    return v;
  }

 private:
  static void apply_mask(Tensor& w, const Tensor& mask) {
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] *= mask[i];
  }

  static Tensor to_tensor(const RealVector& x) {
    return Tensor({static_cast<int>(x.values.size())}, x.values);
  }

  void check_grid(const DiscreteGrid& x) const {
    if (x.dims != arch_.dims || x.bit_depth != arch_.bit_depth)
      throw ConfigError("model: grid " + x.dims.to_string() + " B=" +
                        std::to_string(x.bit_depth) + " does not match arch " +
                        arch_.dims.to_string() + " B=" + std::to_string(arch_.bit_depth));
  }

  // per-dim log densities plus their sum
  struct Heads {
    ad::Var per_dim;
    ad::Var total;
  };

  static double checked_total(ad::Tape& tape, const Heads& h) {
    double v = tape.value(h.total)[0];
    if (!std::isfinite(v)) {
      const Tensor& per_dim = tape.value(h.per_dim);
      for (std::int64_t k = 0; k < per_dim.size(); ++k) {
        if (!std::isfinite(per_dim[k]))
          throw NumericError("non-finite log density at dimension " + std::to_string(k));
      }
      throw NumericError("non-finite log density");
    }
    return v;
  }

  ad::Var leaf(ad::Tape& tape, size_t idx, bool track) const {
    return track ? tape.param(params_[idx], static_cast<int>(idx))
                 : tape.constant(params_[idx]);
  }

  // Fourier features of normalized time (plus the class embedding when
  // conditioning). The frequencies are fixed at init, not trained.
  ad::Var build_embedding(ad::Tape& tape, double t, int cls, bool track) const {
    if (arch_.class_count == 0 && cls >= 0)
      throw ConfigError("model: class label given to an unconditional model");
    if (arch_.class_count > 0 && (cls < 0 || cls >= arch_.class_count))
      throw ConfigError("model: class label " + std::to_string(cls) + " outside [0, " +
                        std::to_string(arch_.class_count) + ")");
    double s = t / arch_.time_scale;
    Tensor u({arch_.fourier_dim});
    for (int i = 0; i < arch_.fourier_dim; ++i)
      u[i] = 2.0 * M_PI * freqs_[static_cast<size_t>(i)] * s;
    ad::Var uv = tape.constant(std::move(u));
    ad::Var e = ad::concat({sin(uv), cos(uv)});
    if (arch_.class_count > 0) {
      size_t table = params_.size() - 1;
      ad::Var row = slice(leaf(tape, table, track), cls * arch_.embed_dim(),
                          arch_.embed_dim());
      e = add(e, row);
    }
    return e;
  }

  // raw head output, one (logits, means, log_scales) triple block per dim
  ad::Var build_raw(ad::Tape& tape, ad::Var x, double t, int cls, bool track,
                    const DropoutPlan* drop = nullptr) const {
    if (drop && drop->rate != 0.0) {
      if (!(drop->rate > 0.0 && drop->rate < 1.0))
        throw ConfigError("model: dropout rate must be in [0, 1)");
      if (!drop->rng) throw ConfigError("model: dropout needs an rng");
    }
    ad::Var e = build_embedding(tape, t, cls, track);
    ad::Var h = x;
    size_t p = 0, mask_idx = 0;
    for (int l = 0; l < arch_.hidden_layers; ++l) {
      ad::Var a = matvec_masked(leaf(tape, p, track), h, masks_[mask_idx]);
      ad::Var b = matvec(leaf(tape, p + 1, track), e);
      h = tanh(add(add(a, b), leaf(tape, p + 2, track)));
      if (drop && drop->rate > 0.0) {
        const double keep = 1.0 - drop->rate;
        Tensor mask({arch_.hidden_width});
        for (int u = 0; u < arch_.hidden_width; ++u)
          mask[u] = drop->rng->uniform() < keep ? 1.0 / keep : 0.0;
        h = mul(h, tape.constant(std::move(mask)));
      }
      p += 3;
      ++mask_idx;
    }
    ad::Var o = matvec_masked(leaf(tape, p, track), h, masks_[mask_idx]);
    ad::Var oe = matvec(leaf(tape, p + 1, track), e);
    ad::Var ob = leaf(tape, p + 2, track);
    ad::Var sk = matvec_masked(leaf(tape, p + 3, track), x, masks_[mask_idx + 1]);
    return add(add(add(o, oe), ob), sk);
  }

  struct HeadSlices {
    ad::Var logw;        // normalized log weights [K]
    ad::Var mu;          // means [K]
    ad::Var ls;          // clamped log scales [K]
  };

  HeadSlices head_slices(ad::Var raw, std::int64_t k) const {
    const int K = arch_.mixture_k;
    int base = static_cast<int>(k) * arch_.head_width();
    ad::Var logits = slice(raw, base, K);
    ad::Var logw = sub(logits, logsumexp(logits));
    ad::Var mu = slice(raw, base + K, K);
    ad::Var ls = clamp_min(slice(raw, base + 2 * K, K), arch_.log_scale_min);
    return {logw, mu, ls};
  }

  Heads build_continuous(ad::Tape& tape, ad::Var x, double t, int cls, bool track,
                         const DropoutPlan* drop = nullptr) const {
    ad::Var raw = build_raw(tape, x, t, cls, track, drop);
    const std::int64_t d = arch_.data_dims();
    std::vector<ad::Var> per_dim;
    per_dim.reserve(static_cast<size_t>(d));
    for (std::int64_t k = 0; k < d; ++k) {
      HeadSlices hs = head_slices(raw, k);
      ad::Var xk = slice(x, static_cast<int>(k), 1);
      ad::Var z = mul(sub(xk, hs.mu), exp(neg(hs.ls)));
      ad::Var nz = neg(z);
      ad::Var logpdf = sub(sub(nz, hs.ls), scale(softplus(nz), 2.0));
      per_dim.push_back(logsumexp(add(hs.logw, logpdf)));
    }
    ad::Var stacked = ad::concat(per_dim);
    return {stacked, sum(stacked)};
  }

  Heads build_discretized(ad::Tape& tape, const DiscreteGrid& g, double t, int cls,
                          bool track, const DropoutPlan* drop = nullptr) const {
    RealVector x = rescale(g);
    ad::Var xv = tape.constant(to_tensor(x));
    ad::Var raw = build_raw(tape, xv, t, cls, track, drop);
    const std::int64_t d = arch_.data_dims();
    const int top = max_level(arch_.bit_depth);
    const double h = 1.0 / static_cast<double>(top);
    std::vector<ad::Var> per_dim;
    per_dim.reserve(static_cast<size_t>(d));
    for (std::int64_t k = 0; k < d; ++k) {
      HeadSlices hs = head_slices(raw, k);
      ad::Var inv_s = exp(neg(hs.ls));
      double xk = x.values[static_cast<size_t>(k)];
      std::int32_t v = g.values[static_cast<size_t>(k)];
      ad::Var bin_logp{nullptr, -1};
      if (v <= 0) {
        ad::Var z_plus = mul(add_scalar(neg(hs.mu), xk + h), inv_s);
        bin_logp = neg(softplus(neg(z_plus)));
      } else if (v >= top) {
        ad::Var z_minus = mul(add_scalar(neg(hs.mu), xk - h), inv_s);
        bin_logp = neg(softplus(z_minus));
      } else {
        ad::Var z_plus = mul(add_scalar(neg(hs.mu), xk + h), inv_s);
        ad::Var z_minus = mul(add_scalar(neg(hs.mu), xk - h), inv_s);
        ad::Var delta = scale(inv_s, 2.0 * h);  // z+ - z-, formed positively
        bin_logp = sub(sub(logexpm1(delta), softplus(z_plus)), softplus(neg(z_minus)));
      }
      per_dim.push_back(logsumexp(add(hs.logw, bin_logp)));
    }
    ad::Var stacked = ad::concat(per_dim);
    return {stacked, sum(stacked)};
  }

  MixtureParams extract_params(const Tensor& raw) const {
    const std::int64_t d = arch_.data_dims();
    const int K = arch_.mixture_k;
    MixtureParams out;
    out.mixture_k = K;
    out.logits.reserve(static_cast<size_t>(d * K));
    out.means.reserve(static_cast<size_t>(d * K));
    out.log_scales.reserve(static_cast<size_t>(d * K));
    for (std::int64_t k = 0; k < d; ++k) {
      std::int64_t base = k * arch_.head_width();
      for (int j = 0; j < K; ++j) out.logits.push_back(raw[base + j]);
      for (int j = 0; j < K; ++j) out.means.push_back(raw[base + K + j]);
      for (int j = 0; j < K; ++j)
        out.log_scales.push_back(std::max(raw[base + 2 * K + j], arch_.log_scale_min));
    }
    return out;
  }

  ModelArch arch_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<double> freqs_;
  std::vector<std::shared_ptr<const Tensor>> masks_;
};

}  // namespace ncml
