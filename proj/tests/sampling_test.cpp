#include "ncml/sampling.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ncml/errors.hpp"
#include "ncml/grid.hpp"
#include "ncml/model.hpp"
#include "ncml/oracle.hpp"
#include "ncml/rng.hpp"
#include "ncml/sde.hpp"

namespace ncml {
namespace {

ad::Tensor& param(DensityModel& m, const std::string& name) {
  const auto& names = m.parameter_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return m.parameters()[i];
  throw std::runtime_error("no parameter named " + name);
}

void zero_params(DensityModel& m) {
  for (auto& p : m.parameters())
    for (std::int64_t i = 0; i < p.size(); ++i) p[i] = 0.0;
}

// 1-D, B=3, K=2: nearly all mass on one razor-thin component at 0.6.
DensityModel delta_model() {
  ModelArch a;
  a.dims = GridDims{{1}};
  a.bit_depth = 3;
  a.hidden_layers = 1;
  a.hidden_width = 1;
  a.mixture_k = 2;
  a.fourier_dim = 1;
  a.init_seed = 11;
  DensityModel m = DensityModel::init(a);
  zero_params(m);
  auto& b = param(m, "out.b");
  // head rows per dim: K logits, K means, K log scales
  b[0] = 40.0;
  b[1] = 0.0;
  b[2] = 0.6;
  b[3] = -0.9;
  b[4] = -40.0;  // clamped to the log-scale floor
  b[5] = -40.0;
  return m;
}

// 2 cells, B=3: dim 0 is a lopsided two-mode mixture, dim 1 rides on x0
// through the skip connection. Concentrated enough that 10^4 draws resolve
// the joint histogram well below the TV tolerance.
DensityModel toy2_model() {
  ModelArch a;
  a.dims = GridDims{{2}};
  a.bit_depth = 3;
  a.hidden_layers = 1;
  a.hidden_width = 4;
  a.mixture_k = 2;
  a.fourier_dim = 2;
  a.init_seed = 17;
  DensityModel m = DensityModel::init(a);
  zero_params(m);
  auto& b = param(m, "out.b");
  b[0] = 3.5;
  b[1] = 0.0;
  b[2] = -0.6;
  b[3] = 0.6;
  b[4] = -4.0;
  b[5] = -4.0;
  b[10] = -4.0;  // dim 1 logits stay uniform, means come from the skip
  b[11] = -4.0;
  auto& skip = param(m, "out.skip");
  skip.at(8, 0) = 0.8;
  skip.at(9, 0) = -0.8;
  return m;
}

std::vector<double> enumerate_joint(const DensityModel& m) {
  std::vector<double> p;
  p.reserve(64);
  for (std::int32_t v0 = 0; v0 < 8; ++v0)
    for (std::int32_t v1 = 0; v1 < 8; ++v1) {
      DiscreteGrid g{GridDims{{2}}, 3, {v0, v1}};
      p.push_back(std::exp(m.log_density_discretized(g, 0.0)));
    }
  return p;
}

double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

TEST(SamplerConfigTest, ValidationCatchesBadFields) {
  SdeSpec vp;
  SamplerConfig ok;
  ok.t_start = 0.05;
  EXPECT_NO_THROW(ok.validate(vp));

  SamplerConfig direct;  // t_start = 0 means no refinement phase
  EXPECT_NO_THROW(direct.validate(vp));

  SamplerConfig c = ok;
  c.t_start = -0.01;
  EXPECT_THROW(c.validate(vp), ConfigError);
  c = ok;
  c.t_start = vp.horizon * 2.0;
  EXPECT_THROW(c.validate(vp), ConfigError);
  c = ok;
  c.refine_steps = 0;
  EXPECT_THROW(c.validate(vp), ConfigError);
  c = ok;
  c.corrector_steps = -1;
  EXPECT_THROW(c.validate(vp), ConfigError);
  c = ok;
  c.corrector_steps = 2;
  c.corrector_snr = 0.0;
  EXPECT_THROW(c.validate(vp), ConfigError);
  c.corrector_steps = 0;  // snr unused when the corrector is off
  EXPECT_NO_THROW(c.validate(vp));
}

TEST(AncestralTest, DeltaLikeMixtureReturnsTheMode) {
  DensityModel m = delta_model();
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    RealVector x = ancestral_sample(m, 0.0, rng);
    ASSERT_EQ(x.values.size(), 1u);
    EXPECT_NEAR(x.values[0], 0.6, 0.02);
  }
  const std::int32_t mode_level = snap_level(0.6, 3);
  EXPECT_EQ(mode_level, 6);
  for (int i = 0; i < 100; ++i) {
    DiscreteGrid g = ancestral_sample_discrete(m, 0.0, rng);
    ASSERT_EQ(g.values.size(), 1u);
    EXPECT_EQ(g.values[0], mode_level);
  }
}

TEST(AncestralTest, DiscreteDrawsMatchEnumeratedProbabilities) {
  DensityModel m = toy2_model();
  std::vector<double> p = enumerate_joint(m);
  double total = 0.0;
  for (double v : p) total += v;
  ASSERT_NEAR(total, 1.0, 1e-9);

  const int n = 10000;
  std::vector<double> hist(64, 0.0);
  Rng rng(77);
  for (int i = 0; i < n; ++i) {
    DiscreteGrid g = ancestral_sample_discrete(m, 0.0, rng);
    hist[static_cast<size_t>(g.values[0] * 8 + g.values[1])] += 1.0 / n;
  }
  EXPECT_LT(total_variation(hist, p), 0.03);
}

TEST(AncestralTest, SameSeedSameSample) {
  DensityModel m = toy2_model();
  Rng a(19), b(19);
  RealVector xa = ancestral_sample(m, 0.02, a);
  RealVector xb = ancestral_sample(m, 0.02, b);
  EXPECT_EQ(xa.values, xb.values);
  DiscreteGrid ga = ancestral_sample_discrete(m, 0.0, a);
  DiscreteGrid gb = ancestral_sample_discrete(m, 0.0, b);
  EXPECT_EQ(ga.values, gb.values);
}

TEST(RefineTest, ZeroScoreZeroDriftIsOneNoiseIncrement) {
  SdeSpec ve = SdeSpec{};
  ve.kind = SdeKind::VE;
  ve.horizon = 0.5;
  auto zero_score = [](const RealVector& x, double) {
    return RealVector{x.dims, std::vector<double>(x.values.size(), 0.0)};
  };
  SamplerConfig cfg;
  cfg.refine_steps = 1;
  const double t = 0.005;
  const double g = diffusion(ve, t);
  const double gn = g * std::sqrt(t);

  // exact single-increment replication
  Rng rng(101), replica(101);
  RealVector x{GridDims{{1}}, {0.3}};
  RealVector out = reverse_sde_refine(zero_score, x, t, ve, cfg, rng);
  double z = replica.normal();
  EXPECT_DOUBLE_EQ(out.values[0], 0.3 + gn * z);

  // distributional check over independent runs
  const int n = 3000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    Rng r = Rng::stream(202, static_cast<std::uint64_t>(i));
    double d = reverse_sde_refine(zero_score, x, t, ve, cfg, r).values[0] - 0.3;
    sum += d;
    sq += d * d;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 4.0 * gn / std::sqrt(static_cast<double>(n)));
  EXPECT_NEAR(var, gn * gn, 0.10 * gn * gn);
}

TEST(RefineTest, OracleScoreRecoversTheMixture) {
  GaussianMixtureOracle gm;
  gm.weights = {0.65, 0.35};
  gm.means = {{-0.5, -0.5}, {0.5, 0.5}};
  gm.variances = {{0.01, 0.01}, {0.01, 0.01}};
  gm.validate();
  SdeSpec vp;
  GridDims dims{{2}};
  auto sc = [&](const RealVector& x, double t) { return oracle_score(gm, x, t, vp); };
  SamplerConfig cfg;
  cfg.refine_steps = 100;

  const int n = 4000;
  int n0 = 0;
  double s0[2] = {0.0, 0.0}, s1[2] = {0.0, 0.0};
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::stream(2026, static_cast<std::uint64_t>(i));
    RealVector x = oracle_sample_perturbed(gm, dims, vp.horizon, vp, rng);
    x = reverse_sde_refine(sc, std::move(x), vp.horizon, vp, cfg, rng);
    double d0 = 0.0, d1 = 0.0;
    for (int j = 0; j < 2; ++j) {
      d0 += (x.values[j] + 0.5) * (x.values[j] + 0.5);
      d1 += (x.values[j] - 0.5) * (x.values[j] - 0.5);
    }
    if (d0 < d1) {
      ++n0;
      for (int j = 0; j < 2; ++j) s0[j] += x.values[j];
    } else {
      for (int j = 0; j < 2; ++j) s1[j] += x.values[j];
    }
  }
  EXPECT_NEAR(static_cast<double>(n0) / n, 0.65, 0.03);
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(s0[j] / n0, -0.5, 0.05);
    EXPECT_NEAR(s1[j] / (n - n0), 0.5, 0.05);
  }
}

TEST(RefineTest, HalvingTheStepLeavesTerminalMomentsInsideNoise) {
  GaussianMixtureOracle gm;
  gm.weights = {0.65, 0.35};
  gm.means = {{-0.5, -0.5}, {0.5, 0.5}};
  gm.variances = {{0.01, 0.01}, {0.01, 0.01}};
  gm.validate();
  SdeSpec vp;
  GridDims dims{{2}};
  auto sc = [&](const RealVector& x, double t) { return oracle_score(gm, x, t, vp); };

  const int n = 1500;
  auto ensemble = [&](int steps, std::uint64_t seed, double mean[2], double* var) {
    SamplerConfig cfg;
    cfg.refine_steps = steps;
    double sum[2] = {0.0, 0.0}, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(i));
      RealVector x = oracle_sample_perturbed(gm, dims, vp.horizon, vp, rng);
      x = reverse_sde_refine(sc, std::move(x), vp.horizon, vp, cfg, rng);
      for (int j = 0; j < 2; ++j) {
        sum[j] += x.values[j];
        sq += x.values[j] * x.values[j];
      }
    }
    for (int j = 0; j < 2; ++j) mean[j] = sum[j] / n;
    double m2 = sq / (2.0 * n);
    *var = m2 - 0.25 * (mean[0] + mean[1]) * (mean[0] + mean[1]);
  };

  double m_a[2], m_b[2], v_a, v_b;
  ensemble(100, 901, m_a, &v_a);
  ensemble(200, 902, m_b, &v_b);
  // population sd per coordinate is ~0.49, so 3 combined standard errors
  // plus slack for the refinement bias difference
  double se = 3.0 * std::sqrt(2.0) * 0.49 / std::sqrt(static_cast<double>(n)) + 0.01;
  EXPECT_NEAR(m_a[0], m_b[0], se);
  EXPECT_NEAR(m_a[1], m_b[1], se);
  EXPECT_GT(v_a / v_b, 0.8);
  EXPECT_LT(v_a / v_b, 1.25);
}

TEST(RefineTest, DivergenceNamesTheStep) {
  SdeSpec vp;
  auto runaway = [](const RealVector& x, double) {
    return RealVector{x.dims, std::vector<double>(x.values.size(), 1e6)};
  };
  SamplerConfig cfg;
  cfg.refine_steps = 4;
  Rng rng(5);
  RealVector x{GridDims{{2}}, {0.0, 0.0}};
  try {
    reverse_sde_refine(runaway, x, vp.horizon, vp, cfg, rng);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(RefineTest, RejectsBadStartScale) {
  SdeSpec vp;
  auto zero_score = [](const RealVector& x, double) {
    return RealVector{x.dims, std::vector<double>(x.values.size(), 0.0)};
  };
  SamplerConfig cfg;
  Rng rng(1);
  RealVector x{GridDims{{1}}, {0.0}};
  EXPECT_THROW(reverse_sde_refine(zero_score, x, 0.0, vp, cfg, rng), ConfigError);
  EXPECT_THROW(reverse_sde_refine(zero_score, x, vp.horizon * 1.5, vp, cfg, rng),
               ConfigError);
  cfg.refine_steps = 0;
  EXPECT_THROW(reverse_sde_refine(zero_score, x, vp.horizon, vp, cfg, rng), ConfigError);
}

TEST(LangevinTest, ZeroStepsIsIdentity) {
  auto score = [](const RealVector& x, double) {
    return RealVector{x.dims, std::vector<double>(x.values.size(), 1.0)};
  };
  Rng rng(9);
  RealVector x{GridDims{{3}}, {0.1, -0.2, 0.3}};
  RealVector out = langevin_correct(score, x, 0.0, 0, 0.16, rng);
  EXPECT_EQ(out.values, x.values);
}

TEST(LangevinTest, ZeroScoreWalksWithTheoreticalVariance) {
  auto score = [](const RealVector& x, double) {
    return RealVector{x.dims, std::vector<double>(x.values.size(), 0.0)};
  };
  const int d = 64, chains = 300, steps = 5;
  const double r = 0.16;
  double sq = 0.0;
  LangevinStats stats;
  for (int c = 0; c < chains; ++c) {
    Rng rng = Rng::stream(31, static_cast<std::uint64_t>(c));
    RealVector x{GridDims{{64}}, std::vector<double>(d, 0.0)};
    LangevinStats* sp = c == 0 ? &stats : nullptr;
    RealVector out = langevin_correct(score, x, 0.0, steps, r, rng, sp);
    for (double v : out.values) sq += v * v;
  }
  ASSERT_EQ(stats.step_sizes.size(), 5u);
  // with a vanishing score the snr rule fixes eps = 2 r^2 exactly
  for (double eps : stats.step_sizes) EXPECT_DOUBLE_EQ(eps, 2.0 * 0.16 * 0.16);
  double expected = 4.0 * r * r * steps;  // sum of 2*eps over M steps
  double var = sq / (static_cast<double>(chains) * d);
  EXPECT_NEAR(var, expected, 0.05 * expected);
}

TEST(LangevinTest, GaussianScoreReachesUnitVariance) {
  auto score = [](const RealVector& x, double) {
    RealVector s = x;
    for (double& v : s.values) v = -v;
    return s;
  };
  // The snr rule leaves a stationary variance of about (1+r^2)(1+4/d), so
  // the chain needs a small ratio and a wide state to sit within 3% of 1.
  const int d = 512, chains = 30;
  const double r = 0.05;
  double sq = 0.0;
  std::int64_t count = 0;
  for (int c = 0; c < chains; ++c) {
    Rng rng = Rng::stream(47, static_cast<std::uint64_t>(c));
    RealVector x{GridDims{{512}}, std::vector<double>(d, 0.0)};
    x = langevin_correct(score, std::move(x), 0.0, 1000, r, rng);  // burn-in
    for (int snap = 0; snap < 4; ++snap) {
      x = langevin_correct(score, std::move(x), 0.0, 400, r, rng);
      for (double v : x.values) sq += v * v;
      count += d;
    }
  }
  double var = sq / static_cast<double>(count);
  EXPECT_NEAR(var, 1.0, 0.03);
}

TEST(TwoPhaseTest, OutputsAreValidGridsAndDeterministic) {
  DensityModel m = toy2_model();
  SdeSpec vp;
  SamplerConfig cfg;
  cfg.t_start = vp.horizon / 2.0;
  cfg.refine_steps = 25;
  Rng a(55), b(55);
  for (int i = 0; i < 20; ++i) {
    DiscreteGrid ga = two_phase_sample(m, vp, cfg, a);
    DiscreteGrid gb = two_phase_sample(m, vp, cfg, b);
    EXPECT_NO_THROW(ga.validate());
    EXPECT_EQ(ga.dims, m.arch().dims);
    EXPECT_EQ(ga.values, gb.values);
  }
}

TEST(TwoPhaseTest, TinyStartScaleDegeneratesGracefully) {
  DensityModel m = toy2_model();
  SdeSpec vp;
  SamplerConfig cfg;
  cfg.t_start = vp.horizon * 1e-3;
  cfg.refine_steps = 1;
  Rng rng(66);
  for (int i = 0; i < 50; ++i) {
    DiscreteGrid g = two_phase_sample(m, vp, cfg, rng);
    EXPECT_NO_THROW(g.validate());
  }
}

TEST(TwoPhaseTest, NeedsPositiveStartScale) {
  DensityModel m = toy2_model();
  SdeSpec vp;
  SamplerConfig cfg;  // t_start = 0
  Rng rng(1);
  EXPECT_THROW(two_phase_sample(m, vp, cfg, rng), ConfigError);
}

TEST(CompletionTest, FullPrefixIsIdentity) {
  DensityModel m = toy2_model();
  SdeSpec vp;
  PartialGrid full{DiscreteGrid{GridDims{{2}}, 3, {5, 2}}, {1, 1}};
  Rng rng(12);
  SamplerConfig direct;
  EXPECT_EQ(complete_image(m, full, vp, direct, rng).values, full.grid.values);
  SamplerConfig refined;
  refined.t_start = vp.horizon / 2.0;
  refined.refine_steps = 10;
  EXPECT_EQ(complete_image(m, full, vp, refined, rng).values, full.grid.values);
}

TEST(CompletionTest, EmptyPrefixMatchesUnconditionalSamplingBitwise) {
  DensityModel m = toy2_model();
  SdeSpec vp;
  SamplerConfig cfg;
  cfg.t_start = vp.horizon / 2.0;
  cfg.refine_steps = 20;
  // unknown cell contents must be ignored entirely
  PartialGrid empty{DiscreteGrid{GridDims{{2}}, 3, {3, 7}}, {0, 0}};
  Rng a(88), b(88);
  for (int i = 0; i < 10; ++i) {
    DiscreteGrid via_completion = complete_image(m, empty, vp, cfg, a);
    DiscreteGrid unconditional = two_phase_sample(m, vp, cfg, b);
    EXPECT_EQ(via_completion.values, unconditional.values);
  }
}

TEST(CompletionTest, DirectSuffixFollowsModelConditionals) {
  DensityModel m = toy2_model();
  SdeSpec vp;
  std::vector<double> joint = enumerate_joint(m);
  std::vector<double> cond(8);
  double norm = 0.0;
  for (int v1 = 0; v1 < 8; ++v1) norm += joint[static_cast<size_t>(8 + v1)];
  for (int v1 = 0; v1 < 8; ++v1) cond[static_cast<size_t>(v1)] =
      joint[static_cast<size_t>(8 + v1)] / norm;

  PartialGrid prefix{DiscreteGrid{GridDims{{2}}, 3, {1, 0}}, {1, 0}};
  SamplerConfig direct;
  const int n = 10000;
  std::vector<double> hist(8, 0.0);
  Rng rng(99);
  for (int i = 0; i < n; ++i) {
    DiscreteGrid g = complete_image(m, prefix, vp, direct, rng);
    ASSERT_EQ(g.values[0], 1);
    hist[static_cast<size_t>(g.values[1])] += 1.0 / n;
  }
  EXPECT_LT(total_variation(hist, cond), 0.05);
}

TEST(CompletionTest, PrefixSurvivesRefinementBitExactly) {
  DensityModel m = toy2_model();
  SdeSpec vp;
  SamplerConfig cfg;
  cfg.t_start = vp.horizon / 2.0;
  cfg.refine_steps = 15;
  PartialGrid prefix{DiscreteGrid{GridDims{{2}}, 3, {6, 0}}, {1, 0}};
  Rng rng(113);
  for (int i = 0; i < 25; ++i) {
    DiscreteGrid g = complete_image(m, prefix, vp, cfg, rng);
    EXPECT_NO_THROW(g.validate());
    EXPECT_EQ(g.values[0], 6);
  }
}

TEST(CompletionTest, RejectsNonContiguousMasksAndMismatchedGrids) {
  DensityModel m = toy2_model();
  SdeSpec vp;
  SamplerConfig cfg;
  Rng rng(1);

  PartialGrid gap{DiscreteGrid{GridDims{{2}}, 3, {1, 1}}, {0, 1}};
  EXPECT_THROW(complete_image(m, gap, vp, cfg, rng), ConfigError);

  PartialGrid short_mask{DiscreteGrid{GridDims{{2}}, 3, {1, 1}}, {1}};
  EXPECT_THROW(complete_image(m, short_mask, vp, cfg, rng), ConfigError);

  PartialGrid wrong_dims{DiscreteGrid{GridDims{{3}}, 3, {1, 1, 1}}, {1, 0, 0}};
  EXPECT_THROW(complete_image(m, wrong_dims, vp, cfg, rng), ConfigError);

  PartialGrid wrong_depth{DiscreteGrid{GridDims{{2}}, 4, {1, 1}}, {1, 0}};
  EXPECT_THROW(complete_image(m, wrong_depth, vp, cfg, rng), ConfigError);
}

TEST(StartScaleTest, PicksTheFirstGridPointAboveOnePixel) {
  SdeSpec ve = SdeSpec{};
  ve.kind = SdeKind::VE;
  ve.horizon = 0.5;
  GridDataset ref{GridDims{{1}}, 3, {{3}}, {}};
  double t = default_start_scale(ve, ref);
  int i = static_cast<int>(std::lround(t / ve.horizon * 200.0));
  EXPECT_DOUBLE_EQ(t, ve.horizon * i / 200);
  EXPECT_GE(avg_abs_perturbation(ve, t, ref), 1.0);
  ASSERT_GT(i, 1);
  EXPECT_LT(avg_abs_perturbation(ve, ve.horizon * (i - 1) / 200, ref), 1.0);
}

TEST(StartScaleTest, ComplainsWhenTheHorizonIsTooQuiet) {
  SdeSpec quiet = SdeSpec{};
  quiet.kind = SdeKind::VE;
  quiet.sigma_max = 0.02;
  quiet.horizon = 0.5;
  GridDataset ref{GridDims{{1}}, 3, {{3}}, {}};
  EXPECT_THROW(default_start_scale(quiet, ref), ConfigError);
  EXPECT_THROW(default_start_scale(quiet, ref, 0), ConfigError);
}

}  // namespace
}  // namespace ncml
