#include "ncml/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "ncml/oracle.hpp"
#include "test_util.hpp"

using ncml::Adam;
using ncml::AdamConfig;
using ncml::ConfigError;
using ncml::DensityModel;
using ncml::DiscreteGrid;
using ncml::GridDataset;
using ncml::GridDims;
using ncml::LossResult;
using ncml::mle_loss;
using ncml::ModelArch;
using ncml::MuSpec;
using ncml::ncml_expected_loss;
using ncml::ncml_loss;
using ncml::ncml_loss_value;
using ncml::regularized_form_loss;
using ncml::Rng;
using ncml::SdeKind;
using ncml::SdeSpec;
using ncml::Tensor;
using ncml::train;
using ncml::TrainConfig;
using ncml::TrainLog;

namespace {

ModelArch micro_arch() {
  ModelArch a;
  a.dims = GridDims{{1}};
  a.bit_depth = 3;
  a.hidden_layers = 1;
  a.hidden_width = 1;
  a.mixture_k = 1;
  a.fourier_dim = 1;
  a.init_seed = 5;
  return a;
}

ModelArch toy_arch() {
  ModelArch a;
  a.dims = GridDims{{2}};
  a.bit_depth = 3;
  a.hidden_layers = 1;
  a.hidden_width = 16;
  a.mixture_k = 2;
  a.fourier_dim = 4;
  a.init_seed = 9;
  return a;
}

GridDataset micro_batch(int n, uint64_t seed) {
  GridDataset d;
  d.dims = GridDims{{1}};
  d.bit_depth = 3;
  Rng rng = Rng::stream(seed, 0);
  for (int i = 0; i < n; ++i)
    d.samples.push_back({static_cast<std::int32_t>(rng.below(8))});
  return d;
}

// two antipodal modes with one level of jitter
GridDataset toy_dataset(int n, uint64_t seed) {
  GridDataset d;
  d.dims = GridDims{{2}};
  d.bit_depth = 3;
  Rng rng = Rng::stream(seed, 0);
  for (int i = 0; i < n; ++i) {
    std::int32_t a = i % 2 == 0 ? 1 : 6;
    std::int32_t b = i % 2 == 0 ? 6 : 1;
    a += static_cast<std::int32_t>(rng.below(3)) - 1;
    b += static_cast<std::int32_t>(rng.below(3)) - 1;
    d.samples.push_back({std::clamp(a, 0, 7), std::clamp(b, 0, 7)});
  }
  return d;
}

bool same_params(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (size_t p = 0; p < a.size(); ++p) {
    if (a[p].size() != b[p].size()) return false;
    for (std::int64_t k = 0; k < a[p].size(); ++k)
      if (a[p][k] != b[p][k]) return false;
  }
  return true;
}

}  // namespace

TEST(MuSpecTest, ValidatesDiscreteForm) {
  EXPECT_NO_THROW(MuSpec::uniform().validate(0.1));
  EXPECT_NO_THROW(MuSpec::discrete({0.0, 0.05}, {0.5, 0.5}).validate(0.1));
  EXPECT_THROW(MuSpec::discrete({}, {}).validate(0.1), ConfigError);
  EXPECT_THROW(MuSpec::discrete({0.0}, {0.5, 0.5}).validate(0.1), ConfigError);
  EXPECT_THROW(MuSpec::discrete({0.2}, {1.0}).validate(0.1), ConfigError);
  EXPECT_THROW(MuSpec::discrete({0.0, 0.05}, {1.5, -0.5}).validate(0.1), ConfigError);
  EXPECT_THROW(MuSpec::discrete({0.0, 0.05}, {0.5, 0.4}).validate(0.1), ConfigError);
}

TEST(MuSpecTest, UniformDrawCoversTheHorizon) {
  MuSpec mu = MuSpec::uniform();
  Rng rng(3);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    double t = mu.draw(rng, 0.1);
    ASSERT_GE(t, 0.0);
    ASSERT_LT(t, 0.1);
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  EXPECT_LT(lo, 0.001);
  EXPECT_GT(hi, 0.099);
}

TEST(MuSpecTest, DiscreteDrawTracksWeights) {
  MuSpec mu = MuSpec::discrete({0.0, 0.03, 0.08}, {0.2, 0.5, 0.3});
  Rng rng(4);
  int counts[3] = {0, 0, 0};
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    double t = mu.draw(rng, 0.1);
    counts[t == 0.0 ? 0 : t == 0.03 ? 1 : 2]++;
  }
  EXPECT_NEAR(counts[0] / static_cast<double>(n), 0.2, 0.01);
  EXPECT_NEAR(counts[1] / static_cast<double>(n), 0.5, 0.01);
  EXPECT_NEAR(counts[2] / static_cast<double>(n), 0.3, 0.01);
}

TEST(MleLossTest, UniformDensityCostsBitDepthNats) {
  GridDataset batch = micro_batch(16, 11);
  auto fd = [](const DiscreteGrid& g, std::int32_t) {
    return -static_cast<double>(g.values.size()) * 3.0 * std::log(2.0);
  };
  auto fc = [](const ncml::RealVector&, double, std::int32_t) { return 0.0; };
  Rng rng(1);
  double loss = ncml_loss_value(fc, fd, batch, SdeSpec{}, MuSpec::delta_at_zero(), rng);
  EXPECT_NEAR(loss, 3.0 * std::log(2.0), 1e-14);
}

TEST(MleLossTest, PointMassAtZeroMatchesMleBitExactly) {
  DensityModel m = DensityModel::init(micro_arch());
  GridDataset batch = micro_batch(12, 12);
  SdeSpec sde;
  sde.kind = SdeKind::VP;

  Rng a(7), b(7);
  LossResult viaNcml = ncml_loss(m, batch, sde, MuSpec::delta_at_zero(), a);
  LossResult viaMle = mle_loss(m, batch, b);
  EXPECT_DOUBLE_EQ(viaNcml.loss, viaMle.loss);
  ASSERT_EQ(viaNcml.grads.size(), viaMle.grads.size());
  for (size_t p = 0; p < viaNcml.grads.size(); ++p)
    for (std::int64_t k = 0; k < viaNcml.grads[p].size(); ++k)
      EXPECT_EQ(viaNcml.grads[p][k], viaMle.grads[p][k]);
}

TEST(MleLossTest, PointMassEquivalenceSurvivesDropout) {
  DensityModel m = DensityModel::init(toy_arch());
  GridDataset batch = toy_dataset(8, 13);
  Rng a(19), b(19);
  LossResult viaNcml = ncml_loss(m, batch, SdeSpec{}, MuSpec::delta_at_zero(), a, 0.4);
  LossResult viaMle = mle_loss(m, batch, b, 0.4);
  EXPECT_DOUBLE_EQ(viaNcml.loss, viaMle.loss);
  for (size_t p = 0; p < viaNcml.grads.size(); ++p)
    for (std::int64_t k = 0; k < viaNcml.grads[p].size(); ++k)
      EXPECT_EQ(viaNcml.grads[p][k], viaMle.grads[p][k]);
}

TEST(NcmlLossTest, ValueRouteMatchesGradientRouteBitExactly) {
  DensityModel m = DensityModel::init(toy_arch());
  GridDataset batch = toy_dataset(10, 14);
  SdeSpec sde;
  sde.kind = SdeKind::VP;
  MuSpec mu = MuSpec::uniform();

  auto fc = [&](const ncml::RealVector& x, double t, std::int32_t) {
    return m.log_density_continuous(x, t);
  };
  auto fd = [&](const DiscreteGrid& g, std::int32_t) {
    return m.log_density_discretized(g, 0.0);
  };
  Rng a(23), b(23);
  EXPECT_DOUBLE_EQ(ncml_loss(m, batch, sde, mu, a).loss,
                   ncml_loss_value(fc, fd, batch, sde, mu, b));
}

TEST(NcmlLossTest, RejectsEmptyBatchAndBadDropout) {
  DensityModel m = DensityModel::init(micro_arch());
  GridDataset empty;
  empty.dims = GridDims{{1}};
  empty.bit_depth = 3;
  Rng rng(1);
  EXPECT_THROW(ncml_loss(m, empty, SdeSpec{}, MuSpec::uniform(), rng), ConfigError);
  GridDataset batch = micro_batch(4, 15);
  EXPECT_THROW(ncml_loss(m, batch, SdeSpec{}, MuSpec::uniform(), rng, 1.0), ConfigError);
  EXPECT_THROW(ncml_loss(m, batch, SdeSpec{}, MuSpec::uniform(), rng, -0.1), ConfigError);
}

TEST(NcmlLossTest, DropoutIsSeedDeterministic) {
  DensityModel m = DensityModel::init(toy_arch());
  GridDataset batch = toy_dataset(8, 16);
  Rng a(5), b(5), c(6);
  double la = ncml_loss(m, batch, SdeSpec{}, MuSpec::uniform(), a, 0.5).loss;
  double lb = ncml_loss(m, batch, SdeSpec{}, MuSpec::uniform(), b, 0.5).loss;
  double lc = ncml_loss(m, batch, SdeSpec{}, MuSpec::uniform(), c, 0.5).loss;
  EXPECT_DOUBLE_EQ(la, lb);
  EXPECT_NE(la, lc);
}

TEST(NcmlLossTest, ConditionalModelNeedsLabels) {
  ModelArch arch = toy_arch();
  arch.class_count = 2;
  DensityModel m = DensityModel::init(arch);
  GridDataset batch = toy_dataset(4, 17);
  Rng rng(1);
  EXPECT_THROW(ncml_loss(m, batch, SdeSpec{}, MuSpec::uniform(), rng), ConfigError);
  batch.labels = {0, 1, 1, 0};
  EXPECT_NO_THROW(ncml_loss(m, batch, SdeSpec{}, MuSpec::uniform(), rng));
}

TEST(NcmlLossTest, GradientsMatchFiniteDifferencesOnMicroModel) {
  DensityModel m = DensityModel::init(micro_arch());
  GridDataset batch = micro_batch(4, 18);
  SdeSpec sde;
  sde.kind = SdeKind::VP;
  MuSpec mu = MuSpec::discrete({0.0, 0.06}, {0.5, 0.5});

  auto loss_at = [&]() {
    Rng rng(42);
    return ncml_loss(m, batch, sde, mu, rng).loss;
  };
  Rng rng(42);
  LossResult res = ncml_loss(m, batch, sde, mu, rng);

  const double h = 1e-5;
  for (size_t p = 0; p < m.parameters().size(); ++p) {
    for (std::int64_t k = 0; k < m.parameters()[p].size(); ++k) {
      double saved = m.parameters()[p][k];
      m.parameters()[p][k] = saved + h;
      double plus = loss_at();
      m.parameters()[p][k] = saved - h;
      double minus = loss_at();
      m.parameters()[p][k] = saved;
      double fd = (plus - minus) / (2.0 * h);
      EXPECT_LT(testutil::rel_error(res.grads[p][k], fd), 1e-4)
          << "param " << m.parameter_names()[p] << " coord " << k;
    }
  }
}

TEST(NcmlLossTest, MleGradientsMatchFiniteDifferences) {
  DensityModel m = DensityModel::init(micro_arch());
  GridDataset batch = micro_batch(6, 21);
  LossResult res = mle_loss(m, batch);
  const double h = 1e-5;
  for (size_t p = 0; p < m.parameters().size(); ++p) {
    for (std::int64_t k = 0; k < m.parameters()[p].size(); ++k) {
      double saved = m.parameters()[p][k];
      m.parameters()[p][k] = saved + h;
      double plus = mle_loss(m, batch).loss;
      m.parameters()[p][k] = saved - h;
      double minus = mle_loss(m, batch).loss;
      m.parameters()[p][k] = saved;
      EXPECT_LT(testutil::rel_error(res.grads[p][k], (plus - minus) / (2.0 * h)), 1e-4);
    }
  }
}

TEST(NcmlLossTest, OracleSubstitutionRecoversCrossEntropy) {
  ncml::GaussianMixtureOracle gm;
  gm.weights = {0.6, 0.4};
  gm.means = {{-0.5, -0.35}, {0.5, 0.4}};
  gm.variances = {{0.01, 0.015}, {0.012, 0.01}};
  gm.validate();

  SdeSpec sde;
  sde.kind = SdeKind::VP;
  const double t = 0.3 * sde.horizon;
  GridDims dims{{2}};

  // dataset of oracle draws snapped to the 8-bit grid
  GridDataset data;
  data.dims = dims;
  data.bit_depth = 8;
  Rng drng(31);
  const int n = 20000;
  for (int i = 0; i < n; ++i)
    data.samples.push_back(ncml::snap(ncml::oracle_sample(gm, dims, drng), 8).values);

  auto fc = [&](const ncml::RealVector& x, double tt, std::int32_t) {
    return ncml::oracle_perturbed_logdensity(gm, x, tt, sde);
  };
  auto fd = [](const DiscreteGrid&, std::int32_t) { return 0.0; };
  Rng lrng(32);
  double piped = ncml_loss_value(fc, fd, data, sde, MuSpec::discrete({t}, {1.0}), lrng);

  // independent estimate of the same cross-entropy from fresh draws
  Rng rng(33);
  ncml::KahanSum ref;
  for (int i = 0; i < 200000; ++i) {
    ncml::RealVector xt = ncml::oracle_sample_perturbed(gm, dims, t, sde, rng);
    ref.add(-ncml::oracle_perturbed_logdensity(gm, xt, t, sde) / 2.0);
  }
  EXPECT_NEAR(piped, ref.mean(), 0.03);
}

TEST(RegularizedFormTest, PointMassAtZeroReducesToMle) {
  DensityModel m = DensityModel::init(toy_arch());
  GridDataset batch = toy_dataset(8, 41);
  SdeSpec sde;
  double reg = regularized_form_loss(m, batch, sde, MuSpec::delta_at_zero(), 91);
  EXPECT_DOUBLE_EQ(reg, mle_loss(m, batch).loss);
}

TEST(RegularizedFormTest, TwoEqualScalesDoubleTheExpectedForm) {
  DensityModel m = DensityModel::init(toy_arch());
  GridDataset batch = toy_dataset(8, 42);
  SdeSpec sde;
  sde.kind = SdeKind::VP;
  MuSpec mu = MuSpec::discrete({0.0, 0.05}, {0.5, 0.5});
  double reg = regularized_form_loss(m, batch, sde, mu, 92);
  double expected = ncml_expected_loss(m, batch, sde, mu, 92);
  EXPECT_DOUBLE_EQ(reg, 2.0 * expected);
}

TEST(RegularizedFormTest, ProportionalToExpectedFormUnderSharedDraws) {
  DensityModel m = DensityModel::init(toy_arch());
  GridDataset batch = toy_dataset(10, 43);
  SdeSpec sde;
  sde.kind = SdeKind::SubVP;
  MuSpec mu = MuSpec::discrete({0.0, 0.04, 0.09}, {0.25, 0.35, 0.40});
  double reg = regularized_form_loss(m, batch, sde, mu, 93);
  double expected = ncml_expected_loss(m, batch, sde, mu, 93);
  EXPECT_LT(std::abs(reg - expected / 0.25) / std::abs(reg), 1e-12);
}

TEST(RegularizedFormTest, NeedsMassAtZeroAndFiniteSupport) {
  DensityModel m = DensityModel::init(toy_arch());
  GridDataset batch = toy_dataset(4, 44);
  SdeSpec sde;
  EXPECT_THROW(regularized_form_loss(m, batch, sde, MuSpec::discrete({0.05}, {1.0}), 1),
               ConfigError);
  EXPECT_THROW(regularized_form_loss(m, batch, sde, MuSpec::uniform(), 1), ConfigError);
  EXPECT_THROW(ncml_expected_loss(m, batch, sde, MuSpec::uniform(), 1), ConfigError);
}

TEST(AdamTest, ZeroLearningRateLeavesParametersUntouched) {
  DensityModel m = DensityModel::init(toy_arch());
  std::vector<Tensor> before = m.parameters();

  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 4;
  cfg.adam.lr = 0.0;
  cfg.sde.kind = SdeKind::VP;
  cfg.eval_every = 0;
  GridDataset data = toy_dataset(16, 51);
  TrainLog log = train(m, data, cfg);
  EXPECT_FALSE(log.aborted);
  EXPECT_TRUE(same_params(m.parameters(), before));
}

TEST(AdamTest, RejectsMismatchedGradients) {
  DensityModel m = DensityModel::init(micro_arch());
  Adam opt(m.parameters(), AdamConfig{});
  std::vector<Tensor> grads;
  EXPECT_THROW(opt.step(m.parameters(), grads), ConfigError);
}

TEST(AdamTest, ClipsTheGlobalGradientNorm) {
  // one parameter, gradient far beyond the clip: the first update must be
  // lr * m_hat / (sqrt(v_hat) + eps) with the clipped gradient, i.e. about lr
  std::vector<Tensor> params{Tensor({1}, {0.0})};
  AdamConfig cfg;
  cfg.clip_norm = 5.0;
  Adam opt(params, cfg);
  std::vector<Tensor> grads{Tensor({1}, {1e9})};
  opt.step(params, grads);
  // clipped g = 5; m_hat = 5, v_hat = 25 -> step = lr * 5 / (5 + eps)
  EXPECT_NEAR(params[0][0], -cfg.lr, 1e-10);
}

TEST(TrainTest, SameSeedGivesIdenticalTrajectories) {
  GridDataset data = toy_dataset(32, 52);
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.batch_size = 8;
  cfg.sde.kind = SdeKind::VP;
  cfg.eval_every = 10;
  cfg.probe_t = {0.0, 0.05};
  cfg.seed = 77;

  DensityModel m1 = DensityModel::init(toy_arch());
  DensityModel m2 = DensityModel::init(toy_arch());
  TrainLog l1 = train(m1, data, cfg);
  TrainLog l2 = train(m2, data, cfg);
  EXPECT_EQ(l1.csv(), l2.csv());
  EXPECT_EQ(l1.losses, l2.losses);
  EXPECT_TRUE(same_params(m1.parameters(), m2.parameters()));
}

TEST(TrainTest, MetricsRowsFollowTheCadence) {
  GridDataset data = toy_dataset(16, 53);
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.batch_size = 4;
  cfg.sde.kind = SdeKind::VP;
  cfg.eval_every = 2;
  cfg.probe_t = {0.0, 0.05};

  DensityModel m = DensityModel::init(toy_arch());
  std::vector<std::int64_t> checkpoints;
  TrainLog log = train(m, data, cfg, [&](const DensityModel&, std::int64_t step) {
    checkpoints.push_back(step);
  });
  ASSERT_EQ(log.rows.size(), 3u);
  EXPECT_EQ(log.rows[0].step, 2);
  EXPECT_EQ(log.rows[2].step, 6);
  EXPECT_EQ(checkpoints, (std::vector<std::int64_t>{2, 4, 6}));
  for (const auto& row : log.rows) {
    EXPECT_TRUE(std::isfinite(row.bpd_t0));
    ASSERT_EQ(row.delta.size(), 2u);
  }
  std::string csv = log.csv();
  EXPECT_NE(csv.find("step,loss,bpd_t0,delta@0,delta@0.05"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(TrainTest, LossFallsOnTheToyProblem) {
  GridDataset data = toy_dataset(64, 54);
  TrainConfig cfg;
  cfg.steps = 500;
  cfg.batch_size = 16;
  cfg.sde.kind = SdeKind::VP;
  cfg.eval_every = 0;
  cfg.seed = 3;

  DensityModel m = DensityModel::init(toy_arch());
  TrainLog log = train(m, data, cfg);
  ASSERT_EQ(log.losses.size(), 500u);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 50; ++i) {
    head += log.losses[static_cast<size_t>(i)];
    tail += log.losses[static_cast<size_t>(450 + i)];
  }
  head /= 50.0;
  tail /= 50.0;
  EXPECT_LT(tail, head - 0.05);
}

TEST(TrainTest, NonFiniteParametersAbortAndRollBack) {
  GridDataset data = toy_dataset(16, 55);
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.batch_size = 4;
  // inf is > 0, so it passes validation; the first update then produces
  // non-finite parameters and the loop must roll back and stop
  cfg.adam.lr = std::numeric_limits<double>::infinity();
  cfg.sde.kind = SdeKind::VP;
  cfg.eval_every = 0;

  DensityModel m = DensityModel::init(toy_arch());
  std::vector<Tensor> init = m.parameters();
  TrainLog log = train(m, data, cfg);
  EXPECT_TRUE(log.aborted);
  EXPECT_EQ(log.abort_step, 0);
  EXPECT_TRUE(same_params(m.parameters(), init));
  EXPECT_EQ(log.losses.size(), 1u);
}

TEST(TrainTest, ValidatesConfig) {
  GridDataset data = toy_dataset(8, 56);
  DensityModel m = DensityModel::init(toy_arch());
  TrainConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(train(m, data, cfg), ConfigError);
  cfg.steps = 1;
  cfg.dropout = 1.0;
  EXPECT_THROW(train(m, data, cfg), ConfigError);
  cfg.dropout = 0.0;
  cfg.probe_t = {0.5};  // beyond the default horizon
  EXPECT_THROW(train(m, data, cfg), ConfigError);
}
