// Trains the same architecture twice on 8x8 textured patches, once as a
// plain maximum-likelihood baseline and once with scales drawn uniformly
// from [0, T], then prints how much one quantization level of corruption
// moves each model's bits per dimension across the conditioning range.
//
//   ./robustness_table [steps]

#include <cstdio>
#include <cstdlib>

#include "ncml/datasets.hpp"
#include "ncml/perturbation.hpp"
#include "ncml/training.hpp"

using namespace ncml;

int main(int argc, char** argv) {
  DatasetSpec ds;
  ds.generator = "textured-patches-8x8";
  ds.count = 256;
  ds.bit_depth = 3;
  ds.seed = 11;
  GridDataset data = generate_dataset(ds);

  SdeSpec sde = SdeSpec::defaults(SdeKind::VP);
  sde.horizon = 0.025;  // about one 3-bit level of noise at the horizon

  ModelArch arch;
  arch.dims = data.dims;
  arch.bit_depth = ds.bit_depth;
  arch.hidden_layers = 1;
  arch.hidden_width = 48;
  arch.mixture_k = 3;
  arch.fourier_dim = 8;
  arch.init_seed = 1;

  TrainConfig tc;
  tc.steps = argc > 1 ? std::atoll(argv[1]) : 800;
  tc.batch_size = 16;
  tc.adam.lr = 0.01;
  tc.seed = 1;
  tc.sde = sde;
  tc.eval_every = 0;

  std::printf("training MLE baseline (%lld steps)...\n",
              static_cast<long long>(tc.steps));
  DensityModel mle = DensityModel::init(arch);
  tc.mu = MuSpec::delta_at_zero();
  train(mle, data, tc);

  std::printf("training noise-conditional model (same seed, same arch)...\n");
  DensityModel ncml = DensityModel::init(arch);
  tc.mu = MuSpec::uniform();
  train(ncml, data, tc);

  auto fn = [](const DensityModel& m) {
    return [&m](const DiscreteGrid& g, double t, std::int32_t) {
      return m.log_density_discretized(g, t);
    };
  };
  std::vector<double> grid;
  for (int i = 0; i <= 8; ++i) grid.push_back(sde.horizon * i / 8.0);
  PiSpec pi{1.0, 2024};
  RobustnessReport rm = robustness_sweep(fn(mle), data, pi, grid);
  RobustnessReport rn = robustness_sweep(fn(ncml), data, pi, grid);

  std::printf("\n  delta bpd under pi=1 corruption (one level per coordinate)\n");
  std::printf("  %8s  %10s  %10s  %10s\n", "t", "avg |dx|px", "MLE", "NCML");
  for (size_t i = 0; i < grid.size(); ++i)
    std::printf("  %8.4f  %10.3f  %10.3f  %10.3f\n", grid[i],
                avg_abs_perturbation(sde, grid[i], data), rm.delta_bpd[i],
                rn.delta_bpd[i]);
  std::printf(
      "\nthe baseline pays a large, flat gap; the noise-conditional model's\n"
      "gap shrinks once the conditioning scale covers the corruption.\n");
  return 0;
}
