// ncml: train, evaluate, and sample grid density models from the command
// line. Every subcommand is driven by a JSON config (see include/ncml/
// config.hpp for the schema); flags override the loaded fields. All output
// files are written atomically and are byte-reproducible from (config,
// seed); wall-clock timestamps appear only in the run.log sidecar.
//
// Exit codes: 0 success, 2 bad configuration, 3 numeric failure,
// 4 I/O failure. Failures print a single JSON line on stderr.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ncml/checkpoint.hpp"
#include "ncml/config.hpp"
#include "ncml/datasets.hpp"
#include "ncml/errors.hpp"
#include "ncml/gridfile.hpp"
#include "ncml/model.hpp"
#include "ncml/oracle.hpp"
#include "ncml/parallel.hpp"
#include "ncml/perturbation.hpp"
#include "ncml/sampling.hpp"
#include "ncml/sde.hpp"
#include "ncml/training.hpp"

namespace {

using namespace ncml;

std::string g_log_dir;   // set once an output directory exists
std::string g_cmd_line;  // argv joined, for the run.log sidecar
std::chrono::steady_clock::time_point g_start;

// The only place wall-clock time is allowed to appear.
void append_run_log(int exit_code) {
  if (g_log_dir.empty()) return;
  auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                std::chrono::steady_clock::now() - g_start)
                .count();
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
  std::ofstream f(g_log_dir + "/run.log", std::ios::app);
  f << stamp << " " << g_cmd_line << " exit=" << exit_code << " ms=" << ms
    << "\n";
}

std::string json_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size() + 8);
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += c;
        }
    }
  }
  return out;
}

void print_error(const char* code, const std::string& message) {
  std::cerr << "{\"error\":\"" << code << "\",\"message\":\""
            << json_escape(message) << "\"}\n";
}

std::string resolve_out_dir(const std::string& flag, const std::string& from_config) {
  std::string out = flag.empty() ? from_config : flag;
  if (out.empty())
    throw ConfigError("an output directory is required (--out or config out_dir)");
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec)
    throw IoError("cannot create output directory " + out + ": " + ec.message());
  g_log_dir = out;
  return out;
}

// --sde swaps the schedule for the named kind's calibrated defaults,
// keeping only data_scale from the config. Numeric sde settings in the
// config apply to the config's own kind, not to a flag override.
void apply_sde_flag(ExperimentConfig& c, const std::string& kind) {
  if (kind.empty()) return;
  double data_scale = c.sde.data_scale;
  c.sde = SdeSpec::defaults(parse_sde_kind(kind));
  c.sde.data_scale = data_scale;
  c.train.sde = c.sde;
}

void check_data_matches(const ModelArch& a, const GridDataset& d) {
  if (a.dims.extents != d.dims.extents || a.bit_depth != d.bit_depth)
    throw ConfigError(
        "checkpoint grid shape does not match the dataset (model: " +
        a.dims.to_string() + ", " + std::to_string(a.bit_depth) +
        "-bit; data: " + d.dims.to_string() + ", " +
        std::to_string(d.bit_depth) + "-bit)");
}

// Conditional models are evaluated with the sample's label; unconditional
// models ignore labels entirely. Mirrors the adapter used during training.
template <class Model>
auto density_fn(const Model& m) {
  return [&m](const DiscreteGrid& g, double t, std::int32_t label) {
    int cls = (m.arch().class_count > 0 && label >= 0) ? label : -1;
    return m.log_density_discretized(g, t, cls);
  };
}

int pick_class(const ModelArch& arch, int flag_cls, std::int64_t i,
               const GridDataset* labels_from = nullptr) {
  if (arch.class_count == 0) {
    if (flag_cls >= 0)
      throw ConfigError("--class given but the model is unconditional");
    return -1;
  }
  if (flag_cls >= 0) {
    if (flag_cls >= arch.class_count)
      throw ConfigError("--class " + std::to_string(flag_cls) +
                        " out of range (model has " +
                        std::to_string(arch.class_count) + " classes)");
    return flag_cls;
  }
  if (labels_from && labels_from->labeled())
    return labels_from->labels[static_cast<size_t>(i)];
  return static_cast<int>(i % arch.class_count);
}

void export_preview(const std::string& out, const std::string& stem,
                    const GridDataset& set, std::int64_t limit = 8) {
  const auto& e = set.dims.extents;
  bool pgm = e.size() == 2;
  bool ppm = e.size() == 3 && e[2] == 3;
  if (!pgm && !ppm) return;
  for (std::int64_t i = 0; i < std::min<std::int64_t>(set.size(), limit); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s-%03lld.%s", stem.c_str(),
                  static_cast<long long>(i), pgm ? "pgm" : "ppm");
    DiscreteGrid g = set.sample_grid(i);
    if (pgm)
      write_pgm(out + "/" + name, g);
    else
      write_ppm(out + "/" + name, g);
  }
}

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::string ckpt_path;
  std::string sde_kind;
  std::uint64_t seed = 0;
  double pi = 0.0;
  double t_start = 0.0;
  std::int64_t steps = 0;
  int cls = -1;
  std::int64_t count = 0;
  double prefix_frac = 0.5;
  double target = 10.0;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* pi_opt = nullptr;
  CLI::Option* t_start_opt = nullptr;
  CLI::Option* steps_opt = nullptr;
};

ExperimentConfig load_config(const CommonFlags& f) {
  ExperimentConfig c = load_experiment_config(f.config_path);
  apply_sde_flag(c, f.sde_kind);
  return c;
}

std::string ckpt_path(const CommonFlags& f, const std::string& out) {
  return f.ckpt_path.empty() ? out + "/model.ncml" : f.ckpt_path;
}

// ---- train ----------------------------------------------------------------

void run_train(const CommonFlags& f) {
  ExperimentConfig c = load_config(f);
  if (*f.seed_opt) c.train.seed = f.seed;
  if (*f.steps_opt) c.train.steps = f.steps;

  GridDataset data = load_dataset(c);
  ModelArch arch = resolve_arch(c, data);
  DensityModel model = DensityModel::init(arch);

  TrainLog log = train(model, data, c.train);

  std::string out = resolve_out_dir(f.out_dir, c.out_dir);
  atomic_write_file(out + "/metrics.csv", log.csv());
  std::int64_t step = log.aborted ? log.abort_step : c.train.steps;
  save_checkpoint(out + "/model.ncml", model, c.train.sde, step, c.train.seed);

  if (log.aborted)
    throw NumericError("training aborted at step " +
                       std::to_string(log.abort_step) +
                       ": parameters went non-finite (artifacts hold the last "
                       "good state)");

  const MetricsRow& last = log.rows.back();
  std::cout << "trained " << c.train.steps << " steps: loss "
            << format_double(last.loss) << " nats/dim, bpd(0) "
            << format_double(last.bpd_t0) << "\n"
            << "wrote " << out << "/metrics.csv, " << out << "/model.ncml\n";
}

// ---- eval-nll -------------------------------------------------------------

void run_eval_nll(const CommonFlags& f) {
  ExperimentConfig c = load_config(f);
  std::string out = resolve_out_dir(f.out_dir, c.out_dir);
  Checkpoint ck = load_checkpoint(ckpt_path(f, out));
  GridDataset data = load_dataset(c);
  check_data_matches(ck.model.arch(), data);

  double t = *f.t_start_opt ? f.t_start : 0.0;
  if (!(t >= 0.0 && t <= ck.sde.horizon))
    throw ConfigError("--t-start must lie in [0, horizon=" +
                      std::to_string(ck.sde.horizon) + "]");

  double bpd = dataset_bpd(density_fn(ck.model), data, t);
  constexpr double kLn2 = 0.6931471805599453;
  std::string report = "{\n  \"t\": " + format_double(t) +
                       ",\n  \"bpd\": " + format_double(bpd) +
                       ",\n  \"nats_per_dim\": " + format_double(bpd * kLn2) +
                       ",\n  \"samples\": " + std::to_string(data.size()) +
                       "\n}\n";
  atomic_write_file(out + "/eval.json", report);
  std::cout << "bpd " << format_double(bpd) << " at t=" << format_double(t)
            << " over " << data.size() << " samples\n";
}

// ---- sanity-test ----------------------------------------------------------

void run_sanity_test(const CommonFlags& f) {
  ExperimentConfig c = load_config(f);
  std::string out = resolve_out_dir(f.out_dir, c.out_dir);
  Checkpoint ck = load_checkpoint(ckpt_path(f, out));
  GridDataset data = load_dataset(c);
  check_data_matches(ck.model.arch(), data);

  std::vector<double> grid = c.train.probe_t;
  if (grid.empty())
    for (int i = 0; i <= 8; ++i) grid.push_back(ck.sde.horizon * i / 8.0);
  for (double t : grid)
    if (!(t >= 0.0 && t <= ck.sde.horizon))
      throw ConfigError("probe scale " + std::to_string(t) +
                        " outside [0, horizon]");

  // Same corruption stream the trainer uses for its delta columns, so a
  // sanity sweep at matching (seed, pi, t) reproduces metrics.csv exactly.
  std::uint64_t seed = *f.seed_opt ? f.seed : c.train.seed;
  PiSpec spec{*f.pi_opt ? f.pi : c.train.probe_pi, seed ^ 0x9d5ull};

  RobustnessReport rep = robustness_sweep(density_fn(ck.model), data, spec, grid);
  write_robustness_report(rep, out + "/sanity.csv", out + "/sanity.json");

  double worst = 0.0;
  for (double d : rep.delta_bpd) worst = std::max(worst, d);
  std::cout << "pi " << format_double(rep.pi) << ": max |delta| "
            << format_double(worst) << " bpd over " << grid.size()
            << " scales\n"
            << "wrote " << out << "/sanity.csv, " << out << "/sanity.json\n";
}

// ---- sde-stats ------------------------------------------------------------

void run_sde_stats(const CommonFlags& f) {
  ExperimentConfig c = load_config(f);
  std::string out = resolve_out_dir(f.out_dir, c.out_dir);
  GridDataset data = load_dataset(c);

  std::int64_t n = *f.steps_opt ? f.steps : 20;
  if (n < 1) throw ConfigError("--steps must be >= 1");

  std::string csv = "t,mean_scale,std,avg_abs_pixels\n";
  for (std::int64_t i = 0; i <= n; ++i) {
    double t = c.sde.horizon * static_cast<double>(i) / static_cast<double>(n);
    MarginalKernel k = marginal(c.sde, t);
    double avg = avg_abs_perturbation(c.sde, t, data);
    csv += format_double(t) + "," + format_double(k.mean_scale) + "," +
           format_double(k.std) + "," + format_double(avg) + "\n";
  }
  atomic_write_file(out + "/sde-stats.csv", csv);

  double end = avg_abs_perturbation(c.sde, c.sde.horizon, data);
  std::cout << to_string(c.sde.kind) << " horizon "
            << format_double(c.sde.horizon) << ": avg |perturbation| reaches "
            << format_double(end) << " pixels\n"
            << "wrote " << out << "/sde-stats.csv\n";
}

// ---- sample ---------------------------------------------------------------

void run_sample(const CommonFlags& f) {
  ExperimentConfig c = load_config(f);
  std::string out = resolve_out_dir(f.out_dir, c.out_dir);
  Checkpoint ck = load_checkpoint(ckpt_path(f, out));
  const ModelArch& arch = ck.model.arch();

  SdeSpec sde = f.sde_kind.empty() ? ck.sde : c.sde;
  SamplerConfig scfg = c.sampler;
  if (*f.seed_opt) scfg.seed = f.seed;
  if (*f.t_start_opt) scfg.t_start = f.t_start;
  if (*f.steps_opt) scfg.refine_steps = static_cast<int>(f.steps);
  if (scfg.t_start < 0.0)
    scfg.t_start = default_start_scale(sde, load_dataset(c));
  scfg.validate(sde);

  std::int64_t count = f.count > 0 ? f.count : 16;
  GridDataset set;
  set.dims = arch.dims;
  set.bit_depth = arch.bit_depth;
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng = Rng::stream(scfg.seed, static_cast<std::uint64_t>(i));
    int cls = pick_class(arch, f.cls, i);
    DiscreteGrid g = scfg.t_start == 0.0
                         ? ancestral_sample_discrete(ck.model, 0.0, rng, cls)
                         : two_phase_sample(ck.model, sde, scfg, rng, cls);
    set.samples.push_back(std::move(g.values));
  }
  write_grid_dataset(out + "/samples.grid", set);
  export_preview(out, "sample", set);

  std::cout << "wrote " << count << " samples to " << out << "/samples.grid"
            << (scfg.t_start > 0.0
                    ? " (two-phase from t=" + format_double(scfg.t_start) + ")"
                    : " (direct ancestral)")
            << "\n";
}

// ---- complete -------------------------------------------------------------

void run_complete(const CommonFlags& f) {
  ExperimentConfig c = load_config(f);
  std::string out = resolve_out_dir(f.out_dir, c.out_dir);
  Checkpoint ck = load_checkpoint(ckpt_path(f, out));
  const ModelArch& arch = ck.model.arch();
  GridDataset data = load_dataset(c);
  check_data_matches(arch, data);

  SdeSpec sde = f.sde_kind.empty() ? ck.sde : c.sde;
  SamplerConfig scfg = c.sampler;
  if (*f.seed_opt) scfg.seed = f.seed;
  if (*f.t_start_opt) scfg.t_start = f.t_start;
  if (*f.steps_opt) scfg.refine_steps = static_cast<int>(f.steps);
  if (scfg.t_start < 0.0) scfg.t_start = default_start_scale(sde, data);
  scfg.validate(sde);

  if (!(f.prefix_frac >= 0.0 && f.prefix_frac <= 1.0))
    throw ConfigError("--prefix must be in [0, 1]");
  std::int64_t cells = arch.data_dims();
  auto keep = static_cast<std::int64_t>(
      std::llround(f.prefix_frac * static_cast<double>(cells)));

  std::int64_t count = std::min<std::int64_t>(f.count > 0 ? f.count : 8,
                                              data.size());
  if (count == 0) throw ConfigError("complete: empty dataset");

  GridDataset inputs, outputs;
  inputs.dims = outputs.dims = arch.dims;
  inputs.bit_depth = outputs.bit_depth = arch.bit_depth;
  for (std::int64_t i = 0; i < count; ++i) {
    PartialGrid prefix{data.sample_grid(i),
                       std::vector<std::uint8_t>(static_cast<size_t>(cells), 0)};
    for (std::int64_t k = 0; k < keep; ++k)
      prefix.known[static_cast<size_t>(k)] = 1;
    Rng rng = Rng::stream(scfg.seed, static_cast<std::uint64_t>(i));
    int cls = pick_class(arch, f.cls, i, &data);
    DiscreteGrid done = complete_image(ck.model, prefix, sde, scfg, rng, cls);
    inputs.samples.push_back(prefix.grid.values);
    outputs.samples.push_back(std::move(done.values));
  }
  write_grid_dataset(out + "/complete-inputs.grid", inputs);
  write_grid_dataset(out + "/complete-outputs.grid", outputs);
  export_preview(out, "complete-input", inputs);
  export_preview(out, "complete-output", outputs);

  std::cout << "completed " << count << " grids from a " << keep << "/"
            << cells << " cell prefix\n"
            << "wrote " << out << "/complete-inputs.grid, " << out
            << "/complete-outputs.grid\n";
}

// ---- calibrate-horizon ----------------------------------------------------

void run_calibrate(const CommonFlags& f) {
  ExperimentConfig c = load_config(f);
  std::string out = resolve_out_dir(f.out_dir, c.out_dir);
  GridDataset data = load_dataset(c);

  if (!(f.target > 0.0)) throw ConfigError("--target must be positive");
  // The target is quoted in 8-bit pixel units and rescaled to the dataset's
  // own level range, so "std 10" means the same visual corruption at any
  // bit depth.
  double levels = static_cast<double>(max_level(data.bit_depth));
  double target_pixels = f.target * levels / 255.0;

  SdeSpec cal = calibrate_horizon(c.sde, target_pixels, data.bit_depth);
  double achieved = marginal(cal, cal.horizon).std * levels / 2.0;

  std::string report =
      "{\n  \"kind\": \"" + to_string(cal.kind) + "\"" +
      ",\n  \"horizon\": " + format_double(cal.horizon) +
      ",\n  \"sigma_min\": " + format_double(cal.sigma_min) +
      ",\n  \"sigma_max\": " + format_double(cal.sigma_max) +
      ",\n  \"beta_min\": " + format_double(cal.beta_min) +
      ",\n  \"beta_max\": " + format_double(cal.beta_max) +
      ",\n  \"data_scale\": " + format_double(cal.data_scale) +
      ",\n  \"target_pixel_std_8bit\": " + format_double(f.target) +
      ",\n  \"target_pixel_std\": " + format_double(target_pixels) +
      ",\n  \"achieved_pixel_std\": " + format_double(achieved) + "\n}\n";
  atomic_write_file(out + "/horizon.json", report);

  std::cout << to_string(cal.kind) << ": ";
  if (cal.kind == SdeKind::VE)
    std::cout << "sigma_max " << format_double(cal.sigma_max);
  else
    std::cout << "horizon " << format_double(cal.horizon);
  std::cout << " reaches pixel std " << format_double(achieved) << " (target "
            << format_double(target_pixels) << ")\n"
            << "wrote " << out << "/horizon.json\n";
}

// ---- verify-oracle --------------------------------------------------------

// Reverse-SDE refinement against a closed-form two-component mixture score:
// perturbed draws pulled back from t = horizon must recover the component
// weights and means. Self-contained; needs no config or checkpoint.
void run_verify_oracle(const CommonFlags& f) {
  std::string out = resolve_out_dir(f.out_dir, "out");

  GaussianMixtureOracle gm;
  gm.weights = {0.65, 0.35};
  gm.means = {{-0.5, -0.5}, {0.5, 0.5}};
  gm.variances = {{0.01, 0.01}, {0.01, 0.01}};
  gm.validate();

  SdeSpec sde = SdeSpec::defaults(SdeKind::VP);
  GridDims dims{{2}};
  std::int64_t n = f.count > 0 ? f.count : 10000;
  SamplerConfig scfg;
  scfg.t_start = sde.horizon;
  scfg.refine_steps = *f.steps_opt ? static_cast<int>(f.steps) : 100;
  scfg.validate(sde);

  auto score = [&](const RealVector& x, double t) {
    return oracle_score(gm, x, t, sde);
  };

  struct Acc {
    std::vector<std::int64_t> hits = std::vector<std::int64_t>(2, 0);
    std::vector<double> sum = std::vector<double>(4, 0.0);
  };
  Acc total = parallel_reduce<Acc>(
      n, [] { return Acc{}; },
      [&](Acc& acc, std::int64_t i) {
        Rng rng = Rng::stream(f.seed, static_cast<std::uint64_t>(i));
        RealVector x = oracle_sample_perturbed(gm, dims, sde.horizon, sde, rng);
        x = reverse_sde_refine(score, std::move(x), sde.horizon, sde, scfg, rng);
        double d0 = 0.0, d1 = 0.0;
        for (int k = 0; k < 2; ++k) {
          d0 += (x.values[k] - gm.means[0][k]) * (x.values[k] - gm.means[0][k]);
          d1 += (x.values[k] - gm.means[1][k]) * (x.values[k] - gm.means[1][k]);
        }
        int j = d0 <= d1 ? 0 : 1;
        acc.hits[j] += 1;
        for (int k = 0; k < 2; ++k) acc.sum[2 * j + k] += x.values[k];
      },
      [](Acc& a, Acc&& b) {
        for (int j = 0; j < 2; ++j) a.hits[j] += b.hits[j];
        for (int k = 0; k < 4; ++k) a.sum[k] += b.sum[k];
      });

  constexpr double kWeightTol = 0.03, kMeanTol = 0.05;
  double werr = 0.0, merr = 0.0;
  std::string comps;
  for (int j = 0; j < 2; ++j) {
    double w = static_cast<double>(total.hits[j]) / static_cast<double>(n);
    werr = std::max(werr, std::abs(w - gm.weights[j]));
    std::string mean_est = "[";
    for (int k = 0; k < 2; ++k) {
      double m = total.hits[j] > 0
                     ? total.sum[2 * j + k] / static_cast<double>(total.hits[j])
                     : 0.0;
      merr = std::max(merr, std::abs(m - gm.means[j][k]));
      mean_est += format_double(m) + (k == 0 ? ", " : "]");
    }
    comps += std::string(j == 0 ? "" : ",\n") +
             "    {\"weight_true\": " + format_double(gm.weights[j]) +
             ", \"weight_est\": " + format_double(w) +
             ", \"mean_true\": [" + format_double(gm.means[j][0]) + ", " +
             format_double(gm.means[j][1]) + "], \"mean_est\": " + mean_est +
             "}";
    std::cout << "component " << j << ": weight " << format_double(w)
              << " (true " << format_double(gm.weights[j]) << "), mean "
              << mean_est << "\n";
  }
  bool pass = werr <= kWeightTol && merr <= kMeanTol;

  std::string report =
      "{\n  \"samples\": " + std::to_string(n) +
      ",\n  \"refine_steps\": " + std::to_string(scfg.refine_steps) +
      ",\n  \"components\": [\n" + comps + "\n  ]" +
      ",\n  \"max_weight_error\": " + format_double(werr) +
      ",\n  \"max_mean_error\": " + format_double(merr) +
      ",\n  \"weight_tolerance\": " + format_double(kWeightTol) +
      ",\n  \"mean_tolerance\": " + format_double(kMeanTol) +
      ",\n  \"pass\": " + (pass ? "true" : "false") + "\n}\n";
  atomic_write_file(out + "/verify-oracle.json", report);

  std::cout << "max weight error " << format_double(werr) << " (tol "
            << format_double(kWeightTol) << "), max mean error "
            << format_double(merr) << " (tol " << format_double(kMeanTol)
            << ")\n";
  if (!pass)
    throw NumericError("oracle refinement missed the mixture moments (see " +
                       out + "/verify-oracle.json)");
  std::cout << "oracle moment recovery OK\n";
}

}  // namespace

int main(int argc, char** argv) {
  g_start = std::chrono::steady_clock::now();
  for (int i = 0; i < argc; ++i)
    g_cmd_line += std::string(i ? " " : "") + argv[i];

  CLI::App app{
      "noise-conditional grid density models: training, likelihood "
      "evaluation, robustness sweeps, and SDE-based sampling.\n"
      "The NCML_THREADS environment variable caps worker threads."};
  app.require_subcommand(1);

  // One flags instance per subcommand: option-presence checks go through
  // the stored CLI::Option pointers, which must belong to the subcommand
  // that actually ran.
  CommonFlags f_train, f_eval, f_sanity, f_stats, f_sample, f_complete,
      f_cal, f_verify;
  auto add_config = [](CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "experiment config (JSON)")
        ->required();
  };
  auto add_out = [](CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--out", f.out_dir,
                    "output directory (default: config out_dir)");
  };
  auto add_ckpt = [](CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--ckpt", f.ckpt_path,
                    "checkpoint to load (default: <out>/model.ncml)");
  };
  auto add_seed = [](CLI::App* cmd, CommonFlags& f, const char* what) {
    f.seed_opt = cmd->add_option("--seed", f.seed, what);
  };
  auto add_sde = [](CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--sde", f.sde_kind, "schedule kind override")
        ->check(CLI::IsMember({"ve", "vp", "subvp"}));
  };
  auto add_t_start = [](CLI::App* cmd, CommonFlags& f, const char* what) {
    f.t_start_opt = cmd->add_option("--t-start", f.t_start, what);
  };
  auto add_steps = [](CLI::App* cmd, CommonFlags& f, const char* what) {
    f.steps_opt = cmd->add_option("--steps", f.steps, what);
  };

  CLI::App* train_cmd = app.add_subcommand(
      "train", "fit a model to the configured dataset");
  add_config(train_cmd, f_train);
  add_out(train_cmd, f_train);
  add_sde(train_cmd, f_train);
  add_seed(train_cmd, f_train, "training seed override");
  add_steps(train_cmd, f_train, "optimization step count override");

  CLI::App* eval_cmd = app.add_subcommand(
      "eval-nll", "mean bits/dim of a checkpoint on the configured dataset");
  add_config(eval_cmd, f_eval);
  add_out(eval_cmd, f_eval);
  add_ckpt(eval_cmd, f_eval);
  add_t_start(eval_cmd, f_eval, "conditioning scale to evaluate at (default 0)");

  CLI::App* sanity_cmd = app.add_subcommand(
      "sanity-test",
      "likelihood robustness sweep: clean vs pi-corrupted data across "
      "conditioning scales");
  add_config(sanity_cmd, f_sanity);
  add_out(sanity_cmd, f_sanity);
  add_ckpt(sanity_cmd, f_sanity);
  add_seed(sanity_cmd, f_sanity, "corruption seed override (default: train seed)");
  f_sanity.pi_opt = sanity_cmd->add_option(
      "--pi", f_sanity.pi,
      "per-cell corruption probability (default: config probe_pi)");

  CLI::App* stats_cmd = app.add_subcommand(
      "sde-stats", "perturbation-kernel statistics over the scale range");
  add_config(stats_cmd, f_stats);
  add_out(stats_cmd, f_stats);
  add_sde(stats_cmd, f_stats);
  add_steps(stats_cmd, f_stats, "number of grid intervals (default 20)");

  CLI::App* sample_cmd = app.add_subcommand(
      "sample", "draw grids from a checkpoint");
  add_config(sample_cmd, f_sample);
  add_out(sample_cmd, f_sample);
  add_ckpt(sample_cmd, f_sample);
  add_sde(sample_cmd, f_sample);
  add_seed(sample_cmd, f_sample, "sampler seed override");
  add_t_start(sample_cmd, f_sample,
              "start scale: 0 = direct ancestral draw, >0 = two-phase with "
              "refinement, <0 = pick automatically from the dataset");
  add_steps(sample_cmd, f_sample, "refinement step count override");
  sample_cmd->add_option("--class", f_sample.cls,
                         "condition every draw on this class (default: cycle)");
  sample_cmd->add_option("--count", f_sample.count,
                         "number of samples (default 16)");

  CLI::App* complete_cmd = app.add_subcommand(
      "complete", "fill in the suffix of partially observed grids");
  add_config(complete_cmd, f_complete);
  add_out(complete_cmd, f_complete);
  add_ckpt(complete_cmd, f_complete);
  add_sde(complete_cmd, f_complete);
  add_seed(complete_cmd, f_complete, "sampler seed override");
  add_t_start(complete_cmd, f_complete,
              "start scale: 0 = direct conditional fill, >0 = noisy "
              "refinement, <0 = pick automatically");
  add_steps(complete_cmd, f_complete, "refinement step count override");
  complete_cmd->add_option("--class", f_complete.cls,
                           "class override (default: dataset labels)");
  complete_cmd->add_option("--count", f_complete.count,
                           "number of grids to complete (default 8)");
  complete_cmd->add_option("--prefix", f_complete.prefix_frac,
                           "fraction of cells kept as the observed prefix "
                           "(default 0.5)");

  CLI::App* cal_cmd = app.add_subcommand(
      "calibrate-horizon",
      "search the scale range so the endpoint perturbation hits a target "
      "pixel std");
  add_config(cal_cmd, f_cal);
  add_out(cal_cmd, f_cal);
  add_sde(cal_cmd, f_cal);
  cal_cmd->add_option("--target", f_cal.target,
                      "target per-pixel std in 8-bit units (default 10)");

  CLI::App* verify_cmd = app.add_subcommand(
      "verify-oracle",
      "refine perturbed draws against a closed-form mixture score and check "
      "moment recovery");
  add_out(verify_cmd, f_verify);
  add_seed(verify_cmd, f_verify, "sampling seed");
  add_steps(verify_cmd, f_verify, "refinement step count (default 100)");
  verify_cmd->add_option("--count", f_verify.count,
                         "number of refined draws (default 10000)");

  train_cmd->callback([&] { run_train(f_train); });
  eval_cmd->callback([&] { run_eval_nll(f_eval); });
  sanity_cmd->callback([&] { run_sanity_test(f_sanity); });
  stats_cmd->callback([&] { run_sde_stats(f_stats); });
  sample_cmd->callback([&] { run_sample(f_sample); });
  complete_cmd->callback([&] { run_complete(f_complete); });
  cal_cmd->callback([&] { run_calibrate(f_cal); });
  verify_cmd->callback([&] { run_verify_oracle(f_verify); });

  int code = 0;
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("config", e.what());
    code = 2;
  } catch (const CheckpointMagicError& e) {
    print_error("checkpoint-magic", e.what());
    code = 4;
  } catch (const CheckpointVersionError& e) {
    print_error("checkpoint-version", e.what());
    code = 4;
  } catch (const CheckpointCrcError& e) {
    print_error("checkpoint-crc", e.what());
    code = 4;
  } catch (const CheckpointArchError& e) {
    print_error("checkpoint-arch", e.what());
    code = 2;
  } catch (const ConfigError& e) {
    print_error("config", e.what());
    code = 2;
  } catch (const NumericError& e) {
    print_error("numeric", e.what());
    code = 3;
  } catch (const IoError& e) {
    print_error("io", e.what());
    code = 4;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    code = 3;
  }
  append_run_log(code);
  return code;
}
