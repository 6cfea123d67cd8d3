#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ncml/datasets.hpp"
#include "ncml/errors.hpp"
#include "ncml/gridfile.hpp"
#include "ncml/model.hpp"
#include "ncml/sampling.hpp"
#include "ncml/sde.hpp"
#include "ncml/training.hpp"

// Experiment configuration: a JSON file with one object per section, every
// field optional with the library defaults filled in. Unknown keys are
// rejected so typos fail loudly instead of silently running the defaults.
// CLI flags override loaded fields; that precedence lives in the tool.

namespace ncml {

struct ExperimentConfig {
  DatasetSpec dataset;       // generator-based unless dataset_path is set
  std::string dataset_path;  // raw grid file to load instead of generating
  ModelArch arch;            // dims and bit_depth are taken from the dataset
  SdeSpec sde;
  MuSpec mu;
  TrainConfig train;
  SamplerConfig sampler;
  std::string out_dir = "out";

  // sub-configs are validated where they are consumed; here we check the
  // pieces that must hold before any work starts
  void validate() const {
    if (dataset_path.empty()) {
      dataset.validate();
    } else {
      std::ifstream probe(dataset_path);
      if (!probe) throw ConfigError("dataset file does not exist: " + dataset_path);
    }
    sde.validate();
    mu.validate(sde.horizon);
    if (out_dir.empty()) throw ConfigError("out_dir must be nonempty");
  }
};

namespace detail {

inline void expect_keys(const nlohmann::json& j, const char* section,
                        std::initializer_list<const char*> known) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (item.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw ConfigError(std::string("config: unknown key '") + item.key() + "' in " +
                        section);
  }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline DatasetSpec dataset_from_json(const nlohmann::json& j, std::string* path) {
  expect_keys(j, "dataset",
              {"generator", "path", "count", "bit_depth", "seed", "ring_radii",
               "ring_width"});
  DatasetSpec d;
  maybe(j, "generator", d.generator);
  maybe(j, "path", *path);
  maybe(j, "count", d.count);
  maybe(j, "bit_depth", d.bit_depth);
  maybe(j, "seed", d.seed);
  maybe(j, "ring_radii", d.ring_radii);
  maybe(j, "ring_width", d.ring_width);
  if (!d.generator.empty() && !path->empty())
    throw ConfigError("config: dataset takes a generator or a path, not both");
  if (d.generator.empty() && path->empty())
    throw ConfigError("config: dataset needs a generator name or a file path");
  return d;
}

inline ModelArch arch_config_from_json(const nlohmann::json& j) {
  expect_keys(j, "model",
              {"hidden_layers", "hidden_width", "mixture_k", "fourier_dim",
               "class_count", "log_scale_min", "time_scale", "init_seed"});
  ModelArch a;
  maybe(j, "hidden_layers", a.hidden_layers);
  maybe(j, "hidden_width", a.hidden_width);
  maybe(j, "mixture_k", a.mixture_k);
  maybe(j, "fourier_dim", a.fourier_dim);
  maybe(j, "class_count", a.class_count);
  maybe(j, "log_scale_min", a.log_scale_min);
  maybe(j, "time_scale", a.time_scale);
  maybe(j, "init_seed", a.init_seed);
  return a;
}

inline SdeSpec sde_config_from_json(const nlohmann::json& j) {
  expect_keys(j, "sde",
              {"kind", "sigma_min", "sigma_max", "beta_min", "beta_max", "horizon",
               "data_scale"});
  std::string kind = "vp";
  maybe(j, "kind", kind);
  SdeSpec s = SdeSpec::defaults(parse_sde_kind(kind));
  maybe(j, "sigma_min", s.sigma_min);
  maybe(j, "sigma_max", s.sigma_max);
  maybe(j, "beta_min", s.beta_min);
  maybe(j, "beta_max", s.beta_max);
  maybe(j, "horizon", s.horizon);
  maybe(j, "data_scale", s.data_scale);
  return s;
}

inline MuSpec mu_from_json(const nlohmann::json& j) {
  expect_keys(j, "mu", {"kind", "points", "weights"});
  std::string kind = "uniform";
  maybe(j, "kind", kind);
  if (kind == "uniform") {
    if (j.contains("points") || j.contains("weights"))
      throw ConfigError("config: uniform mu takes no points or weights");
    return MuSpec::uniform();
  }
  if (kind == "discrete") {
    std::vector<double> points, weights;
    maybe(j, "points", points);
    maybe(j, "weights", weights);
    return MuSpec::discrete(std::move(points), std::move(weights));
  }
  throw ConfigError("config: mu kind must be 'uniform' or 'discrete', got '" + kind +
                    "'");
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  expect_keys(j, "train",
              {"steps", "batch_size", "lr", "clip_norm", "dropout", "seed",
               "eval_every", "probe_t", "probe_pi", "eval_limit"});
  TrainConfig t;
  maybe(j, "steps", t.steps);
  maybe(j, "batch_size", t.batch_size);
  maybe(j, "lr", t.adam.lr);
  maybe(j, "clip_norm", t.adam.clip_norm);
  maybe(j, "dropout", t.dropout);
  maybe(j, "seed", t.seed);
  maybe(j, "eval_every", t.eval_every);
  maybe(j, "probe_t", t.probe_t);
  maybe(j, "probe_pi", t.probe_pi);
  maybe(j, "eval_limit", t.eval_limit);
  return t;
}

inline SamplerConfig sampler_from_json(const nlohmann::json& j) {
  expect_keys(j, "sampler",
              {"t_start", "refine_steps", "corrector_steps", "corrector_snr", "seed"});
  SamplerConfig s;
  maybe(j, "t_start", s.t_start);
  maybe(j, "refine_steps", s.refine_steps);
  maybe(j, "corrector_steps", s.corrector_steps);
  maybe(j, "corrector_snr", s.corrector_snr);
  maybe(j, "seed", s.seed);
  return s;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    detail::expect_keys(j, "the top level",
                        {"dataset", "model", "sde", "mu", "train", "sampler", "out_dir"});
    ExperimentConfig c;
    if (!j.contains("dataset"))
      throw ConfigError("config: a dataset section is required");
    c.dataset = detail::dataset_from_json(j.at("dataset"), &c.dataset_path);
    if (j.contains("model")) c.arch = detail::arch_config_from_json(j.at("model"));
    if (j.contains("sde")) c.sde = detail::sde_config_from_json(j.at("sde"));
    if (j.contains("mu")) c.mu = detail::mu_from_json(j.at("mu"));
    if (j.contains("train")) c.train = detail::train_from_json(j.at("train"));
    if (j.contains("sampler")) c.sampler = detail::sampler_from_json(j.at("sampler"));
    detail::maybe(j, "out_dir", c.out_dir);
    c.train.sde = c.sde;
    c.train.mu = c.mu;
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field has the wrong type: ") + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return parse_experiment_config(read_file(path));
}

// generator datasets carry labels; file datasets are unlabeled by format
inline GridDataset load_dataset(const ExperimentConfig& c) {
  GridDataset data = c.dataset_path.empty() ? generate_dataset(c.dataset)
                                            : read_grid_dataset(c.dataset_path);
  data.validate();
  return data;
}

// dims and bit depth always come from the data, never from the config
inline ModelArch resolve_arch(const ExperimentConfig& c, const GridDataset& data) {
  ModelArch a = c.arch;
  a.dims = data.dims;
  a.bit_depth = data.bit_depth;
  a.validate();
  return a;
}

}  // namespace ncml
