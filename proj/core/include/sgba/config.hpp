#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace sgba::config {

// Reads a JSON document. An optional top-level "include" (string or list of
// paths, relative to the including file) is loaded first, in order, and the
// including document is merged over it (RFC 7386 merge patch).
nlohmann::json load_document(const std::string& path);

struct DatasetSection {
  std::string name = "synthetic";
  std::uint64_t seed = 1;
  double subsample = 1.0;
  double holdout_fraction = 0.1;
  std::string root = "data";
  int synthetic_train = 3000;
  int synthetic_test = 1000;
};

struct TrainingSection {
  int epochs = 8;
  double lr = 1e-3;
  int batch_size = 32;
};

struct BadNetsSection {
  int count = 10;
  double fraction = 0.1;
  int patch_size = 4;
};

struct SgbaSection {
  int count = 10;
  double w = 1.2;
  double min_fraction = 0.3;
  double max_fraction = 0.4;
  std::vector<int> part_sizes = {5, 6};
  int max_epochs = 50;
  double lr = 3e-3;
  std::optional<double> loss_threshold;  // unset: benign mean final loss x 1.1
  bool literal_sum = false;
  int scapegoat_budget = 400;
  int scapegoat_retries = 2;
};

struct ReversalSection {
  int budget = 300;
  double lr = 0.1;
  int batch_size = 32;
  double init_lambda = 1e-3;
  int patience = 10;
  double acceptance = 0.95;
  double cutting_scale = 0.5;
  int cutting_budget = 60;
  double hollow_scale = 0.8;
};

struct NcSection {
  std::optional<double> threshold;  // unset: calibrated from benign and BadNets medians
  int benign_evaluated = 10;
  bool clipped_variants = true;
};

struct MntdSection {
  bool enabled = true;
  int shadow_benign = 64;
  int shadow_trojm = 32;
  int shadow_trojb = 16;
  int shadow_sgba = 16;
  int shadow_epochs = 6;
  int shadow_sgba_epochs = 30;
  double shadow_subsample = 0.5;
  double trojb_alpha = 0.2;
  int k = 10;
  int epochs = 40;
  int ensemble = 10;
  std::string mode = "robust";
  double query_lr = 0.05;
  double classifier_lr = 0.01;
  int eval_trojm = 10;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  std::string output = "runs/desk";
  std::string architecture = "mnist-lite";
  DatasetSection dataset;
  TrainingSection training;
  int benign_count = 32;
  BadNetsSection badnets;
  SgbaSection sgba;
  ReversalSection reversal;
  NcSection nc;
  double variance_threshold = 1.2;
  MntdSection mntd;

  // Throws kInvalidArgument naming the first offending field.
  void validate() const;
  nlohmann::json to_json() const;
  // FNV-1a of the canonical dump without run-local fields (output, workers).
  std::uint64_t hash() const;
  std::string hash_hex() const;
};

// Unknown keys are rejected; missing keys keep their defaults.
ExperimentConfig from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::string& path);

}  // namespace sgba::config
