#include "sgba/config.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "sgba/common.hpp"
#include "sgba/datasets.hpp"
#include "sgba/nn.hpp"

namespace sgba::config {

namespace fs = std::filesystem;

namespace {

nlohmann::json load_rec(const fs::path& path, std::set<std::string>& stack) {
  const std::string key = fs::weakly_canonical(path).string();
  if (stack.count(key)) throw Error(ErrorCode::kInvalidArgument, "config include cycle at " + key);
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot read config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kInvalidArgument, "config " + path.string() + ": " + e.what());
  }
  if (!doc.is_object()) throw Error(ErrorCode::kInvalidArgument, "config root must be an object");
  if (!doc.contains("include")) return doc;
  stack.insert(key);
  std::vector<std::string> includes;
  const auto& inc = doc.at("include");
  if (inc.is_string()) {
    includes.push_back(inc.get<std::string>());
  } else if (inc.is_array()) {
    includes = inc.get<std::vector<std::string>>();
  } else {
    throw Error(ErrorCode::kInvalidArgument, "config include must be a path or a list of paths");
  }
  nlohmann::json base = nlohmann::json::object();
  for (const auto& rel : includes) base.merge_patch(load_rec(path.parent_path() / rel, stack));
  stack.erase(key);
  doc.erase("include");
  base.merge_patch(doc);
  return base;
}

void check_known(const nlohmann::json& doc, const nlohmann::json& defaults, const std::string& prefix) {
  for (const auto& [k, v] : doc.items()) {
    const std::string name = prefix.empty() ? k : prefix + "." + k;
    if (!defaults.contains(k)) throw Error(ErrorCode::kInvalidArgument, "unknown config key: " + name);
    if (v.is_object() && defaults.at(k).is_object()) check_known(v, defaults.at(k), name);
  }
}

void overlay(nlohmann::json& base, const nlohmann::json& doc) {
  for (const auto& [k, v] : doc.items()) {
    if (v.is_object() && base[k].is_object()) {
      overlay(base[k], v);
    } else {
      base[k] = v;
    }
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& section) {
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kInvalidArgument, "config field " + section + key + " has the wrong type");
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, std::optional<T>& out, const std::string& section) {
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(j, key, v, section);
  out = v;
}

template <typename T>
nlohmann::json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

void require(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) throw Error(ErrorCode::kInvalidArgument, "config field " + field + " must " + rule);
}

}  // namespace

nlohmann::json load_document(const std::string& path) {
  std::set<std::string> stack;
  return load_rec(path, stack);
}

nlohmann::json ExperimentConfig::to_json() const {
  return {
      {"seed", seed},
      {"workers", workers},
      {"output", output},
      {"architecture", architecture},
      {"dataset",
       {{"name", dataset.name},
        {"seed", dataset.seed},
        {"subsample", dataset.subsample},
        {"holdout_fraction", dataset.holdout_fraction},
        {"root", dataset.root},
        {"synthetic_train", dataset.synthetic_train},
        {"synthetic_test", dataset.synthetic_test}}},
      {"training", {{"epochs", training.epochs}, {"lr", training.lr}, {"batch_size", training.batch_size}}},
      {"benign", {{"count", benign_count}}},
      {"badnets", {{"count", badnets.count}, {"fraction", badnets.fraction}, {"patch_size", badnets.patch_size}}},
      {"sgba",
       {{"count", sgba.count},
        {"w", sgba.w},
        {"min_fraction", sgba.min_fraction},
        {"max_fraction", sgba.max_fraction},
        {"part_sizes", sgba.part_sizes},
        {"max_epochs", sgba.max_epochs},
        {"lr", sgba.lr},
        {"loss_threshold", opt_json(sgba.loss_threshold)},
        {"literal_sum", sgba.literal_sum},
        {"scapegoat_budget", sgba.scapegoat_budget},
        {"scapegoat_retries", sgba.scapegoat_retries}}},
      {"reversal",
       {{"budget", reversal.budget},
        {"lr", reversal.lr},
        {"batch_size", reversal.batch_size},
        {"init_lambda", reversal.init_lambda},
        {"patience", reversal.patience},
        {"acceptance", reversal.acceptance},
        {"cutting_scale", reversal.cutting_scale},
        {"cutting_budget", reversal.cutting_budget},
        {"hollow_scale", reversal.hollow_scale}}},
      {"nc",
       {{"threshold", opt_json(nc.threshold)},
        {"benign_evaluated", nc.benign_evaluated},
        {"clipped_variants", nc.clipped_variants}}},
      {"variance", {{"threshold", variance_threshold}}},
      {"mntd",
       {{"enabled", mntd.enabled},
        {"shadow_benign", mntd.shadow_benign},
        {"shadow_trojm", mntd.shadow_trojm},
        {"shadow_trojb", mntd.shadow_trojb},
        {"shadow_sgba", mntd.shadow_sgba},
        {"shadow_epochs", mntd.shadow_epochs},
        {"shadow_sgba_epochs", mntd.shadow_sgba_epochs},
        {"shadow_subsample", mntd.shadow_subsample},
        {"trojb_alpha", mntd.trojb_alpha},
        {"k", mntd.k},
        {"epochs", mntd.epochs},
        {"ensemble", mntd.ensemble},
        {"mode", mntd.mode},
        {"query_lr", mntd.query_lr},
        {"classifier_lr", mntd.classifier_lr},
        {"eval_trojm", mntd.eval_trojm}}},
  };
}

ExperimentConfig from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw Error(ErrorCode::kInvalidArgument, "config root must be an object");
  ExperimentConfig c;
  nlohmann::json merged = c.to_json();
  check_known(doc, merged, "");
  overlay(merged, doc);

  read(merged, "seed", c.seed, "");
  read(merged, "workers", c.workers, "");
  read(merged, "output", c.output, "");
  read(merged, "architecture", c.architecture, "");
  const auto& d = merged.at("dataset");
  read(d, "name", c.dataset.name, "dataset.");
  read(d, "seed", c.dataset.seed, "dataset.");
  read(d, "subsample", c.dataset.subsample, "dataset.");
  read(d, "holdout_fraction", c.dataset.holdout_fraction, "dataset.");
  read(d, "root", c.dataset.root, "dataset.");
  read(d, "synthetic_train", c.dataset.synthetic_train, "dataset.");
  read(d, "synthetic_test", c.dataset.synthetic_test, "dataset.");
  const auto& t = merged.at("training");
  read(t, "epochs", c.training.epochs, "training.");
  read(t, "lr", c.training.lr, "training.");
  read(t, "batch_size", c.training.batch_size, "training.");
  read(merged.at("benign"), "count", c.benign_count, "benign.");
  const auto& b = merged.at("badnets");
  read(b, "count", c.badnets.count, "badnets.");
  read(b, "fraction", c.badnets.fraction, "badnets.");
  read(b, "patch_size", c.badnets.patch_size, "badnets.");
  const auto& s = merged.at("sgba");
  read(s, "count", c.sgba.count, "sgba.");
  read(s, "w", c.sgba.w, "sgba.");
  read(s, "min_fraction", c.sgba.min_fraction, "sgba.");
  read(s, "max_fraction", c.sgba.max_fraction, "sgba.");
  read(s, "part_sizes", c.sgba.part_sizes, "sgba.");
  read(s, "max_epochs", c.sgba.max_epochs, "sgba.");
  read(s, "lr", c.sgba.lr, "sgba.");
  read_opt(s, "loss_threshold", c.sgba.loss_threshold, "sgba.");
  read(s, "literal_sum", c.sgba.literal_sum, "sgba.");
  read(s, "scapegoat_budget", c.sgba.scapegoat_budget, "sgba.");
  read(s, "scapegoat_retries", c.sgba.scapegoat_retries, "sgba.");
  const auto& r = merged.at("reversal");
  read(r, "budget", c.reversal.budget, "reversal.");
  read(r, "lr", c.reversal.lr, "reversal.");
  read(r, "batch_size", c.reversal.batch_size, "reversal.");
  read(r, "init_lambda", c.reversal.init_lambda, "reversal.");
  read(r, "patience", c.reversal.patience, "reversal.");
  read(r, "acceptance", c.reversal.acceptance, "reversal.");
  read(r, "cutting_scale", c.reversal.cutting_scale, "reversal.");
  read(r, "cutting_budget", c.reversal.cutting_budget, "reversal.");
  read(r, "hollow_scale", c.reversal.hollow_scale, "reversal.");
  const auto& n = merged.at("nc");
  read_opt(n, "threshold", c.nc.threshold, "nc.");
  read(n, "benign_evaluated", c.nc.benign_evaluated, "nc.");
  read(n, "clipped_variants", c.nc.clipped_variants, "nc.");
  read(merged.at("variance"), "threshold", c.variance_threshold, "variance.");
  const auto& m = merged.at("mntd");
  read(m, "enabled", c.mntd.enabled, "mntd.");
  read(m, "shadow_benign", c.mntd.shadow_benign, "mntd.");
  read(m, "shadow_trojm", c.mntd.shadow_trojm, "mntd.");
  read(m, "shadow_trojb", c.mntd.shadow_trojb, "mntd.");
  read(m, "shadow_sgba", c.mntd.shadow_sgba, "mntd.");
  read(m, "shadow_epochs", c.mntd.shadow_epochs, "mntd.");
  read(m, "shadow_sgba_epochs", c.mntd.shadow_sgba_epochs, "mntd.");
  read(m, "shadow_subsample", c.mntd.shadow_subsample, "mntd.");
  read(m, "trojb_alpha", c.mntd.trojb_alpha, "mntd.");
  read(m, "k", c.mntd.k, "mntd.");
  read(m, "epochs", c.mntd.epochs, "mntd.");
  read(m, "ensemble", c.mntd.ensemble, "mntd.");
  read(m, "mode", c.mntd.mode, "mntd.");
  read(m, "query_lr", c.mntd.query_lr, "mntd.");
  read(m, "classifier_lr", c.mntd.classifier_lr, "mntd.");
  read(m, "eval_trojm", c.mntd.eval_trojm, "mntd.");
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) { return from_json(load_document(path)); }

void ExperimentConfig::validate() const {
  const auto names = data::registered_datasets();
  require(std::find(names.begin(), names.end(), dataset.name) != names.end(), "dataset.name",
          "name a registered dataset");
  nn::find_architecture(architecture);
  require(nn::find_architecture(architecture).input == data::registered_shape(dataset.name), "architecture",
          "match the dataset input shape");
  require(workers >= 1, "workers", "be >= 1");
  require(!output.empty(), "output", "be non-empty");
  require(dataset.subsample > 0.0 && dataset.subsample <= 1.0, "dataset.subsample", "lie in (0,1]");
  require(dataset.holdout_fraction > 0.0 && dataset.holdout_fraction <= 0.1, "dataset.holdout_fraction",
          "lie in (0,0.1]");
  require(dataset.synthetic_train >= 10 && dataset.synthetic_test >= 10, "dataset.synthetic_train/test", "be >= 10");
  require(training.epochs >= 1, "training.epochs", "be >= 1");
  require(training.lr > 0.0, "training.lr", "be positive");
  require(training.batch_size >= 1, "training.batch_size", "be >= 1");
  require(benign_count >= 1, "benign.count", "be >= 1");
  require(badnets.count >= 0, "badnets.count", "be >= 0");
  require(badnets.fraction > 0.0 && badnets.fraction < 1.0, "badnets.fraction", "lie in (0,1)");
  require(badnets.patch_size >= 1, "badnets.patch_size", "be >= 1");
  require(sgba.count >= 0, "sgba.count", "be >= 0");
  require(sgba.w >= 1.0, "sgba.w", "be >= 1");
  require(sgba.min_fraction >= 0.1 && sgba.max_fraction <= 0.4 && sgba.min_fraction <= sgba.max_fraction,
          "sgba.min_fraction/max_fraction", "satisfy 0.1 <= min <= max <= 0.4");
  require(!sgba.part_sizes.empty(), "sgba.part_sizes", "be non-empty");
  for (int p : sgba.part_sizes) require(p >= 1, "sgba.part_sizes", "hold positive sizes");
  require(sgba.max_epochs >= 1, "sgba.max_epochs", "be >= 1");
  require(sgba.lr > 0.0, "sgba.lr", "be positive");
  require(!sgba.loss_threshold || *sgba.loss_threshold > 0.0, "sgba.loss_threshold", "be positive");
  require(sgba.scapegoat_budget >= 1 && sgba.scapegoat_retries >= 0, "sgba.scapegoat_budget/retries",
          "be positive / non-negative");
  require(reversal.budget >= 1 && reversal.cutting_budget >= 1, "reversal.budget", "be >= 1");
  require(reversal.lr > 0.0 && reversal.init_lambda > 0.0, "reversal.lr/init_lambda", "be positive");
  require(reversal.batch_size >= 1 && reversal.patience >= 1, "reversal.batch_size/patience", "be >= 1");
  require(reversal.acceptance > 0.0 && reversal.acceptance <= 1.0, "reversal.acceptance", "lie in (0,1]");
  require(reversal.cutting_scale > 0.0 && reversal.cutting_scale < 1.0, "reversal.cutting_scale", "lie in (0,1)");
  require(reversal.hollow_scale >= 0.6 && reversal.hollow_scale < 1.0, "reversal.hollow_scale", "lie in [0.6,1)");
  require(!nc.threshold || *nc.threshold > 0.0, "nc.threshold", "be positive");
  require(nc.benign_evaluated >= 1 && nc.benign_evaluated <= benign_count, "nc.benign_evaluated",
          "lie in [1, benign.count]");
  require(variance_threshold > 0.0, "variance.threshold", "be positive");
  if (mntd.enabled) {
    require(mntd.shadow_benign >= 2, "mntd.shadow_benign", "be >= 2");
    require(mntd.shadow_trojm >= 0 && mntd.shadow_trojb >= 0 && mntd.shadow_sgba >= 0 &&
                mntd.shadow_trojm + mntd.shadow_trojb + mntd.shadow_sgba >= 2,
            "mntd.shadow_*", "give at least two malicious shadows");
    require(mntd.shadow_epochs >= 1 && mntd.shadow_sgba_epochs >= 1, "mntd.shadow_epochs", "be >= 1");
    require(mntd.shadow_subsample > 0.0 && mntd.shadow_subsample <= 1.0, "mntd.shadow_subsample", "lie in (0,1]");
    require(mntd.trojb_alpha > 0.0 && mntd.trojb_alpha < 1.0, "mntd.trojb_alpha", "lie in (0,1)");
    require(mntd.k >= 1, "mntd.k", "be >= 1");
    require(mntd.epochs >= 1 && mntd.ensemble >= 1, "mntd.epochs/ensemble", "be >= 1");
    require(mntd.mode == "full" || mntd.mode == "robust", "mntd.mode", "be full or robust");
    require(mntd.query_lr > 0.0 && mntd.classifier_lr > 0.0, "mntd.query_lr/classifier_lr", "be positive");
    require(mntd.eval_trojm >= 0, "mntd.eval_trojm", "be >= 0");
  }
}

std::uint64_t ExperimentConfig::hash() const {
  auto j = to_json();
  j.erase("output");
  j.erase("workers");
  return fnv1a(j.dump());
}

std::string ExperimentConfig::hash_hex() const { return hex64(hash()); }

}  // namespace sgba::config
