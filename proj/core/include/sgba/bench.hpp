#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgba/attack.hpp"
#include "sgba/config.hpp"
#include "sgba/datasets.hpp"
#include "sgba/inspectors.hpp"
#include "sgba/reversal.hpp"
#include "sgba/zoo.hpp"

namespace sgba::bench {

struct RunContext {
  config::ExperimentConfig cfg;
  std::string out;      // overrides cfg.output when non-empty
  bool resume = false;  // skip steps whose artifacts match the config hash
  std::ostream* log = nullptr;

  std::string output_dir() const { return out.empty() ? cfg.output : out; }
};

// Materialized splits shared by every command.
struct Workspace {
  data::DatasetHandle handle;
  data::DatasetHandle holdout_handle;
  LabeledImages train;    // attacker pool: train split minus the defender holdout
  LabeledImages test;
  LabeledImages holdout;  // defender clean data
};

Workspace open_workspace(const RunContext& ctx);
ZooRegistry open_zoo(const RunContext& ctx);

enum class Detector { kNc, kNcCutting, kNcHollow, kVariance, kMntd };
std::string_view to_string(Detector d);
Detector detector_from_string(std::string_view s);

void cmd_train_clean(const RunContext& ctx);
attack::ScapegoatSet cmd_reverse(const RunContext& ctx, const std::string& model_id);
void cmd_attack(const RunContext& ctx);

struct Inspection {
  std::string model_id;
  double score = 0.0;  // anomaly index, variance ratio or MNTD score
  bool flagged = false;
  double threshold = 0.0;
  nlohmann::json detail;
};

// Empty model_ids inspects every model in the zoo; an empty zoo is an error.
std::vector<Inspection> cmd_inspect(const RunContext& ctx, Detector detector, std::vector<std::string> model_ids,
                                    std::optional<double> threshold = std::nullopt);

struct ModelRow {
  std::string model_id;
  Provenance provenance = Provenance::kUnset;
  int target = -1;
  double accuracy = 0.0;
  std::optional<double> asr;
  std::optional<double> part_a_rate;
  std::optional<double> part_b_rate;
  std::map<std::string, double> scores;  // detector -> score
  std::map<std::string, bool> flags;     // detector -> verdict
};

struct RateRow {
  std::string detector;
  Provenance provenance = Provenance::kUnset;
  int total = 0;
  int flagged = 0;
  double rate() const { return total ? static_cast<double>(flagged) / total : 0.0; }
};

struct AttackRow {
  Provenance provenance = Provenance::kUnset;
  int count = 0;
  double mean_accuracy = 0.0;
  std::optional<double> mean_asr;
};

struct BenchReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::map<std::string, double> thresholds;
  std::vector<ModelRow> rows;
  std::vector<RateRow> rates;     // DR for malicious provenances, FPR for benign
  std::vector<AttackRow> attack;  // clean accuracy and ASR per provenance
  nlohmann::json variance_gap;    // {"badnets": report, "sgba": report}
  std::vector<std::string> plots;

  nlohmann::json to_json() const;
  static BenchReport from_json(const nlohmann::json& j);
  std::string to_csv() const;
  const RateRow* rate(const std::string& detector, Provenance p) const;
};

std::vector<RateRow> compute_rates(const std::vector<ModelRow>& rows);
std::vector<AttackRow> compute_attack_summary(const std::vector<ModelRow>& rows);

BenchReport cmd_bench(const RunContext& ctx);

// Redraws every plot from <dir>/report.json; returns the written paths.
std::vector<std::string> render_plots(const std::string& dir);

}  // namespace sgba::bench
