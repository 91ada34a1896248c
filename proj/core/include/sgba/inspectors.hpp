#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgba/attack.hpp"
#include "sgba/common.hpp"
#include "sgba/modelkit.hpp"
#include "sgba/stats.hpp"

namespace sgba::inspect {

enum class PopulationLabel { kBenign, kMalicious };

// Non-owning, architecture-homogeneous group of models sharing one label.
class ModelPopulation {
 public:
  ModelPopulation(PopulationLabel label, std::vector<const ModelRecord*> records);

  PopulationLabel label() const { return label_; }
  const std::vector<const ModelRecord*>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  const nn::ArchitectureId& arch() const { return records_.front()->arch(); }

  // samples[layer][model]
  std::vector<std::vector<double>> layer_variances() const;

 private:
  PopulationLabel label_;
  std::vector<const ModelRecord*> records_;
};

struct LayerGap {
  std::string layer;
  double benign_median = 0.0;
  double malicious_median = 0.0;
  double gap = 0.0;  // malicious - benign
  stats::RankTest separation;
};

struct VarianceGapReport {
  std::vector<LayerGap> layers;
  std::vector<std::vector<double>> benign_samples;     // [layer][model]
  std::vector<std::vector<double>> malicious_samples;  // [layer][model]

  nlohmann::json to_json() const;
  static VarianceGapReport from_json(const nlohmann::json& j);
  std::string to_csv() const;
};

VarianceGapReport variance_gap_report(const ModelPopulation& benign, const ModelPopulation& malicious);

// Strip plot per layer: benign in blue, malicious in red, drawn from the report data only.
void plot_variance_distribution(const VarianceGapReport& report, const std::string& png_path);

// Per-model variance verdict: score = max_i var_i / reference_i; flagged when above threshold.
struct VarianceVerdict {
  double score = 0.0;
  bool flagged = false;
};
VarianceVerdict variance_verdict(const ModelRecord& model, const std::vector<double>& reference,
                                 double threshold);

// ---- shadow models ----

struct ShadowCounts {
  int benign = 64;
  int trojm = 32;
  int trojb = 16;
  int sgba = 16;
  int malicious() const { return trojm + trojb + sgba; }
};

struct ShadowOptions {
  int epochs = 6;
  double lr = 1e-3;
  int batch_size = 32;
  std::vector<int> trojm_sizes = {2, 3, 4, 5};
  double trojb_alpha = 0.2;
  double min_fraction = 0.05;
  double max_fraction = 0.2;
  // sgba shadows
  double sgba_w = 1.2;
  std::vector<int> sgba_part_sizes = {5, 6};
  double sgba_min_fraction = 0.3;
  double sgba_max_fraction = 0.4;
  int sgba_epochs = 30;
  attack::ScapegoatOptions scapegoat;
  int workers = 1;
};

struct ShadowZoo {
  std::vector<ModelRecord> benign;
  std::vector<ModelRecord> malicious;
  std::vector<nlohmann::json> benign_meta;
  std::vector<nlohmann::json> malicious_meta;

  ModelPopulation benign_population() const;
  ModelPopulation malicious_population() const;
  std::uint64_t hash() const;
};

// Trains one benign, trojM, trojB or SGBA model with randomized trigger settings
// drawn from `seed`; SGBA needs scapegoats and a variance limit.
ModelRecord train_shadow_model(Provenance kind, const LabeledImages& data, const nn::ArchitectureId& arch,
                               std::uint64_t seed, const ShadowOptions& opts, nlohmann::json& meta,
                               const attack::ScapegoatSet* scapegoats = nullptr,
                               const attack::VarianceLimit* limit = nullptr, double loss_threshold = 0.0);

// Called after each newly trained shadow with (id, model, meta); reloaded shadows skip it.
using ShadowSink = std::function<void(const std::string&, const ModelRecord&, const nlohmann::json&)>;
// Returns a previously persisted shadow for `id`, if any.
using ShadowSource = std::function<std::optional<ModelRecord>(const std::string&)>;

// Trains benign shadows, then trojM (random patch), trojB (blended whole-image
// pattern) and SGBA shadows with random targets, sizes and positions. SGBA shadows
// draw scapegoats and the variance limit from the benign shadows. A diverging
// shadow is retried once with a new seed, then skipped with a warning on stderr.
ShadowZoo build_shadow_zoo(const LabeledImages& data, const LabeledImages& holdout,
                           const nn::ArchitectureId& arch, const ShadowCounts& counts,
                           std::uint64_t seed, const ShadowOptions& opts = {},
                           const ShadowSink& sink = {}, const ShadowSource& source = {});

// ---- MNTD-lite ----

enum class DetectorMode { kFull, kRobust };
std::string_view to_string(DetectorMode m);
DetectorMode detector_mode_from_string(std::string_view s);

struct MetaDetector {
  DetectorMode mode = DetectorMode::kFull;
  Shape shape;
  int num_classes = 0;
  int k = 0;
  std::vector<float> query_set;  // k images, HWC, values in [0,1]
  std::vector<float> weights;    // k * num_classes, query-major
  float bias = 0.f;
  double threshold = 0.5;
  std::uint64_t seed = 0;

  // Sigmoid of the linear score over concatenated softmax outputs on the queries.
  double score(const ModelRecord& model) const;
  nlohmann::json metadata() const;
};

struct DetectionOutcome {
  double score = 0.0;
  bool verdict = false;
  double threshold = 0.0;
};

struct DetectorOptions {
  DetectorMode mode = DetectorMode::kRobust;
  int k = 10;
  int epochs = 40;
  double query_lr = 0.05;
  double classifier_lr = 0.01;
  int models_per_step = 8;
  double validation_fraction = 0.25;
  std::uint64_t seed = 0;
};

// Random queries and classifier, as drawn before training.
MetaDetector init_meta_detector(const nn::ArchitectureId& arch, const DetectorOptions& opts);

// Mean binary cross-entropy of the detector over the given populations.
double detector_loss(const MetaDetector& det, const ModelPopulation& benign, const ModelPopulation& malicious);

// Splits off validation_fraction of each population (seeded), trains on the rest,
// calibrates the threshold at the midpoint of the validation score medians.
MetaDetector train_meta_detector(const ModelPopulation& benign, const ModelPopulation& malicious,
                                 const DetectorOptions& opts);

DetectionOutcome score_model(const MetaDetector& det, const ModelRecord& model);

// Midpoint between the medians of benign and malicious scores.
double midpoint_threshold(std::span<const double> benign_scores, std::span<const double> malicious_scores);

// Independently seeded detectors; the ensemble score is the member mean.
struct DetectorEnsemble {
  std::vector<MetaDetector> members;
  double threshold = 0.5;

  double score(const ModelRecord& model) const;
  DetectionOutcome outcome(const ModelRecord& model) const;
};

DetectorEnsemble train_detector_ensemble(const ModelPopulation& benign, const ModelPopulation& malicious,
                                         int members, const DetectorOptions& opts);

void save_detector(const MetaDetector& det, const std::string& stem);
MetaDetector load_detector(const std::string& stem);

}  // namespace sgba::inspect
