#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgba/common.hpp"
#include "sgba/nn.hpp"

namespace sgba {

enum class Provenance { kUnset, kBenign, kBadNets, kSgba, kTrojM, kTrojB };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);
bool is_malicious(Provenance p);

struct LayerStats {
  std::string layer;
  double mean = 0.0;
  double variance = 0.0;
};

class ModelRecord {
 public:
  ModelRecord() = default;
  ModelRecord(nn::ArchitectureId arch, nn::Params params, std::uint64_t init_seed);

  const nn::ArchitectureId& arch() const { return arch_; }
  const nn::Params& params() const { return params_; }
  // Mutable access keeps the cached layer statistics in sync via refresh_stats().
  nn::Params& mutable_params() { return params_; }
  void refresh_stats();

  Provenance provenance() const { return provenance_; }
  // Provenance can be assigned once; reassigning a different value throws.
  void set_provenance(Provenance p);

  std::uint64_t init_seed() const { return init_seed_; }
  std::uint64_t training_seed() const { return training_seed_; }
  void set_training_seed(std::uint64_t s) { training_seed_ = s; }

  std::optional<double> accuracy;    // clean test accuracy
  std::optional<double> final_loss;  // mean loss of the last training epoch
  int epochs_trained = 0;

  const std::vector<LayerStats>& layer_stats() const { return layer_stats_; }
  std::uint64_t weights_hash() const;

 private:
  nn::ArchitectureId arch_;
  nn::Params params_;
  Provenance provenance_ = Provenance::kUnset;
  std::uint64_t init_seed_ = 0;
  std::uint64_t training_seed_ = 0;
  std::vector<LayerStats> layer_stats_;
};

ModelRecord build_model(const nn::ArchitectureId& arch, std::uint64_t init_seed);
ModelRecord build_model(const std::string& arch_name, std::uint64_t init_seed);

// Invoked after every optimizer step with mutable access to the weights.
using StepHook = std::function<void(nn::Params&)>;

struct TrainOptions {
  int epochs = 5;
  double lr = 1e-3;
  int batch_size = 32;
  std::uint64_t seed = 0;
  Provenance provenance = Provenance::kBenign;
  // Stop early once an epoch's mean loss drops below this value.
  std::optional<double> loss_threshold;
  // Filled into ModelRecord::accuracy when given.
  const LabeledImages* eval = nullptr;
};

// Throws kDivergence on a non-finite loss and kShapeMismatch on bad data.
ModelRecord train(ModelRecord model, const LabeledImages& data, const TrainOptions& opts,
                  const StepHook& step_hook = {});

double evaluate(const ModelRecord& model, const LabeledImages& data);

// Top-1 predictions for every image in `images`.
std::vector<int> predict(const ModelRecord& model, const LabeledImages& images);

// Softmax outputs [batch][classes] (row per image).
std::vector<float> predict_proba(const ModelRecord& model, std::span<const float> images, int batch);

// Population variance (divide by n) of the weight entries of each parameterized
// layer, biases excluded.
std::vector<double> layer_weight_variance(const ModelRecord& model);
std::vector<double> layer_weight_variance(const nn::Params& params);
std::vector<LayerStats> compute_layer_stats(const nn::Params& params);

// Checkpoint = <stem>.weights (binary) + <stem>.json (manifest).
void save_checkpoint(const ModelRecord& model, const std::string& stem, const nlohmann::json& extra = {});
ModelRecord load_checkpoint(const std::string& stem);
nlohmann::json load_manifest(const std::string& stem);

nlohmann::json manifest_of(const ModelRecord& model);

}  // namespace sgba
