#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgba/common.hpp"
#include "sgba/datasets.hpp"
#include "sgba/modelkit.hpp"
#include "sgba/reversal.hpp"

namespace sgba::attack {

// One constituent of the split trigger: a binary patch at `rect`.
struct TriggerPart {
  Rect rect;
  std::vector<float> pattern;  // rect.height * rect.width * channels, values in [0,1]
};

struct TriggerSpec {
  Shape shape;
  TriggerPart part_a;
  TriggerPart part_b;
  int target_class = 0;
};

enum class PartSelection { kBoth, kPartA, kPartB };

// Full-image (mask, pattern) arrays for the selected parts.
std::pair<std::vector<float>, std::vector<float>> trigger_arrays(const TriggerSpec& spec,
                                                                 PartSelection which);

nlohmann::json to_json(const TriggerSpec& spec);
TriggerSpec trigger_from_json(const nlohmann::json& j);

// Per-class benign triggers reversed from a clean model. A single set serves every
// target class; the scapegoat for target t is triggers[t].
struct ScapegoatSet {
  std::vector<reversal::ReversedTrigger> triggers;
  double support_threshold = 0.1;
  std::uint64_t source_model_hash = 0;

  const reversal::ReversedTrigger& scapegoat(int target) const;
  Rect scapegoat_box(int target) const;
  std::uint64_t hash() const;
};

// Tight bounding box of mask entries > threshold; throws kInvalidArgument when empty.
Rect support_box(std::span<const float> mask, Shape shape, double threshold);

struct ScapegoatOptions {
  int budget = 400;
  int retries = 2;  // each retry reseeds and doubles the budget
  reversal::ReversalOptions reversal;
};

// Throws kInfeasible when any class cannot be reversed above the acceptance threshold.
ScapegoatSet derive_scapegoats(const ModelRecord& clean_model, const LabeledImages& holdout,
                               std::uint64_t seed, const ScapegoatOptions& opts = {});

void save_scapegoats(const ScapegoatSet& set, const std::string& dir);
ScapegoatSet load_scapegoats(const std::string& dir);

// True iff the joint bounding box of both parts is taller or wider than the
// scapegoat box, i.e. no translate of the box covers both parts.
bool validate_placement(const TriggerSpec& spec, const Rect& scapegoat_box);

// Draws part sizes from size_range^2, random binary high-contrast patterns and
// rejection-sampled disjoint placements that pass validate_placement.
TriggerSpec make_trigger(const ScapegoatSet& scapegoats, int target, Shape shape,
                         const std::vector<int>& size_range, std::uint64_t seed);
TriggerSpec make_trigger(const Rect& scapegoat_box, int target, Shape shape,
                         const std::vector<int>& size_range, std::uint64_t seed);

enum class PoisonKind { kClean, kRealTrigger, kPartA, kPartB, kScapegoat, kPatch, kBlend };
std::string_view to_string(PoisonKind k);

struct PoisonEntry {
  std::size_t index = 0;
  PoisonKind kind = PoisonKind::kClean;
  int original_label = 0;
  int new_label = 0;
  int scapegoat_class = -1;  // for kScapegoat
};

struct PoisonManifest {
  std::vector<PoisonEntry> entries;  // one per training index, in index order
  std::size_t count(PoisonKind kind) const;
  std::size_t poisoned() const { return entries.size() - count(PoisonKind::kClean); }
  nlohmann::json to_json() const;
};

struct PoisonedSet {
  LabeledImages data;
  PoisonManifest manifest;
};

struct PoisonPolicy {
  double total_fraction = 0.2;  // in [0.1, 0.4]
  std::uint64_t seed = 0;
};

// Replaces total_fraction of the samples with poisoned copies, split nearly equally
// across: both parts -> target; part A only / part B only -> uniform non-target label;
// scapegoat of every class c -> c.
PoisonedSet build_poisoned_set(const LabeledImages& data, const TriggerSpec& spec,
                               const ScapegoatSet& scapegoats, const PoisonPolicy& policy);

struct Patch {
  std::vector<float> mask;     // H*W
  std::vector<float> pattern;  // H*W*C
};

// 4x4 white square in the bottom-right corner.
Patch default_badnets_patch(Shape shape, int size = 4);

// Single-patch stamping of round(fraction * n) samples relabeled to target.
PoisonedSet build_badnets_set(const LabeledImages& data, const Patch& patch, int target,
                              double fraction, std::uint64_t seed,
                              PoisonKind kind = PoisonKind::kPatch);

// Mean per-layer weight variance over same-architecture benign models; literal_sum
// keeps the bare sum for sensitivity checks.
std::vector<double> benign_variance_profile(const std::vector<const ModelRecord*>& benign,
                                            bool literal_sum = false);

struct VarianceLimit {
  std::vector<double> averages;
  double coefficient = 1.0;
  std::vector<double> thresholds;  // coefficient * averages
};

VarianceLimit make_variance_limit(std::vector<double> averages, double coefficient);

// Clamps every weight to mean +- sqrt(threshold) where mean is the post-clip mean
// (a fixed point), so the squared deviation of every weight from its layer mean,
// and hence the layer variance, is at most the threshold. Idempotent.
void clip_layer(std::span<float> weights, double threshold);
void clip_to_variance_limit(nn::Params& params, const VarianceLimit& limit);

struct SgbaTrainOptions {
  double loss_threshold = 0.0;
  int max_epochs = 10;
  double lr = 1e-3;
  int batch_size = 32;
  const LabeledImages* eval = nullptr;
};

struct SgbaTrainResult {
  ModelRecord model;
  bool reached_loss_threshold = false;
};

SgbaTrainResult train_sgba(const nn::ArchitectureId& arch, const LabeledImages& poisoned,
                           const VarianceLimit& limit, std::uint64_t seed,
                           const SgbaTrainOptions& opts);

// Mean final training loss of benign fixtures x 1.1.
double default_loss_threshold(const std::vector<const ModelRecord*>& benign);

// Fraction of non-target images that, stamped with the selected parts, are
// classified as the target class.
double attack_success_rate(const ModelRecord& model, const LabeledImages& clean_test,
                           const TriggerSpec& spec, PartSelection which = PartSelection::kBoth);
double patch_success_rate(const ModelRecord& model, const LabeledImages& clean_test,
                          const Patch& patch, int target);

}  // namespace sgba::attack
