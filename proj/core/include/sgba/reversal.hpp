#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgba/common.hpp"
#include "sgba/modelkit.hpp"

namespace sgba::reversal {

enum class RegionKind { kFull, kCutting, kHollow };

std::string_view to_string(RegionKind k);
RegionKind region_kind_from_string(std::string_view s);

// kCutting: `rect` gives the size of the sliding search window (its position is ignored).
// kHollow: `rect` is the excised hole where the mask is pinned to zero.
struct SearchRegion {
  RegionKind kind = RegionKind::kFull;
  Rect rect;
};

SearchRegion full_region();
// Window of `scale` x the scapegoat box in each dimension (at least 1 px).
SearchRegion cutting_region(const Rect& scapegoat_box, Shape image, double scale = 0.5);
// Hole of `scale` x the scapegoat box, centered on it; scale must lie in [0.6, 1.0).
SearchRegion hollow_region(const Rect& scapegoat_box, Shape image, double scale = 0.8);

// Throws kInvalidArgument when the region breaks its invariants. The scapegoat-relative
// size rules are checked only when the box is supplied.
void validate_region(const SearchRegion& region, Shape image,
                     const std::optional<Rect>& scapegoat_box = std::nullopt);

struct ReversedTrigger {
  int target_class = 0;
  Shape shape;
  std::vector<float> mask;     // H*W, one value per pixel, broadcast over channels
  std::vector<float> pattern;  // H*W*C
  double l1_norm = 0.0;        // sum of mask entries
  double efficacy = 0.0;       // holdout fraction classified as target_class when stamped
  bool passed = false;         // efficacy >= acceptance threshold
  SearchRegion region;
};

struct ReversalOptions {
  double lr = 0.1;
  int batch_size = 32;
  double init_lambda = 1e-3;
  int patience = 10;              // steps per lambda-adaptation window
  double lambda_up = 1.5;
  double lambda_down = 1.5 * 0.9;
  double success_for_up = 0.99;   // window success rate that raises lambda
  double acceptance = 0.95;       // holdout efficacy an accepted trigger must reach
  int workers = 1;                // parallel class reversals in inspect_nc
};

// x' = (1 - m) * x + m * pattern per pixel, clipped to [0,1].
std::vector<float> stamp(std::span<const float> image, std::span<const float> mask,
                         std::span<const float> pattern, Shape shape);
void stamp_inplace(std::span<float> image, std::span<const float> mask,
                   std::span<const float> pattern, Shape shape);
LabeledImages stamp_all(const LabeledImages& images, std::span<const float> mask,
                        std::span<const float> pattern);

double trigger_efficacy(const ModelRecord& model, const LabeledImages& holdout,
                        std::span<const float> mask, std::span<const float> pattern, int target);

// Minimizes CE(f(stamp(x)), target) + lambda * |mask|_1 over sigmoid-squashed
// (mask, pattern) with Adam and a dynamic lambda. `budget` is the step count per
// search window. Never throws for a weak result: an unaccepted trigger comes
// back with passed == false.
ReversedTrigger reverse_trigger(const ModelRecord& model, int target, const LabeledImages& holdout,
                                const SearchRegion& region, int budget, std::uint64_t seed,
                                const ReversalOptions& opts = {});

struct AnomalyIndex {
  double index = 0.0;
  int flagged_class = 0;  // argmin L1
  double median = 0.0;
  double mad = 0.0;
};

// |min L1 - median| / (1.4826 * MAD); 0 when MAD == 0. Needs at least 3 classes.
AnomalyIndex anomaly_index(const std::map<int, double>& per_class_l1);

struct AnomalyReport {
  std::map<int, double> per_class_l1;
  double anomaly_index = 0.0;
  double threshold = 0.0;
  bool backdoored = false;
  std::optional<int> flagged_class;
  RegionKind region = RegionKind::kFull;
  std::vector<ReversedTrigger> triggers;

  nlohmann::json to_json() const;
};

AnomalyReport make_report(std::vector<ReversedTrigger> triggers, double threshold, RegionKind region);

AnomalyReport inspect_nc(const ModelRecord& model, const LabeledImages& holdout,
                         const SearchRegion& region, double threshold, int budget,
                         std::uint64_t seed, const ReversalOptions& opts = {});

// Midpoint of median(benign) and median(badnets).
double calibrate_threshold(std::span<const double> benign_indices,
                           std::span<const double> badnets_indices);

nlohmann::json trigger_metadata(const ReversedTrigger& t);
void save_trigger(const ReversedTrigger& t, const std::string& stem);
ReversedTrigger load_trigger(const std::string& stem);

}  // namespace sgba::reversal
