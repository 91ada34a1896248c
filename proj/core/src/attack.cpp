#include "sgba/attack.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "sgba/stats.hpp"

namespace sgba::attack {

namespace {

void stamp_part(std::span<float> image, const TriggerPart& part, Shape shape) {
  const int C = shape.channels;
  for (int r = 0; r < part.rect.height; ++r) {
    for (int c = 0; c < part.rect.width; ++c) {
      const std::size_t p = static_cast<std::size_t>(part.rect.row + r) * shape.width + part.rect.col + c;
      for (int k = 0; k < C; ++k) image[p * C + k] = part.pattern[(r * part.rect.width + c) * C + k];
    }
  }
}

TriggerPart random_part(int h, int w, Shape shape, std::mt19937_64& rng) {
  TriggerPart part;
  part.rect = {0, 0, h, w};
  part.pattern.resize(static_cast<std::size_t>(h) * w * shape.channels);
  std::bernoulli_distribution white(0.7);
  for (auto& v : part.pattern) v = white(rng) ? 1.f : 0.f;
  // At least one white pixel per part keeps the part visible on dark backgrounds.
  part.pattern[0] = 1.f;
  return part;
}

nlohmann::json part_json(const TriggerPart& p) {
  return {{"rect", {p.rect.row, p.rect.col, p.rect.height, p.rect.width}}, {"pattern", p.pattern}};
}

TriggerPart part_from_json(const nlohmann::json& j) {
  const auto r = j.at("rect").get<std::vector<int>>();
  return {{r.at(0), r.at(1), r.at(2), r.at(3)}, j.at("pattern").get<std::vector<float>>()};
}

// Splits `total` into `parts` nearly equal integer shares.
std::vector<std::size_t> equal_shares(std::size_t total, std::size_t parts) {
  std::vector<std::size_t> out(parts, total / parts);
  for (std::size_t k = 0; k < total % parts; ++k) ++out[k];
  return out;
}

}  // namespace

std::pair<std::vector<float>, std::vector<float>> trigger_arrays(const TriggerSpec& spec,
                                                                 PartSelection which) {
  std::vector<float> mask(spec.shape.pixels(), 0.f), pattern(spec.shape.size(), 0.f);
  auto add = [&](const TriggerPart& part) {
    for (int r = 0; r < part.rect.height; ++r) {
      for (int c = 0; c < part.rect.width; ++c) {
        mask[static_cast<std::size_t>(part.rect.row + r) * spec.shape.width + part.rect.col + c] = 1.f;
      }
    }
    stamp_part(pattern, part, spec.shape);
  };
  if (which != PartSelection::kPartB) add(spec.part_a);
  if (which != PartSelection::kPartA) add(spec.part_b);
  return {std::move(mask), std::move(pattern)};
}

nlohmann::json to_json(const TriggerSpec& spec) {
  return {{"shape", {spec.shape.height, spec.shape.width, spec.shape.channels}},
          {"part_a", part_json(spec.part_a)},
          {"part_b", part_json(spec.part_b)},
          {"target_class", spec.target_class}};
}

TriggerSpec trigger_from_json(const nlohmann::json& j) {
  const auto s = j.at("shape").get<std::vector<int>>();
  return {{s.at(0), s.at(1), s.at(2)}, part_from_json(j.at("part_a")), part_from_json(j.at("part_b")),
          j.at("target_class").get<int>()};
}

const reversal::ReversedTrigger& ScapegoatSet::scapegoat(int target) const {
  if (target < 0 || static_cast<std::size_t>(target) >= triggers.size()) {
    throw Error(ErrorCode::kInvalidArgument, "no scapegoat for class " + std::to_string(target));
  }
  return triggers[target];
}

Rect ScapegoatSet::scapegoat_box(int target) const {
  const auto& t = scapegoat(target);
  return support_box(t.mask, t.shape, support_threshold);
}

std::uint64_t ScapegoatSet::hash() const {
  std::uint64_t h = source_model_hash;
  for (const auto& t : triggers) {
    h = fnv1a(t.mask, h);
    h = fnv1a(t.pattern, h);
  }
  return h;
}

Rect support_box(std::span<const float> mask, Shape shape, double threshold) {
  int r0 = shape.height, c0 = shape.width, r1 = -1, c1 = -1;
  for (int r = 0; r < shape.height; ++r) {
    for (int c = 0; c < shape.width; ++c) {
      if (mask[static_cast<std::size_t>(r) * shape.width + c] > threshold) {
        r0 = std::min(r0, r);
        c0 = std::min(c0, c);
        r1 = std::max(r1, r);
        c1 = std::max(c1, c);
      }
    }
  }
  if (r1 < 0) throw Error(ErrorCode::kInvalidArgument, "mask has empty support");
  return {r0, c0, r1 - r0 + 1, c1 - c0 + 1};
}

ScapegoatSet derive_scapegoats(const ModelRecord& clean_model, const LabeledImages& holdout,
                               std::uint64_t seed, const ScapegoatOptions& opts) {
  if (clean_model.provenance() != Provenance::kBenign) {
    throw Error(ErrorCode::kInvalidArgument, "scapegoats must come from a benign model");
  }
  const int classes = clean_model.arch().num_classes();
  ScapegoatSet set;
  set.source_model_hash = clean_model.weights_hash();
  set.triggers.resize(classes);
  std::vector<std::string> failures;
  for (int c = 0; c < classes; ++c) {
    int budget = opts.budget;
    reversal::ReversedTrigger t;
    for (int attempt = 0; attempt <= opts.retries; ++attempt) {
      t = reversal::reverse_trigger(clean_model, c, holdout, reversal::full_region(), budget,
                                    mix_seed(seed, static_cast<std::uint64_t>(c) * 97 + attempt),
                                    opts.reversal);
      if (t.passed) break;
      budget *= 2;
    }
    if (!t.passed) failures.push_back(std::to_string(c));
    set.triggers[c] = std::move(t);
  }
  if (!failures.empty()) {
    std::string list;
    for (const auto& f : failures) list += (list.empty() ? "" : ",") + f;
    throw Error(ErrorCode::kInfeasible, "clean model unusable as scapegoat source; classes failed: " + list);
  }
  return set;
}

void save_scapegoats(const ScapegoatSet& set, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& t : set.triggers) reversal::save_trigger(t, dir + "/class_" + std::to_string(t.target_class));
  nlohmann::json j = {{"classes", set.triggers.size()},
                      {"support_threshold", set.support_threshold},
                      {"source_model_hash", hex64(set.source_model_hash)},
                      {"hash", hex64(set.hash())}};
  std::ofstream out(dir + "/scapegoats.json", std::ios::trunc);
  out << j.dump(2) << '\n';
}

ScapegoatSet load_scapegoats(const std::string& dir) {
  std::ifstream in(dir + "/scapegoats.json");
  if (!in) throw Error(ErrorCode::kNotFound, "missing scapegoat set in " + dir);
  const auto j = nlohmann::json::parse(in);
  ScapegoatSet set;
  set.support_threshold = j.at("support_threshold").get<double>();
  set.source_model_hash = std::stoull(j.at("source_model_hash").get<std::string>(), nullptr, 16);
  const auto n = j.at("classes").get<std::size_t>();
  for (std::size_t c = 0; c < n; ++c) set.triggers.push_back(reversal::load_trigger(dir + "/class_" + std::to_string(c)));
  return set;
}

bool validate_placement(const TriggerSpec& spec, const Rect& box) {
  const Rect joint = bounding_union(spec.part_a.rect, spec.part_b.rect);
  return joint.height > box.height || joint.width > box.width;
}

TriggerSpec make_trigger(const ScapegoatSet& scapegoats, int target, Shape shape,
                         const std::vector<int>& size_range, std::uint64_t seed) {
  return make_trigger(scapegoats.scapegoat_box(target), target, shape, size_range, seed);
}

TriggerSpec make_trigger(const Rect& box, int target, Shape shape, const std::vector<int>& size_range,
                         std::uint64_t seed) {
  if (size_range.empty()) throw Error(ErrorCode::kInvalidArgument, "size range is empty");
  for (int s : size_range) {
    if (s < 1) throw Error(ErrorCode::kInvalidArgument, "part sizes must be positive");
  }
  std::mt19937_64 rng(seed);
  auto pick = [&] { return size_range[std::uniform_int_distribution<std::size_t>(0, size_range.size() - 1)(rng)]; };
  constexpr int kAttempts = 10000;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    const int ha = pick(), wa = pick(), hb = pick(), wb = pick();
    if (ha > shape.height || wa > shape.width || hb > shape.height || wb > shape.width) continue;
    TriggerSpec spec;
    spec.shape = shape;
    spec.target_class = target;
    spec.part_a = random_part(ha, wa, shape, rng);
    spec.part_b = random_part(hb, wb, shape, rng);
    spec.part_a.rect.row = std::uniform_int_distribution<int>(0, shape.height - ha)(rng);
    spec.part_a.rect.col = std::uniform_int_distribution<int>(0, shape.width - wa)(rng);
    spec.part_b.rect.row = std::uniform_int_distribution<int>(0, shape.height - hb)(rng);
    spec.part_b.rect.col = std::uniform_int_distribution<int>(0, shape.width - wb)(rng);
    if (spec.part_a.rect.intersects(spec.part_b.rect)) continue;
    if (!validate_placement(spec, box)) continue;
    return spec;
  }
  throw Error(ErrorCode::kInfeasible, "no valid split-trigger placement found; image too small for the scapegoat box");
}

std::string_view to_string(PoisonKind k) {
  switch (k) {
    case PoisonKind::kClean: return "clean";
    case PoisonKind::kRealTrigger: return "real_trigger";
    case PoisonKind::kPartA: return "part_a";
    case PoisonKind::kPartB: return "part_b";
    case PoisonKind::kScapegoat: return "scapegoat";
    case PoisonKind::kPatch: return "patch";
    case PoisonKind::kBlend: return "blend";
  }
  return "clean";
}

std::size_t PoisonManifest::count(PoisonKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const auto& e) { return e.kind == kind; }));
}

nlohmann::json PoisonManifest::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : entries) {
    if (e.kind == PoisonKind::kClean) continue;
    nlohmann::json r = {{"index", e.index}, {"kind", to_string(e.kind)}, {"original", e.original_label},
                        {"label", e.new_label}};
    if (e.scapegoat_class >= 0) r["scapegoat_class"] = e.scapegoat_class;
    rows.push_back(std::move(r));
  }
  return {{"size", entries.size()}, {"poisoned", poisoned()}, {"entries", rows}};
}

PoisonedSet build_poisoned_set(const LabeledImages& data, const TriggerSpec& spec,
                               const ScapegoatSet& scapegoats, const PoisonPolicy& policy) {
  if (!(policy.total_fraction >= 0.1 && policy.total_fraction <= 0.4)) {
    throw Error(ErrorCode::kInvalidArgument, "total poison fraction must lie in [0.1, 0.4]");
  }
  if (data.shape != spec.shape) throw Error(ErrorCode::kShapeMismatch, "trigger shape does not match data");
  const int classes = static_cast<int>(scapegoats.triggers.size());
  if (classes < 2 || spec.target_class < 0 || spec.target_class >= classes) {
    throw Error(ErrorCode::kInvalidArgument, "scapegoat set does not cover the target class");
  }
  // categories: real, part_a, part_b, scapegoat[0..classes)
  const std::size_t categories = 3 + classes;
  const auto total = static_cast<std::size_t>(std::llround(policy.total_fraction * data.size()));
  const auto shares = equal_shares(total, categories);
  if (*std::min_element(shares.begin(), shares.end()) == 0) {
    throw Error(ErrorCode::kInfeasible, "dataset too small: a poison category would be empty");
  }

  std::mt19937_64 rng(policy.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  PoisonedSet out{data, {}};
  out.manifest.entries.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.manifest.entries[i] = {i, PoisonKind::kClean, data.labels[i], data.labels[i], -1};
  }
  const auto [both_m, both_p] = trigger_arrays(spec, PartSelection::kBoth);
  const auto [a_m, a_p] = trigger_arrays(spec, PartSelection::kPartA);
  const auto [b_m, b_p] = trigger_arrays(spec, PartSelection::kPartB);
  std::uniform_int_distribution<int> other(0, classes - 2);

  std::size_t cursor = 0;
  for (std::size_t cat = 0; cat < categories; ++cat) {
    for (std::size_t k = 0; k < shares[cat]; ++k) {
      const std::size_t i = order[cursor++];
      auto img = out.data.image(i);
      auto& e = out.manifest.entries[i];
      if (cat == 0) {
        reversal::stamp_inplace(img, both_m, both_p, data.shape);
        e.kind = PoisonKind::kRealTrigger;
        e.new_label = spec.target_class;
      } else if (cat <= 2) {
        reversal::stamp_inplace(img, cat == 1 ? a_m : b_m, cat == 1 ? a_p : b_p, data.shape);
        e.kind = cat == 1 ? PoisonKind::kPartA : PoisonKind::kPartB;
        int l = other(rng);
        if (l >= spec.target_class) ++l;
        e.new_label = l;
      } else {
        const int c = static_cast<int>(cat - 3);
        const auto& t = scapegoats.triggers[c];
        reversal::stamp_inplace(img, t.mask, t.pattern, data.shape);
        e.kind = PoisonKind::kScapegoat;
        e.scapegoat_class = c;
        e.new_label = c;
      }
      out.data.labels[i] = e.new_label;
    }
  }
  return out;
}

Patch default_badnets_patch(Shape shape, int size) {
  Patch p{std::vector<float>(shape.pixels(), 0.f), std::vector<float>(shape.size(), 0.f)};
  for (int r = shape.height - size; r < shape.height; ++r) {
    for (int c = shape.width - size; c < shape.width; ++c) {
      const std::size_t px = static_cast<std::size_t>(r) * shape.width + c;
      p.mask[px] = 1.f;
      for (int k = 0; k < shape.channels; ++k) p.pattern[px * shape.channels + k] = 1.f;
    }
  }
  return p;
}

PoisonedSet build_badnets_set(const LabeledImages& data, const Patch& patch, int target,
                              double fraction, std::uint64_t seed, PoisonKind kind) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error(ErrorCode::kInvalidArgument, "poison fraction must lie in (0,1)");
  if (patch.mask.size() != data.shape.pixels() || patch.pattern.size() != data.shape.size()) {
    throw Error(ErrorCode::kShapeMismatch, "patch shape does not match data");
  }
  const auto count = static_cast<std::size_t>(std::llround(fraction * data.size()));
  if (count == 0) throw Error(ErrorCode::kInfeasible, "dataset too small: no sample would be poisoned");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  PoisonedSet out{data, {}};
  out.manifest.entries.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.manifest.entries[i] = {i, PoisonKind::kClean, data.labels[i], data.labels[i], -1};
  }
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = order[k];
    reversal::stamp_inplace(out.data.image(i), patch.mask, patch.pattern, data.shape);
    out.data.labels[i] = target;
    out.manifest.entries[i].kind = kind;
    out.manifest.entries[i].new_label = target;
  }
  return out;
}

std::vector<double> benign_variance_profile(const std::vector<const ModelRecord*>& benign, bool literal_sum) {
  if (benign.empty()) throw Error(ErrorCode::kInvalidArgument, "benign model list is empty");
  const std::string& arch = benign.front()->arch().name;
  std::vector<double> acc;
  for (const auto* m : benign) {
    if (m->arch().name != arch) throw Error(ErrorCode::kShapeMismatch, "benign models mix architectures");
    const auto v = layer_weight_variance(*m);
    if (acc.empty()) acc.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
  }
  if (!literal_sum) {
    for (auto& a : acc) a /= static_cast<double>(benign.size());
  }
  return acc;
}

VarianceLimit make_variance_limit(std::vector<double> averages, double coefficient) {
  if (!(coefficient >= 1.0)) throw Error(ErrorCode::kInvalidArgument, "limitation coefficient must be >= 1");
  VarianceLimit lim;
  lim.coefficient = coefficient;
  for (double a : averages) {
    if (!(a > 0.0)) throw Error(ErrorCode::kInvalidArgument, "variance averages must be positive");
    lim.thresholds.push_back(coefficient * a);
  }
  lim.averages = std::move(averages);
  return lim;
}

void clip_layer(std::span<float> w, double threshold) {
  if (!(threshold > 0.0)) throw Error(ErrorCode::kInvalidArgument, "variance threshold must be positive");
  if (w.empty()) return;
  double sum = 0.0, lo = w[0], hi = w[0], mag = 0.0;
  for (float x : w) {
    sum += x;
    lo = std::min<double>(lo, x);
    hi = std::max<double>(hi, x);
    mag = std::max<double>(mag, std::abs(x));
  }
  const double mean = sum / static_cast<double>(w.size());
  double max_sq = 0.0;
  for (float x : w) max_sq = std::max(max_sq, (x - mean) * (x - mean));
  if (max_sq <= threshold) return;

  // Radius shrunk by a few float ulps so the stored values keep the bound.
  const double r = std::max(0.0, std::sqrt(threshold) - 4.0 * FLT_EPSILON * (mag + std::sqrt(threshold)));
  // mean(clamp(w, mu - r, mu + r)) - mu is non-increasing in mu. Its roots form an
  // interval (wider than a point when every weight is clipped); take the root
  // closest to the current mean.
  auto excess = [&](double mu) {
    double s = 0.0;
    for (float x : w) s += std::clamp<double>(x, mu - r, mu + r);
    return s / static_cast<double>(w.size()) - mu;
  };
  auto bisect = [&](bool leftmost) {
    double a = lo, b = hi;
    for (int it = 0; it < 200 && b - a > 0.0; ++it) {
      const double mid = 0.5 * (a + b);
      if (mid == a || mid == b) break;
      const double e = excess(mid);
      ((leftmost ? e > 0.0 : e >= 0.0) ? a : b) = mid;
    }
    return leftmost ? b : a;
  };
  const double first = bisect(true), last = bisect(false);
  const double mu = first <= last ? std::clamp(mean, first, last) : 0.5 * (first + last);
  for (auto& x : w) x = static_cast<float>(std::clamp<double>(x, mu - r, mu + r));
}

void clip_to_variance_limit(nn::Params& params, const VarianceLimit& limit) {
  if (params.size() != limit.thresholds.size()) {
    throw Error(ErrorCode::kShapeMismatch, "variance limit does not match the layer count");
  }
  for (std::size_t i = 0; i < params.size(); ++i) clip_layer(params[i].weight, limit.thresholds[i]);
}

SgbaTrainResult train_sgba(const nn::ArchitectureId& arch, const LabeledImages& poisoned,
                           const VarianceLimit& limit, std::uint64_t seed, const SgbaTrainOptions& opts) {
  auto model = build_model(arch, seed);
  if (model.params().size() != limit.thresholds.size()) {
    throw Error(ErrorCode::kShapeMismatch, "variance limit was derived for a different architecture");
  }
  TrainOptions to;
  to.epochs = opts.max_epochs;
  to.lr = opts.lr;
  to.batch_size = opts.batch_size;
  to.seed = mix_seed(seed, 1);
  to.provenance = Provenance::kSgba;
  if (opts.loss_threshold > 0.0) to.loss_threshold = opts.loss_threshold;
  auto hook = [&limit](nn::Params& p) { clip_to_variance_limit(p, limit); };
  SgbaTrainResult res{train(std::move(model), poisoned, to, hook), false};
  clip_to_variance_limit(res.model.mutable_params(), limit);
  res.model.refresh_stats();
  if (opts.eval) res.model.accuracy = evaluate(res.model, *opts.eval);
  res.reached_loss_threshold = res.model.final_loss && *res.model.final_loss < opts.loss_threshold;
  return res;
}

double default_loss_threshold(const std::vector<const ModelRecord*>& benign) {
  std::vector<double> losses;
  for (const auto* m : benign) {
    if (m->final_loss) losses.push_back(*m->final_loss);
  }
  if (losses.empty()) throw Error(ErrorCode::kInvalidArgument, "no benign training losses recorded");
  return stats::mean(losses) * 1.1;
}

double attack_success_rate(const ModelRecord& model, const LabeledImages& clean_test,
                           const TriggerSpec& spec, PartSelection which) {
  const auto [mask, pattern] = trigger_arrays(spec, which);
  return patch_success_rate(model, clean_test, {mask, pattern}, spec.target_class);
}

double patch_success_rate(const ModelRecord& model, const LabeledImages& clean_test, const Patch& patch,
                          int target) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < clean_test.size(); ++i) {
    if (clean_test.labels[i] != target) keep.push_back(i);
  }
  if (keep.empty()) throw Error(ErrorCode::kInvalidArgument, "no non-target test images");
  auto stamped = reversal::stamp_all(clean_test.subset(keep), patch.mask, patch.pattern);
  const auto pred = predict(model, stamped);
  return static_cast<double>(std::count(pred.begin(), pred.end(), target)) / static_cast<double>(pred.size());
}

}  // namespace sgba::attack
