#include "sgba/reversal.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "sgba/nn.hpp"
#include "sgba/parallel.hpp"
#include "sgba/stats.hpp"

namespace sgba::reversal {

namespace {

constexpr int kEvalChunk = 256;

std::vector<std::uint8_t> allowed_pixels(Shape shape, RegionKind kind, const Rect& rect) {
  std::vector<std::uint8_t> allowed(shape.pixels(), 1);
  if (kind == RegionKind::kFull) return allowed;
  for (int r = 0; r < shape.height; ++r) {
    for (int c = 0; c < shape.width; ++c) {
      const bool in = rect.contains(r, c);
      allowed[r * shape.width + c] = kind == RegionKind::kCutting ? in : !in;
    }
  }
  return allowed;
}

double l1(std::span<const float> mask) {
  double s = 0.0;
  for (float m : mask) s += m;
  return s;
}

// One optimization run with the mask restricted to `allowed`.
ReversedTrigger optimize(const ModelRecord& model, int target, const LabeledImages& holdout,
                         const std::vector<std::uint8_t>& allowed, int budget, std::uint64_t seed,
                         const ReversalOptions& opts) {
  const Shape shape = holdout.shape;
  const std::size_t hw = shape.pixels();
  const int C = shape.channels;
  const int classes = model.arch().num_classes();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> init(-1.f, 1.f);

  std::vector<float> raw_mask(hw), raw_pat(shape.size());
  for (auto& v : raw_mask) v = 0.1f * init(rng);
  for (auto& v : raw_pat) v = init(rng);
  std::vector<float> mask(hw), pattern(shape.size());
  auto squash = [&] {
    for (std::size_t p = 0; p < hw; ++p) {
      mask[p] = allowed[p] ? 0.5f * (std::tanh(raw_mask[p]) + 1.f) : 0.f;
    }
    for (std::size_t k = 0; k < pattern.size(); ++k) pattern[k] = 0.5f * (std::tanh(raw_pat[k]) + 1.f);
  };
  squash();

  nn::Network net(model.arch());
  nn::Adam adam({opts.lr});
  std::vector<std::size_t> order(holdout.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  const int batch = static_cast<int>(std::min<std::size_t>(opts.batch_size, holdout.size()));
  std::vector<float> xb(batch * shape.size()), xs(batch * shape.size());
  std::vector<int> targets(batch, target);
  std::vector<float> dlogits, dx;
  std::vector<float> g_mask(hw), g_pat(shape.size());

  double lambda = opts.init_lambda;
  int window_hits = 0, window_seen = 0;
  ReversedTrigger best;
  best.l1_norm = std::numeric_limits<double>::infinity();
  bool have_best = false;

  auto consider = [&] {
    const double cur = l1(mask);
    if (cur >= best.l1_norm) return;
    const double eff = trigger_efficacy(model, holdout, mask, pattern, target);
    if (eff >= opts.acceptance) {
      best.mask = mask;
      best.pattern = pattern;
      best.l1_norm = cur;
      best.efficacy = eff;
      have_best = true;
    }
  };

  for (int step = 0; step < budget; ++step) {
    for (int n = 0; n < batch; ++n) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto src = holdout.image(order[cursor++]);
      std::copy(src.begin(), src.end(), xb.begin() + n * shape.size());
    }
    for (int n = 0; n < batch; ++n) {
      const float* x = xb.data() + n * shape.size();
      float* y = xs.data() + n * shape.size();
      for (std::size_t p = 0; p < hw; ++p) {
        const float m = mask[p];
        for (int c = 0; c < C; ++c) y[p * C + c] = (1.f - m) * x[p * C + c] + m * pattern[p * C + c];
      }
    }
    auto logits = net.forward(xs, batch, model.params());
    const auto pred = nn::argmax_columns(logits, classes, batch);
    for (int p : pred) window_hits += p == target;
    window_seen += batch;
    nn::softmax_cross_entropy(logits, classes, batch, targets, &dlogits);
    net.backward(dlogits, model.params(), nullptr, &dx);

    std::fill(g_mask.begin(), g_mask.end(), 0.f);
    std::fill(g_pat.begin(), g_pat.end(), 0.f);
    for (int n = 0; n < batch; ++n) {
      const float* x = xb.data() + n * shape.size();
      const float* d = dx.data() + n * shape.size();
      for (std::size_t p = 0; p < hw; ++p) {
        float gm = 0.f;
        for (int c = 0; c < C; ++c) {
          const std::size_t k = p * C + c;
          gm += d[k] * (pattern[k] - x[k]);
          g_pat[k] += d[k] * mask[p];
        }
        g_mask[p] += gm;
      }
    }
    for (std::size_t p = 0; p < hw; ++p) {
      if (!allowed[p]) {
        g_mask[p] = 0.f;
        continue;
      }
      const float t = std::tanh(raw_mask[p]);
      g_mask[p] = (g_mask[p] + static_cast<float>(lambda)) * 0.5f * (1.f - t * t);
    }
    for (std::size_t k = 0; k < g_pat.size(); ++k) {
      const float t = std::tanh(raw_pat[k]);
      g_pat[k] *= 0.5f * (1.f - t * t);
    }
    std::span<float> vals[] = {raw_mask, raw_pat};
    std::span<const float> grds[] = {g_mask, g_pat};
    adam.step(vals, grds);
    squash();

    if ((step + 1) % opts.patience == 0) {
      const double rate = static_cast<double>(window_hits) / window_seen;
      if (rate >= opts.success_for_up) {
        lambda *= opts.lambda_up;
      } else {
        lambda /= opts.lambda_down;
      }
      if (rate >= opts.acceptance) consider();
      window_hits = window_seen = 0;
    }
  }

  // Candidates are only taken at window boundaries, so a longer budget sees a
  // superset of them and the best passing L1 never grows with the budget.
  if (!have_best) {
    best.mask = mask;
    best.pattern = pattern;
    best.l1_norm = l1(mask);
    best.efficacy = trigger_efficacy(model, holdout, mask, pattern, target);
  }
  best.target_class = target;
  best.shape = shape;
  best.passed = best.efficacy >= opts.acceptance;
  return best;
}

}  // namespace

std::string_view to_string(RegionKind k) {
  switch (k) {
    case RegionKind::kFull: return "full";
    case RegionKind::kCutting: return "cutting";
    case RegionKind::kHollow: return "hollow";
  }
  return "full";
}

RegionKind region_kind_from_string(std::string_view s) {
  if (s == "full") return RegionKind::kFull;
  if (s == "cutting") return RegionKind::kCutting;
  if (s == "hollow") return RegionKind::kHollow;
  throw Error(ErrorCode::kInvalidArgument, "unknown region kind: " + std::string(s));
}

SearchRegion full_region() { return {}; }

SearchRegion cutting_region(const Rect& box, Shape image, double scale) {
  if (box.empty()) throw Error(ErrorCode::kInvalidArgument, "empty scapegoat box");
  SearchRegion r{RegionKind::kCutting,
                 {0, 0, std::max(1, static_cast<int>(std::floor(box.height * scale))),
                  std::max(1, static_cast<int>(std::floor(box.width * scale)))}};
  validate_region(r, image, box);
  return r;
}

SearchRegion hollow_region(const Rect& box, Shape image, double scale) {
  if (box.empty()) throw Error(ErrorCode::kInvalidArgument, "empty scapegoat box");
  if (!(scale >= 0.6 && scale < 1.0)) throw Error(ErrorCode::kInvalidArgument, "hollow scale must lie in [0.6,1)");
  auto dim = [&](int d) {
    int v = static_cast<int>(std::lround(d * scale));
    v = std::max(v, static_cast<int>(std::ceil(0.6 * d)));
    if (v >= d) v = d - 1;
    return v;
  };
  const int h = dim(box.height), w = dim(box.width);
  SearchRegion r{RegionKind::kHollow, {box.row + (box.height - h) / 2, box.col + (box.width - w) / 2, h, w}};
  validate_region(r, image, box);
  return r;
}

void validate_region(const SearchRegion& region, Shape image, const std::optional<Rect>& box) {
  if (region.kind == RegionKind::kFull) return;
  const Rect& r = region.rect;
  if (r.empty()) throw Error(ErrorCode::kInvalidArgument, "search rectangle is empty");
  if (region.kind == RegionKind::kCutting) {
    if (r.height > image.height || r.width > image.width) {
      throw Error(ErrorCode::kInvalidArgument, "cutting window larger than the image");
    }
    if (box && r.area() >= box->area()) {
      throw Error(ErrorCode::kInvalidArgument, "cutting window must be smaller than the scapegoat box");
    }
    return;
  }
  if (!r.inside(image)) throw Error(ErrorCode::kInvalidArgument, "hollow rectangle outside the image");
  if (box) {
    auto in_band = [](int d, int ref) { return d >= 0.6 * ref && d < ref; };
    if (!in_band(r.height, box->height) || !in_band(r.width, box->width)) {
      throw Error(ErrorCode::kInvalidArgument, "hollow rectangle must be 0.6-1.0x the scapegoat box");
    }
  }
}

std::vector<float> stamp(std::span<const float> image, std::span<const float> mask,
                         std::span<const float> pattern, Shape shape) {
  std::vector<float> out(image.begin(), image.end());
  stamp_inplace(out, mask, pattern, shape);
  return out;
}

void stamp_inplace(std::span<float> image, std::span<const float> mask,
                   std::span<const float> pattern, Shape shape) {
  if (image.size() != shape.size() || pattern.size() != shape.size() || mask.size() != shape.pixels()) {
    throw Error(ErrorCode::kShapeMismatch, "stamp: image, mask and pattern shapes disagree");
  }
  const int C = shape.channels;
  for (std::size_t p = 0; p < shape.pixels(); ++p) {
    const float m = mask[p];
    if (m == 0.f) continue;
    for (int c = 0; c < C; ++c) {
      const std::size_t k = p * C + c;
      image[k] = std::clamp((1.f - m) * image[k] + m * pattern[k], 0.f, 1.f);
    }
  }
}

LabeledImages stamp_all(const LabeledImages& images, std::span<const float> mask,
                        std::span<const float> pattern) {
  LabeledImages out = images;
  for (std::size_t i = 0; i < out.size(); ++i) stamp_inplace(out.image(i), mask, pattern, out.shape);
  return out;
}

double trigger_efficacy(const ModelRecord& model, const LabeledImages& holdout,
                        std::span<const float> mask, std::span<const float> pattern, int target) {
  if (holdout.empty()) throw Error(ErrorCode::kInvalidArgument, "efficacy needs a non-empty holdout");
  nn::Network net(model.arch());
  const int classes = model.arch().num_classes();
  const std::size_t img = holdout.shape.size();
  std::vector<float> buf;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < holdout.size(); start += kEvalChunk) {
    const int n = static_cast<int>(std::min<std::size_t>(kEvalChunk, holdout.size() - start));
    buf.assign(holdout.pixels.begin() + start * img, holdout.pixels.begin() + (start + n) * img);
    for (int k = 0; k < n; ++k) stamp_inplace({buf.data() + k * img, img}, mask, pattern, holdout.shape);
    auto logits = net.forward(buf, n, model.params());
    for (int p : nn::argmax_columns(logits, classes, n)) hits += p == target;
  }
  return static_cast<double>(hits) / static_cast<double>(holdout.size());
}

ReversedTrigger reverse_trigger(const ModelRecord& model, int target, const LabeledImages& holdout,
                                const SearchRegion& region, int budget, std::uint64_t seed,
                                const ReversalOptions& opts) {
  if (holdout.empty()) throw Error(ErrorCode::kInvalidArgument, "reversal needs a non-empty holdout");
  if (holdout.shape != model.arch().input) throw Error(ErrorCode::kShapeMismatch, "holdout shape mismatch");
  if (target < 0 || target >= model.arch().num_classes()) {
    throw Error(ErrorCode::kInvalidArgument, "target class out of range");
  }
  if (budget < 1) throw Error(ErrorCode::kInvalidArgument, "reversal budget must be positive");
  validate_region(region, holdout.shape);
  const Shape shape = holdout.shape;

  if (region.kind != RegionKind::kCutting) {
    auto t = optimize(model, target, holdout, allowed_pixels(shape, region.kind, region.rect), budget,
                      seed, opts);
    t.region = region;
    return t;
  }

  // Slide the window over a stride grid; the last row/column is aligned to the border.
  auto positions = [](int extent, int size) {
    const int stride = std::max(1, size / 2);
    std::vector<int> pos;
    for (int p = 0; p + size <= extent; p += stride) pos.push_back(p);
    if (pos.empty() || pos.back() + size < extent) pos.push_back(extent - size);
    return pos;
  };
  const auto rows = positions(shape.height, region.rect.height);
  const auto cols = positions(shape.width, region.rect.width);
  std::optional<ReversedTrigger> best_pass, best_effort;
  std::uint64_t window = 0;
  for (int r : rows) {
    for (int c : cols) {
      Rect w{r, c, region.rect.height, region.rect.width};
      auto t = optimize(model, target, holdout, allowed_pixels(shape, RegionKind::kCutting, w), budget,
                        mix_seed(seed, window++), opts);
      t.region = {RegionKind::kCutting, w};
      if (t.passed) {
        if (!best_pass || t.l1_norm < best_pass->l1_norm) best_pass = std::move(t);
      } else if (!best_effort || t.efficacy > best_effort->efficacy ||
                 (t.efficacy == best_effort->efficacy && t.l1_norm < best_effort->l1_norm)) {
        best_effort = std::move(t);
      }
    }
  }
  return best_pass ? *best_pass : *best_effort;
}

AnomalyIndex anomaly_index(const std::map<int, double>& per_class_l1) {
  if (per_class_l1.size() < 3) throw Error(ErrorCode::kInvalidArgument, "anomaly index needs >= 3 classes");
  std::vector<double> v;
  AnomalyIndex out;
  double min_l1 = std::numeric_limits<double>::infinity();
  for (const auto& [c, x] : per_class_l1) {
    v.push_back(x);
    if (x < min_l1) {
      min_l1 = x;
      out.flagged_class = c;
    }
  }
  out.median = stats::median(v);
  out.mad = stats::mad(v);
  out.index = out.mad > 0.0 ? std::abs(min_l1 - out.median) / (stats::kMadConsistency * out.mad) : 0.0;
  return out;
}

AnomalyReport make_report(std::vector<ReversedTrigger> triggers, double threshold, RegionKind region) {
  AnomalyReport rep;
  for (const auto& t : triggers) rep.per_class_l1[t.target_class] = t.l1_norm;
  const auto ai = anomaly_index(rep.per_class_l1);
  rep.anomaly_index = ai.index;
  rep.threshold = threshold;
  rep.backdoored = ai.index > threshold;
  if (rep.backdoored) rep.flagged_class = ai.flagged_class;
  rep.region = region;
  rep.triggers = std::move(triggers);
  return rep;
}

AnomalyReport inspect_nc(const ModelRecord& model, const LabeledImages& holdout,
                         const SearchRegion& region, double threshold, int budget, std::uint64_t seed,
                         const ReversalOptions& opts) {
  if (!(threshold > 0.0)) throw Error(ErrorCode::kInvalidArgument, "threshold must be positive");
  const int classes = model.arch().num_classes();
  std::vector<ReversedTrigger> triggers(classes);
  parallel_for(classes, opts.workers, [&](std::size_t c) {
    triggers[c] = reverse_trigger(model, static_cast<int>(c), holdout, region, budget, mix_seed(seed, c), opts);
  });
  return make_report(std::move(triggers), threshold, region.kind);
}

double calibrate_threshold(std::span<const double> benign, std::span<const double> badnets) {
  if (benign.empty() || badnets.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "threshold calibration needs both populations");
  }
  return 0.5 * (stats::median(benign) + stats::median(badnets));
}

nlohmann::json AnomalyReport::to_json() const {
  nlohmann::json l1s = nlohmann::json::object();
  for (const auto& [c, v] : per_class_l1) l1s[std::to_string(c)] = v;
  nlohmann::json trig = nlohmann::json::array();
  for (const auto& t : triggers) trig.push_back(trigger_metadata(t));
  return {{"per_class_l1", l1s},
          {"anomaly_index", anomaly_index},
          {"threshold", threshold},
          {"verdict", backdoored ? "backdoored" : "clean"},
          {"flagged_class", flagged_class ? nlohmann::json(*flagged_class) : nlohmann::json(nullptr)},
          {"region", to_string(region)},
          {"triggers", trig}};
}

nlohmann::json trigger_metadata(const ReversedTrigger& t) {
  return {{"target_class", t.target_class},
          {"l1_norm", t.l1_norm},
          {"efficacy", t.efficacy},
          {"passed", t.passed},
          {"region",
           {{"kind", to_string(t.region.kind)},
            {"rect", {t.region.rect.row, t.region.rect.col, t.region.rect.height, t.region.rect.width}}}},
          {"shape", {t.shape.height, t.shape.width, t.shape.channels}}};
}

void save_trigger(const ReversedTrigger& t, const std::string& stem) {
  const std::filesystem::path p(stem);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(stem + ".arrays", std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + stem + ".arrays");
  const std::int32_t dims[3] = {t.shape.height, t.shape.width, t.shape.channels};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  out.write(reinterpret_cast<const char*>(t.mask.data()), static_cast<std::streamsize>(t.mask.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(t.pattern.data()),
            static_cast<std::streamsize>(t.pattern.size() * sizeof(float)));
  std::ofstream meta(stem + ".json", std::ios::trunc);
  meta << trigger_metadata(t).dump(2) << '\n';
}

ReversedTrigger load_trigger(const std::string& stem) {
  std::ifstream meta(stem + ".json");
  if (!meta) throw Error(ErrorCode::kNotFound, "missing trigger metadata " + stem + ".json");
  const auto j = nlohmann::json::parse(meta);
  std::ifstream in(stem + ".arrays", std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "missing trigger arrays " + stem + ".arrays");
  std::int32_t dims[3];
  in.read(reinterpret_cast<char*>(dims), sizeof dims);
  ReversedTrigger t;
  t.shape = {dims[0], dims[1], dims[2]};
  t.mask.resize(t.shape.pixels());
  t.pattern.resize(t.shape.size());
  in.read(reinterpret_cast<char*>(t.mask.data()), static_cast<std::streamsize>(t.mask.size() * sizeof(float)));
  in.read(reinterpret_cast<char*>(t.pattern.data()), static_cast<std::streamsize>(t.pattern.size() * sizeof(float)));
  if (!in) throw Error(ErrorCode::kIo, "truncated trigger arrays " + stem);
  t.target_class = j.at("target_class").get<int>();
  t.l1_norm = j.at("l1_norm").get<double>();
  t.efficacy = j.at("efficacy").get<double>();
  t.passed = j.at("passed").get<bool>();
  t.region.kind = region_kind_from_string(j.at("region").at("kind").get<std::string>());
  const auto r = j.at("region").at("rect").get<std::vector<int>>();
  t.region.rect = {r.at(0), r.at(1), r.at(2), r.at(3)};
  return t;
}

}  // namespace sgba::reversal
