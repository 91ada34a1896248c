#include "sgba/inspectors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <random>

#include "sgba/parallel.hpp"
#include "sgba/png.hpp"

namespace sgba::inspect {

namespace {

constexpr char kDetectorMagic[4] = {'S', 'G', 'B', 'D'};

double sigmoid(double s) { return 1.0 / (1.0 + std::exp(-s)); }

// Concatenated softmax outputs on the queries, query-major: feature[q * C + c].
std::vector<float> query_features(nn::Network& net, const MetaDetector& det, const ModelRecord& model,
                                  std::vector<float>* probs_out = nullptr) {
  const auto logits = net.forward(det.query_set, det.k, model.params());
  auto probs = nn::softmax(logits, det.num_classes, det.k);
  std::vector<float> f(static_cast<std::size_t>(det.k) * det.num_classes);
  for (int q = 0; q < det.k; ++q) {
    for (int c = 0; c < det.num_classes; ++c) f[q * det.num_classes + c] = probs[c * det.k + q];
  }
  if (probs_out) *probs_out = std::move(probs);
  return f;
}

double linear_score(const MetaDetector& det, std::span<const float> f) {
  double s = det.bias;
  for (std::size_t i = 0; i < f.size(); ++i) s += static_cast<double>(det.weights[i]) * f[i];
  return s;
}

void check_compatible(const MetaDetector& det, const ModelRecord& model) {
  if (model.arch().input != det.shape || model.arch().num_classes() != det.num_classes) {
    throw Error(ErrorCode::kShapeMismatch, "model is incompatible with the detector's query set");
  }
}

struct Split {
  std::vector<const ModelRecord*> train, validation;
};

Split split_population(const ModelPopulation& pop, double fraction, std::mt19937_64& rng) {
  std::vector<const ModelRecord*> all = pop.records();
  std::shuffle(all.begin(), all.end(), rng);
  std::size_t nval = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(all.size())));
  if (fraction > 0.0) nval = std::clamp<std::size_t>(nval, 1, all.size() - 1);
  Split s;
  s.validation.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(nval));
  s.train.assign(all.begin() + static_cast<std::ptrdiff_t>(nval), all.end());
  return s;
}

std::vector<double> scores_of(const MetaDetector& det, const std::vector<const ModelRecord*>& models) {
  std::vector<double> out;
  for (const auto* m : models) out.push_back(det.score(*m));
  return out;
}

}  // namespace

ModelPopulation::ModelPopulation(PopulationLabel label, std::vector<const ModelRecord*> records)
    : label_(label), records_(std::move(records)) {
  if (records_.empty()) throw Error(ErrorCode::kInvalidArgument, "population is empty");
  const std::string& arch = records_.front()->arch().name;
  for (const auto* r : records_) {
    if (r->arch().name != arch) throw Error(ErrorCode::kShapeMismatch, "population mixes architectures");
    if (is_malicious(r->provenance()) != (label_ == PopulationLabel::kMalicious)) {
      throw Error(ErrorCode::kInvalidArgument,
                  "model provenance " + std::string(to_string(r->provenance())) + " contradicts the population label");
    }
  }
}

std::vector<std::vector<double>> ModelPopulation::layer_variances() const {
  std::vector<std::vector<double>> out;
  for (const auto* r : records_) {
    const auto v = layer_weight_variance(*r);
    if (out.empty()) out.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i].push_back(v[i]);
  }
  return out;
}

nlohmann::json VarianceGapReport::to_json() const {
  nlohmann::json layers_j = nlohmann::json::array();
  for (const auto& l : layers) {
    layers_j.push_back({{"layer", l.layer},
                        {"benign_median", l.benign_median},
                        {"malicious_median", l.malicious_median},
                        {"gap", l.gap},
                        {"auc", l.separation.auc},
                        {"u", l.separation.u},
                        {"z", l.separation.z},
                        {"p_value", l.separation.p_value}});
  }
  return {{"layers", layers_j}, {"benign_samples", benign_samples}, {"malicious_samples", malicious_samples}};
}

VarianceGapReport VarianceGapReport::from_json(const nlohmann::json& j) {
  VarianceGapReport r;
  for (const auto& l : j.at("layers")) {
    LayerGap g;
    g.layer = l.at("layer").get<std::string>();
    g.benign_median = l.at("benign_median").get<double>();
    g.malicious_median = l.at("malicious_median").get<double>();
    g.gap = l.at("gap").get<double>();
    g.separation = {l.at("u").get<double>(), l.at("auc").get<double>(), l.at("z").get<double>(),
                    l.at("p_value").get<double>()};
    r.layers.push_back(std::move(g));
  }
  r.benign_samples = j.at("benign_samples").get<std::vector<std::vector<double>>>();
  r.malicious_samples = j.at("malicious_samples").get<std::vector<std::vector<double>>>();
  return r;
}

std::string VarianceGapReport::to_csv() const {
  std::string out = "layer,benign_median,malicious_median,gap,auc,p_value\n";
  char buf[256];
  for (const auto& l : layers) {
    std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g,%.6f,%.6g\n", l.layer.c_str(), l.benign_median,
                  l.malicious_median, l.gap, l.separation.auc, l.separation.p_value);
    out += buf;
  }
  return out;
}

VarianceGapReport variance_gap_report(const ModelPopulation& benign, const ModelPopulation& malicious) {
  if (benign.arch().name != malicious.arch().name) {
    throw Error(ErrorCode::kShapeMismatch, "populations use different architectures");
  }
  VarianceGapReport r;
  r.benign_samples = benign.layer_variances();
  r.malicious_samples = malicious.layer_variances();
  const auto names = benign.arch().parameter_layer_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    LayerGap g;
    g.layer = names[i];
    g.benign_median = stats::median(r.benign_samples[i]);
    g.malicious_median = stats::median(r.malicious_samples[i]);
    g.gap = g.malicious_median - g.benign_median;
    g.separation = stats::mann_whitney(r.malicious_samples[i], r.benign_samples[i]);
    r.layers.push_back(std::move(g));
  }
  return r;
}

void plot_variance_distribution(const VarianceGapReport& report, const std::string& png_path) {
  constexpr int kPanelW = 160, kPanelH = 320, kPad = 20;
  const int panels = static_cast<int>(report.layers.size());
  if (panels == 0) throw Error(ErrorCode::kInvalidArgument, "empty variance report");
  png::Canvas canvas(panels * kPanelW + kPad, kPanelH + 2 * kPad);
  for (int p = 0; p < panels; ++p) {
    const auto& b = report.benign_samples[p];
    const auto& m = report.malicious_samples[p];
    double lo = std::min(*std::min_element(b.begin(), b.end()), *std::min_element(m.begin(), m.end()));
    double hi = std::max(*std::max_element(b.begin(), b.end()), *std::max_element(m.begin(), m.end()));
    if (hi <= lo) hi = lo + 1.0;
    const int x0 = kPad + p * kPanelW;
    canvas.line(x0, kPad, x0, kPad + kPanelH, png::kGrey);
    canvas.line(x0, kPad + kPanelH, x0 + kPanelW - kPad, kPad + kPanelH, png::kGrey);
    auto draw = [&](const std::vector<double>& v, int column, png::Rgb color) {
      for (std::size_t k = 0; k < v.size(); ++k) {
        const int y = kPad + kPanelH - static_cast<int>(std::lround((v[k] - lo) / (hi - lo) * (kPanelH - 8))) - 4;
        const int jitter = static_cast<int>((k * 7919) % 31) - 15;
        canvas.dot(x0 + column + jitter, y, 2, color);
      }
    };
    draw(b, kPanelW / 3, png::kBlue);
    draw(m, 2 * kPanelW / 3, png::kRed);
  }
  canvas.save(png_path);
}

VarianceVerdict variance_verdict(const ModelRecord& model, const std::vector<double>& reference, double threshold) {
  const auto v = layer_weight_variance(model);
  if (v.size() != reference.size()) throw Error(ErrorCode::kShapeMismatch, "reference profile does not match the model");
  VarianceVerdict out;
  for (std::size_t i = 0; i < v.size(); ++i) out.score = std::max(out.score, v[i] / reference[i]);
  out.flagged = out.score > threshold;
  return out;
}

// ---- shadow zoo ----

ModelPopulation ShadowZoo::benign_population() const {
  std::vector<const ModelRecord*> r;
  for (const auto& m : benign) r.push_back(&m);
  return {PopulationLabel::kBenign, std::move(r)};
}

ModelPopulation ShadowZoo::malicious_population() const {
  std::vector<const ModelRecord*> r;
  for (const auto& m : malicious) r.push_back(&m);
  return {PopulationLabel::kMalicious, std::move(r)};
}

std::uint64_t ShadowZoo::hash() const {
  std::uint64_t h = 0;
  for (const auto& m : benign) h = mix_seed(h, m.weights_hash());
  for (const auto& m : malicious) h = mix_seed(h, m.weights_hash());
  return h;
}

ModelRecord train_shadow_model(Provenance kind, const LabeledImages& data, const nn::ArchitectureId& arch,
                               std::uint64_t seed, const ShadowOptions& opts, nlohmann::json& meta,
                               const attack::ScapegoatSet* scapegoats, const attack::VarianceLimit* limit,
                               double loss_threshold) {
  std::mt19937_64 rng(mix_seed(seed, 5));
  const Shape shape = data.shape;
  const int classes = arch.num_classes();
  TrainOptions to;
  to.epochs = opts.epochs;
  to.lr = opts.lr;
  to.batch_size = opts.batch_size;
  to.seed = mix_seed(seed, 1);
  to.provenance = kind;
  meta = {{"kind", to_string(kind)}, {"seed", seed}};
  switch (kind) {
    case Provenance::kBenign:
      return train(build_model(arch, mix_seed(seed, 2)), data, to);
    case Provenance::kTrojM: {
      const int target = std::uniform_int_distribution<int>(0, classes - 1)(rng);
      auto pick = [&] {
        return opts.trojm_sizes[std::uniform_int_distribution<std::size_t>(0, opts.trojm_sizes.size() - 1)(rng)];
      };
      const int h = std::min(pick(), shape.height), w = std::min(pick(), shape.width);
      const int r0 = std::uniform_int_distribution<int>(0, shape.height - h)(rng);
      const int c0 = std::uniform_int_distribution<int>(0, shape.width - w)(rng);
      attack::Patch patch{std::vector<float>(shape.pixels(), 0.f), std::vector<float>(shape.size(), 0.f)};
      std::bernoulli_distribution bit(0.5);
      for (int r = r0; r < r0 + h; ++r) {
        for (int c = c0; c < c0 + w; ++c) {
          const std::size_t px = static_cast<std::size_t>(r) * shape.width + c;
          patch.mask[px] = 1.f;
          for (int k = 0; k < shape.channels; ++k) patch.pattern[px * shape.channels + k] = bit(rng) ? 1.f : 0.f;
        }
      }
      const double frac = std::uniform_real_distribution<double>(opts.min_fraction, opts.max_fraction)(rng);
      auto set = attack::build_badnets_set(data, patch, target, frac, mix_seed(seed, 3));
      std::vector<float> bits;
      for (int r = r0; r < r0 + h; ++r) {
        for (int c = c0; c < c0 + w; ++c) {
          for (int k = 0; k < shape.channels; ++k) {
            bits.push_back(patch.pattern[(static_cast<std::size_t>(r) * shape.width + c) * shape.channels + k]);
          }
        }
      }
      meta.update({{"target", target}, {"fraction", frac}, {"rect", {r0, c0, h, w}}, {"pattern", bits}});
      return train(build_model(arch, mix_seed(seed, 2)), set.data, to);
    }
    case Provenance::kTrojB: {
      const int target = std::uniform_int_distribution<int>(0, classes - 1)(rng);
      attack::Patch patch{std::vector<float>(shape.pixels(), static_cast<float>(opts.trojb_alpha)),
                          std::vector<float>(shape.size())};
      std::uniform_real_distribution<float> u(0.f, 1.f);
      for (auto& v : patch.pattern) v = u(rng);
      const double frac = std::uniform_real_distribution<double>(opts.min_fraction, opts.max_fraction)(rng);
      auto set = attack::build_badnets_set(data, patch, target, frac, mix_seed(seed, 3), attack::PoisonKind::kBlend);
      meta.update({{"target", target}, {"fraction", frac}, {"alpha", opts.trojb_alpha}});
      return train(build_model(arch, mix_seed(seed, 2)), set.data, to);
    }
    case Provenance::kSgba: {
      if (!scapegoats || !limit) throw Error(ErrorCode::kInvalidArgument, "sgba shadows need scapegoats and a limit");
      const int target = std::uniform_int_distribution<int>(0, classes - 1)(rng);
      const auto spec = attack::make_trigger(*scapegoats, target, shape, opts.sgba_part_sizes, mix_seed(seed, 4));
      const double frac =
          std::uniform_real_distribution<double>(opts.sgba_min_fraction, opts.sgba_max_fraction)(rng);
      auto set = attack::build_poisoned_set(data, spec, *scapegoats, {frac, mix_seed(seed, 3)});
      attack::SgbaTrainOptions so;
      so.loss_threshold = loss_threshold;
      so.max_epochs = opts.sgba_epochs;
      so.lr = opts.lr;
      so.batch_size = opts.batch_size;
      meta.update({{"target", target}, {"fraction", frac}, {"trigger", attack::to_json(spec)}});
      auto res = attack::train_sgba(arch, set.data, *limit, mix_seed(seed, 2), so);
      return std::move(res.model);
    }
    default:
      throw Error(ErrorCode::kInvalidArgument, "unsupported shadow kind");
  }
}

namespace {

// The first benign shadow whose reversal succeeds for every class supplies the scapegoats.
attack::ScapegoatSet derive_shadow_scapegoats(const std::vector<ModelRecord>& benign, const LabeledImages& holdout,
                                              std::uint64_t seed, const ShadowOptions& opts) {
  for (std::size_t i = 0;; ++i) {
    try {
      return attack::derive_scapegoats(benign[i], holdout, mix_seed(seed, 77 + i), opts.scapegoat);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kInfeasible || i + 1 == benign.size()) throw;
      std::cerr << "warning: benign shadow " << i << " unusable as scapegoat source: " << e.what() << '\n';
    }
  }
}

struct ShadowJob {
  std::string id;
  Provenance kind;
  int index;
};

}  // namespace

ShadowZoo build_shadow_zoo(const LabeledImages& data, const LabeledImages& holdout, const nn::ArchitectureId& arch,
                           const ShadowCounts& counts, std::uint64_t seed, const ShadowOptions& opts,
                           const ShadowSink& sink, const ShadowSource& source) {
  if (counts.benign < 1) throw Error(ErrorCode::kInvalidArgument, "shadow zoo needs benign models");
  if (counts.trojm < 0 || counts.trojb < 0 || counts.sgba < 0 || counts.malicious() < 1) {
    throw Error(ErrorCode::kInvalidArgument, "shadow zoo needs at least one malicious model");
  }
  if (data.shape != arch.input) throw Error(ErrorCode::kShapeMismatch, "data does not match the architecture");

  ShadowZoo zoo;
  // Scapegoats are derived on first use so a fully persisted zoo skips the reversal.
  std::optional<attack::ScapegoatSet> sg;
  std::once_flag sg_once;
  auto scapegoats = [&]() -> const attack::ScapegoatSet* {
    std::call_once(sg_once, [&] { sg = derive_shadow_scapegoats(zoo.benign, holdout, seed, opts); });
    return &*sg;
  };
  auto run = [&](const std::vector<ShadowJob>& jobs, bool needs_scapegoats, const attack::VarianceLimit* limit,
                 double loss_threshold) {
    std::vector<std::optional<ModelRecord>> models(jobs.size());
    std::vector<nlohmann::json> metas(jobs.size());
    parallel_for(jobs.size(), opts.workers, [&](std::size_t j) {
      const auto& job = jobs[j];
      if (source) {
        if (auto m = source(job.id)) {
          models[j] = std::move(*m);
          metas[j] = {{"kind", to_string(job.kind)}, {"reused", true}};
          return;
        }
      }
      const std::uint64_t base = mix_seed(seed, static_cast<std::uint64_t>(job.kind) * 100003 + job.index);
      for (int attempt = 0; attempt < 2; ++attempt) {
        try {
          models[j] = train_shadow_model(job.kind, data, arch, attempt == 0 ? base : mix_seed(base, 99), opts,
                                         metas[j], needs_scapegoats ? scapegoats() : nullptr, limit,
                                         loss_threshold);
          break;
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kDivergence) throw;
          if (attempt == 1) std::cerr << "warning: shadow " << job.id << " diverged twice; skipped\n";
        }
      }
      if (models[j] && sink) sink(job.id, *models[j], metas[j]);
    });
    return std::make_pair(std::move(models), std::move(metas));
  };

  auto jobs_of = [](Provenance kind, int n) {
    std::vector<ShadowJob> jobs;
    char buf[64];
    for (int i = 0; i < n; ++i) {
      std::snprintf(buf, sizeof buf, "shadow_%s_%03d", std::string(to_string(kind)).c_str(), i);
      jobs.push_back({buf, kind, i});
    }
    return jobs;
  };

  {
    auto [models, metas] = run(jobs_of(Provenance::kBenign, counts.benign), false, nullptr, 0.0);
    for (std::size_t i = 0; i < models.size(); ++i) {
      if (!models[i]) continue;
      zoo.benign.push_back(std::move(*models[i]));
      zoo.benign_meta.push_back(std::move(metas[i]));
    }
  }
  if (zoo.benign.empty()) throw Error(ErrorCode::kDivergence, "every benign shadow diverged");

  std::vector<ShadowJob> jobs = jobs_of(Provenance::kTrojM, counts.trojm);
  for (auto& j : jobs_of(Provenance::kTrojB, counts.trojb)) jobs.push_back(j);
  std::optional<attack::VarianceLimit> limit;
  double loss_threshold = 0.0;
  std::vector<ShadowJob> sgba_jobs;
  if (counts.sgba > 0) {
    std::vector<const ModelRecord*> refs;
    for (const auto& m : zoo.benign) refs.push_back(&m);
    limit = attack::make_variance_limit(attack::benign_variance_profile(refs), opts.sgba_w);
    loss_threshold = attack::default_loss_threshold(refs);
    sgba_jobs = jobs_of(Provenance::kSgba, counts.sgba);
  }
  for (auto [batch, needs] : {std::pair{&jobs, false}, std::pair{&sgba_jobs, true}}) {
    auto [models, metas] = run(*batch, needs, limit ? &*limit : nullptr, loss_threshold);
    for (std::size_t i = 0; i < models.size(); ++i) {
      if (!models[i]) continue;
      zoo.malicious.push_back(std::move(*models[i]));
      zoo.malicious_meta.push_back(std::move(metas[i]));
    }
  }
  if (zoo.malicious.empty()) throw Error(ErrorCode::kDivergence, "every malicious shadow diverged");
  return zoo;
}

// ---- MNTD-lite ----

std::string_view to_string(DetectorMode m) { return m == DetectorMode::kFull ? "full" : "robust"; }

DetectorMode detector_mode_from_string(std::string_view s) {
  if (s == "full") return DetectorMode::kFull;
  if (s == "robust") return DetectorMode::kRobust;
  throw Error(ErrorCode::kInvalidArgument, "unknown detector mode: " + std::string(s));
}

double MetaDetector::score(const ModelRecord& model) const {
  check_compatible(*this, model);
  nn::Network net(model.arch());
  const auto f = query_features(net, *this, model);
  return sigmoid(linear_score(*this, f));
}

nlohmann::json MetaDetector::metadata() const {
  return {{"mode", to_string(mode)},
          {"shape", {shape.height, shape.width, shape.channels}},
          {"num_classes", num_classes},
          {"k", k},
          {"bias", bias},
          {"threshold", threshold},
          {"seed", seed}};
}

MetaDetector init_meta_detector(const nn::ArchitectureId& arch, const DetectorOptions& opts) {
  if (opts.k <= 0) throw Error(ErrorCode::kInvalidArgument, "query set size must be positive");
  MetaDetector det;
  det.mode = opts.mode;
  det.shape = arch.input;
  det.num_classes = arch.num_classes();
  det.k = opts.k;
  det.seed = opts.seed;
  std::mt19937_64 rng(mix_seed(opts.seed, 41));
  std::uniform_real_distribution<float> u(0.f, 1.f);
  det.query_set.resize(static_cast<std::size_t>(opts.k) * det.shape.size());
  for (auto& v : det.query_set) v = u(rng);
  const std::size_t dim = static_cast<std::size_t>(opts.k) * det.num_classes;
  std::normal_distribution<float> g(0.f, 1.f / std::sqrt(static_cast<float>(opts.k)));
  det.weights.resize(dim);
  for (auto& w : det.weights) w = g(rng);
  det.bias = 0.f;
  return det;
}

double detector_loss(const MetaDetector& det, const ModelPopulation& benign, const ModelPopulation& malicious) {
  double loss = 0.0;
  std::size_t n = 0;
  for (const auto* pop : {&benign, &malicious}) {
    const double y = pop->label() == PopulationLabel::kMalicious ? 1.0 : 0.0;
    for (const auto* m : pop->records()) {
      const double p = std::clamp(det.score(*m), 1e-12, 1.0 - 1e-12);
      loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
      ++n;
    }
  }
  return loss / static_cast<double>(n);
}

double midpoint_threshold(std::span<const double> benign_scores, std::span<const double> malicious_scores) {
  return 0.5 * (stats::median(benign_scores) + stats::median(malicious_scores));
}

namespace {

void fit_detector(MetaDetector& det, const std::vector<const ModelRecord*>& benign,
                  const std::vector<const ModelRecord*>& malicious, const DetectorOptions& opts) {
  struct Sample {
    const ModelRecord* model;
    double y;
  };
  std::vector<Sample> samples;
  for (const auto* m : benign) samples.push_back({m, 0.0});
  for (const auto* m : malicious) samples.push_back({m, 1.0});
  for (const auto& s : samples) check_compatible(det, *s.model);

  nn::Network net(samples.front().model->arch());
  nn::Adam q_opt({opts.query_lr}), c_opt({opts.classifier_lr});
  std::mt19937_64 rng(mix_seed(opts.seed, 43));
  const int C = det.num_classes, K = det.k;
  std::vector<float> g_query(det.query_set.size()), g_w(det.weights.size()), g_b(1);
  std::vector<float> input_grad, logits_grad(static_cast<std::size_t>(C) * K);
  const std::size_t per_step = static_cast<std::size_t>(std::max(1, opts.models_per_step));

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(samples.begin(), samples.end(), rng);
    for (std::size_t start = 0; start < samples.size(); start += per_step) {
      const std::size_t end = std::min(samples.size(), start + per_step);
      std::fill(g_query.begin(), g_query.end(), 0.f);
      std::fill(g_w.begin(), g_w.end(), 0.f);
      g_b[0] = 0.f;
      const float inv = 1.f / static_cast<float>(end - start);
      for (std::size_t s = start; s < end; ++s) {
        std::vector<float> probs;
        const auto f = query_features(net, det, *samples[s].model, &probs);
        const double p = sigmoid(linear_score(det, f));
        if (!std::isfinite(p)) throw Error(ErrorCode::kDivergence, "detector score is not finite");
        const auto gs = static_cast<float>((p - samples[s].y) * inv);
        for (std::size_t i = 0; i < f.size(); ++i) g_w[i] += gs * f[i];
        g_b[0] += gs;
        for (int q = 0; q < K; ++q) {
          double dot = 0.0;
          for (int c = 0; c < C; ++c) dot += probs[c * K + q] * gs * det.weights[q * C + c];
          for (int c = 0; c < C; ++c) {
            const float gp = gs * det.weights[q * C + c];
            logits_grad[c * K + q] = probs[c * K + q] * (gp - static_cast<float>(dot));
          }
        }
        net.backward(logits_grad, samples[s].model->params(), nullptr, &input_grad);
        for (std::size_t i = 0; i < g_query.size(); ++i) g_query[i] += input_grad[i];
      }
      std::span<float> qv[] = {det.query_set};
      std::span<const float> qg[] = {g_query};
      q_opt.step(qv, qg);
      for (auto& v : det.query_set) v = std::clamp(v, 0.f, 1.f);
      if (det.mode == DetectorMode::kFull) {
        std::span<float> cv[] = {det.weights, {&det.bias, 1}};
        std::span<const float> cg[] = {g_w, g_b};
        c_opt.step(cv, cg);
      }
    }
  }
}

}  // namespace

MetaDetector train_meta_detector(const ModelPopulation& benign, const ModelPopulation& malicious,
                                 const DetectorOptions& opts) {
  if (benign.label() != PopulationLabel::kBenign || malicious.label() != PopulationLabel::kMalicious) {
    throw Error(ErrorCode::kInvalidArgument, "detector needs one benign and one malicious population");
  }
  if (benign.arch().name != malicious.arch().name) throw Error(ErrorCode::kShapeMismatch, "populations differ in architecture");
  if (opts.validation_fraction < 0.0 || opts.validation_fraction >= 1.0) {
    throw Error(ErrorCode::kInvalidArgument, "validation fraction must lie in [0,1)");
  }
  auto det = init_meta_detector(benign.arch(), opts);
  std::mt19937_64 rng(mix_seed(opts.seed, 47));
  Split b{benign.records(), {}}, m{malicious.records(), {}};
  if (opts.validation_fraction > 0.0) {
    if (benign.size() < 2 || malicious.size() < 2) {
      throw Error(ErrorCode::kInvalidArgument, "validation split needs two models per population");
    }
    b = split_population(benign, opts.validation_fraction, rng);
    m = split_population(malicious, opts.validation_fraction, rng);
  }
  fit_detector(det, b.train, m.train, opts);
  const auto& bv = b.validation.empty() ? b.train : b.validation;
  const auto& mv = m.validation.empty() ? m.train : m.validation;
  det.threshold = midpoint_threshold(scores_of(det, bv), scores_of(det, mv));
  return det;
}

DetectionOutcome score_model(const MetaDetector& det, const ModelRecord& model) {
  const double s = det.score(model);
  return {s, s > det.threshold, det.threshold};
}

double DetectorEnsemble::score(const ModelRecord& model) const {
  if (members.empty()) throw Error(ErrorCode::kInvalidArgument, "empty detector ensemble");
  double s = 0.0;
  for (const auto& d : members) s += d.score(model);
  return s / static_cast<double>(members.size());
}

DetectionOutcome DetectorEnsemble::outcome(const ModelRecord& model) const {
  const double s = score(model);
  return {s, s > threshold, threshold};
}

DetectorEnsemble train_detector_ensemble(const ModelPopulation& benign, const ModelPopulation& malicious,
                                         int members, const DetectorOptions& opts) {
  if (members < 1) throw Error(ErrorCode::kInvalidArgument, "ensemble needs at least one detector");
  std::mt19937_64 rng(mix_seed(opts.seed, 53));
  Split b{benign.records(), {}}, m{malicious.records(), {}};
  if (opts.validation_fraction > 0.0) {
    b = split_population(benign, opts.validation_fraction, rng);
    m = split_population(malicious, opts.validation_fraction, rng);
  }
  ModelPopulation btrain(PopulationLabel::kBenign, b.train), mtrain(PopulationLabel::kMalicious, m.train);
  DetectorEnsemble ens;
  for (int i = 0; i < members; ++i) {
    DetectorOptions o = opts;
    o.seed = mix_seed(opts.seed, 1000 + i);
    o.validation_fraction = 0.0;
    ens.members.push_back(train_meta_detector(btrain, mtrain, o));
  }
  const auto& bv = b.validation.empty() ? b.train : b.validation;
  const auto& mv = m.validation.empty() ? m.train : m.validation;
  std::vector<double> bs, ms;
  for (const auto* r : bv) bs.push_back(ens.score(*r));
  for (const auto* r : mv) ms.push_back(ens.score(*r));
  ens.threshold = midpoint_threshold(bs, ms);
  return ens;
}

void save_detector(const MetaDetector& det, const std::string& stem) {
  std::ofstream out(stem + ".arrays", std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + stem + ".arrays");
  out.write(kDetectorMagic, 4);
  const std::int32_t dims[] = {det.k, det.shape.height, det.shape.width, det.shape.channels, det.num_classes};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  out.write(reinterpret_cast<const char*>(det.query_set.data()),
            static_cast<std::streamsize>(det.query_set.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(det.weights.data()),
            static_cast<std::streamsize>(det.weights.size() * sizeof(float)));
  std::ofstream meta(stem + ".json", std::ios::trunc);
  meta << det.metadata().dump(2) << '\n';
}

MetaDetector load_detector(const std::string& stem) {
  std::ifstream in(stem + ".arrays", std::ios::binary);
  std::ifstream meta_in(stem + ".json");
  if (!in || !meta_in) throw Error(ErrorCode::kNotFound, "missing detector " + stem);
  char magic[4];
  std::int32_t dims[5];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(dims), sizeof dims);
  if (!in || !std::equal(magic, magic + 4, kDetectorMagic)) throw Error(ErrorCode::kIo, "corrupt detector " + stem);
  const auto meta = nlohmann::json::parse(meta_in);
  MetaDetector det;
  det.mode = detector_mode_from_string(meta.at("mode").get<std::string>());
  det.k = dims[0];
  det.shape = {dims[1], dims[2], dims[3]};
  det.num_classes = dims[4];
  det.bias = meta.at("bias").get<float>();
  det.threshold = meta.at("threshold").get<double>();
  det.seed = meta.at("seed").get<std::uint64_t>();
  det.query_set.resize(static_cast<std::size_t>(det.k) * det.shape.size());
  det.weights.resize(static_cast<std::size_t>(det.k) * det.num_classes);
  in.read(reinterpret_cast<char*>(det.query_set.data()), static_cast<std::streamsize>(det.query_set.size() * sizeof(float)));
  in.read(reinterpret_cast<char*>(det.weights.data()), static_cast<std::streamsize>(det.weights.size() * sizeof(float)));
  if (!in) throw Error(ErrorCode::kIo, "truncated detector " + stem);
  return det;
}

}  // namespace sgba::inspect
