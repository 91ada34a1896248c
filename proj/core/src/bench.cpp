#include "sgba/bench.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "sgba/parallel.hpp"
#include "sgba/png.hpp"
#include "sgba/stats.hpp"

namespace sgba::bench {

namespace fs = std::filesystem;

namespace {

constexpr Detector kAllDetectors[] = {Detector::kNc, Detector::kNcCutting, Detector::kNcHollow, Detector::kVariance,
                                      Detector::kMntd};

std::string model_id(const char* prefix, int i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03d", prefix, i);
  return buf;
}

std::uint64_t salt(std::uint64_t seed, std::uint64_t role, int index) {
  return mix_seed(seed, role * 100003 + static_cast<std::uint64_t>(index));
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kNotFound, "missing artifact " + path);
  return nlohmann::json::parse(in);
}

void write_text(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << text;
}

void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

reversal::ReversalOptions reversal_options(const config::ExperimentConfig& c) {
  reversal::ReversalOptions o;
  o.lr = c.reversal.lr;
  o.batch_size = c.reversal.batch_size;
  o.init_lambda = c.reversal.init_lambda;
  o.patience = c.reversal.patience;
  o.acceptance = c.reversal.acceptance;
  o.workers = c.workers;
  return o;
}

// State shared by the commands of one invocation so that nothing is derived twice.
class Session {
 public:
  explicit Session(const RunContext& ctx)
      : ctx_(ctx), cfg_(ctx.cfg), dir_(ctx.output_dir()), hash_(ctx.cfg.hash_hex()),
        arch_(nn::find_architecture(ctx.cfg.architecture)) {
    cfg_.validate();
    fs::create_directories(dir_);
  }

  const config::ExperimentConfig& cfg() const { return cfg_; }
  const std::string& dir() const { return dir_; }
  const std::string& hash() const { return hash_; }
  const nn::ArchitectureId& arch() const { return arch_; }

  void log(const std::string& line) const {
    if (ctx_.log) *ctx_.log << line << '\n' << std::flush;
  }

  const Workspace& workspace() {
    if (!ws_) ws_ = open_workspace(ctx_);
    return *ws_;
  }

  ZooRegistry& zoo() {
    if (!zoo_) zoo_.emplace(dir_ + "/zoo", hash_);
    return *zoo_;
  }

  bool reuse(const std::string& id) { return ctx_.resume && zoo().has(id); }

  // Loads a JSON artifact when resuming and its hash matches.
  std::optional<nlohmann::json> cached(const std::string& path) const {
    if (!ctx_.resume || !fs::exists(path)) return std::nullopt;
    auto j = read_json(path);
    if (j.value("config_hash", "") != hash_) return std::nullopt;
    return j;
  }

  std::vector<ModelRecord> benign_models() {
    std::vector<ModelRecord> out;
    for (int i = 0; i < cfg_.benign_count; ++i) {
      const auto id = model_id("benign", i);
      if (!zoo().has(id)) throw Error(ErrorCode::kNotFound, "missing " + id + "; run train-clean first");
      out.push_back(zoo().load(id));
    }
    return out;
  }

  const std::vector<double>& benign_profile() {
    if (!profile_) {
      const auto benign = benign_models();
      std::vector<const ModelRecord*> refs;
      for (const auto& m : benign) refs.push_back(&m);
      profile_ = attack::benign_variance_profile(refs, cfg_.sgba.literal_sum);
      loss_threshold_ = cfg_.sgba.loss_threshold ? *cfg_.sgba.loss_threshold : attack::default_loss_threshold(refs);
    }
    return *profile_;
  }

  double loss_threshold() {
    benign_profile();
    return loss_threshold_;
  }

  const attack::ScapegoatSet& scapegoats(const std::string& source_id);
  const inspect::DetectorEnsemble& ensemble();

 private:
  const RunContext& ctx_;
  config::ExperimentConfig cfg_;
  std::string dir_;
  std::string hash_;
  nn::ArchitectureId arch_;
  std::optional<Workspace> ws_;
  std::optional<ZooRegistry> zoo_;
  std::optional<std::vector<double>> profile_;
  double loss_threshold_ = 0.0;
  std::map<std::string, attack::ScapegoatSet> scapegoats_;
  std::optional<inspect::DetectorEnsemble> ensemble_;
};

const attack::ScapegoatSet& Session::scapegoats(const std::string& source_id) {
  if (auto it = scapegoats_.find(source_id); it != scapegoats_.end()) return it->second;
  const std::string sdir = dir_ + "/scapegoats/" + source_id;
  if (auto art = cached(sdir + "/artifact.json")) {
    log("[reverse] reusing scapegoats from " + source_id);
    return scapegoats_[source_id] = attack::load_scapegoats(sdir);
  }
  const auto model = zoo().load(source_id);
  attack::ScapegoatOptions so;
  so.budget = cfg_.sgba.scapegoat_budget;
  so.retries = cfg_.sgba.scapegoat_retries;
  so.reversal = reversal_options(cfg_);
  log("[reverse] deriving scapegoats from " + source_id);
  auto set = attack::derive_scapegoats(model, workspace().holdout, salt(cfg_.seed, 30, 0), so);
  attack::save_scapegoats(set, sdir);
  for (const auto& t : set.triggers) {
    png::save_mask(t.mask, t.shape, 4, sdir + "/class_" + std::to_string(t.target_class) + "_mask.png");
  }
  write_json(sdir + "/artifact.json",
             {{"config_hash", hash_}, {"source_model", source_id}, {"hash", hex64(set.hash())}, {"seed", cfg_.seed}});
  return scapegoats_[source_id] = std::move(set);
}

inspect::ShadowOptions shadow_options(const config::ExperimentConfig& c) {
  inspect::ShadowOptions so;
  so.epochs = c.mntd.shadow_epochs;
  so.lr = c.training.lr;
  so.batch_size = c.training.batch_size;
  so.trojb_alpha = c.mntd.trojb_alpha;
  so.sgba_w = c.sgba.w;
  so.sgba_part_sizes = c.sgba.part_sizes;
  so.sgba_min_fraction = c.sgba.min_fraction;
  so.sgba_max_fraction = c.sgba.max_fraction;
  so.sgba_epochs = c.mntd.shadow_sgba_epochs;
  so.scapegoat.budget = c.sgba.scapegoat_budget;
  so.scapegoat.retries = c.sgba.scapegoat_retries;
  so.scapegoat.reversal = reversal_options(c);
  so.workers = c.workers;
  return so;
}

const inspect::DetectorEnsemble& Session::ensemble() {
  if (ensemble_) return *ensemble_;
  const auto& ws = workspace();
  const auto& c = cfg_;
  const std::string mdir = dir_ + "/mntd";
  fs::create_directories(mdir);
  ZooRegistry shadows(dir_ + "/shadows", hash_);
  // Defender shadows train on a stratified part of the pool with their own seeds.
  std::vector<std::size_t> all(ws.train.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto pick = data::stratified_select(ws.train.labels, all, c.mntd.shadow_subsample, salt(c.seed, 60, 0));
  const auto shadow_data = ws.train.subset(pick);
  auto sink = [&](const std::string& id, const ModelRecord& m, const nlohmann::json& meta) {
    shadows.put(id, m, meta);
    log("[mntd] trained " + id);
  };
  auto source = [&](const std::string& id) -> std::optional<ModelRecord> {
    if (ctx_.resume && shadows.has(id)) return shadows.load(id);
    return std::nullopt;
  };
  const auto zoo = inspect::build_shadow_zoo(
      shadow_data, ws.holdout, arch_,
      {c.mntd.shadow_benign, c.mntd.shadow_trojm, c.mntd.shadow_trojb, c.mntd.shadow_sgba}, salt(c.seed, 61, 0),
      shadow_options(c), sink, source);
  inspect::DetectorOptions d;
  d.mode = inspect::detector_mode_from_string(c.mntd.mode);
  d.k = c.mntd.k;
  d.epochs = c.mntd.epochs;
  d.query_lr = c.mntd.query_lr;
  d.classifier_lr = c.mntd.classifier_lr;
  d.seed = salt(c.seed, 62, 0);
  log("[mntd] training " + std::to_string(c.mntd.ensemble) + " detector(s)");
  ensemble_ = inspect::train_detector_ensemble(zoo.benign_population(), zoo.malicious_population(), c.mntd.ensemble, d);
  nlohmann::json members = nlohmann::json::array();
  for (std::size_t i = 0; i < ensemble_->members.size(); ++i) {
    const auto stem = mdir + "/detector_" + std::to_string(i);
    inspect::save_detector(ensemble_->members[i], stem);
    members.push_back(stem);
  }
  write_json(mdir + "/ensemble.json", {{"config_hash", hash_},
                                       {"threshold", ensemble_->threshold},
                                       {"members", members},
                                       {"shadow_zoo_hash", hex64(zoo.hash())},
                                       {"shadow_benign", zoo.benign.size()},
                                       {"shadow_malicious", zoo.malicious.size()}});
  return *ensemble_;
}

void train_benign(Session& s) {
  const auto& c = s.cfg();
  const auto& ws = s.workspace();
  parallel_for(c.benign_count, c.workers, [&](std::size_t i) {
    const auto id = model_id("benign", static_cast<int>(i));
    if (s.reuse(id)) return;
    TrainOptions to;
    to.epochs = c.training.epochs;
    to.lr = c.training.lr;
    to.batch_size = c.training.batch_size;
    to.seed = salt(c.seed, 20, static_cast<int>(i));
    to.eval = &ws.test;
    auto m = train(build_model(s.arch(), salt(c.seed, 10, static_cast<int>(i))), ws.train, to);
    s.zoo().put(id, m, {{"role", "benign"}, {"index", i}});
    s.log("[train-clean] " + id + " acc " + fmt(*m.accuracy));
  });
}

void train_attacks(Session& s) {
  const auto& c = s.cfg();
  const auto& ws = s.workspace();
  const int classes = s.arch().num_classes();
  const auto patch = attack::default_badnets_patch(ws.train.shape, c.badnets.patch_size);
  parallel_for(c.badnets.count, c.workers, [&](std::size_t i) {
    const auto id = model_id("badnets", static_cast<int>(i));
    if (s.reuse(id)) return;
    const int target = static_cast<int>(i) % classes;
    auto set = attack::build_badnets_set(ws.train, patch, target, c.badnets.fraction, salt(c.seed, 40, static_cast<int>(i)));
    TrainOptions to;
    to.epochs = c.training.epochs;
    to.lr = c.training.lr;
    to.batch_size = c.training.batch_size;
    to.seed = salt(c.seed, 41, static_cast<int>(i));
    to.provenance = Provenance::kBadNets;
    to.eval = &ws.test;
    auto m = train(build_model(s.arch(), salt(c.seed, 42, static_cast<int>(i))), set.data, to);
    const double asr = attack::patch_success_rate(m, ws.test, patch, target);
    s.zoo().put(id, m, {{"role", "badnets"}, {"target", target}, {"fraction", c.badnets.fraction},
                        {"patch_size", c.badnets.patch_size}, {"asr", asr}});
    s.log("[attack] " + id + " acc " + fmt(*m.accuracy) + " asr " + fmt(asr));
  });
  if (c.sgba.count == 0) return;

  const auto limit = attack::make_variance_limit(s.benign_profile(), c.sgba.w);
  const double loss_threshold = s.loss_threshold();
  const auto& sg = s.scapegoats(model_id("benign", 0));
  parallel_for(c.sgba.count, c.workers, [&](std::size_t i) {
    const auto id = model_id("sgba", static_cast<int>(i));
    if (s.reuse(id)) return;
    const int target = static_cast<int>(i) % classes;
    std::mt19937_64 rng(salt(c.seed, 50, static_cast<int>(i)));
    const double frac = std::uniform_real_distribution<double>(c.sgba.min_fraction, c.sgba.max_fraction)(rng);
    const auto spec = attack::make_trigger(sg, target, ws.train.shape, c.sgba.part_sizes,
                                           salt(c.seed, 51, static_cast<int>(i)));
    auto ps = attack::build_poisoned_set(ws.train, spec, sg, {frac, salt(c.seed, 52, static_cast<int>(i))});
    attack::SgbaTrainOptions so;
    so.loss_threshold = loss_threshold;
    so.max_epochs = c.sgba.max_epochs;
    so.lr = c.sgba.lr;
    so.batch_size = c.training.batch_size;
    so.eval = &ws.test;
    auto res = attack::train_sgba(s.arch(), ps.data, limit, salt(c.seed, 53, static_cast<int>(i)), so);
    const double asr = attack::attack_success_rate(res.model, ws.test, spec);
    const double ra = attack::attack_success_rate(res.model, ws.test, spec, attack::PartSelection::kPartA);
    const double rb = attack::attack_success_rate(res.model, ws.test, spec, attack::PartSelection::kPartB);
    nlohmann::json manifest = ps.manifest.to_json();
    manifest["config_hash"] = s.hash();
    manifest["trigger"] = attack::to_json(spec);
    write_json(s.dir() + "/poison/" + id + ".json", manifest);
    std::vector<std::size_t> preview;
    for (const auto& e : ps.manifest.entries) {
      if (e.kind != attack::PoisonKind::kClean && preview.size() < 24) preview.push_back(e.index);
    }
    png::save_image_grid(ps.data, preview, 8, 3, s.dir() + "/poison/" + id + ".png");
    s.zoo().put(id, res.model,
                {{"role", "sgba"},
                 {"target", target},
                 {"fraction", frac},
                 {"trigger", attack::to_json(spec)},
                 {"scapegoat_box", {sg.scapegoat_box(target).row, sg.scapegoat_box(target).col,
                                    sg.scapegoat_box(target).height, sg.scapegoat_box(target).width}},
                 {"variance_thresholds", limit.thresholds},
                 {"loss_threshold", loss_threshold},
                 {"reached_loss_threshold", res.reached_loss_threshold},
                 {"asr", asr},
                 {"part_a_rate", ra},
                 {"part_b_rate", rb}});
    s.log("[attack] " + id + " acc " + fmt(*res.model.accuracy) + " asr " + fmt(asr) + " parts " + fmt(ra) + "/" +
          fmt(rb) + (res.reached_loss_threshold ? "" : " (loss threshold not reached)"));
  });
}

// Rebuilds the random trojM patch from the rect and pattern stored in its metadata.
attack::Patch trojm_patch(const nlohmann::json& meta, const Shape& shape) {
  const auto rect = meta.at("rect").get<std::vector<int>>();
  const auto bits = meta.at("pattern").get<std::vector<float>>();
  attack::Patch p{std::vector<float>(shape.pixels(), 0.f), std::vector<float>(shape.size(), 0.f)};
  std::size_t k = 0;
  for (int r = rect[0]; r < rect[0] + rect[2]; ++r) {
    for (int c = rect[1]; c < rect[1] + rect[3]; ++c) {
      const std::size_t px = static_cast<std::size_t>(r) * shape.width + c;
      p.mask[px] = 1.f;
      for (int ch = 0; ch < shape.channels; ++ch) p.pattern[px * shape.channels + ch] = bits.at(k++);
    }
  }
  return p;
}

void train_trojm_eval(Session& s) {
  const auto& c = s.cfg();
  const auto& ws = s.workspace();
  auto so = shadow_options(c);
  so.epochs = c.training.epochs;
  parallel_for(c.mntd.eval_trojm, c.workers, [&](std::size_t i) {
    const auto id = model_id("trojm_eval", static_cast<int>(i));
    if (s.reuse(id)) return;
    nlohmann::json meta;
    auto m = inspect::train_shadow_model(Provenance::kTrojM, ws.train, s.arch(), salt(c.seed, 70, static_cast<int>(i)),
                                         so, meta);
    m.accuracy = evaluate(m, ws.test);
    meta["role"] = "trojm_eval";
    meta["asr"] = attack::patch_success_rate(m, ws.test, trojm_patch(meta, ws.test.shape), meta.at("target").get<int>());
    s.zoo().put(id, m, meta);
    s.log("[mntd] " + id + " acc " + fmt(*m.accuracy));
  });
}

// Threshold-independent score of one model under one detector, cached on disk.
Inspection inspect_one(Session& s, Detector det, const std::string& id) {
  const std::string path = s.dir() + "/inspect/" + std::string(to_string(det)) + "/" + id + ".json";
  if (auto j = s.cached(path)) return {id, j->at("score").get<double>(), false, 0.0, j->at("detail")};
  const auto& c = s.cfg();
  const auto model = s.zoo().load(id);
  const auto meta = s.zoo().meta(id);
  Inspection out{id, 0.0, false, 0.0, {}};
  const std::uint64_t seed = mix_seed(salt(c.seed, 80, static_cast<int>(det)), fnv1a(id));
  switch (det) {
    case Detector::kNc:
    case Detector::kNcCutting:
    case Detector::kNcHollow: {
      reversal::SearchRegion region = reversal::full_region();
      int budget = c.reversal.budget;
      if (det != Detector::kNc) {
        const auto& sg = s.scapegoats(model_id("benign", 0));
        const Rect box = sg.scapegoat_box(meta.value("target", 0));
        region = det == Detector::kNcCutting
                     ? reversal::cutting_region(box, s.arch().input, c.reversal.cutting_scale)
                     : reversal::hollow_region(box, s.arch().input, c.reversal.hollow_scale);
        if (det == Detector::kNcCutting) budget = c.reversal.cutting_budget;
      }
      auto opts = reversal_options(c);
      const auto rep = reversal::inspect_nc(model, s.workspace().holdout, region, 1.0, budget, seed, opts);
      out.score = rep.anomaly_index;
      auto detail = rep.to_json();
      detail.erase("threshold");
      detail.erase("verdict");
      detail.erase("flagged_class");
      detail["min_class"] = reversal::anomaly_index(rep.per_class_l1).flagged_class;
      out.detail = detail;
      const auto& t = rep.triggers[detail["min_class"].get<int>()];
      png::save_mask(t.mask, t.shape, 4,
                     s.dir() + "/inspect/" + std::string(to_string(det)) + "/" + id + "_mask.png");
      break;
    }
    case Detector::kVariance: {
      const auto v = inspect::variance_verdict(model, s.benign_profile(), c.variance_threshold);
      out.score = v.score;
      out.detail = {{"layer_variances", layer_weight_variance(model)}, {"reference", s.benign_profile()}};
      break;
    }
    case Detector::kMntd: {
      const auto& ens = s.ensemble();
      out.score = ens.score(model);
      out.detail = nlohmann::json::object();
      break;
    }
  }
  write_json(path, {{"config_hash", s.hash()}, {"model_id", id}, {"detector", to_string(det)},
                    {"score", out.score}, {"detail", out.detail}});
  return out;
}

double default_threshold(Session& s, Detector det) {
  const auto& c = s.cfg();
  switch (det) {
    case Detector::kNc:
    case Detector::kNcCutting:
    case Detector::kNcHollow:
      if (c.nc.threshold) return *c.nc.threshold;
      if (fs::exists(s.dir() + "/inspect/nc/threshold.json")) {
        const auto j = read_json(s.dir() + "/inspect/nc/threshold.json");
        if (j.value("config_hash", "") == s.hash()) return j.at("threshold").get<double>();
      }
      return 2.0;
    case Detector::kVariance:
      return c.variance_threshold;
    case Detector::kMntd:
      return s.ensemble().threshold;
  }
  return 0.0;
}

std::string csv_opt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

void plot_scores(const BenchReport& r, const std::string& detector, const std::string& path) {
  std::vector<Provenance> order = {Provenance::kBenign, Provenance::kBadNets, Provenance::kSgba, Provenance::kTrojM};
  std::vector<std::pair<int, double>> pts;
  double hi = 0.0;
  for (const auto& row : r.rows) {
    auto it = row.scores.find(detector);
    if (it == row.scores.end()) continue;
    const int col = static_cast<int>(std::find(order.begin(), order.end(), row.provenance) - order.begin());
    pts.emplace_back(col, it->second);
    hi = std::max(hi, it->second);
  }
  if (pts.empty()) return;
  auto th = r.thresholds.find(detector);
  if (th != r.thresholds.end()) hi = std::max(hi, th->second);
  hi = hi > 0 ? hi * 1.1 : 1.0;
  constexpr int kW = 480, kH = 320, kPad = 20;
  png::Canvas canvas(kW, kH);
  canvas.line(kPad, kPad, kPad, kH - kPad, png::kGrey);
  canvas.line(kPad, kH - kPad, kW - kPad, kH - kPad, png::kGrey);
  auto ypix = [&](double v) { return kH - kPad - static_cast<int>(std::lround(v / hi * (kH - 2 * kPad))); };
  if (th != r.thresholds.end()) canvas.line(kPad, ypix(th->second), kW - kPad, ypix(th->second), png::kBlack);
  const png::Rgb colors[] = {png::kBlue, png::kRed, {40, 160, 60}, {200, 140, 20}};
  std::map<int, int> seen;
  for (const auto& [col, v] : pts) {
    const int k = seen[col]++;
    const int x = kPad + 60 + col * 110 + (k * 7) % 40 - 20;
    canvas.dot(x, ypix(v), 3, colors[std::min(col, 3)]);
  }
  canvas.save(path);
}

}  // namespace

Workspace open_workspace(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  data::DataOptions opts;
  opts.root = c.dataset.root;
  opts.synthetic_train = c.dataset.synthetic_train;
  opts.synthetic_test = c.dataset.synthetic_test;
  Workspace ws;
  ws.handle = data::load_dataset(c.dataset.name, c.dataset.seed, c.dataset.subsample, opts);
  ws.holdout_handle = data::defender_holdout(ws.handle, c.dataset.holdout_fraction);
  const auto pool = data::without(ws.handle, ws.holdout_handle);
  ws.train = pool.train();
  ws.test = ws.handle.test();
  ws.holdout = ws.holdout_handle.train();
  const std::string dir = ctx.output_dir();
  write_json(dir + "/splits.json", {{"config_hash", c.hash_hex()},
                                    {"pool", data::split_manifest(pool)},
                                    {"holdout", data::split_manifest(ws.holdout_handle)}});
  return ws;
}

ZooRegistry open_zoo(const RunContext& ctx) { return {ctx.output_dir() + "/zoo", ctx.cfg.hash_hex()}; }

std::string_view to_string(Detector d) {
  switch (d) {
    case Detector::kNc: return "nc";
    case Detector::kNcCutting: return "nc-cutting";
    case Detector::kNcHollow: return "nc-hollow";
    case Detector::kVariance: return "variance";
    case Detector::kMntd: return "mntd";
  }
  return "nc";
}

Detector detector_from_string(std::string_view s) {
  for (auto d : kAllDetectors) {
    if (to_string(d) == s) return d;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown detector: " + std::string(s));
}

void cmd_train_clean(const RunContext& ctx) {
  Session s(ctx);
  train_benign(s);
}

attack::ScapegoatSet cmd_reverse(const RunContext& ctx, const std::string& id) {
  Session s(ctx);
  const auto model = s.zoo().load(id);
  if (model.provenance() != Provenance::kBenign) {
    throw Error(ErrorCode::kInvalidArgument, "scapegoats must be reversed from a benign model, " + id + " is " +
                                                 std::string(to_string(model.provenance())));
  }
  return s.scapegoats(id);
}

void cmd_attack(const RunContext& ctx) {
  Session s(ctx);
  train_attacks(s);
}

std::vector<Inspection> cmd_inspect(const RunContext& ctx, Detector det, std::vector<std::string> ids,
                                    std::optional<double> threshold) {
  Session s(ctx);
  if (ids.empty()) ids = s.zoo().ids();
  if (ids.empty()) throw Error(ErrorCode::kNotFound, "zoo " + s.zoo().dir() + " holds no models to inspect");
  const double th = threshold ? *threshold : default_threshold(s, det);
  std::vector<Inspection> out;
  for (const auto& id : ids) {
    auto r = inspect_one(s, det, id);
    r.threshold = th;
    r.flagged = r.score > th;
    s.log("[inspect] " + std::string(to_string(det)) + " " + id + " score " + fmt(r.score) +
          (r.flagged ? " flagged" : ""));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RateRow> compute_rates(const std::vector<ModelRow>& rows) {
  std::vector<RateRow> out;
  for (auto det : kAllDetectors) {
    const std::string name(to_string(det));
    for (auto p : {Provenance::kBenign, Provenance::kBadNets, Provenance::kSgba, Provenance::kTrojM}) {
      RateRow r{name, p, 0, 0};
      for (const auto& row : rows) {
        if (row.provenance != p) continue;
        auto it = row.flags.find(name);
        if (it == row.flags.end()) continue;
        ++r.total;
        r.flagged += it->second ? 1 : 0;
      }
      if (r.total > 0) out.push_back(r);
    }
  }
  return out;
}

std::vector<AttackRow> compute_attack_summary(const std::vector<ModelRow>& rows) {
  std::vector<AttackRow> out;
  for (auto p : {Provenance::kBenign, Provenance::kBadNets, Provenance::kSgba, Provenance::kTrojM}) {
    AttackRow a{p, 0, 0.0, std::nullopt};
    double asr = 0.0;
    int nasr = 0;
    for (const auto& row : rows) {
      if (row.provenance != p) continue;
      ++a.count;
      a.mean_accuracy += row.accuracy;
      if (row.asr) {
        asr += *row.asr;
        ++nasr;
      }
    }
    if (a.count == 0) continue;
    a.mean_accuracy /= a.count;
    if (nasr) a.mean_asr = asr / nasr;
    out.push_back(a);
  }
  return out;
}

const RateRow* BenchReport::rate(const std::string& detector, Provenance p) const {
  for (const auto& r : rates) {
    if (r.detector == detector && r.provenance == p) return &r;
  }
  return nullptr;
}

nlohmann::json BenchReport::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = {{"model_id", r.model_id},
                        {"provenance", to_string(r.provenance)},
                        {"target", r.target},
                        {"accuracy", r.accuracy},
                        {"scores", r.scores},
                        {"flags", r.flags}};
    j["asr"] = r.asr ? nlohmann::json(*r.asr) : nlohmann::json(nullptr);
    j["part_a_rate"] = r.part_a_rate ? nlohmann::json(*r.part_a_rate) : nlohmann::json(nullptr);
    j["part_b_rate"] = r.part_b_rate ? nlohmann::json(*r.part_b_rate) : nlohmann::json(nullptr);
    rows_j.push_back(std::move(j));
  }
  nlohmann::json rates_j = nlohmann::json::array();
  for (const auto& r : rates) {
    rates_j.push_back({{"detector", r.detector},
                       {"provenance", to_string(r.provenance)},
                       {"metric", r.provenance == Provenance::kBenign ? "FPR" : "DR"},
                       {"total", r.total},
                       {"flagged", r.flagged},
                       {"rate", r.rate()}});
  }
  nlohmann::json attack_j = nlohmann::json::array();
  for (const auto& a : attack) {
    attack_j.push_back({{"provenance", to_string(a.provenance)},
                        {"count", a.count},
                        {"mean_accuracy", a.mean_accuracy},
                        {"mean_asr", a.mean_asr ? nlohmann::json(*a.mean_asr) : nlohmann::json(nullptr)}});
  }
  return {{"config_hash", config_hash}, {"seed", seed},       {"thresholds", thresholds}, {"rows", rows_j},
          {"rates", rates_j},           {"attack", attack_j}, {"variance_gap", variance_gap}, {"plots", plots}};
}

BenchReport BenchReport::from_json(const nlohmann::json& j) {
  BenchReport r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.thresholds = j.at("thresholds").get<std::map<std::string, double>>();
  for (const auto& rj : j.at("rows")) {
    ModelRow row;
    row.model_id = rj.at("model_id").get<std::string>();
    row.provenance = provenance_from_string(rj.at("provenance").get<std::string>());
    row.target = rj.at("target").get<int>();
    row.accuracy = rj.at("accuracy").get<double>();
    if (!rj.at("asr").is_null()) row.asr = rj.at("asr").get<double>();
    if (!rj.at("part_a_rate").is_null()) row.part_a_rate = rj.at("part_a_rate").get<double>();
    if (!rj.at("part_b_rate").is_null()) row.part_b_rate = rj.at("part_b_rate").get<double>();
    row.scores = rj.at("scores").get<std::map<std::string, double>>();
    row.flags = rj.at("flags").get<std::map<std::string, bool>>();
    r.rows.push_back(std::move(row));
  }
  for (const auto& rj : j.at("rates")) {
    r.rates.push_back({rj.at("detector").get<std::string>(),
                       provenance_from_string(rj.at("provenance").get<std::string>()), rj.at("total").get<int>(),
                       rj.at("flagged").get<int>()});
  }
  for (const auto& aj : j.at("attack")) {
    AttackRow a{provenance_from_string(aj.at("provenance").get<std::string>()), aj.at("count").get<int>(),
                aj.at("mean_accuracy").get<double>(), std::nullopt};
    if (!aj.at("mean_asr").is_null()) a.mean_asr = aj.at("mean_asr").get<double>();
    r.attack.push_back(a);
  }
  r.variance_gap = j.at("variance_gap");
  r.plots = j.at("plots").get<std::vector<std::string>>();
  return r;
}

std::string BenchReport::to_csv() const {
  std::string out = "model_id,provenance,target,accuracy,asr,part_a_rate,part_b_rate";
  for (auto d : kAllDetectors) {
    out += "," + std::string(to_string(d)) + "_score," + std::string(to_string(d)) + "_flag";
  }
  out += "\n";
  for (const auto& r : rows) {
    out += r.model_id + "," + std::string(to_string(r.provenance)) + "," + std::to_string(r.target) + "," +
           fmt(r.accuracy) + "," + csv_opt(r.asr) + "," + csv_opt(r.part_a_rate) + "," + csv_opt(r.part_b_rate);
    for (auto d : kAllDetectors) {
      const std::string name(to_string(d));
      auto s = r.scores.find(name);
      auto f = r.flags.find(name);
      out += "," + (s != r.scores.end() ? fmt(s->second) : std::string()) + "," +
             (f != r.flags.end() ? std::string(f->second ? "1" : "0") : std::string());
    }
    out += "\n";
  }
  return out;
}

BenchReport cmd_bench(const RunContext& ctx) {
  Session s(ctx);
  const auto& c = s.cfg();
  train_benign(s);
  train_attacks(s);
  if (c.mntd.enabled) train_trojm_eval(s);

  std::vector<std::string> evaluated;
  for (int i = 0; i < c.nc.benign_evaluated; ++i) evaluated.push_back(model_id("benign", i));
  for (int i = 0; i < c.badnets.count; ++i) evaluated.push_back(model_id("badnets", i));
  for (int i = 0; i < c.sgba.count; ++i) evaluated.push_back(model_id("sgba", i));
  for (int i = 0; c.mntd.enabled && i < c.mntd.eval_trojm; ++i) evaluated.push_back(model_id("trojm_eval", i));

  BenchReport rep;
  rep.config_hash = s.hash();
  rep.seed = c.seed;
  for (const auto& id : evaluated) {
    ModelRow row;
    row.model_id = id;
    const auto model = s.zoo().load(id);
    const auto meta = s.zoo().meta(id);
    row.provenance = model.provenance();
    row.target = meta.value("target", -1);
    row.accuracy = model.accuracy.value_or(0.0);
    if (meta.contains("asr")) row.asr = meta.at("asr").get<double>();
    if (meta.contains("part_a_rate")) row.part_a_rate = meta.at("part_a_rate").get<double>();
    if (meta.contains("part_b_rate")) row.part_b_rate = meta.at("part_b_rate").get<double>();
    rep.rows.push_back(std::move(row));
  }

  auto score_rows = [&](Detector det, auto select) {
    const std::string name(to_string(det));
    for (auto& row : rep.rows) {
      if (!select(row)) continue;
      const auto r = inspect_one(s, det, row.model_id);
      row.scores[name] = r.score;
      s.log("[bench] " + name + " " + row.model_id + " score " + fmt(r.score));
    }
  };
  auto not_trojm = [](const ModelRow& r) { return r.provenance != Provenance::kTrojM; };
  auto only_sgba = [](const ModelRow& r) { return r.provenance == Provenance::kSgba; };

  score_rows(Detector::kNc, not_trojm);
  double nc_threshold = 2.0;
  if (c.nc.threshold) {
    nc_threshold = *c.nc.threshold;
  } else if (c.badnets.count > 0) {
    std::vector<double> b, m;
    for (const auto& row : rep.rows) {
      if (row.provenance == Provenance::kBenign) b.push_back(row.scores.at("nc"));
      if (row.provenance == Provenance::kBadNets) m.push_back(row.scores.at("nc"));
    }
    nc_threshold = reversal::calibrate_threshold(b, m);
  }
  write_json(s.dir() + "/inspect/nc/threshold.json", {{"config_hash", s.hash()}, {"threshold", nc_threshold}});
  rep.thresholds["nc"] = nc_threshold;
  if (c.nc.clipped_variants && c.sgba.count > 0) {
    score_rows(Detector::kNcCutting, only_sgba);
    score_rows(Detector::kNcHollow, only_sgba);
    rep.thresholds["nc-cutting"] = nc_threshold;
    rep.thresholds["nc-hollow"] = nc_threshold;
  }
  score_rows(Detector::kVariance, [](const ModelRow&) { return true; });
  rep.thresholds["variance"] = c.variance_threshold;
  if (c.mntd.enabled) {
    score_rows(Detector::kMntd, [](const ModelRow&) { return true; });
    rep.thresholds["mntd"] = s.ensemble().threshold;
  }
  for (auto& row : rep.rows) {
    for (const auto& [name, score] : row.scores) row.flags[name] = score > rep.thresholds.at(name);
  }
  rep.rates = compute_rates(rep.rows);
  rep.attack = compute_attack_summary(rep.rows);

  // Population variance gaps against every benign model.
  const auto benign = s.benign_models();
  std::vector<const ModelRecord*> brefs;
  for (const auto& m : benign) brefs.push_back(&m);
  const inspect::ModelPopulation bpop(inspect::PopulationLabel::kBenign, brefs);
  rep.variance_gap = nlohmann::json::object();
  for (auto [prefix, count] : {std::pair<const char*, int>{"badnets", c.badnets.count}, {"sgba", c.sgba.count}}) {
    if (count == 0) continue;
    std::vector<ModelRecord> mal;
    for (int i = 0; i < count; ++i) mal.push_back(s.zoo().load(model_id(prefix, i)));
    std::vector<const ModelRecord*> mrefs;
    for (const auto& m : mal) mrefs.push_back(&m);
    const auto gap = inspect::variance_gap_report(bpop, {inspect::PopulationLabel::kMalicious, mrefs});
    rep.variance_gap[prefix] = gap.to_json();
    write_text(s.dir() + "/variance_" + prefix + ".csv", gap.to_csv());
  }

  rep.plots.clear();
  for (const auto& [name, _] : rep.variance_gap.items()) rep.plots.push_back("variance_" + name + ".png");
  for (auto d : kAllDetectors) {
    const std::string name(to_string(d));
    bool any = false;
    for (const auto& r : rep.rows) any = any || r.scores.count(name);
    if (any) rep.plots.push_back("scores_" + name + ".png");
  }
  write_json(s.dir() + "/report.json", rep.to_json());
  write_text(s.dir() + "/report.csv", rep.to_csv());
  render_plots(s.dir());
  s.log("[bench] report written to " + s.dir() + "/report.json");
  return rep;
}

std::vector<std::string> render_plots(const std::string& dir) {
  const auto rep = BenchReport::from_json(read_json(dir + "/report.json"));
  std::vector<std::string> written;
  for (const auto& name : rep.plots) {
    const std::string path = dir + "/" + name;
    if (name.rfind("variance_", 0) == 0) {
      const std::string key = name.substr(9, name.size() - 9 - 4);
      inspect::plot_variance_distribution(inspect::VarianceGapReport::from_json(rep.variance_gap.at(key)), path);
    } else if (name.rfind("scores_", 0) == 0) {
      plot_scores(rep, name.substr(7, name.size() - 7 - 4), path);
    }
    written.push_back(path);
  }
  return written;
}

}  // namespace sgba::bench
