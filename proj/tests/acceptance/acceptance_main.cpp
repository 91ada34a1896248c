// Acceptance suite: one PASS/FAIL line per criterion.
//
// usage: sgba_acceptance <desk-config> <desk-out> <ci-config> <ci-scratch>
//
// The desk run resumes from <desk-out>, so a finished bench run there is
// reused. Criterion 10 always runs the CI profile twice from scratch.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sgba/attack.hpp"
#include "sgba/bench.hpp"
#include "sgba/config.hpp"
#include "sgba/inspectors.hpp"
#include "sgba/modelkit.hpp"
#include "sgba/reversal.hpp"

namespace {

using namespace sgba;
using namespace sgba::bench;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int digits = 4) {
  std::ostringstream o;
  o.precision(digits);
  o << v;
  return o.str();
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / v.size();
}

std::vector<const ModelRow*> rows_of(const BenchReport& rep, Provenance p) {
  std::vector<const ModelRow*> out;
  for (const auto& r : rep.rows) {
    if (r.provenance == p) out.push_back(&r);
  }
  return out;
}

struct Desk {
  RunContext ctx;
  BenchReport report;
  std::vector<ModelRecord> benign;
  std::vector<double> profile;  // V̄ per parameter layer
  std::vector<std::string> layers;
};

double benign_mean_accuracy(const Desk& d) {
  std::vector<double> acc;
  for (const auto& m : d.benign) acc.push_back(m.accuracy.value_or(0.0));
  return mean(acc);
}

Outcome badnets_baseline(const Desk& d) {
  const auto rows = rows_of(d.report, Provenance::kBadNets);
  if (rows.size() != 10) return {false, "expected 10 BadNets models, found " + std::to_string(rows.size())};
  std::vector<double> acc, asr;
  for (const auto* r : rows) {
    acc.push_back(r->accuracy);
    asr.push_back(r->asr.value_or(0.0));
  }
  const double base = benign_mean_accuracy(d);

  // Time one fresh BadNets model with the bench settings and scale to the population.
  const auto& c = d.ctx.cfg;
  const auto ws = open_workspace(d.ctx);
  const auto patch = attack::default_badnets_patch(ws.train.shape, c.badnets.patch_size);
  const auto set = attack::build_badnets_set(ws.train, patch, 0, c.badnets.fraction, 977);
  TrainOptions to;
  to.epochs = c.training.epochs;
  to.lr = c.training.lr;
  to.batch_size = c.training.batch_size;
  to.seed = 978;
  to.provenance = Provenance::kBadNets;
  const auto t0 = std::chrono::steady_clock::now();
  train(build_model(c.architecture, 979), set.data, to);
  const double one = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double minutes = one * c.badnets.count / 60.0;

  const bool pass = std::fabs(mean(acc) - base) <= 0.015 && mean(asr) >= 0.97 && minutes <= 30.0;
  return {pass, "acc " + num(mean(acc)) + " vs benign " + num(base) + ", ASR " + num(mean(asr)) + " (min " +
                    num(*std::min_element(asr.begin(), asr.end())) + "), est. training " + num(minutes, 3) +
                    " min for " + std::to_string(c.badnets.count) + " models"};
}

Outcome sgba_attack(const Desk& d) {
  const auto rows = rows_of(d.report, Provenance::kSgba);
  if (rows.size() != 10) return {false, "expected 10 SGBA models, found " + std::to_string(rows.size())};
  std::vector<double> acc, asr;
  for (const auto* r : rows) {
    acc.push_back(r->accuracy);
    asr.push_back(r->asr.value_or(0.0));
  }
  const double base = benign_mean_accuracy(d);
  const bool pass = mean(asr) >= 0.95 && mean(acc) >= base - 0.02 && d.ctx.cfg.sgba.w == 1.2;
  return {pass, "ASR " + num(mean(asr)) + " (min " + num(*std::min_element(asr.begin(), asr.end())) + "), acc " +
                    num(mean(acc)) + " vs benign " + num(base) + ", w " + num(d.ctx.cfg.sgba.w)};
}

Outcome interdependence(const Desk& d) {
  const auto rows = rows_of(d.report, Provenance::kSgba);
  if (rows.empty()) return {false, "no SGBA models"};
  int ok = 0;
  double worst = -1.0;
  std::string worst_id;
  for (const auto* r : rows) {
    const double single = std::max(r->part_a_rate.value_or(1.0), r->part_b_rate.value_or(1.0));
    const double margin = r->asr.value_or(0.0) - single;
    ok += margin >= 0.5;
    if (worst_id.empty() || margin < worst) {
      worst = margin;
      worst_id = r->model_id;
    }
  }
  return {ok == static_cast<int>(rows.size()), std::to_string(ok) + "/" + std::to_string(rows.size()) +
                                                   " models with ASR - single-part >= 0.5; smallest margin " +
                                                   num(worst) + " (" + worst_id + ")"};
}

double mean_score(const std::vector<const ModelRow*>& rows, const std::string& det) {
  std::vector<double> v;
  for (const auto* r : rows) {
    if (r->scores.count(det)) v.push_back(r->scores.at(det));
  }
  return mean(v);
}

Outcome nc_gap(const Desk& d) {
  const auto* bad = d.report.rate("nc", Provenance::kBadNets);
  const auto* sg = d.report.rate("nc", Provenance::kSgba);
  if (!bad || !sg) return {false, "missing NC rates"};
  const double ai = mean_score(rows_of(d.report, Provenance::kSgba), "nc");
  const bool pass = bad->total == 10 && sg->total == 10 && bad->rate() == 1.0 && sg->rate() <= 0.1 && ai >= 0.5 &&
                    ai <= 2.5;
  return {pass, "threshold " + num(d.report.thresholds.at("nc")) + ", BadNets DR " + num(bad->rate()) +
                    ", SGBA DR " + num(sg->rate()) + ", mean SGBA index " + num(ai) + ", mean BadNets index " +
                    num(mean_score(rows_of(d.report, Provenance::kBadNets), "nc"))};
}

Outcome clipped_nc(const Desk& d) {
  const auto rows = rows_of(d.report, Provenance::kSgba);
  const double cut = mean_score(rows, "nc-cutting");
  const double hol = mean_score(rows, "nc-hollow");
  int n = 0;
  for (const auto* r : rows) n += r->scores.count("nc-cutting") && r->scores.count("nc-hollow");
  const bool pass = !rows.empty() && n == static_cast<int>(rows.size()) && cut <= 2.0 && hol <= 2.0;
  return {pass, "mean SGBA index cutting " + num(cut) + ", hollow " + num(hol) + " over " + std::to_string(n) +
                    " models"};
}

Outcome variance_bound(const Desk& d) {
  const auto zoo = open_zoo(d.ctx);
  const auto lim = attack::make_variance_limit(d.profile, d.ctx.cfg.sgba.w);
  const auto ids = zoo.ids(Provenance::kSgba);
  int violations = 0;
  double worst = 0.0;
  for (const auto& id : ids) {
    const auto v = layer_weight_variance(zoo.load(id));
    for (std::size_t i = 0; i < v.size(); ++i) {
      violations += v[i] > lim.thresholds[i];
      worst = std::max(worst, v[i] / lim.thresholds[i]);
    }
  }
  return {!ids.empty() && violations == 0, std::to_string(ids.size()) + " models, " + std::to_string(violations) +
                                               " layer violations, max var/(w*V) " + num(worst, 8)};
}

Outcome variance_gap(const Desk& d) {
  const auto& vg = d.report.variance_gap;
  if (!vg.contains("badnets") || !vg.contains("sgba")) return {false, "variance gap reports missing"};
  const auto bad = inspect::VarianceGapReport::from_json(vg["badnets"]);
  const auto sg = inspect::VarianceGapReport::from_json(vg["sgba"]);
  const auto& out = bad.layers.back();
  const bool bad_ok = out.gap > 0.0 && out.separation.p_value < 0.05;
  bool sg_ok = sg.layers.size() == d.profile.size();
  std::ostringstream sgd;
  for (std::size_t i = 0; i < sg.layers.size() && i < d.profile.size(); ++i) {
    const double rel = std::fabs(sg.layers[i].gap) / d.profile[i];
    sg_ok = sg_ok && rel <= 0.2;
    sgd << (i ? ", " : "") << sg.layers[i].layer << " " << num(rel, 3);
  }
  return {bad_ok && sg_ok, "BadNets " + out.layer + " gap " + num(out.gap) + " (AUC " + num(out.separation.auc, 3) +
                               ", p " + num(out.separation.p_value, 3) + "); SGBA |gap|/V: " + sgd.str()};
}

Outcome mntd_ordering(const Desk& d) {
  const auto* troj = d.report.rate("mntd", Provenance::kTrojM);
  const auto* fpr = d.report.rate("mntd", Provenance::kBenign);
  const auto* sg = d.report.rate("mntd", Provenance::kSgba);
  if (!troj || !fpr || !sg) return {false, "missing MNTD rates"};
  const auto& m = d.ctx.cfg.mntd;
  const bool zoo_ok = m.shadow_sgba > 0 && m.shadow_benign + m.shadow_trojm + m.shadow_trojb + m.shadow_sgba >= 128;
  const bool pass = zoo_ok && troj->rate() >= 0.75 && fpr->rate() <= 0.2 && sg->rate() <= fpr->rate() + 0.1;
  return {pass, "trojM DR " + num(troj->rate()) + ", FPR " + num(fpr->rate()) + ", SGBA DR " + num(sg->rate()) +
                    " (shadows " + std::to_string(m.shadow_benign) + "+" +
                    std::to_string(m.shadow_trojm + m.shadow_trojb + m.shadow_sgba) + ", sgba " +
                    std::to_string(m.shadow_sgba) + ")"};
}

// Independent oracles.

double brute_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double brute_index(const std::vector<double>& l1) {
  const double med = brute_median(l1);
  std::vector<double> dev;
  for (double x : l1) dev.push_back(std::fabs(x - med));
  const double mad = brute_median(dev);
  if (mad == 0.0) return 0.0;
  return std::fabs(*std::min_element(l1.begin(), l1.end()) - med) / (1.4826 * mad);
}

bool brute_covered(const Rect& a, const Rect& b, const Rect& box, Shape s) {
  for (int r = 0; r + box.height <= s.height; ++r) {
    for (int c = 0; c + box.width <= s.width; ++c) {
      auto in = [&](const Rect& x) {
        return x.row >= r && x.col >= c && x.row + x.height <= r + box.height && x.col + x.width <= c + box.width;
      };
      if (in(a) && in(b)) return true;
    }
  }
  return false;
}

double direct_variance(const std::vector<float>& w) {
  double m = 0;
  for (float v : w) m += v;
  m /= w.size();
  double s = 0;
  for (float v : w) s += (v - m) * (v - m);
  return s / w.size();
}

Outcome oracles() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<float> u(0.f, 1.f);

  double stamp_err = 0.0;
  for (Shape s : {Shape{28, 28, 1}, Shape{32, 32, 3}}) {
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<float> x(s.size()), pat(s.size()), m(s.pixels());
      for (auto& v : x) v = u(rng);
      for (auto& v : pat) v = u(rng);
      for (auto& v : m) v = trial % 2 ? u(rng) : std::round(u(rng));
      const auto got = reversal::stamp(x, m, pat, s);
      for (std::size_t p = 0; p < s.pixels(); ++p) {
        for (int c = 0; c < s.channels; ++c) {
          const std::size_t k = p * s.channels + c;
          const double want = std::clamp((1.0 - m[p]) * x[k] + m[p] * static_cast<double>(pat[k]), 0.0, 1.0);
          stamp_err = std::max(stamp_err, std::fabs(got[k] - want));
        }
      }
    }
  }

  double ai_err = 0.0;
  std::uniform_int_distribution<int> size(3, 43);
  std::lognormal_distribution<double> l1(3.0, 0.6);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> v(size(rng));
    std::map<int, double> m;
    for (std::size_t i = 0; i < v.size(); ++i) m[static_cast<int>(i)] = v[i] = l1(rng);
    ai_err = std::max(ai_err, std::fabs(reversal::anomaly_index(m).index - brute_index(v)));
  }

  int placement_mismatch = 0;
  const Shape mnist{28, 28, 1};
  std::uniform_int_distribution<int> side(1, 6), box_side(1, 16);
  for (int trial = 0; trial < 1000; ++trial) {
    auto place = [&](int h, int w) {
      return Rect{std::uniform_int_distribution<int>(0, 28 - h)(rng), std::uniform_int_distribution<int>(0, 28 - w)(rng),
                  h, w};
    };
    attack::TriggerSpec spec;
    spec.shape = mnist;
    spec.part_a.rect = place(side(rng), side(rng));
    spec.part_b.rect = place(side(rng), side(rng));
    spec.part_a.pattern.assign(spec.part_a.rect.area(), 1.f);
    spec.part_b.pattern.assign(spec.part_b.rect.area(), 1.f);
    const Rect box{0, 0, box_side(rng), box_side(rng)};
    placement_mismatch +=
        attack::validate_placement(spec, box) == brute_covered(spec.part_a.rect, spec.part_b.rect, box, mnist);
  }

  int clip_failures = 0;
  std::uniform_int_distribution<int> len(1, 400);
  std::uniform_real_distribution<double> thr(1e-6, 1.0), scale(1e-3, 5.0), shift(-3.0, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<float> w(len(rng));
    std::normal_distribution<double> g(shift(rng), scale(rng));
    for (auto& x : w) x = static_cast<float>(g(rng));
    const double t = thr(rng);
    attack::clip_layer(w, t);
    const auto once = w;
    attack::clip_layer(w, t);
    clip_failures += direct_variance(once) > t || w != once;
  }

  const bool pass = stamp_err <= 1e-6 && ai_err <= 1e-9 && placement_mismatch == 0 && clip_failures == 0;
  return {pass, "stamp max err " + num(stamp_err, 3) + ", anomaly index max err " + num(ai_err, 3) +
                    ", placement mismatches " + std::to_string(placement_mismatch) + "/1000, clip failures " +
                    std::to_string(clip_failures) + "/1000"};
}

Outcome determinism(const std::string& ci_config, const std::string& scratch, std::ostream& log) {
  std::vector<nlohmann::json> rows;
  for (const char* leaf : {"run_a", "run_b"}) {
    const std::string dir = scratch + "/" + leaf;
    fs::remove_all(dir);
    RunContext ctx;
    ctx.cfg = config::load_config(ci_config);
    ctx.out = dir;
    ctx.log = &log;
    rows.push_back(cmd_bench(ctx).to_json()["rows"]);
  }
  return {rows[0] == rows[1] && !rows[0].empty(),
          std::to_string(rows[0].size()) + " rows, " + (rows[0] == rows[1] ? "identical" : "different")};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 5) {
    std::cerr << "usage: " << argv[0] << " <desk-config> <desk-out> <ci-config> <ci-scratch>\n";
    return 2;
  }
  fs::create_directories(argv[4]);
  std::ofstream log(std::string(argv[4]) + "/acceptance.log", std::ios::app);

  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria;
  Desk desk;
  std::string desk_error;
  try {
    desk.ctx.cfg = config::load_config(argv[1]);
    desk.ctx.out = argv[2];
    desk.ctx.resume = true;
    desk.ctx.log = &log;
    desk.report = cmd_bench(desk.ctx);
    const auto zoo = open_zoo(desk.ctx);
    for (const auto& id : zoo.ids(Provenance::kBenign)) desk.benign.push_back(zoo.load(id));
    std::vector<const ModelRecord*> refs;
    for (const auto& m : desk.benign) refs.push_back(&m);
    desk.profile = attack::benign_variance_profile(refs, desk.ctx.cfg.sgba.literal_sum);
  } catch (const std::exception& e) {
    desk_error = std::string("desk bench failed: ") + e.what();
  }

  auto on_desk = [&](Outcome (*f)(const Desk&)) {
    return [&, f] { return desk_error.empty() ? f(desk) : Outcome{false, desk_error}; };
  };
  criteria.emplace_back("BadNets baseline", on_desk(badnets_baseline));
  criteria.emplace_back("SGBA attack", on_desk(sgba_attack));
  criteria.emplace_back("Interdependence", on_desk(interdependence));
  criteria.emplace_back("NC detection gap", on_desk(nc_gap));
  criteria.emplace_back("Clipped-NC variants", on_desk(clipped_nc));
  criteria.emplace_back("Variance bound", on_desk(variance_bound));
  criteria.emplace_back("Variance gap", on_desk(variance_gap));
  criteria.emplace_back("MNTD ordering", on_desk(mntd_ordering));
  criteria.emplace_back("Oracle equivalences", [] { return oracles(); });
  criteria.emplace_back("Determinism", [&] { return determinism(argv[3], argv[4], log); });

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "CRITERION " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << " " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
