#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sgba/bench.hpp"
#include "sgba/config.hpp"
#include "sgba/datasets.hpp"

namespace {

struct GlobalArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
  bool resume = false;
  bool quiet = false;
};

int fail(std::string_view code, const std::string& message) {
  std::cerr << nlohmann::json{{"error", code}, {"message", message}}.dump() << '\n';
  return 2;
}

sgba::bench::RunContext make_context(const GlobalArgs& g) {
  sgba::bench::RunContext ctx;
  ctx.cfg = g.config.empty() ? sgba::config::ExperimentConfig{} : sgba::config::load_config(g.config);
  if (g.seed) ctx.cfg.seed = *g.seed;
  if (g.workers) ctx.cfg.workers = *g.workers;
  ctx.cfg.validate();
  ctx.out = g.out;
  ctx.resume = g.resume;
  ctx.log = g.quiet ? nullptr : &std::cerr;
  return ctx;
}

void print_rates(const sgba::bench::BenchReport& rep) {
  std::cout << "detector     provenance  metric  flagged/total  rate\n";
  for (const auto& r : rep.rates) {
    std::printf("%-12s %-11s %-7s %6d/%-6d  %.3f\n", r.detector.c_str(),
                std::string(sgba::to_string(r.provenance)).c_str(),
                r.provenance == sgba::Provenance::kBenign ? "FPR" : "DR", r.flagged, r.total, r.rate());
  }
  for (const auto& a : rep.attack) {
    std::printf("%-10s n=%-3d accuracy %.4f", std::string(sgba::to_string(a.provenance)).c_str(), a.count,
                a.mean_accuracy);
    if (a.mean_asr) std::printf("  asr %.4f", *a.mean_asr);
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scapegoat backdoor attack and defense bench"};
  app.require_subcommand(1);
  GlobalArgs g;
  std::uint64_t seed = 0;
  int workers = 1;
  app.add_option("--config", g.config, "Experiment config (JSON, may include dataset profiles)");
  auto* seed_opt = app.add_option("--seed", seed, "Override the master seed");
  auto* workers_opt = app.add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory (overrides the config)");
  app.add_flag("--resume", g.resume, "Reuse artifacts whose manifests match the config hash");
  app.add_flag("-q,--quiet", g.quiet, "No progress log on stderr");

  auto* train_clean = app.add_subcommand("train-clean", "Train the benign model zoo");
  std::string reverse_id = "benign_000";
  auto* reverse = app.add_subcommand("reverse", "Derive scapegoats from a benign model");
  reverse->add_option("model_id", reverse_id, "Benign zoo model");
  auto* attack = app.add_subcommand("attack", "Train BadNets and SGBA models");
  std::string detector;
  std::vector<std::string> ids;
  std::optional<double> threshold;
  auto* inspect = app.add_subcommand("inspect", "Score zoo models with one detector");
  inspect->add_option("--detector", detector, "nc | nc-cutting | nc-hollow | variance | mntd")
      ->required()
      ->check(CLI::IsMember({"nc", "nc-cutting", "nc-hollow", "variance", "mntd"}));
  inspect->add_option("--threshold", threshold, "Decision threshold (default: calibrated)");
  inspect->add_option("model_ids", ids, "Zoo model ids (default: all)");
  auto* bench = app.add_subcommand("bench", "Run the full desk benchmark and write the report");
  auto* plots = app.add_subcommand("plots", "Redraw plots from an existing report.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("invalid_argument", e.what());
  }
  if (*seed_opt) g.seed = seed;
  if (*workers_opt) g.workers = workers;

  try {
    if (*plots) {
      const auto ctx = make_context(g);
      for (const auto& p : sgba::bench::render_plots(ctx.output_dir())) std::cout << p << '\n';
      return 0;
    }
    const auto ctx = make_context(g);
    if (*train_clean) {
      sgba::bench::cmd_train_clean(ctx);
    } else if (*reverse) {
      const auto set = sgba::bench::cmd_reverse(ctx, reverse_id);
      for (const auto& t : set.triggers) {
        const auto box = set.scapegoat_box(t.target_class);
        std::printf("class %d  l1 %.3f  efficacy %.3f  box %d,%d %dx%d\n", t.target_class, t.l1_norm, t.efficacy,
                    box.row, box.col, box.height, box.width);
      }
    } else if (*attack) {
      sgba::bench::cmd_attack(ctx);
    } else if (*inspect) {
      const auto det = sgba::bench::detector_from_string(detector);
      std::cout << "model_id,score,verdict,threshold\n";
      for (const auto& r : sgba::bench::cmd_inspect(ctx, det, ids, threshold)) {
        std::printf("%s,%.6g,%d,%.6g\n", r.model_id.c_str(), r.score, r.flagged ? 1 : 0, r.threshold);
      }
    } else if (*bench) {
      print_rates(sgba::bench::cmd_bench(ctx));
    }
  } catch (const sgba::Error& e) {
    return fail(sgba::to_string(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail("invalid_argument", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
