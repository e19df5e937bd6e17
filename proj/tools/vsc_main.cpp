// Experiment driver: one subcommand per pipeline stage, all settings from a
// config file. VSC_OUTPUT_DIR overrides [run] output_dir; --seed overrides
// the run and training seeds.
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vsc/pipeline.hpp"

using namespace vsc;

namespace {

PhaseLogger progress_logger() {
  return [](const PhaseLogEntry& e) {
    if (e.n_train % 50 != 0 && e.n_train != 1) return;
    std::printf("  phase k=%d round %d: saferl %.4f bound %.6f lambda %.4f unresolved %d\n", e.k,
                e.n_train, e.l_saferl, e.l_bound, e.lambda, e.unresolved);
  };
}

int run(const std::string& cmd, const RunConfig& cfg) {
  if (cmd == "fit-dynamics") {
    FitResult fr = stage_fit(cfg);
    std::printf("fit %s: %d samples, max validation rmse %.6g (limit %.6g)\n",
                cfg.env.name.c_str(), cfg.dataset_count, fr.max_rmse, cfg.env.fit_rmse_limit);
    std::printf("wrote %s\n", cfg.dynamics_path().c_str());
  } else if (cmd == "pretrain") {
    PretrainResult pr = stage_pretrain(cfg);
    std::printf("pretrain %s: best score %.6f at step %d\n", cfg.env.name.c_str(), pr.best_score,
                pr.best_step);
    std::printf("wrote %s\n", cfg.pretrained_path().c_str());
  } else if (cmd == "curriculum") {
    CurriculumResult cr = stage_curriculum(cfg, progress_logger());
    std::printf("curriculum %s: %lld rounds over %d phases\n", cfg.env.name.c_str(),
                cr.rounds_total, cfg.k_target);
    for (size_t i = 0; i < cr.unresolved_per_phase.size(); ++i) {
      std::printf("  phase %zu unresolved cells: %d\n", i + 1, cr.unresolved_per_phase[i]);
    }
    std::printf("wrote %s\n", cfg.controller_path().c_str());
  } else if (cmd == "verify") {
    Certificate cert = stage_verify(cfg);
    std::printf("verify %s: %s%% of the initial region safe through k=%d (%zu cells)\n",
                cfg.env.name.c_str(), format_pct(cert.safe_fraction() * 100.0).c_str(),
                cert.horizon, cert.records.size());
    std::printf("wrote %s\n", cfg.certificate_path().c_str());
  } else if (cmd == "synthesize") {
    SynthesisResult sr = stage_synthesize(cfg, progress_logger());
    std::printf("synthesize %s: %s, %zu entries, %s%% covered, %zu residual cells\n",
                cfg.env.name.c_str(), sr.complete ? "complete" : "partial",
                sr.dict.entries.size(), format_pct(sr.dict.covered_fraction() * 100.0).c_str(),
                sr.residual.size());
    std::printf("wrote %s\n", cfg.dictionary_dir().c_str());
  } else if (cmd == "simulate") {
    SimulationSummary sim = stage_simulate(cfg);
    double mean = 0.0;
    for (double r : sim.rewards) mean += r;
    mean /= static_cast<double>(sim.rewards.size());
    std::printf("simulate %s: %zu episodes, mean reward %.4f\n", cfg.env.name.c_str(),
                sim.rewards.size(), mean);
    for (const auto& [h, n] : sim.safe_counts) {
      std::printf("  emp-%d: %ld/%ld safe\n", h, n, sim.samples);
    }
    std::printf("wrote %s\n", cfg.simulation_path().c_str());
  } else if (cmd == "report") {
    stage_report(cfg);
    std::FILE* f = std::fopen(cfg.report_text_path().c_str(), "rb");
    if (f) {
      char buf[4096];
      size_t n;
      while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) std::fwrite(buf, 1, n, stdout);
      std::fclose(f);
    }
    std::printf("wrote %s and %s\n", cfg.report_text_path().c_str(),
                cfg.report_csv_path().c_str());
  } else if (cmd == "ablate-incremental") {
    std::vector<AblationRow> rows = stage_ablate_incremental(cfg);
    std::printf("%-4s %16s %16s %8s\n", "k", "incremental_ms", "monolithic_ms", "ratio");
    for (const auto& r : rows) {
      std::printf("%-4d %16.1f %16.1f %8.2f\n", r.k, r.incremental_ms, r.monolithic_ms,
                  r.monolithic_ms / r.incremental_ms);
    }
    std::printf("wrote %s\n", cfg.ablate_incremental_path().c_str());
  } else {  // ablate-multi
    MultiAblation ab = stage_ablate_multi(cfg, progress_logger());
    std::printf("single controller: %s%% covered\n", format_pct(ab.single_pct).c_str());
    std::printf("dictionary (%d entries): %s%% covered\n", ab.dictionary_entries,
                format_pct(ab.dictionary_pct).c_str());
    std::printf("wrote %s\n", cfg.ablate_multi_path().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"train and verify neural controllers against fitted ReLU dynamics"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed = 0;
  app.add_option("--config", config_path, "run configuration file")
      ->required()
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "override the run and training seeds");

  const std::vector<std::pair<const char*, const char*>> commands = {
      {"fit-dynamics", "sample transitions and fit the ReLU dynamics model"},
      {"pretrain", "reward-only controller pretraining"},
      {"curriculum", "safety curriculum on the pretrained controller"},
      {"verify", "branch-and-bound reachability certificate"},
      {"synthesize", "per-cluster controller dictionary"},
      {"simulate", "episodes and empirical safety under the trained artifact"},
      {"report", "aggregate certificate and simulation into metrics"},
      {"ablate-incremental", "paired bound-training timings, checkpointed vs full"},
      {"ablate-multi", "dictionary coverage vs single-controller baseline"},
  };
  for (const auto& [name, desc] : commands) {
    app.add_subcommand(name, desc)->fallthrough();
  }

  CLI11_PARSE(app, argc, argv);

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    RunConfig cfg = RunConfig::load(config_path);
    if (app.count("--seed") > 0) {
      cfg.seed = seed;
      cfg.hyper.seed = seed;
    }
    return run(cmd, cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "vsc %s: %s\n", cmd.c_str(), e.what());
    return 1;
  }
}
