#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vsc/config.hpp"
#include "vsc/dict.hpp"
#include "vsc/env.hpp"
#include "vsc/reach.hpp"
#include "vsc/train.hpp"

namespace vsc {

// One experiment's worth of settings, read from a single config file. Every
// field must be present in the file; the shipped configs carry the defaults.
// The VSC_OUTPUT_DIR environment variable overrides [run] output_dir.
struct RunConfig {
  EnvSpec env;
  TrainingHyper hyper;
  int k_target = 0;          // [train] horizon
  int dataset_count = 0;     // [dataset] count
  uint64_t dataset_seed = 0;
  FitOptions fit;            // [dataset] epochs / batch / lr / fit_seed
  BabOptions bab;            // [verify] precision / method / max_cells
  int max_rounds = 0;        // [dict] max_rounds
  int workers = 0;           // [run] workers; 0 runs serial
  uint64_t seed = 0;         // [run] seed, mirrored into hyper.seed
  int emp_samples = 0;       // [run] emp_samples for the empirical safety sweep
  std::string output_dir;

  static RunConfig load(const std::string& path);
  void validate() const;

  // Artifact locations, all inside output_dir.
  std::string dataset_path() const;
  std::string dynamics_path() const;
  std::string fit_report_path() const;
  std::string pretrained_path() const;
  std::string controller_path() const;
  std::string train_log_path() const;
  std::string certificate_path() const;
  std::string dictionary_dir() const;
  std::string simulation_path() const;
  std::string report_text_path() const;
  std::string report_csv_path() const;
  std::string ablate_incremental_path() const;
  std::string ablate_multi_path() const;
};

// Percentage truncated (never rounded) to one decimal: 99.997 -> "99.9".
std::string format_pct(double pct);

struct MetricsReport {
  int k = 0;
  uint64_t seed = 0;
  double verified_k_pct = 0.0;  // volume % of S_0 verified through k
  int verified_max = 0;         // largest horizon fully verified by the certificate
  std::vector<std::pair<int, double>> empirical;  // (horizon, % of sampled starts safe)
  double reward_mean = 0.0;     // over the simulated episodes
  double reward_std = 0.0;

  void validate() const;
};

// Simulation artifact: raw episode rewards plus empirical safety counts, so
// the report stage can recompute its percentages from exact integers.
struct SimulationSummary {
  std::string controller_id;
  std::vector<double> rewards;
  std::vector<std::pair<int, long>> safe_counts;  // (horizon, safe samples)
  long samples = 0;                               // denominator for safe_counts
};

// Paired bound-loss training timings at one horizon.
struct AblationRow {
  int k = 0;
  double incremental_ms = 0.0;
  double monolithic_ms = 0.0;
};

// Coverage comparison between the single trained controller and the
// dictionary built from the same starting point.
struct MultiAblation {
  double single_pct = 0.0;
  double dictionary_pct = 0.0;
  int dictionary_entries = 0;
};

// Pipeline stages. Each reads its documented inputs from cfg.output_dir,
// writes its artifacts there, and returns the in-memory result. Stages throw
// std::invalid_argument / std::runtime_error with a field-level message when
// inputs are missing or malformed.
FitResult stage_fit(const RunConfig& cfg);
PretrainResult stage_pretrain(const RunConfig& cfg);
CurriculumResult stage_curriculum(const RunConfig& cfg, const PhaseLogger& logger = PhaseLogger());
Certificate stage_verify(const RunConfig& cfg);
SynthesisResult stage_synthesize(const RunConfig& cfg, const PhaseLogger& logger = PhaseLogger());
SimulationSummary stage_simulate(const RunConfig& cfg);
MetricsReport stage_report(const RunConfig& cfg);
std::vector<AblationRow> stage_ablate_incremental(const RunConfig& cfg);
MultiAblation stage_ablate_multi(const RunConfig& cfg, const PhaseLogger& logger = PhaseLogger());

// The measurement behind stage_ablate_incremental, reusable at other scales:
// wall time of `epochs` rounds of bound-loss gradient plus optimizer step on
// one cell at horizon k, with the given checkpoint segment (<= 0 disables
// checkpointing so every round retapes the whole horizon).
double time_bound_training_ms(const EnvSpec& env, const ReluNet& dynamics,
                              const ReluNet& controller, const GridCell& cell, int k, int segment,
                              int epochs, const TrainingHyper& hyper);

void save_simulation(const SimulationSummary& s, const std::string& path);
SimulationSummary load_simulation(const std::string& path);

}  // namespace vsc
