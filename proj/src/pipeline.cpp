#include "vsc/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "vsc/optim.hpp"
#include "vsc/rng.hpp"
#include "vsc/threadpool.hpp"

namespace vsc {

namespace {

std::string join(const std::string& dir, const char* leaf) { return dir + "/" + leaf; }

// Serial when workers == 0.
struct PoolHandle {
  std::optional<ThreadPool> pool;
  ThreadPool* ptr = nullptr;
  explicit PoolHandle(int workers) {
    if (workers > 0) {
      pool.emplace(workers);
      ptr = &*pool;
    }
  }
};

void ensure_dir(const std::string& dir) { std::filesystem::create_directories(dir); }

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot open for writing: " + path);
  return out;
}

ReluNet load_artifact_net(const std::string& path, const char* produced_by) {
  if (!std::filesystem::exists(path)) {
    throw std::invalid_argument(path + ": missing; run `" + produced_by + "` first");
  }
  return load_net(path);
}

std::vector<GridCell> build_grid(const RunConfig& cfg, const ClosedLoopSystem& sys) {
  return split_initial(cfg.env.init_region, cfg.hyper.grid_budget, sys, cfg.env.safety,
                       cfg.k_target);
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

RunConfig RunConfig::load(const std::string& path) {
  const ConfigFile cf = ConfigFile::parse_file(path);
  RunConfig cfg;
  cfg.env = EnvSpec::from_config(cf);
  cfg.hyper = TrainingHyper::from_config(cf);
  cfg.k_target = cf.get_int("train", "horizon");
  cfg.dataset_count = cf.get_int("dataset", "count");
  cfg.dataset_seed = cf.get_u64("dataset", "seed");
  cfg.fit.epochs = cf.get_int("dataset", "epochs");
  cfg.fit.batch = cf.get_int("dataset", "batch");
  cfg.fit.lr = cf.get_double("dataset", "lr");
  cfg.fit.seed = cf.get_u64("dataset", "fit_seed");
  cfg.bab.precision = cf.get_double("verify", "precision");
  cfg.bab.method = method_from_name(cf.get("verify", "method"));
  cfg.bab.max_cells = cf.get_int("verify", "max_cells");
  cfg.max_rounds = cf.get_int("dict", "max_rounds");
  cfg.workers = cf.get_int("run", "workers");
  cfg.seed = cf.get_u64("run", "seed");
  cfg.emp_samples = cf.get_int("run", "emp_samples");
  cfg.output_dir = cf.get("run", "output_dir");
  if (const char* env_dir = std::getenv("VSC_OUTPUT_DIR"); env_dir && *env_dir) {
    cfg.output_dir = env_dir;
  }
  cfg.validate();
  return cfg;
}

void RunConfig::validate() const {
  require(k_target >= 1, "config: [train] horizon must be >= 1");
  require(dataset_count >= 2, "config: [dataset] count must be >= 2");
  require(fit.epochs >= 0, "config: [dataset] epochs must be >= 0");
  require(fit.batch >= 1, "config: [dataset] batch must be >= 1");
  require(fit.lr > 0.0, "config: [dataset] lr must be positive");
  require(bab.precision > 0.0, "config: [verify] precision must be positive");
  require(bab.max_cells >= 0, "config: [verify] max_cells must be >= 0");
  require(max_rounds >= 1, "config: [dict] max_rounds must be >= 1");
  require(workers >= 0, "config: [run] workers must be >= 0");
  require(emp_samples >= 1, "config: [run] emp_samples must be >= 1");
  require(!output_dir.empty(), "config: [run] output_dir must be non-empty");
}

std::string RunConfig::dataset_path() const { return join(output_dir, "dataset.bin"); }
std::string RunConfig::dynamics_path() const { return join(output_dir, "dynamics.net"); }
std::string RunConfig::fit_report_path() const { return join(output_dir, "fit_report.txt"); }
std::string RunConfig::pretrained_path() const {
  return join(output_dir, "controller_pretrained.net");
}
std::string RunConfig::controller_path() const { return join(output_dir, "controller.net"); }
std::string RunConfig::train_log_path() const { return join(output_dir, "train_log.txt"); }
std::string RunConfig::certificate_path() const { return join(output_dir, "certificate.cert"); }
std::string RunConfig::dictionary_dir() const { return join(output_dir, "dictionary"); }
std::string RunConfig::simulation_path() const { return join(output_dir, "simulation.txt"); }
std::string RunConfig::report_text_path() const { return join(output_dir, "report.txt"); }
std::string RunConfig::report_csv_path() const { return join(output_dir, "report.csv"); }
std::string RunConfig::ablate_incremental_path() const {
  return join(output_dir, "ablate_incremental.csv");
}
std::string RunConfig::ablate_multi_path() const { return join(output_dir, "ablate_multi.csv"); }

std::string format_pct(double pct) {
  require(pct >= 0.0 && pct <= 100.0, "format_pct: percentage out of [0,100]");
  // Truncate, never round up: 99.997 -> 99.9. The tiny guard only absorbs
  // representation dust on values that are exact tenths.
  const long long tenths = static_cast<long long>(std::floor(pct * 10.0 + 1e-9));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%lld.%lld", tenths / 10, tenths % 10);
  return buf;
}

void MetricsReport::validate() const {
  require(k >= 1, "MetricsReport: k must be >= 1");
  require(verified_k_pct >= 0.0 && verified_k_pct <= 100.0,
          "MetricsReport: Verified-K out of [0,100]");
  require(verified_max >= 0 && verified_max <= k, "MetricsReport: Verified-Max must be in [0,K]");
  for (const auto& [h, pct] : empirical) {
    require(h >= 1, "MetricsReport: empirical horizon must be >= 1");
    require(pct >= 0.0 && pct <= 100.0, "MetricsReport: empirical percentage out of [0,100]");
  }
}

FitResult stage_fit(const RunConfig& cfg) {
  ensure_dir(cfg.output_dir);
  const DynamicsDataset ds = generate_dataset(cfg.env, cfg.dataset_count, cfg.dataset_seed);
  save_dataset(ds, cfg.dataset_path());
  FitResult fr = fit_dynamics(ds, cfg.env.dynamics_hidden, cfg.fit);
  if (fr.max_rmse > cfg.env.fit_rmse_limit) {
    throw std::runtime_error("fit-dynamics: validation RMSE " + fmt17(fr.max_rmse) +
                             " exceeds the configured limit " + fmt17(cfg.env.fit_rmse_limit));
  }
  save_net(fr.net, cfg.dynamics_path());
  std::ofstream out = open_out(cfg.fit_report_path());
  out << "env " << cfg.env.name << "\n";
  out << "samples " << ds.count() << " train " << ds.train_count << "\n";
  out << "hidden";
  for (int h : cfg.env.dynamics_hidden) out << " " << h;
  out << "\n";
  for (int d = 0; d < fr.rmse_per_dim.size(); ++d) {
    out << "rmse " << d << " " << fmt17(fr.rmse_per_dim[d]) << "\n";
  }
  out << "max_rmse " << fmt17(fr.max_rmse) << " limit " << fmt17(cfg.env.fit_rmse_limit) << "\n";
  return fr;
}

PretrainResult stage_pretrain(const RunConfig& cfg) {
  ensure_dir(cfg.output_dir);
  const ReluNet dynamics = load_artifact_net(cfg.dynamics_path(), "fit-dynamics");
  const ReluNet c0 = random_net(cfg.env.state_dim, cfg.hyper.controller_hidden,
                                cfg.env.action_dim, cfg.hyper.seed);
  PoolHandle ph(cfg.workers);
  PretrainResult pr = pretrain(cfg.env, dynamics, c0, cfg.hyper, ph.ptr);
  save_net(pr.controller, cfg.pretrained_path());
  return pr;
}

CurriculumResult stage_curriculum(const RunConfig& cfg, const PhaseLogger& logger) {
  ensure_dir(cfg.output_dir);
  const ReluNet dynamics = load_artifact_net(cfg.dynamics_path(), "fit-dynamics");
  const ReluNet c0 = load_artifact_net(cfg.pretrained_path(), "pretrain");
  PoolHandle ph(cfg.workers);
  const ClosedLoopSystem sys0(c0, dynamics, cfg.env.clip);
  const std::vector<GridCell> grid = build_grid(cfg, sys0);

  std::ofstream log = open_out(cfg.train_log_path());
  log << "k n_train l_saferl l_bound lambda unresolved buffer_cells wall_s\n";
  PhaseLogger tee = [&](const PhaseLogEntry& e) {
    log << e.k << " " << e.n_train << " " << fmt17(e.l_saferl) << " " << fmt17(e.l_bound) << " "
        << fmt17(e.lambda) << " " << e.unresolved << " " << e.buffer_cells << " " << e.wall_s
        << "\n";
    if (logger) logger(e);
  };
  CurriculumResult cr =
      curriculum_train(cfg.env, dynamics, c0, cfg.k_target, cfg.hyper, grid, ph.ptr, tee);
  save_net(cr.controller, cfg.controller_path());
  return cr;
}

Certificate stage_verify(const RunConfig& cfg) {
  ensure_dir(cfg.output_dir);
  const ReluNet dynamics = load_artifact_net(cfg.dynamics_path(), "fit-dynamics");
  const ReluNet controller = load_artifact_net(cfg.controller_path(), "curriculum");
  PoolHandle ph(cfg.workers);
  const ClosedLoopSystem sys(controller, dynamics, cfg.env.clip);
  const std::vector<GridCell> grid = build_grid(cfg, sys);
  Certificate cert = verify_horizon(sys, grid, cfg.k_target, cfg.env.safety, cfg.bab, ph.ptr);
  cert.env = cfg.env.name;
  cert.controller_id = fingerprint_hex(controller);
  save_certificate(cert, cfg.certificate_path());
  return cert;
}

SynthesisResult stage_synthesize(const RunConfig& cfg, const PhaseLogger& logger) {
  ensure_dir(cfg.output_dir);
  const ReluNet dynamics = load_artifact_net(cfg.dynamics_path(), "fit-dynamics");
  const ReluNet c0 = load_artifact_net(cfg.pretrained_path(), "pretrain");
  PoolHandle ph(cfg.workers);
  const ClosedLoopSystem sys0(c0, dynamics, cfg.env.clip);
  const std::vector<GridCell> grid = build_grid(cfg, sys0);
  SynthesisResult sr = synthesize(cfg.env, dynamics, c0, cfg.k_target, cfg.hyper, cfg.bab, grid,
                                  cfg.max_rounds, ph.ptr, logger);
  ensure_dir(cfg.dictionary_dir());
  save_dictionary(sr.dict, cfg.dictionary_dir());
  std::ofstream out = open_out(join(cfg.dictionary_dir(), "synthesis.txt"));
  out << "complete " << (sr.complete ? 1 : 0) << " rounds " << sr.rounds << " entries "
      << sr.dict.entries.size() << " residual " << sr.residual.size() << "\n";
  out << "covered " << fmt17(sr.dict.covered_fraction()) << "\n";
  for (const auto& r : sr.log) {
    out << "round " << r.round << " clusters " << r.clusters << " new_volume "
        << fmt17(r.new_volume) << " residual " << r.residual_cells << " stalled " << r.stalled
        << " halved " << r.halved << "\n";
  }
  return sr;
}

SimulationSummary stage_simulate(const RunConfig& cfg) {
  ensure_dir(cfg.output_dir);
  const ReluNet dynamics = load_artifact_net(cfg.dynamics_path(), "fit-dynamics");

  // Prefer the single trained controller; fall back to the dictionary.
  SimulationSummary sim;
  ControllerChooser choose;
  std::optional<ReluNet> single;
  std::optional<ControllerDictionary> dict;
  if (std::filesystem::exists(cfg.controller_path())) {
    single.emplace(load_net(cfg.controller_path()));
    sim.controller_id = fingerprint_hex(*single);
    const ReluNet* net = &*single;
    choose = [net](const Vec&) { return net; };
  } else if (std::filesystem::exists(join(cfg.dictionary_dir(), "manifest.txt"))) {
    dict.emplace(load_dictionary(cfg.dictionary_dir()));
    require(!dict->entries.empty(), cfg.dictionary_dir() + ": dictionary holds no entries");
    sim.controller_id = "dictionary";
    const ControllerDictionary* d = &*dict;
    choose = [d](const Vec& s0) -> const ReluNet* {
      const int i = d->lookup(s0);
      return i < 0 ? nullptr : &d->entries[i].controller;
    };
  } else {
    throw std::invalid_argument(cfg.controller_path() +
                                ": missing; run `curriculum` or `synthesize` first");
  }

  const int episodes = 10;
  for (int i = 0; i < episodes; ++i) {
    Rng rng = Rng::derive(cfg.seed, 9000 + i);
    const Vec s0 = cfg.env.init_region.sample(rng);
    const ReluNet* net = choose(s0);
    // A start no dictionary entry covers still runs, with the first entry's
    // controller, so reward stays comparable; safety metrics come from the
    // empirical sweep below, which counts uncovered starts as unsafe.
    const ReluNet& use = net ? *net : single ? *single : dict->entries.front().controller;
    EpisodeResult ep = simulate_episode(cfg.env, dynamics, use, s0);
    sim.rewards.push_back(ep.total_reward);
  }

  PoolHandle ph(cfg.workers);
  sim.samples = cfg.emp_samples;
  std::vector<int> horizons = {cfg.k_target, cfg.env.episode_len};
  if (horizons[1] == horizons[0]) horizons.pop_back();
  for (int h : horizons) {
    const double frac = empirical_safety(cfg.env, dynamics, choose, h, cfg.emp_samples,
                                         cfg.seed, ph.ptr);
    sim.safe_counts.push_back({h, std::llround(frac * cfg.emp_samples)});
  }
  save_simulation(sim, cfg.simulation_path());
  return sim;
}

void save_simulation(const SimulationSummary& s, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "SIM v1\n";
  out << "controller " << s.controller_id << "\n";
  out << "episodes " << s.rewards.size() << "\n";
  for (size_t i = 0; i < s.rewards.size(); ++i) {
    out << "reward " << i << " " << fmt17(s.rewards[i]) << "\n";
  }
  out << "samples " << s.samples << "\n";
  for (const auto& [h, n] : s.safe_counts) out << "emp " << h << " " << n << "\n";
}

SimulationSummary load_simulation(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument(path + ": missing; run `simulate` first");
  std::string line;
  auto bad = [&](const std::string& what) {
    return std::invalid_argument(path + ": malformed simulation file (" + what + ")");
  };
  if (!std::getline(in, line) || line != "SIM v1") throw bad("magic");
  SimulationSummary s;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "controller") {
      ls >> s.controller_id;
    } else if (key == "episodes" || key == "reward" || key == "samples" || key == "emp") {
      if (key == "reward") {
        size_t idx;
        double v;
        if (!(ls >> idx >> v)) throw bad("reward line");
        s.rewards.push_back(v);
      } else if (key == "samples") {
        if (!(ls >> s.samples)) throw bad("samples line");
      } else if (key == "emp") {
        int h;
        long n;
        if (!(ls >> h >> n)) throw bad("emp line");
        s.safe_counts.push_back({h, n});
      }
    } else {
      throw bad("unknown key " + key);
    }
  }
  if (s.samples <= 0 || s.safe_counts.empty()) throw bad("no empirical section");
  return s;
}

MetricsReport stage_report(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  MetricsReport rep;
  rep.k = cfg.k_target;
  rep.seed = cfg.seed;

  if (std::filesystem::exists(cfg.certificate_path())) {
    const Certificate cert = load_certificate(cfg.certificate_path());
    require(cert.horizon == cfg.k_target, "report: certificate horizon " +
                                              std::to_string(cert.horizon) +
                                              " does not match configured K " +
                                              std::to_string(cfg.k_target));
    rep.verified_k_pct = cert.safe_fraction() * 100.0;
    int vm = cert.horizon;
    for (const auto& r : cert.records) vm = std::min(vm, r.horizon);
    rep.verified_max = vm;
  } else if (std::filesystem::exists(join(cfg.dictionary_dir(), "manifest.txt"))) {
    const ControllerDictionary dict = load_dictionary(cfg.dictionary_dir());
    require(dict.horizon == cfg.k_target, "report: dictionary horizon " +
                                              std::to_string(dict.horizon) +
                                              " does not match configured K " +
                                              std::to_string(cfg.k_target));
    rep.verified_k_pct = dict.covered_fraction() * 100.0;
    rep.verified_max = rep.verified_k_pct == 100.0 ? dict.horizon : 0;
  } else {
    throw std::invalid_argument(cfg.certificate_path() +
                                ": missing; run `verify` or `synthesize` first");
  }

  const SimulationSummary sim = load_simulation(cfg.simulation_path());
  for (const auto& [h, n] : sim.safe_counts) {
    rep.empirical.push_back({h, 100.0 * static_cast<double>(n) / sim.samples});
  }
  require(!sim.rewards.empty(), "report: simulation holds no episodes");
  double mean = 0.0;
  for (double r : sim.rewards) mean += r;
  mean /= static_cast<double>(sim.rewards.size());
  double var = 0.0;
  for (double r : sim.rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(sim.rewards.size());
  rep.reward_mean = mean;
  rep.reward_std = std::sqrt(var);
  rep.validate();

  const long wall_ms = static_cast<long>(elapsed_ms(t0));
  std::ofstream txt = open_out(cfg.report_text_path());
  char line[128];
  std::snprintf(line, sizeof line, "%-14s %10s\n", "metric", "value");
  txt << line;
  std::snprintf(line, sizeof line, "%-14s %10s\n",
                ("Verified-" + std::to_string(rep.k)).c_str(),
                format_pct(rep.verified_k_pct).c_str());
  txt << line;
  std::snprintf(line, sizeof line, "%-14s %10d\n", "Verified-Max", rep.verified_max);
  txt << line;
  for (const auto& [h, pct] : rep.empirical) {
    std::snprintf(line, sizeof line, "%-14s %10s\n", ("Emp-" + std::to_string(h)).c_str(),
                  format_pct(pct).c_str());
    txt << line;
  }
  std::snprintf(line, sizeof line, "%-14s %7.3f +- %.3f\n", "Avg Reward", rep.reward_mean,
                rep.reward_std);
  txt << line;

  std::ofstream csv = open_out(cfg.report_csv_path());
  csv << "metric,value,k,seed,wall_ms\n";
  csv << "verified_k," << format_pct(rep.verified_k_pct) << "," << rep.k << "," << rep.seed << ","
      << wall_ms << "\n";
  csv << "verified_max," << rep.verified_max << "," << rep.k << "," << rep.seed << "," << wall_ms
      << "\n";
  for (const auto& [h, pct] : rep.empirical) {
    csv << "emp," << format_pct(pct) << "," << h << "," << rep.seed << "," << wall_ms << "\n";
  }
  csv << "reward_mean," << fmt17(rep.reward_mean) << "," << cfg.env.episode_len << "," << rep.seed
      << "," << wall_ms << "\n";
  csv << "reward_std," << fmt17(rep.reward_std) << "," << cfg.env.episode_len << "," << rep.seed
      << "," << wall_ms << "\n";
  return rep;
}

double time_bound_training_ms(const EnvSpec& env, const ReluNet& dynamics,
                              const ReluNet& controller, const GridCell& cell, int k, int segment,
                              int epochs, const TrainingHyper& hyper) {
  Vec params = to_param_vector(controller);
  Adam opt(static_cast<int>(params.size()), hyper.curriculum_lr);
  const std::vector<GridCell> cells = {cell};
  const MemoryBuffer buffer;
  const auto t0 = std::chrono::steady_clock::now();
  for (int e = 0; e < epochs; ++e) {
    const ReluNet net = from_param_vector(controller, params);
    const ClosedLoopSystem sys(net, dynamics, env.clip);
    BoundLossResult r =
        bound_loss_grad(sys, cells, buffer, k, env.safety, hyper.bound_clip, segment);
    opt.step(params, r.grad);
  }
  return elapsed_ms(t0);
}

std::vector<AblationRow> stage_ablate_incremental(const RunConfig& cfg) {
  ensure_dir(cfg.output_dir);
  const ReluNet dynamics = load_artifact_net(cfg.dynamics_path(), "fit-dynamics");
  const ReluNet controller = load_artifact_net(cfg.pretrained_path(), "pretrain");
  const ClosedLoopSystem sys(controller, dynamics, cfg.env.clip);
  const GridCell cell = build_grid(cfg, sys).at(0);

  const int epochs = 20;
  std::vector<AblationRow> rows;
  for (int k : {5, 10, 15, 20}) {
    AblationRow row;
    row.k = k;
    row.incremental_ms = time_bound_training_ms(cfg.env, dynamics, controller, cell, k,
                                                cfg.hyper.segment, epochs, cfg.hyper);
    row.monolithic_ms =
        time_bound_training_ms(cfg.env, dynamics, controller, cell, k, 0, epochs, cfg.hyper);
    rows.push_back(row);
  }
  std::ofstream csv = open_out(cfg.ablate_incremental_path());
  csv << "k,epochs,incremental_ms,monolithic_ms,ratio\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%d,%d,%.1f,%.1f,%.3f\n", r.k, epochs, r.incremental_ms,
                  r.monolithic_ms, r.monolithic_ms / std::max(r.incremental_ms, 1e-9));
    csv << line;
  }
  return rows;
}

MultiAblation stage_ablate_multi(const RunConfig& cfg, const PhaseLogger& logger) {
  ensure_dir(cfg.output_dir);
  const ReluNet dynamics = load_artifact_net(cfg.dynamics_path(), "fit-dynamics");
  const ReluNet c0 = load_artifact_net(cfg.pretrained_path(), "pretrain");
  PoolHandle ph(cfg.workers);
  const ClosedLoopSystem sys0(c0, dynamics, cfg.env.clip);
  const std::vector<GridCell> grid = build_grid(cfg, sys0);

  // Baseline: one controller trained over the whole grid, then verified.
  CurriculumResult single =
      curriculum_train(cfg.env, dynamics, c0, cfg.k_target, cfg.hyper, grid, ph.ptr, logger);
  const ClosedLoopSystem sys1(single.controller, dynamics, cfg.env.clip);
  Certificate cert = verify_horizon(sys1, grid, cfg.k_target, cfg.env.safety, cfg.bab, ph.ptr);

  SynthesisResult sr = synthesize(cfg.env, dynamics, c0, cfg.k_target, cfg.hyper, cfg.bab, grid,
                                  cfg.max_rounds, ph.ptr, logger);

  MultiAblation out;
  out.single_pct = cert.safe_fraction() * 100.0;
  out.dictionary_pct = sr.dict.covered_fraction() * 100.0;
  out.dictionary_entries = static_cast<int>(sr.dict.entries.size());

  std::ofstream csv = open_out(cfg.ablate_multi_path());
  csv << "approach,coverage_pct,entries,k,seed\n";
  csv << "single," << format_pct(out.single_pct) << ",1," << cfg.k_target << "," << cfg.seed
      << "\n";
  csv << "dictionary," << format_pct(out.dictionary_pct) << "," << out.dictionary_entries << ","
      << cfg.k_target << "," << cfg.seed << "\n";
  return out;
}

}  // namespace vsc
