#pragma once
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vsc/bounds.hpp"
#include "vsc/config.hpp"
#include "vsc/nn.hpp"
#include "vsc/rng.hpp"
#include "vsc/safety.hpp"
#include "vsc/threadpool.hpp"

namespace vsc {

enum class EnvKind {
  kCorridor,          // 1-D integrator toy, exact affine dynamics
  kLaneFollowing,     // kinematic bicycle, lateral error form (x, theta, v)
  kVehicleAvoidance,  // planar bicycle (x, y, theta, v), theta from +y axis
  kQuad2d,            // planar quadrotor (x, y, theta, vx, vy, omega)
  kQuad3d,            // 12-state quadrotor with roll/pitch/yaw
};

// Everything that defines a benchmark system. Loaded from a config file;
// nothing here is hard-coded in the dynamics functions except the equations
// themselves.
struct EnvSpec {
  std::string name;
  EnvKind kind = EnvKind::kCorridor;
  int state_dim = 0;
  int action_dim = 0;
  double dt = 0.0;
  int episode_len = 0;
  Box init_region;
  SafetySpec safety;
  ActionClip clip;
  std::vector<int> goal_dims;  // dims entering the reward distance
  Vec goal;                    // target point over goal_dims
  Box sample_region;           // state sampling ranges for dataset generation
  std::vector<int> dynamics_hidden;
  double fit_rmse_limit = 0.0;
  double precision = 0.0;           // default split floor for verification
  std::vector<int> terminate_dims;  // |s_d| > terminate_abs ends the episode
  double terminate_abs = 0.0;
  std::map<std::string, double> constants;

  double constant(const std::string& key) const;
  double reward(const Vec& s) const;  // exp(-||s[goal_dims] - goal||)
  void validate() const;

  static EnvSpec from_config(const ConfigFile& cf);
};

// Reads <dir>/<name>.cfg where dir is $VSC_CONFIG_DIR if set, else the
// compiled-in config directory.
EnvSpec load_env(const std::string& name);
std::string config_dir();

Vec ode_rhs(const EnvSpec& env, const Vec& s, const Vec& a);
Vec euler_step(const EnvSpec& env, const Vec& s, const Vec& a);

// Supervised (s, a) -> s_next pairs. Rows are samples; the first train_count
// rows train and the rest validate.
struct DynamicsDataset {
  int state_dim = 0;
  int action_dim = 0;
  uint64_t seed = 0;
  Mat states, actions, labels;
  int train_count = 0;

  int count() const { return static_cast<int>(states.rows()); }
};

DynamicsDataset generate_dataset(const EnvSpec& env, int n, uint64_t seed);
void save_dataset(const DynamicsDataset& ds, const std::string& path);
DynamicsDataset load_dataset(const std::string& path);

struct FitOptions {
  int epochs = 40;
  int batch = 128;
  double lr = 1e-3;
  double lr_decay = 1.0;   // per-epoch multiplier
  int polish_steps = 2000;  // full-batch steps after the mini-batch phase
  uint64_t seed = 1;
};

struct FitResult {
  ReluNet net;
  Vec rmse_per_dim;  // validation RMSE per state dim
  double max_rmse = 0.0;
};

// Mini-batch Adam on mean squared error. Throws on NaN loss. epochs = 0
// returns the freshly initialized net so callers can measure the baseline.
FitResult fit_dynamics(const DynamicsDataset& ds, const std::vector<int>& hidden,
                       const FitOptions& opt);

// Maps an initial state to the controller that should run the episode.
// Returning nullptr means no controller covers s0.
using ControllerChooser = std::function<const ReluNet*(const Vec& s0)>;

struct EpisodeResult {
  std::vector<Vec> states;          // states[0] = s0, then one per executed step
  double total_reward = 0.0;
  std::vector<int> violation_steps;  // 1-based steps whose state violates the spec
  int steps_taken = 0;
  bool early_terminated = false;
};

// Rolls the fitted ReLU dynamics (the verified object) by iterating the
// composed closed-loop step net. Reward accrues on each post-step state.
EpisodeResult simulate_episode(const EnvSpec& env, const ReluNet& dynamics,
                               const ReluNet& controller, const Vec& s0);
// Dictionary-style source: the controller is chosen once at t=0.
EpisodeResult simulate_episode(const EnvSpec& env, const ReluNet& dynamics,
                               const ControllerChooser& choose, const Vec& s0);

// Fraction of sampled initial states whose first k steps have no violation.
// Sample i uses Rng::derive(seed, i), so the result is independent of thread
// count. A chooser returning nullptr marks that sample unsafe.
double empirical_safety(const EnvSpec& env, const ReluNet& dynamics,
                        const ControllerChooser& choose, int k, int n_samples,
                        uint64_t seed, ThreadPool* pool = nullptr);

}  // namespace vsc
