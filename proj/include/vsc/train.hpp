#pragma once
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vsc/env.hpp"
#include "vsc/reach.hpp"

namespace vsc {

// Knobs for pretraining and curriculum training. from_config reads the
// [train] section plus the incremental segment from [verify] and the run
// seed from [run]; there are no silent fallbacks for missing keys.
struct TrainingHyper {
  std::vector<int> controller_hidden;
  double gamma = 0.99;        // rollout discount, in [0, 1)
  double penalty = 10.0;      // weight on the unsafe-state penalty in rollouts
  int unroll = 25;            // rollout length for the reward objective
  int episodes_per_step = 8;  // sampled starts per gradient step
  int pretrain_steps = 300;
  double pretrain_lr = 3e-3;
  double curriculum_lr = 1e-3;
  double epsilon = 0.05;   // near-miss distance for the memory buffer
  int n_max = 200;         // gradient rounds per curriculum phase
  double lambda_max = 10.0;
  double anneal = 0.5;     // a_r in the loss mixing rule
  double bound_clip = 100.0;  // ceiling on the bound loss
  int merge_window = 5;       // buffer categories cover step-index blocks this wide
  int grid_budget = 4;        // cells the initial region is split into
  BoundMethod train_method = BoundMethod::kIbp;
  int segment = 5;    // taped suffix length for bound gradients; <= 0 tapes all steps
  uint64_t seed = 1;

  void validate() const;
  static TrainingHyper from_config(const ConfigFile& cf);
};

// min(lambda_max, anneal * l_saferl / l_bound), saturating at the cap when
// the denominator is below 1e-12. Callers drop the bound term entirely when
// its loss is exactly zero.
double mix_lambda(double l_saferl, double l_bound, const TrainingHyper& hyper);

// Near-miss cells collected at phases i1..i2, kept as an explicit cell list
// (never re-boxed into a hull) and trained against their step-i2 bounds.
struct BufferCategory {
  std::vector<GridCell> cells;
  int i1 = 1, i2 = 1;
};

struct MemoryBuffer {
  std::vector<BufferCategory> categories;  // ascending, disjoint index ranges
  int total_cells() const;
  void validate() const;
};

// Stepwise closed-loop interval rollouts per cell with their per-step safety
// costs. Rollouts extend lazily; entries are only valid for fixed controller
// parameters, so callers clear() after every update. steps_computed() counts
// interval steps ever computed (surviving clear), which makes reuse across
// phases measurable.
class RolloutCache {
 public:
  struct Entry {
    std::vector<Box> boxes;     // boxes[t-1] bounds the state after step t
    std::vector<double> costs;  // costs[t-1] = region_cost at step t
    double cost_sum(int k) const;
    bool any_unsafe(int k) const;
  };

  const Entry& extend(const ClosedLoopSystem& sys, const SafetySpec& spec,
                      const GridCell& cell, int to_step);
  void extend_all(const ClosedLoopSystem& sys, const SafetySpec& spec,
                  const std::vector<GridCell>& cells, int to_step, ThreadPool* pool);
  const Entry* find(const GridCell& cell) const;
  void clear() { entries_.clear(); }
  long long steps_computed() const { return steps_; }

 private:
  std::map<std::string, Entry> entries_;
  long long steps_ = 0;
};

// Appends the grid cells whose step-k box comes within eps of the unsafe set
// (still-unsafe cells are at distance zero, so they enter too), then merges
// categories whose step indices share a block of width merge_window into one
// category per block: i1 = min present, i2 = max present, cells deduplicated
// in first-seen order. Returns the buffer unchanged when nothing is near.
MemoryBuffer buffer_update(const MemoryBuffer& b, const std::vector<GridCell>& grid,
                           const ClosedLoopSystem& sys, int k, double eps,
                           const SafetySpec& spec, int merge_window,
                           RolloutCache* cache = nullptr);

// Unresolved-cell term (every step 1..k) plus the buffer term (step i2 of
// each member cell), clipped at `ceiling`. Zero exactly when every referenced
// bound clears the spec.
double bound_loss(const ClosedLoopSystem& sys, const std::vector<GridCell>& s_uc,
                  const MemoryBuffer& b, int k, const SafetySpec& spec, double ceiling,
                  RolloutCache* cache = nullptr);

struct BoundLossResult {
  double value = 0.0;
  Vec grad;  // d value / d controller params; zero when the ceiling binds
};

// Same value as bound_loss bit for bit. The gradient flows through a taped
// interval rollout of the last `segment` steps before each referenced bound;
// earlier steps enter as concretized constants, so the graph depth never
// exceeds the segment. segment <= 0 tapes every step. Per-cell terms are
// evaluated independently (optionally in parallel) and reduced in cell
// order, so results do not depend on scheduling.
BoundLossResult bound_loss_grad(const ClosedLoopSystem& sys,
                                const std::vector<GridCell>& s_uc, const MemoryBuffer& b,
                                int k, const SafetySpec& spec, double ceiling, int segment,
                                ThreadPool* pool = nullptr, RolloutCache* cache = nullptr);

struct RlLoss {
  double value = 0.0;  // negative mean discounted (reward - penalty * cost)
  Vec grad;
};

// Differentiable rollout objective through the fitted dynamics: per start,
// unroll steps of s' = f(s, clip(pi(s))), rewarded by the env goal distance
// and penalized by the pointwise safety cost. Minimizing this loss is
// gradient ascent on the discounted return.
RlLoss saferl_loss_grad(const EnvSpec& env, const ClosedLoopSystem& sys,
                        const TrainingHyper& hyper, const std::vector<Vec>& starts,
                        ThreadPool* pool = nullptr);

// Untaped value of the same objective, positive-is-better.
double rollout_score(const EnvSpec& env, const ClosedLoopSystem& sys,
                     const TrainingHyper& hyper, const std::vector<Vec>& starts);

// Volume-weighted uniform sample over a union of cells (uniform over the
// underlying region; cell volumes are the exact dyadic fractions).
std::vector<Vec> sample_starts(const std::vector<GridCell>& cells, int n, Rng& rng);

struct PretrainResult {
  ReluNet controller;
  double best_score = 0.0;
  int best_step = 0;  // 0 means the initial parameters scored best
  std::vector<double> score_trace;
};

// Adam ascent on the rollout objective, batched over starts sampled from the
// initial region. Keeps whichever parameters score best on a fixed
// evaluation batch. Deterministic under hyper.seed; divergence throws.
PretrainResult pretrain(const EnvSpec& env, const ReluNet& dynamics,
                        const ReluNet& controller0, const TrainingHyper& hyper,
                        ThreadPool* pool = nullptr);

struct PhaseLogEntry {
  int k = 0;
  int n_train = 0;
  double l_saferl = 0.0;
  double l_bound = 0.0;
  double lambda = 0.0;
  int unresolved = 0;  // |S_uc| after this round
  int buffer_cells = 0;
  double wall_s = 0.0;  // excluded from reproducibility comparisons
};
using PhaseLogger = std::function<void(const PhaseLogEntry&)>;

struct CurriculumResult {
  ReluNet controller;
  MemoryBuffer buffer;
  std::vector<PhaseLogEntry> log;  // one entry per round; one for no-op phases
  std::vector<int> unresolved_per_phase;
  long long rounds_total = 0;
};

// Phase k = 1..K: collect the cells whose 1..k-step interval bounds touch the
// spec, then take one optimizer step per round on saferl + lambda * bound
// loss until they clear or n_max rounds pass. Exhausting n_max with cells
// left is recorded, not an error; the phase advances regardless. Each phase
// ends by folding near-miss cells into the memory buffer. Bounds are reused
// across phases through the rollout cache whenever the parameters are
// unchanged.
CurriculumResult curriculum_train(const EnvSpec& env, const ReluNet& dynamics,
                                  const ReluNet& controller0, int K,
                                  const TrainingHyper& hyper,
                                  const std::vector<GridCell>& grid,
                                  ThreadPool* pool = nullptr,
                                  const PhaseLogger& logger = PhaseLogger());

}  // namespace vsc
