#include "vsc/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <stdexcept>

#include "vsc/optim.hpp"
#include "vsc/safety.hpp"
#include "vsc/tape.hpp"

namespace vsc {

namespace {

// Disjoint RNG streams; the offsets just keep sub-task generators apart.
constexpr uint64_t kStreamPretrainEval = 0x9E7EA1ULL;
constexpr uint64_t kStreamPretrainStep = 0x9E50000000ULL;
constexpr uint64_t kStreamCurriculum = 0xC10000000000ULL;

uint64_t round_stream(int k, int n_train) {
  return kStreamCurriculum + (static_cast<uint64_t>(k) << 24) + static_cast<uint64_t>(n_train);
}

}  // namespace

void TrainingHyper::validate() const {
  require(!controller_hidden.empty(), "TrainingHyper: controller_hidden is empty");
  for (int w : controller_hidden) require(w >= 1, "TrainingHyper: controller width < 1");
  require(gamma >= 0.0 && gamma < 1.0, "TrainingHyper: gamma must be in [0, 1)");
  require(penalty >= 0.0, "TrainingHyper: penalty must be >= 0");
  require(unroll >= 1, "TrainingHyper: unroll must be >= 1");
  require(episodes_per_step >= 1, "TrainingHyper: episodes_per_step must be >= 1");
  require(pretrain_steps >= 0, "TrainingHyper: pretrain_steps must be >= 0");
  require(pretrain_lr >= 0.0, "TrainingHyper: pretrain_lr must be >= 0");
  require(curriculum_lr >= 0.0, "TrainingHyper: curriculum_lr must be >= 0");
  require(epsilon >= 0.0, "TrainingHyper: epsilon must be >= 0");
  require(n_max >= 1, "TrainingHyper: n_max must be >= 1");
  require(lambda_max > 0.0, "TrainingHyper: lambda_max must be > 0");
  require(anneal > 0.0, "TrainingHyper: anneal must be > 0");
  require(bound_clip > 0.0, "TrainingHyper: bound_clip must be > 0");
  require(merge_window >= 1, "TrainingHyper: merge_window must be >= 1");
  require(grid_budget >= 1, "TrainingHyper: grid_budget must be >= 1");
  require(train_method == BoundMethod::kIbp,
          "TrainingHyper: gradients flow through the stepwise interval path; "
          "set train_method = ibp (crown is for verification)");
}

TrainingHyper TrainingHyper::from_config(const ConfigFile& cf) {
  TrainingHyper h;
  h.controller_hidden = cf.get_ints("train", "controller_hidden");
  h.gamma = cf.get_double("train", "gamma");
  h.penalty = cf.get_double("train", "penalty");
  h.unroll = cf.get_int("train", "unroll");
  h.episodes_per_step = cf.get_int("train", "episodes_per_step");
  h.pretrain_steps = cf.get_int("train", "pretrain_steps");
  h.pretrain_lr = cf.get_double("train", "pretrain_lr");
  h.curriculum_lr = cf.get_double("train", "curriculum_lr");
  h.epsilon = cf.get_double("train", "epsilon");
  h.n_max = cf.get_int("train", "n_max");
  h.lambda_max = cf.get_double("train", "lambda_max");
  h.anneal = cf.get_double("train", "anneal");
  h.bound_clip = cf.get_double("train", "bound_clip");
  h.merge_window = cf.get_int("train", "merge_window");
  h.grid_budget = cf.get_int("train", "grid_budget");
  h.train_method = method_from_name(cf.get("train", "train_method"));
  h.segment = cf.get_int("verify", "segment");
  h.seed = cf.get_u64("run", "seed");
  h.validate();
  return h;
}

double mix_lambda(double l_saferl, double l_bound, const TrainingHyper& hyper) {
  if (l_bound < 1e-12) return hyper.lambda_max;
  return std::min(hyper.lambda_max, hyper.anneal * l_saferl / l_bound);
}

int MemoryBuffer::total_cells() const {
  int n = 0;
  for (const auto& cat : categories) n += static_cast<int>(cat.cells.size());
  return n;
}

void MemoryBuffer::validate() const {
  int prev = 0;
  for (const auto& cat : categories) {
    require(!cat.cells.empty(), "MemoryBuffer: category with no cells");
    require(cat.i1 >= 1 && cat.i1 <= cat.i2, "MemoryBuffer: bad category index range");
    require(cat.i1 > prev, "MemoryBuffer: categories overlap or are out of order");
    prev = cat.i2;
  }
}

double RolloutCache::Entry::cost_sum(int k) const {
  double total = 0.0;
  for (int t = 1; t <= k; ++t) total += costs[static_cast<size_t>(t - 1)];
  return total;
}

bool RolloutCache::Entry::any_unsafe(int k) const {
  for (int t = 1; t <= k; ++t) {
    if (costs[static_cast<size_t>(t - 1)] > 0.0) return true;
  }
  return false;
}

const RolloutCache::Entry& RolloutCache::extend(const ClosedLoopSystem& sys,
                                                const SafetySpec& spec, const GridCell& cell,
                                                int to_step) {
  Entry& e = entries_[cell.id()];
  Box cur = e.boxes.empty() ? cell.box : e.boxes.back();
  while (static_cast<int>(e.boxes.size()) < to_step) {
    cur = closed_loop_ibp_step(sys, cur);
    const int t = static_cast<int>(e.boxes.size()) + 1;
    e.boxes.push_back(cur);
    e.costs.push_back(region_cost(cur, spec, t));
    ++steps_;
  }
  return e;
}

void RolloutCache::extend_all(const ClosedLoopSystem& sys, const SafetySpec& spec,
                              const std::vector<GridCell>& cells, int to_step,
                              ThreadPool* pool) {
  const int n = static_cast<int>(cells.size());
  if (!pool || pool->workers() <= 1 || n <= 1) {
    for (const auto& c : cells) extend(sys, spec, c, to_step);
    return;
  }
  std::vector<Entry> fresh(static_cast<size_t>(n));
  std::vector<long long> added(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    auto it = entries_.find(cells[static_cast<size_t>(i)].id());
    if (it != entries_.end()) fresh[static_cast<size_t>(i)] = it->second;
  }
  pool->parallel_for(n, [&](int i) {
    Entry& e = fresh[static_cast<size_t>(i)];
    Box cur = e.boxes.empty() ? cells[static_cast<size_t>(i)].box : e.boxes.back();
    while (static_cast<int>(e.boxes.size()) < to_step) {
      cur = closed_loop_ibp_step(sys, cur);
      const int t = static_cast<int>(e.boxes.size()) + 1;
      e.boxes.push_back(cur);
      e.costs.push_back(region_cost(cur, spec, t));
      ++added[static_cast<size_t>(i)];
    }
  });
  for (int i = 0; i < n; ++i) {
    entries_[cells[static_cast<size_t>(i)].id()] = std::move(fresh[static_cast<size_t>(i)]);
    steps_ += added[static_cast<size_t>(i)];
  }
}

const RolloutCache::Entry* RolloutCache::find(const GridCell& cell) const {
  auto it = entries_.find(cell.id());
  return it == entries_.end() ? nullptr : &it->second;
}

MemoryBuffer buffer_update(const MemoryBuffer& b, const std::vector<GridCell>& grid,
                           const ClosedLoopSystem& sys, int k, double eps,
                           const SafetySpec& spec, int merge_window, RolloutCache* cache) {
  require(k >= 1, "buffer_update: k must be >= 1");
  require(merge_window >= 1, "buffer_update: merge_window must be >= 1");
  RolloutCache local;
  RolloutCache& rc = cache ? *cache : local;
  std::vector<GridCell> near;
  for (const auto& cell : grid) {
    const auto& e = rc.extend(sys, spec, cell, k);
    if (distance_to_unsafe(e.boxes[static_cast<size_t>(k - 1)], spec, k) < eps) {
      near.push_back(cell);
    }
  }
  if (near.empty()) return b;

  std::vector<BufferCategory> all = b.categories;
  all.push_back(BufferCategory{std::move(near), k, k});

  // One category per block of merge_window step indices: blocks [1..W],
  // [W+1..2W], ... so indices 3 and 5 with W = 5 collapse to (3, 5).
  std::map<int, BufferCategory> blocks;
  for (auto& cat : all) {
    const int w = (cat.i2 - 1) / merge_window;
    auto it = blocks.find(w);
    if (it == blocks.end()) {
      blocks.emplace(w, std::move(cat));
    } else {
      it->second.i1 = std::min(it->second.i1, cat.i1);
      it->second.i2 = std::max(it->second.i2, cat.i2);
      for (auto& c : cat.cells) it->second.cells.push_back(std::move(c));
    }
  }
  MemoryBuffer out;
  for (auto& [w, cat] : blocks) {
    (void)w;
    std::set<std::string> seen;
    BufferCategory dedup;
    dedup.i1 = cat.i1;
    dedup.i2 = cat.i2;
    for (auto& c : cat.cells) {
      if (seen.insert(c.id()).second) dedup.cells.push_back(std::move(c));
    }
    out.categories.push_back(std::move(dedup));
  }
  out.validate();
  return out;
}

double bound_loss(const ClosedLoopSystem& sys, const std::vector<GridCell>& s_uc,
                  const MemoryBuffer& b, int k, const SafetySpec& spec, double ceiling,
                  RolloutCache* cache) {
  require(k >= 1, "bound_loss: k must be >= 1");
  require(ceiling > 0.0, "bound_loss: ceiling must be > 0");
  RolloutCache local;
  RolloutCache& rc = cache ? *cache : local;
  double raw = 0.0;
  for (const auto& cell : s_uc) {
    const auto& e = rc.extend(sys, spec, cell, k);
    raw += e.cost_sum(k);
  }
  for (const auto& cat : b.categories) {
    for (const auto& cell : cat.cells) {
      const auto& e = rc.extend(sys, spec, cell, cat.i2);
      raw += e.costs[static_cast<size_t>(cat.i2 - 1)];
    }
  }
  return std::min(raw, ceiling);
}

BoundLossResult bound_loss_grad(const ClosedLoopSystem& sys, const std::vector<GridCell>& s_uc,
                                const MemoryBuffer& b, int k, const SafetySpec& spec,
                                double ceiling, int segment, ThreadPool* pool,
                                RolloutCache* cache) {
  require(k >= 1, "bound_loss_grad: k must be >= 1");
  require(ceiling > 0.0, "bound_loss_grad: ceiling must be > 0");
  const int pdim = sys.controller.param_count();
  RolloutCache local;
  RolloutCache& rc = cache ? *cache : local;

  // The taped suffix re-derives steps cut+1..t_end; everything earlier comes
  // from the cache as constants, so each job is self-contained and the
  // parallel section never touches shared state.
  struct Job {
    Box seed;
    int cut = 0;
    int t_end = 0;
    bool all_steps = false;
    std::vector<double> prefix_costs;
  };
  std::vector<Job> jobs;
  auto prep = [&](const GridCell& cell, int t_end, bool all_steps) {
    Job j;
    j.t_end = t_end;
    j.all_steps = all_steps;
    j.cut = segment <= 0 ? 0 : std::max(0, t_end - segment);
    if (j.cut > 0) {
      const auto& e = rc.extend(sys, spec, cell, j.cut);
      j.seed = e.boxes[static_cast<size_t>(j.cut - 1)];
      if (all_steps) {
        j.prefix_costs.assign(e.costs.begin(), e.costs.begin() + j.cut);
      }
    } else {
      j.seed = cell.box;
    }
    jobs.push_back(std::move(j));
  };
  for (const auto& cell : s_uc) prep(cell, k, true);
  for (const auto& cat : b.categories) {
    for (const auto& cell : cat.cells) prep(cell, cat.i2, false);
  }
  if (jobs.empty()) return BoundLossResult{0.0, Vec::Zero(pdim)};

  const int n = static_cast<int>(jobs.size());
  std::vector<double> vals(static_cast<size_t>(n), 0.0);
  std::vector<Vec> grads(static_cast<size_t>(n));
  auto run = [&](int i) {
    const Job& j = jobs[static_cast<size_t>(i)];
    Tape t;
    TapedSystem ts = register_system(t, sys, true);
    IntervalNodes iv{t.constant(j.seed.lb), t.constant(j.seed.ub)};
    std::vector<NodeId> terms;
    for (double c : j.prefix_costs) terms.push_back(t.constant(Vec::Constant(1, c)));
    for (int step = j.cut + 1; step <= j.t_end; ++step) {
      iv = taped_step_interval(t, ts, iv);
      if (j.all_steps || step == j.t_end) {
        terms.push_back(taped_region_cost(t, iv, spec, step));
      }
    }
    const NodeId total = terms.size() == 1 ? terms[0] : t.sum_of(terms);
    vals[static_cast<size_t>(i)] = t.value(total)[0];
    grads[static_cast<size_t>(i)] = t.gradient(total);
  };
  if (pool && pool->workers() > 1 && n > 1) {
    pool->parallel_for(n, run);
  } else {
    for (int i = 0; i < n; ++i) run(i);
  }

  double raw = 0.0;
  Vec g = Vec::Zero(pdim);
  for (int i = 0; i < n; ++i) {
    raw += vals[static_cast<size_t>(i)];
    g += grads[static_cast<size_t>(i)];
  }
  require(std::isfinite(raw), "bound_loss_grad: non-finite loss");
  BoundLossResult out;
  out.value = std::min(raw, ceiling);
  // min passes the gradient through on ties, matching the tape convention.
  out.grad = raw > ceiling ? Vec::Zero(pdim) : std::move(g);
  if (!out.grad.allFinite()) throw std::runtime_error("bound_loss_grad: non-finite gradient");
  return out;
}

namespace {

struct EpisodeGrad {
  double loss = 0.0;
  Vec grad;
};

EpisodeGrad episode_loss_grad(const EnvSpec& env, const ClosedLoopSystem& sys,
                              const TrainingHyper& hyper, const Vec& s0) {
  Tape t;
  TapedSystem ts = register_system(t, sys, true);
  NodeId x = t.constant(s0);
  std::vector<NodeId> terms;
  double disc = 1.0;
  for (int step = 1; step <= hyper.unroll; ++step) {
    x = taped_step_point(t, ts, x);
    const NodeId d = t.sub(t.gather(x, env.goal_dims), t.constant(env.goal));
    const NodeId r = t.vexp(t.neg(t.vsqrt(t.sum(t.mul(d, d)))));
    NodeId term = t.scale(r, disc);
    if (env.safety.constraint_count() > 0 && hyper.penalty > 0.0) {
      const NodeId c = taped_region_cost(t, IntervalNodes{x, x}, env.safety, step);
      term = t.sub(term, t.scale(c, disc * hyper.penalty));
    }
    terms.push_back(term);
    disc *= hyper.gamma;
  }
  const NodeId objective = terms.size() == 1 ? terms[0] : t.sum_of(terms);
  const NodeId loss = t.neg(objective);
  EpisodeGrad out;
  out.loss = t.value(loss)[0];
  out.grad = t.gradient(loss);
  return out;
}

}  // namespace

RlLoss saferl_loss_grad(const EnvSpec& env, const ClosedLoopSystem& sys,
                        const TrainingHyper& hyper, const std::vector<Vec>& starts,
                        ThreadPool* pool) {
  require(!starts.empty(), "saferl_loss_grad: no starts");
  const int n = static_cast<int>(starts.size());
  std::vector<EpisodeGrad> eg(static_cast<size_t>(n));
  auto run = [&](int i) {
    eg[static_cast<size_t>(i)] = episode_loss_grad(env, sys, hyper, starts[static_cast<size_t>(i)]);
  };
  if (pool && pool->workers() > 1 && n > 1) {
    pool->parallel_for(n, run);
  } else {
    for (int i = 0; i < n; ++i) run(i);
  }
  RlLoss out;
  out.grad = Vec::Zero(eg[0].grad.size());
  double v = 0.0;
  for (int i = 0; i < n; ++i) {
    v += eg[static_cast<size_t>(i)].loss;
    out.grad += eg[static_cast<size_t>(i)].grad;
  }
  const double inv = 1.0 / n;
  out.value = v * inv;
  out.grad *= inv;
  if (!std::isfinite(out.value) || !out.grad.allFinite()) {
    throw std::runtime_error("saferl_loss_grad: objective diverged (non-finite loss/grad)");
  }
  return out;
}

double rollout_score(const EnvSpec& env, const ClosedLoopSystem& sys,
                     const TrainingHyper& hyper, const std::vector<Vec>& starts) {
  require(!starts.empty(), "rollout_score: no starts");
  double total = 0.0;
  for (const auto& s0 : starts) {
    Vec x = s0;
    double disc = 1.0;
    for (int step = 1; step <= hyper.unroll; ++step) {
      const Vec a = sys.clip.apply(sys.controller.forward(x));
      Vec xa(x.size() + a.size());
      xa << x, a;
      x = sys.dynamics.forward(xa);
      double term = env.reward(x);
      if (env.safety.constraint_count() > 0 && hyper.penalty > 0.0) {
        term -= hyper.penalty * region_cost(Box(x, x), env.safety, step);
      }
      total += disc * term;
      disc *= hyper.gamma;
    }
  }
  return total / static_cast<double>(starts.size());
}

std::vector<Vec> sample_starts(const std::vector<GridCell>& cells, int n, Rng& rng) {
  require(!cells.empty(), "sample_starts: no cells");
  require(n >= 1, "sample_starts: n must be >= 1");
  std::vector<double> cum(cells.size());
  double acc = 0.0;
  for (size_t i = 0; i < cells.size(); ++i) {
    acc += std::ldexp(1.0, -cells[i].depth());
    cum[i] = acc;
  }
  std::vector<Vec> out;
  out.reserve(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    const double u = rng.uniform() * acc;
    size_t i = static_cast<size_t>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
    if (i >= cells.size()) i = cells.size() - 1;
    out.push_back(cells[i].box.sample(rng));
  }
  return out;
}

PretrainResult pretrain(const EnvSpec& env, const ReluNet& dynamics, const ReluNet& controller0,
                        const TrainingHyper& hyper, ThreadPool* pool) {
  hyper.validate();
  require(controller0.input_dim() == env.state_dim &&
              controller0.output_dim() == env.action_dim,
          "pretrain: controller dims do not match the env");
  require(dynamics.input_dim() == env.state_dim + env.action_dim &&
              dynamics.output_dim() == env.state_dim,
          "pretrain: dynamics dims do not match the env");

  Rng eval_rng = Rng::derive(hyper.seed, kStreamPretrainEval);
  std::vector<Vec> eval_starts;
  eval_starts.reserve(static_cast<size_t>(hyper.episodes_per_step));
  for (int i = 0; i < hyper.episodes_per_step; ++i) {
    eval_starts.push_back(env.init_region.sample(eval_rng));
  }

  const ReluNet arch = controller0;
  Vec theta = to_param_vector(controller0);
  Adam opt(static_cast<int>(theta.size()), hyper.pretrain_lr);

  PretrainResult out{controller0, 0.0, 0, {}};
  out.best_score =
      rollout_score(env, ClosedLoopSystem(controller0, dynamics, env.clip), hyper, eval_starts);
  out.score_trace.reserve(static_cast<size_t>(hyper.pretrain_steps));

  for (int step = 1; step <= hyper.pretrain_steps; ++step) {
    Rng rng = Rng::derive(hyper.seed, kStreamPretrainStep + static_cast<uint64_t>(step));
    std::vector<Vec> starts;
    starts.reserve(static_cast<size_t>(hyper.episodes_per_step));
    for (int i = 0; i < hyper.episodes_per_step; ++i) {
      starts.push_back(env.init_region.sample(rng));
    }
    const ClosedLoopSystem sys(from_param_vector(arch, theta), dynamics, env.clip);
    const RlLoss rl = saferl_loss_grad(env, sys, hyper, starts, pool);
    opt.step(theta, rl.grad);
    if (!theta.allFinite()) {
      throw std::runtime_error("pretrain: parameters diverged at step " + std::to_string(step));
    }
    ReluNet cand = from_param_vector(arch, theta);
    const double sc =
        rollout_score(env, ClosedLoopSystem(cand, dynamics, env.clip), hyper, eval_starts);
    out.score_trace.push_back(sc);
    if (sc > out.best_score) {
      out.best_score = sc;
      out.best_step = step;
      out.controller = std::move(cand);
    }
  }
  return out;
}

CurriculumResult curriculum_train(const EnvSpec& env, const ReluNet& dynamics,
                                  const ReluNet& controller0, int K, const TrainingHyper& hyper,
                                  const std::vector<GridCell>& grid, ThreadPool* pool,
                                  const PhaseLogger& logger) {
  hyper.validate();
  require(K >= 1, "curriculum_train: K must be >= 1");
  require(!grid.empty(), "curriculum_train: empty grid");
  require(controller0.input_dim() == env.state_dim &&
              controller0.output_dim() == env.action_dim,
          "curriculum_train: controller dims do not match the env");
  const SafetySpec& spec = env.safety;

  const ReluNet arch = controller0;
  Vec theta = to_param_vector(controller0);
  Adam opt(static_cast<int>(theta.size()), hyper.curriculum_lr);
  ClosedLoopSystem sys(controller0, dynamics, env.clip);
  MemoryBuffer buffer;
  RolloutCache cache;
  CurriculumResult out{controller0, {}, {}, {}, 0};

  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  auto emit = [&](const PhaseLogEntry& e) {
    out.log.push_back(e);
    if (logger) logger(e);
  };
  auto unsafe_cells = [&](int k) {
    cache.extend_all(sys, spec, grid, k, pool);
    std::vector<GridCell> uc;
    for (const auto& cell : grid) {
      if (cache.find(cell)->any_unsafe(k)) uc.push_back(cell);
    }
    return uc;
  };

  for (int k = 1; k <= K; ++k) {
    std::vector<GridCell> s_uc = unsafe_cells(k);
    int n_train = 0;
    if (s_uc.empty()) {
      const double lb = bound_loss(sys, s_uc, buffer, k, spec, hyper.bound_clip, &cache);
      emit({k, 0, 0.0, lb, 0.0, 0, buffer.total_cells(), wall()});
    }
    while (n_train < hyper.n_max && !s_uc.empty()) {
      Rng rng = Rng::derive(hyper.seed, round_stream(k, n_train));
      const std::vector<Vec> starts = sample_starts(grid, hyper.episodes_per_step, rng);
      const RlLoss rl = saferl_loss_grad(env, sys, hyper, starts, pool);
      const BoundLossResult bl =
          bound_loss_grad(sys, s_uc, buffer, k, spec, hyper.bound_clip, hyper.segment, pool,
                          &cache);
      const double lam = bl.value > 0.0 ? mix_lambda(std::abs(rl.value), bl.value, hyper) : 0.0;
      Vec g = rl.grad;
      if (lam != 0.0) g += lam * bl.grad;
      if (!g.allFinite()) {
        throw std::runtime_error("curriculum_train: gradient diverged in phase " +
                                 std::to_string(k));
      }
      opt.step(theta, g);
      if (!theta.allFinite()) {
        throw std::runtime_error("curriculum_train: parameters diverged in phase " +
                                 std::to_string(k));
      }
      sys = ClosedLoopSystem(from_param_vector(arch, theta), dynamics, env.clip);
      cache.clear();
      ++n_train;
      ++out.rounds_total;
      s_uc = unsafe_cells(k);
      emit({k, n_train, rl.value, bl.value, lam, static_cast<int>(s_uc.size()),
            buffer.total_cells(), wall()});
    }
    // n_max exhausted with cells left is visible in the log (unresolved > 0)
    // and in unresolved_per_phase; the curriculum moves on regardless.
    buffer = buffer_update(buffer, grid, sys, k, hyper.epsilon, spec, hyper.merge_window, &cache);
    out.unresolved_per_phase.push_back(static_cast<int>(s_uc.size()));
  }
  out.controller = sys.controller;
  out.buffer = buffer;
  return out;
}

}  // namespace vsc
