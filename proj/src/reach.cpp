#include "vsc/reach.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

#include "vsc/rng.hpp"
#include "vsc/tape.hpp"

namespace vsc {

std::pair<GridCell, GridCell> bisect_cell(const GridCell& c, int dim) {
  require(dim >= 0 && dim < c.box.dim(), "bisect_cell: dim out of range");
  const double mid = 0.5 * (c.box.lb[dim] + c.box.ub[dim]);
  GridCell lo{c.box, c.path + "0"};
  GridCell hi{c.box, c.path + "1"};
  lo.box.ub[dim] = mid;
  hi.box.lb[dim] = mid;
  return {std::move(lo), std::move(hi)};
}

std::vector<int> safety_relevant_dims(const SafetySpec& spec, int state_dim) {
  std::set<int> dims;
  for (const auto& ob : spec.obstacles) dims.insert(ob.dims.begin(), ob.dims.end());
  for (const auto& sb : spec.state_bounds) dims.insert(sb.dim);
  std::vector<int> out(dims.begin(), dims.end());
  for (int d : out) require(d >= 0 && d < state_dim, "safety_relevant_dims: dim out of range");
  return out;
}

Vec cost_radius_gradient(const ClosedLoopSystem& sys, const Box& in, const SafetySpec& spec,
                         int probe_step) {
  require(probe_step >= 1, "cost_radius_gradient: probe_step must be >= 1");
  Tape t;
  const TapedSystem ts = register_system(t, sys, false);
  const NodeId lb0 = t.var(in.lb);
  const NodeId ub0 = t.var(in.ub);
  IntervalNodes iv{lb0, ub0};
  for (int s = 0; s < probe_step; ++s) iv = taped_step_interval(t, ts, iv);
  const NodeId cost = taped_region_cost(t, iv, spec, probe_step);
  if (t.value(cost)[0] == 0.0) return Vec::Zero(in.dim());
  t.backward(cost);
  return t.var_grad(ub0) - t.var_grad(lb0);
}

int pick_split_dim(const ClosedLoopSystem& sys, const Box& box, const SafetySpec& spec,
                   int probe_step, const std::vector<int>& candidates) {
  require(!candidates.empty(), "pick_split_dim: no candidate dims");
  const Vec g = cost_radius_gradient(sys, box, spec, probe_step);
  int best = candidates[0];
  double best_mag = std::abs(g[best]);
  for (int d : candidates) {
    if (std::abs(g[d]) > best_mag) {
      best = d;
      best_mag = std::abs(g[d]);
    }
  }
  if (best_mag > 0.0) return best;
  // No gradient signal: widest candidate dim, lowest index on ties.
  best = candidates[0];
  for (int d : candidates) {
    if (box.width(d) > box.width(best)) best = d;
  }
  return best;
}

namespace {

std::vector<int> split_candidates(const SafetySpec& spec, int state_dim) {
  std::vector<int> c = safety_relevant_dims(spec, state_dim);
  if (c.empty()) {
    for (int d = 0; d < state_dim; ++d) c.push_back(d);
  }
  return c;
}

}  // namespace

std::vector<GridCell> split_initial(const Box& s0, int budget, const ClosedLoopSystem& sys,
                                    const SafetySpec& spec, int probe_step) {
  require(budget >= 1, "split_initial: budget must be >= 1");
  const std::vector<int> cands = split_candidates(spec, s0.dim());
  std::deque<GridCell> q;
  q.push_back(GridCell{s0, ""});
  while (static_cast<int>(q.size()) < budget) {
    GridCell c = std::move(q.front());
    q.pop_front();
    const int d = pick_split_dim(sys, c.box, spec, probe_step, cands);
    auto [a, b] = bisect_cell(c, d);
    q.push_back(std::move(a));
    q.push_back(std::move(b));
  }
  return {q.begin(), q.end()};
}

BabOutcome branch_and_bound(const GridCell& cell, const ClosedLoopSystem& sys, int k,
                            const SafetySpec& spec, const BabOptions& opt,
                            const LayeredNet* horizon_net) {
  require(k >= 1, "branch_and_bound: k must be >= 1");
  LayeredNet local;
  if (horizon_net == nullptr) {
    local = compose_horizon(sys, k);
    horizon_net = &local;
  }
  const std::vector<int> cands = split_candidates(spec, cell.box.dim());

  BabOutcome out;
  out.safe = true;
  std::deque<GridCell> q;
  q.push_back(cell);
  while (!q.empty()) {
    GridCell c = std::move(q.front());
    q.pop_front();
    const std::vector<Box> boxes = bound_heads(*horizon_net, c.box, opt.method);
    ++out.bound_evals;
    int first_bad = -1;
    for (int t = 1; t <= k; ++t) {
      if (region_cost(boxes[t - 1], spec, t) > 0.0) {
        first_bad = t;
        break;
      }
    }
    if (first_bad < 0) {
      out.records.push_back({std::move(c), true, k});
      continue;
    }
    bool at_floor = true;
    for (int d : cands) {
      if (c.box.width(d) > opt.precision) {
        at_floor = false;
        break;
      }
    }
    const bool capped =
        opt.max_cells > 0 &&
        static_cast<int>(out.records.size() + q.size()) + 1 >= opt.max_cells;
    if (at_floor || capped) {
      out.safe = false;
      out.records.push_back({std::move(c), false, first_bad - 1});
      continue;
    }
    const int d = pick_split_dim(sys, c.box, spec, first_bad, cands);
    auto [a, b] = bisect_cell(c, d);
    q.push_back(std::move(a));
    q.push_back(std::move(b));
  }
  return out;
}

double Certificate::safe_fraction() const {
  double v = 0.0;
  for (const auto& r : records) {
    if (r.safe) v += std::ldexp(1.0, -r.cell.depth());
  }
  return v;
}

double Certificate::total_fraction() const {
  double v = 0.0;
  for (const auto& r : records) v += std::ldexp(1.0, -r.cell.depth());
  return v;
}

Certificate verify_cells(const ClosedLoopSystem& sys, const std::vector<GridCell>& cells,
                         int K, const SafetySpec& spec, const BabOptions& opt,
                         ThreadPool* pool) {
  require(!cells.empty(), "verify_cells: no cells");
  const LayeredNet horizon_net = compose_horizon(sys, K);
  std::vector<BabOutcome> results(cells.size());
  auto work = [&](size_t i) {
    results[i] = branch_and_bound(cells[i], sys, K, spec, opt, &horizon_net);
  };
  if (pool != nullptr) {
    pool->parallel_for(cells.size(), work);
  } else {
    for (size_t i = 0; i < cells.size(); ++i) work(i);
  }

  Certificate cert;
  cert.horizon = K;
  cert.precision = opt.precision;
  cert.method = opt.method;
  for (auto& r : results) {
    for (auto& rec : r.records) cert.records.push_back(std::move(rec));
  }
  return cert;
}

Certificate verify_horizon(const ClosedLoopSystem& sys, const std::vector<GridCell>& cells,
                           int K, const SafetySpec& spec, const BabOptions& opt,
                           ThreadPool* pool) {
  double vol = 0.0;
  for (const auto& c : cells) vol += std::ldexp(1.0, -c.depth());
  require(vol == 1.0, "verify_horizon: cells do not tile the initial region");
  return verify_cells(sys, cells, K, spec, opt, pool);
}

void save_certificate(const Certificate& c, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "save_certificate: cannot open " + path);
  const int dim = c.records.empty() ? 0 : c.records[0].cell.box.dim();
  f << "CERT v1\n";
  f << "env " << c.env << "\n";
  f << "controller " << c.controller_id << "\n";
  f << "k " << c.horizon << "\n";
  f << "precision " << fmt17(c.precision) << "\n";
  f << "method " << method_name(c.method) << "\n";
  f << "dim " << dim << "\n";
  f << "cells " << c.records.size() << "\n";
  for (const auto& r : c.records) {
    f << r.cell.id();
    for (int d = 0; d < dim; ++d) {
      f << " " << fmt17(r.cell.box.lb[d]) << " " << fmt17(r.cell.box.ub[d]);
    }
    f << " " << (r.safe ? "SAFE" : "UNSAFE") << " " << r.horizon << "\n";
  }
  require(f.good(), "save_certificate: write failed for " + path);
}

Certificate load_certificate(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "load_certificate: cannot open " + path);
  auto fail = [&](const std::string& msg) {
    throw std::invalid_argument(path + ": " + msg);
  };
  std::string line, tag;
  auto next = [&](const char* what) {
    if (!std::getline(f, line)) fail(std::string("missing ") + what);
    return std::istringstream(line);
  };
  if (!std::getline(f, line) || line != "CERT v1") fail("bad header");
  Certificate c;
  {
    auto s = next("env");
    s >> tag;
    if (tag != "env") fail("expected env");
    s >> c.env;
  }
  {
    auto s = next("controller");
    s >> tag >> c.controller_id;
    if (tag != "controller") fail("expected controller");
  }
  {
    auto s = next("k");
    s >> tag >> c.horizon;
    if (tag != "k" || c.horizon < 0) fail("bad k");
  }
  {
    auto s = next("precision");
    s >> tag >> c.precision;
    if (tag != "precision") fail("bad precision");
  }
  {
    auto s = next("method");
    std::string m;
    s >> tag >> m;
    if (tag != "method") fail("bad method");
    c.method = method_from_name(m);
  }
  int dim = 0;
  size_t count = 0;
  {
    auto s = next("dim");
    s >> tag >> dim;
    if (tag != "dim" || dim < 0) fail("bad dim");
  }
  {
    auto s = next("cells");
    s >> tag >> count;
    if (tag != "cells") fail("bad cells");
  }
  for (size_t i = 0; i < count; ++i) {
    auto s = next("cell record");
    std::string id, verdict;
    s >> id;
    if (id.empty() || id[0] != 'r') fail("bad cell id");
    Vec lb(dim), ub(dim);
    for (int d = 0; d < dim; ++d) {
      if (!(s >> lb[d] >> ub[d])) fail("bad cell box");
    }
    int horizon = 0;
    if (!(s >> verdict >> horizon)) fail("bad cell verdict");
    CellRecord r;
    r.cell = GridCell{Box(std::move(lb), std::move(ub)), id.substr(1)};
    r.safe = verdict == "SAFE";
    if (!r.safe && verdict != "UNSAFE") fail("bad verdict word");
    r.horizon = horizon;
    c.records.push_back(std::move(r));
  }
  return c;
}

AuditResult audit_certificate(const Certificate& c, const ClosedLoopSystem& sys,
                              const SafetySpec& spec, int rollouts_per_cell, uint64_t seed) {
  require(rollouts_per_cell >= 1, "audit_certificate: need at least one rollout");
  AuditResult out;
  const int n = sys.state_dim();
  for (size_t i = 0; i < c.records.size(); ++i) {
    const auto& r = c.records[i];
    if (!r.safe) continue;
    ++out.cells_checked;
    Rng rng = Rng::derive(seed, i);
    for (int j = 0; j < rollouts_per_cell; ++j) {
      Vec x = r.cell.box.sample(rng);
      ++out.rollouts;
      for (int t = 1; t <= r.horizon; ++t) {
        Vec a = sys.clip.apply(sys.controller.forward(x));
        Vec in(n + a.size());
        in << x, a;
        x = sys.dynamics.forward(in);
        if (point_violates(x, spec, t)) {
          ++out.violations;
          break;
        }
      }
    }
  }
  return out;
}

}  // namespace vsc
