#include "vsc/safety.hpp"

#include <algorithm>
#include <cmath>

namespace vsc {

Box ObstacleTrack::box_at(int step) const {
  require(step >= 0, "ObstacleTrack::box_at: negative step");
  if (move_steps <= 0) return start;
  const double a = static_cast<double>(std::min(step, move_steps)) / move_steps;
  return Box(start.lb + a * (end.lb - start.lb), start.ub + a * (end.ub - start.ub));
}

void SafetySpec::validate(int state_dim) const {
  for (const auto& ob : obstacles) {
    require(!ob.dims.empty(), "SafetySpec: obstacle with no dims");
    require(ob.start.dim() == static_cast<int>(ob.dims.size()) &&
                ob.end.dim() == static_cast<int>(ob.dims.size()),
            "SafetySpec: obstacle box dim != dims count");
    require(ob.move_steps >= 0, "SafetySpec: negative move_steps");
    for (int d : ob.dims) {
      require(d >= 0 && d < state_dim, "SafetySpec: obstacle dim out of range");
    }
  }
  for (const auto& sb : state_bounds) {
    require(sb.dim >= 0 && sb.dim < state_dim, "SafetySpec: state bound dim out of range");
    require(std::isfinite(sb.threshold), "SafetySpec: non-finite threshold");
  }
}

namespace {

double obstacle_cost(const Box& bound, const ObstacleTrack& ob, int step) {
  const Box pos = ob.box_at(step);
  double c = 1.0;
  for (size_t j = 0; j < ob.dims.size(); ++j) {
    const int d = ob.dims[j];
    c *= std::max(bound.ub[d] - pos.lb[j], 0.0) * std::max(pos.ub[j] - bound.lb[d], 0.0);
  }
  return c;
}

double state_bound_cost(const Box& bound, const StateBound& sb) {
  switch (sb.kind) {
    case BoundKind::kLe:
      return std::max(bound.ub[sb.dim] - sb.threshold, 0.0);
    case BoundKind::kGe:
      return std::max(sb.threshold - bound.lb[sb.dim], 0.0);
    case BoundKind::kAbsLe:
      return std::max(bound.ub[sb.dim] - sb.threshold, 0.0) +
             std::max(-sb.threshold - bound.lb[sb.dim], 0.0);
  }
  return 0.0;
}

double obstacle_gap(const Box& bound, const ObstacleTrack& ob, int step) {
  const Box pos = ob.box_at(step);
  double gap = 0.0;
  for (size_t j = 0; j < ob.dims.size(); ++j) {
    const int d = ob.dims[j];
    gap = std::max(gap, std::max(pos.lb[j] - bound.ub[d], bound.lb[d] - pos.ub[j]));
  }
  return gap;
}

double state_bound_gap(const Box& bound, const StateBound& sb) {
  switch (sb.kind) {
    case BoundKind::kLe:
      return std::max(sb.threshold - bound.ub[sb.dim], 0.0);
    case BoundKind::kGe:
      return std::max(bound.lb[sb.dim] - sb.threshold, 0.0);
    case BoundKind::kAbsLe:
      return std::max(std::min(sb.threshold - bound.ub[sb.dim], bound.lb[sb.dim] + sb.threshold),
                      0.0);
  }
  return 0.0;
}

}  // namespace

double region_cost(const Box& bound, const SafetySpec& spec, int step) {
  double total = 0.0;
  for (const auto& ob : spec.obstacles) total += obstacle_cost(bound, ob, step);
  for (const auto& sb : spec.state_bounds) total += state_bound_cost(bound, sb);
  return total;
}

double distance_to_unsafe(const Box& bound, const SafetySpec& spec, int step) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& ob : spec.obstacles) best = std::min(best, obstacle_gap(bound, ob, step));
  for (const auto& sb : spec.state_bounds) best = std::min(best, state_bound_gap(bound, sb));
  return std::isinf(best) ? 0.0 : best;
}

bool point_violates(const Vec& s, const SafetySpec& spec, int step) {
  for (const auto& ob : spec.obstacles) {
    const Box pos = ob.box_at(step);
    bool inside = true;
    for (size_t j = 0; j < ob.dims.size() && inside; ++j) {
      const double v = s[ob.dims[j]];
      inside = v >= pos.lb[j] && v <= pos.ub[j];
    }
    if (inside) return true;
  }
  for (const auto& sb : spec.state_bounds) {
    const double v = s[sb.dim];
    switch (sb.kind) {
      case BoundKind::kLe:
        if (v > sb.threshold) return true;
        break;
      case BoundKind::kGe:
        if (v < sb.threshold) return true;
        break;
      case BoundKind::kAbsLe:
        if (std::abs(v) > sb.threshold) return true;
        break;
    }
  }
  return false;
}

std::vector<bool> violation_flags(const Box& bound, const SafetySpec& spec, int step) {
  std::vector<bool> flags;
  flags.reserve(static_cast<size_t>(spec.constraint_count()));
  for (const auto& ob : spec.obstacles) flags.push_back(obstacle_cost(bound, ob, step) > 0.0);
  for (const auto& sb : spec.state_bounds) flags.push_back(state_bound_cost(bound, sb) > 0.0);
  return flags;
}

NodeId taped_region_cost(Tape& t, const IntervalNodes& iv, const SafetySpec& spec, int step) {
  std::vector<NodeId> terms;
  for (const auto& ob : spec.obstacles) {
    const Box pos = ob.box_at(step);
    const NodeId ub_d = t.gather(iv.ub, ob.dims);
    const NodeId lb_d = t.gather(iv.lb, ob.dims);
    const NodeId hi = t.relu(t.add_const(ub_d, Vec(-pos.lb)));
    const NodeId lo = t.relu(t.sub_from_const(pos.ub, lb_d));
    terms.push_back(t.prod(t.mul(hi, lo)));
  }
  for (const auto& sb : spec.state_bounds) {
    const Vec thr = Vec::Constant(1, sb.threshold);
    switch (sb.kind) {
      case BoundKind::kLe:
        terms.push_back(t.relu(t.add_const(t.gather(iv.ub, {sb.dim}), Vec(-thr))));
        break;
      case BoundKind::kGe:
        terms.push_back(t.relu(t.sub_from_const(thr, t.gather(iv.lb, {sb.dim}))));
        break;
      case BoundKind::kAbsLe: {
        const NodeId up = t.relu(t.add_const(t.gather(iv.ub, {sb.dim}), Vec(-thr)));
        const NodeId dn = t.relu(t.sub_from_const(Vec(-thr), t.gather(iv.lb, {sb.dim})));
        terms.push_back(t.add(up, dn));
        break;
      }
    }
  }
  if (terms.empty()) return t.constant(Vec::Zero(1));
  if (terms.size() == 1) return terms[0];
  return t.sum_of(terms);
}

}  // namespace vsc
