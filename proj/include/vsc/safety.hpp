#pragma once
#include <vector>

#include "vsc/bounds.hpp"
#include "vsc/tape.hpp"

namespace vsc {

enum class BoundKind { kLe, kGe, kAbsLe };

struct StateBound {
  int dim = 0;
  BoundKind kind = BoundKind::kLe;
  double threshold = 0.0;
};

// Box obstacle over a subset of state dims. A moving obstacle interpolates
// linearly from `start` to `end` over move_steps integer steps and holds the
// end position afterwards; move_steps == 0 means static at `start`.
struct ObstacleTrack {
  std::vector<int> dims;
  Box start, end;
  int move_steps = 0;
  Box box_at(int step) const;
};

struct SafetySpec {
  std::vector<ObstacleTrack> obstacles;
  std::vector<StateBound> state_bounds;
  int constraint_count() const {
    return static_cast<int>(obstacles.size() + state_bounds.size());
  }
  void validate(int state_dim) const;
};

// Σ over constraints of the overlap penalty: per obstacle the product over
// its dims of max(ub - a, 0) * max(b - lb, 0), per state bound the endpoint
// violation. Zero iff the box is clear of every constraint at `step`.
double region_cost(const Box& bound, const SafetySpec& spec, int step);

// Minimum L-inf gap between the box and any constraint region at `step`;
// zero when intersecting.
double distance_to_unsafe(const Box& bound, const SafetySpec& spec, int step);

bool point_violates(const Vec& s, const SafetySpec& spec, int step);

// Per-constraint overlap flags at `step`, obstacles first then state bounds.
std::vector<bool> violation_flags(const Box& bound, const SafetySpec& spec, int step);

// Tape replica of region_cost over interval endpoint nodes; value matches the
// plain version bitwise, gradients flow to the endpoints.
NodeId taped_region_cost(Tape& t, const IntervalNodes& iv, const SafetySpec& spec, int step);

}  // namespace vsc
