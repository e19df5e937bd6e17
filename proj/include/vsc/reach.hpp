#pragma once
#include <string>
#include <vector>

#include "vsc/safety.hpp"
#include "vsc/threadpool.hpp"

namespace vsc {

// Cell of a bisection partition of S_0. `path` is the split trail ('0' lower
// half, '1' upper), so depth = path length and relative volume = 2^-depth,
// which sums exactly in doubles.
struct GridCell {
  Box box;
  std::string path;
  std::string id() const { return "r" + path; }
  int depth() const { return static_cast<int>(path.size()); }
};

std::pair<GridCell, GridCell> bisect_cell(const GridCell& c, int dim);

// Dims mentioned by any obstacle or state bound, ascending and deduplicated.
// Splitting is confined to these.
std::vector<int> safety_relevant_dims(const SafetySpec& spec, int state_dim);

// d(region_cost at the probe step)/d(input box radius), through the stepwise
// closed-loop interval rollout on a tape.
Vec cost_radius_gradient(const ClosedLoopSystem& sys, const Box& in, const SafetySpec& spec,
                         int probe_step);

// Largest |gradient| among candidate dims; ties to the lowest dim; all-zero
// gradients fall back to the widest candidate dim.
int pick_split_dim(const ClosedLoopSystem& sys, const Box& box, const SafetySpec& spec,
                   int probe_step, const std::vector<int>& candidates);

// Bisect S_0 into exactly `budget` cells, FIFO order, gradient-guided dims.
std::vector<GridCell> split_initial(const Box& s0, int budget, const ClosedLoopSystem& sys,
                                    const SafetySpec& spec, int probe_step);

struct CellRecord {
  GridCell cell;
  bool safe = false;
  // Certified horizon: k for safe records. Unsafe records store the last step
  // their own bounds cleared (first violating step minus one), so a report can
  // take a min over records to find the largest fully verified horizon.
  int horizon = 0;
};

struct BabOptions {
  double precision = 0.025;  // width floor per safety-relevant dim
  BoundMethod method = BoundMethod::kCrown;
  int max_cells = 0;  // optional cap on refined cells per root cell; 0 = off
};

struct BabOutcome {
  bool safe = false;
  std::vector<CellRecord> records;
  long bound_evals = 0;
};

// Refine `cell` until every sub-cell's 1..k bounds clear the spec or the
// precision floor is hit. Unresolved sub-cells are UNSAFE ("not proven
// safe"). `horizon_net` may carry a prebuilt k-step composition.
BabOutcome branch_and_bound(const GridCell& cell, const ClosedLoopSystem& sys, int k,
                            const SafetySpec& spec, const BabOptions& opt,
                            const LayeredNet* horizon_net = nullptr);

struct Certificate {
  std::string env;
  std::string controller_id;
  int horizon = 0;
  double precision = 0.0;
  BoundMethod method = BoundMethod::kCrown;
  std::vector<CellRecord> records;

  // Volume fractions of S_0, exact dyadic sums.
  double safe_fraction() const;
  double total_fraction() const;
};

// Verify an arbitrary cell list for all steps 1..K; the list need not tile
// S_0 (fractions in the result stay relative to S_0). Parallel across root
// cells when a pool is given; records merge in root-cell order so the result
// is scheduling-independent.
Certificate verify_cells(const ClosedLoopSystem& sys, const std::vector<GridCell>& cells,
                         int K, const SafetySpec& spec, const BabOptions& opt,
                         ThreadPool* pool = nullptr);

// verify_cells plus the guarantee that `cells` tiles S_0 (checked by the
// exact dyadic volume sum).
Certificate verify_horizon(const ClosedLoopSystem& sys, const std::vector<GridCell>& cells,
                           int K, const SafetySpec& spec, const BabOptions& opt,
                           ThreadPool* pool = nullptr);

void save_certificate(const Certificate& c, const std::string& path);
Certificate load_certificate(const std::string& path);

struct AuditResult {
  long cells_checked = 0;
  long rollouts = 0;
  long violations = 0;
};

// Post-hoc soundness audit: sample rollouts from every SAFE cell and count
// spec violations within the certified horizon. Uses the staged closed-loop
// forward pass, not the composed network.
AuditResult audit_certificate(const Certificate& c, const ClosedLoopSystem& sys,
                              const SafetySpec& spec, int rollouts_per_cell, uint64_t seed);

}  // namespace vsc
