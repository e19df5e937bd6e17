#pragma once
#include <string>
#include <vector>

#include "vsc/reach.hpp"
#include "vsc/train.hpp"

namespace vsc {

// Which constraints a cell's reachable bounds hit within the horizon:
// ascending indices into the spec's constraint list (obstacles first, then
// state bounds). Nonempty for any cell a verifier rejected.
struct ViolationSignature {
  std::vector<int> constraints;

  bool operator==(const ViolationSignature& o) const { return constraints == o.constraints; }
  bool operator!=(const ViolationSignature& o) const { return constraints != o.constraints; }
  bool operator<(const ViolationSignature& o) const { return constraints < o.constraints; }
  std::string str() const;
};

// Signature of `box` under the closed loop: constraints with positive region
// cost at any step t <= K of the method's reachable-set rollout.
ViolationSignature violation_signature(const ClosedLoopSystem& sys, const Box& box, int K,
                                       const SafetySpec& spec, BoundMethod method);

struct SignedCell {
  GridCell cell;
  ViolationSignature sig;
};

struct Cluster {
  ViolationSignature sig;
  std::vector<GridCell> cells;
};

// Group cells by exact signature equality. Clusters come out in lexicographic
// signature order; cells keep their input order within each cluster.
std::vector<Cluster> cluster_regions(const std::vector<SignedCell>& cells);

struct DictEntry {
  std::vector<GridCell> region;  // cells certified safe at the horizon under `controller`
  ReluNet controller;
  Certificate certificate;

  double volume_fraction() const;  // of S_0, exact dyadic sum
};

struct ControllerDictionary {
  int horizon = 0;
  std::vector<DictEntry> entries;

  // Index of the first entry whose region contains s0 (closed boundaries, so
  // shared faces resolve to the earliest entry); -1 when no entry covers s0.
  int lookup(const Vec& s0) const;
  double covered_fraction() const;
};

void save_dictionary(const ControllerDictionary& d, const std::string& dir);
ControllerDictionary load_dictionary(const std::string& dir);

struct SynthesisRound {
  int round = 0;     // 0 = initial verification under the incoming controller
  int clusters = 0;  // clusters fine-tuned this round
  double new_volume = 0.0;
  int residual_cells = 0;
  bool stalled = false;
  bool halved = false;  // stall recovery: residual cells were bisected once
};

struct SynthesisResult {
  ControllerDictionary dict;
  std::vector<GridCell> residual;  // cells no entry certifies
  std::vector<SynthesisRound> log;
  bool complete = false;
  int rounds = 0;
};

// Cover the grid with (region, controller) pairs: verify under controller0,
// then repeatedly cluster the rejected cells by violation signature,
// fine-tune a controller per cluster (curriculum restricted to the cluster,
// warm-started from controller0), re-verify, and keep the certified parts.
// Stops at full coverage, after max_rounds, or after a repeated stall (a
// round that certifies zero new volume halves the residual cells once; a
// second zero-volume round ends the run with a partial dictionary).
SynthesisResult synthesize(const EnvSpec& env, const ReluNet& dynamics,
                           const ReluNet& controller0, int K, const TrainingHyper& hyper,
                           const BabOptions& bab, const std::vector<GridCell>& grid,
                           int max_rounds, ThreadPool* pool = nullptr,
                           PhaseLogger logger = PhaseLogger());

}  // namespace vsc
