#pragma once
#include <string>
#include <utility>
#include <vector>

#include "vsc/nn.hpp"
#include "vsc/rng.hpp"

namespace vsc {

// Axis-aligned box, stored by endpoints. Degenerate dims (lb == ub) are legal.
struct Box {
  Vec lb, ub;

  Box() = default;
  Box(Vec lo, Vec hi);
  static Box from_center_radius(const Vec& c, const Vec& r);

  int dim() const { return static_cast<int>(lb.size()); }
  Vec center() const { return 0.5 * (lb + ub); }
  Vec radius() const { return 0.5 * (ub - lb); }
  double width(int d) const { return ub[d] - lb[d]; }
  double max_width() const { return dim() == 0 ? 0.0 : (ub - lb).maxCoeff(); }

  bool contains(const Vec& x, double slack = 0.0) const;
  bool contains(const Box& inner, double slack = 0.0) const;
  Vec sample(Rng& rng) const;
};

enum class BoundMethod { kIbp, kCrown };
const char* method_name(BoundMethod m);
BoundMethod method_from_name(const std::string& s);

// ReLU relaxation for pre-activation range [l, u]: relu(z) is bounded by
// low_slope*z from below and up_slope*z + up_icept from above on [l, u].
// Unstable case uses the chord above and a 0/1 slope below (1 when u >= |l|,
// ties to 1).
struct ReluRelax {
  double low_slope, up_slope, up_icept;
};
ReluRelax relu_relaxation(double l, double u);

// A deep ReLU network in layered form: ReLU follows every hidden layer, and
// affine "heads" read outputs off a hidden activation (anchor -1 = the input).
// Multi-step closed-loop compositions store one head per step, so bounding
// the whole stack once yields every per-step state box.
struct SplitAffine {
  Mat w, wpos, wneg;
  Vec b;
  SplitAffine() = default;
  SplitAffine(Mat weight, Vec bias);
};

struct LayeredNet {
  int input_dim = 0;
  std::vector<SplitAffine> hidden;
  struct Head {
    int anchor;  // hidden layer index whose activation feeds this head; -1 = input
    SplitAffine aff;
  };
  std::vector<Head> heads;
};

// Layered view of a plain net: all but the last layer become hidden layers,
// the last becomes the single head.
LayeredNet layered_view(const ReluNet& net);

// t-fold composition of the closed-loop step network. Boundary affines are
// merged (last dynamics layer folded into the next step's first layer), and
// head `t-1` reads the state after step t.
LayeredNet compose_horizon(const ClosedLoopSystem& sys, int steps);

// One box per head, in head order.
std::vector<Box> bound_heads(const LayeredNet& net, const Box& in, BoundMethod m);

Box ibp(const ReluNet& net, const Box& in);
Box crown(const ReluNet& net, const Box& in);
Box bound_output(const ReluNet& net, const Box& in, BoundMethod m);

// Checkpoints 0 < k_1 < ... < k_n = k_target.
struct IncrementalSchedule {
  std::vector<int> checkpoints;
  explicit IncrementalSchedule(std::vector<int> cps);
  static IncrementalSchedule uniform(int k_target, int segment);
  int target() const { return checkpoints.back(); }
  int max_segment() const;
};

// Stepwise closed-loop interval propagation: controller, clip, dynamics, one
// step at a time. This is the training-path bounder; its arithmetic matches
// the tape interval kernels bitwise. Looser than the composed-net rollout.
Box closed_loop_ibp_step(const ClosedLoopSystem& sys, const Box& s);
std::vector<Box> closed_loop_ibp_rollout(const ClosedLoopSystem& sys, const Box& in, int k);

// Boxes for steps 1..k, bounding the k-fold composition in one piece.
std::vector<Box> rollout_bounds(const ClosedLoopSystem& sys, const Box& in, int k,
                                BoundMethod m);

// Boxes for steps 1..k_target; each segment bounds the
// (k_{i+1}-k_i)-fold composition seeded with the concretized box at k_i.
std::vector<Box> incremental_rollout(const ClosedLoopSystem& sys, const Box& in,
                                     const IncrementalSchedule& sched, BoundMethod m);

}  // namespace vsc
