#pragma once

#include <cstdint>
#include <vector>

#include "vsc/common.hpp"
#include "vsc/nn.hpp"

namespace vsc {

using NodeId = int32_t;

// Reverse-mode tape over vector-valued nodes. The op vocabulary is exactly
// what forward evaluation, interval propagation and the safety losses need:
// affine maps, interval-endpoint affine maps, ReLU, clip encodings and a few
// elementwise/reduction ops.
//
// Values are computed eagerly at node creation, so loss magnitudes can be
// read before deciding how to combine terms (the lambda mix needs this).
// backward() runs once per scalar output and accumulates into per-block
// gradients.
//
// Subgradient conventions (all deterministic): relu'(0) = 0, the clip
// encodings inherit that choice, elementwise min/max pass the gradient to the
// first argument on ties, d(max(W,0))/dW = 0 at W = 0, d(sqrt)/dx = 0 at
// x = 0, and min_const passes through on ties.
class Tape {
 public:
  struct BlockRef {
    int32_t id = -1;
    bool is_matrix = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registered storage must outlive the tape and stay unmodified while the
  // tape is alive (the tape caches sign-split copies of matrices).
  BlockRef add_matrix(const Mat* w, bool trainable);
  BlockRef add_vector(const Vec* v, bool trainable);

  NodeId constant(Vec v);
  NodeId var(Vec v);  // differentiable leaf (e.g. cell endpoints)

  NodeId affine(BlockRef w, BlockRef b, NodeId x);        // W x + b
  NodeId iv_affine_lo(BlockRef w, BlockRef b, NodeId lb, NodeId ub);  // W+ lb + W- ub + b
  NodeId iv_affine_hi(BlockRef w, BlockRef b, NodeId lb, NodeId ub);  // W+ ub + W- lb + b
  NodeId relu(NodeId x);
  NodeId clip_low(NodeId x, Vec lo);   // lo + relu(x - lo)
  NodeId clip_high(NodeId x, Vec hi);  // hi - relu(hi - x)
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId emin(NodeId a, NodeId b);
  NodeId emax(NodeId a, NodeId b);
  NodeId neg(NodeId x);
  NodeId scale(NodeId x, double s);
  NodeId add_const(NodeId x, Vec c);
  NodeId sub_from_const(Vec c, NodeId x);  // c - x
  NodeId vexp(NodeId x);
  NodeId vsqrt(NodeId x);
  NodeId gather(NodeId x, std::vector<int> idx);
  NodeId concat(NodeId a, NodeId b);
  NodeId sum(NodeId x);   // reduce to 1-dim
  NodeId prod(NodeId x);  // reduce to 1-dim
  NodeId sum_of(std::vector<NodeId> xs);  // elementwise sum of same-dim nodes
  NodeId min_const(NodeId x, double c);   // elementwise min(x, c)

  const Vec& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].val; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  // Accumulates d(output)/d(block) for every trainable block and
  // d(output)/d(var) for every var leaf. output must be 1-dimensional.
  void backward(NodeId output);
  void zero_grad();

  // Flattened gradient of one block (row-major for matrices).
  Vec block_grad(BlockRef b) const;
  // Gradient w.r.t. a var leaf.
  Vec var_grad(NodeId var_node) const;
  // Concatenated gradients of all trainable blocks in registration order.
  Vec trainable_grad() const;
  // Convenience: zero_grad + backward + trainable_grad.
  Vec gradient(NodeId output);

 private:
  enum class Kind : uint8_t {
    kConst, kVar, kAffine, kIvAffineLo, kIvAffineHi, kRelu, kClipLo, kClipHi,
    kAdd, kSub, kMul, kMin, kMax, kNeg, kScale, kAddC, kSubFromC, kExp, kSqrt,
    kGather, kConcat, kSum, kProd, kSumOf, kMinConst
  };

  struct Node {
    Kind kind;
    NodeId a = -1, b = -1;
    int32_t wblock = -1, vblock = -1;
    double s = 0.0;
    Vec cvec;
    std::vector<int> idx;
    std::vector<NodeId> many;
    Vec val;
    Vec adj;  // allocated during backward
  };

  struct MatBlock {
    const Mat* w = nullptr;
    Mat wpos, wneg;  // cached sign splits
    bool trainable = false;
    Mat grad;
  };

  struct VecBlock {
    const Vec* v = nullptr;
    bool trainable = false;
    Vec grad;
  };

  NodeId push(Node n);
  const Vec& val(NodeId id) const { return nodes_[static_cast<size_t>(id)].val; }
  void check_node(NodeId id, const char* who) const;

  std::vector<Node> nodes_;
  std::vector<MatBlock> mats_;
  std::vector<VecBlock> vecs_;
  // (is_matrix, index) pairs in registration order, trainable blocks only.
  std::vector<std::pair<bool, int32_t>> trainable_order_;
};

// A ReluNet registered on a tape, one (weight, bias) block pair per layer.
struct TapedNet {
  std::vector<std::pair<Tape::BlockRef, Tape::BlockRef>> layers;
};

struct IntervalNodes {
  NodeId lb = -1, ub = -1;
};

TapedNet register_net(Tape& t, const ReluNet& net, bool trainable);
NodeId taped_forward(Tape& t, const TapedNet& tn, NodeId x);
// Interval propagation through the net's layers; same arithmetic as the
// value-only path in bounds.cpp, so both produce identical boxes.
IntervalNodes taped_ibp(Tape& t, const TapedNet& tn, IntervalNodes in);
IntervalNodes taped_clip(Tape& t, IntervalNodes a, const ActionClip& clip);
IntervalNodes taped_concat(Tape& t, IntervalNodes a, IntervalNodes b);

// Closed-loop system registered on one tape. The source system must outlive
// the tape (blocks alias its matrices).
struct TapedSystem {
  TapedNet controller, dynamics;
  ActionClip clip;
  int state_dim = 0;
};
TapedSystem register_system(Tape& t, const ClosedLoopSystem& sys, bool trainable_controller);

// One closed-loop interval step: state interval through controller, clip,
// then dynamics on the concatenated (state, action) interval.
IntervalNodes taped_step_interval(Tape& t, const TapedSystem& ts, IntervalNodes s);

// Exact point step: s' = dynamics(s, clip(controller(s))).
NodeId taped_step_point(Tape& t, const TapedSystem& ts, NodeId s);

}  // namespace vsc
