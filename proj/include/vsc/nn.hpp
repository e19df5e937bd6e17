#pragma once

#include <string>
#include <vector>

#include "vsc/common.hpp"

namespace vsc {

struct AffineLayer {
  Mat weight;  // out_dim x in_dim
  Vec bias;    // out_dim
};

// Fully connected network with ReLU after every layer except the last.
// Immutable after construction; training code builds replacements through
// from_param_vector.
class ReluNet {
 public:
  explicit ReluNet(std::vector<AffineLayer> layers);

  int input_dim() const { return static_cast<int>(layers_.front().weight.cols()); }
  int output_dim() const { return static_cast<int>(layers_.back().weight.rows()); }
  int depth() const { return static_cast<int>(layers_.size()); }
  const std::vector<AffineLayer>& layers() const { return layers_; }
  const AffineLayer& layer(int i) const { return layers_[static_cast<size_t>(i)]; }

  Vec forward(const Vec& x) const;

  // Hidden widths, e.g. {8, 8} for in -> 8 -> 8 -> out.
  std::vector<int> hidden_dims() const;

  int param_count() const;

 private:
  std::vector<AffineLayer> layers_;
};

// Per-dimension action interval. Disabled clip leaves actions untouched.
struct ActionClip {
  Vec lo, hi;
  bool enabled = false;

  static ActionClip none() { return ActionClip{}; }
  static ActionClip box(Vec lo, Vec hi);
  Vec apply(const Vec& a) const;
};

// Controller pi: S -> A, dynamics f: S x A -> S, executed as
// s' = f(s, clip(pi(s))).
struct ClosedLoopSystem {
  ReluNet controller;
  ReluNet dynamics;
  ActionClip clip;

  ClosedLoopSystem(ReluNet controller_, ReluNet dynamics_, ActionClip clip_);

  int state_dim() const { return controller.input_dim(); }
  int action_dim() const { return controller.output_dim(); }
};

// Builds the one-step closed-loop map as a single ReluNet. The state is
// carried past the controller layers as a (relu(s), relu(-s)) pair, and the
// action clip becomes two extra ReLU layers via
//   max(x, lo) = lo + relu(x - lo),  min(y, hi) = hi - relu(hi - y),
// so bound propagation and simulation both see one network.
ReluNet compose_step(const ClosedLoopSystem& sys);

// Random He-style initialization, used for fresh controllers and fit starts.
ReluNet random_net(int input_dim, const std::vector<int>& hidden, int output_dim,
                   uint64_t seed);

// Flat parameter layout: for each layer in order, weight entries row-major,
// then bias entries. from_param_vector keeps the architecture of arch_like.
Vec to_param_vector(const ReluNet& net);
ReluNet from_param_vector(const ReluNet& arch_like, const Vec& flat);

// Batched forward: columns of X are inputs, columns of the result outputs.
Mat forward_batch(const ReluNet& net, const Mat& X);

// Mean over columns of the squared error ||net(x) - y||^2, gradient in the
// to_param_vector layout. grad may be null. Uses the relu'(0) = 0 convention,
// matching the tape; tests check the two engines agree.
double mse_batch_gradient(const ReluNet& net, const Mat& X, const Mat& Y, Vec* grad);

std::string save_net_string(const ReluNet& net);
void save_net(const ReluNet& net, const std::string& path);
ReluNet load_net_string(const std::string& text, const std::string& origin = "<string>");
ReluNet load_net(const std::string& path);

// Fingerprint of the serialized form; written into certificate headers so a
// certificate can be matched to the exact controller file it covers.
uint64_t net_fingerprint(const ReluNet& net);
// net_fingerprint as 16 lowercase hex digits; names controllers in artifacts.
std::string fingerprint_hex(const ReluNet& net);

}  // namespace vsc
