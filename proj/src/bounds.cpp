#include "vsc/bounds.hpp"

#include <cmath>
#include <map>

namespace vsc {

Box::Box(Vec lo, Vec hi) : lb(std::move(lo)), ub(std::move(hi)) {
  require(lb.size() == ub.size(), "Box: endpoint dims differ");
  require(lb.allFinite() && ub.allFinite(), "Box: non-finite endpoint");
  require((ub - lb).minCoeff() >= 0.0, "Box: lb > ub");
}

Box Box::from_center_radius(const Vec& c, const Vec& r) {
  require(c.size() == r.size(), "Box: center/radius dims differ");
  require(r.size() == 0 || r.minCoeff() >= 0.0, "Box: negative radius");
  return Box(c - r, c + r);
}

bool Box::contains(const Vec& x, double slack) const {
  require(x.size() == lb.size(), "Box::contains: dim mismatch");
  return ((x - lb).array() >= -slack).all() && ((ub - x).array() >= -slack).all();
}

bool Box::contains(const Box& inner, double slack) const {
  require(inner.dim() == dim(), "Box::contains: dim mismatch");
  return ((inner.lb - lb).array() >= -slack).all() &&
         ((ub - inner.ub).array() >= -slack).all();
}

Vec Box::sample(Rng& rng) const {
  Vec x(lb.size());
  for (int i = 0; i < lb.size(); ++i) x[i] = lb[i] + rng.uniform() * (ub[i] - lb[i]);
  return x;
}

const char* method_name(BoundMethod m) { return m == BoundMethod::kIbp ? "ibp" : "crown"; }

BoundMethod method_from_name(const std::string& s) {
  if (s == "ibp") return BoundMethod::kIbp;
  if (s == "crown") return BoundMethod::kCrown;
  throw std::invalid_argument("unknown bound method '" + s + "' (want ibp|crown)");
}

ReluRelax relu_relaxation(double l, double u) {
  require(l <= u, "relu_relaxation: l > u");
  if (l >= 0.0) return {1.0, 1.0, 0.0};
  if (u <= 0.0) return {0.0, 0.0, 0.0};
  const double us = u / (u - l);
  return {u >= -l ? 1.0 : 0.0, us, -l * us};
}

SplitAffine::SplitAffine(Mat weight, Vec bias) : w(std::move(weight)), b(std::move(bias)) {
  wpos = w.cwiseMax(0.0);
  wneg = w.cwiseMin(0.0);
}

namespace {

void affine_iv(const SplitAffine& a, const Vec& lb, const Vec& ub, Vec& olb, Vec& oub) {
  olb = a.wpos * lb + a.wneg * ub + a.b;
  oub = a.wpos * ub + a.wneg * lb + a.b;
}

// Backward substitution for target = aff.w * act(anchor) + aff.b, where
// act(i) is the post-ReLU activation of hidden layer i (act(-1) = input).
// Relaxation arrays hold per-neuron slopes/intercepts for layers 0..anchor.
void back_bound(const LayeredNet& net, int anchor, const SplitAffine& aff,
                const std::vector<Vec>& low_slope, const std::vector<Vec>& up_slope,
                const std::vector<Vec>& up_icept, const Box& in, Vec& olb, Vec& oub) {
  Mat al = aff.w, au = aff.w;
  Vec cl = aff.b, cu = aff.b;
  for (int i = anchor; i >= 0; --i) {
    Mat alp = al.cwiseMax(0.0), aln = al.cwiseMin(0.0);
    cl += aln * up_icept[i];
    al = alp * low_slope[i].asDiagonal() + aln * up_slope[i].asDiagonal();
    Mat aup = au.cwiseMax(0.0), aun = au.cwiseMin(0.0);
    cu += aup * up_icept[i];
    au = aup * up_slope[i].asDiagonal() + aun * low_slope[i].asDiagonal();
    cl += al * net.hidden[i].b;
    cu += au * net.hidden[i].b;
    al = Mat(al * net.hidden[i].w);
    au = Mat(au * net.hidden[i].w);
  }
  olb = al.cwiseMax(0.0) * in.lb + al.cwiseMin(0.0) * in.ub + cl;
  oub = au.cwiseMax(0.0) * in.ub + au.cwiseMin(0.0) * in.lb + cu;
}

// Intersect two sound bounds. Crossings can only come from last-ulp rounding,
// anything larger is a bug.
void intersect(Vec& lb, Vec& ub, const Vec& olb, const Vec& oub) {
  lb = lb.cwiseMax(olb);
  ub = ub.cwiseMin(oub);
  require(((ub - lb).array() >= -1e-9).all(), "bound intersection crossed");
  ub = ub.cwiseMax(lb);
}

}  // namespace

LayeredNet layered_view(const ReluNet& net) {
  LayeredNet out;
  out.input_dim = net.input_dim();
  const auto& ls = net.layers();
  for (size_t i = 0; i + 1 < ls.size(); ++i) out.hidden.emplace_back(ls[i].weight, ls[i].bias);
  out.heads.push_back({static_cast<int>(ls.size()) - 2, SplitAffine(ls.back().weight, ls.back().bias)});
  return out;
}

LayeredNet compose_horizon(const ClosedLoopSystem& sys, int steps) {
  require(steps >= 1, "compose_horizon: steps must be >= 1");
  const ReluNet step = compose_step(sys);
  const auto& sl = step.layers();
  const int p = static_cast<int>(sl.size());

  LayeredNet out;
  out.input_dim = step.input_dim();

  if (p == 1) {
    // Affine step map: heads are the cumulative affine iterates.
    Mat wt = sl[0].weight;
    Vec bt = sl[0].bias;
    out.heads.push_back({-1, SplitAffine(wt, bt)});
    for (int t = 2; t <= steps; ++t) {
      bt = sl[0].weight * bt + sl[0].bias;
      wt = Mat(sl[0].weight * wt);
      out.heads.push_back({-1, SplitAffine(wt, bt)});
    }
    return out;
  }

  // Boundary between consecutive copies merges the output affine into the
  // next copy's first layer (affine of affine).
  Mat bw = sl[0].weight * sl[p - 1].weight;
  Vec bb = sl[0].weight * sl[p - 1].bias + sl[0].bias;
  const SplitAffine boundary(std::move(bw), std::move(bb));
  const SplitAffine head_aff(sl[p - 1].weight, sl[p - 1].bias);

  for (int t = 1; t <= steps; ++t) {
    if (t == 1) {
      out.hidden.emplace_back(sl[0].weight, sl[0].bias);
    } else {
      out.hidden.push_back(boundary);
    }
    for (int i = 1; i + 1 < p; ++i) out.hidden.emplace_back(sl[i].weight, sl[i].bias);
    out.heads.push_back({static_cast<int>(out.hidden.size()) - 1, head_aff});
  }
  return out;
}

std::vector<Box> bound_heads(const LayeredNet& net, const Box& in, BoundMethod m) {
  require(in.dim() == net.input_dim, "bound_heads: input dim mismatch");
  const int nh = static_cast<int>(net.hidden.size());

  // Post-activation bounds per level; level -1 is the input box.
  std::vector<Vec> post_lb(nh), post_ub(nh);

  if (m == BoundMethod::kIbp) {
    Vec lb = in.lb, ub = in.ub;
    for (int j = 0; j < nh; ++j) {
      Vec plb, pub;
      affine_iv(net.hidden[j], lb, ub, plb, pub);
      post_lb[j] = plb.cwiseMax(0.0);
      post_ub[j] = pub.cwiseMax(0.0);
      lb = post_lb[j];
      ub = post_ub[j];
    }
    std::vector<Box> out;
    out.reserve(net.heads.size());
    for (const auto& h : net.heads) {
      Vec olb, oub;
      if (h.anchor < 0) {
        affine_iv(h.aff, in.lb, in.ub, olb, oub);
      } else {
        affine_iv(h.aff, post_lb[h.anchor], post_ub[h.anchor], olb, oub);
      }
      out.emplace_back(std::move(olb), std::move(oub));
    }
    return out;
  }

  // CROWN: pre-activation bounds per layer via backward substitution,
  // intersected with the forward interval from the best previous bounds.
  // The intersection keeps every result at least as tight as plain IBP.
  std::vector<Vec> low_slope(nh), up_slope(nh), up_icept(nh);
  for (int j = 0; j < nh; ++j) {
    Vec clb, cub;
    back_bound(net, j - 1, net.hidden[j], low_slope, up_slope, up_icept, in, clb, cub);
    Vec flb, fub;
    if (j == 0) {
      affine_iv(net.hidden[j], in.lb, in.ub, flb, fub);
    } else {
      affine_iv(net.hidden[j], post_lb[j - 1], post_ub[j - 1], flb, fub);
    }
    intersect(clb, cub, flb, fub);

    post_lb[j] = clb.cwiseMax(0.0);
    post_ub[j] = cub.cwiseMax(0.0);
    const int wj = static_cast<int>(clb.size());
    low_slope[j] = Vec(wj);
    up_slope[j] = Vec(wj);
    up_icept[j] = Vec(wj);
    for (int i = 0; i < wj; ++i) {
      const ReluRelax r = relu_relaxation(clb[i], cub[i]);
      low_slope[j][i] = r.low_slope;
      up_slope[j][i] = r.up_slope;
      up_icept[j][i] = r.up_icept;
    }
  }

  std::vector<Box> out;
  out.reserve(net.heads.size());
  for (const auto& h : net.heads) {
    Vec clb, cub;
    back_bound(net, h.anchor, h.aff, low_slope, up_slope, up_icept, in, clb, cub);
    Vec flb, fub;
    if (h.anchor < 0) {
      affine_iv(h.aff, in.lb, in.ub, flb, fub);
    } else {
      affine_iv(h.aff, post_lb[h.anchor], post_ub[h.anchor], flb, fub);
    }
    intersect(clb, cub, flb, fub);
    out.emplace_back(std::move(clb), std::move(cub));
  }
  return out;
}

Box ibp(const ReluNet& net, const Box& in) {
  return bound_heads(layered_view(net), in, BoundMethod::kIbp)[0];
}

Box crown(const ReluNet& net, const Box& in) {
  return bound_heads(layered_view(net), in, BoundMethod::kCrown)[0];
}

Box bound_output(const ReluNet& net, const Box& in, BoundMethod m) {
  return bound_heads(layered_view(net), in, m)[0];
}

namespace {

void net_iv(const ReluNet& net, Vec& lb, Vec& ub) {
  const auto& ls = net.layers();
  for (size_t i = 0; i < ls.size(); ++i) {
    if (i > 0) {
      lb = lb.cwiseMax(0.0);
      ub = ub.cwiseMax(0.0);
    }
    const Mat wpos = ls[i].weight.cwiseMax(0.0);
    const Mat wneg = ls[i].weight.cwiseMin(0.0);
    Vec nlb = wpos * lb + wneg * ub + ls[i].bias;
    ub = wpos * ub + wneg * lb + ls[i].bias;
    lb = std::move(nlb);
  }
}

Vec clip_vec(const ActionClip& c, const Vec& a) {
  // lo + relu(x - lo), then hi - relu(hi - x); same kernels as the tape.
  Vec low = c.lo + (a - c.lo).cwiseMax(0.0);
  return c.hi - (c.hi - low).cwiseMax(0.0);
}

}  // namespace

Box closed_loop_ibp_step(const ClosedLoopSystem& sys, const Box& s) {
  require(s.dim() == sys.state_dim(), "closed_loop_ibp_step: dim mismatch");
  Vec alb = s.lb, aub = s.ub;
  net_iv(sys.controller, alb, aub);
  if (sys.clip.enabled) {
    alb = clip_vec(sys.clip, alb);
    aub = clip_vec(sys.clip, aub);
  }
  const int n = sys.state_dim(), m = sys.action_dim();
  Vec lb(n + m), ub(n + m);
  lb << s.lb, alb;
  ub << s.ub, aub;
  net_iv(sys.dynamics, lb, ub);
  return Box(std::move(lb), std::move(ub));
}

std::vector<Box> closed_loop_ibp_rollout(const ClosedLoopSystem& sys, const Box& in, int k) {
  require(k >= 1, "closed_loop_ibp_rollout: k must be >= 1");
  std::vector<Box> out;
  out.reserve(k);
  Box cur = in;
  for (int t = 0; t < k; ++t) {
    cur = closed_loop_ibp_step(sys, cur);
    out.push_back(cur);
  }
  return out;
}

IncrementalSchedule::IncrementalSchedule(std::vector<int> cps) : checkpoints(std::move(cps)) {
  require(!checkpoints.empty(), "IncrementalSchedule: empty");
  require(checkpoints.front() > 0, "IncrementalSchedule: checkpoints must be positive");
  for (size_t i = 1; i < checkpoints.size(); ++i) {
    require(checkpoints[i] > checkpoints[i - 1],
            "IncrementalSchedule: checkpoints must be strictly increasing");
  }
}

IncrementalSchedule IncrementalSchedule::uniform(int k_target, int segment) {
  require(k_target >= 1 && segment >= 1, "IncrementalSchedule: bad arguments");
  std::vector<int> cps;
  for (int c = segment; c < k_target; c += segment) cps.push_back(c);
  cps.push_back(k_target);
  return IncrementalSchedule(std::move(cps));
}

int IncrementalSchedule::max_segment() const {
  int best = checkpoints[0];
  for (size_t i = 1; i < checkpoints.size(); ++i) {
    best = std::max(best, checkpoints[i] - checkpoints[i - 1]);
  }
  return best;
}

std::vector<Box> rollout_bounds(const ClosedLoopSystem& sys, const Box& in, int k,
                                BoundMethod m) {
  require(k >= 1, "rollout_bounds: k must be >= 1");
  return incremental_rollout(sys, in, IncrementalSchedule({k}), m);
}

std::vector<Box> incremental_rollout(const ClosedLoopSystem& sys, const Box& in,
                                     const IncrementalSchedule& sched, BoundMethod m) {
  std::map<int, LayeredNet> by_length;
  std::vector<Box> out;
  out.reserve(sched.target());
  Box seed = in;
  int prev = 0;
  for (int cp : sched.checkpoints) {
    const int seg = cp - prev;
    auto it = by_length.find(seg);
    if (it == by_length.end()) it = by_length.emplace(seg, compose_horizon(sys, seg)).first;
    std::vector<Box> boxes = bound_heads(it->second, seed, m);
    seed = boxes.back();
    for (auto& b : boxes) out.push_back(std::move(b));
    prev = cp;
  }
  return out;
}

}  // namespace vsc
