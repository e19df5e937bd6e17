#include "vsc/tape.hpp"

#include <cmath>

namespace vsc {

Tape::BlockRef Tape::add_matrix(const Mat* w, bool trainable) {
  require(w != nullptr && w->size() > 0, "Tape::add_matrix: null or empty matrix");
  MatBlock b;
  b.w = w;
  b.wpos = w->cwiseMax(0.0);
  b.wneg = w->cwiseMin(0.0);
  b.trainable = trainable;
  if (trainable) {
    b.grad = Mat::Zero(w->rows(), w->cols());
    trainable_order_.emplace_back(true, static_cast<int32_t>(mats_.size()));
  }
  mats_.push_back(std::move(b));
  return BlockRef{static_cast<int32_t>(mats_.size() - 1), true};
}

Tape::BlockRef Tape::add_vector(const Vec* v, bool trainable) {
  require(v != nullptr && v->size() > 0, "Tape::add_vector: null or empty vector");
  VecBlock b;
  b.v = v;
  b.trainable = trainable;
  if (trainable) {
    b.grad = Vec::Zero(v->size());
    trainable_order_.emplace_back(false, static_cast<int32_t>(vecs_.size()));
  }
  vecs_.push_back(std::move(b));
  return BlockRef{static_cast<int32_t>(vecs_.size() - 1), false};
}

NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Tape::check_node(NodeId id, const char* who) const {
  require(id >= 0 && id < static_cast<NodeId>(nodes_.size()),
          std::string(who) + ": bad node id");
}

NodeId Tape::constant(Vec v) {
  Node n;
  n.kind = Kind::kConst;
  n.val = std::move(v);
  return push(std::move(n));
}

NodeId Tape::var(Vec v) {
  Node n;
  n.kind = Kind::kVar;
  n.val = std::move(v);
  return push(std::move(n));
}

NodeId Tape::affine(BlockRef w, BlockRef b, NodeId x) {
  check_node(x, "affine");
  require(w.is_matrix && !b.is_matrix, "affine: block kinds swapped");
  const auto& mb = mats_[static_cast<size_t>(w.id)];
  const auto& vb = vecs_[static_cast<size_t>(b.id)];
  require(mb.w->cols() == val(x).size(), "affine: dim mismatch");
  Node n;
  n.kind = Kind::kAffine;
  n.a = x;
  n.wblock = w.id;
  n.vblock = b.id;
  n.val = (*mb.w) * val(x) + (*vb.v);
  return push(std::move(n));
}

NodeId Tape::iv_affine_lo(BlockRef w, BlockRef b, NodeId lb, NodeId ub) {
  check_node(lb, "iv_affine_lo");
  check_node(ub, "iv_affine_lo");
  const auto& mb = mats_[static_cast<size_t>(w.id)];
  const auto& vb = vecs_[static_cast<size_t>(b.id)];
  require(mb.w->cols() == val(lb).size() && mb.w->cols() == val(ub).size(),
          "iv_affine_lo: dim mismatch");
  Node n;
  n.kind = Kind::kIvAffineLo;
  n.a = lb;
  n.b = ub;
  n.wblock = w.id;
  n.vblock = b.id;
  n.val = mb.wpos * val(lb) + mb.wneg * val(ub) + (*vb.v);
  return push(std::move(n));
}

NodeId Tape::iv_affine_hi(BlockRef w, BlockRef b, NodeId lb, NodeId ub) {
  check_node(lb, "iv_affine_hi");
  check_node(ub, "iv_affine_hi");
  const auto& mb = mats_[static_cast<size_t>(w.id)];
  const auto& vb = vecs_[static_cast<size_t>(b.id)];
  require(mb.w->cols() == val(lb).size() && mb.w->cols() == val(ub).size(),
          "iv_affine_hi: dim mismatch");
  Node n;
  n.kind = Kind::kIvAffineHi;
  n.a = lb;
  n.b = ub;
  n.wblock = w.id;
  n.vblock = b.id;
  n.val = mb.wpos * val(ub) + mb.wneg * val(lb) + (*vb.v);
  return push(std::move(n));
}

NodeId Tape::relu(NodeId x) {
  check_node(x, "relu");
  Node n;
  n.kind = Kind::kRelu;
  n.a = x;
  n.val = val(x).cwiseMax(0.0);
  return push(std::move(n));
}

NodeId Tape::clip_low(NodeId x, Vec lo) {
  check_node(x, "clip_low");
  require(lo.size() == val(x).size(), "clip_low: dim mismatch");
  Node n;
  n.kind = Kind::kClipLo;
  n.a = x;
  n.val = lo.array() + (val(x) - lo).array().max(0.0);
  n.cvec = std::move(lo);
  return push(std::move(n));
}

NodeId Tape::clip_high(NodeId x, Vec hi) {
  check_node(x, "clip_high");
  require(hi.size() == val(x).size(), "clip_high: dim mismatch");
  Node n;
  n.kind = Kind::kClipHi;
  n.a = x;
  n.val = hi.array() - (hi - val(x)).array().max(0.0);
  n.cvec = std::move(hi);
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  check_node(a, "add");
  check_node(b, "add");
  require(val(a).size() == val(b).size(), "add: dim mismatch");
  Node n;
  n.kind = Kind::kAdd;
  n.a = a;
  n.b = b;
  n.val = val(a) + val(b);
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  check_node(a, "sub");
  check_node(b, "sub");
  require(val(a).size() == val(b).size(), "sub: dim mismatch");
  Node n;
  n.kind = Kind::kSub;
  n.a = a;
  n.b = b;
  n.val = val(a) - val(b);
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  check_node(a, "mul");
  check_node(b, "mul");
  require(val(a).size() == val(b).size(), "mul: dim mismatch");
  Node n;
  n.kind = Kind::kMul;
  n.a = a;
  n.b = b;
  n.val = val(a).cwiseProduct(val(b));
  return push(std::move(n));
}

NodeId Tape::emin(NodeId a, NodeId b) {
  check_node(a, "emin");
  check_node(b, "emin");
  require(val(a).size() == val(b).size(), "emin: dim mismatch");
  Node n;
  n.kind = Kind::kMin;
  n.a = a;
  n.b = b;
  n.val = val(a).cwiseMin(val(b));
  return push(std::move(n));
}

NodeId Tape::emax(NodeId a, NodeId b) {
  check_node(a, "emax");
  check_node(b, "emax");
  require(val(a).size() == val(b).size(), "emax: dim mismatch");
  Node n;
  n.kind = Kind::kMax;
  n.a = a;
  n.b = b;
  n.val = val(a).cwiseMax(val(b));
  return push(std::move(n));
}

NodeId Tape::neg(NodeId x) {
  check_node(x, "neg");
  Node n;
  n.kind = Kind::kNeg;
  n.a = x;
  n.val = -val(x);
  return push(std::move(n));
}

NodeId Tape::scale(NodeId x, double s) {
  check_node(x, "scale");
  Node n;
  n.kind = Kind::kScale;
  n.a = x;
  n.s = s;
  n.val = s * val(x);
  return push(std::move(n));
}

NodeId Tape::add_const(NodeId x, Vec c) {
  check_node(x, "add_const");
  require(c.size() == val(x).size(), "add_const: dim mismatch");
  Node n;
  n.kind = Kind::kAddC;
  n.a = x;
  n.val = val(x) + c;
  n.cvec = std::move(c);
  return push(std::move(n));
}

NodeId Tape::sub_from_const(Vec c, NodeId x) {
  check_node(x, "sub_from_const");
  require(c.size() == val(x).size(), "sub_from_const: dim mismatch");
  Node n;
  n.kind = Kind::kSubFromC;
  n.a = x;
  n.val = c - val(x);
  n.cvec = std::move(c);
  return push(std::move(n));
}

NodeId Tape::vexp(NodeId x) {
  check_node(x, "vexp");
  Node n;
  n.kind = Kind::kExp;
  n.a = x;
  n.val = val(x).array().exp();
  return push(std::move(n));
}

NodeId Tape::vsqrt(NodeId x) {
  check_node(x, "vsqrt");
  Node n;
  n.kind = Kind::kSqrt;
  n.a = x;
  n.val = val(x).array().max(0.0).sqrt();
  return push(std::move(n));
}

NodeId Tape::gather(NodeId x, std::vector<int> idx) {
  check_node(x, "gather");
  Node n;
  n.kind = Kind::kGather;
  n.a = x;
  n.val = Vec(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < val(x).size(), "gather: index out of range");
    n.val[static_cast<Eigen::Index>(i)] = val(x)[idx[i]];
  }
  n.idx = std::move(idx);
  return push(std::move(n));
}

NodeId Tape::concat(NodeId a, NodeId b) {
  check_node(a, "concat");
  check_node(b, "concat");
  Node n;
  n.kind = Kind::kConcat;
  n.a = a;
  n.b = b;
  n.val = Vec(val(a).size() + val(b).size());
  n.val << val(a), val(b);
  return push(std::move(n));
}

NodeId Tape::sum(NodeId x) {
  check_node(x, "sum");
  Node n;
  n.kind = Kind::kSum;
  n.a = x;
  n.val = Vec::Constant(1, val(x).sum());
  return push(std::move(n));
}

NodeId Tape::prod(NodeId x) {
  check_node(x, "prod");
  Node n;
  n.kind = Kind::kProd;
  n.a = x;
  n.val = Vec::Constant(1, val(x).prod());
  return push(std::move(n));
}

NodeId Tape::sum_of(std::vector<NodeId> xs) {
  require(!xs.empty(), "sum_of: empty input list");
  for (NodeId x : xs) check_node(x, "sum_of");
  const auto dim = val(xs[0]).size();
  Node n;
  n.kind = Kind::kSumOf;
  n.val = Vec::Zero(dim);
  for (NodeId x : xs) {
    require(val(x).size() == dim, "sum_of: dim mismatch");
    n.val += val(x);
  }
  n.many = std::move(xs);
  return push(std::move(n));
}

NodeId Tape::min_const(NodeId x, double c) {
  check_node(x, "min_const");
  Node n;
  n.kind = Kind::kMinConst;
  n.a = x;
  n.s = c;
  n.val = val(x).cwiseMin(c);
  return push(std::move(n));
}

void Tape::zero_grad() {
  for (auto& m : mats_) {
    if (m.trainable) m.grad.setZero();
  }
  for (auto& v : vecs_) {
    if (v.trainable) v.grad.setZero();
  }
  for (auto& n : nodes_) n.adj.resize(0);
}

void Tape::backward(NodeId output) {
  check_node(output, "backward");
  require(val(output).size() == 1, "backward: output must be scalar (got dim " +
                                       std::to_string(val(output).size()) + ")");
  for (auto& n : nodes_) n.adj.resize(0);

  auto adj_of = [&](NodeId id) -> Vec& {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.adj.size() == 0) n.adj = Vec::Zero(n.val.size());
    return n.adj;
  };

  adj_of(output)[0] = 1.0;

  for (NodeId id = output; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.adj.size() == 0) continue;  // not reachable from output
    const Vec& bar = n.adj;
    switch (n.kind) {
      case Kind::kConst:
      case Kind::kVar:
        break;
      case Kind::kAffine: {
        auto& mb = mats_[static_cast<size_t>(n.wblock)];
        auto& vb = vecs_[static_cast<size_t>(n.vblock)];
        adj_of(n.a).noalias() += mb.w->transpose() * bar;
        if (mb.trainable) mb.grad.noalias() += bar * val(n.a).transpose();
        if (vb.trainable) vb.grad += bar;
        break;
      }
      case Kind::kIvAffineLo: {
        auto& mb = mats_[static_cast<size_t>(n.wblock)];
        auto& vb = vecs_[static_cast<size_t>(n.vblock)];
        adj_of(n.a).noalias() += mb.wpos.transpose() * bar;
        adj_of(n.b).noalias() += mb.wneg.transpose() * bar;
        if (mb.trainable) {
          // d/dW of (W+ lb + W- ub): pick lb where W > 0, ub where W < 0,
          // zero on the W = 0 facet.
          mb.grad.array() += (mb.w->array() > 0.0)
                                 .select((bar * val(n.a).transpose()).array(),
                                         (mb.w->array() < 0.0)
                                             .select((bar * val(n.b).transpose()).array(), 0.0));
        }
        if (vb.trainable) vb.grad += bar;
        break;
      }
      case Kind::kIvAffineHi: {
        auto& mb = mats_[static_cast<size_t>(n.wblock)];
        auto& vb = vecs_[static_cast<size_t>(n.vblock)];
        adj_of(n.b).noalias() += mb.wpos.transpose() * bar;
        adj_of(n.a).noalias() += mb.wneg.transpose() * bar;
        if (mb.trainable) {
          mb.grad.array() += (mb.w->array() > 0.0)
                                 .select((bar * val(n.b).transpose()).array(),
                                         (mb.w->array() < 0.0)
                                             .select((bar * val(n.a).transpose()).array(), 0.0));
        }
        if (vb.trainable) vb.grad += bar;
        break;
      }
      case Kind::kRelu:
        adj_of(n.a).array() += (val(n.a).array() > 0.0).select(bar.array(), 0.0);
        break;
      case Kind::kClipLo:
        adj_of(n.a).array() +=
            ((val(n.a) - n.cvec).array() > 0.0).select(bar.array(), 0.0);
        break;
      case Kind::kClipHi:
        adj_of(n.a).array() +=
            ((n.cvec - val(n.a)).array() > 0.0).select(bar.array(), 0.0);
        break;
      case Kind::kAdd:
        adj_of(n.a) += bar;
        adj_of(n.b) += bar;
        break;
      case Kind::kSub:
        adj_of(n.a) += bar;
        adj_of(n.b) -= bar;
        break;
      case Kind::kMul:
        adj_of(n.a).array() += bar.array() * val(n.b).array();
        adj_of(n.b).array() += bar.array() * val(n.a).array();
        break;
      case Kind::kMin:
        // Ties route to the first argument.
        adj_of(n.a).array() += (val(n.a).array() <= val(n.b).array()).select(bar.array(), 0.0);
        adj_of(n.b).array() += (val(n.a).array() > val(n.b).array()).select(bar.array(), 0.0);
        break;
      case Kind::kMax:
        adj_of(n.a).array() += (val(n.a).array() >= val(n.b).array()).select(bar.array(), 0.0);
        adj_of(n.b).array() += (val(n.a).array() < val(n.b).array()).select(bar.array(), 0.0);
        break;
      case Kind::kNeg:
        adj_of(n.a) -= bar;
        break;
      case Kind::kScale:
        adj_of(n.a) += n.s * bar;
        break;
      case Kind::kAddC:
        adj_of(n.a) += bar;
        break;
      case Kind::kSubFromC:
        adj_of(n.a) -= bar;
        break;
      case Kind::kExp:
        adj_of(n.a).array() += bar.array() * n.val.array();
        break;
      case Kind::kSqrt: {
        Vec& ga = adj_of(n.a);
        for (Eigen::Index i = 0; i < ga.size(); ++i) {
          if (n.val[i] > 0.0) ga[i] += bar[i] * 0.5 / n.val[i];
        }
        break;
      }
      case Kind::kGather: {
        Vec& ga = adj_of(n.a);
        for (size_t i = 0; i < n.idx.size(); ++i) {
          ga[n.idx[i]] += bar[static_cast<Eigen::Index>(i)];
        }
        break;
      }
      case Kind::kConcat: {
        const auto na = val(n.a).size();
        adj_of(n.a) += bar.head(na);
        adj_of(n.b) += bar.tail(bar.size() - na);
        break;
      }
      case Kind::kSum:
        adj_of(n.a).array() += bar[0];
        break;
      case Kind::kProd: {
        // Prefix/suffix products avoid dividing by zero entries.
        const Vec& x = val(n.a);
        const auto m = x.size();
        Vec pre(m), suf(m);
        double acc = 1.0;
        for (Eigen::Index i = 0; i < m; ++i) {
          pre[i] = acc;
          acc *= x[i];
        }
        acc = 1.0;
        for (Eigen::Index i = m - 1; i >= 0; --i) {
          suf[i] = acc;
          acc *= x[i];
        }
        adj_of(n.a).array() += bar[0] * (pre.array() * suf.array());
        break;
      }
      case Kind::kSumOf:
        for (NodeId x : n.many) adj_of(x) += bar;
        break;
      case Kind::kMinConst:
        adj_of(n.a).array() += (val(n.a).array() <= n.s).select(bar.array(), 0.0);
        break;
    }
  }
}

Vec Tape::block_grad(BlockRef b) const {
  require(b.id >= 0, "block_grad: bad block");
  if (b.is_matrix) {
    const auto& mb = mats_.at(static_cast<size_t>(b.id));
    require(mb.trainable, "block_grad: block is not trainable");
    Vec flat(mb.grad.size());
    int at = 0;
    for (int r = 0; r < mb.grad.rows(); ++r) {
      for (int c = 0; c < mb.grad.cols(); ++c) flat[at++] = mb.grad(r, c);
    }
    return flat;
  }
  const auto& vb = vecs_.at(static_cast<size_t>(b.id));
  require(vb.trainable, "block_grad: block is not trainable");
  return vb.grad;
}

Vec Tape::var_grad(NodeId var_node) const {
  check_node(var_node, "var_grad");
  const Node& n = nodes_[static_cast<size_t>(var_node)];
  require(n.kind == Kind::kVar, "var_grad: node is not a var leaf");
  if (n.adj.size() == 0) return Vec::Zero(n.val.size());
  return n.adj;
}

Vec Tape::trainable_grad() const {
  int total = 0;
  for (const auto& [is_mat, idx] : trainable_order_) {
    total += is_mat ? static_cast<int>(mats_[static_cast<size_t>(idx)].grad.size())
                    : static_cast<int>(vecs_[static_cast<size_t>(idx)].grad.size());
  }
  Vec flat(total);
  int at = 0;
  for (const auto& [is_mat, idx] : trainable_order_) {
    if (is_mat) {
      const Mat& g = mats_[static_cast<size_t>(idx)].grad;
      for (int r = 0; r < g.rows(); ++r) {
        for (int c = 0; c < g.cols(); ++c) flat[at++] = g(r, c);
      }
    } else {
      const Vec& g = vecs_[static_cast<size_t>(idx)].grad;
      for (int r = 0; r < g.size(); ++r) flat[at++] = g[r];
    }
  }
  return flat;
}

Vec Tape::gradient(NodeId output) {
  zero_grad();
  backward(output);
  return trainable_grad();
}

TapedNet register_net(Tape& t, const ReluNet& net, bool trainable) {
  TapedNet tn;
  for (const auto& l : net.layers()) {
    // Two statements: argument evaluation order is unspecified, and the
    // trainable-parameter layout must be weights first, then bias.
    Tape::BlockRef w = t.add_matrix(&l.weight, trainable);
    Tape::BlockRef b = t.add_vector(&l.bias, trainable);
    tn.layers.emplace_back(w, b);
  }
  return tn;
}

NodeId taped_forward(Tape& t, const TapedNet& tn, NodeId x) {
  NodeId z = t.affine(tn.layers[0].first, tn.layers[0].second, x);
  for (size_t i = 1; i < tn.layers.size(); ++i) {
    z = t.relu(z);
    z = t.affine(tn.layers[i].first, tn.layers[i].second, z);
  }
  return z;
}

IntervalNodes taped_ibp(Tape& t, const TapedNet& tn, IntervalNodes in) {
  NodeId lb = t.iv_affine_lo(tn.layers[0].first, tn.layers[0].second, in.lb, in.ub);
  NodeId ub = t.iv_affine_hi(tn.layers[0].first, tn.layers[0].second, in.lb, in.ub);
  for (size_t i = 1; i < tn.layers.size(); ++i) {
    lb = t.relu(lb);
    ub = t.relu(ub);
    NodeId nlb = t.iv_affine_lo(tn.layers[i].first, tn.layers[i].second, lb, ub);
    ub = t.iv_affine_hi(tn.layers[i].first, tn.layers[i].second, lb, ub);
    lb = nlb;
  }
  return {lb, ub};
}

IntervalNodes taped_clip(Tape& t, IntervalNodes a, const ActionClip& clip) {
  if (!clip.enabled) return a;
  // Monotone elementwise map: apply to both endpoints.
  NodeId lb = t.clip_high(t.clip_low(a.lb, clip.lo), clip.hi);
  NodeId ub = t.clip_high(t.clip_low(a.ub, clip.lo), clip.hi);
  return {lb, ub};
}

IntervalNodes taped_concat(Tape& t, IntervalNodes a, IntervalNodes b) {
  return {t.concat(a.lb, b.lb), t.concat(a.ub, b.ub)};
}

TapedSystem register_system(Tape& t, const ClosedLoopSystem& sys, bool trainable_controller) {
  TapedSystem ts;
  ts.controller = register_net(t, sys.controller, trainable_controller);
  ts.dynamics = register_net(t, sys.dynamics, false);
  ts.clip = sys.clip;
  ts.state_dim = sys.state_dim();
  return ts;
}

IntervalNodes taped_step_interval(Tape& t, const TapedSystem& ts, IntervalNodes s) {
  IntervalNodes a = taped_ibp(t, ts.controller, s);
  a = taped_clip(t, a, ts.clip);
  return taped_ibp(t, ts.dynamics, taped_concat(t, s, a));
}

NodeId taped_step_point(Tape& t, const TapedSystem& ts, NodeId s) {
  NodeId a = taped_forward(t, ts.controller, s);
  if (ts.clip.enabled) a = t.clip_high(t.clip_low(a, ts.clip.lo), ts.clip.hi);
  return taped_forward(t, ts.dynamics, t.concat(s, a));
}

}  // namespace vsc
