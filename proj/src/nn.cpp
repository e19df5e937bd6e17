#include "vsc/nn.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "vsc/rng.hpp"

namespace vsc {

namespace {

bool all_finite(const Mat& m) { return m.allFinite(); }
bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace

ReluNet::ReluNet(std::vector<AffineLayer> layers) : layers_(std::move(layers)) {
  require(!layers_.empty(), "ReluNet: needs at least one layer");
  for (size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    require(l.weight.rows() == l.bias.size(),
            "ReluNet: layer " + std::to_string(i) + " weight rows != bias size");
    require(l.weight.rows() > 0 && l.weight.cols() > 0,
            "ReluNet: layer " + std::to_string(i) + " is empty");
    require(all_finite(l.weight) && all_finite(l.bias),
            "ReluNet: layer " + std::to_string(i) + " has non-finite entries");
    if (i > 0) {
      require(l.weight.cols() == layers_[i - 1].weight.rows(),
              "ReluNet: layer " + std::to_string(i) + " input dim " +
                  std::to_string(l.weight.cols()) + " does not match previous output " +
                  std::to_string(layers_[i - 1].weight.rows()));
    }
  }
}

Vec ReluNet::forward(const Vec& x) const {
  require(x.size() == input_dim(), "ReluNet::forward: input dim mismatch");
  Vec z = layers_[0].weight * x + layers_[0].bias;
  for (size_t i = 1; i < layers_.size(); ++i) {
    z = z.cwiseMax(0.0);
    z = layers_[i].weight * z + layers_[i].bias;
  }
  return z;
}

std::vector<int> ReluNet::hidden_dims() const {
  std::vector<int> dims;
  for (size_t i = 0; i + 1 < layers_.size(); ++i) {
    dims.push_back(static_cast<int>(layers_[i].weight.rows()));
  }
  return dims;
}

int ReluNet::param_count() const {
  int n = 0;
  for (const auto& l : layers_) n += static_cast<int>(l.weight.size() + l.bias.size());
  return n;
}

ActionClip ActionClip::box(Vec lo, Vec hi) {
  require(lo.size() == hi.size(), "ActionClip: lo/hi size mismatch");
  require(lo.allFinite() && hi.allFinite(), "ActionClip: bounds must be finite");
  for (int i = 0; i < lo.size(); ++i) {
    require(lo[i] <= hi[i], "ActionClip: lo > hi in dim " + std::to_string(i));
  }
  ActionClip c;
  c.lo = std::move(lo);
  c.hi = std::move(hi);
  c.enabled = true;
  return c;
}

Vec ActionClip::apply(const Vec& a) const {
  if (!enabled) return a;
  require(a.size() == lo.size(), "ActionClip::apply: dim mismatch");
  // Mirrors the composed-network encoding (lo + relu(a - lo), then
  // hi - relu(hi - .)) so staged and composed evaluation agree as closely as
  // floating point allows.
  Vec low = lo.array() + (a - lo).array().max(0.0);
  return hi.array() - (hi - low).array().max(0.0);
}

ClosedLoopSystem::ClosedLoopSystem(ReluNet controller_, ReluNet dynamics_, ActionClip clip_)
    : controller(std::move(controller_)), dynamics(std::move(dynamics_)), clip(std::move(clip_)) {
  const int n = controller.input_dim();
  const int m = controller.output_dim();
  require(dynamics.input_dim() == n + m,
          "ClosedLoopSystem: dynamics input dim must be state_dim + action_dim");
  require(dynamics.output_dim() == n, "ClosedLoopSystem: dynamics output dim must be state_dim");
  if (clip.enabled) {
    require(clip.lo.size() == m, "ClosedLoopSystem: clip dim must match action dim");
  }
}

namespace {

// Carry block reproducing (relu(s), relu(-s)) from the previous carry pair.
// relu(s+ - s-) == relu(s) exactly because one of the pair is always zero.
void put_carry_rows(Mat& w, int row0, int col_sp, int n) {
  for (int i = 0; i < n; ++i) {
    w(row0 + i, col_sp + i) = 1.0;
    w(row0 + i, col_sp + n + i) = -1.0;
    w(row0 + n + i, col_sp + i) = -1.0;
    w(row0 + n + i, col_sp + n + i) = 1.0;
  }
}

}  // namespace

ReluNet compose_step(const ClosedLoopSystem& sys) {
  const int n = sys.state_dim();
  const int m = sys.action_dim();
  const auto& cl = sys.controller.layers();
  const auto& dl = sys.dynamics.layers();
  const int p = static_cast<int>(cl.size());
  const Mat d1_s = dl[0].weight.leftCols(n);
  const Mat d1_a = dl[0].weight.rightCols(m);

  std::vector<AffineLayer> out;

  if (!sys.clip.enabled && p == 1) {
    // Linear controller folds straight into the first dynamics layer.
    AffineLayer first;
    first.weight = d1_s + d1_a * cl[0].weight;
    first.bias = d1_a * cl[0].bias + dl[0].bias;
    out.push_back(std::move(first));
    for (size_t i = 1; i < dl.size(); ++i) out.push_back(dl[i]);
    return ReluNet(std::move(out));
  }

  // All remaining shapes keep a (relu(s), relu(-s)) carry pair alongside the
  // controller computation.
  auto carried = [&](const Mat& top, const Vec& top_b, int in_carry_col) {
    AffineLayer l;
    const int rows = static_cast<int>(top.rows()) + 2 * n;
    const int cols = static_cast<int>(top.cols()) + 2 * n;
    l.weight = Mat::Zero(rows, cols);
    l.weight.topLeftCorner(top.rows(), top.cols()) = top;
    l.bias = Vec::Zero(rows);
    l.bias.head(top.rows()) = top_b;
    put_carry_rows(l.weight, static_cast<int>(top.rows()), in_carry_col, n);
    return l;
  };

  // First layer always consumes the raw state and appends the (+s, -s) rows.
  auto state_layer = [&](const Mat& top, const Vec& top_b) {
    AffineLayer l;
    l.weight = Mat::Zero(top.rows() + 2 * n, n);
    l.weight.topRows(top.rows()) = top;
    l.bias = Vec::Zero(top.rows() + 2 * n);
    l.bias.head(top_b.size()) = top_b;
    for (int i = 0; i < n; ++i) {
      l.weight(top.rows() + i, i) = 1.0;
      l.weight(top.rows() + n + i, i) = -1.0;
    }
    return l;
  };

  if (p == 1) {
    // Clip is enabled here: first layer produces (a - lo, s, -s).
    out.push_back(state_layer(cl[0].weight, Vec(cl[0].bias - sys.clip.lo)));
  } else {
    out.push_back(state_layer(cl[0].weight, cl[0].bias));

    for (int i = 1; i + 1 < p; ++i) {
      out.push_back(carried(cl[i].weight, cl[i].bias, static_cast<int>(cl[i].weight.cols())));
    }

    if (sys.clip.enabled) {
      out.push_back(carried(cl[p - 1].weight, Vec(cl[p - 1].bias - sys.clip.lo),
                            static_cast<int>(cl[p - 1].weight.cols())));
    }
    // Without clip the controller output layer folds into the first dynamics
    // layer below.
  }

  if (sys.clip.enabled) {
    // (relu(a - lo), s+, s-) -> (hi - lo - relu(a - lo), s, -s); after ReLU the
    // first block is relu(hi - max(a, lo)).
    Mat top = Mat::Zero(m, m);
    top.diagonal().setConstant(-1.0);
    out.push_back(carried(top, Vec(sys.clip.hi - sys.clip.lo), m));

    // First dynamics layer reads a_clip = hi - relu(hi - max(a, lo)).
    AffineLayer dfirst;
    dfirst.weight = Mat::Zero(d1_s.rows(), m + 2 * n);
    dfirst.weight.leftCols(m) = -d1_a;
    dfirst.weight.middleCols(m, n) = d1_s;
    dfirst.weight.rightCols(n) = -d1_s;
    dfirst.bias = d1_a * sys.clip.hi + dl[0].bias;
    out.push_back(std::move(dfirst));
  } else {
    const Mat& cw = cl[p - 1].weight;
    AffineLayer dfirst;
    dfirst.weight = Mat::Zero(d1_s.rows(), cw.cols() + 2 * n);
    dfirst.weight.leftCols(cw.cols()) = d1_a * cw;
    dfirst.weight.middleCols(cw.cols(), n) = d1_s;
    dfirst.weight.rightCols(n) = -d1_s;
    dfirst.bias = d1_a * cl[p - 1].bias + dl[0].bias;
    out.push_back(std::move(dfirst));
  }

  for (size_t i = 1; i < dl.size(); ++i) out.push_back(dl[i]);
  return ReluNet(std::move(out));
}

ReluNet random_net(int input_dim, const std::vector<int>& hidden, int output_dim,
                   uint64_t seed) {
  require(input_dim > 0 && output_dim > 0, "random_net: dims must be positive");
  Rng rng(seed);
  std::vector<int> dims;
  dims.push_back(input_dim);
  for (int h : hidden) {
    require(h > 0, "random_net: hidden dims must be positive");
    dims.push_back(h);
  }
  dims.push_back(output_dim);

  std::vector<AffineLayer> layers;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    const int in = dims[i], outd = dims[i + 1];
    const double scale = std::sqrt(2.0 / in);
    AffineLayer l;
    l.weight = Mat(outd, in);
    for (int r = 0; r < outd; ++r) {
      for (int c = 0; c < in; ++c) l.weight(r, c) = scale * rng.normal();
    }
    l.bias = Vec::Zero(outd);
    layers.push_back(std::move(l));
  }
  return ReluNet(std::move(layers));
}

Vec to_param_vector(const ReluNet& net) {
  Vec flat(net.param_count());
  int at = 0;
  for (const auto& l : net.layers()) {
    for (int r = 0; r < l.weight.rows(); ++r) {
      for (int c = 0; c < l.weight.cols(); ++c) flat[at++] = l.weight(r, c);
    }
    for (int r = 0; r < l.bias.size(); ++r) flat[at++] = l.bias[r];
  }
  return flat;
}

ReluNet from_param_vector(const ReluNet& arch_like, const Vec& flat) {
  require(flat.size() == arch_like.param_count(),
          "from_param_vector: expected " + std::to_string(arch_like.param_count()) +
              " parameters, got " + std::to_string(flat.size()));
  std::vector<AffineLayer> layers;
  int at = 0;
  for (const auto& src : arch_like.layers()) {
    AffineLayer l;
    l.weight = Mat(src.weight.rows(), src.weight.cols());
    for (int r = 0; r < l.weight.rows(); ++r) {
      for (int c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = flat[at++];
    }
    l.bias = Vec(src.bias.size());
    for (int r = 0; r < l.bias.size(); ++r) l.bias[r] = flat[at++];
    layers.push_back(std::move(l));
  }
  return ReluNet(std::move(layers));
}

Mat forward_batch(const ReluNet& net, const Mat& X) {
  require(X.rows() == net.input_dim(), "forward_batch: input dim mismatch");
  Mat h = X;
  for (int i = 0; i < net.depth(); ++i) {
    const auto& l = net.layer(i);
    h = (l.weight * h).colwise() + l.bias;
    if (i + 1 < net.depth()) h = h.cwiseMax(0.0);
  }
  return h;
}

double mse_batch_gradient(const ReluNet& net, const Mat& X, const Mat& Y, Vec* grad) {
  require(X.rows() == net.input_dim(), "mse_batch_gradient: input dim mismatch");
  require(Y.rows() == net.output_dim() && Y.cols() == X.cols(),
          "mse_batch_gradient: label shape mismatch");
  const int depth = net.depth();
  const double inv_b = 1.0 / static_cast<double>(X.cols());

  // Pre-activations are kept so the backward pass can apply relu'(0) = 0.
  std::vector<Mat> post(static_cast<size_t>(depth) + 1);
  std::vector<Mat> pre(static_cast<size_t>(depth));
  post[0] = X;
  for (int i = 0; i < depth; ++i) {
    const auto& l = net.layer(i);
    pre[static_cast<size_t>(i)] = (l.weight * post[static_cast<size_t>(i)]).colwise() + l.bias;
    post[static_cast<size_t>(i) + 1] = (i + 1 < depth)
                                           ? pre[static_cast<size_t>(i)].cwiseMax(0.0)
                                           : pre[static_cast<size_t>(i)];
  }
  const Mat diff = post[static_cast<size_t>(depth)] - Y;
  const double loss = diff.squaredNorm() * inv_b;
  if (!grad) return loss;

  grad->setZero();
  require(grad->size() == net.param_count(), "mse_batch_gradient: grad size mismatch");
  Mat g = 2.0 * inv_b * diff;
  // Walk layers backward, writing each layer's slice of the flat gradient.
  std::vector<int> offsets(static_cast<size_t>(depth));
  int at = 0;
  for (int i = 0; i < depth; ++i) {
    offsets[static_cast<size_t>(i)] = at;
    const auto& l = net.layer(i);
    at += static_cast<int>(l.weight.size() + l.bias.size());
  }
  for (int i = depth - 1; i >= 0; --i) {
    const auto& l = net.layer(i);
    const Mat dW = g * post[static_cast<size_t>(i)].transpose();
    const Vec db = g.rowwise().sum();
    int p = offsets[static_cast<size_t>(i)];
    for (int r = 0; r < dW.rows(); ++r)
      for (int c = 0; c < dW.cols(); ++c) (*grad)[p++] = dW(r, c);
    for (int r = 0; r < db.size(); ++r) (*grad)[p++] = db[r];
    if (i > 0) {
      g = l.weight.transpose() * g;
      g = (pre[static_cast<size_t>(i) - 1].array() > 0.0).select(g, Mat::Zero(g.rows(), g.cols()));
    }
  }
  return loss;
}

std::string save_net_string(const ReluNet& net) {
  std::ostringstream os;
  os << "RELUNET v1 " << net.depth();
  os << " " << net.input_dim();
  for (const auto& l : net.layers()) os << " " << l.weight.rows();
  os << "\n";
  for (int i = 0; i < net.depth(); ++i) {
    const auto& l = net.layer(i);
    os << "LAYER " << i << "\n";
    os << "W\n";
    for (int r = 0; r < l.weight.rows(); ++r) {
      for (int c = 0; c < l.weight.cols(); ++c) {
        if (c) os << " ";
        os << fmt17(l.weight(r, c));
      }
      os << "\n";
    }
    os << "B\n";
    for (int r = 0; r < l.bias.size(); ++r) {
      if (r) os << " ";
      os << fmt17(l.bias[r]);
    }
    os << "\n";
  }
  return os.str();
}

void save_net(const ReluNet& net, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_net: cannot open " + path);
  f << save_net_string(net);
  if (!f) throw std::runtime_error("save_net: write failed for " + path);
}

namespace {

struct LineReader {
  std::istringstream in;
  std::string origin;
  int line_no = 0;

  LineReader(const std::string& text, std::string origin_) : in(text), origin(std::move(origin_)) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": " + what);
  }

  std::string next(const std::string& expected_what) {
    std::string line;
    if (!std::getline(in, line)) {
      ++line_no;
      fail("unexpected end of file, expected " + expected_what);
    }
    ++line_no;
    return line;
  }
};

std::vector<double> parse_doubles(LineReader& r, const std::string& line, int expected,
                                  const std::string& what) {
  std::istringstream is(line);
  std::vector<double> vals;
  double v;
  while (is >> v) vals.push_back(v);
  if (!is.eof()) r.fail("malformed number in " + what);
  if (static_cast<int>(vals.size()) != expected) {
    r.fail(what + ": expected " + std::to_string(expected) + " values, got " +
           std::to_string(vals.size()));
  }
  return vals;
}

}  // namespace

ReluNet load_net_string(const std::string& text, const std::string& origin) {
  LineReader r(text, origin);
  std::string header = r.next("RELUNET header");
  std::istringstream hs(header);
  std::string magic, version;
  int depth = 0;
  hs >> magic >> version >> depth;
  if (magic != "RELUNET") r.fail("not a RELUNET file (bad magic '" + magic + "')");
  if (version != "v1") r.fail("unsupported version '" + version + "'");
  if (!hs || depth < 1) r.fail("bad layer count in header");
  std::vector<int> dims(static_cast<size_t>(depth) + 1);
  for (auto& d : dims) {
    hs >> d;
    if (!hs || d < 1) r.fail("bad dimension list in header");
  }

  std::vector<AffineLayer> layers;
  for (int i = 0; i < depth; ++i) {
    const std::string tag = "LAYER " + std::to_string(i);
    std::string line = r.next("'" + tag + "'");
    if (line != tag) r.fail("expected '" + tag + "', got '" + line + "'");
    line = r.next("'W' section of layer " + std::to_string(i));
    if (line != "W") r.fail("expected 'W' section of layer " + std::to_string(i));
    AffineLayer l;
    const int rows = dims[static_cast<size_t>(i) + 1], cols = dims[static_cast<size_t>(i)];
    l.weight = Mat(rows, cols);
    for (int rr = 0; rr < rows; ++rr) {
      const auto vals = parse_doubles(r, r.next("weight row of layer " + std::to_string(i)), cols,
                                      "weight row " + std::to_string(rr));
      for (int c = 0; c < cols; ++c) l.weight(rr, c) = vals[static_cast<size_t>(c)];
    }
    line = r.next("'B' section of layer " + std::to_string(i));
    if (line != "B") r.fail("expected 'B' section of layer " + std::to_string(i));
    const auto vals = parse_doubles(r, r.next("bias row of layer " + std::to_string(i)), rows,
                                    "bias of layer " + std::to_string(i));
    l.bias = Vec(rows);
    for (int rr = 0; rr < rows; ++rr) l.bias[rr] = vals[static_cast<size_t>(rr)];
    if (!l.weight.allFinite() || !l.bias.allFinite()) {
      r.fail("non-finite value in layer " + std::to_string(i));
    }
    layers.push_back(std::move(l));
  }
  return ReluNet(std::move(layers));
}

ReluNet load_net(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_net: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return load_net_string(ss.str(), path);
}

uint64_t net_fingerprint(const ReluNet& net) { return fnv1a64(save_net_string(net)); }

std::string fingerprint_hex(const ReluNet& net) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, net_fingerprint(net));
  return buf;
}

}  // namespace vsc
