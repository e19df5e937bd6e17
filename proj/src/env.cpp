#include "vsc/env.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>

#include "vsc/optim.hpp"

#ifndef VSC_CONFIG_DIR
#define VSC_CONFIG_DIR "configs"
#endif

namespace vsc {
namespace {

EnvKind kind_from_name(const std::string& s, const std::string& origin) {
  if (s == "corridor") return EnvKind::kCorridor;
  if (s == "lane_following") return EnvKind::kLaneFollowing;
  if (s == "vehicle_avoidance") return EnvKind::kVehicleAvoidance;
  if (s == "quad2d") return EnvKind::kQuad2d;
  if (s == "quad3d") return EnvKind::kQuad3d;
  throw std::invalid_argument(origin + ": [env] kind: unknown kind '" + s + "'");
}

Vec to_vec(const std::vector<double>& v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  for (size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

BoundKind bound_kind_from_name(const std::string& s, const std::string& where) {
  if (s == "le") return BoundKind::kLe;
  if (s == "ge") return BoundKind::kGe;
  if (s == "abs_le") return BoundKind::kAbsLe;
  throw std::invalid_argument(where + ": unknown bound kind '" + s +
                              "' (expected le, ge or abs_le)");
}

// An obstacle value is pipe-separated named fields:
//   dims D... | lb V... | ub V...                         (static)
//   dims ... | lb ... | ub ... | end_lb ... | end_ub ... | steps N   (moving)
ObstacleTrack parse_obstacle(const ConfigFile& cf, const std::string& value) {
  const std::string where = cf.origin() + ": [safety] obstacle";
  std::map<std::string, std::vector<double>> fields;
  std::istringstream in(value);
  std::string part;
  while (std::getline(in, part, '|')) {
    std::istringstream ps(part);
    std::string name;
    if (!(ps >> name))
      throw std::invalid_argument(where + ": empty field in '" + value + "'");
    if (fields.count(name))
      throw std::invalid_argument(where + ": duplicate field '" + name + "'");
    std::vector<double> nums;
    std::string tok;
    while (ps >> tok) nums.push_back(cf.parse_double("safety", "obstacle", tok));
    fields[name] = nums;
  }
  auto need = [&](const std::string& name) -> const std::vector<double>& {
    auto it = fields.find(name);
    if (it == fields.end())
      throw std::invalid_argument(where + ": missing field '" + name + "'");
    return it->second;
  };
  ObstacleTrack ob;
  for (double d : need("dims")) {
    if (d != std::floor(d) || d < 0)
      throw std::invalid_argument(where + ": dims must be non-negative integers");
    ob.dims.push_back(static_cast<int>(d));
  }
  Vec lb = to_vec(need("lb")), ub = to_vec(need("ub"));
  if (static_cast<size_t>(lb.size()) != ob.dims.size() ||
      static_cast<size_t>(ub.size()) != ob.dims.size())
    throw std::invalid_argument(where + ": lb/ub length must match dims length");
  ob.start = Box(lb, ub);
  const bool moving = fields.count("end_lb") || fields.count("end_ub") || fields.count("steps");
  if (moving) {
    Vec elb = to_vec(need("end_lb")), eub = to_vec(need("end_ub"));
    if (static_cast<size_t>(elb.size()) != ob.dims.size() ||
        static_cast<size_t>(eub.size()) != ob.dims.size())
      throw std::invalid_argument(where + ": end_lb/end_ub length must match dims length");
    ob.end = Box(elb, eub);
    const auto& st = need("steps");
    if (st.size() != 1 || st[0] != std::floor(st[0]) || st[0] < 1)
      throw std::invalid_argument(where + ": steps must be a single positive integer");
    ob.move_steps = static_cast<int>(st[0]);
  } else {
    ob.end = ob.start;
    ob.move_steps = 0;
  }
  return ob;
}

}  // namespace

double EnvSpec::constant(const std::string& key) const {
  auto it = constants.find(key);
  require(it != constants.end(), "env " + name + ": missing physical constant '" + key + "'");
  return it->second;
}

double EnvSpec::reward(const Vec& s) const {
  double sq = 0.0;
  for (size_t i = 0; i < goal_dims.size(); ++i) {
    const double d = s[goal_dims[i]] - goal[static_cast<Eigen::Index>(i)];
    sq += d * d;
  }
  return std::exp(-std::sqrt(sq));
}

void EnvSpec::validate() const {
  require(state_dim >= 1 && action_dim >= 1, "env " + name + ": dims must be positive");
  require(dt > 0.0, "env " + name + ": dt must be positive");
  require(episode_len >= 1, "env " + name + ": episode_len must be >= 1");
  require(init_region.dim() == state_dim, "env " + name + ": init region dim mismatch");
  require(sample_region.dim() == state_dim, "env " + name + ": sample region dim mismatch");
  require(clip.enabled && clip.lo.size() == action_dim,
          "env " + name + ": action clip must cover every action dim");
  require(!goal_dims.empty() && goal.size() == static_cast<Eigen::Index>(goal_dims.size()),
          "env " + name + ": goal/goal_dims mismatch");
  for (int d : goal_dims)
    require(d >= 0 && d < state_dim, "env " + name + ": goal dim out of range");
  require(sample_region.contains(init_region, 0.0),
          "env " + name + ": sample region must cover the initial region");
  safety.validate(state_dim);
  require(region_cost(init_region, safety, 0) == 0.0,
          "env " + name + ": initial region intersects the unsafe set");
  require(!dynamics_hidden.empty(), "env " + name + ": dynamics_hidden must be non-empty");
  for (int h : dynamics_hidden)
    require(h >= 1, "env " + name + ": dynamics_hidden entries must be positive");
  require(fit_rmse_limit > 0.0, "env " + name + ": rmse_limit must be positive");
  require(precision > 0.0, "env " + name + ": precision must be positive");
  for (int d : terminate_dims)
    require(d >= 0 && d < state_dim, "env " + name + ": terminate dim out of range");
  if (!terminate_dims.empty())
    require(terminate_abs > 0.0, "env " + name + ": terminate_abs must be positive");
}

EnvSpec EnvSpec::from_config(const ConfigFile& cf) {
  EnvSpec env;
  env.name = cf.get("env", "name");
  env.kind = kind_from_name(cf.get("env", "kind"), cf.origin());
  env.state_dim = cf.get_int("env", "state_dim");
  env.action_dim = cf.get_int("env", "action_dim");
  env.dt = cf.get_double("env", "dt");
  env.episode_len = cf.get_int("env", "episode_len");
  env.goal_dims = cf.get_ints("env", "goal_dims");
  env.goal = to_vec(cf.get_doubles("env", "goal"));
  env.init_region = Box(to_vec(cf.get_doubles("env", "init_lb")),
                        to_vec(cf.get_doubles("env", "init_ub")));
  env.terminate_dims = cf.get_ints("env", "terminate_dims");
  env.terminate_abs = cf.get_double("env", "terminate_abs");

  for (const auto& [key, value] : cf.section_items("constants"))
    env.constants[key] = cf.parse_double("constants", key, value);

  env.clip = ActionClip::box(to_vec(cf.get_doubles("clip", "lo")),
                             to_vec(cf.get_doubles("clip", "hi")));

  for (const std::string& value : cf.get_all("safety", "state_bound")) {
    std::istringstream in(value);
    std::string dim_tok, kind_tok, thresh_tok;
    if (!(in >> dim_tok >> kind_tok >> thresh_tok) || !(in >> std::ws).eof())
      throw std::invalid_argument(cf.origin() +
                                  ": [safety] state_bound: expected 'DIM KIND THRESHOLD', got '" +
                                  value + "'");
    StateBound b;
    b.dim = static_cast<int>(cf.parse_double("safety", "state_bound", dim_tok));
    b.kind = bound_kind_from_name(kind_tok, cf.origin() + ": [safety] state_bound");
    b.threshold = cf.parse_double("safety", "state_bound", thresh_tok);
    env.safety.state_bounds.push_back(b);
  }
  for (const std::string& value : cf.get_all("safety", "obstacle"))
    env.safety.obstacles.push_back(parse_obstacle(cf, value));

  env.sample_region = Box(to_vec(cf.get_doubles("dataset", "state_lb")),
                          to_vec(cf.get_doubles("dataset", "state_ub")));
  env.dynamics_hidden = cf.get_ints("dataset", "hidden");
  env.fit_rmse_limit = cf.get_double("dataset", "rmse_limit");
  env.precision = cf.get_double("verify", "precision");

  env.validate();
  return env;
}

std::string config_dir() {
  if (const char* dir = std::getenv("VSC_CONFIG_DIR"); dir && *dir) return dir;
  return VSC_CONFIG_DIR;
}

EnvSpec load_env(const std::string& name) {
  return EnvSpec::from_config(ConfigFile::parse_file(config_dir() + "/" + name + ".cfg"));
}

Vec ode_rhs(const EnvSpec& env, const Vec& s, const Vec& a) {
  require(s.size() == env.state_dim && a.size() == env.action_dim,
          "ode_rhs: dimension mismatch for env " + env.name);
  Vec ds(env.state_dim);
  switch (env.kind) {
    case EnvKind::kCorridor: {
      ds[0] = a[0];
      break;
    }
    case EnvKind::kLaneFollowing: {
      const double lr = env.constant("l_r"), lf = env.constant("l_f");
      const double beta = std::atan(lr / (lf + lr) * std::tan(a[1]));
      ds[0] = s[2] * std::sin(s[1] + beta);
      ds[1] = s[2] / lr * std::sin(beta);
      ds[2] = a[0];
      break;
    }
    case EnvKind::kVehicleAvoidance: {
      // Heading is measured from the +y axis, so theta = 0 drives toward +y.
      const double lr = env.constant("l_r"), lf = env.constant("l_f");
      const double beta = std::atan(lr / (lf + lr) * std::tan(a[1]));
      ds[0] = s[3] * std::sin(s[2] + beta);
      ds[1] = s[3] * std::cos(s[2] + beta);
      ds[2] = s[3] / lr * std::sin(beta);
      ds[3] = a[0];
      break;
    }
    case EnvKind::kQuad2d: {
      const double m = env.constant("m"), arm = env.constant("arm_l");
      const double inertia = env.constant("inertia"), g = env.constant("g");
      const double thrust = a[0] + a[1];
      ds[0] = s[3];
      ds[1] = s[4];
      ds[2] = s[5];
      ds[3] = -std::sin(s[2]) * thrust / m;
      ds[4] = std::cos(s[2]) * thrust / m - g;
      ds[5] = arm / inertia * (a[0] - a[1]);
      break;
    }
    case EnvKind::kQuad3d: {
      const double m = env.constant("m"), arm = env.constant("arm_len");
      const double kz = env.constant("kappa_z"), g = env.constant("g");
      const double ix = env.constant("inertia_x"), iy = env.constant("inertia_y");
      const double iz = env.constant("inertia_z");
      const double thrust = a.sum();
      const double tau_x = arm * (a[1] - a[3]);
      const double tau_y = arm * (a[2] - a[0]);
      const double tau_z = kz * (a[0] - a[1] + a[2] - a[3]);
      const double sp = std::sin(s[3]), cp = std::cos(s[3]);   // roll
      const double st = std::sin(s[4]), ct = std::cos(s[4]);   // pitch
      const double sy = std::sin(s[5]), cy = std::cos(s[5]);   // yaw
      const double wx = s[9], wy = s[10], wz = s[11];
      ds[0] = s[6];
      ds[1] = s[7];
      ds[2] = s[8];
      ds[3] = wx + sp * (st / ct) * wy + cp * (st / ct) * wz;
      ds[4] = cp * wy - sp * wz;
      ds[5] = sp / ct * wy + cp / ct * wz;
      ds[6] = (cp * st * cy + sp * sy) * thrust / m;
      ds[7] = (cp * st * sy - sp * cy) * thrust / m;
      ds[8] = ct * cp * thrust / m - g;
      ds[9] = (tau_x - (iz - iy) * wy * wz) / ix;
      ds[10] = (tau_y - (ix - iz) * wz * wx) / iy;
      ds[11] = (tau_z - (iy - ix) * wx * wy) / iz;
      break;
    }
  }
  return ds;
}

Vec euler_step(const EnvSpec& env, const Vec& s, const Vec& a) {
  return s + env.dt * ode_rhs(env, s, a);
}

DynamicsDataset generate_dataset(const EnvSpec& env, int n, uint64_t seed) {
  require(n >= 1, "generate_dataset: n must be >= 1");
  DynamicsDataset ds;
  ds.state_dim = env.state_dim;
  ds.action_dim = env.action_dim;
  ds.seed = seed;
  ds.states = Mat(n, env.state_dim);
  ds.actions = Mat(n, env.action_dim);
  ds.labels = Mat(n, env.state_dim);
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const Vec s = env.sample_region.sample(rng);
    Vec a(env.action_dim);
    for (int d = 0; d < env.action_dim; ++d) a[d] = rng.uniform(env.clip.lo[d], env.clip.hi[d]);
    ds.states.row(i) = s.transpose();
    ds.actions.row(i) = a.transpose();
    ds.labels.row(i) = euler_step(env, s, a).transpose();
  }
  ds.train_count = n - n / 10;
  return ds;
}

namespace {

constexpr char kDatasetMagic[8] = {'V', 'S', 'C', 'D', 'S', 'E', 'T', '1'};

void write_raw(std::ofstream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_raw(std::ifstream& in, void* p, size_t n, const std::string& path,
              const std::string& what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw std::invalid_argument(path + ": truncated dataset file while reading " + what);
}

}  // namespace

void save_dataset(const DynamicsDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "save_dataset: cannot open " + path);
  write_raw(out, kDatasetMagic, sizeof(kDatasetMagic));
  const int32_t header[4] = {static_cast<int32_t>(ds.state_dim),
                             static_cast<int32_t>(ds.action_dim),
                             static_cast<int32_t>(ds.count()),
                             static_cast<int32_t>(ds.train_count)};
  write_raw(out, header, sizeof(header));
  write_raw(out, &ds.seed, sizeof(ds.seed));
  // Eigen matrices are column-major, so each state/action/label dimension is
  // one contiguous column block.
  write_raw(out, ds.states.data(), sizeof(double) * static_cast<size_t>(ds.states.size()));
  write_raw(out, ds.actions.data(), sizeof(double) * static_cast<size_t>(ds.actions.size()));
  write_raw(out, ds.labels.data(), sizeof(double) * static_cast<size_t>(ds.labels.size()));
  require(static_cast<bool>(out), "save_dataset: write failed for " + path);
}

DynamicsDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("load_dataset: cannot open " + path);
  char magic[8];
  read_raw(in, magic, sizeof(magic), path, "magic");
  if (std::memcmp(magic, kDatasetMagic, sizeof(magic)) != 0)
    throw std::invalid_argument(path + ": not a dataset file (bad magic)");
  int32_t header[4];
  read_raw(in, header, sizeof(header), path, "header");
  DynamicsDataset ds;
  ds.state_dim = header[0];
  ds.action_dim = header[1];
  const int count = header[2];
  ds.train_count = header[3];
  if (ds.state_dim < 1 || ds.action_dim < 1 || count < 1)
    throw std::invalid_argument(path + ": corrupt dataset header (non-positive dims)");
  if (ds.train_count < 1 || ds.train_count > count)
    throw std::invalid_argument(path + ": corrupt dataset header (train_count out of range)");
  read_raw(in, &ds.seed, sizeof(ds.seed), path, "seed");
  ds.states = Mat(count, ds.state_dim);
  ds.actions = Mat(count, ds.action_dim);
  ds.labels = Mat(count, ds.state_dim);
  read_raw(in, ds.states.data(), sizeof(double) * static_cast<size_t>(ds.states.size()), path,
           "states");
  read_raw(in, ds.actions.data(), sizeof(double) * static_cast<size_t>(ds.actions.size()), path,
           "actions");
  read_raw(in, ds.labels.data(), sizeof(double) * static_cast<size_t>(ds.labels.size()), path,
           "labels");
  char extra;
  if (in.read(&extra, 1); in.gcount() != 0)
    throw std::invalid_argument(path + ": trailing bytes after dataset payload");
  return ds;
}

FitResult fit_dynamics(const DynamicsDataset& ds, const std::vector<int>& hidden,
                       const FitOptions& opt) {
  const int n = ds.count();
  require(ds.train_count >= 1, "fit_dynamics: empty training split");
  require(n - ds.train_count >= 1, "fit_dynamics: empty validation split");
  require(opt.batch >= 1 && opt.epochs >= 0, "fit_dynamics: bad batch/epoch settings");
  const int in_dim = ds.state_dim + ds.action_dim;

  Mat x_all(in_dim, n);
  x_all.topRows(ds.state_dim) = ds.states.transpose();
  x_all.bottomRows(ds.action_dim) = ds.actions.transpose();
  const Mat y_all = ds.labels.transpose();

  // Train in standardized coordinates (per-dim mean/std over the training
  // split) and fold the two affine maps into the first and last layers
  // afterwards, which keeps the returned net a plain ReluNet in original
  // units. Raw-scale targets make small nets stall far from the optimum.
  const int nt = ds.train_count;
  Vec mu_x = x_all.leftCols(nt).rowwise().mean();
  Vec mu_y = y_all.leftCols(nt).rowwise().mean();
  Vec sd_x = ((x_all.leftCols(nt).colwise() - mu_x).rowwise().squaredNorm() / nt)
                 .cwiseSqrt();
  Vec sd_y = ((y_all.leftCols(nt).colwise() - mu_y).rowwise().squaredNorm() / nt)
                 .cwiseSqrt();
  for (int d = 0; d < sd_x.size(); ++d)
    if (sd_x[d] < 1e-12) sd_x[d] = 1.0;
  for (int d = 0; d < sd_y.size(); ++d)
    if (sd_y[d] < 1e-12) sd_y[d] = 1.0;
  const Mat xn = sd_x.cwiseInverse().asDiagonal() * (x_all.colwise() - mu_x);
  const Mat yn = sd_y.cwiseInverse().asDiagonal() * (y_all.colwise() - mu_y);

  ReluNet arch = random_net(in_dim, hidden, ds.state_dim, opt.seed);
  Vec params = to_param_vector(arch);
  Vec grad(params.size());
  Adam adam(static_cast<int>(params.size()), opt.lr);
  Rng rng = Rng::derive(opt.seed, 0x464954);  // shuffle stream

  std::vector<int> order(static_cast<size_t>(nt));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    adam.set_lr(opt.lr * std::pow(opt.lr_decay, epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.below(i)]);
    for (int start = 0; start < nt; start += opt.batch) {
      const int b = std::min(opt.batch, nt - start);
      Mat xb(in_dim, b), yb(ds.state_dim, b);
      for (int j = 0; j < b; ++j) {
        xb.col(j) = xn.col(order[static_cast<size_t>(start + j)]);
        yb.col(j) = yn.col(order[static_cast<size_t>(start + j)]);
      }
      const ReluNet net = from_param_vector(arch, params);
      const double loss = mse_batch_gradient(net, xb, yb, &grad);
      if (!std::isfinite(loss))
        throw std::runtime_error("fit_dynamics: training diverged (non-finite loss)");
      adam.step(params, grad);
    }
  }

  // Mini-batch noise leaves a plateau well above the attainable error, so a
  // deterministic full-batch phase (on up to 20k training samples) finishes
  // the descent. Matters most when the target is exactly representable.
  if (opt.polish_steps > 0) {
    const int np = std::min(nt, 20000);
    const Mat xb = xn.leftCols(np);
    const Mat yb = yn.leftCols(np);
    const double lr0 = opt.lr * 0.2;
    const double decay = std::pow(0.01, 1.0 / opt.polish_steps);
    Adam polish(static_cast<int>(params.size()), lr0);
    for (int i = 0; i < opt.polish_steps; ++i) {
      polish.set_lr(lr0 * std::pow(decay, i));
      const ReluNet net = from_param_vector(arch, params);
      const double loss = mse_batch_gradient(net, xb, yb, &grad);
      if (!std::isfinite(loss))
        throw std::runtime_error("fit_dynamics: training diverged (non-finite loss)");
      polish.step(params, grad);
    }
  }

  // The last layer is linear in its parameters, so finish with its exact
  // least-squares solution on the learned features (QR, deterministic). This
  // is never worse on the training split and reaches near-machine accuracy
  // when the target is representable.
  std::vector<AffineLayer> layers = from_param_vector(arch, params).layers();
  if (nt >= in_dim + 2) {
    const int np = std::min(nt, 50000);
    Mat h = xn.leftCols(np);
    for (size_t i = 0; i + 1 < layers.size(); ++i)
      h = ((layers[i].weight * h).colwise() + layers[i].bias).cwiseMax(0.0);
    const int hd = static_cast<int>(h.rows());
    Mat design(np, hd + 1);
    design.leftCols(hd) = h.transpose();
    design.col(hd).setOnes();
    const Mat theta = design.colPivHouseholderQr().solve(yn.leftCols(np).transpose());
    layers.back().weight = theta.topRows(hd).transpose();
    layers.back().bias = theta.row(hd).transpose();
  }
  AffineLayer& first = layers.front();
  first.weight = first.weight * sd_x.cwiseInverse().asDiagonal();
  first.bias = first.bias - first.weight * mu_x;
  AffineLayer& last = layers.back();
  last.weight = sd_y.asDiagonal() * last.weight;
  last.bias = sd_y.cwiseProduct(last.bias) + mu_y;
  FitResult res{ReluNet(std::move(layers)), Vec(ds.state_dim), 0.0};

  const int nv = n - nt;
  const Mat pred = forward_batch(res.net, x_all.rightCols(nv));
  const Mat err = pred - y_all.rightCols(nv);
  for (int d = 0; d < ds.state_dim; ++d)
    res.rmse_per_dim[d] = std::sqrt(err.row(d).squaredNorm() / nv);
  res.max_rmse = res.rmse_per_dim.maxCoeff();
  return res;
}

EpisodeResult simulate_episode(const EnvSpec& env, const ReluNet& dynamics,
                               const ReluNet& controller, const Vec& s0) {
  require(env.init_region.contains(s0, 0.0),
          "simulate_episode: s0 outside the initial region of " + env.name);
  const ReluNet step = compose_step(ClosedLoopSystem(controller, dynamics, env.clip));
  EpisodeResult res;
  Vec x = s0;
  res.states.push_back(x);
  for (int t = 1; t <= env.episode_len; ++t) {
    x = step.forward(x);
    res.states.push_back(x);
    res.total_reward += env.reward(x);
    if (point_violates(x, env.safety, t)) res.violation_steps.push_back(t);
    res.steps_taken = t;
    bool stop = false;
    for (int d : env.terminate_dims)
      if (std::abs(x[d]) > env.terminate_abs) stop = true;
    if (stop) {
      res.early_terminated = true;
      break;
    }
  }
  return res;
}

EpisodeResult simulate_episode(const EnvSpec& env, const ReluNet& dynamics,
                               const ControllerChooser& choose, const Vec& s0) {
  const ReluNet* c = choose(s0);
  require(c != nullptr, "simulate_episode: no controller covers the given initial state");
  return simulate_episode(env, dynamics, *c, s0);
}

double empirical_safety(const EnvSpec& env, const ReluNet& dynamics,
                        const ControllerChooser& choose, int k, int n_samples,
                        uint64_t seed, ThreadPool* pool) {
  require(n_samples >= 1, "empirical_safety: n_samples must be >= 1");
  require(k >= 0, "empirical_safety: k must be >= 0");

  // Composed step nets are cached per controller; pointers stay valid because
  // the map only grows.
  std::mutex mu;
  std::map<const ReluNet*, std::unique_ptr<ReluNet>> steps;
  auto step_for = [&](const ReluNet* c) -> const ReluNet* {
    std::lock_guard<std::mutex> lock(mu);
    auto it = steps.find(c);
    if (it == steps.end())
      it = steps
               .emplace(c, std::make_unique<ReluNet>(
                               compose_step(ClosedLoopSystem(*c, dynamics, env.clip))))
               .first;
    return it->second.get();
  };

  std::vector<char> safe(static_cast<size_t>(n_samples), 0);
  auto run_one = [&](int i) {
    Rng rng = Rng::derive(seed, static_cast<uint64_t>(i));
    const Vec s0 = env.init_region.sample(rng);
    const ReluNet* c = choose(s0);
    if (!c) return;  // uncovered start counts as unsafe
    const ReluNet* step = step_for(c);
    Vec x = s0;
    for (int t = 1; t <= k; ++t) {
      x = step->forward(x);
      if (point_violates(x, env.safety, t)) return;
    }
    safe[static_cast<size_t>(i)] = 1;
  };
  if (pool)
    pool->parallel_for(n_samples, run_one);
  else
    for (int i = 0; i < n_samples; ++i) run_one(i);

  long long count = 0;
  for (char c : safe) count += c;
  return static_cast<double>(count) / static_cast<double>(n_samples);
}

}  // namespace vsc
