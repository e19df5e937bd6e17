#include "vsc/dict.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace vsc {

std::string ViolationSignature::str() const {
  std::string s = "{";
  for (size_t i = 0; i < constraints.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(constraints[i]);
  }
  return s + "}";
}

ViolationSignature violation_signature(const ClosedLoopSystem& sys, const Box& box, int K,
                                       const SafetySpec& spec, BoundMethod method) {
  require(K >= 1, "violation_signature: K must be >= 1");
  const std::vector<Box> boxes = method == BoundMethod::kIbp
                                     ? closed_loop_ibp_rollout(sys, box, K)
                                     : rollout_bounds(sys, box, K, method);
  std::vector<bool> hit(spec.constraint_count(), false);
  for (int t = 1; t <= K; ++t) {
    const std::vector<bool> flags = violation_flags(boxes[t - 1], spec, t);
    for (size_t i = 0; i < flags.size(); ++i) {
      if (flags[i]) hit[i] = true;
    }
  }
  ViolationSignature sig;
  for (size_t i = 0; i < hit.size(); ++i) {
    if (hit[i]) sig.constraints.push_back(static_cast<int>(i));
  }
  return sig;
}

std::vector<Cluster> cluster_regions(const std::vector<SignedCell>& cells) {
  std::map<ViolationSignature, std::vector<GridCell>> groups;
  for (const auto& sc : cells) groups[sc.sig].push_back(sc.cell);
  std::vector<Cluster> out;
  out.reserve(groups.size());
  for (auto& [sig, members] : groups) out.push_back({sig, std::move(members)});
  return out;
}

double DictEntry::volume_fraction() const {
  double v = 0.0;
  for (const auto& c : region) v += std::ldexp(1.0, -c.depth());
  return v;
}

int ControllerDictionary::lookup(const Vec& s0) const {
  for (size_t i = 0; i < entries.size(); ++i) {
    for (const auto& c : entries[i].region) {
      if (c.box.contains(s0)) return static_cast<int>(i);
    }
  }
  return -1;
}

double ControllerDictionary::covered_fraction() const {
  double v = 0.0;
  for (const auto& e : entries) v += e.volume_fraction();
  return v;
}

void save_dictionary(const ControllerDictionary& d, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir + "/manifest.txt", std::ios::binary);
  require(f.good(), "save_dictionary: cannot open " + dir + "/manifest.txt");
  f << "DICT v1\n";
  f << "k " << d.horizon << "\n";
  f << "entries " << d.entries.size() << "\n";
  for (size_t i = 0; i < d.entries.size(); ++i) {
    const DictEntry& e = d.entries[i];
    const std::string ctrl = "controller_" + std::to_string(i) + ".net";
    const std::string cert = "certificate_" + std::to_string(i) + ".cert";
    save_net(e.controller, dir + "/" + ctrl);
    save_certificate(e.certificate, dir + "/" + cert);
    const int dim = e.region.empty() ? 0 : e.region[0].box.dim();
    f << "entry " << i << " controller " << ctrl << " certificate " << cert << " cells "
      << e.region.size() << " dim " << dim << "\n";
    for (const auto& c : e.region) {
      f << c.id();
      for (int dd = 0; dd < dim; ++dd) {
        f << " " << fmt17(c.box.lb[dd]) << " " << fmt17(c.box.ub[dd]);
      }
      f << "\n";
    }
  }
  require(f.good(), "save_dictionary: write failed for " + dir + "/manifest.txt");
}

ControllerDictionary load_dictionary(const std::string& dir) {
  const std::string path = dir + "/manifest.txt";
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "load_dictionary: cannot open " + path);
  auto fail = [&](const std::string& msg) {
    throw std::invalid_argument(path + ": " + msg);
  };
  std::string line, tag;
  if (!std::getline(f, line) || line != "DICT v1") fail("bad header");
  ControllerDictionary d;
  size_t n = 0;
  {
    if (!std::getline(f, line)) fail("missing k");
    std::istringstream s(line);
    if (!(s >> tag >> d.horizon) || tag != "k") fail("bad k line");
    if (!std::getline(f, line)) fail("missing entries");
    std::istringstream s2(line);
    if (!(s2 >> tag >> n) || tag != "entries") fail("bad entries line");
  }
  for (size_t i = 0; i < n; ++i) {
    if (!std::getline(f, line)) fail("missing entry " + std::to_string(i));
    std::istringstream s(line);
    size_t idx = 0, cells = 0;
    int dim = 0;
    std::string ctrl, cert, t1, t2, t3, t4;
    if (!(s >> tag >> idx >> t1 >> ctrl >> t2 >> cert >> t3 >> cells >> t4 >> dim) ||
        tag != "entry" || t1 != "controller" || t2 != "certificate" || t3 != "cells" ||
        t4 != "dim" || idx != i) {
      fail("bad entry line " + std::to_string(i));
    }
    DictEntry e{{}, load_net(dir + "/" + ctrl), load_certificate(dir + "/" + cert)};
    for (size_t c = 0; c < cells; ++c) {
      if (!std::getline(f, line)) fail("missing cell in entry " + std::to_string(i));
      std::istringstream cs(line);
      std::string id;
      if (!(cs >> id) || id.empty() || id[0] != 'r') fail("bad cell id in entry " + std::to_string(i));
      GridCell cell;
      cell.path = id.substr(1);
      for (char ch : cell.path) {
        if (ch != '0' && ch != '1') fail("bad cell path " + id);
      }
      cell.box.lb = Vec(dim);
      cell.box.ub = Vec(dim);
      for (int dd = 0; dd < dim; ++dd) {
        if (!(cs >> cell.box.lb[dd] >> cell.box.ub[dd])) fail("bad cell bounds " + id);
      }
      e.region.push_back(std::move(cell));
    }
    d.entries.push_back(std::move(e));
  }
  return d;
}

namespace {

double cells_volume(const std::vector<GridCell>& cells) {
  double v = 0.0;
  for (const auto& c : cells) v += std::ldexp(1.0, -c.depth());
  return v;
}

// Bisect along the widest candidate dim, lowest index on ties.
int widest_dim(const Box& b, const std::vector<int>& cands) {
  int best = cands.empty() ? 0 : cands[0];
  double w = cands.empty() ? b.width(0) : b.width(cands[0]);
  if (cands.empty()) {
    for (int d = 1; d < b.dim(); ++d) {
      if (b.width(d) > w) w = b.width(best = d);
    }
    return best;
  }
  for (int d : cands) {
    if (b.width(d) > w) w = b.width(best = d);
  }
  return best;
}

}  // namespace

SynthesisResult synthesize(const EnvSpec& env, const ReluNet& dynamics,
                           const ReluNet& controller0, int K, const TrainingHyper& hyper,
                           const BabOptions& bab, const std::vector<GridCell>& grid,
                           int max_rounds, ThreadPool* pool, PhaseLogger logger) {
  require(K >= 1, "synthesize: K must be >= 1");
  require(max_rounds >= 1, "synthesize: max_rounds must be >= 1");
  require(!grid.empty(), "synthesize: empty grid");
  hyper.validate();
  const SafetySpec& spec = env.safety;

  SynthesisResult out;
  out.dict.horizon = K;
  std::vector<SignedCell> pending;

  // Splits a certificate into a dictionary entry (the certified cells) and
  // signed pending cells; returns the volume certified.
  auto absorb = [&](const ReluNet& ctrl, Certificate cert, const ClosedLoopSystem& sys) {
    std::vector<GridCell> safe;
    for (auto& rec : cert.records) {
      if (rec.safe) {
        safe.push_back(rec.cell);
      } else {
        ViolationSignature sig = violation_signature(sys, rec.cell.box, K, spec, bab.method);
        require(!sig.constraints.empty(),
                "synthesize: rejected cell " + rec.cell.id() + " has an empty signature");
        pending.push_back({rec.cell, std::move(sig)});
      }
    }
    const double vol = cells_volume(safe);
    if (!safe.empty()) out.dict.entries.push_back({std::move(safe), ctrl, std::move(cert)});
    return vol;
  };

  const ClosedLoopSystem sys0(controller0, dynamics, env.clip);
  Certificate cert0 = verify_cells(sys0, grid, K, spec, bab, pool);
  cert0.env = env.name;
  cert0.controller_id = fingerprint_hex(controller0);
  const double v0 = absorb(controller0, std::move(cert0), sys0);
  out.log.push_back({0, 0, v0, static_cast<int>(pending.size()), false, false});

  bool halved = false;
  int round = 0;
  while (!pending.empty() && round < max_rounds) {
    ++round;
    std::vector<Cluster> clusters = cluster_regions(pending);
    pending.clear();
    double vol = 0.0;
    for (const Cluster& cl : clusters) {
      CurriculumResult ct =
          curriculum_train(env, dynamics, controller0, K, hyper, cl.cells, pool, logger);
      const ClosedLoopSystem sysc(ct.controller, dynamics, env.clip);
      Certificate cert = verify_cells(sysc, cl.cells, K, spec, bab, pool);
      cert.env = env.name;
      cert.controller_id = fingerprint_hex(ct.controller);
      vol += absorb(ct.controller, std::move(cert), sysc);
    }
    SynthesisRound entry{round, static_cast<int>(clusters.size()), vol,
                         static_cast<int>(pending.size()), false, false};
    if (vol == 0.0 && !pending.empty()) {
      entry.stalled = true;
      if (!halved) {
        halved = true;
        entry.halved = true;
        const std::vector<int> cands =
            safety_relevant_dims(spec, pending[0].cell.box.dim());
        std::vector<SignedCell> split;
        split.reserve(pending.size() * 2);
        for (auto& sc : pending) {
          auto [a, b] = bisect_cell(sc.cell, widest_dim(sc.cell.box, cands));
          split.push_back({std::move(a), sc.sig});
          split.push_back({std::move(b), std::move(sc.sig)});
        }
        pending = std::move(split);
        out.log.push_back(entry);
        continue;
      }
      out.log.push_back(entry);
      break;
    }
    out.log.push_back(entry);
  }

  out.rounds = round;
  out.residual.reserve(pending.size());
  for (auto& sc : pending) out.residual.push_back(std::move(sc.cell));
  out.complete = out.residual.empty();
  // dyadic volumes make the accounting exact, so drift means lost cells
  require(out.dict.covered_fraction() + cells_volume(out.residual) == cells_volume(grid),
          "synthesize: covered + residual volume does not match the grid");
  return out;
}

}  // namespace vsc
