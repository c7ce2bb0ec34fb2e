#pragma once

// Molecular dynamics and inference harnesses: velocity-Verlet NVE with an
// energy-conservation report, monotone FIRE-style relaxation, wall-clock
// throughput benchmarking, and router-usage statistics.

#include <chrono>
#include <iomanip>

#include "molepot/train.hpp"

namespace molepot {

// Raw-unit energy/force provider for the simulation harnesses. Usually a
// model plus the referencing scheme it was trained with; the analytic task
// oracles plug in the same way, which is how the integrators are validated
// independently of any model.
struct Calculator {
  using EvalFn =
      std::function<std::pair<double, std::vector<Vec3>>(const AtomicSystem&, const NeighborGraph&)>;

  EvalFn fn;
  double cutoff = 0.0;

  // `direct` switches to the direct-force head (the non-conservative
  // stage-1 output) while keeping the same energy.
  static Calculator for_model(const PotentialModel& model, const ReferenceScheme& scheme,
                              bool direct = false) {
    Calculator c;
    c.cutoff = model.cfg.cutoff;
    const double sigma = scheme.sigma;
    c.fn = [&model, &scheme, sigma, direct](const AtomicSystem& sys, const NeighborGraph& graph) {
      double e_model;
      std::vector<Vec3> f;
      if (direct) {
        Tape tape;
        ForwardOptions opt;
        opt.direct_forces = true;
        const auto fw = model.forward(tape, sys, graph, opt);
        e_model = tape.value(fw.energy).v[0];
        const auto& fm = tape.value(fw.direct_forces);
        f.resize(sys.size());
        for (size_t i = 0; i < sys.size(); ++i)
          for (int d = 0; d < 3; ++d) f[i][d] = fm(static_cast<int>(i), d);
      } else {
        std::tie(e_model, f) = model.energy_forces(sys, graph);
      }
      for (auto& fi : f)
        for (int d = 0; d < 3; ++d) fi[d] *= sigma;
      return std::pair{scheme.raw_energy(sys, e_model), std::move(f)};
    };
    return c;
  }

  static Calculator for_oracle(const TaskOracle& oracle) {
    Calculator c;
    c.cutoff = oracle.cutoff;
    c.fn = [&oracle](const AtomicSystem& sys, const NeighborGraph&) {
      return std::pair{oracle.energy(sys), oracle.forces(sys)};
    };
    return c;
  }

  std::pair<double, std::vector<Vec3>> eval(const AtomicSystem& sys,
                                            const NeighborGraph& graph) const {
    return fn(sys, graph);
  }

  std::pair<double, std::vector<Vec3>> eval(const AtomicSystem& sys) const {
    return fn(sys, build_graph(sys, cutoff));
  }
};

struct MDConfig {
  double dt = 1e-3;
  int n_steps = 1000;
  double temperature = 0.0;  // of the initial velocities, k_B = 1
  std::uint64_t seed = 0;
  int rebuild_graph_every = 1;
  double drift_threshold = 1e-4;
  double k_ref = 1.0;  // per-atom energy scale for the drift metric

  void validate() const {
    if (dt <= 0.0 || n_steps < 1 || rebuild_graph_every < 1)
      throw std::invalid_argument("MD config: dt > 0, n_steps >= 1 required");
  }
};

struct ConservationReport {
  std::vector<double> total_energy;
  double drift = 0.0;  // max |E(t) - E(0)| / (n_atoms * k_ref)
  bool pass = false;
};

struct MDResult {
  std::vector<AtomicSystem> trajectory;  // one frame per step, labels carry PE and forces
  ConservationReport report;
};

inline double kinetic_energy(const std::vector<Vec3>& v) {
  double ke = 0.0;
  for (const auto& vi : v) ke += 0.5 * dot(vi, vi);
  return ke;
}

// Velocity-Verlet NVE, unit masses. Aborts when any pair distance falls
// below 0.1 (a blown-up trajectory).
inline MDResult run_nve(const Calculator& calc, const AtomicSystem& initial, const MDConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(initial.size());
  AtomicSystem sys = initial;
  std::vector<Vec3> vel(n, Vec3{0, 0, 0});
  if (cfg.temperature > 0.0) {
    Rng rng(cfg.seed);
    const double s = std::sqrt(cfg.temperature);
    for (auto& v : vel)
      for (int d = 0; d < 3; ++d) v[d] = s * rng.normal();
  }

  MDResult out;
  out.trajectory.reserve(cfg.n_steps);
  NeighborGraph graph = build_graph(sys, calc.cutoff);
  auto [pe, forces] = calc.eval(sys, graph);
  const double e0 = pe + kinetic_energy(vel);
  out.report.total_energy.push_back(e0);

  for (int step = 0; step < cfg.n_steps; ++step) {
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d) {
        vel[i][d] += 0.5 * cfg.dt * forces[i][d];
        sys.positions[i][d] += cfg.dt * vel[i][d];
      }
    if (step % cfg.rebuild_graph_every == 0) graph = build_graph(sys, calc.cutoff);
    for (size_t e = 0; e < graph.n_edges(); ++e)
      if (graph.edge_lengths[e] < 0.1)
        throw std::runtime_error("MD blow-up at step " + std::to_string(step) +
                                 ": pair distance below 0.1");
    std::tie(pe, forces) = calc.eval(sys, graph);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d) vel[i][d] += 0.5 * cfg.dt * forces[i][d];

    const double e_tot = pe + kinetic_energy(vel);
    out.report.total_energy.push_back(e_tot);
    AtomicSystem frame = sys;
    frame.labels = SystemLabels{pe, forces};
    out.trajectory.push_back(std::move(frame));
  }

  double drift = 0.0;
  for (double e : out.report.total_energy) drift = std::max(drift, std::abs(e - e0));
  out.report.drift = drift / (n * cfg.k_ref);
  out.report.pass = out.report.drift <= cfg.drift_threshold;
  return out;
}

struct RelaxResult {
  AtomicSystem system;
  int steps = 0;
  std::vector<double> energy_trace;  // accepted steps only, non-increasing
  double final_fmax = 0.0;
  bool converged = false;
};

// FIRE-style adaptive descent with an explicit monotonicity guard: a step
// that raises the energy is rejected, velocity reset, time step reduced.
// 50 consecutive rejections abort.
inline RelaxResult relax(const Calculator& calc, const AtomicSystem& initial, int max_steps,
                         double fmax) {
  const int n = static_cast<int>(initial.size());
  const double dt0 = 0.02, dt_max = 0.2, f_inc = 1.1, f_dec = 0.5, alpha0 = 0.1, f_alpha = 0.99;
  const int n_min = 5;

  RelaxResult out;
  out.system = initial;
  auto [energy, forces] = calc.eval(out.system);
  out.energy_trace.push_back(energy);

  auto max_force = [&](const std::vector<Vec3>& f) {
    double m = 0.0;
    for (const auto& fi : f) m = std::max(m, norm(fi));
    return m;
  };
  out.final_fmax = max_force(forces);
  if (out.final_fmax <= fmax) {
    out.converged = true;
    return out;
  }

  std::vector<Vec3> vel(n, Vec3{0, 0, 0});
  double dt = dt0, alpha = alpha0;
  int uphill_count = 0, rejects = 0;
  for (int step = 0; step < max_steps; ++step) {
    // FIRE velocity mixing
    double p = 0.0, vnorm = 0.0, fnorm = 0.0;
    for (int i = 0; i < n; ++i) {
      p += dot(vel[i], forces[i]);
      vnorm += dot(vel[i], vel[i]);
      fnorm += dot(forces[i], forces[i]);
    }
    vnorm = std::sqrt(vnorm);
    fnorm = std::sqrt(fnorm);
    if (p > 0.0) {
      for (int i = 0; i < n; ++i)
        for (int d = 0; d < 3; ++d)
          vel[i][d] = (1.0 - alpha) * vel[i][d] + alpha * vnorm * forces[i][d] / std::max(fnorm, 1e-300);
      if (++uphill_count > n_min) {
        dt = std::min(dt * f_inc, dt_max);
        alpha *= f_alpha;
      }
    } else {
      uphill_count = 0;
      for (auto& v : vel) v = Vec3{0, 0, 0};
      dt *= f_dec;
      alpha = alpha0;
    }
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d) vel[i][d] += dt * forces[i][d];
    AtomicSystem proposal = out.system;
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d) proposal.positions[i][d] += dt * vel[i][d];

    const auto [e_new, f_new] = calc.eval(proposal);
    if (e_new > energy) {
      for (auto& v : vel) v = Vec3{0, 0, 0};
      dt *= f_dec;
      uphill_count = 0;
      if (++rejects >= 50)
        throw std::runtime_error("relaxation diverged: 50 consecutive uphill proposals");
      continue;
    }
    rejects = 0;
    out.system = std::move(proposal);
    energy = e_new;
    forces = f_new;
    out.energy_trace.push_back(energy);
    ++out.steps;
    out.final_fmax = max_force(forces);
    if (out.final_fmax <= fmax) {
      out.converged = true;
      break;
    }
  }
  return out;
}

// ---- inference benchmarking ----

struct BenchCell {
  std::string name;
  int n_atoms = 0;
  double steps_per_second = 0.0;
  bool oom = false;
};

struct BenchReport {
  std::vector<BenchCell> cells;

  double throughput(const std::string& name, int n_atoms) const {
    for (const auto& c : cells)
      if (c.name == name && c.n_atoms == n_atoms && !c.oom) return c.steps_per_second;
    throw std::invalid_argument("bench report has no usable cell for " + name);
  }

  std::string to_text() const {
    size_t name_w = 5;
    for (const auto& c : cells) name_w = std::max(name_w, c.name.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "model" << std::right
       << std::setw(8) << "atoms" << std::setw(18) << "steps_per_second" << '\n';
    for (const auto& c : cells) {
      os << std::left << std::setw(static_cast<int>(name_w) + 2) << c.name << std::right
         << std::setw(8) << c.n_atoms << std::setw(18);
      if (c.oom)
        os << "OOM";
      else
        os << std::setprecision(6) << c.steps_per_second;
      os << '\n';
    }
    return os.str();
  }
};

// Simple-cubic cluster of n atoms at fixed spacing; deterministic benchmark
// input with uniform edge density for large n.
inline AtomicSystem bench_system(int n_atoms, const std::string& task, double spacing = 1.3) {
  AtomicSystem sys;
  sys.task = task;
  const int side = static_cast<int>(std::ceil(std::cbrt(static_cast<double>(n_atoms))));
  for (int x = 0; x < side && static_cast<int>(sys.size()) < n_atoms; ++x)
    for (int y = 0; y < side && static_cast<int>(sys.size()) < n_atoms; ++y)
      for (int z = 0; z < side && static_cast<int>(sys.size()) < n_atoms; ++z) {
        sys.positions.push_back({x * spacing, y * spacing, z * spacing});
        sys.species.push_back(1 + (x + y + z) % 2);
      }
  return sys;
}

// Median wall-clock evaluation rate per (calculator, size) cell. Allocation
// failures are recorded as OOM rather than propagated.
inline BenchReport bench_inference(const std::vector<std::pair<std::string, Calculator>>& calcs,
                                   const std::vector<int>& sizes, int repeats,
                                   const std::string& task) {
  if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
  BenchReport rep;
  for (const auto& [name, calc] : calcs) {
    for (int n : sizes) {
      BenchCell cell{name, n, 0.0, false};
      try {
        const auto sys = bench_system(n, task);
        const auto graph = build_graph(sys, calc.cutoff);
        calc.eval(sys, graph);  // warm-up
        std::vector<double> rates;
        for (int r = 0; r < repeats; ++r) {
          const auto t0 = std::chrono::steady_clock::now();
          calc.eval(sys, graph);
          const auto t1 = std::chrono::steady_clock::now();
          const double sec = std::chrono::duration<double>(t1 - t0).count();
          rates.push_back(1.0 / std::max(sec, 1e-12));
        }
        std::sort(rates.begin(), rates.end());
        cell.steps_per_second = rates[rates.size() / 2];
      } catch (const std::bad_alloc&) {
        cell.oom = true;
      }
      rep.cells.push_back(cell);
    }
  }
  return rep;
}

// ---- expert usage ----

struct ExpertUsage {
  std::vector<int> species;          // row labels
  std::vector<std::vector<double>> mean_alpha;  // [species row][expert]
  std::vector<int> n_systems;        // systems containing the species

  std::string to_text() const {
    std::ostringstream os;
    os << "species";
    if (!mean_alpha.empty())
      for (size_t k = 0; k < mean_alpha[0].size(); ++k) os << " e" << k;
    os << " systems\n";
    for (size_t r = 0; r < species.size(); ++r) {
      os << species[r];
      for (double a : mean_alpha[r]) os << ' ' << format_double(a);
      os << ' ' << n_systems[r] << '\n';
    }
    return os.str();
  }
};

// Mean router coefficient per element-expert pair, averaged over the
// systems in which the element appears.
inline ExpertUsage expert_usage(const PotentialModel& model,
                                const std::vector<AtomicSystem>& systems) {
  const int K = model.cfg.experts;
  std::map<int, std::pair<std::vector<double>, int>> acc;
  for (const auto& sys : systems) {
    const auto alpha = model.route_for(SystemHeader::of(sys));
    std::vector<int> uniq = sys.species;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (int z : uniq) {
      auto& [sum, count] = acc[z];
      sum.resize(K, 0.0);
      for (int k = 0; k < K; ++k) sum[k] += alpha.alpha[k];
      ++count;
    }
  }
  ExpertUsage out;
  for (const auto& [z, sc] : acc) {
    out.species.push_back(z);
    std::vector<double> mean(K);
    for (int k = 0; k < K; ++k) mean[k] = sc.first[k] / sc.second;
    out.mean_alpha.push_back(std::move(mean));
    out.n_systems.push_back(sc.second);
  }
  return out;
}

}  // namespace molepot
