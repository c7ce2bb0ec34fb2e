#pragma once

// Synthetic multi-task data: analytic pair-potential oracles stand in for
// the per-task reference calculators, plus dataset generation, max-atom
// batch packing and ratio-based task interleaving.

#include <map>

#include "molepot/grad.hpp"
#include "molepot/graph.hpp"
#include "molepot/reference.hpp"

namespace molepot {

enum class PairKind { LennardJones, Morse };

struct TaskOracle {
  std::string task;
  PairKind kind = PairKind::LennardJones;
  double epsilon = 1.0;    // LJ well depth
  double sigma = 1.0;      // LJ length scale
  double depth = 1.0;      // Morse well depth
  double steepness = 1.5;  // Morse exponent
  double r_min = 1.1;      // Morse equilibrium distance
  double cutoff = 3.0;
  std::vector<double> offsets;  // per-species isolated-atom energy, index by z
  double charge_coeff = 0.0;
  double spin_coeff = 0.0;
  std::vector<int> species_pool;

  double length_scale() const { return kind == PairKind::LennardJones ? sigma : r_min; }

  // raw pair terms, no cutoff envelope
  double pair_energy(double r) const {
    if (kind == PairKind::LennardJones) {
      const double s6 = std::pow(sigma / r, 6);
      return 4.0 * epsilon * (s6 * s6 - s6);
    }
    const double t = 1.0 - std::exp(-steepness * (r - r_min));
    return depth * (t * t - 1.0);
  }

  double pair_energy_deriv(double r) const {
    if (kind == PairKind::LennardJones) {
      const double s6 = std::pow(sigma / r, 6);
      return 4.0 * epsilon * (-12.0 * s6 * s6 + 6.0 * s6) / r;
    }
    const double ex = std::exp(-steepness * (r - r_min));
    return 2.0 * depth * (1.0 - ex) * steepness * ex;
  }

  double enveloped_pair(double r) const { return pair_energy(r) * detail::envelope_value(r, cutoff); }

  double enveloped_pair_deriv(double r) const {
    return pair_energy_deriv(r) * detail::envelope_value(r, cutoff) +
           pair_energy(r) * detail::envelope_grad(r, cutoff);
  }

  double offset_of(int z) const {
    if (z < 0 || z >= static_cast<int>(offsets.size()))
      throw std::invalid_argument("oracle has no offset for species " + std::to_string(z));
    return offsets[z];
  }

  double energy(const AtomicSystem& sys) const {
    const auto graph = build_graph(sys, cutoff);
    double e = 0.0;
    for (size_t i = 0; i < graph.n_edges(); ++i) e += 0.5 * enveloped_pair(graph.edge_lengths[i]);
    for (int z : sys.species) e += offset_of(z);
    e += charge_coeff * sys.charge + spin_coeff * sys.spin;
    return e;
  }

  std::vector<Vec3> forces(const AtomicSystem& sys) const {
    const auto graph = build_graph(sys, cutoff);
    std::vector<Vec3> f(sys.size(), Vec3{0, 0, 0});
    for (size_t i = 0; i < graph.n_edges(); ++i) {
      const double r = graph.edge_lengths[i];
      const double dphi = 0.5 * enveloped_pair_deriv(r);
      const Vec3 u = (1.0 / r) * graph.edge_vectors[i];
      const auto& e = graph.edges[i];
      for (int d = 0; d < 3; ++d) {
        f[e.src][d] += dphi * u[d];
        f[e.dst][d] -= dphi * u[d];
      }
    }
    return f;
  }

  void label(AtomicSystem& sys) const {
    SystemLabels labels;
    labels.energy = energy(sys);
    labels.forces = forces(sys);
    sys.labels = std::move(labels);
  }
};

// The three bundled tasks. Pair parameters and offsets are design constants
// of the toy data, not measurements. Charge/spin terms are nonzero only for
// lj-b so those embeddings carry learnable signal.
inline std::vector<TaskOracle> bundled_oracles() {
  auto offsets = [](double base, double slope) {
    std::vector<double> o(kMaxSpecies + 1, 0.0);
    for (int z = 1; z <= kMaxSpecies; ++z) o[z] = base + slope * z;
    return o;
  };
  TaskOracle lj_a;
  lj_a.task = "lj-a";
  lj_a.kind = PairKind::LennardJones;
  lj_a.epsilon = 1.0;
  lj_a.sigma = 1.0;
  lj_a.offsets = offsets(-1.0, -0.05);
  lj_a.species_pool = {1, 2, 3};

  TaskOracle lj_b;
  lj_b.task = "lj-b";
  lj_b.kind = PairKind::LennardJones;
  lj_b.epsilon = 0.5;
  lj_b.sigma = 1.2;
  lj_b.offsets = offsets(-2.0, 0.08);
  lj_b.charge_coeff = 0.3;
  lj_b.spin_coeff = 0.15;
  lj_b.species_pool = {1, 2, 3};

  TaskOracle morse;
  morse.task = "morse";
  morse.kind = PairKind::Morse;
  morse.depth = 1.0;
  morse.steepness = 1.5;
  morse.r_min = 1.1;
  morse.offsets = offsets(-0.5, -0.02);
  morse.species_pool = {1, 2, 3};

  return {lj_a, lj_b, morse};
}

inline const TaskOracle& bundled_oracle(const std::vector<TaskOracle>& oracles,
                                        const std::string& task) {
  for (const auto& o : oracles)
    if (o.task == task) return o;
  throw std::invalid_argument("no bundled oracle for task: " + task);
}

// Element table consistent with the bundled oracles: isolated energies are
// the oracle offsets, heats of formation are fabricated per-species values.
inline ElementTable bundled_element_table() {
  const auto oracles = bundled_oracles();
  TaskRegistry reg;
  for (const auto& o : oracles) reg.tasks.push_back(o.task);
  ElementTable table(reg);
  for (int z = 1; z <= kMaxSpecies; ++z) {
    ElementEntry e;
    e.hof = 0.1 + 0.01 * z;
    for (const auto& o : oracles) e.isolated_energy.push_back(o.offset_of(z));
    table.entries[z] = std::move(e);
  }
  return table;
}

// Random non-overlapping clusters labeled by the oracle. Deterministic for
// a fixed seed.
inline std::vector<AtomicSystem> generate_dataset(const TaskOracle& oracle, int n_systems,
                                                  int min_atoms, int max_atoms,
                                                  std::uint64_t seed) {
  if (min_atoms < 2 || max_atoms > 64 || min_atoms > max_atoms)
    throw std::invalid_argument("generate_dataset: size range must lie within [2, 64]");
  Rng rng(seed);
  const double scale = oracle.length_scale();
  const double min_sep = 0.7 * scale;
  std::vector<AtomicSystem> out;
  out.reserve(n_systems);
  for (int s = 0; s < n_systems; ++s) {
    const int n = static_cast<int>(rng.uniform_int(min_atoms, max_atoms));
    const double side = scale * std::cbrt(n / 0.20);
    AtomicSystem sys;
    sys.task = oracle.task;
    int attempts = 0;
    const int max_attempts = 300 * n;
    while (static_cast<int>(sys.positions.size()) < n) {
      if (++attempts > max_attempts)
        throw std::runtime_error("generate_dataset: placement failed after " +
                                 std::to_string(max_attempts) + " attempts");
      const Vec3 p{rng.uniform(0.0, side), rng.uniform(0.0, side), rng.uniform(0.0, side)};
      bool ok = true;
      for (const auto& q : sys.positions)
        if (norm(p - q) < min_sep) {
          ok = false;
          break;
        }
      if (ok) sys.positions.push_back(p);
    }
    for (int i = 0; i < n; ++i)
      sys.species.push_back(
          oracle.species_pool[rng.uniform_index(oracle.species_pool.size())]);
    if (oracle.charge_coeff != 0.0 || oracle.spin_coeff != 0.0) {
      sys.charge = static_cast<int>(rng.uniform_int(-2, 2));
      sys.spin = static_cast<int>(rng.uniform_int(0, 3));
    }
    oracle.label(sys);
    out.push_back(std::move(sys));
  }
  return out;
}

// ---- batching ----

struct PackedBatch {
  std::vector<int> indices;
  int total_atoms = 0;
};

// First-fit-decreasing over a seeded shuffle. Every system lands in exactly
// one batch and no batch exceeds max_atoms.
inline std::vector<PackedBatch> pack_batches(const std::vector<int>& sizes, int max_atoms,
                                             std::uint64_t seed) {
  for (size_t i = 0; i < sizes.size(); ++i)
    if (sizes[i] > max_atoms)
      throw std::invalid_argument("system " + std::to_string(i) + " has " +
                                  std::to_string(sizes[i]) + " atoms, exceeding max_atoms=" +
                                  std::to_string(max_atoms));
  std::vector<int> order(sizes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(seed);
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return sizes[a] > sizes[b]; });
  std::vector<PackedBatch> batches;
  for (int idx : order) {
    bool placed = false;
    for (auto& b : batches)
      if (b.total_atoms + sizes[idx] <= max_atoms) {
        b.indices.push_back(idx);
        b.total_atoms += sizes[idx];
        placed = true;
        break;
      }
    if (!placed) batches.push_back({{idx}, sizes[idx]});
  }
  return batches;
}

inline std::vector<PackedBatch> pack_batches(const std::vector<AtomicSystem>& systems,
                                             int max_atoms, std::uint64_t seed) {
  std::vector<int> sizes;
  sizes.reserve(systems.size());
  for (const auto& s : systems) sizes.push_back(static_cast<int>(s.size()));
  return pack_batches(sizes, max_atoms, seed);
}

// ---- sampling plan & interleaving ----

struct SamplingPlan {
  std::map<std::string, int> ratio;

  void validate() const {
    if (ratio.empty()) throw std::invalid_argument("sampling plan is empty");
    for (const auto& [task, r] : ratio)
      if (r < 1) throw std::invalid_argument("sampling ratio for " + task + " must be >= 1");
  }

  int total() const {
    int t = 0;
    for (const auto& [_, r] : ratio) t += r;
    return t;
  }
};

// Deterministic stream of (task index, system index) draws. Each window of
// sum(ratios) draws contains every task exactly ratio-many times, in a
// seeded per-window order; datasets are traversed as reshuffled epochs.
class TaskInterleaver {
 public:
  struct Item {
    int task = 0;
    int index = 0;
  };

  TaskInterleaver(const std::vector<std::string>& task_names,
                  const std::vector<size_t>& dataset_sizes, const SamplingPlan& plan,
                  std::uint64_t seed)
      : rng_(seed) {
    plan.validate();
    if (task_names.size() != dataset_sizes.size())
      throw std::invalid_argument("interleave: task/dataset count mismatch");
    for (size_t t = 0; t < task_names.size(); ++t) {
      const auto it = plan.ratio.find(task_names[t]);
      if (it == plan.ratio.end())
        throw std::invalid_argument("sampling plan does not cover task " + task_names[t]);
      if (dataset_sizes[t] == 0)
        throw std::invalid_argument("empty dataset for planned task " + task_names[t]);
      for (int r = 0; r < it->second; ++r) block_.push_back(static_cast<int>(t));
      cursors_.push_back(0);
      epochs_.emplace_back();
      sizes_.push_back(dataset_sizes[t]);
    }
    for (const auto& [task, _] : plan.ratio) {
      bool known = false;
      for (const auto& name : task_names) known = known || (name == task);
      if (!known) throw std::invalid_argument("sampling plan names unknown task " + task);
    }
    pos_ = block_.size();  // first next() reshuffles the window
  }

  Item next() {
    if (pos_ == block_.size()) {
      rng_.shuffle(block_);
      pos_ = 0;
    }
    const int t = block_[pos_++];
    auto& epoch = epochs_[t];
    auto& cur = cursors_[t];
    if (cur == epoch.size()) {
      epoch.resize(sizes_[t]);
      for (size_t i = 0; i < sizes_[t]; ++i) epoch[i] = static_cast<int>(i);
      rng_.shuffle(epoch);
      cur = 0;
    }
    return {t, epoch[cur++]};
  }

 private:
  Rng rng_;
  std::vector<int> block_;
  size_t pos_ = 0;
  std::vector<size_t> cursors_;
  std::vector<std::vector<int>> epochs_;
  std::vector<size_t> sizes_;
};

}  // namespace molepot
