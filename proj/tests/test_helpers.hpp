#pragma once

// Shared helpers for the unit tests: random valid systems and small
// numerical utilities.

#include "molepot/graph.hpp"
#include "molepot/systems.hpp"

namespace molepot::testing {

inline AtomicSystem random_system(Rng& rng, int min_atoms = 1, int max_atoms = 12,
                                  bool allow_pbc = true, bool with_labels = true) {
  AtomicSystem s;
  const int n = static_cast<int>(rng.uniform_int(min_atoms, max_atoms));
  const double side = 2.0 + std::cbrt(static_cast<double>(n)) * 1.5;
  for (int i = 0; i < n; ++i) {
    // rejection keeps pairs separated so graphs stay well-defined
    while (true) {
      const Vec3 p{rng.uniform(0.0, side), rng.uniform(0.0, side), rng.uniform(0.0, side)};
      bool ok = true;
      for (const auto& q : s.positions)
        if (norm(p - q) < 0.4) {
          ok = false;
          break;
        }
      if (ok) {
        s.positions.push_back(p);
        break;
      }
    }
    s.species.push_back(static_cast<int>(rng.uniform_int(1, kMaxSpecies)));
  }
  if (allow_pbc && rng.uniform() < 0.3) {
    Mat3 cell{};
    cell[0] = {side + 1.0, 0.0, 0.0};
    cell[1] = {rng.uniform(-0.5, 0.5), side + 1.0, 0.0};
    cell[2] = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), side + 1.0};
    s.cell = cell;
    for (int d = 0; d < 3; ++d) s.pbc[d] = rng.uniform() < 0.8;
    if (!s.any_pbc()) s.pbc[0] = true;
  }
  s.charge = static_cast<int>(rng.uniform_int(-2, 2));
  s.spin = static_cast<int>(rng.uniform_int(0, 3));
  const char* tasks[] = {"lj-a", "lj-b", "morse"};
  s.task = tasks[rng.uniform_index(3)];
  if (with_labels) {
    SystemLabels labels;
    labels.energy = rng.uniform(-50.0, 50.0);
    for (int i = 0; i < n; ++i)
      labels.forces.push_back({rng.normal(), rng.normal(), rng.normal()});
    s.labels = labels;
  }
  return s;
}

inline bool systems_equal(const AtomicSystem& a, const AtomicSystem& b) {
  if (a.positions != b.positions || a.species != b.species || a.pbc != b.pbc ||
      a.charge != b.charge || a.spin != b.spin || a.task != b.task)
    return false;
  if (a.cell.has_value() != b.cell.has_value()) return false;
  if (a.cell && *a.cell != *b.cell) return false;
  if (a.labels.has_value() != b.labels.has_value()) return false;
  if (a.labels &&
      (a.labels->energy != b.labels->energy || a.labels->forces != b.labels->forces))
    return false;
  return true;
}

// All-pairs-with-images reference for build_graph, same tie-break.
inline NeighborGraph brute_force_graph(const AtomicSystem& system, double cutoff,
                                       std::optional<int> max_neighbors = std::nullopt) {
  const int n = static_cast<int>(system.size());
  const auto smax = image_shift_range(system, cutoff);
  NeighborGraph g;
  g.cutoff = cutoff;
  g.n_atoms = n;
  struct Cand {
    double dist;
    int src;
    std::array<int, 3> shift;
    Vec3 vec;
  };
  for (int dst = 0; dst < n; ++dst) {
    std::vector<Cand> in;
    for (int src = 0; src < n; ++src) {
      for (int sx = -smax[0]; sx <= smax[0]; ++sx)
        for (int sy = -smax[1]; sy <= smax[1]; ++sy)
          for (int sz = -smax[2]; sz <= smax[2]; ++sz) {
            if (src == dst && sx == 0 && sy == 0 && sz == 0) continue;
            Vec3 image = system.positions[dst];
            if (system.cell)
              image = image + detail::cell_offset(*system.cell, {sx, sy, sz});
            const Vec3 v = image - system.positions[src];
            const double d = norm(v);
            if (d > cutoff || d < 1e-12) continue;
            in.push_back({d, src, {sx, sy, sz}, v});
          }
    }
    std::sort(in.begin(), in.end(), [](const Cand& a, const Cand& b) {
      return std::tie(a.dist, a.src, a.shift) < std::tie(b.dist, b.src, b.shift);
    });
    size_t keep = in.size();
    if (max_neighbors && static_cast<size_t>(*max_neighbors) < keep)
      keep = static_cast<size_t>(*max_neighbors);
    for (size_t k = 0; k < keep; ++k) {
      g.edges.push_back({in[k].src, dst, in[k].shift});
      g.edge_vectors.push_back(in[k].vec);
      g.edge_lengths.push_back(in[k].dist);
    }
  }
  return g;
}

inline bool graphs_match(const NeighborGraph& a, const NeighborGraph& b, double tol = 1e-10) {
  if (a.n_edges() != b.n_edges()) return false;
  for (size_t i = 0; i < a.n_edges(); ++i) {
    if (a.edges[i].src != b.edges[i].src || a.edges[i].dst != b.edges[i].dst ||
        a.edges[i].shift != b.edges[i].shift)
      return false;
    if (norm(a.edge_vectors[i] - b.edge_vectors[i]) > tol) return false;
  }
  return true;
}

}  // namespace molepot::testing
