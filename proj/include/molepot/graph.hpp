#pragma once

// Neighbor-list construction: radius cutoff, periodic images, optional
// per-destination cap on incoming edges. Binned (cell-list) search; the
// all-pairs-with-images oracle used to validate it lives in the tests.

#include <algorithm>
#include <optional>
#include <tuple>

#include "molepot/core.hpp"
#include "molepot/systems.hpp"

namespace molepot {

struct Edge {
  int src = 0;
  int dst = 0;
  std::array<int, 3> shift{0, 0, 0};  // image shift applied to dst
};

struct NeighborGraph {
  std::vector<Edge> edges;
  std::vector<Vec3> edge_vectors;  // pos[dst] + shift*cell - pos[src]
  std::vector<double> edge_lengths;
  double cutoff = 0.0;
  int n_atoms = 0;

  size_t n_edges() const { return edges.size(); }
};

namespace detail {

inline Vec3 cell_offset(const Mat3& cell, const std::array<int, 3>& shift) {
  Vec3 o{0, 0, 0};
  for (int d = 0; d < 3; ++d)
    for (int c = 0; c < 3; ++c) o[c] += shift[d] * cell[d][c];
  return o;
}

// Distance between lattice planes normal to direction d; bounds how many
// periodic images can fall within the cutoff.
inline double plane_distance(const Mat3& cell, int d) {
  const Vec3 a{cell[(d + 1) % 3][0], cell[(d + 1) % 3][1], cell[(d + 1) % 3][2]};
  const Vec3 b{cell[(d + 2) % 3][0], cell[(d + 2) % 3][1], cell[(d + 2) % 3][2]};
  const double area = norm(cross(a, b));
  return std::abs(det3(cell)) / area;
}

struct EdgeCandidate {
  double dist;
  int src;
  std::array<int, 3> shift;
  Vec3 vec;
};

inline bool candidate_order(const EdgeCandidate& a, const EdgeCandidate& b) {
  return std::tie(a.dist, a.src, a.shift) < std::tie(b.dist, b.src, b.shift);
}

}  // namespace detail

inline std::array<int, 3> image_shift_range(const AtomicSystem& system, double cutoff) {
  std::array<int, 3> smax{0, 0, 0};
  if (!system.any_pbc()) return smax;
  for (int d = 0; d < 3; ++d) {
    if (!system.pbc[d]) continue;
    const double pd = detail::plane_distance(*system.cell, d);
    const int s = static_cast<int>(std::ceil(cutoff / pd));
    if (s > 16)
      throw std::invalid_argument("cutoff too large for cell: needs " + std::to_string(s) +
                                  " periodic images in direction " + std::to_string(d));
    smax[d] = s;
  }
  return smax;
}

inline NeighborGraph build_graph(const AtomicSystem& system, double cutoff,
                                 std::optional<int> max_neighbors = std::nullopt) {
  if (cutoff <= 0.0) throw std::invalid_argument("cutoff must be positive");
  if (system.any_pbc() && det3(*system.cell) <= 0.0)
    throw std::invalid_argument("cell determinant must be positive");

  const int n = static_cast<int>(system.size());
  const auto smax = image_shift_range(system, cutoff);

  // Bin source atoms on a cutoff-sized grid over their bounding box.
  Vec3 lo = system.positions[0], hi = system.positions[0];
  for (const auto& p : system.positions)
    for (int c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], p[c]);
      hi[c] = std::max(hi[c], p[c]);
    }
  std::array<int, 3> nb;
  for (int c = 0; c < 3; ++c)
    nb[c] = std::max(1, static_cast<int>(std::floor((hi[c] - lo[c]) / cutoff)) + 1);
  auto bin_coord = [&](const Vec3& p, int c) {
    return static_cast<int>(std::floor((p[c] - lo[c]) / cutoff));
  };
  std::vector<std::vector<int>> bins(static_cast<size_t>(nb[0]) * nb[1] * nb[2]);
  auto bin_index = [&](int bx, int by, int bz) {
    return (static_cast<size_t>(bx) * nb[1] + by) * nb[2] + bz;
  };
  for (int i = 0; i < n; ++i) {
    const auto& p = system.positions[i];
    const int bx = std::clamp(bin_coord(p, 0), 0, nb[0] - 1);
    const int by = std::clamp(bin_coord(p, 1), 0, nb[1] - 1);
    const int bz = std::clamp(bin_coord(p, 2), 0, nb[2] - 1);
    bins[bin_index(bx, by, bz)].push_back(i);
  }

  NeighborGraph g;
  g.cutoff = cutoff;
  g.n_atoms = n;
  std::vector<detail::EdgeCandidate> incoming;

  for (int dst = 0; dst < n; ++dst) {
    incoming.clear();
    for (int sx = -smax[0]; sx <= smax[0]; ++sx) {
      for (int sy = -smax[1]; sy <= smax[1]; ++sy) {
        for (int sz = -smax[2]; sz <= smax[2]; ++sz) {
          const std::array<int, 3> shift{sx, sy, sz};
          Vec3 image = system.positions[dst];
          if (system.cell) image = image + detail::cell_offset(*system.cell, shift);
          const int cx = bin_coord(image, 0), cy = bin_coord(image, 1), cz = bin_coord(image, 2);
          for (int bx = std::max(0, cx - 1); bx <= std::min(nb[0] - 1, cx + 1); ++bx) {
            for (int by = std::max(0, cy - 1); by <= std::min(nb[1] - 1, cy + 1); ++by) {
              for (int bz = std::max(0, cz - 1); bz <= std::min(nb[2] - 1, cz + 1); ++bz) {
                for (int src : bins[bin_index(bx, by, bz)]) {
                  if (src == dst && sx == 0 && sy == 0 && sz == 0) continue;
                  const Vec3 v = image - system.positions[src];
                  const double dist = norm(v);
                  if (dist > cutoff) continue;
                  if (dist < 1e-12)
                    throw std::invalid_argument(
                        "overlapping atoms: " + std::to_string(std::min(src, dst)) + " and " +
                        std::to_string(std::max(src, dst)));
                  incoming.push_back({dist, src, shift, v});
                }
              }
            }
          }
        }
      }
    }
    std::sort(incoming.begin(), incoming.end(), detail::candidate_order);
    size_t keep = incoming.size();
    if (max_neighbors && static_cast<size_t>(*max_neighbors) < keep)
      keep = static_cast<size_t>(*max_neighbors);
    for (size_t k = 0; k < keep; ++k) {
      g.edges.push_back({incoming[k].src, dst, incoming[k].shift});
      g.edge_vectors.push_back(incoming[k].vec);
      g.edge_lengths.push_back(incoming[k].dist);
    }
  }
  return g;
}

}  // namespace molepot
