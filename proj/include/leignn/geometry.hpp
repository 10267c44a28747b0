#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <tuple>
#include <vector>

#include "leignn/structure.hpp"
#include "leignn/vec3.hpp"

namespace leignn {

/// Any pair closer than this indicates overlapping atoms and corrupt input.
inline constexpr double kMinPairDistance = 1e-3;  // Angstrom

/// Directed interaction graph. Edge k carries the displacement from its
/// source atom (or periodic image) to its destination atom:
///   edge_vec[k] = r_dst - (r_src + shift * cell).
/// Edges are stored grouped by destination in ascending order; within one
/// destination they are ordered by (distance, source index, shift).
struct Graph {
  std::vector<int> edge_src;
  std::vector<int> edge_dst;
  std::vector<Vec3> edge_vec;
  std::vector<double> edge_len;
  std::vector<std::array<int, 3>> edge_shift;
  int num_nodes = 0;

  std::size_t num_edges() const { return edge_src.size(); }
};

namespace geom_detail {

/// Perpendicular height of the cell along lattice direction d: the spacing
/// between the two cell faces not containing row d.
inline double cell_height(const Mat3& cell, int d) {
  const Vec3 a = cell.row((d + 1) % 3);
  const Vec3 b = cell.row((d + 2) % 3);
  const double face = cross(a, b).norm();
  detail::check(face > 1e-12, "degenerate cell face");
  return std::abs(cell.det()) / face;
}

inline Vec3 shift_cartesian(const std::array<int, 3>& n, const Mat3& cell) {
  return cell.row(0) * static_cast<double>(n[0]) + cell.row(1) * static_cast<double>(n[1]) +
         cell.row(2) * static_cast<double>(n[2]);
}

/// Wrap positions into the unit cell along periodic directions.
inline std::vector<Vec3> wrap_positions(const std::vector<Vec3>& positions, const Mat3& cell,
                                        const std::array<bool, 3>& pbc) {
  const Mat3 inv = cell.inverse();
  std::vector<Vec3> wrapped;
  wrapped.reserve(positions.size());
  for (const Vec3& p : positions) {
    Vec3 f = mul(p, inv);
    for (int d = 0; d < 3; ++d) {
      if (pbc[static_cast<std::size_t>(d)]) f[d] -= std::floor(f[d]);
    }
    wrapped.push_back(mul(f, cell));
  }
  return wrapped;
}

struct Candidate {
  double dist;
  int src;
  std::array<int, 3> shift;
  Vec3 vec;

  bool operator<(const Candidate& o) const {
    return std::tie(dist, src, shift) < std::tie(o.dist, o.src, o.shift);
  }
};

inline void append_candidates(Graph& graph, int dst, std::vector<Candidate>& candidates,
                              int max_neighbors) {
  std::sort(candidates.begin(), candidates.end());
  const std::size_t keep =
      std::min(candidates.size(), static_cast<std::size_t>(max_neighbors));
  for (std::size_t k = 0; k < keep; ++k) {
    graph.edge_src.push_back(candidates[k].src);
    graph.edge_dst.push_back(dst);
    graph.edge_vec.push_back(candidates[k].vec);
    graph.edge_len.push_back(candidates[k].dist);
    graph.edge_shift.push_back(candidates[k].shift);
  }
}

}  // namespace geom_detail

/// Displacement of minimal norm among `delta` plus integer combinations of
/// the periodic lattice vectors. The base image comes from rounding the
/// fractional coordinates; shifts up to +/-2 around it are then scanned,
/// which extends the search far enough for cutoffs beyond half the minimum
/// cell height and for moderately skewed cells.
inline Vec3 minimum_image(const Vec3& delta, const Mat3& cell, const std::array<bool, 3>& pbc) {
  if (!(pbc[0] || pbc[1] || pbc[2])) return delta;
  detail::check(std::abs(cell.det()) > 1e-8, "singular cell");

  const Vec3 frac = mul(delta, cell.inverse());
  std::array<int, 3> base{0, 0, 0};
  for (int d = 0; d < 3; ++d) {
    if (pbc[static_cast<std::size_t>(d)])
      base[static_cast<std::size_t>(d)] = static_cast<int>(std::lround(frac[d]));
  }

  Vec3 best = delta;
  double best_norm2 = std::numeric_limits<double>::infinity();
  const int range = 2;
  const int r0 = pbc[0] ? range : 0, r1 = pbc[1] ? range : 0, r2 = pbc[2] ? range : 0;
  for (int n0 = -r0; n0 <= r0; ++n0) {
    for (int n1 = -r1; n1 <= r1; ++n1) {
      for (int n2 = -r2; n2 <= r2; ++n2) {
        const std::array<int, 3> shift{n0 - base[0], n1 - base[1], n2 - base[2]};
        const Vec3 cand = delta + geom_detail::shift_cartesian(shift, cell);
        const double norm2 = cand.norm2();
        if (norm2 < best_norm2) {
          best_norm2 = norm2;
          best = cand;
        }
      }
    }
  }
  return best;
}

/// Reference neighbor search: a direct double loop over all pairs and all
/// lattice shifts. Used as the verification oracle for the cell-list builder.
inline Graph brute_force_neighbors(const Structure& s, double cutoff, int max_neighbors) {
  s.validate();
  detail::check(cutoff > 0, "cutoff must be positive");
  detail::check(max_neighbors >= 1, "max neighbor count must be at least 1");

  const int num_atoms = static_cast<int>(s.size());
  const bool periodic = s.periodic();
  std::vector<Vec3> pos = s.positions;
  std::array<int, 3> range{0, 0, 0};
  if (periodic) {
    pos = geom_detail::wrap_positions(s.positions, *s.cell, s.pbc);
    for (int d = 0; d < 3; ++d) {
      if (!s.pbc[static_cast<std::size_t>(d)]) continue;
      // One extra ring beyond the geometric bound, as insurance independent
      // of the production builder's range computation.
      range[static_cast<std::size_t>(d)] =
          static_cast<int>(std::floor(cutoff / geom_detail::cell_height(*s.cell, d))) + 2;
    }
  }

  Graph graph;
  graph.num_nodes = num_atoms;
  std::vector<geom_detail::Candidate> candidates;
  for (int i = 0; i < num_atoms; ++i) {
    candidates.clear();
    for (int j = 0; j < num_atoms; ++j) {
      for (int n0 = -range[0]; n0 <= range[0]; ++n0) {
        for (int n1 = -range[1]; n1 <= range[1]; ++n1) {
          for (int n2 = -range[2]; n2 <= range[2]; ++n2) {
            const std::array<int, 3> shift{n0, n1, n2};
            if (i == j && n0 == 0 && n1 == 0 && n2 == 0) continue;
            Vec3 image = pos[static_cast<std::size_t>(j)];
            if (periodic) image += geom_detail::shift_cartesian(shift, *s.cell);
            const Vec3 delta = pos[static_cast<std::size_t>(i)] - image;
            const double dist = delta.norm();
            detail::check(dist >= kMinPairDistance,
                          "atoms closer than the overlap guard distance");
            if (dist <= cutoff) candidates.push_back({dist, j, shift, delta});
          }
        }
      }
    }
    geom_detail::append_candidates(graph, i, candidates, max_neighbors);
  }
  return graph;
}

/// Neighbor search with linked-cell binning over the periodic images: O(M)
/// expected cost at fixed density. For each destination atom, all sources
/// within the cutoff are found (including periodic self-images); if more
/// than `max_neighbors` qualify, the closest ones win, with ties broken by
/// (distance, source index, shift) for platform-independent output.
inline Graph build_neighbor_list(const Structure& s, double cutoff, int max_neighbors) {
  s.validate();
  detail::check(cutoff > 0, "cutoff must be positive");
  detail::check(max_neighbors >= 1, "max neighbor count must be at least 1");

  const int num_atoms = static_cast<int>(s.size());
  const bool periodic = s.periodic();
  std::vector<Vec3> pos = s.positions;
  std::array<int, 3> range{0, 0, 0};
  if (periodic) {
    pos = geom_detail::wrap_positions(s.positions, *s.cell, s.pbc);
    for (int d = 0; d < 3; ++d) {
      if (!s.pbc[static_cast<std::size_t>(d)]) continue;
      range[static_cast<std::size_t>(d)] =
          static_cast<int>(std::floor(cutoff / geom_detail::cell_height(*s.cell, d))) + 1;
    }
  }

  // Materialize every source image once.
  struct Image {
    Vec3 p;
    int src;
    std::array<int, 3> shift;
  };
  std::vector<Image> images;
  images.reserve(static_cast<std::size_t>(num_atoms) *
                 static_cast<std::size_t>((2 * range[0] + 1) * (2 * range[1] + 1) *
                                          (2 * range[2] + 1)));
  for (int j = 0; j < num_atoms; ++j) {
    for (int n0 = -range[0]; n0 <= range[0]; ++n0) {
      for (int n1 = -range[1]; n1 <= range[1]; ++n1) {
        for (int n2 = -range[2]; n2 <= range[2]; ++n2) {
          const std::array<int, 3> shift{n0, n1, n2};
          Vec3 image = pos[static_cast<std::size_t>(j)];
          if (periodic) image += geom_detail::shift_cartesian(shift, *s.cell);
          images.push_back({image, j, shift});
        }
      }
    }
  }

  // Cubic bins with edge >= cutoff, so a +/-1 bin scan covers the cutoff ball.
  Vec3 lo = images[0].p, hi = images[0].p;
  for (const Image& im : images) {
    for (int d = 0; d < 3; ++d) {
      lo[d] = std::min(lo[d], im.p[d]);
      hi[d] = std::max(hi[d], im.p[d]);
    }
  }
  double edge = cutoff;
  std::array<int, 3> dims{};
  for (int d = 0; d < 3; ++d) {
    const double extent = hi[d] - lo[d];
    // Cap the grid so pathological cutoff/extent ratios cannot blow up memory.
    edge = std::max(edge, extent / 128.0);
  }
  for (int d = 0; d < 3; ++d) {
    dims[static_cast<std::size_t>(d)] =
        std::max(1, static_cast<int>(std::floor((hi[d] - lo[d]) / edge)) + 1);
  }
  const auto bin_of = [&](const Vec3& p) {
    std::array<int, 3> b{};
    for (int d = 0; d < 3; ++d) {
      int idx = static_cast<int>(std::floor((p[d] - lo[d]) / edge));
      b[static_cast<std::size_t>(d)] =
          std::clamp(idx, 0, dims[static_cast<std::size_t>(d)] - 1);
    }
    return b;
  };
  const auto flat = [&](const std::array<int, 3>& b) {
    return (b[0] * dims[1] + b[1]) * dims[2] + b[2];
  };

  std::vector<std::vector<int>> bins(
      static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
      static_cast<std::size_t>(dims[2]));
  for (std::size_t k = 0; k < images.size(); ++k) {
    bins[static_cast<std::size_t>(flat(bin_of(images[k].p)))].push_back(static_cast<int>(k));
  }

  Graph graph;
  graph.num_nodes = num_atoms;
  std::vector<geom_detail::Candidate> candidates;
  for (int i = 0; i < num_atoms; ++i) {
    candidates.clear();
    const Vec3 center = pos[static_cast<std::size_t>(i)];
    const std::array<int, 3> cb = bin_of(center);
    for (int b0 = std::max(0, cb[0] - 1); b0 <= std::min(dims[0] - 1, cb[0] + 1); ++b0) {
      for (int b1 = std::max(0, cb[1] - 1); b1 <= std::min(dims[1] - 1, cb[1] + 1); ++b1) {
        for (int b2 = std::max(0, cb[2] - 1); b2 <= std::min(dims[2] - 1, cb[2] + 1); ++b2) {
          for (int k : bins[static_cast<std::size_t>(flat({b0, b1, b2}))]) {
            const Image& im = images[static_cast<std::size_t>(k)];
            if (im.src == i && im.shift[0] == 0 && im.shift[1] == 0 && im.shift[2] == 0)
              continue;
            const Vec3 delta = center - im.p;
            const double dist = delta.norm();
            detail::check(dist >= kMinPairDistance,
                          "atoms closer than the overlap guard distance");
            if (dist <= cutoff) candidates.push_back({dist, im.src, im.shift, delta});
          }
        }
      }
    }
    geom_detail::append_candidates(graph, i, candidates, max_neighbors);
  }
  return graph;
}

/// Sort edges into the canonical (dst, distance, src, shift) order. Both
/// builders already emit this order; tests use it before comparing graphs.
inline void canonical_sort(Graph& g) {
  std::vector<std::size_t> order(g.num_edges());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(g.edge_dst[a], g.edge_len[a], g.edge_src[a], g.edge_shift[a]) <
           std::tie(g.edge_dst[b], g.edge_len[b], g.edge_src[b], g.edge_shift[b]);
  });
  Graph sorted;
  sorted.num_nodes = g.num_nodes;
  for (std::size_t k : order) {
    sorted.edge_src.push_back(g.edge_src[k]);
    sorted.edge_dst.push_back(g.edge_dst[k]);
    sorted.edge_vec.push_back(g.edge_vec[k]);
    sorted.edge_len.push_back(g.edge_len[k]);
    sorted.edge_shift.push_back(g.edge_shift[k]);
  }
  g = std::move(sorted);
}

}  // namespace leignn
