#include <array>
#include <cmath>
#include <map>
#include <tuple>
#include <vector>

#include <gtest/gtest.h>

#include "leignn/geometry.hpp"
#include "leignn/rng.hpp"
#include "support/test_utils.hpp"

using leignn::build_neighbor_list;
using leignn::brute_force_neighbors;
using leignn::Graph;
using leignn::Mat3;
using leignn::minimum_image;
using leignn::Rng;
using leignn::Structure;
using leignn::Vec3;
namespace lt = leignn::testing;

namespace {

Mat3 cubic_cell(double length) {
  Mat3 c;
  c.m = {{{length, 0, 0}, {0, length, 0}, {0, 0, length}}};
  return c;
}

Structure two_atoms(double separation) {
  Structure s;
  s.atomic_numbers = {18, 18};
  s.positions = {{0, 0, 0}, {separation, 0, 0}};
  return s;
}

/// Exhaustive oracle: the true minimum over every shift in {-3..3}^3.
Vec3 exhaustive_minimum_image(const Vec3& delta, const Mat3& cell,
                              const std::array<bool, 3>& pbc) {
  Vec3 best = delta;
  double best_norm2 = delta.norm2();
  const int r0 = pbc[0] ? 3 : 0, r1 = pbc[1] ? 3 : 0, r2 = pbc[2] ? 3 : 0;
  for (int n0 = -r0; n0 <= r0; ++n0)
    for (int n1 = -r1; n1 <= r1; ++n1)
      for (int n2 = -r2; n2 <= r2; ++n2) {
        const Vec3 cand = delta + cell.row(0) * n0 + cell.row(1) * n1 + cell.row(2) * n2;
        if (cand.norm2() < best_norm2) {
          best_norm2 = cand.norm2();
          best = cand;
        }
      }
  return best;
}

}  // namespace

TEST(MinimumImage, CubicWrapAcrossBoundary) {
  const Mat3 cell = cubic_cell(10.0);
  const Vec3 wrapped = minimum_image({9.5, 0, 0}, cell, {true, true, true});
  EXPECT_NEAR(wrapped.x, -0.5, 1e-12);
  EXPECT_NEAR(wrapped.y, 0.0, 1e-12);
  EXPECT_NEAR(wrapped.z, 0.0, 1e-12);
}

TEST(MinimumImage, ZeroStaysZero) {
  const Vec3 zero = minimum_image({0, 0, 0}, cubic_cell(5.0), {true, true, true});
  EXPECT_EQ(zero.norm(), 0.0);
}

TEST(MinimumImage, RandomTriclinicMatchesExhaustiveOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    // Triclinic cells with bounded skew (the convention presumes a reduced
    // cell), deltas up to ~2 cells away so the oracle's fixed {-3..3} scan
    // stays exhaustive.
    Mat3 cell;
    cell.m = {{{rng.uniform(6, 12), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)},
               {rng.uniform(-1.5, 1.5), rng.uniform(6, 12), rng.uniform(-1.5, 1.5)},
               {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(6, 12)}}};
    const std::array<bool, 3> pbc = {true, rng.uniform() < 0.8, rng.uniform() < 0.8};
    const Vec3 frac{rng.uniform(-2.2, 2.2), rng.uniform(-2.2, 2.2), rng.uniform(-2.2, 2.2)};
    const Vec3 delta = mul(frac, cell);
    const Vec3 got = minimum_image(delta, cell, pbc);
    const Vec3 want = exhaustive_minimum_image(delta, cell, pbc);
    EXPECT_NEAR(got.norm(), want.norm(), 1e-10) << "trial " << trial;
  }
}

TEST(MinimumImage, SingularCellRejected) {
  Mat3 degenerate;
  degenerate.m = {{{1, 0, 0}, {2, 0, 0}, {0, 0, 1}}};
  EXPECT_THROW(minimum_image({1, 1, 1}, degenerate, {true, true, true}), leignn::Error);
}

TEST(NeighborList, IsolatedDimerHasTwoDirectedEdges) {
  const Graph g = build_neighbor_list(two_atoms(3.0), 5.0, 12);
  ASSERT_EQ(g.num_edges(), 2u);
  EXPECT_DOUBLE_EQ(g.edge_len[0], 3.0);
  EXPECT_DOUBLE_EQ(g.edge_len[1], 3.0);
  EXPECT_EQ(g.edge_src[0], 1);
  EXPECT_EQ(g.edge_dst[0], 0);
  EXPECT_EQ(g.edge_src[1], 0);
  EXPECT_EQ(g.edge_dst[1], 1);
}

TEST(NeighborList, SingleAtomPeriodicSelfImages) {
  Structure s;
  s.atomic_numbers = {18};
  s.positions = {{1.0, 1.0, 1.0}};
  s.cell = cubic_cell(4.0);
  s.pbc = {true, true, true};
  const Graph g = build_neighbor_list(s, 5.0, 30);
  // Six nearest self-images at one lattice constant; diagonal images at
  // 4*sqrt(2) > 5 are outside the cutoff.
  ASSERT_EQ(g.num_edges(), 6u);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(g.edge_src[k], 0);
    EXPECT_EQ(g.edge_dst[k], 0);
    EXPECT_NEAR(g.edge_len[k], 4.0, 1e-12);
  }
  const Graph oracle = brute_force_neighbors(s, 5.0, 30);
  EXPECT_TRUE(lt::graphs_identical(g, oracle));
}

TEST(NeighborList, EmptyCases) {
  EXPECT_EQ(build_neighbor_list(two_atoms(10.0), 5.0, 12).num_edges(), 0u);
  EXPECT_EQ(brute_force_neighbors(two_atoms(10.0), 5.0, 12).num_edges(), 0u);

  Structure lone;
  lone.atomic_numbers = {6};
  lone.positions = {{0, 0, 0}};
  EXPECT_EQ(build_neighbor_list(lone, 6.0, 12).num_edges(), 0u);
  EXPECT_EQ(brute_force_neighbors(lone, 6.0, 12).num_edges(), 0u);
}

TEST(NeighborList, OverlappingAtomsRejected) {
  EXPECT_THROW(build_neighbor_list(two_atoms(1e-4), 5.0, 12), leignn::Error);
  EXPECT_THROW(brute_force_neighbors(two_atoms(1e-4), 5.0, 12), leignn::Error);
}

TEST(NeighborList, BadArgumentsRejected) {
  EXPECT_THROW(build_neighbor_list(two_atoms(3.0), -1.0, 12), leignn::Error);
  EXPECT_THROW(build_neighbor_list(two_atoms(3.0), 5.0, 0), leignn::Error);
}

TEST(NeighborList, MaxNeighborCapKeepsClosest) {
  Structure s;
  s.atomic_numbers = {6, 1, 1, 1, 1};
  s.positions = {{0, 0, 0}, {1.5, 0, 0}, {0, 2.0, 0}, {0, 0, 2.5}, {-3.0, 0, 0}};
  const Graph g = build_neighbor_list(s, 5.0, 2);
  int in_degree = 0;
  std::vector<double> kept;
  for (std::size_t k = 0; k < g.num_edges(); ++k) {
    if (g.edge_dst[k] == 0) {
      ++in_degree;
      kept.push_back(g.edge_len[k]);
    }
  }
  ASSERT_EQ(in_degree, 2);
  EXPECT_DOUBLE_EQ(kept[0], 1.5);
  EXPECT_DOUBLE_EQ(kept[1], 2.0);
}

TEST(NeighborList, CellListMatchesBruteForceOnRandomSystems) {
  Rng rng(99);
  for (int trial = 0; trial < 120; ++trial) {
    const bool periodic = trial % 2 == 0;
    const int num_atoms = 2 + static_cast<int>(rng.index(49));
    const Structure s = lt::random_structure(rng, num_atoms, periodic);
    const double cutoff = rng.uniform(2.5, 7.0);
    const int cap = 1 + static_cast<int>(rng.index(40));
    const Graph fast = build_neighbor_list(s, cutoff, cap);
    const Graph slow = brute_force_neighbors(s, cutoff, cap);
    ASSERT_TRUE(lt::graphs_identical(fast, slow))
        << "trial " << trial << " periodic=" << periodic << " M=" << num_atoms
        << " D=" << cutoff << " N=" << cap;
  }
}

TEST(NeighborList, FiftyAtomPeriodicBoxMatchesBruteForce) {
  Rng rng(7);
  const Structure s = lt::random_structure(rng, 50, true);
  const Graph fast = build_neighbor_list(s, 6.0, 20);
  const Graph slow = brute_force_neighbors(s, 6.0, 20);
  EXPECT_TRUE(lt::graphs_identical(fast, slow));
  EXPECT_GT(fast.num_edges(), 0u);
}

TEST(NeighborList, GraphInvariantsHold) {
  Rng rng(31);
  const Structure s = lt::random_structure(rng, 30, true);
  const double cutoff = 6.0;
  const int cap = 14;
  const Graph g = build_neighbor_list(s, cutoff, cap);
  std::vector<int> in_degree(s.size(), 0);
  for (std::size_t k = 0; k < g.num_edges(); ++k) {
    EXPECT_GT(g.edge_len[k], 0.0);
    EXPECT_LE(g.edge_len[k], cutoff);
    EXPECT_NEAR(g.edge_vec[k].norm(), g.edge_len[k], 1e-12 * g.edge_len[k]);
    const bool self_zero_shift = g.edge_src[k] == g.edge_dst[k] &&
                                 g.edge_shift[k] == std::array<int, 3>{0, 0, 0};
    EXPECT_FALSE(self_zero_shift);
    in_degree[static_cast<std::size_t>(g.edge_dst[k])]++;
  }
  for (int d : in_degree) EXPECT_LE(d, cap);
}

TEST(NeighborList, RotationPreservesLengthsAndRotatesVectors) {
  Rng rng(55);
  for (int trial = 0; trial < 20; ++trial) {
    const bool periodic = trial % 2 == 0;
    const Structure s = lt::random_structure(rng, 24, periodic);
    const Mat3 rotation = lt::random_rotation(rng);
    const Structure sr = lt::rotated(s, rotation);

    Graph g = build_neighbor_list(s, 5.5, 16);
    Graph gr = build_neighbor_list(sr, 5.5, 16);
    ASSERT_EQ(g.num_edges(), gr.num_edges());

    // Match edges by identity (src, dst, shift); ordering may differ when
    // rounding reshuffles near-equal distances.
    std::map<std::tuple<int, int, std::array<int, 3>>, Vec3> rotated_edges;
    std::map<std::tuple<int, int, std::array<int, 3>>, double> rotated_lens;
    for (std::size_t k = 0; k < gr.num_edges(); ++k) {
      rotated_edges[{gr.edge_src[k], gr.edge_dst[k], gr.edge_shift[k]}] = gr.edge_vec[k];
      rotated_lens[{gr.edge_src[k], gr.edge_dst[k], gr.edge_shift[k]}] = gr.edge_len[k];
    }
    const Mat3 rt = rotation.transpose();
    for (std::size_t k = 0; k < g.num_edges(); ++k) {
      const auto key = std::make_tuple(g.edge_src[k], g.edge_dst[k], g.edge_shift[k]);
      ASSERT_TRUE(rotated_edges.count(key));
      EXPECT_NEAR(rotated_lens[key], g.edge_len[k], 1e-10);
      const Vec3 expected = mul(g.edge_vec[k], rt);
      EXPECT_LT((rotated_edges[key] - expected).norm(), 1e-10);
    }
  }
}

TEST(NeighborList, TranslationLeavesOpenGraphBitIdentical) {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    const Structure s = lt::random_structure(rng, 20, /*periodic=*/false);
    // Grid-snapped translation keeps the shifted coordinates exactly
    // representable, so the graph must match bit for bit.
    const Vec3 t{lt::snap(rng.uniform(-40, 40)), lt::snap(rng.uniform(-40, 40)),
                 lt::snap(rng.uniform(-40, 40))};
    const Graph g = build_neighbor_list(s, 5.0, 12);
    const Graph gt = build_neighbor_list(lt::translated(s, t), 5.0, 12);
    EXPECT_TRUE(lt::graphs_identical(g, gt, 0.0)) << "trial " << trial;
  }
}
