#include <cmath>
#include <span>
#include <vector>

#include <gtest/gtest.h>

#include "leignn/extxyz.hpp"
#include "leignn/oracle.hpp"
#include "support/test_utils.hpp"

using leignn::OraclePotential;
using leignn::oracle_energy_forces;
using leignn::parse_extxyz;
using leignn::Rng;
using leignn::Structure;
using leignn::Vec3;
using leignn::write_extxyz;
namespace lt = leignn::testing;

namespace {

Structure labeled_random_structure(Rng& rng, int atoms, bool periodic) {
  Structure s = lt::random_structure(rng, atoms, periodic);
  s.energy_label = rng.uniform(-20, 5);
  std::vector<Vec3> forces;
  for (int i = 0; i < atoms; ++i)
    forces.push_back({rng.normal(0, 0.3), rng.normal(0, 0.3), rng.normal(0, 0.3)});
  s.force_labels = forces;
  return s;
}

}  // namespace

TEST(ExtXyz, WriteParseWriteIsByteIdentical) {
  Rng rng(42);
  std::vector<Structure> frames;
  for (int i = 0; i < 8; ++i) {
    Structure s = labeled_random_structure(rng, 2 + static_cast<int>(rng.index(6)), i % 2 == 0);
    if (i % 3 == 0) s.force_labels.reset();
    if (i % 4 == 0) s.energy_label.reset();
    if (i == 5) s.extra_info = {"time=12.5", "note=\"hello world\""};
    frames.push_back(s);
  }
  const std::string first = write_extxyz(frames);
  const std::vector<Structure> parsed = parse_extxyz(first);
  ASSERT_EQ(parsed.size(), frames.size());
  const std::string second = write_extxyz(parsed);
  EXPECT_EQ(first, second);
}

TEST(ExtXyz, ParsedFieldsMatch) {
  const std::string text =
      "2\n"
      "Lattice=\"10 0 0 0 10 0 0 0 10\" Properties=species:S:1:pos:R:3 energy=-3.5 "
      "pbc=\"T T T\" step=7\n"
      "Ar 1 2 3\n"
      "O 4 5 6.5\n";
  const auto frames = parse_extxyz(text);
  ASSERT_EQ(frames.size(), 1u);
  const Structure& s = frames[0];
  EXPECT_EQ(s.atomic_numbers, (std::vector<int>{18, 8}));
  ASSERT_TRUE(s.cell.has_value());
  EXPECT_DOUBLE_EQ(s.cell->m[1][1], 10.0);
  EXPECT_TRUE(s.pbc[0] && s.pbc[1] && s.pbc[2]);
  ASSERT_TRUE(s.energy_label.has_value());
  EXPECT_DOUBLE_EQ(*s.energy_label, -3.5);
  EXPECT_FALSE(s.force_labels.has_value());
  ASSERT_EQ(s.extra_info.size(), 1u);
  EXPECT_EQ(s.extra_info[0], "step=7");
  EXPECT_DOUBLE_EQ(s.positions[1].z, 6.5);
}

TEST(ExtXyz, MalformedInputsRejected) {
  EXPECT_THROW(parse_extxyz("abc\nProperties=species:S:1:pos:R:3\n"), leignn::Error);
  // Column count does not match the declared Properties.
  EXPECT_THROW(parse_extxyz("1\nProperties=species:S:1:pos:R:3:forces:R:3\nAr 1 2 3\n"),
               leignn::Error);
  // Bad Lattice arity.
  EXPECT_THROW(
      parse_extxyz("1\nLattice=\"1 0 0 0 1 0\" Properties=species:S:1:pos:R:3\nAr 1 2 3\n"),
      leignn::Error);
  // Unknown property column.
  EXPECT_THROW(parse_extxyz("1\nProperties=species:S:1:pos:R:3:charge:R:1\nAr 1 2 3 0\n"),
               leignn::Error);
  // Truncated frame.
  EXPECT_THROW(parse_extxyz("2\nProperties=species:S:1:pos:R:3\nAr 1 2 3\n"), leignn::Error);
}

TEST(Oracle, LennardJonesDimerMinimum) {
  const OraclePotential pot = OraclePotential::lennard_jones();
  const double epsilon = pot.default_params.epsilon;
  const double sigma = pot.default_params.sigma;
  const double r_star = std::pow(2.0, 1.0 / 6.0) * sigma;

  Structure dimer;
  dimer.atomic_numbers = {18, 18};
  dimer.positions = {{0, 0, 0}, {r_star, 0, 0}};
  const auto [energy, forces] = oracle_energy_forces(dimer, pot);

  // Independent shift computation at the cutoff.
  const double sr = sigma / pot.cutoff;
  const double sr6 = std::pow(sr, 6);
  const double shift = 4.0 * epsilon * (sr6 * sr6 - sr6);
  EXPECT_NEAR(energy, -epsilon - shift, 1e-15);
  EXPECT_LT(forces[0].norm(), 1e-15);
  EXPECT_LT(forces[1].norm(), 1e-15);
}

TEST(Oracle, ForcesMatchFiniteDifferencesOfEnergy) {
  const OraclePotential pot = OraclePotential::lennard_jones();
  Structure trimer;
  trimer.atomic_numbers = {18, 18, 18};
  trimer.positions = {{0, 0, 0}, {3.7, 0.4, -0.2}, {1.1, 3.5, 0.8}};

  const auto [energy, forces] = oracle_energy_forces(trimer, pot);
  (void)energy;
  const double h = 1e-6;
  for (std::size_t i = 0; i < trimer.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      Structure plus = trimer, minus = trimer;
      plus.positions[i][c] += h;
      minus.positions[i][c] -= h;
      const double numeric = -(oracle_energy_forces(plus, pot).first -
                               oracle_energy_forces(minus, pot).first) /
                             (2 * h);
      EXPECT_NEAR(forces[i][c], numeric, 1e-8);
    }
  }
}

TEST(Oracle, NewtonsThirdLawAndOverlapGuard) {
  Rng rng(7);
  const OraclePotential pot = OraclePotential::lennard_jones();
  const Structure s = lt::random_structure(rng, 12, false, 3.0, {18});
  const auto [energy, forces] = oracle_energy_forces(s, pot);
  (void)energy;
  Vec3 total{0, 0, 0};
  for (const Vec3& f : forces) total += f;
  EXPECT_LT(total.norm(), 1e-12);

  Structure overlap;
  overlap.atomic_numbers = {18, 18};
  overlap.positions = {{0, 0, 0}, {1e-4, 0, 0}};
  EXPECT_THROW(oracle_energy_forces(overlap, pot), leignn::Error);
}

TEST(Oracle, MorsePairShape) {
  const OraclePotential pot = OraclePotential::morse(0.5, 1.2, 2.2, 7.0);
  // Minimum at r_e with depth D_e (before the cutoff shift).
  const auto [at_min, deriv_min] = leignn::oracle_pair(pot, 1, 1, 2.2);
  const auto [shift_ref, unused] = leignn::oracle_pair(pot, 1, 1, 7.0);
  (void)unused;
  EXPECT_NEAR(deriv_min, 0.0, 1e-12);
  EXPECT_NEAR(at_min - shift_ref, -0.5, 1e-6);  // shift_ref == 0 by construction
  EXPECT_NEAR(shift_ref, 0.0, 1e-15);

  Structure dimer;
  dimer.atomic_numbers = {1, 1};
  dimer.positions = {{0, 0, 0}, {2.6, 0, 0}};
  const auto [energy, forces] = oracle_energy_forces(dimer, pot);
  (void)energy;
  const double h = 1e-6;
  Structure plus = dimer, minus = dimer;
  plus.positions[1].x += h;
  minus.positions[1].x -= h;
  const double numeric = -(oracle_energy_forces(plus, pot).first -
                           oracle_energy_forces(minus, pot).first) /
                         (2 * h);
  EXPECT_NEAR(forces[1].x, numeric, 1e-8);
}

TEST(Oracle, SharedEquivarianceHarnessPasses) {
  // The same transform helpers used for the model: rotation leaves the energy
  // fixed and rotates forces; far-separated copies double the energy.
  Rng rng(9);
  const OraclePotential pot = OraclePotential::lennard_jones();
  for (int trial = 0; trial < 6; ++trial) {
    const bool periodic = trial % 2 == 0;
    const Structure s = lt::random_structure(rng, 10, periodic, 3.2, {18});
    const leignn::Mat3 rotation = lt::random_rotation(rng, trial % 3 == 0);
    const Structure sr = lt::rotated(s, rotation);

    const auto [e0, f0] = oracle_energy_forces(s, pot);
    const auto [e1, f1] = oracle_energy_forces(sr, pot);
    EXPECT_NEAR(e1, e0, 1e-10 * std::max(1.0, std::abs(e0)));
    const leignn::Mat3 rt = rotation.transpose();
    for (std::size_t i = 0; i < s.size(); ++i)
      EXPECT_LT((f1[i] - mul(f0[i], rt)).norm(), 1e-10);
  }

  const Structure s = lt::random_structure(rng, 6, false, 3.2, {18});
  Structure doubled = s;
  for (std::size_t i = 0; i < s.size(); ++i) {
    doubled.atomic_numbers.push_back(s.atomic_numbers[i]);
    doubled.positions.push_back(s.positions[i] + Vec3{64.0, 0, 0});
  }
  const double single_energy = oracle_energy_forces(s, pot).first;
  const double double_energy = oracle_energy_forces(doubled, pot).first;
  EXPECT_NEAR(double_energy, 2 * single_energy, 1e-12 * std::abs(2 * single_energy));
}

TEST(Dataset, FccSupercellGeometry) {
  const Structure s = leignn::fcc_supercell(32, 18, 5.7);
  EXPECT_EQ(s.size(), 32u);
  ASSERT_TRUE(s.cell.has_value());
  EXPECT_DOUBLE_EQ(s.cell->m[0][0], 11.4);
  // Nearest-neighbor distance in FCC is a/sqrt(2).
  double min_dist = 1e9;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = i + 1; j < s.size(); ++j) {
      const Vec3 d = leignn::minimum_image(s.positions[i] - s.positions[j], *s.cell, s.pbc);
      min_dist = std::min(min_dist, d.norm());
    }
  EXPECT_NEAR(min_dist, 5.7 / std::sqrt(2.0), 1e-12);
}

TEST(Dataset, GenerationIsDeterministicAndSelfConsistent) {
  const OraclePotential pot = OraclePotential::lennard_jones();
  leignn::DatasetConfig cfg;
  cfg.num_samples = 4;
  cfg.num_atoms = 32;
  cfg.equilibration_fs = 200.0;
  cfg.sample_interval_fs = 40.0;
  cfg.dt_fs = 2.0;
  cfg.seed = 11;

  const auto a = leignn::generate_dataset(pot, cfg);
  const auto b = leignn::generate_dataset(pot, cfg);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(write_extxyz(a), write_extxyz(b));

  for (const Structure& s : a) {
    const auto [energy, forces] = oracle_energy_forces(s, pot);
    EXPECT_NEAR(energy, *s.energy_label, 1e-12 * std::max(1.0, std::abs(energy)));
    for (std::size_t i = 0; i < s.size(); ++i)
      EXPECT_LT((forces[i] - (*s.force_labels)[i]).norm(), 1e-12);
  }

  leignn::DatasetConfig empty = cfg;
  empty.num_samples = 0;
  EXPECT_TRUE(leignn::generate_dataset(pot, empty).empty());
}

TEST(Dataset, RoundTripThroughExtXyzPreservesLabels) {
  const OraclePotential pot = OraclePotential::lennard_jones();
  leignn::DatasetConfig cfg;
  cfg.num_samples = 2;
  cfg.num_atoms = 16;
  cfg.equilibration_fs = 100.0;
  cfg.sample_interval_fs = 40.0;
  cfg.seed = 3;
  const auto samples = leignn::generate_dataset(pot, cfg);
  const auto parsed = parse_extxyz(write_extxyz(samples));
  ASSERT_EQ(parsed.size(), samples.size());
  for (std::size_t k = 0; k < samples.size(); ++k) {
    EXPECT_EQ(*parsed[k].energy_label, *samples[k].energy_label);
    for (std::size_t i = 0; i < samples[k].size(); ++i) {
      EXPECT_EQ(parsed[k].positions[i].x, samples[k].positions[i].x);
      EXPECT_EQ((*parsed[k].force_labels)[i].z, (*samples[k].force_labels)[i].z);
    }
  }
}
