#pragma once

#include <cmath>
#include <map>
#include <utility>
#include <vector>

#include "leignn/geometry.hpp"
#include "leignn/md.hpp"
#include "leignn/structure.hpp"

namespace leignn {

/// Analytic pair potential used to manufacture ground-truth labels in place
/// of DFT data. Energies are shifted so the potential is continuous at the
/// cutoff.
struct OraclePotential {
  enum class Kind { kLennardJones, kMorse };

  struct PairParams {
    // Lennard-Jones
    double epsilon = 0.0104;  // eV (argon)
    double sigma = 3.4;       // Angstrom (argon)
    // Morse
    double well_depth = 0.0;   // D_e, eV
    double steepness = 0.0;    // a, 1/Angstrom
    double r_equilibrium = 0.0;  // r_e, Angstrom
  };

  Kind kind = Kind::kLennardJones;
  double cutoff = 8.5;  // Angstrom (2.5 sigma for argon)
  PairParams default_params;
  std::map<std::pair<int, int>, PairParams> per_pair;

  const PairParams& params_for(int z1, int z2) const {
    const auto key = std::minmax(z1, z2);
    const auto it = per_pair.find({key.first, key.second});
    return it == per_pair.end() ? default_params : it->second;
  }

  void validate() const {
    detail::check(cutoff > 0, "oracle cutoff must be positive");
    auto check_params = [this](const PairParams& p) {
      if (kind == Kind::kLennardJones) {
        detail::check(p.epsilon > 0 && p.sigma > 0, "LJ parameters must be positive");
      } else {
        detail::check(p.well_depth > 0 && p.steepness > 0 && p.r_equilibrium > 0,
                      "Morse parameters must be positive");
      }
    };
    check_params(default_params);
    for (const auto& [key, p] : per_pair) check_params(p);
  }

  static OraclePotential lennard_jones(double epsilon = 0.0104, double sigma = 3.4,
                                       double cutoff_factor = 2.5) {
    OraclePotential pot;
    pot.kind = Kind::kLennardJones;
    pot.default_params.epsilon = epsilon;
    pot.default_params.sigma = sigma;
    pot.cutoff = cutoff_factor * sigma;
    return pot;
  }

  static OraclePotential morse(double well_depth, double steepness, double r_equilibrium,
                               double cutoff) {
    OraclePotential pot;
    pot.kind = Kind::kMorse;
    pot.default_params.well_depth = well_depth;
    pot.default_params.steepness = steepness;
    pot.default_params.r_equilibrium = r_equilibrium;
    pot.cutoff = cutoff;
    return pot;
  }
};

namespace oracle_detail {

/// Unshifted pair energy and its radial derivative.
inline std::pair<double, double> pair_value(const OraclePotential& pot,
                                            const OraclePotential::PairParams& p, double r) {
  if (pot.kind == OraclePotential::Kind::kLennardJones) {
    const double sr = p.sigma / r;
    const double sr6 = sr * sr * sr * sr * sr * sr;
    const double sr12 = sr6 * sr6;
    const double energy = 4.0 * p.epsilon * (sr12 - sr6);
    const double derivative = 4.0 * p.epsilon * (-12.0 * sr12 + 6.0 * sr6) / r;
    return {energy, derivative};
  }
  const double decay = std::exp(-p.steepness * (r - p.r_equilibrium));
  const double energy = p.well_depth * (decay * decay - 2.0 * decay);
  const double derivative = 2.0 * p.well_depth * p.steepness * (decay - decay * decay);
  return {energy, derivative};
}

}  // namespace oracle_detail

/// Shifted pair energy (continuous at the cutoff) and radial derivative.
inline std::pair<double, double> oracle_pair(const OraclePotential& pot, int z1, int z2,
                                             double r) {
  detail::check(r > 0 && r <= pot.cutoff, "pair distance outside (0, cutoff]");
  const auto& p = pot.params_for(z1, z2);
  const auto [energy, derivative] = oracle_detail::pair_value(pot, p, r);
  const auto [shift, unused] = oracle_detail::pair_value(pot, p, pot.cutoff);
  (void)unused;
  return {energy - shift, derivative};
}

/// Total energy and analytic forces from a direct pairwise sum with its own
/// periodic-image enumeration (kept independent of the neighbor-list module
/// so the two can cross-check each other).
inline std::pair<double, std::vector<Vec3>> oracle_energy_forces(const Structure& s,
                                                                 const OraclePotential& pot) {
  s.validate();
  pot.validate();
  const int num_atoms = static_cast<int>(s.size());
  const bool periodic = s.periodic();
  std::vector<Vec3> pos = s.positions;
  std::array<int, 3> range{0, 0, 0};
  if (periodic) {
    pos = geom_detail::wrap_positions(s.positions, *s.cell, s.pbc);
    for (int d = 0; d < 3; ++d) {
      if (!s.pbc[static_cast<std::size_t>(d)]) continue;
      range[static_cast<std::size_t>(d)] = static_cast<int>(std::floor(
                                               pot.cutoff / geom_detail::cell_height(*s.cell, d))) +
                                           1;
    }
  }

  double energy = 0.0;
  std::vector<Vec3> forces(static_cast<std::size_t>(num_atoms), Vec3{0, 0, 0});
  for (int i = 0; i < num_atoms; ++i) {
    for (int j = i; j < num_atoms; ++j) {
      for (int n0 = -range[0]; n0 <= range[0]; ++n0) {
        for (int n1 = -range[1]; n1 <= range[1]; ++n1) {
          for (int n2 = -range[2]; n2 <= range[2]; ++n2) {
            if (i == j) {
              // Self-image pairs: count each unordered image once (first
              // nonzero shift component positive). Their forces cancel.
              if (n0 < 0 || (n0 == 0 && (n1 < 0 || (n1 == 0 && n2 <= 0)))) continue;
            }
            Vec3 image = pos[static_cast<std::size_t>(j)];
            if (periodic) {
              image += s.cell->row(0) * n0 + s.cell->row(1) * n1 + s.cell->row(2) * n2;
            } else if (n0 != 0 || n1 != 0 || n2 != 0) {
              continue;
            }
            const Vec3 delta = pos[static_cast<std::size_t>(i)] - image;
            const double r = delta.norm();
            detail::check(r >= kMinPairDistance, "overlapping atoms in oracle evaluation");
            if (r > pot.cutoff) continue;
            const auto [pair_energy, derivative] =
                oracle_pair(pot, s.atomic_numbers[static_cast<std::size_t>(i)],
                            s.atomic_numbers[static_cast<std::size_t>(j)], r);
            energy += pair_energy;
            const Vec3 direction = delta / r;
            forces[static_cast<std::size_t>(i)] -= direction * derivative;
            forces[static_cast<std::size_t>(j)] += direction * derivative;
          }
        }
      }
    }
  }
  return {energy, forces};
}

/// ForceProvider adapter for the analytic potentials.
class OracleForceProvider : public ForceProvider {
 public:
  explicit OracleForceProvider(OraclePotential pot) : pot_(std::move(pot)) {}

  Result evaluate(const Structure& s) override {
    auto [energy, forces] = oracle_energy_forces(s, pot_);
    return {energy, std::move(forces)};
  }

  const OraclePotential& potential() const { return pot_; }

 private:
  OraclePotential pot_;
};

struct DatasetConfig {
  int num_samples = 1000;
  int num_atoms = 32;
  int species = 18;          // argon
  double lattice_constant = 5.7;  // Angstrom, FCC conventional cell
  double temperature_min = 100.0;
  double temperature_max = 100.0;
  double dt_fs = 2.0;
  double friction = 0.05;
  double equilibration_fs = 5000.0;
  double sample_interval_fs = 100.0;
  std::uint64_t seed = 0;

  void validate() const {
    detail::check(num_samples >= 0, "sample count must be non-negative");
    detail::check(num_atoms >= 1, "atom count must be positive");
    detail::check(species >= 1 && species <= kMaxAtomicNumber, "bad species");
    detail::check(lattice_constant > 0, "lattice constant must be positive");
    detail::check(temperature_min >= 0 && temperature_max >= temperature_min,
                  "bad temperature range");
    detail::check(dt_fs > 0 && sample_interval_fs >= dt_fs, "bad sampling times");
    detail::check(equilibration_fs >= 0, "bad equilibration time");
  }
};

/// FCC supercell sized to hold `num_atoms` sites (surplus sites are left
/// vacant in deterministic order).
inline Structure fcc_supercell(int num_atoms, int species, double lattice_constant) {
  int cells = 1;
  while (4 * cells * cells * cells < num_atoms) ++cells;
  Structure s;
  Mat3 cell;
  const double box = lattice_constant * cells;
  cell.m = {{{box, 0, 0}, {0, box, 0}, {0, 0, box}}};
  s.cell = cell;
  s.pbc = {true, true, true};
  const Vec3 basis[4] = {{0, 0, 0}, {0.5, 0.5, 0}, {0.5, 0, 0.5}, {0, 0.5, 0.5}};
  for (int a = 0; a < cells && static_cast<int>(s.size()) < num_atoms; ++a)
    for (int b = 0; b < cells && static_cast<int>(s.size()) < num_atoms; ++b)
      for (int c = 0; c < cells && static_cast<int>(s.size()) < num_atoms; ++c)
        for (const Vec3& site : basis) {
          if (static_cast<int>(s.size()) >= num_atoms) break;
          s.atomic_numbers.push_back(species);
          s.positions.push_back({(a + site.x) * lattice_constant,
                                 (b + site.y) * lattice_constant,
                                 (c + site.z) * lattice_constant});
        }
  return s;
}

/// Labeled structures sampled from an oracle-driven Langevin trajectory:
/// equilibrate, then record a decorrelated frame every sample interval and
/// label it with the oracle's energy and forces. Deterministic per seed.
inline std::vector<Structure> generate_dataset(const OraclePotential& pot,
                                               const DatasetConfig& cfg) {
  cfg.validate();
  pot.validate();
  std::vector<Structure> samples;
  if (cfg.num_samples == 0) return samples;

  const Structure initial = fcc_supercell(cfg.num_atoms, cfg.species, cfg.lattice_constant);

  MDState state;
  state.positions = initial.positions;
  state.cell = initial.cell;
  state.pbc = initial.pbc;
  state.image_flags.assign(initial.size(), {0, 0, 0});
  state.masses.assign(initial.size(), atomic_mass_amu(cfg.species));
  Rng rng = Rng::split(cfg.seed, "dataset-velocities");
  state.velocities = maxwell_boltzmann_init(state.masses, cfg.temperature_min, rng);

  OracleForceProvider provider(pot);
  Structure scratch = initial;
  MDConfig md;
  md.dt_fs = cfg.dt_fs;
  md.friction = cfg.friction;
  md.temperature = cfg.temperature_min;

  Rng noise = Rng::split(cfg.seed, "dataset-noise");
  auto first = provider.evaluate(scratch);
  std::vector<Vec3> forces = first.forces;
  double potential = first.energy;

  const long equil_steps = static_cast<long>(std::llround(cfg.equilibration_fs / cfg.dt_fs));
  const long interval_steps =
      std::max<long>(1, static_cast<long>(std::llround(cfg.sample_interval_fs / cfg.dt_fs)));
  const long production_steps = interval_steps * cfg.num_samples;

  for (long step = 1; step <= equil_steps + production_steps; ++step) {
    if (step > equil_steps && cfg.num_samples > 1) {
      // Linear temperature ramp across production for compositional variety.
      const double progress = static_cast<double>(step - equil_steps) /
                              static_cast<double>(production_steps);
      md.temperature = cfg.temperature_min +
                       (cfg.temperature_max - cfg.temperature_min) * progress;
    }
    langevin_step(state, forces, potential, provider, md, noise, scratch);
    if (step > equil_steps && (step - equil_steps) % interval_steps == 0) {
      Structure sample = initial;
      sample.positions = state.positions;
      auto [energy, sampled_forces] = oracle_energy_forces(sample, pot);
      sample.energy_label = energy;
      sample.force_labels = std::move(sampled_forces);
      samples.push_back(std::move(sample));
    }
  }
  detail::check(static_cast<int>(samples.size()) == cfg.num_samples,
                "dataset generation produced an unexpected sample count");
  return samples;
}

}  // namespace leignn
