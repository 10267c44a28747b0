#pragma once

namespace leignn::constants {

// Exact SI definitions (2019 redefinition) plus the CODATA 2018 atomic mass unit.
inline constexpr double kJoulePerEv = 1.602176634e-19;
inline constexpr double kBoltzmannJoulePerK = 1.380649e-23;
inline constexpr double kAmuKg = 1.66053906660e-27;

/// Boltzmann constant in the internal eV/K unit system.
inline constexpr double kBoltzmannEvPerK = kBoltzmannJoulePerK / kJoulePerEv;

namespace detail {
constexpr double sqrt_newton(double x, double cur, double prev) {
  return cur == prev ? cur : sqrt_newton(x, 0.5 * (cur + x / cur), cur);
}
}  // namespace detail

constexpr double constexpr_sqrt(double x) {
  return detail::sqrt_newton(x, x > 1.0 ? x : 1.0, 0.0);
}

/// Internal MD time unit sqrt(amu * Angstrom^2 / eV), expressed in femtoseconds.
/// With positions in Angstrom, masses in amu and energies in eV, kinetic energy
/// 0.5*m*v^2 comes out in eV when velocities are measured in Angstrom per time unit.
inline constexpr double kTimeUnitFs =
    constexpr_sqrt(kAmuKg * 1e-20 / kJoulePerEv) * 1e15;

static_assert(kBoltzmannEvPerK > 8.61733e-5 && kBoltzmannEvPerK < 8.61734e-5,
              "Boltzmann constant derivation drifted");
static_assert(kTimeUnitFs > 10.1804 && kTimeUnitFs < 10.1806,
              "internal time unit derivation drifted");

}  // namespace leignn::constants
