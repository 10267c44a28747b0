#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "leignn/common.hpp"
#include "leignn/vec3.hpp"

namespace leignn {

/// An atomic configuration with optional periodic cell and optional
/// energy/force labels. Positions are in Angstrom, energies in eV and
/// forces in eV/Angstrom.
struct Structure {
  std::vector<int> atomic_numbers;
  std::vector<Vec3> positions;
  std::optional<Mat3> cell;  // rows are lattice vectors
  std::array<bool, 3> pbc{false, false, false};
  std::optional<double> energy_label;
  std::optional<std::vector<Vec3>> force_labels;
  /// Unrecognized comment-line entries from extended XYZ, kept verbatim
  /// and in order so round trips are lossless.
  std::vector<std::string> extra_info;

  std::size_t size() const { return atomic_numbers.size(); }

  bool periodic() const { return pbc[0] || pbc[1] || pbc[2]; }

  void validate() const {
    detail::check(!atomic_numbers.empty(), "structure must contain at least one atom");
    detail::check(positions.size() == atomic_numbers.size(),
                  "positions/atomic_numbers size mismatch");
    for (int z : atomic_numbers)
      detail::check(z >= 1, "atomic numbers must be positive");
    for (const Vec3& p : positions)
      detail::check(p.finite(), "non-finite atom position");
    if (periodic()) {
      detail::check(cell.has_value(), "periodic structure requires a cell");
      detail::check(std::abs(cell->det()) > 1e-8,
                    "periodic cell is singular (|det| <= 1e-8)");
    }
    if (force_labels) {
      detail::check(force_labels->size() == atomic_numbers.size(),
                    "force labels must have one row per atom");
    }
  }
};

}  // namespace leignn
