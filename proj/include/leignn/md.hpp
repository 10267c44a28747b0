#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "leignn/constants.hpp"
#include "leignn/elements.hpp"
#include "leignn/geometry.hpp"
#include "leignn/model.hpp"
#include "leignn/rng.hpp"
#include "leignn/structure.hpp"

namespace leignn {

/// Unit system: eV / Angstrom / amu / K. Velocities are stored in
/// Angstrom/fs; the conversion to the internal time unit happens inside the
/// integrator through constants::kTimeUnitFs.
struct MDState {
  std::vector<Vec3> positions;   // Angstrom, wrapped into the cell when periodic
  std::vector<Vec3> velocities;  // Angstrom/fs
  std::vector<double> masses;    // amu
  double time_fs = 0.0;
  std::optional<Mat3> cell;
  std::array<bool, 3> pbc{false, false, false};
  std::vector<std::array<int, 3>> image_flags;  // wraps applied per atom

  std::size_t size() const { return positions.size(); }

  Vec3 unwrapped_position(std::size_t i) const {
    Vec3 p = positions[i];
    if (cell) {
      for (int d = 0; d < 3; ++d)
        p += cell->row(d) * static_cast<double>(image_flags[i][static_cast<std::size_t>(d)]);
    }
    return p;
  }

  void validate() const {
    detail::check(!positions.empty(), "MD state must contain atoms");
    detail::check(velocities.size() == positions.size() && masses.size() == positions.size(),
                  "MD state arrays must have matching sizes");
    for (double m : masses) detail::check(m > 0, "masses must be positive");
    for (const Vec3& p : positions) detail::check(p.finite(), "non-finite MD position");
    for (const Vec3& v : velocities) detail::check(v.finite(), "non-finite MD velocity");
  }
};

struct MDConfig {
  double dt_fs = 1.0;
  double temperature = 300.0;  // K
  double friction = 0.01;      // 1/fs; zero recovers velocity Verlet
  long steps = 1000;
  int snapshot_stride = 100;
  std::uint64_t seed = 0;
  // Stability monitor: aborting (rather than crashing) on these keeps an
  // unstable force field diagnosable from the truncated trajectory.
  double abort_min_distance = 0.5;   // Angstrom
  double abort_max_speed = 100.0;    // Angstrom/fs
  int monitor_stride = 1;

  void validate() const {
    detail::check(dt_fs > 0, "timestep must be positive");
    detail::check(temperature >= 0, "temperature must be non-negative");
    detail::check(friction >= 0, "friction must be non-negative");
    detail::check(steps >= 0, "step count must be non-negative");
    detail::check(snapshot_stride >= 1, "snapshot stride must be >= 1");
    detail::check(monitor_stride >= 1, "monitor stride must be >= 1");
  }
};

/// Anything that maps a configuration to a potential energy and forces.
class ForceProvider {
 public:
  struct Result {
    double energy = 0.0;          // eV
    std::vector<Vec3> forces;     // eV/Angstrom
  };

  virtual ~ForceProvider() = default;
  virtual Result evaluate(const Structure& s) = 0;
};

/// Wraps a plain callable; handy for analytic test potentials.
class FunctionForceProvider : public ForceProvider {
 public:
  using Fn = std::function<Result(const Structure&)>;
  explicit FunctionForceProvider(Fn fn) : fn_(std::move(fn)) {}
  Result evaluate(const Structure& s) override { return fn_(s); }

 private:
  Fn fn_;
};

/// Negative control: isotropic Gaussian noise forces of a fixed amplitude.
class RandomForceProvider : public ForceProvider {
 public:
  RandomForceProvider(double amplitude_ev_per_ang, std::uint64_t seed)
      : amplitude_(amplitude_ev_per_ang), rng_(seed) {}

  Result evaluate(const Structure& s) override {
    Result result;
    result.energy = 0.0;
    result.forces.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      result.forces.push_back(
          {rng_.normal(0, amplitude_), rng_.normal(0, amplitude_), rng_.normal(0, amplitude_)});
    }
    return result;
  }

 private:
  double amplitude_;
  Rng rng_;
};

/// LEIGNN force field. With a positive `neighbor_skin` the candidate list is
/// built with an enlarged cutoff and reused until any atom moves more than
/// half the skin; edges are re-filtered to the true cutoff each call, which
/// reproduces a fresh build exactly. Reuse requires the padded cutoff to stay
/// under half the minimum cell height (unique minimum images); otherwise the
/// provider silently falls back to per-call rebuilds.
template <typename Real>
class ModelForceProvider : public ForceProvider {
 public:
  explicit ModelForceProvider(ModelParams<Real> params, double neighbor_skin = 0.0)
      : params_(std::move(params)), skin_(neighbor_skin) {
    detail::check(skin_ >= 0, "neighbor skin must be non-negative");
  }

  Result evaluate(const Structure& s) override {
    const Graph graph = graph_for(s);
    const auto fwd = forward_on_graph<Real>(
        nullptr, batch_graph_from<Real>(s, graph, params_.hyper), params_);
    const Prediction pred = predictions_from(fwd, params_)[0];
    Result result;
    result.energy = pred.energy;
    result.forces = pred.forces;
    return result;
  }

  const ModelParams<Real>& params() const { return params_; }

 private:
  bool skin_usable(const Structure& s) const {
    if (skin_ <= 0) return false;
    if (!s.periodic()) return true;
    double min_height = std::numeric_limits<double>::infinity();
    for (int d = 0; d < 3; ++d)
      min_height = std::min(min_height, geom_detail::cell_height(*s.cell, d));
    return params_.hyper.cutoff + skin_ <= 0.5 * min_height;
  }

  Graph graph_for(const Structure& s) {
    if (!skin_usable(s)) return build_neighbor_list(s, params_.hyper.cutoff,
                                                    params_.hyper.max_neighbors);
    const bool stale = [&] {
      if (!candidates_ || reference_positions_.size() != s.size()) return true;
      for (std::size_t i = 0; i < s.size(); ++i) {
        Vec3 delta = s.positions[i] - reference_positions_[i];
        if (s.cell) delta = minimum_image(delta, *s.cell, s.pbc);
        if (delta.norm() > 0.5 * skin_) return true;
      }
      return false;
    }();
    if (stale) {
      // Uncapped: the per-call cutoff filter below re-applies the neighbor
      // cap, so the cached list must hold every candidate in the padded ball.
      candidates_ = build_neighbor_list(s, params_.hyper.cutoff + skin_,
                                        std::numeric_limits<int>::max());
      reference_positions_ = s.positions;
    }

    // Refresh displacements from current positions and re-apply the cutoff
    // and the per-node cap; candidates are already distance-sorted per node.
    Graph fresh;
    fresh.num_nodes = candidates_->num_nodes;
    struct Cand {
      double dist;
      int src;
      std::array<int, 3> shift;
      Vec3 vec;
      bool operator<(const Cand& o) const {
        return std::tie(dist, src, shift) < std::tie(o.dist, o.src, o.shift);
      }
    };
    std::vector<std::vector<Cand>> per_node(static_cast<std::size_t>(fresh.num_nodes));
    for (std::size_t k = 0; k < candidates_->num_edges(); ++k) {
      const int src = candidates_->edge_src[k];
      const int dst = candidates_->edge_dst[k];
      Vec3 delta = s.positions[static_cast<std::size_t>(dst)] -
                   s.positions[static_cast<std::size_t>(src)];
      if (s.cell) delta = minimum_image(delta, *s.cell, s.pbc);
      const double dist = delta.norm();
      detail::check(dist >= kMinPairDistance, "atoms closer than the overlap guard distance");
      if (dist <= params_.hyper.cutoff) {
        per_node[static_cast<std::size_t>(dst)].push_back(
            {dist, src, candidates_->edge_shift[k], delta});
      }
    }
    for (int i = 0; i < fresh.num_nodes; ++i) {
      auto& cands = per_node[static_cast<std::size_t>(i)];
      std::sort(cands.begin(), cands.end());
      const std::size_t keep = std::min(
          cands.size(), static_cast<std::size_t>(params_.hyper.max_neighbors));
      for (std::size_t k = 0; k < keep; ++k) {
        fresh.edge_src.push_back(cands[k].src);
        fresh.edge_dst.push_back(i);
        fresh.edge_vec.push_back(cands[k].vec);
        fresh.edge_len.push_back(cands[k].dist);
        fresh.edge_shift.push_back(cands[k].shift);
      }
    }
    return fresh;
  }

  ModelParams<Real> params_;
  double skin_;
  std::optional<Graph> candidates_;
  std::vector<Vec3> reference_positions_;
};

inline double kinetic_energy_ev(const MDState& state) {
  const double t0 = constants::kTimeUnitFs;
  double twice_ke = 0.0;
  for (std::size_t i = 0; i < state.size(); ++i) {
    twice_ke += state.masses[i] * state.velocities[i].norm2();
  }
  return 0.5 * twice_ke * t0 * t0;  // (A/fs)^2 -> (A/t0)^2 carries t0^2
}

inline double kinetic_temperature(const MDState& state) {
  const double dof = 3.0 * static_cast<double>(state.size());
  return 2.0 * kinetic_energy_ev(state) / (dof * constants::kBoltzmannEvPerK);
}

/// Maxwell-Boltzmann velocities at temperature T with the center-of-mass
/// drift removed. T = 0 gives exact zeros.
inline std::vector<Vec3> maxwell_boltzmann_init(const std::vector<double>& masses,
                                                double temperature, Rng& rng) {
  detail::check(temperature >= 0, "temperature must be non-negative");
  std::vector<Vec3> velocities(masses.size(), Vec3{0, 0, 0});
  if (temperature == 0 || masses.empty()) return velocities;
  const double t0 = constants::kTimeUnitFs;
  for (std::size_t i = 0; i < masses.size(); ++i) {
    const double sigma =
        std::sqrt(constants::kBoltzmannEvPerK * temperature / masses[i]) / t0;
    velocities[i] = {rng.normal(0, sigma), rng.normal(0, sigma), rng.normal(0, sigma)};
  }
  Vec3 momentum{0, 0, 0};
  double total_mass = 0;
  for (std::size_t i = 0; i < masses.size(); ++i) {
    momentum += velocities[i] * masses[i];
    total_mass += masses[i];
  }
  const Vec3 drift = momentum / total_mass;
  for (Vec3& v : velocities) v -= drift;
  return velocities;
}

namespace md_detail {

inline void wrap_state(MDState& state) {
  if (!state.cell) return;
  const Mat3 inv = state.cell->inverse();
  for (std::size_t i = 0; i < state.size(); ++i) {
    Vec3 frac = mul(state.positions[i], inv);
    std::array<int, 3> shift{0, 0, 0};
    for (int d = 0; d < 3; ++d) {
      if (!state.pbc[static_cast<std::size_t>(d)]) continue;
      shift[static_cast<std::size_t>(d)] = static_cast<int>(std::floor(frac[d]));
    }
    if (shift[0] == 0 && shift[1] == 0 && shift[2] == 0) continue;
    Vec3 offset{0, 0, 0};
    for (int d = 0; d < 3; ++d)
      offset += state.cell->row(d) * static_cast<double>(shift[static_cast<std::size_t>(d)]);
    state.positions[i] -= offset;
    for (int d = 0; d < 3; ++d)
      state.image_flags[i][static_cast<std::size_t>(d)] += shift[static_cast<std::size_t>(d)];
  }
}

}  // namespace md_detail

/// One BAOAB step of Langevin dynamics: half-kick, half-drift,
/// Ornstein-Uhlenbeck velocity refresh with factor exp(-friction*dt) and
/// noise sqrt(kB*T*(1 - exp(-2*friction*dt))/m), half-drift, half-kick.
/// `forces`/`potential` hold the forces at the incoming state and are
/// replaced by the re-evaluated forces at the outgoing one. Zero friction
/// turns the refresh into the identity and the step into velocity Verlet.
inline void langevin_step(MDState& state, std::vector<Vec3>& forces, double& potential,
                          ForceProvider& provider, const MDConfig& cfg, Rng& rng,
                          Structure& scratch) {
  const double t0 = constants::kTimeUnitFs;
  const double dt = cfg.dt_fs;
  const double half_kick = 0.5 * dt / (t0 * t0);  // (eV/A/amu)*fs -> A/fs
  const std::size_t num_atoms = state.size();

  for (std::size_t i = 0; i < num_atoms; ++i)
    state.velocities[i] += forces[i] * (half_kick / state.masses[i]);
  for (std::size_t i = 0; i < num_atoms; ++i)
    state.positions[i] += state.velocities[i] * (0.5 * dt);

  if (cfg.friction > 0) {
    const double decay = std::exp(-cfg.friction * dt);
    const double variance_scale =
        constants::kBoltzmannEvPerK * cfg.temperature * (1.0 - decay * decay);
    for (std::size_t i = 0; i < num_atoms; ++i) {
      const double sigma = std::sqrt(variance_scale / state.masses[i]) / t0;
      state.velocities[i] = state.velocities[i] * decay +
                            Vec3{rng.normal(0, sigma), rng.normal(0, sigma),
                                 rng.normal(0, sigma)};
    }
  }

  for (std::size_t i = 0; i < num_atoms; ++i)
    state.positions[i] += state.velocities[i] * (0.5 * dt);
  md_detail::wrap_state(state);

  scratch.positions = state.positions;
  const ForceProvider::Result result = provider.evaluate(scratch);
  detail::check(result.forces.size() == num_atoms, "force provider returned wrong size");
  forces = result.forces;
  potential = result.energy;
  for (std::size_t i = 0; i < num_atoms; ++i)
    state.velocities[i] += forces[i] * (half_kick / state.masses[i]);
  state.time_fs += dt;
}

struct TrajectoryFrame {
  double time_fs = 0.0;
  std::vector<Vec3> positions;   // unwrapped
  std::vector<Vec3> velocities;  // Angstrom/fs
  double potential_energy = 0.0;
  double kinetic_temperature = 0.0;
};

struct Trajectory {
  std::vector<TrajectoryFrame> frames;
  double dt_fs = 0.0;
  int snapshot_stride = 1;
  std::optional<Mat3> cell;
  std::array<bool, 3> pbc{false, false, false};
  std::vector<int> atomic_numbers;
  std::vector<double> masses;
  bool aborted = false;
  double abort_time_fs = 0.0;
  std::string abort_reason;

  double simulated_time_fs() const {
    return frames.empty() ? 0.0 : frames.back().time_fs - frames.front().time_fs;
  }
};

namespace md_detail {

inline std::optional<std::string> monitor_violation(const MDState& state,
                                                    const MDConfig& cfg) {
  for (const Vec3& p : state.positions)
    if (!p.finite()) return "non-finite position";
  for (const Vec3& v : state.velocities) {
    if (!v.finite()) return "non-finite velocity";
    if (v.norm() > cfg.abort_max_speed) return "velocity above the abort threshold";
  }
  const std::size_t num_atoms = state.size();
  for (std::size_t i = 0; i < num_atoms; ++i) {
    for (std::size_t j = i + 1; j < num_atoms; ++j) {
      Vec3 delta = state.positions[i] - state.positions[j];
      if (state.cell) delta = minimum_image(delta, *state.cell, state.pbc);
      if (delta.norm() < cfg.abort_min_distance)
        return "atoms closer than the abort distance";
    }
  }
  return std::nullopt;
}

}  // namespace md_detail

/// Integrate `cfg.steps` Langevin steps from the given structure, recording a
/// frame every `snapshot_stride` steps (the initial state is always frame 0).
/// If the stability monitor trips or the force provider fails, the run stops
/// early and the abort is recorded on the trajectory instead of thrown.
inline Trajectory run_simulation(const Structure& initial, ForceProvider& provider,
                                 const MDConfig& cfg) {
  initial.validate();
  cfg.validate();

  MDState state;
  state.positions = initial.positions;
  state.cell = initial.cell;
  state.pbc = initial.pbc;
  state.image_flags.assign(initial.size(), {0, 0, 0});
  for (int z : initial.atomic_numbers) state.masses.push_back(atomic_mass_amu(z));
  Rng rng = Rng::split(cfg.seed, "md-velocities");
  state.velocities = maxwell_boltzmann_init(state.masses, cfg.temperature, rng);
  md_detail::wrap_state(state);

  Trajectory traj;
  traj.dt_fs = cfg.dt_fs;
  traj.snapshot_stride = cfg.snapshot_stride;
  traj.cell = initial.cell;
  traj.pbc = initial.pbc;
  traj.atomic_numbers = initial.atomic_numbers;
  traj.masses = state.masses;

  Structure scratch = initial;
  scratch.energy_label.reset();
  scratch.force_labels.reset();

  auto record_frame = [&](double potential) {
    TrajectoryFrame frame;
    frame.time_fs = state.time_fs;
    frame.positions.reserve(state.size());
    for (std::size_t i = 0; i < state.size(); ++i)
      frame.positions.push_back(state.unwrapped_position(i));
    frame.velocities = state.velocities;
    frame.potential_energy = potential;
    frame.kinetic_temperature = kinetic_temperature(state);
    traj.frames.push_back(std::move(frame));
  };

  Rng noise_rng = Rng::split(cfg.seed, "md-noise");
  std::vector<Vec3> forces;
  double potential = 0.0;
  try {
    scratch.positions = state.positions;
    const auto first = provider.evaluate(scratch);
    forces = first.forces;
    potential = first.energy;
    record_frame(potential);

    for (long step = 1; step <= cfg.steps; ++step) {
      langevin_step(state, forces, potential, provider, cfg, noise_rng, scratch);
      if (step % cfg.monitor_stride == 0) {
        if (auto violation = md_detail::monitor_violation(state, cfg)) {
          traj.aborted = true;
          traj.abort_time_fs = state.time_fs;
          traj.abort_reason = *violation;
          break;
        }
      }
      if (step % cfg.snapshot_stride == 0) record_frame(potential);
    }
  } catch (const Error& e) {
    traj.aborted = true;
    traj.abort_time_fs = state.time_fs;
    traj.abort_reason = e.what();
  }
  return traj;
}

}  // namespace leignn
