#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "leignn/model.hpp"
#include "leignn/rng.hpp"

namespace leignn {

/// Relative weights of the energy and force terms in the training objective.
struct LossWeights {
  double energy_weight = 1.0;
  double force_weight = 100.0;

  void validate() const {
    detail::check(energy_weight >= 0 && force_weight >= 0 &&
                      energy_weight + force_weight > 0,
                  "loss weights must be non-negative and not both zero");
  }
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 8;
  int epochs = 100;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double lr_decay = 0.8;
  int lr_patience = 10;
  double train_fraction = 0.8;  // 1.0 validates on the training set itself
  std::uint64_t seed = 0;
  bool refit_normalization = true;

  void validate() const {
    detail::check(learning_rate >= 0, "learning rate must be non-negative");
    detail::check(batch_size >= 1, "batch size must be >= 1");
    detail::check(epochs >= 0, "epoch count must be >= 0");
    detail::check(adam_beta1 >= 0 && adam_beta1 < 1, "adam_beta1 outside [0,1)");
    detail::check(adam_beta2 >= 0 && adam_beta2 < 1, "adam_beta2 outside [0,1)");
    detail::check(adam_eps > 0, "adam_eps must be positive");
    detail::check(lr_decay > 0 && lr_decay <= 1, "lr_decay outside (0,1]");
    detail::check(lr_patience >= 1, "lr_patience must be >= 1");
    detail::check(train_fraction > 0 && train_fraction <= 1,
                  "train_fraction outside (0,1]");
  }
};

/// Fit the per-species linear energy reference on the training set by least
/// squares over species counts, then set the scale to the standard deviation
/// of the per-atom residuals. Labels normalize as
///   (energy - sum_i ref[z_i]) / (num_atoms * scale).
inline EnergyNorm fit_energy_norm(std::span<const Structure> train, int element_vocab) {
  detail::check(!train.empty(), "normalization requires a non-empty training set");
  const auto vocab = static_cast<std::size_t>(element_vocab);

  std::vector<int> species;  // distinct atomic numbers present
  std::vector<int> species_slot(vocab + 1, -1);
  for (const Structure& s : train) {
    detail::check(s.energy_label.has_value(), "normalization requires energy labels");
    for (int z : s.atomic_numbers) {
      const auto zi = static_cast<std::size_t>(z);
      detail::check(zi < species_slot.size(), "atomic number outside the vocabulary");
      if (species_slot[zi] < 0) {
        species_slot[zi] = static_cast<int>(species.size());
        species.push_back(z);
      }
    }
  }

  // Normal equations A^T A c = A^T b over species-count rows, with a small
  // ridge term to keep degenerate compositions solvable.
  const std::size_t num_species = species.size();
  std::vector<double> ata(num_species * num_species, 0.0);
  std::vector<double> atb(num_species, 0.0);
  for (const Structure& s : train) {
    std::vector<double> counts(num_species, 0.0);
    for (int z : s.atomic_numbers)
      counts[static_cast<std::size_t>(species_slot[static_cast<std::size_t>(z)])] += 1.0;
    for (std::size_t a = 0; a < num_species; ++a) {
      atb[a] += counts[a] * *s.energy_label;
      for (std::size_t b = 0; b < num_species; ++b)
        ata[a * num_species + b] += counts[a] * counts[b];
    }
  }
  for (std::size_t a = 0; a < num_species; ++a) ata[a * num_species + a] += 1e-8;

  // Gaussian elimination with partial pivoting; the system is tiny.
  std::vector<double> solution = atb;
  {
    std::vector<double> m = ata;
    const std::size_t n = num_species;
    for (std::size_t col = 0; col < n; ++col) {
      std::size_t pivot = col;
      for (std::size_t r = col + 1; r < n; ++r)
        if (std::abs(m[r * n + col]) > std::abs(m[pivot * n + col])) pivot = r;
      for (std::size_t c = 0; c < n; ++c) std::swap(m[col * n + c], m[pivot * n + c]);
      std::swap(solution[col], solution[pivot]);
      const double diag = m[col * n + col];
      detail::check(std::abs(diag) > 1e-14, "singular normalization system");
      for (std::size_t r = 0; r < n; ++r) {
        if (r == col) continue;
        const double factor = m[r * n + col] / diag;
        for (std::size_t c = col; c < n; ++c) m[r * n + c] -= factor * m[col * n + c];
        solution[r] -= factor * solution[col];
      }
    }
    for (std::size_t col = 0; col < n; ++col) solution[col] /= m[col * n + col];
  }

  EnergyNorm norm;
  norm.species_ref.assign(vocab + 1, 0.0);
  for (std::size_t a = 0; a < num_species; ++a)
    norm.species_ref[static_cast<std::size_t>(species[a])] = solution[a];

  double sum = 0.0, sum_sq = 0.0;
  for (const Structure& s : train) {
    double ref = 0.0;
    for (int z : s.atomic_numbers) ref += norm.ref_for(z);
    const double per_atom = (*s.energy_label - ref) / static_cast<double>(s.size());
    sum += per_atom;
    sum_sq += per_atom * per_atom;
  }
  const double n = static_cast<double>(train.size());
  const double variance = std::max(0.0, sum_sq / n - (sum / n) * (sum / n));
  norm.scale = std::max(std::sqrt(variance), 1e-6);
  return norm;
}

inline double normalized_energy(const Structure& s, double energy, const EnergyNorm& norm) {
  double ref = 0.0;
  for (int z : s.atomic_numbers) ref += norm.ref_for(z);
  return (energy - ref) / (static_cast<double>(s.size()) * norm.scale);
}

inline double denormalized_energy(const Structure& s, double normalized,
                                  const EnergyNorm& norm) {
  double ref = 0.0;
  for (int z : s.atomic_numbers) ref += norm.ref_for(z);
  return normalized * static_cast<double>(s.size()) * norm.scale + ref;
}

/// Mean absolute error objective: per sample, the absolute normalized energy
/// residual weighted by energy_weight plus the force component MAE weighted
/// by force_weight, averaged over the batch.
template <typename Real>
Tensor<Real> loss(Tape<Real>* tape, const BatchForward<Real>& fwd,
                  std::span<const Structure> batch, const LossWeights& weights,
                  const EnergyNorm& norm) {
  weights.validate();
  const BatchGraph<Real>& bg = fwd.graph;
  detail::check(static_cast<int>(batch.size()) == bg.num_graphs,
                "loss: batch size does not match forward result");
  const auto B = static_cast<std::size_t>(bg.num_graphs);
  const Real inv_batch = Real(1) / static_cast<Real>(B);

  std::vector<Real> energy_targets(B);
  std::vector<Real> inv_atoms(B);
  for (std::size_t gi = 0; gi < B; ++gi) {
    const Structure& s = batch[gi];
    detail::check(s.energy_label.has_value() && s.force_labels.has_value(),
                  "loss: every sample needs energy and force labels");
    energy_targets[gi] =
        static_cast<Real>(normalized_energy(s, *s.energy_label, norm));
    inv_atoms[gi] = Real(1) / static_cast<Real>(s.size());
  }

  // Energy term: the network output is already the normalized energy times
  // the atom count, so dividing by the atom count yields the prediction in
  // label units.
  Tensor<Real> pred_norm = ops::row_scale(tape, fwd.graph_energy, inv_atoms);
  Tensor<Real> target({B, 1}, energy_targets);
  Tensor<Real> energy_term =
      ops::sum_all(tape, ops::abs(tape, ops::sub(tape, pred_norm, target)));
  Tensor<Real> total =
      ops::scale(tape, energy_term, static_cast<Real>(weights.energy_weight) * inv_batch);

  if (weights.force_weight > 0) {
    const auto M = static_cast<std::size_t>(bg.num_nodes);
    std::vector<Real> row_weights(M);
    for (std::size_t i = 0; i < M; ++i) {
      const auto gi = static_cast<std::size_t>(bg.node_graph[i]);
      row_weights[i] = static_cast<Real>(weights.force_weight) * inv_batch /
                       (Real(3) * static_cast<Real>(batch[gi].size()));
    }
    for (int c = 0; c < 3; ++c) {
      std::vector<Real> labels(M);
      for (std::size_t i = 0; i < M; ++i) {
        const auto gi = static_cast<std::size_t>(bg.node_graph[i]);
        const auto local =
            static_cast<std::size_t>(static_cast<int>(i) - bg.graph_offsets[gi]);
        labels[i] = static_cast<Real>((*batch[gi].force_labels)[local][c]);
      }
      Tensor<Real> label_col({M, 1}, std::move(labels));
      Tensor<Real> diff =
          ops::abs(tape, ops::sub(tape, fwd.force[static_cast<std::size_t>(c)], label_col));
      total = ops::add(tape, total,
                       ops::sum_all(tape, ops::row_scale(tape, diff, row_weights)));
    }
  }
  return total;
}

/// Adam with bias correction. Moments line up with the for_each_param order.
template <typename Real>
class Adam {
 public:
  Adam(ModelParams<Real>& params, const TrainConfig& cfg)
      : params_(params),
        learning_rate_(cfg.learning_rate),
        beta1_(cfg.adam_beta1),
        beta2_(cfg.adam_beta2),
        eps_(cfg.adam_eps) {
    params_.for_each_param([this](const std::string& name, Tensor<Real>& t) {
      names_.push_back(name);
      first_.emplace_back(t.size(), Real(0));
      second_.emplace_back(t.size(), Real(0));
    });
  }

  void step() {
    ++step_count_;
    const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    std::size_t slot = 0;
    params_.for_each_param([&](const std::string&, Tensor<Real>& t) {
      auto& m = first_[slot];
      auto& v = second_[slot];
      ++slot;
      detail::ensure_grad(*t.impl());
      const auto& g = t.grad_data();
      auto& values = t.mutable_data();
      for (std::size_t i = 0; i < values.size(); ++i) {
        m[i] = static_cast<Real>(beta1_ * m[i] + (1.0 - beta1_) * g[i]);
        v[i] = static_cast<Real>(beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i]);
        const double m_hat = m[i] / bias1;
        const double v_hat = v[i] / bias2;
        values[i] -= static_cast<Real>(learning_rate_ * m_hat /
                                       (std::sqrt(v_hat) + eps_));
      }
    });
  }

  double learning_rate() const { return learning_rate_; }
  void set_learning_rate(double lr) { learning_rate_ = lr; }
  std::int64_t step_count() const { return step_count_; }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<std::vector<Real>>& first_moments() const { return first_; }
  const std::vector<std::vector<Real>>& second_moments() const { return second_; }

 private:
  ModelParams<Real>& params_;
  double learning_rate_;
  double beta1_, beta2_, eps_;
  std::int64_t step_count_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<Real>> first_;
  std::vector<std::vector<Real>> second_;
};

struct EvalMetrics {
  double energy_mae_mev = 0.0;
  double energy_mae_mev_per_atom = 0.0;
  double force_mae_mev_per_ang = 0.0;
  double force_rms_label_mev_per_ang = 0.0;
  std::size_t num_structures = 0;
};

/// Energy and force MAE in original units (meV and meV/Angstrom).
template <typename Real>
EvalMetrics evaluate(std::span<const Structure> data, const ModelParams<Real>& params,
                     int batch_size = 16) {
  detail::check(!data.empty(), "evaluate: empty dataset");
  EvalMetrics metrics;
  metrics.num_structures = data.size();
  double energy_abs = 0.0, energy_abs_per_atom = 0.0;
  double force_abs = 0.0, force_sq = 0.0;
  std::size_t force_components = 0;

  for (std::size_t start = 0; start < data.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t count =
        std::min(static_cast<std::size_t>(batch_size), data.size() - start);
    const auto preds = predict_batch<Real>(data.subspan(start, count), params);
    for (std::size_t k = 0; k < count; ++k) {
      const Structure& s = data[start + k];
      detail::check(s.energy_label.has_value() && s.force_labels.has_value(),
                    "evaluate: labels required");
      const double de = std::abs(preds[k].energy - *s.energy_label);
      energy_abs += de;
      energy_abs_per_atom += de / static_cast<double>(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        const Vec3 diff = preds[k].forces[i] - (*s.force_labels)[i];
        force_abs += std::abs(diff.x) + std::abs(diff.y) + std::abs(diff.z);
        const Vec3& label = (*s.force_labels)[i];
        force_sq += label.x * label.x + label.y * label.y + label.z * label.z;
        force_components += 3;
      }
    }
  }
  const double n = static_cast<double>(data.size());
  metrics.energy_mae_mev = 1000.0 * energy_abs / n;
  metrics.energy_mae_mev_per_atom = 1000.0 * energy_abs_per_atom / n;
  metrics.force_mae_mev_per_ang =
      1000.0 * force_abs / static_cast<double>(force_components);
  metrics.force_rms_label_mev_per_ang =
      1000.0 * std::sqrt(force_sq / static_cast<double>(force_components));
  return metrics;
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_energy_mae_mev_per_atom = 0.0;
  double val_force_mae_mev_per_ang = 0.0;
  double learning_rate = 0.0;
};

template <typename Real>
struct FitResult {
  ModelParams<Real> best_params;
  double best_val_loss = 0.0;
  int best_epoch = -1;
  std::vector<EpochStats> history;
};

template <typename Real>
ModelParams<Real> clone_params(const ModelParams<Real>& params) {
  ModelParams<Real> copy = params;  // shares tensor storage
  copy.for_each_param([](const std::string&, Tensor<Real>& t) { t = t.clone(); });
  // Non-trainable alternates (e.g. the unused update branch) share storage,
  // which is fine: they are never written in place.
  return copy;
}

/// Minibatch Adam over the labeled dataset. Batches are disjoint unions of
/// graphs, so every sample keeps a private global state within the merged
/// forward pass. Returns the parameters with the best validation loss.
template <typename Real>
FitResult<Real> fit(std::span<const Structure> dataset, ModelParams<Real>& params,
                    const TrainConfig& cfg, const LossWeights& weights) {
  cfg.validate();
  weights.validate();
  detail::check(!dataset.empty(), "fit: empty dataset");

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng = Rng::split(cfg.seed, "train-split");
  split_rng.shuffle(order);
  const std::size_t train_count = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.train_fraction *
                                               static_cast<double>(dataset.size()))));
  std::vector<Structure> train, val;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < train_count ? train : val).push_back(dataset[order[i]]);
  }
  if (val.empty()) val = train;  // train_fraction == 1: validate on train
  detail::check(!train.empty() && !val.empty(), "fit: empty train or validation split");

  if (cfg.refit_normalization) {
    params.norm = fit_energy_norm(std::span<const Structure>(train), params.hyper.element_vocab);
  }

  Adam<Real> optimizer(params, cfg);
  Rng shuffle_rng = Rng::split(cfg.seed, "batch-shuffle");

  auto validation_loss = [&]() {
    double total = 0.0;
    const std::size_t chunk = static_cast<std::size_t>(std::max(cfg.batch_size, 1));
    for (std::size_t start = 0; start < val.size(); start += chunk) {
      const std::size_t count = std::min(chunk, val.size() - start);
      std::span<const Structure> view(val.data() + start, count);
      const auto fwd = forward_batch<Real>(nullptr, view, params);
      total += static_cast<double>(loss<Real>(nullptr, fwd, view, weights, params.norm).item()) *
               static_cast<double>(count);
    }
    return total / static_cast<double>(val.size());
  };

  FitResult<Real> result;
  result.best_params = clone_params(params);
  result.best_val_loss = validation_loss();
  result.best_epoch = -1;
  int epochs_since_improvement = 0;

  std::vector<std::size_t> train_order(train.size());
  for (std::size_t i = 0; i < train_order.size(); ++i) train_order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(train_order);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < train_order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t count = std::min(static_cast<std::size_t>(cfg.batch_size),
                                         train_order.size() - start);
      std::vector<Structure> batch;
      batch.reserve(count);
      for (std::size_t k = 0; k < count; ++k)
        batch.push_back(train[train_order[start + k]]);

      params.zero_grad();
      Tape<Real> tape;
      const auto fwd = forward_batch<Real>(&tape, batch, params);
      Tensor<Real> batch_loss = loss<Real>(&tape, fwd, batch, weights, params.norm);
      const double value = static_cast<double>(batch_loss.item());
      detail::check(std::isfinite(value),
                    "training diverged: non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(batch_loss);
      optimizer.step();
      epoch_loss += value * static_cast<double>(count);
      seen += count;
    }
    epoch_loss /= static_cast<double>(seen);

    const double val_loss = validation_loss();
    const EvalMetrics val_metrics = evaluate<Real>(val, params);
    result.history.push_back({epoch, epoch_loss, val_loss,
                              val_metrics.energy_mae_mev_per_atom,
                              val_metrics.force_mae_mev_per_ang,
                              optimizer.learning_rate()});

    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      result.best_params = clone_params(params);
      epochs_since_improvement = 0;
    } else if (++epochs_since_improvement >= cfg.lr_patience) {
      optimizer.set_learning_rate(optimizer.learning_rate() * cfg.lr_decay);
      epochs_since_improvement = 0;
    }
  }
  return result;
}

}  // namespace leignn
