#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <vector>

#include <gtest/gtest.h>

#include "leignn/checkpoint.hpp"
#include "leignn/gradcheck.hpp"
#include "leignn/model.hpp"
#include "leignn/training.hpp"
#include "support/test_utils.hpp"

using leignn::EnergyNorm;
using leignn::fit_energy_norm;
using leignn::Hyperparams;
using leignn::init_params;
using leignn::LossWeights;
using leignn::ModelParams;
using leignn::Prediction;
using leignn::Rng;
using leignn::Structure;
using leignn::Tape;
using leignn::TrainConfig;
using leignn::Vec3;
namespace lt = leignn::testing;

namespace {

Hyperparams tiny_hyper(int feature_width = 4, int num_layers = 2) {
  Hyperparams h;
  h.feature_width = feature_width;
  h.num_layers = num_layers;
  h.cutoff = 5.0;
  h.max_neighbors = 16;
  h.num_rbf = 5;
  h.element_vocab = 20;
  return h;
}

/// Label a structure with the model's own outputs (plus optional offsets).
Structure self_labeled(const Structure& s, const ModelParams<double>& params,
                       double energy_offset = 0.0, const Vec3& force_offset = {0, 0, 0}) {
  Structure labeled = s;
  const Prediction pred = leignn::predict(s, params);
  labeled.energy_label = pred.energy + energy_offset;
  std::vector<Vec3> forces;
  for (const Vec3& f : pred.forces) forces.push_back(f + force_offset);
  labeled.force_labels = forces;
  return labeled;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST(Loss, ExactPredictionsGiveZero) {
  Rng rng(1);
  const Hyperparams h = tiny_hyper();
  const auto params = init_params<double>(h, 2);
  const Structure s = self_labeled(lt::random_structure(rng, 5, false), params);

  const auto fwd = leignn::forward_batch<double>(nullptr, std::span<const Structure>(&s, 1),
                                                 params);
  const double value =
      leignn::loss<double>(nullptr, fwd, std::span<const Structure>(&s, 1), {1.0, 100.0},
                           params.norm)
          .item();
  EXPECT_NEAR(value, 0.0, 1e-12);
}

TEST(Loss, EnergyOnlySingleSample) {
  const Hyperparams h = tiny_hyper();
  const auto params = init_params<double>(h, 3);
  Structure atom;
  atom.atomic_numbers = {1};
  atom.positions = {{0, 0, 0}};
  const Structure s = self_labeled(atom, params, /*energy_offset=*/-2.0);

  const auto fwd = leignn::forward_batch<double>(nullptr, std::span<const Structure>(&s, 1),
                                                 params);
  const double value =
      leignn::loss<double>(nullptr, fwd, std::span<const Structure>(&s, 1),
                           LossWeights{1.0, 0.0}, params.norm)
          .item();
  EXPECT_NEAR(value, 2.0, 1e-12);
}

TEST(Loss, ForceOnlyAveragesOverComponents) {
  const Hyperparams h = tiny_hyper();
  const auto params = init_params<double>(h, 4);
  Structure atom;
  atom.atomic_numbers = {1};
  atom.positions = {{0, 0, 0}};
  const Structure s = self_labeled(atom, params, 0.0, Vec3{1, 1, 1});

  const auto fwd = leignn::forward_batch<double>(nullptr, std::span<const Structure>(&s, 1),
                                                 params);
  const double value =
      leignn::loss<double>(nullptr, fwd, std::span<const Structure>(&s, 1),
                           LossWeights{0.0, 1.0}, params.norm)
          .item();
  EXPECT_NEAR(value, 1.0, 1e-12);
}

TEST(Loss, MissingLabelsRejected) {
  Rng rng(5);
  const Hyperparams h = tiny_hyper();
  const auto params = init_params<double>(h, 6);
  const Structure s = lt::random_structure(rng, 4, false);
  const auto fwd = leignn::forward_batch<double>(nullptr, std::span<const Structure>(&s, 1),
                                                 params);
  EXPECT_THROW(leignn::loss<double>(nullptr, fwd, std::span<const Structure>(&s, 1),
                                    {1.0, 1.0}, params.norm),
               leignn::Error);
}

TEST(Normalization, RoundTripIsExact) {
  Rng rng(7);
  std::vector<Structure> train;
  for (int i = 0; i < 12; ++i) {
    Structure s = lt::random_structure(rng, 3 + static_cast<int>(rng.index(5)), false);
    // Linear species reference plus residual noise.
    double e = 0;
    for (int z : s.atomic_numbers) e += -1.3 * z;
    s.energy_label = e + rng.normal(0.0, 0.4);
    train.push_back(s);
  }
  const EnergyNorm norm = fit_energy_norm(train, 20);
  EXPECT_GT(norm.scale, 0.0);
  for (const Structure& s : train) {
    const double normalized = leignn::normalized_energy(s, *s.energy_label, norm);
    const double back = leignn::denormalized_energy(s, normalized, norm);
    EXPECT_NEAR(back, *s.energy_label, 1e-12 * std::max(1.0, std::abs(*s.energy_label)));
  }
}

TEST(Gradcheck, FullLossOnFiveAtomStructure) {
  Rng rng(11);
  Hyperparams h = tiny_hyper(3, 2);
  h.element_vocab = 8;
  auto params = init_params<double>(h, 111);
  Structure s = lt::random_structure(rng, 5, true, 1.8, {1, 8});
  // Label with small but kink-safe residuals: |d|x|/dx| = 1 regardless of the
  // residual size, so shrinking the residuals lowers the loss magnitude (and
  // with it the finite-difference roundoff) without changing the gradients
  // being verified.
  const leignn::Prediction pred = leignn::predict(s, params);
  s.energy_label = pred.energy + 0.05;
  std::vector<Vec3> forces;
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto offset = [&rng]() { return rng.uniform() < 0.5 ? -0.02 : 0.02; };
    forces.push_back(pred.forces[i] + Vec3{offset(), offset(), offset()});
  }
  s.force_labels = forces;

  std::vector<leignn::Tensor<double>> tensors;
  params.for_each_param(
      [&](const std::string&, leignn::Tensor<double>& t) { tensors.push_back(t); });

  const LossWeights weights{1.0, 10.0};
  const double err = leignn::gradcheck<double>(
      [&](Tape<double>& tape) {
        const auto fwd =
            leignn::forward_batch<double>(&tape, std::span<const Structure>(&s, 1), params);
        return leignn::loss<double>(&tape, fwd, std::span<const Structure>(&s, 1), weights,
                                    params.norm);
      },
      std::span<leignn::Tensor<double>>(tensors), 1e-6);
  EXPECT_LT(err, 1e-4);
  EXPECT_GT(err, 0.0);  // the check actually compared something
}

TEST(Fit, OverfitsASingleStructure) {
  Rng rng(10);
  const Hyperparams h = tiny_hyper(12, 2);
  auto params = init_params<double>(h, 11);

  Structure s = lt::random_structure(rng, 4, false, 2.0, {6, 8});
  s.energy_label = -3.7;
  s.force_labels = std::vector<Vec3>{{0.1, -0.2, 0.05}, {-0.1, 0.15, 0.0}, {0.02, 0.05, -0.1}, {-0.02, 0.0, 0.05}};

  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 1;
  cfg.epochs = 2000;
  cfg.train_fraction = 1.0;
  cfg.refit_normalization = false;
  // The objective is an L1 norm, so Adam dithers at an amplitude set by the
  // learning rate; decaying on plateaus lets the loss keep shrinking.
  cfg.lr_patience = 50;
  cfg.lr_decay = 0.5;
  cfg.seed = 12;

  const LossWeights weights{1.0, 10.0};
  const std::vector<Structure> data = {s};
  auto result = leignn::fit<double>(data, params, cfg, weights);
  ASSERT_FALSE(result.history.empty());
  const double initial = result.history.front().train_loss;
  const double final = result.history.back().train_loss;
  EXPECT_LT(final, 0.01 * initial) << "initial " << initial << " final " << final;
}

TEST(Fit, ZeroLearningRateFreezesLoss) {
  Rng rng(13);
  const Hyperparams h = tiny_hyper();
  auto params = init_params<double>(h, 14);
  std::vector<Structure> data;
  for (int i = 0; i < 4; ++i)
    data.push_back(self_labeled(lt::random_structure(rng, 4, false), params, 0.5));

  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 4;
  cfg.epochs = 5;
  cfg.train_fraction = 1.0;
  cfg.refit_normalization = false;
  cfg.seed = 15;

  auto result = leignn::fit<double>(data, params, cfg, {1.0, 10.0});
  ASSERT_EQ(result.history.size(), 5u);
  for (const auto& epoch : result.history) {
    EXPECT_EQ(epoch.train_loss, result.history.front().train_loss);
  }
}

TEST(Fit, FixedSeedReproducesTheLossCurve) {
  Rng rng(16);
  std::vector<Structure> data;
  {
    const auto label_params = init_params<double>(tiny_hyper(), 17);
    for (int i = 0; i < 10; ++i)
      data.push_back(
          self_labeled(lt::random_structure(rng, 4, i % 2 == 0), label_params, 0.3 * i));
  }

  auto run = [&]() {
    auto params = init_params<double>(tiny_hyper(), 18);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 3;
    cfg.epochs = 4;
    cfg.seed = 19;
    return leignn::fit<double>(data, params, cfg, {1.0, 10.0});
  };

  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
  }
}

TEST(Evaluate, ExactPredictionsAndUnitConversions) {
  Rng rng(20);
  const Hyperparams h = tiny_hyper();
  const auto params = init_params<double>(h, 21);

  std::vector<Structure> exact;
  for (int i = 0; i < 3; ++i)
    exact.push_back(self_labeled(lt::random_structure(rng, 4, false), params));
  const auto zero = leignn::evaluate<double>(exact, params);
  EXPECT_NEAR(zero.energy_mae_mev, 0.0, 1e-9);
  EXPECT_NEAR(zero.force_mae_mev_per_ang, 0.0, 1e-9);

  // 0.5 eV energy error reports as 500 meV; a (0.1,0,0) force offset on every
  // atom reports as 1000*0.1/3 meV/Angstrom.
  std::vector<Structure> offset;
  for (int i = 0; i < 3; ++i)
    offset.push_back(
        self_labeled(lt::random_structure(rng, 4, false), params, 0.5, Vec3{0.1, 0, 0}));
  const auto shifted = leignn::evaluate<double>(offset, params);
  EXPECT_NEAR(shifted.energy_mae_mev, 500.0, 1e-6);
  EXPECT_NEAR(shifted.force_mae_mev_per_ang, 1000.0 * 0.1 / 3.0, 1e-6);
}

TEST(Evaluate, ConstantPredictorMatchesMeanAbsoluteDeviation) {
  // With zero layers the model predicts the same energy for structures of
  // identical composition, so the MAE must equal the hand-computed mean
  // absolute deviation.
  Rng rng(22);
  Hyperparams h = tiny_hyper(4, 0);
  const auto params = init_params<double>(h, 23);

  std::vector<Structure> data;
  std::vector<double> labels = {-1.0, 0.5, 2.25, -0.75, 1.5};
  for (double label : labels) {
    Structure s = lt::random_structure(rng, 3, false, 2.0, {6});
    s.energy_label = label;
    s.force_labels = std::vector<Vec3>(3, Vec3{0, 0, 0});
    data.push_back(s);
  }
  const double constant = leignn::predict(data[0], params).energy;
  double expected = 0;
  for (double label : labels) expected += std::abs(constant - label);
  expected = 1000.0 * expected / static_cast<double>(labels.size());

  const auto metrics = leignn::evaluate<double>(data, params);
  EXPECT_NEAR(metrics.energy_mae_mev, expected, 1e-9);
}

TEST(Checkpoint, RoundTripReproducesPredictionsBitExactly) {
  Rng rng(24);
  const Hyperparams h = tiny_hyper(5, 2);
  auto params = init_params<double>(h, 25);
  params.norm.species_ref.assign(11, 0.0);
  params.norm.species_ref[6] = -3.25;
  params.norm.scale = 0.125;

  const Structure probe = lt::random_structure(rng, 6, true);
  const Prediction before = leignn::predict(probe, params);

  const auto path = temp_file("leignn_ckpt_roundtrip.leig");
  leignn::save_checkpoint<double>(path.string(), params, {7, 0.125});
  const auto loaded = leignn::load_checkpoint<double>(path.string());
  EXPECT_EQ(loaded.meta.epoch, 7);

  const Prediction after = leignn::predict(probe, loaded.params);
  EXPECT_EQ(before.energy, after.energy);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    EXPECT_EQ(before.forces[i].x, after.forces[i].x);
    EXPECT_EQ(before.forces[i].y, after.forces[i].y);
    EXPECT_EQ(before.forces[i].z, after.forces[i].z);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, OptimizerStateRoundTrips) {
  const Hyperparams h = tiny_hyper(3, 1);
  auto params = init_params<float>(h, 26);
  leignn::OptimizerState<float> opt;
  opt.step_count = 42;
  opt.learning_rate = 5e-4;
  params.for_each_param([&](const std::string& name, leignn::Tensor<float>& t) {
    opt.names.push_back(name);
    opt.first_moments.emplace_back(t.size(), 0.25f);
    opt.second_moments.emplace_back(t.size(), 0.5f);
  });

  const auto path = temp_file("leignn_ckpt_opt.leig");
  leignn::save_checkpoint<float>(path.string(), params, {}, &opt);
  const auto loaded = leignn::load_checkpoint<float>(path.string());
  ASSERT_TRUE(loaded.optimizer.has_value());
  EXPECT_EQ(loaded.optimizer->step_count, 42);
  EXPECT_EQ(loaded.optimizer->first_moments[0][0], 0.25f);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptedMagicRejected) {
  const Hyperparams h = tiny_hyper(3, 1);
  const auto params = init_params<double>(h, 27);
  const auto path = temp_file("leignn_ckpt_magic.leig");
  leignn::save_checkpoint<double>(path.string(), params);
  {
    std::fstream file(path, std::ios::binary | std::ios::in | std::ios::out);
    file.seekp(0);
    file.write("XXXX", 4);
  }
  EXPECT_THROW(leignn::load_checkpoint<double>(path.string()), leignn::Error);
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncationAndChecksumDetected) {
  const Hyperparams h = tiny_hyper(3, 1);
  const auto params = init_params<double>(h, 28);
  const auto path = temp_file("leignn_ckpt_trunc.leig");
  leignn::save_checkpoint<double>(path.string(), params);

  // Truncate the payload.
  const auto full_size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full_size - 16);
  EXPECT_THROW(leignn::load_checkpoint<double>(path.string()), leignn::Error);

  // Flip one payload byte: the checksum must catch it.
  leignn::save_checkpoint<double>(path.string(), params);
  {
    std::fstream file(path, std::ios::binary | std::ios::in | std::ios::out);
    file.seekp(static_cast<std::streamoff>(full_size - 9));
    char byte = 0;
    file.read(&byte, 1);
    file.seekp(static_cast<std::streamoff>(full_size - 9));
    byte = static_cast<char>(byte ^ 0x40);
    file.write(&byte, 1);
  }
  EXPECT_THROW(leignn::load_checkpoint<double>(path.string()), leignn::Error);
  std::filesystem::remove(path);
}

TEST(Checkpoint, DtypeAndShapeMismatchesRejected) {
  const Hyperparams h = tiny_hyper(3, 1);
  const auto params32 = init_params<float>(h, 29);
  const auto path = temp_file("leignn_ckpt_dtype.leig");
  leignn::save_checkpoint<float>(path.string(), params32);
  EXPECT_THROW(leignn::load_checkpoint<double>(path.string()), leignn::Error);

  const auto header = leignn::read_checkpoint_header(path.string());
  Hyperparams wider = header.hyper;
  wider.feature_width = 128;
  EXPECT_THROW(leignn::require_matching_hyper(header.hyper, wider), leignn::Error);
  std::filesystem::remove(path);
}
