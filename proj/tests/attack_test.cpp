// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "muap/attack.hpp"
#include "muap/fine_tuners.hpp"
#include "oracles.hpp"
#include "victim_oracle.hpp"

namespace muap {
namespace {

double cw1(std::vector<float> logits, int y, double kappa = 0.0) {
  const std::vector<int> ys{y};
  const std::size_t k = logits.size();
  return cw_loss(Tensor({1, k}, std::move(logits)), ys, kappa).item();
}

TEST(Perturbation, IdentityClampAndShape) {
  const Tensor x({1, 1, 1, 2}, {0.95f, 0.3f});
  EXPECT_TRUE(apply_perturbation(x, Tensor::zeros({1, 1, 2}), true).same_values(x));
  const Tensor y = apply_perturbation(x, Tensor({1, 1, 2}, {0.2f, 0.2f}), true);
  EXPECT_EQ(y[0], 1.0f);
  EXPECT_FLOAT_EQ(y[1], 0.5f);
  EXPECT_THROW((void)apply_perturbation(Tensor::zeros({2, 3, 32, 32}), Tensor::zeros({1, 28, 28}), true), ShapeError);
}

TEST(CwLoss, Examples) {
  EXPECT_EQ(cw1({0.1f, 5.0f}, 0), 0.0);
  EXPECT_EQ(cw1({3.0f, 1.0f}, 0), 2.0);
  EXPECT_EQ(cw1({2.0f, 2.0f}, 0), 0.0);
  EXPECT_FLOAT_EQ(static_cast<float>(cw1({0.1f, 5.0f}, 0, 10.0)), 5.1f);
}

TEST(TaskLoss, RegularizerIsMeanAbs) {
  const LabeledImages d = synth_source({1, 28, 28}, 2, 2, 1);
  const auto m = fixture::trained_mlp({1, 28, 28}, 2, 7);
  AttackConfig cfg;
  cfg.lambda = 0.0;
  const Tensor theta({1, 28, 28}, std::vector<float>(784, 0.01f));
  const float without = task_loss(theta, d, *m, cfg).item();
  cfg.lambda = 1.0;
  EXPECT_NEAR(task_loss(theta, d, *m, cfg).item() - without, 0.01f, 1e-5f);
  EXPECT_NEAR(mean_abs(theta).item(), 0.01f, 1e-6f);
}

TEST(TaskLoss, CleanMarginsOnAccurateVictim) {
  const auto m = fixture::trained_mlp({1, 28, 28}, 2, 7);
  const LabeledImages d = synth_source({1, 28, 28}, 2, 10, 7);
  ASSERT_EQ(accuracy(*m, d), 1.0);
  AttackConfig cfg;
  cfg.lambda = 0.0;
  const Tensor theta = Tensor::zeros({1, 28, 28});
  const float l = task_loss(theta, d, *m, cfg).item();
  const float margins = sum(class_margin(forward_logits(*m, d.images), d.labels)).item();
  EXPECT_GT(l, 0.0f);
  EXPECT_FLOAT_EQ(l, margins);
  EXPECT_EQ(attack_success_rate(theta, d, *m), 0.0);
}

TEST(TaskLoss, GradientMatchesFiniteDifferences) {
  const auto m = fixture::trained_mlp({1, 8, 8}, 2, 3);
  const LabeledImages d = synth_source({1, 8, 8}, 2, 3, 11);
  AttackConfig cfg;
  cfg.lambda = 0.5;
  cfg.pixel_clip = false;
  Rng rng(5);
  oracle::Vec t0 = oracle::random_vec(64, rng, 0.05, 0.3);
  for (std::size_t i = 0; i < t0.size(); i += 2) t0[i] = -t0[i];
  Tape tape;
  const Tensor t = tape.leaf(oracle::to_tensor({1, 8, 8}, t0));
  const Tensor g = tape.backward(task_loss(t, d, *m, cfg)).wrt(t);
  const auto f = [&](const oracle::Vec& v) { return oracle::mlp_task_loss(*m, d, v, cfg.lambda, cfg.kappa, false); };
  EXPECT_LE(oracle::rel_error(oracle::to_double(g), oracle::central_diff(f, t0, 1e-6)), 1e-3);
}

TEST(Asr, AllFlippedAndScaleInvariance) {
  const auto m = fixture::trained_mlp({1, 8, 8}, 2, 3);
  const LabeledImages d = synth_source({1, 8, 8}, 2, 10, 12);
  // Swapping the final layer's class rows flips every prediction that is
  // not a tie.
  VictimModel flipped = *m;
  for (auto& [name, t] : flipped.params) {
    if (name == "fc2.weight") {
      std::vector<float> v = t.vec();
      for (std::size_t r = 0; r < t.size(0); ++r) std::swap(v[r * 2], v[r * 2 + 1]);
      t = Tensor(t.shape(), std::move(v));
    } else if (name == "fc2.bias") {
      t = Tensor(t.shape(), {t[1], t[0]});
    }
  }
  ASSERT_EQ(accuracy(*m, d), 1.0);
  EXPECT_EQ(attack_success_rate(Tensor::zeros({1, 8, 8}), d, flipped), 1.0);
  // ASR depends only on argmax, so scaling the last layer leaves it alone.
  const Tensor theta({1, 8, 8}, std::vector<float>(64, 0.2f));
  VictimModel scaled = *m;
  for (auto& [name, t] : scaled.params)
    if (name.rfind("fc2.", 0) == 0) t = scale(t, 3.0f);
  EXPECT_EQ(attack_success_rate(theta, d, *m), attack_success_rate(theta, d, scaled));
}

TEST(Asr, PgdReachesFullSupportAsr) {
  const auto m = fixture::trained_mlp({1, 28, 28}, 10, 7);
  const LabeledImages d = synth_source({1, 28, 28}, 10, 40, derive_seed(7, 99)).subset(std::vector<std::size_t>{0, 1, 40, 41});
  PgdConfig pgd;
  pgd.eps_inf = 0.5;
  const Trajectory tr = pgd_uap(d, *m, pgd, AttackConfig{});
  EXPECT_EQ(attack_success_rate(tr.thetas.back(), d, *m), 1.0);
}

}  // namespace
}  // namespace muap
