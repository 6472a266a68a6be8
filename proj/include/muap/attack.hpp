// SPDX-License-Identifier: Apache-2.0
//
// Universal perturbation objective: C&W margin loss summed over a split
// plus lambda times the mean absolute perturbation value.
#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>

#include "muap/datasets.hpp"
#include "muap/ops.hpp"
#include "muap/victim.hpp"

namespace muap {

inline constexpr double kDefaultLambda = 5.0;

struct AttackConfig {
  double lambda = kDefaultLambda;
  double kappa = 0.0;
  bool pixel_clip = true;         // clip x + theta to [0, 1] in losses and metrics
  bool zo_pixel_clip = false;     // clipping inside zeroth-order probes
  std::optional<double> eps_inf;  // l-inf radius for projected methods

  void validate() const {
    if (!std::isfinite(lambda) || lambda < 0.0) throw InvalidArgument("lambda must be finite and nonnegative");
    if (!std::isfinite(kappa) || kappa < 0.0) throw InvalidArgument("kappa must be finite and nonnegative");
    if (eps_inf && !(*eps_inf > 0.0)) throw InvalidArgument("eps_inf must be positive when set");
  }
};

/// images (B, C, H, W) + theta (C, H, W), optionally clipped to [0, 1].
inline Tensor apply_perturbation(const Tensor& images, const Tensor& theta, bool clip) {
  if (images.dim() != 4 || theta.dim() != 3 || theta.shape() != Shape(images.shape().begin() + 1, images.shape().end())) {
    throw ShapeError("perturbation of shape " + shape_str(theta.shape()) + " does not fit images " +
                     shape_str(images.shape()));
  }
  const Tensor x = add(images, theta);
  return clip ? clamp(x, 0.0f, 1.0f) : x;
}

/// Per-example max(z_y - max_{c != y} z_c + kappa, 0).
inline Tensor cw_loss(const Tensor& logits, std::span<const int> labels, double kappa = 0.0) {
  return relu(add_scalar(class_margin(logits, labels), static_cast<float>(kappa)));
}

inline Tensor mean_abs(const Tensor& theta) { return mean(abs(theta)); }

inline Tensor task_loss(const Tensor& theta, const LabeledImages& split, const VictimModel& victim,
                        const AttackConfig& cfg, bool clip) {
  const Tensor logits = forward_logits(victim, apply_perturbation(split.images, theta, clip));
  const Tensor atk = sum(cw_loss(logits, split.labels, cfg.kappa));
  if (cfg.lambda == 0.0) return atk;
  return add(atk, scale(mean_abs(theta), static_cast<float>(cfg.lambda)));
}

inline Tensor task_loss(const Tensor& theta, const LabeledImages& split, const VictimModel& victim,
                        const AttackConfig& cfg) {
  return task_loss(theta, split, victim, cfg, cfg.pixel_clip);
}

/// Fraction of images whose prediction under x + theta differs from the
/// label; argmax ties count as misclassified.
inline double attack_success_rate(const Tensor& theta, const LabeledImages& split, const VictimModel& victim,
                                  bool clip = true) {
  if (split.size() == 0) return 0.0;
  const Tensor logits = forward_logits(victim, apply_perturbation(split.images, detach(theta), clip));
  const std::size_t k = logits.size(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    auto row = logits.data().subspan(i * k, k);
    const auto y = static_cast<std::size_t>(split.labels[i]);
    bool beaten = false;
    for (std::size_t c = 0; c < k; ++c)
      if (c != y && row[c] >= row[y]) beaten = true;
    if (beaten) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(split.size());
}

}  // namespace muap
