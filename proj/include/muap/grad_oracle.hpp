// SPDX-License-Identifier: Apache-2.0
//
// Gradient signals fed to fine-tuners: exact reverse-mode gradients and the
// random-direction forward-difference estimate
//
//   g = sum_j u_j (f(theta + mu u_j) - f(theta)) / (mu n),  u_j ~ N(0, I).
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "muap/attack.hpp"
#include "muap/rng.hpp"

namespace muap {

enum class GradMode { kFO, kZO };

inline const char* grad_mode_name(GradMode m) { return m == GradMode::kFO ? "fo" : "zo"; }

inline GradMode parse_grad_mode(const std::string& s) {
  if (s == "fo") return GradMode::kFO;
  if (s == "zo") return GradMode::kZO;
  throw InvalidArgument("unknown gradient mode '" + s + "' (expected fo or zo)");
}

struct ZoConfig {
  std::size_t n_dirs = 20;
  double mu = 0.01;
  std::uint64_t direction_seed = 0;
  bool central = false;  // diagnostic: (f(theta + mu u) - f(theta - mu u)) / 2 mu

  void validate() const {
    if (n_dirs < 1) throw InvalidArgument("ZO estimator needs at least one direction");
    if (!(mu > 0.0) || !std::isfinite(mu)) throw InvalidArgument("ZO smoothing radius mu must be positive");
  }
};

struct GradEstimate {
  Tensor g;
  GradMode mode = GradMode::kFO;
  std::size_t n_dirs = 0;
  double mu = 0.0;
  std::size_t queries_used = 0;
  double loss = 0.0;  // f(theta); NaN for central differences, which never evaluate it
};

using ScalarFn = std::function<double(const Tensor&)>;

/// Zeroth-order estimate of the gradient of `f` at theta.
inline GradEstimate zo_gradient(const ScalarFn& f, const Tensor& theta, const ZoConfig& zo) {
  zo.validate();
  const std::size_t dim = theta.numel();
  Rng rng(zo.direction_seed);
  const auto eval = [&](const Tensor& at, std::size_t j) {
    const double v = f(at);
    if (!std::isfinite(v)) throw NonFiniteError("non-finite loss at ZO probe " + std::to_string(j));
    return v;
  };
  const Tensor base = detach(theta);
  GradEstimate out{Tensor(), GradMode::kZO, zo.n_dirs, zo.mu, 0, std::nan("")};
  const double f0 = zo.central ? 0.0 : eval(base, 0);
  if (!zo.central) {
    out.loss = f0;
    out.queries_used = 1;
  }
  std::vector<double> acc(dim, 0.0);
  std::vector<float> u(dim), probe(dim);
  auto td = base.data();
  for (std::size_t j = 0; j < zo.n_dirs; ++j) {
    for (float& x : u) x = static_cast<float>(rng.normal());
    for (std::size_t i = 0; i < dim; ++i) probe[i] = td[i] + static_cast<float>(zo.mu) * u[i];
    double diff = eval(Tensor(base.shape(), probe), j + 1);
    ++out.queries_used;
    if (zo.central) {
      for (std::size_t i = 0; i < dim; ++i) probe[i] = td[i] - static_cast<float>(zo.mu) * u[i];
      diff = (diff - eval(Tensor(base.shape(), probe), j + 1)) / 2.0;
      ++out.queries_used;
    } else {
      diff -= f0;
    }
    for (std::size_t i = 0; i < dim; ++i) acc[i] += static_cast<double>(u[i]) * diff;
  }
  const double norm = zo.mu * static_cast<double>(zo.n_dirs);
  std::vector<float> g(dim);
  for (std::size_t i = 0; i < dim; ++i) g[i] = static_cast<float>(acc[i] / norm);
  out.g = Tensor(base.shape(), std::move(g));
  return out;
}

/// Zeroth-order estimate of the task-loss gradient on `split`.
inline GradEstimate zo_gradient(const Tensor& theta, const LabeledImages& split, const VictimModel& victim,
                                const AttackConfig& cfg, const ZoConfig& zo) {
  const ScalarFn f = [&](const Tensor& t) {
    return static_cast<double>(task_loss(t, split, victim, cfg, cfg.zo_pixel_clip).item());
  };
  return zo_gradient(f, theta, zo);
}

/// Exact gradient of the task loss on `split` by reverse mode.
inline GradEstimate fo_gradient(const Tensor& theta, const LabeledImages& split, const VictimModel& victim,
                                const AttackConfig& cfg) {
  Tape tape;
  const Tensor t = tape.leaf(theta);
  const Tensor loss = task_loss(t, split, victim, cfg);
  return {tape.backward(loss).wrt(t), GradMode::kFO, 0, 0.0, 0, static_cast<double>(loss.item())};
}

struct GradSignal {
  GradMode mode = GradMode::kFO;
  ZoConfig zo;
};

/// Dispatches on `signal.mode`; `seed` replaces the ZO direction seed.
inline GradEstimate grad_estimate(const GradSignal& signal, const Tensor& theta, const LabeledImages& split,
                                  const VictimModel& victim, const AttackConfig& cfg, std::uint64_t seed) {
  if (signal.mode == GradMode::kFO) return fo_gradient(theta, split, victim, cfg);
  ZoConfig zo = signal.zo;
  zo.direction_seed = seed;
  return zo_gradient(theta, split, victim, cfg, zo);
}

}  // namespace muap
