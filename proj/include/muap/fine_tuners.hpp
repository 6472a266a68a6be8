// SPDX-License-Identifier: Apache-2.0
//
// Inner-loop updaters for one task: plain gradient descent, signed-gradient
// PGD, and the coordinate-wise LSTM fine-tuner.
//
// The LSTM treats every perturbation coordinate as an independent sequence
// of scalar gradient inputs sharing one cell (input 1, hidden 10, gate order
// i, f, g, o) and a 10 -> 1 projection:
//
//   delta_j = out_scale * (proj_w . h_j + proj_b),   theta <- theta - delta
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "muap/attack.hpp"
#include "muap/checkpoint.hpp"
#include "muap/grad_oracle.hpp"
#include "muap/rng.hpp"

namespace muap {

inline constexpr std::size_t kLstmHidden = 10;
inline constexpr double kDefaultOutScale = 0.1;

struct FineTunerParams {
  Tensor w_ih;    // (1, 4H)
  Tensor w_hh;    // (H, 4H)
  Tensor bias;    // (4H)
  Tensor proj_w;  // (H, 1)
  Tensor proj_b;  // (1)
  float out_scale = static_cast<float>(kDefaultOutScale);

  static constexpr std::size_t kTensors = 5;

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n{"lstm.weight_ih", "lstm.weight_hh", "lstm.bias", "proj.weight", "proj.bias"};
    return n;
  }

  std::vector<Tensor> tensors() const { return {w_ih, w_hh, bias, proj_w, proj_b}; }

  static FineTunerParams from_tensors(const std::vector<Tensor>& t, float out_scale) {
    if (t.size() != kTensors) throw InvalidArgument("fine-tuner needs 5 parameter tensors");
    return {t[0], t[1], t[2], t[3], t[4], out_scale};
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const Tensor& t : tensors()) n += t.numel();
    return n;
  }

  /// Uniform(-1/sqrt(H), 1/sqrt(H)) for every weight and bias.
  static FineTunerParams init(std::uint64_t seed, float out_scale = static_cast<float>(kDefaultOutScale)) {
    Rng rng(seed);
    const double b = 1.0 / std::sqrt(static_cast<double>(kLstmHidden));
    const auto draw = [&](Shape s) {
      std::vector<float> v(shape_numel(s));
      for (float& x : v) x = static_cast<float>(rng.uniform(-b, b));
      return Tensor(std::move(s), std::move(v));
    };
    const std::size_t H = kLstmHidden;
    FineTunerParams p;
    p.w_ih = draw({1, 4 * H});
    p.w_hh = draw({H, 4 * H});
    p.bias = draw({4 * H});
    p.proj_w = draw({H, 1});
    p.proj_b = draw({1});
    p.out_scale = out_scale;
    return p;
  }

  static FineTunerParams zeros(float out_scale = static_cast<float>(kDefaultOutScale)) {
    const std::size_t H = kLstmHidden;
    return {Tensor::zeros({1, 4 * H}), Tensor::zeros({H, 4 * H}), Tensor::zeros({4 * H}), Tensor::zeros({H, 1}),
            Tensor::zeros({1}), out_scale};
  }

  NamedTensors named() const {
    NamedTensors out;
    const auto ts = tensors();
    for (std::size_t i = 0; i < kTensors; ++i) out.emplace_back(names()[i], ts[i]);
    out.emplace_back("meta.out_scale", Tensor({1}, {out_scale}));
    return out;
  }

  static FineTunerParams from_named(const NamedTensors& nt) {
    std::vector<Tensor> ts;
    for (const auto& n : names()) ts.push_back(find_tensor(nt, n));
    FineTunerParams p = from_tensors(ts, find_tensor(nt, "meta.out_scale").item());
    const FineTunerParams ref = zeros();
    const auto want = ref.tensors();
    for (std::size_t i = 0; i < kTensors; ++i) {
      if (ts[i].shape() != want[i].shape()) {
        throw CheckpointError(CheckpointError::Kind::kMalformed, "tensor '" + names()[i] + "' has shape " +
                                                                     shape_str(ts[i].shape()) + ", expected " +
                                                                     shape_str(want[i].shape()));
      }
    }
    return p;
  }
};

struct FineTunerState {
  Tensor h;  // (dim, H)
  Tensor c;  // (dim, H)

  static FineTunerState zeros(std::size_t dim) {
    return {Tensor::zeros({dim, kLstmHidden}), Tensor::zeros({dim, kLstmHidden})};
  }
  FineTunerState detached() const { return {detach(h), detach(c)}; }
};

struct LstmOutput {
  Tensor delta;  // shaped like the gradient input
  FineTunerState state;
};

/// One step of the shared cell over every coordinate of g.
inline LstmOutput lstm_step(const FineTunerParams& phi, const Tensor& g, const FineTunerState& state) {
  const std::size_t dim = g.numel(), H = kLstmHidden;
  if (state.h.shape() != Shape{dim, H} || state.c.shape() != Shape{dim, H}) {
    throw ShapeError("fine-tuner state " + shape_str(state.h.shape()) + " does not match gradient of " +
                     std::to_string(dim) + " coordinates");
  }
  const Tensor x = reshape(g, {dim, 1});
  const Tensor gates = add(add(matmul(x, phi.w_ih), matmul(state.h, phi.w_hh)), phi.bias);
  const Tensor i = sigmoid(slice(gates, 1, 0, H));
  const Tensor f = sigmoid(slice(gates, 1, H, H));
  const Tensor cand = tanh(slice(gates, 1, 2 * H, H));
  const Tensor o = sigmoid(slice(gates, 1, 3 * H, H));
  const Tensor c = add(mul(f, state.c), mul(i, cand));
  const Tensor h = mul(o, tanh(c));
  const Tensor out = add(matmul(h, phi.proj_w), phi.proj_b);
  return {reshape(scale(out, phi.out_scale), g.shape()), {h, c}};
}

enum class Weighting { kUniform, kLinear, kLastOnly };

inline const char* weighting_name(Weighting w) {
  switch (w) {
    case Weighting::kUniform: return "uniform";
    case Weighting::kLinear: return "linear";
    case Weighting::kLastOnly: return "last-only";
  }
  return "?";
}

inline Weighting parse_weighting(const std::string& s) {
  if (s == "uniform") return Weighting::kUniform;
  if (s == "linear") return Weighting::kLinear;
  if (s == "last-only" || s == "last") return Weighting::kLastOnly;
  throw InvalidArgument("unknown weighting '" + s + "' (expected uniform, linear or last-only)");
}

/// w_k for step k in [1, K].
inline double unroll_weight(Weighting w, std::size_t k, std::size_t K) {
  switch (w) {
    case Weighting::kUniform: return 1.0;
    case Weighting::kLinear: return static_cast<double>(k);
    case Weighting::kLastOnly: return k == K ? 1.0 : 0.0;
  }
  return 0.0;
}

/// Perturbation trajectory theta^(1..K) of one fine-tuning run.
struct Trajectory {
  std::vector<Tensor> thetas;
  std::vector<double> losses;  // support loss at theta^(k-1), as seen by the updater
  std::vector<Tensor> inputs;  // gradient signal fed at each step (LSTM only)
  FineTunerState state;        // LSTM only
  std::size_t queries = 0;     // loss evaluations spent on gradient signals
};

/// Gradient signal for theta on the fine-tuning data; `step` is 1-based.
using SignalFn = std::function<GradEstimate(const Tensor& theta, std::size_t step)>;

inline SignalFn support_signal(const LabeledImages& data, const VictimModel& victim, const AttackConfig& cfg,
                               const GradSignal& signal, std::uint64_t seed) {
  return [&data, &victim, cfg, signal, seed](const Tensor& theta, std::size_t step) {
    return grad_estimate(signal, theta, data, victim, cfg, derive_seed(seed, step));
  };
}

/// theta^(0): i.i.d. N(0, sigma^2) drawn from `seed`.
inline Tensor random_theta0(const ImageShape& shape, std::uint64_t seed, double sigma = 0.01) {
  Rng rng(seed);
  std::vector<float> v(shape.numel());
  for (float& x : v) x = static_cast<float>(sigma * rng.normal());
  return Tensor(shape.as_shape(), std::move(v));
}

/// Runs `steps` LSTM updates from (theta, state). The input gradient is
/// always detached, so when phi or theta are recorded the trajectory depends
/// on them only through the cell and the update rule. `first_step` offsets
/// step numbering for windows of a longer run.
inline Trajectory unroll_lstm(const FineTunerParams& phi, const SignalFn& signal, Tensor theta, FineTunerState state,
                              std::size_t steps, std::size_t first_step = 1) {
  Trajectory tr;
  tr.thetas.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t k = first_step + s;
    const GradEstimate g = signal(detach(theta), k);
    tr.queries += g.queries_used;
    tr.losses.push_back(g.loss);
    tr.inputs.push_back(detach(g.g));
    LstmOutput out = lstm_step(phi, tr.inputs.back(), state);
    try {
      theta = sub(theta, out.delta);
    } catch (const NonFiniteError&) {
      throw DivergenceError("fine-tuner produced a non-finite iterate at step " + std::to_string(k));
    }
    state = std::move(out.state);
    tr.thetas.push_back(theta);
  }
  tr.state = std::move(state);
  return tr;
}

struct FineTuneSetup {
  AttackConfig attack;
  GradSignal signal;
  double theta0_sigma = 0.01;
};

/// Fine-tunes on `support` for K steps from a random theta^(0) seeded by
/// `seed`. When `tape` is given, phi is registered on it and every iterate
/// is recorded; `phi_leaves` then holds the recorded parameter tensors.
struct LstmRun {
  Trajectory traj;
  Tensor theta0;
  std::vector<Tensor> phi_leaves;
};

inline LstmRun finetune_lstm(const FineTunerParams& phi, const LabeledImages& support, const VictimModel& victim,
                             std::size_t K, const FineTuneSetup& setup, std::uint64_t seed, Tape* tape = nullptr) {
  if (K < 1) throw InvalidArgument("fine-tuning needs K >= 1");
  LstmRun run;
  run.theta0 = random_theta0(support.shape(), derive_seed(seed, 0), setup.theta0_sigma);
  FineTunerParams p = phi;
  if (tape) {
    for (const Tensor& t : phi.tensors()) run.phi_leaves.push_back(tape->leaf(t));
    p = FineTunerParams::from_tensors(run.phi_leaves, phi.out_scale);
  }
  const SignalFn sig = support_signal(support, victim, setup.attack, setup.signal, seed);
  run.traj = unroll_lstm(p, sig, run.theta0, FineTunerState::zeros(support.shape().numel()), K);
  return run;
}

using GradFn = std::function<Tensor(const Tensor& theta)>;

/// K steps of theta <- theta - alpha * grad(theta).
inline Trajectory finetune_gd(const Tensor& theta0, const GradFn& grad, std::size_t K, double alpha) {
  if (!(alpha >= 0.0)) throw InvalidArgument("GD step size must be nonnegative");
  Trajectory tr;
  Tensor theta = detach(theta0);
  for (std::size_t k = 1; k <= K; ++k) {
    const Tensor g = grad(theta);
    std::vector<float> v = theta.vec();
    auto gd = g.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= static_cast<float>(alpha) * gd[i];
    for (float x : v)
      if (!std::isfinite(x)) throw DivergenceError("gradient descent diverged at step " + std::to_string(k));
    theta = Tensor(theta.shape(), std::move(v));
    tr.thetas.push_back(theta);
  }
  return tr;
}

/// GD on the support task loss, recording the loss at each pre-update point.
inline Trajectory finetune_gd(const Tensor& theta0, const LabeledImages& support, const VictimModel& victim,
                              std::size_t K, double alpha, const AttackConfig& cfg) {
  std::vector<double> losses;
  Trajectory tr = finetune_gd(
      theta0,
      [&](const Tensor& th) {
        GradEstimate g = fo_gradient(th, support, victim, cfg);
        losses.push_back(g.loss);
        return g.g;
      },
      K, alpha);
  tr.losses = std::move(losses);
  return tr;
}

struct PgdConfig {
  std::size_t steps = 200;
  double step_size = 0.01;
  double eps_inf = 0.15;
  bool keep_best = true;  // report the best-so-far iterate by support ASR
};

/// Signed-gradient descent on the support loss with projection onto the
/// l-inf ball, starting from zero. With keep_best, thetas[k] is the iterate
/// with the highest support ASR among the first k + 1 (latest wins ties).
inline Trajectory pgd_uap(const LabeledImages& support, const VictimModel& victim, const PgdConfig& pgd,
                          const AttackConfig& cfg) {
  if (!(pgd.eps_inf >= 0.0)) throw InvalidArgument("eps_inf must be nonnegative");
  Trajectory tr;
  Tensor theta = Tensor::zeros(support.shape().as_shape());
  Tensor best = theta;
  double best_asr = -1.0;
  const auto eps = static_cast<float>(pgd.eps_inf);
  for (std::size_t k = 1; k <= pgd.steps; ++k) {
    const GradEstimate g = fo_gradient(theta, support, victim, cfg);
    tr.losses.push_back(g.loss);
    std::vector<float> v = theta.vec();
    auto gd = g.g.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float s = gd[i] > 0.0f ? 1.0f : (gd[i] < 0.0f ? -1.0f : 0.0f);
      v[i] = std::clamp(v[i] - static_cast<float>(pgd.step_size) * s, -eps, eps);
    }
    theta = Tensor(theta.shape(), std::move(v));
    if (pgd.keep_best) {
      const double a = attack_success_rate(theta, support, victim, cfg.pixel_clip);
      if (a >= best_asr) {
        best_asr = a;
        best = theta;
      }
      tr.thetas.push_back(best);
    } else {
      tr.thetas.push_back(theta);
    }
  }
  return tr;
}

}  // namespace muap
