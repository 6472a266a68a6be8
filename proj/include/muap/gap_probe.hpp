// SPDX-License-Identifier: Apache-2.0
//
// Empirical probe of the generalization gap of the learned fine-tuner's
// meta-gradient. For disjoint samples D_tr, D_val of a pool and a fixed phi:
//
//   F_hat(phi) = (1/K) sum_k f(theta^(k)(phi; D_tr); D_val)
//   F(phi)     = (1/K) sum_k f(theta^(k)(phi; D_tr); D_tr)
//   gap        = || grad F_hat - grad F ||
//
// with f the mean-normalized attack loss. Alongside the gap it reports
//
//   sigma_hat  spread of per-image theta-gradients over the pool
//   G_hat      max over k of ||grad_theta f|| and ||d theta^(k) / d phi||_F
//   bound      sqrt(2) G_hat sigma_hat sqrt(1/|D_tr| + 1/|D_val|)
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "muap/attack.hpp"
#include "muap/fine_tuners.hpp"
#include "muap/parallel.hpp"

namespace muap {

struct GapProbeConfig {
  std::vector<std::pair<std::size_t, std::size_t>> grid;  // (|D_tr|, |D_val|)
  std::size_t repeats = 20;
  std::size_t K = 5;
  std::uint64_t seed = 0;
  AttackConfig attack;
  double theta0_sigma = 0.01;
  std::size_t jobs = 1;
};

struct GapPoint {
  std::size_t d_tr = 0, d_val = 0;
  std::vector<double> gaps;  // one per repeat
  double mean_gap = 0.0;
  double g_hat = 0.0;
  double sigma_hat = 0.0;
  double bound = 0.0;
  double mean_grad_norm = 0.0;  // mean ||grad F||
};

struct GapReport {
  std::vector<GapPoint> points;
  std::size_t monotone_pairs = 0;  // adjacent grid points whose mean gap does not grow
  std::size_t pairs = 0;
};

/// mean_b cw_b + lambda * mean|theta|
inline Tensor mean_task_loss(const Tensor& theta, const LabeledImages& split, const VictimModel& victim,
                             const AttackConfig& cfg) {
  const Tensor logits = forward_logits(victim, apply_perturbation(split.images, theta, cfg.pixel_clip));
  const Tensor atk = mean(cw_loss(logits, split.labels, cfg.kappa));
  return add(atk, scale(mean_abs(theta), static_cast<float>(cfg.lambda)));
}

/// sqrt(mean_b || g_b - mean g ||^2) for the per-image gradients g_b of the
/// attack loss with respect to theta.
inline double per_sample_grad_spread(const Tensor& theta, const LabeledImages& pool, const VictimModel& victim,
                                     const AttackConfig& cfg) {
  Tape tape;
  const Tensor x = tape.leaf(pool.images);
  const Tensor logits = forward_logits(victim, apply_perturbation(x, detach(theta), cfg.pixel_clip));
  const Tensor gx = tape.backward(sum(cw_loss(logits, pool.labels, cfg.kappa))).wrt(x);
  const std::size_t B = pool.size(), D = theta.numel();
  auto g = gx.data();
  std::vector<double> mu(D, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < D; ++i) mu[i] += g[b * D + i];
  for (double& m : mu) m /= static_cast<double>(B);
  double ss = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < D; ++i) ss += std::pow(g[b * D + i] - mu[i], 2);
  return std::sqrt(ss / static_cast<double>(B));
}

/// ||d theta^(k) / d phi||_F for k = 1..K, replaying every coordinate alone
/// through the cell with its recorded gradient inputs.
inline std::vector<double> unroll_jacobian_norms(const FineTunerParams& phi, const Tensor& theta0,
                                                 const std::vector<Tensor>& inputs) {
  const std::size_t K = inputs.size(), D = theta0.numel();
  std::vector<double> sq(K, 0.0);
  for (std::size_t j = 0; j < D; ++j) {
    Tape tape;
    std::vector<Tensor> leaves;
    for (const Tensor& t : phi.tensors()) leaves.push_back(tape.leaf(t));
    const FineTunerParams p = FineTunerParams::from_tensors(leaves, phi.out_scale);
    Tensor th({1}, {theta0.data()[j]});
    FineTunerState st = FineTunerState::zeros(1);
    std::vector<Tensor> traj;
    for (std::size_t k = 0; k < K; ++k) {
      LstmOutput out = lstm_step(p, Tensor({1}, {inputs[k].data()[j]}), st);
      th = sub(th, out.delta);
      st = std::move(out.state);
      traj.push_back(th);
    }
    for (std::size_t k = 0; k < K; ++k) {
      const Gradients g = tape.backward(traj[k]);
      for (const Tensor& l : leaves) {
        const Tensor d = g.wrt(l);
        for (float v : d.data()) sq[k] += static_cast<double>(v) * v;
      }
    }
  }
  for (double& s : sq) s = std::sqrt(s);
  return sq;
}

namespace detail {

struct GapSample {
  double gap = 0.0;
  double grad_norm = 0.0;
  double g_hat = 0.0;
  double sigma_hat = 0.0;
};

inline double flat_norm(const std::vector<Tensor>& ts) {
  double s = 0.0;
  for (const Tensor& t : ts)
    for (float v : t.data()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

inline GapSample gap_sample(const LabeledImages& pool, const VictimModel& victim, const FineTunerParams& phi,
                            std::size_t d_tr, std::size_t d_val, std::size_t repeat, const GapProbeConfig& cfg) {
  const std::size_t n = pool.size();
  LabeledImages tr, val;
  if (d_tr == n && d_val == n) {
    tr = pool;
    val = pool;
  } else {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, repeat));
    rng.shuffle(idx);
    tr = pool.subset(std::span<const std::size_t>(idx.data(), d_tr));
    val = pool.subset(std::span<const std::size_t>(idx.data() + d_tr, d_val));
  }

  Tape tape;
  std::vector<Tensor> leaves;
  for (const Tensor& t : phi.tensors()) leaves.push_back(tape.leaf(t));
  const FineTunerParams p = FineTunerParams::from_tensors(leaves, phi.out_scale);
  const Tensor theta0 = random_theta0(pool.shape(), derive_seed(cfg.seed ^ 0x7468657461ULL, repeat), cfg.theta0_sigma);
  const SignalFn sig = [&](const Tensor& th, std::size_t) {
    Tape inner;
    const Tensor t = inner.leaf(th);
    const Tensor l = mean_task_loss(t, tr, victim, cfg.attack);
    return GradEstimate{inner.backward(l).wrt(t), GradMode::kFO, 0, 0.0, 0, static_cast<double>(l.item())};
  };
  const Trajectory traj = unroll_lstm(p, sig, theta0, FineTunerState::zeros(theta0.numel()), cfg.K);

  const float w = 1.0f / static_cast<float>(cfg.K);
  Tensor f_hat, f_pop;
  for (std::size_t k = 0; k < cfg.K; ++k) {
    const Tensor a = scale(mean_task_loss(traj.thetas[k], val, victim, cfg.attack), w);
    const Tensor b = scale(mean_task_loss(traj.thetas[k], tr, victim, cfg.attack), w);
    f_hat = k == 0 ? a : add(f_hat, a);
    f_pop = k == 0 ? b : add(f_pop, b);
  }
  const Gradients gh = tape.backward(f_hat);
  const Gradients gp = tape.backward(f_pop);
  std::vector<Tensor> diff, pop;
  for (const Tensor& l : leaves) {
    diff.push_back(sub(gh.wrt(l), gp.wrt(l)));
    pop.push_back(gp.wrt(l));
  }

  GapSample s;
  s.gap = flat_norm(diff);
  s.grad_norm = flat_norm(pop);
  const std::vector<double> jn = unroll_jacobian_norms(phi, theta0, traj.inputs);
  for (std::size_t k = 0; k < cfg.K; ++k) {
    const Tensor th = detach(traj.thetas[k]);
    for (const LabeledImages* d : {&tr, &val}) {
      Tape t2;
      const Tensor leaf = t2.leaf(th);
      s.g_hat = std::max(s.g_hat, flat_norm({t2.backward(mean_task_loss(leaf, *d, victim, cfg.attack)).wrt(leaf)}));
    }
    s.g_hat = std::max(s.g_hat, jn[k]);
    s.sigma_hat = std::max(s.sigma_hat, per_sample_grad_spread(th, pool, victim, cfg.attack));
  }
  return s;
}

}  // namespace detail

inline GapReport meta_gradient_gap_probe(const LabeledImages& pool, const VictimModel& victim,
                                         const FineTunerParams& phi, const GapProbeConfig& cfg) {
  if (cfg.K < 1 || cfg.repeats < 1) throw InvalidArgument("gap probe needs K >= 1 and at least one repeat");
  cfg.attack.validate();
  const std::size_t n = pool.size();
  for (const auto& [a, b] : cfg.grid) {
    const bool population = a == n && b == n;
    if (a < 1 || b < 1 || (!population && a + b > n)) {
      throw InvalidArgument("grid point (" + std::to_string(a) + ", " + std::to_string(b) +
                            ") does not fit a pool of " + std::to_string(n));
    }
  }
  GapReport rep;
  for (const auto& [a, b] : cfg.grid) {
    GapPoint pt;
    pt.d_tr = a;
    pt.d_val = b;
    const auto samples = parallel_map<detail::GapSample>(
        cfg.repeats, cfg.jobs, [&](std::size_t r) { return detail::gap_sample(pool, victim, phi, a, b, r, cfg); });
    for (const auto& s : samples) {
      pt.gaps.push_back(s.gap);
      pt.mean_gap += s.gap;
      pt.mean_grad_norm += s.grad_norm;
      pt.g_hat = std::max(pt.g_hat, s.g_hat);
      pt.sigma_hat = std::max(pt.sigma_hat, s.sigma_hat);
    }
    pt.mean_gap /= static_cast<double>(samples.size());
    pt.mean_grad_norm /= static_cast<double>(samples.size());
    pt.bound = std::sqrt(2.0) * pt.g_hat * pt.sigma_hat *
               std::sqrt(1.0 / static_cast<double>(a) + 1.0 / static_cast<double>(b));
    rep.points.push_back(std::move(pt));
  }
  for (std::size_t i = 1; i < rep.points.size(); ++i) {
    ++rep.pairs;
    if (rep.points[i].mean_gap <= rep.points[i - 1].mean_gap) ++rep.monotone_pairs;
  }
  return rep;
}

}  // namespace muap
