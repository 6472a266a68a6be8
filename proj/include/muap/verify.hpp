// SPDX-License-Identifier: Apache-2.0
//
// Self-contained verification checks on synthetic data: zeroth-order
// estimator properties, the LSTM meta-gradient against finite differences,
// and the meta-gradient gap probe.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "muap/fine_tuners.hpp"
#include "muap/gap_probe.hpp"
#include "muap/grad_oracle.hpp"

namespace muap {

struct CheckResult {
  std::string name;
  double measured = 0.0;
  std::string tolerance;
  bool pass = false;
};

inline CheckResult check_zo_constant(std::uint64_t seed) {
  ZoConfig zo;
  zo.direction_seed = seed;
  const GradEstimate g = zo_gradient([](const Tensor&) { return 1.75; }, Tensor({8}, std::vector<float>(8, 0.3f)), zo);
  double worst = 0.0;
  for (float v : g.g.data()) worst = std::max(worst, static_cast<double>(std::abs(v)));
  return {"zo_constant_objective_zero", worst, "== 0", worst == 0.0};
}

/// Largest per-coordinate relative deviation of the seed-averaged estimate
/// from a on f(theta) = a . theta.
inline CheckResult check_zo_linear_unbiased(std::size_t seeds, std::uint64_t seed) {
  const std::vector<double> a{1.0, -2.0, 0.5, 3.0, -1.5, 0.75, 2.0, -0.25, 1.25, -3.0};
  const ScalarFn f = [&](const Tensor& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * t[i];
    return s;
  };
  std::vector<double> mean(a.size(), 0.0);
  for (std::size_t s = 0; s < seeds; ++s) {
    ZoConfig zo;
    zo.direction_seed = derive_seed(seed, s);
    const GradEstimate g = zo_gradient(f, Tensor::zeros({a.size()}), zo);
    for (std::size_t i = 0; i < a.size(); ++i) mean[i] += g.g[i] / static_cast<double>(seeds);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(mean[i] - a[i]) / std::abs(a[i]));
  return {"zo_linear_unbiased_" + std::to_string(seeds) + "_seeds", worst, "<= 0.05", worst <= 0.05};
}

/// Forward minus central difference estimates on a fixed quadratic share
/// directions, so their gap isolates the O(mu) bias term; the check is the
/// ratio of that gap at mu = 1e-2 and mu = 1e-3.
inline CheckResult check_zo_mu_decay(std::uint64_t seed) {
  const std::vector<double> c{0.5, -1.0, 0.25, 2.0, -0.5, 1.0};
  const Tensor theta({6}, {0.1f, 0.2f, -0.3f, 0.4f, 0.0f, -0.1f});
  const ScalarFn f = [&](const Tensor& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += std::pow(t[i] - c[i], 2);
    return s;
  };
  const auto bias = [&](double mu) {
    double total = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      ZoConfig fwd;
      fwd.mu = mu;
      fwd.direction_seed = derive_seed(seed, s);
      ZoConfig cen = fwd;
      cen.central = true;
      const Tensor a = zo_gradient(f, theta, fwd).g, b = zo_gradient(f, theta, cen).g;
      double d2 = 0.0;
      for (std::size_t i = 0; i < c.size(); ++i) d2 += std::pow(static_cast<double>(a[i]) - b[i], 2);
      total += std::sqrt(d2);
    }
    return total;
  };
  const double ratio = bias(1e-2) / bias(1e-3);
  return {"zo_bias_ratio_mu_1e-2_over_1e-3", ratio, "in [5, 20]", ratio >= 5.0 && ratio <= 20.0};
}

/// Meta-gradient of f(theta^(K); D_val) for K = 3 by reverse mode against
/// central differences (h = 1e-3) over 8 random phi coordinates, with the
/// detached gradient inputs replayed.
inline CheckResult check_meta_gradient_fd(const VictimModel& victim, const LabeledImages& support,
                                          const LabeledImages& val, std::uint64_t seed) {
  FineTuneSetup setup;
  setup.attack.pixel_clip = false;
  setup.attack.lambda = 0.5;
  setup.theta0_sigma = 0.2;
  FineTunerParams phi = FineTunerParams::init(derive_seed(seed, 1));
  phi.out_scale = 0.5f;
  const std::size_t K = 3;
  Tape tape;
  const LstmRun run = finetune_lstm(phi, support, victim, K, setup, derive_seed(seed, 2), &tape);
  const Gradients grads = tape.backward(task_loss(run.traj.thetas.back(), val, victim, setup.attack));
  const SignalFn replay = [&](const Tensor&, std::size_t k) {
    return GradEstimate{run.traj.inputs[k - 1], GradMode::kFO, 0, 0.0, 0, 0.0};
  };
  const std::size_t dim = support.shape().numel();
  const auto objective = [&](const FineTunerParams& p) {
    const Trajectory tr = unroll_lstm(p, replay, run.theta0, FineTunerState::zeros(dim), K);
    return static_cast<double>(task_loss(tr.thetas.back(), val, victim, setup.attack).item());
  };
  Rng rng(derive_seed(seed, 3));
  double num = 0.0, den = 0.0;
  for (int probe = 0; probe < 8; ++probe) {
    const std::size_t which = rng.below(FineTunerParams::kTensors);
    const std::size_t idx = rng.below(phi.tensors()[which].numel());
    const double analytic = grads.wrt(run.phi_leaves[which])[idx];
    const auto at = [&](float h) {
      std::vector<Tensor> ts = phi.tensors();
      std::vector<float> v = ts[which].vec();
      v[idx] += h;
      ts[which] = Tensor(ts[which].shape(), std::move(v));
      return objective(FineTunerParams::from_tensors(ts, phi.out_scale));
    };
    const double numeric = (at(1e-3f) - at(-1e-3f)) / 2e-3;
    num += std::pow(analytic - numeric, 2);
    den += numeric * numeric;
  }
  const double rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
  return {"lstm_meta_gradient_fd_K3", rel, "<= 0.01", rel <= 1e-2};
}

struct GapChecks {
  GapReport report;
  std::vector<CheckResult> checks;
};

/// Runs the gap probe over sizes (n, n) for n in `grid` plus the population
/// point, and derives the pass/fail checks. The (4, 4) against (32, 32)
/// ordering compares repeat-averaged gaps over 10 probe seeds.
inline GapChecks check_gap_probe(const LabeledImages& pool, const VictimModel& victim, const FineTunerParams& phi,
                                 const std::vector<std::size_t>& grid, std::size_t repeats, std::uint64_t seed,
                                 std::size_t jobs = 1) {
  GapProbeConfig cfg;
  for (std::size_t n : grid) cfg.grid.emplace_back(n, n);
  cfg.repeats = repeats;
  cfg.K = 5;
  cfg.seed = seed;
  cfg.jobs = jobs;
  GapChecks out;
  out.report = meta_gradient_gap_probe(pool, victim, phi, cfg);

  std::size_t violations = 0;
  double worst_ratio = 0.0;
  for (const GapPoint& p : out.report.points)
    for (double g : p.gaps) {
      if (g > p.bound) ++violations;
      worst_ratio = std::max(worst_ratio, p.bound > 0.0 ? g / p.bound : INFINITY);
    }
  out.checks.push_back({"gap_within_bound_every_point", worst_ratio, "max gap/bound <= 1", violations == 0});

  const std::size_t need = out.report.pairs == 0 ? 0 : out.report.pairs - 1;
  out.checks.push_back({"gap_monotone_pairs_of_" + std::to_string(out.report.pairs),
                        static_cast<double>(out.report.monotone_pairs), ">= " + std::to_string(need),
                        out.report.monotone_pairs >= need});

  const auto find = [&](std::size_t n) -> const GapPoint* {
    for (const GapPoint& p : out.report.points)
      if (p.d_tr == n) return &p;
    return nullptr;
  };
  if (find(4) && find(32)) {
    const std::size_t seeds = 10;
    std::size_t wins = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
      GapProbeConfig two = cfg;
      two.grid = {{4, 4}, {32, 32}};
      two.seed = derive_seed(seed, 100 + s);
      const GapReport r = meta_gradient_gap_probe(pool, victim, phi, two);
      wins += r.points[0].mean_gap > r.points[1].mean_gap ? 1 : 0;
    }
    const double frac = static_cast<double>(wins) / static_cast<double>(seeds);
    out.checks.push_back({"gap_4_exceeds_gap_32_seed_fraction", frac, ">= 0.9", frac >= 0.9});
  }

  GapProbeConfig pop = cfg;
  pop.grid = {{pool.size(), pool.size()}};
  pop.repeats = 1;
  const GapPoint p = meta_gradient_gap_probe(pool, victim, phi, pop).points.front();
  const double rel = p.mean_grad_norm > 0.0 ? p.mean_gap / p.mean_grad_norm : INFINITY;
  out.checks.push_back({"gap_population_limit_relative", rel, "<= 0.1", rel <= 0.1});
  return out;
}

}  // namespace muap
