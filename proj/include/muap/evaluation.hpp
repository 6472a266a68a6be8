// SPDX-License-Identifier: Apache-2.0
//
// Meta-test evaluation: run a fine-tuning method on held-out episodes and
// aggregate per-step query ASR, l1 distortion and support loss.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "muap/attack.hpp"
#include "muap/episodes.hpp"
#include "muap/fine_tuners.hpp"
#include "muap/meta_engine.hpp"
#include "muap/parallel.hpp"

namespace muap {

inline constexpr const char* kCurveCsvHeader = "step,mean_asr,std_asr,mean_l1,mean_loss";
inline constexpr int kCurveCsvVersion = 1;

/// Produces theta^(1..steps) for one episode.
using EpisodeRunner = std::function<Trajectory(const FewShotEpisode&, std::uint64_t seed)>;

struct EpisodeCurve {
  std::string source_id;
  std::vector<double> asr;          // query ASR at theta^(k)
  std::vector<double> support_asr;  // support ASR at theta^(k)
  std::vector<double> l1;           // mean |theta^(k)|
  std::vector<double> loss;         // support task loss at theta^(k)
};

struct CurvePoint {
  std::size_t step = 0;
  double mean_asr = 0.0, std_asr = 0.0, mean_l1 = 0.0, mean_loss = 0.0, mean_support_asr = 0.0;
};

struct RunReport {
  std::string method;
  std::size_t episodes = 0;
  std::size_t max_steps = 0;
  std::vector<EpisodeCurve> per_episode;
  std::vector<CurvePoint> curve;

  const CurvePoint* at(std::size_t step) const {
    return step >= 1 && step <= curve.size() ? &curve[step - 1] : nullptr;
  }

  /// Highest mean query ASR over steps 1..min(limit, max_steps).
  double best_asr_within(std::size_t limit) const {
    double b = 0.0;
    for (std::size_t k = 0; k < curve.size() && k < limit; ++k) b = std::max(b, curve[k].mean_asr);
    return b;
  }

  /// First step whose mean ASR is exactly 1.0.
  std::optional<std::size_t> steps_to_full() const {
    for (const CurvePoint& p : curve)
      if (p.mean_asr >= 1.0) return p.step;
    return std::nullopt;
  }

  /// First step attaining the highest mean ASR of the run.
  std::optional<std::size_t> steps_to_best() const {
    if (curve.empty()) return std::nullopt;
    std::size_t best = 0;
    for (std::size_t k = 1; k < curve.size(); ++k)
      if (curve[k].mean_asr > curve[best].mean_asr) best = k;
    return curve[best].step;
  }
};

/// Orders two runs by convergence speed: reaching full ASR beats not
/// reaching it; otherwise the earlier step wins (steps-to-best when neither
/// reaches full ASR). Returns true when `a` is no slower than `b`.
inline bool no_slower(const RunReport& a, const RunReport& b) {
  const auto fa = a.steps_to_full(), fb = b.steps_to_full();
  if (fa && fb) return *fa <= *fb;
  if (fa || fb) return fa.has_value();
  return a.steps_to_best().value_or(0) <= b.steps_to_best().value_or(0);
}

inline EpisodeCurve evaluate_episode(const FewShotEpisode& ep, const Trajectory& tr, const AttackConfig& cfg) {
  EpisodeCurve c;
  c.source_id = ep.source_id;
  const LabeledImages& judge = ep.query.size() > 0 ? ep.query : ep.support;
  for (const Tensor& th : tr.thetas) {
    c.asr.push_back(attack_success_rate(th, judge, *ep.victim, cfg.pixel_clip));
    c.support_asr.push_back(attack_success_rate(th, ep.support, *ep.victim, cfg.pixel_clip));
    c.l1.push_back(static_cast<double>(mean_abs(th).item()));
    c.loss.push_back(static_cast<double>(task_loss(th, ep.support, *ep.victim, cfg).item()));
  }
  return c;
}

/// Runs episodes 0..n-1 of `stream` through `runner` on `jobs` workers and
/// aggregates in episode order.
inline RunReport evaluate(const std::string& method, const EpisodeStream& stream, std::size_t n_episodes,
                          std::size_t max_steps, const EpisodeRunner& runner, const AttackConfig& cfg,
                          std::uint64_t seed, std::size_t jobs = 1) {
  RunReport rep;
  rep.method = method;
  rep.episodes = n_episodes;
  rep.max_steps = max_steps;
  rep.per_episode = parallel_map<EpisodeCurve>(n_episodes, jobs, [&](std::size_t i) {
    const FewShotEpisode ep = sample_episode(stream, i);
    Trajectory tr = runner(ep, derive_seed(seed, i));
    if (tr.thetas.size() < max_steps) {
      throw InvalidArgument(method + " produced " + std::to_string(tr.thetas.size()) + " iterates, expected " +
                            std::to_string(max_steps));
    }
    tr.thetas.resize(max_steps);
    return evaluate_episode(ep, tr, cfg);
  });
  if (n_episodes == 0) return rep;
  const auto n = static_cast<double>(n_episodes);
  for (std::size_t k = 0; k < max_steps; ++k) {
    CurvePoint p;
    p.step = k + 1;
    for (const EpisodeCurve& c : rep.per_episode) {
      p.mean_asr += c.asr[k];
      p.mean_l1 += c.l1[k];
      p.mean_loss += c.loss[k];
      p.mean_support_asr += c.support_asr[k];
    }
    p.mean_asr /= n;
    p.mean_l1 /= n;
    p.mean_loss /= n;
    p.mean_support_asr /= n;
    double var = 0.0;
    for (const EpisodeCurve& c : rep.per_episode) var += std::pow(c.asr[k] - p.mean_asr, 2);
    p.std_asr = std::sqrt(var / n);
    rep.curve.push_back(p);
  }
  return rep;
}

/// Writes the aggregate curve with a fixed column order.
inline void write_curve_csv(std::ostream& os, const RunReport& rep) {
  os << kCurveCsvHeader << '\n';
  char buf[160];
  for (const CurvePoint& p : rep.curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f\n", p.step, p.mean_asr, p.std_asr, p.mean_l1,
                  p.mean_loss);
    os << buf;
  }
}

// Runners for each method.

inline EpisodeRunner lstm_runner(const FineTunerParams& phi, std::size_t steps, const FineTuneSetup& setup) {
  return [phi, steps, setup](const FewShotEpisode& ep, std::uint64_t seed) {
    return finetune_lstm(phi, ep.support, *ep.victim, steps, setup, seed).traj;
  };
}

/// `eps_for` picks the l-inf radius from the episode's image shape.
inline EpisodeRunner pgd_runner(PgdConfig pgd, std::function<double(const ImageShape&)> eps_for,
                                const AttackConfig& cfg) {
  return [pgd, eps_for, cfg](const FewShotEpisode& ep, std::uint64_t) {
    PgdConfig p = pgd;
    if (eps_for) p.eps_inf = eps_for(ep.image_shape());
    return pgd_uap(ep.support, *ep.victim, p, cfg);
  };
}

inline EpisodeRunner maml_runner(const MamlInit& init, std::size_t steps, double alpha, const AttackConfig& cfg) {
  return [init, steps, alpha, cfg](const FewShotEpisode& ep, std::uint64_t) {
    const Tensor& theta0 = init.for_source(ep.source_id);
    if (theta0.shape() != ep.image_shape().as_shape()) {
      throw ShapeError("initialization of shape " + shape_str(theta0.shape()) + " does not fit episode images " +
                       ep.image_shape().str());
    }
    return finetune_gd(theta0, ep.support, *ep.victim, steps, alpha, cfg);
  };
}

}  // namespace muap
