// SPDX-License-Identifier: Apache-2.0
//
// Meta-learners over few-shot UAP tasks.
//
//   lft            LSTM fine-tuner; meta-objective on the query set of each
//                  task after fine-tuning on its support set.
//   l2o            same fine-tuner; fine-tuning and meta-objective both use
//                  support ∪ query.
//   maml           first-order MAML: one shared perturbation initialization,
//                  inner GD on support, outer gradient from the query loss.
//   ensemble-maml  one MAML per image source, dispatched by source id.
//
// LSTM meta-training runs each task batch over a K-step horizon in windows
// of `truncation` steps. Every window is one meta-update; theta and the LSTM
// state are detached at window edges. Unroll weights w_k are applied within
// the window (k = 1..truncation).
#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "muap/attack.hpp"
#include "muap/episodes.hpp"
#include "muap/fine_tuners.hpp"
#include "muap/grad_oracle.hpp"
#include "muap/optim.hpp"
#include "muap/parallel.hpp"

namespace muap {

enum class MetaMethod { kLft, kL2o, kMaml, kEnsembleMaml };

inline const char* method_name(MetaMethod m) {
  switch (m) {
    case MetaMethod::kLft: return "lft";
    case MetaMethod::kL2o: return "l2o";
    case MetaMethod::kMaml: return "maml";
    case MetaMethod::kEnsembleMaml: return "ensemble-maml";
  }
  return "?";
}

inline MetaMethod parse_method(const std::string& s) {
  if (s == "lft") return MetaMethod::kLft;
  if (s == "l2o") return MetaMethod::kL2o;
  if (s == "maml") return MetaMethod::kMaml;
  if (s == "ensemble-maml") return MetaMethod::kEnsembleMaml;
  throw InvalidArgument("unknown method '" + s + "' (expected lft, l2o, maml or ensemble-maml)");
}

struct MetaConfig {
  std::size_t T = 200;            // meta-updates
  std::size_t K = 200;            // fine-tuning horizon per task
  std::size_t truncation = 20;    // BPTT window
  std::size_t batch_tasks = 4;
  std::size_t n_tasks = 1000;     // task indices drawn from [0, n_tasks)
  double beta = 1e-3;
  MetaOptimizer optimizer = MetaOptimizer::kAdam;
  Weighting weights = Weighting::kLastOnly;
  GradSignal signal;
  double alpha = 0.002;           // MAML inner GD rate
  std::size_t inner_steps = 20;   // MAML inner steps during meta-training
  float out_scale = static_cast<float>(kDefaultOutScale);
  double theta0_sigma = 0.01;
  AttackConfig attack;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  void validate() const {
    if (K < 1) throw InvalidArgument("K must be at least 1");
    if (truncation < 1 || truncation > K || K % truncation != 0) {
      throw InvalidArgument("truncation must divide K (K=" + std::to_string(K) + ", truncation=" +
                            std::to_string(truncation) + ")");
    }
    if (!(beta > 0.0)) throw InvalidArgument("meta learning rate must be positive");
    if (batch_tasks < 1 || n_tasks < 1) throw InvalidArgument("task batch and task count must be positive");
    if (!(alpha >= 0.0)) throw InvalidArgument("alpha must be nonnegative");
    attack.validate();
    if (signal.mode == GradMode::kZO) signal.zo.validate();
  }
};

struct MetaLogRow {
  std::size_t step = 0;
  double meta_loss = 0.0;
  double wall_seconds = 0.0;
  double grad_norm = 0.0;
};

struct LftResult {
  FineTunerParams phi;
  std::vector<MetaLogRow> log;
};

namespace detail {

/// Draws task indices and per-instance seeds for successive task batches.
class TaskSampler {
 public:
  explicit TaskSampler(const MetaConfig& cfg) : cfg_(cfg), rng_(derive_seed(cfg.seed, 0x7461736bULL)) {}

  struct Pick {
    std::uint64_t index;
    std::uint64_t seed;
  };

  std::vector<Pick> next() {
    std::vector<Pick> out;
    for (std::size_t b = 0; b < cfg_.batch_tasks; ++b) {
      const std::uint64_t idx = rng_.below(cfg_.n_tasks);
      out.push_back({idx, rng_.next_u64()});
    }
    return out;
  }

 private:
  const MetaConfig& cfg_;
  Rng rng_;
};

inline double norm_of(const std::vector<Tensor>& ts) {
  double s = 0.0;
  for (const Tensor& t : ts)
    for (float v : t.data()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

inline void accumulate(std::vector<Tensor>& into, const std::vector<Tensor>& add_me) {
  if (into.empty()) {
    into = add_me;
    return;
  }
  for (std::size_t k = 0; k < into.size(); ++k) {
    std::vector<float> v = into[k].vec();
    auto a = add_me[k].data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += a[i];
    into[k] = Tensor(into[k].shape(), std::move(v));
  }
}

inline void check_finite_grads(const std::vector<Tensor>& gs, std::size_t task, std::size_t step) {
  for (const Tensor& g : gs)
    for (float v : g.data())
      if (!std::isfinite(v)) {
        throw DivergenceError("non-finite meta-gradient from task " + std::to_string(task) + " at meta-step " +
                              std::to_string(step));
      }
}

/// Meta-objective term for one iterate. FO: the recorded task loss. ZO: a
/// surrogate <theta, g_hat> whose phi-gradient is J^T g_hat with g_hat the
/// zeroth-order estimate on the meta data; its reported value is f(theta).
inline std::pair<Tensor, double> meta_term(const Tensor& theta, const LabeledImages& data, const VictimModel& victim,
                                           const MetaConfig& cfg, std::uint64_t seed) {
  if (cfg.signal.mode == GradMode::kFO) {
    Tensor l = task_loss(theta, data, victim, cfg.attack);
    const double v = l.item();
    return {l, v};
  }
  ZoConfig zo = cfg.signal.zo;
  zo.direction_seed = seed;
  const GradEstimate g = zo_gradient(detach(theta), data, victim, cfg.attack, zo);
  return {sum(mul(theta, g.g)), g.loss};
}

struct LstmTask {
  FewShotEpisode episode;
  LabeledImages fine_data;
  LabeledImages meta_data;
  std::uint64_t seed = 0;
  Tensor theta;
  FineTunerState state;
};

struct WindowResult {
  std::vector<Tensor> grads;
  double loss = 0.0;
  Tensor theta;
  FineTunerState state;
};

inline WindowResult run_window(const FineTunerParams& phi, const LstmTask& task, std::size_t first_step,
                               const MetaConfig& cfg) {
  Tape tape;
  std::vector<Tensor> leaves;
  for (const Tensor& t : phi.tensors()) leaves.push_back(tape.leaf(t));
  const FineTunerParams p = FineTunerParams::from_tensors(leaves, phi.out_scale);
  const SignalFn sig = support_signal(task.fine_data, *task.episode.victim, cfg.attack, cfg.signal, task.seed);
  const Trajectory tr = unroll_lstm(p, sig, task.theta, task.state, cfg.truncation, first_step);

  Tensor objective;
  bool any = false;
  double value = 0.0;
  for (std::size_t s = 0; s < cfg.truncation; ++s) {
    const double w = unroll_weight(cfg.weights, s + 1, cfg.truncation);
    if (w == 0.0) continue;
    const std::uint64_t probe_seed = derive_seed(task.seed ^ 0x6d657461ULL, first_step + s);
    auto [term, v] = meta_term(tr.thetas[s], task.meta_data, *task.episode.victim, cfg, probe_seed);
    term = scale(term, static_cast<float>(w));
    objective = any ? add(objective, term) : term;
    any = true;
    value += w * v;
  }
  WindowResult out;
  const Gradients g = tape.backward(objective);
  for (const Tensor& l : leaves) out.grads.push_back(g.wrt(l));
  out.loss = value;
  out.theta = detach(tr.thetas.back());
  out.state = tr.state.detached();
  return out;
}

inline LftResult meta_train_lstm(const EpisodeStream& stream, const MetaConfig& cfg, bool l2o,
                                 const FineTunerParams* init) {
  cfg.validate();
  if (stream.sources.empty()) throw InvalidArgument("meta-training needs at least one source");
  LftResult res;
  res.phi = init ? *init : FineTunerParams::init(derive_seed(cfg.seed, 0x706869ULL), cfg.out_scale);
  std::vector<Tensor> params = res.phi.tensors();
  ParamOptimizer opt(cfg.optimizer, cfg.beta);
  TaskSampler sampler(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t windows = cfg.K / cfg.truncation;

  std::size_t t = 0;
  while (t < cfg.T) {
    std::vector<LstmTask> tasks;
    for (const auto& pick : sampler.next()) {
      LstmTask task;
      task.episode = sample_episode(stream, pick.index);
      const bool has_query = task.episode.query.size() > 0;
      if (l2o) {
        task.fine_data = has_query ? merge(task.episode.support, task.episode.query) : task.episode.support;
        task.meta_data = task.fine_data;
      } else {
        task.fine_data = task.episode.support;
        task.meta_data = has_query ? task.episode.query : task.episode.support;
      }
      task.seed = pick.seed;
      task.theta = random_theta0(task.episode.image_shape(), derive_seed(pick.seed, 0), cfg.theta0_sigma);
      task.state = FineTunerState::zeros(task.theta.numel());
      tasks.push_back(std::move(task));
    }
    for (std::size_t w = 0; w < windows && t < cfg.T; ++w) {
      const FineTunerParams phi = FineTunerParams::from_tensors(params, res.phi.out_scale);
      const auto results = parallel_map<WindowResult>(tasks.size(), cfg.jobs, [&](std::size_t i) {
        try {
          return run_window(phi, tasks[i], w * cfg.truncation + 1, cfg);
        } catch (const NonFiniteError& e) {
          throw DivergenceError("task " + std::to_string(i) + " diverged at meta-step " + std::to_string(t + 1) +
                                ": " + e.what());
        } catch (const DivergenceError& e) {
          throw DivergenceError("task " + std::to_string(i) + " at meta-step " + std::to_string(t + 1) + ": " +
                                e.what());
        }
      });
      std::vector<Tensor> total;
      double loss = 0.0;
      for (std::size_t i = 0; i < results.size(); ++i) {
        check_finite_grads(results[i].grads, i, t + 1);
        accumulate(total, results[i].grads);
        loss += results[i].loss;
        tasks[i].theta = results[i].theta;
        tasks[i].state = results[i].state;
      }
      opt.step(params, total);
      ++t;
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.log.push_back({t, loss / static_cast<double>(tasks.size()), wall, norm_of(total)});
    }
  }
  res.phi = FineTunerParams::from_tensors(params, res.phi.out_scale);
  return res;
}

}  // namespace detail

/// Learned fine-tuner: fine-tune on support, meta-objective on query.
inline LftResult meta_train_lft(const EpisodeStream& stream, const MetaConfig& cfg,
                                const FineTunerParams* init = nullptr) {
  return detail::meta_train_lstm(stream, cfg, false, init);
}

/// Learning-to-optimize baseline: support ∪ query at both levels.
inline LftResult meta_train_l2o(const EpisodeStream& stream, const MetaConfig& cfg,
                                const FineTunerParams* init = nullptr) {
  return detail::meta_train_lstm(stream, cfg, true, init);
}

/// Meta-learned perturbation initializations. A plain MAML result holds one
/// entry that serves every source of its shape (`any_source`); an ensemble
/// holds one entry per source id.
struct MamlInit {
  std::vector<std::pair<std::string, Tensor>> by_source;
  bool any_source = false;

  const Tensor& for_source(const std::string& source_id) const {
    if (any_source && !by_source.empty()) return by_source.front().second;
    for (const auto& [id, t] : by_source)
      if (id == source_id) return t;
    std::string known;
    for (const auto& [id, t] : by_source) known += (known.empty() ? "" : ", ") + id;
    throw DispatchError("no initialization for source '" + source_id + "' (known: " + known + ")");
  }

  NamedTensors named() const {
    NamedTensors out;
    for (const auto& [id, t] : by_source) out.emplace_back(any_source ? "maml.init" : "maml.init." + id, t);
    return out;
  }

  static MamlInit from_named(const NamedTensors& nt) {
    MamlInit m;
    for (const auto& [name, t] : nt) {
      if (name == "maml.init") {
        m.any_source = true;
        m.by_source.emplace_back("*", t);
      } else if (name.rfind("maml.init.", 0) == 0) {
        m.by_source.emplace_back(name.substr(10), t);
      }
    }
    if (m.by_source.empty()) throw CheckpointError(CheckpointError::Kind::kMalformed, "checkpoint holds no MAML initialization");
    return m;
  }
};

struct MamlResult {
  MamlInit init;
  std::vector<MetaLogRow> log;
};

/// Throws IncompatibleTasksError unless every source shares one image shape.
inline ImageShape require_congruous(const EpisodeStream& stream) {
  if (stream.sources.empty()) throw InvalidArgument("stream has no sources");
  const ImageShape s0 = stream.sources.front().pool.shape();
  for (const auto& src : stream.sources) {
    if (!(src.pool.shape() == s0)) {
      throw IncompatibleTasksError("MAML shares one perturbation across tasks, but the stream mixes shapes " +
                                   s0.str() + " and " + src.pool.shape().str());
    }
  }
  return s0;
}

namespace detail {

struct MamlTaskResult {
  Tensor grad;
  double loss;
};

inline MamlTaskResult maml_task(const Tensor& theta, const FewShotEpisode& ep, const MetaConfig& cfg) {
  Tensor adapted = theta;
  if (cfg.inner_steps > 0) {
    adapted = finetune_gd(theta, ep.support, *ep.victim, cfg.inner_steps, cfg.alpha, cfg.attack).thetas.back();
  }
  const LabeledImages& outer = ep.query.size() > 0 ? ep.query : ep.support;
  const GradEstimate g = fo_gradient(adapted, outer, *ep.victim, cfg.attack);
  return {g.g, g.loss};
}

/// Runs one first-order MAML per stream in lockstep; every meta-step
/// updates each stream's initialization once.
inline MamlResult maml_lockstep(const std::vector<EpisodeStream>& streams, const std::vector<std::string>& keys,
                                const MetaConfig& cfg, bool any_source) {
  cfg.validate();
  std::vector<Tensor> inits;
  std::vector<ParamOptimizer> opts;
  std::vector<TaskSampler> samplers;
  for (std::size_t s = 0; s < streams.size(); ++s) {
    inits.push_back(Tensor::zeros(require_congruous(streams[s]).as_shape()));
    opts.emplace_back(cfg.optimizer, cfg.beta);
    samplers.emplace_back(cfg);
  }
  MamlResult res;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t t = 1; t <= cfg.T; ++t) {
    double loss = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < streams.size(); ++s) {
      const auto picks = samplers[s].next();
      const auto results = parallel_map<MamlTaskResult>(picks.size(), cfg.jobs, [&](std::size_t i) {
        try {
          return maml_task(inits[s], sample_episode(streams[s], picks[i].index), cfg);
        } catch (const NonFiniteError& e) {
          throw DivergenceError("task " + std::to_string(i) + " diverged at meta-step " + std::to_string(t) + ": " +
                                e.what());
        }
      });
      std::vector<Tensor> total;
      for (std::size_t i = 0; i < results.size(); ++i) {
        check_finite_grads({results[i].grad}, i, t);
        accumulate(total, {results[i].grad});
        loss += results[i].loss;
        ++count;
      }
      sq += std::pow(norm_of(total), 2);
      std::vector<Tensor> p{inits[s]};
      opts[s].step(p, total);
      inits[s] = p[0];
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back({t, loss / static_cast<double>(count), wall, std::sqrt(sq)});
  }
  res.init.any_source = any_source;
  for (std::size_t s = 0; s < streams.size(); ++s) res.init.by_source.emplace_back(keys[s], inits[s]);
  return res;
}

}  // namespace detail

/// First-order MAML over a stream whose sources share one image shape.
inline MamlResult meta_train_maml(const EpisodeStream& stream, const MetaConfig& cfg) {
  require_congruous(stream);
  return detail::maml_lockstep({stream}, {"*"}, cfg, true);
}

/// Splits a multi-source stream into one single-source stream per source.
inline std::vector<EpisodeStream> per_source_streams(const EpisodeStream& stream) {
  std::vector<EpisodeStream> out;
  for (std::size_t s = 0; s < stream.sources.size(); ++s) {
    EpisodeStream one;
    one.sources = {stream.sources[s]};
    one.global_seed = derive_seed(stream.global_seed, s);
    one.shape = stream.shape;
    out.push_back(std::move(one));
  }
  return out;
}

/// One first-order MAML per source; the result dispatches on source id.
inline MamlResult meta_train_ensemble_maml(const std::vector<EpisodeStream>& per_source, const MetaConfig& cfg) {
  if (per_source.empty()) throw InvalidArgument("ensemble MAML needs at least one source stream");
  std::vector<std::string> keys;
  for (const auto& s : per_source) {
    if (s.sources.size() != 1) throw InvalidArgument("ensemble MAML expects exactly one source per stream");
    const std::string& id = s.sources.front().pool.source_id;
    for (const auto& k : keys)
      if (k == id) throw InvalidArgument("duplicate source id '" + id + "' in ensemble");
    keys.push_back(id);
  }
  return detail::maml_lockstep(per_source, keys, cfg, false);
}

}  // namespace muap
