// SPDX-License-Identifier: Apache-2.0
//
// muap_bench: train victims, meta-train fine-tuners and initializations,
// meta-test them on held-out few-shot UAP tasks, and run the verification
// checks. Exit codes: 0 success, 1 runtime failure, 2 usage error.
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "muap/evaluation.hpp"
#include "muap/meta_engine.hpp"
#include "muap/sources.hpp"
#include "muap/verify.hpp"

#ifndef MUAP_VERSION
#define MUAP_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace muap;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

json manifest(const std::string& command, const json& config, const json& design, const std::string& started,
              const Clock& clock) {
  json m;
  m["command"] = command;
  m["version"] = MUAP_VERSION;
  m["config"] = config;
  m["design"] = design;
  m["started_at"] = started;
  m["wall_seconds"] = clock.seconds();
  return m;
}

json attack_json(const AttackConfig& a) {
  return {{"lambda", a.lambda},
          {"kappa", a.kappa},
          {"pixel_clip", a.pixel_clip},
          {"zo_pixel_clip", a.zo_pixel_clip},
          {"loss", "sum of C&W margins over the split + lambda * mean|theta|"},
          {"l1_convention", "mean absolute pixel value"}};
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

template <class F>
auto as_usage(F&& f) {
  try {
    return f();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  } catch (const ShapeError& e) {
    throw UsageError(e.what());
  }
}

// Sources and their victims --------------------------------------------------

struct SourceOptions {
  std::string sources;
  std::string victims;
  std::uint64_t data_seed = 7;
  std::size_t n_way = 2, shots = 2, query_shots = 2;
};

void add_source_options(CLI::App* app, SourceOptions& o) {
  app->add_option("--sources", o.sources, "comma-separated source specs")->required();
  app->add_option("--victims", o.victims, "comma-separated victim checkpoints, one per source (default: train)");
  app->add_option("--data-seed", o.data_seed, "seed for synthetic data and on-the-fly victims");
  app->add_option("--n-way", o.n_way, "classes per episode");
  app->add_option("--shots", o.shots, "support images per class");
  app->add_option("--query-shots", o.query_shots, "query images per class");
}

struct BuiltSources {
  std::vector<EpisodeSource> meta_train, meta_test;
  json echo;
};

BuiltSources build_sources(const SourceOptions& o) {
  const auto specs = as_usage([&] {
    std::vector<SourceSpec> out;
    for (const auto& s : split_source_list(o.sources)) out.push_back(parse_source_spec(s));
    return out;
  });
  if (specs.empty()) throw UsageError("--sources is empty");
  const auto victim_paths = split_list(o.victims);
  if (!victim_paths.empty() && victim_paths.size() != specs.size()) {
    throw UsageError("--victims lists " + std::to_string(victim_paths.size()) + " checkpoints for " +
                     std::to_string(specs.size()) + " sources");
  }
  BuiltSources b;
  b.echo = json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const SourceData d = load_source(specs[i], o.data_seed);
    auto victim = std::make_shared<const VictimModel>(victim_paths.empty() ? train_default_victim(d, o.data_seed)
                                                                           : load_checkpoint(victim_paths[i]));
    SourceSplit split = split_source(d, victim, o.data_seed);
    b.meta_train.push_back(std::move(split.meta_train));
    b.meta_test.push_back(std::move(split.meta_test));
    b.echo.push_back({{"spec", specs[i].text},
                      {"source_id", d.pool.source_id},
                      {"shape", d.pool.shape().str()},
                      {"victim", victim_paths.empty() ? std::string("trained:") + arch_name(victim->arch.kind)
                                                      : victim_paths[i]},
                      {"victim_train_accuracy", victim->train_accuracy}});
  }
  return b;
}

EpisodeStream stream_for(const std::vector<EpisodeSource>& sources, const SourceOptions& o, std::uint64_t seed) {
  return make_stream(sources, seed, {o.n_way, o.shots, o.query_shots});
}

// train-victim ---------------------------------------------------------------

struct TrainVictimOptions {
  std::string arch = "mlp_tiny";
  std::string synth, source;
  VictimTraining training;
  std::string out;
};

int cmd_train_victim(const TrainVictimOptions& o) {
  const Clock clock;
  const std::string started = utc_now();
  if (o.synth.empty() == o.source.empty()) throw UsageError("give exactly one of --synth or --source");
  const SourceSpec spec = as_usage([&] { return parse_source_spec(o.synth.empty() ? o.source : "synth" + o.synth); });
  const ArchKind kind = as_usage([&] { return parse_arch(o.arch); });
  const SourceData d = load_source(spec, o.training.seed);
  const VictimArch arch = as_usage([&] { return VictimArch(kind, d.victim_data.shape(), d.victim_data.num_classes); });
  const VictimModel m = train_victim(arch, d.victim_data, o.training);
  if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
  save_checkpoint(m, o.out);
  const json config = {{"arch", o.arch},
                       {"source", spec.text},
                       {"epochs", o.training.epochs},
                       {"lr", o.training.lr},
                       {"batch", o.training.batch},
                       {"seed", o.training.seed}};
  json design = {{"init", "uniform +-1/sqrt(fan_in)"}, {"optimizer", "minibatch SGD on softmax cross-entropy"}};
  json man = manifest("train-victim", config, design, started, clock);
  man["train_accuracy"] = m.train_accuracy;
  write_json(o.out + ".manifest.json", man);
  std::cout << "train_accuracy " << fmt("%.4f", m.train_accuracy) << "\n";
  return 0;
}

// meta-train -----------------------------------------------------------------

struct MetaOptions {
  SourceOptions src;
  std::string method = "lft";
  MetaConfig cfg;
  std::string weights = "last-only", grad_mode = "fo", optimizer = "adam";
  std::string out_dir;
};

void add_meta_options(CLI::App* app, MetaOptions& o) {
  add_source_options(app, o.src);
  app->add_option("--method", o.method, "lft, l2o, maml or ensemble-maml");
  app->add_option("--T", o.cfg.T, "meta-updates");
  app->add_option("--K", o.cfg.K, "fine-tuning steps per task");
  app->add_option("--truncation", o.cfg.truncation, "BPTT window (divides K)");
  app->add_option("--tasks", o.cfg.n_tasks, "number of distinct meta-training tasks");
  app->add_option("--batch-tasks", o.cfg.batch_tasks, "tasks per meta-update");
  app->add_option("--beta", o.cfg.beta, "meta learning rate");
  app->add_option("--optimizer", o.optimizer, "adam or sgd");
  app->add_option("--weights", o.weights, "uniform, linear or last-only");
  app->add_option("--grad-mode", o.grad_mode, "fo or zo");
  app->add_option("--zo-dirs", o.cfg.signal.zo.n_dirs, "ZO random directions");
  app->add_option("--zo-mu", o.cfg.signal.zo.mu, "ZO smoothing radius");
  app->add_option("--lambda", o.cfg.attack.lambda, "l1 weight");
  app->add_option("--kappa", o.cfg.attack.kappa, "C&W confidence");
  app->add_option("--out-scale", o.cfg.out_scale, "LSTM output scale");
  app->add_option("--alpha", o.cfg.alpha, "MAML inner GD rate");
  app->add_option("--inner-steps", o.cfg.inner_steps, "MAML inner steps during meta-training");
  app->add_option("--seed", o.cfg.seed, "run seed");
  app->add_option("--jobs", o.cfg.jobs, "worker threads");
  app->add_option("--out-dir", o.out_dir, "output directory")->required();
}

json meta_config_json(const MetaOptions& o) {
  const MetaConfig& c = o.cfg;
  return {{"method", o.method},
          {"T", c.T},
          {"K", c.K},
          {"truncation", c.truncation},
          {"tasks", c.n_tasks},
          {"batch_tasks", c.batch_tasks},
          {"beta", c.beta},
          {"optimizer", optimizer_name(c.optimizer)},
          {"weights", weighting_name(c.weights)},
          {"grad_mode", grad_mode_name(c.signal.mode)},
          {"zo_dirs", c.signal.zo.n_dirs},
          {"zo_mu", c.signal.zo.mu},
          {"out_scale", c.out_scale},
          {"theta0_sigma", c.theta0_sigma},
          {"alpha", c.alpha},
          {"inner_steps", c.inner_steps},
          {"seed", c.seed},
          {"data_seed", o.src.data_seed},
          {"episode_shape", {{"n_way", o.src.n_way}, {"shots", o.src.shots}, {"query_shots", o.src.query_shots}}},
          {"attack", attack_json(c.attack)}};
}

json design_json() {
  return {{"gradient_input", "detached before entering the LSTM (no second-order terms)"},
          {"lstm_input", "raw gradient coordinate"},
          {"lstm_update", "theta <- theta - out_scale * (proj_w . h + proj_b)"},
          {"bptt", "theta and LSTM state detached at window edges; one meta-update per window"},
          {"window_weights", "w_k indexed within each window"},
          {"maml", "first-order"},
          {"meta_reduction", "per-task gradients summed in task-index order"}};
}

void finalize_meta(MetaOptions& o) {
  as_usage([&] {
    o.cfg.weights = parse_weighting(o.weights);
    o.cfg.signal.mode = parse_grad_mode(o.grad_mode);
    o.cfg.optimizer = parse_optimizer(o.optimizer);
    (void)parse_method(o.method);
    o.cfg.validate();
    return 0;
  });
}

void write_log(const fs::path& p, const std::vector<MetaLogRow>& log) {
  std::ostringstream os;
  os << "step,meta_loss,wall_seconds,grad_norm\n";
  char buf[160];
  for (const MetaLogRow& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.3f,%.9g\n", r.step, r.meta_loss, r.wall_seconds, r.grad_norm);
    os << buf;
  }
  write_text(p, os.str());
}

int cmd_meta_train(MetaOptions& o) {
  const Clock clock;
  const std::string started = utc_now();
  finalize_meta(o);
  const BuiltSources b = build_sources(o.src);
  const EpisodeStream stream = stream_for(b.meta_train, o.src, derive_seed(o.cfg.seed, kTrainStreamTag));
  const MetaMethod method = parse_method(o.method);
  NamedTensors artifact;
  std::vector<MetaLogRow> log;
  switch (method) {
    case MetaMethod::kLft:
    case MetaMethod::kL2o: {
      const LftResult r = method == MetaMethod::kLft ? meta_train_lft(stream, o.cfg) : meta_train_l2o(stream, o.cfg);
      artifact = r.phi.named();
      log = r.log;
      break;
    }
    case MetaMethod::kMaml:
    case MetaMethod::kEnsembleMaml: {
      const MamlResult r = method == MetaMethod::kMaml ? meta_train_maml(stream, o.cfg)
                                                       : meta_train_ensemble_maml(per_source_streams(stream), o.cfg);
      artifact = r.init.named();
      log = r.log;
      break;
    }
  }
  fs::create_directories(o.out_dir);
  save_tensors(fs::path(o.out_dir) / "artifact.ckpt", artifact);
  write_log(fs::path(o.out_dir) / "train_log.csv", log);
  json config = meta_config_json(o);
  config["sources"] = b.echo;
  write_json(fs::path(o.out_dir) / "manifest.json", manifest("meta-train", config, design_json(), started, clock));
  std::cout << "meta-train " << o.method << ": " << log.size() << " meta-updates";
  if (!log.empty()) std::cout << ", final meta-loss " << fmt("%.4f", log.back().meta_loss);
  std::cout << "\n";
  return 0;
}

// meta-test ------------------------------------------------------------------

struct TestOptions {
  SourceOptions src;
  std::string method = "lft";
  std::string artifact;
  std::size_t episodes = 100, steps = 200;
  double eps_inf = 0.5, pgd_step = 0.01, alpha = 0.002;
  std::string grad_mode = "fo";
  std::size_t zo_dirs = 20;
  double zo_mu = 0.01;
  AttackConfig attack;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string out_dir;
};

json nullable(const CurvePoint* p, double CurvePoint::*field) { return p ? json(p->*field) : json(nullptr); }

json report_json(const RunReport& r) {
  json j;
  j["schema_version"] = kCurveCsvVersion;
  j["method"] = r.method;
  j["episodes"] = r.episodes;
  j["max_steps"] = r.max_steps;
  const CurvePoint *p50 = r.at(50), *p100 = r.at(100);
  const CurvePoint* last = r.curve.empty() ? nullptr : &r.curve.back();
  j["query_asr_at_50"] = {{"mean", nullable(p50, &CurvePoint::mean_asr)}, {"std", nullable(p50, &CurvePoint::std_asr)}};
  j["query_asr_at_100"] = {{"mean", nullable(p100, &CurvePoint::mean_asr)}, {"std", nullable(p100, &CurvePoint::std_asr)}};
  j["best_query_asr_within_100"] = r.curve.empty() ? json(nullptr) : json(r.best_asr_within(100));
  j["l1_at_100"] = nullable(p100, &CurvePoint::mean_l1);
  const auto full = r.steps_to_full();
  j["steps_to_100"] = full ? json(*full) : json("N/A");
  const auto best = r.steps_to_best();
  j["steps_to_best"] = best ? json(*best) : json(nullptr);
  j["final_query_asr"] = nullable(last, &CurvePoint::mean_asr);
  j["final_support_asr"] = nullable(last, &CurvePoint::mean_support_asr);
  std::map<std::string, std::pair<std::size_t, double>> by_source;
  for (const EpisodeCurve& c : r.per_episode) {
    auto& [count, total] = by_source[c.source_id];
    ++count;
    total += c.asr.back();
  }
  json per_source = json::object();
  for (const auto& [id, acc] : by_source)
    per_source[id] = {{"episodes", acc.first}, {"final_query_asr", acc.second / static_cast<double>(acc.first)}};
  j["per_source"] = per_source;
  json eps = json::array();
  for (const EpisodeCurve& c : r.per_episode)
    eps.push_back({{"source_id", c.source_id}, {"asr", c.asr}, {"l1", c.l1}, {"loss", c.loss}});
  j["per_episode"] = eps;
  return j;
}

int cmd_meta_test(TestOptions& o) {
  const Clock clock;
  const std::string started = utc_now();
  const std::string method = o.method;
  if (method != "pgd") as_usage([&] { return parse_method(method); });
  if (method != "pgd" && o.artifact.empty()) throw UsageError("--artifact is required for method " + method);
  if (o.steps < 1) throw UsageError("--steps must be positive");
  as_usage([&] {
    o.attack.validate();
    return 0;
  });
  const BuiltSources b = build_sources(o.src);
  const EpisodeStream stream = stream_for(b.meta_test, o.src, derive_seed(o.seed, kTestStreamTag));

  EpisodeRunner runner;
  json method_cfg;
  if (method == "pgd") {
    PgdConfig p;
    p.steps = o.steps;
    p.eps_inf = o.eps_inf;
    p.step_size = o.pgd_step;
    runner = pgd_runner(p, nullptr, o.attack);
    method_cfg = {{"eps_inf", p.eps_inf}, {"step_size", p.step_size}, {"keep_best", p.keep_best}};
  } else if (method == "lft" || method == "l2o") {
    const FineTunerParams phi = FineTunerParams::from_named(load_tensors(o.artifact));
    FineTuneSetup setup;
    setup.attack = o.attack;
    setup.signal.mode = as_usage([&] { return parse_grad_mode(o.grad_mode); });
    setup.signal.zo.n_dirs = o.zo_dirs;
    setup.signal.zo.mu = o.zo_mu;
    runner = lstm_runner(phi, o.steps, setup);
    method_cfg = {{"artifact", o.artifact}, {"grad_mode", o.grad_mode}, {"out_scale", phi.out_scale}};
  } else {
    const MamlInit init = MamlInit::from_named(load_tensors(o.artifact));
    if (method == "maml" && !init.any_source) throw UsageError("artifact holds an ensemble; use --method ensemble-maml");
    if (method == "ensemble-maml" && init.any_source) throw UsageError("artifact holds a single MAML; use --method maml");
    runner = maml_runner(init, o.steps, o.alpha, o.attack);
    method_cfg = {{"artifact", o.artifact}, {"alpha", o.alpha}};
  }
  const RunReport rep = evaluate(method, stream, o.episodes, o.steps, runner, o.attack, o.seed, o.jobs);

  fs::create_directories(o.out_dir);
  write_json(fs::path(o.out_dir) / "report.json", report_json(rep));
  std::ostringstream csv;
  write_curve_csv(csv, rep);
  write_text(fs::path(o.out_dir) / "curve.csv", csv.str());
  json config = {{"method", method},      {"episodes", o.episodes}, {"steps", o.steps},
                 {"seed", o.seed},        {"data_seed", o.src.data_seed},
                 {"method_config", method_cfg},
                 {"attack", attack_json(o.attack)},
                 {"episode_shape", {{"n_way", o.src.n_way}, {"shots", o.src.shots}, {"query_shots", o.src.query_shots}}},
                 {"sources", b.echo}};
  write_json(fs::path(o.out_dir) / "manifest.json", manifest("meta-test", config, design_json(), started, clock));

  if (rep.curve.empty()) {
    std::cout << "meta-test " << method << ": no episodes\n";
  } else {
    const auto full = rep.steps_to_full();
    std::cout << "meta-test " << method << ": best query ASR within 100 steps " << fmt("%.3f", rep.best_asr_within(100))
              << ", final support ASR " << fmt("%.3f", rep.curve.back().mean_support_asr) << ", final query ASR "
              << fmt("%.3f", rep.curve.back().mean_asr) << ", steps to 100% "
              << (full ? std::to_string(*full) : std::string("N/A")) << "\n";
  }
  return 0;
}

// verify ---------------------------------------------------------------------

struct VerifyOptions {
  bool quick = false;
  std::string grid;
  std::size_t repeats = 0;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
  std::string out;
};

int cmd_verify(const VerifyOptions& o) {
  std::vector<std::size_t> grid{2, 4, 8, 16, 32};
  if (!o.grid.empty()) {
    grid.clear();
    for (const auto& t : split_list(o.grid)) {
      try {
        grid.push_back(std::stoul(t));
      } catch (const std::exception&) {
        throw UsageError("--prop1-grid expects positive integers, got '" + t + "'");
      }
    }
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (grid[i] == 0 || grid[i] > 32 || (i > 0 && grid[i] <= grid[i - 1])) {
        throw UsageError("--prop1-grid must be strictly increasing within [1, 32]");
      }
    }
  }
  const std::size_t repeats = o.repeats ? o.repeats : (o.quick ? 20 : 40);

  std::vector<CheckResult> checks;
  checks.push_back(check_zo_constant(o.seed));
  checks.push_back(check_zo_linear_unbiased(10000, o.seed));
  checks.push_back(check_zo_mu_decay(o.seed));

  const ImageShape small{1, 8, 8};
  VictimTraining vt;
  vt.seed = derive_seed(o.seed, 10);
  const VictimModel fd_victim =
      train_victim(VictimArch(ArchKind::kMlpTiny, small, 2), synth_source(small, 2, 50, derive_seed(o.seed, 11)), vt);
  checks.push_back(check_meta_gradient_fd(fd_victim, synth_source(small, 2, 2, derive_seed(o.seed, 12)),
                                          synth_source(small, 2, 2, derive_seed(o.seed, 13)), o.seed));

  const ImageShape probe{1, 12, 12};
  const VictimModel gap_victim =
      train_victim(VictimArch(ArchKind::kMlpTiny, probe, 2), synth_source(probe, 2, 100, derive_seed(o.seed, 14)), vt);
  const LabeledImages pool = synth_source(probe, 2, 32, derive_seed(o.seed, 15));
  const GapChecks gap =
      check_gap_probe(pool, gap_victim, FineTunerParams::init(derive_seed(o.seed, 16)), grid, repeats, o.seed, o.jobs);
  checks.insert(checks.end(), gap.checks.begin(), gap.checks.end());

  json j;
  j["checks"] = json::array();
  bool all = true;
  for (const CheckResult& c : checks) {
    j["checks"].push_back({{"name", c.name}, {"measured", c.measured}, {"tolerance", c.tolerance}, {"pass", c.pass}});
    all = all && c.pass;
  }
  json pts = json::array();
  for (const GapPoint& p : gap.report.points) {
    pts.push_back({{"d_tr", p.d_tr},
                   {"d_val", p.d_val},
                   {"mean_gap", p.mean_gap},
                   {"g_hat", p.g_hat},
                   {"sigma_hat", p.sigma_hat},
                   {"bound", p.bound},
                   {"mean_grad_norm", p.mean_grad_norm}});
  }
  j["gap_probe"] = {{"grid", pts}, {"repeats", repeats}, {"K", 5}, {"pool", pool.size()}};
  j["all_pass"] = all;
  j["version"] = MUAP_VERSION;
  if (o.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(o.out, j);
    for (const CheckResult& c : checks)
      std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " measured " << fmt("%.6g", c.measured) << " ("
                << c.tolerance << ")\n";
  }
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot universal adversarial perturbations with learned fine-tuners"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(MUAP_VERSION));

  TrainVictimOptions tv;
  auto* c_tv = app.add_subcommand("train-victim", "train a victim classifier");
  c_tv->add_option("--arch", tv.arch, "mlp_tiny, lenet5_gray or lenet7_rgb");
  c_tv->add_option("--synth", tv.synth, "synthetic data <C>x<H>x<W>:<classes>:<per-class>");
  c_tv->add_option("--source", tv.source, "any source spec");
  c_tv->add_option("--epochs", tv.training.epochs);
  c_tv->add_option("--lr", tv.training.lr);
  c_tv->add_option("--batch", tv.training.batch);
  c_tv->add_option("--seed", tv.training.seed);
  c_tv->add_option("--out", tv.out, "checkpoint path")->required();

  MetaOptions mt;
  auto* c_mt = app.add_subcommand("meta-train", "meta-train a fine-tuner or initialization");
  add_meta_options(c_mt, mt);

  TestOptions te;
  auto* c_te = app.add_subcommand("meta-test", "evaluate a method on held-out episodes");
  add_source_options(c_te, te.src);
  c_te->add_option("--method", te.method, "lft, l2o, maml, ensemble-maml or pgd");
  c_te->add_option("--artifact", te.artifact, "meta-train artifact");
  c_te->add_option("--episodes", te.episodes, "held-out episodes");
  c_te->add_option("--steps", te.steps, "fine-tuning steps per episode");
  c_te->add_option("--eps", te.eps_inf, "PGD l-inf radius");
  c_te->add_option("--pgd-step", te.pgd_step, "PGD step size");
  c_te->add_option("--alpha", te.alpha, "MAML fine-tuning GD rate");
  c_te->add_option("--grad-mode", te.grad_mode, "fo or zo signal for the LSTM");
  c_te->add_option("--zo-dirs", te.zo_dirs);
  c_te->add_option("--zo-mu", te.zo_mu);
  c_te->add_option("--lambda", te.attack.lambda, "l1 weight");
  c_te->add_option("--kappa", te.attack.kappa, "C&W confidence");
  c_te->add_option("--seed", te.seed);
  c_te->add_option("--jobs", te.jobs);
  c_te->add_option("--out-dir", te.out_dir)->required();

  VerifyOptions ve;
  auto* c_ve = app.add_subcommand("verify", "run the verification checks");
  c_ve->add_flag("--quick", ve.quick, "fewer gap-probe repeats");
  c_ve->add_option("--prop1-grid", ve.grid, "comma-separated sample sizes, strictly increasing");
  c_ve->add_option("--repeats", ve.repeats, "gap-probe repeats per grid point");
  c_ve->add_option("--seed", ve.seed);
  c_ve->add_option("--jobs", ve.jobs);
  c_ve->add_option("--out", ve.out, "write the JSON here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (c_tv->parsed()) return cmd_train_victim(tv);
    if (c_mt->parsed()) return cmd_meta_train(mt);
    if (c_te->parsed()) return cmd_meta_test(te);
    if (c_ve->parsed()) return cmd_verify(ve);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
