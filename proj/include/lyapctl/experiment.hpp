// Experiment runner behind the command line: single training runs, sweeps over (algo, seed) pairs
// and checkpoint evaluation, with their CSV and summary outputs.
#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lyapctl/config.hpp"
#include "lyapctl/metrics.hpp"
#include "lyapctl/train.hpp"

namespace lyapctl {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitDivergence = 2, kExitPartial = 3 };

namespace fs = std::filesystem;

struct RunOutcome {
  Algo algo = Algo::mtlhrl;
  std::uint64_t seed = 0;
  fs::path dir;
  bool failed = false;  // exception during the run
  bool diverged = false;
  std::string message;
  std::vector<EpisodeRecord> records;
  EvalResult eval;
  double random_return = 0.0;
  double best_return = 0.0;
  std::vector<double> kl;  // per accepted actor update
  double lambda_min = 0.0;
  double seconds = 0.0;
};

inline std::string run_id(const std::string& env, Algo algo, std::uint64_t seed) {
  return env + "-" + to_string(algo) + "-s" + std::to_string(seed);
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

inline nlohmann::json eval_json(const EvalResult& e) {
  return {{"rollouts", e.rollouts.size()},   {"iae", e.iae},
          {"ise", e.ise},                    {"final_norm_err", e.final_norm_err},
          {"mean_reward", e.mean_reward},    {"max_mean_sq_norm", e.max_mean_sq},
          {"initial_sq_norm", e.initial_sq}, {"truncated_rollouts", e.truncated}};
}

/// Fraction of measured KL values at or below `bound`.
inline double kl_compliance(const std::vector<double>& kls, double bound) {
  if (kls.empty()) return 1.0;
  std::size_t ok = 0;
  for (double k : kls) ok += k <= bound;
  return static_cast<double>(ok) / static_cast<double>(kls.size());
}

/// Trains one (algo, seed), evaluates the final policy and writes records.csv, summary.json,
/// checkpoint.txt and config.cfg into dir.
inline RunOutcome run_training(const ExperimentConfig& cfg, Algo algo, std::uint64_t seed, const fs::path& dir) {
  RunOutcome out;
  out.algo = algo;
  out.seed = seed;
  out.dir = dir;
  const TaskSpec task = make_task(cfg.env, cfg.env_overrides);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  fs::create_directories(dir);

  ExperimentConfig resolved = cfg;
  resolved.algos = {algo};
  resolved.seeds = {seed};
  resolved.train.seed = seed;
  {
    std::ostringstream s;
    write_resolved_config(s, resolved);
    write_text(dir / "config.cfg", s.str());
  }

  const auto start = std::chrono::steady_clock::now();
  TrainResult res = train(algo, task, tc);
  out.kl = res.kl_measurements;
  out.lambda_min = res.lambda_min;
  out.diverged = res.diverged;
  out.message = res.diagnostic;
  const double horizon = tc.train_horizon > 0.0 ? tc.train_horizon : task.horizon;
  RngStream base_rng(seed, 6);
  out.random_return = tc.baseline_episodes ? random_baseline(task, base_rng, tc.baseline_episodes, horizon) : 0.0;
  out.best_return = best_smoothed_return(res.records);
  if (!res.records.empty() && out.best_return > out.random_return)
    normalize_records(res.records, out.random_return, out.best_return);
  RngStream eval_rng(seed, 7);
  out.eval = evaluate(res.agent, task, eval_rng, cfg.eval_rollouts);
  out.records = res.records;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  {
    std::ostringstream s;
    write_records(s, res.records, to_string(algo), seed);
    write_text(dir / "records.csv", s.str());
  }
  {
    std::ostringstream s;
    write_checkpoint(s, res);
    write_text(dir / "checkpoint.txt", s.str());
  }
  double viol = 0.0;
  for (const auto& r : res.records) viol += r.violation_rate;
  nlohmann::json j;
  j["env"] = cfg.env;
  j["algo"] = to_string(algo);
  j["seed"] = seed;
  j["episodes_completed"] = res.records.size();
  j["updates"] = res.updates;
  j["diverged"] = res.diverged;
  j["diagnostic"] = res.diagnostic;
  j["eval"] = eval_json(out.eval);
  j["lambda_final"] = res.lagrange.lambda;
  j["lambda_min"] = res.lambda_min;
  j["lambda_step_halvings"] = res.lagrange.halvings;
  j["mean_violation_rate"] = res.records.empty() ? 0.0 : viol / static_cast<double>(res.records.size());
  j["kl_measurements"] = res.kl_measurements.size();
  j["kl_max"] = res.kl_measurements.empty()
                    ? 0.0
                    : *std::max_element(res.kl_measurements.begin(), res.kl_measurements.end());
  j["kl_within_1.2_delta"] = kl_compliance(res.kl_measurements, 1.2 * tc.delta_kl);
  j["trust_region_rejections"] = res.trust_region_rejections;
  j["random_baseline_return"] = out.random_return;
  j["best_smoothed_return"] = out.best_return;
  if (std::isfinite(res.pretrain_rel_error)) j["pretrain_rel_error"] = res.pretrain_rel_error;
  if (std::isfinite(res.bc_loss)) j["warm_start_loss"] = res.bc_loss;
  write_text(dir / "summary.json", j.dump(2) + "\n");
  return out;
}

inline int cmd_train(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  const Algo algo = cfg.algos.front();
  const std::uint64_t seed = cfg.seeds.front();
  const fs::path dir = fs::path(cfg.output_dir) / run_id(cfg.env, algo, seed);
  const RunOutcome r = run_training(cfg, algo, seed, dir);
  log << "train " << to_string(algo) << " seed " << seed << ": eval IAE " << r.eval.iae << ", ISE " << r.eval.ise
      << " -> " << dir.string() << '\n';
  if (r.diverged) {
    log << r.message << '\n';
    return kExitDivergence;
  }
  return kExitOk;
}

struct SweepResult {
  std::vector<RunOutcome> runs;
  double random_return = 0.0;
  double best_return = 0.0;
  int exit_code = kExitOk;
};

inline std::vector<double> smoothed_norm(const std::vector<EpisodeRecord>& rs, std::size_t window = 10) {
  std::vector<double> v;
  for (const auto& r : rs) v.push_back(r.norm_reward);
  return v.empty() ? v : smooth(v, window);
}

/// Runs every (algo, seed) pair with up to cfg.parallel workers, then writes table.csv,
/// curves.csv, metrics.csv and sweep.json into cfg.output_dir.
inline SweepResult run_sweep(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  SweepResult sw;
  std::vector<std::pair<Algo, std::uint64_t>> jobs;
  for (Algo a : cfg.algos)
    for (std::uint64_t s : cfg.seeds) jobs.emplace_back(a, s);
  sw.runs.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto [algo, seed] = jobs[i];
      const fs::path dir = fs::path(cfg.output_dir) / run_id(cfg.env, algo, seed);
      RunOutcome r;
      try {
        r = run_training(cfg, algo, seed, dir);
      } catch (const std::exception& e) {
        r.algo = algo;
        r.seed = seed;
        r.dir = dir;
        r.failed = true;
        r.message = e.what();
      }
      {
        std::lock_guard<std::mutex> lock(log_mu);
        log << "sweep " << to_string(algo) << " seed " << seed << ": "
            << (r.failed ? "failed: " + r.message
                         : "eval IAE " + csv::format_double(r.eval.iae) + (r.diverged ? " (diverged)" : ""))
            << '\n';
      }
      sw.runs[i] = std::move(r);
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(cfg.parallel, jobs.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // Sweep-wide normalization: mean random baseline, best smoothed return over all runs.
  std::size_t ok_runs = 0;
  sw.best_return = -std::numeric_limits<double>::infinity();
  for (const auto& r : sw.runs) {
    if (r.failed) continue;
    sw.random_return += r.random_return;
    sw.best_return = std::max(sw.best_return, r.best_return);
    ++ok_runs;
  }
  if (ok_runs) sw.random_return /= static_cast<double>(ok_runs);
  const bool can_normalize = ok_runs > 0 && sw.best_return > sw.random_return;
  for (auto& r : sw.runs)
    if (!r.failed && can_normalize && !r.records.empty()) normalize_records(r.records, sw.random_return, sw.best_return);

  fs::create_directories(cfg.output_dir);
  std::vector<MetricRow> rows;
  for (const auto& r : sw.runs)
    for (const auto& e : r.records)
      rows.push_back({e.episode, to_string(r.algo), r.seed, e.iae, e.ise, e.final_norm_err, e.mean_reward,
                      e.norm_reward});
  {
    std::ostringstream s;
    write_metric_rows(s, rows);
    write_text(fs::path(cfg.output_dir) / "metrics.csv", s.str());
  }
  nlohmann::json summary;
  summary["env"] = cfg.env;
  summary["random_baseline_return"] = sw.random_return;
  summary["best_smoothed_return"] = sw.best_return;
  std::ostringstream table, curves;
  table << "algo,median_iae,median_ise\n";
  curves << "episode,algo,median_norm_reward\n";
  for (Algo a : cfg.algos) {
    std::vector<double> iaes, ises, finals;
    std::vector<std::vector<double>> sm;
    nlohmann::json ja;
    for (const auto& r : sw.runs) {
      if (r.algo != a || r.failed) continue;
      iaes.push_back(r.eval.iae);
      ises.push_back(r.eval.ise);
      sm.push_back(smoothed_norm(r.records));
      if (!sm.back().empty()) finals.push_back(sm.back().back());
      ja["max_mean_sq_over_initial"].push_back(r.eval.max_mean_sq / r.eval.initial_sq);
    }
    if (iaes.empty()) continue;
    const std::string name = to_string(a);
    csv::write_row(table, std::vector<std::string>{name, csv::format_double(median(iaes)), csv::format_double(median(ises))});
    std::size_t len = 0;
    for (const auto& c : sm) len = std::max(len, c.size());
    for (std::size_t e = 0; e < len; ++e) {
      std::vector<double> at;
      for (const auto& c : sm)
        if (!c.empty()) at.push_back(c[std::min(e, c.size() - 1)]);  // diverged runs hold their last value
      csv::write_row(curves, std::vector<std::string>{std::to_string(e), name, csv::format_double(median(at))});
    }
    ja["median_iae"] = median(iaes);
    ja["median_ise"] = median(ises);
    ja["iae"] = iaes;
    if (!finals.empty()) ja["final_median_norm_reward"] = median(finals);
    summary["algos"][name] = ja;
  }
  write_text(fs::path(cfg.output_dir) / "table.csv", table.str());
  write_text(fs::path(cfg.output_dir) / "curves.csv", curves.str());
  for (const auto& r : sw.runs)
    if (r.failed || r.diverged) {
      summary["failures"].push_back({{"algo", to_string(r.algo)}, {"seed", r.seed}, {"message", r.message}});
      sw.exit_code = kExitPartial;
    }
  write_text(fs::path(cfg.output_dir) / "sweep.json", summary.dump(2) + "\n");
  return sw;
}

inline int cmd_sweep(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  return run_sweep(cfg, log).exit_code;
}

/// Loads a checkpoint, rolls out the deterministic policy for each seed and writes
/// trajectory_s<seed>.csv, metrics.csv and evaluate.json into output_dir. Nothing is written
/// unless the checkpoint loads and matches the task.
inline int cmd_evaluate(const std::string& checkpoint, const ExperimentConfig& cfg, std::ostream& log = std::cout,
                        std::ostream& err = std::cerr) {
  std::ifstream in(checkpoint);
  if (!in) {
    err << "evaluate: cannot open checkpoint '" << checkpoint << "'\n";
    return kExitConfig;
  }
  TrainResult ck;
  TaskSpec task;
  try {
    ck = read_checkpoint(in);
    task = make_task(cfg.env, cfg.env_overrides);
  } catch (const std::exception& e) {
    err << "evaluate: " << e.what() << '\n';
    return kExitConfig;
  }
  if (ck.agent.state_dim() != task.model.state_dim || ck.agent.action_dim() != task.model.action_dim) {
    err << "evaluate: checkpoint dims (state " << ck.agent.state_dim() << ", action " << ck.agent.action_dim()
        << ") do not match env '" << cfg.env << "' dims (state " << task.model.state_dim << ", action "
        << task.model.action_dim << ")\n";
    return kExitConfig;
  }
  fs::create_directories(cfg.output_dir);
  std::vector<MetricRow> rows;
  nlohmann::json j;
  j["checkpoint"] = checkpoint;
  j["env"] = cfg.env;
  for (std::uint64_t seed : cfg.seeds) {
    RngStream rng(seed, 7);
    const EvalResult ev = evaluate(ck.agent, task, rng, cfg.eval_rollouts);
    const std::size_t len = ev.rollouts.front().errors.times.size();
    const std::size_t n = task.model.state_dim;
    std::ostringstream s;
    s << "time,mean_norm_err";
    for (std::size_t i = 0; i < n; ++i) s << ",e" << i;
    s << '\n';
    std::vector<double> norms;
    for (std::size_t k = 0; k < len; ++k) {
      double m = 0.0;
      Vector mean_e(n, 0.0);
      for (const auto& ro : ev.rollouts) {
        m += norm2(ro.errors.errors[k]);
        for (std::size_t i = 0; i < n; ++i) mean_e[i] += ro.errors.errors[k][i];
      }
      const double r = static_cast<double>(ev.rollouts.size());
      norms.push_back(m / r);
      std::vector<std::string> cells{csv::format_double(ev.rollouts.front().errors.times[k]),
                                     csv::format_double(m / r)};
      for (double v : mean_e) cells.push_back(csv::format_double(v / r));
      csv::write_row(s, cells);
    }
    write_text(fs::path(cfg.output_dir) / ("trajectory_s" + std::to_string(seed) + ".csv"), s.str());
    rows.push_back({0, to_string(ck.algo), seed, ev.iae, ev.ise, ev.final_norm_err, ev.mean_reward, 0.0});
    nlohmann::json js = eval_json(ev);
    js["seed"] = seed;
    js["error_norm_decaying"] = is_decaying(norms, 10, 0.05);
    j["seeds"].push_back(js);
    log << "evaluate seed " << seed << ": IAE " << ev.iae << ", ISE " << ev.ise << '\n';
  }
  {
    std::ostringstream s;
    write_metric_rows(s, rows);
    write_text(fs::path(cfg.output_dir) / "metrics.csv", s.str());
  }
  write_text(fs::path(cfg.output_dir) / "evaluate.json", j.dump(2) + "\n");
  return kExitOk;
}

}  // namespace lyapctl
