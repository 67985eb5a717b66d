// Experiment configuration: a sectioned key = value text format with strict key checking and a
// resolved dump that materializes every default.
//
//   # comment
//   [experiment]
//   env = hyperchaotic8d
//   algos = mtlhrl, stlhrl
//   [train]
//   episodes = 200
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lyapctl/csv.hpp"
#include "lyapctl/environments.hpp"
#include "lyapctl/train.hpp"

namespace lyapctl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EnvOverrides {
  std::optional<double> horizon;
  std::optional<double> action_bound;
  std::optional<double> sensor_noise_std;
  std::optional<double> truncation_bound;
};

struct ExperimentConfig {
  std::string env = "hyperchaotic8d";
  std::vector<Algo> algos{Algo::mtlhrl};
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
  std::size_t eval_rollouts = 10;
  std::size_t parallel = 1;
  EnvOverrides env_overrides;
  TrainConfig train;
};

inline const std::vector<std::string>& env_names() {
  static const std::vector<std::string> v{"hyperchaotic8d", "manipulator5dof", "linear-test"};
  return v;
}

inline TaskSpec make_task(const std::string& env, const EnvOverrides& o = {}) {
  TaskSpec t;
  if (env == "hyperchaotic8d")
    t = hyperchaotic_task();
  else if (env == "manipulator5dof")
    t = manipulator_task();
  else if (env == "linear-test")
    t = linear_test_task();
  else
    throw ConfigError("unknown env '" + env + "'");
  if (o.horizon) t.horizon = *o.horizon;
  if (o.action_bound) t.action_bound = *o.action_bound;
  if (o.sensor_noise_std) t.sensor_noise_std = *o.sensor_noise_std;
  if (o.truncation_bound) t.truncation_bound = *o.truncation_bound;
  return t;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return d;
}

inline std::uint64_t to_count(const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError("expected a nonnegative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError("integer out of range: '" + v + "'");
  }
}

inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

inline std::string fmt(double d) { return csv::format_double(d); }

template <class T>
std::string join(const std::vector<T>& xs, std::function<std::string(const T&)> f) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ", " : "") + f(xs[i]);
  return s;
}

struct Binding {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

using BindingTable = std::vector<std::pair<std::string, Binding>>;  // "section.key", in dump order

inline BindingTable bindings(ExperimentConfig& c) {
  BindingTable t;
  auto num = [&t](const std::string& key, double& ref) {
    t.push_back({key, {[&ref](const std::string& v) { ref = to_double(v); }, [&ref] { return fmt(ref); }}});
  };
  auto count = [&t](const std::string& key, std::size_t& ref) {
    t.push_back({key,
                 {[&ref](const std::string& v) { ref = static_cast<std::size_t>(to_count(v)); },
                  [&ref] { return std::to_string(ref); }}});
  };
  auto flag = [&t](const std::string& key, bool& ref) {
    t.push_back({key, {[&ref](const std::string& v) { ref = to_bool(v); }, [&ref] { return ref ? "true" : "false"; }}});
  };
  auto opt = [&t](const std::string& key, std::optional<double>& ref) {
    t.push_back({key,
                 {[&ref](const std::string& v) {
                    if (v == "default") ref.reset();
                    else ref = to_double(v);
                  },
                  [&ref] { return ref ? fmt(*ref) : std::string("default"); }}});
  };
  auto sizes = [&t](const std::string& key, std::vector<std::size_t>& ref) {
    t.push_back({key,
                 {[&ref](const std::string& v) {
                    ref.clear();
                    for (const auto& s : split_list(v)) {
                      const auto n = static_cast<std::size_t>(to_count(s));
                      if (n == 0) throw ConfigError("layer sizes must be positive");
                      ref.push_back(n);
                    }
                  },
                  [&ref] { return join<std::size_t>(ref, [](const std::size_t& n) { return std::to_string(n); }); }}});
  };
  auto sched = [&](const std::string& name, PowerSchedule& s) {
    num("schedules." + name + "_base", s.base);
    num("schedules." + name + "_power", s.power);
  };

  t.push_back({"experiment.env",
               {[&c](const std::string& v) {
                  make_task(v);
                  c.env = v;
                },
                [&c] { return c.env; }}});
  t.push_back({"experiment.algos",
               {[&c](const std::string& v) {
                  c.algos.clear();
                  for (const auto& a : split_list(v)) {
                    try {
                      c.algos.push_back(parse_algo(a));
                    } catch (const ArgumentError& e) {
                      throw ConfigError(e.what());
                    }
                  }
                  if (c.algos.empty()) throw ConfigError("algos must list at least one algorithm");
                },
                [&c] { return join<Algo>(c.algos, [](const Algo& a) { return to_string(a); }); }}});
  t.push_back({"experiment.seeds",
               {[&c](const std::string& v) {
                  c.seeds.clear();
                  for (const auto& s : split_list(v)) c.seeds.push_back(to_count(s));
                  if (c.seeds.empty()) throw ConfigError("seeds must list at least one seed");
                  c.train.seed = c.seeds.front();
                },
                [&c] { return join<std::uint64_t>(c.seeds, [](const std::uint64_t& s) { return std::to_string(s); }); }}});
  t.push_back({"experiment.output_dir",
               {[&c](const std::string& v) {
                  if (v.empty()) throw ConfigError("output_dir must not be empty");
                  c.output_dir = v;
                },
                [&c] { return c.output_dir; }}});
  count("experiment.eval_rollouts", c.eval_rollouts);
  count("experiment.parallel", c.parallel);

  opt("env.horizon", c.env_overrides.horizon);
  opt("env.action_bound", c.env_overrides.action_bound);
  opt("env.sensor_noise_std", c.env_overrides.sensor_noise_std);
  opt("env.truncation_bound", c.env_overrides.truncation_bound);

  TrainConfig& tr = c.train;
  count("train.episodes", tr.episodes);
  num("train.train_horizon", tr.train_horizon);
  count("train.batch", tr.batch);
  count("train.high_batch", tr.high_batch);
  count("train.lyapunov_batch", tr.lyapunov_batch);
  count("train.lyapunov_every", tr.lyapunov_every);
  num("train.delta_kl", tr.delta_kl);
  count("train.kl_probe", tr.kl_probe);
  num("train.tau", tr.tau);
  num("train.grad_clip", tr.grad_clip);
  t.push_back({"train.clock",
               {[&tr](const std::string& v) {
                  try {
                    tr.clock = parse_schedule_clock(v);
                  } catch (const ArgumentError& e) {
                    throw ConfigError(e.what());
                  }
                },
                [&tr] { return to_string(tr.clock); }}});
  num("train.lambda0", tr.lambda0);
  count("train.lambda_window", tr.lambda_window);
  flag("train.lambda_halve_literal", tr.lambda_halve_literal);
  opt("train.freeze_lambda", tr.freeze_lambda);
  count("train.replay_capacity", tr.replay_capacity);
  num("train.per_alpha", tr.per_alpha);
  num("train.per_beta", tr.per_beta);
  num("train.explore_start", tr.explore_start);
  num("train.explore_end", tr.explore_end);
  sizes("train.lyapunov_hidden", tr.lyapunov_hidden);
  count("train.bc_iters", tr.bc_iters);
  count("train.bc_batch", tr.bc_batch);
  num("train.bc_scale", tr.bc_scale);
  num("train.bc_lr", tr.bc_lr);
  count("train.divergence_window", tr.divergence_window);
  num("train.divergence_rate", tr.divergence_rate);
  count("train.baseline_episodes", tr.baseline_episodes);
  num("train.ppo_clip", tr.ppo_clip);
  num("train.ppo_gae", tr.ppo_gae);
  count("train.ppo_epochs", tr.ppo_epochs);

  sched("alpha", tr.schedules.alpha);
  sched("beta", tr.schedules.beta);
  sched("gamma", tr.schedules.gamma);
  sched("lambda", tr.schedules.lambda);

  AgentConfig& ag = tr.agent;
  sizes("agent.hidden", ag.hidden);
  t.push_back({"agent.activation",
               {[&ag](const std::string& v) {
                  try {
                    ag.activation = parse_activation(v);
                  } catch (const std::exception& e) {
                    throw ConfigError(e.what());
                  }
                },
                [&ag] { return to_string(ag.activation); }}});
  t.push_back({"agent.mode",
               {[&ag](const std::string& v) {
                  try {
                    ag.mode = parse_hierarchy_mode(v);
                  } catch (const std::exception& e) {
                    throw ConfigError(e.what());
                  }
                },
                [&ag] { return to_string(ag.mode); }}});
  count("agent.goal_dim", ag.goal_dim);
  count("agent.split_high_dim", ag.split_high_dim);
  num("agent.goal_scale", ag.goal_scale);
  count("agent.option_length", ag.option_length);
  num("agent.gamma", ag.gamma);
  num("agent.high_gamma", ag.high_gamma);
  num("agent.obs_scale", ag.obs_scale);
  num("agent.init_output_scale", ag.init_output_scale);

  GeneratorConfig& g = tr.generator;
  t.push_back({"generator.backend",
               {[&g](const std::string& v) {
                  if (v == "finite_difference") g.backend = TraceBackend::finite_difference;
                  else if (v == "closed_form") g.backend = TraceBackend::closed_form;
                  else throw ConfigError("unknown trace backend '" + v + "'");
                },
                [&g] {
                  return std::string(g.backend == TraceBackend::closed_form ? "closed_form" : "finite_difference");
                }}});
  num("generator.fd_step", g.fd_step);
  num("generator.alpha", g.alpha);
  num("generator.beta", g.beta);

  PretrainConfig& p = tr.pretrain;
  num("pretrain.q_weight", p.q_weight);
  num("pretrain.r_weight", p.r_weight);
  num("pretrain.sample_scale", p.sample_scale);
  count("pretrain.batch", p.batch);
  count("pretrain.max_iters", p.max_iters);
  num("pretrain.target_rel_error", p.target_rel_error);
  num("pretrain.lr", p.lr);
  return t;
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(t.batch > 0 && t.high_batch > 0 && t.lyapunov_batch > 0, "batch sizes must be positive");
  need(t.lyapunov_every > 0, "train.lyapunov_every must be positive");
  need(t.delta_kl > 0.0, "train.delta_kl must be positive");
  need(t.tau > 0.0 && t.tau <= 1.0, "train.tau must lie in (0, 1]");
  need(t.grad_clip > 0.0, "train.grad_clip must be positive");
  need(t.lambda0 >= 0.0, "train.lambda0 must be >= 0");
  need(!t.freeze_lambda || *t.freeze_lambda >= 0.0, "train.freeze_lambda must be >= 0");
  need(t.replay_capacity >= t.batch, "train.replay_capacity must be at least the batch size");
  need(t.explore_start >= 0.0 && t.explore_end >= 0.0, "exploration std must be >= 0");
  for (const PowerSchedule* s : {&t.schedules.alpha, &t.schedules.beta, &t.schedules.gamma, &t.schedules.lambda})
    need(s->base > 0.0 && s->power > 0.0, "schedules must be positive and decreasing (base > 0, power > 0)");
  need(t.agent.option_length >= 1, "agent.option_length must be positive");
  need(t.agent.gamma >= 0.0 && t.agent.gamma < 1.0, "agent.gamma must lie in [0, 1)");
  need(t.agent.high_gamma >= 0.0 && t.agent.high_gamma < 1.0, "agent.high_gamma must lie in [0, 1)");
  need(!t.agent.hidden.empty(), "agent.hidden must list at least one layer");
  need(c.eval_rollouts > 0, "experiment.eval_rollouts must be positive");
  need(c.parallel > 0, "experiment.parallel must be positive");
}

/// Parses `in` on top of the defaults. Errors carry "<source>:<line>: ".
inline ExperimentConfig parse_config(std::istream& in, const std::string& source = "config") {
  ExperimentConfig c;
  auto table = detail::bindings(c);
  std::map<std::string, detail::Binding*> index;
  for (auto& [k, b] : table) index[k] = &b;
  std::string line, section;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) { throw ConfigError(source + ":" + std::to_string(lineno) + ": " + msg); };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header '" + line + "'");
      section = detail::trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& [k, b] : table) known = known || k.rfind(section + ".", 0) == 0;
      if (!known) fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value, got '" + line + "'");
    if (section.empty()) fail("key outside of any section");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = index.find(section + "." + key);
    if (it == index.end()) fail("unknown key '" + key + "' in section [" + section + "]");
    try {
      it->second->set(value);
    } catch (const ConfigError& e) {
      fail(key + ": " + e.what());
    }
  }
  try {
    validate(c);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  return parse_config(in, path);
}

/// Every key with its current value, grouped by section; parses back to an equal config.
inline void write_resolved_config(std::ostream& out, const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  const auto table = detail::bindings(copy);
  std::string section;
  for (const auto& [key, b] : table) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) out << '\n';
      out << '[' << s << "]\n";
      section = s;
    }
    out << key.substr(dot + 1) << " = " << b.get() << '\n';
  }
}

}  // namespace lyapctl
