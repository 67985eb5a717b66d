// Training loops: the multi-timescale constrained hierarchical learner, its single-timescale
// variant and ablations, flat DDPG and a clipped-surrogate PPO baseline; evaluation rollouts.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lyapctl/agent.hpp"
#include "lyapctl/csv.hpp"
#include "lyapctl/environments.hpp"
#include "lyapctl/lyapunov.hpp"
#include "lyapctl/metrics.hpp"
#include "lyapctl/neural.hpp"
#include "lyapctl/replay.hpp"

namespace lyapctl {

enum class Algo { mtlhrl, stlhrl, ddpg, ppo, abl_no_hierarchy, abl_no_lyapunov, abl_no_multiscale };

inline const std::vector<Algo>& all_algos() {
  static const std::vector<Algo> v{Algo::mtlhrl,           Algo::stlhrl,          Algo::ddpg,
                                   Algo::ppo,              Algo::abl_no_hierarchy, Algo::abl_no_lyapunov,
                                   Algo::abl_no_multiscale};
  return v;
}

inline std::string to_string(Algo a) {
  switch (a) {
    case Algo::mtlhrl: return "mtlhrl";
    case Algo::stlhrl: return "stlhrl";
    case Algo::ddpg: return "ddpg";
    case Algo::ppo: return "ppo";
    case Algo::abl_no_hierarchy: return "abl-no-hierarchy";
    case Algo::abl_no_lyapunov: return "abl-no-lyapunov";
    case Algo::abl_no_multiscale: return "abl-no-multiscale";
  }
  return "?";
}

inline Algo parse_algo(const std::string& s) {
  for (Algo a : all_algos())
    if (to_string(a) == s) return a;
  throw ArgumentError("unknown algo '" + s + "'");
}

struct AlgoTraits {
  bool hierarchical = true;
  bool lyapunov = true;       // V is pretrained and trained; pi_l is warm-started from the LQR gain
  bool lambda_frozen_zero = false;
  bool trust_region = true;
  bool on_policy = false;
};

inline AlgoTraits traits(Algo a) {
  AlgoTraits t;
  switch (a) {
    case Algo::mtlhrl:
    case Algo::stlhrl:
    case Algo::abl_no_multiscale: break;
    case Algo::abl_no_hierarchy: t.hierarchical = false; break;
    case Algo::abl_no_lyapunov: t.lambda_frozen_zero = true; break;
    case Algo::ddpg:
      t.hierarchical = false;
      t.lyapunov = false;
      t.trust_region = false;
      break;
    case Algo::ppo:
      t.hierarchical = false;
      t.lyapunov = false;
      t.trust_region = false;
      t.on_policy = true;
      break;
  }
  return t;
}

enum class ScheduleClock { episode, update };

inline std::string to_string(ScheduleClock c) { return c == ScheduleClock::episode ? "episode" : "update"; }
inline ScheduleClock parse_schedule_clock(const std::string& s) {
  if (s == "episode") return ScheduleClock::episode;
  if (s == "update") return ScheduleClock::update;
  throw ArgumentError("unknown schedule clock '" + s + "'");
}

struct TrainConfig {
  std::size_t episodes = 200;
  double train_horizon = 1.0;  // seconds per training episode; <= 0 uses the task horizon
  std::size_t batch = 64;
  std::size_t high_batch = 32;
  std::size_t lyapunov_batch = 32;
  std::size_t lyapunov_every = 1;
  double delta_kl = 0.01;
  std::size_t kl_probe = 32;
  double tau = 0.005;
  double grad_clip = 1.0;
  Schedules schedules;
  ScheduleClock clock = ScheduleClock::episode;
  double lambda0 = 1.0;
  std::size_t lambda_window = 100;
  bool lambda_halve_literal = false;
  std::optional<double> freeze_lambda;
  std::size_t replay_capacity = 100000;
  double per_alpha = 0.6;
  double per_beta = 0.4;
  double explore_start = 0.1;
  double explore_end = 0.01;
  AgentConfig agent;
  std::vector<std::size_t> lyapunov_hidden{32};
  GeneratorConfig generator;
  PretrainConfig pretrain;
  std::size_t bc_iters = 1500;
  std::size_t bc_batch = 64;
  double bc_scale = 1.0;
  double bc_lr = 3e-3;
  std::size_t divergence_window = 10;
  double divergence_rate = 0.5;
  std::size_t eval_rollouts = 5;
  std::size_t baseline_episodes = 50;
  double ppo_clip = 0.2;
  double ppo_gae = 0.95;
  std::size_t ppo_epochs = 4;
  std::uint64_t seed = 0;
};

struct EpisodeRecord {
  std::size_t episode = 0;
  double iae = 0.0;
  double ise = 0.0;
  double final_norm_err = 0.0;
  double mean_reward = 0.0;
  double episode_return = 0.0;
  double norm_reward = 0.0;
  double lambda = 0.0;
  double violation_rate = 0.0;
  double lyapunov_loss = 0.0;
  double kl_max = 0.0;
  bool truncated = false;
  std::size_t updates = 0;
};

inline constexpr const char* kRecordHeader =
    "episode,algo,seed,iae,ise,final_norm_err,mean_reward,norm_reward,return,lambda,violation_rate,"
    "lyapunov_loss,kl_max,truncated,updates";

inline void write_records(std::ostream& out, const std::vector<EpisodeRecord>& rs, const std::string& algo,
                          std::uint64_t seed) {
  out << kRecordHeader << '\n';
  const auto f = [](double v) { return csv::format_double(v); };
  for (const auto& r : rs) {
    const std::vector<std::string> cells{
        std::to_string(r.episode), algo,         std::to_string(seed), f(r.iae),
        f(r.ise),                  f(r.final_norm_err), f(r.mean_reward), f(r.norm_reward),
        f(r.episode_return),       f(r.lambda),  f(r.violation_rate), f(r.lyapunov_loss),
        f(r.kl_max),               r.truncated ? "1" : "0", std::to_string(r.updates)};
    csv::write_row(out, cells);
  }
}

inline std::vector<EpisodeRecord> read_records(std::istream& in) {
  const csv::Table t = csv::read(in);
  std::vector<EpisodeRecord> out;
  for (const auto& row : t.rows) {
    auto d = [&](const char* c) { return csv::parse_double(row.at(t.column(c))); };
    EpisodeRecord r;
    r.episode = std::stoul(row.at(t.column("episode")));
    r.iae = d("iae");
    r.ise = d("ise");
    r.final_norm_err = d("final_norm_err");
    r.mean_reward = d("mean_reward");
    r.norm_reward = d("norm_reward");
    r.episode_return = d("return");
    r.lambda = d("lambda");
    r.violation_rate = d("violation_rate");
    r.lyapunov_loss = d("lyapunov_loss");
    r.kl_max = d("kl_max");
    r.truncated = row.at(t.column("truncated")) == "1";
    r.updates = std::stoul(row.at(t.column("updates")));
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Environment stepping

/// Advances one control interval (task.substeps Euler-Maruyama steps). Returns false, leaving x
/// at the last in-bound state, when the state leaves the truncation box or stops being finite.
inline bool env_step(const TaskSpec& task, Vector& x, const Vector& u, double& t, RngStream& rng) {
  for (std::size_t s = 0; s < task.substeps; ++s) {
    Vector next;
    try {
      next = em_step(task.model, x, u, task.dt, rng, t);
    } catch (const IntegrationError&) {
      return false;
    }
    if (!all_finite(next) || norm_inf(next) > task.truncation_bound) return false;
    x = std::move(next);
    t += task.dt;
  }
  return true;
}

inline Vector tracking_error(const TaskSpec& task, const Vector& x, double t) { return sub(x, task.reference(t)); }

inline Vector observe(const TaskSpec& task, const Vector& x, double t, RngStream& rng) {
  Vector e = tracking_error(task, x, t);
  if (task.sensor_noise_std > 0.0)
    for (double& v : e) v += task.sensor_noise_std * rng.standard_normal();
  return e;
}

inline std::size_t control_steps(const TaskSpec& task, double horizon) {
  return static_cast<std::size_t>(std::llround(horizon / task.control_dt()));
}

struct RolloutStats {
  ErrorSeries errors;          // true tracking error at control instants
  std::vector<double> sq_norm;  // ||x_t||^2 of the plant state
  double iae = 0.0;
  double ise = 0.0;
  double final_norm_err = 0.0;
  double episode_return = 0.0;
  double mean_reward = 0.0;
  bool truncated = false;
};

/// Closes an episode: after truncation the error, state and reward are held at their last values
/// for the rest of the horizon.
inline void finish_rollout(RolloutStats& st, std::size_t steps, double control_dt, std::vector<double>& rewards) {
  while (st.errors.times.size() < steps + 1) {
    st.errors.times.push_back(st.errors.times.back() + control_dt);
    st.errors.errors.push_back(st.errors.errors.back());
    st.sq_norm.push_back(st.sq_norm.back());
  }
  const double last = rewards.empty() ? 0.0 : rewards.back();
  while (rewards.size() < steps) rewards.push_back(last);
  st.iae = iae(st.errors);
  st.ise = ise(st.errors);
  st.final_norm_err = norm2(st.errors.errors.back());
  st.episode_return = 0.0;
  for (double r : rewards) st.episode_return += r;
  st.mean_reward = rewards.empty() ? 0.0 : st.episode_return / static_cast<double>(rewards.size());
}

/// Generic closed-loop episode. `policy(obs, step)` returns the plant action.
template <class Policy>
RolloutStats run_episode(const TaskSpec& task, Policy&& policy, double horizon, RngStream& rng) {
  const std::size_t steps = std::max<std::size_t>(1, control_steps(task, horizon));
  RolloutStats st;
  Vector x = task.x0;
  double t = 0.0;
  std::vector<double> rewards;
  st.errors.times.push_back(0.0);
  st.errors.errors.push_back(tracking_error(task, x, t));
  st.sq_norm.push_back(norm2_squared(x));
  for (std::size_t k = 0; k < steps; ++k) {
    const Vector obs = observe(task, x, t, rng);
    const Vector u = policy(obs, k);
    const double t_next = static_cast<double>(k + 1) * task.control_dt();
    if (!env_step(task, x, u, t, rng)) {
      st.truncated = true;
      break;
    }
    t = t_next;
    rewards.push_back(task.reward(x, u, t) * task.control_dt());
    st.errors.times.push_back(t);
    st.errors.errors.push_back(tracking_error(task, x, t));
    st.sq_norm.push_back(norm2_squared(x));
  }
  finish_rollout(st, steps, task.control_dt(), rewards);
  return st;
}

struct EvalResult {
  std::vector<RolloutStats> rollouts;
  double iae = 0.0;  // means over rollouts
  double ise = 0.0;
  double final_norm_err = 0.0;
  double mean_reward = 0.0;
  double max_mean_sq = 0.0;  // max_t of the rollout-mean of ||x_t||^2
  double initial_sq = 0.0;
  std::size_t truncated = 0;
};

/// Deterministic-policy rollouts over the full task horizon (process and sensor noise stay on).
inline EvalResult evaluate(HierarchicalAgent agent, const TaskSpec& task, RngStream& rng, std::size_t rollouts,
                           double horizon = 0.0) {
  if (rollouts == 0) throw ArgumentError("evaluate: need at least one rollout");
  if (agent.state_dim() != task.model.state_dim || agent.action_dim() != task.model.action_dim)
    throw DimensionError("evaluate: agent dims (" + std::to_string(agent.state_dim()) + ", " +
                         std::to_string(agent.action_dim()) + ") do not match task dims (" +
                         std::to_string(task.model.state_dim) + ", " + std::to_string(task.model.action_dim) + ")");
  if (horizon <= 0.0) horizon = task.horizon;
  EvalResult ev;
  for (std::size_t r = 0; r < rollouts; ++r) {
    agent.reset();
    ev.rollouts.push_back(run_episode(
        task, [&](const Vector& obs, std::size_t k) { return agent.act(obs, k, rng, 0.0).u; }, horizon, rng));
  }
  const double n = static_cast<double>(rollouts);
  const std::size_t len = ev.rollouts.front().sq_norm.size();
  for (std::size_t k = 0; k < len; ++k) {
    double m = 0.0;
    for (const auto& ro : ev.rollouts) m += ro.sq_norm[k];
    ev.max_mean_sq = std::max(ev.max_mean_sq, m / n);
  }
  ev.initial_sq = norm2_squared(task.x0);
  for (const auto& ro : ev.rollouts) {
    ev.iae += ro.iae / n;
    ev.ise += ro.ise / n;
    ev.final_norm_err += ro.final_norm_err / n;
    ev.mean_reward += ro.mean_reward / n;
    if (ro.truncated) ++ev.truncated;
  }
  return ev;
}

/// Mean episode return of a uniformly random policy over the training horizon.
inline double random_baseline(const TaskSpec& task, RngStream& rng, std::size_t episodes, double horizon) {
  if (episodes == 0) throw ArgumentError("random_baseline: need at least one episode");
  double s = 0.0;
  for (std::size_t e = 0; e < episodes; ++e) {
    const RolloutStats st = run_episode(
        task,
        [&](const Vector&, std::size_t) {
          Vector u(task.model.action_dim);
          for (double& v : u) v = rng.uniform(-task.action_bound, task.action_bound);
          return u;
        },
        horizon, rng);
    s += st.episode_return;
  }
  return s / static_cast<double>(episodes);
}

// ---------------------------------------------------------------------------------------------
// Warm start

/// Fits pi_l (and pi_h in split mode) to the saturated linear law u = clip(u* - K (e - G a_h)),
/// where G places goal_scale * a_h on the first m_h error coordinates in goal mode.
inline double behavior_clone(HierarchicalAgent& ag, const Matrix& k, const Vector& u_star, const TrainConfig& cfg,
                             RngStream& rng) {
  const std::size_t n = ag.state_dim(), m_h = ag.high_dim();
  const bool split = !ag.flat() && ag.config().mode == HierarchyMode::split;
  const double bound = ag.action_bound();
  const double cap = 0.98;
  auto target = [&](const Vector& e, const Vector& a_h) {
    Vector shifted = e;
    if (!ag.flat() && !split)
      for (std::size_t i = 0; i < m_h; ++i) shifted[i] -= ag.config().goal_scale * a_h[i];
    Vector u = sub(u_star, matvec(k, shifted));
    for (double& v : u) v = std::clamp(v / bound, -cap, cap);
    return u;
  };
  Adam opt_l(ag.pi_l.num_params(), cfg.bc_lr);
  std::optional<Adam> opt_h;
  if (split) opt_h.emplace(ag.pi_h.num_params(), cfg.bc_lr);
  double last = 0.0;
  for (std::size_t it = 0; it < cfg.bc_iters; ++it) {
    Vector g_l(ag.pi_l.num_params(), 0.0), g_h(split ? ag.pi_h.num_params() : 0, 0.0);
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(cfg.bc_batch);
    for (std::size_t b = 0; b < cfg.bc_batch; ++b) {
      Vector e(n);
      for (double& v : e) v = cfg.bc_scale * rng.standard_normal();
      Vector a_h(m_h);
      if (!split)
        for (double& v : a_h) v = rng.uniform(-1.0, 1.0);
      const Vector tu = target(e, a_h);
      if (split) {
        const Vector head(tu.begin(), tu.begin() + static_cast<std::ptrdiff_t>(m_h));
        Mlp::Tape th;
        const Vector yh = ag.pi_h.forward(ag.high_input(e), th);
        const Vector rh = sub(yh, head);
        loss += norm2_squared(rh) * inv;
        ag.pi_h.backward(th, scaled(rh, 2.0 * inv), g_h);
        a_h = head;
      }
      const Vector tail(tu.begin() + static_cast<std::ptrdiff_t>(split ? m_h : 0), tu.end());
      Mlp::Tape tl;
      const Vector yl = ag.pi_l.forward(ag.low_input(e, a_h), tl);
      const Vector rl = sub(yl, tail);
      loss += norm2_squared(rl) * inv;
      ag.pi_l.backward(tl, scaled(rl, 2.0 * inv), g_l);
    }
    opt_l.step(ag.pi_l.params(), g_l);
    if (split) opt_h->step(ag.pi_h.params(), g_h);
    last = loss;
  }
  return last;
}

// ---------------------------------------------------------------------------------------------
// Training

struct Rates {
  PowerSchedule actor_low, critic_low, actor_high, critic_high, lyapunov;
};

inline Rates rates_for(Algo a, const Schedules& s) {
  switch (a) {
    case Algo::stlhrl: return {s.alpha, s.alpha, s.alpha, s.alpha, s.alpha};
    case Algo::abl_no_multiscale: return {s.alpha, s.alpha, s.alpha, s.alpha, s.beta};
    default: return {s.alpha, s.alpha, s.gamma, s.gamma, s.beta};
  }
}

struct TrainResult {
  Algo algo = Algo::mtlhrl;
  HierarchicalAgent agent;
  std::optional<LyapunovNet> lyapunov;
  Mlp value;  // PPO state-value net
  LagrangeState lagrange;
  std::size_t updates = 0;
  std::vector<EpisodeRecord> records;
  std::vector<double> kl_measurements;  // post-update KL on held-out states, per accepted actor step
  std::size_t trust_region_rejections = 0;
  double lambda_min = std::numeric_limits<double>::infinity();
  double pretrain_rel_error = std::numeric_limits<double>::quiet_NaN();
  double bc_loss = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
  std::string diagnostic;
};

namespace detail {

inline double explore_std(const TrainConfig& cfg, std::size_t episode) {
  if (cfg.episodes <= 1) return cfg.explore_start;
  const double f = static_cast<double>(episode) / static_cast<double>(cfg.episodes - 1);
  return cfg.explore_start + f * (cfg.explore_end - cfg.explore_start);
}

inline std::vector<const Transition*> items(const PrioritizedBuffer::Sample& s) {
  return std::vector<const Transition*>(s.items.begin(), s.items.end());
}

inline bool check_divergence(const TrainConfig& cfg, TrainResult& res) {
  const std::size_t w = cfg.divergence_window;
  if (w == 0 || res.records.size() < w) return false;
  std::size_t trunc = 0;
  for (std::size_t i = res.records.size() - w; i < res.records.size(); ++i) trunc += res.records[i].truncated;
  if (static_cast<double>(trunc) / static_cast<double>(w) > cfg.divergence_rate) {
    res.diverged = true;
    res.diagnostic = "divergence: " + std::to_string(trunc) + " of the last " + std::to_string(w) +
                     " episodes left the truncation box (episode " +
                     std::to_string(res.records.back().episode) + ")";
    return true;
  }
  return false;
}

inline EpisodeRecord record_from(const RolloutStats& st, std::size_t episode) {
  EpisodeRecord r;
  r.episode = episode;
  r.iae = st.iae;
  r.ise = st.ise;
  r.final_norm_err = st.final_norm_err;
  r.mean_reward = st.mean_reward;
  r.episode_return = st.episode_return;
  r.truncated = st.truncated;
  return r;
}

}  // namespace detail

/// Pretrains V on the linearized error dynamics and returns the LQR data used for the warm start.
inline PretrainResult pretrain_lyapunov(LyapunovNet& v, const TaskSpec& task, const TrainConfig& cfg, RngStream& rng) {
  const SdeModel em = error_model(task);
  PretrainConfig pc = cfg.pretrain;
  pc.control_dt = task.control_dt();
  pc.substeps = task.substeps;
  return pretrain(v, em, Vector(task.model.state_dim, 0.0), task.linearization_action, rng, pc);
}

namespace detail {

inline TrainResult train_off_policy(Algo algo, const TaskSpec& task, const TrainConfig& cfg) {
  const AlgoTraits tr = traits(algo);
  const std::size_t n = task.model.state_dim, m = task.model.action_dim;
  RngStream init_rng(cfg.seed, 1), env_rng(cfg.seed, 2), explore_rng(cfg.seed, 3), replay_rng(cfg.seed, 4),
      pre_rng(cfg.seed, 5);
  TrainResult res;
  res.algo = algo;
  AgentConfig acfg = cfg.agent;
  acfg.flat = !tr.hierarchical;
  res.agent = HierarchicalAgent(n, m, task.action_bound, acfg);
  HierarchicalAgent& ag = res.agent;
  ag.init(init_rng);
  res.lagrange.lambda = cfg.freeze_lambda ? *cfg.freeze_lambda : (tr.lambda_frozen_zero ? 0.0 : cfg.lambda0);
  res.lagrange.rate = algo == Algo::stlhrl ? cfg.schedules.alpha : cfg.schedules.lambda;
  res.lagrange.window_size = cfg.lambda_window;
  res.lagrange.halve_lambda = cfg.lambda_halve_literal;
  const bool lambda_fixed = cfg.freeze_lambda.has_value() || tr.lambda_frozen_zero;
  res.lambda_min = res.lagrange.lambda;
  if (cfg.episodes == 0) return res;

  const SdeModel emodel = error_model(task);
  if (tr.lyapunov) {
    res.lyapunov.emplace(n, cfg.lyapunov_hidden, n, Activation::softplus);
    res.lyapunov->init(init_rng);
    const PretrainResult pre = pretrain_lyapunov(*res.lyapunov, task, cfg, pre_rng);
    res.pretrain_rel_error = pre.rel_error;
    res.bc_loss = behavior_clone(ag, pre.k, task.linearization_action, cfg, pre_rng);
  }
  const LyapunovNet* vptr = res.lyapunov ? &*res.lyapunov : nullptr;
  const Rates rates = rates_for(algo, cfg.schedules);
  PrioritizedBuffer low_buf(cfg.replay_capacity, cfg.per_alpha, cfg.per_beta);
  PrioritizedBuffer high_buf(std::max<std::size_t>(1, cfg.replay_capacity / ag.config().option_length),
                             cfg.per_alpha, cfg.per_beta);
  double max_priority = 1.0, max_high_priority = 1.0;
  const double horizon = cfg.train_horizon > 0.0 ? cfg.train_horizon : task.horizon;
  const std::size_t steps = std::max<std::size_t>(1, control_steps(task, horizon));
  const std::size_t t_h = ag.config().option_length;
  std::size_t global_step = 0;

  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    const double sd = explore_std(cfg, ep);
    ag.reset();
    Vector x = task.x0;
    double t = 0.0;
    Vector obs = observe(task, x, t, env_rng);
    RolloutStats st;
    std::vector<double> rewards;
    st.errors.times.push_back(0.0);
    st.errors.errors.push_back(tracking_error(task, x, t));
    st.sq_norm.push_back(norm2_squared(x));
    double viol_sum = 0.0, lyap_sum = 0.0, kl_max = 0.0;
    std::size_t lyap_count = 0;
    // Current option window.
    Vector opt_state, opt_action;
    double opt_return = 0.0, opt_discount = 1.0;
    std::size_t opt_len = 0;

    for (std::size_t k = 0; k < steps; ++k) {
      const Action a = ag.act(obs, k, explore_rng, sd);
      if (!ag.flat() && k % t_h == 0) {
        opt_state = obs;
        opt_action = a.a_h;
        opt_return = 0.0;
        opt_discount = 1.0;
        opt_len = 0;
      }
      const double t_next = static_cast<double>(k + 1) * task.control_dt();
      const bool ok = env_step(task, x, a.u, t, env_rng);
      if (ok) t = t_next;
      const double r = task.reward(x, a.u, t) * task.control_dt();
      const Vector next_obs = observe(task, x, t, env_rng);
      Transition tn;
      tn.state = obs;
      tn.high_action = a.a_h;
      tn.low_action = a.a_l;
      tn.action = a.u;
      tn.reward = r;
      tn.next_state = next_obs;
      tn.done = !ok;
      tn.step_in_option = k % t_h;
      tn.time = static_cast<double>(k) * task.control_dt();
      tn.episode = ep;
      low_buf.push(tn, max_priority);
      if (ok) {
        rewards.push_back(r);
        st.errors.times.push_back(t);
        st.errors.errors.push_back(tracking_error(task, x, t));
        st.sq_norm.push_back(norm2_squared(x));
      } else {
        st.truncated = true;
      }
      if (!ag.flat()) {
        opt_return += opt_discount * r;
        opt_discount *= ag.config().gamma;
        ++opt_len;
        if (opt_len == t_h || !ok) {
          Transition ht;
          ht.state = opt_state;
          ht.high_action = opt_action;
          ht.reward = opt_return;
          ht.next_state = next_obs;
          ht.done = !ok;
          ht.step_in_option = opt_len;
          ht.time = tn.time - static_cast<double>(opt_len - 1) * task.control_dt();
          ht.episode = ep;
          high_buf.push(ht, max_high_priority);
        }
      }
      obs = next_obs;
      ++global_step;

      if (low_buf.size() >= cfg.batch) {
        const double kc = cfg.clock == ScheduleClock::episode ? static_cast<double>(ep)
                                                              : static_cast<double>(res.updates);
        const auto sample = low_buf.sample(cfg.batch, replay_rng);
        const auto batch = items(sample);
        // Low-level critic.
        Vector g_q(ag.q_l.num_params(), 0.0);
        const TdResult td = td_losses(ag, batch, {}, sample.weights, {}, &g_q, nullptr);
        clip_global_norm_inplace(g_q, cfg.grad_clip);
        sgd_step_inplace(ag.q_l.params(), g_q, rates.critic_low(kc), StepDirection::descent);
        // Lyapunov function and multiplier.
        Vector violation(batch.size(), 0.0);
        if (vptr && res.updates % cfg.lyapunov_every == 0) {
          const std::size_t nb = std::min(cfg.lyapunov_batch, batch.size());
          std::vector<LyapunovSample> ls;
          ls.reserve(nb);
          for (std::size_t i = 0; i < nb; ++i) {
            const Vector& s = batch[i]->state;
            const Vector a_h = ag.high_mean(s);
            ls.push_back({s, ag.compose(a_h, ag.low_mean(s, a_h)), batch[i]->time, sample.weights[i]});
          }
          Vector g_v(res.lyapunov->num_params(), 0.0);
          const LyapunovLossResult lr = lyapunov_loss(*res.lyapunov, emodel, ls, cfg.generator, &g_v);
          clip_global_norm_inplace(g_v, cfg.grad_clip);
          sgd_step_inplace(res.lyapunov->params(), g_v, rates.lyapunov(kc), StepDirection::descent);
          for (std::size_t i = 0; i < nb; ++i) violation[i] = lr.hinges[i];
          if (!lambda_fixed)
            res.lagrange = lambda_update(res.lagrange, lr.hinge_mean, lr.violation_rate, kc);
          viol_sum += lr.violation_rate;
          lyap_sum += lr.loss;
          ++lyap_count;
        }
        res.lambda_min = std::min(res.lambda_min, res.lagrange.lambda);
        for (std::size_t i = 0; i < batch.size(); ++i)
          low_buf.update_priority(sample.ids[i], td.td_l[i], violation[i]);
        for (std::size_t i = 0; i < batch.size(); ++i)
          max_priority = std::max(max_priority, std::abs(td.td_l[i]) + violation[i] + 1e-3);
        // Low-level actor.
        ActorRequest req;
        req.clip = cfg.grad_clip;
        const ActorGradients g =
            actor_gradients(ag, batch, vptr, emodel, res.lagrange.lambda, cfg.generator, req);
        Vector proposed = sgd_step(ag.pi_l.params(), g.d_low, rates.actor_low(kc), StepDirection::ascent);
        if (tr.trust_region) {
          std::vector<Vector> inputs;
          for (const Transition* b : batch) inputs.push_back(ag.low_input(b->state, ag.high_mean(b->state)));
          const Mlp before = ag.pi_l;
          const TrustRegionResult trr = trust_region_apply(ag.pi_l, proposed, inputs, sd, cfg.delta_kl);
          if (trr.accepted) {
            const auto probe = low_buf.sample(std::min(cfg.kl_probe, low_buf.size()), replay_rng);
            std::vector<Vector> pin;
            for (const Transition* b : probe.items) pin.push_back(ag.low_input(b->state, ag.high_mean(b->state)));
            const double kl = kl_gaussian(before, ag.pi_l, pin, sd);
            res.kl_measurements.push_back(kl);
            kl_max = std::max(kl_max, kl);
          } else {
            ++res.trust_region_rejections;
          }
        } else {
          ag.pi_l.params() = std::move(proposed);
        }
        // High level, once per option length.
        if (!ag.flat() && global_step % t_h == 0 && high_buf.size() >= cfg.high_batch) {
          const auto hs = high_buf.sample(cfg.high_batch, replay_rng);
          const auto hb = items(hs);
          Vector g_qh(ag.q_h.num_params(), 0.0);
          const TdResult tdh = td_losses(ag, {}, hb, {}, hs.weights, nullptr, &g_qh);
          clip_global_norm_inplace(g_qh, cfg.grad_clip);
          sgd_step_inplace(ag.q_h.params(), g_qh, rates.critic_high(kc), StepDirection::descent);
          for (std::size_t i = 0; i < hb.size(); ++i) {
            high_buf.update_priority(hs.ids[i], tdh.td_h[i], 0.0);
            max_high_priority = std::max(max_high_priority, std::abs(tdh.td_h[i]) + 1e-3);
          }
          ActorRequest hreq;
          hreq.low = false;
          hreq.high = true;
          hreq.clip = cfg.grad_clip;
          const ActorGradients gh =
              actor_gradients(ag, hb, vptr, emodel, res.lagrange.lambda, cfg.generator, hreq);
          Vector hprop = sgd_step(ag.pi_h.params(), gh.d_high, rates.actor_high(kc), StepDirection::ascent);
          if (tr.trust_region) {
            std::vector<Vector> inputs;
            for (const Transition* b : hb) inputs.push_back(ag.high_input(b->state));
            const Mlp before = ag.pi_h;
            const TrustRegionResult trr = trust_region_apply(ag.pi_h, hprop, inputs, sd, cfg.delta_kl);
            if (trr.accepted) {
              const auto probe = high_buf.sample(std::min(cfg.kl_probe, high_buf.size()), replay_rng);
              std::vector<Vector> pin;
              for (const Transition* b : probe.items) pin.push_back(ag.high_input(b->state));
              const double kl = kl_gaussian(before, ag.pi_h, pin, sd);
              res.kl_measurements.push_back(kl);
              kl_max = std::max(kl_max, kl);
            } else {
              ++res.trust_region_rejections;
            }
          } else {
            ag.pi_h.params() = std::move(hprop);
          }
          polyak_update(ag.q_h_target.params(), ag.q_h.params(), cfg.tau);
        }
        polyak_update(ag.q_l_target.params(), ag.q_l.params(), cfg.tau);
        ++res.updates;
      }
      if (!ok) break;
    }
    finish_rollout(st, steps, task.control_dt(), rewards);
    EpisodeRecord rec = record_from(st, ep);
    rec.lambda = res.lagrange.lambda;
    rec.violation_rate = lyap_count ? viol_sum / static_cast<double>(lyap_count) : 0.0;
    rec.lyapunov_loss = lyap_count ? lyap_sum / static_cast<double>(lyap_count) : 0.0;
    rec.kl_max = kl_max;
    rec.updates = res.updates;
    res.records.push_back(rec);
    if (check_divergence(cfg, res)) break;
  }
  return res;
}

inline TrainResult train_ppo(const TaskSpec& task, const TrainConfig& cfg) {
  const std::size_t n = task.model.state_dim, m = task.model.action_dim;
  RngStream init_rng(cfg.seed, 1), env_rng(cfg.seed, 2), explore_rng(cfg.seed, 3), mb_rng(cfg.seed, 4);
  TrainResult res;
  res.algo = Algo::ppo;
  AgentConfig acfg = cfg.agent;
  acfg.flat = true;
  res.agent = HierarchicalAgent(n, m, task.action_bound, acfg);
  HierarchicalAgent& ag = res.agent;
  ag.init(init_rng);
  std::vector<std::size_t> vs{n};
  vs.insert(vs.end(), acfg.hidden.begin(), acfg.hidden.end());
  vs.push_back(1);
  res.value = Mlp(vs, acfg.activation);
  res.value.init(init_rng, acfg.init_output_scale);
  res.lagrange.lambda = 0.0;
  res.lambda_min = 0.0;
  const double horizon = cfg.train_horizon > 0.0 ? cfg.train_horizon : task.horizon;
  const std::size_t steps = std::max<std::size_t>(1, control_steps(task, horizon));
  const double gamma = acfg.gamma;

  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    const double sd = explore_std(cfg, ep);
    const double kc = cfg.clock == ScheduleClock::episode ? static_cast<double>(ep) : static_cast<double>(res.updates);
    std::vector<Vector> states, means, acts;
    std::vector<double> rew;
    std::vector<bool> dones;
    Vector x = task.x0;
    double t = 0.0;
    Vector obs = observe(task, x, t, env_rng);
    RolloutStats st;
    std::vector<double> rewards;
    st.errors.times.push_back(0.0);
    st.errors.errors.push_back(tracking_error(task, x, t));
    st.sq_norm.push_back(norm2_squared(x));
    for (std::size_t k = 0; k < steps; ++k) {
      const Vector mu = ag.low_mean(obs, {});
      Vector a = mu;
      for (double& v : a) v = std::clamp(v + sd * explore_rng.standard_normal(), -1.0, 1.0);
      const Vector u = ag.compose({}, a);
      const double t_next = static_cast<double>(k + 1) * task.control_dt();
      const bool ok = env_step(task, x, u, t, env_rng);
      if (ok) t = t_next;
      const double r = task.reward(x, u, t) * task.control_dt();
      states.push_back(obs);
      means.push_back(mu);
      acts.push_back(a);
      rew.push_back(r);
      dones.push_back(!ok);
      obs = observe(task, x, t, env_rng);
      if (!ok) {
        st.truncated = true;
        break;
      }
      rewards.push_back(r);
      st.errors.times.push_back(t);
      st.errors.errors.push_back(tracking_error(task, x, t));
      st.sq_norm.push_back(norm2_squared(x));
    }
    // Generalized advantage estimates.
    const std::size_t len = states.size();
    Vector values(len + 1, 0.0);
    for (std::size_t i = 0; i < len; ++i) values[i] = res.value.forward(ag.observation(states[i]))[0];
    values[len] = dones.back() ? 0.0 : res.value.forward(ag.observation(obs))[0];
    Vector adv(len), ret(len);
    double gae = 0.0;
    for (std::size_t i = len; i-- > 0;) {
      const double next = dones[i] ? 0.0 : values[i + 1];
      const double delta = rew[i] + gamma * next - values[i];
      gae = delta + gamma * cfg.ppo_gae * (dones[i] ? 0.0 : gae);
      adv[i] = gae;
      ret[i] = gae + values[i];
    }
    double am = 0.0, av = 0.0;
    for (double a : adv) am += a / static_cast<double>(len);
    for (double a : adv) av += (a - am) * (a - am) / static_cast<double>(len);
    const double asd = std::sqrt(av) + 1e-8;
    for (double& a : adv) a = (a - am) / asd;

    double kl_max = 0.0;
    std::vector<std::size_t> order(len);
    for (std::size_t i = 0; i < len; ++i) order[i] = i;
    const std::size_t mb = std::min(cfg.batch, len);
    for (std::size_t epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
      for (std::size_t i = len; i > 1; --i) std::swap(order[i - 1], order[mb_rng.uniform_index(i)]);
      for (std::size_t start = 0; start + mb <= len; start += mb) {
        Vector g_pi(ag.pi_l.num_params(), 0.0), g_v(res.value.num_params(), 0.0);
        std::vector<Vector> inputs;
        for (std::size_t j = start; j < start + mb; ++j) {
          const std::size_t i = order[j];
          const Vector in = ag.observation(states[i]);
          inputs.push_back(in);
          Mlp::Tape tp;
          const Vector mu = ag.pi_l.forward(in, tp);
          double logr = 0.0;
          for (std::size_t c = 0; c < m; ++c)
            logr += (std::pow(acts[i][c] - means[i][c], 2) - std::pow(acts[i][c] - mu[c], 2)) / (2 * sd * sd);
          const double ratio = std::exp(logr);
          const bool clipped_branch = (adv[i] > 0.0 && ratio > 1.0 + cfg.ppo_clip) ||
                                      (adv[i] < 0.0 && ratio < 1.0 - cfg.ppo_clip);
          if (!clipped_branch) {
            Vector up(m);
            for (std::size_t c = 0; c < m; ++c)
              up[c] = ratio * adv[i] * (acts[i][c] - mu[c]) / (sd * sd) / static_cast<double>(mb);
            ag.pi_l.backward(tp, up, g_pi);
          }
          Mlp::Tape tv;
          const double vhat = res.value.forward(in, tv)[0];
          res.value.backward(tv, Vector{2.0 * (vhat - ret[i]) / static_cast<double>(mb)}, g_v);
        }
        clip_global_norm_inplace(g_pi, cfg.grad_clip);
        clip_global_norm_inplace(g_v, cfg.grad_clip);
        const Mlp before = ag.pi_l;
        sgd_step_inplace(ag.pi_l.params(), g_pi, cfg.schedules.alpha(kc), StepDirection::ascent);
        sgd_step_inplace(res.value.params(), g_v, cfg.schedules.alpha(kc), StepDirection::descent);
        const double kl = kl_gaussian(before, ag.pi_l, inputs, sd);
        res.kl_measurements.push_back(kl);
        kl_max = std::max(kl_max, kl);
        ++res.updates;
      }
    }
    finish_rollout(st, steps, task.control_dt(), rewards);
    EpisodeRecord rec = record_from(st, ep);
    rec.kl_max = kl_max;
    rec.updates = res.updates;
    res.records.push_back(rec);
    if (check_divergence(cfg, res)) break;
  }
  return res;
}

}  // namespace detail

inline TrainResult train(Algo algo, const TaskSpec& task, const TrainConfig& cfg) {
  if (cfg.batch == 0 || cfg.high_batch == 0 || cfg.lyapunov_batch == 0 || cfg.lyapunov_every == 0)
    throw ArgumentError("train: batch sizes and update periods must be positive");
  TrainResult res = algo == Algo::ppo ? detail::train_ppo(task, cfg) : detail::train_off_policy(algo, task, cfg);
  res.algo = algo;
  return res;
}

/// Fills norm_reward from the random baseline and the best smoothed episode return.
inline void normalize_records(std::vector<EpisodeRecord>& rs, double random_return, double best_return) {
  std::vector<double> r;
  for (const auto& e : rs) r.push_back(e.episode_return);
  const auto n = normalize_rewards(r, random_return, best_return);
  for (std::size_t i = 0; i < rs.size(); ++i) rs[i].norm_reward = n[i];
}

inline double best_smoothed_return(const std::vector<EpisodeRecord>& rs, std::size_t window = 10) {
  std::vector<double> r;
  for (const auto& e : rs) r.push_back(e.episode_return);
  if (r.empty()) return -std::numeric_limits<double>::infinity();
  const auto s = smooth(r, window);
  return *std::max_element(s.begin(), s.end());
}

// ---------------------------------------------------------------------------------------------
// Checkpoints

inline void write_checkpoint(std::ostream& out, const TrainResult& r) {
  out << "lyapctl-checkpoint 1\n";
  out << "algo " << to_string(r.algo) << '\n';
  out << "dims " << r.agent.state_dim() << ' ' << r.agent.action_dim() << '\n';
  out << "action_bound " << csv::format_double(r.agent.action_bound()) << '\n';
  const AgentConfig& c = r.agent.config();
  out << "agent " << (c.flat ? 1 : 0) << ' ' << to_string(c.mode) << ' ' << c.goal_dim << ' ' << c.split_high_dim
      << ' ' << csv::format_double(c.goal_scale) << ' ' << c.option_length << ' ' << csv::format_double(c.obs_scale)
      << ' ' << to_string(c.activation) << ' ' << c.hidden.size();
  for (std::size_t h : c.hidden) out << ' ' << h;
  out << '\n';
  out << "lambda " << csv::format_double(r.lagrange.lambda) << '\n';
  out << "k " << r.updates << '\n';
  out << "lyapunov " << (r.lyapunov ? 1 : 0) << '\n';
  auto net = [&](const char* name, const Mlp& m) {
    if (m.sizes().empty()) {
      out << "mlp " << name << " empty\n";
      return;
    }
    write_mlp(out, name, m);
  };
  net("pi_h", r.agent.pi_h);
  net("pi_l", r.agent.pi_l);
  net("q_h", r.agent.q_h);
  net("q_l", r.agent.q_l);
  net("q_h_target", r.agent.q_h_target);
  net("q_l_target", r.agent.q_l_target);
  net("value", r.value);
  if (r.lyapunov) {
    const LyapunovNet& v = *r.lyapunov;
    out << "vnet " << v.state_dim() << ' ' << v.feature_dim() << ' ' << v.num_params() << '\n';
    if (v.feature_net()) write_mlp(out, "psi", *v.feature_net());
    else out << "mlp psi empty\n";
    for (double p : v.params()) out << csv::format_double(p) << '\n';
  }
}

inline TrainResult read_checkpoint(std::istream& in) {
  auto expect = [&](const std::string& key) {
    std::string k;
    if (!(in >> k) || k != key) throw CheckpointError("checkpoint: expected '" + key + "'");
  };
  TrainResult r;
  std::string tok;
  expect("lyapctl-checkpoint");
  int version = 0;
  in >> version;
  if (version != 1) throw CheckpointError("checkpoint: unsupported version");
  expect("algo");
  in >> tok;
  r.algo = parse_algo(tok);
  std::size_t n = 0, m = 0;
  expect("dims");
  in >> n >> m;
  double bound = 0.0;
  expect("action_bound");
  in >> tok;
  bound = csv::parse_double(tok);
  AgentConfig c;
  expect("agent");
  int flat = 0;
  std::string mode, act, gs, os;
  std::size_t nh = 0;
  in >> flat >> mode >> c.goal_dim >> c.split_high_dim >> gs >> c.option_length >> os >> act >> nh;
  if (!in) throw CheckpointError("checkpoint: malformed agent line");
  c.flat = flat != 0;
  c.mode = parse_hierarchy_mode(mode);
  c.goal_scale = csv::parse_double(gs);
  c.obs_scale = csv::parse_double(os);
  c.activation = parse_activation(act);
  c.hidden.resize(nh);
  for (auto& h : c.hidden) in >> h;
  expect("lambda");
  in >> tok;
  r.lagrange.lambda = csv::parse_double(tok);
  expect("k");
  in >> r.updates;
  int has_v = 0;
  expect("lyapunov");
  in >> has_v;
  in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
  r.agent = HierarchicalAgent(n, m, bound, c);
  auto net = [&](const char* name, Mlp& dst) {
    in >> std::ws;
    const auto pos = in.tellg();
    std::string line;
    std::getline(in, line);
    if (line == std::string("mlp ") + name + " empty") return;
    in.seekg(pos);
    auto [got, mlp] = read_mlp(in);
    if (got != name) throw CheckpointError("checkpoint: expected network '" + std::string(name) + "'");
    if (!dst.sizes().empty() && dst.sizes() != mlp.sizes())
      throw CheckpointError("checkpoint: network '" + std::string(name) + "' has unexpected shape");
    dst = std::move(mlp);
  };
  net("pi_h", r.agent.pi_h);
  net("pi_l", r.agent.pi_l);
  net("q_h", r.agent.q_h);
  net("q_l", r.agent.q_l);
  net("q_h_target", r.agent.q_h_target);
  net("q_l_target", r.agent.q_l_target);
  net("value", r.value);
  if (has_v) {
    std::size_t vn = 0, vk = 0, count = 0;
    expect("vnet");
    in >> vn >> vk >> count;
    in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
    Mlp psi;
    net("psi", psi);
    if (psi.sizes().empty()) {
      r.lyapunov = LyapunovNet::quadratic(vn);
    } else {
      std::vector<std::size_t> hidden(psi.sizes().begin() + 1, psi.sizes().end() - 1);
      r.lyapunov.emplace(vn, hidden, vk, psi.hidden_activation());
    }
    if (r.lyapunov->num_params() != count) throw CheckpointError("checkpoint: Lyapunov parameter count mismatch");
    for (double& p : r.lyapunov->params()) {
      in >> tok;
      p = csv::parse_double(tok);
    }
    if (!in) throw CheckpointError("checkpoint: truncated Lyapunov parameters");
  }
  return r;
}

}  // namespace lyapctl
