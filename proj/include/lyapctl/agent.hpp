// Hierarchical actor-critic agent: composite policy with a latched high-level output, per-level
// critics with Polyak targets, the Lagrangian constraint terms and the KL trust region.
#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "lyapctl/dynamics.hpp"
#include "lyapctl/lyapunov.hpp"
#include "lyapctl/neural.hpp"
#include "lyapctl/replay.hpp"

namespace lyapctl {

// goal: a_h is an offset of the first m_h error coordinates, consumed by pi_l (m_l = m).
// split: u = [a_h, a_l] with m_h + m_l = m.
enum class HierarchyMode { goal, split };

inline std::string to_string(HierarchyMode m) { return m == HierarchyMode::goal ? "goal" : "split"; }

inline HierarchyMode parse_hierarchy_mode(const std::string& s) {
  if (s == "goal") return HierarchyMode::goal;
  if (s == "split") return HierarchyMode::split;
  throw ArgumentError("unknown hierarchy mode '" + s + "'");
}

struct AgentConfig {
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::relu;
  bool flat = false;
  HierarchyMode mode = HierarchyMode::goal;
  std::size_t goal_dim = 4;         // m_h in goal mode
  std::size_t split_high_dim = 0;   // m_h in split mode; 0 means m / 2
  double goal_scale = 0.5;          // error units per unit of a_h
  std::size_t option_length = 20;   // T_h
  double gamma = 0.99;
  double high_gamma = 0.9;          // Gamma
  double obs_scale = 1.0;
  double init_output_scale = 0.1;
};

struct Action {
  Vector u;    // plant units
  Vector a_h;  // in [-1, 1]; empty for flat agents
  Vector a_l;  // in [-1, 1]
};

class HierarchicalAgent {
 public:
  HierarchicalAgent() = default;
  HierarchicalAgent(std::size_t n, std::size_t m, double action_bound, const AgentConfig& cfg)
      : n_(n), m_(m), bound_(action_bound), cfg_(cfg) {
    if (n == 0 || m == 0) throw ArgumentError("HierarchicalAgent: empty state or action");
    if (!(action_bound > 0.0)) throw ArgumentError("HierarchicalAgent: action bound must be positive");
    if (cfg.option_length == 0) throw ArgumentError("HierarchicalAgent: T_h must be positive");
    if (cfg.flat) {
      m_h_ = 0;
      m_l_ = m;
    } else if (cfg.mode == HierarchyMode::goal) {
      m_h_ = std::min(cfg.goal_dim, n);
      m_l_ = m;
      if (m_h_ == 0) throw ArgumentError("HierarchicalAgent: goal_dim must be positive");
    } else {
      m_h_ = cfg.split_high_dim ? cfg.split_high_dim : m / 2;
      if (m_h_ == 0 || m_h_ >= m) throw ArgumentError("HierarchicalAgent: split needs 0 < m_h < m");
      m_l_ = m - m_h_;
    }
    auto sizes = [&](std::size_t in, std::size_t out) {
      std::vector<std::size_t> s{in};
      s.insert(s.end(), cfg.hidden.begin(), cfg.hidden.end());
      s.push_back(out);
      return s;
    };
    if (m_h_) {
      pi_h = Mlp(sizes(n, m_h_), cfg.activation, Activation::tanh);
      q_h = Mlp(sizes(n + m_h_, 1), cfg.activation);
    }
    pi_l = Mlp(sizes(n + m_h_, m_l_), cfg.activation, Activation::tanh);
    q_l = Mlp(sizes(n + m_l_, 1), cfg.activation);
    q_h_target = q_h;
    q_l_target = q_l;
  }

  void init(RngStream& rng) {
    if (m_h_) {
      pi_h.init(rng, cfg_.init_output_scale);
      q_h.init(rng, cfg_.init_output_scale);
    }
    pi_l.init(rng, cfg_.init_output_scale);
    q_l.init(rng, cfg_.init_output_scale);
    q_h_target = q_h;
    q_l_target = q_l;
    latched.clear();
  }

  std::size_t state_dim() const { return n_; }
  std::size_t action_dim() const { return m_; }
  std::size_t high_dim() const { return m_h_; }
  std::size_t low_dim() const { return m_l_; }
  bool flat() const { return m_h_ == 0; }
  double action_bound() const { return bound_; }
  const AgentConfig& config() const { return cfg_; }

  Vector observation(std::span<const double> obs) const {
    if (obs.size() != n_) throw DimensionError("HierarchicalAgent: observation length");
    Vector s(obs.begin(), obs.end());
    if (cfg_.obs_scale != 1.0)
      for (double& v : s) v /= cfg_.obs_scale;
    return s;
  }
  Vector high_input(std::span<const double> obs) const { return observation(obs); }
  Vector low_input(std::span<const double> obs, std::span<const double> a_h) const {
    return m_h_ ? concat(observation(obs), Vector(a_h.begin(), a_h.end())) : observation(obs);
  }
  Vector high_critic_input(std::span<const double> obs, std::span<const double> a_h) const {
    return concat(observation(obs), Vector(a_h.begin(), a_h.end()));
  }
  Vector low_critic_input(std::span<const double> obs, std::span<const double> a_l) const {
    return concat(observation(obs), Vector(a_l.begin(), a_l.end()));
  }

  Vector high_mean(std::span<const double> obs) const { return m_h_ ? pi_h.forward(high_input(obs)) : Vector{}; }
  Vector low_mean(std::span<const double> obs, std::span<const double> a_h) const {
    return pi_l.forward(low_input(obs, a_h));
  }

  Vector compose(std::span<const double> a_h, std::span<const double> a_l) const {
    Vector u;
    u.reserve(m_);
    if (!flat() && cfg_.mode == HierarchyMode::split)
      for (double v : a_h) u.push_back(bound_ * v);
    for (double v : a_l) u.push_back(bound_ * v);
    return u;
  }

  void reset() { latched.clear(); }

  /// Refreshes the latched a_h when step % T_h == 0; exploration noise is in [-1, 1] units.
  Action act(std::span<const double> obs, std::size_t step, RngStream& rng, double explore_std) {
    Action a;
    if (m_h_) {
      if (step % cfg_.option_length == 0 || latched.size() != m_h_) {
        latched = high_mean(obs);
        perturb(latched, rng, explore_std);
      }
      a.a_h = latched;
    }
    a.a_l = low_mean(obs, a.a_h);
    perturb(a.a_l, rng, explore_std);
    a.u = compose(a.a_h, a.a_l);
    return a;
  }

  Mlp pi_h, pi_l, q_h, q_l, q_h_target, q_l_target;
  Vector latched;

 private:
  static void perturb(Vector& a, RngStream& rng, double std) {
    for (double& v : a) {
      if (std > 0.0) v += std * rng.standard_normal();
      v = std::clamp(v, -1.0, 1.0);
    }
  }

  std::size_t n_ = 0, m_ = 0, m_h_ = 0, m_l_ = 0;
  double bound_ = 1.0;
  AgentConfig cfg_;
};

// ---------------------------------------------------------------------------------------------
// Returns and TD losses

/// sum_k gamma^k r_k. An empty window returns 0 and sets *empty_warning when given.
inline double high_level_return(std::span<const double> rewards, double gamma, bool* empty_warning = nullptr) {
  if (empty_warning) *empty_warning = rewards.empty();
  double g = 1.0, s = 0.0;
  for (double r : rewards) {
    s += g * r;
    g *= gamma;
  }
  return s;
}

struct TdResult {
  double loss_l = 0.0;
  double loss_h = 0.0;
  Vector td_l;  // target minus estimate
  Vector td_h;
};

/// Low-level transitions use one control step; high-level transitions carry a full option window
/// (state = window start, reward = discounted window return, next_state = window end).
/// Weights default to 1; gradients of the losses are accumulated when the outputs are given.
inline TdResult td_losses(const HierarchicalAgent& ag, const std::vector<const Transition*>& low,
                          const std::vector<const Transition*>& high, std::span<const double> w_low = {},
                          std::span<const double> w_high = {}, Vector* grad_ql = nullptr,
                          Vector* grad_qh = nullptr) {
  TdResult r;
  const double gamma = ag.config().gamma;
  for (std::size_t i = 0; i < low.size(); ++i) {
    const Transition& t = *low[i];
    double y = t.reward;
    if (!t.done) {
      Vector a_h_next;
      if (!ag.flat())
        a_h_next = (t.step_in_option + 1) % ag.config().option_length == 0 ? ag.high_mean(t.next_state)
                                                                             : t.high_action;
      const Vector a_l_next = ag.low_mean(t.next_state, a_h_next);
      y += gamma * ag.q_l_target.forward(ag.low_critic_input(t.next_state, a_l_next))[0];
    }
    const Vector in = ag.low_critic_input(t.state, t.low_action);
    Mlp::Tape tape;
    const double q = ag.q_l.forward(in, tape)[0];
    const double td = y - q;
    const double w = w_low.empty() ? 1.0 : w_low[i];
    r.td_l.push_back(td);
    r.loss_l += w * td * td;
    if (grad_ql) {
      const double up = -2.0 * w * td / static_cast<double>(low.size());
      ag.q_l.backward(tape, Vector{up}, *grad_ql);
    }
  }
  if (!low.empty()) r.loss_l /= static_cast<double>(low.size());
  if (ag.flat()) return r;
  const double big_gamma = ag.config().high_gamma;
  for (std::size_t i = 0; i < high.size(); ++i) {
    const Transition& t = *high[i];
    double y = t.reward;
    if (!t.done) {
      const Vector a_h_next = ag.high_mean(t.next_state);
      y += big_gamma * ag.q_h_target.forward(ag.high_critic_input(t.next_state, a_h_next))[0];
    }
    Mlp::Tape tape;
    const double q = ag.q_h.forward(ag.high_critic_input(t.state, t.high_action), tape)[0];
    const double td = y - q;
    const double w = w_high.empty() ? 1.0 : w_high[i];
    r.td_h.push_back(td);
    r.loss_h += w * td * td;
    if (grad_qh) {
      const double up = -2.0 * w * td / static_cast<double>(high.size());
      ag.q_h.backward(tape, Vector{up}, *grad_qh);
    }
  }
  if (!high.empty()) r.loss_h /= static_cast<double>(high.size());
  return r;
}

// ---------------------------------------------------------------------------------------------
// Actor gradients

struct ActorGradients {
  Vector d_low;   // ascent direction for pi_l (empty when not requested)
  Vector d_high;  // ascent direction for pi_h
  double hinge_mean = 0.0;
  double violation_rate = 0.0;
  double q_mean = 0.0;
  double pre_clip_norm_low = 0.0;
  double pre_clip_norm_high = 0.0;
};

struct ActorRequest {
  bool low = true;
  bool high = false;
  double clip = 1.0;
};

/// d/dtheta of mean[Q(x, pi(x))] - lambda * mean[max(0, LV(x, pi(x)) + alpha V - beta)]. The
/// constraint reaches the actors through the action argument of LV; pi_h sees its own critic Q_h
/// and the constraint through both its direct action channels (split) and the low-level input.
/// `v` may be null, and lambda == 0 skips the constraint code entirely.
template <class V>
ActorGradients actor_gradients(const HierarchicalAgent& ag, const std::vector<const Transition*>& batch,
                               const V* v, const SdeModel& model, double lambda,
                               const GeneratorConfig& gcfg = {}, const ActorRequest& req = {}) {
  if (batch.empty()) throw ArgumentError("actor_gradients: empty batch");
  ActorGradients g;
  const bool high = req.high && !ag.flat();
  if (req.low) g.d_low.assign(ag.pi_l.num_params(), 0.0);
  if (high) g.d_high.assign(ag.pi_h.num_params(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const bool split = !ag.flat() && ag.config().mode == HierarchyMode::split;
  const std::size_t m_h = ag.high_dim(), m_l = ag.low_dim();
  const bool constrained = v != nullptr && lambda != 0.0;
  std::size_t violations = 0;
  for (const Transition* tp : batch) {
    const Vector& x = tp->state;
    Mlp::Tape th, tl;
    Vector a_h;
    if (!ag.flat()) a_h = ag.pi_h.forward(ag.high_input(x), th);
    const Vector a_l = ag.pi_l.forward(ag.low_input(x, a_h), tl);

    Vector up_l(m_l, 0.0), up_h_direct(m_h, 0.0), up_l_constraint(m_l, 0.0);
    if (req.low) {
      Mlp::Tape tq;
      g.q_mean += ag.q_l.forward(ag.low_critic_input(x, a_l), tq)[0] * inv_n;
      const Vector dq = ag.q_l.input_gradient(tq, Vector{1.0});
      for (std::size_t i = 0; i < m_l; ++i) up_l[i] = dq[ag.state_dim() + i] * inv_n;
    }
    if (high) {
      Mlp::Tape tq;
      ag.q_h.forward(ag.high_critic_input(x, a_h), tq);
      const Vector dq = ag.q_h.input_gradient(tq, Vector{1.0});
      for (std::size_t i = 0; i < m_h; ++i) up_h_direct[i] = dq[ag.state_dim() + i] * inv_n;
    }
    if (constrained) {
      const Vector u = ag.compose(a_h, a_l);
      const double arg = generator(*v, model, x, u, tp->time, gcfg) + gcfg.alpha * v->value(x) - gcfg.beta;
      if (arg > 0.0) {
        ++violations;
        g.hinge_mean += arg * inv_n;
        const Vector gu = generator_action_grad(*v, model, x, u, tp->time);
        const double c = lambda * ag.action_bound() * inv_n;
        const std::size_t off = split ? m_h : 0;
        for (std::size_t i = 0; i < m_l; ++i) up_l_constraint[i] = -c * gu[off + i];
        if (split)
          for (std::size_t i = 0; i < m_h; ++i) up_h_direct[i] -= c * gu[i];
      }
    }
    if (req.low) {
      Vector up = up_l;
      for (std::size_t i = 0; i < m_l; ++i) up[i] += up_l_constraint[i];
      ag.pi_l.backward(tl, up, g.d_low);
    }
    if (high) {
      Vector up_h = up_h_direct;
      if (norm_inf(up_l_constraint) > 0.0) {
        const Vector through = ag.pi_l.input_gradient(tl, up_l_constraint);
        for (std::size_t i = 0; i < m_h; ++i) up_h[i] += through[ag.state_dim() + i];
      }
      ag.pi_h.backward(th, up_h, g.d_high);
    }
  }
  g.violation_rate = static_cast<double>(violations) * inv_n;
  if (req.low) g.pre_clip_norm_low = clip_global_norm_inplace(g.d_low, req.clip);
  if (high) g.pre_clip_norm_high = clip_global_norm_inplace(g.d_high, req.clip);
  return g;
}

inline ActorGradients actor_gradients(const HierarchicalAgent& ag, const std::vector<const Transition*>& batch,
                                      const ActorRequest& req = {}) {
  return actor_gradients<LyapunovNet>(ag, batch, nullptr, SdeModel{}, 0.0, {}, req);
}

// ---------------------------------------------------------------------------------------------
// Lagrange multiplier

struct LagrangeState {
  double lambda = 1.0;
  PowerSchedule rate{0.1, 0.6};
  double step_scale = 1.0;       // halved while the recent violation rate stays above threshold
  std::deque<double> window;     // recent violation rates
  std::size_t window_size = 100;
  double violation_threshold = 0.10;
  bool halve_lambda = false;     // literal reading: halve lambda itself instead of its step
  std::size_t halvings = 0;
};

/// lambda <- max(0, lambda + step_scale * rate(k) * violation_mean). A full window whose mean
/// violation rate exceeds the threshold halves the step size for subsequent updates and restarts
/// the window.
inline LagrangeState lambda_update(LagrangeState s, double violation_mean, double violation_rate, double k) {
  if (violation_mean < 0.0) throw ArgumentError("lambda_update: violation mean must be >= 0");
  s.lambda = std::max(0.0, s.lambda + s.step_scale * s.rate(k) * violation_mean);
  s.window.push_back(violation_rate);
  if (s.window.size() > s.window_size) s.window.pop_front();
  if (s.window.size() == s.window_size) {
    double mean = 0.0;
    for (double r : s.window) mean += r;
    mean /= static_cast<double>(s.window.size());
    if (mean > s.violation_threshold) {
      if (s.halve_lambda)
        s.lambda *= 0.5;
      else
        s.step_scale *= 0.5;
      ++s.halvings;
      s.window.clear();
    }
  }
  return s;
}

// ---------------------------------------------------------------------------------------------
// Trust region

/// Mean over inputs of ||mu_new - mu_old||^2 / (2 std^2): KL between equal-covariance Gaussians.
inline double kl_gaussian(const Mlp& old_policy, const Mlp& new_policy, const std::vector<Vector>& inputs,
                          double std) {
  if (!(std > 0.0)) throw ArgumentError("kl_gaussian: std must be positive");
  if (inputs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& x : inputs) {
    const Vector a = old_policy.forward(x), b = new_policy.forward(x);
    s += norm2_squared(sub(b, a));
  }
  return s / (2.0 * std * std * static_cast<double>(inputs.size()));
}

struct TrustRegionResult {
  bool accepted = false;
  double scale = 0.0;
  double kl = 0.0;
  std::size_t halvings = 0;
};

/// Backtracking on the step proposed - current with scales 1, 1/2, ... (at most max_halvings
/// halvings) until the KL on `inputs` is within delta. A rejected step leaves the net unchanged.
inline TrustRegionResult trust_region_apply(Mlp& net, const Vector& proposed, const std::vector<Vector>& inputs,
                                            double std, double delta = 0.01, std::size_t max_halvings = 10) {
  if (proposed.size() != net.num_params()) throw DimensionError("trust_region_apply: parameter length");
  const Mlp old = net;
  TrustRegionResult r;
  double scale = 1.0;
  for (std::size_t h = 0; h <= max_halvings; ++h, scale *= 0.5) {
    Vector& p = net.params();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = old.params()[i] + scale * (proposed[i] - old.params()[i]);
    const double kl = kl_gaussian(old, net, inputs, std);
    if (kl <= delta) {
      r.accepted = true;
      r.scale = scale;
      r.kl = kl;
      r.halvings = h;
      return r;
    }
  }
  net = old;
  r.halvings = max_halvings;
  return r;
}

}  // namespace lyapctl
