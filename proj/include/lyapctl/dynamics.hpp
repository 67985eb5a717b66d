// Controlled SDE models dx = f(x,u,t) dt + sigma(x,u) dW, Euler-Maruyama integration,
// trajectory rollouts and finite-difference linearization.
#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <utility>

#include "lyapctl/csv.hpp"
#include "lyapctl/numerics.hpp"

namespace lyapctl {

struct SdeModel {
  using DriftFn = std::function<Vector(const Vector& x, const Vector& u, double t)>;
  using DiffusionFn = std::function<Matrix(const Vector& x, const Vector& u, double t)>;

  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::size_t noise_dim = 0;
  DriftFn drift;
  DiffusionFn diffusion;
  /// True when sigma depends on the action (e.g. multiplicative actuator noise).
  bool action_dependent_diffusion = false;

  Vector eval_drift(const Vector& x, const Vector& u, double t = 0.0) const {
    Vector f = drift(x, u, t);
    if (f.size() != state_dim) throw DimensionError("SdeModel: drift returned wrong length");
    return f;
  }
  Matrix eval_diffusion(const Vector& x, const Vector& u, double t = 0.0) const {
    Matrix s = diffusion(x, u, t);
    if (s.rows() != state_dim || s.cols() != noise_dim)
      throw DimensionError("SdeModel: diffusion returned wrong shape");
    return s;
  }
};

/// Constant diffusion sigma = diag(stds) (r = n).
inline SdeModel::DiffusionFn constant_diagonal_diffusion(Vector stds) {
  return [m = Matrix::diagonal(stds)](const Vector&, const Vector&, double) { return m; };
}

class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, Vector state)
      : std::runtime_error(what), state_(std::move(state)) {}
  const Vector& state() const { return state_; }

 private:
  Vector state_;
};

/// One Euler-Maruyama step: x + f dt + sigma sqrt(dt) xi, xi ~ N(0, I_r).
inline Vector em_step(const SdeModel& model, const Vector& x, const Vector& u, double dt,
                      RngStream& rng, double t = 0.0) {
  if (!(dt > 0.0)) throw ArgumentError("em_step: dt must be positive");
  if (x.size() != model.state_dim) throw DimensionError("em_step: state has wrong length");
  if (u.size() != model.action_dim) throw DimensionError("em_step: action has wrong length");
  Vector f = model.eval_drift(x, u, t);
  if (!all_finite(f)) throw IntegrationError("em_step: non-finite drift", x);
  Vector next(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) next[i] = x[i] + f[i] * dt;
  if (model.noise_dim > 0) {
    const Matrix sigma = model.eval_diffusion(x, u, t);
    if (!all_finite(sigma.data())) throw IntegrationError("em_step: non-finite diffusion", x);
    const Vector xi = rng.standard_normal_vector(model.noise_dim);
    const double sq = std::sqrt(dt);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double s = 0.0;
      auto r = sigma.row(i);
      for (std::size_t j = 0; j < model.noise_dim; ++j) s += r[j] * xi[j];
      next[i] += s * sq;
    }
  }
  return next;
}

struct Trajectory {
  Vector times;
  std::vector<Vector> states;
  std::vector<Vector> actions;
  Vector rewards;
  bool truncated = false;

  std::size_t steps() const { return actions.size(); }
};

struct RolloutOptions {
  /// Episode is cut when ||x||_inf exceeds this bound.
  double truncation_bound = 1e4;
};

/// Simulates horizon/dt steps (rounded). The state that crosses the truncation bound is not
/// recorded; the trajectory ends at the last in-bound state and is flagged truncated.
inline Trajectory rollout(const SdeModel& model,
                          const std::function<Vector(const Vector&, double)>& policy,
                          const Vector& x0, double dt, double horizon, RngStream& rng,
                          const std::function<double(const Vector&, const Vector&, double)>& reward,
                          RolloutOptions opts = {}) {
  if (!(dt > 0.0)) throw ArgumentError("rollout: dt must be positive");
  if (horizon < dt * (1.0 - 1e-12)) throw ArgumentError("rollout: horizon shorter than dt");
  const auto steps = static_cast<std::size_t>(std::llround(horizon / dt));
  Trajectory traj;
  traj.times.reserve(steps + 1);
  traj.states.reserve(steps + 1);
  traj.times.push_back(0.0);
  traj.states.push_back(x0);
  Vector x = x0;
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    Vector u = policy(x, t);
    const double r = reward ? reward(x, u, t) : 0.0;
    Vector next = em_step(model, x, u, dt, rng, t);
    traj.actions.push_back(std::move(u));
    traj.rewards.push_back(r);
    if (norm_inf(next) > opts.truncation_bound) {
      traj.actions.pop_back();
      traj.rewards.pop_back();
      traj.truncated = true;
      break;
    }
    x = std::move(next);
    traj.times.push_back(static_cast<double>(k + 1) * dt);
    traj.states.push_back(x);
  }
  return traj;
}

/// Central finite-difference Jacobians (A = df/dx, B = df/du) of the drift.
inline std::pair<Matrix, Matrix> linearize(const SdeModel& model, const Vector& x_star,
                                           const Vector& u_star, double h = 1e-5,
                                           double t = 0.0) {
  const std::size_t n = model.state_dim;
  const std::size_t m = model.action_dim;
  if (x_star.size() != n || u_star.size() != m)
    throw DimensionError("linearize: operating point has wrong dimensions");
  Matrix a(n, n);
  Matrix b(n, m);
  for (std::size_t j = 0; j < n; ++j) {
    Vector xp = x_star, xm = x_star;
    xp[j] += h;
    xm[j] -= h;
    const Vector fp = model.eval_drift(xp, u_star, t);
    const Vector fm = model.eval_drift(xm, u_star, t);
    for (std::size_t i = 0; i < n; ++i) a(i, j) = (fp[i] - fm[i]) / (2.0 * h);
  }
  for (std::size_t j = 0; j < m; ++j) {
    Vector up = u_star, um = u_star;
    up[j] += h;
    um[j] -= h;
    const Vector fp = model.eval_drift(x_star, up, t);
    const Vector fm = model.eval_drift(x_star, um, t);
    for (std::size_t i = 0; i < n; ++i) b(i, j) = (fp[i] - fm[i]) / (2.0 * h);
  }
  return {std::move(a), std::move(b)};
}

/// CSV with columns t, x1..xn, u1..um, r. The final state has no action or reward; those
/// cells are left empty.
inline void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
  const std::size_t n = traj.states.empty() ? 0 : traj.states.front().size();
  const std::size_t m = traj.actions.empty() ? 0 : traj.actions.front().size();
  std::vector<std::string> header{"t"};
  for (std::size_t i = 0; i < n; ++i) header.push_back("x" + std::to_string(i + 1));
  for (std::size_t i = 0; i < m; ++i) header.push_back("u" + std::to_string(i + 1));
  header.push_back("r");
  csv::write_row(out, header);
  for (std::size_t k = 0; k < traj.states.size(); ++k) {
    std::vector<std::string> row{csv::format_double(traj.times[k])};
    for (double v : traj.states[k]) row.push_back(csv::format_double(v));
    if (k < traj.actions.size()) {
      for (double v : traj.actions[k]) row.push_back(csv::format_double(v));
      row.push_back(csv::format_double(traj.rewards[k]));
    } else {
      for (std::size_t i = 0; i <= m; ++i) row.emplace_back();
    }
    csv::write_row(out, row);
  }
}

}  // namespace lyapctl
