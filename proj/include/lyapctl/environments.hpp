// Benchmark plants: the 8D hyperchaotic system, a planar 5-DOF manipulator and a small linear
// test plant, each packaged as an SdeModel plus task metadata.
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>

#include "lyapctl/dynamics.hpp"
#include "lyapctl/numerics.hpp"

namespace lyapctl {

class ModelParameterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// r = -||x - x_d||^2 - rho ||u||^2.
inline double tracking_reward(const Vector& x, const Vector& u, const Vector& x_d,
                              double rho = 1e-3) {
  if (x.size() != x_d.size()) throw DimensionError("tracking_reward: state/reference mismatch");
  double e2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) e2 += (x[i] - x_d[i]) * (x[i] - x_d[i]);
  return -e2 - rho * norm2_squared(u);
}

struct TaskSpec {
  std::string name;
  SdeModel model;
  std::function<Vector(double)> reference;
  std::function<Vector(double)> reference_rate;
  double reward_rho = 1e-3;
  double horizon = 10.0;
  /// Integration step; the controller acts every `substeps` integration steps.
  double dt = 1e-3;
  std::size_t substeps = 1;
  Vector x0;
  double action_bound = 50.0;
  /// Std of additive Gaussian noise on observations (not on the integrated state).
  double sensor_noise_std = 0.0;
  double truncation_bound = 1e4;
  /// Operating point for the linearization used by pretraining.
  Vector linearization_state;
  Vector linearization_action;

  double control_dt() const { return dt * static_cast<double>(substeps); }
  double reward(const Vector& x, const Vector& u, double t) const {
    return tracking_reward(x, u, reference(t), reward_rho);
  }
};

/// Model of the tracking error e = x - x_d(t): de = [f(x_d + e, u, t) - dx_d/dt] dt + sigma dW.
inline SdeModel error_model(const TaskSpec& task) {
  SdeModel m = task.model;
  auto drift = task.model.drift;
  auto diffusion = task.model.diffusion;
  auto ref = task.reference;
  auto rate = task.reference_rate;
  m.drift = [drift, ref, rate](const Vector& e, const Vector& u, double t) {
    Vector f = drift(add(ref(t), e), u, t);
    const Vector r = rate(t);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] -= r[i];
    return f;
  };
  m.diffusion = [diffusion, ref](const Vector& e, const Vector& u, double t) {
    return diffusion(add(ref(t), e), u, t);
  };
  return m;
}

inline std::function<Vector(double)> constant_reference(Vector v) {
  return [v = std::move(v)](double) { return v; };
}

// ---------------------------------------------------------------------------------------------
// 8D hyperchaotic system

struct Hyperchaotic8D {
  std::array<double, 7> gamma{10.0, 76.0, 3.0, 0.2, 0.1, 0.1, 0.2};
  double process_noise_std = 0.1;
  Vector x0{-1.1, -1.4, 1.7, 0.8, 1.45, -1.6, -1.8, 1.34};
  Vector target{1, 1, 1, 1, 0, 0, 0, 0};
  double action_bound = 50.0;
  double dt = 1e-3;
  std::size_t substeps = 10;
  double horizon = 10.0;
};

inline Vector hyperchaotic_drift(const Vector& x, const Vector& u,
                                 const std::array<double, 7>& g) {
  if (x.size() != 8 || u.size() != 8) throw DimensionError("hyperchaotic_drift: expects 8-vectors");
  return {
      g[0] * (x[1] - x[0]) + x[3] + u[0],
      g[1] * x[0] - x[0] * x[2] + x[3] + u[1],
      x[0] * x[1] - x[2] - x[3] + x[6] + u[2],
      -g[2] * (x[0] + x[1]) + x[4] + u[3],
      -x[1] - g[3] * x[3] + x[5] + u[4],
      -g[4] * (x[0] + x[4]) + g[3] * x[6] + u[5],
      -g[5] * (x[0] + x[5] - x[7]) + u[6],
      -g[6] * x[6] + u[7],
  };
}

inline Vector hyperchaotic_drift(const Vector& x, const Vector& u) {
  return hyperchaotic_drift(x, u, Hyperchaotic8D{}.gamma);
}

inline SdeModel hyperchaotic_model(const Hyperchaotic8D& p) {
  SdeModel m;
  m.state_dim = 8;
  m.action_dim = 8;
  m.noise_dim = 8;
  m.drift = [g = p.gamma](const Vector& x, const Vector& u, double) {
    return hyperchaotic_drift(x, u, g);
  };
  m.diffusion = constant_diagonal_diffusion(Vector(8, p.process_noise_std));
  return m;
}

inline TaskSpec hyperchaotic_task(const Hyperchaotic8D& p = {}) {
  TaskSpec t;
  t.name = "hyperchaotic8d";
  t.model = hyperchaotic_model(p);
  t.reference = constant_reference(p.target);
  t.reference_rate = constant_reference(Vector(8, 0.0));
  t.horizon = p.horizon;
  t.dt = p.dt;
  t.substeps = p.substeps;
  t.x0 = p.x0;
  t.action_bound = p.action_bound;
  t.linearization_state = p.target;
  // Feedforward that holds the target as an equilibrium, clipped to the actuator bound.
  Vector u_star = scaled(hyperchaotic_drift(p.target, Vector(8, 0.0), p.gamma), -1.0);
  t.linearization_action = clipped(u_star, p.action_bound);
  return t;
}

// ---------------------------------------------------------------------------------------------
// Planar 5-DOF manipulator (vertical plane, q = 0 is the upright configuration)

struct Manipulator5DOF {
  // Canonical parameter set; the benchmark's physical parameters are not published with it.
  std::array<double, 5> link_masses{1, 1, 1, 1, 1};
  std::array<double, 5> link_lengths{0.5, 0.5, 0.5, 0.5, 0.5};
  double gravity = 9.81;
  double process_noise_std = std::sqrt(0.05);
  double actuator_noise_scale = 0.05;
  double sensor_noise_std = 0.1;
  Vector q0{-1.0, -2.0, 2.0, 1.0, 0.0};
  Vector qdot0{0.5, 1.0, -1.0, -0.5, 0.0};
  double reference_amplitude = 2.0;
  double reference_frequency = 0.5;
  std::array<double, 5> reference_phases{std::numbers::pi / 5, 2 * std::numbers::pi / 5,
                                         3 * std::numbers::pi / 5, 4 * std::numbers::pi / 5,
                                         6 * std::numbers::pi / 5};
  double disturbance_amplitude = 6.5;
  double disturbance_frequency = 4.0;
  double disturbance_start = 10.0;
  double disturbance_end = 20.0;
  double action_bound = 100.0;
  double dt = 0.01;
  std::size_t substeps = 1;
  double horizon = 30.0;

  /// a_kl = sum_i m_i c_ik c_il + I_k delta_kl with c_ik the lever of link i's COM on link k.
  Matrix coupling() const {
    Matrix a(5, 5);
    auto lever = [&](std::size_t i, std::size_t k) {
      if (k < i) return link_lengths[k];
      if (k == i) return 0.5 * link_lengths[i];
      return 0.0;
    };
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t l = 0; l < 5; ++l) {
        double s = 0.0;
        for (std::size_t i = 0; i < 5; ++i) s += link_masses[i] * lever(i, k) * lever(i, l);
        if (k == l) s += link_masses[k] * link_lengths[k] * link_lengths[k] / 12.0;
        a(k, l) = s;
      }
    return a;
  }

  /// sum_i m_i c_ik: first moment of the chain distal to (and including) link k.
  std::array<double, 5> first_moments() const {
    std::array<double, 5> s{};
    for (std::size_t k = 0; k < 5; ++k) {
      s[k] = 0.5 * link_masses[k] * link_lengths[k];
      for (std::size_t i = k + 1; i < 5; ++i) s[k] += link_masses[i] * link_lengths[k];
    }
    return s;
  }
};

namespace detail {
// Absolute link angles theta = T q with T lower-triangular ones.
inline Vector absolute_angles(const Vector& q) {
  Vector th(q.size());
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) th[i] = (s += q[i]);
  return th;
}
// T^T v: suffix sums.
inline Vector transpose_t(const Vector& v) {
  Vector out(v.size());
  double s = 0.0;
  for (std::size_t i = v.size(); i-- > 0;) out[i] = (s += v[i]);
  return out;
}
}  // namespace detail

inline Matrix mass_matrix(const Manipulator5DOF& p, const Vector& q) {
  if (q.size() != 5) throw DimensionError("mass_matrix: expects 5 joints");
  const Matrix a = p.coupling();
  const Vector th = detail::absolute_angles(q);
  Matrix mt(5, 5);
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t l = 0; l < 5; ++l) mt(k, l) = a(k, l) * std::cos(th[k] - th[l]);
  // M_q = T^T M_theta T; (M_theta T)_{kj} = sum_{l>=j} M_theta(k,l).
  Matrix mq(5, 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < 5; ++k)
        for (std::size_t l = j; l < 5; ++l) s += mt(k, l);
      mq(i, j) = s;
    }
  return mq;
}

/// C(q, qdot) qdot.
inline Vector coriolis_vector(const Manipulator5DOF& p, const Vector& q, const Vector& qdot) {
  if (q.size() != 5 || qdot.size() != 5) throw DimensionError("coriolis_vector: expects 5 joints");
  const Matrix a = p.coupling();
  const Vector th = detail::absolute_angles(q);
  const Vector w = detail::absolute_angles(qdot);
  Vector h(5, 0.0);
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t l = 0; l < 5; ++l) h[k] += a(k, l) * std::sin(th[k] - th[l]) * w[l] * w[l];
  return detail::transpose_t(h);
}

inline Vector gravity_vector(const Manipulator5DOF& p, const Vector& q) {
  if (q.size() != 5) throw DimensionError("gravity_vector: expects 5 joints");
  const auto s = p.first_moments();
  const Vector th = detail::absolute_angles(q);
  Vector g(5);
  for (std::size_t k = 0; k < 5; ++k) g[k] = -p.gravity * s[k] * std::sin(th[k]);
  return detail::transpose_t(g);
}

/// Total mechanical energy (kinetic + potential, zero potential at the base height).
inline double manipulator_energy(const Manipulator5DOF& p, const Vector& q, const Vector& qdot) {
  const auto s = p.first_moments();
  const Vector th = detail::absolute_angles(q);
  double pe = 0.0;
  for (std::size_t k = 0; k < 5; ++k) pe += p.gravity * s[k] * std::cos(th[k]);
  return 0.5 * quadratic_form(mass_matrix(p, q), qdot) + pe;
}

inline Vector manipulator_disturbance(const Manipulator5DOF& p, double t) {
  if (t < p.disturbance_start || t >= p.disturbance_end) return Vector(5, 0.0);
  const double c = 0.5 * p.disturbance_amplitude;
  const double f = p.disturbance_frequency;
  constexpr double pi = std::numbers::pi;
  // Rows 4 and 5 reuse the 2pi/5 phase.
  return {c * std::sin(f * t + pi / 5), c * 0.9 * std::sin(f * t + 2 * pi / 5),
          c * std::sin(f * t + 3 * pi / 5), c * 0.9 * std::sin(f * t + 2 * pi / 5),
          c * std::sin(f * t + 2 * pi / 5)};
}

inline Vector reference_manipulator(const Manipulator5DOF& p, double t) {
  Vector r(5);
  for (std::size_t i = 0; i < 5; ++i)
    r[i] = p.reference_amplitude * std::sin(p.reference_frequency * t + p.reference_phases[i]);
  return r;
}

inline Vector reference_manipulator(double t) { return reference_manipulator(Manipulator5DOF{}, t); }

inline Matrix checked_mass_factor(const Manipulator5DOF& p, const Vector& q) {
  try {
    return cholesky_factor(mass_matrix(p, q));
  } catch (const SolverError&) {
    throw ModelParameterError("manipulator: inertia matrix not positive definite");
  }
}

/// Deterministic part of qddot: M^-1 (u - C qdot - G + Dist).
inline Vector manipulator_accel_mean(const Manipulator5DOF& p, const Vector& q, const Vector& qdot,
                                     const Vector& u, double t) {
  if (u.size() != 5) throw DimensionError("manipulator_accel: expects 5 torques");
  const Matrix l = checked_mass_factor(p, q);
  const Vector c = coriolis_vector(p, q, qdot);
  const Vector g = gravity_vector(p, q);
  const Vector d = manipulator_disturbance(p, t);
  Vector rhs(5);
  for (std::size_t i = 0; i < 5; ++i) rhs[i] = u[i] - c[i] - g[i] + d[i];
  return cholesky_solve(l, rhs);
}

/// One sample of qddot with the process and actuator noise torques drawn from rng.
inline Vector manipulator_accel(const Manipulator5DOF& p, const Vector& q, const Vector& qdot,
                                const Vector& u, double t, RngStream& rng) {
  if (u.size() != 5) throw DimensionError("manipulator_accel: expects 5 torques");
  Vector tau = u;
  for (std::size_t i = 0; i < 5; ++i) tau[i] += gaussian(rng, 0.0, p.process_noise_std);
  for (std::size_t i = 0; i < 5; ++i)
    tau[i] += gaussian(rng, 0.0, p.actuator_noise_scale * std::abs(u[i]));
  return manipulator_accel_mean(p, q, qdot, tau, t);
}

/// State x = [q, qdot]; noise channels [w (5), actuator (5)] enter through M^-1.
inline SdeModel manipulator_model(const Manipulator5DOF& p) {
  SdeModel m;
  m.state_dim = 10;
  m.action_dim = 5;
  m.noise_dim = 10;
  m.action_dependent_diffusion = p.actuator_noise_scale != 0.0;
  m.drift = [p](const Vector& x, const Vector& u, double t) {
    const Vector q(x.begin(), x.begin() + 5);
    const Vector qd(x.begin() + 5, x.end());
    const Vector acc = manipulator_accel_mean(p, q, qd, u, t);
    return concat(qd, acc);
  };
  m.diffusion = [p](const Vector& x, const Vector& u, double) {
    const Vector q(x.begin(), x.begin() + 5);
    const Matrix minv = inverse(mass_matrix(p, q));
    Matrix s(10, 10);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        s(5 + i, j) = minv(i, j) * p.process_noise_std;
        s(5 + i, 5 + j) = minv(i, j) * p.actuator_noise_scale * u[j];
      }
    return s;
  };
  return m;
}

inline TaskSpec manipulator_task(const Manipulator5DOF& p = {}) {
  TaskSpec t;
  t.name = "manipulator5dof";
  t.model = manipulator_model(p);
  t.reference = [p](double time) {
    Vector r = reference_manipulator(p, time);
    Vector rd(5);
    for (std::size_t i = 0; i < 5; ++i)
      rd[i] = p.reference_amplitude * p.reference_frequency *
              std::cos(p.reference_frequency * time + p.reference_phases[i]);
    return concat(r, rd);
  };
  t.reference_rate = [p](double time) {
    const double w = p.reference_frequency;
    Vector out(10);
    for (std::size_t i = 0; i < 5; ++i) {
      out[i] = p.reference_amplitude * w * std::cos(w * time + p.reference_phases[i]);
      out[5 + i] = -p.reference_amplitude * w * w * std::sin(w * time + p.reference_phases[i]);
    }
    return out;
  };
  t.horizon = p.horizon;
  t.dt = p.dt;
  t.substeps = p.substeps;
  t.x0 = concat(p.q0, p.qdot0);
  t.action_bound = p.action_bound;
  t.sensor_noise_std = p.sensor_noise_std;
  t.linearization_state = Vector(10, 0.0);
  t.linearization_action = Vector(5, 0.0);
  return t;
}

// ---------------------------------------------------------------------------------------------
// Linear test plant dx = (A x + B u) dt + s dW, used for checks with closed-form answers.

struct LinearTest {
  Matrix a{{0.0, 1.0}, {-2.0, -3.0}};
  Matrix b = Matrix::identity(2);
  double noise_std = 0.05;
  Vector x0{1.5, -1.0};
  double action_bound = 10.0;
  double dt = 0.01;
  std::size_t substeps = 1;
  double horizon = 10.0;
};

inline SdeModel linear_model(const Matrix& a, const Matrix& b, double noise_std) {
  SdeModel m;
  m.state_dim = a.rows();
  m.action_dim = b.cols();
  m.noise_dim = a.rows();
  m.drift = [a, b](const Vector& x, const Vector& u, double) {
    return add(matvec(a, x), matvec(b, u));
  };
  m.diffusion = constant_diagonal_diffusion(Vector(a.rows(), noise_std));
  return m;
}

inline TaskSpec linear_test_task(const LinearTest& p = {}) {
  TaskSpec t;
  t.name = "linear-test";
  t.model = linear_model(p.a, p.b, p.noise_std);
  const std::size_t n = p.a.rows();
  t.reference = constant_reference(Vector(n, 0.0));
  t.reference_rate = constant_reference(Vector(n, 0.0));
  t.horizon = p.horizon;
  t.dt = p.dt;
  t.substeps = p.substeps;
  t.x0 = p.x0;
  t.action_bound = p.action_bound;
  t.linearization_state = Vector(n, 0.0);
  t.linearization_action = Vector(p.b.cols(), 0.0);
  return t;
}

}  // namespace lyapctl
