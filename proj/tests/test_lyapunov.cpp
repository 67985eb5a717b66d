#include <gtest/gtest.h>

#include <cmath>

#include "lyapctl/environments.hpp"
#include "lyapctl/lyapunov.hpp"

using namespace lyapctl;

namespace {

SdeModel scalar_ou(double sigma) {
  SdeModel m;
  m.state_dim = 1;
  m.action_dim = 1;
  m.noise_dim = 1;
  m.drift = [](const Vector& x, const Vector& u, double) { return Vector{-x[0] + u[0]}; };
  m.diffusion = constant_diagonal_diffusion({sigma});
  return m;
}

LyapunovNet small_net(RngStream& rng, std::size_t n = 3) {
  LyapunovNet v(n, {6}, 4);
  v.init(rng);
  for (double& p : v.params()) p += 0.1 * rng.standard_normal();
  return v;
}

LyapunovRbf small_rbf(RngStream& rng, std::size_t n = 3) {
  LyapunovRbf v(n, 4);
  v.init(rng, 1.0, 0.3);
  for (double& p : v.params()) p += 0.1 * rng.standard_normal();
  return v;
}

Matrix random_sigma(RngStream& rng, std::size_t n, std::size_t r) {
  Matrix s(n, r);
  for (double& v : s.data()) v = 0.3 * rng.standard_normal();
  return s;
}

double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max(floor, std::max(std::abs(a), std::abs(b)));
}

// Checks an accumulate_* parameter gradient against central differences of a scalar functional.
template <class V, class F, class G>
void check_param_grad(V v, F functional, G accumulate, double tol = 1e-4) {
  Vector grad(v.num_params(), 0.0);
  accumulate(v, grad);
  v.flush_grad(grad);
  const double h = 1e-6;
  for (std::size_t i = 0; i < v.num_params(); ++i) {
    V a = v, b = v;
    a.params()[i] += h;
    b.params()[i] -= h;
    const double fd = (functional(a) - functional(b)) / (2 * h);
    // Nested finite differences leave ~1e-6 absolute noise on near-zero entries.
    ASSERT_LT(rel_err(fd, grad[i], 1e-4), tol) << "param " << i << " fd " << fd << " analytic " << grad[i];
  }
}

}  // namespace

TEST(Value, ZeroAtOrigin) {
  RngStream rng(1, 0);
  EXPECT_EQ(small_net(rng).value(Vector(3, 0.0)), 0.0);
  EXPECT_NEAR(small_rbf(rng).value(Vector(3, 0.0)), 0.0, 1e-15);
  EXPECT_EQ(LyapunovNet::quadratic(2).value(Vector(2, 0.0)), 0.0);
}

TEST(Value, IdentityFeaturesWithIdentityP) {
  const LyapunovNet v = LyapunovNet::quadratic(2);
  EXPECT_NEAR(v.value(Vector{1.0, 1.0}), 2.0 * (1.0 + 1e-3), 1e-12);
}

TEST(Value, RbfWithZeroWeightsIsQuadraticFloor) {
  LyapunovRbf v(4, 5);
  RngStream rng(2, 0);
  v.init(rng);
  for (std::size_t j = 0; j < 5; ++j) v.set_weight(j, 0.0);
  EXPECT_NEAR(v.value(Vector{2.0, 0.0, 0.0, 0.0}), 0.04, 1e-15);
}

TEST(GradTrace, QuadraticOracle) {
  LyapunovNet v = LyapunovNet::quadratic(2);
  v.eps0 = 0.0;
  const Matrix p{{2.0, 0.5}, {0.5, 1.0}};
  v.set_p(p);
  const Vector x{0.7, -1.2};
  const Vector g = v.grad_x(x);
  const Vector expected = scaled(matvec(p, x), 2.0);
  EXPECT_NEAR(g[0], expected[0], 1e-12);
  EXPECT_NEAR(g[1], expected[1], 1e-12);
  v.set_p(Matrix::identity(2));
  const Matrix sigma = 0.1 * Matrix::identity(2);
  EXPECT_NEAR(hessian_trace(v, x, sigma, TraceBackend::closed_form), 0.02, 1e-14);
  EXPECT_NEAR(hessian_trace(v, x, sigma, TraceBackend::finite_difference), 0.02, 1e-9);
}

TEST(GradTrace, RbfBumpStationaryAtCentre) {
  LyapunovRbf v(3, 1);
  v.eps = 0.0;
  const Vector mu{0.5, -0.2, 1.0};
  v.set_center(0, mu);
  v.set_weight(0, 1.0);
  v.set_width(0, 0.8);
  // The slope correction is a constant vector; the bump itself contributes nothing at its centre.
  const Vector g_mu = v.grad_x(mu), g_far = v.grad_x(Vector{50.0, 50.0, 50.0});
  EXPECT_LT(norm_inf(sub(g_mu, g_far)), 1e-12);
}

TEST(GradTrace, GradientMatchesFiniteDifferences) {
  RngStream rng(3, 0);
  const LyapunovNet net = small_net(rng);
  const LyapunovRbf rbf = small_rbf(rng);
  for (int k = 0; k < 5; ++k) {
    const Vector x = rng.standard_normal_vector(3);
    const Vector gn = net.grad_x(x), gr = rbf.grad_x(x);
    for (std::size_t i = 0; i < 3; ++i) {
      Vector xp = x, xm = x;
      xp[i] += 1e-6;
      xm[i] -= 1e-6;
      EXPECT_LT(rel_err((net.value(xp) - net.value(xm)) / 2e-6, gn[i]), 1e-6);
      EXPECT_LT(rel_err((rbf.value(xp) - rbf.value(xm)) / 2e-6, gr[i]), 1e-6);
    }
  }
}

TEST(GradTrace, FiniteDifferenceTraceAgreesWithClosedForm) {
  RngStream rng(4, 0);
  const LyapunovRbf v = small_rbf(rng, 5);
  for (int k = 0; k < 10; ++k) {
    const Vector x = rng.standard_normal_vector(5);
    const Matrix sigma = random_sigma(rng, 5, 3);
    const double cf = hessian_trace(v, x, sigma, TraceBackend::closed_form);
    const double fd = hessian_trace(v, x, sigma, TraceBackend::finite_difference);
    EXPECT_LT(rel_err(cf, fd), 1e-3);
  }
  const LyapunovNet net = small_net(rng, 5);
  EXPECT_THROW(hessian_trace(net, Vector(5, 0.1), Matrix::identity(5), TraceBackend::closed_form),
               ArgumentError);
}

TEST(Generator, LinearScalarOracle) {
  LyapunovNet v = LyapunovNet::quadratic(1);
  v.eps0 = 0.0;
  v.set_p(Matrix{{1.0}});
  const SdeModel m = scalar_ou(0.1);
  EXPECT_NEAR(generator(v, m, Vector{2.0}, Vector{0.0}), -7.99, 1e-9);
  GeneratorConfig cf;
  cf.backend = TraceBackend::closed_form;
  EXPECT_NEAR(generator(v, m, Vector{2.0}, Vector{0.0}, 0.0, cf), -7.99, 1e-12);
}

TEST(Generator, DeterministicAndEquilibrium) {
  RngStream rng(5, 0);
  const LyapunovNet v = small_net(rng, 2);
  const SdeModel m = linear_model(Matrix{{0.0, 1.0}, {-2.0, -3.0}}, Matrix::identity(2), 0.0);
  const Vector x{0.4, -0.3}, u{0.1, 0.2};
  EXPECT_NEAR(generator(v, m, x, u), dot(v.grad_x(x), m.eval_drift(x, u)), 1e-12);
  EXPECT_EQ(generator(v, m, Vector(2, 0.0), Vector(2, 0.0)), 0.0);
}

TEST(Generator, AdditiveInDrift) {
  RngStream rng(6, 0);
  const LyapunovRbf v = small_rbf(rng, 2);
  auto model_with = [](Matrix a) { return linear_model(a, Matrix::identity(2), 0.2); };
  const Matrix a1{{-1.0, 0.3}, {0.0, -2.0}}, a2{{0.5, 0.0}, {1.0, 0.2}};
  const Vector x{0.3, 0.8}, u{0.0, 0.0};
  const double l1 = generator(v, model_with(a1), x, u);
  const double l2 = generator(v, model_with(a2), x, u);
  const double l12 = generator(v, model_with(a1 + a2), x, u);
  const double trace = hessian_trace(v, x, 0.2 * Matrix::identity(2));
  EXPECT_NEAR(l12, l1 + l2 - trace, 1e-9);
}

TEST(ParamGrad, ValueDirectionalAndTrace) {
  RngStream rng(7, 0);
  const Vector x = rng.standard_normal_vector(3), d = rng.standard_normal_vector(3);
  const Matrix sigma = random_sigma(rng, 3, 2);
  auto run = [&](auto v) {
    using V = decltype(v);
    check_param_grad(v, [&](const V& w) { return w.value(x); },
                     [&](const V& w, Vector& g) { w.accumulate_value_grad(x, 1.0, g); });
    check_param_grad(v, [&](const V& w) { return w.directional(x, d); },
                     [&](const V& w, Vector& g) { w.accumulate_directional_grad(x, d, 1.0, g); });
    check_param_grad(
        v, [&](const V& w) { return hessian_trace(w, x, sigma); },
        [&](const V& w, Vector& g) { accumulate_trace_grad(w, x, sigma, 1.0, g); }, 2e-3);
  };
  run(small_net(rng));
  run(small_rbf(rng));
  LyapunovNet q = LyapunovNet::quadratic(3);
  for (double& p : q.params()) p += 0.2 * rng.standard_normal();
  run(q);
}

TEST(ParamGrad, ClosedFormTrace) {
  RngStream rng(8, 0);
  const Vector x = rng.standard_normal_vector(3);
  const Matrix sigma = random_sigma(rng, 3, 3);
  auto run = [&](auto v) {
    using V = decltype(v);
    check_param_grad(
        v, [&](const V& w) { return hessian_trace(w, x, sigma, TraceBackend::closed_form); },
        [&](const V& w, Vector& g) {
          accumulate_trace_grad(w, x, sigma, 1.0, g, TraceBackend::closed_form);
        });
  };
  run(small_rbf(rng));
  LyapunovNet q = LyapunovNet::quadratic(3);
  for (double& p : q.params()) p += 0.2 * rng.standard_normal();
  run(q);
}

TEST(ActionGrad, MatchesFiniteDifferenceWithActuatorNoise) {
  const TaskSpec task = manipulator_task();
  const SdeModel em = error_model(task);
  LyapunovNet v = LyapunovNet::quadratic(10);
  RngStream rng(9, 0);
  for (double& p : v.params()) p += 0.1 * rng.standard_normal();
  const Vector e = scaled(rng.standard_normal_vector(10), 0.3);
  const Vector u{3.0, -2.0, 1.0, 0.5, -4.0};
  GeneratorConfig cf;
  cf.backend = TraceBackend::closed_form;
  const Vector g = generator_action_grad(v, em, e, u, 2.0);
  for (std::size_t k = 0; k < 5; ++k) {
    Vector up = u, um = u;
    up[k] += 1e-4;
    um[k] -= 1e-4;
    const double fd = (generator(v, em, e, up, 2.0, cf) - generator(v, em, e, um, 2.0, cf)) / 2e-4;
    EXPECT_LT(rel_err(fd, g[k]), 1e-5) << k;
  }
}

TEST(Loss, ConstantHingeAndSlack) {
  LyapunovNet v = LyapunovNet::quadratic(1);
  v.eps0 = 0.0;
  v.set_p(Matrix{{1.0}});
  // At x = 0 the generator is sigma^2 P; with sigma^2 = 1.01 the hinge argument is exactly 1.
  const SdeModel m = scalar_ou(std::sqrt(1.01));
  std::vector<LyapunovSample> batch(4, LyapunovSample{{0.0}, {0.0}, 0.0, 1.0});
  GeneratorConfig cfg;
  cfg.backend = TraceBackend::closed_form;
  const auto r = lyapunov_loss(v, m, batch, cfg);
  EXPECT_NEAR(r.loss, 1.0, 1e-12);
  EXPECT_EQ(r.violation_rate, 1.0);
  cfg.beta = 1e6;
  EXPECT_EQ(lyapunov_loss(v, m, batch, cfg).loss, 0.0);
  EXPECT_THROW(lyapunov_loss(v, m, {}, cfg), ArgumentError);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  RngStream rng(10, 0);
  const SdeModel m = linear_model(Matrix{{0.5, 1.0, 0.0}, {-1.0, 0.2, 0.3}, {0.0, 0.4, 0.1}},
                                  Matrix::identity(3), 0.3);
  std::vector<LyapunovSample> batch;
  for (int k = 0; k < 6; ++k)
    batch.push_back({rng.standard_normal_vector(3), rng.standard_normal_vector(3), 0.0, rng.uniform(0.5, 1.0)});
  auto run = [&](auto v) {
    using V = decltype(v);
    check_param_grad(
        v, [&](const V& w) { return lyapunov_loss(w, m, batch).loss; },
        [&](const V& w, Vector& g) { lyapunov_loss(w, m, batch, {}, &g); }, 2e-3);
  };
  run(small_net(rng));
  run(small_rbf(rng));
}

TEST(Loss, NearZeroOnLqrStabilizedLinearSystem) {
  // On-policy batch for u = -K x on the linear test plant with V = x^T P x (P certifies A - BK).
  const TaskSpec task = linear_test_task();
  const SdeModel m = task.model;
  PretrainConfig pc;
  pc.control_dt = task.control_dt();
  const PretrainResult cert = lqr_certificate(m, Vector(2, 0.0), Vector(2, 0.0), pc);
  LyapunovNet v = LyapunovNet::quadratic(2);
  v.eps0 = 0.0;
  v.set_p(cert.p);
  RngStream rng(11, 0);
  std::vector<LyapunovSample> batch;
  Vector x = task.x0;
  for (int k = 0; k < 500; ++k) {
    const Vector u = scaled(matvec(cert.k, x), -1.0);
    batch.push_back({x, u, 0.0, 1.0});
    x = em_step(m, x, u, task.dt, rng);
  }
  GeneratorConfig cfg;
  cfg.backend = TraceBackend::closed_form;
  EXPECT_LT(lyapunov_loss(v, m, batch, cfg).loss, 1e-6);
}

TEST(Positivity, BothFormsAndFloors) {
  RngStream rng(12, 0);
  const LyapunovNet net = small_net(rng, 4);
  LyapunovRbf rbf(4, 50);
  rbf.init(rng);
  ASSERT_GT(rbf.certified_floor(), 0.0);
  for (int k = 0; k < 1000; ++k) {
    const Vector x = scaled(rng.standard_normal_vector(4), rng.uniform(0.01, 5.0));
    ASSERT_GT(net.value(x), 0.0);
    ASSERT_GT(rbf.value(x), 0.0);
    ASSERT_GE(net.value(x), 1e-3 * norm2_squared(x));
    ASSERT_GE(rbf.value(x), rbf.certified_floor() * norm2_squared(x) * (1.0 - 1e-12));
  }
  EXPECT_EQ(positivity_audit(net, rng), 0.0);
  EXPECT_EQ(positivity_audit(rbf, rng), 0.0);
}

TEST(Positivity, RadiallyIncreasing) {
  RngStream rng(13, 0);
  const LyapunovNet net = small_net(rng, 3);
  LyapunovRbf rbf(3, 50);
  rbf.init(rng);
  for (int k = 0; k < 10; ++k) {
    Vector dir = rng.standard_normal_vector(3);
    dir = scaled(dir, 1.0 / norm2(dir));
    double pn = 0.0, pr = 0.0;
    for (double c : {10.0, 100.0, 1000.0}) {
      const double vn = net.value(scaled(dir, c)), vr = rbf.value(scaled(dir, c));
      EXPECT_GT(vn, pn);
      EXPECT_GT(vr, pr);
      pn = vn;
      pr = vr;
    }
  }
}

TEST(Lqr, DiscretizationAndGain) {
  const Matrix a{{0.0, 1.0}, {-2.0, -3.0}}, b = Matrix::identity(2);
  const auto [ad, bd] = discretize_euler(a, b, 0.01, 1);
  EXPECT_LT(max_abs(ad - (Matrix::identity(2) + 0.01 * a)), 1e-15);
  EXPECT_LT(max_abs(bd - 0.01 * b), 1e-15);
  // Two substeps: A_d = (I + A dt)^2, B_d = (2I + A dt) B dt.
  const auto [ad2, bd2] = discretize_euler(a, b, 0.01, 2);
  const Matrix step = Matrix::identity(2) + 0.01 * a;
  EXPECT_LT(max_abs(ad2 - matmul(step, step)), 1e-15);
  EXPECT_LT(max_abs(bd2 - 0.01 * (Matrix::identity(2) + step)), 1e-15);
  // Scalar DARE check: x+ = x + 0.1 u, Q = 1, R = 1.
  const Matrix k = dlqr(Matrix{{1.0}}, Matrix{{0.1}}, Matrix{{1.0}}, Matrix{{1.0}});
  const double p = (1.0 + std::sqrt(1.0 + 4.0 / 0.01)) / 2.0;  // p^2 0.01 - 0.01 p - 1 = 0
  EXPECT_NEAR(k(0, 0), 0.1 * p / (1.0 + 0.01 * p), 1e-8);
}

TEST(Pretrain, RecoversCertificateWithIdentityFeatures) {
  const TaskSpec task = linear_test_task();
  LyapunovNet v = LyapunovNet::quadratic(2);
  RngStream rng(14, 0);
  PretrainConfig pc;
  pc.control_dt = task.control_dt();
  pc.max_iters = 20000;
  pc.target_rel_error = 0.002;
  const PretrainResult res = pretrain(v, task.model, Vector(2, 0.0), Vector(2, 0.0), rng, pc);
  const Matrix fitted = v.p_matrix() + v.eps0 * Matrix::identity(2);
  EXPECT_LT(frobenius(fitted - res.p) / frobenius(res.p), 0.02);
  EXPECT_EQ(v.value(Vector(2, 0.0)), 0.0);

  // Refitting from samples at twice the scale gives the same quadratic.
  LyapunovNet w = LyapunovNet::quadratic(2);
  pc.sample_scale = 2.0;
  pretrain(w, task.model, Vector(2, 0.0), Vector(2, 0.0), rng, pc);
  EXPECT_LT(frobenius(w.p_matrix() - v.p_matrix()) / frobenius(v.p_matrix()), 0.02);
}

TEST(Pretrain, FeatureNetReachesFitTolerance) {
  const TaskSpec task = linear_test_task();
  LyapunovNet v(2, {16}, 4);
  RngStream rng(15, 0);
  v.init(rng);
  PretrainConfig pc;
  pc.control_dt = task.control_dt();
  pc.max_iters = 5000;
  const PretrainResult res = pretrain(v, task.model, Vector(2, 0.0), Vector(2, 0.0), rng, pc);
  EXPECT_LT(res.rel_error, 0.05);
}

TEST(Pretrain, UnstabilizableFails) {
  // dx = x dt, no actuation: nothing can stabilize it.
  const SdeModel m = linear_model(Matrix{{1.0}}, Matrix{{0.0}}, 0.0);
  LyapunovNet v = LyapunovNet::quadratic(1);
  RngStream rng(16, 0);
  EXPECT_THROW(pretrain(v, m, Vector{0.0}, Vector{0.0}, rng), PretrainError);
}

TEST(Pretrain, CertificateHoldsAlongLqrClosedLoop) {
  const TaskSpec task = linear_test_task();
  LyapunovNet v(2, {16}, 4);
  RngStream rng(17, 0);
  v.init(rng);
  PretrainConfig pc;
  pc.control_dt = task.control_dt();
  const PretrainResult res = pretrain(v, task.model, Vector(2, 0.0), Vector(2, 0.0), rng, pc);
  auto policy = [&](const Vector& x, double) { return scaled(matvec(res.k, x), -1.0); };

  std::vector<LyapunovSample> batch;
  Vector x = task.x0;
  for (int k = 0; k < 256; ++k) {
    const Vector u = policy(x, 0.0);
    batch.push_back({x, u, 0.0, 1.0});
    x = em_step(task.model, x, u, task.dt, rng);
  }
  EXPECT_LT(lyapunov_loss(v, task.model, batch).loss, 1e-4);

  const std::vector<Vector> x0s(200, task.x0);
  const auto curve = mean_value_curve(v, task.model, policy, x0s, task.dt, 300, rng, 10);
  EXPECT_TRUE(non_increasing_within_band(curve, 0.05));
  EXPECT_LT(curve.back(), curve.front());
}

TEST(Band, NonIncreasingWithinBand) {
  EXPECT_TRUE(non_increasing_within_band({10.0, 8.0, 8.4, 5.0}, 0.05));
  EXPECT_FALSE(non_increasing_within_band({10.0, 8.0, 8.6, 5.0}, 0.05));
  EXPECT_TRUE(non_increasing_within_band({}, 0.05));
}
