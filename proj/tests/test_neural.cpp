#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "lyapctl/neural.hpp"

using namespace lyapctl;

namespace {

// Straight-line evaluator of a 2-layer softplus net, written without the Mlp layout helpers.
Vector reference_eval(const Vector& p, std::size_t in, std::size_t hid, std::size_t out,
                      const Vector& x) {
  std::size_t k = 0;
  std::vector<std::vector<double>> w1(hid, std::vector<double>(in));
  for (auto& r : w1)
    for (double& v : r) v = p[k++];
  Vector b1(hid);
  for (double& v : b1) v = p[k++];
  std::vector<std::vector<double>> w2(out, std::vector<double>(hid));
  for (auto& r : w2)
    for (double& v : r) v = p[k++];
  Vector b2(out);
  for (double& v : b2) v = p[k++];
  Vector h(hid);
  for (std::size_t i = 0; i < hid; ++i) {
    double z = b1[i];
    for (std::size_t j = 0; j < in; ++j) z += w1[i][j] * x[j];
    h[i] = std::log(1.0 + std::exp(z));
  }
  Vector y(out);
  for (std::size_t i = 0; i < out; ++i) {
    double z = b2[i];
    for (std::size_t j = 0; j < hid; ++j) z += w2[i][j] * h[j];
    y[i] = z;
  }
  return y;
}

double scalar_out(const Mlp& net, const Vector& x, const Vector& up) { return dot(net.forward(x), up); }

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-6, std::max(std::abs(a), std::abs(b))); }

}  // namespace

TEST(Mlp, ParameterCountAndZeroInit) {
  const Mlp net({3, 5, 2}, Activation::tanh);
  EXPECT_EQ(net.num_params(), (3u + 1) * 5 + (5u + 1) * 2);
  EXPECT_EQ(net.forward(Vector{1.0, -2.0, 3.0}), Vector(2, 0.0));
}

TEST(Mlp, SingleLinearLayer) {
  Mlp net({1, 1}, Activation::identity);
  net.params() = {2.0, 1.0};
  EXPECT_EQ(net.forward(Vector{3.0}), Vector{7.0});
  const GradientBundle g = net.backward(Vector{3.0}, Vector{1.0});
  EXPECT_EQ(g.d_input, Vector{2.0});
  EXPECT_EQ(g.d_params, (Vector{3.0, 1.0}));
}

TEST(Mlp, MatchesStraightLineEvaluator) {
  RngStream rng(12, 0);
  Mlp net({4, 7, 3}, Activation::softplus);
  net.init(rng);
  for (double& v : net.params()) v += 0.1 * rng.standard_normal();
  for (int k = 0; k < 10; ++k) {
    const Vector x = rng.standard_normal_vector(4);
    const Vector a = net.forward(x), b = reference_eval(net.params(), 4, 7, 3, x);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  RngStream rng(13, 0);
  const double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    const Activation act = trial % 2 ? Activation::softplus : Activation::tanh;
    Mlp net({8, 16, 8}, act, trial % 3 == 0 ? Activation::tanh : Activation::identity);
    net.init(rng);
    for (double& v : net.params()) v += 0.05 * rng.standard_normal();
    for (int s = 0; s < 5; ++s) {
      const Vector x = rng.standard_normal_vector(8);
      const Vector up = rng.standard_normal_vector(8);
      const GradientBundle g = net.backward(x, up);
      for (std::size_t i = 0; i < net.num_params(); ++i) {
        Mlp a = net, b = net;
        a.params()[i] += h;
        b.params()[i] -= h;
        const double fd = (scalar_out(a, x, up) - scalar_out(b, x, up)) / (2 * h);
        ASSERT_LT(rel_err(fd, g.d_params[i]), 1e-4) << "param " << i;
      }
      for (std::size_t i = 0; i < 8; ++i) {
        Vector xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (scalar_out(net, xp, up) - scalar_out(net, xm, up)) / (2 * h);
        ASSERT_LT(rel_err(fd, g.d_input[i]), 1e-4);
      }
    }
  }
}

TEST(Mlp, ReluDeadRegionHasZeroInputGradient) {
  Mlp net({3, 4, 2}, Activation::relu);
  RngStream rng(1, 0);
  net.init(rng);
  // All first-layer biases very negative.
  for (std::size_t i = 0; i < 4; ++i) net.params()[net.bias_offset(0) + i] = -100.0;
  const GradientBundle g = net.backward(Vector{0.1, 0.2, 0.3}, Vector{1.0, 1.0});
  EXPECT_EQ(g.d_input, Vector(3, 0.0));
}

TEST(Mlp, JvpMatchesJacobianAndItsGradient) {
  RngStream rng(21, 0);
  const double h = 1e-5;
  for (Activation act : {Activation::softplus, Activation::tanh}) {
    Mlp net({5, 9, 9, 4}, act);
    net.init(rng);
    const Vector x = rng.standard_normal_vector(5), v = rng.standard_normal_vector(5);
    Mlp::JvpTape tape;
    net.jvp(x, v, tape);
    // ydot against finite differences of forward along v.
    const Vector fd = scaled(sub(net.forward(add(x, scaled(v, h))), net.forward(sub(x, scaled(v, h)))), 0.5 / h);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(tape.adot.back()[i], fd[i], 1e-7);
    // d/dparams of ybar.y + ydbar.ydot against finite differences.
    const Vector ybar = rng.standard_normal_vector(4), ydbar = rng.standard_normal_vector(4);
    Vector grad(net.num_params(), 0.0);
    net.jvp_backward(tape, ybar, ydbar, grad);
    auto objective = [&](const Mlp& n) {
      Mlp::JvpTape t;
      const Vector y = n.jvp(x, v, t);
      return dot(y, ybar) + dot(t.adot.back(), ydbar);
    };
    for (std::size_t i = 0; i < net.num_params(); ++i) {
      Mlp a = net, b = net;
      a.params()[i] += h;
      b.params()[i] -= h;
      ASSERT_LT(rel_err((objective(a) - objective(b)) / (2 * h), grad[i]), 1e-4) << i;
    }
  }
}

TEST(ClipGlobalNorm, Examples) {
  EXPECT_EQ(clip_global_norm(Vector{0.3, 0.4}, 1.0), (Vector{0.3, 0.4}));
  const Vector c = clip_global_norm(Vector{3.0, 4.0}, 1.0);
  EXPECT_NEAR(c[0], 0.6, 1e-15);
  EXPECT_NEAR(c[1], 0.8, 1e-15);
  EXPECT_THROW(clip_global_norm(Vector{1.0}, 0.0), ArgumentError);
}

TEST(ClipGlobalNorm, BoundAndIdempotence) {
  RngStream rng(2, 0);
  for (int k = 0; k < 100; ++k) {
    Vector g = scaled(rng.standard_normal_vector(10), rng.uniform(0.0, 10.0));
    const Vector once = clip_global_norm(g, 1.0);
    EXPECT_LE(norm2(once), 1.0 + 1e-12);
    const Vector twice = clip_global_norm(once, 1.0);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(twice[i], once[i], 1e-15);
  }
}

TEST(SgdStep, Examples) {
  EXPECT_EQ(sgd_step({1.0, 2.0}, Vector{5.0, 5.0}, 0.0, StepDirection::descent), (Vector{1.0, 2.0}));
  EXPECT_NEAR(sgd_step({1.0}, Vector{2.0}, 0.1, StepDirection::descent)[0], 0.8, 1e-15);
  EXPECT_NEAR(sgd_step({1.0}, Vector{2.0}, 0.1, StepDirection::ascent)[0], 1.2, 1e-15);
  EXPECT_THROW(sgd_step({1.0}, Vector{1.0, 2.0}, 0.1, StepDirection::descent), DimensionError);
}

TEST(Schedules, InitialValuesAndTimescaleRatio) {
  const Schedules s;
  EXPECT_DOUBLE_EQ(s.alpha(0), 0.001);
  EXPECT_DOUBLE_EQ(s.beta(0), 0.0005);
  EXPECT_DOUBLE_EQ(s.gamma(0), 0.0001);
  EXPECT_DOUBLE_EQ(s.lambda(0), 0.1);
  double prev = 1.0;
  for (double k : {0.0, 1e3, 1e5}) {
    const double ratio = s.gamma(k) / s.alpha(k);
    EXPECT_NEAR(ratio, 0.1 * std::pow(1.0 + k, -0.2), 1e-15);
    EXPECT_LT(ratio, prev);
    prev = ratio;
  }
  EXPECT_LT(s.gamma(1e5 + 1) / s.alpha(1e5 + 1), 0.01);
}

TEST(Checkpoint, RoundTrip) {
  RngStream rng(3, 0);
  Mlp net({3, 4, 2}, Activation::softplus, Activation::tanh);
  net.init(rng);
  std::stringstream ss;
  write_mlp(ss, "actor", net);
  const auto [name, back] = read_mlp(ss);
  EXPECT_EQ(name, "actor");
  EXPECT_EQ(back.sizes(), net.sizes());
  EXPECT_EQ(back.output_activation(), Activation::tanh);
  EXPECT_EQ(back.params(), net.params());
  std::stringstream bad("mlp x\nsizes 2 2\nactivation relu identity\nparams 3\n1\n2\n3\n");
  EXPECT_THROW(read_mlp(bad), CheckpointError);
}
