// Learnable Lyapunov candidates (a Cholesky-parameterized quadratic form over a feature net and
// a Gaussian RBF expansion), the infinitesimal generator of an SDE applied to them, the hinge
// loss on generator decrease, LQR synthesis and pretraining on the linearized plant.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "lyapctl/dynamics.hpp"
#include "lyapctl/neural.hpp"
#include "lyapctl/numerics.hpp"

namespace lyapctl {

class NumericalDegeneracyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PretrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TraceBackend { closed_form, finite_difference };

struct GeneratorConfig {
  TraceBackend backend = TraceBackend::finite_difference;
  double fd_step = 1e-4;
  double alpha = 0.1;
  double beta = 0.01;
};

// ---------------------------------------------------------------------------------------------
// Net form: V(x) = psi~(x)^T L L^T psi~(x) + eps0 ||x||^2 with psi~(x) = psi(x) - psi(0).

class LyapunovNet {
 public:
  /// Feature net psi: R^n -> R^k with softplus hidden layers.
  LyapunovNet(std::size_t n, std::vector<std::size_t> hidden, std::size_t k,
              Activation act = Activation::softplus)
      : n_(n), k_(k) {
    std::vector<std::size_t> sizes{n};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(k);
    psi_ = Mlp(sizes, act, Activation::identity);
    init_layout();
  }

  /// Identity features: V(x) = x^T (L L^T + eps0 I) x.
  static LyapunovNet quadratic(std::size_t n) { return LyapunovNet(n); }

  double eps0 = 1e-3;

  std::size_t state_dim() const { return n_; }
  std::size_t feature_dim() const { return k_; }
  bool identity_features() const { return !psi_; }
  std::size_t num_params() const { return params_.size(); }
  const Vector& params() const { return params_; }
  /// Mutable access invalidates the cached psi(0); do not hold the reference across evaluations.
  Vector& params() {
    psi0_valid_ = false;
    p_valid_ = false;
    return params_;
  }

  void init(RngStream& rng) {
    if (psi_) {
      psi_->init(rng);
      std::copy(psi_->params().begin(), psi_->params().end(), params_.begin());
    }
    set_lower(Matrix::identity(k_));
    psi0_valid_ = false;
    p_valid_ = false;
  }

  Matrix lower() const {
    Matrix l(k_, k_);
    std::size_t p = l_offset_;
    for (std::size_t i = 0; i < k_; ++i)
      for (std::size_t j = 0; j <= i; ++j, ++p) l(i, j) = i == j ? softplus(params_[p]) : params_[p];
    return l;
  }
  Matrix p_matrix() const { return cached_p(); }

  void set_lower(const Matrix& l) {
    if (l.rows() != k_ || l.cols() != k_) throw DimensionError("LyapunovNet::set_lower: shape");
    p_valid_ = false;
    std::size_t p = l_offset_;
    for (std::size_t i = 0; i < k_; ++i)
      for (std::size_t j = 0; j <= i; ++j, ++p)
        params_[p] = i == j ? softplus_inverse(l(i, j)) : l(i, j);
  }
  /// Sets L from a symmetric positive definite P = L L^T.
  void set_p(const Matrix& p) { set_lower(cholesky_factor(symmetrized(p))); }

  double value(std::span<const double> x) const {
    check(x);
    const Vector f = features(x);
    return quadratic_form(p_matrix(), f) + eps0 * norm2_squared(x);
  }

  Vector grad_x(std::span<const double> x) const {
    check(x);
    const Matrix& p = cached_p();
    if (!psi_) {
      Vector g = matvec(p, x);
      for (std::size_t i = 0; i < n_; ++i) g[i] = 2.0 * g[i] + 2.0 * eps0 * x[i];
      return g;
    }
    Mlp::Tape tape;
    sync_psi();
    Vector f = psi_->forward(x, tape);
    const Vector& y0 = psi0();
    for (std::size_t i = 0; i < k_; ++i) f[i] -= y0[i];
    Vector up = scaled(matvec(p, f), 2.0);
    Vector scratch(psi_->num_params(), 0.0);
    Vector g = psi_->backward(tape, up, scratch);
    for (std::size_t i = 0; i < n_; ++i) g[i] += 2.0 * eps0 * x[i];
    return g;
  }

  /// grad V(x) . v
  double directional(std::span<const double> x, std::span<const double> v) const {
    check(x);
    const Matrix& p = cached_p();
    if (!psi_) return 2.0 * dot(matvec(p, x), v) + 2.0 * eps0 * dot(x, v);
    Mlp::JvpTape tape;
    sync_psi();
    Vector f = psi_->jvp(x, v, tape);
    const Vector& y0 = psi0();
    for (std::size_t i = 0; i < k_; ++i) f[i] -= y0[i];
    return 2.0 * dot(matvec(p, f), tape.adot.back()) + 2.0 * eps0 * dot(x, v);
  }

  /// Closed form only exists for identity features: Tr(sigma^T (P + eps0 I) sigma).
  bool has_closed_form_trace() const { return !psi_; }

  double closed_form_trace(std::span<const double> /*x*/, const Matrix& sigma) const {
    if (psi_) throw ArgumentError("LyapunovNet: closed-form trace needs identity features");
    const Matrix& p = cached_p();
    double s = 0.0;
    for (std::size_t j = 0; j < sigma.cols(); ++j) {
      const Vector c = sigma.column(j);
      s += quadratic_form(p, c) + eps0 * norm2_squared(c);
    }
    return s;
  }

  // Parameter gradients. Each adds weight * d(quantity)/d(params) into dparams (length
  // num_params()). Contributions through psi(0) are buffered; call flush_grad once at the end.

  void accumulate_value_grad(std::span<const double> x, double weight, Vector& dparams) const {
    check(x);
    check_grad(dparams);
    const Matrix& p = cached_p();
    if (!psi_) {
      add_p_grad_outer(x, x, weight, dparams);
      return;
    }
    Mlp::Tape tape;
    sync_psi();
    Vector f = psi_->forward(x, tape);
    const Vector& y0 = psi0();
    for (std::size_t i = 0; i < k_; ++i) f[i] -= y0[i];
    add_p_grad_outer(f, f, weight, dparams);
    const Vector up = scaled(matvec(p, f), 2.0 * weight);
    psi_backward(tape, up, dparams);
    axpy(-1.0, up, y0bar_);
  }

  void accumulate_directional_grad(std::span<const double> x, std::span<const double> v,
                                   double weight, Vector& dparams) const {
    check(x);
    check_grad(dparams);
    const Matrix& p = cached_p();
    if (!psi_) {
      // D = 2 x^T P v
      add_p_grad_outer(x, v, 2.0 * weight, dparams);
      return;
    }
    Mlp::JvpTape tape;
    sync_psi();
    Vector f = psi_->jvp(x, v, tape);
    const Vector& y0 = psi0();
    for (std::size_t i = 0; i < k_; ++i) f[i] -= y0[i];
    const Vector& fd = tape.adot.back();
    add_p_grad_outer(f, fd, 2.0 * weight, dparams);
    const Vector ybar = scaled(matvec(p, fd), 2.0 * weight);
    const Vector ydbar = scaled(matvec(p, f), 2.0 * weight);
    Vector dpsi(psi_->num_params(), 0.0);
    psi_->jvp_backward(tape, ybar, ydbar, dpsi);
    for (std::size_t i = 0; i < dpsi.size(); ++i) dparams[i] += dpsi[i];
    axpy(-1.0, ybar, y0bar_);
  }

  void accumulate_closed_form_trace_grad(std::span<const double> /*x*/, const Matrix& sigma,
                                         double weight, Vector& dparams) const {
    if (psi_) throw ArgumentError("LyapunovNet: closed-form trace needs identity features");
    for (std::size_t j = 0; j < sigma.cols(); ++j) {
      const Vector c = sigma.column(j);
      add_p_grad_outer(c, c, weight, dparams);
    }
  }

  void flush_grad(Vector& dparams) const {
    if (!psi_) return;
    if (norm_inf(y0bar_) == 0.0) return;
    sync_psi();
    Mlp::Tape tape;
    psi_->forward(Vector(n_, 0.0), tape);
    psi_backward(tape, y0bar_, dparams);
    std::fill(y0bar_.begin(), y0bar_.end(), 0.0);
  }

  /// Checkpoint via the feature net's text format plus the L block.
  const std::optional<Mlp>& feature_net() const { return psi_; }

 private:
  explicit LyapunovNet(std::size_t n) : n_(n), k_(n) { init_layout(); set_lower(Matrix::identity(n)); }

  void init_layout() {
    l_offset_ = psi_ ? psi_->num_params() : 0;
    params_.assign(l_offset_ + k_ * (k_ + 1) / 2, 0.0);
    y0bar_.assign(k_, 0.0);
  }
  void check(std::span<const double> x) const {
    if (x.size() != n_) throw DimensionError("LyapunovNet: state length mismatch");
  }
  void check_grad(const Vector& d) const {
    if (d.size() != params_.size()) throw DimensionError("LyapunovNet: gradient length mismatch");
  }
  // The feature net's own parameter storage mirrors the head of params_.
  void sync_psi() const {
    if (!psi_ || psi0_valid_) return;
    std::copy(params_.begin(), params_.begin() + static_cast<std::ptrdiff_t>(l_offset_),
              psi_->params().begin());
    psi0_ = psi_->forward(Vector(n_, 0.0));
    psi0_valid_ = true;
  }
  const Matrix& cached_p() const {
    if (!p_valid_) {
      p_ = cholesky_psd(lower());
      p_valid_ = true;
    }
    return p_;
  }
  const Vector& psi0() const {
    sync_psi();
    return psi0_;
  }
  Vector features(std::span<const double> x) const {
    if (!psi_) return Vector(x.begin(), x.end());
    sync_psi();
    Vector f = psi_->forward(x);
    for (std::size_t i = 0; i < k_; ++i) f[i] -= psi0_[i];
    return f;
  }
  void psi_backward(const Mlp::Tape& tape, const Vector& up, Vector& dparams) const {
    Vector dpsi(psi_->num_params(), 0.0);
    psi_->backward(tape, up, dpsi);
    for (std::size_t i = 0; i < dpsi.size(); ++i) dparams[i] += dpsi[i];
  }
  /// Adds s * d(a^T P b)/dL to the L block: dP = a b^T, dL = (dP + dP^T) L.
  void add_p_grad_outer(std::span<const double> a, std::span<const double> b, double s,
                        Vector& dparams) const {
    const Matrix l = lower();
    // (a b^T + b a^T) L = a (L^T b)^T + b (L^T a)^T
    const Vector ltb = matvec_transposed(l, b);
    const Vector lta = matvec_transposed(l, a);
    std::size_t p = l_offset_;
    for (std::size_t i = 0; i < k_; ++i)
      for (std::size_t j = 0; j <= i; ++j, ++p) {
        double g = s * (a[i] * ltb[j] + b[i] * lta[j]);
        if (i == j) g *= softplus_derivative(params_[p]);
        dparams[p] += g;
      }
  }

  std::size_t n_ = 0, k_ = 0;
  mutable std::optional<Mlp> psi_;
  std::size_t l_offset_ = 0;
  Vector params_;
  mutable Vector psi0_;
  mutable bool psi0_valid_ = false;
  mutable Matrix p_;
  mutable bool p_valid_ = false;
  mutable Vector y0bar_;
};

// ---------------------------------------------------------------------------------------------
// RBF form: V(x) = sum_j w_j [g_j(x) - g_j(0) - grad g_j(0) . x] + eps ||x||^2 with
// g_j(x) = exp(-||x - mu_j||^2 / (2 s_j^2)). Removing the value and slope of the bumps at the
// origin makes x = 0 a stationary point with V(0) = 0; since grad^2 g_j >= -I / s_j^2,
// V(x) >= (eps - sum_j w_j / (2 s_j^2)) ||x||^2 (see certified_floor()).
// Stored parameters: [log w (M) | log s (M) | mu (M x n)].

class LyapunovRbf {
 public:
  LyapunovRbf(std::size_t n, std::size_t m = 50) : n_(n), m_(m), params_(2 * m + m * n, 0.0) {}

  double eps = 0.01;

  std::size_t state_dim() const { return n_; }
  std::size_t centers() const { return m_; }
  std::size_t num_params() const { return params_.size(); }
  const Vector& params() const { return params_; }
  Vector& params() { return params_; }

  double weight(std::size_t j) const { return std::exp(params_[j]); }
  double width(std::size_t j) const { return std::exp(params_[m_ + j]); }
  std::span<const double> center(std::size_t j) const { return {&params_[2 * m_ + j * n_], n_}; }

  /// Zero weights are represented by -inf log-weights.
  void set_weight(std::size_t j, double w) {
    params_[j] = w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity();
  }
  void set_width(std::size_t j, double s) { params_[m_ + j] = std::log(s); }
  void set_center(std::size_t j, std::span<const double> mu) {
    std::copy(mu.begin(), mu.end(), params_.begin() + static_cast<std::ptrdiff_t>(2 * m_ + j * n_));
  }

  /// Centers ~ N(0, scale^2 I), widths = scale, weights w0. The default w0 keeps the certified
  /// floor at three quarters of eps.
  void init(RngStream& rng, double scale = 1.0, double w0 = -1.0) {
    if (w0 < 0.0) w0 = 0.5 * eps * scale * scale / static_cast<double>(m_);
    for (std::size_t j = 0; j < m_; ++j) {
      set_weight(j, w0);
      set_width(j, scale);
      for (std::size_t i = 0; i < n_; ++i) params_[2 * m_ + j * n_ + i] = scale * rng.standard_normal();
    }
  }

  /// c with V(x) >= c ||x||^2 for all x; positive means V is certified positive definite.
  double certified_floor() const {
    double s = eps;
    for (std::size_t j = 0; j < m_; ++j) s -= weight(j) / (2.0 * sq(width(j)));
    return s;
  }

  double value(std::span<const double> x) const {
    check(x);
    double v = eps * norm2_squared(x);
    for (std::size_t j = 0; j < m_; ++j) {
      const double w = weight(j);
      if (w == 0.0) continue;
      const double g0 = bump0(j);
      v += w * (bump(j, x) - g0 - g0 * dot(center(j), x) / sq(width(j)));
    }
    return v;
  }

  Vector grad_x(std::span<const double> x) const {
    check(x);
    Vector g = scaled(x, 2.0 * eps);
    for (std::size_t j = 0; j < m_; ++j) {
      const double w = weight(j);
      if (w == 0.0) continue;
      const double s2 = sq(width(j));
      const double c = -w * bump(j, x) / s2;
      const double c0 = -w * bump0(j) / s2;
      auto mu = center(j);
      for (std::size_t i = 0; i < n_; ++i) g[i] += c * (x[i] - mu[i]) + c0 * mu[i];
    }
    return g;
  }

  double directional(std::span<const double> x, std::span<const double> v) const {
    return dot(grad_x(x), v);
  }

  bool has_closed_form_trace() const { return true; }

  /// 1/2 Tr(sigma^T H sigma), H_j = w g (d d^T / s^4 - I / s^2).
  double closed_form_trace(std::span<const double> x, const Matrix& sigma) const {
    check(x);
    const double fro = norm2_squared(sigma.data());
    double t = eps * fro;
    for (std::size_t j = 0; j < m_; ++j) {
      const double w = weight(j);
      if (w == 0.0) continue;
      const double s2 = sq(width(j));
      const Vector d = diff(j, x);
      const double q = norm2_squared(matvec_transposed(sigma, d));
      t += 0.5 * w * bump(j, x) * (q / (s2 * s2) - fro / s2);
    }
    return t;
  }

  void accumulate_value_grad(std::span<const double> x, double weight_, Vector& dparams) const {
    check(x);
    for (std::size_t j = 0; j < m_; ++j) {
      const double w = weight(j);
      if (w == 0.0) continue;
      const double s2 = sq(width(j));
      const double g = bump(j, x), g0 = bump0(j);
      const Vector d = diff(j, x);
      auto mu = center(j);
      // w (g - g0)
      dparams[j] += weight_ * w * (g - g0);
      dparams[m_ + j] += weight_ * w * (g * norm2_squared(d) - g0 * norm2_squared(mu)) / s2;
      double* dmu = &dparams[2 * m_ + j * n_];
      for (std::size_t i = 0; i < n_; ++i) dmu[i] += weight_ * w * (g * d[i] + g0 * mu[i]) / s2;
      add_slope_grad(j, x, weight_, dparams);
    }
  }

  void accumulate_directional_grad(std::span<const double> x, std::span<const double> v,
                                   double weight_, Vector& dparams) const {
    check(x);
    for (std::size_t j = 0; j < m_; ++j) {
      const double w = weight(j);
      if (w == 0.0) continue;
      const double s2 = sq(width(j));
      const double g = bump(j, x);
      const Vector d = diff(j, x);
      const double dv = dot(d, v);
      const double term = -w * g * dv / s2;  // grad of bump j at x, dotted with v
      dparams[j] += weight_ * term;
      dparams[m_ + j] += weight_ * term * (norm2_squared(d) / s2 - 2.0);
      double* dmu = &dparams[2 * m_ + j * n_];
      for (std::size_t i = 0; i < n_; ++i)
        dmu[i] += weight_ * (-w / s2) * (g * d[i] / s2 * dv - g * v[i]);
      add_slope_grad(j, v, weight_, dparams);
    }
  }

  void accumulate_closed_form_trace_grad(std::span<const double> x, const Matrix& sigma,
                                         double weight_, Vector& dparams) const {
    check(x);
    const double fro = norm2_squared(sigma.data());
    for (std::size_t j = 0; j < m_; ++j) {
      const double w = weight(j);
      if (w == 0.0) continue;
      const double s2 = sq(width(j));
      const double g = bump(j, x);
      const Vector d = diff(j, x);
      const Vector std_ = matvec_transposed(sigma, d);
      const double q = norm2_squared(std_);
      const double bracket = q / (s2 * s2) - fro / s2;
      dparams[j] += weight_ * 0.5 * w * g * bracket;
      // d/dlog s: g' = g |d|^2/s^2, s^-4 -> -4 s^-4, s^-2 -> -2 s^-2
      dparams[m_ + j] += weight_ * 0.5 * w * g *
                         (norm2_squared(d) / s2 * bracket - 4.0 * q / (s2 * s2) + 2.0 * fro / s2);
      // d/dmu: dg = g d / s^2, dq = -2 sigma sigma^T d
      const Vector ssd = matvec(sigma, std_);
      double* dmu = &dparams[2 * m_ + j * n_];
      for (std::size_t i = 0; i < n_; ++i)
        dmu[i] += weight_ * 0.5 * w * g * (d[i] / s2 * bracket - 2.0 * ssd[i] / (s2 * s2));
    }
  }

  void flush_grad(Vector&) const {}

 private:
  static double sq(double v) { return v * v; }
  void check(std::span<const double> x) const {
    if (x.size() != n_) throw DimensionError("LyapunovRbf: state length mismatch");
  }
  Vector diff(std::size_t j, std::span<const double> x) const {
    auto mu = center(j);
    Vector d(n_);
    for (std::size_t i = 0; i < n_; ++i) d[i] = x[i] - mu[i];
    return d;
  }
  double bump(std::size_t j, std::span<const double> x) const {
    auto mu = center(j);
    double d2 = 0.0;
    for (std::size_t i = 0; i < n_; ++i) d2 += sq(x[i] - mu[i]);
    return std::exp(-d2 / (2.0 * sq(width(j))));
  }
  double bump0(std::size_t j) const {
    return std::exp(-norm2_squared(center(j)) / (2.0 * sq(width(j))));
  }
  /// Parameter gradient of the slope correction S = -w g0 (mu . y) / s^2, scaled by c.
  void add_slope_grad(std::size_t j, std::span<const double> y, double c, Vector& dparams) const {
    const double w = weight(j), s2 = sq(width(j)), g0 = bump0(j);
    auto mu = center(j);
    const double my = dot(mu, y);
    const double term = -w * g0 * my / s2;
    dparams[j] += c * term;
    dparams[m_ + j] += c * term * (norm2_squared(mu) / s2 - 2.0);
    double* dmu = &dparams[2 * m_ + j * n_];
    for (std::size_t i = 0; i < n_; ++i) dmu[i] += c * (-w / s2) * (g0 * y[i] - g0 * mu[i] / s2 * my);
  }

  std::size_t n_, m_;
  Vector params_;
};

// ---------------------------------------------------------------------------------------------
// Generator

/// 1/2 Tr(sigma^T grad^2 V sigma).
template <class V>
double hessian_trace(const V& v, std::span<const double> x, const Matrix& sigma,
                     TraceBackend backend = TraceBackend::finite_difference, double h = 1e-4) {
  if (!(h > 0.0)) throw ArgumentError("hessian_trace: fd step must be positive");
  if (sigma.rows() != x.size()) throw DimensionError("hessian_trace: sigma rows != state length");
  if (backend == TraceBackend::closed_form) {
    if (!v.has_closed_form_trace())
      throw ArgumentError("hessian_trace: closed form not available for this Lyapunov form");
    return v.closed_form_trace(x, sigma);
  }
  double t = 0.0;
  Vector xp(x.begin(), x.end()), xm(x.begin(), x.end());
  for (std::size_t j = 0; j < sigma.cols(); ++j) {
    const Vector c = sigma.column(j);
    if (norm_inf(c) == 0.0) continue;
    for (std::size_t i = 0; i < x.size(); ++i) {
      xp[i] = x[i] + h * c[i];
      xm[i] = x[i] - h * c[i];
    }
    t += (v.directional(xp, c) - v.directional(xm, c)) / (4.0 * h);
  }
  if (!std::isfinite(t)) throw NumericalDegeneracyError("hessian_trace: non-finite difference");
  return t;
}

template <class V>
void accumulate_trace_grad(const V& v, std::span<const double> x, const Matrix& sigma,
                           double weight, Vector& dparams,
                           TraceBackend backend = TraceBackend::finite_difference,
                           double h = 1e-4) {
  if (backend == TraceBackend::closed_form) {
    v.accumulate_closed_form_trace_grad(x, sigma, weight, dparams);
    return;
  }
  Vector xp(x.begin(), x.end()), xm(x.begin(), x.end());
  for (std::size_t j = 0; j < sigma.cols(); ++j) {
    const Vector c = sigma.column(j);
    if (norm_inf(c) == 0.0) continue;
    for (std::size_t i = 0; i < x.size(); ++i) {
      xp[i] = x[i] + h * c[i];
      xm[i] = x[i] - h * c[i];
    }
    v.accumulate_directional_grad(xp, c, weight / (4.0 * h), dparams);
    v.accumulate_directional_grad(xm, c, -weight / (4.0 * h), dparams);
  }
}

/// LV(x, u) = grad V^T f(x, u, t) + 1/2 Tr(sigma^T grad^2 V sigma).
template <class V>
double generator(const V& v, const SdeModel& model, std::span<const double> x,
                 std::span<const double> u, double t = 0.0, const GeneratorConfig& cfg = {}) {
  const Vector xs(x.begin(), x.end()), us(u.begin(), u.end());
  const Vector f = model.eval_drift(xs, us, t);
  double lv = v.directional(x, f);
  if (model.noise_dim > 0) lv += hessian_trace(v, x, model.eval_diffusion(xs, us, t), cfg.backend, cfg.fd_step);
  return lv;
}

/// d LV / d u. Drift Jacobian by central differences; with action-dependent diffusion the trace
/// term contributes sum_j (H sigma_j)^T d sigma_j / d u_k with H sigma_j from gradient differences.
template <class V>
Vector generator_action_grad(const V& v, const SdeModel& model, std::span<const double> x,
                             std::span<const double> u, double t = 0.0, double h = 1e-5) {
  const Vector xs(x.begin(), x.end());
  Vector us(u.begin(), u.end());
  const Vector gv = v.grad_x(x);
  const std::size_t m = us.size();
  Vector out(m, 0.0);
  for (std::size_t k = 0; k < m; ++k) {
    const double u0 = us[k];
    us[k] = u0 + h;
    const Vector fp = model.eval_drift(xs, us, t);
    us[k] = u0 - h;
    const Vector fm = model.eval_drift(xs, us, t);
    us[k] = u0;
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) s += gv[i] * (fp[i] - fm[i]);
    out[k] = s / (2.0 * h);
  }
  if (model.action_dependent_diffusion && model.noise_dim > 0) {
    const Matrix sigma = model.eval_diffusion(xs, us, t);
    const double hx = 1e-4;
    std::vector<Vector> hsig(sigma.cols());
    Vector xp = xs, xm = xs;
    for (std::size_t j = 0; j < sigma.cols(); ++j) {
      const Vector c = sigma.column(j);
      if (norm_inf(c) == 0.0) {
        hsig[j].assign(xs.size(), 0.0);
        continue;
      }
      for (std::size_t i = 0; i < xs.size(); ++i) {
        xp[i] = xs[i] + hx * c[i];
        xm[i] = xs[i] - hx * c[i];
      }
      hsig[j] = scaled(sub(v.grad_x(xp), v.grad_x(xm)), 1.0 / (2.0 * hx));
    }
    for (std::size_t k = 0; k < m; ++k) {
      const double u0 = us[k];
      us[k] = u0 + h;
      const Matrix sp = model.eval_diffusion(xs, us, t);
      us[k] = u0 - h;
      const Matrix sm = model.eval_diffusion(xs, us, t);
      us[k] = u0;
      double s = 0.0;
      for (std::size_t j = 0; j < sigma.cols(); ++j)
        for (std::size_t i = 0; i < xs.size(); ++i)
          s += hsig[j][i] * (sp(i, j) - sm(i, j)) / (2.0 * h);
      out[k] += s;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Loss

struct LyapunovSample {
  Vector x;
  Vector u;
  double t = 0.0;
  double weight = 1.0;
};

struct LyapunovLossResult {
  double loss = 0.0;            // weighted mean of max(0, LV + alpha V - beta)^2
  double violation_rate = 0.0;  // fraction with positive hinge argument
  double hinge_mean = 0.0;      // weighted mean of max(0, LV + alpha V - beta)
  double mean_generator = 0.0;
  Vector hinges;                // per-sample max(0, .)
};

template <class V>
LyapunovLossResult lyapunov_loss(const V& v, const SdeModel& model,
                                 const std::vector<LyapunovSample>& batch,
                                 const GeneratorConfig& cfg = {}, Vector* dparams = nullptr) {
  if (batch.empty()) throw ArgumentError("lyapunov_loss: empty batch");
  LyapunovLossResult r;
  double wsum = 0.0;
  for (const auto& s : batch) wsum += s.weight;
  if (!(wsum > 0.0)) throw ArgumentError("lyapunov_loss: weights must sum to a positive value");
  std::size_t violations = 0;
  for (const auto& s : batch) {
    const Vector f = model.eval_drift(s.x, s.u, s.t);
    double lv = v.directional(s.x, f);
    Matrix sigma;
    if (model.noise_dim > 0) {
      sigma = model.eval_diffusion(s.x, s.u, s.t);
      lv += hessian_trace(v, s.x, sigma, cfg.backend, cfg.fd_step);
    }
    const double arg = lv + cfg.alpha * v.value(s.x) - cfg.beta;
    const double hinge = std::max(0.0, arg);
    const double w = s.weight / wsum;
    r.loss += w * hinge * hinge;
    r.hinge_mean += w * hinge;
    r.mean_generator += w * lv;
    r.hinges.push_back(hinge);
    if (arg > 0.0) {
      ++violations;
      if (dparams) {
        const double c = 2.0 * hinge * w;
        v.accumulate_directional_grad(s.x, f, c, *dparams);
        if (model.noise_dim > 0)
          accumulate_trace_grad(v, s.x, sigma, c, *dparams, cfg.backend, cfg.fd_step);
        v.accumulate_value_grad(s.x, c * cfg.alpha, *dparams);
      }
    }
  }
  if (dparams) v.flush_grad(*dparams);
  r.violation_rate = static_cast<double>(violations) / static_cast<double>(batch.size());
  return r;
}

/// Fraction of samples x ~ N(0, scale^2 I), x != 0, where V(x) <= 0.
template <class V>
double positivity_audit(const V& v, RngStream& rng, std::size_t samples = 1000,
                        double scale = 1.0) {
  std::size_t bad = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    Vector x(v.state_dim());
    for (double& xi : x) xi = scale * rng.standard_normal();
    if (!(v.value(x) > 0.0)) ++bad;
  }
  return static_cast<double>(bad) / static_cast<double>(samples);
}

/// Mean of V(x_t) over closed-loop rollouts started at each x0, sampled every `record_every`
/// integration steps (index 0 is the initial state). `policy(x, t)` returns the action.
template <class V, class Policy>
std::vector<double> mean_value_curve(const V& v, const SdeModel& model, Policy&& policy,
                                     const std::vector<Vector>& x0s, double dt, std::size_t steps,
                                     RngStream& rng, std::size_t record_every = 1) {
  if (x0s.empty()) throw ArgumentError("mean_value_curve: no initial states");
  if (record_every == 0) throw ArgumentError("mean_value_curve: record_every must be positive");
  std::vector<double> mean(steps / record_every + 1, 0.0);
  const double inv = 1.0 / static_cast<double>(x0s.size());
  for (const Vector& x0 : x0s) {
    Vector x = x0;
    double t = 0.0;
    mean[0] += v.value(x) * inv;
    for (std::size_t k = 1; k <= steps; ++k) {
      x = em_step(model, x, policy(x, t), dt, rng, t);
      t += dt;
      if (k % record_every == 0) mean[k / record_every] += v.value(x) * inv;
    }
  }
  return mean;
}

/// True when every value is at most the running minimum so far plus band * values[0].
inline bool non_increasing_within_band(const std::vector<double>& values, double band) {
  if (values.empty()) return true;
  double lo = values[0];
  const double slack = band * std::abs(values[0]);
  for (double v : values) {
    if (v > lo + slack) return false;
    lo = std::min(lo, v);
  }
  return true;
}

// ---------------------------------------------------------------------------------------------
// Linear-quadratic synthesis

/// Exact discrete map of `substeps` forward-Euler steps of dx = (A x + B u) dt with u held.
inline std::pair<Matrix, Matrix> discretize_euler(const Matrix& a, const Matrix& b, double dt,
                                                  std::size_t substeps = 1) {
  const std::size_t n = a.rows();
  const Matrix step = Matrix::identity(n) + dt * a;
  Matrix ad = Matrix::identity(n);
  Matrix acc(n, b.cols());
  for (std::size_t s = 0; s < substeps; ++s) {
    acc = acc + matmul(ad, dt * b);
    ad = matmul(step, ad);
  }
  return {ad, acc};
}

/// Infinite-horizon discrete LQR gain K (u = -K x) by Riccati iteration.
inline Matrix dlqr(const Matrix& ad, const Matrix& bd, const Matrix& q, const Matrix& r,
                   std::size_t max_iter = 100000, double tol = 1e-10) {
  Matrix p = q;
  const Matrix at = transpose(ad), bt = transpose(bd);
  Matrix k;
  for (std::size_t it = 0; it < max_iter; ++it) {
    const Matrix btp = matmul(bt, p);
    k = solve(r + matmul(btp, bd), matmul(btp, ad));
    Matrix next = q + matmul(matmul(at, p), ad) - matmul(matmul(at, p), matmul(bd, k));
    next = symmetrized(next);
    if (!all_finite(next.data())) throw SolverError("dlqr: Riccati iteration diverged");
    const double change = max_abs(next - p);
    p = std::move(next);
    if (change <= tol * std::max(1.0, max_abs(p))) {
      const Matrix btp2 = matmul(bt, p);
      return solve(r + matmul(btp2, bd), matmul(btp2, ad));
    }
  }
  throw SolverError("dlqr: Riccati iteration did not converge (pair not stabilizable?)");
}

struct PretrainConfig {
  double control_dt = 0.01;
  std::size_t substeps = 1;
  double q_weight = 1.0;
  double r_weight = 1e-3;
  double sample_scale = 1.0;
  std::size_t batch = 128;
  std::size_t max_iters = 3000;
  double target_rel_error = 0.05;
  double lr = 3e-3;
};

struct PretrainResult {
  Matrix a, b;   // continuous linearization
  Matrix k;      // feedback gain u = u* - K e
  Matrix p;      // certificate of A - B K with Q = I
  double rel_error = 0.0;
  std::size_t iterations = 0;
};

/// Linearize, synthesize a discrete LQR gain, solve the continuous Lyapunov equation for the
/// closed loop and return (A, B, K, P) without fitting anything.
inline PretrainResult lqr_certificate(const SdeModel& model, const Vector& x_star,
                                      const Vector& u_star, const PretrainConfig& cfg,
                                      double t = 0.0) {
  PretrainResult res;
  std::tie(res.a, res.b) = linearize(model, x_star, u_star, 1e-5, t);
  const std::size_t n = res.a.rows(), m = res.b.cols();
  const auto [ad, bd] = discretize_euler(res.a, res.b, cfg.control_dt / cfg.substeps, cfg.substeps);
  try {
    res.k = dlqr(ad, bd, cfg.q_weight * Matrix::identity(n), cfg.r_weight * Matrix::identity(m));
    res.p = solve_continuous_lyapunov(res.a - matmul(res.b, res.k), Matrix::identity(n));
  } catch (const SolverError& e) {
    throw PretrainError(std::string("pretrain: linearization not stabilizable: ") + e.what());
  }
  return res;
}

/// Regresses V onto e^T P e (P from lqr_certificate) over e ~ N(0, scale^2 I) with Adam, until the
/// mean relative error falls below cfg.target_rel_error or max_iters is reached.
template <class V>
double fit_quadratic(V& v, const Matrix& p, const PretrainConfig& cfg, RngStream& rng,
                     std::size_t* iterations = nullptr) {
  const std::size_t n = p.rows();
  Adam opt(v.num_params(), cfg.lr);
  auto draw = [&] {
    std::vector<Vector> xs(cfg.batch, Vector(n));
    for (auto& x : xs)
      for (double& xi : x) xi = cfg.sample_scale * rng.standard_normal();
    return xs;
  };
  auto rel_error = [&](const std::vector<Vector>& xs) {
    double num = 0.0, den = 0.0;
    for (const auto& x : xs) {
      const double target = quadratic_form(p, x);
      num += std::abs(v.value(x) - target);
      den += target;
    }
    return num / den;
  };
  const auto probe = draw();
  double err = rel_error(probe);
  std::size_t it = 0;
  for (; it < cfg.max_iters && err >= cfg.target_rel_error; ++it) {
    const auto xs = draw();
    Vector g(v.num_params(), 0.0);
    // Loss mean(r^2) / mean(target)^2 keeps the step size independent of the scale of P.
    double mean_target = 0.0;
    for (const auto& x : xs) mean_target += quadratic_form(p, x);
    mean_target /= static_cast<double>(xs.size());
    const double scale = 1.0 / (mean_target * mean_target);
    for (const auto& x : xs) {
      const double r = v.value(x) - quadratic_form(p, x);
      v.accumulate_value_grad(x, 2.0 * r * scale / static_cast<double>(xs.size()), g);
    }
    v.flush_grad(g);
    opt.step(v.params(), g);
    if (it % 25 == 24) err = rel_error(probe);
  }
  err = rel_error(probe);
  if (iterations) *iterations = it;
  return err;
}

/// Full pretraining: certificate on the linearization, then the regression fit.
template <class V>
PretrainResult pretrain(V& v, const SdeModel& model, const Vector& x_star, const Vector& u_star,
                        RngStream& rng, const PretrainConfig& cfg = {}) {
  PretrainResult res = lqr_certificate(model, x_star, u_star, cfg);
  res.rel_error = fit_quadratic(v, res.p, cfg, rng, &res.iterations);
  return res;
}

}  // namespace lyapctl
