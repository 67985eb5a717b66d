// Small fully connected networks over a flat parameter vector, with exact reverse-mode
// gradients, forward-mode directional derivatives (and reverse mode through those), plain SGD,
// decaying step-size schedules and gradient clipping.
#pragma once

#include <cmath>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "lyapctl/csv.hpp"
#include "lyapctl/numerics.hpp"

namespace lyapctl {

enum class Activation { identity, relu, softplus, tanh };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::softplus: return "softplus";
    case Activation::tanh: return "tanh";
  }
  return "identity";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "softplus") return Activation::softplus;
  if (s == "tanh") return Activation::tanh;
  throw ArgumentError("unknown activation '" + s + "'");
}

namespace detail {
inline double act(Activation a, double z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::softplus: return softplus(z);
    case Activation::tanh: return std::tanh(z);
  }
  return z;
}
inline double act_d1(Activation a, double z) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::softplus: return softplus_derivative(z);
    case Activation::tanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
  }
  return 1.0;
}
inline double act_d2(Activation a, double z) {
  switch (a) {
    case Activation::identity:
    case Activation::relu: return 0.0;
    case Activation::softplus: {
      const double s = softplus_derivative(z);
      return s * (1.0 - s);
    }
    case Activation::tanh: {
      const double t = std::tanh(z);
      return -2.0 * t * (1.0 - t * t);
    }
  }
  return 0.0;
}
// Value and first derivative with one transcendental call.
inline void act_pair(Activation a, double z, double& y, double& d1) {
  switch (a) {
    case Activation::identity: y = z; d1 = 1.0; return;
    case Activation::relu: y = z > 0.0 ? z : 0.0; d1 = z > 0.0 ? 1.0 : 0.0; return;
    case Activation::softplus: {
      const double e = std::exp(-std::abs(z));
      y = (z > 0.0 ? z : 0.0) + std::log1p(e);
      d1 = z >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
      return;
    }
    case Activation::tanh: y = std::tanh(z); d1 = 1.0 - y * y; return;
  }
}
// Second derivative from the cached value and first derivative.
inline double act_d2_from(Activation a, double y, double d1) {
  switch (a) {
    case Activation::softplus: return d1 * (1.0 - d1);
    case Activation::tanh: return -2.0 * y * d1;
    default: return 0.0;
  }
}
}  // namespace detail

struct GradientBundle {
  Vector d_params;
  Vector d_input;
};

class Mlp {
 public:
  /// Per-layer cache of inputs and preactivations.
  struct Tape {
    std::vector<Vector> a;   // a[l]: input to layer l; a.back(): output
    std::vector<Vector> z;   // preactivation of layer l
    std::vector<Vector> d1;  // activation derivative at z[l]
  };
  /// Forward-mode cache for y = net(x) and ydot = J(x) v.
  struct JvpTape {
    std::vector<Vector> a, adot, z, zdot, d1;
  };

  Mlp() = default;
  Mlp(std::vector<std::size_t> sizes, Activation hidden,
      Activation output = Activation::identity)
      : sizes_(std::move(sizes)), hidden_(hidden), output_(output) {
    if (sizes_.size() < 2) throw ArgumentError("Mlp: need at least input and output sizes");
    for (std::size_t s : sizes_)
      if (s == 0) throw ArgumentError("Mlp: zero layer size");
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      offsets_.push_back(off);
      off += (sizes_[l] + 1) * sizes_[l + 1];
    }
    params_.assign(off, 0.0);
  }

  const std::vector<std::size_t>& sizes() const { return sizes_; }
  Activation hidden_activation() const { return hidden_; }
  Activation output_activation() const { return output_; }
  std::size_t layers() const { return offsets_.size(); }
  std::size_t in_dim() const { return sizes_.front(); }
  std::size_t out_dim() const { return sizes_.back(); }
  std::size_t num_params() const { return params_.size(); }
  Vector& params() { return params_; }
  const Vector& params() const { return params_; }
  /// Layer l stores W (out x in, row-major) at weight_offset(l), then b (out).
  std::size_t weight_offset(std::size_t l) const { return offsets_.at(l); }
  std::size_t bias_offset(std::size_t l) const {
    return offsets_.at(l) + sizes_[l] * sizes_[l + 1];
  }
  Activation activation(std::size_t l) const { return l + 1 == layers() ? output_ : hidden_; }

  /// Uniform fan-in init (He bound for relu, Xavier otherwise); biases zero. The last layer's
  /// bound is multiplied by output_scale.
  void init(RngStream& rng, double output_scale = 1.0) {
    for (std::size_t l = 0; l < layers(); ++l) {
      const double fin = static_cast<double>(sizes_[l]);
      const double fout = static_cast<double>(sizes_[l + 1]);
      double bound = hidden_ == Activation::relu ? std::sqrt(6.0 / fin)
                                                 : std::sqrt(6.0 / (fin + fout));
      if (l + 1 == layers()) bound *= output_scale;
      const std::size_t w = weight_offset(l);
      for (std::size_t i = 0; i < sizes_[l] * sizes_[l + 1]; ++i)
        params_[w + i] = rng.uniform(-bound, bound);
      const std::size_t b = bias_offset(l);
      for (std::size_t i = 0; i < sizes_[l + 1]; ++i) params_[b + i] = 0.0;
    }
  }

  Vector forward(std::span<const double> x) const {
    Tape t;
    return forward(x, t);
  }

  Vector forward(std::span<const double> x, Tape& tape) const {
    check_input(x);
    tape.a.assign(1, Vector(x.begin(), x.end()));
    tape.z.clear();
    tape.d1.clear();
    for (std::size_t l = 0; l < layers(); ++l) {
      Vector z = affine(l, tape.a.back());
      Vector a(z.size()), d(z.size());
      const Activation f = activation(l);
      for (std::size_t i = 0; i < z.size(); ++i) detail::act_pair(f, z[i], a[i], d[i]);
      tape.z.push_back(std::move(z));
      tape.a.push_back(std::move(a));
      tape.d1.push_back(std::move(d));
    }
    return tape.a.back();
  }

  /// Gradients of upstream^T forward(x) with respect to params and x.
  GradientBundle backward(std::span<const double> x, std::span<const double> upstream) const {
    Tape t;
    forward(x, t);
    GradientBundle g;
    g.d_params.assign(num_params(), 0.0);
    g.d_input = backward(t, upstream, g.d_params);
    return g;
  }

  /// Accumulates into d_params and returns the input gradient.
  Vector backward(const Tape& tape, std::span<const double> upstream, Vector& d_params) const {
    if (upstream.size() != out_dim()) throw DimensionError("Mlp::backward: upstream length");
    if (d_params.size() != num_params()) throw DimensionError("Mlp::backward: d_params length");
    Vector abar(upstream.begin(), upstream.end());
    for (std::size_t l = layers(); l-- > 0;) {
      const Vector& d1 = tape.d1[l];
      const Vector& a = tape.a[l];
      const std::size_t in = sizes_[l], out = sizes_[l + 1];
      Vector zbar(out);
      for (std::size_t i = 0; i < out; ++i) zbar[i] = abar[i] * d1[i];
      const std::size_t w = weight_offset(l), b = bias_offset(l);
      Vector next(in, 0.0);
      for (std::size_t i = 0; i < out; ++i) {
        const double zi = zbar[i];
        if (zi == 0.0) continue;
        d_params[b + i] += zi;
        const double* wr = &params_[w + i * in];
        double* dw = &d_params[w + i * in];
        for (std::size_t j = 0; j < in; ++j) {
          dw[j] += zi * a[j];
          next[j] += zi * wr[j];
        }
      }
      abar = std::move(next);
    }
    return abar;
  }

  /// Input gradient only; parameters are treated as constants.
  Vector input_gradient(const Tape& tape, std::span<const double> upstream) const {
    if (upstream.size() != out_dim()) throw DimensionError("Mlp::input_gradient: upstream length");
    Vector abar(upstream.begin(), upstream.end());
    for (std::size_t l = layers(); l-- > 0;) {
      const std::size_t in = sizes_[l], out = sizes_[l + 1];
      const std::size_t w = weight_offset(l);
      Vector next(in, 0.0);
      for (std::size_t i = 0; i < out; ++i) {
        const double zi = abar[i] * tape.d1[l][i];
        if (zi == 0.0) continue;
        const double* wr = &params_[w + i * in];
        for (std::size_t j = 0; j < in; ++j) next[j] += zi * wr[j];
      }
      abar = std::move(next);
    }
    return abar;
  }

  /// Returns y = net(x) and fills tape with ydot = J(x) v in tape.adot.back().
  Vector jvp(std::span<const double> x, std::span<const double> v, JvpTape& tape) const {
    check_input(x);
    if (v.size() != in_dim()) throw DimensionError("Mlp::jvp: direction length");
    tape.a.assign(1, Vector(x.begin(), x.end()));
    tape.adot.assign(1, Vector(v.begin(), v.end()));
    tape.z.clear();
    tape.zdot.clear();
    tape.d1.clear();
    for (std::size_t l = 0; l < layers(); ++l) {
      Vector z = affine(l, tape.a.back());
      Vector zd = linear(l, tape.adot.back());
      const Activation f = activation(l);
      Vector a(z.size()), ad(z.size()), d(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) {
        detail::act_pair(f, z[i], a[i], d[i]);
        ad[i] = d[i] * zd[i];
      }
      tape.z.push_back(std::move(z));
      tape.zdot.push_back(std::move(zd));
      tape.a.push_back(std::move(a));
      tape.adot.push_back(std::move(ad));
      tape.d1.push_back(std::move(d));
    }
    return tape.a.back();
  }

  /// Reverse pass through jvp: accumulates d/dparams of ybar^T y + ydotbar^T ydot into d_params.
  /// Returns the gradient with respect to x (the direction v is treated as a constant).
  Vector jvp_backward(const JvpTape& tape, std::span<const double> ybar,
                      std::span<const double> ydotbar, Vector& d_params) const {
    if (ybar.size() != out_dim() || ydotbar.size() != out_dim())
      throw DimensionError("Mlp::jvp_backward: upstream length");
    if (d_params.size() != num_params()) throw DimensionError("Mlp::jvp_backward: d_params length");
    Vector abar(ybar.begin(), ybar.end());
    Vector adbar(ydotbar.begin(), ydotbar.end());
    for (std::size_t l = layers(); l-- > 0;) {
      const Activation f = activation(l);
      const Vector& zd = tape.zdot[l];
      const Vector& a = tape.a[l];
      const Vector& ad = tape.adot[l];
      const Vector& y = tape.a[l + 1];
      const std::size_t in = sizes_[l], out = sizes_[l + 1];
      Vector zbar(out), zdbar(out);
      for (std::size_t i = 0; i < out; ++i) {
        const double d1 = tape.d1[l][i];
        zbar[i] = abar[i] * d1 + adbar[i] * detail::act_d2_from(f, y[i], d1) * zd[i];
        zdbar[i] = adbar[i] * d1;
      }
      const std::size_t w = weight_offset(l), b = bias_offset(l);
      Vector next(in, 0.0), next_d(in, 0.0);
      for (std::size_t i = 0; i < out; ++i) {
        d_params[b + i] += zbar[i];
        const double* wr = &params_[w + i * in];
        double* dw = &d_params[w + i * in];
        for (std::size_t j = 0; j < in; ++j) {
          dw[j] += zbar[i] * a[j] + zdbar[i] * ad[j];
          next[j] += zbar[i] * wr[j];
          next_d[j] += zdbar[i] * wr[j];
        }
      }
      abar = std::move(next);
      adbar = std::move(next_d);
    }
    return abar;
  }

  /// Full input Jacobian (out x in), one forward-mode pass per input coordinate.
  Matrix jacobian(std::span<const double> x) const {
    Matrix j(out_dim(), in_dim());
    JvpTape t;
    Vector e(in_dim(), 0.0);
    for (std::size_t c = 0; c < in_dim(); ++c) {
      e[c] = 1.0;
      jvp(x, e, t);
      for (std::size_t r = 0; r < out_dim(); ++r) j(r, c) = t.adot.back()[r];
      e[c] = 0.0;
    }
    return j;
  }

 private:
  void check_input(std::span<const double> x) const {
    if (x.size() != in_dim()) throw DimensionError("Mlp: input length mismatch");
  }
  Vector affine(std::size_t l, const Vector& a) const {
    Vector z = linear(l, a);
    const std::size_t b = bias_offset(l);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += params_[b + i];
    return z;
  }
  Vector linear(std::size_t l, const Vector& a) const {
    const std::size_t in = sizes_[l], out = sizes_[l + 1];
    const std::size_t w = weight_offset(l);
    Vector z(out, 0.0);
    for (std::size_t i = 0; i < out; ++i) {
      const double* wr = &params_[w + i * in];
      double s = 0.0;
      for (std::size_t j = 0; j < in; ++j) s += wr[j] * a[j];
      z[i] = s;
    }
    return z;
  }

  std::vector<std::size_t> sizes_;
  Activation hidden_ = Activation::identity;
  Activation output_ = Activation::identity;
  std::vector<std::size_t> offsets_;
  Vector params_;
};

/// Scales g so that ||g||_2 <= bound. Returns the pre-clip norm.
inline double clip_global_norm_inplace(Vector& g, double bound = 1.0) {
  if (!(bound > 0.0)) throw ArgumentError("clip_global_norm: bound must be positive");
  const double n = norm2(g);
  if (n > bound) {
    const double s = bound / n;
    for (double& v : g) v *= s;
  }
  return n;
}

inline Vector clip_global_norm(Vector g, double bound = 1.0) {
  clip_global_norm_inplace(g, bound);
  return g;
}

/// Clips the parameter gradient; the input gradient is passed through unchanged.
inline GradientBundle clip_global_norm(GradientBundle g, double bound = 1.0) {
  clip_global_norm_inplace(g.d_params, bound);
  return g;
}

enum class StepDirection { ascent, descent };

inline void sgd_step_inplace(Vector& params, std::span<const double> g, double lr,
                             StepDirection dir) {
  if (params.size() != g.size()) throw DimensionError("sgd_step: shape mismatch");
  if (lr < 0.0) throw ArgumentError("sgd_step: negative learning rate");
  const double s = dir == StepDirection::ascent ? lr : -lr;
  for (std::size_t i = 0; i < params.size(); ++i) params[i] += s * g[i];
}

inline Vector sgd_step(Vector params, std::span<const double> g, double lr, StepDirection dir) {
  sgd_step_inplace(params, g, lr, dir);
  return params;
}

/// Power-law decay c / (1 + k)^p.
struct PowerSchedule {
  double base = 1e-3;
  double power = 1.0;
  double operator()(double k) const { return base / std::pow(1.0 + k, power); }
};

struct Schedules {
  PowerSchedule alpha{1e-3, 0.8};   // fast: low-level actor/critic, Lyapunov net
  PowerSchedule beta{5e-4, 0.9};    // Lyapunov-net step
  PowerSchedule gamma{1e-4, 1.0};   // slow: high-level actor/critic
  PowerSchedule lambda{0.1, 0.6};   // multiplier
};

/// Adam, used only for supervised fits during pretraining.
class Adam {
 public:
  explicit Adam(std::size_t n, double lr = 1e-3, double b1 = 0.9, double b2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), b1_(b1), b2_(b2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(Vector& params, std::span<const double> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw DimensionError("Adam: shape mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, b1_, b2_, eps_;
  Vector m_, v_;
  std::size_t t_ = 0;
};

/// Polyak averaging target <- tau * source + (1 - tau) * target.
inline void polyak_update(Vector& target, std::span<const double> source, double tau) {
  if (target.size() != source.size()) throw DimensionError("polyak_update: shape mismatch");
  for (std::size_t i = 0; i < target.size(); ++i)
    target[i] = tau * source[i] + (1.0 - tau) * target[i];
}

// Text checkpoint for one network:
//   mlp <name>
//   sizes <n0> <n1> ...
//   activation <hidden> <output>
//   params <count>
//   <one value per line, shortest round-trip decimal>
inline void write_mlp(std::ostream& out, const std::string& name, const Mlp& net) {
  out << "mlp " << name << '\n' << "sizes";
  for (std::size_t s : net.sizes()) out << ' ' << s;
  out << '\n'
      << "activation " << to_string(net.hidden_activation()) << ' '
      << to_string(net.output_activation()) << '\n'
      << "params " << net.num_params() << '\n';
  for (double v : net.params()) out << csv::format_double(v) << '\n';
}

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::pair<std::string, Mlp> read_mlp(std::istream& in) {
  std::string tag, name;
  if (!(in >> tag >> name) || tag != "mlp") throw CheckpointError("checkpoint: expected 'mlp'");
  std::string line;
  std::getline(in, line);
  if (!std::getline(in, line) || line.rfind("sizes", 0) != 0)
    throw CheckpointError("checkpoint: expected 'sizes'");
  std::vector<std::size_t> sizes;
  {
    std::size_t pos = 5;
    while (pos < line.size()) {
      while (pos < line.size() && line[pos] == ' ') ++pos;
      if (pos >= line.size()) break;
      std::size_t end = line.find(' ', pos);
      if (end == std::string::npos) end = line.size();
      sizes.push_back(std::stoul(line.substr(pos, end - pos)));
      pos = end;
    }
  }
  std::string hidden, output;
  if (!(in >> tag >> hidden >> output) || tag != "activation")
    throw CheckpointError("checkpoint: expected 'activation'");
  std::size_t count = 0;
  if (!(in >> tag >> count) || tag != "params") throw CheckpointError("checkpoint: expected 'params'");
  Mlp net(sizes, parse_activation(hidden), parse_activation(output));
  if (count != net.num_params()) throw CheckpointError("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < count; ++i) {
    std::string tok;
    if (!(in >> tok)) throw CheckpointError("checkpoint: truncated parameter list");
    try {
      net.params()[i] = csv::parse_double(tok);
    } catch (const std::invalid_argument&) {
      throw CheckpointError("checkpoint: bad number '" + tok + "'");
    }
  }
  return {name, std::move(net)};
}

}  // namespace lyapctl
