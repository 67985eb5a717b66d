// Dense linear algebra and seedable random streams shared by every other module.
//
// Matrices are small (n <= ~20 everywhere in this project), so everything here is
// plain row-major storage with straightforward O(n^3) kernels.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lyapctl {

using Vector = std::vector<double>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool square() const { return rows_ == cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
  Vector column(std::size_t j) const {
    Vector c(rows_);
    for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
    return c;
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Vector helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }
inline double norm2_squared(std::span<const double> a) { return dot(a, a); }

inline double norm1(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += std::abs(v);
  return s;
}

inline double norm_inf(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s = std::max(s, std::abs(v));
  return s;
}

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

inline Vector add(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("add: length mismatch");
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

inline Vector sub(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("sub: length mismatch");
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

inline Vector scaled(std::span<const double> a, double s) {
  Vector r(a.begin(), a.end());
  for (double& v : r) v *= s;
  return r;
}

/// y += s * x
inline void axpy(double s, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw DimensionError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += s * x[i];
}

inline Vector concat(std::span<const double> a, std::span<const double> b) {
  Vector r;
  r.reserve(a.size() + b.size());
  r.insert(r.end(), a.begin(), a.end());
  r.insert(r.end(), b.begin(), b.end());
  return r;
}

inline Vector clipped(std::span<const double> a, double bound) {
  Vector r(a.begin(), a.end());
  for (double& v : r) v = std::clamp(v, -bound, bound);
  return r;
}

// ---------------------------------------------------------------------------
// Matrix kernels

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw DimensionError("matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    auto r = a.row(i);
    for (std::size_t j = 0; j < x.size(); ++j) s += r[j] * x[j];
    y[i] = s;
  }
  return y;
}

/// y = A^T x
inline Vector matvec_transposed(const Matrix& a, std::span<const double> x) {
  if (a.rows() != x.size()) throw DimensionError("matvec_transposed: dimension mismatch");
  Vector y(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) y[j] += r[j] * x[i];
  }
  return y;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("Matrix +: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.data().size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("Matrix -: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.data().size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

inline double max_abs(const Matrix& a) { return norm_inf(a.data()); }

inline double frobenius(const Matrix& a) { return norm2(a.data()); }

inline double trace(const Matrix& a) {
  if (!a.square()) throw DimensionError("trace: matrix not square");
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, i);
  return s;
}

/// x^T A x
inline double quadratic_form(const Matrix& a, std::span<const double> x) {
  return dot(x, matvec(a, x));
}

inline Matrix symmetrized(const Matrix& a) {
  if (!a.square()) throw DimensionError("symmetrized: matrix not square");
  Matrix s(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) s(i, j) = 0.5 * (a(i, j) + a(j, i));
  return s;
}

/// Dense solve A X = B by Gaussian elimination with partial pivoting.
inline Matrix solve(Matrix a, Matrix b) {
  if (!a.square()) throw DimensionError("solve: matrix not square");
  if (b.rows() != a.rows()) throw DimensionError("solve: right-hand side has wrong row count");
  const std::size_t n = a.rows();
  const double scale = std::max(max_abs(a), 1e-300);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
    if (std::abs(a(piv, col)) <= 1e-13 * scale)
      throw SolverError("solve: matrix is singular to working precision (pivot column " +
                        std::to_string(col) + ")");
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(col, j), a(piv, j));
      for (std::size_t j = 0; j < b.cols(); ++j) std::swap(b(col, j), b(piv, j));
    }
    const double inv = 1.0 / a(col, col);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double factor = a(r, col) * inv;
      if (factor == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) a(r, j) -= factor * a(col, j);
      for (std::size_t j = 0; j < b.cols(); ++j) b(r, j) -= factor * b(col, j);
    }
  }
  Matrix x(n, b.cols());
  for (std::size_t jj = 0; jj < b.cols(); ++jj) {
    for (std::size_t ii = n; ii-- > 0;) {
      double s = b(ii, jj);
      for (std::size_t k = ii + 1; k < n; ++k) s -= a(ii, k) * x(k, jj);
      x(ii, jj) = s / a(ii, ii);
    }
  }
  return x;
}

inline Vector solve(const Matrix& a, std::span<const double> b) {
  Matrix rhs(b.size(), 1);
  for (std::size_t i = 0; i < b.size(); ++i) rhs(i, 0) = b[i];
  return solve(a, std::move(rhs)).column(0);
}

inline Matrix inverse(const Matrix& a) { return solve(a, Matrix::identity(a.rows())); }

/// Lower Cholesky factor of a symmetric positive definite matrix. Throws SolverError when the
/// matrix is not positive definite.
inline Matrix cholesky_factor(const Matrix& p) {
  if (!p.square()) throw DimensionError("cholesky_factor: matrix not square");
  const std::size_t n = p.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = p(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) throw SolverError("cholesky_factor: matrix is not positive definite");
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = p(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

inline bool is_positive_definite(const Matrix& p) {
  try {
    (void)cholesky_factor(symmetrized(p));
    return true;
  } catch (const SolverError&) {
    return false;
  }
}

/// Solve P x = b for SPD P via its Cholesky factor.
inline Vector cholesky_solve(const Matrix& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  Vector x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = y[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
    x[i] = s / l(i, i);
  }
  return x;
}

/// P = L L^T for a lower-triangular factor with strictly positive diagonal.
inline Matrix cholesky_psd(const Matrix& lower) {
  if (!lower.square()) throw DimensionError("cholesky_psd: factor must be square");
  const std::size_t n = lower.rows();
  for (std::size_t i = 0; i < n; ++i) {
    if (!(lower(i, i) > 0.0)) throw ArgumentError("cholesky_psd: diagonal entries must be positive");
    for (std::size_t j = i + 1; j < n; ++j)
      if (lower(i, j) != 0.0) throw ArgumentError("cholesky_psd: factor must be lower triangular");
  }
  Matrix p(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k <= j; ++k) s += lower(i, k) * lower(j, k);
      p(i, j) = s;
      p(j, i) = s;
    }
  return p;
}

/// Solves A^T P + P A = -Q through the vectorized (Kronecker) system. Throws SolverError
/// when that system is singular or the solution is not positive definite, both of which
/// indicate A is not Hurwitz.
inline Matrix solve_continuous_lyapunov(const Matrix& a, const Matrix& q) {
  if (!a.square() || !q.square() || a.rows() != q.rows())
    throw DimensionError("solve_continuous_lyapunov: A and Q must be square and of equal size");
  const std::size_t n = a.rows();
  const std::size_t nn = n * n;
  // Row (i,j) of the system: sum_k A(k,i) P(k,j) + sum_k P(i,k) A(k,j) = -Q(i,j).
  Matrix k(nn, nn);
  Matrix rhs(nn, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t r = i * n + j;
      for (std::size_t m = 0; m < n; ++m) {
        k(r, m * n + j) += a(m, i);
        k(r, i * n + m) += a(m, j);
      }
      rhs(r, 0) = -q(i, j);
    }
  Matrix vec;
  try {
    vec = solve(std::move(k), std::move(rhs));
  } catch (const SolverError&) {
    throw SolverError(
        "solve_continuous_lyapunov: vectorized system is singular; A is not Hurwitz "
        "(some eigenvalue pair satisfies lambda_i + lambda_j = 0)");
  }
  Matrix p(n, n);
  for (std::size_t i = 0; i < nn; ++i) p.data()[i] = vec(i, 0);
  p = symmetrized(p);
  if (!is_positive_definite(p))
    throw SolverError(
        "solve_continuous_lyapunov: solution is not positive definite; A is not Hurwitz");
  return p;
}

// ---------------------------------------------------------------------------
// Random streams

/// xoshiro256** seeded through splitmix64 from (seed, stream id). Gaussian draws use the
/// Box-Muller transform with one cached value, so a stream is fully determined by its
/// construction arguments and the sequence of calls made on it.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t stream_id = 0)
      : seed_(seed), stream_id_(stream_id) {
    std::uint64_t sm = seed ^ (0x9E3779B97F4A7C15ULL * (stream_id + 1));
    for (auto& s : state_) s = splitmix64(sm);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw ArgumentError("uniform_index: empty range");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  double standard_normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    cached_ = radius * std::sin(angle);
    has_cached_ = true;
    return radius * std::cos(angle);
  }

  Vector standard_normal_vector(std::size_t n) {
    Vector v(n);
    for (double& x : v) x = standard_normal();
    return v;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t state_[4]{};
  double cached_ = 0.0;
  bool has_cached_ = false;
};

/// Draw from N(mean, std^2). std == 0 returns mean exactly.
inline double gaussian(RngStream& rng, double mean, double std) {
  if (std < 0.0 || std::isnan(std)) throw ArgumentError("gaussian: standard deviation must be >= 0");
  if (std == 0.0) return mean;
  return mean + std * rng.standard_normal();
}

// Smooth positivity map used for stored diagonal / width parameters.
inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double softplus_derivative(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double softplus_inverse(double y) {
  if (!(y > 0.0)) throw ArgumentError("softplus_inverse: argument must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

}  // namespace lyapctl
