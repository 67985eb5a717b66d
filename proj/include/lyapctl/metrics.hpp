// Tracking-error indices, norm curves and learning-curve normalization.
#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "lyapctl/csv.hpp"
#include "lyapctl/numerics.hpp"

namespace lyapctl {

class NormalizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ErrorSeries {
  std::vector<double> times;
  std::vector<Vector> errors;

  void validate() const {
    if (times.size() != errors.size()) throw DimensionError("ErrorSeries: times and errors differ in length");
    for (std::size_t k = 1; k < times.size(); ++k)
      if (!(times[k] > times[k - 1])) throw ArgumentError("ErrorSeries: times must be increasing");
  }
};

namespace detail {
template <class F>
double trapezoid(const ErrorSeries& es, F integrand) {
  es.validate();
  if (es.times.size() < 2) throw ArgumentError("error index needs at least 2 samples");
  double total = 0.0;
  double prev = integrand(es.errors[0]);
  for (std::size_t k = 1; k < es.times.size(); ++k) {
    const double cur = integrand(es.errors[k]);
    total += 0.5 * (prev + cur) * (es.times[k] - es.times[k - 1]);
    prev = cur;
  }
  return total;
}
}  // namespace detail

inline double iae(const ErrorSeries& es) {
  return detail::trapezoid(es, [](const Vector& e) { return norm1(e); });
}

inline double ise(const ErrorSeries& es) {
  return detail::trapezoid(es, [](const Vector& e) { return dot(e, e); });
}

inline std::vector<std::pair<double, double>> norm_curve(const ErrorSeries& es) {
  es.validate();
  std::vector<std::pair<double, double>> out;
  out.reserve(es.times.size());
  for (std::size_t k = 0; k < es.times.size(); ++k) out.emplace_back(es.times[k], norm2(es.errors[k]));
  return out;
}

// With blocks == 0 every consecutive pair must be non-increasing. Otherwise the series is cut
// into that many blocks and block means must not rise by more than slack * (first block mean).
inline bool is_decaying(const std::vector<double>& values, std::size_t blocks = 0, double slack = 0.0) {
  if (values.size() < 2) return true;
  if (blocks == 0) {
    for (std::size_t k = 1; k < values.size(); ++k)
      if (values[k] > values[k - 1]) return false;
    return true;
  }
  blocks = std::min(blocks, values.size());
  std::vector<double> means;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t lo = b * values.size() / blocks, hi = (b + 1) * values.size() / blocks;
    double s = 0.0;
    for (std::size_t k = lo; k < hi; ++k) s += values[k];
    means.push_back(s / static_cast<double>(hi - lo));
  }
  const double tol = slack * std::abs(means.front());
  for (std::size_t b = 1; b < means.size(); ++b)
    if (means[b] > means[b - 1] + tol) return false;
  return means.back() < means.front();
}

inline std::vector<double> normalize_rewards(const std::vector<double>& rewards, double random_baseline,
                                             double best_reference) {
  if (!(best_reference > random_baseline) || !std::isfinite(best_reference) || !std::isfinite(random_baseline))
    throw NormalizationError("normalize_rewards: best reference must exceed the random baseline");
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards)
    out.push_back(std::clamp((r - random_baseline) / (best_reference - random_baseline), -0.1, 1.1));
  return out;
}

// Trailing moving average over at most `window` points.
inline std::vector<double> smooth(const std::vector<double>& v, std::size_t window) {
  if (window == 0) throw ArgumentError("smooth: window must be positive");
  std::vector<double> out(v.size());
  double s = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    s += v[k];
    if (k >= window) s -= v[k - window];
    out[k] = s / static_cast<double>(std::min(k + 1, window));
  }
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct MetricRow {
  std::size_t episode = 0;
  std::string algo;
  std::uint64_t seed = 0;
  double iae = 0.0;
  double ise = 0.0;
  double final_norm_err = 0.0;
  double mean_reward = 0.0;
  double norm_reward = 0.0;
};

inline constexpr const char* kMetricHeader = "episode,algo,seed,iae,ise,final_norm_err,mean_reward,norm_reward";

inline void write_metric_rows(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << kMetricHeader << '\n';
  for (const auto& r : rows) {
    const std::vector<std::string> cells{std::to_string(r.episode),         r.algo,
                                         std::to_string(r.seed),            csv::format_double(r.iae),
                                         csv::format_double(r.ise),         csv::format_double(r.final_norm_err),
                                         csv::format_double(r.mean_reward), csv::format_double(r.norm_reward)};
    csv::write_row(out, cells);
  }
}

inline std::vector<MetricRow> read_metric_rows(std::istream& in) {
  const csv::Table t = csv::read(in);
  std::vector<MetricRow> rows;
  const auto c = [&](const char* name) { return t.column(name); };
  for (const auto& r : t.rows) {
    MetricRow m;
    m.episode = std::stoul(r.at(c("episode")));
    m.algo = r.at(c("algo"));
    m.seed = std::stoull(r.at(c("seed")));
    m.iae = csv::parse_double(r.at(c("iae")));
    m.ise = csv::parse_double(r.at(c("ise")));
    m.final_norm_err = csv::parse_double(r.at(c("final_norm_err")));
    m.mean_reward = csv::parse_double(r.at(c("mean_reward")));
    m.norm_reward = csv::parse_double(r.at(c("norm_reward")));
    rows.push_back(std::move(m));
  }
  return rows;
}

}  // namespace lyapctl
