// Acceptance checks. One PASS/FAIL line per criterion; exit status is the number of failures.
// `acceptance --skip-sweep` skips the multi-hour training sweep (criteria 4-7).
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "lyapctl/experiment.hpp"
#include "lyapctl/lyapunov.hpp"
#include "lyapctl/neural.hpp"

using namespace lyapctl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const Outcome& o, double seconds) {
  std::printf("criterion %2d %-28s %s  %s [%.1fs]\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds);
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

template <class F>
void timed(int id, const char* name, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = f();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(id, name, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ||a - b|| / max(||a||, ||b||), the relative error of a whole gradient vector.
double vec_rel_err(const Vector& a, const Vector& b) {
  double d = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double s = std::sqrt(std::max(na, nb));
  return s == 0.0 ? std::sqrt(d) : std::sqrt(d) / s;
}

// params() is re-fetched per write: mutable access is what invalidates cached features.
template <class P, class F>
Vector central_diff(P& owner, F f, double h) {
  Vector g(owner.params().size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double keep = owner.params()[i];
    owner.params()[i] = keep + h;
    const double fp = f(owner);
    owner.params()[i] = keep - h;
    const double fm = f(owner);
    owner.params()[i] = keep;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

// ---------------------------------------------------------------------------------------------

Outcome gradients() {
  RngStream rng(101, 0);
  double worst = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t n = 2 + inst % 4;
    const Activation act = inst % 2 ? Activation::softplus : Activation::tanh;

    Mlp net({n, 4 + static_cast<std::size_t>(inst % 5), 3}, act, inst % 3 ? Activation::identity : Activation::tanh);
    net.init(rng);
    for (double& v : net.params()) v += 0.05 * rng.standard_normal();
    const Vector x = rng.standard_normal_vector(n), up = rng.standard_normal_vector(3);
    const GradientBundle g = net.backward(x, up);
    auto out = [&](Mlp& m) { return dot(m.forward(x), up); };
    worst = std::max(worst, vec_rel_err(g.d_params, central_diff(net, out, 1e-5)));
    Vector gx(n);
    for (std::size_t i = 0; i < n; ++i) {
      Vector xp = x, xm = x;
      xp[i] += 1e-5;
      xm[i] -= 1e-5;
      gx[i] = (dot(net.forward(xp), up) - dot(net.forward(xm), up)) / 2e-5;
    }
    worst = std::max(worst, vec_rel_err(g.d_input, gx));

    // Lyapunov candidates: value, drift term and the decrease-condition loss.
    LyapunovNet v(n, {5}, 3);
    v.init(rng);
    for (double& p : v.params()) p += 0.1 * rng.standard_normal();
    LyapunovRbf rbf(n, 4);
    rbf.init(rng, 1.0, 0.3);
    for (double& p : rbf.params()) p += 0.1 * rng.standard_normal();
    LyapunovNet q = LyapunovNet::quadratic(n);
    for (double& p : q.params()) p += 0.2 * rng.standard_normal();

    Matrix a(n, n);
    for (double& e : a.data()) e = 0.5 * rng.standard_normal();
    const SdeModel m = linear_model(a, Matrix::identity(n), 0.3);
    std::vector<LyapunovSample> batch;
    for (int k = 0; k < 4; ++k)
      batch.push_back({rng.standard_normal_vector(n), rng.standard_normal_vector(n), 0.0, rng.uniform(0.5, 1.0)});
    const Vector d = rng.standard_normal_vector(n);
    GeneratorConfig closed;
    closed.backend = TraceBackend::closed_form;
    closed.beta = -10.0;  // keep every hinge active so the loss is smooth in the parameters

    auto check = [&](auto w, const GeneratorConfig& gc, double h) {
      using W = decltype(w);
      Vector gv(w.num_params(), 0.0);
      w.accumulate_value_grad(x, 1.0, gv);
      w.flush_grad(gv);
      W wv = w;
      worst = std::max(worst, vec_rel_err(gv, central_diff(wv, [&](W& z) { return z.value(x); }, 1e-6)));
      Vector gd(w.num_params(), 0.0);
      w.accumulate_directional_grad(x, d, 1.0, gd);
      w.flush_grad(gd);
      W wd = w;
      worst = std::max(worst,
                       vec_rel_err(gd, central_diff(wd, [&](W& z) { return z.directional(x, d); }, 1e-6)));
      Vector gl(w.num_params(), 0.0);
      lyapunov_loss(w, m, batch, gc, &gl);
      W wl = w;
      worst = std::max(
          worst, vec_rel_err(gl, central_diff(wl, [&](W& z) { return lyapunov_loss(z, m, batch, gc).loss; }, h)));
    };
    GeneratorConfig fd = closed;
    fd.backend = TraceBackend::finite_difference;
    check(v, fd, 1e-5);
    check(rbf, closed, 1e-6);
    check(q, closed, 1e-6);
  }
  return {worst < 1e-4, fmt("worst relative error %.2e over 20 instances (tol 1e-4)", worst)};
}

Outcome generator_oracle() {
  RngStream rng(202, 0);
  double worst_cf = 0.0, worst_fd = 0.0;
  for (int c = 0; c < 1000; ++c) {
    const std::size_t n = 1 + c % 5, r = 1 + (c / 5) % 4;
    Matrix a(n, n), l(n, n), sigma(n, r);
    for (double& e : a.data()) e = rng.standard_normal();
    for (double& e : l.data()) e = rng.standard_normal();
    for (double& e : sigma.data()) e = 0.5 * rng.standard_normal();
    Matrix p = matmul(l, transpose(l));
    for (std::size_t i = 0; i < n; ++i) p(i, i) += 0.1;
    const Vector x = rng.standard_normal_vector(n);
    SdeModel m;
    m.state_dim = n;
    m.action_dim = n;
    m.noise_dim = r;
    m.drift = [a](const Vector& xx, const Vector&, double) { return matvec(a, xx); };
    m.diffusion = [sigma](const Vector&, const Vector&, double) { return sigma; };
    LyapunovNet v = LyapunovNet::quadratic(n);
    v.eps0 = 0.0;
    v.set_p(p);
    const Matrix atp = matmul(transpose(a), p) + matmul(p, a);
    const double analytic = quadratic_form(atp, x) + trace(matmul(transpose(sigma), matmul(p, sigma)));
    GeneratorConfig cf;
    cf.backend = TraceBackend::closed_form;
    const double scale = std::max(1.0, std::abs(analytic));
    worst_cf = std::max(worst_cf, std::abs(generator(v, m, x, x, 0.0, cf) - analytic) / scale);
    worst_fd = std::max(worst_fd, std::abs(generator(v, m, x, x) - analytic) / scale);
  }
  std::ostringstream s;
  s << "closed form " << fmt("%.1e", worst_cf) << " (tol 1e-8), finite difference " << fmt("%.1e", worst_fd)
    << " relative (tol 1e-3) over 1000 cases";
  return {worst_cf <= 1e-8 && worst_fd <= 1e-3, s.str()};
}

Outcome pretraining_certificate() {
  const TaskSpec task = hyperchaotic_task();
  const TrainConfig cfg;
  const std::size_t n = task.model.state_dim;
  LyapunovNet v(n, cfg.lyapunov_hidden, n, Activation::softplus);
  RngStream rng(303, 0);
  v.init(rng);
  const PretrainResult pre = pretrain_lyapunov(v, task, cfg, rng);
  // Closed loop on the linearized error dynamics with the LQR gain.
  const SdeModel em = error_model(task);
  const Matrix sigma0 = em.eval_diffusion(Vector(n, 0.0), task.linearization_action, 0.0);
  SdeModel lin;
  lin.state_dim = n;
  lin.action_dim = pre.b.cols();
  lin.noise_dim = em.noise_dim;
  lin.drift = [a = pre.a, b = pre.b](const Vector& x, const Vector& u, double) {
    return add(matvec(a, x), matvec(b, u));
  };
  lin.diffusion = [sigma0](const Vector&, const Vector&, double) { return sigma0; };
  auto policy = [&](const Vector& x, double) { return scaled(matvec(pre.k, x), -1.0); };
  const Vector e0 = sub(task.x0, task.reference(0.0));

  std::vector<LyapunovSample> batch;
  Vector x = e0;
  for (std::size_t k = 0; k < 256; ++k) {
    batch.push_back({x, policy(x, 0.0), 0.0, 1.0});
    for (std::size_t s = 0; s < task.substeps; ++s) x = em_step(lin, x, policy(x, 0.0), task.dt, rng);
  }
  const double loss = lyapunov_loss(v, lin, batch, cfg.generator).loss;
  const std::vector<Vector> x0s(200, e0);
  const auto curve = mean_value_curve(v, lin, policy, x0s, task.dt, 3000, rng, 10);
  const bool band = non_increasing_within_band(curve, 0.05);
  std::ostringstream s;
  s << "on-policy loss " << fmt("%.2e", loss) << " (tol 1e-4), E[V] " << fmt("%.3g", curve.front()) << " -> "
    << fmt("%.3g", curve.back()) << (band ? " non-increasing" : " NOT non-increasing")
    << " within 5% band over 200 rollouts, fit rel err " << fmt("%.3f", pre.rel_error);
  return {loss < 1e-4 && band, s.str()};
}

// ---------------------------------------------------------------------------------------------
// Sweep-based criteria

std::vector<const RunOutcome*> runs_of(const SweepResult& sw, Algo a) {
  std::vector<const RunOutcome*> out;
  for (const auto& r : sw.runs)
    if (r.algo == a && !r.failed) out.push_back(&r);
  return out;
}

double median_iae(const SweepResult& sw, Algo a) {
  std::vector<double> v;
  for (const auto* r : runs_of(sw, a)) v.push_back(r->eval.iae);
  return v.empty() ? std::numeric_limits<double>::infinity() : median(v);
}

double final_median_norm(const SweepResult& sw, Algo a) {
  std::vector<double> v;
  for (const auto* r : runs_of(sw, a)) {
    const auto c = smoothed_norm(r->records);
    if (!c.empty()) v.push_back(c.back());
  }
  return v.empty() ? -std::numeric_limits<double>::infinity() : median(v);
}

Outcome mean_square_bounded(const SweepResult& sw) {
  std::size_t ok = 0;
  double seconds = 0.0;
  std::ostringstream s;
  s << "max/initial per seed:";
  for (const auto* r : runs_of(sw, Algo::mtlhrl)) {
    const double ratio = r->eval.max_mean_sq / r->eval.initial_sq;
    ok += ratio < 10.0;
    seconds += r->seconds;
    s << ' ' << fmt("%.3g", ratio);
  }
  s << "; " << ok << "/5 below 10x; " << fmt("%.1f", seconds / 60.0) << " min CPU";
  return {ok >= 4 && seconds < 30 * 60, s.str()};
}

Outcome ordering(const SweepResult& sw, double sweep_seconds) {
  const double m = median_iae(sw, Algo::mtlhrl), st = median_iae(sw, Algo::stlhrl), dd = median_iae(sw, Algo::ddpg),
               pp = median_iae(sw, Algo::ppo);
  std::ostringstream s;
  s << "median IAE mtlhrl " << fmt("%.4g", m) << ", stlhrl " << fmt("%.4g", st) << ", ddpg " << fmt("%.4g", dd)
    << ", ppo " << fmt("%.4g", pp) << "; sweep " << fmt("%.1f", sweep_seconds / 60.0) << " min";
  const bool order = m < st && st < dd, ppo = pp >= dd;
  if (!order) s << "; mtlhrl < stlhrl < ddpg violated";
  if (!ppo) s << "; ppo below ddpg";
  return {order && ppo && sweep_seconds < 2 * 3600, s.str()};
}

Outcome ablations(const SweepResult& sw) {
  const double m = final_median_norm(sw, Algo::mtlhrl), m_iae = median_iae(sw, Algo::mtlhrl);
  bool pass = true;
  std::ostringstream s;
  s << "final median normalized reward mtlhrl " << fmt("%.4f", m);
  for (Algo a : {Algo::abl_no_hierarchy, Algo::abl_no_lyapunov, Algo::abl_no_multiscale}) {
    const double r = final_median_norm(sw, a);
    bool beat = m > r;
    if (std::abs(m - r) <= 1e-9) beat = m_iae < median_iae(sw, a);
    pass = pass && beat;
    s << ", " << to_string(a) << ' ' << fmt("%.4f", r) << (beat ? "" : " (not beaten)");
  }
  return {pass, s.str()};
}

Outcome trust_region(const SweepResult& sw) {
  std::size_t ok = 0, total = 0;
  for (const auto* r : runs_of(sw, Algo::mtlhrl)) {
    total += r->kl.size();
    for (double k : r->kl) ok += k <= 0.012;
  }
  const double frac = total ? static_cast<double>(ok) / static_cast<double>(total) : 0.0;
  std::ostringstream s;
  s << ok << "/" << total << " accepted actor updates with KL <= 0.012 (" << fmt("%.2f%%", 100 * frac) << ", need 95%)";
  return {total > 0 && frac >= 0.95, s.str()};
}

// ---------------------------------------------------------------------------------------------

Outcome lambda_and_schedules(const SweepResult* sw) {
  const Schedules sched;
  bool decreasing = true;
  double prev = sched.gamma(0) / sched.alpha(0);
  for (std::size_t k = 1; k <= 100000; ++k) {
    const double r = sched.gamma(static_cast<double>(k)) / sched.alpha(static_cast<double>(k));
    decreasing = decreasing && r < prev;
    prev = r;
  }
  // stress both halving readings with frequent violations
  double lam_min = std::numeric_limits<double>::infinity();
  for (bool literal : {false, true}) {
    LagrangeState st;
    st.lambda = 0.05;
    st.halve_lambda = literal;
    for (int k = 0; k < 5000; ++k) {
      st = lambda_update(st, k % 3 ? 0.0 : 0.5, k % 3 ? 0.0 : 1.0, k);
      lam_min = std::min(lam_min, st.lambda);
    }
  }
  std::size_t logged = 0;
  if (sw)
    for (const auto& r : sw->runs) {
      if (r.failed) continue;
      lam_min = std::min(lam_min, r.lambda_min);
      for (const auto& e : r.records) {
        lam_min = std::min(lam_min, e.lambda);
        ++logged;
      }
    }
  std::ostringstream s;
  s << "min lambda " << fmt("%.4g", lam_min) << " over 2x5000 stress updates and " << logged
    << " logged episodes; gamma_k/alpha_k " << (decreasing ? "strictly decreasing" : "NOT strictly decreasing")
    << " on [0, 1e5]";
  return {lam_min >= 0.0 && decreasing, s.str()};
}

Outcome metric_exactness() {
  ErrorSeries es;
  const double dt = 1e-3;
  const std::size_t steps = static_cast<std::size_t>(std::llround(2 * M_PI / dt));
  for (std::size_t k = 0; k <= steps; ++k) {
    const double t = std::min(2 * M_PI, static_cast<double>(k) * dt);
    if (!es.times.empty() && t <= es.times.back()) continue;
    es.times.push_back(t);
    es.errors.push_back({std::sin(t)});
  }
  if (es.times.back() < 2 * M_PI) {
    es.times.push_back(2 * M_PI);
    es.errors.push_back({std::sin(2 * M_PI)});
  }
  const double i1 = iae(es), i2 = ise(es);
  const std::vector<double> ones(10, 1.0);
  const double g = high_level_return(ones, 0.99);
  const bool pass = std::abs(i1 - 4.0) / 4.0 < 1e-3 && std::abs(i2 - M_PI) / M_PI < 1e-3 && std::abs(g - 9.5618) < 1e-4;
  std::ostringstream s;
  s << "IAE " << fmt("%.6f", i1) << ", ISE " << fmt("%.6f", i2) << ", ten-step return " << fmt("%.5f", g);
  return {pass, s.str()};
}

Outcome determinism(const fs::path& root) {
  ExperimentConfig c;
  c.env = "hyperchaotic8d";
  c.train.episodes = 10;
  c.eval_rollouts = 5;
  const fs::path a = root / "determinism_a", b = root / "determinism_b";
  fs::remove_all(a);
  fs::remove_all(b);
  run_training(c, Algo::mtlhrl, 7, a);
  run_training(c, Algo::mtlhrl, 7, b);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  };
  const std::string ra = slurp(a / "records.csv"), rb = slurp(b / "records.csv");
  const bool same = !ra.empty() && ra == rb;
  return {same, std::string("records.csv ") + (same ? "byte-identical" : "DIFFERS") + " across two 10-episode runs (" +
                    std::to_string(ra.size()) + " bytes)"};
}

}  // namespace

int main(int argc, char** argv) {
  bool skip_sweep = false;
  for (int i = 1; i < argc; ++i)
    if (std::strcmp(argv[i], "--skip-sweep") == 0) skip_sweep = true;
  const fs::path root = fs::absolute("acceptance_runs");
  fs::create_directories(root);

  timed(1, "gradient-correctness", gradients);
  timed(2, "generator-oracle", generator_oracle);
  timed(3, "pretraining-certificate", pretraining_certificate);

  std::optional<SweepResult> sw;
  double sweep_seconds = 0.0;
  if (!skip_sweep) {
    ExperimentConfig c;
    c.env = "hyperchaotic8d";
    c.algos = all_algos();
    c.seeds = {0, 1, 2, 3, 4};
    c.eval_rollouts = 100;
    c.train.episodes = 200;
    c.output_dir = (root / "sweep").string();
    std::ofstream log(root / "sweep.log");
    const auto t0 = std::chrono::steady_clock::now();
    sw = run_sweep(c, log);
    sweep_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timed(4, "mean-square-boundedness", [&] { return mean_square_bounded(*sw); });
    timed(5, "ordering-iae", [&] { return ordering(*sw, sweep_seconds); });
    timed(6, "ablation-direction", [&] { return ablations(*sw); });
    timed(7, "trust-region-compliance", [&] { return trust_region(*sw); });
  } else {
    for (int id = 4; id <= 7; ++id) std::printf("criterion %2d %-28s SKIP  (--skip-sweep)\n", id, "sweep");
  }
  timed(8, "lambda-and-schedules", [&] { return lambda_and_schedules(sw ? &*sw : nullptr); });
  timed(9, "metric-exactness", metric_exactness);
  timed(10, "determinism", [&] { return determinism(root); });
  std::printf("%d failure(s)\n", failures);
  return failures == 0 ? 0 : 1;
}
