#include "gpmpc/validation.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace gpmpc {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Matrix random_matrix(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) m(i, j) = rng.normal();
  }
  return m;
}

Vector random_uniform(Rng& rng, int size, double lo, double hi) {
  Vector v(size);
  for (int i = 0; i < size; ++i) v(i) = rng.uniform(lo, hi);
  return v;
}

// SPD with eigenvalues roughly in [floor, floor + scale·size].
Matrix random_spd(Rng& rng, int size, double scale, double floor) {
  const Matrix a = random_matrix(rng, size, size);
  return symmetrize(scale * a * a.transpose() / size + floor * Matrix::Identity(size, size));
}

double rel_frobenius(const Matrix& value, const Matrix& reference) {
  return (value - reference).norm() / std::max(reference.norm(), 1e-6);
}

std::string fmt(const char* pattern, double a, double b = 0.0) {
  char buf[200];
  std::snprintf(buf, sizeof buf, pattern, a, b);
  return buf;
}

SuiteResult finish(SuiteResult r, Clock::time_point t0) {
  r.seconds = seconds_since(t0);
  r.passed = r.measured <= r.tolerance && std::isfinite(r.measured);
  return r;
}

}  // namespace

GpModel random_toy_model(Rng& rng, int samples, int n, int m) {
  const int p = n + m;
  GpDataset data;
  data.inputs = Matrix(samples, p);
  for (int j = 0; j < p; ++j) {
    for (int i = 0; i < samples; ++i) data.inputs(i, j) = rng.uniform(-1.0, 1.0);
  }
  const Matrix proj = random_matrix(rng, p, n);
  data.targets = (data.inputs * proj).array().sin().matrix();
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < samples; ++i) data.targets(i, j) += 0.05 * rng.normal();
  }
  std::vector<GpHyperparams> hps(n);
  for (GpHyperparams& hp : hps) {
    hp.signal_variance = rng.uniform(0.5, 2.0);
    hp.noise_variance = rng.uniform(0.01, 0.1);
    hp.scales = random_uniform(rng, p, 0.3, 3.0);
  }
  return GpModel(std::move(data), std::move(hps));
}

DeterministicPrediction dense_gp_prediction(const GpModel& model, const Vector& input) {
  const GpDataset& data = model.dataset();
  const int d = data.size();
  DeterministicPrediction out{Vector(model.state_dim()), Vector(model.state_dim())};
  for (int a = 0; a < model.state_dim(); ++a) {
    const GpHyperparams& hp = model.hyperparams(a);
    auto kernel = [&](const Vector& x, const Vector& y) {
      double q = 0.0;
      for (int j = 0; j < x.size(); ++j) q += hp.scales(j) * (x(j) - y(j)) * (x(j) - y(j));
      return hp.signal_variance * std::exp(-0.5 * q);
    };
    Matrix k(d, d);
    Vector ks(d);
    for (int i = 0; i < d; ++i) {
      const Vector xi = data.inputs.row(i).transpose();
      ks(i) = kernel(xi, input);
      for (int j = 0; j < d; ++j) k(i, j) = kernel(xi, data.inputs.row(j).transpose());
      k(i, i) += hp.noise_variance;
    }
    const Eigen::FullPivLU<Matrix> lu(k);
    out.mean(a) = ks.dot(lu.solve(Vector(data.targets.col(a))));
    out.variance(a) = std::max(0.0, hp.signal_variance - ks.dot(lu.solve(ks)));
  }
  return out;
}

Vector brute_force_qp(const QpProblem& prob) {
  const int p = prob.size();
  const int c = prob.constraints();
  if (c > 20) throw InvalidInput("brute_force_qp: too many constraints to enumerate");
  double best = std::numeric_limits<double>::infinity();
  Vector best_x;
  for (unsigned mask = 0; mask < (1u << c); ++mask) {
    std::vector<int> rows;
    for (int i = 0; i < c; ++i) {
      if (mask & (1u << i)) rows.push_back(i);
    }
    const int k = static_cast<int>(rows.size());
    if (k > p) continue;
    Matrix kkt = Matrix::Zero(p + k, p + k);
    Vector rhs(p + k);
    kkt.topLeftCorner(p, p) = prob.phi;
    rhs.head(p) = -prob.psi;
    for (int r = 0; r < k; ++r) {
      kkt.block(p + r, 0, 1, p) = prob.g_mat.row(rows[r]);
      kkt.block(0, p + r, p, 1) = prob.g_mat.row(rows[r]).transpose();
      rhs(p + r) = prob.g_rhs(rows[r]);
    }
    const Eigen::FullPivLU<Matrix> lu(kkt);
    if (lu.rank() < p + k) continue;
    const Vector sol = lu.solve(rhs);
    const Vector x = sol.head(p);
    if ((sol.tail(k).array() < -1e-9).any()) continue;
    const Vector slack = prob.g_rhs - prob.g_mat * x;
    bool feasible = true;
    for (int i = 0; i < c; ++i) feasible = feasible && slack(i) >= -1e-9 * (1.0 + std::abs(prob.g_rhs(i)));
    if (!feasible) continue;
    const double f = prob.objective(x);
    if (f < best) {
      best = f;
      best_x = x;
    }
  }
  if (best_x.size() == 0) throw SolverError("brute_force_qp: no KKT point found");
  return best_x;
}

std::vector<Vector> direct_velocity_rollout(const Matrix& a_mat, const Matrix& b_mat, const Vector& s_k,
                                            const Vector& ds_k, const Vector& du, int horizon) {
  const int m = static_cast<int>(b_mat.cols());
  std::vector<Vector> states;
  Vector s = s_k;
  Vector ds = ds_k;
  for (int i = 0; i < horizon; ++i) {
    ds = a_mat * ds + b_mat * du.segment(i * m, m);
    s = s + ds;
    states.push_back(s);
  }
  return states;
}

SuiteResult suite_gp_dense(const ValidationOptions& opts) {
  const auto t0 = Clock::now();
  SuiteResult r;
  r.name = "gp_dense_oracle";
  r.tolerance = 1e-8;
  Rng rng(derive_seed(opts.seed, 101));
  for (int c = 0; c < 50; ++c) {
    const int n = 1 + static_cast<int>(rng.next_u64() % 3);
    const int m = 1 + static_cast<int>(rng.next_u64() % 2);
    const int d = 3 + static_cast<int>(rng.next_u64() % 10);
    const GpModel model = random_toy_model(rng, d, n, m);
    for (int q = 0; q < 10; ++q) {
      const Vector x = random_uniform(rng, n + m, -1.5, 1.5);
      const DeterministicPrediction got = predict_deterministic(model, x);
      const DeterministicPrediction ref = dense_gp_prediction(model, x);
      for (int a = 0; a < n; ++a) {
        const double yscale = model.dataset().targets.col(a).cwiseAbs().maxCoeff();
        r.measured = std::max(r.measured, std::abs(got.mean(a) - ref.mean(a)) / std::max(std::abs(ref.mean(a)), yscale));
        r.measured = std::max(r.measured, std::abs(got.variance(a) - ref.variance(a)) / model.hyperparams(a).signal_variance);
      }
    }
    ++r.cases;
  }
  r.detail = "max relative error of mean and variance over 50 models × 10 queries";
  return finish(r, t0);
}

SuiteResult suite_moment_matching(const ValidationOptions& opts) {
  const auto t0 = Clock::now();
  SuiteResult r;
  r.name = "moment_matching_monte_carlo";
  r.tolerance = 4.0;
  const DeterministicPredictor predictor = opts.mc_predictor ? opts.mc_predictor : &predict_deterministic;
  Rng rng(derive_seed(opts.seed, 102));
  for (int c = 0; c < 20; ++c) {
    const int n = 2, m = 1, p = n + m;
    const GpModel model = random_toy_model(rng, 6 + c % 5, n, m);
    GaussianInput input;
    input.mean = random_uniform(rng, p, -0.5, 0.5);
    input.cov = c == 0 ? Matrix(0.01 * Matrix::Identity(p, p)) : random_spd(rng, p, rng.uniform(0.005, 0.05), 1e-3);
    const UncertainPrediction mm = predict_uncertain(model, input);
    const McMoments mc = mc_oracle_with(model, input, opts.mc_samples, derive_seed(opts.seed, 1000 + c), opts.jobs, predictor);
    auto score = [&](double value, double reference, double se) {
      const double diff = std::abs(value - reference);
      if (se <= 0.0) return diff <= 1e-12 ? 0.0 : std::numeric_limits<double>::infinity();
      return diff / se;
    };
    for (int i = 0; i < n; ++i) {
      r.measured = std::max(r.measured, score(mm.delta_mean(i), mc.mean(i), mc.mean_se(i)));
      for (int j = 0; j < n; ++j) {
        if (j >= i) r.measured = std::max(r.measured, score(mm.delta_cov(i, j), mc.cov(i, j), mc.cov_se(i, j)));
        r.measured = std::max(r.measured, score(mm.io_cov(i, j), mc.io_cov(i, j), mc.io_cov_se(i, j)));
      }
    }
    ++r.cases;
  }
  r.detail = "max |moment matching − Monte Carlo| in standard errors, " + std::to_string(opts.mc_samples) +
             " samples per case";
  return finish(r, t0);
}

SuiteResult suite_jacobians(const ValidationOptions& opts) {
  const auto t0 = Clock::now();
  SuiteResult r;
  r.name = "jacobians_finite_difference";
  r.tolerance = 1e-4;
  Rng rng(derive_seed(opts.seed, 103));
  const double h = 1e-6;
  const std::pair<int, int> shapes[] = {{2, 1}, {3, 2}};
  for (const auto& [n, m] : shapes) {
    const GpModel model = random_toy_model(rng, 12, n, m);
    for (int c = 0; c < 10; ++c) {
      const Vector mu = random_uniform(rng, n, -0.8, 0.8);
      const Vector u = random_uniform(rng, m, -0.8, 0.8);
      const Matrix cov = random_spd(rng, n, 0.05, 0.01);
      const GaussianState state{mu, cov};

      // Basic local model: (μ, u) ↦ μ'.
      const BasicLocalModel basic = linearize_basic(model, state, u);
      Vector zu(n + m);
      zu << mu, u;
      const Matrix fd_basic = finite_diff_jacobian(
          [&](const Vector& z) { return propagate_state(model, GaussianState{z.head(n), cov}, z.tail(m)).mean; }, zu, h);
      Matrix basic_jac(n, n + m);
      basic_jac << basic.a_mat, basic.b_mat;
      r.measured = std::max(r.measured, rel_frobenius(basic_jac, fd_basic));

      // Propagation Jacobians with respect to Σ, symmetric perturbations.
      PropagationJacobians jac;
      propagate_state(model, state, u, &jac);
      Matrix fd_mean_cov(n, n * n), fd_cov_cov(n * n, n * n);
      for (int l = 0; l < n; ++l) {
        for (int k = 0; k < n; ++k) {
          Matrix e = Matrix::Zero(n, n);
          e(k, l) += 0.5;
          e(l, k) += 0.5;
          const GaussianState plus = propagate_state(model, GaussianState{mu, cov + h * e}, u);
          const GaussianState minus = propagate_state(model, GaussianState{mu, cov - h * e}, u);
          fd_mean_cov.col(k + l * n) = (plus.mean - minus.mean) / (2.0 * h);
          fd_cov_cov.col(k + l * n) = vec(plus.cov - minus.cov) / (2.0 * h);
        }
      }
      r.measured = std::max(r.measured, rel_frobenius(jac.mean_cov, fd_mean_cov));
      r.measured = std::max(r.measured, rel_frobenius(jac.cov_cov, fd_cov_cov));
      const Matrix fd_cov_mu = finite_diff_jacobian(
          [&](const Vector& z) { return vec(propagate_state(model, GaussianState{z.head(n), cov}, z.tail(m)).cov); }, zu, h);
      Matrix cov_mu(n * n, n + m);
      cov_mu << jac.cov_mean, jac.cov_ctrl;
      r.measured = std::max(r.measured, rel_frobenius(cov_mu, fd_cov_mu));

      // Extended local model: (s, u) ↦ s'.
      const Vector s = to_extended(state);
      const ExtendedLocalModel ext = linearize_extended(model, s, u);
      Vector su(s.size() + m);
      su << s, u;
      const Matrix fd_ext = finite_diff_jacobian(
          [&](const Vector& z) { return extended_step(model, z.head(s.size()), z.tail(m)); }, su, h);
      Matrix ext_jac(s.size(), s.size() + m);
      ext_jac << ext.a_mat, ext.b_mat;
      r.measured = std::max(r.measured, rel_frobenius(ext_jac, fd_ext));
      ++r.cases;
    }
  }
  r.detail = "max relative Frobenius error against central differences (step 1e-6)";
  return finish(r, t0);
}

SuiteResult suite_qp_bruteforce(const ValidationOptions& opts) {
  const auto t0 = Clock::now();
  SuiteResult r;
  r.name = "qp_brute_force";
  r.tolerance = 1e-6;
  Rng rng(derive_seed(opts.seed, 104));
  for (int c = 0; c < 100; ++c) {
    const int p = 1 + static_cast<int>(rng.next_u64() % 6);
    const int rows = 1 + static_cast<int>(rng.next_u64() % 10);
    QpProblem qp;
    qp.phi = random_spd(rng, p, 1.0, 0.1);
    qp.psi = 3.0 * random_matrix(rng, p, 1);
    qp.g_mat = random_matrix(rng, rows, p);
    const Vector x0 = random_uniform(rng, p, -1.0, 1.0);
    qp.g_rhs = qp.g_mat * x0;
    for (int i = 0; i < rows; ++i) {
      // Some rows start active to exercise degenerate starts.
      if (rng.uniform() > 0.2) qp.g_rhs(i) += rng.uniform(0.0, 1.0);
    }
    const Vector start = c % 2 == 0 ? x0 : find_feasible_point(qp);
    const QpSolution sol = solve_qp(qp, start);
    const Vector ref = brute_force_qp(qp);
    r.measured = std::max(r.measured, (sol.x - ref).norm());
    ++r.cases;
  }
  r.detail = "max ‖x − x*‖ against exhaustive working-set enumeration";
  return finish(r, t0);
}

SuiteResult suite_condensation(const ValidationOptions& opts) {
  const auto t0 = Clock::now();
  SuiteResult r;
  r.name = "condensed_qp_cost";
  r.tolerance = 1e-8;
  Rng rng(derive_seed(opts.seed, 105));
  const int horizons[] = {1, 5, 10};
  const double inf = std::numeric_limits<double>::infinity();
  for (int c = 0; c < 20; ++c) {
    const int h = horizons[c % 3];
    const int n = 1 + c % 3;
    const int m = 1 + c % 2;
    const int e = n + n * n;
    ExtendedLocalModel ext;
    ext.a_mat = random_matrix(rng, e, e) * (0.9 / std::sqrt(static_cast<double>(e)));
    ext.b_mat = random_matrix(rng, e, m);
    const Vector s_k = random_matrix(rng, e, 1);
    const Vector ds_k = 0.1 * random_matrix(rng, e, 1);
    const Vector u_prev = random_matrix(rng, m, 1);
    MpcConfig cfg;
    cfg.horizon = h;
    cfg.q_mat = random_spd(rng, n, 1.0, 0.1);
    cfg.r_mat = random_spd(rng, m, 1.0, 0.1);
    cfg.u_min = Vector::Constant(m, -10.0);
    cfg.u_max = Vector::Constant(m, 10.0);
    cfg.x_min = Vector::Constant(n, -inf);
    cfg.x_max = Vector::Constant(n, inf);
    std::vector<Vector> refs;
    for (int i = 0; i < h; ++i) refs.push_back(random_matrix(rng, n, 1));
    const CondensedQp cq = build_condensed_qp(ext, s_k, ds_k, u_prev, refs, cfg);
    for (int draw = 0; draw < 5; ++draw) {
      const Vector du = random_matrix(rng, h * m, 1);
      const std::vector<Vector> states = direct_velocity_rollout(ext.a_mat, ext.b_mat, s_k, ds_k, du, h);
      std::vector<Vector> means, controls;
      std::vector<Matrix> covs;
      Vector u = u_prev;
      for (int i = 0; i < h; ++i) {
        means.push_back(states[i].head(n));
        const Matrix root = unvec(states[i].tail(n * n), n, n);
        covs.push_back(root.cwiseProduct(root));
        u += du.segment(i * m, m);
        controls.push_back(u);
      }
      const double direct = expected_cost(means, covs, controls, refs, cfg);
      const double condensed = cq.objective(du);
      r.measured = std::max(r.measured, std::abs(condensed - direct) / std::max(std::abs(direct), 1.0));
    }
    ++r.cases;
  }
  r.detail = "max relative gap between ½ΔUᵀΦΔU + ψᵀΔU + C and the horizon cost";
  return finish(r, t0);
}

SuiteResult suite_fpsqp(const ValidationOptions& opts) {
  (void)opts;
  const auto t0 = Clock::now();
  SuiteResult r;
  r.name = "fpsqp_convex_qp";
  r.tolerance = 1e-6;

  QpProblem qp;
  qp.phi = Matrix(3, 3);
  qp.phi << 4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0;
  qp.psi = Vector(3);
  qp.psi << -8.0, -6.0, -4.0;
  const double inf = std::numeric_limits<double>::infinity();

  NlpSpec nlp;
  nlp.dims = 3;
  nlp.evaluate = [&](const Vector& z, bool derivs) {
    NlpEvaluation ev;
    ev.value = qp.objective(z);
    if (derivs) ev.gradient = qp.phi * z + qp.psi;
    return ev;
  };
  nlp.lin_mat = Matrix(4, 3);
  nlp.lin_mat << 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0;
  nlp.lin_lower = Vector(4);
  nlp.lin_lower << -inf, -2.0, -2.0, -2.0;
  nlp.lin_upper = Vector(4);
  nlp.lin_upper << 1.0, 2.0, 2.0, 2.0;

  QpProblem as_rows;
  as_rows.phi = qp.phi;
  as_rows.psi = qp.psi;
  as_rows.g_mat = Matrix(7, 3);
  as_rows.g_mat << nlp.lin_mat.row(0), Matrix::Identity(3, 3), -Matrix::Identity(3, 3);
  as_rows.g_rhs = Vector(7);
  as_rows.g_rhs << 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0;
  const Vector expected = brute_force_qp(as_rows);

  FpsqpConfig cfg;
  cfg.max_iterations = 10;
  // The stop test is on predicted decrease, which scales with ‖z − z*‖².
  cfg.stop_tolerance = 1e-16;
  const Vector z0 = Vector::Constant(3, -1.0);
  const FpsqpResult res = solve_fpsqp(nlp, z0, cfg);
  double worst_violation = nlp.linear_violation(z0);
  for (const FpsqpIterate& it : res.history) worst_violation = std::max(worst_violation, nlp.linear_violation(it.z));
  r.measured = (res.z - expected).norm();
  r.cases = 1;
  r.detail = fmt("‖z − z*‖ after %.0f iterations, worst iterate violation %.3g", res.iterations, worst_violation);
  r = finish(r, t0);
  r.passed = r.passed && res.iterations <= 10 && worst_violation <= 1e-12;
  return r;
}

std::vector<SuiteResult> run_validation(const ValidationOptions& opts) {
  return {suite_gp_dense(opts),      suite_moment_matching(opts), suite_jacobians(opts),
          suite_qp_bruteforce(opts), suite_condensation(opts),    suite_fpsqp(opts)};
}

std::string validation_report_json(const std::vector<SuiteResult>& results) {
  nlohmann::ordered_json suites = nlohmann::ordered_json::array();
  bool all = true;
  for (const SuiteResult& r : results) {
    all = all && r.passed;
    suites.push_back({{"name", r.name},
                      {"passed", r.passed},
                      {"measured", r.measured},
                      {"tolerance", r.tolerance},
                      {"cases", r.cases},
                      {"seconds", r.seconds},
                      {"detail", r.detail}});
  }
  nlohmann::ordered_json doc = {{"passed", all}, {"suites", suites}};
  return doc.dump(1) + "\n";
}

std::string validation_report_text(const std::vector<SuiteResult>& results) {
  std::ostringstream out;
  for (const SuiteResult& r : results) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-30s %s  measured %.3e  tol %.1e  %d cases  %.2fs\n", r.name.c_str(),
                  r.passed ? "PASS" : "FAIL", r.measured, r.tolerance, r.cases, r.seconds);
    out << buf;
  }
  return out.str();
}

}  // namespace gpmpc
