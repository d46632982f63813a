#include "gpmpc/gpmpc.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace gpmpc {
namespace {

Vector tile(const Vector& v, int times) {
  Vector out(v.size() * times);
  for (int i = 0; i < times; ++i) out.segment(i * v.size(), v.size()) = v;
  return out;
}

Vector clamp_into(const Vector& v, const Vector& lo, const Vector& hi) { return v.cwiseMax(lo).cwiseMin(hi); }

void require_refs(const std::vector<Vector>& refs, int horizon, int n) {
  require_dims(static_cast<int>(refs.size()) >= horizon, "reference slice shorter than the horizon");
  for (int i = 0; i < horizon; ++i) require_dims(refs[i].size() == n, "reference has wrong dimension");
}

// Moment-matched shooting over a control sequence with forward sensitivities.
struct Shooting {
  std::vector<Vector> means;
  std::vector<Matrix> covs;
  std::vector<Matrix> dmean;  // n × Hm
  std::vector<Matrix> dcov;   // n² × Hm
};

Shooting shoot(const GpModel& model, const GaussianState& init, const Vector& seq, int horizon,
               bool derivs) {
  const int n = model.state_dim();
  const int m = model.control_dim();
  const int cols = horizon * m;
  Shooting out;
  GaussianState s = init;
  Matrix dm = Matrix::Zero(n, cols);
  Matrix dc = Matrix::Zero(n * n, cols);
  for (int i = 0; i < horizon; ++i) {
    PropagationJacobians jac;
    s = propagate_state(model, s, seq.segment(i * m, m), derivs ? &jac : nullptr);
    out.means.push_back(s.mean);
    out.covs.push_back(s.cov);
    if (!derivs) continue;
    Matrix next_dm = jac.mean_mean * dm + jac.mean_cov * dc;
    Matrix next_dc = jac.cov_mean * dm + jac.cov_cov * dc;
    next_dm.middleCols(i * m, m) += jac.mean_ctrl;
    next_dc.middleCols(i * m, m) += jac.cov_ctrl;
    dm = std::move(next_dm);
    dc = std::move(next_dc);
    out.dmean.push_back(dm);
    out.dcov.push_back(dc);
  }
  return out;
}

// Nonlinear state rows of GPMPC1: tightened bounds written as d(z) ≤ 0.
void state_constraints(const Shooting& sh, const MpcConfig& cfg, bool derivs, Vector& values,
                       Matrix& jacobian, int cols) {
  const int horizon = static_cast<int>(sh.means.size());
  const int n = static_cast<int>(cfg.x_min.size());
  std::vector<double> vals;
  std::vector<Eigen::RowVectorXd> rows;
  for (int i = 0; i < horizon; ++i) {
    for (int d = 0; d < n; ++d) {
      const double var = sh.covs[i](d, d);
      double spread = 0.0;
      Eigen::RowVectorXd dspread;
      if (cfg.tightening == TighteningMode::PaperVariance) {
        spread = 2.0 * var;
        if (derivs) dspread = 2.0 * sh.dcov[i].row(d + d * n);
      } else {
        const double root = std::sqrt(std::max(var, 1e-12));
        spread = 2.0 * root;
        if (derivs) dspread = sh.dcov[i].row(d + d * n) / root;
      }
      if (std::isfinite(cfg.x_max(d))) {
        vals.push_back(sh.means[i](d) + spread - cfg.x_max(d));
        if (derivs) rows.push_back(sh.dmean[i].row(d) + dspread);
      }
      if (std::isfinite(cfg.x_min(d))) {
        vals.push_back(cfg.x_min(d) - sh.means[i](d) + spread);
        if (derivs) rows.push_back(-sh.dmean[i].row(d) + dspread);
      }
    }
  }
  values = Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
  if (derivs) {
    jacobian.resize(static_cast<Eigen::Index>(rows.size()), cols);
    for (std::size_t r = 0; r < rows.size(); ++r) jacobian.row(static_cast<Eigen::Index>(r)) = rows[r];
  }
}

StepDiagnostics diagnostics_from(const std::vector<Vector>& means, const std::vector<Matrix>& covs,
                                 const Vector& seq, int m, const MpcConfig& cfg) {
  StepDiagnostics d;
  d.means = means;
  d.covs = covs;
  for (std::size_t i = 0; i < means.size(); ++i) {
    d.controls.push_back(seq.segment(static_cast<Eigen::Index>(i) * m, m));
    d.bounds.push_back(tighten_constraints(cfg.x_min, cfg.x_max, covs[i], cfg, static_cast<int>(i)));
  }
  return d;
}

}  // namespace

std::string tightening_name(TighteningMode mode) {
  return mode == TighteningMode::PaperVariance ? "paper-2sigma-variance" : "two-std";
}

TighteningMode parse_tightening(const std::string& name) {
  if (name == "paper-2sigma-variance") return TighteningMode::PaperVariance;
  if (name == "two-std") return TighteningMode::TwoStd;
  throw InvalidInput("unknown tightening mode '" + name + "'");
}

void MpcConfig::validate(int n, int m) const {
  if (horizon < 1) throw InvalidInput("horizon must be at least 1");
  require_dims(q_mat.rows() == n && q_mat.cols() == n, "Q must be n×n");
  require_dims(r_mat.rows() == m && r_mat.cols() == m, "R must be m×m");
  require_dims(u_min.size() == m && u_max.size() == m, "control bounds must have m entries");
  require_dims(x_min.size() == n && x_max.size() == n, "state bounds must have n entries");
  if ((u_min.array() > u_max.array()).any()) throw InvalidInput("u_min exceeds u_max");
  if (!u_min.allFinite() || !u_max.allFinite()) throw InvalidInput("control bounds must be finite");
  if (!(x_min.array() < x_max.array()).all()) throw InvalidInput("x_min must be below x_max");
  if (std::abs(confidence - 0.95) > 1e-12) {
    throw InvalidInput("only the confidence level 0.95 (factor 2) is supported");
  }
  if ((q_mat - q_mat.transpose()).cwiseAbs().maxCoeff() > 1e-12 || min_eigenvalue(q_mat) <= 0.0) {
    throw InvalidInput("Q must be symmetric positive definite");
  }
  if ((r_mat - r_mat.transpose()).cwiseAbs().maxCoeff() > 1e-12 || min_eigenvalue(r_mat) <= 0.0) {
    throw InvalidInput("R must be symmetric positive definite");
  }
  if (sqp_max_iterations < 0 || !(sqp_radius_max > 0.0)) throw InvalidInput("bad SQP settings");
}

double stage_cost(const Vector& mean, const Matrix& cov, const Vector& control, const Vector& ref,
                  const MpcConfig& cfg) {
  const Vector e = mean - ref;
  return e.dot(cfg.q_mat * e) + control.dot(cfg.r_mat * control) + (cfg.q_mat * cov).trace();
}

double expected_cost(const std::vector<Vector>& means, const std::vector<Matrix>& covs,
                     const std::vector<Vector>& controls, const std::vector<Vector>& refs,
                     const MpcConfig& cfg) {
  const std::size_t h = means.size();
  require_dims(covs.size() == h && controls.size() == h && refs.size() >= h,
               "expected_cost: sequence lengths differ");
  double total = 0.0;
  for (std::size_t i = 0; i < h; ++i) total += stage_cost(means[i], covs[i], controls[i], refs[i], cfg);
  return total;
}

StateBounds tighten_constraints(const Vector& x_min, const Vector& x_max, const Matrix& cov,
                                const MpcConfig& cfg, int step) {
  const int n = static_cast<int>(x_min.size());
  require_dims(x_max.size() == n && cov.rows() == n && cov.cols() == n,
               "tighten_constraints: dimension mismatch");
  StateBounds out{x_min, x_max};
  for (int d = 0; d < n; ++d) {
    const double var = std::max(0.0, cov(d, d));
    const double spread = cfg.tightening == TighteningMode::PaperVariance ? 2.0 * var : 2.0 * std::sqrt(var);
    out.lower(d) += spread;
    out.upper(d) -= spread;
    if (out.lower(d) > out.upper(d)) {
      std::string where = "state dimension " + std::to_string(d + 1);
      if (step >= 0) where += " at horizon step " + std::to_string(step + 1);
      throw InfeasibleError("tightened state constraints are empty for " + where, d, step);
    }
  }
  return out;
}

CondensedQp build_condensed_qp(const ExtendedLocalModel& ext, const Vector& s_k, const Vector& ds_k,
                               const Vector& u_prev, const std::vector<Vector>& refs,
                               const MpcConfig& cfg) {
  const int m = static_cast<int>(ext.b_mat.cols());
  const int e = static_cast<int>(ext.a_mat.rows());
  const int n = static_cast<int>(std::lround((std::sqrt(1.0 + 4.0 * e) - 1.0) / 2.0));
  require_dims(n + n * n == e && ext.a_mat.cols() == e && ext.b_mat.rows() == e,
               "build_condensed_qp: extended model shape");
  require_dims(s_k.size() == e && ds_k.size() == e && u_prev.size() == m,
               "build_condensed_qp: operating point shape");
  cfg.validate(n, m);
  const int h = cfg.horizon;
  require_refs(refs, h, n);

  CondensedQp qp;
  qp.n = n;
  qp.m = m;
  qp.horizon = h;
  qp.s_k = s_k;
  qp.ds_k = ds_k;
  qp.u_prev = u_prev;

  std::vector<Matrix> powers(h + 1);
  powers[0] = Matrix::Identity(e, e);
  for (int i = 1; i <= h; ++i) powers[i] = ext.a_mat * powers[i - 1];

  qp.a_tilde.resize(h * e, e);
  qp.b_tilde = Matrix::Zero(h * e, h * m);
  qp.t_z = Matrix::Zero(h * e, h * e);
  qp.t_u = Matrix::Zero(h * m, h * m);
  for (int i = 0; i < h; ++i) {
    qp.a_tilde.middleRows(i * e, e) = powers[i + 1];
    for (int j = 0; j <= i; ++j) {
      qp.b_tilde.block(i * e, j * m, e, m) = powers[i - j] * ext.b_mat;
      qp.t_z.block(i * e, j * e, e, e).setIdentity();
      qp.t_u.block(i * m, j * m, m, m).setIdentity();
    }
  }

  qp.q_tilde = Matrix::Zero(h * e, h * e);
  qp.r_tilde = Matrix::Zero(h * m, h * m);
  qp.ref_stack = Vector::Zero(h * e);
  const Vector q_vec = vec(cfg.q_mat);
  for (int i = 0; i < h; ++i) {
    qp.q_tilde.block(i * e, i * e, n, n) = cfg.q_mat;
    qp.q_tilde.block(i * e + n, i * e + n, n * n, n * n) = q_vec.asDiagonal();
    qp.r_tilde.block(i * m, i * m, m, m) = cfg.r_mat;
    qp.ref_stack.segment(i * e, n) = refs[i];
  }

  qp.z_nominal = tile(s_k, h) + qp.t_z * (qp.a_tilde * ds_k);
  qp.g_z = qp.t_z * qp.b_tilde;
  qp.u_nominal = tile(u_prev, h);

  const Vector z_err = qp.z_nominal - qp.ref_stack;
  const Matrix qg = qp.q_tilde * qp.g_z;
  const Matrix rt = qp.r_tilde * qp.t_u;
  qp.phi = symmetrize(2.0 * (qp.g_z.transpose() * qg + qp.t_u.transpose() * rt));
  qp.psi = 2.0 * (qg.transpose() * z_err + rt.transpose() * qp.u_nominal);
  qp.const_c = z_err.dot(qp.q_tilde * z_err) + qp.u_nominal.dot(qp.r_tilde * qp.u_nominal);

  // Constraint rows: control bounds, then per step and state dimension the
  // tightened upper and lower bounds on μ.
  std::vector<Eigen::RowVectorXd> rows;
  std::vector<double> rhs;
  const Vector u_hi = tile(cfg.u_max, h) - qp.u_nominal;
  const Vector u_lo = qp.u_nominal - tile(cfg.u_min, h);
  for (int r = 0; r < h * m; ++r) {
    rows.push_back(qp.t_u.row(r));
    rhs.push_back(u_hi(r));
    rows.push_back(-qp.t_u.row(r));
    rhs.push_back(u_lo(r));
  }
  for (int i = 0; i < h; ++i) {
    const Vector z_i = qp.z_nominal.segment(i * e, e);
    const Matrix s_bar = unvec(z_i.tail(n * n), n, n);
    const Matrix cov_bar = s_bar * s_bar.transpose();
    tighten_constraints(cfg.x_min, cfg.x_max, cov_bar, cfg, i);
    for (int d = 0; d < n; ++d) {
      const Eigen::RowVectorXd mu_row = qp.g_z.row(i * e + d);
      Eigen::RowVectorXd spread_row;
      double spread_bar = 0.0;
      if (cfg.tightening == TighteningMode::PaperVariance) {
        // Σ_dd = Σ_l S_dl² linearized at the nominal S̄.
        spread_row = Eigen::RowVectorXd::Zero(h * m);
        for (int l = 0; l < n; ++l) spread_row += 4.0 * s_bar(d, l) * qp.g_z.row(i * e + n + d + l * n);
        spread_bar = 2.0 * cov_bar(d, d);
      } else {
        spread_row = 2.0 * qp.g_z.row(i * e + n + d + d * n);
        spread_bar = 2.0 * s_bar(d, d);
      }
      if (std::isfinite(cfg.x_max(d))) {
        rows.push_back(mu_row + spread_row);
        rhs.push_back(cfg.x_max(d) - z_i(d) - spread_bar);
      }
      if (std::isfinite(cfg.x_min(d))) {
        rows.push_back(-mu_row + spread_row);
        rhs.push_back(z_i(d) - cfg.x_min(d) - spread_bar);
      }
    }
  }
  qp.g_mat.resize(static_cast<Eigen::Index>(rows.size()), h * m);
  for (std::size_t r = 0; r < rows.size(); ++r) qp.g_mat.row(static_cast<Eigen::Index>(r)) = rows[r];
  qp.g_rhs = Eigen::Map<const Vector>(rhs.data(), static_cast<Eigen::Index>(rhs.size()));
  return qp;
}

Gpmpc1Result gpmpc1_step(const GpModel& model, const GaussianState& state, const Vector& u_prev,
                         const std::vector<Vector>& refs, const MpcConfig& cfg, const Vector* warm) {
  const int n = model.state_dim();
  const int m = model.control_dim();
  cfg.validate(n, m);
  const int h = cfg.horizon;
  require_refs(refs, h, n);
  require_dims(u_prev.size() == m, "gpmpc1_step: u_prev dimension mismatch");
  const int p = h * m;
  const Vector lo = tile(cfg.u_min, h);
  const Vector hi = tile(cfg.u_max, h);
  const Vector q_vec = vec(cfg.q_mat);

  NlpSpec nlp;
  nlp.dims = p;
  nlp.lin_mat = Matrix::Identity(p, p);
  nlp.lin_lower = lo;
  nlp.lin_upper = hi;
  nlp.evaluate = [&](const Vector& z, bool derivs) {
    const Shooting sh = shoot(model, state, z, h, derivs);
    NlpEvaluation ev;
    ev.value = 0.0;
    if (derivs) ev.gradient = Vector::Zero(p);
    for (int i = 0; i < h; ++i) {
      const Vector err = sh.means[i] - refs[i];
      const Vector u = z.segment(i * m, m);
      ev.value += err.dot(cfg.q_mat * err) + u.dot(cfg.r_mat * u) + (cfg.q_mat * sh.covs[i]).trace();
      if (derivs) {
        ev.gradient += 2.0 * sh.dmean[i].transpose() * (cfg.q_mat * err) + sh.dcov[i].transpose() * q_vec;
        ev.gradient.segment(i * m, m) += 2.0 * cfg.r_mat * u;
      }
    }
    state_constraints(sh, cfg, derivs, ev.ineq, ev.ineq_jacobian, p);
    return ev;
  };

  std::vector<Vector> starts;
  if (warm && warm->size() == p) starts.push_back(clamp_into(*warm, lo, hi));
  starts.push_back(clamp_into(tile(u_prev, h), lo, hi));
  starts.push_back(clamp_into(Vector::Zero(p), lo, hi));
  const Vector* start = nullptr;
  for (const Vector& s : starts) {
    const NlpEvaluation ev = nlp.evaluate(s, false);
    if (ev.ineq.size() == 0 || ev.ineq.maxCoeff() <= 1e-10) {
      start = &s;
      break;
    }
  }
  if (!start) {
    // Name the first violated step/dimension of the fallback sequence.
    const Shooting sh = shoot(model, state, starts.back(), h, false);
    for (int i = 0; i < h; ++i) tighten_constraints(cfg.x_min, cfg.x_max, sh.covs[i], cfg, i);
    throw InfeasibleError("gpmpc1: no feasible initial control sequence");
  }

  FpsqpConfig sqp;
  sqp.max_iterations = cfg.sqp_max_iterations;
  sqp.stop_tolerance = cfg.sqp_tolerance;
  sqp.radius_max = cfg.sqp_radius_max;
  if (cfg.sqp_gauss_newton_start) {
    const Shooting sh = shoot(model, state, *start, h, true);
    Matrix hess = Matrix::Zero(p, p);
    for (int i = 0; i < h; ++i) {
      hess += 2.0 * sh.dmean[i].transpose() * cfg.q_mat * sh.dmean[i];
      hess.block(i * m, i * m, m, m) += 2.0 * cfg.r_mat;
    }
    sqp.initial_hessian = symmetrize(hess);
  }
  const FpsqpResult res = solve_fpsqp(nlp, *start, sqp);

  const Shooting sh = shoot(model, state, res.z, h, false);
  Gpmpc1Result out;
  out.sequence = clamp_into(res.z, lo, hi);
  out.u = out.sequence.head(m);
  out.diag = diagnostics_from(sh.means, sh.covs, out.sequence, m, cfg);
  out.diag.objective = res.value;
  out.diag.iterations = res.iterations;
  out.diag.qp_iterations = res.qp_iterations;
  out.diag.converged = res.converged;
  return out;
}

Gpmpc2Result gpmpc2_step(const GpModel& model, const GaussianState& state, const Vector& u_prev,
                         const std::vector<Vector>& refs, const MpcConfig& cfg, const Gpmpc2Memory* memory) {
  const int n = model.state_dim();
  const int m = model.control_dim();
  cfg.validate(n, m);
  require_dims(u_prev.size() == m, "gpmpc2_step: u_prev dimension mismatch");
  const int h = cfg.horizon;
  const int e = n + n * n;

  const Vector s_k = to_extended(state);
  Vector ds_k = Vector::Zero(e);
  if (memory && memory->valid && memory->prev_state.size() == e) ds_k = s_k - memory->prev_state;
  const ExtendedLocalModel ext = linearize_extended(model, s_k, u_prev);
  const CondensedQp cq = build_condensed_qp(ext, s_k, ds_k, u_prev, refs, cfg);
  const QpProblem qp = cq.qp();

  auto feasible = [&](const Vector& x) {
    return qp.constraints() == 0 || ((qp.g_mat * x - qp.g_rhs).maxCoeff() <= 1e-10);
  };
  Vector start = Vector::Zero(h * m);
  bool have_start = false;
  if (memory && memory->valid && memory->prev_du.size() == h * m) {
    Vector shifted = Vector::Zero(h * m);
    shifted.head((h - 1) * m) = memory->prev_du.tail((h - 1) * m);
    if (feasible(shifted)) {
      start = shifted;
      have_start = true;
    }
  }
  if (!have_start && !feasible(start)) start = find_feasible_point(qp);

  const QpSolution sol = solve_qp(qp, start, memory && memory->valid ? &memory->ws : nullptr);

  Gpmpc2Result out;
  out.du = sol.x;
  out.ws = sol.final_ws;
  out.extended_state = s_k;
  out.u = clamp_into(u_prev + sol.x.head(m), cfg.u_min, cfg.u_max);

  const Vector z = cq.states(sol.x);
  const Vector u_seq = clamp_into(cq.controls(sol.x), tile(cfg.u_min, h), tile(cfg.u_max, h));
  StepDiagnostics& d = out.diag;
  for (int i = 0; i < h; ++i) {
    const Matrix s = unvec(z.segment(i * e + n, n * n), n, n);
    const Matrix s_bar = unvec(cq.z_nominal.segment(i * e + n, n * n), n, n);
    d.means.push_back(z.segment(i * e, n));
    d.covs.push_back(symmetrize(s * s.transpose()));
    d.controls.push_back(u_seq.segment(i * m, m));
    // Report the bounds in the form the QP enforced them.
    StateBounds b{cfg.x_min, cfg.x_max};
    for (int dim = 0; dim < n; ++dim) {
      double spread;
      if (cfg.tightening == TighteningMode::PaperVariance) {
        const double bar = s_bar.row(dim).squaredNorm();
        spread = 2.0 * (2.0 * s_bar.row(dim).dot(s.row(dim)) - bar);
      } else {
        spread = 2.0 * s(dim, dim);
      }
      b.lower(dim) += spread;
      b.upper(dim) -= spread;
    }
    d.bounds.push_back(b);
  }
  d.objective = cq.objective(sol.x);
  d.iterations = sol.iterations;
  d.qp_iterations = sol.iterations;
  return out;
}

std::string controller_name(ControllerKind kind) { return kind == ControllerKind::Gpmpc1 ? "gpmpc1" : "gpmpc2"; }

ControllerKind parse_controller(const std::string& name) {
  if (name == "gpmpc1") return ControllerKind::Gpmpc1;
  if (name == "gpmpc2") return ControllerKind::Gpmpc2;
  throw InvalidInput("unknown controller '" + name + "'");
}

namespace {

class Gpmpc1Controller : public Controller {
 public:
  Gpmpc1Controller(const GpModel& model, MpcConfig cfg) : model_(model), cfg_(std::move(cfg)) {}

  ControlStep compute(const GaussianState& state, const Vector& u_prev,
                      const std::vector<Vector>& refs) override {
    const int m = model_.control_dim();
    Vector warm;
    if (last_.size() > 0) {
      warm = last_;
      const int p = static_cast<int>(last_.size());
      warm.head(p - m) = last_.tail(p - m);
    }
    Gpmpc1Result r = gpmpc1_step(model_, state, u_prev, refs, cfg_, last_.size() > 0 ? &warm : nullptr);
    last_ = r.sequence;
    return ControlStep{r.u, std::move(r.diag)};
  }
  void reset() override { last_.resize(0); }
  ControllerKind kind() const override { return ControllerKind::Gpmpc1; }

 private:
  const GpModel& model_;
  MpcConfig cfg_;
  Vector last_;
};

class Gpmpc2Controller : public Controller {
 public:
  Gpmpc2Controller(const GpModel& model, MpcConfig cfg) : model_(model), cfg_(std::move(cfg)) {}

  ControlStep compute(const GaussianState& state, const Vector& u_prev,
                      const std::vector<Vector>& refs) override {
    Gpmpc2Result r = gpmpc2_step(model_, state, u_prev, refs, cfg_, &memory_);
    memory_.valid = true;
    memory_.prev_state = r.extended_state;
    memory_.prev_du = r.du;
    memory_.ws = r.ws;
    return ControlStep{r.u, std::move(r.diag)};
  }
  void reset() override { memory_ = Gpmpc2Memory{}; }
  ControllerKind kind() const override { return ControllerKind::Gpmpc2; }

 private:
  const GpModel& model_;
  MpcConfig cfg_;
  Gpmpc2Memory memory_;
};

}  // namespace

std::unique_ptr<Controller> make_controller(ControllerKind kind, const GpModel& model, const MpcConfig& cfg) {
  cfg.validate(model.state_dim(), model.control_dim());
  if (kind == ControllerKind::Gpmpc1) return std::make_unique<Gpmpc1Controller>(model, cfg);
  return std::make_unique<Gpmpc2Controller>(model, cfg);
}

TrajectoryLog run_receding_horizon(Controller& controller, Plant& plant, const GpModel& model,
                                   const ReferenceTrajectory& ref, int steps, const MpcConfig& cfg,
                                   const Vector& u_init, const RunOptions& options) {
  const int n = model.state_dim();
  const int m = model.control_dim();
  if (steps < 1) throw InvalidInput("run_receding_horizon: at least one step required");
  cfg.validate(n, m);
  require_dims(u_init.size() == m, "run_receding_horizon: initial control dimension");
  if (static_cast<int>(ref.points.size()) < steps + cfg.horizon + 1) {
    throw InvalidInput("reference trajectory shorter than steps + horizon + 1");
  }

  TrajectoryLog log;
  Vector u_prev = u_init;
  for (int k = 0; k < steps; ++k) {
    const Vector x = plant.state();
    Vector input(n + m);
    input << x, u_prev;
    const DeterministicPrediction prior = model.predict(input);
    const GaussianState state{x, Matrix(prior.variance.asDiagonal())};
    const std::vector<Vector> refs(ref.points.begin() + k + 1, ref.points.begin() + k + 1 + cfg.horizon);

    ControlStep cs;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cs = controller.compute(state, u_prev, refs);
    } catch (const Error& e) {
      log.failed = true;
      log.error = "step " + std::to_string(k) + ": " + e.what();
      break;
    }
    const auto t1 = std::chrono::steady_clock::now();
    if ((cs.u.array() < cfg.u_min.array()).any() || (cs.u.array() > cfg.u_max.array()).any()) {
      log.failed = true;
      log.error = "step " + std::to_string(k) + ": controller returned an out-of-bounds control";
      break;
    }

    const Vector y = plant.step(cs.u);
    LogRow row;
    row.k = k;
    row.reference = ref.points[k + 1];
    row.control = cs.u;
    row.state = plant.state();
    row.output = y;
    row.pred_mean = cs.diag.means.front();
    row.pred_var = cs.diag.covs.front().diagonal();
    row.cost = cs.diag.objective;
    row.lyapunov = expected_cost(cs.diag.means, cs.diag.covs, cs.diag.controls, refs, cfg);
    row.solver_iters = cs.diag.iterations;
    row.solve_ms = options.record_solve_time
                       ? std::chrono::duration<double, std::milli>(t1 - t0).count()
                       : 0.0;
    log.rows.push_back(std::move(row));
    log.horizons.push_back(std::move(cs.diag));
    log.horizon_refs.push_back(refs);
    u_prev = cs.u;
  }
  return log;
}

std::string trajectory_csv(const TrajectoryLog& log) {
  std::ostringstream out;
  if (log.rows.empty()) {
    out << "k,cost,lyapunov,solver_iters,solve_ms\n";
    return out.str();
  }
  const LogRow& first = log.rows.front();
  auto header = [&](const char* prefix, Eigen::Index count) {
    for (Eigen::Index i = 0; i < count; ++i) out << ',' << prefix << (i + 1);
  };
  out << 'k';
  header("r_", first.reference.size());
  header("u_", first.control.size());
  header("x_", first.state.size());
  header("y_", first.output.size());
  header("pred_mu_", first.pred_mean.size());
  header("pred_var_", first.pred_var.size());
  out << ",cost,lyapunov,solver_iters,solve_ms\n";
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.17g", v);
    out << buf;
  };
  for (const LogRow& r : log.rows) {
    out << r.k;
    for (const Vector* v : {&r.reference, &r.control, &r.state, &r.output, &r.pred_mean, &r.pred_var}) {
      for (Eigen::Index i = 0; i < v->size(); ++i) put((*v)(i));
    }
    put(r.cost);
    put(r.lyapunov);
    out << ',' << r.solver_iters;
    put(r.solve_ms);
    out << '\n';
  }
  return out.str();
}

LyapunovReport lyapunov_diagnostic(const TrajectoryLog& log, const MpcConfig& cfg, double tol) {
  LyapunovReport rep;
  for (std::size_t k = 0; k < log.horizons.size(); ++k) {
    const StepDiagnostics& d = log.horizons[k];
    const std::vector<Vector>& refs = log.horizon_refs[k];
    rep.values.push_back(expected_cost(d.means, d.covs, d.controls, refs, cfg));
    rep.terminal.push_back(stage_cost(d.means.back(), d.covs.back(), d.controls.back(), refs[d.means.size() - 1], cfg));
    bool flag = false;
    if (k > 0) {
      const double prev = rep.values[k - 1];
      flag = rep.values[k] > prev + rep.terminal[k] + tol * (1.0 + std::abs(prev));
    }
    rep.violations.push_back(flag);
  }
  return rep;
}

}  // namespace gpmpc
