#include "gpmpc/fpsqp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace gpmpc {
namespace {

constexpr double kMinRadius = 1e-14;

NlpEvaluation evaluate_checked(const NlpSpec& nlp, const Vector& z, bool derivs) {
  NlpEvaluation e = nlp.evaluate(z, derivs);
  if (derivs) {
    require_dims(e.gradient.size() == nlp.dims, "NLP gradient has wrong size");
    require_dims(e.ineq_jacobian.rows() == e.ineq.size() &&
                     (e.ineq.size() == 0 || e.ineq_jacobian.cols() == nlp.dims),
                 "NLP constraint Jacobian has wrong shape");
  }
  return e;
}

double max_or_neg_inf(const Vector& v) {
  return v.size() == 0 ? -std::numeric_limits<double>::infinity() : v.maxCoeff();
}

}  // namespace

void NlpSpec::validate() const {
  if (dims < 1) throw InvalidInput("NlpSpec: dims must be positive");
  if (!evaluate) throw InvalidInput("NlpSpec: objective callback missing");
  require_dims(lin_mat.rows() == lin_lower.size() && lin_mat.rows() == lin_upper.size(),
               "NlpSpec: linear constraint row counts differ");
  require_dims(lin_mat.rows() == 0 || lin_mat.cols() == dims, "NlpSpec: linear constraint width");
}

double NlpSpec::linear_violation(const Vector& z) const {
  double worst = -std::numeric_limits<double>::infinity();
  if (lin_mat.rows() == 0) return worst;
  const Vector gz = lin_mat * z;
  for (int i = 0; i < gz.size(); ++i) {
    if (std::isfinite(lin_upper(i))) worst = std::max(worst, gz(i) - lin_upper(i));
    if (std::isfinite(lin_lower(i))) worst = std::max(worst, lin_lower(i) - gz(i));
  }
  return worst;
}

void TrustRegionState::validate() const {
  if (!(0.0 < tau1 && tau1 < tau2 && tau2 < 1.0)) throw InvalidInput("trust region: need 0 < τ₁ < τ₂ < 1");
  if (!(radius > 0.0 && radius <= radius_max)) throw InvalidInput("trust region: radius outside (0, γ_max]");
}

Vector qp_subproblem(const NlpSpec& nlp, const Vector& z, const TrustRegionState& tr,
                     const NlpEvaluation* eval, WorkingSet* warm, int* qp_iterations) {
  const int p = nlp.dims;
  NlpEvaluation local;
  if (!eval) {
    local = evaluate_checked(nlp, z, true);
    eval = &local;
  }
  require_dims(tr.hessian.rows() == p && tr.hessian.cols() == p, "qp_subproblem: Hessian shape");

  const Vector gz = nlp.lin_mat.rows() > 0 ? Vector(nlp.lin_mat * z) : Vector();
  int rows = 2 * p + static_cast<int>(eval->ineq.size());
  for (int i = 0; i < gz.size(); ++i) {
    rows += std::isfinite(nlp.lin_upper(i)) + std::isfinite(nlp.lin_lower(i));
  }
  QpProblem qp;
  qp.phi = tr.hessian;
  qp.psi = eval->gradient;
  qp.g_mat.resize(rows, p);
  qp.g_rhs.resize(rows);
  int r = 0;
  for (int i = 0; i < gz.size(); ++i) {
    if (std::isfinite(nlp.lin_upper(i))) {
      qp.g_mat.row(r) = nlp.lin_mat.row(i);
      qp.g_rhs(r++) = nlp.lin_upper(i) - gz(i);
    }
    if (std::isfinite(nlp.lin_lower(i))) {
      qp.g_mat.row(r) = -nlp.lin_mat.row(i);
      qp.g_rhs(r++) = gz(i) - nlp.lin_lower(i);
    }
  }
  for (int i = 0; i < eval->ineq.size(); ++i) {
    qp.g_mat.row(r) = eval->ineq_jacobian.row(i);
    // A feasible z has d(z) ≤ 0; rounding above zero is absorbed here.
    qp.g_rhs(r++) = std::max(0.0, -eval->ineq(i));
  }
  for (int i = 0; i < p; ++i) {
    qp.g_mat.row(r).setZero();
    qp.g_mat(r, i) = 1.0;
    qp.g_rhs(r++) = tr.radius;
    qp.g_mat.row(r).setZero();
    qp.g_mat(r, i) = -1.0;
    qp.g_rhs(r++) = tr.radius;
  }
  // The zero step satisfies every row up to rounding in rhs.
  qp.g_rhs = qp.g_rhs.cwiseMax(0.0);

  QpSolution sol = solve_qp(qp, Vector::Zero(p), warm);
  if (warm) *warm = sol.final_ws;
  if (qp_iterations) *qp_iterations += sol.iterations;
  return sol.x;
}

std::optional<double> acceptability_ratio(double h, double h_trial, const Vector& gradient,
                                          const Vector& step, const Matrix& hessian) {
  const double predicted = -gradient.dot(step) - 0.5 * step.dot(hessian * step);
  if (!(predicted > 0.0)) return std::nullopt;
  return (h - h_trial) / predicted;
}

std::optional<double> acceptability_ratio(const NlpSpec& nlp, const Vector& z, const Vector& step,
                                          const TrustRegionState& tr) {
  const NlpEvaluation at = evaluate_checked(nlp, z, true);
  const NlpEvaluation trial = evaluate_checked(nlp, z + step, false);
  return acceptability_ratio(at.value, trial.value, at.gradient, step, tr.hessian);
}

bool bfgs_update(Matrix& hessian, const Vector& dz, const Vector& grad_diff) {
  const double curvature = grad_diff.dot(dz);
  if (!(curvature > 1e-8 * grad_diff.norm() * dz.norm())) return false;
  const Vector hd = hessian * dz;
  const double dhd = dz.dot(hd);
  if (!(dhd > 0.0)) return false;
  hessian += grad_diff * grad_diff.transpose() / curvature - hd * hd.transpose() / dhd;
  hessian = symmetrize(hessian);
  return true;
}

FpsqpResult solve_fpsqp(const NlpSpec& nlp, const Vector& z0, const FpsqpConfig& config) {
  nlp.validate();
  require_dims(z0.size() == nlp.dims, "solve_fpsqp: start dimension mismatch");
  if (config.max_iterations < 0) throw InvalidInput("solve_fpsqp: negative iteration cap");
  if (nlp.linear_violation(z0) > config.feasibility_tolerance) {
    throw InfeasibleError("solve_fpsqp: start point violates the linear constraints");
  }

  Vector z = z0;
  NlpEvaluation at = evaluate_checked(nlp, z, true);
  if (max_or_neg_inf(at.ineq) > config.feasibility_tolerance) {
    throw InfeasibleError("solve_fpsqp: start point violates the nonlinear constraints");
  }

  TrustRegionState tr;
  tr.tau1 = config.tau1;
  tr.tau2 = config.tau2;
  tr.tau = config.tau;
  tr.radius_max = config.radius_max;
  const double gnorm0 = at.gradient.norm();
  tr.radius = config.initial_radius > 0.0 ? config.initial_radius : gnorm0;
  tr.radius = std::clamp(tr.radius, kMinRadius, tr.radius_max);
  if (config.initial_hessian.size() > 0) {
    require_dims(config.initial_hessian.rows() == nlp.dims && config.initial_hessian.cols() == nlp.dims,
                 "solve_fpsqp: initial Hessian shape");
    tr.hessian = symmetrize(config.initial_hessian);
  } else {
    tr.hessian = Matrix::Identity(nlp.dims, nlp.dims) * std::max(1.0, gnorm0);
  }
  tr.validate();

  FpsqpResult result;
  WorkingSet ws;
  int j = 0;
  for (; j < config.max_iterations; ++j) {
    const Vector step = qp_subproblem(nlp, z, tr, &at, &ws, &result.qp_iterations);
    const double predicted = -at.gradient.dot(step) - 0.5 * step.dot(tr.hessian * step);
    if (predicted <= config.stop_tolerance * (1.0 + std::abs(at.value))) {
      result.converged = true;
      break;
    }
    const Vector trial_z = z + step;
    NlpEvaluation trial = evaluate_checked(nlp, trial_z, true);
    const bool feasible = std::isfinite(trial.value) &&
                          max_or_neg_inf(trial.ineq) <= config.feasibility_tolerance;
    const double rho = feasible ? (at.value - trial.value) / predicted
                                : -std::numeric_limits<double>::infinity();

    FpsqpIterate it;
    it.iteration = j;
    it.rho = rho;
    it.step_norm = step.lpNorm<Eigen::Infinity>();
    it.accepted = rho >= tr.tau1;
    if (it.accepted) {
      const Vector y = trial.gradient - at.gradient;
      if (y.norm() > 0.0) tr.tau = step.norm() / y.norm();
      if (!bfgs_update(tr.hessian, step, y)) ++result.skipped_updates;
      z = trial_z;
      at = std::move(trial);
    } else {
      tr.tau /= 4.0;
    }
    const double proposal = tr.tau * at.gradient.norm();
    if (it.accepted && rho >= tr.tau2) {
      tr.radius = std::min(proposal, tr.radius_max);
    } else {
      tr.radius = std::min(proposal, tr.radius);
    }
    tr.radius = std::clamp(tr.radius, kMinRadius, tr.radius_max);
    it.h = at.value;
    it.gamma = tr.radius;
    it.z = z;
    result.history.push_back(it);
  }
  result.z = z;
  result.value = at.value;
  result.iterations = j;
  result.hessian = tr.hessian;
  return result;
}

std::string fpsqp_history_csv(const std::vector<FpsqpIterate>& history) {
  std::ostringstream out;
  out << "iteration,h,rho,gamma,step_norm\n";
  char buf[160];
  for (const FpsqpIterate& it : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", it.iteration, it.h, it.rho, it.gamma,
                  it.step_norm);
    out << buf;
  }
  return out.str();
}

}  // namespace gpmpc
