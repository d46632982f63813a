#include "gpmpc/qp_active_set.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace gpmpc {
namespace {

Matrix rows_of(const Matrix& g, const std::vector<int>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), g.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = g.row(idx[i]);
  return out;
}

bool full_row_rank(const Matrix& rows) {
  if (rows.rows() == 0) return true;
  if (rows.rows() > rows.cols()) return false;
  Eigen::ColPivHouseholderQR<Matrix> qr(rows.transpose());
  qr.setThreshold(1e-10);
  return qr.rank() == rows.rows();
}

double active_tolerance(double rhs) { return 1e-9 * (1.0 + std::abs(rhs)); }

void dump_on_failure(const QpOptions& options, const QpProblem& prob, const QpSolution* sol) {
  if (options.debug_dump_path.empty()) return;
  std::ofstream out(options.debug_dump_path);
  if (out) out << qp_debug_json(prob, sol) << '\n';
}

}  // namespace

void QpProblem::validate() const {
  const int p = size();
  require_dims(phi.cols() == p && psi.size() == p, "QpProblem: Φ/ψ shape mismatch");
  require_dims(g_mat.rows() == g_rhs.size(), "QpProblem: constraint row count mismatch");
  require_dims(g_mat.rows() == 0 || g_mat.cols() == p, "QpProblem: constraint column count mismatch");
  if (!phi.allFinite() || !psi.allFinite() || !g_mat.allFinite() || !g_rhs.allFinite()) {
    throw InvalidInput("QpProblem: non-finite data");
  }
  if ((phi - phi.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + phi.cwiseAbs().maxCoeff())) {
    throw InvalidInput("QpProblem: Φ is not symmetric");
  }
}

KktSolution kkt_solve(const Eigen::LLT<Matrix>& phi_factor, const Matrix& phi, const Matrix& g_active,
                      const Vector& rhs_top, const Vector& rhs_bot) {
  const int p = static_cast<int>(phi.rows());
  const int a = static_cast<int>(g_active.rows());
  require_dims(rhs_top.size() == p && rhs_bot.size() == a, "kkt_solve: right-hand side shape");
  require_dims(a == 0 || g_active.cols() == p, "kkt_solve: constraint shape");
  KktSolution out;
  if (a == 0) {
    out.delta = -phi_factor.solve(rhs_top);
    out.lambda.resize(0);
    return out;
  }

  Eigen::ColPivHouseholderQR<Matrix> qr(g_active.transpose());
  qr.setThreshold(1e-10);
  const int rank = static_cast<int>(qr.rank());
  if (rank == a) {
    // Range space: (G Φ⁻¹ Gᵀ) λ = −rhs_bot − G Φ⁻¹ rhs_top.
    const Matrix phi_inv_gt = phi_factor.solve(g_active.transpose());
    const Vector phi_inv_top = phi_factor.solve(rhs_top);
    const Matrix schur = symmetrize(g_active * phi_inv_gt);
    Eigen::LLT<Matrix> schur_factor(schur);
    if (schur_factor.info() == Eigen::Success) {
      out.lambda = schur_factor.solve(-rhs_bot - g_active * phi_inv_top);
      out.delta = -phi_inv_top - phi_inv_gt * out.lambda;
      return out;
    }
  }

  // Null space: G_Aᵀ P = Q R, Q = [Q1 Q2] with Q1 spanning the row space.
  out.used_qr = true;
  const Matrix q = qr.householderQ() * Matrix::Identity(p, p);
  const Matrix r = qr.matrixR().topLeftCorner(rank, a).triangularView<Eigen::Upper>();
  const auto perm = qr.colsPermutation();
  const Matrix q1 = q.leftCols(rank);
  const Matrix q2 = q.rightCols(p - rank);

  const Vector permuted_rhs = perm.transpose() * rhs_bot;
  Vector y1 = Vector::Zero(rank);
  if (rank > 0) {
    y1 = r.topLeftCorner(rank, rank).transpose().triangularView<Eigen::Lower>().solve(permuted_rhs.head(rank));
  }
  const Vector residual = r.transpose() * y1 - permuted_rhs;
  if (residual.lpNorm<Eigen::Infinity>() > 1e-9 * (1.0 + rhs_bot.lpNorm<Eigen::Infinity>())) {
    throw NumericalError("kkt_solve: inconsistent right-hand side for dependent constraints");
  }
  Vector delta = q1 * y1;
  if (p - rank > 0) {
    const Matrix reduced = symmetrize(q2.transpose() * phi * q2);
    Eigen::LLT<Matrix> reduced_factor(reduced);
    if (reduced_factor.info() != Eigen::Success) throw NumericalError("kkt_solve: reduced Hessian not PD");
    const Vector y2 = -reduced_factor.solve(q2.transpose() * (rhs_top + phi * delta));
    delta += q2 * y2;
  }
  const Vector v = -(rhs_top + phi * delta);
  Vector mu = Vector::Zero(a);
  if (rank > 0) {
    mu.head(rank) = r.topLeftCorner(rank, rank).triangularView<Eigen::Upper>().solve(q1.transpose() * v);
  }
  out.delta = delta;
  out.lambda = perm * mu;
  return out;
}

KktSolution kkt_solve(const Matrix& phi, const Matrix& g_active, const Vector& rhs_top,
                      const Vector& rhs_bot) {
  Eigen::LLT<Matrix> factor(symmetrize(phi));
  if (factor.info() != Eigen::Success) throw NumericalError("kkt_solve: Φ is not positive definite");
  return kkt_solve(factor, phi, g_active, rhs_top, rhs_bot);
}

StepLength step_length(const Vector& current, const Vector& direction, const QpProblem& prob,
                       const std::vector<int>& inactive) {
  StepLength out;
  const double dnorm = direction.norm();
  for (int i : inactive) {
    const double slope = prob.g_mat.row(i).dot(direction);
    if (slope <= 1e-14 * prob.g_mat.row(i).norm() * dnorm) continue;
    const double slack = prob.g_rhs(i) - prob.g_mat.row(i).dot(current);
    const double ratio = std::max(0.0, slack) / slope;
    if (ratio < out.kappa || (ratio == out.kappa && out.blocking >= 0 && i < out.blocking)) {
      out.kappa = ratio;
      out.blocking = i;
    }
  }
  return out;
}

QpSolution solve_qp(const QpProblem& prob, const Vector& start, const WorkingSet* warm,
                    const QpOptions& options) {
  prob.validate();
  const int p = prob.size();
  const int c = prob.constraints();
  require_dims(start.size() == p, "solve_qp: start dimension mismatch");
  Eigen::LLT<Matrix> factor(symmetrize(prob.phi));
  if (factor.info() != Eigen::Success) throw InvalidInput("solve_qp: Φ is not positive definite");

  Vector x = start;
  for (int i = 0; i < c; ++i) {
    if (prob.g_mat.row(i).dot(x) > prob.g_rhs(i) + options.start_tolerance) {
      throw InfeasibleError("solve_qp: start point violates constraint " + std::to_string(i));
    }
  }

  std::vector<char> in_ws(c, 0);
  WorkingSet ws;
  auto try_add = [&](int i) {
    if (i < 0 || i >= c || in_ws[i]) return;
    if (std::abs(prob.g_mat.row(i).dot(x) - prob.g_rhs(i)) > active_tolerance(prob.g_rhs(i))) return;
    WorkingSet candidate = ws;
    candidate.push_back(i);
    if (!full_row_rank(rows_of(prob.g_mat, candidate))) return;
    ws.push_back(i);
    in_ws[i] = 1;
  };
  if (warm) {
    for (int i : *warm) try_add(i);
  } else {
    for (int i = 0; i < c; ++i) try_add(i);
  }

  const int cap = options.max_iterations >= 0 ? options.max_iterations : 50 * (p + c);
  QpSolution sol;
  Vector lambda_ws;
  bool stalled = false;
  for (int pass = 0;; ++pass) {
    if (sol.iterations > cap) {
      sol.x = x;
      sol.final_ws = ws;
      dump_on_failure(options, prob, &sol);
      throw SolverError("solve_qp: iteration cap reached");
    }
    const Vector grad = prob.phi * x + prob.psi;
    const Matrix g_ws = rows_of(prob.g_mat, ws);
    KktSolution kkt;
    try {
      kkt = kkt_solve(factor, prob.phi, g_ws, grad, Vector::Zero(static_cast<Eigen::Index>(ws.size())));
    } catch (const NumericalError&) {
      sol.x = x;
      sol.final_ws = ws;
      dump_on_failure(options, prob, &sol);
      throw;
    }
    lambda_ws = kkt.lambda;
    const double step_scale = 1e-12 * (1.0 + x.lpNorm<Eigen::Infinity>());
    // A working set of p independent rows pins x; δ is rounding noise then.
    if (static_cast<int>(ws.size()) == p || kkt.delta.lpNorm<Eigen::Infinity>() <= step_scale) {
      // Most negative multiplier leaves the working set. After a zero-length
      // step switch to the lowest-index rule, which cannot cycle.
      int worst = -1;
      double worst_value = -options.multiplier_tolerance;
      for (std::size_t j = 0; j < ws.size(); ++j) {
        const double l = lambda_ws(static_cast<Eigen::Index>(j));
        if (l >= -options.multiplier_tolerance) continue;
        if (stalled) {
          if (worst < 0 || ws[j] < ws[worst]) worst = static_cast<int>(j);
        } else if (l < worst_value || (l == worst_value && worst >= 0 && ws[j] < ws[worst])) {
          worst_value = l;
          worst = static_cast<int>(j);
        }
      }
      if (worst < 0) break;
      in_ws[ws[worst]] = 0;
      ws.erase(ws.begin() + worst);
      ++sol.iterations;
      continue;
    }
    std::vector<int> inactive;
    inactive.reserve(c);
    for (int i = 0; i < c; ++i) {
      if (!in_ws[i]) inactive.push_back(i);
    }
    const StepLength step = step_length(x, kkt.delta, prob, inactive);
    stalled = step.kappa == 0.0;
    if (stalled) ++sol.degenerate_steps;
    x += step.kappa * kkt.delta;
    if (step.blocking >= 0) {
      ws.push_back(step.blocking);
      in_ws[step.blocking] = 1;
    }
    ++sol.iterations;
  }

  sol.x = x;
  sol.lambda = Vector::Zero(c);
  for (std::size_t j = 0; j < ws.size(); ++j) {
    sol.lambda(ws[j]) = std::max(0.0, lambda_ws(static_cast<Eigen::Index>(j)));
  }
  sol.final_ws = ws;
  sol.objective = prob.objective(x);
  return sol;
}

Vector find_feasible_point(const QpProblem& prob) {
  prob.validate();
  const int p = prob.size();
  const int c = prob.constraints();
  bool feasible = true;
  for (int i = 0; i < c && feasible; ++i) feasible = prob.g_rhs(i) >= 0.0;
  if (feasible) return Vector::Zero(p);

  // Variables (x, t): min ½εxᵀx + ½t² + t  s.t.  G x − t ≤ rhs − margin,  −t ≤ 0.
  // The margin keeps the point off the boundary; it is dropped when the
  // feasible set has no interior.
  auto solve_aux = [&](double margin) {
    QpProblem aux;
    aux.phi = Matrix::Identity(p + 1, p + 1) * 1e-8;
    aux.phi(p, p) = 1.0;
    aux.psi = Vector::Zero(p + 1);
    aux.psi(p) = 1.0;
    aux.g_mat = Matrix::Zero(c + 1, p + 1);
    aux.g_mat.topLeftCorner(c, p) = prob.g_mat;
    aux.g_mat.col(p).head(c).setConstant(-1.0);
    aux.g_mat(c, p) = -1.0;
    aux.g_rhs.resize(c + 1);
    for (int i = 0; i < c; ++i) aux.g_rhs(i) = prob.g_rhs(i) - margin * (1.0 + std::abs(prob.g_rhs(i)));
    aux.g_rhs(c) = 0.0;
    Vector z = Vector::Zero(p + 1);
    z(p) = std::max(0.0, (-aux.g_rhs.head(c)).maxCoeff()) + 1.0;
    return Vector(solve_qp(aux, z).x.head(p));
  };
  auto violation = [&](const Vector& x, int* row) {
    double worst = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < c; ++i) {
      const double viol = prob.g_mat.row(i).dot(x) - prob.g_rhs(i);
      if (viol > worst) {
        worst = viol;
        if (row) *row = i;
      }
    }
    return worst;
  };
  Vector x = solve_aux(1e-9);
  if (violation(x, nullptr) > 0.0) x = solve_aux(0.0);
  int worst_row = -1;
  const double worst = violation(x, &worst_row);
  if (worst > 1e-10) {
    throw InfeasibleError("QP constraints are infeasible (row " + std::to_string(worst_row) +
                              " violated by " + std::to_string(worst) + ")",
                          worst_row);
  }
  return x;
}

std::string qp_debug_json(const QpProblem& prob, const QpSolution* solution) {
  auto mat = [](const Matrix& m) {
    nlohmann::json arr = nlohmann::json::array();
    for (int i = 0; i < m.rows(); ++i) {
      std::vector<double> r(m.cols());
      for (int j = 0; j < m.cols(); ++j) r[j] = m(i, j);
      arr.push_back(r);
    }
    return arr;
  };
  auto vecj = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j;
  j["phi"] = mat(prob.phi);
  j["psi"] = vecj(prob.psi);
  j["g_mat"] = mat(prob.g_mat);
  j["g_rhs"] = vecj(prob.g_rhs);
  if (solution) {
    j["x"] = vecj(solution->x);
    j["lambda"] = vecj(solution->lambda);
    j["working_set"] = solution->final_ws;
    j["iterations"] = solution->iterations;
  }
  return j.dump(1);
}

}  // namespace gpmpc
