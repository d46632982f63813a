#pragma once

#include <string>
#include <vector>

#include "gpmpc/common.hpp"

namespace gpmpc {

/// min ½ xᵀΦx + ψᵀx  subject to  G x ≤ rhs.
struct QpProblem {
  Matrix phi;
  Vector psi;
  Matrix g_mat;
  Vector g_rhs;

  int size() const { return static_cast<int>(phi.rows()); }
  int constraints() const { return static_cast<int>(g_mat.rows()); }
  double objective(const Vector& x) const { return 0.5 * x.dot(phi * x) + psi.dot(x); }
  void validate() const;
};

/// Indices of constraints treated as equalities, in insertion order.
using WorkingSet = std::vector<int>;

struct QpSolution {
  Vector x;
  Vector lambda;  // one entry per constraint, zero off the working set
  WorkingSet final_ws;
  int iterations = 0;
  int degenerate_steps = 0;  // steps with κ = 0
  double objective = 0.0;
};

struct QpOptions {
  int max_iterations = -1;         // -1: 50·(p + c)
  double start_tolerance = 1e-10;  // allowed violation of the start point
  double multiplier_tolerance = 1e-9;
  std::string debug_dump_path;     // written when the solve fails, if non-empty
};

/// Primal active-set method from a feasible start. The warm working set is
/// filtered to constraints active at `start` whose rows stay independent;
/// without one, every active constraint at `start` is considered.
QpSolution solve_qp(const QpProblem& prob, const Vector& start, const WorkingSet* warm = nullptr,
                    const QpOptions& options = {});

/// Solution of  min ½δᵀΦδ + rhs_topᵀδ  s.t.  G_A δ = rhs_bot, i.e. the saddle
/// system  Φδ + G_Aᵀλ = −rhs_top,  G_A δ = rhs_bot. Full row rank uses the
/// Schur complement G_A Φ⁻¹ G_Aᵀ; otherwise a pivoted QR of G_Aᵀ splits the
/// range and null space and the multipliers of dependent rows are set to 0.
struct KktSolution {
  Vector delta;
  Vector lambda;
  bool used_qr = false;
};
KktSolution kkt_solve(const Matrix& phi, const Matrix& g_active, const Vector& rhs_top,
                      const Vector& rhs_bot);
/// Same, reusing a Cholesky factorization of Φ.
KktSolution kkt_solve(const Eigen::LLT<Matrix>& phi_factor, const Matrix& phi, const Matrix& g_active,
                      const Vector& rhs_top, const Vector& rhs_bot);

struct StepLength {
  double kappa = 1.0;
  int blocking = -1;
};
/// κ = min{1, min_i (rhs_i − G_i x)/(G_i δ)} over `inactive` rows with
/// G_i δ > 0; ties go to the lowest index.
StepLength step_length(const Vector& current, const Vector& direction, const QpProblem& prob,
                       const std::vector<int>& inactive);

/// Phase one: a point with G x ≤ rhs, found by minimizing the maximal
/// violation through an auxiliary QP. Throws InfeasibleError when none exists.
Vector find_feasible_point(const QpProblem& prob);

/// {phi, psi, g_mat, g_rhs, x, lambda, working_set} for failure triage.
std::string qp_debug_json(const QpProblem& prob, const QpSolution* solution = nullptr);

}  // namespace gpmpc
