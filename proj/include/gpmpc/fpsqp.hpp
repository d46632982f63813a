#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gpmpc/qp_active_set.hpp"

namespace gpmpc {

struct NlpEvaluation {
  double value = 0.0;
  Vector gradient;        // filled when derivatives are requested
  Vector ineq;            // nonlinear constraints d(z) ≤ 0
  Matrix ineq_jacobian;   // filled when derivatives are requested
};

/// min h(z)  s.t.  lower ≤ G z ≤ upper,  d(z) ≤ 0.
/// Infinite bounds drop the corresponding side.
struct NlpSpec {
  int dims = 0;
  std::function<NlpEvaluation(const Vector& z, bool with_derivatives)> evaluate;
  Matrix lin_mat;
  Vector lin_lower;
  Vector lin_upper;

  void validate() const;
  /// Largest violation of the linear constraints at z (≤ 0 when feasible).
  double linear_violation(const Vector& z) const;
};

struct TrustRegionState {
  double radius = 1.0;
  double radius_max = 1e3;
  double tau = 1.0;
  double tau1 = 0.1;
  double tau2 = 0.75;
  Matrix hessian;

  void validate() const;
};

struct FpsqpConfig {
  double tau1 = 0.1;
  double tau2 = 0.75;
  double tau = 1.0;
  double radius_max = 1e3;
  double initial_radius = -1.0;  // ≤ 0: ‖∇h(z⁰)‖
  int max_iterations = 100;
  double stop_tolerance = 1e-10;  // relative to 1 + |h|
  double feasibility_tolerance = 1e-10;
  Matrix initial_hessian;  // empty: identity·max(1, ‖∇h(z⁰)‖)
};

struct FpsqpIterate {
  int iteration = 0;
  double h = 0.0;
  double rho = 0.0;
  double gamma = 0.0;
  double step_norm = 0.0;
  bool accepted = false;
  Vector z;  // iterate after this iteration
};

struct FpsqpResult {
  Vector z;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  int qp_iterations = 0;
  int skipped_updates = 0;
  std::vector<FpsqpIterate> history;
  Matrix hessian;
};

FpsqpResult solve_fpsqp(const NlpSpec& nlp, const Vector& z0, const FpsqpConfig& config = {});

/// Trust-region QP in ∞-norm box form; the zero step is always feasible
/// when z is. `eval` must hold the value, gradient and constraints at z
/// (computed when null). `warm` carries a working set in and out.
Vector qp_subproblem(const NlpSpec& nlp, const Vector& z, const TrustRegionState& tr,
                     const NlpEvaluation* eval = nullptr, WorkingSet* warm = nullptr,
                     int* qp_iterations = nullptr);

/// (h(z) − h(z+Δz)) / (−∇hᵀΔz − ½ΔzᵀHΔz); empty when the predicted
/// decrease is not positive, i.e. z is stationary for the model.
std::optional<double> acceptability_ratio(double h, double h_trial, const Vector& gradient,
                                          const Vector& step, const Matrix& hessian);
std::optional<double> acceptability_ratio(const NlpSpec& nlp, const Vector& z, const Vector& step,
                                          const TrustRegionState& tr);

/// BFGS update of H with secant pair (dz, y). Skipped, returning false, when
/// yᵀdz ≤ 1e-8·‖y‖·‖dz‖.
bool bfgs_update(Matrix& hessian, const Vector& dz, const Vector& grad_diff);

/// iteration,h,rho,gamma,step_norm
std::string fpsqp_history_csv(const std::vector<FpsqpIterate>& history);

}  // namespace gpmpc
