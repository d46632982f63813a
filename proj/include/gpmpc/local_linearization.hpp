#pragma once

#include <functional>

#include "gpmpc/gp_propagation.hpp"

namespace gpmpc {

/// Jacobians of the moment-matched mean map (μ, u) ↦ μ' at (μ*, Σ*, u*).
struct BasicLocalModel {
  Matrix a_mat;  // n×n
  Matrix b_mat;  // n×m
  Vector mean;
  Matrix cov;
  Vector control;
};

BasicLocalModel linearize_basic(const GpModel& model, const GaussianState& op, const Vector& control);

/// Extended state s = [μ; vec(√Σ)] with n² entries for the square-root
/// block (column-major). The covariance is recovered as Σ = S·Sᵀ, which is
/// S² for the symmetric principal root and stays PSD for any S.
Vector to_extended(const GaussianState& state);
GaussianState from_extended(const Vector& s, int n);

/// One step of the extended-state dynamics F'(s, u).
Vector extended_step(const GpModel& model, const Vector& s, const Vector& control);

struct ExtendedLocalModel {
  Matrix a_mat;  // (n+n²)×(n+n²)
  Matrix b_mat;  // (n+n²)×m
  Vector state;
  Vector control;
  Vector next;   // F'(s*, u*)
};

/// Eigenvalues of √Σ' are floored at `sqrt_floor`, or at the square root of
/// the propagation's rounding estimate if larger, inside the derivative of
/// the matrix square root. A NumericalError is raised when Σ' has an
/// eigenvalue below -max_regularization², i.e. the floor would have to move
/// a root by more than `max_regularization`.
ExtendedLocalModel linearize_extended(const GpModel& model, const Vector& s, const Vector& control,
                                      double sqrt_floor = 1e-6, double max_regularization = 1e-2);

/// Fréchet derivative of the principal square root at Σ: the linear map
/// dΣ ↦ dS with S·dS + dS·S = dΣ, as an n²×n² matrix on column-major vecs.
Matrix sqrt_derivative(const Matrix& cov, double sqrt_floor = 1e-6, double max_regularization = 1e-2);

/// Central-difference Jacobian.
Matrix finite_diff_jacobian(const std::function<Vector(const Vector&)>& map, const Vector& point,
                            double step);

}  // namespace gpmpc
