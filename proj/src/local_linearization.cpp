#include "gpmpc/local_linearization.hpp"

#include <algorithm>
#include <cmath>

namespace gpmpc {

BasicLocalModel linearize_basic(const GpModel& model, const GaussianState& op, const Vector& control) {
  PropagationJacobians jac;
  propagate_state(model, op, control, &jac);
  return BasicLocalModel{jac.mean_mean, jac.mean_ctrl, op.mean, op.cov, control};
}

Vector to_extended(const GaussianState& state) {
  const int n = static_cast<int>(state.mean.size());
  require_dims(state.cov.rows() == n && state.cov.cols() == n, "to_extended: covariance shape");
  Vector s(n + n * n);
  s << state.mean, vec(principal_sqrt(state.cov));
  return s;
}

GaussianState from_extended(const Vector& s, int n) {
  require_dims(s.size() == n + n * n, "from_extended: size mismatch");
  const Matrix root = unvec(s.tail(n * n), n, n);
  return GaussianState{s.head(n), symmetrize(root * root.transpose())};
}

Vector extended_step(const GpModel& model, const Vector& s, const Vector& control) {
  const int n = model.state_dim();
  const GaussianState next = propagate_state(model, from_extended(s, n), control);
  return to_extended(next);
}

Matrix sqrt_derivative(const Matrix& cov, double sqrt_floor, double max_regularization) {
  const int n = static_cast<int>(cov.rows());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(cov));
  const Vector& lambda = eig.eigenvalues();
  if (lambda.minCoeff() < -max_regularization * max_regularization) {
    throw NumericalError("square-root derivative: covariance eigenvalue " +
                         std::to_string(lambda.minCoeff()) + " beyond regularization cap");
  }
  const Vector roots = lambda.cwiseMax(0.0).cwiseSqrt().cwiseMax(sqrt_floor);
  const Matrix& v = eig.eigenvectors();
  Matrix out(n * n, n * n);
  for (int l = 0; l < n; ++l) {
    for (int k = 0; k < n; ++k) {
      // Vᵀ E_kl V = (row k of V)ᵀ (row l of V)
      Matrix inner = v.row(k).transpose() * v.row(l);
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) inner(i, j) /= roots(i) + roots(j);
      }
      out.col(k + l * n) = vec(v * inner * v.transpose());
    }
  }
  return out;
}

ExtendedLocalModel linearize_extended(const GpModel& model, const Vector& s, const Vector& control,
                                      double sqrt_floor, double max_regularization) {
  const int n = model.state_dim();
  const int m = model.control_dim();
  const int e = n + n * n;
  require_dims(s.size() == e, "linearize_extended: extended state size mismatch");
  require_dims(control.size() == m, "linearize_extended: control dimension mismatch");

  const Matrix root = unvec(s.tail(n * n), n, n);
  PropagationJacobians jac;
  const GaussianState next = propagate_state(model, from_extended(s, n), control, &jac);

  // ∂Σ/∂S for Σ = S·Sᵀ: ∂Σ_rc/∂S_kl = δ_rk S_cl + S_rl δ_ck.
  Matrix dcov_droot = Matrix::Zero(n * n, n * n);
  for (int l = 0; l < n; ++l) {
    for (int k = 0; k < n; ++k) {
      const int col = k + l * n;
      for (int c = 0; c < n; ++c) dcov_droot(k + c * n, col) += root(c, l);
      for (int r = 0; r < n; ++r) dcov_droot(r + k * n, col) += root(r, l);
    }
  }
  // Eigenvalues of Σ' under the rounding level are noise; flooring their roots
  // there keeps dS'/dΣ' from amplifying it.
  const double floor = std::max(sqrt_floor, std::sqrt(jac.cov_rounding));
  const Matrix dsqrt = sqrt_derivative(next.cov, floor, std::max(max_regularization, floor));

  ExtendedLocalModel out;
  out.a_mat.resize(e, e);
  out.a_mat.topLeftCorner(n, n) = jac.mean_mean;
  out.a_mat.topRightCorner(n, n * n) = jac.mean_cov * dcov_droot;
  out.a_mat.bottomLeftCorner(n * n, n) = dsqrt * jac.cov_mean;
  out.a_mat.bottomRightCorner(n * n, n * n) = dsqrt * jac.cov_cov * dcov_droot;
  out.b_mat.resize(e, m);
  out.b_mat.topRows(n) = jac.mean_ctrl;
  out.b_mat.bottomRows(n * n) = dsqrt * jac.cov_ctrl;
  out.state = s;
  out.control = control;
  out.next = to_extended(next);
  return out;
}

Matrix finite_diff_jacobian(const std::function<Vector(const Vector&)>& map, const Vector& point,
                            double step) {
  if (!(step > 0.0)) throw InvalidInput("finite_diff_jacobian: step must be positive");
  Matrix jac;
  Vector x = point;
  for (int j = 0; j < point.size(); ++j) {
    x(j) = point(j) + step;
    const Vector plus = map(x);
    x(j) = point(j) - step;
    const Vector minus = map(x);
    x(j) = point(j);
    if (j == 0) jac.resize(plus.size(), point.size());
    jac.col(j) = (plus - minus) / (2.0 * step);
  }
  return jac;
}

}  // namespace gpmpc
