#include "gpmpc/common.hpp"

#include <cmath>

namespace gpmpc {

void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t counter) {
  return splitmix64(splitmix64(master) ^ (counter * 0xd1b54a32d192ed03ULL));
}

double Rng::uniform() {
  // 53 random mantissa bits.
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * M_PI * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

Vector Rng::normal_vector(int size) {
  Vector v(size);
  for (int i = 0; i < size; ++i) v(i) = normal();
  return v;
}

Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

Matrix repair_psd(const Matrix& m, double tol) {
  Matrix sym = symmetrize(m);
  if (sym.size() == 0) return sym;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  const Vector& values = eig.eigenvalues();
  if (values.minCoeff() >= 0.0) return sym;
  if (values.minCoeff() < -tol) {
    throw NumericalError("covariance lost positive semi-definiteness (min eigenvalue " +
                         std::to_string(values.minCoeff()) + ")");
  }
  Vector clamped = values.cwiseMax(0.0);
  Matrix out = eig.eigenvectors() * clamped.asDiagonal() * eig.eigenvectors().transpose();
  return symmetrize(out);
}

double min_eigenvalue(const Matrix& sym) {
  if (sym.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

Matrix principal_sqrt(const Matrix& sym) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(sym));
  Vector roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return symmetrize(eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose());
}

Vector vec(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

Matrix unvec(const Vector& v, int rows, int cols) {
  require_dims(v.size() == static_cast<Eigen::Index>(rows) * cols, "unvec: size mismatch");
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

}  // namespace gpmpc
