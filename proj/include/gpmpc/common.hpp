#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace gpmpc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A factorization or decomposition failed (non-PD Gram matrix, PSD loss, ...).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or input value.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// A constraint set has no feasible point. `dimension` and `step` are -1 when unknown.
class InfeasibleError : public Error {
 public:
  InfeasibleError(const std::string& what, int dimension = -1, int step = -1)
      : Error(what), dimension_(dimension), step_(step) {}
  int dimension() const { return dimension_; }
  int step() const { return step_; }

 private:
  int dimension_;
  int step_;
};

/// An iterative solver did not finish (iteration cap, failed subproblem).
class SolverError : public Error {
 public:
  using Error::Error;
};

void require_dims(bool ok, const std::string& what);

/// SplitMix64 finalizer; used to derive independent seeds from (master, counter).
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t counter);

/// Deterministic random source. The transforms from raw 64-bit words are
/// implemented here rather than through <random> distributions so that
/// streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  Vector normal_vector(int size);
  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Matrix symmetrize(const Matrix& m);

/// Symmetrizes `m` and clamps eigenvalues in [-tol, 0) to zero. Throws
/// NumericalError when an eigenvalue is below -tol.
Matrix repair_psd(const Matrix& m, double tol);

double min_eigenvalue(const Matrix& sym);

/// Principal square root of a symmetric PSD matrix (negative eigenvalues
/// are clamped to zero).
Matrix principal_sqrt(const Matrix& sym);

/// Column-major vectorization, matching Eigen's storage order.
Vector vec(const Matrix& m);
Matrix unvec(const Vector& v, int rows, int cols);

}  // namespace gpmpc
