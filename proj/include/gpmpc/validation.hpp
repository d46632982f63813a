#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gpmpc/fpsqp.hpp"
#include "gpmpc/gpmpc.hpp"

namespace gpmpc {

// Cross-module oracle suites. Each compares a production code path with an
// independent computation and reports the worst measured error.

struct SuiteResult {
  std::string name;
  bool passed = false;
  double measured = 0.0;   // worst error (units per suite, see `detail`)
  double tolerance = 0.0;
  double seconds = 0.0;
  int cases = 0;
  std::string detail;
};

struct ValidationOptions {
  std::uint64_t seed = 20240601;
  int jobs = 1;
  long mc_samples = 1000000;
  /// Replaces the model's deterministic predictor inside the Monte-Carlo
  /// oracle; null uses GpModel::predict. Lets tests plant a broken kernel.
  DeterministicPredictor mc_predictor = nullptr;
};

/// Random SE-kernel model with D samples, n states and m controls.
GpModel random_toy_model(Rng& rng, int samples, int n, int m);

/// Dense reference for the GP posterior: explicit Gram matrix, LU solve.
DeterministicPrediction dense_gp_prediction(const GpModel& model, const Vector& input);

/// Exhaustive search over working sets: solves every equality-constrained
/// subproblem with at most p rows and keeps the feasible KKT point with
/// non-negative multipliers and the lowest objective.
Vector brute_force_qp(const QpProblem& prob);

/// Horizon states of the velocity-form prediction, built step by step.
std::vector<Vector> direct_velocity_rollout(const Matrix& a_mat, const Matrix& b_mat, const Vector& s_k,
                                            const Vector& ds_k, const Vector& du, int horizon);

SuiteResult suite_gp_dense(const ValidationOptions& opts);        // 50 random models
SuiteResult suite_moment_matching(const ValidationOptions& opts); // 20 Monte-Carlo cases
SuiteResult suite_jacobians(const ValidationOptions& opts);       // basic, extended, propagation
SuiteResult suite_qp_bruteforce(const ValidationOptions& opts);   // 100 random QPs
SuiteResult suite_condensation(const ValidationOptions& opts);    // 20 instances, H ∈ {1,5,10}
SuiteResult suite_fpsqp(const ValidationOptions& opts);           // convex QP, feasible iterates

std::vector<SuiteResult> run_validation(const ValidationOptions& opts);

std::string validation_report_json(const std::vector<SuiteResult>& results);
std::string validation_report_text(const std::vector<SuiteResult>& results);

}  // namespace gpmpc
