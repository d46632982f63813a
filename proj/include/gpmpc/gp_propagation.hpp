#pragma once

#include <cstdint>
#include <vector>

#include "gpmpc/gp_model.hpp"

namespace gpmpc {

struct GaussianState {
  Vector mean;
  Matrix cov;
};

/// Distribution of the joint state-control input.
struct GaussianInput {
  Vector mean;
  Matrix cov;
};

struct UncertainPrediction {
  Vector delta_mean;
  Matrix delta_cov;
  Matrix io_cov;  // Cov[x, Δx], state rows of the input only (n×n)
};

/// Exact first and second moments of the GP output at a Gaussian input.
UncertainPrediction predict_uncertain(const GpModel& model, const GaussianInput& input);

/// Derivatives of the propagated state (μ', Σ') with respect to (μ, Σ, u).
///
/// Covariances are vectorized column-major. Derivatives with respect to Σ
/// use the symmetric convention: entry (k,l) is ½(∂/∂Σ_kl + ∂/∂Σ_lk), which
/// is what a symmetric perturbation of Σ sees.
struct PropagationJacobians {
  Matrix mean_mean;  // n × n
  Matrix mean_cov;   // n × n²
  Matrix mean_ctrl;  // n × m
  Matrix cov_mean;   // n² × n
  Matrix cov_cov;    // n² × n²
  Matrix cov_ctrl;   // n² × m
  double cov_rounding = 0.0;  // estimated absolute rounding error of Σ' entries
};

/// One step of the moment-matched state recursion with a deterministic control:
/// μ' = μ + E[Δx], Σ' = Σ + Var[Δx] + Cov[x,Δx] + Cov[Δx,x].
GaussianState propagate_state(const GpModel& model, const GaussianState& state,
                              const Vector& control, PropagationJacobians* jac = nullptr);

/// States 0..H, states[0] = init.
std::vector<GaussianState> rollout(const GpModel& model, const GaussianState& init,
                                   const std::vector<Vector>& controls);

struct McMoments {
  Vector mean;     // average of the conditional means m(x̃)
  Vector mean_se;
  Matrix cov;      // covariance of m(x̃) + √v(x̃)·ε
  Matrix cov_se;
  Matrix io_cov;   // Cov[x, Δx], state rows
  Matrix io_cov_se;
  long samples = 0;
};

/// Monte-Carlo estimate of the moments returned by predict_uncertain.
/// Samples are drawn in fixed-size chunks, chunk c seeded with
/// derive_seed(seed, c), so the result does not depend on `jobs`.
McMoments mc_oracle(const GpModel& model, const GaussianInput& input, long samples,
                    std::uint64_t seed, int jobs = 1);

/// Test hook: evaluates an arbitrary deterministic predictor instead of the
/// model's own. Used to check that the oracle comparison catches broken
/// prediction code.
using DeterministicPredictor = DeterministicPrediction (*)(const GpModel&, const Vector&);
McMoments mc_oracle_with(const GpModel& model, const GaussianInput& input, long samples,
                         std::uint64_t seed, int jobs, DeterministicPredictor predictor);

}  // namespace gpmpc
