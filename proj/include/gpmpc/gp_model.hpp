#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gpmpc/common.hpp"

namespace gpmpc {

/// Hyperparameters of one squared-exponential GP output.
///
/// `scales` holds the diagonal of the matrix Λ that weights the squared
/// distance in the kernel exponent, i.e. inverse squared length-scales.
struct GpHyperparams {
  double signal_variance = 1.0;
  double noise_variance = 1e-2;
  Vector scales;

  void validate() const;
};

/// Training set: rows of `inputs` are state-control tuples (x, u), rows of
/// `targets` are the state differences x_{k+1} - x_k.
struct GpDataset {
  Matrix inputs;
  Matrix targets;

  int size() const { return static_cast<int>(inputs.rows()); }
  int input_dim() const { return static_cast<int>(inputs.cols()); }
  int output_dim() const { return static_cast<int>(targets.cols()); }

  void validate() const;
  /// First `rows` samples.
  GpDataset head(int rows) const;
};

double se_kernel(const Vector& a, const Vector& b, const GpHyperparams& hp);

/// K(X, X) + σ_n² I. The kernel itself carries no noise term.
Matrix gram_matrix(const Matrix& inputs, const GpHyperparams& hp);

/// Cholesky factor of a Gram matrix. Without jitter a failure throws
/// NumericalError; with jitter, 1e-10·mean(diag) is added and escalated ×10
/// up to 1e-6·mean(diag) before giving up.
struct GramFactor {
  Matrix lower;
  double jitter = 0.0;
};
GramFactor factorize_gram(const Matrix& gram, bool allow_jitter);

double log_marginal_likelihood(const GpDataset& data, const GpHyperparams& hp, int dim);

/// Log marginal likelihood and its gradient with respect to the log
/// parameters (log σ_s², log σ_n², log Λ_11, ..., log Λ_pp).
struct LikelihoodValue {
  double value = 0.0;
  Vector gradient;
};
LikelihoodValue log_marginal_likelihood_with_gradient(const GpDataset& data,
                                                      const GpHyperparams& hp, int dim);

struct TrainingConfig {
  int max_iterations = 100;
  int restarts = 5;
  double tolerance = 1e-6;
  double min_noise_ratio = 1e-4;  // σ_n² ≥ ratio · var(y) per output
  std::uint64_t seed = 0;
};

struct TrainingReport {
  std::vector<double> initial_likelihood;  // per output, at the first start point
  std::vector<double> best_start_likelihood;  // per output, max over start points
  std::vector<double> final_likelihood;
  std::vector<int> iterations;
};

struct DeterministicPrediction {
  Vector mean;      // predicted state difference
  Vector variance;  // latent variance per output, clamped at 0
};

/// Independent SE-kernel GPs, one per state dimension, sharing one input set.
/// Immutable after construction; all query methods are safe to call
/// concurrently.
class GpModel {
 public:
  GpModel(GpDataset data, std::vector<GpHyperparams> hyperparams);

  int state_dim() const { return data_.output_dim(); }
  int input_dim() const { return data_.input_dim(); }
  int control_dim() const { return input_dim() - state_dim(); }
  int size() const { return data_.size(); }

  const GpDataset& dataset() const { return data_; }
  const GpHyperparams& hyperparams(int dim) const { return outputs_[dim].hp; }
  const Matrix& gram_lower(int dim) const { return outputs_[dim].lower; }
  const Vector& alpha(int dim) const { return outputs_[dim].alpha; }
  const Matrix& gram_inverse(int dim) const { return outputs_[dim].inverse; }
  double jitter(int dim) const { return outputs_[dim].jitter; }

  DeterministicPrediction predict(const Vector& input) const;

  std::string to_json() const;
  static GpModel from_json(const std::string& text);
  void save(const std::string& path) const;
  static GpModel load(const std::string& path);

 private:
  struct Output {
    GpHyperparams hp;
    Matrix lower;
    Vector alpha;
    Matrix inverse;
    double jitter = 0.0;
  };
  GpDataset data_;
  std::vector<Output> outputs_;
};

/// Multi-start quasi-Newton maximization of the per-output log marginal
/// likelihood in log-parameter space.
GpModel train(const GpDataset& data, const TrainingConfig& config,
              TrainingReport* report = nullptr);

DeterministicPrediction predict_deterministic(const GpModel& model, const Vector& input);

}  // namespace gpmpc
