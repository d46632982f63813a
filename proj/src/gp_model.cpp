#include "gpmpc/gp_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace gpmpc {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Box on the log parameters. Outside it the training objective gets a
// quadratic penalty instead of a hard wall so the line search stays smooth.
constexpr double kLogSignalMin = -18.0, kLogSignalMax = 18.0;
constexpr double kLogNoiseMin = -23.0, kLogNoiseMax = 9.0;
constexpr double kLogScaleMin = -14.0, kLogScaleMax = 14.0;
constexpr double kBoxPenalty = 1e3;

bool all_finite(const Matrix& m) { return m.allFinite(); }

// Noise-free kernel matrix σ_s² exp(-½ Σ_d Λ_d (x_id - x_jd)²).
Matrix signal_matrix(const Matrix& inputs, const GpHyperparams& hp) {
  const int n = static_cast<int>(inputs.rows());
  const Vector root = hp.scales.cwiseSqrt();
  const Matrix scaled = inputs * root.asDiagonal();
  const Vector sq = scaled.rowwise().squaredNorm();
  Matrix dist = (-2.0 * scaled * scaled.transpose()).eval();
  dist.colwise() += sq;
  dist.rowwise() += sq.transpose();
  Matrix k = (hp.signal_variance * (-0.5 * dist.array().max(0.0)).exp()).matrix();
  for (int i = 0; i < n; ++i) k(i, i) = hp.signal_variance;
  return symmetrize(k);
}

Vector pack(const GpHyperparams& hp) {
  Vector theta(hp.scales.size() + 2);
  theta(0) = std::log(hp.signal_variance);
  theta(1) = std::log(hp.noise_variance);
  theta.tail(hp.scales.size()) = hp.scales.array().log();
  return theta;
}

GpHyperparams unpack(const Vector& theta) {
  GpHyperparams hp;
  hp.signal_variance = std::exp(theta(0));
  hp.noise_variance = std::exp(theta(1));
  hp.scales = theta.tail(theta.size() - 2).array().exp();
  return hp;
}

struct Box {
  double noise_min = kLogNoiseMin;
};

Vector clamp_theta(const Vector& theta, const Box& box = {}) {
  Vector c = theta;
  c(0) = std::clamp(c(0), kLogSignalMin, kLogSignalMax);
  c(1) = std::clamp(c(1), box.noise_min, kLogNoiseMax);
  for (int i = 2; i < c.size(); ++i) c(i) = std::clamp(c(i), kLogScaleMin, kLogScaleMax);
  return c;
}

struct Objective {
  const GpDataset& data;
  int dim;
  Box box;

  // Negative log likelihood with box penalty; +inf when the Gram matrix
  // cannot be factorized.
  double operator()(const Vector& theta, Vector* grad) const {
    const Vector clamped = clamp_theta(theta, box);
    const Vector outside = theta - clamped;
    try {
      LikelihoodValue lv = log_marginal_likelihood_with_gradient(data, unpack(clamped), dim);
      if (!std::isfinite(lv.value) || !lv.gradient.allFinite()) {
        return std::numeric_limits<double>::infinity();
      }
      if (grad) {
        *grad = -lv.gradient;
        for (int i = 0; i < theta.size(); ++i) {
          if (outside(i) != 0.0) (*grad)(i) = 2.0 * kBoxPenalty * outside(i);
        }
      }
      return -lv.value + kBoxPenalty * outside.squaredNorm();
    } catch (const NumericalError&) {
      return std::numeric_limits<double>::infinity();
    }
  }
};

struct Minimum {
  Vector theta;
  double value;
  int iterations;
};

// BFGS on the inverse Hessian with Armijo backtracking.
Minimum minimize_bfgs(const Objective& f, Vector theta, const TrainingConfig& config) {
  const int p = static_cast<int>(theta.size());
  Vector grad;
  double value = f(theta, &grad);
  Minimum out{theta, value, 0};
  if (!std::isfinite(value)) return out;

  Matrix inv_hessian = Matrix::Identity(p, p);
  bool scaled = false;
  int iter = 0;
  for (; iter < config.max_iterations; ++iter) {
    if (grad.lpNorm<Eigen::Infinity>() < config.tolerance) break;
    Vector dir = -inv_hessian * grad;
    double slope = grad.dot(dir);
    if (slope >= 0.0) {
      inv_hessian.setIdentity();
      dir = -grad;
      slope = -grad.squaredNorm();
    }
    // Limit a single step to 2 units in log space.
    const double max_move = dir.lpNorm<Eigen::Infinity>();
    if (max_move > 2.0) {
      dir *= 2.0 / max_move;
      slope = grad.dot(dir);
    }
    double t = 1.0;
    Vector trial_grad;
    double trial_value = std::numeric_limits<double>::infinity();
    Vector trial;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      trial = theta + t * dir;
      trial_value = f(trial, &trial_grad);
      if (std::isfinite(trial_value) && trial_value <= value + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;

    const Vector s = trial - theta;
    const Vector y = trial_grad - grad;
    const double sy = s.dot(y);
    const double previous = value;
    theta = trial;
    value = trial_value;
    grad = trial_grad;
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        inv_hessian *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Matrix eye = Matrix::Identity(p, p);
      inv_hessian = (eye - rho * s * y.transpose()) * inv_hessian *
                        (eye - rho * y * s.transpose()) +
                    rho * s * s.transpose();
    }
    if (std::abs(previous - value) <= 1e-12 * (1.0 + std::abs(value))) {
      ++iter;
      break;
    }
  }
  out.theta = theta;
  out.value = value;
  out.iterations = iter;
  return out;
}

double sample_variance(const Vector& v) {
  if (v.size() < 2) return 0.0;
  const double mean = v.mean();
  return (v.array() - mean).square().sum() / static_cast<double>(v.size() - 1);
}

}  // namespace

void GpHyperparams::validate() const {
  if (!(signal_variance > 0.0) || !std::isfinite(signal_variance)) {
    throw InvalidInput("signal_variance must be positive");
  }
  if (!(noise_variance >= 0.0) || !std::isfinite(noise_variance)) {
    throw InvalidInput("noise_variance must be non-negative");
  }
  if (scales.size() == 0 || !(scales.array() > 0.0).all() || !scales.allFinite()) {
    throw InvalidInput("scales must be positive");
  }
}

void GpDataset::validate() const {
  require_dims(inputs.rows() == targets.rows(), "dataset: input and target row counts differ");
  if (!all_finite(inputs) || !all_finite(targets)) throw InvalidInput("dataset has non-finite entries");
}

GpDataset GpDataset::head(int rows) const {
  require_dims(rows >= 0 && rows <= size(), "dataset head: row count out of range");
  return GpDataset{inputs.topRows(rows), targets.topRows(rows)};
}

double se_kernel(const Vector& a, const Vector& b, const GpHyperparams& hp) {
  require_dims(a.size() == b.size() && a.size() == hp.scales.size(), "se_kernel: dimension mismatch");
  const Vector d = a - b;
  return hp.signal_variance * std::exp(-0.5 * d.dot(hp.scales.cwiseProduct(d)));
}

Matrix gram_matrix(const Matrix& inputs, const GpHyperparams& hp) {
  require_dims(inputs.cols() == hp.scales.size(), "gram_matrix: dimension mismatch");
  if (inputs.rows() < 1) throw InvalidInput("gram_matrix: empty dataset");
  Matrix k = signal_matrix(inputs, hp);
  k.diagonal().array() += hp.noise_variance;
  return k;
}

GramFactor factorize_gram(const Matrix& gram, bool allow_jitter) {
  Eigen::LLT<Matrix> llt(gram);
  if (llt.info() == Eigen::Success) return {llt.matrixL(), 0.0};
  if (!allow_jitter) throw NumericalError("Gram matrix is not positive definite");
  const double base = gram.diagonal().mean();
  for (double rel = 1e-10; rel <= 1e-6 * 1.0000001; rel *= 10.0) {
    Matrix jittered = gram;
    jittered.diagonal().array() += rel * base;
    Eigen::LLT<Matrix> retry(jittered);
    if (retry.info() == Eigen::Success) return {retry.matrixL(), rel * base};
  }
  throw NumericalError("Gram matrix is not positive definite even with jitter");
}

double log_marginal_likelihood(const GpDataset& data, const GpHyperparams& hp, int dim) {
  data.validate();
  require_dims(dim >= 0 && dim < data.output_dim(), "log_marginal_likelihood: bad output index");
  const Matrix k = gram_matrix(data.inputs, hp);
  const GramFactor factor = factorize_gram(k, false);
  const auto lower = factor.lower.triangularView<Eigen::Lower>();
  const Vector y = data.targets.col(dim);
  const Vector v = lower.solve(y);
  const double log_det = 2.0 * factor.lower.diagonal().array().log().sum();
  return -0.5 * v.squaredNorm() - 0.5 * log_det - 0.5 * data.size() * kLog2Pi;
}

LikelihoodValue log_marginal_likelihood_with_gradient(const GpDataset& data,
                                                      const GpHyperparams& hp, int dim) {
  require_dims(dim >= 0 && dim < data.output_dim(), "log_marginal_likelihood: bad output index");
  const int n = data.size();
  const Matrix kf = signal_matrix(data.inputs, hp);
  Matrix k = kf;
  k.diagonal().array() += hp.noise_variance;
  const GramFactor factor = factorize_gram(k, true);
  const auto lower = factor.lower.triangularView<Eigen::Lower>();
  const Vector y = data.targets.col(dim);
  Vector alpha = lower.solve(y);
  const double quad = alpha.squaredNorm();
  lower.transpose().solveInPlace(alpha);
  Matrix inverse = Matrix::Identity(n, n);
  lower.solveInPlace(inverse);
  lower.transpose().solveInPlace(inverse);

  LikelihoodValue out;
  const double log_det = 2.0 * factor.lower.diagonal().array().log().sum();
  out.value = -0.5 * quad - 0.5 * log_det - 0.5 * n * kLog2Pi;

  // dL/dθ = ½ tr((ααᵀ - K⁻¹) dK/dθ)
  const Matrix w = alpha * alpha.transpose() - inverse;
  const Matrix wk = w.cwiseProduct(kf);
  const int p = static_cast<int>(hp.scales.size());
  out.gradient.resize(p + 2);
  out.gradient(0) = 0.5 * wk.sum();
  out.gradient(1) = 0.5 * hp.noise_variance * w.trace();
  const Vector rows = wk.rowwise().sum();
  for (int d = 0; d < p; ++d) {
    const Vector x = data.inputs.col(d);
    // Σ_ij WK_ij (x_i - x_j)² using symmetry of WK.
    const double sq = 2.0 * x.cwiseProduct(x).dot(rows) - 2.0 * x.dot(wk * x);
    out.gradient(d + 2) = 0.5 * (-0.5 * hp.scales(d)) * sq;
  }
  return out;
}

GpModel::GpModel(GpDataset data, std::vector<GpHyperparams> hyperparams) : data_(std::move(data)) {
  data_.validate();
  if (data_.size() < 1) throw InvalidInput("GpModel: empty dataset");
  require_dims(static_cast<int>(hyperparams.size()) == data_.output_dim(),
               "GpModel: one hyperparameter set per output required");
  if (data_.input_dim() <= data_.output_dim()) {
    throw DimensionError("GpModel: inputs must contain the state plus at least one control");
  }
  const int n = data_.size();
  outputs_.reserve(hyperparams.size());
  for (int d = 0; d < data_.output_dim(); ++d) {
    hyperparams[d].validate();
    require_dims(hyperparams[d].scales.size() == data_.input_dim(), "GpModel: scales size mismatch");
    Output out;
    out.hp = hyperparams[d];
    const GramFactor factor = factorize_gram(gram_matrix(data_.inputs, out.hp), true);
    out.lower = factor.lower;
    out.jitter = factor.jitter;
    const Matrix& lower = out.lower;
    out.alpha = lower.triangularView<Eigen::Lower>().solve(Vector(data_.targets.col(d)));
    lower.transpose().triangularView<Eigen::Upper>().solveInPlace(out.alpha);
    out.inverse = Matrix::Identity(n, n);
    lower.triangularView<Eigen::Lower>().solveInPlace(out.inverse);
    lower.transpose().triangularView<Eigen::Upper>().solveInPlace(out.inverse);
    out.inverse = symmetrize(out.inverse);
    outputs_.push_back(std::move(out));
  }
}

DeterministicPrediction GpModel::predict(const Vector& input) const {
  require_dims(input.size() == input_dim(), "predict: input dimension mismatch");
  const int n = size();
  DeterministicPrediction out;
  out.mean.resize(state_dim());
  out.variance.resize(state_dim());
  Vector kstar(n);
  for (int d = 0; d < state_dim(); ++d) {
    const Output& o = outputs_[d];
    for (int i = 0; i < n; ++i) {
      const auto diff = data_.inputs.row(i).transpose() - input;
      kstar(i) = o.hp.signal_variance * std::exp(-0.5 * diff.dot(o.hp.scales.cwiseProduct(diff)));
    }
    out.mean(d) = kstar.dot(o.alpha);
    const Vector v = o.lower.triangularView<Eigen::Lower>().solve(kstar);
    out.variance(d) = std::max(0.0, o.hp.signal_variance - v.squaredNorm());
  }
  return out;
}

std::string GpModel::to_json() const {
  nlohmann::json j;
  j["dims"] = {{"state", state_dim()}, {"control", control_dim()}, {"samples", size()}};
  nlohmann::json hps = nlohmann::json::array();
  for (const Output& o : outputs_) {
    hps.push_back({{"signal_variance", o.hp.signal_variance},
                   {"noise_variance", o.hp.noise_variance},
                   {"scales", std::vector<double>(o.hp.scales.data(),
                                                  o.hp.scales.data() + o.hp.scales.size())}});
  }
  j["hyperparams"] = hps;
  auto rows = [](const Matrix& m) {
    nlohmann::json arr = nlohmann::json::array();
    for (int i = 0; i < m.rows(); ++i) {
      std::vector<double> r(m.cols());
      for (int c = 0; c < m.cols(); ++c) r[c] = m(i, c);
      arr.push_back(r);
    }
    return arr;
  };
  j["dataset"] = {{"inputs", rows(data_.inputs)}, {"targets", rows(data_.targets)}};
  return j.dump(1);
}

GpModel GpModel::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("model JSON: ") + e.what());
  }
  try {
    const int n = j.at("dims").at("state").get<int>();
    const int m = j.at("dims").at("control").get<int>();
    auto matrix = [](const nlohmann::json& arr, int cols) {
      Matrix out(static_cast<Eigen::Index>(arr.size()), cols);
      for (std::size_t i = 0; i < arr.size(); ++i) {
        if (static_cast<int>(arr[i].size()) != cols) throw InvalidInput("model JSON: ragged dataset row");
        for (int c = 0; c < cols; ++c) out(static_cast<Eigen::Index>(i), c) = arr[i][c].get<double>();
      }
      return out;
    };
    GpDataset data{matrix(j.at("dataset").at("inputs"), n + m),
                   matrix(j.at("dataset").at("targets"), n)};
    std::vector<GpHyperparams> hps;
    for (const auto& h : j.at("hyperparams")) {
      GpHyperparams hp;
      hp.signal_variance = h.at("signal_variance").get<double>();
      hp.noise_variance = h.at("noise_variance").get<double>();
      const auto scales = h.at("scales").get<std::vector<double>>();
      hp.scales = Eigen::Map<const Vector>(scales.data(), static_cast<Eigen::Index>(scales.size()));
      hps.push_back(hp);
    }
    return GpModel(std::move(data), std::move(hps));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("model JSON: ") + e.what());
  }
}

void GpModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write model file " + path);
  out << to_json() << '\n';
}

GpModel GpModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read model file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

GpModel train(const GpDataset& data, const TrainingConfig& config, TrainingReport* report) {
  data.validate();
  if (data.size() < 2) throw InvalidInput("train: at least two samples required");
  if (config.restarts < 1 || config.max_iterations < 0 || !(config.min_noise_ratio > 0.0)) {
    throw InvalidInput("train: bad optimizer settings");
  }
  const int p = data.input_dim();

  Vector base_scales(p);
  for (int d = 0; d < p; ++d) {
    const double var = sample_variance(data.inputs.col(d));
    base_scales(d) = var > 1e-12 ? 1.0 / var : 1.0;
  }

  std::vector<GpHyperparams> best(data.output_dim());
  if (report) *report = TrainingReport{};
  for (int dim = 0; dim < data.output_dim(); ++dim) {
    const double yvar = std::max(sample_variance(data.targets.col(dim)), 1e-8);
    GpHyperparams init;
    init.signal_variance = yvar;
    init.noise_variance = 1e-2 * yvar;
    init.scales = base_scales;
    // Noise floor relative to the target variance; an almost noise-free fit
    // makes K⁻¹ so large that the uncertain-input variance cancels badly.
    Box box;
    box.noise_min = std::max(kLogNoiseMin, std::log(config.min_noise_ratio * yvar));
    const Vector theta0 = clamp_theta(pack(init), box);

    const Objective objective{data, dim, box};
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(dim)));
    double best_value = std::numeric_limits<double>::infinity();
    double best_start = std::numeric_limits<double>::infinity();
    Vector best_theta = theta0;
    int best_iters = 0;
    double first_start = std::numeric_limits<double>::infinity();
    for (int r = 0; r < config.restarts; ++r) {
      Vector start = theta0;
      if (r > 0) start = clamp_theta(theta0 + rng.normal_vector(static_cast<int>(theta0.size())), box);
      const double start_value = objective(start, nullptr);
      if (r == 0) first_start = start_value;
      best_start = std::min(best_start, start_value);
      Minimum m = minimize_bfgs(objective, start, config);
      if (std::isfinite(m.value) && m.value < best_value) {
        best_value = m.value;
        best_theta = m.theta;
        best_iters = m.iterations;
      }
    }
    if (!std::isfinite(best_value)) {
      throw NumericalError("train: no restart produced a positive definite Gram matrix");
    }
    best[dim] = unpack(clamp_theta(best_theta, box));
    if (report) {
      report->initial_likelihood.push_back(-first_start);
      report->best_start_likelihood.push_back(-best_start);
      report->final_likelihood.push_back(-best_value);
      report->iterations.push_back(best_iters);
    }
  }
  return GpModel(data, std::move(best));
}

DeterministicPrediction predict_deterministic(const GpModel& model, const Vector& input) {
  return model.predict(input);
}

}  // namespace gpmpc
