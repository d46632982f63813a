#include "gpmpc/gp_propagation.hpp"

#include <cmath>
#include <limits>
#include <thread>

namespace gpmpc {
namespace {

// Moments of the GP output at x̃ ~ N(mu, sigma) and, optionally, their
// derivatives. Σ̃-derivatives use the symmetric convention and index the
// p×p covariance column-major (k + l·p).
struct Moments {
  Vector mean;  // n
  Matrix cov;   // n×n
  Matrix io;    // p×n, Cov[x̃, Δx]
  double cancel = 0.0;  // largest |term| in the variance sums, sets the rounding floor
  Matrix dmean_dmu, dmean_dcov;  // n×p, n×p²
  Matrix dcov_dmu, dcov_dcov;    // n²×p, n²×p²
  Matrix dio_dmu, dio_dcov;      // pn×p, pn×p²
};

struct PerOutput {
  Matrix e_inv;  // (Σ̃ + Λ⁻¹)⁻¹ without forming Λ⁻¹
  Matrix u;      // rows E⁻¹ν_i
  Vector wq;     // β ∘ q
  Vector t;      // Σ_i β_i q_i u_i
  Matrix jac;    // Uᵀdiag(βq)U − M E⁻¹
};

Matrix sym_inverse_spd(const Matrix& m) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) throw NumericalError("moment matching: factorization failed");
  return symmetrize(llt.solve(Matrix::Identity(m.rows(), m.cols())));
}

double log_det_spd(const Matrix& m) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) throw NumericalError("moment matching: factorization failed");
  return 2.0 * Eigen::Matrix<double, Eigen::Dynamic, 1>(llt.matrixLLT().diagonal()).array().log().sum();
}

Moments compute_moments(const GpModel& model, const Vector& mu, const Matrix& sigma, bool derivs) {
  const int n = model.state_dim();
  const int p = model.input_dim();
  const Matrix& x = model.dataset().inputs;
  const Matrix nu = x.rowwise() - mu.transpose();
  const Matrix eye = Matrix::Identity(p, p);

  Moments out;
  out.mean.resize(n);
  out.cov.resize(n, n);
  out.io.resize(p, n);
  if (derivs) {
    out.dmean_dmu.resize(n, p);
    out.dmean_dcov.resize(n, p * p);
    out.dcov_dmu.setZero(n * n, p);
    out.dcov_dcov.setZero(n * n, p * p);
    out.dio_dmu.resize(p * n, p);
    out.dio_dcov.resize(p * n, p * p);
  }

  std::vector<PerOutput> per(n);
  for (int a = 0; a < n; ++a) {
    const GpHyperparams& hp = model.hyperparams(a);
    const Vector root = hp.scales.cwiseSqrt();
    const Matrix b = eye + root.asDiagonal() * sigma * root.asDiagonal();
    PerOutput& o = per[a];
    o.e_inv = symmetrize(root.asDiagonal() * sym_inverse_spd(b) * root.asDiagonal());
    o.u = nu * o.e_inv;
    const Vector quad = nu.cwiseProduct(o.u).rowwise().sum();
    const double log_scale = std::log(hp.signal_variance) - 0.5 * log_det_spd(b);
    const Vector q = (log_scale - 0.5 * quad.array()).exp().matrix();
    o.wq = model.alpha(a).cwiseProduct(q);
    o.t = o.u.transpose() * o.wq;
    out.mean(a) = o.wq.sum();
    out.io.col(a) = sigma * o.t;

    if (!derivs) continue;
    o.jac = o.u.transpose() * o.wq.asDiagonal() * o.u - out.mean(a) * o.e_inv;
    out.dmean_dmu.row(a) = o.t.transpose();
    out.dmean_dcov.row(a) = vec(0.5 * o.jac).transpose();
    out.dio_dmu.middleRows(a * p, p) = sigma * o.jac;
    for (int l = 0; l < p; ++l) {
      for (int k = 0; k < p; ++k) {
        const Vector w3 = o.wq.cwiseProduct(o.u.col(k)).cwiseProduct(o.u.col(l));
        Vector dt = 0.5 * (o.u.transpose() * w3) - 0.5 * o.e_inv(k, l) * o.t -
                    0.5 * (o.e_inv.col(k) * o.t(l) + o.e_inv.col(l) * o.t(k));
        Vector dv = sigma * dt;
        dv(k) += 0.5 * o.t(l);
        dv(l) += 0.5 * o.t(k);
        out.dio_dcov.block(a * p, k + l * p, p, 1) = dv;
      }
    }
  }

  for (int a = 0; a < n; ++a) {
    const GpHyperparams& ha = model.hyperparams(a);
    const Matrix wa_nu = nu * ha.scales.asDiagonal();
    for (int b = a; b < n; ++b) {
      const GpHyperparams& hb = model.hyperparams(b);
      const Vector msum = ha.scales + hb.scales;
      const Vector root = msum.cwiseSqrt();
      const Matrix r = eye + root.asDiagonal() * sigma * root.asDiagonal();
      const Matrix r_inv = sym_inverse_spd(r);
      const Matrix sn = sigma * root.asDiagonal();
      // T = (Σ̃⁻¹ + W_a + W_b)⁻¹ by Woodbury, valid for singular Σ̃.
      const Matrix t_mat = symmetrize(sigma - sn * r_inv * sn.transpose());
      const Matrix wb_nu = nu * hb.scales.asDiagonal();

      const Vector la = (std::log(ha.signal_variance) -
                         0.5 * nu.cwiseProduct(wa_nu).rowwise().sum().array() +
                         0.5 * (wa_nu * t_mat).cwiseProduct(wa_nu).rowwise().sum().array())
                            .matrix();
      const Vector lb = (std::log(hb.signal_variance) -
                         0.5 * nu.cwiseProduct(wb_nu).rowwise().sum().array() +
                         0.5 * (wb_nu * t_mat).cwiseProduct(wb_nu).rowwise().sum().array())
                            .matrix();
      // D×D work matrices are reused across calls; allocating them fresh
      // each time dominated the run time of long rollouts.
      thread_local Matrix q, wq;
      const Matrix wa_t = wa_nu * t_mat;
      q.noalias() = wa_t * wb_nu.transpose();
      q.colwise() += la;
      q.rowwise() += lb.transpose();
      q = (q.array() - 0.5 * log_det_spd(r)).exp().matrix();
      wq.noalias() = model.alpha(a).asDiagonal() * q * model.alpha(b).asDiagonal();
      if (a == b) {
        thread_local Matrix kq;
        kq = model.gram_inverse(a).cwiseProduct(q);
        out.cancel = std::max(out.cancel, wq.cwiseAbs().sum() + kq.cwiseAbs().sum() + ha.signal_variance);
        wq -= kq;
      }
      const double f = wq.sum();
      double s = f - out.mean(a) * out.mean(b);
      if (a == b) s += ha.signal_variance;
      out.cov(a, b) = s;
      out.cov(b, a) = s;

      if (!derivs) continue;
      const Matrix pm = eye - msum.asDiagonal() * t_mat;
      const Vector rows = wq.rowwise().sum();
      const Vector cols = wq.colwise().sum().transpose();
      const Vector df_dmu = pm * (wa_nu.transpose() * rows + wb_nu.transpose() * cols);
      const Matrix cross = wa_nu.transpose() * wq * wb_nu;
      const Matrix zz = wa_nu.transpose() * rows.asDiagonal() * wa_nu + cross + cross.transpose() +
                        wb_nu.transpose() * cols.asDiagonal() * wb_nu;
      const Matrix nrn = root.asDiagonal() * r_inv * root.asDiagonal();
      const Matrix df_dcov = symmetrize(-0.5 * f * nrn + 0.5 * pm * zz * pm.transpose());

      const Vector ds_dmu = df_dmu - per[a].t * out.mean(b) - out.mean(a) * per[b].t;
      const Matrix ds_dcov = df_dcov - 0.5 * per[a].jac * out.mean(b) - 0.5 * out.mean(a) * per[b].jac;
      out.dcov_dmu.row(a + b * n) = ds_dmu.transpose();
      out.dcov_dmu.row(b + a * n) = ds_dmu.transpose();
      out.dcov_dcov.row(a + b * n) = vec(ds_dcov).transpose();
      out.dcov_dcov.row(b + a * n) = vec(ds_dcov).transpose();
    }
  }
  return out;
}

void check_input(const GpModel& model, const Vector& mean, const Matrix& cov) {
  require_dims(mean.size() == model.input_dim(), "uncertain input: mean dimension mismatch");
  require_dims(cov.rows() == model.input_dim() && cov.cols() == model.input_dim(),
               "uncertain input: covariance dimension mismatch");
  if (!mean.allFinite() || !cov.allFinite()) throw InvalidInput("uncertain input: non-finite entries");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + cov.cwiseAbs().maxCoeff())) {
    throw InvalidInput("uncertain input: covariance is not symmetric");
  }
  if (min_eigenvalue(symmetrize(cov)) < -1e-9) {
    throw InvalidInput("uncertain input: covariance is not positive semi-definite");
  }
}

// Nearly noise-free models have a huge K⁻¹ and the predictive variance is a
// small difference of large sums; negative eigenvalues below this are rounding.
double psd_tolerance(const Moments& m) { return 1e-6 + 1e-14 * m.cancel; }

}  // namespace

UncertainPrediction predict_uncertain(const GpModel& model, const GaussianInput& input) {
  check_input(model, input.mean, input.cov);
  const int n = model.state_dim();
  Moments m = compute_moments(model, input.mean, symmetrize(input.cov), false);
  UncertainPrediction out;
  out.delta_mean = m.mean;
  out.delta_cov = repair_psd(m.cov, psd_tolerance(m));
  out.io_cov = m.io.topRows(n);
  return out;
}

GaussianState propagate_state(const GpModel& model, const GaussianState& state,
                              const Vector& control, PropagationJacobians* jac) {
  const int n = model.state_dim();
  const int m = model.control_dim();
  const int p = n + m;
  require_dims(state.mean.size() == n, "propagate_state: state dimension mismatch");
  require_dims(state.cov.rows() == n && state.cov.cols() == n, "propagate_state: covariance shape");
  require_dims(control.size() == m, "propagate_state: control dimension mismatch");

  Vector mu(p);
  mu << state.mean, control;
  Matrix sigma = Matrix::Zero(p, p);
  sigma.topLeftCorner(n, n) = symmetrize(state.cov);
  check_input(model, mu, sigma);

  Moments mom = compute_moments(model, mu, sigma, jac != nullptr);
  const Matrix cx = mom.io.topRows(n);
  GaussianState next;
  next.mean = state.mean + mom.mean;
  next.cov = repair_psd(sigma.topLeftCorner(n, n) + mom.cov + cx + cx.transpose(), psd_tolerance(mom));

  if (jac) {
    jac->cov_rounding = std::numeric_limits<double>::epsilon() * mom.cancel;
    jac->mean_mean = Matrix::Identity(n, n) + mom.dmean_dmu.leftCols(n);
    jac->mean_ctrl = mom.dmean_dmu.rightCols(m);
    jac->mean_cov.resize(n, n * n);
    jac->cov_mean.resize(n * n, n);
    jac->cov_ctrl.resize(n * n, m);
    jac->cov_cov.resize(n * n, n * n);
    for (int l = 0; l < n; ++l) {
      for (int k = 0; k < n; ++k) jac->mean_cov.col(k + l * n) = mom.dmean_dcov.col(k + l * p);
    }
    for (int c = 0; c < n; ++c) {
      for (int r = 0; r < n; ++r) {
        const int row = r + c * n;
        const int io_rc = r + c * p;
        const int io_cr = c + r * p;
        const auto dmu = mom.dcov_dmu.row(row) + mom.dio_dmu.row(io_rc) + mom.dio_dmu.row(io_cr);
        jac->cov_mean.row(row) = dmu.leftCols(n);
        jac->cov_ctrl.row(row) = dmu.rightCols(m);
        for (int l = 0; l < n; ++l) {
          for (int k = 0; k < n; ++k) {
            const int col = k + l * p;
            double v = mom.dcov_dcov(row, col) + mom.dio_dcov(io_rc, col) + mom.dio_dcov(io_cr, col);
            if (r == k && c == l) v += 0.5;
            if (r == l && c == k) v += 0.5;
            jac->cov_cov(row, k + l * n) = v;
          }
        }
      }
    }
  }
  return next;
}

std::vector<GaussianState> rollout(const GpModel& model, const GaussianState& init,
                                   const std::vector<Vector>& controls) {
  if (controls.empty()) throw InvalidInput("rollout: at least one control required");
  std::vector<GaussianState> states;
  states.reserve(controls.size() + 1);
  states.push_back(init);
  for (const Vector& u : controls) states.push_back(propagate_state(model, states.back(), u));
  return states;
}

namespace {

constexpr long kChunk = 1L << 14;

struct ChunkSums {
  Vector x, m, delta;          // first pass: sums
  Vector m_sq;                 // second pass: Σ (m - m̄)²
  Matrix cov, cov_sq, io, io_sq;
};

template <typename Fn>
void for_each_sample(const GpModel& model, const Vector& mean, const Matrix& root, long count, std::uint64_t seed, long chunk, DeterministicPredictor predictor,
                     Fn&& fn) {
  const int n = model.state_dim();
  const int p = model.input_dim();
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(chunk)));
  for (long s = 0; s < count; ++s) {
    const Vector xs = mean + root * rng.normal_vector(p);
    const DeterministicPrediction pred = predictor(model, xs);
    const Vector eps = rng.normal_vector(n);
    const Vector delta = pred.mean + pred.variance.cwiseMax(0.0).cwiseSqrt().cwiseProduct(eps);
    fn(xs.head(n), pred.mean, delta);
  }
}

template <typename Fn>
void run_chunks(long chunks, int jobs, Fn&& fn) {
  if (jobs <= 1 || chunks <= 1) {
    for (long c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::vector<std::thread> workers;
  const int count = static_cast<int>(std::min<long>(jobs, chunks));
  for (int w = 0; w < count; ++w) {
    workers.emplace_back([&, w] {
      for (long c = w; c < chunks; c += count) fn(c);
    });
  }
  for (auto& t : workers) t.join();
}

}  // namespace

McMoments mc_oracle_with(const GpModel& model, const GaussianInput& input, long samples,
                         std::uint64_t seed, int jobs, DeterministicPredictor predictor) {
  check_input(model, input.mean, input.cov);
  if (samples < 1000) throw InvalidInput("mc_oracle: at least 1000 samples required");
  const int n = model.state_dim();
  const Matrix root = principal_sqrt(input.cov);
  const long chunks = (samples + kChunk - 1) / kChunk;
  auto chunk_size = [&](long c) { return std::min(kChunk, samples - c * kChunk); };

  std::vector<ChunkSums> sums(chunks);
  run_chunks(chunks, jobs, [&](long c) {
    ChunkSums& cs = sums[c];
    cs.x = Vector::Zero(n);
    cs.m = Vector::Zero(n);
    cs.delta = Vector::Zero(n);
    for_each_sample(model, input.mean, root, chunk_size(c), seed, c, predictor,
                    [&](const auto& x, const Vector& m, const Vector& delta) {
                      cs.x += x;
                      cs.m += m;
                      cs.delta += delta;
                    });
  });
  const double count = static_cast<double>(samples);
  Vector mean_x = Vector::Zero(n), mean_m = Vector::Zero(n), mean_d = Vector::Zero(n);
  for (const ChunkSums& cs : sums) {
    mean_x += cs.x;
    mean_m += cs.m;
    mean_d += cs.delta;
  }
  mean_x /= count;
  mean_m /= count;
  mean_d /= count;

  run_chunks(chunks, jobs, [&](long c) {
    ChunkSums& cs = sums[c];
    cs.m_sq = Vector::Zero(n);
    cs.cov = cs.cov_sq = cs.io = cs.io_sq = Matrix::Zero(n, n);
    for_each_sample(model, input.mean, root, chunk_size(c), seed, c, predictor,
                    [&](const auto& x, const Vector& m, const Vector& delta) {
                      const Vector dm = m - mean_m;
                      const Vector dd = delta - mean_d;
                      const Vector dx = x - mean_x;
                      cs.m_sq += dm.cwiseAbs2();
                      const Matrix zc = dd * dd.transpose();
                      const Matrix zi = dx * dm.transpose();
                      cs.cov += zc;
                      cs.cov_sq += zc.cwiseAbs2();
                      cs.io += zi;
                      cs.io_sq += zi.cwiseAbs2();
                    });
  });
  Vector m_sq = Vector::Zero(n);
  Matrix cov = Matrix::Zero(n, n), cov_sq = cov, io = cov, io_sq = cov;
  for (const ChunkSums& cs : sums) {
    m_sq += cs.m_sq;
    cov += cs.cov;
    cov_sq += cs.cov_sq;
    io += cs.io;
    io_sq += cs.io_sq;
  }
  auto standard_error = [count](const Matrix& s, const Matrix& s2) {
    const Matrix avg = s / count;
    return ((s2 / count - avg.cwiseAbs2()).cwiseMax(0.0) / count).cwiseSqrt().eval();
  };

  McMoments out;
  out.samples = samples;
  out.mean = mean_m;
  out.mean_se = (m_sq / (count - 1.0) / count).cwiseSqrt();
  out.cov = symmetrize(cov / (count - 1.0));
  out.cov_se = standard_error(cov, cov_sq);
  out.io_cov = io / (count - 1.0);
  out.io_cov_se = standard_error(io, io_sq);
  return out;
}

McMoments mc_oracle(const GpModel& model, const GaussianInput& input, long samples,
                    std::uint64_t seed, int jobs) {
  return mc_oracle_with(model, input, samples, seed, jobs, &predict_deterministic);
}

}  // namespace gpmpc
