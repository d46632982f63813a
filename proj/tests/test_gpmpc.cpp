#include "test_util.hpp"

#include "gpmpc/plant_bench.hpp"

using namespace gpmpc;
using namespace gpmpc::testing;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

MpcConfig config(int n, int m, int horizon) {
  MpcConfig c;
  c.horizon = horizon;
  c.q_mat = Matrix::Identity(n, n);
  c.r_mat = Matrix::Identity(m, m);
  c.u_min = Vector::Constant(m, -5.0);
  c.u_max = Vector::Constant(m, 5.0);
  c.x_min = Vector::Constant(n, -kInf);
  c.x_max = Vector::Constant(n, kInf);
  return c;
}

// Zero targets and a kernel that ignores the controls: μ' = μ whatever u is.
GpModel still_model(int n, int m) {
  Rng rng(1);
  GpDataset d{Matrix(10, n + m), Matrix::Zero(10, n)};
  for (int i = 0; i < d.inputs.size(); ++i) d.inputs(i) = rng.uniform(-1, 1);
  GpHyperparams hp;
  hp.signal_variance = 0.5;
  hp.noise_variance = 0.01;
  hp.scales = Vector::Ones(n + m);
  hp.scales.tail(m).setConstant(1e-14);
  return GpModel(d, std::vector<GpHyperparams>(n, hp));
}

// x' = 0.9x + 0.5u, one state and one control.
const GpModel& linear_model() {
  static const GpModel model = [] {
    Rng rng(2);
    GpDataset d{Matrix(60, 2), Matrix(60, 1)};
    for (int i = 0; i < 60; ++i) {
      const double x = rng.uniform(-2, 2), u = rng.uniform(-1, 1);
      d.inputs.row(i) << x, u;
      d.targets(i) = -0.1 * x + 0.5 * u + 0.01 * rng.normal();
    }
    return train(d, TrainingConfig{});
  }();
  return model;
}

std::vector<Vector> constant_refs(const Vector& r, int count) { return std::vector<Vector>(count, r); }

class StillPlant : public Plant {
 public:
  explicit StillPlant(Vector x) : x_(std::move(x)) {}
  Vector state() const override { return x_; }
  Vector step(const Vector&) override { return x_; }

 private:
  Vector x_;
};

}  // namespace

TEST(ExpectedCost, ZeroOnTarget) {
  const MpcConfig c = config(2, 1, 3);
  const std::vector<Vector> r(3, Vector::Constant(2, 0.4));
  EXPECT_EQ(expected_cost(r, std::vector<Matrix>(3, Matrix::Zero(2, 2)), std::vector<Vector>(3, Vector::Zero(1)), r, c), 0.0);
}

TEST(ExpectedCost, HandArithmetic) {
  MpcConfig c = config(1, 1, 1);
  c.q_mat(0, 0) = 2.0;
  const double j = expected_cost({Vector::Constant(1, 3.0)}, {Matrix::Constant(1, 1, 0.5)}, {Vector::Constant(1, 2.0)},
                                 {Vector::Zero(1)}, c);
  EXPECT_DOUBLE_EQ(j, 23.0);
}

TEST(ExpectedCost, MatchesMonteCarlo) {
  Rng rng(3);
  MpcConfig c = config(2, 1, 2);
  c.q_mat = random_spd(rng, 2, 1.0);
  const std::vector<Vector> means{rng.normal_vector(2), rng.normal_vector(2)};
  const std::vector<Matrix> covs{random_spd(rng, 2, 0.3), random_spd(rng, 2, 0.3)};
  const std::vector<Vector> us{rng.normal_vector(1), rng.normal_vector(1)};
  const std::vector<Vector> refs{rng.normal_vector(2), rng.normal_vector(2)};
  const double j = expected_cost(means, covs, us, refs, c);
  const int samples = 200000;
  double s = 0, s2 = 0;
  for (int k = 0; k < samples; ++k) {
    double v = 0;
    for (int i = 0; i < 2; ++i) {
      const Vector x = means[i] + Matrix(covs[i].llt().matrixL()) * rng.normal_vector(2);
      const Vector e = x - refs[i];
      v += e.dot(c.q_mat * e) + us[i].dot(c.r_mat * us[i]);
    }
    s += v;
    s2 += v * v;
  }
  const double mean = s / samples, se = std::sqrt((s2 / samples - mean * mean) / samples);
  EXPECT_LE(std::abs(mean - j), 3 * se);
}

TEST(Tighten, ZeroCovarianceUnchanged) {
  const MpcConfig c = config(2, 1, 1);
  const StateBounds b = tighten_constraints(Vector::Constant(2, -1), Vector::Constant(2, 1), Matrix::Zero(2, 2), c);
  EXPECT_EQ(b.lower, Vector::Constant(2, -1));
  EXPECT_EQ(b.upper, Vector::Constant(2, 1));
}

TEST(Tighten, VarianceModeHandValues) {
  const MpcConfig c = config(1, 1, 1);
  const StateBounds b = tighten_constraints(Vector::Constant(1, -1), Vector::Constant(1, 1), Matrix::Constant(1, 1, 0.1), c);
  EXPECT_DOUBLE_EQ(b.lower(0), -0.8);
  EXPECT_DOUBLE_EQ(b.upper(0), 0.8);
}

TEST(Tighten, TwoStdMode) {
  MpcConfig c = config(1, 1, 1);
  c.tightening = TighteningMode::TwoStd;
  const StateBounds b = tighten_constraints(Vector::Constant(1, -1), Vector::Constant(1, 1), Matrix::Constant(1, 1, 0.04), c);
  EXPECT_DOUBLE_EQ(b.lower(0), -0.6);
  EXPECT_DOUBLE_EQ(b.upper(0), 0.6);
}

TEST(Tighten, EmptyIntervalNamesDimension) {
  const MpcConfig c = config(2, 1, 1);
  Matrix cov = Matrix::Zero(2, 2);
  cov(1, 1) = 0.6;
  try {
    tighten_constraints(Vector::Constant(2, -1), Vector::Constant(2, 1), cov, c, 7);
    FAIL() << "expected InfeasibleError";
  } catch (const InfeasibleError& e) {
    EXPECT_EQ(e.dimension(), 1);
    EXPECT_EQ(e.step(), 7);
  }
}

TEST(TighteningNames, RoundTrip) {
  for (TighteningMode m : {TighteningMode::PaperVariance, TighteningMode::TwoStd}) {
    EXPECT_EQ(parse_tightening(tightening_name(m)), m);
  }
  EXPECT_THROW(parse_tightening("three-std"), InvalidInput);
}

TEST(MpcConfigValidate, RejectsBadSettings) {
  MpcConfig c = config(2, 1, 3);
  EXPECT_NO_THROW(c.validate(2, 1));
  MpcConfig bad = c;
  bad.horizon = 0;
  EXPECT_THROW(bad.validate(2, 1), InvalidInput);
  bad = c;
  bad.confidence = 0.9;
  EXPECT_THROW(bad.validate(2, 1), InvalidInput);
  bad = c;
  bad.r_mat(0, 0) = -1;
  EXPECT_THROW(bad.validate(2, 1), InvalidInput);
  bad = c;
  bad.u_min(0) = 6;
  EXPECT_THROW(bad.validate(2, 1), InvalidInput);
  EXPECT_THROW(c.validate(3, 1), DimensionError);
}

TEST(CondensedQp, QuadraticEqualsDirectCost) {
  Rng rng(4);
  for (int horizon : {1, 5, 10}) {
    const int n = 2, m = 1;
    const GpModel model = random_toy_model(rng, 12, n, m);
    MpcConfig c = config(n, m, horizon);
    c.q_mat = random_spd(rng, n, 1.0);
    c.r_mat = random_spd(rng, m, 1.0);
    const GaussianState st{uniform_vector(rng, n, -0.5, 0.5), random_spd(rng, n, 0.02)};
    const Vector u_prev = uniform_vector(rng, m, -0.5, 0.5);
    const Vector s_k = to_extended(st);
    const ExtendedLocalModel ext = linearize_extended(model, s_k, u_prev);
    const Vector ds_k = 0.05 * rng.normal_vector(s_k.size());
    std::vector<Vector> refs;
    for (int i = 0; i < horizon; ++i) refs.push_back(rng.normal_vector(n));
    const CondensedQp qp = build_condensed_qp(ext, s_k, ds_k, u_prev, refs, c);
    ASSERT_EQ(qp.q_tilde.rows(), horizon * (n + n * n));
    EXPECT_LT((qp.phi - qp.phi.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GT(min_eigenvalue(qp.phi), 0.0);
    for (int k = 0; k < 20; ++k) {
      const Vector du = 0.3 * rng.normal_vector(horizon * m);
      const std::vector<Vector> states =
          direct_velocity_rollout(ext.a_mat, ext.b_mat, s_k, ds_k, du, horizon);
      std::vector<Vector> means, controls;
      std::vector<Matrix> covs;
      Vector u = u_prev;
      for (int i = 0; i < horizon; ++i) {
        u += du.segment(i * m, m);
        controls.push_back(u);
        means.push_back(states[i].head(n));
        const Matrix s = unvec(states[i].tail(n * n), n, n);
        covs.push_back(s.cwiseProduct(s));
      }
      const double direct = expected_cost(means, covs, controls, refs, c);
      EXPECT_LT(std::abs(qp.objective(du) - direct), 1e-8 * std::max(1.0, std::abs(direct)));
    }
  }
}

TEST(CondensedQp, HorizonOneHessianStructure) {
  Rng rng(5);
  const int n = 2, m = 1;
  const GpModel model = random_toy_model(rng, 10, n, m);
  const MpcConfig c = config(n, m, 1);
  const GaussianState st{Vector::Constant(n, 0.1), 0.01 * Matrix::Identity(n, n)};
  const Vector s_k = to_extended(st);
  const ExtendedLocalModel ext = linearize_extended(model, s_k, Vector::Zero(m));
  const CondensedQp qp = build_condensed_qp(ext, s_k, Vector::Zero(s_k.size()), Vector::Zero(m), {Vector::Zero(n)}, c);
  // J(Δu) = ‖Bδ‖²_Q̃ + ‖u_prev + Δu‖²_R ⇒ Φ = 2(BᵀQ̃B + R).
  const Matrix expected = 2.0 * (ext.b_mat.transpose() * qp.q_tilde * ext.b_mat + qp.r_tilde);
  EXPECT_LT((qp.phi - expected).norm(), 1e-10 * expected.norm());
}

TEST(Gpmpc1, OnTargetGivesZeroControl) {
  const GpModel model = still_model(2, 1);
  const MpcConfig c = config(2, 1, 3);
  const GaussianState st{Vector::Constant(2, 0.2), Matrix::Zero(2, 2)};
  const Gpmpc1Result r = gpmpc1_step(model, st, Vector::Zero(1), constant_refs(st.mean, 3), c);
  EXPECT_LE(r.u.norm(), 1e-3);
}

TEST(Gpmpc1, PinnedBoundsGiveExactZero) {
  MpcConfig c = config(1, 1, 3);
  c.u_min.setZero();
  c.u_max.setZero();
  const GaussianState st{Vector::Constant(1, 0.2), Matrix::Zero(1, 1)};
  const Gpmpc1Result r = gpmpc1_step(linear_model(), st, Vector::Zero(1), constant_refs(Vector::Constant(1, 1.0), 3), c);
  EXPECT_EQ(r.u(0), 0.0);
}

TEST(Gpmpc1, AgreesWithGpmpc2AtHorizonOne) {
  const MpcConfig c = config(1, 1, 1);
  const GaussianState st{Vector::Constant(1, 0.1), Matrix::Zero(1, 1)};
  const auto refs = constant_refs(Vector::Constant(1, 0.6), 1);
  const Gpmpc1Result a = gpmpc1_step(linear_model(), st, Vector::Zero(1), refs, c);
  const Gpmpc2Result b = gpmpc2_step(linear_model(), st, Vector::Zero(1), refs, c);
  EXPECT_GT(a.u(0), 0.0);
  EXPECT_LT((a.u - b.u).norm(), 0.05);
}

TEST(Gpmpc1, PredictedMeansRespectTightenedBounds) {
  MpcConfig c = config(1, 1, 5);
  c.x_min = Vector::Constant(1, -1.0);
  c.x_max = Vector::Constant(1, 0.5);
  const GaussianState st{Vector::Constant(1, 0.0), Matrix::Zero(1, 1)};
  const Gpmpc1Result r = gpmpc1_step(linear_model(), st, Vector::Zero(1), constant_refs(Vector::Constant(1, 2.0), 5), c);
  ASSERT_EQ(r.diag.means.size(), 5u);
  for (std::size_t i = 0; i < r.diag.means.size(); ++i) {
    EXPECT_LE(r.diag.means[i](0), r.diag.bounds[i].upper(0) + 1e-6);
    EXPECT_GE(r.diag.means[i](0), r.diag.bounds[i].lower(0) - 1e-6);
  }
}

TEST(Gpmpc2, OnTargetGivesZeroIncrement) {
  const GpModel model = still_model(2, 1);
  const MpcConfig c = config(2, 1, 4);
  const GaussianState st{Vector::Constant(2, -0.1), Matrix::Zero(2, 2)};
  const Gpmpc2Result r = gpmpc2_step(model, st, Vector::Zero(1), constant_refs(st.mean, 4), c);
  EXPECT_LE(r.du.cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LE(r.u.norm(), 1e-9);
}

TEST(Gpmpc2, SaturatesAtUpperBound) {
  MpcConfig c = config(1, 1, 5);
  c.u_min = Vector::Constant(1, -0.5);
  c.u_max = Vector::Constant(1, 0.5);
  c.r_mat(0, 0) = 1e-3;
  const GaussianState st{Vector::Zero(1), Matrix::Zero(1, 1)};
  const Gpmpc2Result r = gpmpc2_step(linear_model(), st, Vector::Zero(1), constant_refs(Vector::Constant(1, 50.0), 5), c);
  EXPECT_EQ(r.u(0), 0.5);
}

TEST(Gpmpc2, WarmStartOnUnchangedProblemIsIdempotent) {
  const MpcConfig c = config(1, 1, 5);
  const GaussianState st{Vector::Constant(1, 0.3), Matrix::Zero(1, 1)};
  const auto refs = constant_refs(Vector::Constant(1, 1.2), 5);
  const Gpmpc2Result first = gpmpc2_step(linear_model(), st, Vector::Zero(1), refs, c);
  Gpmpc2Memory mem;
  mem.valid = true;
  mem.prev_state = to_extended(st);  // Δs = 0: same linearization and ψ
  mem.prev_du = first.du;
  mem.ws = first.ws;
  const Gpmpc2Result again = gpmpc2_step(linear_model(), st, Vector::Zero(1), refs, c, &mem);
  EXPECT_LE(again.diag.qp_iterations, 1);
  EXPECT_LT((again.u - first.u).norm(), 1e-10);
}

TEST(Gpmpc2, InfeasibleTighteningReportsStep) {
  MpcConfig c = config(1, 1, 3);
  c.x_min = Vector::Constant(1, -0.01);
  c.x_max = Vector::Constant(1, 0.01);
  const GaussianState st{Vector::Zero(1), Matrix::Constant(1, 1, 0.5)};
  try {
    gpmpc2_step(linear_model(), st, Vector::Zero(1), constant_refs(Vector::Zero(1), 3), c);
    FAIL() << "expected InfeasibleError";
  } catch (const InfeasibleError& e) {
    EXPECT_GE(e.step(), 0);
    EXPECT_EQ(e.dimension(), 0);
  }
}

TEST(ControllerNames, RoundTrip) {
  for (ControllerKind k : {ControllerKind::Gpmpc1, ControllerKind::Gpmpc2}) EXPECT_EQ(parse_controller(controller_name(k)), k);
  EXPECT_THROW(parse_controller("lqr"), InvalidInput);
}

TEST(RecedingHorizon, StillSystemStaysAtRest) {
  const GpModel model = still_model(2, 1);
  const MpcConfig c = config(2, 1, 3);
  for (ControllerKind kind : {ControllerKind::Gpmpc1, ControllerKind::Gpmpc2}) {
    StillPlant plant(Vector::Zero(2));
    auto ctrl = make_controller(kind, model, c);
    ReferenceTrajectory ref{std::vector<Vector>(20, Vector::Zero(2))};
    const TrajectoryLog log = run_receding_horizon(*ctrl, plant, model, ref, 10, c, Vector::Zero(1));
    ASSERT_FALSE(log.failed) << log.error;
    ASSERT_EQ(log.rows.size(), 10u);
    for (const LogRow& row : log.rows) EXPECT_LE(row.control.norm(), 1e-3);
  }
}

TEST(RecedingHorizon, ShortReferenceRejected) {
  const GpModel model = still_model(2, 1);
  const MpcConfig c = config(2, 1, 3);
  StillPlant plant(Vector::Zero(2));
  auto ctrl = make_controller(ControllerKind::Gpmpc2, model, c);
  ReferenceTrajectory ref{std::vector<Vector>(5, Vector::Zero(2))};
  EXPECT_THROW(run_receding_horizon(*ctrl, plant, model, ref, 10, c, Vector::Zero(1)), InvalidInput);
}

TEST(RecedingHorizon, CsvColumns) {
  const GpModel model = still_model(2, 1);
  const MpcConfig c = config(2, 1, 2);
  StillPlant plant(Vector::Zero(2));
  auto ctrl = make_controller(ControllerKind::Gpmpc2, model, c);
  ReferenceTrajectory ref{std::vector<Vector>(10, Vector::Zero(2))};
  const TrajectoryLog log = run_receding_horizon(*ctrl, plant, model, ref, 3, c, Vector::Zero(1));
  const std::string csv = trajectory_csv(log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "k,r_1,r_2,u_1,x_1,x_2,y_1,y_2,pred_mu_1,pred_mu_2,pred_var_1,pred_var_2,cost,lyapunov,solver_iters,solve_ms");
}

TEST(Lyapunov, NonNegativeAndFlagsInjectedJump) {
  const GpModel model = still_model(2, 1);
  const MpcConfig c = config(2, 1, 3);
  StillPlant plant(Vector::Constant(2, 0.5));
  auto ctrl = make_controller(ControllerKind::Gpmpc2, model, c);
  ReferenceTrajectory ref{std::vector<Vector>(20, Vector::Zero(2))};
  TrajectoryLog log = run_receding_horizon(*ctrl, plant, model, ref, 6, c, Vector::Zero(1));
  ASSERT_FALSE(log.failed);
  LyapunovReport rep = lyapunov_diagnostic(log, c);
  ASSERT_EQ(rep.values.size(), 6u);
  for (double v : rep.values) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
  }
  EXPECT_FALSE(rep.violations[0]);
  for (Vector& mu : log.horizons[4].means) mu.array() += 10.0;
  rep = lyapunov_diagnostic(log, c);
  EXPECT_TRUE(rep.violations[4]);
}

TEST(Lyapunov, DecreasesTowardFloorOnStabilizedRun) {
  // Linear plant driven by the model it was learned from.
  class LinearPlant : public Plant {
   public:
    Vector state() const override { return x_; }
    Vector step(const Vector& u) override {
      x_ = 0.9 * x_ + 0.5 * u;
      return x_;
    }

   private:
    Vector x_ = Vector::Constant(1, 1.5);
  };
  MpcConfig c = config(1, 1, 5);
  c.r_mat(0, 0) = 0.1;
  LinearPlant plant;
  auto ctrl = make_controller(ControllerKind::Gpmpc2, linear_model(), c);
  ReferenceTrajectory ref{std::vector<Vector>(40, Vector::Zero(1))};
  const TrajectoryLog log = run_receding_horizon(*ctrl, plant, linear_model(), ref, 30, c, Vector::Zero(1));
  ASSERT_FALSE(log.failed) << log.error;
  const LyapunovReport rep = lyapunov_diagnostic(log, c);
  EXPECT_LT(rep.values.back(), 0.05 * rep.values.front());
  EXPECT_LT(std::abs(log.rows.back().state(0)), 0.05);
}

TEST(RecedingHorizon, ControllersAgreeOnStepTask) {
  ExperimentSpec spec = default_experiment(Task::Step);
  spec.steps = 60;
  const GpModel model = build_experiment_model(spec, 3);
  const TrialResult a = run_trial(spec, model, ControllerKind::Gpmpc1, 3, 0);
  const TrialResult b = run_trial(spec, model, ControllerKind::Gpmpc2, 3, 0);
  ASSERT_FALSE(a.log.failed) << a.log.error;
  ASSERT_FALSE(b.log.failed) << b.log.error;
  ASSERT_EQ(a.log.rows.size(), 60u);
  for (int o = 0; o < 2; ++o) {
    const double hi = std::max(a.metrics.mse(o), b.metrics.mse(o)), lo = std::min(a.metrics.mse(o), b.metrics.mse(o));
    EXPECT_LE(hi, 2.0 * lo) << "output " << o;
  }
  for (const TrialResult* r : {&a, &b})
    for (const LogRow& row : r->log.rows) {
      EXPECT_TRUE((row.control.array() >= spec.mpc.u_min.array()).all());
      EXPECT_TRUE((row.control.array() <= spec.mpc.u_max.array()).all());
    }
}
