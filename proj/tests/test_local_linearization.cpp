#include "test_util.hpp"

using namespace gpmpc;
using namespace gpmpc::testing;

namespace {

GaussianState random_state(Rng& rng, int n) {
  return {uniform_vector(rng, n, -0.5, 0.5), random_spd(rng, n, 0.02)};
}

}  // namespace

TEST(FiniteDiff, IdentityMap) {
  const Matrix j = finite_diff_jacobian([](const Vector& x) { return x; }, Vector::Constant(3, 0.7), 1e-5);
  EXPECT_LT((j - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(FiniteDiff, ScalarSquare) {
  const Matrix j = finite_diff_jacobian([](const Vector& x) { return Vector(x.array().square()); },
                                        Vector::Constant(1, 3.0), 1e-5);
  EXPECT_NEAR(j(0, 0), 6.0, 1e-6);
}

TEST(FiniteDiff, LinearMapExact) {
  Rng rng(1);
  Matrix a(2, 3);
  for (int i = 0; i < a.size(); ++i) a(i) = rng.normal();
  const Matrix j = finite_diff_jacobian([&](const Vector& x) { return Vector(a * x); }, uniform_vector(rng, 3, -1, 1), 1e-3);
  EXPECT_LT((j - a).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  EXPECT_THROW(finite_diff_jacobian([](const Vector& x) { return x; }, Vector::Zero(1), 0.0), InvalidInput);
}

TEST(LinearizeBasic, RecoversLinearSystem) {
  // x' = 0.5x + 0.3u, trained densely.
  Rng rng(2);
  GpDataset d{Matrix(60, 2), Matrix(60, 1)};
  for (int i = 0; i < 60; ++i) {
    const double x = rng.uniform(-1, 1), u = rng.uniform(-1, 1);
    d.inputs.row(i) << x, u;
    d.targets(i) = (0.5 - 1.0) * x + 0.3 * u;
  }
  const GpModel model = train(d, TrainingConfig{});
  const BasicLocalModel lm = linearize_basic(model, {Vector::Constant(1, 0.1), Matrix::Zero(1, 1)}, Vector::Constant(1, -0.2));
  EXPECT_NEAR(lm.a_mat(0, 0), 0.5, 0.05);
  EXPECT_NEAR(lm.b_mat(0, 0), 0.3, 0.05);
}

TEST(LinearizeBasic, MatchesFiniteDifferences) {
  Rng rng(3);
  const GpModel model = random_toy_model(rng, 12, 2, 1);
  for (int c = 0; c < 10; ++c) {
    const GaussianState op = random_state(rng, 2);
    const Vector u = uniform_vector(rng, 1, -1, 1);
    const BasicLocalModel lm = linearize_basic(model, op, u);
    auto mean_of = [&](const Vector& z) {
      return propagate_state(model, {z.head(2), op.cov}, z.tail(1)).mean;
    };
    Vector z(3);
    z << op.mean, u;
    const Matrix fd = finite_diff_jacobian(mean_of, z, 1e-5);
    EXPECT_LT(rel_err(lm.a_mat, fd.leftCols(2)), 1e-4);
    EXPECT_LT(rel_err(lm.b_mat, fd.rightCols(1)), 1e-4);
  }
}

TEST(LinearizeBasic, DeadInputHasZeroColumn) {
  Rng rng(4);
  GpModel base = random_toy_model(rng, 10, 2, 1);
  std::vector<GpHyperparams> hps{base.hyperparams(0), base.hyperparams(1)};
  for (GpHyperparams& hp : hps) hp.scales(2) = 1e-14;  // kernel ignores u
  const GpModel model(base.dataset(), hps);
  const BasicLocalModel lm = linearize_basic(model, random_state(rng, 2), Vector::Constant(1, 0.4));
  EXPECT_LT(lm.b_mat.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(LinearizeBasic, ConstantTargetsGiveIdentity) {
  Rng rng(5);
  GpDataset d{Matrix(10, 3), Matrix::Constant(10, 2, 0.7)};
  for (int i = 0; i < d.inputs.size(); ++i) d.inputs(i) = rng.uniform(-1, 1);
  GpHyperparams hp;
  hp.signal_variance = 1.0;
  hp.noise_variance = 0.01;
  hp.scales = Vector::Constant(3, 1e-12);  // flat kernel: constant mean everywhere
  const GpModel model(d, {hp, hp});
  const BasicLocalModel lm = linearize_basic(model, {Vector::Zero(2), Matrix::Zero(2, 2)}, Vector::Zero(1));
  EXPECT_LT((lm.a_mat - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ExtendedState, RoundTrip) {
  Rng rng(6);
  const GaussianState s = random_state(rng, 3);
  const Vector e = to_extended(s);
  ASSERT_EQ(e.size(), 3 + 9);
  const Matrix root = unvec(e.tail(9), 3, 3);
  EXPECT_LT((root - root.transpose()).cwiseAbs().maxCoeff(), 1e-8);
  const GaussianState back = from_extended(e, 3);
  EXPECT_EQ(back.mean, s.mean);
  EXPECT_LT(rel_err(back.cov, s.cov), 1e-12);
}

TEST(LinearizeExtended, MeanBlockEqualsBasic) {
  Rng rng(7);
  const GpModel model = random_toy_model(rng, 12, 2, 1);
  for (int c = 0; c < 5; ++c) {
    const GaussianState op = random_state(rng, 2);
    const Vector u = uniform_vector(rng, 1, -1, 1);
    const BasicLocalModel basic = linearize_basic(model, op, u);
    const ExtendedLocalModel ext = linearize_extended(model, to_extended(op), u);
    EXPECT_LT((ext.a_mat.topLeftCorner(2, 2) - basic.a_mat).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((ext.b_mat.topRows(2) - basic.b_mat).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(LinearizeExtended, MatchesFiniteDifferences) {
  Rng rng(8);
  for (auto [n, m] : {std::pair{2, 1}, std::pair{3, 2}}) {
    const GpModel model = random_toy_model(rng, 12, n, m);
    for (int c = 0; c < 10; ++c) {
      const Vector s = to_extended(random_state(rng, n));
      const Vector u = uniform_vector(rng, m, -1, 1);
      const ExtendedLocalModel ext = linearize_extended(model, s, u);
      EXPECT_LT(rel_err(ext.next, extended_step(model, s, u)), 1e-12);
      // Symmetric perturbations of the root block keep it a valid √Σ.
      const int q = n * n;
      auto sym = [&](const Vector& z) {
        Vector out = z;
        const Matrix r = unvec(z.tail(q), n, n);
        out.tail(q) = vec(symmetrize(r));
        return out;
      };
      const Matrix fd_s = finite_diff_jacobian([&](const Vector& z) { return extended_step(model, sym(z), u); }, s, 1e-6);
      const Matrix fd_u = finite_diff_jacobian([&](const Vector& v) { return extended_step(model, s, v); }, u, 1e-6);
      // Compare on symmetric directions only: project columns of the root block.
      Matrix p = Matrix::Identity(n + q, n + q);
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
          p.col(n + a + b * n).setZero();
          p(n + a + b * n, n + a + b * n) += 0.5;
          p(n + b + a * n, n + a + b * n) += 0.5;
        }
      EXPECT_LT(rel_err(ext.a_mat * p, fd_s * p), 1e-4);
      EXPECT_LT(rel_err(ext.b_mat, fd_u), 1e-4);
    }
  }
}

TEST(LinearizeExtended, ScaledCovarianceStillMatchesFiniteDifferences) {
  Rng rng(9);
  const GpModel model = random_toy_model(rng, 10, 2, 1);
  GaussianState op = random_state(rng, 2);
  const Vector u = Vector::Constant(1, 0.2);
  for (double scale : {1.0, 4.0}) {
    GaussianState st{op.mean, op.cov * scale};
    const Vector s = to_extended(st);
    const ExtendedLocalModel ext = linearize_extended(model, s, u);
    const Matrix root = unvec(s.tail(4), 2, 2);
    // Directional derivative along a symmetric root perturbation.
    Matrix dr(2, 2);
    dr << 0.3, 0.1, 0.1, -0.2;
    Vector dir = Vector::Zero(6);
    dir.tail(4) = vec(dr);
    const double h = 1e-6;
    const Vector fd = (extended_step(model, s + h * dir, u) - extended_step(model, s - h * dir, u)) / (2 * h);
    EXPECT_LT(rel_err(ext.a_mat * dir, fd), 1e-4) << "scale " << scale << " root\n" << root;
  }
}

TEST(SqrtDerivative, SolvesSylvesterEquation) {
  Rng rng(10);
  const Matrix cov = random_spd(rng, 3, 0.5);
  const Matrix root = principal_sqrt(cov);
  const Matrix d = sqrt_derivative(cov);
  Matrix dcov = random_spd(rng, 3, 0.1);
  const Matrix ds = unvec(d * vec(dcov), 3, 3);
  EXPECT_LT(rel_err(root * ds + ds * root, dcov), 1e-10);
}

TEST(SqrtDerivative, RejectsStronglyIndefiniteInput) {
  Matrix cov = Matrix::Identity(2, 2);
  cov(1, 1) = -1.0;
  EXPECT_THROW(sqrt_derivative(cov), NumericalError);
}
