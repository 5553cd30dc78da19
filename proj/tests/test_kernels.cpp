#include <doctest.h>

#include <cmath>

#include "sage/error.hpp"
#include "sage/kernels.hpp"
#include "sage/random.hpp"

using namespace sage;

namespace {

KernelParams params(std::initializer_list<double> ls, double std = 1.0) {
  KernelParams p;
  p.lengthscales = Eigen::Map<const Eigen::VectorXd>(ls.begin(), static_cast<Eigen::Index>(ls.size()));
  p.std = std;
  return p;
}

Eigen::MatrixXd random_points(Rng& rng, Eigen::Index n, Eigen::Index d) {
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < d; ++k) m(i, k) = uniform(rng, -2.0, 2.0);
  return m;
}

double inf_norm(const Eigen::MatrixXd& m) { return m.cwiseAbs().rowwise().sum().maxCoeff(); }

}  // namespace

TEST_CASE("rbf closed forms") {
  Eigen::MatrixXd x(1, 1), y(1, 1);
  x << 0.3;
  CHECK(rbf_kernel(x, x, params({0.7}, 2.5))(0, 0) == doctest::Approx(6.25));
  y << 0.3 + 0.7;
  CHECK(rbf_kernel(x, y, params({0.7}))(0, 0) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
  CHECK(rbf_kernel(x, y, params({0.7}))(0, 0) == doctest::Approx(0.60653).epsilon(1e-5));
}

TEST_CASE("matern52 closed forms") {
  Eigen::MatrixXd x(1, 2), y(1, 2);
  x << 0.1, 0.2;
  CHECK(matern52_kernel(x, x, params({0.5, 0.3}, 1.7))(0, 0) == doctest::Approx(1.7 * 1.7));
  // Scaled distance exactly 1: (0.3/0.5)^2 + (0.24/0.3)^2 = 0.36 + 0.64.
  y << 0.4, 0.44;
  const double expected = (1 + std::sqrt(5.0) + 5.0 / 3.0) * std::exp(-std::sqrt(5.0));
  CHECK(matern52_kernel(x, y, params({0.5, 0.3}))(0, 0) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(0.52399).epsilon(1e-5));
}

TEST_CASE("kernel matrices are symmetric, bounded, translation invariant") {
  Rng rng = make_rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd a = random_points(rng, 15, 3);
    const Eigen::MatrixXd b = random_points(rng, 9, 3);
    const KernelParams p = params({uniform(rng, 0.1, 2), uniform(rng, 0.1, 2), uniform(rng, 0.1, 2)},
                                  uniform(rng, 0.1, 3));
    Eigen::RowVectorXd shift(3);
    shift << uniform(rng, -5, 5), uniform(rng, -5, 5), uniform(rng, -5, 5);
    const Eigen::MatrixXd as = a.rowwise() + shift;
    const Eigen::MatrixXd bs = b.rowwise() + shift;
    for (auto kernel : {rbf_kernel, matern52_kernel}) {
      const Eigen::MatrixXd k = kernel(a, a, p);
      CHECK(k == k.transpose());
      CHECK((k.diagonal().array() >= 0).all());
      const Eigen::MatrixXd kab = kernel(a, b, p);
      CHECK((kab.array() < p.std * p.std).all());
      CHECK((kernel(as, bs, p) - kab).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("kernel parameter validation") {
  Eigen::MatrixXd a(2, 2), b(2, 1);
  a.setZero();
  b.setZero();
  CHECK_THROWS_AS(rbf_kernel(a, b, params({1.0, 1.0})), ConfigError);
  CHECK_THROWS_AS(rbf_kernel(a, a, params({1.0})), ConfigError);
  CHECK_THROWS_AS(matern52_kernel(a, a, params({1.0, -1.0})), ConfigError);
  CHECK_THROWS_AS(rbf_kernel(a, a, params({1.0, 1.0}, 0.0)), ConfigError);
}

TEST_CASE("cholesky hand cases") {
  auto eye = cholesky_with_jitter(Eigen::MatrixXd::Identity(4, 4));
  CHECK(eye.jitter == 0.0);
  CHECK(eye.lower == Eigen::MatrixXd::Identity(4, 4));

  Eigen::MatrixXd k(2, 2);
  k << 4, 2, 2, 3;
  const auto r = cholesky_with_jitter(k);
  CHECK(r.jitter == 0.0);
  CHECK(r.lower(0, 0) == doctest::Approx(2.0));
  CHECK(r.lower(0, 1) == 0.0);
  CHECK(r.lower(1, 0) == doctest::Approx(1.0));
  CHECK(r.lower(1, 1) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("cholesky with duplicated points needs jitter and round-trips") {
  Eigen::MatrixXd pts(6, 1);
  pts << 0.1, 0.4, 0.4, 0.7, 0.7, 0.9;
  const Eigen::MatrixXd k = rbf_kernel(pts, pts, params({0.3}));
  const auto r = cholesky_with_jitter(k);
  CHECK(r.jitter > 0.0);
  Eigen::MatrixXd target = k;
  target.diagonal().array() += r.jitter;
  CHECK((r.lower * r.lower.transpose() - target).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(r.lower.isLowerTriangular());
}

TEST_CASE("cholesky round-trip on random PSD matrices up to n = 200") {
  Rng rng = make_rng(5);
  for (Eigen::Index n : {1, 2, 5, 17, 60, 120, 200}) {
    const Eigen::MatrixXd a = standard_normal_matrix(rng, n, n);
    const Eigen::MatrixXd k = a * a.transpose() / static_cast<double>(n);
    const auto r = cholesky_with_jitter(k);
    Eigen::MatrixXd target = k;
    target.diagonal().array() += r.jitter;
    CHECK(inf_norm(r.lower * r.lower.transpose() - target) <= 1e-8 * inf_norm(k));
  }
  // Rank-deficient kernel matrices from dense 1-D grids.
  for (Eigen::Index n : {50, 200}) {
    Eigen::MatrixXd pts = Eigen::VectorXd::LinSpaced(n, 0.0, 1.0);
    const Eigen::MatrixXd k = rbf_kernel(pts, pts, params({0.5}, 2.0));
    const auto r = cholesky_with_jitter(k);
    Eigen::MatrixXd target = k;
    target.diagonal().array() += r.jitter;
    CHECK(inf_norm(r.lower * r.lower.transpose() - target) <= 1e-8 * inf_norm(k));
  }
}

TEST_CASE("cholesky failure names the kernel") {
  Eigen::MatrixXd k(2, 2);
  k << 1, 0, 0, -5;
  try {
    cholesky_with_jitter(k, 1e-6, "segmentation field");
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("segmentation field") != std::string::npos);
  }
  CHECK_THROWS_AS(cholesky_with_jitter(Eigen::MatrixXd(2, 3)), ConfigError);
}

TEST_CASE("whitened samples") {
  Rng rng = make_rng(3);
  const Eigen::VectorXd mean = standard_normal_vector(rng, 4);
  const Eigen::MatrixXd a = standard_normal_matrix(rng, 4, 4);
  const Eigen::MatrixXd l = cholesky_with_jitter(a * a.transpose()).lower;
  CHECK(whitened_gp_sample(mean, l, Eigen::VectorXd::Zero(4)) == mean);
  const Eigen::VectorXd v = standard_normal_vector(rng, 4);
  CHECK(whitened_gp_sample(Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Identity(4, 4), v) == v);
  // Linear in v.
  const Eigen::VectorXd w = standard_normal_vector(rng, 4);
  const Eigen::VectorXd lhs = whitened_gp_sample(Eigen::VectorXd::Zero(4), l, 2.0 * v - 3.0 * w);
  const Eigen::VectorXd rhs = 2.0 * whitened_gp_sample(Eigen::VectorXd::Zero(4), l, v) -
                              3.0 * whitened_gp_sample(Eigen::VectorXd::Zero(4), l, w);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(whitened_gp_sample(mean, l, Eigen::VectorXd::Zero(3)), ConfigError);
}

TEST_CASE("empirical covariance of whitened draws") {
  Rng rng = make_rng(17);
  Eigen::MatrixXd pts(5, 1);
  pts << 0.0, 0.2, 0.45, 0.5, 0.9;
  const Eigen::MatrixXd k = rbf_kernel(pts, pts, params({0.3}, 1.5));
  const auto chol = cholesky_with_jitter(k);
  const int draws = 100000;
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(5, 5);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(5);
  for (int i = 0; i < draws; ++i) {
    const Eigen::VectorXd f = whitened_gp_sample(zero, chol.lower, standard_normal_vector(rng, 5));
    acc += f * f.transpose();
  }
  acc /= draws;
  const Eigen::MatrixXd target = chol.lower * chol.lower.transpose();
  CHECK((acc - target).norm() / target.norm() < 0.05);
}
