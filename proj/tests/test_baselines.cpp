#include <doctest.h>

#include <cmath>

#include "sage/baselines.hpp"
#include "sage/error.hpp"
#include "sage/random.hpp"

using namespace sage;

namespace {

Eigen::MatrixXd lattice_1d(int n, double lo = 0.0, double hi = 1.0) {
  Eigen::MatrixXd m(n, 1);
  for (int i = 0; i < n; ++i) m(i, 0) = lo + (hi - lo) * i / (n - 1);
  return m;
}

PropertyDataset dataset(const Eigen::MatrixXd& x, const std::function<double(double)>& f, double noise = 0.0,
                        std::uint64_t seed = 0) {
  Rng rng = make_rng(seed);
  PropertyDataset p{"p", x, Eigen::VectorXd(x.rows())};
  for (Eigen::Index i = 0; i < x.rows(); ++i) p.values[i] = f(x(i, 0)) + noise * standard_normal(rng);
  return p;
}

}  // namespace

TEST_CASE("coordinate ascent finds a box-constrained maximum") {
  auto f = [](const Eigen::VectorXd& x) { return -std::pow(x[0] - 0.3, 2) - 2.0 * std::pow(x[1] + 0.5, 2); };
  double value = 0.0;
  const Eigen::VectorXd x = coordinate_ascent(f, Eigen::Vector2d(1.0, 1.0), Eigen::Vector2d(-2, -2),
                                              Eigen::Vector2d(2, 2), value);
  CHECK(x[0] == doctest::Approx(0.3).epsilon(1e-3));
  CHECK(x[1] == doctest::Approx(-0.5).epsilon(1e-3));
  CHECK(value >= f(Eigen::Vector2d(1.0, 1.0)));
  // Optimum outside the box lands on the boundary.
  const Eigen::VectorXd b = coordinate_ascent(f, Eigen::Vector2d(0.5, 0.5), Eigen::Vector2d(0.5, 0.0),
                                              Eigen::Vector2d(1, 1), value);
  CHECK(b[0] == doctest::Approx(0.5));
  CHECK(b[1] == doctest::Approx(0.0));
}

TEST_CASE("GP regression recovers noise-free linear data") {
  const Domain dom = Domain::unit(1);
  const auto data = dataset(lattice_1d(12), [](double x) { return 2.0 * x - 0.5; });
  const Eigen::MatrixXd grid = lattice_1d(51);
  const MleFit fit = gp_regression_mle(data, dom, grid);
  CHECK(std::isfinite(fit.log_marginal));
  for (Eigen::Index g = 5; g < 46; ++g) {
    CHECK(std::abs(fit.mean[g] - (2.0 * grid(g, 0) - 0.5)) < 1e-2);
  }
  CHECK(fit.std.minCoeff() >= 0.0);
  for (double s : fit.start_log_marginals) CHECK(fit.log_marginal >= s);
  CHECK(fit.start_log_marginals.size() == 16);
}

TEST_CASE("GP regression degenerate inputs warn") {
  const Domain dom = Domain::unit(1);
  const auto flat = dataset(lattice_1d(6), [](double) { return 3.0; });
  const MleFit a = gp_regression_mle(flat, dom, lattice_1d(5));
  REQUIRE(a.warnings.size() == 1);
  CHECK(a.warnings[0].find("equal") != std::string::npos);
  CHECK(std::isfinite(a.log_marginal));
  CHECK((a.mean.array() - 3.0).abs().maxCoeff() < 1e-6);

  PropertyDataset same{"p", Eigen::MatrixXd::Constant(4, 1, 0.4), Eigen::Vector4d(1.0, 1.2, 0.9, 1.1)};
  const MleFit b = gp_regression_mle(same, dom, lattice_1d(5));
  CHECK(b.warnings.size() == 1);
  CHECK(std::isfinite(b.log_marginal));

  PropertyDataset one{"p", Eigen::MatrixXd::Constant(1, 1, 0.4), Eigen::VectorXd::Constant(1, 1.0)};
  CHECK_THROWS_AS(gp_regression_mle(one, dom, lattice_1d(5)), DataError);
}

TEST_CASE("GP regression log marginal against a direct Gaussian density") {
  const auto data = dataset(lattice_1d(5), [](double x) { return std::sin(4 * x); }, 0.1, 2);
  const double ls = 0.3, sd = 0.9, noise = 0.2;
  Eigen::MatrixXd c(5, 5);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      const double d = (data.points(i, 0) - data.points(j, 0)) / ls;
      c(i, j) = sd * sd * std::exp(-0.5 * d * d) + (i == j ? noise * noise : 0.0);
    }
  }
  const Eigen::VectorXd r = data.values.array() - data.values.mean();
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(c);
  const double expect = -0.5 * r.dot(ldlt.solve(r)) - 0.5 * std::log(c.determinant()) -
                        2.5 * std::log(2 * M_PI);
  CHECK(gp_regression_log_marginal(data, Eigen::VectorXd::Constant(1, ls), sd, noise) ==
        doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("GP-CP places the changepoint in the data gap around a jump") {
  const Domain dom = Domain::unit(1);
  Eigen::MatrixXd x(30, 1);
  for (int i = 0; i < 15; ++i) x(i, 0) = 0.02 + 0.66 * i / 14.0;       // up to 0.68
  for (int i = 0; i < 15; ++i) x(15 + i, 0) = 0.72 + 0.27 * i / 14.0;  // from 0.72
  const auto data = dataset(x, [](double v) { return v < 0.7 ? std::sin(3 * v) : -2.0 + v; }, 0.02, 3);
  const MleFit fit = gp_cp_mle(data, dom, lattice_1d(101));
  REQUIRE(fit.changepoint.has_value());
  CHECK(*fit.changepoint > 0.68 - 0.01);
  CHECK(*fit.changepoint < 0.72 + 0.01);
  CHECK(fit.start_log_marginals.size() == 15);
  for (double s : fit.start_log_marginals) CHECK(fit.log_marginal >= s);
  for (Eigen::Index g = 0; g < fit.probs.rows(); ++g) CHECK(fit.probs.row(g).sum() == 1.0);
  CHECK(fit.probs(0, 0) == 1.0);
  CHECK(fit.probs(100, 1) == 1.0);

  CHECK_THROWS_AS(gp_cp_mle(data, Domain::unit(2), lattice_1d(5)), ConfigError);
}

TEST_CASE("GP-CP with the sigmoid saturated and tied kernels matches GP regression") {
  const Domain dom = Domain::unit(1);
  const auto data = dataset(lattice_1d(15), [](double x) { return std::cos(5 * x) + x; }, 0.05, 4);
  const Eigen::MatrixXd grid = lattice_1d(41);
  ChangepointOptions opts;
  opts.fixed_changepoint = -1.0;
  opts.fixed_steepness = 1e3;
  opts.tie_kernels = true;
  const MleFit cp = gp_cp_mle(data, dom, grid, opts);
  const MleFit reg = gp_regression_mle(data, dom, grid);
  CHECK(cp.log_marginal == doctest::Approx(reg.log_marginal).epsilon(1e-4));
  CHECK((cp.mean - reg.mean).cwiseAbs().maxCoeff() < 1e-3);
  CHECK((cp.std - reg.std).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("GP-CP gains no more than a parameter-count penalty on jump-free data") {
  const Domain dom = Domain::unit(1);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto data = dataset(lattice_1d(20), [](double x) { return std::sin(2 * x); }, 0.05, 10 + seed);
    const MleFit cp = gp_cp_mle(data, dom, lattice_1d(11));
    const MleFit reg = gp_regression_mle(data, dom, lattice_1d(11));
    // Four extra free parameters, BIC-style half log n each.
    const double penalty = 0.5 * 4.0 * std::log(20.0);
    CHECK(cp.log_marginal - reg.log_marginal <= penalty + 1e-6);
  }
}

TEST_CASE("baseline fits are deterministic per seed") {
  const Domain dom = Domain::unit(1);
  const auto data = dataset(lattice_1d(10), [](double x) { return x * x; }, 0.05, 5);
  RegressionOptions ro;
  ro.seed = 9;
  const MleFit a = gp_regression_mle(data, dom, lattice_1d(7), ro);
  const MleFit b = gp_regression_mle(data, dom, lattice_1d(7), ro);
  CHECK(a.log_marginal == b.log_marginal);
  CHECK(a.mean == b.mean);
  CHECK(a.hyper == b.hyper);
  ChangepointOptions co;
  co.seed = 9;
  const MleFit c = gp_cp_mle(data, dom, lattice_1d(7), co);
  const MleFit d = gp_cp_mle(data, dom, lattice_1d(7), co);
  CHECK(c.hyper == d.hyper);
  CHECK(c.mean == d.mean);
}

TEST_CASE("GP classification on separable clusters") {
  const Domain dom = Domain::unit(2);
  Rng rng = make_rng(6);
  StructureDataset s{"s", Eigen::MatrixXd(20, 2), {}};
  for (int i = 0; i < 20; ++i) {
    const bool left = i < 10;
    s.points(i, 0) = (left ? 0.2 : 0.8) + 0.05 * standard_normal(rng);
    s.points(i, 1) = 0.5 + 0.1 * standard_normal(rng);
    s.labels.push_back(left ? 0 : 1);
  }
  const std::vector<StructureDataset> data{s};
  const MleFit train = gp_classification_mle(data, 2, dom, s.points);
  CHECK(std::isfinite(train.log_marginal));
  for (Eigen::Index i = 0; i < 20; ++i) {
    Eigen::Index best;
    train.probs.row(i).maxCoeff(&best);
    CHECK(best == s.labels[static_cast<std::size_t>(i)]);
    CHECK(train.probs.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("GP classification boundary sits on the symmetry axis") {
  const Domain dom = Domain::unit(1);
  StructureDataset s{"s", Eigen::MatrixXd(12, 1), {}};
  for (int i = 0; i < 6; ++i) {
    s.points(i, 0) = 0.05 + 0.07 * i;
    s.points(11 - i, 0) = 1.0 - s.points(i, 0);
  }
  for (int i = 0; i < 12; ++i) s.labels.push_back(i < 6 ? 0 : 1);
  const Eigen::MatrixXd grid = lattice_1d(41);
  const MleFit fit = gp_classification_mle(std::vector<StructureDataset>{s}, 2, dom, grid);
  int first_one = -1;
  for (Eigen::Index g = 0; g < 41; ++g) {
    if (fit.probs(g, 1) > fit.probs(g, 0)) {
      first_one = static_cast<int>(g);
      break;
    }
  }
  // Axis at 0.5 = grid index 20; allow one cell.
  CHECK(first_one >= 20);
  CHECK(first_one <= 21);
  for (Eigen::Index g = 0; g < 41; ++g) CHECK(fit.probs.row(g).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("GP classification with one observed class is constant") {
  const Domain dom = Domain::unit(1);
  StructureDataset s{"s", lattice_1d(5), {1, 1, 1, 1, 1}};
  const MleFit fit = gp_classification_mle(std::vector<StructureDataset>{s}, 3, dom, lattice_1d(9));
  REQUIRE(fit.warnings.size() == 1);
  CHECK(fit.warnings[0].find("one class") != std::string::npos);
  for (Eigen::Index g = 0; g < 9; ++g) {
    CHECK(fit.probs(g, 1) == 1.0);
    CHECK(fit.probs.row(g).sum() == 1.0);
  }
}
