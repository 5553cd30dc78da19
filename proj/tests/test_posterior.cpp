#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <unistd.h>

#include "sage/error.hpp"
#include "sage/posterior.hpp"

using namespace sage;

namespace {

GridState grid_state(const Eigen::MatrixXd& probs, std::vector<Eigen::VectorXd> values, std::vector<double> noise) {
  GridState g;
  g.field.probs = probs;
  g.property.values = std::move(values);
  g.noise = std::move(noise);
  return g;
}

Chain changepoint_chain(const std::vector<double>& cps) {
  Chain c;
  c.kind = ModelKind::Sage1D;
  for (double v : cps) {
    ParameterState s;
    s.seg.changepoints.values = {v};
    c.states.push_back(s);
  }
  return c;
}

Eigen::MatrixXd col(const std::vector<double>& v) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
  return m;
}

}  // namespace

TEST_CASE("phase entropy of point masses and even splits") {
  Eigen::MatrixXd one_hot(2, 3);
  one_hot << 1, 0, 0, 0, 0, 1;
  const auto a = summarize(std::vector<GridState>{grid_state(one_hot, {}, {})});
  CHECK(a.phase_entropy.cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.phase_estimate == std::vector<int>{0, 2});

  Eigen::MatrixXd l(1, 2), r(1, 2);
  l << 1, 0;
  r << 0, 1;
  const auto b = summarize(std::vector<GridState>{grid_state(l, {}, {}), grid_state(r, {}, {})});
  CHECK(b.p_mean(0, 0) == 0.5);
  CHECK(b.phase_entropy[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  // Ties go to the lowest label.
  CHECK(b.phase_estimate[0] == 0);
}

TEST_CASE("summary rows stay stochastic") {
  Rng rng = make_rng(1);
  std::vector<GridState> samples;
  for (int s = 0; s < 30; ++s) {
    Eigen::MatrixXd p = standard_normal_matrix(rng, 7, 3).array().exp();
    for (Eigen::Index i = 0; i < 7; ++i) p.row(i) /= p.row(i).sum();
    samples.push_back(grid_state(p, {}, {}));
  }
  const auto sum = summarize(samples);
  for (Eigen::Index i = 0; i < 7; ++i) {
    CHECK(sum.p_mean.row(i).sum() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(sum.p_mean.row(i).minCoeff() >= 0.0);
    CHECK(sum.phase_entropy[i] >= 0.0);
    CHECK(sum.phase_entropy[i] <= std::log(3.0) + 1e-12);
  }
}

TEST_CASE("property mean and spread against direct formulas") {
  Rng rng = make_rng(2);
  const Eigen::MatrixXd probs = Eigen::MatrixXd::Ones(5, 1);
  std::vector<GridState> samples;
  std::vector<Eigen::VectorXd> raw;
  double noise_sum = 0.0;
  for (int s = 0; s < 40; ++s) {
    Eigen::VectorXd v = 100.0 + 3.0 * standard_normal_vector(rng, 5).array();
    const double n = 0.1 + 0.01 * s;
    noise_sum += n;
    raw.push_back(v);
    samples.push_back(grid_state(probs, {v}, {n}));
  }
  const auto sum = summarize(samples);
  CHECK(sum.samples == 40);
  for (Eigen::Index i = 0; i < 5; ++i) {
    double m = 0.0;
    for (const auto& v : raw) m += v[i];
    m /= 40.0;
    double ss = 0.0;
    for (const auto& v : raw) ss += (v[i] - m) * (v[i] - m);
    CHECK(sum.mu_hat[0][i] == doctest::Approx(m).epsilon(1e-12));
    CHECK(std::abs(sum.sigma_hat[0][i] - std::sqrt(ss / 39.0)) < 1e-10);
    CHECK(sum.noise_hat[0][i] == doctest::Approx(noise_sum / 40.0).epsilon(1e-14));
  }

  const auto single = summarize(std::vector<GridState>{samples.front()});
  CHECK(single.sigma_hat[0].cwiseAbs().maxCoeff() == 0.0);
  CHECK(single.mu_hat[0] == raw.front());

  CHECK_THROWS_AS(summarize(std::vector<GridState>{}), InferenceError);
}

TEST_CASE("normal quantiles") {
  CHECK(normal_quantile(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-12));
  CHECK(normal_quantile(0.75) == doctest::Approx(0.674489750196082).epsilon(1e-12));
  CHECK(normal_quantile(0.5) == doctest::Approx(0.0));
  CHECK(normal_quantile(1e-6) == doctest::Approx(-4.753424308822899).epsilon(1e-10));
  for (double p = 0.001; p < 1.0; p += 0.0137) {
    CHECK(normal_quantile(p) == doctest::Approx(-normal_quantile(1.0 - p)).epsilon(1e-10));
    CHECK(0.5 * std::erfc(-normal_quantile(p) / std::sqrt(2.0)) == doctest::Approx(p).epsilon(1e-12));
  }
  CHECK_THROWS_AS(normal_quantile(0.0), ConfigError);
  CHECK_THROWS_AS(normal_quantile(1.0), ConfigError);
}

TEST_CASE("predictive intervals") {
  PosteriorSummary s;
  s.mu_hat = {Eigen::Vector2d(1.0, -2.0)};
  s.sigma_hat = {Eigen::Vector2d(0.3, 0.0)};
  s.noise_hat = {Eigen::Vector2d(0.4, 0.4)};
  const auto sum = predictive_interval(s, 0, 0.95);
  CHECK(sum.lo[0] == doctest::Approx(1.0 - 1.959963984540054 * 0.7).epsilon(1e-12));
  CHECK(sum.hi[1] == doctest::Approx(-2.0 + 1.959963984540054 * 0.4).epsilon(1e-12));
  const auto var = predictive_interval(s, 0, 0.5, true);
  CHECK(var.hi[0] - 1.0 == doctest::Approx(0.674489750196082 * 0.5).epsilon(1e-12));
  for (Eigen::Index i = 0; i < 2; ++i) {
    CHECK(sum.lo[i] <= s.mu_hat[0][i]);
    CHECK(sum.hi[i] >= s.mu_hat[0][i]);
    CHECK(var.hi[i] - var.lo[i] <= sum.hi[i] - sum.lo[i]);
  }
  CHECK_THROWS_AS(predictive_interval(s, 1, 0.95), ConfigError);
  CHECK_THROWS_AS(predictive_interval(s, 0, 1.0), ConfigError);
}

TEST_CASE("changepoint histogram") {
  const Interval dom{0.0, 1.0};
  const auto point = changepoint_posterior_1d(changepoint_chain(std::vector<double>(100, 0.5)), dom);
  CHECK(point.edges.size() == 51);
  CHECK(std::count_if(point.counts.begin(), point.counts.end(), [](long c) { return c > 0; }) == 1);
  CHECK(std::accumulate(point.counts.begin(), point.counts.end(), 0L) == 100);
  CHECK(point.samples.size() == 1);

  Rng rng = make_rng(3);
  std::vector<double> u(10000);
  for (auto& v : u) v = uniform(rng, 0.0, 1.0);
  const auto flat = changepoint_posterior_1d(changepoint_chain(u), dom, 10);
  const auto [mn, mx] = std::minmax_element(flat.counts.begin(), flat.counts.end());
  CHECK(static_cast<double>(*mx) / static_cast<double>(*mn) < 2.0);
  CHECK(std::accumulate(flat.counts.begin(), flat.counts.end(), 0L) == 10000);
  CHECK(flat.samples[0] == u);

  Chain nd = changepoint_chain({0.5});
  nd.kind = ModelKind::SageND;
  CHECK_THROWS_AS(changepoint_posterior_1d(nd, dom), ConfigError);
}

TEST_CASE("argmax rows") {
  Eigen::MatrixXd p(4, 3);
  p << 0.2, 0.5, 0.3, 0.4, 0.4, 0.2, 0.1, 0.1, 0.8, 1.0 / 3, 1.0 / 3, 1.0 / 3;
  CHECK(argmax_rows(p) == std::vector<int>{1, 0, 2, 0});
  CHECK(argmax_rows(7.0 * p) == argmax_rows(p));
}

TEST_CASE("1-D Wasserstein distance") {
  CHECK(wasserstein_1d({0.0, 1.0}, {0.0, 1.0}) == 0.0);
  CHECK(wasserstein_1d({0.0}, {2.5}) == doctest::Approx(2.5));
  CHECK(wasserstein_1d({0.0, 1.0, 2.0}, {0.5, 1.5, 2.5}) == doctest::Approx(0.5));
  // Point mass against two atoms with unequal sample sizes.
  CHECK(wasserstein_1d({0.0}, {1.0, 3.0}) == doctest::Approx(2.0));
  CHECK(wasserstein_1d({3.0, 1.0}, {0.0}) == doctest::Approx(2.0));
  CHECK_THROWS_AS(wasserstein_1d({}, {1.0}), ConfigError);
}

TEST_CASE("grid CSV ordering") {
  Eigen::MatrixXd pts(4, 2);
  pts << 1, 1, 0, 1, 1, 0, 0, 0;
  Eigen::MatrixXd vals(4, 1);
  vals << 3, 2, 1, 0.1;
  const auto path = std::filesystem::temp_directory_path() / ("sage_grid_" + std::to_string(::getpid()) + ".csv");
  write_grid_csv(path, pts, {"v"}, vals);
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::filesystem::remove(path);
  CHECK(text == "x1,x2,v\n0,0,0.10000000000000001\n1,0,1\n0,1,2\n1,1,3\n");
  CHECK_THROWS_AS(write_grid_csv(path, pts, {"a", "b"}, vals), ConfigError);
}

TEST_CASE("predictive intervals cover held-out observations") {
  long inside = 0, inside_var = 0, total = 0;
  for (std::uint64_t rep = 0; rep < 6; ++rep) {
    Rng rng = make_rng(500 + rep);
    std::vector<double> lattice(81);
    for (int i = 0; i < 81; ++i) lattice[static_cast<std::size_t>(i)] = i / 80.0;
    const Eigen::MatrixXd x = col(lattice);
    Eigen::MatrixXd k(81, 81);
    for (Eigen::Index i = 0; i < 81; ++i) {
      for (Eigen::Index j = 0; j < 81; ++j) k(i, j) = std::exp(-0.5 * std::pow((x(i, 0) - x(j, 0)) / 0.2, 2));
    }
    k.diagonal().array() += 1e-8;
    const Eigen::VectorXd f = k.llt().matrixL() * standard_normal_vector(rng, 81);
    const double noise = 0.1;
    PropertyDataset p{"p0", Eigen::MatrixXd(41, 1), Eigen::VectorXd(41)};
    for (Eigen::Index i = 0; i < 41; ++i) {
      p.points(i, 0) = lattice[static_cast<std::size_t>(2 * i)];
      p.values[i] = f[2 * i] + noise * standard_normal(rng);
    }
    const Domain dom = Domain::unit(1);
    std::vector<PropertyDataset> props{p};
    PredictionGrid grid = build_grid(dom, {81}, collect_points({}, props));
    const SageModel m(ModelKind::Sage1DFP, dom, default_priors(dom, 1, props), {}, props, grid);
    McmcSettings st;
    st.iterations = 4000;
    st.burn_in = 2000;
    st.thinning = 4;
    st.chains = 1;
    st.seed = rep;
    const Chain ch = run_chain(m, st, 1);
    const auto sum = summarize(m, ch);
    const auto band = predictive_interval(sum, 0, 0.95);
    const auto band_var = predictive_interval(sum, 0, 0.95, true);
    for (Eigen::Index i = 0; i < 81; ++i) {
      const Eigen::Index g = grid.index_of(x.row(i));
      const double y = f[i] + noise * standard_normal(rng);
      inside += band.lo[g] <= y && y <= band.hi[g];
      inside_var += band_var.lo[g] <= y && y <= band_var.hi[g];
      ++total;
    }
  }
  const double cov = static_cast<double>(inside) / static_cast<double>(total);
  const double cov_var = static_cast<double>(inside_var) / static_cast<double>(total);
  MESSAGE("coverage " << cov << ", variance-sum " << cov_var);
  // Summed standard deviations over-cover by construction.
  CHECK(cov_var >= 0.85);
  CHECK(cov_var <= 0.99);
  CHECK(cov >= cov_var);
}
