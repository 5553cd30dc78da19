#include "sage/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "sage/error.hpp"
#include "sage/kernels.hpp"
#include "sage/random.hpp"

namespace sage {

Eigen::VectorXd coordinate_ascent(const std::function<double(const Eigen::VectorXd&)>& f,
                                  Eigen::VectorXd x, const Eigen::VectorXd& lower,
                                  const Eigen::VectorXd& upper, double& value, int max_sweeps,
                                  double tol) {
  const Eigen::Index n = x.size();
  Eigen::VectorXd step = 0.25 * (upper - lower);
  value = f(x);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool active = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double range = upper[i] - lower[i];
      if (range <= 0.0 || step[i] < tol * range) continue;
      active = true;
      bool improved = false;
      for (double dir : {1.0, -1.0}) {
        Eigen::VectorXd trial = x;
        trial[i] = std::clamp(x[i] + dir * step[i], lower[i], upper[i]);
        if (trial[i] == x[i]) continue;
        const double v = f(trial);
        if (v > value) {
          x = std::move(trial);
          value = v;
          improved = true;
          break;
        }
      }
      step[i] *= improved ? 1.5 : 0.5;
    }
    if (!active) break;
  }
  return x;
}

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // ln(2 pi)

double data_std(const Eigen::VectorXd& y) {
  if (y.size() < 2) return 0.0;
  return std::sqrt((y.array() - y.mean()).square().mean());
}

// Log marginal likelihood and solve for a Gaussian likelihood GP.
struct GaussianFit {
  Eigen::MatrixXd lower;
  Eigen::VectorXd alpha;
  double log_marginal;
};

GaussianFit fit_gaussian(Eigen::MatrixXd k, double noise, const Eigen::VectorXd& centered) {
  k.diagonal().array() += noise * noise;
  GaussianFit out;
  out.lower = cholesky_with_jitter(k, 1e-10, "GP regression covariance").lower;
  const Eigen::VectorXd z = out.lower.triangularView<Eigen::Lower>().solve(centered);
  out.alpha = out.lower.transpose().triangularView<Eigen::Upper>().solve(z);
  out.log_marginal = -0.5 * z.squaredNorm() - out.lower.diagonal().array().log().sum() -
                     0.5 * static_cast<double>(centered.size()) * kLog2Pi;
  return out;
}

void predict(const GaussianFit& fit, const Eigen::MatrixXd& k_cross, const Eigen::VectorXd& k_diag,
             double mean_const, MleFit& out) {
  out.mean = (k_cross.transpose() * fit.alpha).array() + mean_const;
  const Eigen::MatrixXd v = fit.lower.triangularView<Eigen::Lower>().solve(k_cross);
  out.std = (k_diag - v.colwise().squaredNorm().transpose()).cwiseMax(0.0).cwiseSqrt();
}

Eigen::VectorXd uniform_point(Rng& rng, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  Eigen::VectorXd x(lo.size());
  for (Eigen::Index i = 0; i < lo.size(); ++i) x[i] = uniform(rng, lo[i], hi[i]);
  return x;
}

bool all_identical_rows(const Eigen::MatrixXd& x) {
  for (Eigen::Index i = 1; i < x.rows(); ++i) {
    if (x.row(i) != x.row(0)) return false;
  }
  return true;
}

}  // namespace

double gp_regression_log_marginal(const PropertyDataset& data, const Eigen::VectorXd& lengthscales,
                                  double std, double noise) {
  const Eigen::VectorXd centered = data.values.array() - data.values.mean();
  KernelParams kp{lengthscales, std, 0.0};
  return fit_gaussian(rbf_kernel(data.points, data.points, kp), noise, centered).log_marginal;
}

MleFit gp_regression_mle(const PropertyDataset& data, const Domain& domain,
                         const Eigen::MatrixXd& grid_points, const RegressionOptions& options) {
  if (data.size() < 2) throw DataError("GP regression needs at least 2 points");
  const Eigen::Index dim = domain.dim();
  MleFit out;
  out.algorithm = "gp-reg";
  double sd = data_std(data.values);
  if (!(sd > 0.0)) {
    out.warnings.push_back("all property values are equal; noise settles at its lower bound");
    sd = 1.0;
  }
  if (all_identical_rows(data.points)) {
    out.warnings.push_back("all inputs are identical; lengthscales are not identifiable");
  }
  // log-space box: lengthscales, std, noise
  Eigen::VectorXd lo(dim + 2), hi(dim + 2);
  for (Eigen::Index d = 0; d < dim; ++d) {
    const double w = domain.bounds[static_cast<std::size_t>(d)].width();
    lo[d] = std::log(0.01 * w);
    hi[d] = std::log(2.0 * w);
  }
  lo[dim] = std::log(0.01 * sd);
  hi[dim] = std::log(10.0 * sd);
  lo[dim + 1] = std::log(1e-4 * sd);
  hi[dim + 1] = std::log(sd);

  const double mean_const = data.values.mean();
  const Eigen::VectorXd centered = data.values.array() - mean_const;
  auto decode = [&](const Eigen::VectorXd& x) {
    return KernelParams{x.head(dim).array().exp(), std::exp(x[dim]), 0.0};
  };
  auto objective = [&](const Eigen::VectorXd& x) {
    try {
      return fit_gaussian(rbf_kernel(data.points, data.points, decode(x)), std::exp(x[dim + 1]), centered)
          .log_marginal;
    } catch (const NumericalError&) {
      return -std::numeric_limits<double>::infinity();
    }
  };

  Rng rng = make_rng(options.seed, 0x5EED);
  Eigen::VectorXd best;
  double best_value = -std::numeric_limits<double>::infinity();
  for (int s = 0; s < std::max(1, options.restarts); ++s) {
    Eigen::VectorXd x0 = s == 0 ? Eigen::VectorXd(0.5 * (lo + hi)) : uniform_point(rng, lo, hi);
    out.start_log_marginals.push_back(objective(x0));
    double value;
    Eigen::VectorXd x = coordinate_ascent(objective, x0, lo, hi, value);
    if (value > best_value) {
      best_value = value;
      best = x;
    }
  }
  const KernelParams kp = decode(best);
  out.noise = std::exp(best[dim + 1]);
  out.log_marginal = best_value;
  for (Eigen::Index d = 0; d < dim; ++d) out.hyper["lengthscale_" + std::to_string(d + 1)] = kp.lengthscales[d];
  out.hyper["std"] = kp.std;
  out.hyper["noise"] = out.noise;
  const auto fit = fit_gaussian(rbf_kernel(data.points, data.points, kp), out.noise, centered);
  predict(fit, rbf_kernel(data.points, grid_points, kp),
          Eigen::VectorXd::Constant(grid_points.rows(), kp.std * kp.std), mean_const, out);
  return out;
}

// ---------------------------------------------------------------------------
// Changepoint kernel

namespace {

struct CpParams {
  double l_left, s_left, l_right, s_right, c, steepness, noise;
};

Eigen::VectorXd sigmoid(const Eigen::VectorXd& x, double c, double steepness) {
  return (1.0 + (-(x.array() - c) * steepness).exp()).inverse();
}

Eigen::MatrixXd cp_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const CpParams& p) {
  const Eigen::VectorXd sa = sigmoid(a.col(0), p.c, p.steepness);
  const Eigen::VectorXd sb = sigmoid(b.col(0), p.c, p.steepness);
  const KernelParams left{Eigen::VectorXd::Constant(1, p.l_left), p.s_left, 0.0};
  const KernelParams right{Eigen::VectorXd::Constant(1, p.l_right), p.s_right, 0.0};
  const Eigen::MatrixXd ka = rbf_kernel(a, b, left);
  const Eigen::MatrixXd kb = rbf_kernel(a, b, right);
  const Eigen::VectorXd ua = 1.0 - sa.array();
  const Eigen::VectorXd ub = 1.0 - sb.array();
  return (ua * ub.transpose()).cwiseProduct(ka) + (sa * sb.transpose()).cwiseProduct(kb);
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const std::size_t k = std::min(i + 1, v.size() - 1);
  return v[i] + (pos - static_cast<double>(i)) * (v[k] - v[i]);
}

}  // namespace

MleFit gp_cp_mle(const PropertyDataset& data, const Domain& domain, const Eigen::MatrixXd& grid_points,
                 const ChangepointOptions& options) {
  if (domain.dim() != 1) throw ConfigError("GP-CP requires a 1-dimensional domain");
  if (data.size() < 2) throw DataError("GP-CP needs at least 2 points");
  MleFit out;
  out.algorithm = "gp-cp";
  const auto& dom = domain.bounds[0];
  const double w = dom.width();
  double sd = data_std(data.values);
  if (!(sd > 0.0)) {
    out.warnings.push_back("all property values are equal; noise settles at its lower bound");
    sd = 1.0;
  }

  // Free coordinates in optimizer space.
  struct Coord {
    std::string name;
    double lo, hi;
    bool log;
  };
  std::vector<Coord> coords = {{"lengthscale_left", 0.01 * w, 2.0 * w, true},
                               {"std_left", 0.01 * sd, 10.0 * sd, true}};
  if (!options.tie_kernels) {
    coords.push_back({"lengthscale_right", 0.01 * w, 2.0 * w, true});
    coords.push_back({"std_right", 0.01 * sd, 10.0 * sd, true});
  }
  const bool free_c = !options.fixed_changepoint.has_value();
  const bool free_gamma = !options.fixed_steepness.has_value();
  if (free_c) coords.push_back({"changepoint", dom.lo, dom.hi, false});
  if (free_gamma) coords.push_back({"steepness", 1.0 / w, 1e3 / w, true});
  coords.push_back({"noise", 1e-4 * sd, sd, true});

  const auto n = static_cast<Eigen::Index>(coords.size());
  Eigen::VectorXd lo(n), hi(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& c = coords[static_cast<std::size_t>(i)];
    lo[i] = c.log ? std::log(c.lo) : c.lo;
    hi[i] = c.log ? std::log(c.hi) : c.hi;
  }
  auto decode = [&](const Eigen::VectorXd& x) {
    CpParams p{};
    Eigen::Index i = 0;
    auto next = [&] {
      const auto& c = coords[static_cast<std::size_t>(i)];
      const double v = c.log ? std::exp(x[i]) : x[i];
      ++i;
      return v;
    };
    p.l_left = next();
    p.s_left = next();
    if (options.tie_kernels) {
      p.l_right = p.l_left;
      p.s_right = p.s_left;
    } else {
      p.l_right = next();
      p.s_right = next();
    }
    p.c = free_c ? next() : *options.fixed_changepoint;
    p.steepness = free_gamma ? next() : *options.fixed_steepness;
    p.noise = next();
    return p;
  };

  const double mean_const = data.values.mean();
  const Eigen::VectorXd centered = data.values.array() - mean_const;
  auto objective = [&](const Eigen::VectorXd& x) {
    const CpParams p = decode(x);
    try {
      return fit_gaussian(cp_kernel(data.points, data.points, p), p.noise, centered).log_marginal;
    } catch (const NumericalError&) {
      return -std::numeric_limits<double>::infinity();
    }
  };

  std::vector<double> xs(data.points.data(), data.points.data() + data.points.rows());
  std::vector<double> starts_c;
  if (free_c) {
    for (double q : {0.1, 0.3, 0.5, 0.7, 0.9}) starts_c.push_back(quantile(xs, q));
  } else {
    starts_c.push_back(0.0);
  }
  const Eigen::Index c_index = free_c ? (options.tie_kernels ? 2 : 4) : -1;

  Rng rng = make_rng(options.seed, 0xC0DE);
  Eigen::VectorXd best;
  double best_value = -std::numeric_limits<double>::infinity();
  for (double c0 : starts_c) {
    for (int s = 0; s <= options.random_starts_per_quantile; ++s) {
      Eigen::VectorXd x0 = s == 0 ? Eigen::VectorXd(0.5 * (lo + hi)) : uniform_point(rng, lo, hi);
      if (c_index >= 0) x0[c_index] = c0;
      out.start_log_marginals.push_back(objective(x0));
      double value;
      Eigen::VectorXd x = coordinate_ascent(objective, x0, lo, hi, value);
      if (value > best_value) {
        best_value = value;
        best = x;
      }
    }
  }
  const CpParams p = decode(best);
  out.log_marginal = best_value;
  out.noise = p.noise;
  out.changepoint = p.c;
  out.hyper = {{"lengthscale_left", p.l_left}, {"std_left", p.s_left}, {"lengthscale_right", p.l_right},
               {"std_right", p.s_right},       {"changepoint", p.c},    {"steepness", p.steepness},
               {"noise", p.noise}};
  const auto fit = fit_gaussian(cp_kernel(data.points, data.points, p), p.noise, centered);
  const Eigen::MatrixXd k_cross = cp_kernel(data.points, grid_points, p);
  Eigen::VectorXd k_diag(grid_points.rows());
  for (Eigen::Index g = 0; g < grid_points.rows(); ++g) {
    k_diag[g] = cp_kernel(grid_points.row(g), grid_points.row(g), p)(0, 0);
  }
  predict(fit, k_cross, k_diag, mean_const, out);
  out.probs = Eigen::MatrixXd::Zero(grid_points.rows(), 2);
  for (Eigen::Index g = 0; g < grid_points.rows(); ++g) out.probs(g, grid_points(g, 0) <= p.c ? 0 : 1) = 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Laplace multi-class classification

namespace {

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& f) {
  Eigen::MatrixXd p(f.rows(), f.cols());
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const Eigen::RowVectorXd e = (f.row(i).array() - f.row(i).maxCoeff()).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

double log_sum_exp_rows(const Eigen::MatrixXd& f) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const double m = f.row(i).maxCoeff();
    s += m + std::log((f.row(i).array() - m).exp().sum());
  }
  return s;
}

struct LaplaceFit {
  Eigen::MatrixXd f;   // n x C latent mode
  Eigen::MatrixXd pi;  // n x C
  double log_marginal;
};

// Newton iterations for the posterior mode of the latent values with one
// shared covariance K across classes; returns the Laplace log marginal.
LaplaceFit laplace_multiclass(const Eigen::MatrixXd& k, const Eigen::MatrixXd& y) {
  const Eigen::Index n = k.rows();
  const Eigen::Index classes = y.cols();
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(n, classes);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, classes);
  auto psi = [&](const Eigen::MatrixXd& a_, const Eigen::MatrixXd& f_) {
    return -0.5 * (a_.array() * f_.array()).sum() + (y.array() * f_.array()).sum() - log_sum_exp_rows(f_);
  };
  double obj = psi(a, f);
  std::vector<Eigen::MatrixXd> e(static_cast<std::size_t>(classes));
  double zsum = 0.0;

  auto linearize = [&](const Eigen::MatrixXd& pi) {
    zsum = 0.0;
    for (Eigen::Index c = 0; c < classes; ++c) {
      const Eigen::VectorXd sd = pi.col(c).cwiseSqrt();
      Eigen::MatrixXd b = sd.asDiagonal() * k * sd.asDiagonal();
      b.diagonal().array() += 1.0;
      Eigen::LLT<Eigen::MatrixXd> llt(b);
      const Eigen::MatrixXd lower = llt.matrixL();
      zsum += lower.diagonal().array().log().sum();
      e[static_cast<std::size_t>(c)] = sd.asDiagonal() * llt.solve(Eigen::MatrixXd(sd.asDiagonal()));
    }
  };

  for (int iter = 0; iter < 100; ++iter) {
    const Eigen::MatrixXd pi = softmax_rows(f);
    linearize(pi);
    Eigen::MatrixXd esum = Eigen::MatrixXd::Zero(n, n);
    for (const auto& ec : e) esum += ec;
    Eigen::LLT<Eigen::MatrixXd> m(esum);
    const Eigen::VectorXd pif = (pi.array() * f.array()).rowwise().sum();
    const Eigen::MatrixXd b = (pi.array() * f.array()) - (pi.array().colwise() * pif.array()) +
                              y.array() - pi.array();
    Eigen::MatrixXd cmat(n, classes);
    Eigen::VectorXd rc = Eigen::VectorXd::Zero(n);
    for (Eigen::Index c = 0; c < classes; ++c) {
      cmat.col(c) = e[static_cast<std::size_t>(c)] * (k * b.col(c));
      rc += cmat.col(c);
    }
    const Eigen::VectorXd s = m.solve(rc);
    Eigen::MatrixXd a_new(n, classes);
    for (Eigen::Index c = 0; c < classes; ++c) {
      a_new.col(c) = b.col(c) - cmat.col(c) + e[static_cast<std::size_t>(c)] * s;
    }
    Eigen::MatrixXd f_new = k * a_new;
    double obj_new = psi(a_new, f_new);
    for (int halve = 0; halve < 20 && obj_new < obj; ++halve) {
      a_new = 0.5 * (a_new + a);
      f_new = k * a_new;
      obj_new = psi(a_new, f_new);
    }
    const double change = obj_new - obj;
    a = std::move(a_new);
    f = std::move(f_new);
    obj = obj_new;
    if (std::abs(change) < 1e-10) break;
  }
  LaplaceFit out;
  out.pi = softmax_rows(f);
  linearize(out.pi);
  out.f = std::move(f);
  out.log_marginal = obj - zsum;
  return out;
}

}  // namespace

MleFit gp_classification_mle(std::span<const StructureDataset> data, int regions, const Domain& domain,
                             const Eigen::MatrixXd& grid_points, const ClassificationOptions& options) {
  if (regions < 1) throw ConfigError("region count must be >= 1");
  const Eigen::Index dim = domain.dim();
  std::vector<Eigen::RowVectorXd> pts;
  std::vector<int> labels;
  for (const auto& ds : data) {
    for (Eigen::Index i = 0; i < ds.points.rows(); ++i) {
      pts.push_back(ds.points.row(i));
      labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    }
  }
  if (pts.empty()) throw DataError("GP classification needs at least one structure observation");
  const auto n = static_cast<Eigen::Index>(pts.size());
  Eigen::MatrixXd x(n, dim);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, regions);
  for (Eigen::Index i = 0; i < n; ++i) {
    x.row(i) = pts[static_cast<std::size_t>(i)];
    const int l = labels[static_cast<std::size_t>(i)];
    if (l < 0 || l >= regions) throw DataError("structure label outside [0, R)");
    y(i, l) = 1.0;
  }

  MleFit out;
  out.algorithm = "gp-class";
  const std::set<int> observed(labels.begin(), labels.end());
  if (observed.size() == 1) {
    out.warnings.push_back("only one class observed; returning a constant classifier");
    out.probs = Eigen::MatrixXd::Zero(grid_points.rows(), regions);
    out.probs.col(*observed.begin()).setOnes();
    out.log_marginal = 0.0;
    return out;
  }

  Eigen::VectorXd lo(dim + 1), hi(dim + 1);
  for (Eigen::Index d = 0; d < dim; ++d) {
    const double w = domain.bounds[static_cast<std::size_t>(d)].width();
    lo[d] = std::log(0.01 * w);
    hi[d] = std::log(2.0 * w);
  }
  lo[dim] = std::log(0.1);
  hi[dim] = std::log(20.0);
  auto decode = [&](const Eigen::VectorXd& v) {
    return KernelParams{v.head(dim).array().exp(), std::exp(v[dim]), 0.0};
  };
  auto covariance = [&](const KernelParams& kp) {
    Eigen::MatrixXd k = rbf_kernel(x, x, kp);
    k.diagonal().array() += 1e-8 * kp.std * kp.std;
    return k;
  };
  auto objective = [&](const Eigen::VectorXd& v) {
    const double lm = laplace_multiclass(covariance(decode(v)), y).log_marginal;
    return std::isfinite(lm) ? lm : -std::numeric_limits<double>::infinity();
  };

  Rng rng = make_rng(options.seed, 0xC1A55);
  Eigen::VectorXd best;
  double best_value = -std::numeric_limits<double>::infinity();
  for (int s = 0; s < std::max(1, options.restarts); ++s) {
    Eigen::VectorXd v0 = s == 0 ? Eigen::VectorXd(0.5 * (lo + hi)) : uniform_point(rng, lo, hi);
    out.start_log_marginals.push_back(objective(v0));
    double value;
    Eigen::VectorXd v = coordinate_ascent(objective, v0, lo, hi, value, 200, 1e-4);
    if (value > best_value) {
      best_value = value;
      best = v;
    }
  }
  const KernelParams kp = decode(best);
  const auto fit = laplace_multiclass(covariance(kp), y);
  const Eigen::MatrixXd k_cross = rbf_kernel(grid_points, x, kp);  // G x n
  out.probs = softmax_rows(k_cross * (y - fit.pi));
  out.log_marginal = best_value;
  for (Eigen::Index d = 0; d < dim; ++d) out.hyper["lengthscale_" + std::to_string(d + 1)] = kp.lengthscales[d];
  out.hyper["std"] = kp.std;
  return out;
}

}  // namespace sage
