#include "sage/property_model.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "sage/error.hpp"

namespace sage {

std::vector<std::vector<Eigen::VectorXd>> sample_region_gps(const PropertyParams& params,
                                                            const Eigen::MatrixXd& points,
                                                            double base_jitter) {
  std::vector<std::vector<Eigen::VectorXd>> out(params.components.size());
  for (std::size_t j = 0; j < params.components.size(); ++j) {
    for (std::size_t r = 0; r < params.components[j].size(); ++r) {
      const auto& comp = params.components[j][r];
      const std::string label = "property " + std::to_string(j) + " region " + std::to_string(r);
      const auto chol = cholesky_with_jitter(rbf_kernel(points, points, comp.hyper), base_jitter, label);
      if (comp.whitened.size() != points.rows()) {
        throw ConfigError("whitened vector length does not match the grid for " + label);
      }
      out[j].push_back(whitened_gp_sample(
          Eigen::VectorXd::Constant(points.rows(), comp.hyper.bias), chol.lower, comp.whitened));
    }
  }
  return out;
}

PiecewiseFunction piecewise_mix(std::vector<std::vector<Eigen::VectorXd>> components,
                                const RegionField& field) {
  PiecewiseFunction fn;
  for (const auto& per_region : components) {
    if (static_cast<int>(per_region.size()) != field.regions()) {
      throw ConfigError("piecewise mix: component count does not match region count");
    }
    Eigen::VectorXd f = Eigen::VectorXd::Zero(field.size());
    for (std::size_t r = 0; r < per_region.size(); ++r) {
      if (per_region[r].size() != field.size()) {
        throw ConfigError("piecewise mix: component length does not match the field");
      }
      f.array() += per_region[r].array() * field.probs.col(static_cast<Eigen::Index>(r)).array();
    }
    fn.values.push_back(std::move(f));
  }
  fn.components = std::move(components);
  return fn;
}

std::vector<std::vector<ValueObservation>> resolve_values(
    const PredictionGrid& grid, std::span<const PropertyDataset> datasets) {
  std::vector<std::vector<ValueObservation>> out;
  for (const auto& ds : datasets) {
    std::vector<ValueObservation> obs;
    for (Eigen::Index l = 0; l < ds.points.rows(); ++l) {
      const auto idx = grid.find(ds.points.row(l));
      if (!idx) {
        throw DataError("property point from source '" + ds.source_id + "' is not on the grid");
      }
      obs.push_back({*idx, ds.values[l]});
    }
    out.push_back(std::move(obs));
  }
  return out;
}

double gaussian_log_density(double y, double mean, double sd) {
  const double z = (y - mean) / sd;
  return -0.5 * std::log(2.0 * std::numbers::pi * sd * sd) - 0.5 * z * z;
}

double property_log_likelihood(std::span<const Eigen::VectorXd> values,
                               std::span<const double> noise,
                               std::span<const std::vector<ValueObservation>> observations) {
  if (values.size() != observations.size() || noise.size() != observations.size()) {
    throw ConfigError("property likelihood: source counts disagree");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < observations.size(); ++j) {
    for (const auto& o : observations[j]) {
      total += gaussian_log_density(o.value, values[j][o.index], noise[j]);
    }
  }
  return total;
}

double property_log_likelihood(const PiecewiseFunction& fn, const PropertyParams& params,
                               const PredictionGrid& grid,
                               std::span<const PropertyDataset> datasets) {
  const auto obs = resolve_values(grid, datasets);
  return property_log_likelihood(fn.values, params.noise, obs);
}

double total_log_likelihood(double log_lik_structure, double log_lik_property,
                            LikelihoodTerms terms) {
  switch (terms) {
    case LikelihoodTerms::StructureOnly:
      return log_lik_structure;
    case LikelihoodTerms::PropertyOnly:
      return log_lik_property;
    case LikelihoodTerms::Joint:
      break;
  }
  if (log_lik_structure == kNegInf || log_lik_property == kNegInf) return kNegInf;
  return log_lik_structure + log_lik_property;
}

namespace {

// Rows of the observation map: A_r = diag(p_r[S]) L_r[S, :].
std::vector<Eigen::MatrixXd> observation_maps(const AnchoredSource& s) {
  const auto n = static_cast<Eigen::Index>(s.observations.size());
  std::vector<Eigen::MatrixXd> maps;
  for (std::size_t r = 0; r < s.factors.size(); ++r) {
    const Eigen::MatrixXd& lower = *s.factors[r];
    Eigen::MatrixXd a(n, lower.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto idx = s.observations[static_cast<std::size_t>(i)].index;
      a.row(i) = (*s.probs)(idx, static_cast<Eigen::Index>(r)) * lower.row(idx);
    }
    maps.push_back(std::move(a));
  }
  return maps;
}

struct MarginalParts {
  Eigen::VectorXd residual;  // y - mean
  Eigen::LLT<Eigen::MatrixXd> llt;
};

MarginalParts marginal_parts(const AnchoredSource& s, const std::vector<Eigen::MatrixXd>& maps) {
  const auto n = static_cast<Eigen::Index>(s.observations.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(n, n) * (s.noise * s.noise);
  Eigen::VectorXd resid(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& o = s.observations[static_cast<std::size_t>(i)];
    double mean = 0.0;
    for (std::size_t r = 0; r < s.bias.size(); ++r) {
      mean += (*s.probs)(o.index, static_cast<Eigen::Index>(r)) * s.bias[r];
    }
    resid[i] = o.value - mean;
  }
  for (const auto& a : maps) cov.noalias() += a * a.transpose();
  MarginalParts parts{std::move(resid), Eigen::LLT<Eigen::MatrixXd>(cov)};
  if (parts.llt.info() != Eigen::Success) {
    throw NumericalError("marginal property covariance is not positive definite");
  }
  return parts;
}

}  // namespace

double marginal_property_log_likelihood(const AnchoredSource& source) {
  if (source.observations.empty()) return 0.0;
  const auto maps = observation_maps(source);
  const auto parts = marginal_parts(source, maps);
  const auto n = static_cast<double>(source.observations.size());
  const Eigen::MatrixXd lower = parts.llt.matrixL();
  const Eigen::VectorXd z = lower.triangularView<Eigen::Lower>().solve(parts.residual);
  const double logdet = 2.0 * lower.diagonal().array().log().sum();
  return -0.5 * (z.squaredNorm() + logdet + n * std::log(2.0 * std::numbers::pi));
}

std::vector<Eigen::VectorXd> conditional_whitened_draw(const AnchoredSource& source, Rng& rng) {
  std::vector<Eigen::VectorXd> draws;
  for (const auto* f : source.factors) draws.push_back(standard_normal_vector(rng, f->cols()));
  if (source.observations.empty()) return draws;

  // Pathwise update: v = v0 + A^T C^-1 (y - m - A v0 - e), e ~ N(0, n^2 I).
  const auto maps = observation_maps(source);
  const auto parts = marginal_parts(source, maps);
  Eigen::VectorXd target = parts.residual;
  for (Eigen::Index i = 0; i < target.size(); ++i) target[i] -= source.noise * standard_normal(rng);
  for (std::size_t r = 0; r < maps.size(); ++r) target.noalias() -= maps[r] * draws[r];
  const Eigen::VectorXd w = parts.llt.solve(target);
  for (std::size_t r = 0; r < maps.size(); ++r) draws[r].noalias() += maps[r].transpose() * w;
  return draws;
}

}  // namespace sage
