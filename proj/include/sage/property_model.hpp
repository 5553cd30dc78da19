#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "sage/data.hpp"
#include "sage/kernels.hpp"
#include "sage/random.hpp"
#include "sage/segmentation.hpp"

namespace sage {

// Kernel hyperparameters and whitened vector for one (property j, region r)
// GP. In 1-D models the bias is held at zero.
struct PropertyComponent {
  KernelParams hyper;
  Eigen::VectorXd whitened;
};

struct PropertyParams {
  std::vector<std::vector<PropertyComponent>> components;  // [j][r]
  std::vector<double> noise;                               // per j, standard deviation

  std::size_t sources() const { return noise.size(); }
};

// f_{p,j} = sum_r f_{p,j,r} * p_r over the grid.
struct PiecewiseFunction {
  std::vector<Eigen::VectorXd> values;                   // [j], length G
  std::vector<std::vector<Eigen::VectorXd>> components;  // [j][r], length G
};

// f_{p,j,r} = bias + chol(K_rbf + eps I) * v_{j,r} for every (j, r). Whitened
// vectors must have one entry per grid point.
std::vector<std::vector<Eigen::VectorXd>> sample_region_gps(
    const PropertyParams& params, const Eigen::MatrixXd& points,
    double base_jitter = kDefaultBaseJitter);

PiecewiseFunction piecewise_mix(std::vector<std::vector<Eigen::VectorXd>> components,
                                const RegionField& field);

struct ValueObservation {
  Eigen::Index index;
  double value;
};

// Per property source, observations resolved to grid rows.
std::vector<std::vector<ValueObservation>> resolve_values(
    const PredictionGrid& grid, std::span<const PropertyDataset> datasets);

// ln N(y; f(x), n^2) for one observation.
double gaussian_log_density(double y, double mean, double sd);

// Sum over sources and observations of ln N(y; f_j(x), n_j^2).
double property_log_likelihood(std::span<const Eigen::VectorXd> values,
                               std::span<const double> noise,
                               std::span<const std::vector<ValueObservation>> observations);

double property_log_likelihood(const PiecewiseFunction& fn, const PropertyParams& params,
                               const PredictionGrid& grid,
                               std::span<const PropertyDataset> datasets);

enum class LikelihoodTerms { Joint, StructureOnly, PropertyOnly };

// L = L_s + L_p, or one term alone for the ablation models. -inf propagates.
double total_log_likelihood(double log_lik_structure, double log_lik_property,
                            LikelihoodTerms terms = LikelihoodTerms::Joint);

// The property GPs of one source j seen only through their values at the
// anchor points: f_j(anchor a) = sum_r p_r(a) (b_r + (L_r v_r)(a)).
struct AnchoredSource {
  const Eigen::MatrixXd* probs;                  // anchors x R
  std::vector<const Eigen::MatrixXd*> factors;   // per r, anchors x anchors lower factor
  std::vector<double> bias;                      // per r
  double noise;
  std::span<const ValueObservation> observations;
};

// ln p(y_j | hyperparameters, field) with the whitened vectors integrated out.
double marginal_property_log_likelihood(const AnchoredSource& source);

// Exact draw of the whitened anchor vectors (one per region) from their
// Gaussian conditional given y_j.
std::vector<Eigen::VectorXd> conditional_whitened_draw(const AnchoredSource& source, Rng& rng);

}  // namespace sage
