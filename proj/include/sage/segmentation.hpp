#pragma once

#include <Eigen/Dense>
#include <limits>
#include <span>
#include <vector>

#include "sage/data.hpp"
#include "sage/kernels.hpp"

namespace sage {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// R-1 sorted phase boundaries on a 1-D domain.
struct Changepoints1D {
  std::vector<double> values;

  int regions() const { return static_cast<int>(values.size()) + 1; }
  // Strictly increasing and inside [lo, hi].
  bool valid(const Interval& domain) const;
};

// Number of changepoints strictly below x; a point on a boundary belongs to
// the lower region.
int membership_1d(const Changepoints1D& cp, double x);

// G x R row-stochastic matrix of region probabilities over grid points.
struct RegionField {
  Eigen::MatrixXd probs;

  Eigen::Index size() const { return probs.rows(); }
  int regions() const { return static_cast<int>(probs.cols()); }
};

// One-hot rows from membership_1d on the first coordinate of `points`.
RegionField region_field_1d(const Changepoints1D& cp, const Eigen::MatrixXd& points);

// R latent functions evaluated on the grid: values = chol(K_matern + eps I) * whitened.
struct LatentFieldsND {
  KernelParams hyper;
  Eigen::MatrixXd whitened;  // G x R
  Eigen::MatrixXd values;    // G x R
};

LatentFieldsND make_latent_fields(const Eigen::MatrixXd& points, const KernelParams& hyper,
                                  Eigen::MatrixXd whitened,
                                  double base_jitter = kDefaultBaseJitter);

// Row-wise softmax with max subtraction.
RegionField softmax_region_field(const Eigen::MatrixXd& latent_values);
inline RegionField softmax_region_field(const LatentFieldsND& latent) {
  return softmax_region_field(latent.values);
}

// A structure observation resolved to a grid row.
struct LabelObservation {
  Eigen::Index index;
  int label;
};

std::vector<LabelObservation> resolve_labels(const PredictionGrid& grid,
                                             std::span<const StructureDataset> datasets);

// Sum of ln p(label | x) over observations. A probability of exactly zero
// yields -inf, unless `label_noise_floor` > 0, in which case probabilities are
// floored at that value.
double structure_log_likelihood(const Eigen::MatrixXd& probs,
                                std::span<const LabelObservation> observations,
                                double label_noise_floor = 0.0);

double structure_log_likelihood(const RegionField& field, const PredictionGrid& grid,
                                std::span<const StructureDataset> datasets,
                                double label_noise_floor = 0.0);

// Shannon entropy (natural log) of each row, with 0 ln 0 = 0.
Eigen::VectorXd row_entropy(const Eigen::MatrixXd& probs);

}  // namespace sage
