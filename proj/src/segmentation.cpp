#include "sage/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sage/error.hpp"

namespace sage {

bool Changepoints1D::valid(const Interval& domain) const {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= domain.lo && values[i] <= domain.hi)) return false;
    if (i > 0 && !(values[i] > values[i - 1])) return false;
  }
  return true;
}

int membership_1d(const Changepoints1D& cp, double x) {
  // lower_bound finds the first changepoint >= x, so everything before it is < x.
  return static_cast<int>(std::lower_bound(cp.values.begin(), cp.values.end(), x) -
                          cp.values.begin());
}

RegionField region_field_1d(const Changepoints1D& cp, const Eigen::MatrixXd& points) {
  if (points.rows() > 0 && points.cols() != 1) {
    throw ConfigError("changepoint segmentation needs 1-D points");
  }
  RegionField field;
  field.probs = Eigen::MatrixXd::Zero(points.rows(), cp.regions());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    field.probs(i, membership_1d(cp, points(i, 0))) = 1.0;
  }
  return field;
}

LatentFieldsND make_latent_fields(const Eigen::MatrixXd& points, const KernelParams& hyper,
                                  Eigen::MatrixXd whitened, double base_jitter) {
  if (whitened.rows() != points.rows()) {
    throw ConfigError("latent whitened vectors must have one row per grid point");
  }
  const auto chol =
      cholesky_with_jitter(matern52_kernel(points, points, hyper), base_jitter, "segmentation Matern 5/2");
  LatentFieldsND out;
  out.hyper = hyper;
  out.values = chol.lower.triangularView<Eigen::Lower>() * whitened;
  out.whitened = std::move(whitened);
  return out;
}

RegionField softmax_region_field(const Eigen::MatrixXd& latent_values) {
  RegionField field;
  field.probs.resize(latent_values.rows(), latent_values.cols());
  for (Eigen::Index i = 0; i < latent_values.rows(); ++i) {
    const double m = latent_values.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (latent_values.row(i).array() - m).exp();
    field.probs.row(i) = e / e.sum();
  }
  return field;
}

std::vector<LabelObservation> resolve_labels(const PredictionGrid& grid,
                                             std::span<const StructureDataset> datasets) {
  std::vector<LabelObservation> obs;
  for (const auto& ds : datasets) {
    for (Eigen::Index k = 0; k < ds.points.rows(); ++k) {
      const auto idx = grid.find(ds.points.row(k));
      if (!idx) {
        throw DataError("structure point from source '" + ds.source_id + "' is not on the grid");
      }
      obs.push_back({*idx, ds.labels[static_cast<std::size_t>(k)]});
    }
  }
  return obs;
}

double structure_log_likelihood(const Eigen::MatrixXd& probs,
                                std::span<const LabelObservation> observations,
                                double label_noise_floor) {
  double total = 0.0;
  for (const auto& o : observations) {
    if (o.label < 0 || o.label >= probs.cols()) {
      std::ostringstream msg;
      msg << "structure label " << o.label << " is outside [0, " << probs.cols() << ")";
      throw DataError(msg.str());
    }
    double p = probs(o.index, o.label);
    if (label_noise_floor > 0.0) p = std::max(p, label_noise_floor);
    if (p <= 0.0) return kNegInf;
    total += std::log(p);
  }
  return total;
}

double structure_log_likelihood(const RegionField& field, const PredictionGrid& grid,
                                std::span<const StructureDataset> datasets,
                                double label_noise_floor) {
  const auto obs = resolve_labels(grid, datasets);
  return structure_log_likelihood(field.probs, obs, label_noise_floor);
}

Eigen::VectorXd row_entropy(const Eigen::MatrixXd& probs) {
  Eigen::VectorXd h(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double s = 0.0;
    for (Eigen::Index r = 0; r < probs.cols(); ++r) {
      const double p = probs(i, r);
      if (p > 0.0) s -= p * std::log(p);
    }
    h[i] = std::clamp(s, 0.0, std::log(static_cast<double>(probs.cols())));
  }
  return h;
}

}  // namespace sage
