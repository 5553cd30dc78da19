#include "sage/kernels.hpp"

#include <cmath>
#include <sstream>

#include "sage/error.hpp"

namespace sage {

void KernelParams::validate(Eigen::Index dim) const {
  if (lengthscales.size() != dim) {
    std::ostringstream msg;
    msg << "kernel has " << lengthscales.size() << " lengthscales for " << dim
        << "-dimensional inputs";
    throw ConfigError(msg.str());
  }
  for (Eigen::Index d = 0; d < dim; ++d) {
    if (!(lengthscales[d] > 0.0) || !std::isfinite(lengthscales[d])) {
      throw ConfigError("kernel lengthscales must be positive and finite");
    }
  }
  if (!(std > 0.0) || !std::isfinite(std)) {
    throw ConfigError("kernel std must be positive and finite");
  }
}

namespace {

void check_inputs(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                  const KernelParams& params) {
  if (a.cols() != b.cols()) {
    throw ConfigError("kernel inputs have different dimensions");
  }
  params.validate(a.cols());
}

// Squared lengthscale-scaled distances between rows of a and b.
Eigen::MatrixXd scaled_sq_dist(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                               const Eigen::VectorXd& lengthscales) {
  const Eigen::RowVectorXd inv = lengthscales.cwiseInverse().transpose();
  const Eigen::MatrixXd as = a.array().rowwise() * inv.array();
  const Eigen::MatrixXd bs = b.array().rowwise() * inv.array();
  Eigen::MatrixXd d2(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      d2(i, j) = (as.row(i) - bs.row(j)).squaredNorm();
    }
  }
  return d2;
}

}  // namespace

Eigen::MatrixXd rbf_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                           const KernelParams& params) {
  check_inputs(a, b, params);
  const double var = params.std * params.std;
  return (scaled_sq_dist(a, b, params.lengthscales).array() * -0.5).exp() * var;
}

Eigen::MatrixXd matern52_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                const KernelParams& params) {
  check_inputs(a, b, params);
  const double var = params.std * params.std;
  const double sqrt5 = std::sqrt(5.0);
  Eigen::MatrixXd k = scaled_sq_dist(a, b, params.lengthscales);
  for (Eigen::Index j = 0; j < k.cols(); ++j) {
    for (Eigen::Index i = 0; i < k.rows(); ++i) {
      const double r = std::sqrt(k(i, j));
      k(i, j) = var * (1.0 + sqrt5 * r + 5.0 * r * r / 3.0) * std::exp(-sqrt5 * r);
    }
  }
  return k;
}

CholeskyResult cholesky_with_jitter(const Eigen::MatrixXd& k, double base_jitter,
                                    const std::string& label, double scale) {
  if (k.rows() != k.cols()) {
    throw ConfigError("cholesky of non-square matrix for " + label);
  }
  if (!(base_jitter > 0.0)) {
    throw ConfigError("base jitter must be positive");
  }
  const Eigen::Index n = k.rows();
  if (n == 0) return {Eigen::MatrixXd(0, 0), 0.0};
  if (!(scale > 0.0)) scale = k.diagonal().cwiseAbs().mean();
  if (!(scale > 0.0) || !std::isfinite(scale)) scale = 1.0;

  double jitter = 0.0;
  for (int attempt = 0; attempt <= kJitterAttempts; ++attempt) {
    if (attempt > 0) jitter = base_jitter * scale * std::pow(10.0, attempt - 1);
    Eigen::MatrixXd shifted = k;
    shifted.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(shifted);
    if (llt.info() == Eigen::Success) {
      Eigen::MatrixXd lower = llt.matrixL();
      if (lower.allFinite()) return {std::move(lower), jitter};
    }
  }
  std::ostringstream msg;
  msg << "cholesky failed for " << label << " (" << n << "x" << n
      << ") even with jitter " << jitter;
  throw NumericalError(msg.str());
}

Eigen::VectorXd whitened_gp_sample(const Eigen::VectorXd& mean, const Eigen::MatrixXd& lower,
                                   const Eigen::VectorXd& whitened) {
  if (lower.rows() != mean.size() || lower.cols() != whitened.size()) {
    throw ConfigError("whitened GP sample: shape mismatch");
  }
  return mean + lower.triangularView<Eigen::Lower>() * whitened;
}

}  // namespace sage
