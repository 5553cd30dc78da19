#pragma once

#include <Eigen/Dense>
#include <string>

namespace sage {

// Hyperparameters of a stationary covariance function. Lengthscales are per
// input dimension (ARD form). `bias` is the constant mean of property GPs in
// N dimensions; it plays no role in the covariance itself.
struct KernelParams {
  Eigen::VectorXd lengthscales;
  double std = 1.0;
  double bias = 0.0;

  // Throws ConfigError unless every lengthscale and std is positive and finite.
  void validate(Eigen::Index dim) const;
};

// std^2 * exp(-0.5 * sum_d ((a_d - b_d) / l_d)^2)
Eigen::MatrixXd rbf_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                           const KernelParams& params);

// std^2 * (1 + sqrt5 r + 5 r^2 / 3) exp(-sqrt5 r), r the lengthscale-scaled
// Euclidean distance.
Eigen::MatrixXd matern52_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                const KernelParams& params);

struct CholeskyResult {
  Eigen::MatrixXd lower;
  double jitter = 0.0;
};

inline constexpr double kDefaultBaseJitter = 1e-6;
inline constexpr int kJitterAttempts = 7;

// Factors K + eps*I with eps taken from the ladder
// {0, base*m, base*m*10, ..., base*m*1e6}, where m is the mean diagonal
// magnitude of K (1 if that is zero), or `scale` when positive. Throws
// NumericalError naming `label` when even the largest jitter fails.
CholeskyResult cholesky_with_jitter(const Eigen::MatrixXd& k,
                                    double base_jitter = kDefaultBaseJitter,
                                    const std::string& label = "kernel", double scale = 0.0);

// mean + L * v
Eigen::VectorXd whitened_gp_sample(const Eigen::VectorXd& mean, const Eigen::MatrixXd& lower,
                                   const Eigen::VectorXd& whitened);

}  // namespace sage
