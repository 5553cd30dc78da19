#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sage/data.hpp"

namespace sage {

// Result of a maximum-marginal-likelihood comparator fit.
struct MleFit {
  std::string algorithm;
  std::map<std::string, double> hyper;
  double log_marginal = 0.0;
  // Regression fits: latent predictive mean/std and noise std on the grid.
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
  double noise = 0.0;
  // Phase predictions (classification and changepoint fits): G x R.
  Eigen::MatrixXd probs;
  std::optional<double> changepoint;
  // Objective at each restart's starting point.
  std::vector<double> start_log_marginals;
  std::vector<std::string> warnings;
};

// Maximizes f over the box [lower, upper] by coordinate descent with
// adaptive per-coordinate steps. Returns the best point; `value` receives f there.
Eigen::VectorXd coordinate_ascent(const std::function<double(const Eigen::VectorXd&)>& f,
                                  Eigen::VectorXd x, const Eigen::VectorXd& lower,
                                  const Eigen::VectorXd& upper, double& value,
                                  int max_sweeps = 300, double tol = 1e-5);

struct RegressionOptions {
  int restarts = 16;
  std::uint64_t seed = 0;
};

// RBF + Gaussian noise GP, constant mean at the data mean, hyperparameters
// (ARD lengthscales, std, noise) maximizing the log marginal likelihood.
MleFit gp_regression_mle(const PropertyDataset& data, const Domain& domain,
                         const Eigen::MatrixXd& grid_points, const RegressionOptions& options = {});

// Log marginal likelihood of the RBF regression model at given hyperparameters.
double gp_regression_log_marginal(const PropertyDataset& data, const Eigen::VectorXd& lengthscales,
                                  double std, double noise);

struct ChangepointOptions {
  std::optional<double> fixed_changepoint;
  std::optional<double> fixed_steepness;
  bool tie_kernels = false;
  int random_starts_per_quantile = 2;
  std::uint64_t seed = 0;
};

// Changepoint kernel k = (1-s(x))(1-s(x')) k_left + s(x)s(x') k_right with
// s(x) = 1 / (1 + exp(-steepness (x - c))) and RBF k_left, k_right. Starts
// with c at the 10/30/50/70/90% quantiles of x. Labels x <= c as phase 0.
MleFit gp_cp_mle(const PropertyDataset& data, const Domain& domain,
                 const Eigen::MatrixXd& grid_points, const ChangepointOptions& options = {});

struct ClassificationOptions {
  int restarts = 4;
  std::uint64_t seed = 0;
};

// One latent GP per class with a softmax link and shared RBF hyperparameters
// chosen by maximizing the Laplace-approximate marginal likelihood.
MleFit gp_classification_mle(std::span<const StructureDataset> data, int regions,
                             const Domain& domain, const Eigen::MatrixXd& grid_points,
                             const ClassificationOptions& options = {});

}  // namespace sage
