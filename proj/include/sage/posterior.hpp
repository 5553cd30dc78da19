#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sage/inference.hpp"

namespace sage {

struct PosteriorSummary {
  Eigen::MatrixXd p_mean;               // G x R, posterior-mean categorical
  std::vector<int> phase_estimate;      // argmax, ties to the lowest label
  Eigen::VectorXd phase_entropy;        // natural log
  std::vector<Eigen::VectorXd> mu_hat;     // per property source
  std::vector<Eigen::VectorXd> sigma_hat;  // sample std (n - 1), 0 for one sample
  std::vector<Eigen::VectorXd> noise_hat;  // mean noise std, broadcast over the grid
  std::size_t samples = 0;
};

// Streaming accumulation of per-sample grid states.
class SummaryAccumulator {
 public:
  void add(const GridState& s);
  PosteriorSummary finish() const;

 private:
  std::size_t count_ = 0;
  Eigen::MatrixXd prob_sum_;
  std::vector<Eigen::VectorXd> mean_, m2_;
  std::vector<double> noise_sum_;
};

PosteriorSummary summarize(std::span<const GridState> samples);
PosteriorSummary summarize(const SageModel& model, const Chain& chain);

// Row-wise argmax with ties to the lowest index.
std::vector<int> argmax_rows(const Eigen::MatrixXd& probs);

// Inverse of the standard normal CDF.
double normal_quantile(double p);

struct Interval1D {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;
};

// mu +/- z * (sigma + noise) by default; sqrt(sigma^2 + noise^2) when
// variance_sum is set.
Interval1D predictive_interval(const PosteriorSummary& summary, std::size_t source,
                               double coverage, bool variance_sum = false);

struct ChangepointPosterior {
  std::vector<std::vector<double>> samples;  // per changepoint, in chain order
  std::vector<double> edges;                 // bins + 1 edges over the domain
  std::vector<long> counts;                  // all changepoints pooled
};

ChangepointPosterior changepoint_posterior_1d(const Chain& chain, const Interval& domain,
                                              int bins = 50);

// W1 distance between two empirical distributions on the line.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

// Grid CSV: header x1..xd followed by `columns`, rows sorted by coordinate
// with x1 varying fastest, values printed with 17 significant digits.
void write_grid_csv(const std::filesystem::path& path, const Eigen::MatrixXd& points,
                    const std::vector<std::string>& columns, const Eigen::MatrixXd& values);

}  // namespace sage
