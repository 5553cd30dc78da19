#include "sage/posterior.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "sage/error.hpp"

namespace sage {

void SummaryAccumulator::add(const GridState& s) {
  if (count_ == 0) {
    prob_sum_ = Eigen::MatrixXd::Zero(s.field.probs.rows(), s.field.probs.cols());
    const auto g = s.field.probs.rows();
    mean_.assign(s.property.values.size(), Eigen::VectorXd::Zero(g));
    m2_.assign(s.property.values.size(), Eigen::VectorXd::Zero(g));
    noise_sum_.assign(s.noise.size(), 0.0);
  }
  ++count_;
  prob_sum_ += s.field.probs;
  // Welford update
  const double n = static_cast<double>(count_);
  for (std::size_t j = 0; j < mean_.size(); ++j) {
    const Eigen::VectorXd delta = s.property.values[j] - mean_[j];
    mean_[j] += delta / n;
    m2_[j].array() += delta.array() * (s.property.values[j] - mean_[j]).array();
  }
  for (std::size_t j = 0; j < noise_sum_.size(); ++j) noise_sum_[j] += s.noise[j];
}

PosteriorSummary SummaryAccumulator::finish() const {
  if (count_ == 0) throw InferenceError("cannot summarize an empty chain");
  PosteriorSummary out;
  const double n = static_cast<double>(count_);
  out.samples = count_;
  out.p_mean = prob_sum_ / n;
  // Keep rows exactly stochastic after averaging.
  for (Eigen::Index i = 0; i < out.p_mean.rows(); ++i) out.p_mean.row(i) /= out.p_mean.row(i).sum();
  out.phase_estimate = argmax_rows(out.p_mean);
  out.phase_entropy = row_entropy(out.p_mean);
  for (std::size_t j = 0; j < mean_.size(); ++j) {
    out.mu_hat.push_back(mean_[j]);
    if (count_ > 1) {
      out.sigma_hat.push_back((m2_[j] / (n - 1.0)).cwiseMax(0.0).cwiseSqrt());
    } else {
      out.sigma_hat.push_back(Eigen::VectorXd::Zero(mean_[j].size()));
    }
    out.noise_hat.push_back(Eigen::VectorXd::Constant(mean_[j].size(), noise_sum_[j] / n));
  }
  return out;
}

PosteriorSummary summarize(std::span<const GridState> samples) {
  SummaryAccumulator acc;
  for (const auto& s : samples) acc.add(s);
  return acc.finish();
}

PosteriorSummary summarize(const SageModel& model, const Chain& chain) {
  Materializer materialize(model);
  SummaryAccumulator acc;
  for (const auto& s : chain.states) acc.add(materialize(s));
  return acc.finish();
}

std::vector<int> argmax_rows(const Eigen::MatrixXd& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.rows()), 0);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    int best = 0;
    for (Eigen::Index r = 1; r < probs.cols(); ++r) {
      if (probs(i, r) > probs(i, best)) best = static_cast<int>(r);
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("normal quantile needs p in (0, 1)");
  // Acklam's rational approximation followed by one Halley step.
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

Interval1D predictive_interval(const PosteriorSummary& summary, std::size_t source,
                               double coverage, bool variance_sum) {
  if (!(coverage > 0.0 && coverage < 1.0)) throw ConfigError("coverage must lie in (0, 1)");
  if (source >= summary.mu_hat.size()) throw ConfigError("no such property source in the summary");
  const double z = normal_quantile(0.5 + 0.5 * coverage);
  const auto& s = summary.sigma_hat[source];
  const auto& n = summary.noise_hat[source];
  const Eigen::VectorXd spread =
      variance_sum ? Eigen::VectorXd((s.array().square() + n.array().square()).sqrt()) : Eigen::VectorXd(s + n);
  return {summary.mu_hat[source] - z * spread, summary.mu_hat[source] + z * spread};
}

ChangepointPosterior changepoint_posterior_1d(const Chain& chain, const Interval& domain, int bins) {
  if (!is_one_dimensional(chain.kind)) {
    throw ConfigError("changepoint posterior is only defined for 1-D models");
  }
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  ChangepointPosterior out;
  out.counts.assign(static_cast<std::size_t>(bins), 0);
  for (int k = 0; k <= bins; ++k) out.edges.push_back(domain.lo + domain.width() * k / bins);
  for (const auto& s : chain.states) {
    const auto& cp = s.seg.changepoints.values;
    if (out.samples.size() < cp.size()) out.samples.resize(cp.size());
    for (std::size_t k = 0; k < cp.size(); ++k) {
      out.samples[k].push_back(cp[k]);
      auto bin = static_cast<int>(std::floor((cp[k] - domain.lo) / domain.width() * bins));
      bin = std::clamp(bin, 0, bins - 1);
      ++out.counts[static_cast<std::size_t>(bin)];
    }
  }
  return out;
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ConfigError("wasserstein distance needs non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Integrate |F_a^-1(u) - F_b^-1(u)| over the merged quantile breakpoints.
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, k = 0;
  double u = 0.0, total = 0.0;
  while (i < a.size() && k < b.size()) {
    const double next = std::min((i + 1) / na, (k + 1) / nb);
    total += (next - u) * std::abs(a[i] - b[k]);
    u = next;
    if ((i + 1) / na <= next) ++i;
    if ((k + 1) / nb <= next) ++k;
  }
  return total;
}

void write_grid_csv(const std::filesystem::path& path, const Eigen::MatrixXd& points,
                    const std::vector<std::string>& columns, const Eigen::MatrixXd& values) {
  if (values.rows() != points.rows() || values.cols() != static_cast<Eigen::Index>(columns.size())) {
    throw ConfigError("grid CSV: value shape does not match points and column names");
  }
  std::ofstream out(path);
  if (!out) throw FileError("cannot write file: " + path.string());
  for (Eigen::Index d = 0; d < points.cols(); ++d) out << "x" << d + 1 << ",";
  for (std::size_t c = 0; c < columns.size(); ++c) out << columns[c] << (c + 1 < columns.size() ? "," : "\n");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(points.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index d = points.cols() - 1; d >= 0; --d) {
      if (points(a, d) != points(b, d)) return points(a, d) < points(b, d);
    }
    return false;
  });
  for (auto i : order) {
    for (Eigen::Index d = 0; d < points.cols(); ++d) out << format_double(points(i, d)) << ",";
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      out << format_double(values(i, c)) << (c + 1 < values.cols() ? "," : "\n");
    }
  }
}

}  // namespace sage
