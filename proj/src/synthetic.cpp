#include "sage/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <numeric>

#include "sage/error.hpp"
#include "sage/random.hpp"

namespace sage {

namespace {

constexpr double kBoundary1D = 0.7;
constexpr double kNoise = 0.05;

double f0_1d(double x) { return 1.0 + 0.5 * std::sin(3.0 * x); }
double f1_1d(double x) { return -1.0 + 2.0 * (x - kBoundary1D); }

Eigen::MatrixXd column(const std::vector<double>& xs) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(xs.size()), 1);
  for (std::size_t i = 0; i < xs.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = xs[i];
  return m;
}

Eigen::MatrixXd rows(const std::vector<Eigen::RowVectorXd>& pts, Eigen::Index dim) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(pts.size()), dim);
  for (std::size_t i = 0; i < pts.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = pts[i];
  return m;
}

StructureDataset make_structure(const std::string& id, Eigen::MatrixXd pts,
                                const std::function<int(const Eigen::RowVectorXd&)>& label_fn) {
  StructureDataset ds;
  ds.source_id = id;
  ds.points = std::move(pts);
  for (Eigen::Index i = 0; i < ds.points.rows(); ++i) ds.labels.push_back(label_fn(ds.points.row(i)));
  return ds;
}

PropertyDataset make_property(const std::string& id, Eigen::MatrixXd pts,
                              const std::function<double(const Eigen::RowVectorXd&)>& fn, double noise,
                              Rng& rng) {
  PropertyDataset ds;
  ds.source_id = id;
  ds.points = std::move(pts);
  ds.values.resize(ds.points.rows());
  for (Eigen::Index i = 0; i < ds.points.rows(); ++i) {
    ds.values[i] = fn(ds.points.row(i)) + noise * standard_normal(rng);
  }
  return ds;
}

std::vector<double> jittered(const std::vector<double>& base, double amount, Rng& rng) {
  std::vector<double> out;
  for (double b : base) out.push_back(std::clamp(b + uniform(rng, -amount, amount), 0.0, 1.0));
  return out;
}

// Nearest data points on either side of the 1-D boundary.
Interval bracket(const SyntheticCase& c, double boundary) {
  Interval iv{c.domain.bounds[0].lo, c.domain.bounds[0].hi};
  auto visit = [&](const Eigen::MatrixXd& pts) {
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      const double x = pts(i, 0);
      if (x <= boundary) iv.lo = std::max(iv.lo, x);
      if (x > boundary) iv.hi = std::min(iv.hi, x);
    }
  };
  for (const auto& s : c.structure) visit(s.points);
  for (const auto& p : c.property) visit(p.points);
  return iv;
}

// Uniform points at least `min_dist` away from the 2-D boundary, optionally
// restricted to one side (0 below, 1 above).
Eigen::RowVectorXd scattered_point(Rng& rng, double min_dist, int side = -1) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    Eigen::RowVectorXd p(2);
    p << uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0);
    const double signed_dist = p[1] - boundary_curve_2d(p[0]);
    if (std::abs(signed_dist) < min_dist) continue;
    if (side == 0 && signed_dist > 0) continue;
    if (side == 1 && signed_dist <= 0) continue;
    return p;
  }
  throw ConfigError("could not place a synthetic point");
}

// Pairs straddling the boundary at `offset`, one per slot in [x_lo, x_hi].
std::vector<Eigen::RowVectorXd> straddling_pairs(Rng& rng, int pairs, double x_lo, double x_hi,
                                                 double offset) {
  std::vector<Eigen::RowVectorXd> out;
  const double slot = (x_hi - x_lo) / pairs;
  for (int k = 0; k < pairs; ++k) {
    const double x1 = std::clamp(x_lo + (k + 0.5) * slot + uniform(rng, -0.3, 0.3) * slot, 0.0, 1.0);
    const double b = boundary_curve_2d(x1);
    Eigen::RowVectorXd below(2), above(2);
    below << x1, b - offset;
    above << x1, b + offset;
    out.push_back(below);
    out.push_back(above);
  }
  return out;
}

int label_2d(const Eigen::RowVectorXd& x) { return x[1] <= boundary_curve_2d(x[0]) ? 0 : 1; }

double f0_2d(const Eigen::RowVectorXd& x) { return 0.8 + 0.6 * std::sin(2.5 * x[0]) + 0.3 * x[1]; }
double f1_2d(const Eigen::RowVectorXd& x) {
  return -1.0 + 0.7 * x[0] - 0.4 * (x[1] - 0.5) * (x[1] - 0.5);
}
double g0_2d(const Eigen::RowVectorXd& x) { return 2.0 - 0.8 * x[0] * x[1]; }
double g1_2d(const Eigen::RowVectorXd& x) { return 0.5 + 0.6 * std::cos(3.0 * x[1]); }

}  // namespace

double boundary_curve_2d(double x1) {
  return 0.45 + 0.2 * x1 + 0.08 * std::sin(2.0 * std::numbers::pi * x1);
}

double boundary_distance_2d(const Eigen::RowVectorXd& x) {
  return std::abs(x[1] - boundary_curve_2d(x[0]));
}

SyntheticCase gen_edge_case_1d(int variant, std::uint64_t seed) {
  if (variant != 1 && variant != 2) throw ConfigError("1-D edge case variant must be 1 or 2");
  Rng rng = make_rng(seed, 100 + static_cast<std::uint64_t>(variant));
  SyntheticCase c;
  c.name = "edge1d-" + std::to_string(variant);
  c.seed = seed;
  c.domain = Domain::unit(1);
  c.noise = kNoise;
  c.changepoint = kBoundary1D;
  c.default_resolution = {101};
  c.label_fn = [](const Eigen::RowVectorXd& x) { return x[0] <= kBoundary1D ? 0 : 1; };
  c.value_fns = {[](const Eigen::RowVectorXd& x) {
    return x[0] <= kBoundary1D ? f0_1d(x[0]) : f1_1d(x[0]);
  }};

  std::vector<double> s_x, p_x;
  if (variant == 1) {
    s_x = jittered({0.05, 0.2, 0.35, 0.5, 0.62}, 0.02, rng);
    s_x.push_back(kBoundary1D - uniform(rng, 0.005, 0.015));
    s_x.push_back(kBoundary1D + uniform(rng, 0.005, 0.015));
    s_x.push_back(0.88 + uniform(rng, -0.03, 0.03));
    p_x = jittered({0.03, 0.12, 0.22, 0.33, 0.42}, 0.02, rng);
    for (double x : jittered({0.9, 0.95, 0.98}, 0.01, rng)) p_x.push_back(x);
  } else {
    s_x = jittered({0.05, 0.15, 0.25, 0.35, 0.45, 0.52}, 0.01, rng);
    for (double x : jittered({0.88, 0.96}, 0.01, rng)) s_x.push_back(x);
    p_x = jittered({0.08, 0.25, 0.42, 0.58}, 0.02, rng);
    p_x.push_back(kBoundary1D - uniform(rng, 0.005, 0.015));
    p_x.push_back(kBoundary1D + uniform(rng, 0.005, 0.015));
    for (double x : jittered({0.8, 0.93}, 0.02, rng)) p_x.push_back(x);
  }
  std::sort(s_x.begin(), s_x.end());
  std::sort(p_x.begin(), p_x.end());
  c.structure.push_back(make_structure("structure_0", column(s_x), c.label_fn));
  c.property.push_back(make_property("property_0", column(p_x), c.value_fns[0], c.noise, rng));
  c.mask_interval = bracket(c, kBoundary1D);
  return c;
}

SyntheticCase gen_edge_case_2d(int variant, std::uint64_t seed) {
  if (variant != 1 && variant != 2) throw ConfigError("2-D edge case variant must be 1 or 2");
  Rng rng = make_rng(seed, 200 + static_cast<std::uint64_t>(variant));
  SyntheticCase c;
  c.name = "edge2d-" + std::to_string(variant);
  c.seed = seed;
  c.domain = Domain::unit(2);
  c.noise = kNoise;
  c.default_resolution = {25, 25};
  c.label_fn = label_2d;
  c.value_fns = {[](const Eigen::RowVectorXd& x) { return label_2d(x) == 0 ? f0_2d(x) : f1_2d(x); }};

  std::vector<Eigen::RowVectorXd> informative = straddling_pairs(rng, 10, 0.0, 1.0, 0.03);
  std::vector<Eigen::RowVectorXd> sparse;
  if (variant == 1) {
    for (int k = 0; k < 6; ++k) informative.push_back(scattered_point(rng, 0.12));
    for (int k = 0; k < 12; ++k) sparse.push_back(scattered_point(rng, 0.12, k % 2));
    c.structure.push_back(make_structure("structure_0", rows(informative, 2), c.label_fn));
    c.property.push_back(make_property("property_0", rows(sparse, 2), c.value_fns[0], c.noise, rng));
  } else {
    for (int k = 0; k < 10; ++k) informative.push_back(scattered_point(rng, 0.12));
    for (int k = 0; k < 10; ++k) sparse.push_back(scattered_point(rng, 0.12, k % 2));
    c.structure.push_back(make_structure("structure_0", rows(sparse, 2), c.label_fn));
    c.property.push_back(make_property("property_0", rows(informative, 2), c.value_fns[0], c.noise, rng));
  }
  return c;
}

SyntheticCase gen_multisource_2d(std::uint64_t seed) {
  Rng rng = make_rng(seed, 300);
  SyntheticCase c;
  c.name = "multisource-2d";
  c.seed = seed;
  c.domain = Domain::unit(2);
  c.noise = kNoise;
  c.default_resolution = {25, 25};
  c.label_fn = label_2d;
  c.value_fns = {[](const Eigen::RowVectorXd& x) { return label_2d(x) == 0 ? f0_2d(x) : f1_2d(x); },
                 [](const Eigen::RowVectorXd& x) { return label_2d(x) == 0 ? g0_2d(x) : g1_2d(x); }};

  auto upper = straddling_pairs(rng, 6, 0.5, 1.0, 0.03);
  auto lower = straddling_pairs(rng, 6, 0.0, 0.5, 0.03);
  // One far point per side keeps both labels anchored away from the boundary.
  Eigen::RowVectorXd p(2);
  p << uniform(rng, 0.6, 1.0), uniform(rng, 0.0, 0.2);
  upper.push_back(p);
  p << uniform(rng, 0.6, 1.0), uniform(rng, 0.9, 1.0);
  upper.push_back(p);
  p << uniform(rng, 0.0, 0.4), uniform(rng, 0.0, 0.2);
  lower.push_back(p);
  p << uniform(rng, 0.0, 0.4), uniform(rng, 0.85, 1.0);
  lower.push_back(p);
  c.structure.push_back(make_structure("structure_0", rows(upper, 2), c.label_fn));
  c.structure.push_back(make_structure("structure_1", rows(lower, 2), c.label_fn));
  for (int j = 0; j < 2; ++j) {
    std::vector<Eigen::RowVectorXd> pts;
    for (int k = 0; k < 15; ++k) pts.push_back(scattered_point(rng, 0.05, k % 2));
    c.property.push_back(make_property("property_" + std::to_string(j), rows(pts, 2),
                                       c.value_fns[static_cast<std::size_t>(j)], c.noise, rng));
  }
  return c;
}

std::vector<std::string> synthetic_case_names() {
  return {"edge1d-1", "edge1d-2", "edge2d-1", "edge2d-2", "multisource-2d"};
}

SyntheticCase gen_case(const std::string& name, std::uint64_t seed) {
  if (name == "edge1d-1") return gen_edge_case_1d(1, seed);
  if (name == "edge1d-2") return gen_edge_case_1d(2, seed);
  if (name == "edge2d-1") return gen_edge_case_2d(1, seed);
  if (name == "edge2d-2") return gen_edge_case_2d(2, seed);
  if (name == "multisource-2d") return gen_multisource_2d(seed);
  throw ConfigError("unknown synthetic case '" + name + "'");
}

GroundTruth evaluate_truth(const SyntheticCase& c, const Eigen::MatrixXd& points) {
  GroundTruth t;
  t.points = points;
  for (Eigen::Index i = 0; i < points.rows(); ++i) t.labels.push_back(c.label_fn(points.row(i)));
  for (const auto& fn : c.value_fns) {
    Eigen::VectorXd v(points.rows());
    for (Eigen::Index i = 0; i < points.rows(); ++i) v[i] = fn(points.row(i));
    t.values.push_back(std::move(v));
  }
  return t;
}

void write_case(const std::filesystem::path& dir, const SyntheticCase& c) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["name"] = c.name;
  meta["seed"] = c.seed;
  meta["dim"] = c.domain.dim();
  meta["regions"] = c.regions;
  meta["noise"] = c.noise;
  nlohmann::json dom = nlohmann::json::array();
  for (const auto& b : c.domain.bounds) dom.push_back({b.lo, b.hi});
  meta["domain"] = dom;
  meta["resolution"] = c.default_resolution;
  if (c.changepoint) meta["changepoint"] = *c.changepoint;
  if (c.mask_interval) meta["mask_interval"] = {c.mask_interval->lo, c.mask_interval->hi};
  std::vector<std::string> sfiles, pfiles;
  for (std::size_t i = 0; i < c.structure.size(); ++i) {
    sfiles.push_back("structure_" + std::to_string(i) + ".csv");
    write_structure_csv(dir / sfiles.back(), c.structure[i]);
  }
  for (std::size_t j = 0; j < c.property.size(); ++j) {
    pfiles.push_back("property_" + std::to_string(j) + ".csv");
    write_property_csv(dir / pfiles.back(), c.property[j]);
  }
  meta["structure_files"] = sfiles;
  meta["property_files"] = pfiles;
  meta["truth_file"] = "truth.csv";

  const PredictionGrid lattice = build_grid(c.domain, c.default_resolution, {});
  const GroundTruth truth = evaluate_truth(c, lattice.points);
  std::ofstream out(dir / "truth.csv");
  if (!out) throw FileError("cannot write " + (dir / "truth.csv").string());
  for (Eigen::Index d = 0; d < c.domain.dim(); ++d) out << "x" << d + 1 << ",";
  out << "label";
  for (std::size_t j = 0; j < truth.values.size(); ++j) out << ",y" << j;
  out << "\n";
  for (Eigen::Index i = 0; i < lattice.points.rows(); ++i) {
    for (Eigen::Index d = 0; d < c.domain.dim(); ++d) out << format_double(lattice.points(i, d)) << ",";
    out << truth.labels[static_cast<std::size_t>(i)];
    for (const auto& v : truth.values) out << "," << format_double(v[i]);
    out << "\n";
  }
  std::ofstream(dir / "synth.json") << meta.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

void check_mask(std::size_t n, const std::vector<bool>& mask) {
  if (!mask.empty() && mask.size() != n) throw ConfigError("mask length does not match the predictions");
}

}  // namespace

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth,
                const std::vector<bool>& mask) {
  if (predicted.size() != truth.size()) throw ConfigError("accuracy: length mismatch");
  check_mask(truth.size(), mask);
  std::size_t total = 0, hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    ++total;
    if (predicted[i] == truth[i]) ++hits;
  }
  if (total == 0) throw DataError("accuracy: mask selects no points");
  return static_cast<double>(hits) / static_cast<double>(total);
}

double permutation_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth, int regions,
                            const std::vector<bool>& mask) {
  std::vector<int> perm(static_cast<std::size_t>(regions));
  std::iota(perm.begin(), perm.end(), 0);
  double best = 0.0;
  do {
    std::vector<int> relabeled;
    for (int p : predicted) relabeled.push_back(perm[static_cast<std::size_t>(p)]);
    best = std::max(best, accuracy(relabeled, truth, mask));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double r_squared(const Eigen::VectorXd& predicted, const Eigen::VectorXd& truth, const std::vector<bool>& mask) {
  if (predicted.size() != truth.size()) throw ConfigError("r_squared: length mismatch");
  check_mask(static_cast<std::size_t>(truth.size()), mask);
  double sum = 0.0;
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    if (!mask.empty() && !mask[static_cast<std::size_t>(i)]) continue;
    sum += truth[i];
    ++n;
  }
  if (n == 0) throw DataError("r_squared: mask selects no points");
  const double mean = sum / static_cast<double>(n);
  double ss_res = 0.0, ss_tot = 0.0;
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    if (!mask.empty() && !mask[static_cast<std::size_t>(i)]) continue;
    ss_res += (truth[i] - predicted[i]) * (truth[i] - predicted[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (!(ss_tot > 0.0)) throw DataError("r_squared is undefined for constant truth");
  return 1.0 - ss_res / ss_tot;
}

std::vector<bool> mask_outside(const Eigen::MatrixXd& points, const Interval& excluded) {
  std::vector<bool> mask;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const double x = points(i, 0);
    mask.push_back(!(x > excluded.lo && x < excluded.hi));
  }
  return mask;
}

}  // namespace sage
