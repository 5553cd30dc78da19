#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sage/data.hpp"

namespace sage {

// True phase labels and property values at a set of evaluation points.
struct GroundTruth {
  Eigen::MatrixXd points;
  std::vector<int> labels;
  std::vector<Eigen::VectorXd> values;  // per property source
};

// A generated benchmark: datasets plus the functions that produced them.
//
// Defaults (all cases): two phase regions, noise std 0.05 on property values.
//  - edge1d-1 / edge1d-2: domain [0,1], boundary at x = 0.7, 8 structure and
//    8 property points. Variant 1 brackets the boundary with structure points
//    0.005-0.015 away and keeps property points >= 0.15 away; variant 2 swaps
//    the roles (property pair 0.005-0.015 away, structure >= 0.15 away).
//  - edge2d-1 / edge2d-2: domain [0,1]^2, boundary x2 = 0.45 + 0.2 x1 +
//    0.08 sin(2 pi x1), region 0 below. The informative source has 10 pairs
//    straddling the boundary 0.03 away plus scattered points; the other
//    source has points kept >= 0.12 from the boundary.
//  - multisource-2d: the 2-D boundary; structure source 0 straddles the
//    upper (x1 >= 0.5) half of the boundary, source 1 the lower half; two
//    property sources with different surfaces, 15 scattered points each.
struct SyntheticCase {
  std::string name;
  std::uint64_t seed = 0;
  Domain domain;
  int regions = 2;
  double noise = 0.05;
  std::vector<StructureDataset> structure;
  std::vector<PropertyDataset> property;
  std::function<int(const Eigen::RowVectorXd&)> label_fn;
  std::vector<std::function<double(const Eigen::RowVectorXd&)>> value_fns;
  // 1-D cases: the true changepoint and the evaluation mask interval (the
  // nearest data points on either side of the boundary).
  std::optional<double> changepoint;
  std::optional<Interval> mask_interval;
  std::vector<int> default_resolution;
};

SyntheticCase gen_edge_case_1d(int variant, std::uint64_t seed);
SyntheticCase gen_edge_case_2d(int variant, std::uint64_t seed);
SyntheticCase gen_multisource_2d(std::uint64_t seed);
// Dispatch by name: edge1d-1, edge1d-2, edge2d-1, edge2d-2, multisource-2d.
SyntheticCase gen_case(const std::string& name, std::uint64_t seed);
std::vector<std::string> synthetic_case_names();

GroundTruth evaluate_truth(const SyntheticCase& c, const Eigen::MatrixXd& points);

// Vertical distance from a 2-D point to the synthetic boundary curve.
double boundary_distance_2d(const Eigen::RowVectorXd& x);
double boundary_curve_2d(double x1);

// Writes structure_<i>.csv, property_<j>.csv, truth.csv (on the default
// lattice) and synth.json into `dir`.
void write_case(const std::filesystem::path& dir, const SyntheticCase& c);

// Fraction of masked points with matching labels. An empty mask selects all.
double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth,
                const std::vector<bool>& mask = {});

// Best accuracy over relabelings of the predicted labels; for models whose
// labels are not pinned by structure data.
double permutation_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth,
                            int regions, const std::vector<bool>& mask = {});

// 1 - SS_res / SS_tot over masked points. Throws DataError when the masked
// truth is constant.
double r_squared(const Eigen::VectorXd& predicted, const Eigen::VectorXd& truth,
                 const std::vector<bool>& mask = {});

// True where the point's first coordinate lies outside the open interval.
std::vector<bool> mask_outside(const Eigen::MatrixXd& points, const Interval& excluded);

}  // namespace sage
