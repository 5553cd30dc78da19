#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sage {

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
  double width() const { return hi - lo; }
};

struct Domain {
  std::vector<Interval> bounds;

  Eigen::Index dim() const { return static_cast<Eigen::Index>(bounds.size()); }
  bool contains(const Eigen::Ref<const Eigen::RowVectorXd>& x, double tol = 1e-12) const;
  void validate() const;

  // Unit cube [0,1]^dim.
  static Domain unit(Eigen::Index dim);
};

struct StructureDataset {
  std::string source_id;
  Eigen::MatrixXd points;  // N x dim
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

struct PropertyDataset {
  std::string source_id;
  Eigen::MatrixXd points;  // N x dim
  Eigen::VectorXd values;

  std::size_t size() const { return static_cast<std::size_t>(values.size()); }
};

// Uniform prior support [lo, hi]; lo == hi pins the parameter.
struct Bounds {
  double lo = 0.0;
  double hi = 1.0;

  bool contains(double v) const { return v >= lo && v <= hi; }
  double width() const { return hi - lo; }
  double center() const { return 0.5 * (lo + hi); }
};

struct RegionPropertyPrior {
  std::vector<Bounds> lengthscale;  // one per input dimension
  Bounds std;
  Bounds bias;  // used only by N-dimensional models
};

struct PropertyPrior {
  std::vector<RegionPropertyPrior> regions;  // one per phase region
  Bounds noise;
};

struct PriorConfig {
  int regions = 2;
  std::vector<Bounds> seg_lengthscale;  // latent segmentation field, per dimension
  Bounds seg_std{0.1, 10.0};
  std::vector<PropertyPrior> properties;  // one per property source

  // Checks shape against (dim, number of property sources) and ordering of
  // every bound. Throws ConfigError.
  void validate(Eigen::Index dim, std::size_t property_sources) const;
};

// Defaults: lengthscale in [0.01, 2] x domain width, std in [0.01, 10] x data
// std, noise in [1e-4, 1] x data std, bias within the data range widened by one
// data std. The segmentation latent uses the same lengthscale rule and std in
// [0.1, 10].
PriorConfig default_priors(const Domain& domain, int regions,
                           std::span<const PropertyDataset> properties);

// Fills fields that are absent from a JSON prior document with defaults.
// Schema: schema/prior_config.schema.json.
PriorConfig priors_from_json(const std::string& json_text, const Domain& domain, int regions,
                             std::span<const PropertyDataset> properties);
std::string priors_to_json(const PriorConfig& priors);

// Evaluation points. The first `anchor_count` rows are the distinct data
// points in order of first appearance; the remaining rows are lattice points
// that do not coincide with a data point.
struct PredictionGrid {
  Eigen::MatrixXd points;
  Eigen::Index anchor_count = 0;

  Eigen::Index size() const { return points.rows(); }
  Eigen::Index dim() const { return points.cols(); }
  // Index of the grid row within 1e-12 (max norm) of x, searching anchors
  // first; nullopt if none.
  std::optional<Eigen::Index> find(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  Eigen::Index index_of(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
};

inline constexpr std::size_t kDefaultGridCap = 20000;
inline constexpr double kGridDedupTol = 1e-12;

PredictionGrid build_grid(const Domain& domain, const std::vector<int>& resolution,
                          std::span<const Eigen::MatrixXd> data_points,
                          std::size_t cap = kDefaultGridCap);

// Collects the point matrices of every dataset for build_grid.
std::vector<Eigen::MatrixXd> collect_points(std::span<const StructureDataset> structure,
                                            std::span<const PropertyDataset> property);

StructureDataset load_structure_csv(const std::filesystem::path& path, std::string source_id);
PropertyDataset load_property_csv(const std::filesystem::path& path, std::string source_id);
void write_structure_csv(const std::filesystem::path& path, const StructureDataset& data);
void write_property_csv(const std::filesystem::path& path, const PropertyDataset& data);

// Throws DataError naming the source when a point lies outside the domain or
// a label is >= regions.
void validate_structure(const StructureDataset& data, const Domain& domain, int regions);
void validate_property(const PropertyDataset& data, const Domain& domain);

// A headed CSV of numbers, with the same comment and BOM handling as the
// dataset loaders.
struct NumericTable {
  std::vector<std::string> header;
  Eigen::MatrixXd values;
};
NumericTable read_numeric_csv(const std::filesystem::path& path);

// printf %.17g: round-trips every double.
std::string format_double(double v);

// Min-max scaling of inputs onto [0,1]^dim.
struct InputScaling {
  Domain original;
  Eigen::RowVectorXd point_to_unit(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  Eigen::RowVectorXd point_from_unit(const Eigen::Ref<const Eigen::RowVectorXd>& u) const;
  Eigen::MatrixXd to_unit(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd from_unit(const Eigen::MatrixXd& u) const;
};

}  // namespace sage
