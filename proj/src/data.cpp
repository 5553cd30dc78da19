#include "sage/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "sage/error.hpp"

namespace sage {

bool Domain::contains(const Eigen::Ref<const Eigen::RowVectorXd>& x, double tol) const {
  if (x.size() != dim()) return false;
  for (Eigen::Index d = 0; d < dim(); ++d) {
    const auto& b = bounds[static_cast<std::size_t>(d)];
    if (x[d] < b.lo - tol || x[d] > b.hi + tol) return false;
  }
  return true;
}

void Domain::validate() const {
  if (bounds.empty()) throw ConfigError("domain must have at least one dimension");
  for (const auto& b : bounds) {
    if (!(b.lo < b.hi) || !std::isfinite(b.lo) || !std::isfinite(b.hi)) {
      throw ConfigError("domain bounds must satisfy lo < hi");
    }
  }
}

Domain Domain::unit(Eigen::Index dim) {
  return Domain{std::vector<Interval>(static_cast<std::size_t>(dim), Interval{0.0, 1.0})};
}

namespace {

void check_bounds(const Bounds& b, const std::string& what, bool positive) {
  if (!std::isfinite(b.lo) || !std::isfinite(b.hi) || b.lo > b.hi) {
    throw ConfigError("prior bounds for " + what + " must satisfy min <= max");
  }
  if (positive && !(b.lo > 0.0)) {
    throw ConfigError("prior bounds for " + what + " must be positive");
  }
}

double sample_std(const Eigen::VectorXd& v) {
  if (v.size() < 2) return 0.0;
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size()));
}

}  // namespace

void PriorConfig::validate(Eigen::Index dim, std::size_t property_sources) const {
  if (regions < 1) throw ConfigError("region count R must be >= 1");
  if (seg_lengthscale.size() != static_cast<std::size_t>(dim)) {
    throw ConfigError("segmentation lengthscale bounds need one entry per dimension");
  }
  for (const auto& b : seg_lengthscale) check_bounds(b, "segmentation lengthscale", true);
  check_bounds(seg_std, "segmentation std", true);
  if (properties.size() != property_sources) {
    std::ostringstream msg;
    msg << "prior config lists " << properties.size() << " property sources but "
        << property_sources << " were given";
    throw ConfigError(msg.str());
  }
  for (std::size_t j = 0; j < properties.size(); ++j) {
    const auto& p = properties[j];
    const std::string tag = "property " + std::to_string(j);
    check_bounds(p.noise, tag + " noise", true);
    if (p.regions.size() != static_cast<std::size_t>(regions)) {
      throw ConfigError(tag + " prior needs one entry per region");
    }
    for (const auto& r : p.regions) {
      if (r.lengthscale.size() != static_cast<std::size_t>(dim)) {
        throw ConfigError(tag + " lengthscale bounds need one entry per dimension");
      }
      for (const auto& b : r.lengthscale) check_bounds(b, tag + " lengthscale", true);
      check_bounds(r.std, tag + " std", true);
      check_bounds(r.bias, tag + " bias", false);
    }
  }
}

PriorConfig default_priors(const Domain& domain, int regions,
                           std::span<const PropertyDataset> properties) {
  domain.validate();
  if (regions < 1) throw ConfigError("region count R must be >= 1");
  PriorConfig cfg;
  cfg.regions = regions;
  std::vector<Bounds> ls;
  for (const auto& b : domain.bounds) ls.push_back({0.01 * b.width(), 2.0 * b.width()});
  cfg.seg_lengthscale = ls;
  cfg.seg_std = {0.1, 10.0};
  for (const auto& prop : properties) {
    double sd = sample_std(prop.values);
    if (!(sd > 0.0)) sd = 1.0;
    double lo = -sd, hi = sd;
    if (prop.values.size() > 0) {
      lo = prop.values.minCoeff() - sd;
      hi = prop.values.maxCoeff() + sd;
    }
    PropertyPrior pp;
    pp.noise = {1e-4 * sd, sd};
    pp.regions.assign(static_cast<std::size_t>(regions),
                      RegionPropertyPrior{ls, Bounds{0.01 * sd, 10.0 * sd}, Bounds{lo, hi}});
    cfg.properties.push_back(std::move(pp));
  }
  return cfg;
}

namespace {

using nlohmann::json;

Bounds bounds_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw ConfigError("prior field '" + what + "' must be a [min, max] pair");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

// A lengthscale entry may be a single pair (applied to every dimension) or a
// list of pairs.
std::vector<Bounds> lengthscales_from(const json& j, Eigen::Index dim, const std::string& what) {
  if (j.is_array() && j.size() == 2 && j[0].is_number()) {
    return std::vector<Bounds>(static_cast<std::size_t>(dim), bounds_from(j, what));
  }
  if (!j.is_array()) throw ConfigError("prior field '" + what + "' must be an array");
  std::vector<Bounds> out;
  for (const auto& e : j) out.push_back(bounds_from(e, what));
  return out;
}

json bounds_json(const Bounds& b) { return json::array({b.lo, b.hi}); }

void apply_region(const json& j, RegionPropertyPrior& r, Eigen::Index dim) {
  if (j.contains("lengthscale")) r.lengthscale = lengthscales_from(j["lengthscale"], dim, "lengthscale");
  if (j.contains("std")) r.std = bounds_from(j["std"], "std");
  if (j.contains("bias")) r.bias = bounds_from(j["bias"], "bias");
}

}  // namespace

PriorConfig priors_from_json(const std::string& json_text, const Domain& domain, int regions,
                             std::span<const PropertyDataset> properties) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("prior config is not valid JSON: ") + e.what());
  }
  if (doc.contains("regions")) regions = doc["regions"].get<int>();
  PriorConfig cfg = default_priors(domain, regions, properties);
  const Eigen::Index dim = domain.dim();
  if (doc.contains("segmentation")) {
    const auto& s = doc["segmentation"];
    if (s.contains("lengthscale")) {
      cfg.seg_lengthscale = lengthscales_from(s["lengthscale"], dim, "segmentation.lengthscale");
    }
    if (s.contains("std")) cfg.seg_std = bounds_from(s["std"], "segmentation.std");
  }
  if (doc.contains("properties")) {
    const auto& plist = doc["properties"];
    if (!plist.is_array() || plist.size() != cfg.properties.size()) {
      throw ConfigError("prior 'properties' must list one entry per property source");
    }
    for (std::size_t j = 0; j < plist.size(); ++j) {
      const auto& pj = plist[j];
      auto& target = cfg.properties[j];
      if (pj.contains("noise")) target.noise = bounds_from(pj["noise"], "noise");
      for (auto& r : target.regions) apply_region(pj, r, dim);
      if (pj.contains("regions")) {
        const auto& rl = pj["regions"];
        if (!rl.is_array() || rl.size() != target.regions.size()) {
          throw ConfigError("prior 'regions' override must list one entry per region");
        }
        for (std::size_t r = 0; r < rl.size(); ++r) apply_region(rl[r], target.regions[r], dim);
      }
    }
  }
  cfg.validate(dim, properties.size());
  return cfg;
}

std::string priors_to_json(const PriorConfig& priors) {
  json doc;
  doc["regions"] = priors.regions;
  json seg_ls = json::array();
  for (const auto& b : priors.seg_lengthscale) seg_ls.push_back(bounds_json(b));
  doc["segmentation"] = {{"lengthscale", seg_ls}, {"std", bounds_json(priors.seg_std)}};
  json plist = json::array();
  for (const auto& p : priors.properties) {
    json regions = json::array();
    for (const auto& r : p.regions) {
      json ls = json::array();
      for (const auto& b : r.lengthscale) ls.push_back(bounds_json(b));
      regions.push_back(
          {{"lengthscale", ls}, {"std", bounds_json(r.std)}, {"bias", bounds_json(r.bias)}});
    }
    plist.push_back({{"noise", bounds_json(p.noise)}, {"regions", regions}});
  }
  doc["properties"] = plist;
  return doc.dump(2);
}

// ---------------------------------------------------------------------------
// Grid

std::optional<Eigen::Index> PredictionGrid::find(
    const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  if (x.size() != dim()) return std::nullopt;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    if ((points.row(i) - x).cwiseAbs().maxCoeff() <= kGridDedupTol) return i;
  }
  return std::nullopt;
}

Eigen::Index PredictionGrid::index_of(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  auto idx = find(x);
  if (!idx) throw DataError("point is not a member of the prediction grid");
  return *idx;
}

PredictionGrid build_grid(const Domain& domain, const std::vector<int>& resolution,
                          std::span<const Eigen::MatrixXd> data_points, std::size_t cap) {
  domain.validate();
  const Eigen::Index dim = domain.dim();
  if (resolution.size() != static_cast<std::size_t>(dim)) {
    throw ConfigError("grid resolution needs one entry per dimension");
  }
  std::size_t lattice = 1;
  for (int r : resolution) {
    if (r < 2) throw ConfigError("grid resolution must be >= 2 per dimension");
    lattice *= static_cast<std::size_t>(r);
  }

  std::vector<Eigen::RowVectorXd> anchors;
  auto same = [](const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
    return (a - b).cwiseAbs().maxCoeff() <= kGridDedupTol;
  };
  for (const auto& block : data_points) {
    if (block.rows() > 0 && block.cols() != dim) {
      throw DataError("data point dimension does not match the domain");
    }
    for (Eigen::Index i = 0; i < block.rows(); ++i) {
      Eigen::RowVectorXd p = block.row(i);
      if (std::none_of(anchors.begin(), anchors.end(), [&](const auto& a) { return same(a, p); })) {
        anchors.push_back(std::move(p));
      }
    }
  }

  std::vector<Eigen::RowVectorXd> rest;
  std::vector<int> counter(static_cast<std::size_t>(dim), 0);
  for (std::size_t n = 0; n < lattice; ++n) {
    Eigen::RowVectorXd p(dim);
    for (Eigen::Index d = 0; d < dim; ++d) {
      const auto& b = domain.bounds[static_cast<std::size_t>(d)];
      const int res = resolution[static_cast<std::size_t>(d)];
      const int k = counter[static_cast<std::size_t>(d)];
      p[d] = (k == res - 1) ? b.hi : b.lo + b.width() * k / (res - 1);
    }
    if (std::none_of(anchors.begin(), anchors.end(), [&](const auto& a) { return same(a, p); })) {
      rest.push_back(std::move(p));
    }
    // first dimension varies fastest
    for (std::size_t d = 0; d < counter.size(); ++d) {
      if (++counter[d] < resolution[d]) break;
      counter[d] = 0;
    }
  }

  const std::size_t total = anchors.size() + rest.size();
  if (total > cap) {
    std::ostringstream msg;
    msg << "prediction grid would have " << total << " points (cap " << cap
        << "); use a coarser resolution";
    throw ConfigError(msg.str());
  }
  PredictionGrid grid;
  grid.points.resize(static_cast<Eigen::Index>(total), dim);
  Eigen::Index row = 0;
  for (const auto& p : anchors) grid.points.row(row++) = p;
  for (const auto& p : rest) grid.points.row(row++) = p;
  grid.anchor_count = static_cast<Eigen::Index>(anchors.size());
  return grid;
}

std::vector<Eigen::MatrixXd> collect_points(std::span<const StructureDataset> structure,
                                            std::span<const PropertyDataset> property) {
  std::vector<Eigen::MatrixXd> out;
  for (const auto& s : structure) out.push_back(s.points);
  for (const auto& p : property) out.push_back(p.points);
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? comma : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string located(const std::filesystem::path& path, std::size_t line, const std::string& what) {
  std::ostringstream msg;
  msg << path.string() << ":" << line << ": " << what;
  return msg.str();
}

bool parse_double(std::string_view tok, double& out) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  const char* end = tok.data() + tok.size();
  auto res = std::from_chars(tok.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

bool parse_int(std::string_view tok, long& out) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  const char* end = tok.data() + tok.size();
  auto res = std::from_chars(tok.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

struct CsvTable {
  std::size_t columns = 0;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;
};

// Reads a headed CSV; '#' lines and blank lines are skipped.
CsvTable read_csv(const std::filesystem::path& path, std::size_t min_columns = 2) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open data file: " + path.string());
  CsvTable table;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = trim(line);
    if (lineno == 1 && view.size() >= 3 && static_cast<unsigned char>(view[0]) == 0xEF) {
      view.remove_prefix(3);  // UTF-8 BOM
    }
    if (view.empty() || view.front() == '#') continue;
    auto fields = split(view);
    if (!have_header) {
      if (fields.size() < min_columns) {
        throw DataError(located(path, lineno, "header needs at least one coordinate and a value column"));
      }
      double probe;
      if (parse_double(fields.front(), probe)) {
        throw DataError(located(path, lineno, "missing header row"));
      }
      table.columns = fields.size();
      table.header.assign(fields.begin(), fields.end());
      have_header = true;
      continue;
    }
    if (fields.size() != table.columns) {
      std::ostringstream msg;
      msg << "expected " << table.columns << " fields, found " << fields.size();
      throw DataError(located(path, lineno, msg.str()));
    }
    table.rows.emplace_back(fields.begin(), fields.end());
    table.line_numbers.push_back(lineno);
  }
  if (!have_header) throw DataError(located(path, lineno, "file has no header row"));
  return table;
}

Eigen::MatrixXd parse_points(const CsvTable& t, const std::filesystem::path& path) {
  const auto dim = static_cast<Eigen::Index>(t.columns - 1);
  Eigen::MatrixXd pts(static_cast<Eigen::Index>(t.rows.size()), dim);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    for (Eigen::Index d = 0; d < dim; ++d) {
      double v;
      const auto& tok = t.rows[i][static_cast<std::size_t>(d)];
      if (!parse_double(tok, v) || !std::isfinite(v)) {
        throw DataError(located(path, t.line_numbers[i], "invalid coordinate '" + tok + "'"));
      }
      pts(static_cast<Eigen::Index>(i), d) = v;
    }
  }
  return pts;
}

std::string header(Eigen::Index dim, const std::string& last) {
  std::string h;
  for (Eigen::Index d = 0; d < dim; ++d) h += "x" + std::to_string(d + 1) + ",";
  return h + last;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write file: " + path.string());
  return out;
}

}  // namespace

NumericTable read_numeric_csv(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path, 1);
  NumericTable out;
  out.header = t.header;
  out.values.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(t.columns));
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    for (std::size_t c = 0; c < t.columns; ++c) {
      double v;
      if (!parse_double(t.rows[i][c], v)) {
        throw DataError(located(path, t.line_numbers[i], "non-numeric value '" + t.rows[i][c] + "'"));
      }
      out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = v;
    }
  }
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

StructureDataset load_structure_csv(const std::filesystem::path& path, std::string source_id) {
  const CsvTable t = read_csv(path);
  StructureDataset ds;
  ds.source_id = std::move(source_id);
  ds.points = parse_points(t, path);
  ds.labels.reserve(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& tok = t.rows[i].back();
    long label;
    if (!parse_int(tok, label)) {
      throw DataError(located(path, t.line_numbers[i], "non-integer label '" + tok + "'"));
    }
    if (label < 0) {
      throw DataError(located(path, t.line_numbers[i], "negative label '" + tok + "'"));
    }
    ds.labels.push_back(static_cast<int>(label));
  }
  return ds;
}

PropertyDataset load_property_csv(const std::filesystem::path& path, std::string source_id) {
  const CsvTable t = read_csv(path);
  PropertyDataset ds;
  ds.source_id = std::move(source_id);
  ds.points = parse_points(t, path);
  ds.values.resize(static_cast<Eigen::Index>(t.rows.size()));
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& tok = t.rows[i].back();
    double v;
    if (!parse_double(tok, v) || !std::isfinite(v)) {
      throw DataError(located(path, t.line_numbers[i], "non-finite property value '" + tok + "'"));
    }
    ds.values[static_cast<Eigen::Index>(i)] = v;
  }
  return ds;
}

void write_structure_csv(const std::filesystem::path& path, const StructureDataset& data) {
  auto out = open_out(path);
  out << header(data.points.cols(), "label") << "\n";
  for (Eigen::Index i = 0; i < data.points.rows(); ++i) {
    for (Eigen::Index d = 0; d < data.points.cols(); ++d) out << format_double(data.points(i, d)) << ",";
    out << data.labels[static_cast<std::size_t>(i)] << "\n";
  }
}

void write_property_csv(const std::filesystem::path& path, const PropertyDataset& data) {
  auto out = open_out(path);
  out << header(data.points.cols(), "y") << "\n";
  for (Eigen::Index i = 0; i < data.points.rows(); ++i) {
    for (Eigen::Index d = 0; d < data.points.cols(); ++d) out << format_double(data.points(i, d)) << ",";
    out << format_double(data.values[i]) << "\n";
  }
}

void validate_structure(const StructureDataset& data, const Domain& domain, int regions) {
  if (data.points.rows() > 0 && data.points.cols() != domain.dim()) {
    throw DataError("structure source '" + data.source_id + "' has the wrong dimension");
  }
  for (Eigen::Index i = 0; i < data.points.rows(); ++i) {
    if (!domain.contains(data.points.row(i))) {
      throw DataError("structure source '" + data.source_id + "' has a point outside the domain");
    }
    const int label = data.labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= regions) {
      std::ostringstream msg;
      msg << "structure source '" << data.source_id << "' has label " << label
          << " but R = " << regions;
      throw DataError(msg.str());
    }
  }
}

void validate_property(const PropertyDataset& data, const Domain& domain) {
  if (data.points.rows() > 0 && data.points.cols() != domain.dim()) {
    throw DataError("property source '" + data.source_id + "' has the wrong dimension");
  }
  for (Eigen::Index i = 0; i < data.points.rows(); ++i) {
    if (!domain.contains(data.points.row(i))) {
      throw DataError("property source '" + data.source_id + "' has a point outside the domain");
    }
    if (!std::isfinite(data.values[i])) {
      throw DataError("property source '" + data.source_id + "' has a non-finite value");
    }
  }
}

Eigen::RowVectorXd InputScaling::point_to_unit(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  Eigen::RowVectorXd u(x.size());
  for (Eigen::Index d = 0; d < x.size(); ++d) {
    const auto& b = original.bounds[static_cast<std::size_t>(d)];
    u[d] = (x[d] - b.lo) / b.width();
  }
  return u;
}

Eigen::RowVectorXd InputScaling::point_from_unit(const Eigen::Ref<const Eigen::RowVectorXd>& u) const {
  Eigen::RowVectorXd x(u.size());
  for (Eigen::Index d = 0; d < u.size(); ++d) {
    const auto& b = original.bounds[static_cast<std::size_t>(d)];
    x[d] = b.lo + u[d] * b.width();
  }
  return x;
}

Eigen::MatrixXd InputScaling::to_unit(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd u(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) u.row(i) = point_to_unit(x.row(i));
  return u;
}

Eigen::MatrixXd InputScaling::from_unit(const Eigen::MatrixXd& u) const {
  Eigen::MatrixXd x(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.rows(); ++i) x.row(i) = point_from_unit(u.row(i));
  return x;
}

}  // namespace sage
