#include "sage/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "sage/baselines.hpp"
#include "sage/error.hpp"
#include "sage/posterior.hpp"
#include "sage/synthetic.hpp"

namespace sage::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const FileError*>(&e)) return kExitFile;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  if (dynamic_cast<const InferenceError*>(&e)) return kExitInference;
  if (dynamic_cast<const json::exception*>(&e)) return kExitConfig;
  return kExitInternal;
}

bool is_baseline(const std::string& model) {
  return model == "gp-cp" || model == "gp-reg" || model == "gp-class";
}

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open file: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write file: " + path.string());
  out << text;
}

Domain domain_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw ConfigError("'domain' must be a list of [lo, hi] pairs");
  Domain d;
  for (const auto& b : j) {
    if (!b.is_array() || b.size() != 2) throw ConfigError("'domain' entries must be [lo, hi] pairs");
    d.bounds.push_back({b[0].get<double>(), b[1].get<double>()});
  }
  d.validate();
  return d;
}

json domain_to_json(const Domain& d) {
  json out = json::array();
  for (const auto& b : d.bounds) out.push_back({b.lo, b.hi});
  return out;
}

std::vector<fs::path> paths_from(const json& j, const fs::path& base, const std::string& key) {
  std::vector<fs::path> out;
  const json list = j.is_array() ? j : json::array({j});
  for (const auto& p : list) {
    if (!p.is_string()) throw ConfigError("'" + key + "' entries must be file paths");
    fs::path path = p.get<std::string>();
    out.push_back(path.is_absolute() ? path : base / path);
  }
  return out;
}

void require_known_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

}  // namespace

void RunConfig::validate() const {
  if (model.empty()) throw ConfigError("no model kind given");
  const bool baseline = is_baseline(model);
  std::optional<ModelKind> kind;
  if (!baseline) kind = parse_model_kind(model);
  if (domain.bounds.empty()) throw ConfigError("no domain given");
  domain.validate();
  const Eigen::Index dim = domain.dim();
  if ((kind && is_one_dimensional(*kind)) || model == "gp-cp") {
    if (dim != 1) {
      throw ConfigError("model " + model + " needs a 1-D domain, got " + std::to_string(dim) + " dimensions");
    }
  }
  if (regions < 1) throw ConfigError("regions must be >= 1");
  const bool needs_structure = (kind && uses_structure(*kind)) || model == "gp-class";
  const bool needs_property = (kind && uses_property(*kind)) || model == "gp-cp" || model == "gp-reg";
  if (needs_structure && structure_files.empty()) {
    throw ConfigError("model " + model + " needs at least one structure data file");
  }
  if (needs_property && property_files.empty()) {
    throw ConfigError("model " + model + " needs at least one property data file");
  }
  for (const auto& p : structure_files) {
    if (!fs::exists(p)) throw FileError("data file not found: " + p.string());
  }
  for (const auto& p : property_files) {
    if (!fs::exists(p)) throw FileError("data file not found: " + p.string());
  }
  if (!resolution.empty() && resolution.size() != static_cast<std::size_t>(dim)) {
    throw ConfigError("resolution must give one count per dimension");
  }
  if (!baseline) mcmc.validate();
  if (label_noise_floor < 0.0 || label_noise_floor >= 1.0) {
    throw ConfigError("label_noise_floor must lie in [0, 1)");
  }
}

void apply_data_dir(RunConfig& config, const fs::path& dir) {
  const json meta = read_json_file(dir / "synth.json");
  config.data_dir = dir;
  if (config.domain.bounds.empty()) config.domain = domain_from_json(meta.at("domain"));
  if (config.resolution.empty()) config.resolution = meta.at("resolution").get<std::vector<int>>();
  if (meta.contains("regions")) config.regions = meta["regions"].get<int>();
  if (config.structure_files.empty() && meta.contains("structure_files")) {
    config.structure_files = paths_from(meta["structure_files"], dir, "structure_files");
  }
  if (config.property_files.empty() && meta.contains("property_files")) {
    config.property_files = paths_from(meta["property_files"], dir, "property_files");
  }
}

RunConfig load_run_config(const fs::path& path) {
  const json j = read_json_file(path);
  if (!j.is_object()) throw ConfigError(path.string() + ": run config must be a JSON object");
  require_known_keys(j,
                     {"model", "domain", "regions", "structure", "property", "priors", "mcmc", "resolution",
                      "output", "data_dir", "scale_inputs", "label_noise_floor", "baseline", "threads"},
                     path.string());
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  RunConfig c;
  if (j.contains("model")) c.model = j["model"].get<std::string>();
  if (j.contains("domain")) c.domain = domain_from_json(j["domain"]);
  if (j.contains("regions")) c.regions = j["regions"].get<int>();
  if (j.contains("structure")) c.structure_files = paths_from(j["structure"], base, "structure");
  if (j.contains("property")) c.property_files = paths_from(j["property"], base, "property");
  if (j.contains("priors")) {
    const auto& p = j["priors"];
    if (p.is_string()) {
      fs::path ppath = p.get<std::string>();
      if (!ppath.is_absolute()) ppath = base / ppath;
      c.priors_json = read_json_file(ppath).dump();
    } else {
      c.priors_json = p.dump();
    }
  }
  if (j.contains("mcmc")) {
    const auto& m = j["mcmc"];
    require_known_keys(m, {"iterations", "burn_in", "thinning", "seed", "chains", "adaptation_window"},
                       "mcmc");
    if (m.contains("iterations")) c.mcmc.iterations = m["iterations"].get<int>();
    if (m.contains("burn_in")) c.mcmc.burn_in = m["burn_in"].get<int>();
    if (m.contains("thinning")) c.mcmc.thinning = m["thinning"].get<int>();
    if (m.contains("seed")) c.mcmc.seed = m["seed"].get<std::uint64_t>();
    if (m.contains("chains")) c.mcmc.chains = m["chains"].get<int>();
    if (m.contains("adaptation_window")) c.mcmc.adaptation_window = m["adaptation_window"].get<int>();
  }
  if (j.contains("resolution")) {
    const auto& r = j["resolution"];
    c.resolution = r.is_array() ? r.get<std::vector<int>>() : std::vector<int>{r.get<int>()};
  }
  if (j.contains("output")) {
    fs::path out = j["output"].get<std::string>();
    c.output_dir = out.is_absolute() ? out : base / out;
  }
  if (j.contains("scale_inputs")) c.scale_inputs = j["scale_inputs"].get<bool>();
  if (j.contains("label_noise_floor")) c.label_noise_floor = j["label_noise_floor"].get<double>();
  if (j.contains("baseline")) {
    const auto& b = j["baseline"];
    require_known_keys(b, {"restarts"}, "baseline");
    if (b.contains("restarts")) c.restarts = b["restarts"].get<int>();
  }
  if (j.contains("threads")) c.threads = j["threads"].get<int>();
  if (j.contains("data_dir")) {
    fs::path d = j["data_dir"].get<std::string>();
    apply_data_dir(c, d.is_absolute() ? d : base / d);
  }
  return c;
}

// ---------------------------------------------------------------------------
// fit

namespace {

struct LoadedData {
  Domain model_domain;  // unit cube when inputs are scaled
  std::optional<InputScaling> scaling;
  std::vector<StructureDataset> structure;
  std::vector<PropertyDataset> property;
};

LoadedData load_data(const RunConfig& c) {
  LoadedData d;
  for (std::size_t i = 0; i < c.structure_files.size(); ++i) {
    d.structure.push_back(load_structure_csv(c.structure_files[i], "structure_" + std::to_string(i)));
    validate_structure(d.structure.back(), c.domain, c.regions);
  }
  for (std::size_t j = 0; j < c.property_files.size(); ++j) {
    d.property.push_back(load_property_csv(c.property_files[j], "property_" + std::to_string(j)));
    validate_property(d.property.back(), c.domain);
  }
  for (const auto& s : d.structure) {
    if (s.points.cols() != c.domain.dim()) throw DataError(s.source_id + ": point dimension does not match domain");
  }
  for (const auto& p : d.property) {
    if (p.points.cols() != c.domain.dim()) throw DataError(p.source_id + ": point dimension does not match domain");
  }
  d.model_domain = c.domain;
  if (c.scale_inputs) {
    d.scaling = InputScaling{c.domain};
    d.model_domain = Domain::unit(c.domain.dim());
    for (auto& s : d.structure) s.points = d.scaling->to_unit(s.points);
    for (auto& p : d.property) p.points = d.scaling->to_unit(p.points);
  }
  return d;
}

std::vector<int> resolution_for(const RunConfig& c) {
  if (!c.resolution.empty()) return c.resolution;
  return std::vector<int>(static_cast<std::size_t>(c.domain.dim()), c.domain.dim() == 1 ? 101 : 30);
}

Eigen::MatrixXd output_points(const LoadedData& d, const Eigen::MatrixXd& model_points) {
  return d.scaling ? d.scaling->from_unit(model_points) : model_points;
}

void write_phase_outputs(const fs::path& dir, const Eigen::MatrixXd& points, const Eigen::MatrixXd& probs) {
  std::vector<std::string> cols;
  for (Eigen::Index r = 0; r < probs.cols(); ++r) cols.push_back("p" + std::to_string(r));
  write_grid_csv(dir / "phase_pM.csv", points, cols, probs);
  const auto est = argmax_rows(probs);
  Eigen::MatrixXd est_m(probs.rows(), 1);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) est_m(i, 0) = est[static_cast<std::size_t>(i)];
  write_grid_csv(dir / "phase_estimate.csv", points, {"label"}, est_m);
  write_grid_csv(dir / "phase_entropy.csv", points, {"entropy"}, row_entropy(probs));
}

void write_property_outputs(const fs::path& dir, const Eigen::MatrixXd& points, std::size_t j,
                            const Eigen::VectorXd& mean, const Eigen::VectorXd& std, const Eigen::VectorXd& noise) {
  const std::string stem = "prop_" + std::to_string(j);
  write_grid_csv(dir / (stem + "_mean.csv"), points, {"mean"}, mean);
  write_grid_csv(dir / (stem + "_std.csv"), points, {"std"}, std);
  write_grid_csv(dir / (stem + "_noise.csv"), points, {"noise"}, noise);
}

json base_summary(const RunConfig& c, const PredictionGrid& grid, const std::vector<int>& resolution) {
  json s;
  s["model"] = c.model;
  s["dim"] = c.domain.dim();
  s["domain"] = domain_to_json(c.domain);
  s["regions"] = c.regions;
  s["resolution"] = resolution;
  s["grid_points"] = grid.size();
  s["anchors"] = grid.anchor_count;
  s["scale_inputs"] = c.scale_inputs;
  json sf = json::array(), pf = json::array();
  for (const auto& p : c.structure_files) sf.push_back(p.string());
  for (const auto& p : c.property_files) pf.push_back(p.string());
  s["structure_files"] = sf;
  s["property_files"] = pf;
  s["data_dir"] = c.data_dir ? json(c.data_dir->string()) : json(nullptr);
  return s;
}

void fit_sage(const RunConfig& c, const LoadedData& d, std::ostream& log) {
  const ModelKind kind = parse_model_kind(c.model);
  std::vector<StructureDataset> structure = uses_structure(kind) ? d.structure : std::vector<StructureDataset>{};
  std::vector<PropertyDataset> property = uses_property(kind) ? d.property : std::vector<PropertyDataset>{};
  const PriorConfig priors = priors_from_json(c.priors_json, d.model_domain, c.regions, property);
  const auto resolution = resolution_for(c);
  PredictionGrid grid = build_grid(d.model_domain, resolution, collect_points(structure, property));
  ModelOptions options;
  options.label_noise_floor = c.label_noise_floor;
  const SageModel model(kind, d.model_domain, priors, std::move(structure), std::move(property), grid, options);

  const auto start = std::chrono::steady_clock::now();
  const Chain chain = run_chain(model, c.mcmc, c.threads);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log << c.model << ": " << c.mcmc.chains << " chain(s) x " << c.mcmc.iterations << " iterations, "
      << chain.size() << " stored samples in " << std::fixed << std::setprecision(1) << seconds << " s\n";
  log.unsetf(std::ios::floatfield);
  for (const auto& w : chain.warnings) log << "warning: " << w << "\n";

  const PosteriorSummary summary = summarize(model, chain);
  const fs::path& dir = c.output_dir;
  const Eigen::MatrixXd points = output_points(d, grid.points);
  write_chain_jsonl(dir / "chain.jsonl", chain);
  write_phase_outputs(dir, points, summary.p_mean);
  for (std::size_t j = 0; j < summary.mu_hat.size(); ++j) {
    write_property_outputs(dir, points, j, summary.mu_hat[j], summary.sigma_hat[j], summary.noise_hat[j]);
  }

  json s = base_summary(c, grid, resolution);
  s["priors"] = json::parse(priors_to_json(priors));
  s["mcmc"] = {{"iterations", c.mcmc.iterations}, {"burn_in", c.mcmc.burn_in}, {"thinning", c.mcmc.thinning},
               {"seed", c.mcmc.seed},             {"chains", c.mcmc.chains}};
  s["samples"] = chain.size();
  s["rhat"] = chain.rhat;
  s["warnings"] = chain.warnings;
  s["label_noise_floor"] = c.label_noise_floor;
  json acc = json::array();
  for (const auto& per_chain : chain.acceptance) {
    json blocks = json::array();
    for (const auto& b : per_chain) {
      blocks.push_back({{"block", b.name}, {"acceptance", b.acceptance_rate()}, {"step", std::exp(b.log_step)}});
    }
    acc.push_back(blocks);
  }
  s["acceptance"] = acc;
  const std::size_t mls = max_likelihood_index(chain);
  s["mls"] = {{"index", mls}, {"log_lik", chain.states[mls].log_lik}};

  if (is_one_dimensional(kind) && model.regions() > 1) {
    const auto& b = c.domain.bounds[0];
    auto to_orig = [&](double u) { return d.scaling ? b.lo + u * b.width() : u; };
    std::ofstream cps(dir / "changepoints.csv");
    if (!cps) throw FileError("cannot write file: " + (dir / "changepoints.csv").string());
    cps << "chain,index";
    for (int k = 0; k < model.regions() - 1; ++k) cps << ",c" << k + 1;
    cps << "\n";
    Chain original = chain;
    for (auto& st : original.states) {
      for (auto& v : st.seg.changepoints.values) v = to_orig(v);
    }
    for (std::size_t i = 0; i < original.states.size(); ++i) {
      const auto chain_idx = static_cast<std::size_t>(
          std::upper_bound(original.chain_offsets.begin(), original.chain_offsets.end(), i) -
          original.chain_offsets.begin() - 1);
      cps << chain_idx << "," << i - original.chain_offsets[chain_idx];
      for (double v : original.states[i].seg.changepoints.values) cps << "," << format_double(v);
      cps << "\n";
    }
    const ChangepointPosterior post = changepoint_posterior_1d(original, b);
    std::ofstream hist(dir / "changepoint_hist.csv");
    hist << "lo,hi,count\n";
    for (std::size_t k = 0; k < post.counts.size(); ++k) {
      hist << format_double(post.edges[k]) << "," << format_double(post.edges[k + 1]) << "," << post.counts[k]
           << "\n";
    }
    json cp_stats = json::array();
    for (const auto& samples : post.samples) {
      double mean = 0.0;
      for (double v : samples) mean += v;
      mean /= static_cast<double>(samples.size());
      double var = 0.0;
      for (double v : samples) var += (v - mean) * (v - mean);
      cp_stats.push_back({{"mean", mean}, {"std", std::sqrt(var / static_cast<double>(samples.size()))}});
    }
    s["changepoints"] = cp_stats;
  }
  write_text(dir / "summary.json", s.dump(2) + "\n");
}

void fit_baseline(const RunConfig& c, const LoadedData& d, std::ostream& log) {
  const auto resolution = resolution_for(c);
  const bool classifier = c.model == "gp-class";
  std::vector<StructureDataset> structure = classifier ? d.structure : std::vector<StructureDataset>{};
  std::vector<PropertyDataset> property = classifier ? std::vector<PropertyDataset>{} : d.property;
  const PredictionGrid grid = build_grid(d.model_domain, resolution, collect_points(structure, property));
  const Eigen::MatrixXd points = output_points(d, grid.points);
  const fs::path& dir = c.output_dir;
  json s = base_summary(c, grid, resolution);
  json fits = json::array();
  std::vector<std::string> warnings;

  auto record = [&](const MleFit& fit, int source) {
    json hyper;
    for (const auto& [k, v] : fit.hyper) hyper[k] = v;
    json f = {{"algorithm", fit.algorithm}, {"hyper", hyper}, {"log_marginal", fit.log_marginal}};
    if (source >= 0) f["source"] = source;
    if (fit.changepoint) {
      const auto& b = c.domain.bounds[0];
      f["changepoint"] = d.scaling ? b.lo + *fit.changepoint * b.width() : *fit.changepoint;
    }
    fits.push_back(f);
    for (const auto& w : fit.warnings) {
      warnings.push_back(w);
      log << "warning: " << w << "\n";
    }
  };

  if (classifier) {
    ClassificationOptions opt;
    if (c.restarts >= 0) opt.restarts = c.restarts;
    opt.seed = c.mcmc.seed;
    const MleFit fit = gp_classification_mle(structure, c.regions, d.model_domain, grid.points, opt);
    write_phase_outputs(dir, points, fit.probs);
    record(fit, -1);
  } else {
    for (std::size_t j = 0; j < property.size(); ++j) {
      MleFit fit;
      if (c.model == "gp-reg") {
        RegressionOptions opt;
        if (c.restarts >= 0) opt.restarts = c.restarts;
        opt.seed = c.mcmc.seed;
        fit = gp_regression_mle(property[j], d.model_domain, grid.points, opt);
      } else {
        ChangepointOptions opt;
        if (c.restarts >= 0) opt.random_starts_per_quantile = c.restarts;
        opt.seed = c.mcmc.seed;
        fit = gp_cp_mle(property[j], d.model_domain, grid.points, opt);
        if (j == 0) write_phase_outputs(dir, points, fit.probs);
      }
      write_property_outputs(dir, points, j, fit.mean, fit.std,
                             Eigen::VectorXd::Constant(fit.mean.size(), fit.noise));
      record(fit, static_cast<int>(j));
    }
  }
  s["fits"] = fits;
  s["warnings"] = warnings;
  s["seed"] = c.mcmc.seed;
  write_text(dir / "summary.json", s.dump(2) + "\n");
  log << c.model << ": fitted " << fits.size() << " model(s)\n";
}

}  // namespace

void cmd_fit(const RunConfig& config, std::ostream& log) {
  config.validate();
  const LoadedData data = load_data(config);
  std::error_code ec;
  fs::create_directories(config.output_dir, ec);
  if (ec) throw FileError("cannot create output directory: " + config.output_dir.string());
  if (is_baseline(config.model)) {
    fit_baseline(config, data, log);
  } else {
    fit_sage(config, data, log);
  }
}

void cmd_synth(const std::string& case_name, std::uint64_t seed, const fs::path& out_dir) {
  write_case(out_dir, gen_case(case_name, seed));
}

// ---------------------------------------------------------------------------
// report

namespace {

// Lookup of grid rows by exact-ish coordinates.
class PointIndex {
 public:
  PointIndex(const Eigen::MatrixXd& points, const Domain& domain) : points_(points), domain_(domain) {
    for (Eigen::Index i = 0; i < points.rows(); ++i) map_.emplace(key(points.row(i)), i);
  }

  std::optional<Eigen::Index> find(const Eigen::RowVectorXd& x) const {
    auto it = map_.find(key(x));
    if (it != map_.end()) return it->second;
    for (Eigen::Index i = 0; i < points_.rows(); ++i) {
      if (scaled_distance(points_.row(i), x) <= 1e-9) return i;
    }
    return std::nullopt;
  }

  Eigen::Index nearest(const Eigen::RowVectorXd& x) const {
    if (auto hit = find(x)) return *hit;
    Eigen::Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < points_.rows(); ++i) {
      const double dist = scaled_distance(points_.row(i), x);
      if (dist < best_d) {
        best_d = dist;
        best = i;
      }
    }
    return best;
  }

 private:
  double scaled_distance(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) const {
    double s = 0.0;
    for (Eigen::Index k = 0; k < a.size(); ++k) {
      const double w = domain_.bounds[static_cast<std::size_t>(k)].width();
      s += std::pow((a[k] - b[k]) / w, 2);
    }
    return std::sqrt(s);
  }
  std::vector<long long> key(const Eigen::RowVectorXd& x) const {
    std::vector<long long> k;
    for (Eigen::Index d = 0; d < x.size(); ++d) {
      const auto& b = domain_.bounds[static_cast<std::size_t>(d)];
      k.push_back(std::llround((x[d] - b.lo) / b.width() * 1e9));
    }
    return k;
  }

  Eigen::MatrixXd points_;
  Domain domain_;
  std::map<std::vector<long long>, Eigen::Index> map_;
};

struct GridColumn {
  Eigen::MatrixXd points;
  Eigen::MatrixXd values;
};

GridColumn read_grid(const fs::path& path, Eigen::Index dim) {
  const NumericTable t = read_numeric_csv(path);
  if (t.values.cols() <= dim) throw DataError(path.string() + ": expected coordinate and value columns");
  return {t.values.leftCols(dim), t.values.rightCols(t.values.cols() - dim)};
}

std::string format_metric(const std::optional<double>& v) {
  if (!v) return "";
  return format_double(*v);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

bool labels_pinned(const std::string& model) {
  if (model == "gp-class") return true;
  if (is_baseline(model)) return false;
  return uses_structure(parse_model_kind(model));
}

}  // namespace

std::vector<ReportRow> cmd_report(const std::vector<fs::path>& runs, const std::optional<fs::path>& truth_dir,
                                  const std::optional<fs::path>& csv_out, std::ostream& out, std::ostream& log) {
  if (runs.empty()) throw ConfigError("report needs at least one run directory");
  std::vector<ReportRow> rows;
  std::size_t max_sources = 0;
  for (const auto& run : runs) {
    const json summary = read_json_file(run / "summary.json");
    const std::string model = summary.at("model").get<std::string>();
    const Domain domain = domain_from_json(summary.at("domain"));
    const Eigen::Index dim = domain.dim();
    const int regions = summary.at("regions").get<int>();

    std::optional<fs::path> tdir = truth_dir;
    if (!tdir && summary.contains("data_dir") && summary["data_dir"].is_string()) {
      fs::path candidate = summary["data_dir"].get<std::string>();
      if (fs::exists(candidate / "truth.csv")) tdir = candidate;
    }
    ReportRow row;
    row.algorithm = model;
    row.run = run.string();
    if (!tdir || !fs::exists(*tdir / "truth.csv")) {
      log << "warning: no ground truth for " << run.string() << "; metrics omitted\n";
      out << run.string() << " (" << model << ")";
      if (summary.contains("samples")) out << ": samples " << summary["samples"].get<std::size_t>();
      if (summary.contains("rhat")) out << ", R-hat " << summary["rhat"].get<double>();
      if (fs::exists(run / "phase_entropy.csv")) {
        const GridColumn e = read_grid(run / "phase_entropy.csv", dim);
        out << ", mean phase entropy " << e.values.col(0).mean();
      }
      if (fs::exists(run / "prop_0_std.csv")) {
        const GridColumn sd = read_grid(run / "prop_0_std.csv", dim);
        out << ", mean property std " << sd.values.col(0).mean();
      }
      out << "\n";
      row.case_name = "-";
      rows.push_back(row);
      continue;
    }

    const GridColumn truth = read_grid(*tdir / "truth.csv", dim);
    json meta;
    if (fs::exists(*tdir / "synth.json")) meta = read_json_file(*tdir / "synth.json");
    row.case_name = meta.contains("name") ? meta["name"].get<std::string>() : tdir->filename().string();
    std::vector<bool> r2_mask;
    if (meta.contains("mask_interval")) {
      const Interval excluded{meta["mask_interval"][0].get<double>(), meta["mask_interval"][1].get<double>()};
      r2_mask = mask_outside(truth.points, excluded);
    }

    std::vector<int> truth_labels;
    for (Eigen::Index i = 0; i < truth.values.rows(); ++i) truth_labels.push_back(static_cast<int>(truth.values(i, 0)));

    if (fs::exists(run / "phase_estimate.csv")) {
      const GridColumn est = read_grid(run / "phase_estimate.csv", dim);
      const PointIndex index(est.points, domain);
      std::vector<int> predicted;
      for (Eigen::Index i = 0; i < truth.points.rows(); ++i) {
        const auto hit = index.find(truth.points.row(i));
        if (!hit) throw DataError(run.string() + ": prediction grid does not cover the truth lattice");
        predicted.push_back(static_cast<int>(est.values(*hit, 0)));
      }
      row.accuracy = labels_pinned(model) ? accuracy(predicted, truth_labels)
                                          : permutation_accuracy(predicted, truth_labels, regions);
    }
    const std::size_t sources = static_cast<std::size_t>(truth.values.cols() - 1);
    max_sources = std::max(max_sources, sources);
    for (std::size_t j = 0; j < sources; ++j) {
      const fs::path mean_path = run / ("prop_" + std::to_string(j) + "_mean.csv");
      if (!fs::exists(mean_path)) {
        row.r2.push_back(std::nullopt);
        continue;
      }
      const GridColumn mean = read_grid(mean_path, dim);
      const PointIndex index(mean.points, domain);
      Eigen::VectorXd pred(truth.points.rows());
      for (Eigen::Index i = 0; i < truth.points.rows(); ++i) {
        const auto hit = index.find(truth.points.row(i));
        if (!hit) throw DataError(run.string() + ": prediction grid does not cover the truth lattice");
        pred[i] = mean.values(*hit, 0);
      }
      row.r2.push_back(r_squared(pred, truth.values.col(static_cast<Eigen::Index>(j) + 1), r2_mask));
    }
    rows.push_back(row);
  }

  if (csv_out) {
    std::ofstream csv(*csv_out);
    if (!csv) throw FileError("cannot write file: " + csv_out->string());
    csv << "case,algorithm,run,accuracy";
    for (std::size_t j = 0; j < max_sources; ++j) csv << ",r2_" << j;
    csv << "\n";
    for (const auto& r : rows) {
      csv << r.case_name << "," << r.algorithm << "," << r.run << "," << format_metric(r.accuracy);
      for (std::size_t j = 0; j < max_sources; ++j) csv << "," << (j < r.r2.size() ? format_metric(r.r2[j]) : "");
      csv << "\n";
    }
  }

  // Algorithm x case grid of medians over runs.
  std::vector<std::string> cases, algorithms;
  for (const auto& r : rows) {
    if (r.case_name == "-") continue;
    if (std::find(cases.begin(), cases.end(), r.case_name) == cases.end()) cases.push_back(r.case_name);
    if (std::find(algorithms.begin(), algorithms.end(), r.algorithm) == algorithms.end()) {
      algorithms.push_back(r.algorithm);
    }
  }
  if (cases.empty()) return rows;
  auto cell = [](const std::vector<double>& v) {
    if (v.empty()) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << median(v);
    return s.str();
  };
  out << std::left << std::setw(14) << "algorithm";
  for (const auto& cs : cases) out << std::setw(16) << (cs + " acc") << std::setw(16) << (cs + " R2");
  out << "\n";
  for (const auto& alg : algorithms) {
    out << std::setw(14) << alg;
    for (const auto& cs : cases) {
      std::vector<double> acc, r2;
      for (const auto& r : rows) {
        if (r.algorithm != alg || r.case_name != cs) continue;
        if (r.accuracy) acc.push_back(*r.accuracy);
        if (!r.r2.empty() && r.r2[0]) r2.push_back(*r.r2[0]);
      }
      out << std::setw(16) << cell(acc) << std::setw(16) << cell(r2);
    }
    out << "\n";
  }
  return rows;
}

// ---------------------------------------------------------------------------
// predict

void cmd_predict(const fs::path& run_dir, const fs::path& points_csv, double coverage, bool variance_sum,
                 const fs::path& out_csv) {
  const json summary = read_json_file(run_dir / "summary.json");
  const Domain domain = domain_from_json(summary.at("domain"));
  const Eigen::Index dim = domain.dim();
  const NumericTable query = read_numeric_csv(points_csv);
  if (query.values.cols() != dim) {
    throw DataError(points_csv.string() + ": expected " + std::to_string(dim) + " coordinate columns");
  }
  for (Eigen::Index i = 0; i < query.values.rows(); ++i) {
    if (!domain.contains(query.values.row(i))) {
      throw DataError(points_csv.string() + ": point " + std::to_string(i + 1) + " lies outside the domain");
    }
  }

  std::optional<GridColumn> probs;
  if (fs::exists(run_dir / "phase_pM.csv")) probs = read_grid(run_dir / "phase_pM.csv", dim);
  PosteriorSummary post;
  Eigen::MatrixXd grid_points;
  for (std::size_t j = 0;; ++j) {
    const std::string stem = "prop_" + std::to_string(j);
    if (!fs::exists(run_dir / (stem + "_mean.csv"))) break;
    const GridColumn mean = read_grid(run_dir / (stem + "_mean.csv"), dim);
    const GridColumn sd = read_grid(run_dir / (stem + "_std.csv"), dim);
    const GridColumn noise = read_grid(run_dir / (stem + "_noise.csv"), dim);
    if (sd.points != mean.points || noise.points != mean.points) {
      throw DataError(run_dir.string() + ": property grids of source " + std::to_string(j) + " disagree");
    }
    grid_points = mean.points;
    post.mu_hat.push_back(mean.values.col(0));
    post.sigma_hat.push_back(sd.values.col(0));
    post.noise_hat.push_back(noise.values.col(0));
  }
  if (!probs && post.mu_hat.empty()) throw FileError(run_dir.string() + ": no fitted grid outputs found");

  std::vector<Interval1D> intervals;
  for (std::size_t j = 0; j < post.mu_hat.size(); ++j) {
    intervals.push_back(predictive_interval(post, j, coverage, variance_sum));
  }
  std::optional<PointIndex> phase_index, prop_index;
  if (probs) phase_index.emplace(probs->points, domain);
  if (!post.mu_hat.empty()) prop_index.emplace(grid_points, domain);

  std::ofstream out(out_csv);
  if (!out) throw FileError("cannot write file: " + out_csv.string());
  for (Eigen::Index d = 0; d < dim; ++d) out << "x" << d + 1 << ",";
  std::vector<std::string> cols;
  if (probs) {
    cols.push_back("label");
    for (Eigen::Index r = 0; r < probs->values.cols(); ++r) cols.push_back("p" + std::to_string(r));
    cols.push_back("entropy");
  }
  for (std::size_t j = 0; j < post.mu_hat.size(); ++j) {
    for (const char* name : {"mean", "std", "noise", "lo", "hi"}) {
      cols.push_back("prop_" + std::to_string(j) + "_" + name);
    }
  }
  for (std::size_t k = 0; k < cols.size(); ++k) out << cols[k] << (k + 1 < cols.size() ? "," : "\n");
  for (Eigen::Index i = 0; i < query.values.rows(); ++i) {
    const Eigen::RowVectorXd x = query.values.row(i);
    for (Eigen::Index d = 0; d < dim; ++d) out << format_double(x[d]) << ",";
    std::vector<std::string> fields;
    if (probs) {
      const Eigen::Index g = phase_index->nearest(x);
      const Eigen::MatrixXd p = probs->values.row(g);
      fields.push_back(std::to_string(argmax_rows(p)[0]));
      for (Eigen::Index r = 0; r < p.cols(); ++r) fields.push_back(format_double(p(0, r)));
      fields.push_back(format_double(row_entropy(p)[0]));
    }
    if (prop_index) {
      const Eigen::Index g = prop_index->nearest(x);
      for (std::size_t j = 0; j < post.mu_hat.size(); ++j) {
        fields.push_back(format_double(post.mu_hat[j][g]));
        fields.push_back(format_double(post.sigma_hat[j][g]));
        fields.push_back(format_double(post.noise_hat[j][g]));
        fields.push_back(format_double(intervals[j].lo[g]));
        fields.push_back(format_double(intervals[j].hi[g]));
      }
    }
    for (std::size_t k = 0; k < fields.size(); ++k) out << fields[k] << (k + 1 < fields.size() ? "," : "\n");
  }
}

// ---------------------------------------------------------------------------
// argument parsing

int run(int argc, char** argv) {
  CLI::App app{"SAGE: joint Bayesian phase-map and property-map inference"};
  app.require_subcommand(1);

  auto* fit = app.add_subcommand("fit", "Run a model on data files and write posterior grids");
  std::string config_path, data_dir, model, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations, burn_in, thinning, chains, threads, restarts;
  std::vector<int> resolution;
  bool scale_inputs = false;
  fit->add_option("-c,--config", config_path, "Run config JSON (schema/run_config.schema.json)");
  fit->add_option("-d,--data", data_dir, "Synthetic case directory written by `sage synth`");
  fit->add_option("-m,--model", model,
                  "sage-1d | sage-nd | sage-1d-pm | sage-1d-fp | sage-nd-pm | sage-nd-fp | gp-cp | gp-reg | gp-class");
  fit->add_option("-o,--out", out_dir, "Output directory");
  fit->add_option("--seed", seed, "Random seed");
  fit->add_option("--iterations", iterations, "MCMC iterations per chain");
  fit->add_option("--burn-in", burn_in, "Burn-in iterations per chain");
  fit->add_option("--thinning", thinning, "Keep every n-th post burn-in state");
  fit->add_option("--chains", chains, "Independent chains");
  fit->add_option("--threads", threads, "Worker threads (default: SAGE_THREADS or all cores)");
  fit->add_option("--restarts", restarts, "Optimizer restarts for gp-* baselines");
  fit->add_option("--resolution", resolution, "Lattice points per dimension");
  fit->add_flag("--scale-inputs", scale_inputs, "Min-max scale inputs onto the unit cube");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic benchmark case");
  std::string case_name, synth_out;
  std::uint64_t synth_seed = 0;
  synth->add_option("case", case_name, "edge1d-1 | edge1d-2 | edge2d-1 | edge2d-2 | multisource-2d")->required();
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("-o,--out", synth_out, "Output directory")->required();

  auto* report = app.add_subcommand("report", "Score fitted runs against ground truth");
  std::vector<std::string> run_dirs;
  std::string truth, report_csv;
  report->add_option("runs", run_dirs, "Run directories")->required();
  report->add_option("-t,--truth", truth, "Synthetic case directory holding truth.csv");
  report->add_option("-o,--out", report_csv, "Write the metrics table as CSV");

  auto* predict = app.add_subcommand("predict", "Evaluate a fitted run at new points");
  std::string predict_run, points, predict_out;
  double coverage = 0.95;
  bool variance_sum = false;
  predict->add_option("run", predict_run, "Run directory")->required();
  predict->add_option("-p,--points", points, "CSV with header x1..xd")->required();
  predict->add_option("--coverage", coverage, "Predictive interval coverage")->check(CLI::Range(0.0, 1.0));
  predict->add_flag("--variance-sum", variance_sum, "Combine std and noise in quadrature");
  predict->add_option("-o,--out", predict_out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (fit->parsed()) {
      RunConfig c;
      if (!config_path.empty()) {
        c = load_run_config(config_path);
      }
      if (!data_dir.empty()) apply_data_dir(c, data_dir);
      if (!model.empty()) c.model = model;
      if (!out_dir.empty()) c.output_dir = out_dir;
      if (seed) c.mcmc.seed = *seed;
      if (iterations) c.mcmc.iterations = *iterations;
      if (burn_in) c.mcmc.burn_in = *burn_in;
      if (thinning) c.mcmc.thinning = *thinning;
      if (chains) c.mcmc.chains = *chains;
      if (threads) c.threads = *threads;
      if (restarts) c.restarts = *restarts;
      if (!resolution.empty()) c.resolution = resolution;
      if (scale_inputs) c.scale_inputs = true;
      if (config_path.empty() && data_dir.empty()) {
        throw ConfigError("fit needs --config or --data");
      }
      cmd_fit(c, std::cerr);
    } else if (synth->parsed()) {
      cmd_synth(case_name, synth_seed, synth_out);
    } else if (report->parsed()) {
      std::vector<fs::path> runs(run_dirs.begin(), run_dirs.end());
      std::optional<fs::path> t = truth.empty() ? std::nullopt : std::optional<fs::path>(truth);
      std::optional<fs::path> csv = report_csv.empty() ? std::nullopt : std::optional<fs::path>(report_csv);
      cmd_report(runs, t, csv, std::cout, std::cerr);
    } else if (predict->parsed()) {
      cmd_predict(predict_run, points, coverage, variance_sum, predict_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}

}  // namespace sage::cli
