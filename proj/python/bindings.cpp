#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sage/baselines.hpp"
#include "sage/cli.hpp"
#include "sage/error.hpp"
#include "sage/posterior.hpp"
#include "sage/synthetic.hpp"

namespace py = pybind11;
using namespace sage;

namespace {

using StructureInput = std::vector<std::pair<Eigen::MatrixXd, std::vector<int>>>;
using PropertyInput = std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>>;

Domain domain_from(const std::vector<std::pair<double, double>>& bounds) {
  Domain d;
  for (const auto& [lo, hi] : bounds) d.bounds.push_back({lo, hi});
  d.validate();
  return d;
}

std::vector<StructureDataset> structure_from(const StructureInput& in) {
  std::vector<StructureDataset> out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out.push_back({"structure_" + std::to_string(i), in[i].first, in[i].second});
  }
  return out;
}

std::vector<PropertyDataset> property_from(const PropertyInput& in) {
  std::vector<PropertyDataset> out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out.push_back({"property_" + std::to_string(i), in[i].first, in[i].second});
  }
  return out;
}

py::dict case_dict(const SyntheticCase& c) {
  py::dict d;
  d["name"] = c.name;
  d["seed"] = c.seed;
  py::list domain;
  for (const auto& b : c.domain.bounds) domain.append(py::make_tuple(b.lo, b.hi));
  d["domain"] = domain;
  d["regions"] = c.regions;
  py::list structure, property;
  for (const auto& s : c.structure) structure.append(py::make_tuple(s.points, s.labels));
  for (const auto& p : c.property) property.append(py::make_tuple(p.points, p.values));
  d["structure"] = structure;
  d["property"] = property;
  d["resolution"] = c.default_resolution;
  d["changepoint"] = c.changepoint ? py::cast(*c.changepoint) : py::none();
  d["mask_interval"] =
      c.mask_interval ? py::cast(std::make_pair(c.mask_interval->lo, c.mask_interval->hi)) : py::none();
  return d;
}

py::dict truth(const std::string& name, std::uint64_t seed, const Eigen::MatrixXd& points) {
  const auto t = evaluate_truth(gen_case(name, seed), points);
  py::dict d;
  d["labels"] = t.labels;
  d["values"] = t.values;
  return d;
}

py::dict fit(const std::string& model, const std::vector<std::pair<double, double>>& bounds,
             const StructureInput& structure, const PropertyInput& property, int regions,
             std::vector<int> resolution, int iterations, int burn_in, int thinning, int chains,
             std::uint64_t seed, int threads, const std::string& priors, double label_noise_floor) {
  const ModelKind kind = parse_model_kind(model);
  const Domain dom = domain_from(bounds);
  auto s = structure_from(structure);
  auto p = property_from(property);
  for (const auto& d : s) validate_structure(d, dom, regions);
  for (const auto& d : p) validate_property(d, dom);
  if (resolution.empty()) resolution.assign(static_cast<std::size_t>(dom.dim()), dom.dim() == 1 ? 101 : 30);
  PredictionGrid grid = build_grid(dom, resolution, collect_points(s, p));
  const PriorConfig pr = priors_from_json(priors, dom, regions, p);
  ModelOptions opts;
  opts.label_noise_floor = label_noise_floor;
  const SageModel m(kind, dom, pr, std::move(s), std::move(p), grid, opts);
  McmcSettings st;
  st.iterations = iterations;
  st.burn_in = burn_in;
  st.thinning = thinning;
  st.chains = chains;
  st.seed = seed;
  st.validate();

  Chain chain;
  PosteriorSummary summary;
  {
    py::gil_scoped_release release;
    chain = run_chain(m, st, threads);
    summary = summarize(m, chain);
  }
  py::dict d;
  d["points"] = grid.points;
  d["p_mean"] = summary.p_mean;
  d["phase"] = summary.phase_estimate;
  d["entropy"] = summary.phase_entropy;
  d["mu"] = summary.mu_hat;
  d["sigma"] = summary.sigma_hat;
  d["noise"] = summary.noise_hat;
  d["samples"] = summary.samples;
  d["rhat"] = chain.rhat;
  d["warnings"] = chain.warnings;
  std::vector<double> log_lik;
  for (const auto& state : chain.states) log_lik.push_back(state.log_lik);
  d["log_lik"] = log_lik;
  if (is_one_dimensional(kind)) {
    const auto cp = changepoint_posterior_1d(chain, dom.bounds[0]);
    d["changepoints"] = cp.samples;
  }
  return d;
}

py::dict mle_dict(const MleFit& f) {
  py::dict d;
  d["algorithm"] = f.algorithm;
  d["hyper"] = f.hyper;
  d["log_marginal"] = f.log_marginal;
  d["mean"] = f.mean;
  d["std"] = f.std;
  d["noise"] = f.noise;
  d["probs"] = f.probs;
  d["changepoint"] = f.changepoint ? py::cast(*f.changepoint) : py::none();
  d["warnings"] = f.warnings;
  return d;
}

int main_entry(std::vector<std::string> args) {
  args.insert(args.begin(), "sage");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

PYBIND11_MODULE(_sage, m) {
  m.doc() = "SAGE phase-map and property-map inference";

  py::register_exception<FileError>(m, "FileError", PyExc_OSError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<InferenceError>(m, "InferenceError", PyExc_RuntimeError);

  m.def("case_names", &synthetic_case_names);
  m.def("synthetic_case", [](const std::string& name, std::uint64_t seed) { return case_dict(gen_case(name, seed)); },
        py::arg("name"), py::arg("seed") = 0);
  m.def("truth", &truth, py::arg("name"), py::arg("seed"), py::arg("points"));

  m.def("fit", &fit, py::arg("model"), py::arg("domain"), py::arg("structure") = StructureInput{},
        py::arg("property") = PropertyInput{}, py::arg("regions") = 2, py::arg("resolution") = std::vector<int>{},
        py::arg("iterations") = 20000, py::arg("burn_in") = 10000, py::arg("thinning") = 10,
        py::arg("chains") = 2, py::arg("seed") = 0, py::arg("threads") = 0, py::arg("priors") = "{}",
        py::arg("label_noise_floor") = 0.0);

  m.def(
      "gp_regression",
      [](const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<std::pair<double, double>>& bounds,
         const Eigen::MatrixXd& grid, int restarts, std::uint64_t seed) {
        RegressionOptions o;
        o.restarts = restarts;
        o.seed = seed;
        return mle_dict(gp_regression_mle({"property_0", x, y}, domain_from(bounds), grid, o));
      },
      py::arg("x"), py::arg("y"), py::arg("domain"), py::arg("grid"), py::arg("restarts") = 16,
      py::arg("seed") = 0);
  m.def(
      "gp_changepoint",
      [](const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<std::pair<double, double>>& bounds,
         const Eigen::MatrixXd& grid, std::uint64_t seed) {
        ChangepointOptions o;
        o.seed = seed;
        return mle_dict(gp_cp_mle({"property_0", x, y}, domain_from(bounds), grid, o));
      },
      py::arg("x"), py::arg("y"), py::arg("domain"), py::arg("grid"), py::arg("seed") = 0);
  m.def(
      "gp_classification",
      [](const StructureInput& structure, int regions, const std::vector<std::pair<double, double>>& bounds,
         const Eigen::MatrixXd& grid, std::uint64_t seed) {
        ClassificationOptions o;
        o.seed = seed;
        return mle_dict(gp_classification_mle(structure_from(structure), regions, domain_from(bounds), grid, o));
      },
      py::arg("structure"), py::arg("regions"), py::arg("domain"), py::arg("grid"), py::arg("seed") = 0);

  m.def("accuracy", [](const std::vector<int>& p, const std::vector<int>& t) { return accuracy(p, t); });
  m.def("permutation_accuracy", [](const std::vector<int>& p, const std::vector<int>& t, int regions) {
    return permutation_accuracy(p, t, regions);
  });
  m.def("r_squared", [](const Eigen::VectorXd& p, const Eigen::VectorXd& t) { return r_squared(p, t); });
  m.def("wasserstein_1d", &wasserstein_1d);

  m.def("main", &main_entry, py::arg("args"), "Run the command-line interface; returns the exit code.");
}
