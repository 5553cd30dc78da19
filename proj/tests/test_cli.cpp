#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "sage/cli.hpp"
#include "sage/error.hpp"

namespace fs = std::filesystem;
using namespace sage;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Workspace {
 public:
  Workspace() : root_(fs::temp_directory_path() / ("sage_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Workspace() { fs::remove_all(root_); }
  const fs::path& root() const { return root_; }

  Result run(const std::string& args) const {
    const char* exe = std::getenv("SAGE_CLI");
    REQUIRE_MESSAGE(exe != nullptr, "SAGE_CLI must point at the sage executable");
    const fs::path out = root_ / "stdout.txt";
    const fs::path err = root_ / "stderr.txt";
    const std::string cmd = std::string(exe) + " " + args + " > " + out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

 private:
  fs::path root_;
};

const Workspace& workspace() {
  static Workspace w;
  return w;
}

std::string p(const fs::path& path) { return path.string(); }

const std::string kShortRun = " --iterations 1500 --burn-in 500 --thinning 5 --chains 2 --threads 1 --seed 3";

}  // namespace

TEST_CASE("synth writes the documented file sets") {
  const auto& w = workspace();
  for (const std::string name : {"edge1d-1", "edge1d-2", "multisource-2d"}) {
    const fs::path dir = w.root() / ("synth_" + name);
    const auto r = w.run("synth " + name + " --seed 2 -o " + p(dir));
    REQUIRE(r.code == 0);
    const int sources = name == "multisource-2d" ? 2 : 1;
    for (int i = 0; i < sources; ++i) {
      CHECK(fs::exists(dir / ("structure_" + std::to_string(i) + ".csv")));
      CHECK(fs::exists(dir / ("property_" + std::to_string(i) + ".csv")));
    }
    CHECK_FALSE(fs::exists(dir / ("structure_" + std::to_string(sources) + ".csv")));
    CHECK(fs::exists(dir / "truth.csv"));
    const auto meta = nlohmann::json::parse(slurp(dir / "synth.json"));
    CHECK(meta["name"] == name);
    CHECK(meta["structure_files"].size() == static_cast<std::size_t>(sources));
    CHECK(meta.contains("mask_interval") == (name != "multisource-2d"));
  }
  const fs::path again = w.root() / "synth_again";
  REQUIRE(w.run("synth edge1d-1 --seed 2 -o " + p(again)).code == 0);
  CHECK(slurp(again / "property_0.csv") == slurp(w.root() / "synth_edge1d-1" / "property_0.csv"));
  CHECK(slurp(again / "truth.csv") == slurp(w.root() / "synth_edge1d-1" / "truth.csv"));
}

TEST_CASE("fit writes posterior artifacts and reruns byte-identically") {
  const auto& w = workspace();
  const fs::path data = w.root() / "fit_data";
  REQUIRE(w.run("synth edge1d-1 --seed 1 -o " + p(data)).code == 0);
  const fs::path a = w.root() / "fit_a";
  const fs::path b = w.root() / "fit_b";
  const auto ra = w.run("fit -d " + p(data) + " -m sage-1d -o " + p(a) + kShortRun);
  INFO(ra.err);
  REQUIRE(ra.code == 0);
  REQUIRE(w.run("fit -d " + p(data) + " -m sage-1d -o " + p(b) + kShortRun).code == 0);
  for (const char* f : {"phase_pM.csv", "phase_estimate.csv", "phase_entropy.csv", "prop_0_mean.csv",
                        "prop_0_std.csv", "prop_0_noise.csv", "summary.json", "chain.jsonl", "changepoints.csv",
                        "changepoint_hist.csv"}) {
    INFO(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  const auto summary = nlohmann::json::parse(slurp(a / "summary.json"));
  CHECK(summary["model"] == "sage-1d");
  CHECK(summary["samples"] == 400);
  CHECK(summary["grid_points"].get<int>() >= 101);

  // Header plus one row per lattice point and data point.
  std::istringstream est(slurp(a / "phase_estimate.csv"));
  std::string line;
  std::getline(est, line);
  CHECK(line == "x1,label");
  int rows = 0;
  while (std::getline(est, line)) ++rows;
  CHECK(rows == summary["grid_points"].get<int>());
}

TEST_CASE("fit from a config file") {
  const auto& w = workspace();
  const fs::path data = w.root() / "cfg_data";
  REQUIRE(w.run("synth edge2d-1 --seed 1 -o " + p(data)).code == 0);
  const fs::path cfg = w.root() / "run.json";
  std::ofstream(cfg) << R"({"model": "gp-reg", "domain": [[0, 1], [0, 1]], "property": ")" << p(data / "property_0.csv")
                     << R"(", "resolution": [12, 12], "output": ")" << p(w.root() / "cfg_out")
                     << R"(", "baseline": {"restarts": 3}})";
  const auto r = w.run("fit -c " + p(cfg));
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(w.root() / "cfg_out" / "prop_0_mean.csv"));
  CHECK_FALSE(fs::exists(w.root() / "cfg_out" / "phase_pM.csv"));
}

TEST_CASE("report scores runs against ground truth") {
  const auto& w = workspace();
  const fs::path data = w.root() / "report_data";
  REQUIRE(w.run("synth edge1d-1 --seed 4 -o " + p(data)).code == 0);
  for (const std::string model : {"sage-1d", "gp-cp", "sage-1d-pm"}) {
    const auto r = w.run("fit -d " + p(data) + " -m " + model + " -o " + p(w.root() / ("run_" + model)) + kShortRun);
    INFO(r.err);
    REQUIRE(r.code == 0);
  }
  const fs::path csv = w.root() / "report.csv";
  const auto r = w.run("report " + p(w.root() / "run_sage-1d") + " " + p(w.root() / "run_gp-cp") + " " +
                       p(w.root() / "run_sage-1d-pm") + " -o " + p(csv));
  INFO(r.err);
  REQUIRE(r.code == 0);
  std::istringstream lines(slurp(csv));
  std::string line;
  std::getline(lines, line);
  CHECK(line == "case,algorithm,run,accuracy,r2_0");
  std::vector<std::string> algs;
  while (std::getline(lines, line)) {
    CHECK(line.rfind("edge1d-1,", 0) == 0);
    algs.push_back(line.substr(9, line.find(',', 9) - 9));
  }
  CHECK(algs == std::vector<std::string>{"sage-1d", "gp-cp", "sage-1d-pm"});
  CHECK(r.out.find("algorithm") != std::string::npos);
  CHECK(r.out.find("gp-cp") != std::string::npos);
}

TEST_CASE("report rows and missing-truth fallback") {
  const auto& w = workspace();
  const fs::path data = w.root() / "report_data";
  REQUIRE(fs::exists(w.root() / "run_sage-1d"));
  std::ostringstream out, log;
  const auto rows = cli::cmd_report({w.root() / "run_sage-1d", w.root() / "run_gp-cp", w.root() / "run_sage-1d-pm"},
                                    std::nullopt, w.root() / "report2.csv", out, log);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].algorithm == "sage-1d");
  CHECK(rows[1].algorithm == "gp-cp");
  for (const auto& row : rows) {
    CHECK(row.case_name == "edge1d-1");
    REQUIRE(row.accuracy.has_value());
    CHECK(*row.accuracy >= 0.0);
    CHECK(*row.accuracy <= 1.0);
  }
  CHECK(rows[0].r2.at(0).has_value());
  CHECK(rows[1].r2.at(0).has_value());
  CHECK_FALSE(rows[2].r2.at(0).has_value());
  CHECK(out.str().find("sage-1d") != std::string::npos);
  CHECK(out.str().find("edge1d-1 R2") != std::string::npos);
  CHECK(log.str().empty());
  const std::string csv = slurp(w.root() / "report2.csv");
  CHECK(csv.rfind("case,algorithm,run,accuracy,r2_0\n", 0) == 0);

  // A run fitted from plain files carries no truth.
  const fs::path cfg = w.root() / "notruth.json";
  std::ofstream(cfg) << R"({"model": "sage-1d-pm", "domain": [[0, 1]], "structure": ")"
                     << p(data / "structure_0.csv") << R"(", "output": ")" << p(w.root() / "notruth")
                     << R"(", "mcmc": {"iterations": 600, "burn_in": 200, "thinning": 4, "chains": 1}})";
  REQUIRE(w.run("fit -c " + p(cfg)).code == 0);
  std::ostringstream out2, log2;
  const auto bare = cli::cmd_report({w.root() / "notruth"}, std::nullopt, std::nullopt, out2, log2);
  REQUIRE(bare.size() == 1);
  CHECK_FALSE(bare[0].accuracy.has_value());
  CHECK(log2.str().find("warning: no ground truth") != std::string::npos);
  CHECK(out2.str().find("mean phase entropy") != std::string::npos);
  CHECK(out2.str().find("samples 100") != std::string::npos);
  // An explicit truth directory restores the metrics.
  std::ostringstream out3, log3;
  const auto with = cli::cmd_report({w.root() / "notruth"}, data, std::nullopt, out3, log3);
  CHECK(with[0].accuracy.has_value());
}

TEST_CASE("predict evaluates a fitted run at new points") {
  const auto& w = workspace();
  REQUIRE(fs::exists(w.root() / "run_sage-1d"));
  const fs::path pts = w.root() / "points.csv";
  std::ofstream(pts) << "x1\n0.1\n0.5\n0.95\n";
  const fs::path out = w.root() / "pred.csv";
  const auto r = w.run("predict " + p(w.root() / "run_sage-1d") + " -p " + p(pts) + " -o " + p(out));
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto t = read_numeric_csv(out);
  CHECK(t.header == std::vector<std::string>{"x1", "label", "p0", "p1", "entropy", "prop_0_mean", "prop_0_std",
                                             "prop_0_noise", "prop_0_lo", "prop_0_hi"});
  REQUIRE(t.values.rows() == 3);
  CHECK(t.values(0, 1) == 0.0);
  CHECK(t.values(2, 1) == 1.0);
  for (Eigen::Index i = 0; i < 3; ++i) {
    CHECK(t.values(i, 2) + t.values(i, 3) == doctest::Approx(1.0));
    CHECK(t.values(i, 8) <= t.values(i, 5));
    CHECK(t.values(i, 9) >= t.values(i, 5));
  }
  std::ofstream(pts) << "x1\n1.5\n";
  CHECK(w.run("predict " + p(w.root() / "run_sage-1d") + " -p " + p(pts) + " -o " + p(out)).code ==
        cli::kExitData);
}

TEST_CASE("error paths map to distinct exit codes") {
  const auto& w = workspace();
  const fs::path dir = w.root() / "errors";
  fs::create_directories(dir);
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return p(dir / name);
  };

  // Missing data file: exit 2 and the message names the path.
  const std::string missing = p(dir / "nowhere.csv");
  const std::string cfg_missing = write(
      "missing.json", R"({"model": "sage-1d-pm", "domain": [[0, 1]], "structure": ")" + missing + "\"}");
  const auto r2 = w.run("fit -c " + cfg_missing);
  CHECK(r2.code == cli::kExitFile);
  CHECK(r2.err.find(missing) != std::string::npos);

  // Malformed data row.
  const std::string bad_csv = write("bad.csv", "x1,label\n0.1,0\n0.5,abc\n");
  const auto r3 = w.run("fit -c " + write("bad.json", R"({"model": "sage-1d-pm", "domain": [[0, 1]], "structure": ")" +
                                                         bad_csv + "\"}"));
  CHECK(r3.code == cli::kExitData);
  CHECK(r3.err.find("bad.csv:3") != std::string::npos);

  // Invalid configuration: unknown key, malformed JSON, model/domain mismatch.
  CHECK(w.run("fit -c " + write("unknown.json", R"({"model": "sage-1d", "colour": 1})")).code == cli::kExitConfig);
  CHECK(w.run("fit -c " + write("broken.json", "{\"model\": ")).code == cli::kExitConfig);
  const std::string ok_csv = write("ok.csv", "x1,x2,label\n0.1,0.1,0\n0.9,0.9,1\n");
  CHECK(w.run("fit -c " + write("dim.json", R"({"model": "sage-1d-pm", "domain": [[0, 1], [0, 1]], "structure": ")" +
                                               ok_csv + "\"}"))
            .code == cli::kExitConfig);

  // Contradictory hard labels leave no valid initial state.
  const std::string clash = write("clash.csv", "x1,label\n0.2,1\n0.4,0\n0.6,1\n");
  const auto r6 = w.run("fit -c " + write("clash.json", R"({"model": "sage-1d-pm", "domain": [[0, 1]], "structure": ")" +
                                                           clash + R"(", "output": ")" + p(dir / "out") + "\"}"));
  CHECK(r6.code == cli::kExitInference);
  CHECK(r6.err.find("label noise floor") != std::string::npos);

  // Bad command line.
  CHECK(w.run("fit --no-such-flag").code == cli::kExitUsage);
  CHECK(w.run("synth").code == cli::kExitUsage);
  CHECK(w.run("synth edge9 -o " + p(dir / "x")).code == cli::kExitConfig);
  CHECK(w.run("--help").code == cli::kExitOk);

  std::set<int> codes;
  codes.insert(cli::exit_code_for(FileError("f")));
  codes.insert(cli::exit_code_for(DataError("d")));
  codes.insert(cli::exit_code_for(ConfigError("c")));
  codes.insert(cli::exit_code_for(NumericalError("n")));
  codes.insert(cli::exit_code_for(InferenceError("i")));
  codes.insert(cli::exit_code_for(std::runtime_error("x")));
  codes.insert(cli::kExitUsage);
  CHECK(codes.size() == 7);
  CHECK(codes.count(cli::kExitOk) == 0);
}
