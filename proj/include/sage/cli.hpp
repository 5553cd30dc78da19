#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sage/data.hpp"
#include "sage/inference.hpp"

namespace sage::cli {

// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitFile = 2,       // missing or unwritable file
  kExitData = 3,       // malformed or invalid data
  kExitConfig = 4,     // invalid configuration or priors
  kExitNumerical = 5,  // Cholesky failure after jitter
  kExitInference = 6,  // no valid initial state / chain failure
  kExitUsage = 7,      // bad command-line arguments
};

int exit_code_for(const std::exception& e);

// Everything `fit` needs. Relative paths in a config file are resolved against
// the file's directory. Schema: schema/run_config.schema.json.
struct RunConfig {
  std::string model;  // SAGE kind or gp-cp | gp-reg | gp-class
  Domain domain;
  int regions = 2;
  std::vector<std::filesystem::path> structure_files;
  std::vector<std::filesystem::path> property_files;
  std::string priors_json = "{}";
  McmcSettings mcmc;
  std::vector<int> resolution;
  std::filesystem::path output_dir = "sage_out";
  // Synthetic case directory; its synth.json supplies defaults and ground truth.
  std::optional<std::filesystem::path> data_dir;
  bool scale_inputs = false;
  double label_noise_floor = 0.0;
  int restarts = -1;  // baselines; negative keeps each baseline's default
  int threads = 0;

  // Checks model/dimension compatibility, required data and that files exist.
  void validate() const;
};

bool is_baseline(const std::string& model);

// Reads a run config file.
RunConfig load_run_config(const std::filesystem::path& path);
// Fills unset fields (domain, resolution, files, regions) from a synthetic
// case directory.
void apply_data_dir(RunConfig& config, const std::filesystem::path& dir);

// Runs the configured model and writes its artifacts into output_dir.
void cmd_fit(const RunConfig& config, std::ostream& log);

void cmd_synth(const std::string& case_name, std::uint64_t seed, const std::filesystem::path& out_dir);

struct ReportRow {
  std::string case_name;
  std::string algorithm;
  std::string run;
  std::optional<double> accuracy;
  std::vector<std::optional<double>> r2;  // per property source
};

// Scores each run directory against ground truth (the explicit truth dir, or
// the run's data dir when it holds truth.csv). Writes a CSV when `csv_out` is
// set and prints an algorithm x case table to `out`.
std::vector<ReportRow> cmd_report(const std::vector<std::filesystem::path>& runs,
                                  const std::optional<std::filesystem::path>& truth_dir,
                                  const std::optional<std::filesystem::path>& csv_out, std::ostream& out,
                                  std::ostream& log);

// Evaluates a fitted run at new points by nearest grid point.
void cmd_predict(const std::filesystem::path& run_dir, const std::filesystem::path& points_csv,
                 double coverage, bool variance_sum, const std::filesystem::path& out_csv);

// Parses arguments and dispatches; returns the process exit code.
int run(int argc, char** argv);

}  // namespace sage::cli
