#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sage/data.hpp"
#include "sage/kernels.hpp"
#include "sage/property_model.hpp"
#include "sage/random.hpp"
#include "sage/segmentation.hpp"

namespace sage {

// SAGE variants: joint model and the structure-only (PM) and property-only
// (FP) ablations, in 1-D (changepoints) and N-D (latent softmax field) forms.
enum class ModelKind { Sage1D, SageND, Sage1DPM, Sage1DFP, SageNDPM, SageNDFP };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);
bool is_one_dimensional(ModelKind kind);
bool uses_structure(ModelKind kind);
bool uses_property(ModelKind kind);
LikelihoodTerms likelihood_terms(ModelKind kind);

struct SegmentationParams {
  Changepoints1D changepoints;  // 1-D models
  KernelParams hyper;           // N-D models: Matern 5/2 lengthscales and std
  Eigen::MatrixXd whitened;     // N-D models: anchors x R
};

// One draw of every model parameter. Whitened vectors cover the anchor rows
// of the grid; the remaining grid rows are regenerated from `tail_seed`.
struct ParameterState {
  SegmentationParams seg;
  PropertyParams prop;
  std::uint64_t tail_seed = 0;
  double log_lik = kNegInf;
  double log_lik_structure = 0.0;
  double log_lik_property = 0.0;
};

struct ModelOptions {
  double label_noise_floor = 0.0;
  double base_jitter = kDefaultBaseJitter;
  int init_retries = 200;
};

struct LikelihoodParts {
  double structure = 0.0;
  double property = 0.0;
  double total = kNegInf;
};

// Region field and piecewise property functions over the full grid.
struct GridState {
  RegionField field;
  PiecewiseFunction property;
  std::vector<double> noise;
};

// Data, priors and grid for one model kind. Datasets the kind does not use are
// dropped at construction.
class SageModel {
 public:
  SageModel(ModelKind kind, Domain domain, PriorConfig priors,
            std::vector<StructureDataset> structure, std::vector<PropertyDataset> property,
            PredictionGrid grid, ModelOptions options = {});

  ModelKind kind() const { return kind_; }
  const Domain& domain() const { return domain_; }
  const PriorConfig& priors() const { return priors_; }
  const PredictionGrid& grid() const { return grid_; }
  const ModelOptions& options() const { return options_; }
  const std::vector<StructureDataset>& structure() const { return structure_; }
  const std::vector<PropertyDataset>& property() const { return property_; }
  const std::vector<LabelObservation>& label_observations() const { return labels_; }
  const std::vector<std::vector<ValueObservation>>& value_observations() const { return values_; }
  Eigen::Index anchors() const { return grid_.anchor_count; }
  int regions() const { return priors_.regions; }
  std::size_t property_sources() const { return property_.size(); }
  Eigen::MatrixXd anchor_points() const { return grid_.points.topRows(grid_.anchor_count); }

  // Lower Cholesky factors over the anchor points.
  Eigen::MatrixXd segmentation_factor(const KernelParams& hyper) const;
  Eigen::MatrixXd property_factor(const KernelParams& hyper, std::size_t j, std::size_t r) const;

  // Region probabilities at the anchors (anchors x R).
  Eigen::MatrixXd anchor_probs(const SegmentationParams& seg) const;
  Eigen::MatrixXd anchor_probs(const SegmentationParams& seg, const Eigen::MatrixXd& seg_factor) const;

  // Path-conditioned L_s, L_p and the kind's total, recomputed from scratch.
  LikelihoodParts evaluate(const ParameterState& state) const;

  // Draw every parameter from its uniform prior and whitened vectors from
  // N(0, I); redraws until L is finite. 1-D changepoints are drawn from the
  // prior restricted to configurations consistent with hard labels. Throws
  // InferenceError when the retry budget is exhausted.
  ParameterState sample_prior(Rng& rng) const;

  // Whether every parameter lies inside its prior support.
  bool in_support(const ParameterState& state) const;

  GridState materialize(const ParameterState& state) const;

 private:
  bool draw_changepoints(Rng& rng, Changepoints1D& cp) const;

  ModelKind kind_;
  Domain domain_;
  PriorConfig priors_;
  std::vector<StructureDataset> structure_;
  std::vector<PropertyDataset> property_;
  PredictionGrid grid_;
  ModelOptions options_;
  std::vector<LabelObservation> labels_;
  std::vector<std::vector<ValueObservation>> values_;
};

// Evaluates states on the grid, reusing Cholesky factors between consecutive
// states whose hyperparameters did not change.
class Materializer {
 public:
  explicit Materializer(const SageModel& model);
  GridState operator()(const ParameterState& state);

 private:
  struct Factor {
    KernelParams hyper;
    bool valid = false;
    Eigen::MatrixXd l11, l21, l22;
  };
  const Factor& factor(Factor& slot, const KernelParams& hyper, bool matern, const std::string& label);
  Eigen::VectorXd extend(const Factor& f, const Eigen::VectorXd& anchor_whitened,
                         const Eigen::VectorXd& tail) const;

  const SageModel& model_;
  Factor seg_;
  std::vector<std::vector<Factor>> prop_;
};

struct McmcSettings {
  int iterations = 20000;
  int burn_in = 10000;
  int thinning = 10;
  std::uint64_t seed = 0;
  int chains = 2;
  // Burn-in steps during which step sizes adapt; negative means all of burn-in.
  int adaptation_window = -1;
  double target_accept_scalar = 0.44;
  double target_accept_multivariate = 0.234;
  double initial_log_step = 0.3;          // log-space RW on scale parameters
  double initial_bias_step = 0.1;         // fraction of prior width
  double initial_changepoint_step = 0.05; // fraction of domain width
  double initial_pcn_step = 0.2;          // pCN mixing weight on whitened vectors

  void validate() const;
  int stored_per_chain() const { return (iterations - burn_in) / thinning; }
};

enum class BlockKind { Changepoints, SegHyper, SegWhitened, PropHyper, Noise, PropWhitened };

struct BlockStats {
  std::string name;
  BlockKind kind;
  int source = -1;
  int region = -1;
  bool multivariate = false;
  double log_step = 0.0;
  long proposed = 0;  // post burn-in
  long accepted = 0;
  long updates = 0;   // including burn-in, drives adaptation gain

  double acceptance_rate() const {
    return proposed > 0 ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0;
  }
};

struct StepRecord {
  std::size_t block;
  bool accepted;
  double accept_prob;
};

// Min(1, exp(log_ratio)) Metropolis test.
bool metropolis_accept(double log_ratio, Rng& rng);

// Robbins-Monro update of a log step size toward a target acceptance rate.
double adapt_log_step(double log_step, double accept_prob, double target, long update_index);

// Adaptive blockwise Metropolis sampler for one chain. Exactly one block is
// updated per step, cycling round-robin. Scale hyperparameters move by random
// walks in log space, biases and changepoints by random walks, and the latent
// segmentation vectors by preconditioned Crank-Nicolson moves. Property
// whitened vectors are integrated out of every other block's acceptance ratio
// and redrawn from their exact conditional when that block moves.
class Sampler {
 public:
  Sampler(const SageModel& model, ParameterState init, const McmcSettings& settings, Rng& rng);

  StepRecord step(Rng& rng, bool adapt, bool record);
  const ParameterState& state() const { return state_; }
  const std::vector<BlockStats>& blocks() const { return blocks_; }
  std::vector<BlockStats>& blocks() { return blocks_; }
  // The target the Metropolis tests use: L_s and/or the property likelihood
  // with whitened vectors integrated out.
  double collapsed_target() const { return target_; }

 private:
  struct Proposal;
  void build_blocks(const McmcSettings& settings);
  double marginal_for_source(std::size_t j, const Eigen::MatrixXd& probs,
                             const std::vector<Eigen::MatrixXd>& factors,
                             const PropertyParams& prop) const;
  void redraw_property(std::size_t j, Rng& rng);
  void refresh_path_likelihood();

  const SageModel& model_;
  ParameterState state_;
  std::vector<BlockStats> blocks_;
  std::size_t next_block_ = 0;
  double target_multi_;
  double target_scalar_;

  Eigen::MatrixXd seg_factor_;
  Eigen::MatrixXd probs_;
  std::vector<std::vector<Eigen::MatrixXd>> prop_factors_;
  std::vector<double> marginal_;
  double log_lik_structure_ = 0.0;
  double target_ = kNegInf;
};

struct Chain {
  ModelKind kind = ModelKind::Sage1D;
  McmcSettings settings;
  std::vector<ParameterState> states;         // all chains, concatenated in chain order
  std::vector<std::size_t> chain_offsets;     // first state index of each chain
  std::vector<std::vector<BlockStats>> acceptance;  // per chain
  double rhat = 1.0;
  std::vector<std::string> warnings;

  std::size_t size() const { return states.size(); }
};

// Runs settings.chains independent chains (parallel up to SAGE_THREADS or
// `threads` when positive) and merges them. Deterministic per seed.
Chain run_chain(const SageModel& model, const McmcSettings& settings, int threads = 0);

// Index of the stored state with the largest L; ties go to the earliest.
std::size_t max_likelihood_index(const Chain& chain);
const ParameterState& max_likelihood_sample(const Chain& chain);

// Split-chain potential scale reduction of a scalar trace.
double split_rhat(std::span<const std::vector<double>> traces);

// One JSON document per state per line.
void write_chain_jsonl(const std::filesystem::path& path, const Chain& chain);
std::string state_to_json(const ParameterState& state, std::size_t chain_index, std::size_t index);
ParameterState state_from_json(const std::string& line);
std::vector<ParameterState> read_chain_jsonl(const std::filesystem::path& path);

}  // namespace sage
