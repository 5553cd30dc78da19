#include "sage/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <thread>

#include "sage/error.hpp"

namespace sage {

// ---------------------------------------------------------------------------
// Model kinds

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Sage1D: return "sage-1d";
    case ModelKind::SageND: return "sage-nd";
    case ModelKind::Sage1DPM: return "sage-1d-pm";
    case ModelKind::Sage1DFP: return "sage-1d-fp";
    case ModelKind::SageNDPM: return "sage-nd-pm";
    case ModelKind::SageNDFP: return "sage-nd-fp";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& name) {
  for (auto k : {ModelKind::Sage1D, ModelKind::SageND, ModelKind::Sage1DPM, ModelKind::Sage1DFP,
                 ModelKind::SageNDPM, ModelKind::SageNDFP}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown SAGE model kind '" + name + "'");
}

bool is_one_dimensional(ModelKind kind) {
  return kind == ModelKind::Sage1D || kind == ModelKind::Sage1DPM || kind == ModelKind::Sage1DFP;
}

bool uses_structure(ModelKind kind) {
  return kind != ModelKind::Sage1DFP && kind != ModelKind::SageNDFP;
}

bool uses_property(ModelKind kind) {
  return kind != ModelKind::Sage1DPM && kind != ModelKind::SageNDPM;
}

LikelihoodTerms likelihood_terms(ModelKind kind) {
  if (!uses_property(kind)) return LikelihoodTerms::StructureOnly;
  if (!uses_structure(kind)) return LikelihoodTerms::PropertyOnly;
  return LikelihoodTerms::Joint;
}

// ---------------------------------------------------------------------------
// SageModel

namespace {

bool same_hyper(const KernelParams& a, const KernelParams& b) {
  return a.std == b.std && a.lengthscales.size() == b.lengthscales.size() &&
         a.lengthscales == b.lengthscales;
}

double draw(Rng& rng, const Bounds& b) { return uniform(rng, b.lo, b.hi); }

// f_j at the anchors: sum_r p_r (b_r + L_r v_r).
Eigen::VectorXd anchor_function(const Eigen::MatrixXd& probs,
                                const std::vector<Eigen::MatrixXd>& factors,
                                const std::vector<PropertyComponent>& comps) {
  Eigen::VectorXd f = Eigen::VectorXd::Zero(probs.rows());
  for (std::size_t r = 0; r < comps.size(); ++r) {
    const Eigen::VectorXd path =
        (factors[r].triangularView<Eigen::Lower>() * comps[r].whitened).array() + comps[r].hyper.bias;
    f.array() += probs.col(static_cast<Eigen::Index>(r)).array() * path.array();
  }
  return f;
}

double path_property_loglik(const Eigen::MatrixXd& probs,
                            const std::vector<std::vector<Eigen::MatrixXd>>& factors,
                            const PropertyParams& prop,
                            const std::vector<std::vector<ValueObservation>>& obs) {
  std::vector<Eigen::VectorXd> values;
  for (std::size_t j = 0; j < prop.components.size(); ++j) {
    values.push_back(anchor_function(probs, factors[j], prop.components[j]));
  }
  return property_log_likelihood(values, prop.noise, obs);
}

}  // namespace

SageModel::SageModel(ModelKind kind, Domain domain, PriorConfig priors,
                     std::vector<StructureDataset> structure, std::vector<PropertyDataset> property,
                     PredictionGrid grid, ModelOptions options)
    : kind_(kind),
      domain_(std::move(domain)),
      priors_(std::move(priors)),
      grid_(std::move(grid)),
      options_(options) {
  domain_.validate();
  if (is_one_dimensional(kind_) && domain_.dim() != 1) {
    throw ConfigError(to_string(kind_) + " requires a 1-dimensional domain");
  }
  if (grid_.dim() != domain_.dim()) throw ConfigError("grid dimension does not match the domain");
  if (uses_structure(kind_)) structure_ = std::move(structure);
  if (uses_property(kind_)) {
    property_ = std::move(property);
  } else {
    // PM models carry no property GPs; keep priors consistent with that.
    priors_.properties.clear();
  }
  priors_.validate(domain_.dim(), property_.size());
  for (const auto& s : structure_) validate_structure(s, domain_, priors_.regions);
  for (const auto& p : property_) validate_property(p, domain_);
  labels_ = resolve_labels(grid_, structure_);
  values_ = resolve_values(grid_, property_);
  for (const auto& o : labels_) {
    if (o.index >= grid_.anchor_count) throw DataError("structure point is not a grid anchor");
  }
  for (const auto& v : values_) {
    for (const auto& o : v) {
      if (o.index >= grid_.anchor_count) throw DataError("property point is not a grid anchor");
    }
  }
  if (options_.init_retries < 1) throw ConfigError("init retry budget must be >= 1");
  if (options_.label_noise_floor < 0.0 || options_.label_noise_floor >= 1.0) {
    throw ConfigError("label noise floor must lie in [0, 1)");
  }
}

Eigen::MatrixXd SageModel::segmentation_factor(const KernelParams& hyper) const {
  const Eigen::MatrixXd a = anchor_points();
  return cholesky_with_jitter(matern52_kernel(a, a, hyper), options_.base_jitter,
                              "segmentation Matern 5/2 kernel")
      .lower;
}

Eigen::MatrixXd SageModel::property_factor(const KernelParams& hyper, std::size_t j,
                                           std::size_t r) const {
  const Eigen::MatrixXd a = anchor_points();
  return cholesky_with_jitter(rbf_kernel(a, a, hyper), options_.base_jitter,
                              "RBF kernel of property " + std::to_string(j) + " region " +
                                  std::to_string(r))
      .lower;
}

Eigen::MatrixXd SageModel::anchor_probs(const SegmentationParams& seg) const {
  if (is_one_dimensional(kind_) || regions() == 1) return anchor_probs(seg, Eigen::MatrixXd());
  return anchor_probs(seg, segmentation_factor(seg.hyper));
}

Eigen::MatrixXd SageModel::anchor_probs(const SegmentationParams& seg,
                                        const Eigen::MatrixXd& seg_factor) const {
  if (is_one_dimensional(kind_)) return region_field_1d(seg.changepoints, anchor_points()).probs;
  if (regions() == 1) return Eigen::MatrixXd::Ones(anchors(), 1);
  return softmax_region_field(seg_factor.triangularView<Eigen::Lower>() * seg.whitened).probs;
}

LikelihoodParts SageModel::evaluate(const ParameterState& state) const {
  LikelihoodParts out;
  const Eigen::MatrixXd probs = anchor_probs(state.seg);
  out.structure = structure_log_likelihood(probs, labels_, options_.label_noise_floor);
  if (!property_.empty()) {
    std::vector<std::vector<Eigen::MatrixXd>> factors(property_.size());
    for (std::size_t j = 0; j < property_.size(); ++j) {
      for (std::size_t r = 0; r < state.prop.components[j].size(); ++r) {
        factors[j].push_back(property_factor(state.prop.components[j][r].hyper, j, r));
      }
    }
    out.property = path_property_loglik(probs, factors, state.prop, values_);
  }
  out.total = total_log_likelihood(out.structure, out.property, likelihood_terms(kind_));
  return out;
}

bool SageModel::in_support(const ParameterState& state) const {
  const Eigen::Index dim = domain_.dim();
  if (is_one_dimensional(kind_)) {
    const auto& cp = state.seg.changepoints;
    if (cp.regions() != regions() || !cp.valid(domain_.bounds[0])) return false;
  } else if (regions() > 1) {
    if (state.seg.hyper.lengthscales.size() != dim) return false;
    for (Eigen::Index d = 0; d < dim; ++d) {
      if (!priors_.seg_lengthscale[static_cast<std::size_t>(d)].contains(state.seg.hyper.lengthscales[d])) {
        return false;
      }
    }
    if (!priors_.seg_std.contains(state.seg.hyper.std)) return false;
  }
  if (state.prop.components.size() != property_.size()) return false;
  for (std::size_t j = 0; j < property_.size(); ++j) {
    const auto& pj = priors_.properties[j];
    if (!pj.noise.contains(state.prop.noise[j])) return false;
    for (std::size_t r = 0; r < pj.regions.size(); ++r) {
      const auto& c = state.prop.components[j][r].hyper;
      const auto& b = pj.regions[r];
      for (Eigen::Index d = 0; d < dim; ++d) {
        if (!b.lengthscale[static_cast<std::size_t>(d)].contains(c.lengthscales[d])) return false;
      }
      if (!b.std.contains(c.std)) return false;
      if (!is_one_dimensional(kind_) && !b.bias.contains(c.bias)) return false;
    }
  }
  return true;
}

// Uniform prior on sorted changepoints, restricted to configurations that
// agree with every hard label: label l at x needs cp_l >= x and cp_{l-1} < x.
bool SageModel::draw_changepoints(Rng& rng, Changepoints1D& cp) const {
  const auto& dom = domain_.bounds[0];
  const int R = regions();
  std::vector<double> lo(static_cast<std::size_t>(std::max(R - 1, 0)), dom.lo);
  std::vector<double> hi(lo.size(), dom.hi);
  if (options_.label_noise_floor == 0.0) {
    for (const auto& o : labels_) {
      const double x = grid_.points(o.index, 0);
      for (int k = 0; k + 1 < R; ++k) {
        if (o.label <= k) lo[static_cast<std::size_t>(k)] = std::max(lo[static_cast<std::size_t>(k)], x);
        if (o.label >= k + 1) hi[static_cast<std::size_t>(k)] = std::min(hi[static_cast<std::size_t>(k)], x);
      }
    }
  }
  cp.values.clear();
  for (std::size_t k = 0; k < lo.size(); ++k) {
    if (!(lo[k] < hi[k])) return false;
    cp.values.push_back(uniform(rng, lo[k], hi[k]));
  }
  return std::is_sorted(cp.values.begin(), cp.values.end());
}

ParameterState SageModel::sample_prior(Rng& rng) const {
  const Eigen::Index dim = domain_.dim();
  const int R = regions();
  for (int attempt = 0; attempt < options_.init_retries; ++attempt) {
    ParameterState s;
    if (is_one_dimensional(kind_)) {
      if (!draw_changepoints(rng, s.seg.changepoints)) continue;
    } else {
      s.seg.hyper.lengthscales.resize(dim);
      for (Eigen::Index d = 0; d < dim; ++d) {
        s.seg.hyper.lengthscales[d] = draw(rng, priors_.seg_lengthscale[static_cast<std::size_t>(d)]);
      }
      s.seg.hyper.std = draw(rng, priors_.seg_std);
      s.seg.whitened = standard_normal_matrix(rng, anchors(), R);
    }
    for (std::size_t j = 0; j < property_.size(); ++j) {
      const auto& pj = priors_.properties[j];
      std::vector<PropertyComponent> comps;
      for (int r = 0; r < R; ++r) {
        const auto& b = pj.regions[static_cast<std::size_t>(r)];
        PropertyComponent c;
        c.hyper.lengthscales.resize(dim);
        for (Eigen::Index d = 0; d < dim; ++d) {
          c.hyper.lengthscales[d] = draw(rng, b.lengthscale[static_cast<std::size_t>(d)]);
        }
        c.hyper.std = draw(rng, b.std);
        c.hyper.bias = is_one_dimensional(kind_) ? 0.0 : draw(rng, b.bias);
        c.whitened = standard_normal_vector(rng, anchors());
        comps.push_back(std::move(c));
      }
      s.prop.components.push_back(std::move(comps));
      s.prop.noise.push_back(draw(rng, pj.noise));
    }
    s.tail_seed = rng();
    const auto parts = evaluate(s);
    s.log_lik_structure = parts.structure;
    s.log_lik_property = parts.property;
    s.log_lik = parts.total;
    if (std::isfinite(s.log_lik)) return s;
  }
  std::ostringstream msg;
  msg << "no prior draw with finite likelihood after " << options_.init_retries
      << " attempts; consider a positive label noise floor";
  throw InferenceError(msg.str());
}

GridState SageModel::materialize(const ParameterState& state) const {
  Materializer m(*this);
  return m(state);
}

// ---------------------------------------------------------------------------
// Materializer

Materializer::Materializer(const SageModel& model) : model_(model) {
  prop_.resize(model.property_sources());
  for (auto& row : prop_) row.resize(static_cast<std::size_t>(model.regions()));
}

const Materializer::Factor& Materializer::factor(Factor& slot, const KernelParams& hyper,
                                                 bool matern, const std::string& label) {
  if (slot.valid && same_hyper(slot.hyper, hyper)) return slot;
  const auto& pts = model_.grid().points;
  const Eigen::Index na = model_.anchors();
  const Eigen::Index nr = pts.rows() - na;
  const Eigen::MatrixXd anchors = pts.topRows(na);
  const Eigen::MatrixXd rest = pts.bottomRows(nr);
  auto kernel = [&](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return matern ? matern52_kernel(a, b, hyper) : rbf_kernel(a, b, hyper);
  };
  slot.hyper = hyper;
  slot.l11 = cholesky_with_jitter(kernel(anchors, anchors), model_.options().base_jitter, label).lower;
  if (nr > 0) {
    const Eigen::MatrixXd k_ar = kernel(anchors, rest);
    slot.l21 = slot.l11.triangularView<Eigen::Lower>().solve(k_ar).transpose();
    Eigen::MatrixXd schur = kernel(rest, rest);
    schur.noalias() -= slot.l21 * slot.l21.transpose();
    schur = 0.5 * (schur + schur.transpose());
    // Jitter relative to the prior variance.
    slot.l22 = cholesky_with_jitter(schur, model_.options().base_jitter, label + " (grid)",
                                    hyper.std * hyper.std)
                   .lower;
  } else {
    slot.l21.resize(0, na);
    slot.l22.resize(0, 0);
  }
  slot.valid = true;
  return slot;
}

Eigen::VectorXd Materializer::extend(const Factor& f, const Eigen::VectorXd& anchor_whitened,
                                     const Eigen::VectorXd& tail) const {
  const Eigen::Index na = f.l11.rows();
  const Eigen::Index nr = f.l22.rows();
  Eigen::VectorXd out(na + nr);
  out.head(na) = f.l11.triangularView<Eigen::Lower>() * anchor_whitened;
  if (nr > 0) {
    out.tail(nr) = f.l21 * anchor_whitened;
    out.tail(nr).noalias() += f.l22.triangularView<Eigen::Lower>() * tail;
  }
  return out;
}

GridState Materializer::operator()(const ParameterState& state) {
  const auto& pts = model_.grid().points;
  const Eigen::Index g = pts.rows();
  const Eigen::Index nr = g - model_.anchors();
  const int R = model_.regions();
  Rng tail(state.tail_seed);

  GridState out;
  if (is_one_dimensional(model_.kind())) {
    out.field = region_field_1d(state.seg.changepoints, pts);
  } else if (R == 1) {
    out.field.probs = Eigen::MatrixXd::Ones(g, 1);
  } else {
    const Factor& f = factor(seg_, state.seg.hyper, true, "segmentation Matern 5/2 kernel");
    const Eigen::MatrixXd tails = standard_normal_matrix(tail, nr, R);
    Eigen::MatrixXd latent(g, R);
    for (int r = 0; r < R; ++r) {
      latent.col(r) = extend(f, state.seg.whitened.col(r), tails.col(r));
    }
    out.field = softmax_region_field(latent);
  }

  std::vector<std::vector<Eigen::VectorXd>> comps(model_.property_sources());
  for (std::size_t j = 0; j < model_.property_sources(); ++j) {
    for (int r = 0; r < R; ++r) {
      const auto& c = state.prop.components[j][static_cast<std::size_t>(r)];
      const Factor& f = factor(prop_[j][static_cast<std::size_t>(r)], c.hyper, false,
                               "RBF kernel of property " + std::to_string(j) + " region " +
                                   std::to_string(r));
      const Eigen::VectorXd t = standard_normal_vector(tail, nr);
      comps[j].push_back(extend(f, c.whitened, t).array() + c.hyper.bias);
    }
  }
  out.property = piecewise_mix(std::move(comps), out.field);
  out.noise = state.prop.noise;
  return out;
}

// ---------------------------------------------------------------------------
// Metropolis machinery

bool metropolis_accept(double log_ratio, Rng& rng) {
  if (std::isnan(log_ratio) || log_ratio == kNegInf) return false;
  if (log_ratio >= 0.0) return true;
  return std::log(uniform(rng, 0.0, 1.0)) < log_ratio;
}

double adapt_log_step(double log_step, double accept_prob, double target, long update_index) {
  const double gain = std::pow(static_cast<double>(update_index) + 1.0, -0.6);
  return std::clamp(log_step + gain * (accept_prob - target), std::log(1e-5), std::log(5.0));
}

void McmcSettings::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (burn_in < 0 || burn_in >= iterations) throw ConfigError("burn-in must satisfy 0 <= burn_in < iterations");
  if (thinning < 1) throw ConfigError("thinning must be >= 1");
  if (chains < 1) throw ConfigError("chain count must be >= 1");
  if (stored_per_chain() < 1) throw ConfigError("settings store no samples; lower thinning or burn-in");
  if (!(target_accept_scalar > 0 && target_accept_scalar < 1) ||
      !(target_accept_multivariate > 0 && target_accept_multivariate < 1)) {
    throw ConfigError("target acceptance rates must lie in (0, 1)");
  }
  if (!(initial_log_step > 0) || !(initial_bias_step > 0) || !(initial_changepoint_step > 0) ||
      !(initial_pcn_step > 0 && initial_pcn_step <= 1)) {
    throw ConfigError("initial step sizes must be positive (pCN step at most 1)");
  }
}

namespace {

// Log-space random walk inside [lo, hi]; returns false when the proposal
// leaves the support. Adds the log-Jacobian of the move to `log_jac`.
bool propose_scale(double& value, const Bounds& b, double step, Rng& rng, double& log_jac) {
  if (b.width() <= 0.0) return true;
  const double next = value * std::exp(step * standard_normal(rng));
  if (!b.contains(next)) return false;
  log_jac += std::log(next) - std::log(value);
  value = next;
  return true;
}

bool propose_linear(double& value, const Bounds& b, double step, Rng& rng) {
  if (b.width() <= 0.0) return true;
  const double next = value + step * b.width() * standard_normal(rng);
  if (!b.contains(next)) return false;
  value = next;
  return true;
}

}  // namespace

Sampler::Sampler(const SageModel& model, ParameterState init, const McmcSettings& settings, Rng& rng)
    : model_(model),
      state_(std::move(init)),
      target_multi_(settings.target_accept_multivariate),
      target_scalar_(settings.target_accept_scalar) {
  if (!model_.in_support(state_)) throw InferenceError("initial state lies outside the prior support");
  const bool nd_seg = !is_one_dimensional(model_.kind()) && model_.regions() > 1;
  if (nd_seg) seg_factor_ = model_.segmentation_factor(state_.seg.hyper);
  probs_ = model_.anchor_probs(state_.seg, seg_factor_);
  log_lik_structure_ = structure_log_likelihood(probs_, model_.label_observations(),
                                                model_.options().label_noise_floor);
  prop_factors_.resize(model_.property_sources());
  marginal_.assign(model_.property_sources(), 0.0);
  for (std::size_t j = 0; j < model_.property_sources(); ++j) {
    for (std::size_t r = 0; r < state_.prop.components[j].size(); ++r) {
      prop_factors_[j].push_back(model_.property_factor(state_.prop.components[j][r].hyper, j, r));
    }
    marginal_[j] = marginal_for_source(j, probs_, prop_factors_[j], state_.prop);
  }
  target_ = log_lik_structure_;
  for (double m : marginal_) target_ += m;
  if (!std::isfinite(target_)) throw InferenceError("initial state has non-finite likelihood");
  for (std::size_t j = 0; j < model_.property_sources(); ++j) redraw_property(j, rng);
  refresh_path_likelihood();
  build_blocks(settings);
}

void Sampler::build_blocks(const McmcSettings& settings) {
  const int R = model_.regions();
  const bool one_d = is_one_dimensional(model_.kind());
  auto add = [&](std::string name, BlockKind kind, int j, int r, bool multi, double step) {
    BlockStats b;
    b.name = std::move(name);
    b.kind = kind;
    b.source = j;
    b.region = r;
    b.multivariate = multi;
    b.log_step = std::log(step);
    blocks_.push_back(std::move(b));
  };
  if (R > 1) {
    if (one_d) {
      add("changepoints", BlockKind::Changepoints, -1, -1, R > 2, settings.initial_changepoint_step);
    } else {
      add("segmentation_hyper", BlockKind::SegHyper, -1, -1, true, settings.initial_log_step);
      add("segmentation_whitened", BlockKind::SegWhitened, -1, -1, true, settings.initial_pcn_step);
    }
  }
  for (std::size_t j = 0; j < model_.property_sources(); ++j) {
    for (int r = 0; r < R; ++r) {
      add("property_" + std::to_string(j) + "_region_" + std::to_string(r) + "_hyper",
          BlockKind::PropHyper, static_cast<int>(j), r, true, settings.initial_log_step);
    }
    add("property_" + std::to_string(j) + "_noise", BlockKind::Noise, static_cast<int>(j), -1, false,
        settings.initial_log_step);
  }
  if (model_.property_sources() > 0) {
    add("property_whitened", BlockKind::PropWhitened, -1, -1, true, 1.0);
  }
}

double Sampler::marginal_for_source(std::size_t j, const Eigen::MatrixXd& probs,
                                    const std::vector<Eigen::MatrixXd>& factors,
                                    const PropertyParams& prop) const {
  AnchoredSource src;
  src.probs = &probs;
  for (const auto& f : factors) src.factors.push_back(&f);
  for (const auto& c : prop.components[j]) src.bias.push_back(c.hyper.bias);
  src.noise = prop.noise[j];
  src.observations = model_.value_observations()[j];
  return marginal_property_log_likelihood(src);
}

void Sampler::redraw_property(std::size_t j, Rng& rng) {
  AnchoredSource src;
  src.probs = &probs_;
  for (const auto& f : prop_factors_[j]) src.factors.push_back(&f);
  for (const auto& c : state_.prop.components[j]) src.bias.push_back(c.hyper.bias);
  src.noise = state_.prop.noise[j];
  src.observations = model_.value_observations()[j];
  auto draws = conditional_whitened_draw(src, rng);
  for (std::size_t r = 0; r < draws.size(); ++r) state_.prop.components[j][r].whitened = std::move(draws[r]);
}

void Sampler::refresh_path_likelihood() {
  state_.log_lik_structure = log_lik_structure_;
  state_.log_lik_property = model_.property_sources() > 0
                                ? path_property_loglik(probs_, prop_factors_, state_.prop,
                                                       model_.value_observations())
                                : 0.0;
  state_.log_lik = total_log_likelihood(state_.log_lik_structure, state_.log_lik_property,
                                        likelihood_terms(model_.kind()));
}

StepRecord Sampler::step(Rng& rng, bool adapt, bool record) {
  if (blocks_.empty()) return {0, true, 1.0};
  const std::size_t b = next_block_;
  next_block_ = (next_block_ + 1) % blocks_.size();
  BlockStats& blk = blocks_[b];
  const double step = std::exp(blk.log_step);
  const std::size_t J = model_.property_sources();

  double accept_prob = 1.0;
  bool accepted = true;

  // Segmentation blocks change the field; every source's marginal is affected.
  auto try_segmentation = [&](SegmentationParams proposal, Eigen::MatrixXd factor, double log_jac) {
    Eigen::MatrixXd probs = model_.anchor_probs(proposal, factor);
    const double ls = structure_log_likelihood(probs, model_.label_observations(),
                                               model_.options().label_noise_floor);
    std::vector<double> marg(J, 0.0);
    double next = ls;
    if (std::isfinite(ls)) {
      for (std::size_t j = 0; j < J; ++j) {
        marg[j] = marginal_for_source(j, probs, prop_factors_[j], state_.prop);
        next += marg[j];
      }
    }
    const double log_ratio = next - target_ + log_jac;
    accept_prob = std::isfinite(next) ? std::min(1.0, std::exp(log_ratio)) : 0.0;
    accepted = std::isfinite(next) && metropolis_accept(log_ratio, rng);
    if (!accepted) return;
    state_.seg = std::move(proposal);
    if (factor.size() > 0) seg_factor_ = std::move(factor);
    probs_ = std::move(probs);
    log_lik_structure_ = ls;
    marginal_ = std::move(marg);
    target_ = next;
    for (std::size_t j = 0; j < J; ++j) redraw_property(j, rng);
  };

  // Property blocks touch only source j.
  auto try_property = [&](std::size_t j, std::vector<PropertyComponent> comps, double noise,
                          std::vector<Eigen::MatrixXd> factors, double log_jac) {
    PropertyParams trial;
    trial.components.resize(J);
    trial.components[j] = comps;
    trial.noise.assign(J, 0.0);
    trial.noise[j] = noise;
    const double m = marginal_for_source(j, probs_, factors, trial);
    const double next = target_ - marginal_[j] + m;
    const double log_ratio = next - target_ + log_jac;
    accept_prob = std::isfinite(next) ? std::min(1.0, std::exp(log_ratio)) : 0.0;
    accepted = std::isfinite(next) && metropolis_accept(log_ratio, rng);
    if (!accepted) return;
    state_.prop.components[j] = std::move(comps);
    state_.prop.noise[j] = noise;
    prop_factors_[j] = std::move(factors);
    marginal_[j] = m;
    target_ = next;
    redraw_property(j, rng);
  };

  auto reject = [&] {
    accept_prob = 0.0;
    accepted = false;
  };

  const auto& priors = model_.priors();
  switch (blk.kind) {
    case BlockKind::Changepoints: {
      SegmentationParams p = state_.seg;
      const auto& dom = model_.domain().bounds[0];
      for (auto& c : p.changepoints.values) c += step * dom.width() * standard_normal(rng);
      if (!p.changepoints.valid(dom)) {
        reject();
      } else {
        try_segmentation(std::move(p), Eigen::MatrixXd(), 0.0);
      }
      break;
    }
    case BlockKind::SegHyper: {
      SegmentationParams p = state_.seg;
      double log_jac = 0.0;
      bool ok = true;
      for (Eigen::Index d = 0; d < p.hyper.lengthscales.size() && ok; ++d) {
        ok = propose_scale(p.hyper.lengthscales[d], priors.seg_lengthscale[static_cast<std::size_t>(d)],
                           step, rng, log_jac);
      }
      ok = ok && propose_scale(p.hyper.std, priors.seg_std, step, rng, log_jac);
      if (!ok) {
        reject();
      } else {
        Eigen::MatrixXd factor = model_.segmentation_factor(p.hyper);
        try_segmentation(std::move(p), std::move(factor), log_jac);
      }
      break;
    }
    case BlockKind::SegWhitened: {
      // pCN keeps N(0, I) invariant, so the prior cancels from the ratio.
      SegmentationParams p = state_.seg;
      const double beta = std::min(1.0, step);
      const double keep = std::sqrt(1.0 - beta * beta);
      p.whitened = keep * p.whitened +
                   beta * standard_normal_matrix(rng, p.whitened.rows(), p.whitened.cols());
      try_segmentation(std::move(p), seg_factor_, 0.0);
      break;
    }
    case BlockKind::PropHyper: {
      const auto j = static_cast<std::size_t>(blk.source);
      const auto r = static_cast<std::size_t>(blk.region);
      const auto& b = priors.properties[j].regions[r];
      auto comps = state_.prop.components[j];
      auto& h = comps[r].hyper;
      double log_jac = 0.0;
      bool ok = true;
      for (Eigen::Index d = 0; d < h.lengthscales.size() && ok; ++d) {
        ok = propose_scale(h.lengthscales[d], b.lengthscale[static_cast<std::size_t>(d)], step, rng, log_jac);
      }
      ok = ok && propose_scale(h.std, b.std, step, rng, log_jac);
      if (ok && !is_one_dimensional(model_.kind())) ok = propose_linear(h.bias, b.bias, step / 3.0, rng);
      if (!ok) {
        reject();
      } else {
        auto factors = prop_factors_[j];
        factors[r] = model_.property_factor(h, j, r);
        try_property(j, std::move(comps), state_.prop.noise[j], std::move(factors), log_jac);
      }
      break;
    }
    case BlockKind::Noise: {
      const auto j = static_cast<std::size_t>(blk.source);
      double noise = state_.prop.noise[j];
      double log_jac = 0.0;
      if (!propose_scale(noise, priors.properties[j].noise, step, rng, log_jac)) {
        reject();
      } else {
        try_property(j, state_.prop.components[j], noise, prop_factors_[j], log_jac);
      }
      break;
    }
    case BlockKind::PropWhitened: {
      for (std::size_t j = 0; j < J; ++j) redraw_property(j, rng);
      break;
    }
  }
  refresh_path_likelihood();

  if (adapt && blk.kind != BlockKind::PropWhitened) {
    blk.log_step = adapt_log_step(blk.log_step, accept_prob,
                                  blk.multivariate ? target_multi_ : target_scalar_, blk.updates);
  }
  ++blk.updates;
  if (record) {
    ++blk.proposed;
    if (accepted) ++blk.accepted;
  }
  return {b, accepted, accept_prob};
}

// ---------------------------------------------------------------------------
// Chains

double split_rhat(std::span<const std::vector<double>> traces) {
  std::vector<std::vector<double>> halves;
  for (const auto& t : traces) {
    const std::size_t n = t.size() / 2;
    if (n < 2) continue;
    halves.emplace_back(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(n));
    halves.emplace_back(t.end() - static_cast<std::ptrdiff_t>(n), t.end());
  }
  if (halves.size() < 2) return 1.0;
  std::size_t n = halves.front().size();
  for (const auto& h : halves) n = std::min(n, h.size());
  const auto m = static_cast<double>(halves.size());
  const auto nn = static_cast<double>(n);
  std::vector<double> means, vars;
  for (const auto& h : halves) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += h[i];
    mean /= nn;
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (h[i] - mean) * (h[i] - mean);
    means.push_back(mean);
    vars.push_back(var / (nn - 1.0));
  }
  double grand = 0.0;
  for (double x : means) grand += x;
  grand /= m;
  double between = 0.0;
  for (double x : means) between += (x - grand) * (x - grand);
  between *= nn / (m - 1.0);
  double within = 0.0;
  for (double v : vars) within += v;
  within /= m;
  if (within <= 0.0) return between > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  const double var_plus = (nn - 1.0) / nn * within + between / nn;
  return std::sqrt(var_plus / within);
}

namespace {

int thread_budget(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SAGE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

struct SingleRun {
  std::vector<ParameterState> states;
  std::vector<BlockStats> blocks;
};

SingleRun run_single(const SageModel& model, const McmcSettings& settings, std::size_t index) {
  Rng rng = make_rng(settings.seed, index);
  ParameterState init = model.sample_prior(rng);
  Sampler sampler(model, std::move(init), settings, rng);
  const int adapt_end = settings.adaptation_window < 0
                            ? settings.burn_in
                            : std::min(settings.burn_in, settings.adaptation_window);
  SingleRun out;
  out.states.reserve(static_cast<std::size_t>(settings.stored_per_chain()));
  for (int t = 0; t < settings.iterations; ++t) {
    const bool record = t >= settings.burn_in;
    sampler.step(rng, t < adapt_end, record);
    if (record && (t - settings.burn_in + 1) % settings.thinning == 0) {
      ParameterState s = sampler.state();
      s.tail_seed = rng();
      if (!std::isfinite(s.log_lik)) throw InferenceError("chain stored a state with non-finite likelihood");
      out.states.push_back(std::move(s));
    }
  }
  out.blocks = sampler.blocks();
  return out;
}

}  // namespace

Chain run_chain(const SageModel& model, const McmcSettings& settings, int threads) {
  settings.validate();
  const auto n = static_cast<std::size_t>(settings.chains);
  std::vector<SingleRun> runs(n);
  std::vector<std::exception_ptr> errors(n);
  const auto workers = static_cast<std::size_t>(std::min<int>(thread_budget(threads), settings.chains));
  auto work = [&](std::size_t start) {
    for (std::size_t c = start; c < n; c += workers) {
      try {
        runs[c] = run_single(model, settings, c);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  Chain chain;
  chain.kind = model.kind();
  chain.settings = settings;
  std::vector<std::vector<double>> traces;
  for (auto& run : runs) {
    chain.chain_offsets.push_back(chain.states.size());
    std::vector<double> trace;
    for (auto& s : run.states) {
      trace.push_back(s.log_lik);
      chain.states.push_back(std::move(s));
    }
    traces.push_back(std::move(trace));
    chain.acceptance.push_back(std::move(run.blocks));
  }
  chain.rhat = split_rhat(traces);
  if (!(chain.rhat <= 1.1)) {
    std::ostringstream msg;
    msg << "split R-hat of the log likelihood is " << chain.rhat << " (> 1.1); chains may not have mixed";
    chain.warnings.push_back(msg.str());
  }
  return chain;
}

std::size_t max_likelihood_index(const Chain& chain) {
  if (chain.states.empty()) throw InferenceError("empty chain has no maximum likelihood sample");
  std::size_t best = 0;
  for (std::size_t i = 1; i < chain.states.size(); ++i) {
    if (chain.states[i].log_lik > chain.states[best].log_lik) best = i;
  }
  return best;
}

const ParameterState& max_likelihood_sample(const Chain& chain) {
  return chain.states[max_likelihood_index(chain)];
}

// ---------------------------------------------------------------------------
// JSON lines

namespace {

using nlohmann::json;

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

std::string state_to_json(const ParameterState& s, std::size_t chain_index, std::size_t index) {
  json doc;
  doc["chain"] = chain_index;
  doc["index"] = index;
  doc["log_lik"] = s.log_lik;
  doc["log_lik_structure"] = s.log_lik_structure;
  doc["log_lik_property"] = s.log_lik_property;
  doc["tail_seed"] = s.tail_seed;
  doc["changepoints"] = s.seg.changepoints.values;
  if (s.seg.hyper.lengthscales.size() > 0) {
    json w = json::array();
    for (Eigen::Index c = 0; c < s.seg.whitened.cols(); ++c) w.push_back(vec_json(s.seg.whitened.col(c)));
    doc["segmentation"] = {{"lengthscales", vec_json(s.seg.hyper.lengthscales)},
                           {"std", s.seg.hyper.std},
                           {"whitened", w}};
  }
  json props = json::array();
  for (std::size_t j = 0; j < s.prop.components.size(); ++j) {
    json regions = json::array();
    for (const auto& c : s.prop.components[j]) {
      regions.push_back({{"lengthscales", vec_json(c.hyper.lengthscales)},
                         {"std", c.hyper.std},
                         {"bias", c.hyper.bias},
                         {"whitened", vec_json(c.whitened)}});
    }
    props.push_back({{"noise", s.prop.noise[j]}, {"regions", regions}});
  }
  doc["properties"] = props;
  return doc.dump();
}

ParameterState state_from_json(const std::string& line) {
  ParameterState s;
  try {
    const json doc = json::parse(line);
    s.log_lik = doc.at("log_lik").get<double>();
    s.log_lik_structure = doc.at("log_lik_structure").get<double>();
    s.log_lik_property = doc.at("log_lik_property").get<double>();
    s.tail_seed = doc.at("tail_seed").get<std::uint64_t>();
    s.seg.changepoints.values = doc.at("changepoints").get<std::vector<double>>();
    if (doc.contains("segmentation")) {
      const auto& seg = doc["segmentation"];
      s.seg.hyper.lengthscales = json_vec(seg.at("lengthscales"));
      s.seg.hyper.std = seg.at("std").get<double>();
      const auto& w = seg.at("whitened");
      if (!w.empty()) {
        s.seg.whitened.resize(static_cast<Eigen::Index>(w[0].size()), static_cast<Eigen::Index>(w.size()));
        for (std::size_t c = 0; c < w.size(); ++c) s.seg.whitened.col(static_cast<Eigen::Index>(c)) = json_vec(w[c]);
      }
    }
    for (const auto& p : doc.at("properties")) {
      std::vector<PropertyComponent> comps;
      for (const auto& r : p.at("regions")) {
        PropertyComponent c;
        c.hyper.lengthscales = json_vec(r.at("lengthscales"));
        c.hyper.std = r.at("std").get<double>();
        c.hyper.bias = r.at("bias").get<double>();
        c.whitened = json_vec(r.at("whitened"));
        comps.push_back(std::move(c));
      }
      s.prop.components.push_back(std::move(comps));
      s.prop.noise.push_back(p.at("noise").get<double>());
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed chain record: ") + e.what());
  }
  return s;
}

void write_chain_jsonl(const std::filesystem::path& path, const Chain& chain) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write chain file: " + path.string());
  std::size_t c = 0;
  for (std::size_t i = 0; i < chain.states.size(); ++i) {
    while (c + 1 < chain.chain_offsets.size() && i >= chain.chain_offsets[c + 1]) ++c;
    out << state_to_json(chain.states[i], c, i - chain.chain_offsets[c]) << "\n";
  }
}

std::vector<ParameterState> read_chain_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open chain file: " + path.string());
  std::vector<ParameterState> states;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    states.push_back(state_from_json(line));
  }
  return states;
}

}  // namespace sage
