#pragma once

// Post-hoc shift gate. K adapted hypotheses differ in the target subspace
// they were aligned with; a sample on which they disagree is treated as
// coming from outside the adapted domain and is classified with Φ = I.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "subalign/adapt.hpp"
#include "subalign/errors.hpp"
#include "subalign/numerics.hpp"

namespace subalign {

/// Which target rows a hypothesis fits its subspace on. Adaptation itself
/// always runs on the whole target set.
enum class SubsetRule {
  all,
  lowest_confidence,   // the two-thirds of samples the source model is least sure about
  highest_confidence,  // the two-thirds it is most sure about
};

inline std::string to_string(SubsetRule r) {
  switch (r) {
    case SubsetRule::all: return "all";
    case SubsetRule::lowest_confidence: return "lowest_confidence";
    case SubsetRule::highest_confidence: return "highest_confidence";
  }
  return "all";
}

inline SubsetRule parse_subset_rule(const std::string& s) {
  if (s == "all") return SubsetRule::all;
  if (s == "lowest_confidence") return SubsetRule::lowest_confidence;
  if (s == "highest_confidence") return SubsetRule::highest_confidence;
  throw ConfigError("unknown subset rule \"" + s + "\"");
}

inline std::vector<SubsetRule> default_hypothesis_plan() {
  return {SubsetRule::all, SubsetRule::lowest_confidence, SubsetRule::highest_confidence};
}

/// How a gated-out sample is classified.
enum class IdentityPath {
  subspace,  // Z·W_t·W_sᵀ: the aligned pipeline with Φ replaced by I
  bypass,    // Z: the adapted model's plain classifier
};

struct Hypothesis {
  SourceModel model;
  AlignedHead head;
  SubsetRule rule = SubsetRule::all;
};

struct HypothesisEnsemble {
  std::vector<Hypothesis> hypotheses;
  double tau = 0.75;
  IdentityPath identity_path = IdentityPath::bypass;

  [[nodiscard]] std::size_t size() const noexcept { return hypotheses.size(); }

  void validate() const {
    if (hypotheses.size() < 2) throw ConfigError("ensemble needs at least 2 hypotheses");
    if (!(tau >= 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be finite and non-negative");
    const auto& first = hypotheses.front();
    for (const auto& h : hypotheses) {
      if (h.model.latent_dim != first.model.latent_dim || h.model.classes != first.model.classes ||
          h.model.in_dim != first.model.in_dim || h.head.phi.dim() != first.head.phi.dim() ||
          h.head.w_t.sub_dim() != first.head.w_t.sub_dim()) {
        throw DimensionError("ensemble hypotheses disagree on D, d or C");
      }
    }
  }
};

/// Max softmax probability of the unadapted model, with normalization
/// statistics taken over the whole target set.
inline Vector source_confidence(const SourceModel& model, const Matrix& target) {
  const Matrix p = predict_probs(model, target, nullptr);
  Vector conf(p.rows());
  for (std::size_t i = 0; i < p.rows(); ++i) conf[i] = p(i, argmax(p.row(i)));
  return conf;
}

/// Row indices for a subset rule: ⌈2n/3⌉ samples ordered by confidence
/// (ties by index), returned in ascending index order.
inline std::vector<std::size_t> subset_rows(SubsetRule rule, std::span<const double> confidence) {
  const std::size_t n = confidence.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (rule == SubsetRule::all) return idx;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return confidence[a] < confidence[b]; });
  const std::size_t keep = (2 * n + 2) / 3;
  std::vector<std::size_t> out = rule == SubsetRule::lowest_confidence
                                     ? std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep))
                                     : std::vector<std::size_t>(idx.end() - static_cast<std::ptrdiff_t>(keep), idx.end());
  std::sort(out.begin(), out.end());
  return out;
}

/// One adapted hypothesis per plan entry, each with its own child seed.
inline HypothesisEnsemble build_hypotheses(const SourceModel& model, const SubspaceBasis& w_s, const Matrix& target,
                                           const AdaptConfig& cfg, Rng& rng,
                                           const std::vector<SubsetRule>& plan = default_hypothesis_plan(),
                                           double tau = 0.75) {
  if (plan.size() < 2) throw ConfigError("build_hypotheses: need at least 2 hypotheses");
  if (cfg.method != Method::cattan) throw ConfigError("build_hypotheses: hypotheses are alignment adaptations");
  const Vector confidence = source_confidence(model, target);
  HypothesisEnsemble ens;
  ens.tau = tau;
  for (SubsetRule rule : plan) {
    Rng child = rng.split();
    const auto rows = subset_rows(rule, confidence);
    AdaptInit init = [&] {
      try {
        return rule == SubsetRule::all
                   ? init_adaptation(model, w_s, target, cfg)
                   : init_adaptation(model, w_s, target, cfg, std::span<const std::size_t>(rows));
      } catch (const DataError& e) {
        throw DataError("build_hypotheses: subset too small for the subspace fit (" + std::string(e.what()) + ")");
      }
    }();
    AdaptResult r = run_engine(model, target, cfg, engine_spec(cfg), child, std::move(init));
    ens.hypotheses.push_back({std::move(r.model), std::move(*r.head), rule});
  }
  ens.validate();
  return ens;
}

/// Inter-hypothesis consistency q̄ ∈ {0, 1/K, …, 1}: the fraction of
/// hypotheses whose argmax equals the argmax of the mean probability of the
/// other K−1 (lowest index on ties).
inline double q_score(const std::vector<Vector>& hypothesis_probs) {
  const std::size_t k_total = hypothesis_probs.size();
  if (k_total < 2) throw ConfigError("q_score: need at least 2 hypotheses");
  const std::size_t c = hypothesis_probs.front().size();
  std::size_t agree = 0;
  Vector others(c);
  for (std::size_t k = 0; k < k_total; ++k) {
    std::fill(others.begin(), others.end(), 0.0);
    for (std::size_t i = 0; i < k_total; ++i) {
      if (i == k) continue;
      if (hypothesis_probs[i].size() != c) throw DimensionError("q_score: hypotheses disagree on class count");
      for (std::size_t j = 0; j < c; ++j) others[j] += hypothesis_probs[i][j];
    }
    for (double& v : others) v /= static_cast<double>(k_total - 1);
    agree += argmax(others) == argmax(hypothesis_probs[k]) ? 1 : 0;
  }
  return static_cast<double>(agree) / static_cast<double>(k_total);
}

struct GateDecision {
  double q_bar = 0.0;
  bool used_alignment = true;
  std::uint32_t prediction = 0;
  std::vector<std::uint32_t> hypothesis_argmax;
};

/// Gate for one sample: aligned prediction of hypothesis 1 when q̄ ≥ τ,
/// otherwise the identity-path prediction.
inline GateDecision gated_predict(const std::vector<Vector>& hypothesis_probs, std::span<const double> identity_probs,
                                  double tau) {
  GateDecision g;
  g.q_bar = q_score(hypothesis_probs);
  g.used_alignment = g.q_bar >= tau;
  for (const auto& p : hypothesis_probs) g.hypothesis_argmax.push_back(static_cast<std::uint32_t>(argmax(p)));
  g.prediction = g.used_alignment ? g.hypothesis_argmax.front() : static_cast<std::uint32_t>(argmax(identity_probs));
  return g;
}

/// Per-hypothesis probabilities and the identity-path probabilities of the
/// primary hypothesis for a feature set (statistics over that set).
struct EnsembleScores {
  std::vector<Matrix> hypothesis_probs;
  Matrix identity_probs;
};

inline Matrix identity_path_probs(const HypothesisEnsemble& ens, const Matrix& features) {
  const Hypothesis& primary = ens.hypotheses.front();
  if (ens.identity_path == IdentityPath::bypass) return predict_probs(primary.model, features, nullptr);
  const AlignedHead identity{primary.head.w_t, AlignmentTransform::identity(primary.head.phi.dim()), primary.head.w_s};
  return predict_probs(primary.model, features, &identity);
}

inline EnsembleScores score_ensemble(const HypothesisEnsemble& ens, const Matrix& features) {
  ens.validate();
  EnsembleScores s;
  s.hypothesis_probs.resize(ens.size());
  parallel_for(ens.size(), 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = lo; k < hi; ++k)
      s.hypothesis_probs[k] = predict_probs(ens.hypotheses[k].model, features, &ens.hypotheses[k].head);
  });
  s.identity_probs = identity_path_probs(ens, features);
  return s;
}

inline std::vector<GateDecision> gate_all(const HypothesisEnsemble& ens, const EnsembleScores& scores, double tau) {
  const std::size_t n = scores.identity_probs.rows();
  std::vector<GateDecision> out(n);
  std::vector<Vector> per_hyp(ens.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < ens.size(); ++k) {
      const auto row = scores.hypothesis_probs[k].row(i);
      per_hyp[k].assign(row.begin(), row.end());
    }
    out[i] = gated_predict(per_hyp, scores.identity_probs.row(i), tau);
  }
  return out;
}

/// Gated decisions for every row of `features`, using the ensemble's τ.
inline std::vector<GateDecision> gated_decisions(const HypothesisEnsemble& ens, const Matrix& features) {
  return gate_all(ens, score_ensemble(ens, features), ens.tau);
}

inline double gated_accuracy(const std::vector<GateDecision>& decisions, std::span<const std::uint32_t> labels) {
  std::vector<std::uint32_t> pred;
  pred.reserve(decisions.size());
  for (const auto& d : decisions) pred.push_back(d.prediction);
  return accuracy(pred, labels);
}

inline double mean_q_bar(const std::vector<GateDecision>& decisions) {
  if (decisions.empty()) return 0.0;
  double s = 0.0;
  for (const auto& d : decisions) s += d.q_bar;
  return s / static_cast<double>(decisions.size());
}

}  // namespace subalign
