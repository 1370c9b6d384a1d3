#pragma once

// Test-time adaptation by deep subspace alignment, plus the entropy-based
// baselines that share its training loop.
//
// Pipeline for one target batch X:
//   Z      = relu(γ ⊙ norm(X·W₁ + b₁) + β)      (batch statistics)
//   Ẑ      = Z·W_t·Φ·W_sᵀ
//   logits = Ẑ·W₂ + b₂
// and the objective λ_lr·L_lr + ‖W_t·Φ − W_s‖² + λ_cb·L_CB is minimized over
// {Φ, γ, β} with Adam. W_t is fitted once before the loop and never refit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "subalign/dataio.hpp"
#include "subalign/errors.hpp"
#include "subalign/losses.hpp"
#include "subalign/model.hpp"
#include "subalign/numerics.hpp"
#include "subalign/subspace.hpp"

namespace subalign {

enum class Method { cattan, tent, tent_plus, lr_cb };

inline Method parse_method(const std::string& s) {
  if (s == "cattan") return Method::cattan;
  if (s == "tent") return Method::tent;
  if (s == "tent-plus" || s == "tent_plus") return Method::tent_plus;
  if (s == "lr-cb" || s == "lr_cb") return Method::lr_cb;
  throw ConfigError("unknown method \"" + s + "\" (expected cattan, tent, tent-plus, lr-cb)");
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::cattan: return "cattan";
    case Method::tent: return "tent";
    case Method::tent_plus: return "tent-plus";
    case Method::lr_cb: return "lr-cb";
  }
  return "cattan";
}

struct AdaptConfig {
  Method method = Method::cattan;
  double lambda_lr = 0.025;
  double lambda_cb = 1.0;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 5;
  std::optional<std::size_t> sub_dim;  // empty: choose with the eigen-gap rule
  double delta = 0.1;
  double epsilon = 1e6;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("adapt: learning rate must be finite and non-negative");
    if (batch_size < 2) throw ConfigError("adapt: batch size must be at least 2");
    if (epochs == 0) throw ConfigError("adapt: epochs must be positive");
    if (sub_dim && *sub_dim == 0) throw ConfigError("adapt: sub_dim must be positive");
    LossWeights{lambda_lr, lambda_cb}.validate();
    DimSelectConfig{delta, epsilon}.validate();
  }
};

/// Which terms and parameter groups one adaptation run uses. Every method is
/// an instance of this; Method only picks the preset.
enum class Calibration { likelihood_ratio, entropy };

struct EngineSpec {
  bool use_alignment = true;
  Calibration calibration = Calibration::likelihood_ratio;
  double lambda_calibration = 0.025;
  double lambda_cb = 1.0;
  bool train_affine = true;
  bool train_phi = true;
};

inline EngineSpec engine_spec(const AdaptConfig& cfg) {
  switch (cfg.method) {
    case Method::cattan: return {true, Calibration::likelihood_ratio, cfg.lambda_lr, cfg.lambda_cb, true, true};
    case Method::tent: return {false, Calibration::entropy, 1.0, 0.0, true, false};
    case Method::tent_plus: return {false, Calibration::entropy, 1.0, cfg.lambda_cb, true, false};
    case Method::lr_cb: return {false, Calibration::likelihood_ratio, cfg.lambda_lr, cfg.lambda_cb, true, false};
  }
  return {};
}

/// The aligned classifier head: project with W_t, apply Φ, re-project with W_s.
struct AlignedHead {
  SubspaceBasis w_t;
  AlignmentTransform phi;
  SubspaceBasis w_s;
};

struct AdaptInit {
  SubspaceBasis w_s;  // source basis truncated to the working dimension
  SubspaceBasis w_t;
  AlignmentTransform phi;
  std::vector<std::string> registry;  // trainable parameter groups
};

/// Latents of `x` under batch statistics computed over all of `x` at once.
inline Matrix full_pass_latent(const SourceModel& model, const Matrix& x) {
  return forward(model, x, StatsMode::batch).latent;
}

/// Working subspace dimension: the configured one, or the eigen-gap rule on
/// the stored source spectrum against the target latent spectrum.
inline std::size_t resolve_sub_dim(const SubspaceBasis& w_s, const Matrix& z_t, const AdaptConfig& cfg) {
  if (cfg.sub_dim) return *cfg.sub_dim;
  const DimSelectConfig sel{cfg.delta, cfg.epsilon, w_s.sub_dim()};
  return select_dim(w_s.eigenvalues, covariance_spectrum(z_t), z_t.rows(), sel).dim;
}

/// Fits W_t on the latents of the target set (or of `pca_rows` of it) and
/// initializes Φ with the closed-form alignment W_tᵀ·W_s.
inline AdaptInit init_adaptation(const SourceModel& model, const SubspaceBasis& w_s, const Matrix& target,
                                 const AdaptConfig& cfg,
                                 std::optional<std::span<const std::size_t>> pca_rows = std::nullopt) {
  cfg.validate();
  model.validate();
  if (w_s.ambient_dim() != model.latent_dim) {
    throw DimensionError("source subspace lives in " + std::to_string(w_s.ambient_dim()) +
                         " dimensions, model latents have " + std::to_string(model.latent_dim));
  }
  const Matrix z_t = full_pass_latent(model, target);
  const std::size_t d = resolve_sub_dim(w_s, z_t, cfg);
  if (d > w_s.sub_dim()) {
    throw ConfigError("subspace dimension " + std::to_string(d) + " exceeds the stored source basis (d=" +
                      std::to_string(w_s.sub_dim()) + ")");
  }
  const Matrix fit_on = pca_rows ? z_t.select_rows(*pca_rows) : z_t;
  if (fit_on.rows() < d) {
    throw DataError("target set has " + std::to_string(fit_on.rows()) + " samples, fewer than d=" + std::to_string(d));
  }
  AdaptInit init;
  init.w_s = w_s.sub_dim() == d ? w_s : w_s.truncated(d);
  init.w_t = fit_pca(fit_on, d);
  init.phi = closed_form_phi(init.w_t, init.w_s);
  init.registry = {"bn_gamma", "bn_beta", "phi"};
  return init;
}

struct Objective {
  LossReport report;
  Vector grad_gamma;
  Vector grad_beta;
  Matrix grad_phi;  // empty without alignment
};

/// Objective and exact gradients for one batch under batch statistics.
/// Without alignment the logits come straight from the classifier and the
/// alignment term is zero.
inline Objective adaptation_objective(const SourceModel& model, const Matrix& x, const EngineSpec& spec,
                                      const AlignedHead* head = nullptr) {
  if (spec.use_alignment && head == nullptr) throw ConfigError("adaptation_objective: alignment requested without a head");
  const ForwardCache cache = forward(model, x, StatsMode::batch);
  Objective out;

  Matrix projected;
  Matrix logits;
  if (spec.use_alignment) {
    projected = matmul(cache.latent, head->w_t.basis);
    logits = classify_aligned(model, matmul_nt(matmul(projected, head->phi.phi), head->w_s.basis));
  } else {
    logits = cache.logits;
  }

  Matrix grad_logits;
  if (spec.use_alignment && spec.calibration == Calibration::likelihood_ratio) {
    const AlignedPath path{projected, model.classifier_weight};
    auto t = total_loss(logits, head->phi, head->w_t, head->w_s, {spec.lambda_calibration, spec.lambda_cb}, &path);
    out.report = t.report;
    grad_logits = std::move(t.grad_logits);
    out.grad_phi = std::move(t.grad_phi);
  } else {
    const auto cal = spec.calibration == Calibration::entropy ? entropy_loss(logits) : lr_loss(logits);
    const auto cb = class_balance_loss_logits(logits);
    out.report.lr_term = cal.loss;
    out.report.cb_term = cb.loss;
    grad_logits = spec.lambda_calibration * cal.grad + spec.lambda_cb * cb.grad;
    if (spec.use_alignment) {
      auto align = alignment_loss(head->phi, head->w_t, head->w_s);
      out.report.alignment_term = align.loss;
      const Matrix grad_aligned = matmul_nt(grad_logits, model.classifier_weight);
      out.grad_phi = align.grad_phi + matmul(matmul_tn(projected, grad_aligned), head->w_s.basis);
    }
    out.report.total = spec.lambda_calibration * out.report.lr_term + out.report.alignment_term +
                       spec.lambda_cb * out.report.cb_term;
  }

  // ∂L/∂Z: through the classifier, then back through re-projection, Φ and W_t.
  Matrix grad_latent = matmul_nt(grad_logits, model.classifier_weight);
  if (spec.use_alignment) {
    grad_latent = matmul_nt(matmul_nt(matmul(grad_latent, head->w_s.basis), head->phi.phi), head->w_t.basis);
  }
  auto affine = backward_from_latent(model, cache, grad_latent);
  out.grad_gamma = std::move(affine.gamma);
  out.grad_beta = std::move(affine.beta);
  return out;
}

struct AdaptResult {
  Method method = Method::cattan;
  SourceModel model;
  std::optional<AlignedHead> head;  // present for alignment methods
  std::vector<LossReport> trace;        // full-target objective after each epoch
  std::vector<LossReport> batch_trace;  // one entry per optimizer step
  std::size_t steps = 0;
};

inline bool finite(const LossReport& r) {
  return std::isfinite(r.total) && std::isfinite(r.lr_term) && std::isfinite(r.alignment_term) &&
         std::isfinite(r.cb_term);
}

/// Shared loop behind every method: epoch-shuffled mini-batches (a trailing
/// batch of one sample is dropped), one Adam step per parameter group.
inline AdaptResult run_engine(const SourceModel& model, const Matrix& target, const AdaptConfig& cfg,
                              const EngineSpec& spec, Rng& rng, std::optional<AdaptInit> init = std::nullopt) {
  cfg.validate();
  model.validate();
  if (target.rows() < 2) throw DataError("adapt: need at least 2 target samples");
  if (target.cols() != model.in_dim) throw DimensionError("adapt: target features do not match the model input");
  if (spec.use_alignment && !init) throw ConfigError("adapt: alignment requires an initialized head");

  AdaptResult res;
  res.method = cfg.method;
  res.model = model;
  std::optional<AlignedHead> head;
  if (spec.use_alignment) head = AlignedHead{init->w_t, init->phi, init->w_s};

  const std::size_t dim = model.latent_dim;
  AdamState affine_state(2 * dim, cfg.lr);
  AdamState phi_state(head ? head->phi.phi.size() : 0, cfg.lr);
  Vector affine(2 * dim), grad_affine(2 * dim);

  const std::size_t n = target.rows();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      if (stop - start < 2) continue;
      const Matrix x = target.select_rows(std::span<const std::size_t>(order.data() + start, stop - start));
      Objective obj = adaptation_objective(res.model, x, spec, head ? &*head : nullptr);
      if (!finite(obj.report)) {
        throw NumericalError("adapt: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index));
      }
      res.batch_trace.push_back(obj.report);
      if (spec.use_alignment && spec.train_phi) adam_step(head->phi.phi.values(), obj.grad_phi.values(), phi_state);
      if (spec.train_affine) {
        std::copy(res.model.bn_gamma.begin(), res.model.bn_gamma.end(), affine.begin());
        std::copy(res.model.bn_beta.begin(), res.model.bn_beta.end(), affine.begin() + static_cast<std::ptrdiff_t>(dim));
        std::copy(obj.grad_gamma.begin(), obj.grad_gamma.end(), grad_affine.begin());
        std::copy(obj.grad_beta.begin(), obj.grad_beta.end(), grad_affine.begin() + static_cast<std::ptrdiff_t>(dim));
        adam_step(affine, grad_affine, affine_state);
        std::copy_n(affine.begin(), dim, res.model.bn_gamma.begin());
        std::copy_n(affine.begin() + static_cast<std::ptrdiff_t>(dim), dim, res.model.bn_beta.begin());
      }
      ++res.steps;
    }
    const LossReport epoch_report = adaptation_objective(res.model, target, spec, head ? &*head : nullptr).report;
    if (!finite(epoch_report)) {
      throw NumericalError("adapt: non-finite full-target loss after epoch " + std::to_string(epoch));
    }
    res.trace.push_back(epoch_report);
  }
  res.head = std::move(head);
  return res;
}

/// Subspace-alignment adaptation.
inline AdaptResult run_adaptation(const SourceModel& model, const SubspaceBasis& w_s, const Matrix& target,
                                  const AdaptConfig& cfg, Rng& rng) {
  if (cfg.method != Method::cattan) throw ConfigError("run_adaptation: method must be cattan");
  return run_engine(model, target, cfg, engine_spec(cfg), rng, init_adaptation(model, w_s, target, cfg));
}

/// tent (entropy), tent-plus (entropy + class balance) and lr-cb
/// (likelihood ratio + class balance) over γ, β only.
inline AdaptResult run_baseline(const SourceModel& model, const Matrix& target, const AdaptConfig& cfg, Rng& rng) {
  if (cfg.method == Method::cattan) throw ConfigError("run_baseline: cattan is not a baseline");
  return run_engine(model, target, cfg, engine_spec(cfg), rng);
}

// ---------------------------------------------------------------------------
// Evaluation

/// Where normalization statistics come from at evaluation time.
enum class StatsSource {
  evaluated_set,  // one full pass over the features being evaluated
  stored,         // the model's running statistics
};

/// Class probabilities for every row of `features`.
inline Matrix predict_probs(const SourceModel& model, const Matrix& features, const AlignedHead* head,
                            StatsSource stats = StatsSource::evaluated_set) {
  const SourceModel evaluated = stats == StatsSource::evaluated_set ? with_statistics_of(model, features) : model;
  const ForwardCache c = forward(evaluated, features, StatsMode::running);
  if (head == nullptr) return softmax_rows(c.logits);
  return softmax_rows(classify_aligned(model, align_project(c.latent, head->w_t, head->phi, head->w_s)));
}

struct EvalResult {
  double accuracy = 0.0;
  double ece = 0.0;
  std::vector<double> per_class_accuracy;  // NaN for classes absent from labels
  std::vector<std::uint32_t> predictions;
  std::vector<double> confidences;
};

inline EvalResult summarize_predictions(const Matrix& probs, std::span<const std::uint32_t> labels) {
  if (probs.rows() == 0) throw DataError("evaluate: empty dataset");
  if (probs.rows() != labels.size()) throw DimensionError("evaluate: label count differs from sample count");
  check_labels(labels, probs.cols());
  EvalResult r;
  std::vector<bool> correct(labels.size());
  std::vector<std::size_t> hits(probs.cols(), 0), totals(probs.cols(), 0);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const std::size_t k = argmax(probs.row(i));
    r.predictions.push_back(static_cast<std::uint32_t>(k));
    r.confidences.push_back(probs(i, k));
    correct[i] = k == labels[i];
    ++totals[labels[i]];
    hits[labels[i]] += correct[i] ? 1 : 0;
  }
  r.accuracy = accuracy(r.predictions, labels);
  r.ece = ece(r.confidences, correct);
  for (std::size_t k = 0; k < probs.cols(); ++k) {
    r.per_class_accuracy.push_back(totals[k] == 0 ? std::nan("")
                                                  : static_cast<double>(hits[k]) / static_cast<double>(totals[k]));
  }
  return r;
}

/// Accuracy, ECE and per-class accuracy. With a head, predictions go through
/// the aligned pipeline; otherwise through the plain classifier.
inline EvalResult evaluate(const SourceModel& model, const AlignedHead* head, const Matrix& features,
                           std::span<const std::uint32_t> labels, StatsSource stats = StatsSource::evaluated_set) {
  if (features.rows() == 0) throw DataError("evaluate: empty dataset");
  return summarize_predictions(predict_probs(model, features, head, stats), labels);
}

}  // namespace subalign
