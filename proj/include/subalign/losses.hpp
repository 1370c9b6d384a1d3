#pragma once

// Prediction-calibration objectives and the combined adaptation objective.
// Every batch loss returns its gradient with respect to the logits (or the
// probabilities, for the class-balance term); natural logs throughout.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>

#include "subalign/errors.hpp"
#include "subalign/numerics.hpp"
#include "subalign/subspace.hpp"

namespace subalign {

inline constexpr double probability_floor = 1e-12;

/// Shannon entropy −Σ p·ln p, with 0·ln 0 = 0.
inline double entropy(std::span<const double> probs) {
  double sum = 0.0, h = 0.0;
  for (double p : probs) {
    if (p < 0.0) throw DataError("entropy: negative probability");
    sum += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(sum - 1.0) > 1e-9) throw DataError("entropy: probabilities do not sum to 1");
  return h;
}

struct VectorLoss {
  double loss;
  Vector grad;
};

struct BatchLoss {
  double loss;
  Matrix grad;
};

/// Entropy of softmax(logits) and its gradient −p_j·(ln p_j + H).
inline VectorLoss entropy_of_logits(std::span<const double> logits) {
  const Vector p = softmax(logits);
  const double lse = logsumexp(logits);
  double h = 0.0;
  Vector log_p(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) {
    log_p[j] = logits[j] - lse;
    h -= p[j] * log_p[j];
  }
  Vector g(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) g[j] = -p[j] * (log_p[j] + h);
  return {h, std::move(g)};
}

/// Mean prediction entropy over the rows of a logit batch.
inline BatchLoss entropy_loss(const Matrix& logits) {
  if (logits.rows() == 0) throw DataError("entropy_loss: empty batch");
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  BatchLoss out{0.0, Matrix(logits.rows(), logits.cols())};
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto e = entropy_of_logits(logits.row(i));
    out.loss += e.loss * inv_n;
    for (std::size_t j = 0; j < e.grad.size(); ++j) out.grad(i, j) = e.grad[j] * inv_n;
  }
  return out;
}

/// Likelihood-ratio loss −ŷ_{c*} + log Σ_{i≠c*} e^{ŷ_i}, c* = argmax (lowest
/// index on ties, held constant under differentiation). The gradient is −1
/// on c* and the softmax of the remaining logits elsewhere.
inline VectorLoss lr_loss(std::span<const double> logits) {
  const std::size_t c = logits.size();
  if (c < 2) throw DimensionError("lr_loss: need at least two classes");
  const std::size_t top = argmax(logits);
  double others_max = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < c; ++i)
    if (i != top) others_max = std::max(others_max, logits[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < c; ++i)
    if (i != top) sum += std::exp(logits[i] - others_max);
  VectorLoss out{-logits[top] + others_max + std::log(sum), Vector(c, 0.0)};
  for (std::size_t i = 0; i < c; ++i)
    out.grad[i] = i == top ? -1.0 : std::exp(logits[i] - others_max) / sum;
  return out;
}

/// Batch mean of lr_loss.
inline BatchLoss lr_loss(const Matrix& logits) {
  if (logits.rows() == 0) throw DataError("lr_loss: empty batch");
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  BatchLoss out{0.0, Matrix(logits.rows(), logits.cols())};
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto l = lr_loss(logits.row(i));
    out.loss += l.loss * inv_n;
    for (std::size_t j = 0; j < l.grad.size(); ++j) out.grad(i, j) = l.grad[j] * inv_n;
  }
  return out;
}

/// Binary cross-entropy between the batch-mean prediction p̄ and the uniform
/// prior 1/C, summed over classes. p̄ is clamped to [1e-12, 1 − 1e-12].
inline BatchLoss class_balance_loss(const Matrix& probs) {
  const std::size_t n = probs.rows(), c = probs.cols();
  if (n == 0 || c == 0) throw DataError("class_balance_loss: empty batch");
  const Vector mean = column_means(probs);
  const double prior = 1.0 / static_cast<double>(c);
  BatchLoss out{0.0, Matrix(n, c)};
  Vector d_mean(c);
  for (std::size_t k = 0; k < c; ++k) {
    const double p = std::clamp(mean[k], probability_floor, 1.0 - probability_floor);
    out.loss -= prior * std::log(p) + (1.0 - prior) * std::log(1.0 - p);
    d_mean[k] = -prior / p + (1.0 - prior) / (1.0 - p);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) out.grad(i, k) = d_mean[k] * inv_n;
  return out;
}

/// Pulls ∂L/∂p back through a row-wise softmax: g_z = p ⊙ (g_p − ⟨p, g_p⟩).
inline Matrix softmax_backward(const Matrix& probs, const Matrix& grad_probs) {
  require_same_shape(probs, grad_probs, "softmax_backward");
  Matrix g(probs.rows(), probs.cols());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t k = 0; k < probs.cols(); ++k) dot += probs(i, k) * grad_probs(i, k);
    for (std::size_t k = 0; k < probs.cols(); ++k) g(i, k) = probs(i, k) * (grad_probs(i, k) - dot);
  }
  return g;
}

/// Class-balance loss evaluated on softmax(logits), gradient w.r.t. logits.
inline BatchLoss class_balance_loss_logits(const Matrix& logits) {
  const Matrix p = softmax_rows(logits);
  auto cb = class_balance_loss(p);
  return {cb.loss, softmax_backward(p, cb.grad)};
}

// ---------------------------------------------------------------------------
// Combined objective

struct LossWeights {
  double lambda_lr = 0.025;
  double lambda_cb = 1.0;

  void validate() const {
    if (!(lambda_lr >= 0.0 && std::isfinite(lambda_lr)) || !(lambda_cb >= 0.0 && std::isfinite(lambda_cb))) {
      throw ConfigError("loss weights must be finite and non-negative");
    }
  }
};

struct LossReport {
  double total = 0.0;
  double lr_term = 0.0;
  double alignment_term = 0.0;
  double cb_term = 0.0;
};

/// The classifier-side route by which Φ reaches the logits:
/// logits = projected·Φ·W_sᵀ·W₂ + b₂ with projected = Z_t·W_t.
struct AlignedPath {
  const Matrix& projected;
  const Matrix& classifier_weight;
};

struct TotalLoss {
  LossReport report;
  Matrix grad_logits;
  Matrix grad_phi;
};

/// L = λ_lr·L_lr + L_Φ + λ_cb·L_CB. grad_phi holds the alignment-cost term,
/// plus the classification term when `path` is supplied.
inline TotalLoss total_loss(const Matrix& logits, const AlignmentTransform& phi, const SubspaceBasis& w_t,
                            const SubspaceBasis& w_s, const LossWeights& weights,
                            const AlignedPath* path = nullptr) {
  weights.validate();
  const auto lr = lr_loss(logits);
  const auto cb = class_balance_loss_logits(logits);
  auto align = alignment_loss(phi, w_t, w_s);

  TotalLoss out;
  out.report.lr_term = lr.loss;
  out.report.cb_term = cb.loss;
  out.report.alignment_term = align.loss;
  out.report.total = weights.lambda_lr * lr.loss + align.loss + weights.lambda_cb * cb.loss;
  out.grad_logits = weights.lambda_lr * lr.grad + weights.lambda_cb * cb.grad;
  out.grad_phi = std::move(align.grad_phi);
  if (path != nullptr) {
    if (path->projected.rows() != logits.rows() || path->projected.cols() != phi.dim() ||
        path->classifier_weight.cols() != logits.cols() || path->classifier_weight.rows() != w_s.ambient_dim()) {
      throw DimensionError("total_loss: aligned path shapes do not match the logits");
    }
    const Matrix grad_aligned = matmul_nt(out.grad_logits, path->classifier_weight);  // ∂L/∂Ẑ
    out.grad_phi = out.grad_phi + matmul(matmul_tn(path->projected, grad_aligned), w_s.basis);
  }
  return out;
}

}  // namespace subalign
