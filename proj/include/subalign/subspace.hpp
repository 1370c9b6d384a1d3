#pragma once

// PCA subspaces, the eigen-gap dimension rule, and linear subspace alignment.
//
// Conventions: feature matrices are n×D with samples in rows, a basis is D×d
// with orthonormal columns, and an alignment Φ is d×d acting on target
// subspace coordinates from the right (Z·W_t·Φ).

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "subalign/errors.hpp"
#include "subalign/numerics.hpp"

namespace subalign {

struct SubspaceBasis {
  Matrix basis;        // D×d, orthonormal columns
  Vector eigenvalues;  // length d, non-increasing
  Vector mean;         // length D, stored for diagnostics only
  std::size_t sample_count = 0;

  [[nodiscard]] std::size_t ambient_dim() const noexcept { return basis.rows(); }
  [[nodiscard]] std::size_t sub_dim() const noexcept { return basis.cols(); }

  /// Leading `d` components of this basis.
  [[nodiscard]] SubspaceBasis truncated(std::size_t d) const {
    if (d == 0 || d > sub_dim()) {
      throw ConfigError("cannot truncate a " + std::to_string(sub_dim()) + "-dim basis to " +
                        std::to_string(d));
    }
    return {basis.left_columns(d), Vector(eigenvalues.begin(), eigenvalues.begin() + static_cast<std::ptrdiff_t>(d)),
            mean, sample_count};
  }

  /// max |WᵀW − I|.
  [[nodiscard]] double orthonormality_error() const {
    return max_abs_diff(matmul_tn(basis, basis), Matrix::identity(sub_dim()));
  }
};

struct AlignmentTransform {
  Matrix phi;  // d×d

  static AlignmentTransform identity(std::size_t d) { return {Matrix::identity(d)}; }
  [[nodiscard]] std::size_t dim() const noexcept { return phi.rows(); }
};

struct DimSelectConfig {
  double delta = 0.1;
  double epsilon = 1e6;
  std::size_t d_max = static_cast<std::size_t>(-1);

  void validate() const {
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must lie in (0, 1)");
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be positive and finite");
    if (d_max == 0) throw ConfigError("d_max must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// PCA

namespace detail {

inline Matrix centered_covariance(const Matrix& features, const Vector& mean) {
  const std::size_t n = features.rows();
  Matrix centered = features;
  for (std::size_t i = 0; i < n; ++i) {
    auto r = centered.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] -= mean[j];
  }
  Matrix cov = matmul_tn(centered, centered);
  const double inv = 1.0 / static_cast<double>(n - 1);
  for (double& v : cov.values()) v *= inv;
  return cov;
}

/// Flip each column so its largest-magnitude entry is positive (first such entry on ties).
inline void canonicalize_signs(Matrix& basis) {
  for (std::size_t j = 0; j < basis.cols(); ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < basis.rows(); ++i)
      if (std::abs(basis(i, j)) > std::abs(basis(best, j))) best = i;
    if (basis(best, j) < 0.0)
      for (std::size_t i = 0; i < basis.rows(); ++i) basis(i, j) = -basis(i, j);
  }
}

}  // namespace detail

/// Full descending covariance spectrum (divisor n−1), clamped at zero.
inline Vector covariance_spectrum(const Matrix& features) {
  if (features.rows() < 2) throw DataError("covariance_spectrum: need at least 2 samples");
  const Vector mean = column_means(features);
  Vector eig = eigh_descending(detail::centered_covariance(features, mean)).values;
  for (double& e : eig) e = std::max(e, 0.0);
  return eig;
}

/// Top-d principal subspace of the mean-centred sample covariance.
inline SubspaceBasis fit_pca(const Matrix& features, std::size_t d) {
  const std::size_t n = features.rows();
  const std::size_t dim = features.cols();
  if (n < 2) throw DataError("fit_pca: need at least 2 samples, got " + std::to_string(n));
  if (d == 0 || d > std::min(dim, n)) {
    throw ConfigError("fit_pca: subspace dimension " + std::to_string(d) + " outside [1, min(D=" +
                      std::to_string(dim) + ", n=" + std::to_string(n) + ")]");
  }
  if (!features.all_finite()) throw NumericalError("fit_pca: non-finite features");

  Vector mean = column_means(features);
  auto eig = eigh_descending(detail::centered_covariance(features, mean));
  SubspaceBasis out;
  out.basis = eig.vectors.left_columns(d);
  detail::canonicalize_signs(out.basis);
  out.eigenvalues.assign(eig.values.begin(), eig.values.begin() + static_cast<std::ptrdiff_t>(d));
  // Round-off can leave tiny negative values on a PSD spectrum.
  for (double& e : out.eigenvalues) e = std::max(e, 0.0);
  out.mean = std::move(mean);
  out.sample_count = n;
  return out;
}

// ---------------------------------------------------------------------------
// Dimension selection

struct BoundPoint {
  std::size_t dim;   // d, 1-based
  double gap;        // e_d^min − e_{d+1}^min
  double bound;      // right-hand side of the stability rule
  bool admissible;   // gap ≥ bound
};

struct DimSelection {
  std::size_t dim = 0;
  std::vector<BoundPoint> curve;
};

/// Raised when no dimension satisfies the gap rule. Carries the full curve.
class NoStableDimensionError : public NumericalError {
 public:
  explicit NoStableDimensionError(std::vector<BoundPoint> curve)
      : NumericalError("no stable subspace dimension: no eigenvalue gap exceeds the stability bound"),
        curve_(std::move(curve)) {}
  [[nodiscard]] const std::vector<BoundPoint>& curve() const noexcept { return curve_; }

 private:
  std::vector<BoundPoint> curve_;
};

/// Right-hand side (1 + sqrt(ln(2/δ)/2)) · 16·d^{3/2} / (ε·sqrt(n_t)).
inline double stability_bound(std::size_t d, std::size_t n_t, double delta, double epsilon) {
  const double confidence = 1.0 + std::sqrt(std::log(2.0 / delta) / 2.0);
  const double dd = static_cast<double>(d);
  return confidence * 16.0 * dd * std::sqrt(dd) / (epsilon * std::sqrt(static_cast<double>(n_t)));
}

/// Largest d whose min-over-domains eigen-gap clears the stability bound.
/// Candidates are 1 ≤ d ≤ d_max with d+1 present in both spectra.
inline DimSelection select_dim(const Vector& source_eigs, const Vector& target_eigs, std::size_t n_t,
                               const DimSelectConfig& cfg) {
  cfg.validate();
  if (source_eigs.size() < 2 || target_eigs.size() < 2) {
    throw ConfigError("select_dim: both spectra need at least 2 eigenvalues");
  }
  if (n_t == 0) throw ConfigError("select_dim: target sample count must be positive");
  const std::size_t len = std::min(source_eigs.size(), target_eigs.size());
  const std::size_t last = std::min(len - 1, cfg.d_max);

  DimSelection sel;
  sel.curve.reserve(last);
  for (std::size_t d = 1; d <= last; ++d) {
    const double e_d = std::min(source_eigs[d - 1], target_eigs[d - 1]);
    const double e_next = std::min(source_eigs[d], target_eigs[d]);
    const double gap = e_d - e_next;
    const double bound = stability_bound(d, n_t, cfg.delta, cfg.epsilon);
    const bool ok = gap >= bound;
    sel.curve.push_back({d, gap, bound, ok});
    if (ok) sel.dim = d;
  }
  if (sel.dim == 0) throw NoStableDimensionError(std::move(sel.curve));
  return sel;
}

// ---------------------------------------------------------------------------
// Alignment

inline void require_compatible(const SubspaceBasis& w_t, const SubspaceBasis& w_s) {
  if (w_t.ambient_dim() != w_s.ambient_dim() || w_t.sub_dim() != w_s.sub_dim()) {
    throw DimensionError("subspace bases disagree: " + std::to_string(w_t.ambient_dim()) + "x" +
                         std::to_string(w_t.sub_dim()) + " vs " + std::to_string(w_s.ambient_dim()) +
                         "x" + std::to_string(w_s.sub_dim()));
  }
}

inline void require_compatible(const AlignmentTransform& phi, const SubspaceBasis& w_t, const SubspaceBasis& w_s) {
  require_compatible(w_t, w_s);
  if (phi.phi.rows() != w_t.sub_dim() || phi.phi.cols() != w_s.sub_dim()) {
    throw DimensionError("alignment matrix is " + std::to_string(phi.phi.rows()) + "x" +
                         std::to_string(phi.phi.cols()) + ", bases are " + std::to_string(w_t.sub_dim()) +
                         "-dimensional");
  }
}

/// Φ* = W_tᵀ·W_s, the global minimizer of ‖W_t·Φ − W_s‖_F².
inline AlignmentTransform closed_form_phi(const SubspaceBasis& w_t, const SubspaceBasis& w_s) {
  require_compatible(w_t, w_s);
  return {matmul_tn(w_t.basis, w_s.basis)};
}

struct AlignmentLoss {
  double loss;
  Matrix grad_phi;
};

/// ‖W_t·Φ − W_s‖_F² and its gradient 2·W_tᵀ(W_t·Φ − W_s).
inline AlignmentLoss alignment_loss(const AlignmentTransform& phi, const SubspaceBasis& w_t, const SubspaceBasis& w_s) {
  require_compatible(phi, w_t, w_s);
  const Matrix residual = matmul(w_t.basis, phi.phi) - w_s.basis;
  return {frobenius_norm_sq(residual), 2.0 * matmul_tn(w_t.basis, residual)};
}

/// Z·W_t·Φ·W_sᵀ: project onto the target subspace, align, re-project into the
/// ambient space through the source basis.
inline Matrix align_project(const Matrix& z_t, const SubspaceBasis& w_t, const AlignmentTransform& phi,
                            const SubspaceBasis& w_s) {
  require_compatible(phi, w_t, w_s);
  if (z_t.cols() != w_t.ambient_dim()) {
    throw DimensionError("align_project: features have " + std::to_string(z_t.cols()) +
                         " columns, basis expects " + std::to_string(w_t.ambient_dim()));
  }
  return matmul_nt(matmul(matmul(z_t, w_t.basis), phi.phi), w_s.basis);
}

}  // namespace subalign
