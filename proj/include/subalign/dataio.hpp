#pragma once

// Binary containers (EMB1 embeddings, LBL1 labels, SUB1 subspace bases), the
// synthetic shifted-domain generator, and accuracy / ECE metrics.
//
// All three containers are: 4-byte ASCII magic, u32 little-endian header
// fields, then row-major little-endian payloads (f32 or u32).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "subalign/binary_io.hpp"
#include "subalign/errors.hpp"
#include "subalign/numerics.hpp"
#include "subalign/subspace.hpp"

namespace subalign {

using Labels = std::vector<std::uint32_t>;

// ---------------------------------------------------------------------------
// EMB1

inline io::Bytes encode_embeddings(const Matrix& m) {
  io::ByteWriter w;
  w.magic("EMB1");
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  w.f32_array(m.values());
  return w.take();
}

inline Matrix decode_embeddings(const io::Bytes& bytes, const std::string& label = "embeddings") {
  io::ByteReader r(bytes, label);
  r.expect_magic("EMB1");
  const std::size_t rows = r.u32("rows");
  const std::size_t cols = r.u32("cols");
  Matrix m(rows, cols, r.f32_array(rows * cols, "embedding"));
  r.expect_end();
  return m;
}

inline void write_embeddings(const std::filesystem::path& path, const Matrix& m) {
  io::write_file(path, encode_embeddings(m));
}

inline Matrix read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// LBL1

inline io::Bytes encode_labels(std::span<const std::uint32_t> labels) {
  io::ByteWriter w;
  w.magic("LBL1");
  w.u32(static_cast<std::uint32_t>(labels.size()));
  for (auto l : labels) w.u32(l);
  return w.take();
}

inline Labels decode_labels(const io::Bytes& bytes, const std::string& label = "labels") {
  io::ByteReader r(bytes, label);
  r.expect_magic("LBL1");
  const std::size_t count = r.u32("count");
  r.need_payload(count, 4, "label");
  Labels out(count);
  for (auto& l : out) l = r.u32("label");
  r.expect_end();
  return out;
}

inline void write_labels(const std::filesystem::path& path, std::span<const std::uint32_t> labels) {
  io::write_file(path, encode_labels(labels));
}

inline Labels read_labels(const std::filesystem::path& path) {
  return decode_labels(io::read_file(path), path.string());
}

/// Fails unless every label is below `classes`.
inline void check_labels(std::span<const std::uint32_t> labels, std::size_t classes) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                      " is not below the class count " + std::to_string(classes));
    }
  }
}

// ---------------------------------------------------------------------------
// SUB1

inline constexpr double stored_basis_tolerance = 1e-6;

inline io::Bytes encode_subspace(const SubspaceBasis& s) {
  const std::size_t dim = s.ambient_dim(), d = s.sub_dim();
  if (s.eigenvalues.size() != d) throw DimensionError("encode_subspace: eigenvalue count differs from d");
  io::ByteWriter w;
  w.magic("SUB1");
  w.u32(static_cast<std::uint32_t>(dim));
  w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(s.sample_count));
  w.f32_array(s.basis.values());
  w.f32_array(s.eigenvalues);
  if (s.mean.empty()) {
    w.f32_array(Vector(dim, 0.0));
  } else {
    if (s.mean.size() != dim) throw DimensionError("encode_subspace: mean length differs from D");
    w.f32_array(s.mean);
  }
  return w.take();
}

inline SubspaceBasis decode_subspace(const io::Bytes& bytes, const std::string& label = "subspace") {
  io::ByteReader r(bytes, label);
  r.expect_magic("SUB1");
  const std::size_t dim = r.u32("D");
  const std::size_t d = r.u32("d");
  SubspaceBasis s;
  s.sample_count = r.u32("n");
  if (d == 0 || d > dim) throw FormatError(label + ": subspace dimension d must lie in [1, D]", 8);
  r.need_payload(dim * d + d + dim, 4, "subspace");
  const std::size_t basis_at = r.offset();
  s.basis = Matrix(dim, d, r.f32_array(dim * d, "basis"));
  s.eigenvalues = r.f32_array(d, "eigenvalues");
  s.mean = r.f32_array(dim, "mean");
  r.expect_end();
  if (s.orthonormality_error() > stored_basis_tolerance) {
    throw FormatError(label + ": stored basis is not orthonormal", basis_at);
  }
  return s;
}

inline void write_subspace(const std::filesystem::path& path, const SubspaceBasis& s) {
  io::write_file(path, encode_subspace(s));
}

inline SubspaceBasis read_subspace(const std::filesystem::path& path) {
  return decode_subspace(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Metrics

inline double accuracy(std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> labels) {
  if (predictions.size() != labels.size()) throw DimensionError("accuracy: length mismatch");
  if (predictions.empty()) throw DataError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Expected calibration error over `bins` equal-width, right-closed bins on
/// (0, 1]; a confidence of exactly 0 falls in the first bin.
inline double ece(std::span<const double> confidences, const std::vector<bool>& correct, std::size_t bins = 15) {
  if (confidences.size() != correct.size()) throw DimensionError("ece: length mismatch");
  if (bins == 0) throw ConfigError("ece: bin count must be positive");
  if (confidences.empty()) return 0.0;
  std::vector<double> conf_sum(bins, 0.0), hit_sum(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw DataError("ece: confidence outside [0, 1]");
    const double scaled = std::ceil(c * static_cast<double>(bins));
    const std::size_t b = scaled <= 1.0 ? 0 : std::min(bins - 1, static_cast<std::size_t>(scaled) - 1);
    conf_sum[b] += c;
    hit_sum[b] += correct[i] ? 1.0 : 0.0;
    ++count[b];
  }
  const double n = static_cast<double>(confidences.size());
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double nb = static_cast<double>(count[b]);
    total += (nb / n) * std::abs(hit_sum[b] / nb - conf_sum[b] / nb);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Synthetic shifted domains

enum class ShiftKind { rotation, affine, rotation_translation };

inline ShiftKind parse_shift_kind(const std::string& s) {
  if (s == "rotation") return ShiftKind::rotation;
  if (s == "affine") return ShiftKind::affine;
  if (s == "rotation+translation") return ShiftKind::rotation_translation;
  throw ConfigError("unknown shift kind \"" + s + "\" (expected rotation, affine, rotation+translation)");
}

inline std::string to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::rotation: return "rotation";
    case ShiftKind::affine: return "affine";
    case ShiftKind::rotation_translation: return "rotation+translation";
  }
  return "rotation";
}

struct SynthConfig {
  std::size_t classes = 5;
  std::size_t input_dim = 16;
  std::size_t samples_per_class = 400;
  std::size_t holdout_per_class = 0;  // extra source-distribution samples
  double separation = 4.0;            // distance between any two class means
  double noise = 0.5;                 // isotropic per-coordinate std
  ShiftKind shift = ShiftKind::rotation;
  double angle_deg = 60.0;  // rotation in every plane of a random orthonormal frame; < 0 draws a Haar rotation
  double translation = 2.0;     // norm of the offset for rotation+translation / affine
  double scale_jitter = 0.3;    // affine: axis scales drawn from [1 − j, 1 + j]
  std::uint64_t seed = 7;

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic config: need at least 2 classes");
    if (input_dim < classes) throw ConfigError("synthetic config: input_dim must be at least the class count");
    if (samples_per_class == 0) throw ConfigError("synthetic config: samples_per_class must be positive");
    if (!(separation > 0.0) || !(noise > 0.0)) throw ConfigError("synthetic config: separation and noise must be positive");
    if (!(translation >= 0.0) || !(scale_jitter >= 0.0 && scale_jitter < 1.0)) {
      throw ConfigError("synthetic config: translation must be >= 0 and scale_jitter in [0, 1)");
    }
  }
};

struct Domain {
  Matrix features;
  Labels labels;
};

struct SyntheticData {
  Domain source;
  Domain target;
  Domain source_holdout;  // empty unless holdout_per_class > 0
  Matrix class_means;     // C×input_dim, source domain
  Matrix shift_linear;    // A in x_t = A·x + t
  Vector shift_offset;    // t
};

/// Rotation by `angle` in each of the ⌊n/2⌋ coordinate planes of a random
/// orthonormal frame Q: R = Q·blockdiag(rot(angle))·Qᵀ.
inline Matrix planar_rotation(std::size_t n, double angle_rad, Rng& rng) {
  const Matrix q = random_orthogonal(n, rng);
  Matrix block = Matrix::identity(n);
  for (std::size_t p = 0; p + 1 < n; p += 2) {
    block(p, p) = std::cos(angle_rad);
    block(p, p + 1) = -std::sin(angle_rad);
    block(p + 1, p) = std::sin(angle_rad);
    block(p + 1, p + 1) = std::cos(angle_rad);
  }
  return matmul_nt(matmul(q, block), q);
}

inline SyntheticData gen_synthetic(const SynthConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.classes, dim = cfg.input_dim;

  // Class means on orthogonal axes: pairwise distance = separation.
  const Matrix frame = random_orthogonal(dim, rng);
  SyntheticData out;
  out.class_means = Matrix(c, dim);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t j = 0; j < dim; ++j) out.class_means(k, j) = frame(j, k) * cfg.separation / std::numbers::sqrt2;

  const Matrix rotation = cfg.angle_deg < 0.0 ? random_orthogonal(dim, rng)
                                               : planar_rotation(dim, cfg.angle_deg * std::numbers::pi / 180.0, rng);
  out.shift_linear = rotation;
  out.shift_offset.assign(dim, 0.0);
  if (cfg.shift == ShiftKind::affine) {
    Matrix scales = Matrix::identity(dim);
    for (std::size_t j = 0; j < dim; ++j) scales(j, j) = 1.0 + cfg.scale_jitter * (2.0 * rng.uniform() - 1.0);
    out.shift_linear = matmul(rotation, scales);
  }
  if (cfg.shift != ShiftKind::rotation) {
    Vector dir(dim);
    double norm = 0.0;
    for (double& v : dir) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dim; ++j) out.shift_offset[j] = cfg.translation * dir[j] / norm;
  }

  // Target means: A·μ + t.
  Matrix target_means = matmul_nt(out.class_means, out.shift_linear);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t j = 0; j < dim; ++j) target_means(k, j) += out.shift_offset[j];

  auto sample = [&](const Matrix& means, std::size_t per_class) {
    Domain d{Matrix(c * per_class, dim), Labels(c * per_class)};
    std::size_t row = 0;
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t k = 0; k < c; ++k, ++row) {
        d.labels[row] = static_cast<std::uint32_t>(k);
        for (std::size_t j = 0; j < dim; ++j) d.features(row, j) = means(k, j) + cfg.noise * rng.normal();
      }
    }
    return d;
  };
  out.source = sample(out.class_means, cfg.samples_per_class);
  out.target = sample(target_means, cfg.samples_per_class);
  if (cfg.holdout_per_class > 0) out.source_holdout = sample(out.class_means, cfg.holdout_per_class);
  return out;
}

}  // namespace subalign
