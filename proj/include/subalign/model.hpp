#pragma once

// Source model: affine → batch normalization (trainable γ, β) → ReLU feature
// head producing D-dimensional latents, followed by a linear classifier.
// Only γ and β are differentiated at adaptation time; training uses the full
// backward pass below.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "subalign/binary_io.hpp"
#include "subalign/errors.hpp"
#include "subalign/numerics.hpp"

namespace subalign {

struct SourceModel {
  std::size_t in_dim = 0;
  std::size_t latent_dim = 0;
  std::size_t classes = 0;
  Matrix head_weight;  // in_dim×D
  Vector head_bias;    // D
  Vector bn_gamma;     // D
  Vector bn_beta;      // D
  Vector bn_running_mean;
  Vector bn_running_var;
  double bn_eps = 1e-5;
  Matrix classifier_weight;  // D×C
  Vector classifier_bias;    // C

  void validate() const {
    const bool ok = head_weight.rows() == in_dim && head_weight.cols() == latent_dim &&
                    head_bias.size() == latent_dim && bn_gamma.size() == latent_dim &&
                    bn_beta.size() == latent_dim && bn_running_mean.size() == latent_dim &&
                    bn_running_var.size() == latent_dim && classifier_weight.rows() == latent_dim &&
                    classifier_weight.cols() == classes && classifier_bias.size() == classes;
    if (!ok) throw DimensionError("source model fields have inconsistent dimensions");
    for (double v : bn_running_var)
      if (!(v >= 0.0)) throw NumericalError("source model has a negative running variance");
    if (!(bn_eps > 0.0)) throw ConfigError("bn_eps must be positive");
  }

  friend bool operator==(const SourceModel&, const SourceModel&) = default;
};

enum class StatsMode { batch, running };

/// Intermediates of one forward pass, kept for the analytic backward pass.
struct ForwardCache {
  StatsMode mode = StatsMode::running;
  Matrix pre_norm;     // a = x·W₁ + b₁
  Vector mean;         // statistics actually applied
  Vector var;
  Matrix normalized;   // (a − μ)/sqrt(σ² + eps)
  Matrix active;       // 1 where γ·x̂ + β > 0
  Matrix latent;       // Z
  Matrix logits;
};

/// He-initialized head, identity normalization, small classifier weights.
inline SourceModel init_source_model(std::size_t in_dim, std::size_t latent_dim, std::size_t classes, Rng& rng) {
  if (in_dim == 0 || latent_dim == 0 || classes < 2) throw ConfigError("init_source_model: invalid dimensions");
  SourceModel m;
  m.in_dim = in_dim;
  m.latent_dim = latent_dim;
  m.classes = classes;
  m.head_weight = rng.normal_matrix(in_dim, latent_dim, std::sqrt(2.0 / static_cast<double>(in_dim)));
  m.head_bias.assign(latent_dim, 0.0);
  m.bn_gamma.assign(latent_dim, 1.0);
  m.bn_beta.assign(latent_dim, 0.0);
  m.bn_running_mean.assign(latent_dim, 0.0);
  m.bn_running_var.assign(latent_dim, 1.0);
  m.classifier_weight = rng.normal_matrix(latent_dim, classes, std::sqrt(1.0 / static_cast<double>(latent_dim)));
  m.classifier_bias.assign(classes, 0.0);
  return m;
}

/// Per-column mean and biased variance (divisor n).
inline std::pair<Vector, Vector> batch_statistics(const Matrix& a) {
  Vector mean = column_means(a);
  Vector var(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      const double d = r[j] - mean[j];
      var[j] += d * d;
    }
  }
  for (double& v : var) v /= static_cast<double>(a.rows());
  return {std::move(mean), std::move(var)};
}

inline Matrix pre_normalization(const SourceModel& model, const Matrix& x) {
  if (x.cols() != model.in_dim) {
    throw DimensionError("forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                         std::to_string(model.in_dim));
  }
  Matrix a = matmul(x, model.head_weight);
  add_row_vector(a, model.head_bias);
  return a;
}

/// Logits of the frozen classifier applied to (possibly aligned) latents.
inline Matrix classify_aligned(const SourceModel& model, const Matrix& z_hat) {
  if (z_hat.cols() != model.latent_dim) {
    throw DimensionError("classify_aligned: features have " + std::to_string(z_hat.cols()) +
                         " columns, classifier expects " + std::to_string(model.latent_dim));
  }
  Matrix logits = matmul(z_hat, model.classifier_weight);
  add_row_vector(logits, model.classifier_bias);
  return logits;
}

inline ForwardCache forward(const SourceModel& model, const Matrix& x, StatsMode mode) {
  ForwardCache c;
  c.mode = mode;
  c.pre_norm = pre_normalization(model, x);
  const std::size_t n = x.rows();
  const std::size_t dim = model.latent_dim;
  if (mode == StatsMode::batch) {
    if (n < 2) throw DataError("forward: batch statistics need at least 2 samples");
    std::tie(c.mean, c.var) = batch_statistics(c.pre_norm);
  } else {
    c.mean = model.bn_running_mean;
    c.var = model.bn_running_var;
  }
  c.normalized = Matrix(n, dim);
  c.active = Matrix(n, dim);
  c.latent = Matrix(n, dim);
  for (std::size_t j = 0; j < dim; ++j) {
    const double inv_std = 1.0 / std::sqrt(c.var[j] + model.bn_eps);
    for (std::size_t i = 0; i < n; ++i) {
      const double xhat = (c.pre_norm(i, j) - c.mean[j]) * inv_std;
      const double y = model.bn_gamma[j] * xhat + model.bn_beta[j];
      c.normalized(i, j) = xhat;
      c.active(i, j) = y > 0.0 ? 1.0 : 0.0;
      c.latent(i, j) = y > 0.0 ? y : 0.0;
    }
  }
  c.logits = classify_aligned(model, c.latent);
  return c;
}

/// Copy of `model` whose running statistics are the batch statistics of `x`
/// computed in one full pass.
inline SourceModel with_statistics_of(const SourceModel& model, const Matrix& x) {
  if (x.rows() < 2) throw DataError("with_statistics_of: need at least 2 samples");
  SourceModel out = model;
  std::tie(out.bn_running_mean, out.bn_running_var) = batch_statistics(pre_normalization(model, x));
  return out;
}

struct AffineGradients {
  Vector gamma;
  Vector beta;
};

inline void require_cache_matches(const SourceModel& model, const ForwardCache& cache, const Matrix& upstream,
                                  std::size_t expected_cols, const char* what) {
  if (cache.latent.cols() != model.latent_dim || cache.logits.cols() != model.classes ||
      cache.normalized.rows() != cache.latent.rows() || cache.active.rows() != cache.latent.rows()) {
    throw DimensionError(std::string(what) + ": cache does not belong to this model");
  }
  if (upstream.rows() != cache.latent.rows() || upstream.cols() != expected_cols) {
    throw DimensionError(std::string(what) + ": upstream gradient shape does not match the cached batch");
  }
}

/// Gradients of a loss with respect to γ and β given ∂L/∂Z. The batch mean
/// and variance depend only on the frozen head, so they carry no γ/β
/// dependence.
inline AffineGradients backward_from_latent(const SourceModel& model, const ForwardCache& cache,
                                            const Matrix& grad_latent) {
  require_cache_matches(model, cache, grad_latent, model.latent_dim, "backward_from_latent");
  AffineGradients g{Vector(model.latent_dim, 0.0), Vector(model.latent_dim, 0.0)};
  for (std::size_t i = 0; i < grad_latent.rows(); ++i) {
    for (std::size_t j = 0; j < model.latent_dim; ++j) {
      const double dy = grad_latent(i, j) * cache.active(i, j);
      g.gamma[j] += dy * cache.normalized(i, j);
      g.beta[j] += dy;
    }
  }
  return g;
}

struct AdaptGradients {
  Vector gamma;
  Vector beta;
  Matrix latent;  // ∂L/∂Z
};

/// Reverse pass from ∂L/∂logits of the plain (unaligned) classifier path.
inline AdaptGradients backward_adapt(const SourceModel& model, const ForwardCache& cache, const Matrix& grad_logits) {
  require_cache_matches(model, cache, grad_logits, model.classes, "backward_adapt");
  if (cache.mode != StatsMode::batch) throw ConfigError("backward_adapt: cache must come from a batch-mode forward");
  Matrix grad_latent = matmul_nt(grad_logits, model.classifier_weight);
  auto affine = backward_from_latent(model, cache, grad_latent);
  return {std::move(affine.gamma), std::move(affine.beta), std::move(grad_latent)};
}

// ---------------------------------------------------------------------------
// Source training

struct TrainConfig {
  std::size_t latent_dim = 32;
  std::size_t classes = 0;  // 0: infer from labels
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 1e-2;
  double momentum = 0.1;  // running statistics update rate
};

inline std::size_t infer_classes(std::span<const std::uint32_t> labels) {
  std::uint32_t top = 0;
  for (auto l : labels) top = std::max(top, l);
  return static_cast<std::size_t>(top) + 1;
}

/// Rounds every parameter to 32-bit precision so the in-memory model equals
/// its checkpoint image.
inline void quantize_to_f32(SourceModel& m) {
  auto q = [](std::span<double> v) {
    for (double& x : v) x = io::to_f32(x);
  };
  q(m.head_weight.values());
  q(m.head_bias);
  q(m.bn_gamma);
  q(m.bn_beta);
  q(m.bn_running_mean);
  q(m.bn_running_var);
  q(m.classifier_weight.values());
  q(m.classifier_bias);
  m.bn_eps = io::to_f32(m.bn_eps);
}

/// Mini-batch cross-entropy training with Adam on every parameter.
inline SourceModel train_source(const Matrix& features, std::span<const std::uint32_t> labels,
                                const TrainConfig& cfg, Rng& rng) {
  const std::size_t n = features.rows();
  if (labels.size() != n) throw DimensionError("train_source: label count differs from sample count");
  const std::size_t classes = cfg.classes != 0 ? cfg.classes : infer_classes(labels);
  if (classes < 2) throw DataError("train_source: need at least two classes");
  std::vector<std::size_t> per_class(classes, 0);
  for (auto l : labels) {
    if (l >= classes) throw DataError("train_source: label " + std::to_string(l) + " outside [0, C)");
    ++per_class[l];
  }
  if (std::count_if(per_class.begin(), per_class.end(), [](std::size_t c) { return c > 0; }) < 2) {
    throw DataError("train_source: degenerate label set (fewer than two distinct classes)");
  }
  if (n < classes) throw DataError("train_source: fewer samples than classes");
  if (cfg.batch_size < 2) throw ConfigError("train_source: batch size must be at least 2");
  if (!(cfg.lr >= 0.0)) throw ConfigError("train_source: learning rate must be non-negative");

  SourceModel m = init_source_model(features.cols(), cfg.latent_dim, classes, rng);
  const std::size_t in = m.in_dim, dim = m.latent_dim;

  AdamState s_w1(in * dim, cfg.lr), s_b1(dim, cfg.lr), s_g(dim, cfg.lr), s_b(dim, cfg.lr);
  AdamState s_w2(dim * classes, cfg.lr), s_b2(classes, cfg.lr);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      if (stop - start < 2) continue;
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Matrix x = features.select_rows(idx);
      const std::size_t b = idx.size();
      const ForwardCache c = forward(m, x, StatsMode::batch);

      // Cross-entropy gradient, averaged over the batch.
      Matrix d_logits = softmax_rows(c.logits);
      for (std::size_t i = 0; i < b; ++i) {
        d_logits(i, labels[idx[i]]) -= 1.0;
        for (double& v : d_logits.row(i)) v /= static_cast<double>(b);
      }
      const Matrix d_w2 = matmul_tn(c.latent, d_logits);
      Vector d_b2(classes, 0.0);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < classes; ++k) d_b2[k] += d_logits(i, k);
      const Matrix d_latent = matmul_nt(d_logits, m.classifier_weight);

      Vector d_gamma(dim, 0.0), d_beta(dim, 0.0);
      Matrix d_pre(b, dim);
      for (std::size_t j = 0; j < dim; ++j) {
        const double inv_std = 1.0 / std::sqrt(c.var[j] + m.bn_eps);
        double sum_dx = 0.0, sum_dx_xhat = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
          const double dy = d_latent(i, j) * c.active(i, j);
          d_gamma[j] += dy * c.normalized(i, j);
          d_beta[j] += dy;
          const double dxhat = dy * m.bn_gamma[j];
          sum_dx += dxhat;
          sum_dx_xhat += dxhat * c.normalized(i, j);
        }
        const double bn = static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i) {
          const double dxhat = d_latent(i, j) * c.active(i, j) * m.bn_gamma[j];
          d_pre(i, j) = inv_std / bn * (bn * dxhat - sum_dx - c.normalized(i, j) * sum_dx_xhat);
        }
      }
      const Matrix d_w1 = matmul_tn(x, d_pre);
      Vector d_b1(dim, 0.0);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < dim; ++j) d_b1[j] += d_pre(i, j);

      adam_step(m.head_weight.values(), d_w1.values(), s_w1);
      adam_step(m.head_bias, d_b1, s_b1);
      adam_step(m.bn_gamma, d_gamma, s_g);
      adam_step(m.bn_beta, d_beta, s_b);
      adam_step(m.classifier_weight.values(), d_w2.values(), s_w2);
      adam_step(m.classifier_bias, d_b2, s_b2);

      for (std::size_t j = 0; j < dim; ++j) {
        m.bn_running_mean[j] = (1.0 - cfg.momentum) * m.bn_running_mean[j] + cfg.momentum * c.mean[j];
        m.bn_running_var[j] = (1.0 - cfg.momentum) * m.bn_running_var[j] + cfg.momentum * c.var[j];
      }
    }
  }
  quantize_to_f32(m);
  return m;
}

// ---------------------------------------------------------------------------
// CKP1 checkpoint

inline constexpr std::uint32_t checkpoint_version = 1;

inline io::Bytes encode_checkpoint(const SourceModel& m) {
  m.validate();
  io::ByteWriter w;
  w.magic("CKP1");
  w.u32(checkpoint_version);
  w.u32(static_cast<std::uint32_t>(m.in_dim));
  w.u32(static_cast<std::uint32_t>(m.latent_dim));
  w.u32(static_cast<std::uint32_t>(m.classes));
  w.f32(m.bn_eps);
  w.f32_array(m.head_weight.values());
  w.f32_array(m.head_bias);
  w.f32_array(m.bn_gamma);
  w.f32_array(m.bn_beta);
  w.f32_array(m.bn_running_mean);
  w.f32_array(m.bn_running_var);
  w.f32_array(m.classifier_weight.values());
  w.f32_array(m.classifier_bias);
  return w.take();
}

inline SourceModel decode_checkpoint(const io::Bytes& bytes, const std::string& label = "checkpoint") {
  io::ByteReader r(bytes, label);
  r.expect_magic("CKP1");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != checkpoint_version) {
    throw UnsupportedVersionError(label + ": unsupported checkpoint version " + std::to_string(version), version_at);
  }
  SourceModel m;
  m.in_dim = r.u32("in_dim");
  m.latent_dim = r.u32("latent_dim");
  m.classes = r.u32("classes");
  m.bn_eps = r.f32("bn_eps");
  const std::size_t in = m.in_dim, dim = m.latent_dim, c = m.classes;
  r.need_payload(in * dim + 5 * dim + dim * c + c, 4, "parameter");
  m.head_weight = Matrix(in, dim, r.f32_array(in * dim, "head_weight"));
  m.head_bias = r.f32_array(dim, "head_bias");
  m.bn_gamma = r.f32_array(dim, "bn_gamma");
  m.bn_beta = r.f32_array(dim, "bn_beta");
  m.bn_running_mean = r.f32_array(dim, "bn_running_mean");
  m.bn_running_var = r.f32_array(dim, "bn_running_var");
  m.classifier_weight = Matrix(dim, c, r.f32_array(dim * c, "classifier_weight"));
  m.classifier_bias = r.f32_array(c, "classifier_bias");
  r.expect_end();
  for (double v : m.bn_running_var)
    if (v < 0.0) throw FormatError(label + ": negative running variance", 0);
  return m;
}

inline void save_checkpoint(const SourceModel& m, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(m));
}

inline SourceModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace subalign
