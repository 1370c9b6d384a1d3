#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "subalign/dataio.hpp"
#include "subalign/model.hpp"
#include "test_support.hpp"

using namespace subalign;
using namespace subalign::testing;

namespace {

const std::filesystem::path fixtures = SUBALIGN_FIXTURE_DIR;

io::Bytes fixture(const char* name) { return io::read_file(fixtures / name); }

template <class Fn>
void expect_format_error_at(Fn fn, std::size_t offset) {
  try {
    fn();
    ADD_FAILURE() << "no exception";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), offset);
    EXPECT_EQ(e.exit_code(), ExitCode::data);
  }
}

}  // namespace

TEST(Emb1, GoldenBytes) {
  const Matrix expected{{1.0, -2.0, 0.5}, {3.25, 0.0, -0.125}};
  const io::Bytes bytes = fixture("emb_2x3.emb");
  EXPECT_EQ(bytes.size(), 12u + 6u * 4u);
  EXPECT_EQ(decode_embeddings(bytes), expected);
  EXPECT_EQ(encode_embeddings(expected), bytes);
}

TEST(Emb1, Errors) {
  expect_format_error_at([] { read_embeddings(fixtures / "bad_magic.emb"); }, 0);
  EXPECT_THROW(read_embeddings(fixtures / "truncated.emb"), TruncationError);
  EXPECT_THROW(read_embeddings(fixtures / "short_header.emb"), TruncationError);
  EXPECT_THROW(read_embeddings(fixtures / "nonfinite.emb"), FormatError);
  EXPECT_THROW(read_embeddings(fixtures / "does_not_exist.emb"), DataError);
  io::Bytes extra = fixture("emb_2x3.emb");
  extra.push_back(1);
  EXPECT_THROW(decode_embeddings(extra), FormatError);
}

TEST(Emb1, RoundTripQuantizes) {
  Rng rng(80);
  const Matrix m = rng.normal_matrix(7, 5);
  const Matrix back = decode_embeddings(encode_embeddings(m));
  for (std::size_t i = 0; i < m.size(); ++i)
    EXPECT_EQ(back.values()[i], static_cast<double>(static_cast<float>(m.values()[i])));
  EXPECT_EQ(encode_embeddings(back), encode_embeddings(m));
}

TEST(Lbl1, GoldenBytes) {
  const Labels expected{0, 2, 1, 1, 0};
  const io::Bytes bytes = fixture("labels_5.lbl");
  EXPECT_EQ(decode_labels(bytes), expected);
  EXPECT_EQ(encode_labels(expected), bytes);
  expect_format_error_at([] { read_labels(fixtures / "bad_magic.lbl"); }, 0);
  EXPECT_THROW(read_labels(fixtures / "truncated.lbl"), TruncationError);
}

TEST(Lbl1, CheckLabels) {
  const Labels y{0, 2, 1};
  EXPECT_NO_THROW(check_labels(y, 3));
  EXPECT_THROW(check_labels(y, 2), DataError);
}

TEST(Sub1, GoldenBytes) {
  const io::Bytes bytes = fixture("basis_3x2.sub");
  const SubspaceBasis s = decode_subspace(bytes);
  EXPECT_EQ(s.basis, (Matrix{{1, 0}, {0, 1}, {0, 0}}));
  EXPECT_EQ(s.eigenvalues, (Vector{2.5, 0.5}));
  EXPECT_EQ(s.mean, (Vector{0.25, -1.0, 2.0}));
  EXPECT_EQ(s.sample_count, 10u);
  EXPECT_EQ(encode_subspace(s), bytes);
  expect_format_error_at([] { read_subspace(fixtures / "bad_magic.sub"); }, 0);
  EXPECT_THROW(read_subspace(fixtures / "truncated.sub"), TruncationError);
  EXPECT_THROW(read_subspace(fixtures / "not_orthonormal.sub"), FormatError);
}

TEST(Ckp1, GoldenBytes) {
  const io::Bytes bytes = fixture("model.ckp");
  const SourceModel m = decode_checkpoint(bytes);
  EXPECT_EQ(m.in_dim, 2u);
  EXPECT_EQ(m.latent_dim, 2u);
  EXPECT_EQ(m.classes, 2u);
  EXPECT_EQ(m.bn_eps, static_cast<double>(1e-5f));
  EXPECT_EQ(m.head_weight, (Matrix{{1, 2}, {3, 4}}));
  EXPECT_EQ(m.head_bias, (Vector{0.5, -0.5}));
  EXPECT_EQ(m.bn_gamma, (Vector{1.0, 1.5}));
  EXPECT_EQ(m.bn_beta, (Vector{0.0, 0.25}));
  EXPECT_EQ(m.bn_running_mean, (Vector{static_cast<double>(0.1f), static_cast<double>(0.2f)}));
  EXPECT_EQ(m.bn_running_var, (Vector{1.0, 2.0}));
  EXPECT_EQ(m.classifier_weight, (Matrix{{1, -1}, {0.5, 0.5}}));
  EXPECT_EQ(m.classifier_bias, (Vector{0.0, 1.0}));
  EXPECT_EQ(encode_checkpoint(m), bytes);
  expect_format_error_at([] { load_checkpoint(fixtures / "bad_magic.ckp"); }, 0);
  EXPECT_THROW(load_checkpoint(fixtures / "truncated.ckp"), TruncationError);
  EXPECT_THROW(load_checkpoint(fixtures / "version2.ckp"), UnsupportedVersionError);
}

TEST(Accuracy, Examples) {
  const Labels p{0, 1, 2, 2}, y{0, 1, 1, 2};
  EXPECT_DOUBLE_EQ(accuracy(p, y), 0.75);
  EXPECT_THROW(accuracy(Labels{}, Labels{}), DataError);
  EXPECT_THROW(accuracy(Labels{0}, Labels{0, 1}), DimensionError);
}

TEST(Ece, Examples) {
  const std::vector<double> conf(10, 0.9);
  EXPECT_NEAR(ece(conf, std::vector<bool>(10, true), 1), 0.1, 1e-15);
  EXPECT_NEAR(ece(conf, std::vector<bool>(10, true)), 0.1, 1e-15);
  EXPECT_EQ(ece(std::vector<double>(8, 1.0), std::vector<bool>(8, true)), 0.0);
  EXPECT_EQ(ece(std::vector<double>{}, std::vector<bool>{}), 0.0);
  // Two bins, each off by a known amount.
  const std::vector<double> c2{0.2, 0.2, 0.8, 0.8};
  EXPECT_NEAR(ece(c2, {false, false, true, false}, 2), 0.5 * 0.2 + 0.5 * 0.3, 1e-15);
  EXPECT_THROW(ece(std::vector<double>{1.5}, std::vector<bool>{true}), DataError);
  EXPECT_THROW(ece(conf, std::vector<bool>(3, true)), DimensionError);
}

TEST(Ece, BinEdgesAreRightClosed) {
  // 1/15 belongs to the first bin, just above it to the second.
  const double edge = 1.0 / 15.0;
  EXPECT_NEAR(ece(std::vector<double>{edge, 0.0}, {true, true}), 1.0 - edge / 2.0, 1e-15);
  EXPECT_NEAR(ece(std::vector<double>{std::nextafter(edge, 1.0), 0.0}, {true, true}),
              0.5 * (1.0 - std::nextafter(edge, 1.0)) + 0.5 * 1.0, 1e-15);
}

TEST(Ece, CalibratedStreamIsSmall) {
  Rng rng(81);
  const std::size_t n = 100000;
  std::vector<double> conf(n);
  std::vector<bool> hit(n);
  for (std::size_t i = 0; i < n; ++i) {
    conf[i] = rng.uniform();
    hit[i] = rng.uniform() < conf[i];
  }
  EXPECT_LT(ece(conf, hit), 0.02);
}

TEST(Synthetic, DeterministicPerSeed) {
  SynthConfig cfg;
  cfg.samples_per_class = 20;
  Rng a(5), b(5), c(6);
  const SyntheticData x = gen_synthetic(cfg, a), y = gen_synthetic(cfg, b), z = gen_synthetic(cfg, c);
  EXPECT_EQ(x.source.features, y.source.features);
  EXPECT_EQ(x.target.features, y.target.features);
  EXPECT_EQ(x.target.labels, y.target.labels);
  EXPECT_NE(x.target.features, z.target.features);
}

TEST(Synthetic, BalancedLabels) {
  SynthConfig cfg;
  cfg.samples_per_class = 30;
  cfg.holdout_per_class = 4;
  Rng rng(82);
  const SyntheticData d = gen_synthetic(cfg, rng);
  for (const Domain* dom : {&d.source, &d.target}) {
    std::vector<std::size_t> counts(cfg.classes, 0);
    for (auto l : dom->labels) ++counts[l];
    for (auto k : counts) EXPECT_EQ(k, 30u);
  }
  EXPECT_EQ(d.source_holdout.labels.size(), 4u * cfg.classes);
}

TEST(Synthetic, ClassMeansAreSeparated) {
  SynthConfig cfg;
  Rng rng(83);
  const SyntheticData d = gen_synthetic(cfg, rng);
  for (std::size_t a = 0; a < cfg.classes; ++a)
    for (std::size_t b = a + 1; b < cfg.classes; ++b) {
      double dist = 0.0;
      for (std::size_t j = 0; j < cfg.input_dim; ++j) dist += std::pow(d.class_means(a, j) - d.class_means(b, j), 2);
      EXPECT_NEAR(std::sqrt(dist), cfg.separation, 1e-12);
    }
}

TEST(Synthetic, RotationShiftIsOrthogonalWithConfiguredAngle) {
  SynthConfig cfg;
  Rng rng(84);
  const SyntheticData d = gen_synthetic(cfg, rng);
  const Matrix& a = d.shift_linear;
  EXPECT_LE(max_abs_diff(matmul_tn(a, a), Matrix::identity(cfg.input_dim)), 1e-12);
  // Every plane turns by the same angle, so trace = D·cos(angle) for even D.
  double trace = 0.0;
  for (std::size_t j = 0; j < cfg.input_dim; ++j) trace += a(j, j);
  EXPECT_NEAR(trace, static_cast<double>(cfg.input_dim) * std::cos(cfg.angle_deg * std::numbers::pi / 180.0), 1e-10);
  for (double t : d.shift_offset) EXPECT_EQ(t, 0.0);
}

TEST(Synthetic, TargetSamplesFollowShiftedMeans) {
  for (ShiftKind kind : {ShiftKind::rotation, ShiftKind::affine, ShiftKind::rotation_translation}) {
    SynthConfig cfg;
    cfg.shift = kind;
    cfg.samples_per_class = 2000;
    Rng rng(85);
    const SyntheticData d = gen_synthetic(cfg, rng);
    const Matrix expected_means = matmul_nt(d.class_means, d.shift_linear);
    std::vector<Vector> sums(cfg.classes, Vector(cfg.input_dim, 0.0));
    for (std::size_t i = 0; i < d.target.labels.size(); ++i)
      for (std::size_t j = 0; j < cfg.input_dim; ++j) sums[d.target.labels[i]][j] += d.target.features(i, j);
    for (std::size_t k = 0; k < cfg.classes; ++k)
      for (std::size_t j = 0; j < cfg.input_dim; ++j) {
        const double mean = sums[k][j] / 2000.0;
        // Four standard errors of a per-coordinate sample mean.
        EXPECT_NEAR(mean, expected_means(k, j) + d.shift_offset[j], 4.0 * cfg.noise / std::sqrt(2000.0));
      }
  }
}

TEST(Synthetic, InverseShiftRestoresSourceClusters) {
  SynthConfig cfg;
  cfg.shift = ShiftKind::rotation_translation;
  Rng rng(86);
  const SyntheticData d = gen_synthetic(cfg, rng);
  // A is orthogonal for rotation shifts, so A⁻¹ = Aᵀ.
  Matrix centered = d.target.features;
  for (std::size_t i = 0; i < centered.rows(); ++i)
    for (std::size_t j = 0; j < cfg.input_dim; ++j) centered(i, j) -= d.shift_offset[j];
  const Matrix restored = matmul(centered, d.shift_linear);
  const double radius = 3.0 * cfg.noise * std::sqrt(static_cast<double>(cfg.input_dim));
  std::size_t inside = 0;
  for (std::size_t i = 0; i < restored.rows(); ++i) {
    double dist = 0.0;
    for (std::size_t j = 0; j < cfg.input_dim; ++j)
      dist += std::pow(restored(i, j) - d.class_means(d.target.labels[i], j), 2);
    inside += std::sqrt(dist) <= radius ? 1 : 0;
  }
  EXPECT_EQ(inside, restored.rows());
}

TEST(Synthetic, ConfigErrors) {
  Rng rng(87);
  SynthConfig cfg;
  cfg.classes = 1;
  EXPECT_THROW(gen_synthetic(cfg, rng), ConfigError);
  cfg = SynthConfig{};
  cfg.input_dim = 3;
  EXPECT_THROW(gen_synthetic(cfg, rng), ConfigError);
  cfg = SynthConfig{};
  cfg.noise = 0.0;
  EXPECT_THROW(gen_synthetic(cfg, rng), ConfigError);
  EXPECT_THROW(parse_shift_kind("shear"), ConfigError);
  EXPECT_EQ(parse_shift_kind("rotation+translation"), ShiftKind::rotation_translation);
}
