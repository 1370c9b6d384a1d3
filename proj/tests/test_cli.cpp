#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "cli_support.hpp"
#include "json.hpp"
#include "subalign/dataio.hpp"
#include "subalign/model.hpp"

using namespace subalign;
using namespace subalign::testing;
namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

const fs::path fixtures = SUBALIGN_FIXTURE_DIR;

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

Json last_json_line(const std::string& out) {
  std::istringstream in(out);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return Json::parse(last);
}

/// Output name → sha256, without the run-specific paths.
Json digests(const Json& files) {
  Json out = Json::object();
  for (const auto& [k, v] : files.items()) out[k] = v["sha256"];
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static fs::path dir;

  static void SetUpTestSuite() {
    dir = scratch_dir("cli");
    write_text(dir / "synth.json", R"({"holdout_per_class": 100})");
    write_text(dir / "adapt.json", R"({"epsilon": 100})");
    ASSERT_EQ(run_cli("gen-synth --config " + quoted(dir / "synth.json") + " --out-dir " + quoted(dir / "data") +
                      " --seed 7")
                  .code,
              0);
    ASSERT_EQ(run_cli("train-source --features " + quoted(dir / "data/source.emb") + " --labels " +
                      quoted(dir / "data/source.lbl") + " --out-model " + quoted(dir / "src.ckp") +
                      " --out-subspace " + quoted(dir / "src.sub") + " --seed 7")
                  .code,
              0);
  }

  static std::string adapt_args(const std::string& method, const fs::path& out, const fs::path& config) {
    return "adapt --model " + quoted(dir / "src.ckp") + " --source-subspace " + quoted(dir / "src.sub") +
           " --target-features " + quoted(dir / "data/target.emb") + " --target-labels " +
           quoted(dir / "data/target.lbl") + " --method " + method + " --config " + quoted(config) + " --out " +
           quoted(out) + " --seed 3";
  }
};

fs::path Cli::dir;

}  // namespace

TEST_F(Cli, HelpAndUsage) {
  EXPECT_EQ(run_cli("--help").code, 0);
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("eval --model x").code, 2);
}

TEST_F(Cli, GenSynthWritesDataAndManifest) {
  const fs::path out = dir / "gen_default";
  ASSERT_EQ(run_cli("gen-synth --out-dir " + quoted(out)).code, 0);
  for (const char* f : {"source.emb", "source.lbl", "target.emb", "target.lbl", "manifest.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_FALSE(fs::exists(out / "source_holdout.emb"));
  const Json m = Json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(m["command"], "gen-synth");
  EXPECT_EQ(m["seed"], 7);
  EXPECT_TRUE(m.contains("version"));
  EXPECT_TRUE(m["timing"].contains("wall_time_s"));
  EXPECT_EQ(m["outputs"]["target_features"]["sha256"].get<std::string>().size(), 64u);
  EXPECT_EQ(read_embeddings(out / "target.emb").rows(), 2000u);
}

TEST_F(Cli, GenSynthIsDeterministic) {
  const fs::path a = dir / "gen_a", b = dir / "gen_b", c = dir / "gen_c";
  ASSERT_EQ(run_cli("gen-synth --out-dir " + quoted(a) + " --seed 11").code, 0);
  ASSERT_EQ(run_cli("gen-synth --out-dir " + quoted(b) + " --seed 11").code, 0);
  ASSERT_EQ(run_cli("gen-synth --out-dir " + quoted(c) + " --seed 12").code, 0);
  for (const char* f : {"source.emb", "source.lbl", "target.emb", "target.lbl", "shift.emb"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_NE(slurp(a / "target.emb"), slurp(c / "target.emb"));
  const Json ma = Json::parse(slurp(a / "manifest.json")), mb = Json::parse(slurp(b / "manifest.json"));
  EXPECT_EQ(digests(ma["outputs"]), digests(mb["outputs"]));
}

TEST_F(Cli, GenSynthRejectsBadConfig) {
  write_text(dir / "broken.json", "{\"classes\": 5,");
  const CliRun r = run_cli("gen-synth --config " + quoted(dir / "broken.json") + " --out-dir " +
                               quoted(dir / "gen_broken"),
                           true);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("error"), std::string::npos);
  write_text(dir / "unknown.json", R"({"clases": 5})");
  EXPECT_EQ(run_cli("gen-synth --config " + quoted(dir / "unknown.json") + " --out-dir " + quoted(dir / "gen_u")).code,
            2);
  write_text(dir / "invalid.json", R"({"classes": 1})");
  EXPECT_EQ(run_cli("gen-synth --config " + quoted(dir / "invalid.json") + " --out-dir " + quoted(dir / "gen_i")).code,
            2);
}

TEST_F(Cli, TrainSourceReportsAccuracy) {
  const Json m = Json::parse(slurp(dir / "src.ckp.manifest.json"));
  EXPECT_GE(m["train_accuracy"].get<double>(), 0.95);
  EXPECT_EQ(m["sub_dim"].get<std::size_t>(), read_subspace(dir / "src.sub").sub_dim());
  EXPECT_TRUE(m.contains("dim_selection"));

  const std::string base = "train-source --features " + quoted(dir / "data/source.emb") + " --labels " +
                           quoted(dir / "data/source.lbl") + " --seed 7 --out-subspace " +
                           quoted(dir / "again.sub") + " --out-model ";
  ASSERT_EQ(run_cli(base + quoted(dir / "again.ckp")).code, 0);
  EXPECT_EQ(slurp(dir / "again.ckp"), slurp(dir / "src.ckp"));
  EXPECT_EQ(slurp(dir / "again.sub"), slurp(dir / "src.sub"));
  EXPECT_EQ(run_cli(base + quoted(dir / "too_big.ckp") + " --sub-dim 99").code, 2);
  EXPECT_EQ(run_cli(base + quoted(dir / "bad.ckp") + " --sub-dim many").code, 2);
}

TEST_F(Cli, EstimateDim) {
  const std::string base = "estimate-dim --source-subspace " + quoted(dir / "src.sub") + " --target-features " +
                           quoted(dir / "data/target.emb") + " --model " + quoted(dir / "src.ckp");
  const CliRun r = run_cli(base + " --epsilon 100 --out " + quoted(dir / "dim.json"));
  ASSERT_EQ(r.code, 0);
  const Json j = Json::parse(r.out);
  EXPECT_GE(j["d"].get<int>(), 1);
  EXPECT_FALSE(j["curve"].empty());
  EXPECT_EQ(Json::parse(slurp(dir / "dim.json")), j);
  EXPECT_TRUE(fs::exists(dir / "dim.json.manifest.json"));
  EXPECT_EQ(run_cli(base + " --delta 1.5").code, 2);
  EXPECT_EQ(run_cli(base + " --epsilon 0").code, 2);

  // Flat source spectrum: every gap is zero.
  SubspaceBasis flat;
  flat.basis = Matrix{{1, 0}, {0, 1}, {0, 0}};
  flat.eigenvalues = {1.0, 1.0};
  flat.mean = {0.0, 0.0, 0.0};
  flat.sample_count = 10;
  write_subspace(dir / "flat.sub", flat);
  Rng rng(5);
  write_embeddings(dir / "wide.emb", rng.normal_matrix(50, 3, 10.0));
  EXPECT_EQ(run_cli("estimate-dim --source-subspace " + quoted(dir / "flat.sub") + " --target-features " +
                    quoted(dir / "wide.emb"))
                .code,
            4);
}

TEST_F(Cli, AdaptImprovesAndIsDeterministic) {
  const fs::path a = dir / "adapt_a", b = dir / "adapt_b";
  const CliRun r = run_cli(adapt_args("cattan", a, dir / "adapt.json"));
  ASSERT_EQ(r.code, 0);
  ASSERT_EQ(run_cli(adapt_args("cattan", b, dir / "adapt.json")).code, 0);
  const Json report = Json::parse(slurp(a / "report.json"));
  EXPECT_GT(report["final"]["accuracy"].get<double>(), report["source_only"]["accuracy"].get<double>());
  EXPECT_EQ(report["epochs"].size(), 5u);
  for (const char* f : {"model.ckp", "phi.emb", "source_subspace.sub", "target_subspace.sub", "report.json"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  const Json ma = Json::parse(slurp(a / "manifest.json")), mb = Json::parse(slurp(b / "manifest.json"));
  EXPECT_EQ(digests(ma["outputs"]), digests(mb["outputs"]));
  EXPECT_EQ(ma["inputs"], mb["inputs"]);

  // eval on the written artifacts reproduces the report.
  const CliRun ev = run_cli("eval --model " + quoted(a / "model.ckp") + " --features " +
                            quoted(dir / "data/target.emb") + " --labels " + quoted(dir / "data/target.lbl") +
                            " --alignment " + quoted(a / "phi.emb") + " --source-subspace " +
                            quoted(a / "source_subspace.sub") + " --target-subspace " +
                            quoted(a / "target_subspace.sub"));
  ASSERT_EQ(ev.code, 0);
  EXPECT_NEAR(Json::parse(ev.out)["accuracy"].get<double>(), report["final"]["accuracy"].get<double>(), 1e-12);
}

TEST_F(Cli, AdaptBaselinesAndErrors) {
  EXPECT_EQ(run_cli(adapt_args("tent-plus", dir / "adapt_tp", dir / "adapt.json")).code, 0);
  EXPECT_FALSE(fs::exists(dir / "adapt_tp/phi.emb"));
  EXPECT_EQ(run_cli(adapt_args("shot", dir / "adapt_bad", dir / "adapt.json")).code, 2);

  write_text(dir / "lr0.json", R"({"epsilon": 100, "lr": 0})");
  ASSERT_EQ(run_cli(adapt_args("cattan", dir / "adapt_lr0", dir / "lr0.json")).code, 0);
  EXPECT_EQ(load_checkpoint(dir / "adapt_lr0/model.ckp"), load_checkpoint(dir / "src.ckp"));

  write_text(dir / "neg.json", R"({"lr": -1})");
  EXPECT_EQ(run_cli(adapt_args("cattan", dir / "adapt_neg", dir / "neg.json")).code, 2);
}

TEST_F(Cli, DetectGatesAndSummarizes) {
  const fs::path ens = dir / "ens";
  ASSERT_EQ(run_cli("build-ensemble --model " + quoted(dir / "src.ckp") + " --source-subspace " +
                    quoted(dir / "src.sub") + " --target-features " + quoted(dir / "data/target.emb") +
                    " --config " + quoted(dir / "adapt.json") + " --out-dir " + quoted(ens) + " --seed 5")
                .code,
            0);
  const std::string base = "detect --ensemble-dir " + quoted(ens) + " --features " + quoted(dir / "data/target.emb") +
                           " --labels " + quoted(dir / "data/target.lbl");
  const CliRun gated = run_cli(base + " --out " + quoted(dir / "detect.jsonl"));
  ASSERT_EQ(gated.code, 0);
  const Json summary = last_json_line(gated.out)["summary"];
  EXPECT_EQ(summary["samples"], 2000);
  EXPECT_EQ(summary["tau"], 0.75);
  EXPECT_TRUE(fs::exists(dir / "detect.jsonl.manifest.json"));
  std::istringstream lines(gated.out);
  std::string first;
  std::getline(lines, first);
  const Json row = Json::parse(first);
  EXPECT_TRUE(row.contains("q_bar") && row.contains("gated") && row.contains("prediction"));

  // τ = 0 matches eval on hypothesis 1's aligned path.
  const CliRun open = run_cli(base + " --tau 0");
  ASSERT_EQ(open.code, 0);
  const Json desc = Json::parse(slurp(ens / "ensemble.json"))["hypotheses"][0];
  const CliRun ev = run_cli("eval --model " + quoted(ens / desc["model"].get<std::string>()) + " --features " +
                            quoted(dir / "data/target.emb") + " --labels " + quoted(dir / "data/target.lbl") +
                            " --alignment " + quoted(ens / desc["phi"].get<std::string>()) + " --source-subspace " +
                            quoted(ens / desc["source_subspace"].get<std::string>()) + " --target-subspace " +
                            quoted(ens / desc["target_subspace"].get<std::string>()));
  ASSERT_EQ(ev.code, 0);
  EXPECT_EQ(last_json_line(open.out)["summary"]["accuracy"], Json::parse(ev.out)["accuracy"]);
  EXPECT_EQ(last_json_line(open.out)["summary"]["gated"], 0);

  EXPECT_EQ(run_cli("detect --ensemble-dir " + quoted(dir / "no_such_ensemble") + " --features " +
                    quoted(dir / "data/target.emb"))
                .code,
            2);
}

TEST_F(Cli, FormatErrorsExitWithDataCode) {
  const std::string model = quoted(dir / "src.ckp");
  auto eval_with = [&](const fs::path& features, const fs::path& labels, const std::string& m) {
    return run_cli("eval --model " + m + " --features " + quoted(features) + " --labels " + quoted(labels)).code;
  };
  const fs::path good_labels = dir / "data/source.lbl";
  EXPECT_EQ(eval_with(fixtures / "bad_magic.emb", good_labels, model), 3);
  EXPECT_EQ(eval_with(fixtures / "truncated.emb", good_labels, model), 3);
  EXPECT_EQ(eval_with(dir / "data/source.emb", fixtures / "bad_magic.lbl", model), 3);
  EXPECT_EQ(eval_with(dir / "data/source.emb", fixtures / "truncated.lbl", model), 3);
  EXPECT_EQ(eval_with(dir / "data/source.emb", good_labels, quoted(fixtures / "bad_magic.ckp")), 3);
  EXPECT_EQ(eval_with(dir / "data/source.emb", good_labels, quoted(fixtures / "version2.ckp")), 3);
  EXPECT_EQ(eval_with(dir / "data/source.emb", good_labels, quoted(fixtures / "truncated.ckp")), 3);
  EXPECT_EQ(run_cli("estimate-dim --source-subspace " + quoted(fixtures / "bad_magic.sub") + " --target-features " +
                    quoted(dir / "data/target.emb"))
                .code,
            3);
  EXPECT_EQ(run_cli("estimate-dim --source-subspace " + quoted(fixtures / "truncated.sub") + " --target-features " +
                    quoted(dir / "data/target.emb"))
                .code,
            3);
  // Label count mismatch and missing files.
  EXPECT_EQ(eval_with(dir / "data/source.emb", fixtures / "labels_5.lbl", model), 2);
  EXPECT_EQ(eval_with(dir / "data/missing.emb", good_labels, model), 2);
}
