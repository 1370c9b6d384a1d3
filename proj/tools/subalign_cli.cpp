// subalign: command-line front end.
//
//   subalign gen-synth      --out-dir DIR [--config JSON] [--seed N]
//   subalign train-source   --features F --labels L --out-model M --out-subspace S [--sub-dim N|auto] [--seed N]
//   subalign estimate-dim   --source-subspace S --target-features F [--model M] [--delta --epsilon] [--out JSON]
//   subalign adapt          --model M --source-subspace S --target-features F --method NAME --out DIR [--config JSON]
//   subalign build-ensemble --model M --source-subspace S --target-features F --out-dir DIR [--config JSON] [--tau]
//   subalign eval           --model M --features F --labels L [--alignment PHI --source-subspace S --target-subspace T]
//   subalign detect         --ensemble-dir DIR --features F [--labels L] [--tau T] [--out JSONL]
//
// Exit codes: 0 ok, 2 usage/config, 3 data/format, 4 numerical.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "digest.hpp"
#include "subalign/adapt.hpp"
#include "subalign/dataio.hpp"
#include "subalign/detector.hpp"
#include "subalign/json_io.hpp"
#include "subalign/model.hpp"
#include "subalign/subspace.hpp"

namespace fs = std::filesystem;
using namespace subalign;

namespace {

/// Collects what a command read and wrote, then writes the run manifest.
class Manifest {
 public:
  explicit Manifest(std::string command) : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {}

  void input(const std::string& role, const fs::path& path) {
    inputs_[role] = {{"path", path.string()}, {"sha256", cli::file_sha256(path)}};
  }
  void output(const std::string& role, const fs::path& path) {
    outputs_[role] = {{"path", path.string()}, {"sha256", cli::file_sha256(path)}};
  }
  Json& config() { return config_; }
  Json& extra() { return extra_; }
  void seed(std::uint64_t s) { seed_ = s; }

  void write(const fs::path& path) const {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    Json j = {{"command", command_},
              {"config", config_},
              {"inputs", inputs_},
              {"outputs", outputs_},
              {"seed", seed_ ? Json(*seed_) : Json(nullptr)},
              {"timing", {{"wall_time_s", secs}}},
              {"version", library_version}};
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    write_text(path, j.dump(2) + "\n");
  }

  static void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
  }

 private:
  std::string command_;
  std::chrono::steady_clock::time_point start_;
  Json inputs_ = Json::object();
  Json outputs_ = Json::object();
  Json config_ = Json::object();
  Json extra_ = Json::object();
  std::optional<std::uint64_t> seed_;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) throw ConfigError(std::string(what) + " not found: " + path.string());
}

fs::path manifest_beside(const fs::path& output) { return fs::path(output.string() + ".manifest.json"); }

// ---------------------------------------------------------------------------

struct GenSynthArgs {
  std::string config, out_dir;
  std::optional<std::uint64_t> seed;
};

int cmd_gen_synth(const GenSynthArgs& a) {
  Manifest man("gen-synth");
  SynthConfig cfg;
  if (!a.config.empty()) {
    require_file(a.config, "config");
    cfg = synth_config_from_json(read_json_file(a.config));
    man.input("config", a.config);
  }
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  Rng rng(cfg.seed);
  const SyntheticData data = gen_synthetic(cfg, rng);

  const fs::path dir(a.out_dir);
  ensure_dir(dir);
  auto emit_domain = [&](const std::string& name, const Domain& d) {
    write_embeddings(dir / (name + ".emb"), d.features);
    write_labels(dir / (name + ".lbl"), d.labels);
    man.output(name + "_features", dir / (name + ".emb"));
    man.output(name + "_labels", dir / (name + ".lbl"));
  };
  emit_domain("source", data.source);
  emit_domain("target", data.target);
  if (cfg.holdout_per_class > 0) emit_domain("source_holdout", data.source_holdout);

  // Ground-truth shift x_t = A·x + t stored as [A | t].
  Matrix shift(cfg.input_dim, cfg.input_dim + 1);
  for (std::size_t i = 0; i < cfg.input_dim; ++i) {
    for (std::size_t j = 0; j < cfg.input_dim; ++j) shift(i, j) = data.shift_linear(i, j);
    shift(i, cfg.input_dim) = data.shift_offset[i];
  }
  write_embeddings(dir / "shift.emb", shift);
  man.output("shift", dir / "shift.emb");

  man.config() = to_json(cfg);
  man.seed(cfg.seed);
  man.write(dir / "manifest.json");
  std::cout << Json{{"out_dir", dir.string()}, {"source_samples", data.source.labels.size()},
                    {"target_samples", data.target.labels.size()}}
                   .dump()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string features, labels, out_model, out_subspace, sub_dim = "auto";
  std::uint64_t seed = 0;
  TrainConfig train;
  double delta = 0.1, epsilon = 1e6;
};

int cmd_train_source(const TrainArgs& a) {
  Manifest man("train-source");
  require_file(a.features, "features");
  require_file(a.labels, "labels");
  const Matrix x = read_embeddings(a.features);
  const Labels y = read_labels(a.labels);
  man.input("features", a.features);
  man.input("labels", a.labels);

  std::optional<std::size_t> fixed_dim;
  if (a.sub_dim != "auto") {
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(a.sub_dim, &pos);
      if (pos != a.sub_dim.size() || v == 0) throw std::invalid_argument("bad");
      fixed_dim = static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
      throw ConfigError("--sub-dim must be a positive integer or \"auto\"");
    }
    if (*fixed_dim > a.train.latent_dim) {
      throw ConfigError("--sub-dim " + a.sub_dim + " exceeds the feature dimension " +
                        std::to_string(a.train.latent_dim));
    }
  }
  const DimSelectConfig sel{a.delta, a.epsilon, a.train.latent_dim};
  sel.validate();

  Rng rng(a.seed);
  const SourceModel model = train_source(x, y, a.train, rng);
  const Matrix z_s = full_pass_latent(model, x);
  std::optional<DimSelection> selection;
  std::size_t d = 0;
  if (fixed_dim) {
    d = *fixed_dim;
  } else {
    // No target yet: the source spectrum stands in for both sequences.
    const Vector eig = covariance_spectrum(z_s);
    selection = select_dim(eig, eig, z_s.rows(), sel);
    d = selection->dim;
  }
  const SubspaceBasis w_s = fit_pca(z_s, d);
  const double train_acc = evaluate(model, nullptr, x, y, StatsSource::stored).accuracy;

  for (const auto& p : {fs::path(a.out_model).parent_path(), fs::path(a.out_subspace).parent_path()})
    if (!p.empty()) ensure_dir(p);
  save_checkpoint(model, a.out_model);
  write_subspace(a.out_subspace, w_s);
  man.output("model", a.out_model);
  man.output("subspace", a.out_subspace);

  man.config() = to_json(a.train);
  man.config()["sub_dim"] = a.sub_dim;
  man.config()["delta"] = a.delta;
  man.config()["epsilon"] = a.epsilon;
  man.seed(a.seed);
  man.extra()["train_accuracy"] = train_acc;
  man.extra()["sub_dim"] = d;
  if (selection) man.extra()["dim_selection"] = to_json(*selection);
  man.write(manifest_beside(a.out_model));
  std::cout << Json{{"train_accuracy", train_acc}, {"sub_dim", d}}.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EstimateArgs {
  std::string source_subspace, target_features, model, out;
  double delta = 0.1, epsilon = 1e6;
};

int cmd_estimate_dim(const EstimateArgs& a) {
  const DimSelectConfig probe{a.delta, a.epsilon};
  probe.validate();
  Manifest man("estimate-dim");
  require_file(a.source_subspace, "source subspace");
  require_file(a.target_features, "target features");
  const SubspaceBasis w_s = read_subspace(a.source_subspace);
  Matrix z_t = read_embeddings(a.target_features);
  man.input("source_subspace", a.source_subspace);
  man.input("target_features", a.target_features);
  if (!a.model.empty()) {
    require_file(a.model, "model");
    z_t = full_pass_latent(load_checkpoint(a.model), z_t);
    man.input("model", a.model);
  }
  if (z_t.cols() != w_s.ambient_dim()) {
    throw DimensionError("target features have " + std::to_string(z_t.cols()) + " columns, subspace expects " +
                         std::to_string(w_s.ambient_dim()));
  }
  const DimSelectConfig sel{a.delta, a.epsilon, w_s.sub_dim()};
  const DimSelection s = select_dim(w_s.eigenvalues, covariance_spectrum(z_t), z_t.rows(), sel);
  const Json result = to_json(s);
  std::cout << result.dump() << "\n";
  if (!a.out.empty()) {
    Manifest::write_text(a.out, result.dump(2) + "\n");
    man.output("result", a.out);
    man.config() = {{"delta", a.delta}, {"epsilon", a.epsilon}};
    man.write(manifest_beside(a.out));
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct AdaptArgs {
  std::string model, source_subspace, target_features, target_labels, method, config, out;
  std::optional<std::uint64_t> seed;
};

AdaptConfig load_adapt_config(const std::string& path, Manifest& man) {
  if (path.empty()) return {};
  require_file(path, "config");
  man.input("config", path);
  return adapt_config_from_json(read_json_file(path));
}

int cmd_adapt(const AdaptArgs& a) {
  Manifest man("adapt");
  AdaptConfig cfg = load_adapt_config(a.config, man);
  if (!a.method.empty()) cfg.method = parse_method(a.method);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();

  require_file(a.model, "model");
  require_file(a.target_features, "target features");
  const SourceModel model = load_checkpoint(a.model);
  const Matrix target = read_embeddings(a.target_features);
  man.input("model", a.model);
  man.input("target_features", a.target_features);
  std::optional<Labels> labels;
  if (!a.target_labels.empty()) {
    require_file(a.target_labels, "target labels");
    labels = read_labels(a.target_labels);
    man.input("target_labels", a.target_labels);
  }

  Rng rng(cfg.seed);
  AdaptResult res;
  if (cfg.method == Method::cattan) {
    if (a.source_subspace.empty()) throw ConfigError("adapt: cattan requires --source-subspace");
    require_file(a.source_subspace, "source subspace");
    const SubspaceBasis w_s = read_subspace(a.source_subspace);
    man.input("source_subspace", a.source_subspace);
    res = run_adaptation(model, w_s, target, cfg, rng);
  } else {
    res = run_baseline(model, target, cfg, rng);
  }

  const fs::path dir(a.out);
  ensure_dir(dir);
  save_checkpoint(res.model, dir / "model.ckp");
  man.output("model", dir / "model.ckp");
  Json report = {{"method", to_string(cfg.method)}, {"config", to_json(cfg)}, {"steps", res.steps}};
  if (res.head) {
    write_embeddings(dir / "phi.emb", res.head->phi.phi);
    write_subspace(dir / "source_subspace.sub", res.head->w_s);
    write_subspace(dir / "target_subspace.sub", res.head->w_t);
    man.output("phi", dir / "phi.emb");
    man.output("source_subspace", dir / "source_subspace.sub");
    man.output("target_subspace", dir / "target_subspace.sub");
    report["sub_dim"] = res.head->phi.dim();
  }
  Json epochs = Json::array();
  for (std::size_t e = 0; e < res.trace.size(); ++e) {
    Json row = to_json(res.trace[e]);
    row["epoch"] = e + 1;
    epochs.push_back(row);
  }
  report["epochs"] = epochs;
  if (labels) {
    // Source-only means the unadapted model as shipped, stored statistics included.
    const auto before = evaluate(model, nullptr, target, *labels, StatsSource::stored);
    const auto after = evaluate(res.model, res.head ? &*res.head : nullptr, target, *labels);
    report["source_only"] = to_json(before);
    report["final"] = to_json(after);
  }
  Manifest::write_text(dir / "report.json", report.dump(2) + "\n");
  man.output("report", dir / "report.json");

  man.config() = to_json(cfg);
  man.seed(cfg.seed);
  man.write(dir / "manifest.json");
  Json summary = {{"method", to_string(cfg.method)}, {"out", dir.string()}};
  if (labels) summary["accuracy"] = report["final"]["accuracy"];
  std::cout << summary.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Ensemble directory: ensemble.json plus h<k>.ckp, h<k>_phi.emb,
// h<k>_source.sub, h<k>_target.sub per hypothesis.

struct EnsembleArgs {
  std::string model, source_subspace, target_features, config, out_dir;
  double tau = 0.75;
  std::optional<std::uint64_t> seed;
};

int cmd_build_ensemble(const EnsembleArgs& a) {
  Manifest man("build-ensemble");
  AdaptConfig cfg = load_adapt_config(a.config, man);
  cfg.method = Method::cattan;
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  require_file(a.model, "model");
  require_file(a.source_subspace, "source subspace");
  require_file(a.target_features, "target features");
  const SourceModel model = load_checkpoint(a.model);
  const SubspaceBasis w_s = read_subspace(a.source_subspace);
  const Matrix target = read_embeddings(a.target_features);
  man.input("model", a.model);
  man.input("source_subspace", a.source_subspace);
  man.input("target_features", a.target_features);

  Rng rng(cfg.seed);
  const HypothesisEnsemble ens = build_hypotheses(model, w_s, target, cfg, rng, default_hypothesis_plan(), a.tau);

  const fs::path dir(a.out_dir);
  ensure_dir(dir);
  Json hyps = Json::array();
  for (std::size_t k = 0; k < ens.size(); ++k) {
    const auto& h = ens.hypotheses[k];
    const std::string stem = "h" + std::to_string(k);
    save_checkpoint(h.model, dir / (stem + ".ckp"));
    write_embeddings(dir / (stem + "_phi.emb"), h.head.phi.phi);
    write_subspace(dir / (stem + "_source.sub"), h.head.w_s);
    write_subspace(dir / (stem + "_target.sub"), h.head.w_t);
    for (const char* suffix : {".ckp", "_phi.emb", "_source.sub", "_target.sub"})
      man.output(stem + suffix, dir / (stem + suffix));
    hyps.push_back({{"model", stem + ".ckp"},
                    {"phi", stem + "_phi.emb"},
                    {"source_subspace", stem + "_source.sub"},
                    {"target_subspace", stem + "_target.sub"},
                    {"subset", to_string(h.rule)}});
  }
  const Json desc = {{"tau", ens.tau}, {"identity_path", "bypass"}, {"hypotheses", hyps}};
  Manifest::write_text(dir / "ensemble.json", desc.dump(2) + "\n");
  man.output("ensemble", dir / "ensemble.json");
  man.config() = to_json(cfg);
  man.config()["tau"] = a.tau;
  man.seed(cfg.seed);
  man.write(dir / "manifest.json");
  std::cout << Json{{"hypotheses", ens.size()}, {"out_dir", dir.string()}}.dump() << "\n";
  return 0;
}

HypothesisEnsemble load_ensemble(const fs::path& dir, Manifest& man) {
  const fs::path desc_path = dir / "ensemble.json";
  require_file(desc_path, "ensemble description");
  const Json desc = read_json_file(desc_path);
  man.input("ensemble", desc_path);
  HypothesisEnsemble ens;
  try {
    ens.tau = desc.at("tau").get<double>();
    const std::string path_kind = desc.value("identity_path", "bypass");
    if (path_kind == "bypass") {
      ens.identity_path = IdentityPath::bypass;
    } else if (path_kind == "subspace") {
      ens.identity_path = IdentityPath::subspace;
    } else {
      throw ConfigError("ensemble: unknown identity_path \"" + path_kind + "\"");
    }
    std::size_t k = 0;
    for (const Json& h : desc.at("hypotheses")) {
      const std::string stem = "h" + std::to_string(k++);
      auto file = [&](const char* key) {
        const fs::path p = dir / h.at(key).get<std::string>();
        require_file(p, "ensemble member");
        man.input(stem + "_" + key, p);
        return p;
      };
      Hypothesis hyp;
      hyp.model = load_checkpoint(file("model"));
      hyp.head.phi.phi = read_embeddings(file("phi"));
      hyp.head.w_s = read_subspace(file("source_subspace"));
      hyp.head.w_t = read_subspace(file("target_subspace"));
      hyp.rule = parse_subset_rule(h.value("subset", "all"));
      require_compatible(hyp.head.phi, hyp.head.w_t, hyp.head.w_s);
      ens.hypotheses.push_back(std::move(hyp));
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("ensemble.json: ") + e.what());
  }
  ens.validate();
  return ens;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string model, features, labels, alignment, source_subspace, target_subspace, stats = "evaluated", out;
};

StatsSource parse_stats(const std::string& s) {
  if (s == "evaluated") return StatsSource::evaluated_set;
  if (s == "stored") return StatsSource::stored;
  throw ConfigError("--stats must be \"evaluated\" or \"stored\"");
}

int cmd_eval(const EvalArgs& a) {
  Manifest man("eval");
  const StatsSource stats = parse_stats(a.stats);
  require_file(a.model, "model");
  require_file(a.features, "features");
  require_file(a.labels, "labels");
  const SourceModel model = load_checkpoint(a.model);
  const Matrix x = read_embeddings(a.features);
  const Labels y = read_labels(a.labels);
  man.input("model", a.model);
  man.input("features", a.features);
  man.input("labels", a.labels);
  std::optional<AlignedHead> head;
  if (!a.alignment.empty()) {
    if (a.source_subspace.empty() || a.target_subspace.empty()) {
      throw ConfigError("eval: --alignment requires --source-subspace and --target-subspace");
    }
    for (const auto& [role, p] : {std::pair{"alignment", a.alignment}, std::pair{"source_subspace", a.source_subspace},
                                  std::pair{"target_subspace", a.target_subspace}}) {
      require_file(p, role);
      man.input(role, p);
    }
    head = AlignedHead{read_subspace(a.target_subspace), AlignmentTransform{read_embeddings(a.alignment)},
                       read_subspace(a.source_subspace)};
    require_compatible(head->phi, head->w_t, head->w_s);
  }
  const EvalResult r = evaluate(model, head ? &*head : nullptr, x, y, stats);
  const Json result = to_json(r);
  std::cout << result.dump() << "\n";
  if (!a.out.empty()) {
    Manifest::write_text(a.out, result.dump(2) + "\n");
    man.output("result", a.out);
    man.config() = {{"stats", a.stats}, {"aligned", head.has_value()}};
    man.write(manifest_beside(a.out));
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct DetectArgs {
  std::string ensemble_dir, features, labels, out;
  std::optional<double> tau;
};

int cmd_detect(const DetectArgs& a) {
  Manifest man("detect");
  HypothesisEnsemble ens = load_ensemble(a.ensemble_dir, man);
  if (a.tau) ens.tau = *a.tau;
  ens.validate();
  require_file(a.features, "features");
  const Matrix x = read_embeddings(a.features);
  man.input("features", a.features);
  std::optional<Labels> labels;
  if (!a.labels.empty()) {
    require_file(a.labels, "labels");
    labels = read_labels(a.labels);
    man.input("labels", a.labels);
    if (labels->size() != x.rows()) throw DimensionError("detect: label count differs from sample count");
  }
  const std::vector<GateDecision> decisions = gated_decisions(ens, x);

  std::ostringstream lines;
  std::size_t gated_count = 0;
  for (const auto& d : decisions) {
    gated_count += d.used_alignment ? 0 : 1;
    lines << Json{{"q_bar", d.q_bar}, {"gated", !d.used_alignment}, {"prediction", d.prediction}}.dump() << "\n";
  }
  Json summary = {{"samples", decisions.size()},
                  {"tau", ens.tau},
                  {"mean_q_bar", mean_q_bar(decisions)},
                  {"gated", gated_count}};
  if (labels) summary["accuracy"] = gated_accuracy(decisions, *labels);
  lines << Json{{"summary", summary}}.dump() << "\n";

  std::cout << lines.str();
  if (!a.out.empty()) {
    Manifest::write_text(a.out, lines.str());
    man.output("decisions", a.out);
    man.config() = {{"tau", ens.tau}};
    man.write(manifest_beside(a.out));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time adaptation by deep subspace alignment"};
  app.require_subcommand(1);

  GenSynthArgs gen;
  auto* c_gen = app.add_subcommand("gen-synth", "Generate a synthetic source/target pair");
  c_gen->add_option("--config", gen.config, "Synthetic config JSON");
  c_gen->add_option("--out-dir", gen.out_dir, "Output directory")->required();
  c_gen->add_option("--seed", gen.seed, "Override the config seed");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train-source", "Train the source model and fit the source subspace");
  c_train->add_option("--features", train.features)->required();
  c_train->add_option("--labels", train.labels)->required();
  c_train->add_option("--out-model", train.out_model)->required();
  c_train->add_option("--out-subspace", train.out_subspace)->required();
  c_train->add_option("--sub-dim", train.sub_dim, "Subspace dimension or \"auto\"");
  c_train->add_option("--seed", train.seed);
  c_train->add_option("--latent-dim", train.train.latent_dim);
  c_train->add_option("--epochs", train.train.epochs);
  c_train->add_option("--batch-size", train.train.batch_size);
  c_train->add_option("--lr", train.train.lr);
  c_train->add_option("--delta", train.delta);
  c_train->add_option("--epsilon", train.epsilon);

  EstimateArgs est;
  auto* c_est = app.add_subcommand("estimate-dim", "Select the subspace dimension for a target set");
  c_est->add_option("--source-subspace", est.source_subspace)->required();
  c_est->add_option("--target-features", est.target_features, "Latent features, or inputs when --model is given")
      ->required();
  c_est->add_option("--model", est.model, "Map target inputs through this model first");
  c_est->add_option("--delta", est.delta);
  c_est->add_option("--epsilon", est.epsilon);
  c_est->add_option("--out", est.out, "Write the result JSON here");

  AdaptArgs adapt;
  auto* c_adapt = app.add_subcommand("adapt", "Adapt a source model to unlabeled target features");
  c_adapt->add_option("--model", adapt.model)->required();
  c_adapt->add_option("--source-subspace", adapt.source_subspace);
  c_adapt->add_option("--target-features", adapt.target_features)->required();
  c_adapt->add_option("--target-labels", adapt.target_labels, "Only used for the report");
  c_adapt->add_option("--method", adapt.method, "cattan, tent, tent-plus or lr-cb");
  c_adapt->add_option("--config", adapt.config, "Adaptation config JSON");
  c_adapt->add_option("--out", adapt.out, "Output directory")->required();
  c_adapt->add_option("--seed", adapt.seed, "Override the config seed");

  EnsembleArgs ensemble;
  auto* c_ens = app.add_subcommand("build-ensemble", "Adapt K hypotheses for the shift gate");
  c_ens->add_option("--model", ensemble.model)->required();
  c_ens->add_option("--source-subspace", ensemble.source_subspace)->required();
  c_ens->add_option("--target-features", ensemble.target_features)->required();
  c_ens->add_option("--config", ensemble.config);
  c_ens->add_option("--out-dir", ensemble.out_dir)->required();
  c_ens->add_option("--tau", ensemble.tau);
  c_ens->add_option("--seed", ensemble.seed);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Accuracy and calibration of a model");
  c_eval->add_option("--model", ev.model)->required();
  c_eval->add_option("--features", ev.features)->required();
  c_eval->add_option("--labels", ev.labels)->required();
  c_eval->add_option("--alignment", ev.alignment, "Alignment matrix (EMB1, d×d)");
  c_eval->add_option("--source-subspace", ev.source_subspace);
  c_eval->add_option("--target-subspace", ev.target_subspace);
  c_eval->add_option("--stats", ev.stats, "Normalization statistics: evaluated or stored");
  c_eval->add_option("--out", ev.out);

  DetectArgs det;
  auto* c_det = app.add_subcommand("detect", "Gated prediction with a hypothesis ensemble");
  c_det->add_option("--ensemble-dir", det.ensemble_dir)->required();
  c_det->add_option("--features", det.features)->required();
  c_det->add_option("--labels", det.labels);
  c_det->add_option("--tau", det.tau);
  c_det->add_option("--out", det.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::usage);
  }

  try {
    if (*c_gen) return cmd_gen_synth(gen);
    if (*c_train) return cmd_train_source(train);
    if (*c_est) return cmd_estimate_dim(est);
    if (*c_adapt) return cmd_adapt(adapt);
    if (*c_ens) return cmd_build_ensemble(ensemble);
    if (*c_eval) return cmd_eval(ev);
    if (*c_det) return cmd_detect(det);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::numerical);
  }
  return static_cast<int>(ExitCode::usage);
}
