#pragma once

// JSON (de)serialization for configs and reports. Config parsing is strict:
// unknown keys and wrong types raise ConfigError.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"
#include "subalign/adapt.hpp"
#include "subalign/dataio.hpp"
#include "subalign/errors.hpp"
#include "subalign/model.hpp"
#include "subalign/subspace.hpp"

namespace subalign {

using Json = nlohmann::json;

inline constexpr const char* library_version = "0.1.0";

namespace detail {

inline void reject_unknown_keys(const Json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError(std::string(what) + ": unknown key \"" + key + "\"");
  }
}

template <class T>
void read_field(const Json& j, const char* key, T& out, const char* what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string(what) + ": bad value for \"" + key + "\": " + e.what());
  }
}

}  // namespace detail

inline Json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_json_text(text, path.string());
}

// ---------------------------------------------------------------------------
// SynthConfig

inline SynthConfig synth_config_from_json(const Json& j) {
  detail::reject_unknown_keys(j,
                              {"classes", "input_dim", "samples_per_class", "holdout_per_class", "separation", "noise",
                               "shift", "angle_deg", "translation", "scale_jitter", "seed"},
                              "synthetic config");
  SynthConfig c;
  const char* what = "synthetic config";
  detail::read_field(j, "classes", c.classes, what);
  detail::read_field(j, "input_dim", c.input_dim, what);
  detail::read_field(j, "samples_per_class", c.samples_per_class, what);
  detail::read_field(j, "holdout_per_class", c.holdout_per_class, what);
  detail::read_field(j, "separation", c.separation, what);
  detail::read_field(j, "noise", c.noise, what);
  detail::read_field(j, "angle_deg", c.angle_deg, what);
  detail::read_field(j, "translation", c.translation, what);
  detail::read_field(j, "scale_jitter", c.scale_jitter, what);
  detail::read_field(j, "seed", c.seed, what);
  std::string shift = to_string(c.shift);
  detail::read_field(j, "shift", shift, what);
  c.shift = parse_shift_kind(shift);
  c.validate();
  return c;
}

inline Json to_json(const SynthConfig& c) {
  return {{"classes", c.classes},       {"input_dim", c.input_dim},     {"samples_per_class", c.samples_per_class},
          {"holdout_per_class", c.holdout_per_class}, {"separation", c.separation}, {"noise", c.noise},
          {"shift", to_string(c.shift)}, {"angle_deg", c.angle_deg},    {"translation", c.translation},
          {"scale_jitter", c.scale_jitter}, {"seed", c.seed}};
}

// ---------------------------------------------------------------------------
// AdaptConfig

inline AdaptConfig adapt_config_from_json(const Json& j, AdaptConfig c = {}) {
  detail::reject_unknown_keys(j,
                              {"method", "lambda_lr", "lambda_cb", "lr", "batch_size", "epochs", "sub_dim", "delta",
                               "epsilon", "seed"},
                              "adapt config");
  const char* what = "adapt config";
  if (j.contains("method")) {
    std::string m;
    detail::read_field(j, "method", m, what);
    c.method = parse_method(m);
  }
  detail::read_field(j, "lambda_lr", c.lambda_lr, what);
  detail::read_field(j, "lambda_cb", c.lambda_cb, what);
  detail::read_field(j, "lr", c.lr, what);
  detail::read_field(j, "batch_size", c.batch_size, what);
  detail::read_field(j, "epochs", c.epochs, what);
  detail::read_field(j, "delta", c.delta, what);
  detail::read_field(j, "epsilon", c.epsilon, what);
  detail::read_field(j, "seed", c.seed, what);
  if (j.contains("sub_dim")) {
    const Json& v = j.at("sub_dim");
    if (v.is_string() && v.get<std::string>() == "auto") {
      c.sub_dim.reset();
    } else if (v.is_number_unsigned()) {
      c.sub_dim = v.get<std::size_t>();
    } else {
      throw ConfigError("adapt config: sub_dim must be a positive integer or \"auto\"");
    }
  }
  c.validate();
  return c;
}

inline Json to_json(const AdaptConfig& c) {
  return {{"method", to_string(c.method)},
          {"lambda_lr", c.lambda_lr},
          {"lambda_cb", c.lambda_cb},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"sub_dim", c.sub_dim ? Json(*c.sub_dim) : Json("auto")},
          {"delta", c.delta},
          {"epsilon", c.epsilon},
          {"seed", c.seed}};
}

inline Json to_json(const TrainConfig& c) {
  return {{"latent_dim", c.latent_dim}, {"classes", c.classes}, {"epochs", c.epochs},
          {"batch_size", c.batch_size}, {"lr", c.lr},           {"momentum", c.momentum}};
}

// ---------------------------------------------------------------------------
// Reports

inline Json to_json(const LossReport& r) {
  return {{"total", r.total}, {"lr_term", r.lr_term}, {"alignment_term", r.alignment_term}, {"cb_term", r.cb_term}};
}

inline Json to_json(const DimSelection& s) {
  Json curve = Json::array();
  for (const auto& p : s.curve) {
    curve.push_back({{"d", p.dim}, {"gap", p.gap}, {"bound", p.bound}, {"admissible", p.admissible}});
  }
  return {{"d", s.dim}, {"curve", curve}};
}

/// NaN becomes null; JSON has no NaN literal.
inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json to_json(const EvalResult& r) {
  Json per_class = Json::array();
  for (double a : r.per_class_accuracy) per_class.push_back(number_or_null(a));
  return {{"accuracy", r.accuracy}, {"ece", r.ece}, {"per_class_accuracy", per_class}, {"samples", r.predictions.size()}};
}

}  // namespace subalign
