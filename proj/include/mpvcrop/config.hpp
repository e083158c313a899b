#pragma once

// Run configuration as a JSON tree: defaults, then a config file, then
// dotted-key overrides, then conversion into the typed module configs.

#include "mpvcrop/checkpoint.hpp"
#include "mpvcrop/data.hpp"
#include "mpvcrop/models.hpp"
#include "mpvcrop/trainer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mpvcrop {

/// The config file could not be read or parsed.
class config_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs";
};

inline nlohmann::json default_config_json() {
  const DataConfig d;
  const ModelConfig m;
  const TrainConfig t;
  nlohmann::json j;
  j["seed"] = 0;
  j["data_seed"] = -1; // negative: use the master seed
  j["precision"] = "double";
  j["out_dir"] = "runs";
  j["data"] = data_config_json(d);
  j["model"] = model_config_json(m);
  j["train"] = {{"epochs", t.epochs},
                {"warmup_epochs", t.warmup_epochs},
                {"steps_per_epoch", t.steps_per_epoch},
                {"batch_size", t.batch_size},
                {"labeled_fraction", t.labeled_fraction},
                {"lr", t.lr},
                {"lr_decay_epoch", t.lr_decay_epoch},
                {"lr_decay_factor", t.lr_decay_factor},
                {"lambda", t.lambda},
                {"alpha", t.alpha},
                {"rho_start", t.rho_start},
                {"rho_end", t.rho_end},
                {"use_mpv", t.use_mpv},
                {"source", source_name(t.source)},
                {"check_tape", t.check_tape}};
  j["policy"] = {{"jitters", t.policy.jitters}, {"rho_eval", t.policy.rho_eval}};
  j["augment"] = {{"flip", t.strong.flip},
                  {"invert", t.strong.invert},
                  {"blur", t.strong.blur},
                  {"noise", t.strong.noise},
                  {"noise_max", t.strong.noise_max},
                  {"cutout", t.strong.cutout},
                  {"cutout_max_frac", t.strong.cutout_max_frac}};
  return j;
}

namespace detail {

/// Recursively overlays `src` onto `dst`; keys must already exist in `dst`.
inline void overlay(nlohmann::json& dst, const nlohmann::json& src, const std::string& path) {
  if (!src.is_object()) throw usage_error("config: expected an object at '" + path + "'");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!dst.contains(it.key())) throw usage_error("config: unknown key '" + key + "'");
    auto& d = dst[it.key()];
    if (d.is_object())
      overlay(d, it.value(), key);
    else
      d = it.value();
  }
}

/// Parses an override value against the type of the default it replaces.
inline nlohmann::json parse_override_value(const nlohmann::json& current, const std::string& key, const std::string& text) {
  if (current.is_string()) return text;
  nlohmann::json v;
  try {
    v = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    throw usage_error("config: cannot parse value '" + text + "' for '" + key + "'");
  }
  const bool ok = (current.is_boolean() && v.is_boolean()) || (current.is_number_integer() && v.is_number_integer()) ||
                  (current.is_number_float() && v.is_number()) || (current.is_array() && v.is_array());
  if (!ok) throw usage_error("config: value '" + text + "' has the wrong type for '" + key + "'");
  return v;
}

} // namespace detail

/// Applies one "a.b.c=value" override.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw usage_error("config: override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  nlohmann::json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw usage_error("config: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw usage_error("config: '" + key + "' names a section, not a value");
  *node = detail::parse_override_value(*node, key, assignment.substr(eq + 1));
}

/// base (the defaults) <- file (optional) <- overrides, in increasing precedence.
inline nlohmann::json resolve_config_json(const std::optional<std::filesystem::path>& file,
                                          const std::vector<std::string>& overrides,
                                          nlohmann::json base = default_config_json()) {
  auto cfg = std::move(base);
  if (file) {
    nlohmann::json from_file;
    try {
      from_file = read_json_file(*file);
    } catch (const std::exception& e) {
      throw config_error("cannot read config " + file->string() + ": " + e.what());
    }
    detail::overlay(cfg, from_file, "");
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig rc;
  try {
    rc.seed = j.at("seed").get<std::uint64_t>();
    rc.out_dir = j.at("out_dir").get<std::string>();
    rc.data = data_config_from_json(j.at("data"));

    rc.model = model_config_from_json(j.at("model"));

    const auto& t = j.at("train");
    auto& tc = rc.train;
    tc.epochs = t.at("epochs").get<int>();
    tc.warmup_epochs = t.at("warmup_epochs").get<int>();
    tc.steps_per_epoch = t.at("steps_per_epoch").get<std::size_t>();
    tc.batch_size = t.at("batch_size").get<std::size_t>();
    tc.labeled_fraction = t.at("labeled_fraction").get<double>();
    tc.lr = t.at("lr").get<double>();
    tc.lr_decay_epoch = t.at("lr_decay_epoch").get<int>();
    tc.lr_decay_factor = t.at("lr_decay_factor").get<double>();
    tc.lambda = t.at("lambda").get<double>();
    tc.alpha = t.at("alpha").get<double>();
    tc.rho_start = t.at("rho_start").get<double>();
    tc.rho_end = t.at("rho_end").get<double>();
    tc.use_mpv = t.at("use_mpv").get<bool>();
    tc.source = parse_source(t.at("source").get<std::string>());
    tc.check_tape = t.at("check_tape").get<bool>();

    const auto& p = j.at("policy");
    tc.policy.jitters = p.at("jitters").get<std::size_t>();
    tc.policy.rho_eval = p.at("rho_eval").get<double>();

    const auto& a = j.at("augment");
    tc.strong.flip = a.at("flip").get<double>();
    tc.strong.invert = a.at("invert").get<double>();
    tc.strong.blur = a.at("blur").get<double>();
    tc.strong.noise = a.at("noise").get<double>();
    tc.strong.noise_max = a.at("noise_max").get<double>();
    tc.strong.cutout = a.at("cutout").get<double>();
    tc.strong.cutout_max_frac = a.at("cutout_max_frac").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw usage_error(std::string("config: ") + e.what());
  }
  rc.train.seed = rc.seed;
  const auto precision = j.value("precision", std::string("double"));
  if (precision != "double" && precision != "float") throw usage_error("config: precision must be 'double' or 'float'");
  if (rc.model.image_size != rc.data.image_size) throw usage_error("config: model.image_size must equal data.image_size");
  if (rc.model.composer_pool != "gap" && rc.model.composer_pool != "flatten")
    throw usage_error("config: model.composer_pool must be 'gap' or 'flatten'");
  rc.data.validate();
  rc.train.validate();
  return rc;
}

} // namespace mpvcrop
