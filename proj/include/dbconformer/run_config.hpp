#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "dbconformer/checkpoint.hpp"
#include "dbconformer/config.hpp"
#include "dbconformer/splits.hpp"

namespace dbc {

/// Euclidean-alignment policy.
struct EaConfig {
  enum class TestInit { first_trial, warmup };
  enum class Scope { training_only, whole_subject };

  bool enabled = true;
  TestInit test_init = TestInit::first_trial;
  std::size_t warmup_k = 10;  // used by TestInit::warmup
  Scope scope = Scope::training_only;

  bool operator==(const EaConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  Protocol protocol = Protocol::CO;
  double lr = 1e-3;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t cv_folds = 5;
  EaConfig ea;
  std::string data_dir;
  std::string out_dir;
  bool all_metrics = false;
  bool save_checkpoints = true;

  void validate() const {
    model.validate();
    if (seeds.empty()) throw ConfigError("run config: seed list is empty");
    if (epochs == 0) throw ConfigError("run config: epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("run config: batch_size must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("run config: learning rate must be positive");
    if (protocol == Protocol::CV && cv_folds < 2) throw ConfigError("run config: cv.folds must be at least 2");
    if (ea.test_init == EaConfig::TestInit::warmup && ea.warmup_k == 0) {
      throw ConfigError("run config: ea.warmup_k must be at least 1");
    }
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// Every accepted key, in the order they are written.
inline const std::vector<std::pair<std::string, Field>>& config_fields() {
  static const std::vector<std::pair<std::string, Field>> fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    auto size_field = [&](const std::string& key, std::size_t RunConfig::*outer) {
      f.push_back({key, {[=](RunConfig& c, const std::string& v) { c.*outer = parse_number<std::size_t>(key, v); },
                         [=](const RunConfig& c) { return std::to_string(c.*outer); }}});
    };
    auto model_size = [&](const std::string& key, std::size_t ModelConfig::*m) {
      f.push_back({key, {[=](RunConfig& c, const std::string& v) { c.model.*m = parse_number<std::size_t>(key, v); },
                         [=](const RunConfig& c) { return std::to_string(c.model.*m); }}});
    };
    auto model_double = [&](const std::string& key, double ModelConfig::*m) {
      f.push_back({key, {[=](RunConfig& c, const std::string& v) { c.model.*m = parse_number<double>(key, v); },
                         [=](const RunConfig& c) { return fmt(c.model.*m); }}});
    };
    auto model_bool = [&](const std::string& key, bool ModelConfig::*m) {
      f.push_back({key, {[=](RunConfig& c, const std::string& v) { c.model.*m = parse_bool(key, v); },
                         [=](const RunConfig& c) { return std::string(c.model.*m ? "true" : "false"); }}});
    };
    f.push_back({"protocol", {[](RunConfig& c, const std::string& v) { c.protocol = parse_protocol(v); },
                              [](const RunConfig& c) { return to_string(c.protocol); }}});
    f.push_back({"lr", {[](RunConfig& c, const std::string& v) { c.lr = parse_number<double>("lr", v); },
                        [](const RunConfig& c) { return fmt(c.lr); }}});
    size_field("epochs", &RunConfig::epochs);
    size_field("batch_size", &RunConfig::batch_size);
    f.push_back({"seeds",
                 {[](RunConfig& c, const std::string& v) {
                    c.seeds.clear();
                    std::stringstream ss(v);
                    std::string item;
                    while (std::getline(ss, item, ',')) {
                      item = trim(item);
                      if (!item.empty()) c.seeds.push_back(parse_number<std::uint64_t>("seeds", item));
                    }
                  },
                  [](const RunConfig& c) {
                    std::string s;
                    for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
                    return s;
                  }}});
    size_field("cv.folds", &RunConfig::cv_folds);
    f.push_back({"ea.enabled", {[](RunConfig& c, const std::string& v) { c.ea.enabled = parse_bool("ea.enabled", v); },
                                [](const RunConfig& c) { return std::string(c.ea.enabled ? "true" : "false"); }}});
    f.push_back({"ea.test_init",
                 {[](RunConfig& c, const std::string& v) {
                    if (v == "first-trial") c.ea.test_init = EaConfig::TestInit::first_trial;
                    else if (v == "warmup-k") c.ea.test_init = EaConfig::TestInit::warmup;
                    else throw ConfigError("ea.test_init must be first-trial or warmup-k, got '" + v + "'");
                  },
                  [](const RunConfig& c) {
                    return std::string(c.ea.test_init == EaConfig::TestInit::first_trial ? "first-trial" : "warmup-k");
                  }}});
    f.push_back({"ea.warmup_k",
                 {[](RunConfig& c, const std::string& v) { c.ea.warmup_k = parse_number<std::size_t>("ea.warmup_k", v); },
                  [](const RunConfig& c) { return std::to_string(c.ea.warmup_k); }}});
    f.push_back({"ea.scope",
                 {[](RunConfig& c, const std::string& v) {
                    if (v == "training-only") c.ea.scope = EaConfig::Scope::training_only;
                    else if (v == "whole-subject") c.ea.scope = EaConfig::Scope::whole_subject;
                    else throw ConfigError("ea.scope must be training-only or whole-subject, got '" + v + "'");
                  },
                  [](const RunConfig& c) {
                    return std::string(c.ea.scope == EaConfig::Scope::training_only ? "training-only" : "whole-subject");
                  }}});
    f.push_back({"paths.data_dir", {[](RunConfig& c, const std::string& v) { c.data_dir = v; },
                                    [](const RunConfig& c) { return c.data_dir; }}});
    f.push_back({"paths.out_dir", {[](RunConfig& c, const std::string& v) { c.out_dir = v; },
                                   [](const RunConfig& c) { return c.out_dir; }}});
    f.push_back({"metrics.all", {[](RunConfig& c, const std::string& v) { c.all_metrics = parse_bool("metrics.all", v); },
                                 [](const RunConfig& c) { return std::string(c.all_metrics ? "true" : "false"); }}});
    f.push_back({"checkpoints",
                 {[](RunConfig& c, const std::string& v) { c.save_checkpoints = parse_bool("checkpoints", v); },
                  [](const RunConfig& c) { return std::string(c.save_checkpoints ? "true" : "false"); }}});
    model_size("model.channels", &ModelConfig::channels);
    model_size("model.samples", &ModelConfig::samples);
    model_size("model.classes", &ModelConfig::classes);
    model_size("model.filters", &ModelConfig::filters);
    model_size("model.kernel", &ModelConfig::kernel);
    model_size("model.patch", &ModelConfig::patch);
    model_size("model.embed", &ModelConfig::embed);
    model_size("model.temporal_layers", &ModelConfig::temporal_layers);
    model_size("model.temporal_heads", &ModelConfig::temporal_heads);
    model_size("model.spatial_layers", &ModelConfig::spatial_layers);
    model_size("model.spatial_heads", &ModelConfig::spatial_heads);
    model_size("model.ff_mult", &ModelConfig::ff_mult);
    model_double("model.p_embed", &ModelConfig::p_embed);
    model_double("model.p_enc", &ModelConfig::p_enc);
    model_double("model.p_cls", &ModelConfig::p_cls);
    model_size("model.spatial_conv_filters", &ModelConfig::spatial_conv_filters);
    model_size("model.spatial_conv_kernel", &ModelConfig::spatial_conv_kernel);
    model_bool("model.spatial_proj_bias", &ModelConfig::spatial_proj_bias);
    model_bool("ablation.no_spatial_branch", &ModelConfig::no_spatial_branch);
    model_bool("ablation.no_positional_encoding", &ModelConfig::no_positional_encoding);
    model_bool("ablation.mean_pool_channels", &ModelConfig::mean_pool_channels);
    return f;
  }();
  return fields;
}

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& [k, field] : detail::config_fields()) {
    if (k == key) {
      field.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Parses flat `key = value` text; '#' starts a comment. Keys not given keep
/// their defaults. The result is validated.
inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
    }
    try {
      set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

/// Every key, one per line, in a form parse_run_config reads back unchanged.
inline std::string to_text(const RunConfig& c) {
  std::string out;
  for (const auto& [k, field] : detail::config_fields()) out += k + " = " + field.get(c) + "\n";
  return out;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  for (const auto& [k, field] : detail::config_fields()) j[k] = field.get(c);
  return j;
}

}  // namespace dbc
