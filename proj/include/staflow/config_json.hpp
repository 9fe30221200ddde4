#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "staflow/filter.hpp"
#include "staflow/model.hpp"
#include "staflow/synth.hpp"
#include "staflow/train.hpp"

namespace staflow {

/// Flags unknown keys so config typos fail fast instead of silently falling
/// back to defaults.
inline void check_known_keys(const nlohmann::json& j,
                             const std::vector<std::string>& allowed,
                             const std::string& context,
                             std::vector<std::string>& errors) {
  if (!j.is_object()) {
    errors.push_back(context + " must be a JSON object");
    return;
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      errors.push_back(context + ": unknown key '" + it.key() + "'");
  }
}

inline nlohmann::json arch_to_json(const ArchConfig& a) {
  return {
      {"n_channels", a.n_channels},
      {"n_timepoints", a.n_timepoints},
      {"state_dim", a.state_dim},
      {"spatial_filters", a.spatial_filters},
      {"temporal_kernel", a.temporal_kernel},
      {"flow_pool_kernel", a.flow_pool_kernel},
      {"flow_pool_stride", a.flow_pool_stride},
      {"pyramid_lengths",
       {a.pyramid_lengths[0], a.pyramid_lengths[1], a.pyramid_lengths[2]}},
      {"gru_hidden", a.gru_hidden},
      {"mlp_hidden", a.mlp_hidden},
      {"dropout_encoder", a.dropout_encoder},
      {"dropout_head", a.dropout_head},
      {"n_classes", a.n_classes},
      {"variant", variant_name(a.variant)},
      {"share_modulation", a.share_modulation},
  };
}

inline ArchConfig arch_from_json(const nlohmann::json& j,
                                 ArchConfig base = {}) {
  ArchConfig a = base;
  a.n_channels = j.value("n_channels", a.n_channels);
  a.n_timepoints = j.value("n_timepoints", a.n_timepoints);
  a.state_dim = j.value("state_dim", a.state_dim);
  a.spatial_filters = j.value("spatial_filters", a.spatial_filters);
  a.temporal_kernel = j.value("temporal_kernel", a.temporal_kernel);
  a.flow_pool_kernel = j.value("flow_pool_kernel", a.flow_pool_kernel);
  a.flow_pool_stride = j.value("flow_pool_stride", a.flow_pool_stride);
  if (j.contains("pyramid_lengths")) {
    auto p = j["pyramid_lengths"].get<std::vector<std::size_t>>();
    if (p.size() != 3)
      throw ConfigError("pyramid_lengths must list exactly three lengths");
    a.pyramid_lengths = {p[0], p[1], p[2]};
  }
  a.gru_hidden = j.value("gru_hidden", a.gru_hidden);
  if (j.contains("mlp_hidden"))
    a.mlp_hidden = j["mlp_hidden"].get<std::vector<std::size_t>>();
  a.dropout_encoder = j.value("dropout_encoder", a.dropout_encoder);
  a.dropout_head = j.value("dropout_head", a.dropout_head);
  a.n_classes = j.value("n_classes", a.n_classes);
  if (j.contains("variant"))
    a.variant = variant_from_string(j["variant"].get<std::string>());
  a.share_modulation = j.value("share_modulation", a.share_modulation);
  return a;
}

inline const std::vector<std::string>& arch_keys() {
  static const std::vector<std::string> keys{
      "n_channels",     "n_timepoints",  "state_dim",
      "spatial_filters", "temporal_kernel", "flow_pool_kernel",
      "flow_pool_stride", "pyramid_lengths", "gru_hidden",
      "mlp_hidden",     "dropout_encoder", "dropout_head",
      "n_classes",      "variant",        "share_modulation"};
  return keys;
}

inline TrainConfig train_from_json(const nlohmann::json& j,
                                   TrainConfig base = {}) {
  TrainConfig t = base;
  t.lr = j.value("lr", t.lr);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.adam_eps = j.value("adam_eps", t.adam_eps);
  t.max_epochs = j.value("max_epochs", t.max_epochs);
  t.patience = j.value("patience", t.patience);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.val_fraction = j.value("val_fraction", t.val_fraction);
  t.seed = j.value("seed", t.seed);
  t.n_seeds = j.value("n_seeds", t.n_seeds);
  return t;
}

inline const std::vector<std::string>& train_keys() {
  static const std::vector<std::string> keys{
      "lr",       "beta1",      "beta2",        "adam_eps", "max_epochs",
      "patience", "batch_size", "val_fraction", "seed",     "n_seeds"};
  return keys;
}

inline SynthSpec synth_from_json(const nlohmann::json& j,
                                 SynthSpec base = {}) {
  SynthSpec s = base;
  s.n_classes = j.value("n_classes", s.n_classes);
  s.trials_per_class = j.value("trials_per_class", s.trials_per_class);
  s.n_channels = j.value("n_channels", s.n_channels);
  s.duration_s = j.value("duration_s", s.duration_s);
  s.sample_rate_hz = j.value("sample_rate_hz", s.sample_rate_hz);
  s.rhythm_hz = j.value("rhythm_hz", s.rhythm_hz);
  s.rhythm_amplitude_uv = j.value("rhythm_amplitude_uv", s.rhythm_amplitude_uv);
  s.noise_std_uv = j.value("noise_std_uv", s.noise_std_uv);
  s.seed = j.value("seed", s.seed);
  if (j.contains("classes")) {
    s.classes.clear();
    for (const auto& e : j["classes"]) {
      SynthClassSpec c;
      c.channels = e.value("channels", std::vector<std::size_t>{});
      c.erd_depth = e.value("erd_depth", 0.8);
      s.classes.push_back(c);
    }
  } else if (j.contains("erd_depth")) {
    s.classes = SynthSpec::default_classes(s.n_classes, s.n_channels,
                                           j["erd_depth"].get<double>());
  }
  return s;
}

inline nlohmann::json synth_to_json(const SynthSpec& s) {
  nlohmann::json j{
      {"n_classes", s.n_classes},
      {"trials_per_class", s.trials_per_class},
      {"n_channels", s.n_channels},
      {"duration_s", s.duration_s},
      {"sample_rate_hz", s.sample_rate_hz},
      {"rhythm_hz", s.rhythm_hz},
      {"rhythm_amplitude_uv", s.rhythm_amplitude_uv},
      {"noise_std_uv", s.noise_std_uv},
      {"seed", s.seed},
  };
  if (!s.classes.empty()) {
    j["classes"] = nlohmann::json::array();
    for (const auto& c : s.classes)
      j["classes"].push_back(
          {{"channels", c.channels}, {"erd_depth", c.erd_depth}});
  }
  return j;
}

inline const std::vector<std::string>& synth_keys() {
  static const std::vector<std::string> keys{
      "n_classes",   "trials_per_class",    "n_channels",
      "duration_s",  "sample_rate_hz",      "rhythm_hz",
      "rhythm_amplitude_uv", "noise_std_uv", "seed",
      "classes",     "erd_depth",           "test_trials_per_class"};
  return keys;
}

inline FilterSpec filter_from_json(const nlohmann::json& j,
                                   FilterSpec base = {}) {
  FilterSpec f = base;
  f.order = j.value("order", f.order);
  f.low_hz = j.value("low_hz", f.low_hz);
  f.high_hz = j.value("high_hz", f.high_hz);
  return f;
}

inline const std::vector<std::string>& filter_keys() {
  static const std::vector<std::string> keys{"enabled", "order", "low_hz",
                                             "high_hz", "zero_phase"};
  return keys;
}

}  // namespace staflow
