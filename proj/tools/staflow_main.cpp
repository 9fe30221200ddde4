// staflow: synthetic data generation, training, ablations and feature export
// for the dual-branch state/flow EEG decoder, driven by one JSON config with
// command-line overrides.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "staflow/staflow.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw staflow::ConfigError("cannot open config file " + path);
  try {
    json j;
    in >> j;
    if (!j.is_object())
      throw staflow::ConfigError("config root must be a JSON object: " + path);
    return j;
  } catch (const json::exception& e) {
    throw staflow::ConfigError("config parse error in " + path + ": " +
                               e.what());
  }
}

/// Applies "--a.b.c value" pairs onto the config tree; values parse as JSON
/// literals when possible, otherwise as strings.
void apply_overrides(json& config, const std::vector<std::string>& extras) {
  std::size_t i = 0;
  while (i < extras.size()) {
    std::string key = extras[i];
    if (key.rfind("--", 0) != 0)
      throw staflow::ConfigError("unexpected argument '" + key +
                                 "' (overrides look like --section.key value)");
    key = key.substr(2);
    std::string value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
      ++i;
    } else {
      if (i + 1 >= extras.size())
        throw staflow::ConfigError("override --" + key + " is missing a value");
      value = extras[i + 1];
      i += 2;
    }

    json* node = &config;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot - start);
      if (part.empty())
        throw staflow::ConfigError("override key '--" + key +
                                   "' has an empty path segment");
      if (dot == std::string::npos) {
        json parsed = json::parse(value, nullptr, false);
        (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }
}

void fail_on(const std::vector<std::string>& errors) {
  if (errors.empty()) return;
  std::string msg = "configuration problems:";
  for (const auto& e : errors) msg += "\n  - " + e;
  throw staflow::ConfigError(msg);
}

fs::path prepare_out_dir(const json& config) {
  const auto dir = fs::path(config.value("out_dir", std::string("staflow_out")));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec && !fs::is_directory(dir))
    throw staflow::ConfigError("cannot create out_dir " + dir.string() + ": " +
                               ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw staflow::DataError("cannot open " + path.string());
  out << text;
  if (!out) throw staflow::DataError("write failure on " + path.string());
}

void write_json_file(const fs::path& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

// -------------------------------------------------------------------------
// synth
// -------------------------------------------------------------------------

int cmd_synth(const json& config) {
  std::vector<std::string> errors;
  staflow::check_known_keys(config.value("synth", json::object()),
                            staflow::synth_keys(), "synth", errors);
  fail_on(errors);

  const json jsynth = config.value("synth", json::object());
  auto base = staflow::synth_from_json(jsynth);
  base.validate();
  const auto test_trials =
      jsynth.value("test_trials_per_class", base.trials_per_class);

  auto train_spec = base;
  train_spec.seed = staflow::derive_seed(base.seed, 0);
  auto test_spec = base;
  test_spec.trials_per_class = test_trials;
  test_spec.seed = staflow::derive_seed(base.seed, 1);

  const auto dir = prepare_out_dir(config);
  auto train = staflow::synth_generate(train_spec);
  auto test = staflow::synth_generate(test_spec);
  staflow::save_eegb(train, dir / "train.eegb");
  staflow::save_eegb(test, dir / "test.eegb");

  json provenance{{"spec", staflow::synth_to_json(base)},
                  {"test_trials_per_class", test_trials},
                  {"train", {{"file", "train.eegb"},
                             {"seed", train_spec.seed},
                             {"n_trials", train.n_trials}}},
                  {"test", {{"file", "test.eegb"},
                            {"seed", test_spec.seed},
                            {"n_trials", test.n_trials}}}};
  write_json_file(dir / "synth_provenance.json", provenance);
  std::printf("wrote %s (%zu trials) and %s (%zu trials)\n",
              (dir / "train.eegb").c_str(), train.n_trials,
              (dir / "test.eegb").c_str(), test.n_trials);
  return 0;
}

// -------------------------------------------------------------------------
// shared data/train plumbing
// -------------------------------------------------------------------------

struct LoadedData {
  staflow::TrialSet train;
  staflow::TrialSet test;
};

LoadedData load_train_test(const json& config) {
  std::vector<std::string> errors;
  const json jdata = config.value("data", json::object());
  staflow::check_known_keys(jdata, {"train_file", "test_file"}, "data",
                            errors);
  if (!jdata.contains("train_file"))
    errors.push_back("data.train_file is required");
  if (!jdata.contains("test_file"))
    errors.push_back("data.test_file is required");
  const json jband = config.value("bandpass", json::object());
  staflow::check_known_keys(jband, staflow::filter_keys(), "bandpass", errors);
  if (!errors.empty()) fail_on(errors);

  const auto train_file = jdata["train_file"].get<std::string>();
  const auto test_file = jdata["test_file"].get<std::string>();
  for (const auto& f : {train_file, test_file})
    if (!fs::exists(f)) errors.push_back("file does not exist: " + f);
  fail_on(errors);

  LoadedData out;
  out.train = staflow::load_eegb(train_file);
  out.test = staflow::load_eegb(test_file);

  if (out.train.n_channels != out.test.n_channels)
    errors.push_back("train/test channel counts differ (" +
                     std::to_string(out.train.n_channels) + " vs " +
                     std::to_string(out.test.n_channels) + ")");
  if (out.train.n_samples != out.test.n_samples)
    errors.push_back("train/test sample counts differ");
  if (out.train.n_classes != out.test.n_classes)
    errors.push_back("train/test class counts differ");
  fail_on(errors);

  if (jband.value("enabled", false)) {
    const auto spec = staflow::filter_from_json(jband);
    const bool zero_phase = jband.value("zero_phase", true);
    spec.validate(out.train.sample_rate_hz);
    out.train = staflow::bandpass_filter(out.train, spec, zero_phase);
    out.test = staflow::bandpass_filter(out.test, spec, zero_phase);
  }
  return out;
}

staflow::TrainConfig build_train_config(const json& config,
                                        const staflow::TrialSet& train) {
  std::vector<std::string> errors;
  staflow::check_known_keys(config.value("train", json::object()),
                            staflow::train_keys(), "train", errors);
  staflow::check_known_keys(config.value("arch", json::object()),
                            staflow::arch_keys(), "arch", errors);
  fail_on(errors);

  staflow::ArchConfig arch;
  arch.n_channels = train.n_channels;
  arch.n_timepoints = train.n_samples;
  arch.n_classes = train.n_classes;
  arch = staflow::arch_from_json(config.value("arch", json::object()), arch);

  staflow::TrainConfig cfg =
      staflow::train_from_json(config.value("train", json::object()));
  cfg.arch = arch;

  for (const auto& e : cfg.problems()) errors.push_back(e);
  if (arch.n_channels != train.n_channels)
    errors.push_back("arch.n_channels disagrees with the training data");
  if (arch.n_timepoints != train.n_samples)
    errors.push_back("arch.n_timepoints disagrees with the training data");
  if (arch.n_classes != train.n_classes)
    errors.push_back("arch.n_classes disagrees with the training data");
  fail_on(errors);
  return cfg;
}

std::vector<std::uint64_t> seed_list(const json& config,
                                     const staflow::TrainConfig& cfg) {
  const json jtrain = config.value("train", json::object());
  if (jtrain.contains("seeds"))
    return jtrain["seeds"].get<std::vector<std::uint64_t>>();
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < cfg.n_seeds; ++i) seeds.push_back(cfg.seed + i);
  return seeds;
}

void write_history_csv(const fs::path& path,
                       const std::vector<staflow::EpochStats>& history) {
  std::string text = "epoch,train_loss,val_loss,val_acc\n";
  for (const auto& e : history) {
    text += std::to_string(e.epoch) + "," +
            staflow::format_exact(e.train_loss) + "," +
            staflow::format_exact(e.val_loss) + "," +
            staflow::format_exact(e.val_acc) + "\n";
  }
  write_text(path, text);
}

// -------------------------------------------------------------------------
// train
// -------------------------------------------------------------------------

int cmd_train(const json& config) {
  auto data = load_train_test(config);
  auto cfg = build_train_config(config, data.train);
  const auto seeds = seed_list(config, cfg);
  const auto dir = prepare_out_dir(config);

  auto result =
      staflow::multi_seed_run<float>(data.train, data.test, cfg, seeds);

  write_json_file(dir / "metrics.json", result.report.to_json());
  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    write_history_csv(
        dir / ("history_seed" + std::to_string(seeds[i]) + ".csv"),
        result.runs[i].history);
  }
  staflow::save_checkpoint(result.runs[result.best_run].best_params,
                           dir / "model_best.sfnc");

  std::printf("%s over %zu seeds: accuracy %.4f +/- %.4f, kappa %.4f, "
              "macro-F1 %.4f\n",
              variant_name(cfg.arch.variant), seeds.size(),
              result.report.acc_mean, result.report.acc_std,
              result.report.kappa_mean, result.report.f1_mean);
  std::printf("checkpoint (best seed %llu by validation loss): %s\n",
              static_cast<unsigned long long>(
                  result.report.per_seed[result.best_run].seed),
              (dir / "model_best.sfnc").c_str());
  return 0;
}

// -------------------------------------------------------------------------
// eval
// -------------------------------------------------------------------------

int cmd_eval(const json& config) {
  std::vector<std::string> errors;
  const json jeval = config.value("eval", json::object());
  staflow::check_known_keys(jeval, {"checkpoint", "data"}, "eval", errors);
  if (!jeval.contains("checkpoint"))
    errors.push_back("eval.checkpoint is required");
  if (!jeval.contains("data")) errors.push_back("eval.data is required");
  fail_on(errors);
  for (const auto& key : {"checkpoint", "data"})
    if (!fs::exists(jeval[key].get<std::string>()))
      errors.push_back(std::string("file does not exist: ") +
                       jeval[key].get<std::string>());
  fail_on(errors);

  auto params =
      staflow::load_checkpoint<float>(jeval["checkpoint"].get<std::string>());
  auto data = staflow::load_eegb(jeval["data"].get<std::string>());
  auto metrics = staflow::evaluate(params, data);

  json j{{"accuracy", metrics.accuracy},
         {"kappa", metrics.kappa},
         {"macro_f1", metrics.macro_f1}};
  auto rows = json::array();
  for (std::size_t t = 0; t < metrics.confusion.n_classes; ++t) {
    auto row = json::array();
    for (std::size_t p = 0; p < metrics.confusion.n_classes; ++p)
      row.push_back(metrics.confusion.at(t, p));
    rows.push_back(row);
  }
  j["confusion"] = rows;

  const auto dir = prepare_out_dir(config);
  write_json_file(dir / "eval_metrics.json", j);
  std::printf("%s\n", j.dump(2).c_str());
  return 0;
}

// -------------------------------------------------------------------------
// ablate
// -------------------------------------------------------------------------

int cmd_ablate(const json& config) {
  auto data = load_train_test(config);
  auto cfg = build_train_config(config, data.train);
  const auto seeds = seed_list(config, cfg);
  const auto dir = prepare_out_dir(config);

  std::vector<std::string> names{"StateOnly", "FlowOnly", "RandomState",
                                 "Concat", "Full"};
  if (config.contains("ablate")) {
    std::vector<std::string> errors;
    staflow::check_known_keys(config["ablate"], {"variants"}, "ablate", errors);
    fail_on(errors);
    if (config["ablate"].contains("variants"))
      names = config["ablate"]["variants"].get<std::vector<std::string>>();
  }
  for (const auto& n : names) staflow::variant_from_string(n);
  if (std::find(names.begin(), names.end(), "Full") == names.end())
    throw staflow::ConfigError(
        "ablation requires the Full variant as the comparison baseline");

  std::map<std::string, staflow::MetricsReport> reports;
  for (const auto& name : names) {
    auto local = cfg;
    local.arch.variant = staflow::variant_from_string(name);
    auto res = staflow::multi_seed_run<float>(data.train, data.test, local,
                                              seeds);
    reports[name] = res.report;
    std::printf("%-12s accuracy %.4f +/- %.4f\n", name.c_str(),
                res.report.acc_mean, res.report.acc_std);
  }

  // paired Wilcoxon over per-seed accuracies against Full
  auto accs = [&](const std::string& name) {
    std::vector<double> v;
    for (const auto& s : reports[name].per_seed)
      v.push_back(s.metrics.accuracy);
    return v;
  };
  const auto full_accs = accs("Full");
  json out;
  out["variants"] = json::object();
  out["comparisons"] = json::array();
  for (const auto& name : names) {
    auto w = staflow::wilcoxon_signed_rank(accs(name), full_accs);
    staflow::ComparisonEntry entry{"Full", w.w_statistic, w.p_value,
                                   w.all_zero};
    reports[name].comparisons = {entry};
    out["variants"][name] = reports[name].to_json();
    out["comparisons"].push_back({{"variant", name},
                                  {"baseline", "Full"},
                                  {"W", w.w_statistic},
                                  {"p", w.p_value},
                                  {"all_zero", w.all_zero}});
  }
  write_json_file(dir / "ablation.json", out);

  std::string table =
      "Variant       Accuracy (%)        Kappa    f1-score   p vs Full\n";
  char line[160];
  for (const auto& name : names) {
    const auto& r = reports[name];
    std::snprintf(line, sizeof line, "%-12s %6.2f +/- %5.2f   %8.4f   %8.4f   %9.4g\n",
                  name.c_str(), 100.0 * r.acc_mean, 100.0 * r.acc_std,
                  r.kappa_mean, r.f1_mean, r.comparisons[0].p_value);
    table += line;
  }
  write_text(dir / "ablation.txt", table);
  std::printf("\n%s", table.c_str());
  return 0;
}

// -------------------------------------------------------------------------
// export
// -------------------------------------------------------------------------

int cmd_export(const json& config) {
  std::vector<std::string> errors;
  const json jexp = config.value("export", json::object());
  staflow::check_known_keys(jexp, {"checkpoint", "data"}, "export", errors);
  if (!jexp.contains("checkpoint"))
    errors.push_back("export.checkpoint is required");
  if (!jexp.contains("data")) errors.push_back("export.data is required");
  fail_on(errors);
  for (const auto& key : {"checkpoint", "data"})
    if (!fs::exists(jexp[key].get<std::string>()))
      errors.push_back(std::string("file does not exist: ") +
                       jexp[key].get<std::string>());
  fail_on(errors);

  auto params =
      staflow::load_checkpoint<float>(jexp["checkpoint"].get<std::string>());
  auto data = staflow::load_eegb(jexp["data"].get<std::string>());
  if (data.n_channels != params.config.n_channels ||
      data.n_samples != params.config.n_timepoints)
    throw staflow::ConfigError(
        "checkpoint architecture disagrees with the data geometry");

  const auto dir = prepare_out_dir(config);
  auto weights = staflow::export_spatial_weights(params);
  const auto& header = data.channel_names;  // may be empty
  if (!weights.state.empty())
    staflow::write_matrix_csv(dir / "spatial_state.csv", weights.state,
                              weights.filters, weights.channels, header);
  if (!weights.flow.empty())
    staflow::write_matrix_csv(dir / "spatial_flow.csv", weights.flow,
                              weights.filters, weights.channels, header);

  if (staflow::variant_has_pyramid(params.config.variant)) {
    auto features = staflow::export_stage_features(params, data);
    staflow::write_stage_features_csv(features, dir);
    json fisher(features.fisher);
    write_json_file(dir / "fisher.json", fisher);
    std::printf("stage Fisher scores:");
    for (const auto& s : features.stages)
      std::printf(" %s=%.4g", s.c_str(), features.fisher.at(s));
    std::printf("\n");
  } else {
    std::printf("variant %s has no pyramid stages; spatial weights only\n",
                variant_name(params.config.variant));
  }
  std::printf("exports written to %s\n", dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"state/flow coordinated EEG decoder toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir_flag;
  struct Sub {
    CLI::App* app;
    int (*run)(const json&);
  };
  std::vector<Sub> subs;
  for (auto [name, desc, fn] :
       {std::tuple{"synth", "generate a synthetic EEGB train/test pair",
                   &cmd_synth},
        std::tuple{"train", "train one variant over multiple seeds",
                   &cmd_train},
        std::tuple{"ablate", "run all variants and compare against Full",
                   &cmd_ablate},
        std::tuple{"export",
                   "export spatial weights and stage features from a "
                   "checkpoint",
                   &cmd_export},
        std::tuple{"eval", "evaluate a checkpoint on a data file",
                   &cmd_eval}}) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--out-dir", out_dir_flag,
                    "output directory (overrides config out_dir)");
    sub->allow_extras();
    subs.push_back({sub, fn});
  }

  try {
    app.parse(argc, argv);
    for (const auto& sub : subs) {
      if (!sub.app->parsed()) continue;
      json config = load_config_file(config_path);
      apply_overrides(config, sub.app->remaining());
      if (!out_dir_flag.empty()) config["out_dir"] = out_dir_flag;
      return sub.run(config);
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const staflow::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const staflow::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const staflow::ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return 2;
  } catch (const staflow::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const staflow::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  }
}
