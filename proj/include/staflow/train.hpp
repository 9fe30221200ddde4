#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "staflow/eeg.hpp"
#include "staflow/metrics.hpp"
#include "staflow/model.hpp"

namespace staflow {

struct TrainConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_epochs = 1000;
  std::size_t patience = 100;
  std::size_t batch_size = 64;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
  std::size_t n_seeds = 10;
  ArchConfig arch;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (!(lr > 0)) out.push_back("lr must be > 0");
    if (!(beta1 >= 0 && beta1 < 1)) out.push_back("beta1 must lie in [0,1)");
    if (!(beta2 >= 0 && beta2 < 1)) out.push_back("beta2 must lie in [0,1)");
    if (!(adam_eps > 0)) out.push_back("adam_eps must be > 0");
    if (max_epochs < 1) out.push_back("max_epochs must be >= 1");
    if (patience < 1) out.push_back("patience must be >= 1");
    if (patience > max_epochs) out.push_back("patience must be <= max_epochs");
    if (batch_size < 2)
      out.push_back("batch_size must be >= 2 (train-mode batch norm)");
    if (!(val_fraction > 0 && val_fraction < 1))
      out.push_back("val_fraction must lie in (0,1)");
    if (n_seeds < 1) out.push_back("n_seeds must be >= 1");
    for (const auto& e : arch.problems()) out.push_back("arch: " + e);
    return out;
  }

  void validate() const {
    auto errs = problems();
    if (!errs.empty()) {
      std::string msg = "invalid train config:";
      for (const auto& e : errs) msg += "\n  - " + e;
      throw ConfigError(msg);
    }
  }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::size_t step = 0;
};

/// One Adam update with bias correction over the flattened parameter list.
/// Aborts with the parameter name on the first non-finite gradient.
template <typename T>
void adam_step(std::vector<NamedParam<T>>& params, AdamState<T>& state,
               const TrainConfig& cfg) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].tensor.size(), T(0));
      state.v[i].assign(params[i].tensor.size(), T(0));
    }
  }
  ++state.step;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T corr1 =
      T(1) - std::pow(b1, static_cast<T>(state.step));
  const T corr2 =
      T(1) - std::pow(b2, static_cast<T>(state.step));
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.adam_eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& tensor = params[i].tensor;
    auto& grad = tensor.grad();
    for (const T g : grad) {
      if (!std::isfinite(g))
        throw NumericalError("non-finite gradient in parameter '" +
                             params[i].name + "'");
    }
    auto& vals = tensor.values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < vals.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * grad[j];
      v[j] = b2 * v[j] + (T(1) - b2) * grad[j] * grad[j];
      const T m_hat = m[j] / corr1;
      const T v_hat = v[j] / corr2;
      vals[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Batching helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> gather_batch(const TrialSet& set, const std::vector<std::size_t>& idx,
                       std::vector<int>* labels_out) {
  const std::size_t stride = set.n_channels * set.n_samples;
  std::vector<T> data(idx.size() * stride);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const float* src = set.trial(idx[i]);
    T* dst = data.data() + i * stride;
    for (std::size_t k = 0; k < stride; ++k) dst[k] = static_cast<T>(src[k]);
    if (labels_out) labels_out->push_back(set.labels[idx[i]]);
  }
  return Tensor<T>::from_vector(std::move(data),
                                {idx.size(), set.n_channels, set.n_samples});
}

/// Stratified split: per class, a seeded shuffle sends ~val_fraction of the
/// trials (at least one, at most all but one) to the validation set.
inline void stratified_split(const TrialSet& set, double val_fraction, Rng& rng,
                             std::vector<std::size_t>& train_idx,
                             std::vector<std::size_t>& val_idx) {
  std::vector<std::vector<std::size_t>> byclass(set.n_classes);
  for (std::size_t t = 0; t < set.n_trials; ++t)
    byclass[static_cast<std::size_t>(set.labels[t])].push_back(t);

  std::size_t present = 0;
  for (const auto& group : byclass)
    if (!group.empty()) ++present;
  if (present < 2)
    throw DataError("training data must contain at least two classes");

  for (auto& group : byclass) {
    if (group.empty()) continue;
    if (group.size() < 2)
      throw DataError(
          "stratified split needs >= 2 trials per class, class with " +
          std::to_string(group.size()) + " found");
    std::shuffle(group.begin(), group.end(), rng);
    auto n_val = static_cast<std::size_t>(
        std::llround(val_fraction * static_cast<double>(group.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, group.size() - 1);
    for (std::size_t i = 0; i < group.size(); ++i) {
      (i < n_val ? val_idx : train_idx).push_back(group[i]);
    }
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
}

/// Eval-mode cross-entropy and accuracy over the listed trials, in chunks.
template <typename T>
std::pair<double, double> eval_loss_acc(StaFlowParams<T>& params,
                                        const TrialSet& set,
                                        const std::vector<std::size_t>& idx,
                                        std::size_t chunk) {
  NoGradGuard no_grad;
  Rng unused_rng(0);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t at = 0; at < idx.size(); at += chunk) {
    const std::size_t take = std::min(chunk, idx.size() - at);
    std::vector<std::size_t> part(idx.begin() + at, idx.begin() + at + take);
    std::vector<int> labels;
    auto x = gather_batch<T>(set, part, &labels);
    auto logits = forward(x, params, false, unused_rng);
    loss_sum +=
        static_cast<double>(softmax_cross_entropy(logits, labels).item()) *
        static_cast<double>(take);
    const std::size_t k = params.config.n_classes;
    for (std::size_t i = 0; i < take; ++i) {
      const int pred = argmax_lowest(logits.data() + i * k, k);
      if (pred == labels[i]) ++correct;
    }
  }
  return {loss_sum / static_cast<double>(idx.size()),
          static_cast<double>(correct) / static_cast<double>(idx.size())};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

template <typename T>
struct TrainResult {
  StaFlowParams<T> best_params;
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;  // 1-based
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Trains one model: stratified validation split, shuffled mini-batches,
/// cross-entropy + Adam, early stopping on validation loss. Returns the
/// parameters of the best-validation epoch. Fully determined by cfg.seed.
template <typename T>
TrainResult<T> train_model(const TrialSet& train, const TrainConfig& cfg) {
  cfg.validate();
  train.validate();
  if (train.n_channels != cfg.arch.n_channels ||
      train.n_samples != cfg.arch.n_timepoints ||
      train.n_classes != cfg.arch.n_classes)
    throw ConfigError(
        "training data geometry (" + std::to_string(train.n_channels) + " ch x " +
        std::to_string(train.n_samples) + " samples, " +
        std::to_string(train.n_classes) +
        " classes) does not match the architecture config");
  if (cfg.batch_size > train.n_trials)
    throw ConfigError("batch_size " + std::to_string(cfg.batch_size) +
                      " exceeds training set size " +
                      std::to_string(train.n_trials));

  Rng rng(cfg.seed);
  std::vector<std::size_t> train_idx, val_idx;
  detail::stratified_split(train, cfg.val_fraction, rng, train_idx, val_idx);
  auto params = init_params<T>(cfg.arch, rng);
  auto named = params.named_parameters();
  AdamState<T> adam;

  TrainResult<T> result;
  std::size_t since_improve = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t at = 0; at < train_idx.size(); at += cfg.batch_size) {
      const std::size_t take = std::min(cfg.batch_size, train_idx.size() - at);
      if (take < 2) break;  // train-mode batch norm needs two trials
      std::vector<std::size_t> part(train_idx.begin() + at,
                                    train_idx.begin() + at + take);
      std::vector<int> labels;
      auto x = detail::gather_batch<T>(train, part, &labels);
      for (auto& np : named) np.tensor.zero_grad();
      auto logits = forward(x, params, true, rng);
      auto loss = softmax_cross_entropy(logits, labels);
      loss.backward();
      adam_step(named, adam, cfg);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(take);
      seen += take;
    }

    auto [val_loss, val_acc] =
        detail::eval_loss_acc(params, train, val_idx, cfg.batch_size);
    result.history.push_back({epoch, loss_sum / static_cast<double>(seen),
                              val_loss, val_acc});

    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      result.best_params = params.clone();
      since_improve = 0;
    } else {
      ++since_improve;
      if (since_improve >= cfg.patience) break;
    }
  }
  return result;
}

/// Eval-mode metrics over a test set.
template <typename T>
EvalMetrics evaluate(StaFlowParams<T>& params, const TrialSet& test,
                     std::size_t chunk = 64) {
  test.validate();
  if (test.n_classes != params.config.n_classes)
    throw ConfigError("test set has " + std::to_string(test.n_classes) +
                      " classes, model expects " +
                      std::to_string(params.config.n_classes));
  if (test.n_channels != params.config.n_channels ||
      test.n_samples != params.config.n_timepoints)
    throw ConfigError("test set geometry does not match the model");

  NoGradGuard no_grad;
  Rng unused_rng(0);
  const std::size_t k = params.config.n_classes;
  std::vector<int> preds;
  preds.reserve(test.n_trials);
  std::vector<std::size_t> idx;
  for (std::size_t at = 0; at < test.n_trials; at += chunk) {
    const std::size_t take = std::min(chunk, test.n_trials - at);
    idx.clear();
    for (std::size_t i = 0; i < take; ++i) idx.push_back(at + i);
    auto x = detail::gather_batch<T>(test, idx, nullptr);
    auto logits = forward(x, params, false, unused_rng);
    for (std::size_t i = 0; i < take; ++i)
      preds.push_back(argmax_lowest(logits.data() + i * k, k));
  }
  return metrics_from_confusion(
      confusion_from_predictions(test.labels, preds, k));
}

// ---------------------------------------------------------------------------
// Multi-seed protocol
// ---------------------------------------------------------------------------

template <typename T>
struct MultiSeedResult {
  MetricsReport report;
  std::vector<TrainResult<T>> runs;  // per seed, same order as report.per_seed
  std::size_t best_run = 0;          // lowest best-validation-loss seed
};

/// Trains and evaluates once per seed (default: n_seeds consecutive seeds
/// from cfg.seed). Seeds run concurrently when the thread budget allows;
/// results are identical either way.
template <typename T>
MultiSeedResult<T> multi_seed_run(const TrialSet& train, const TrialSet& test,
                                  const TrainConfig& cfg,
                                  std::vector<std::uint64_t> seeds = {}) {
  if (seeds.empty()) {
    for (std::size_t i = 0; i < cfg.n_seeds; ++i)
      seeds.push_back(cfg.seed + i);
  }
  MultiSeedResult<T> out;
  out.runs.resize(seeds.size());
  out.report.per_seed.resize(seeds.size());

  parallel_for(seeds.size(), [&](std::size_t i) {
    TrainConfig local = cfg;
    local.seed = seeds[i];
    auto run = train_model<T>(train, local);
    auto metrics = evaluate(run.best_params, test, cfg.batch_size);
    SeedMetrics sm;
    sm.seed = seeds[i];
    sm.metrics = metrics;
    sm.best_val_loss = run.best_val_loss;
    sm.best_epoch = run.best_epoch;
    sm.epochs_run = run.history.size();
    out.report.per_seed[i] = sm;
    out.runs[i] = std::move(run);
  });

  out.report.aggregate();
  for (std::size_t i = 1; i < out.runs.size(); ++i)
    if (out.runs[i].best_val_loss < out.runs[out.best_run].best_val_loss)
      out.best_run = i;
  return out;
}

// ---------------------------------------------------------------------------
// Stage feature export
// ---------------------------------------------------------------------------

struct StageFeatures {
  std::vector<std::string> stages;        // flow, mod1, mod2, mod3, Z
  std::vector<std::vector<double>> data;  // per stage, rows = trials
  std::vector<std::size_t> cols;          // per stage
  std::vector<int> labels;
  std::map<std::string, double> fisher;
};

/// Flattened per-trial activations at each pyramid stage plus their Fisher
/// separability scores. Requires a pyramid variant.
template <typename T>
StageFeatures export_stage_features(StaFlowParams<T>& params,
                                    const TrialSet& data,
                                    std::size_t chunk = 64) {
  data.validate();
  if (!variant_has_pyramid(params.config.variant))
    throw UsageError("stage export requires a pyramid variant, got " +
                     std::string(variant_name(params.config.variant)));

  NoGradGuard no_grad;
  Rng unused_rng(0);
  StageFeatures out;
  out.stages = {"flow", "mod1", "mod2", "mod3", "Z"};
  out.data.resize(out.stages.size());
  out.cols.resize(out.stages.size(), 0);
  out.labels = data.labels;

  std::vector<std::size_t> idx;
  for (std::size_t at = 0; at < data.n_trials; at += chunk) {
    const std::size_t take = std::min(chunk, data.n_trials - at);
    idx.clear();
    for (std::size_t i = 0; i < take; ++i) idx.push_back(at + i);
    auto x = detail::gather_batch<T>(data, idx, nullptr);
    ForwardTrace<T> trace;
    forward(x, params, false, unused_rng, &trace);

    const Tensor<T>* stages[5] = {&trace.x_flow, &trace.x_mod[0],
                                  &trace.x_mod[1], &trace.x_mod[2],
                                  &trace.fused};
    for (std::size_t s = 0; s < 5; ++s) {
      const auto& t = *stages[s];
      const std::size_t width = t.size() / take;
      out.cols[s] = width;
      for (std::size_t v = 0; v < t.size(); ++v)
        out.data[s].push_back(static_cast<double>(t.values()[v]));
    }
  }

  for (std::size_t s = 0; s < out.stages.size(); ++s)
    out.fisher[out.stages[s]] =
        fisher_score(out.data[s], data.n_trials, out.cols[s], out.labels);
  return out;
}

/// One CSV per stage: rows = trials, feature columns, final column = label.
inline void write_stage_features_csv(const StageFeatures& features,
                                     const std::filesystem::path& dir) {
  for (std::size_t s = 0; s < features.stages.size(); ++s) {
    const std::size_t rows = features.labels.size();
    const std::size_t cols = features.cols[s];
    std::vector<double> with_label(rows * (cols + 1));
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(features.data[s].begin() + r * cols,
                features.data[s].begin() + (r + 1) * cols,
                with_label.begin() + r * (cols + 1));
      with_label[r * (cols + 1) + cols] =
          static_cast<double>(features.labels[r]);
    }
    write_matrix_csv(dir / ("features_" + features.stages[s] + ".csv"),
                     with_label, rows, cols + 1);
  }
}

}  // namespace staflow
