#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "helpers.hpp"
#include "staflow/synth.hpp"
#include "staflow/train.hpp"

using staflow::ArchConfig;
using staflow::ConfusionMatrix;
using staflow::Tensor;
using staflow::TrainConfig;
using staflow::Variant;

namespace {

ArchConfig tiny_arch(std::size_t classes = 2) {
  ArchConfig cfg;
  cfg.n_channels = 4;
  cfg.n_timepoints = 64;
  cfg.state_dim = 8;
  cfg.spatial_filters = 4;
  cfg.temporal_kernel = 8;
  cfg.flow_pool_kernel = 8;
  cfg.flow_pool_stride = 4;
  cfg.pyramid_lengths = {3, 2, 1};
  cfg.gru_hidden = 4;
  cfg.mlp_hidden = {16, 8};
  cfg.dropout_encoder = 0.25;
  cfg.dropout_head = 0.1;
  cfg.n_classes = classes;
  return cfg;
}

staflow::SynthSpec tiny_synth(std::uint64_t seed) {
  staflow::SynthSpec spec;
  spec.n_classes = 2;
  spec.trials_per_class = 20;
  spec.n_channels = 4;
  spec.duration_s = 1.0;
  spec.sample_rate_hz = 64.0;
  spec.rhythm_hz = 10.0;
  spec.noise_std_uv = 2.0;
  spec.seed = seed;
  return spec;
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.arch = tiny_arch();
  cfg.batch_size = 8;
  cfg.max_epochs = 40;
  cfg.patience = 40;
  cfg.lr = 0.005;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("metric formulas on reference confusion matrices") {
  SECTION("perfect predictions") {
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 10;
    cm.at(1, 1) = 20;
    cm.at(2, 2) = 5;
    auto m = staflow::metrics_from_confusion(cm);
    REQUIRE(m.accuracy == 1.0);
    REQUIRE(m.kappa == 1.0);
    REQUIRE(m.macro_f1 == 1.0);
  }
  SECTION("constant predictor on a balanced binary set") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 50;
    cm.at(1, 0) = 50;
    auto m = staflow::metrics_from_confusion(cm);
    REQUIRE(m.accuracy == 0.5);
    REQUIRE(m.kappa == 0.0);
  }
  SECTION("diagonal confusion without all classes present is not kappa 1") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 10;  // only class 0 ever appears
    auto m = staflow::metrics_from_confusion(cm);
    REQUIRE(m.accuracy == 1.0);
    REQUIRE(m.kappa == 0.0);  // p_o == p_e == 1
  }
  SECTION("worked 2x2 example") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 45;
    cm.at(0, 1) = 5;
    cm.at(1, 0) = 15;
    cm.at(1, 1) = 35;
    auto m = staflow::metrics_from_confusion(cm);
    REQUIRE(m.accuracy == Catch::Approx(0.80));
    REQUIRE(m.kappa == Catch::Approx(0.60));
  }
}

TEST_CASE("metrics match brute-force recomputation on fuzzed predictions") {
  staflow::Rng rng(1234);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t k = 2 + rng() % 4;
    const std::size_t n = 10 + rng() % 100;
    std::vector<int> labels(n), preds(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(rng() % k);
      preds[i] = static_cast<int>(rng() % k);
    }
    auto m = staflow::metrics_from_confusion(
        staflow::confusion_from_predictions(labels, preds, k));

    // accuracy by direct counting
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (labels[i] == preds[i]) ++hits;
    REQUIRE(m.accuracy == Catch::Approx(double(hits) / double(n)));

    // kappa from per-trial marginal counts
    std::vector<double> rowc(k, 0), colc(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      rowc[static_cast<std::size_t>(labels[i])] += 1;
      colc[static_cast<std::size_t>(preds[i])] += 1;
    }
    double pe = 0;
    for (std::size_t c = 0; c < k; ++c) pe += rowc[c] * colc[c];
    pe /= double(n) * double(n);
    const double kappa =
        pe >= 1.0 ? 0.0 : (double(hits) / double(n) - pe) / (1.0 - pe);
    REQUIRE(m.kappa == Catch::Approx(kappa).margin(1e-12));

    // macro F1 per class from scratch
    double f1_sum = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const bool is_c = labels[i] == int(c), pred_c = preds[i] == int(c);
        tp += (is_c && pred_c);
        fp += (!is_c && pred_c);
        fn += (is_c && !pred_c);
      }
      const double prec = tp + fp > 0 ? tp / (tp + fp) : 0.0;
      const double rec = tp + fn > 0 ? tp / (tp + fn) : 0.0;
      f1_sum += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    }
    REQUIRE(m.macro_f1 == Catch::Approx(f1_sum / double(k)).margin(1e-12));

    // confusion matrix row sums equal per-class counts
    for (std::size_t c = 0; c < k; ++c) {
      std::size_t row_sum = 0;
      for (std::size_t p = 0; p < k; ++p) row_sum += m.confusion.at(c, p);
      REQUIRE(double(row_sum) == rowc[c]);
    }
  }
}

TEST_CASE("fisher score reference values") {
  // identical class means
  std::vector<double> same{1.0, 2.0, 1.0, 2.0};
  REQUIRE(staflow::fisher_score(same, 4, 1, {0, 0, 1, 1}) ==
          Catch::Approx(0.0).margin(1e-15));

  // well separated, almost no spread
  std::vector<double> tight{-1.0, -1.0 + 1e-9, 1.0, 1.0 - 1e-9};
  REQUIRE(staflow::fisher_score(tight, 4, 1, {0, 0, 1, 1}) > 1e6);

  // hand-computed 1-d case: S_B = 1.0, S_W = 0.01
  std::vector<double> hand{0.0, 0.1, 1.0, 1.1};
  REQUIRE(staflow::fisher_score(hand, 4, 1, {0, 0, 1, 1}) ==
          Catch::Approx(100.0).epsilon(1e-6));

  REQUIRE_THROWS_AS(staflow::fisher_score(hand, 4, 1, {0, 0, 0, 1}),
                    staflow::DataError);
}

namespace {

/// Independent enumeration oracle for the exact two-sided Wilcoxon p, built
/// on a recursive walk instead of bit masks.
double wilcoxon_p_oracle(std::vector<double> diffs) {
  std::vector<double> abs_d;
  for (double d : diffs)
    if (d != 0.0) abs_d.push_back(std::abs(d));
  const std::size_t n = abs_d.size();
  if (n == 0) return 1.0;

  // average ranks with ties
  std::vector<double> sorted = abs_d;
  std::sort(sorted.begin(), sorted.end());
  auto rank_of = [&](double v) {
    double sum = 0;
    int count = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] == v) {
        sum += double(i + 1);
        ++count;
      }
    }
    return sum / count;
  };
  std::vector<double> ranks;
  double w_plus = 0, total = 0;
  std::size_t j = 0;
  for (double d : diffs) {
    if (d == 0.0) continue;
    const double r = rank_of(std::abs(d));
    ranks.push_back(r);
    total += r;
    if (d > 0) w_plus += r;
    ++j;
  }
  const double w_low = std::min(w_plus, total - w_plus);
  const double w_high = total - w_low;

  std::size_t c_low = 0, c_high = 0, leaves = 0;
  std::function<void(std::size_t, double)> walk = [&](std::size_t at, double w) {
    if (at == ranks.size()) {
      ++leaves;
      if (w <= w_low + 1e-9) ++c_low;
      if (w >= w_high - 1e-9) ++c_high;
      return;
    }
    walk(at + 1, w);
    walk(at + 1, w + ranks[at]);
  };
  walk(0, 0.0);
  return std::min(1.0, double(c_low + c_high) / double(leaves));
}

}  // namespace

TEST_CASE("wilcoxon reference cases") {
  SECTION("nine positive differences") {
    std::vector<double> a(9), b(9, 0.0);
    for (std::size_t i = 0; i < 9; ++i) a[i] = double(i + 1);
    auto r = staflow::wilcoxon_signed_rank(a, b);
    REQUIRE(r.p_value == Catch::Approx(0.00390625).margin(1e-12));
    REQUIRE_FALSE(r.all_zero);
  }
  SECTION("identical samples") {
    std::vector<double> a{1, 2, 3}, b{1, 2, 3};
    auto r = staflow::wilcoxon_signed_rank(a, b);
    REQUIRE(r.p_value == 1.0);
    REQUIRE(r.all_zero);
  }
  SECTION("one up one down") {
    std::vector<double> a{1.0, -1.0}, b{0.0, 0.0};
    auto r = staflow::wilcoxon_signed_rank(a, b);
    REQUIRE(r.p_value == 1.0);
  }
}

TEST_CASE("exact wilcoxon equals independent enumeration for n <= 12") {
  staflow::Rng rng(55);
  for (int rep = 0; rep < 60; ++rep) {
    const std::size_t n = 1 + rng() % 12;
    std::vector<double> a(n), b(n, 0.0);
    std::uniform_int_distribution<int> d(-4, 4);
    for (auto& v : a) v = double(d(rng));
    const double expect = wilcoxon_p_oracle(a);
    bool all_zero = true;
    for (double v : a) all_zero = all_zero && v == 0.0;
    auto r = staflow::wilcoxon_signed_rank(a, b);
    if (all_zero) {
      REQUIRE(r.all_zero);
      REQUIRE(r.p_value == 1.0);
    } else {
      REQUIRE(r.p_value == Catch::Approx(expect).margin(1e-12));
    }
  }
}

TEST_CASE("exact wilcoxon p is monotone in |W+ - W-| without ties") {
  // all sign patterns over distinct magnitudes 1..8
  std::map<double, std::vector<double>> p_by_gap;
  for (std::uint32_t mask = 0; mask < 256; ++mask) {
    std::vector<double> a(8), b(8, 0.0);
    double w_plus = 0, w_minus = 0;
    for (int i = 0; i < 8; ++i) {
      const bool pos = mask & (1u << i);
      a[i] = (pos ? 1.0 : -1.0) * double(i + 1);
      (pos ? w_plus : w_minus) += double(i + 1);
    }
    auto r = staflow::wilcoxon_signed_rank(a, b);
    p_by_gap[std::abs(w_plus - w_minus)].push_back(r.p_value);
  }
  double prev_gap = -1, prev_p = 2.0;
  for (const auto& [gap, ps] : p_by_gap) {
    // same gap, same p; larger gap, smaller or equal p
    for (double p : ps) REQUIRE(p == Catch::Approx(ps.front()).margin(1e-12));
    if (prev_gap >= 0) REQUIRE(ps.front() <= prev_p + 1e-12);
    prev_gap = gap;
    prev_p = ps.front();
  }
}

TEST_CASE("adam steps") {
  SECTION("zero gradient leaves parameters untouched") {
    auto t = Tensor<float>::from_vector({1.0f, -2.0f}, {2}, true);
    t.grad();  // allocate zero grads
    std::vector<staflow::NamedParam<float>> params{{"w", t}};
    staflow::AdamState<float> state;
    TrainConfig cfg;
    staflow::adam_step(params, state, cfg);
    REQUIRE(t.values() == std::vector<float>{1.0f, -2.0f});
    REQUIRE(state.step == 1);
  }
  SECTION("first step is a near-sign step of size lr") {
    auto t = Tensor<double>::from_vector({0.0, 0.0}, {2}, true);
    t.grad() = {0.5, -3.0};
    std::vector<staflow::NamedParam<double>> params{{"w", t}};
    staflow::AdamState<double> state;
    TrainConfig cfg;  // lr 0.001
    staflow::adam_step(params, state, cfg);
    REQUIRE(t.values()[0] == Catch::Approx(-0.001).epsilon(1e-4));
    REQUIRE(t.values()[1] == Catch::Approx(0.001).epsilon(1e-4));
  }
  SECTION("matches an independent scalar simulation on f(x) = x^2") {
    auto t = Tensor<double>::from_vector({1.0}, {1}, true);
    std::vector<staflow::NamedParam<double>> params{{"theta", t}};
    staflow::AdamState<double> state;
    TrainConfig cfg;
    cfg.lr = 0.1;

    // the oracle shows |theta| shrinking monotonically until the iterate
    // first crosses zero, then oscillating close to the optimum
    double sim_theta = 1.0, sim_m = 0.0, sim_v = 0.0;
    double prev_abs = 1.0;
    bool crossed = false;
    for (int step = 1; step <= 50; ++step) {
      const double g = 2.0 * t.values()[0];
      t.zero_grad();
      t.grad()[0] = g;
      staflow::adam_step(params, state, cfg);

      const double sim_g = 2.0 * sim_theta;
      sim_m = 0.9 * sim_m + 0.1 * sim_g;
      sim_v = 0.999 * sim_v + 0.001 * sim_g * sim_g;
      const double m_hat = sim_m / (1.0 - std::pow(0.9, step));
      const double v_hat = sim_v / (1.0 - std::pow(0.999, step));
      sim_theta -= 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);

      REQUIRE(t.values()[0] == Catch::Approx(sim_theta).margin(1e-12));
      crossed = crossed || t.values()[0] <= 0.0;
      if (!crossed) {
        REQUIRE(std::abs(t.values()[0]) <= prev_abs + 1e-12);
        prev_abs = std::abs(t.values()[0]);
      }
      REQUIRE(std::abs(t.values()[0]) < 1.0);
    }
    REQUIRE(std::abs(t.values()[0]) < 0.5);
  }
  SECTION("non-finite gradients abort with the parameter name") {
    auto t = Tensor<float>::from_vector({1.0f}, {1}, true);
    t.grad()[0] = std::numeric_limits<float>::quiet_NaN();
    std::vector<staflow::NamedParam<float>> params{{"mlp.w1", t}};
    staflow::AdamState<float> state;
    TrainConfig cfg;
    REQUIRE_THROWS_WITH(staflow::adam_step(params, state, cfg),
                        Catch::Matchers::ContainsSubstring("mlp.w1"));
  }
}

TEST_CASE("train config validation collects all problems") {
  TrainConfig cfg;
  cfg.arch = tiny_arch();
  cfg.patience = 0;
  cfg.val_fraction = 1.5;
  auto errs = cfg.problems();
  REQUIRE(errs.size() >= 2);
  REQUIRE_THROWS_AS(cfg.validate(), staflow::ConfigError);
}

TEST_CASE("training is deterministic and early stopping returns the best") {
  auto data = staflow::synth_generate(tiny_synth(11));
  auto cfg = tiny_train_config();
  cfg.max_epochs = 6;
  cfg.patience = 6;

  auto r1 = staflow::train_model<float>(data, cfg);
  auto r2 = staflow::train_model<float>(data, cfg);
  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t e = 0; e < r1.history.size(); ++e) {
    REQUIRE(std::memcmp(&r1.history[e].train_loss, &r2.history[e].train_loss,
                        sizeof(double)) == 0);
    REQUIRE(std::memcmp(&r1.history[e].val_loss, &r2.history[e].val_loss,
                        sizeof(double)) == 0);
  }
  auto p1 = r1.best_params.named_parameters();
  auto p2 = r2.best_params.named_parameters();
  for (std::size_t i = 0; i < p1.size(); ++i)
    REQUIRE(std::memcmp(p1[i].tensor.data(), p2[i].tensor.data(),
                        p1[i].tensor.size() * sizeof(float)) == 0);

  double min_val = 1e300;
  for (const auto& e : r1.history) min_val = std::min(min_val, e.val_loss);
  REQUIRE(r1.best_val_loss == min_val);
  REQUIRE(r1.best_epoch >= 1);
  REQUIRE(r1.history[r1.best_epoch - 1].val_loss == min_val);
}

TEST_CASE("training rejects degenerate setups") {
  auto data = staflow::synth_generate(tiny_synth(11));
  auto cfg = tiny_train_config();

  SECTION("patience zero") {
    cfg.patience = 0;
    REQUIRE_THROWS_AS(staflow::train_model<float>(data, cfg),
                      staflow::ConfigError);
  }
  SECTION("batch larger than the training set") {
    cfg.batch_size = 1000;
    REQUIRE_THROWS_AS(staflow::train_model<float>(data, cfg),
                      staflow::ConfigError);
  }
  SECTION("single-class data") {
    auto solo = data;
    for (auto& l : solo.labels) l = 0;
    REQUIRE_THROWS_AS(staflow::train_model<float>(solo, cfg),
                      staflow::DataError);
  }
}

TEST_CASE("tiny synthetic task is learnable") {
  auto train = staflow::synth_generate(tiny_synth(11));
  auto test = staflow::synth_generate(tiny_synth(12));
  auto cfg = tiny_train_config();

  auto result = staflow::train_model<float>(train, cfg);
  auto metrics = staflow::evaluate(result.best_params, test);
  INFO("test accuracy " << metrics.accuracy);
  REQUIRE(metrics.accuracy >= 0.8);
}

TEST_CASE("multi-seed aggregation") {
  auto train = staflow::synth_generate(tiny_synth(21));
  auto test = staflow::synth_generate(tiny_synth(22));
  auto cfg = tiny_train_config();
  cfg.max_epochs = 5;
  cfg.patience = 5;

  SECTION("repeated identical seed has zero spread") {
    auto res =
        staflow::multi_seed_run<float>(train, test, cfg, {7, 7, 7});
    REQUIRE(res.report.acc_std == 0.0);
    REQUIRE(res.report.per_seed.size() == 3);
  }
  SECTION("mean is the arithmetic mean and report is reproducible") {
    auto res = staflow::multi_seed_run<float>(train, test, cfg, {1, 2});
    double mean = 0;
    for (const auto& s : res.report.per_seed) mean += s.metrics.accuracy;
    mean /= 2.0;
    REQUIRE(res.report.acc_mean == Catch::Approx(mean).margin(1e-15));

    auto res2 = staflow::multi_seed_run<float>(train, test, cfg, {1, 2});
    REQUIRE(res.report.to_json().dump() == res2.report.to_json().dump());
  }
}

TEST_CASE("stage feature export shapes and fisher map") {
  ArchConfig cfg;  // defaults: D=80, T=29, pyramid 16/4/1
  cfg.n_classes = 2;
  cfg.n_channels = 8;
  staflow::Rng rng(5);
  auto params = staflow::init_params<float>(cfg, rng);

  staflow::TrialSet data;
  data.n_trials = 8;
  data.n_channels = 8;
  data.n_samples = 1000;
  data.sample_rate_hz = 250;
  data.n_classes = 2;
  data.labels = {0, 1, 0, 1, 0, 1, 0, 1};
  staflow::Rng drng(3);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  data.data.resize(8 * 8 * 1000);
  for (auto& v : data.data) v = dist(drng);

  auto features = staflow::export_stage_features(params, data);
  REQUIRE(features.stages ==
          std::vector<std::string>{"flow", "mod1", "mod2", "mod3", "Z"});
  REQUIRE(features.cols[0] == 80 * 29);
  REQUIRE(features.cols[1] == 80 * 16);
  REQUIRE(features.cols[2] == 80 * 4);
  REQUIRE(features.cols[3] == 80 * 1);
  REQUIRE(features.cols[4] == 80 * 21);
  for (std::size_t s = 0; s < 5; ++s)
    REQUIRE(features.data[s].size() == 8 * features.cols[s]);
  REQUIRE(features.fisher.size() == 5);

  testutil::TempDir dir("stages");
  staflow::write_stage_features_csv(features, dir.path());
  auto z = staflow::read_matrix_csv(dir.path() / "features_Z.csv");
  REQUIRE(z.rows == 8);
  REQUIRE(z.cols == 80 * 21 + 1);
  for (std::size_t r = 0; r < 8; ++r)
    REQUIRE(z.data[r * z.cols + z.cols - 1] == double(data.labels[r]));
}
