#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "helpers.hpp"
#include "staflow/csv_io.hpp"
#include "staflow/model.hpp"

using staflow::ArchConfig;
using staflow::Shape;
using staflow::Tensor;
using staflow::Variant;

namespace {

/// Small architecture for exhaustive gradient checks.
ArchConfig tiny_config(Variant v = Variant::Full, std::size_t classes = 2) {
  ArchConfig cfg;
  cfg.n_channels = 4;
  cfg.n_timepoints = 64;
  cfg.state_dim = 4;
  cfg.spatial_filters = 3;
  cfg.temporal_kernel = 8;
  cfg.flow_pool_kernel = 8;
  cfg.flow_pool_stride = 4;
  cfg.pyramid_lengths = {3, 2, 1};
  cfg.gru_hidden = 2;
  cfg.mlp_hidden = {6, 4};
  cfg.dropout_encoder = 0.0;
  cfg.dropout_head = 0.0;
  cfg.n_classes = classes;
  cfg.variant = v;
  return cfg;
}

template <typename T>
Tensor<T> random_input(const ArchConfig& cfg, std::size_t batch,
                       std::uint64_t seed) {
  staflow::Rng rng(seed);
  return Tensor<T>::randn({batch, cfg.n_channels, cfg.n_timepoints}, rng);
}

}  // namespace

TEST_CASE("temporal difference values") {
  auto c = Tensor<double>::from_vector({5, 5, 5}, {1, 1, 3});
  auto dc = staflow::temporal_difference(c);
  REQUIRE(dc.values() == std::vector<double>{0, 0, 0});

  auto ramp = Tensor<double>::from_vector({0, 1, 2, 3}, {1, 1, 4});
  REQUIRE(staflow::temporal_difference(ramp).values() ==
          std::vector<double>{0, 1, 1, 1});

  staflow::Rng rng(8);
  auto x = Tensor<double>::randn({3, 2, 7}, rng);
  auto d = staflow::temporal_difference(x);
  for (std::size_t r = 0; r < 6; ++r) REQUIRE(d.values()[r * 7] == 0.0);

  auto xg = Tensor<double>::randn({2, 2, 5}, rng, 1.0, true);
  const std::uint64_t wseed = rng();
  auto make_loss = [&]() {
    return testutil::weighted_sum(staflow::temporal_difference(xg), wseed);
  };
  REQUIRE(testutil::max_grad_error({xg}, make_loss) < 1e-8);
}

TEST_CASE("arch config validation") {
  ArchConfig cfg = tiny_config();
  REQUIRE(cfg.problems().empty());

  cfg.n_timepoints = 12;  // too short for the pyramid
  auto errs = cfg.problems();
  REQUIRE_FALSE(errs.empty());
  REQUIRE(errs.front().find("n_timepoints") != std::string::npos);
  REQUIRE_THROWS_AS(cfg.validate(), staflow::ConfigError);

  ArchConfig defaults;
  REQUIRE(defaults.conv_len() == 969);
  REQUIRE(defaults.flow_len() == 29);
  REQUIRE(defaults.pyramid_sum() == 21);
}

TEST_CASE("encoder outputs at the reference geometry") {
  ArchConfig cfg;  // defaults: 22 channels, 1000 timepoints, D = 80
  cfg.n_classes = 4;
  staflow::Rng rng(31);
  auto params = staflow::init_params<float>(cfg, rng);

  staflow::Rng data_rng(1);
  auto x = Tensor<float>::randn({2, 22, 1000}, data_rng);
  staflow::Rng fwd_rng(2);
  staflow::NoGradGuard no_grad;

  auto xs =
      staflow::state_encoder_forward(x, *params.state_enc, cfg, false, fwd_rng);
  REQUIRE(xs.shape() == Shape{2, 80});

  auto xf =
      staflow::flow_encoder_forward(x, *params.flow_enc, cfg, false, fwd_rng);
  REQUIRE(xf.shape() == Shape{2, 80, 29});

  // all-zero input at freshly initialized parameters stays zero
  auto zeros = Tensor<float>::zeros({2, 22, 1000});
  auto zs = staflow::state_encoder_forward(zeros, *params.state_enc, cfg, false,
                                           fwd_rng);
  for (float v : zs.values()) REQUIRE(v == 0.0f);

  // constant input has a zero temporal difference, hence zero flow output
  auto constant = Tensor<float>::filled({2, 22, 1000}, 3.5f);
  auto zf = staflow::flow_encoder_forward(constant, *params.flow_enc, cfg,
                                          false, fwd_rng);
  for (float v : zf.values()) REQUIRE(v == 0.0f);

  // eval mode is pure: identical calls, identical bits
  auto again =
      staflow::state_encoder_forward(x, *params.state_enc, cfg, false, fwd_rng);
  REQUIRE(std::memcmp(again.data(), xs.data(), xs.size() * sizeof(float)) == 0);

  auto wrong = Tensor<float>::zeros({2, 21, 1000});
  REQUIRE_THROWS_AS(staflow::state_encoder_forward(wrong, *params.state_enc,
                                                   cfg, false, fwd_rng),
                    staflow::ShapeError);
}

TEST_CASE("smf level pools to the pyramid lengths and gates in (0,2)") {
  ArchConfig cfg;
  cfg.n_classes = 4;
  staflow::Rng rng(77);
  auto params = staflow::init_params<float>(cfg, rng);
  staflow::NoGradGuard no_grad;

  staflow::Rng data_rng(5);
  auto x_state = Tensor<float>::randn({3, 80}, data_rng);
  Tensor<float> prev = Tensor<float>::randn({3, 80, 29}, data_rng);
  const std::size_t expect[3] = {16, 4, 1};
  for (std::size_t i = 0; i < 3; ++i) {
    auto [g, m] = staflow::smf_level_forward(prev, x_state, params.levels[i],
                                             nullptr, cfg.pyramid_lengths[i]);
    REQUIRE(g.shape() == Shape{3, 80, expect[i]});
    REQUIRE(m.shape() == g.shape());
    // zero-initialized modulation weight collapses the gate to exactly one
    REQUIRE(std::memcmp(m.data(), g.data(), g.size() * sizeof(float)) == 0);
    prev = m;
  }

  // random modulation weights keep the gate strictly inside (0,2)
  staflow::Rng wrng(123);
  for (int rep = 0; rep < 50; ++rep) {
    staflow::ModulationParams<float> mod;
    mod.weight = Tensor<float>::randn({80, 80}, wrng);
    mod.ln_gamma = Tensor<float>::filled({80}, 1.0f);
    mod.ln_beta = Tensor<float>::zeros({80});
    auto state = Tensor<float>::randn({4, 80}, wrng, 5.0f);
    auto gate = staflow::modulation_gate(state, mod);
    for (float v : gate.values()) {
      REQUIRE(v > 0.0f);
      REQUIRE(v < 2.0f);
    }
  }

  REQUIRE_THROWS_AS(
      staflow::smf_level_forward(Tensor<float>::zeros({1, 80, 2}), x_state,
                                 params.levels[0], nullptr, 16),
      staflow::ShapeError);
}

TEST_CASE("fusion geometry and softmax normalization") {
  ArchConfig cfg;
  cfg.n_classes = 4;
  staflow::Rng rng(15);
  auto params = staflow::init_params<float>(cfg, rng);
  staflow::NoGradGuard no_grad;

  staflow::Rng data_rng(6);
  std::vector<Tensor<float>> mods{Tensor<float>::randn({2, 80, 16}, data_rng),
                                  Tensor<float>::randn({2, 80, 4}, data_rng),
                                  Tensor<float>::randn({2, 80, 1}, data_rng)};
  Tensor<float> fused;
  staflow::Rng fwd_rng(0);
  auto logits = staflow::fuse_and_classify(mods, params, false, fwd_rng, &fused);
  REQUIRE(fused.shape() == Shape{2, 80, 21});
  REQUIRE(logits.shape() == Shape{2, 4});

  for (std::size_t b = 0; b < 2; ++b) {
    double mx = -1e30;
    for (std::size_t k = 0; k < 4; ++k)
      mx = std::max(mx, double(logits.values()[b * 4 + k]));
    double denom = 0;
    for (std::size_t k = 0; k < 4; ++k)
      denom += std::exp(double(logits.values()[b * 4 + k]) - mx);
    double total = 0;
    for (std::size_t k = 0; k < 4; ++k)
      total += std::exp(double(logits.values()[b * 4 + k]) - mx) / denom;
    REQUIRE(total == Catch::Approx(1.0).epsilon(1e-10));
  }

  mods.pop_back();
  REQUIRE_THROWS_AS(
      staflow::fuse_and_classify(mods, params, false, fwd_rng),
      staflow::UsageError);
}

TEST_CASE("forward trace shape contract at the reference geometry") {
  ArchConfig cfg;
  cfg.n_classes = 4;
  staflow::Rng rng(21);
  auto params = staflow::init_params<float>(cfg, rng);
  staflow::NoGradGuard no_grad;

  auto x = random_input<float>(cfg, 2, 3);
  staflow::Rng fwd_rng(0);
  staflow::ForwardTrace<float> trace;
  auto logits = staflow::forward(x, params, false, fwd_rng, &trace);

  REQUIRE(trace.x_state.shape() == Shape{2, 80});
  REQUIRE(trace.x_flow.shape() == Shape{2, 80, 29});
  REQUIRE(trace.x_gru[0].shape() == Shape{2, 80, 16});
  REQUIRE(trace.x_gru[1].shape() == Shape{2, 80, 4});
  REQUIRE(trace.x_gru[2].shape() == Shape{2, 80, 1});
  REQUIRE(trace.fused.shape() == Shape{2, 80, 21});
  REQUIRE(logits.shape() == Shape{2, 4});
}

TEST_CASE("variant semantics") {
  const auto cfg = tiny_config();
  staflow::Rng rng(51);
  auto full = staflow::init_params<float>(cfg, rng);
  staflow::NoGradGuard no_grad;
  auto x = random_input<float>(cfg, 3, 9);

  SECTION("FlowOnly equals Full when modulation weights are zero") {
    // share every remaining parameter with the Full model
    staflow::StaFlowParams<float> flow_only;
    flow_only.config = cfg;
    flow_only.config.variant = Variant::FlowOnly;
    flow_only.flow_enc = full.flow_enc;
    flow_only.levels = full.levels;
    for (auto& lvl : flow_only.levels) lvl.mod.reset();
    flow_only.mlp = full.mlp;

    staflow::Rng r1(0), r2(0);
    auto a = staflow::forward(x, full, false, r1);
    auto b = staflow::forward(x, flow_only, false, r2);
    REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  }

  SECTION("StateOnly classifies the state vector directly") {
    auto cfg_so = tiny_config(Variant::StateOnly);
    staflow::Rng r(3);
    auto p = staflow::init_params<float>(cfg_so, r);
    REQUIRE_FALSE(p.flow_enc.has_value());
    REQUIRE(p.levels.empty());
    REQUIRE(p.mlp.w1.shape() == Shape{6, cfg_so.state_dim});
    staflow::Rng fr(0);
    auto logits = staflow::forward(x, p, false, fr);
    REQUIRE(logits.shape() == Shape{3, 2});
  }

  SECTION("RandomState redraws the state vector per forward") {
    auto cfg_rs = tiny_config(Variant::RandomState);
    staflow::Rng r(3);
    auto p = staflow::init_params<float>(cfg_rs, r);
    REQUIRE_FALSE(p.state_enc.has_value());
    // zero-initialized modulation ignores the state; give it real weights
    for (auto& lvl : p.levels)
      lvl.mod->weight = Tensor<float>::randn({cfg_rs.state_dim,
                                              cfg_rs.state_dim},
                                             r, 0.5f, true);
    staflow::Rng ra(1), rb(2);
    auto la = staflow::forward(x, p, false, ra);
    auto lb = staflow::forward(x, p, false, rb);
    bool differs = false;
    for (std::size_t i = 0; i < la.size(); ++i)
      differs = differs || la.values()[i] != lb.values()[i];
    REQUIRE(differs);
  }

  SECTION("Concat appends the state vector as one extra time column") {
    auto cfg_cc = tiny_config(Variant::Concat);
    staflow::Rng r(3);
    auto p = staflow::init_params<float>(cfg_cc, r);
    REQUIRE(p.mlp.w1.shape() ==
            Shape{6, cfg_cc.state_dim * (cfg_cc.pyramid_sum() + 1)});
    for (const auto& lvl : p.levels) REQUIRE_FALSE(lvl.mod.has_value());
    staflow::Rng fr(0);
    auto logits = staflow::forward(x, p, false, fr);
    REQUIRE(logits.shape() == Shape{3, 2});
  }

  SECTION("share_modulation uses one gate for all levels") {
    auto cfg_sh = tiny_config();
    cfg_sh.share_modulation = true;
    staflow::Rng r(3);
    auto p = staflow::init_params<float>(cfg_sh, r);
    REQUIRE(p.shared_mod.has_value());
    for (const auto& lvl : p.levels) REQUIRE_FALSE(lvl.mod.has_value());
    std::size_t shared_entries = 0;
    for (auto& np : p.named_parameters())
      if (np.name.rfind("shared_mod", 0) == 0) ++shared_entries;
    REQUIRE(shared_entries == 3);  // weight + ln_gamma + ln_beta, once
    staflow::Rng fr(0);
    auto logits = staflow::forward(x, p, false, fr);
    REQUIRE(logits.shape() == Shape{3, 2});
  }

  SECTION("variant/params mismatch is a configuration error") {
    staflow::StaFlowParams<float> broken;
    broken.config = cfg;  // Full wants both branches
    broken.mlp = full.mlp;
    staflow::Rng fr(0);
    REQUIRE_THROWS_AS(staflow::forward(x, broken, false, fr),
                      staflow::ConfigError);
  }
}

TEST_CASE("eval-mode forwards are pure and permutation-equivariant") {
  const auto cfg = tiny_config();
  staflow::Rng rng(61);
  auto params = staflow::init_params<float>(cfg, rng);
  staflow::NoGradGuard no_grad;
  auto x = random_input<float>(cfg, 5, 13);

  staflow::Rng r1(0), r2(0);
  auto a = staflow::forward(x, params, false, r1);
  auto b = staflow::forward(x, params, false, r2);
  REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);

  // reverse the batch; logits must follow the permutation bit-for-bit
  const std::size_t stride = cfg.n_channels * cfg.n_timepoints;
  std::vector<float> rev(x.size());
  for (std::size_t i = 0; i < 5; ++i)
    std::copy(x.data() + i * stride, x.data() + (i + 1) * stride,
              rev.data() + (4 - i) * stride);
  auto xr = Tensor<float>::from_vector(std::move(rev), x.shape());
  staflow::Rng r3(0);
  auto c = staflow::forward(xr, params, false, r3);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < cfg.n_classes; ++k)
      REQUIRE(c.values()[(4 - i) * cfg.n_classes + k] ==
              a.values()[i * cfg.n_classes + k]);
}

TEST_CASE("full model gradients match finite differences") {
  auto cfg = tiny_config();
  staflow::Rng rng(71);
  auto params = staflow::init_params<double>(cfg, rng);
  // check at a generic point: zero-initialized modulation weights leave the
  // layer norm at zero variance, where finite differences misbehave
  for (auto& lvl : params.levels)
    lvl.mod->weight =
        Tensor<double>::randn({cfg.state_dim, cfg.state_dim}, rng, 0.5, true);
  auto x = random_input<double>(cfg, 2, 17);

  std::vector<int> labels{0, 1};
  auto make_loss = [&]() {
    staflow::Rng fwd_rng(5);
    auto logits = staflow::forward(x, params, true, fwd_rng);
    return staflow::softmax_cross_entropy(logits, labels);
  };

  std::vector<Tensor<double>> leaves;
  for (auto& np : params.named_parameters()) leaves.push_back(np.tensor);
  // batch-norm running stats drift across evaluations; freeze them so the
  // finite-difference loss is a pure function of the parameters
  auto reset_states = [&]() {
    params.state_enc->bn_state = staflow::BatchNormState<double>(cfg.state_dim);
    params.flow_enc->bn_state = staflow::BatchNormState<double>(cfg.state_dim);
    params.mlp.bn1_state = staflow::BatchNormState<double>(cfg.mlp_hidden[0]);
    params.mlp.bn2_state = staflow::BatchNormState<double>(cfg.mlp_hidden[1]);
  };
  auto wrapped = [&]() {
    reset_states();
    return make_loss();
  };
  const double err = testutil::max_grad_error(leaves, wrapped);
  INFO("max rel grad error " << err);
  REQUIRE(err <= 1e-4);
}

TEST_CASE("spatial weight export and csv round trip") {
  ArchConfig cfg;
  cfg.n_classes = 4;
  staflow::Rng rng(81);
  auto params = staflow::init_params<float>(cfg, rng);
  auto weights = staflow::export_spatial_weights(params);
  REQUIRE(weights.filters == 40);
  REQUIRE(weights.channels == 22);
  REQUIRE(weights.state.size() == 40 * 22);
  REQUIRE(weights.flow.size() == 40 * 22);

  testutil::TempDir dir("spatial");
  std::vector<std::string> names;
  for (std::size_t c = 0; c < 22; ++c) names.push_back("ch" + std::to_string(c));
  auto path = dir.path() / "state_weights.csv";
  staflow::write_matrix_csv(path, weights.state, 40, 22, names);
  auto back = staflow::read_matrix_csv(path);
  REQUIRE(back.header == names);
  REQUIRE(back.rows == 40);
  REQUIRE(back.cols == 22);
  for (std::size_t i = 0; i < weights.state.size(); ++i) {
    const float reread = static_cast<float>(back.data[i]);
    REQUIRE(std::memcmp(&reread, &weights.state[i], sizeof(float)) == 0);
  }
}
