#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "staflow/nn.hpp"
#include "staflow/tensor.hpp"

namespace staflow {

enum class Variant { Full, StateOnly, FlowOnly, RandomState, Concat };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "Full";
    case Variant::StateOnly: return "StateOnly";
    case Variant::FlowOnly: return "FlowOnly";
    case Variant::RandomState: return "RandomState";
    case Variant::Concat: return "Concat";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::Full, Variant::StateOnly, Variant::FlowOnly,
                    Variant::RandomState, Variant::Concat}) {
    if (s == variant_name(v)) return v;
  }
  throw ConfigError("unknown variant '" + s +
                    "' (expected Full|StateOnly|FlowOnly|RandomState|Concat)");
}

inline bool variant_has_state(Variant v) {
  return v == Variant::Full || v == Variant::StateOnly || v == Variant::Concat;
}
inline bool variant_has_pyramid(Variant v) { return v != Variant::StateOnly; }
inline bool variant_has_modulation(Variant v) {
  return v == Variant::Full || v == Variant::RandomState;
}

/// Architecture hyperparameters. Defaults follow the reference setup:
/// state dimension 80, temporal pyramid (16, 4, 1), flow pooling 48/32.
struct ArchConfig {
  std::size_t n_channels = 22;
  std::size_t n_timepoints = 1000;
  std::size_t state_dim = 80;        // D
  std::size_t spatial_filters = 40;  // S1
  std::size_t temporal_kernel = 32;  // K_t
  std::size_t flow_pool_kernel = 48;
  std::size_t flow_pool_stride = 32;
  std::array<std::size_t, 3> pyramid_lengths{16, 4, 1};
  std::size_t gru_hidden = 40;  // H, BiGRU output is 2H
  std::vector<std::size_t> mlp_hidden{256, 128};
  double dropout_encoder = 0.5;
  double dropout_head = 0.25;
  std::size_t n_classes = 4;
  Variant variant = Variant::Full;
  bool share_modulation = false;

  std::size_t conv_len() const {
    return n_timepoints - temporal_kernel + 1;
  }
  /// Flow sequence length T after the strided average pooling.
  std::size_t flow_len() const {
    return (conv_len() - flow_pool_kernel) / flow_pool_stride + 1;
  }
  std::size_t pyramid_sum() const {
    return pyramid_lengths[0] + pyramid_lengths[1] + pyramid_lengths[2];
  }
  /// Width of the flattened feature vector entering the classifier.
  std::size_t mlp_input_dim() const {
    switch (variant) {
      case Variant::StateOnly: return state_dim;
      case Variant::Concat: return state_dim * (pyramid_sum() + 1);
      default: return state_dim * pyramid_sum();
    }
  }

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (n_channels < 1) out.push_back("n_channels must be >= 1");
    if (state_dim < 1) out.push_back("state_dim must be >= 1");
    if (spatial_filters < 1) out.push_back("spatial_filters must be >= 1");
    if (gru_hidden < 1) out.push_back("gru_hidden must be >= 1");
    if (n_classes < 2) out.push_back("n_classes must be >= 2");
    if (temporal_kernel < 1 || temporal_kernel > n_timepoints)
      out.push_back("temporal_kernel must lie in [1, n_timepoints]");
    if (mlp_hidden.size() != 2)
      out.push_back("mlp_hidden must list exactly two hidden widths");
    for (std::size_t wdt : mlp_hidden)
      if (wdt < 1) out.push_back("mlp_hidden widths must be >= 1");
    if (dropout_encoder < 0 || dropout_encoder >= 1)
      out.push_back("dropout_encoder must lie in [0,1)");
    if (dropout_head < 0 || dropout_head >= 1)
      out.push_back("dropout_head must lie in [0,1)");
    if (!(pyramid_lengths[0] >= pyramid_lengths[1] &&
          pyramid_lengths[1] >= pyramid_lengths[2] && pyramid_lengths[2] >= 1))
      out.push_back("pyramid_lengths must be non-increasing and >= 1");
    if (variant_has_pyramid(variant) && temporal_kernel <= n_timepoints) {
      if (conv_len() < flow_pool_kernel || flow_len() < pyramid_lengths[0]) {
        const std::size_t need = temporal_kernel - 1 + flow_pool_kernel +
                                 flow_pool_stride * (pyramid_lengths[0] - 1);
        out.push_back("flow sequence length must reach pyramid level 1 (T >= " +
                      std::to_string(pyramid_lengths[0]) +
                      "); requires n_timepoints >= " + std::to_string(need) +
                      ", got " + std::to_string(n_timepoints));
      }
    }
    return out;
  }

  void validate() const {
    auto errs = problems();
    if (!errs.empty()) {
      std::string msg = "invalid architecture config:";
      for (const auto& e : errs) msg += "\n  - " + e;
      throw ConfigError(msg);
    }
  }
};

template <typename T>
struct EncoderParams {
  Tensor<T> spatial;   // [S1, 1, C, 1]
  Tensor<T> temporal;  // [D, S1, 1, K_t]
  Tensor<T> bn_gamma;
  Tensor<T> bn_beta;
  BatchNormState<T> bn_state;
};

template <typename T>
struct ModulationParams {
  Tensor<T> weight;  // [D, D]
  Tensor<T> ln_gamma;
  Tensor<T> ln_beta;
};

template <typename T>
struct SmfLevelParams {
  BiGruParams<T> gru;
  Tensor<T> proj_w;  // [D, 2H]
  Tensor<T> proj_b;
  std::optional<ModulationParams<T>> mod;  // per-level gate, if unshared
};

template <typename T>
struct MlpParams {
  Tensor<T> w1, b1, bn1_gamma, bn1_beta;
  BatchNormState<T> bn1_state;
  Tensor<T> w2, b2, bn2_gamma, bn2_beta;
  BatchNormState<T> bn2_state;
  Tensor<T> w_out, b_out;
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* data;
};

/// All learnable state of one model variant. Parameters exist only for the
/// branches the variant uses.
template <typename T>
struct StaFlowParams {
  ArchConfig config;
  std::optional<EncoderParams<T>> state_enc;
  std::optional<EncoderParams<T>> flow_enc;
  std::vector<SmfLevelParams<T>> levels;
  std::optional<ModulationParams<T>> shared_mod;
  MlpParams<T> mlp;

  /// Learnable tensors in fixed declaration order; each appears exactly once.
  std::vector<NamedParam<T>> named_parameters() {
    std::vector<NamedParam<T>> out;
    auto enc = [&out](const char* prefix, EncoderParams<T>& e) {
      out.push_back({std::string(prefix) + ".spatial", e.spatial});
      out.push_back({std::string(prefix) + ".temporal", e.temporal});
      out.push_back({std::string(prefix) + ".bn_gamma", e.bn_gamma});
      out.push_back({std::string(prefix) + ".bn_beta", e.bn_beta});
    };
    auto mod = [&out](const std::string& prefix, ModulationParams<T>& m) {
      out.push_back({prefix + ".weight", m.weight});
      out.push_back({prefix + ".ln_gamma", m.ln_gamma});
      out.push_back({prefix + ".ln_beta", m.ln_beta});
    };
    if (state_enc) enc("state_enc", *state_enc);
    if (flow_enc) enc("flow_enc", *flow_enc);
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const std::string p = "level" + std::to_string(i + 1);
      auto& lvl = levels[i];
      for (auto dir : {std::make_pair("fwd", &lvl.gru.fwd),
                       std::make_pair("bwd", &lvl.gru.bwd)}) {
        out.push_back({p + ".gru." + dir.first + ".w_ih", dir.second->w_ih});
        out.push_back({p + ".gru." + dir.first + ".w_hh", dir.second->w_hh});
        out.push_back({p + ".gru." + dir.first + ".b_ih", dir.second->b_ih});
        out.push_back({p + ".gru." + dir.first + ".b_hh", dir.second->b_hh});
      }
      out.push_back({p + ".proj_w", lvl.proj_w});
      out.push_back({p + ".proj_b", lvl.proj_b});
      if (lvl.mod) mod(p + ".mod", *lvl.mod);
    }
    if (shared_mod) mod("shared_mod", *shared_mod);
    out.push_back({"mlp.w1", mlp.w1});
    out.push_back({"mlp.b1", mlp.b1});
    out.push_back({"mlp.bn1_gamma", mlp.bn1_gamma});
    out.push_back({"mlp.bn1_beta", mlp.bn1_beta});
    out.push_back({"mlp.w2", mlp.w2});
    out.push_back({"mlp.b2", mlp.b2});
    out.push_back({"mlp.bn2_gamma", mlp.bn2_gamma});
    out.push_back({"mlp.bn2_beta", mlp.bn2_beta});
    out.push_back({"mlp.w_out", mlp.w_out});
    out.push_back({"mlp.b_out", mlp.b_out});
    return out;
  }

  /// Non-learnable running statistics, in fixed declaration order.
  std::vector<NamedBuffer<T>> named_buffers() {
    std::vector<NamedBuffer<T>> out;
    auto enc = [&out](const char* prefix, EncoderParams<T>& e) {
      out.push_back({std::string(prefix) + ".bn_mean", &e.bn_state.running_mean});
      out.push_back({std::string(prefix) + ".bn_var", &e.bn_state.running_var});
    };
    if (state_enc) enc("state_enc", *state_enc);
    if (flow_enc) enc("flow_enc", *flow_enc);
    out.push_back({"mlp.bn1_mean", &mlp.bn1_state.running_mean});
    out.push_back({"mlp.bn1_var", &mlp.bn1_state.running_var});
    out.push_back({"mlp.bn2_mean", &mlp.bn2_state.running_mean});
    out.push_back({"mlp.bn2_var", &mlp.bn2_state.running_var});
    return out;
  }

  /// Deep copy (fresh tensors and running stats), e.g. for best-epoch
  /// snapshots.
  StaFlowParams clone() {
    StaFlowParams out;
    out.config = config;
    out.state_enc = state_enc;
    out.flow_enc = flow_enc;
    out.levels = levels;
    out.shared_mod = shared_mod;
    out.mlp = mlp;
    for (auto& [name, tensor] : out.named_parameters_mutable())
      *tensor = Tensor<T>::from_vector(tensor->values(), tensor->shape(), true);
    return out;
  }

  void copy_values_from(StaFlowParams& other) {
    auto mine = named_parameters();
    auto theirs = other.named_parameters();
    for (std::size_t i = 0; i < mine.size(); ++i)
      mine[i].tensor.values() = theirs[i].tensor.values();
    auto mb = named_buffers();
    auto tb = other.named_buffers();
    for (std::size_t i = 0; i < mb.size(); ++i) *mb[i].data = *tb[i].data;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters_mutable() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto enc = [&out](const char* prefix, EncoderParams<T>& e) {
      out.push_back({std::string(prefix) + ".spatial", &e.spatial});
      out.push_back({std::string(prefix) + ".temporal", &e.temporal});
      out.push_back({std::string(prefix) + ".bn_gamma", &e.bn_gamma});
      out.push_back({std::string(prefix) + ".bn_beta", &e.bn_beta});
    };
    auto mod = [&out](const std::string& prefix, ModulationParams<T>& m) {
      out.push_back({prefix + ".weight", &m.weight});
      out.push_back({prefix + ".ln_gamma", &m.ln_gamma});
      out.push_back({prefix + ".ln_beta", &m.ln_beta});
    };
    if (state_enc) enc("state_enc", *state_enc);
    if (flow_enc) enc("flow_enc", *flow_enc);
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const std::string p = "level" + std::to_string(i + 1);
      auto& lvl = levels[i];
      for (auto dir : {std::make_pair("fwd", &lvl.gru.fwd),
                       std::make_pair("bwd", &lvl.gru.bwd)}) {
        out.push_back({p + ".gru." + dir.first + ".w_ih", &dir.second->w_ih});
        out.push_back({p + ".gru." + dir.first + ".w_hh", &dir.second->w_hh});
        out.push_back({p + ".gru." + dir.first + ".b_ih", &dir.second->b_ih});
        out.push_back({p + ".gru." + dir.first + ".b_hh", &dir.second->b_hh});
      }
      out.push_back({p + ".proj_w", &lvl.proj_w});
      out.push_back({p + ".proj_b", &lvl.proj_b});
      if (lvl.mod) mod(p + ".mod", *lvl.mod);
    }
    if (shared_mod) mod("shared_mod", *shared_mod);
    out.push_back({"mlp.w1", &mlp.w1});
    out.push_back({"mlp.b1", &mlp.b1});
    out.push_back({"mlp.bn1_gamma", &mlp.bn1_gamma});
    out.push_back({"mlp.bn1_beta", &mlp.bn1_beta});
    out.push_back({"mlp.w2", &mlp.w2});
    out.push_back({"mlp.b2", &mlp.b2});
    out.push_back({"mlp.bn2_gamma", &mlp.bn2_gamma});
    out.push_back({"mlp.bn2_beta", &mlp.bn2_beta});
    out.push_back({"mlp.w_out", &mlp.w_out});
    out.push_back({"mlp.b_out", &mlp.b_out});
    return out;
  }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
  return Tensor<T>::uniform(std::move(shape), rng, -bound, bound, true);
}

template <typename T>
EncoderParams<T> init_encoder(const ArchConfig& cfg, Rng& rng) {
  EncoderParams<T> e;
  e.spatial = kaiming_uniform<T>({cfg.spatial_filters, 1, cfg.n_channels, 1},
                                 cfg.n_channels, rng);
  e.temporal = kaiming_uniform<T>(
      {cfg.state_dim, cfg.spatial_filters, 1, cfg.temporal_kernel},
      cfg.spatial_filters * cfg.temporal_kernel, rng);
  e.bn_gamma = Tensor<T>::filled({cfg.state_dim}, T(1), true);
  e.bn_beta = Tensor<T>::zeros({cfg.state_dim}, true);
  e.bn_state = BatchNormState<T>(cfg.state_dim);
  return e;
}

template <typename T>
GruDirectionParams<T> init_gru_direction(std::size_t hidden, std::size_t din,
                                         Rng& rng) {
  const T bound = T(1) / std::sqrt(static_cast<T>(hidden));
  GruDirectionParams<T> p;
  p.w_ih = Tensor<T>::uniform({3 * hidden, din}, rng, -bound, bound, true);
  p.w_hh = Tensor<T>::uniform({3 * hidden, hidden}, rng, -bound, bound, true);
  p.b_ih = Tensor<T>::uniform({3 * hidden}, rng, -bound, bound, true);
  p.b_hh = Tensor<T>::uniform({3 * hidden}, rng, -bound, bound, true);
  return p;
}

/// Zero modulation weight: the gate starts as the identity and the module
/// learns a residual refinement.
template <typename T>
ModulationParams<T> init_modulation(std::size_t d, Rng& rng) {
  (void)rng;
  ModulationParams<T> m;
  m.weight = Tensor<T>::zeros({d, d}, true);
  m.ln_gamma = Tensor<T>::filled({d}, T(1), true);
  m.ln_beta = Tensor<T>::zeros({d}, true);
  return m;
}

}  // namespace detail

template <typename T>
StaFlowParams<T> init_params(const ArchConfig& cfg, Rng& rng) {
  cfg.validate();
  StaFlowParams<T> p;
  p.config = cfg;
  const std::size_t d = cfg.state_dim, h = cfg.gru_hidden;

  if (variant_has_state(cfg.variant))
    p.state_enc = detail::init_encoder<T>(cfg, rng);
  if (variant_has_pyramid(cfg.variant))
    p.flow_enc = detail::init_encoder<T>(cfg, rng);

  if (variant_has_pyramid(cfg.variant)) {
    const bool modulated = variant_has_modulation(cfg.variant);
    for (std::size_t i = 0; i < 3; ++i) {
      SmfLevelParams<T> lvl;
      lvl.gru.hidden = h;
      lvl.gru.fwd = detail::init_gru_direction<T>(h, d, rng);
      lvl.gru.bwd = detail::init_gru_direction<T>(h, d, rng);
      lvl.proj_w = detail::kaiming_uniform<T>({d, 2 * h}, 2 * h, rng);
      lvl.proj_b = detail::kaiming_uniform<T>({d}, 2 * h, rng);
      if (modulated && !cfg.share_modulation)
        lvl.mod = detail::init_modulation<T>(d, rng);
      p.levels.push_back(std::move(lvl));
    }
    if (modulated && cfg.share_modulation)
      p.shared_mod = detail::init_modulation<T>(d, rng);
  }

  const std::size_t f_in = cfg.mlp_input_dim();
  const std::size_t h1 = cfg.mlp_hidden[0], h2 = cfg.mlp_hidden[1];
  p.mlp.w1 = detail::kaiming_uniform<T>({h1, f_in}, f_in, rng);
  p.mlp.b1 = detail::kaiming_uniform<T>({h1}, f_in, rng);
  p.mlp.bn1_gamma = Tensor<T>::filled({h1}, T(1), true);
  p.mlp.bn1_beta = Tensor<T>::zeros({h1}, true);
  p.mlp.bn1_state = BatchNormState<T>(h1);
  p.mlp.w2 = detail::kaiming_uniform<T>({h2, h1}, h1, rng);
  p.mlp.b2 = detail::kaiming_uniform<T>({h2}, h1, rng);
  p.mlp.bn2_gamma = Tensor<T>::filled({h2}, T(1), true);
  p.mlp.bn2_beta = Tensor<T>::zeros({h2}, true);
  p.mlp.bn2_state = BatchNormState<T>(h2);
  p.mlp.w_out = detail::kaiming_uniform<T>({cfg.n_classes, h2}, h2, rng);
  p.mlp.b_out = detail::kaiming_uniform<T>({cfg.n_classes}, h2, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// First-difference along time with a zero first column:
/// out[:,:,0] = 0, out[:,:,t] = x[:,:,t] - x[:,:,t-1].
template <typename T>
Tensor<T> temporal_difference(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw ShapeError("temporal_difference: input must be [B,C,T], got " +
                     shape_str(x.shape()));
  const std::size_t rows = x.extent(0) * x.extent(1);
  const std::size_t t = x.extent(2);
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = px + r * t;
    T* dst = out.data() + r * t;
    dst[0] = T(0);
    for (std::size_t k = 1; k < t; ++k) dst[k] = src[k] - src[k - 1];
  }
  auto xn = x.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn, rows, t](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * t;
          T* dx = xn->grad.data() + r * t;
          for (std::size_t k = 1; k < t; ++k) {
            dx[k] += dy[k];
            dx[k - 1] -= dy[k];
          }
        }
      });
}

namespace detail {

template <typename T>
void check_model_input(const Tensor<T>& x, const ArchConfig& cfg) {
  if (x.rank() != 3)
    throw ShapeError("model input must be [B,C,T], got " +
                     shape_str(x.shape()));
  if (x.extent(1) != cfg.n_channels)
    throw ShapeError("model input has " + std::to_string(x.extent(1)) +
                     " channels but the parameters expect " +
                     std::to_string(cfg.n_channels));
  if (x.extent(2) != cfg.n_timepoints)
    throw ShapeError("model input has " + std::to_string(x.extent(2)) +
                     " timepoints but the parameters expect " +
                     std::to_string(cfg.n_timepoints));
}

}  // namespace detail

/// Spatial conv -> temporal conv -> BN -> ELU -> pool to one step -> dropout;
/// returns the trial-global state vector [B, D].
template <typename T>
Tensor<T> state_encoder_forward(const Tensor<T>& x, EncoderParams<T>& enc,
                                const ArchConfig& cfg, bool train, Rng& rng) {
  detail::check_model_input(x, cfg);
  const std::size_t b = x.extent(0);
  auto x4 = reshape(x, {b, 1, cfg.n_channels, cfg.n_timepoints});
  auto h = conv2d(x4, enc.spatial);   // [B, S1, 1, T_in]
  h = conv2d(h, enc.temporal);        // [B, D, 1, L]
  h = elu(batch_norm(h, enc.bn_gamma, enc.bn_beta, enc.bn_state, train));
  h = reshape(h, {b, cfg.state_dim, cfg.conv_len()});
  h = adaptive_avg_pool1d(h, 1);
  h = dropout(h, cfg.dropout_encoder, train, rng);
  return reshape(h, {b, cfg.state_dim});
}

/// Same pipeline over the time-differenced signal, but with strided average
/// pooling that keeps a temporal axis; returns [B, D, T].
template <typename T>
Tensor<T> flow_encoder_forward(const Tensor<T>& x, EncoderParams<T>& enc,
                               const ArchConfig& cfg, bool train, Rng& rng) {
  detail::check_model_input(x, cfg);
  const std::size_t b = x.extent(0);
  auto diff = temporal_difference(x);
  auto x4 = reshape(diff, {b, 1, cfg.n_channels, cfg.n_timepoints});
  auto h = conv2d(x4, enc.spatial);
  h = conv2d(h, enc.temporal);
  h = elu(batch_norm(h, enc.bn_gamma, enc.bn_beta, enc.bn_state, train));
  h = avg_pool2d(h, 1, cfg.flow_pool_kernel, 1, cfg.flow_pool_stride);
  h = dropout(h, cfg.dropout_encoder, train, rng);
  return reshape(h, {b, cfg.state_dim, cfg.flow_len()});
}

/// Modulation gate 1 + tanh(LN(W_m x_state)) per trial, [B, D].
template <typename T>
Tensor<T> modulation_gate(const Tensor<T>& x_state,
                          const ModulationParams<T>& mod) {
  auto m = tanh_act(layer_norm(linear(x_state, mod.weight), mod.ln_gamma,
                               mod.ln_beta));
  return add_scalar(m, T(1));
}

/// One pyramid level: BiGRU over time, projection back to D, adaptive pool to
/// length t_i, then (optionally) state-based gating. Returns (x_gru, x_mod).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> smf_level_forward(
    const Tensor<T>& x_prev, const Tensor<T>& x_state,
    SmfLevelParams<T>& level,
    std::type_identity_t<const ModulationParams<T>*> shared_mod,
    std::size_t t_i) {
  if (x_prev.rank() != 3)
    throw ShapeError("smf level input must be [B,D,L], got " +
                     shape_str(x_prev.shape()));
  if (x_prev.extent(2) < t_i)
    throw ShapeError("smf level input length " +
                     std::to_string(x_prev.extent(2)) +
                     " shorter than pyramid target " + std::to_string(t_i));
  auto time_major = swap_axes(x_prev, 1, 2);  // [B, L, D]
  auto g = bigru(time_major, level.gru);      // [B, L, 2H]
  auto proj = linear(g, level.proj_w, level.proj_b);
  auto x_gru = adaptive_avg_pool1d(swap_axes(proj, 1, 2), t_i);  // [B, D, t_i]

  const ModulationParams<T>* mod =
      level.mod ? &*level.mod : shared_mod;
  if (!mod) return {x_gru, x_gru};
  if (!x_state.defined())
    throw ConfigError("modulated pyramid level requires a state vector");
  auto x_mod = scale_channels(x_gru, modulation_gate(x_state, *mod));
  return {x_gru, x_mod};
}

template <typename T>
struct ForwardTrace {
  Tensor<T> x_state;             // [B, D]
  Tensor<T> x_flow;              // [B, D, T]
  std::vector<Tensor<T>> x_gru;  // per level, [B, D, T_i]
  std::vector<Tensor<T>> x_mod;  // per level, [B, D, T_i]
  Tensor<T> fused;               // Z, [B, D, T_sum]
  Tensor<T> logits;              // [B, n_classes]
};

namespace detail {

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& features, MlpParams<T>& mlp,
                      const ArchConfig& cfg, bool train, Rng& rng) {
  auto h = linear(features, mlp.w1, mlp.b1);
  h = elu(batch_norm(h, mlp.bn1_gamma, mlp.bn1_beta, mlp.bn1_state, train));
  h = dropout(h, cfg.dropout_head, train, rng);
  h = linear(h, mlp.w2, mlp.b2);
  h = elu(batch_norm(h, mlp.bn2_gamma, mlp.bn2_beta, mlp.bn2_state, train));
  h = dropout(h, cfg.dropout_head, train, rng);
  return linear(h, mlp.w_out, mlp.b_out);
}

}  // namespace detail

/// Concatenate the pyramid outputs along time and classify.
template <typename T>
Tensor<T> fuse_and_classify(const std::vector<Tensor<T>>& x_mod,
                            StaFlowParams<T>& params, bool train, Rng& rng,
                            Tensor<T>* fused_out = nullptr) {
  if (x_mod.size() != 3)
    throw UsageError("fuse_and_classify expects three pyramid levels, got " +
                     std::to_string(x_mod.size()));
  auto z = concat(x_mod, 2);  // [B, D, T_sum]
  if (fused_out) *fused_out = z;
  auto flat = reshape(z, {z.extent(0), z.extent(1) * z.extent(2)});
  return detail::mlp_forward(flat, params.mlp, params.config, train, rng);
}

/// Full variant dispatch. RandomState draws a fresh standard-normal state
/// vector per trial from `rng` on every call.
template <typename T>
Tensor<T> forward(const Tensor<T>& x, StaFlowParams<T>& params, bool train,
                  Rng& rng, ForwardTrace<T>* trace = nullptr) {
  const ArchConfig& cfg = params.config;
  detail::check_model_input(x, cfg);
  const std::size_t b = x.extent(0);

  const bool need_state = variant_has_state(cfg.variant);
  const bool need_pyramid = variant_has_pyramid(cfg.variant);
  if (need_state && !params.state_enc)
    throw ConfigError(std::string("variant ") + variant_name(cfg.variant) +
                      " requires state encoder parameters");
  if (need_pyramid && (!params.flow_enc || params.levels.size() != 3))
    throw ConfigError(std::string("variant ") + variant_name(cfg.variant) +
                      " requires flow encoder and three pyramid levels");

  Tensor<T> x_state;
  if (need_state) {
    x_state = state_encoder_forward(x, *params.state_enc, cfg, train, rng);
  } else if (cfg.variant == Variant::RandomState) {
    x_state = Tensor<T>::randn({b, cfg.state_dim}, rng);
  }

  Tensor<T> logits;
  if (cfg.variant == Variant::StateOnly) {
    logits = detail::mlp_forward(x_state, params.mlp, cfg, train, rng);
    if (trace) {
      trace->x_state = x_state;
      trace->logits = logits;
    }
    return logits;
  }

  auto x_flow = flow_encoder_forward(x, *params.flow_enc, cfg, train, rng);
  std::vector<Tensor<T>> grus, mods;
  Tensor<T> prev = x_flow;
  const ModulationParams<T>* shared =
      params.shared_mod ? &*params.shared_mod : nullptr;
  for (std::size_t i = 0; i < 3; ++i) {
    auto [g, m] = smf_level_forward(prev, x_state, params.levels[i], shared,
                                    cfg.pyramid_lengths[i]);
    grus.push_back(g);
    mods.push_back(m);
    prev = m;
  }

  Tensor<T> fused;
  if (cfg.variant == Variant::Concat) {
    fused = concat(mods, 2);  // trace keeps the plain [B, D, T_sum] pyramid
    auto state_col = reshape(x_state, {b, cfg.state_dim, 1});
    auto with_state = concat({fused, state_col}, 2);
    auto flat =
        reshape(with_state, {b, cfg.state_dim * (cfg.pyramid_sum() + 1)});
    logits = detail::mlp_forward(flat, params.mlp, cfg, train, rng);
  } else {
    logits = fuse_and_classify(mods, params, train, rng, &fused);
  }

  if (trace) {
    trace->x_state = x_state;
    trace->x_flow = x_flow;
    trace->x_gru = grus;
    trace->x_mod = mods;
    trace->fused = fused;
    trace->logits = logits;
  }
  return logits;
}

// ---------------------------------------------------------------------------
// Spatial weight export
// ---------------------------------------------------------------------------

template <typename T>
struct SpatialWeights {
  std::size_t filters = 0;
  std::size_t channels = 0;
  std::vector<T> state;  // row-major [filters, channels]; empty if no branch
  std::vector<T> flow;
};

/// Squeezes the spatial conv kernels [S1,1,C,1] to filter-by-channel
/// matrices.
template <typename T>
SpatialWeights<T> export_spatial_weights(StaFlowParams<T>& params) {
  SpatialWeights<T> out;
  out.filters = params.config.spatial_filters;
  out.channels = params.config.n_channels;
  if (params.state_enc) out.state = params.state_enc->spatial.values();
  if (params.flow_enc) out.flow = params.flow_enc->spatial.values();
  return out;
}

}  // namespace staflow
