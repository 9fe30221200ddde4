#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "staflow/eeg.hpp"

namespace staflow {

struct SynthClassSpec {
  std::vector<std::size_t> channels;  // channels whose rhythm is suppressed
  double erd_depth = 0.8;             // in [0,1]
};

/// Seeded generator of motor-imagery-like trials: broadband Gaussian noise
/// plus a coherent rhythm whose amplitude drops on class-specific channels
/// during the second half of the trial.
struct SynthSpec {
  std::size_t n_classes = 2;
  std::size_t trials_per_class = 100;
  std::size_t n_channels = 8;
  double duration_s = 4.0;
  double sample_rate_hz = 250.0;
  double rhythm_hz = 10.0;
  std::vector<SynthClassSpec> classes;  // defaulted when empty
  double rhythm_amplitude_uv = 10.0;
  double noise_std_uv = 5.0;
  std::uint64_t seed = 7;

  /// Disjoint channel pairs per class: class k suppresses {2k, 2k+1}.
  static std::vector<SynthClassSpec> default_classes(std::size_t n_classes,
                                                     std::size_t n_channels,
                                                     double depth) {
    std::vector<SynthClassSpec> out(n_classes);
    for (std::size_t k = 0; k < n_classes; ++k) {
      out[k].erd_depth = depth;
      out[k].channels = {(2 * k) % n_channels, (2 * k + 1) % n_channels};
    }
    return out;
  }

  void validate() const {
    if (n_classes < 2) throw ConfigError("synth: n_classes must be >= 2");
    if (trials_per_class < 1)
      throw ConfigError("synth: trials_per_class must be >= 1");
    if (n_channels < 1) throw ConfigError("synth: n_channels must be >= 1");
    if (!(duration_s > 0)) throw ConfigError("synth: duration_s must be > 0");
    if (!(sample_rate_hz > 0))
      throw ConfigError("synth: sample_rate_hz must be > 0");
    if (!(rhythm_hz > 0 && rhythm_hz < sample_rate_hz / 2))
      throw ConfigError("synth: rhythm_hz must lie below Nyquist");
    if (!classes.empty() && classes.size() != n_classes)
      throw ConfigError("synth: class map must have one entry per class");
    for (const auto& c : classes) {
      if (c.erd_depth < 0.0 || c.erd_depth > 1.0)
        throw ConfigError("synth: erd_depth must lie in [0,1]");
      for (std::size_t ch : c.channels)
        if (ch >= n_channels)
          throw ConfigError("synth: class channel " + std::to_string(ch) +
                            " outside [0," + std::to_string(n_channels) + ")");
    }
    if (noise_std_uv < 0) throw ConfigError("synth: noise_std_uv must be >= 0");
  }
};

/// Labels are balanced by interleaving (trial i gets label i mod n_classes);
/// the output is fully determined by spec.seed.
inline TrialSet synth_generate(const SynthSpec& spec) {
  spec.validate();
  const auto classes =
      spec.classes.empty()
          ? SynthSpec::default_classes(spec.n_classes, spec.n_channels, 0.8)
          : spec.classes;

  const auto n_samples = static_cast<std::size_t>(
      std::llround(spec.duration_s * spec.sample_rate_hz));
  TrialSet set;
  set.n_trials = spec.n_classes * spec.trials_per_class;
  set.n_channels = spec.n_channels;
  set.n_samples = n_samples;
  set.sample_rate_hz = static_cast<float>(spec.sample_rate_hz);
  set.n_classes = spec.n_classes;
  set.labels.resize(set.n_trials);
  set.data.resize(set.n_trials * spec.n_channels * n_samples);

  Rng rng(spec.seed);
  std::uniform_real_distribution<double> phase_dist(0.0,
                                                    2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, spec.noise_std_uv);
  const std::size_t half = n_samples / 2;

  for (std::size_t t = 0; t < set.n_trials; ++t) {
    const int label = static_cast<int>(t % spec.n_classes);
    set.labels[t] = label;
    const auto& cls = classes[static_cast<std::size_t>(label)];
    const double phase = phase_dist(rng);
    for (std::size_t c = 0; c < spec.n_channels; ++c) {
      const bool suppressed =
          std::find(cls.channels.begin(), cls.channels.end(), c) !=
          cls.channels.end();
      float* dst = set.channel(t, c);
      for (std::size_t s = 0; s < n_samples; ++s) {
        double amp = spec.rhythm_amplitude_uv;
        if (suppressed && s >= half) amp *= (1.0 - cls.erd_depth);
        const double ts = static_cast<double>(s) / spec.sample_rate_hz;
        const double v =
            amp * std::sin(2.0 * std::numbers::pi * spec.rhythm_hz * ts +
                           phase) +
            noise(rng);
        dst[s] = static_cast<float>(v);
      }
    }
  }
  return set;
}

}  // namespace staflow
