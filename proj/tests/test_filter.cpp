#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "staflow/filter.hpp"

using staflow::Biquad;
using staflow::FilterSpec;

namespace {

constexpr double kFs = 250.0;

/// DFT of a finite signal at one frequency; the independent gain oracle.
std::complex<double> dft_at(const std::vector<double>& x, double hz,
                            double fs) {
  std::complex<double> acc(0.0, 0.0);
  for (std::size_t n = 0; n < x.size(); ++n) {
    const double w = 2.0 * std::numbers::pi * hz * double(n) / fs;
    acc += x[n] * std::complex<double>(std::cos(w), -std::sin(w));
  }
  return acc;
}

/// Gain measured from the impulse response, independent of the coefficient
/// algebra used by cascade_gain.
double impulse_gain(const std::vector<Biquad>& sos, double hz, double fs,
                    std::size_t len = 8192) {
  std::vector<double> h(len, 0.0);
  h[0] = 1.0;
  staflow::sosfilt_inplace(sos, h.data(), h.size());
  return std::abs(dft_at(h, hz, fs));
}

std::vector<double> sine(double hz, double fs, double seconds,
                         double amp = 1.0, double phase = 0.0) {
  const auto n = static_cast<std::size_t>(seconds * fs);
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i)
    x[i] = amp * std::sin(2.0 * std::numbers::pi * hz * double(i) / fs + phase);
  return x;
}

}  // namespace

TEST_CASE("butterworth design validates its band") {
  FilterSpec bad;
  bad.high_hz = 130.0;  // over Nyquist at 250 Hz
  REQUIRE_THROWS_AS(staflow::design_butterworth_bandpass(bad, kFs),
                    staflow::ConfigError);
  FilterSpec swapped;
  swapped.low_hz = 50;
  swapped.high_hz = 10;
  REQUIRE_THROWS_AS(staflow::design_butterworth_bandpass(swapped, kFs),
                    staflow::ConfigError);
}

TEST_CASE("cascade is stable and has five sections at order five") {
  const auto sos = staflow::design_butterworth_bandpass(FilterSpec{}, kFs);
  REQUIRE(sos.size() == 5);
  for (const auto& s : sos) {
    // poles inside the unit circle: |a2| < 1 and |a1| < 1 + a2
    REQUIRE(std::abs(s.a2) < 1.0);
    REQUIRE(std::abs(s.a1) < 1.0 + s.a2);
  }
}

TEST_CASE("designed cascade matches the analytic butterworth magnitude") {
  FilterSpec spec;
  const auto sos = staflow::design_butterworth_bandpass(spec, kFs);
  for (double hz = 1.0; hz <= 60.0; hz += 0.5) {
    const double designed = staflow::cascade_gain(sos, hz, kFs);
    const double analytic =
        staflow::butterworth_bandpass_gain_analytic(spec, hz, kFs);
    REQUIRE(designed ==
            Catch::Approx(analytic).epsilon(0.01).margin(1e-9));
  }
}

TEST_CASE("stopband and passband gains measured by the DFT oracle") {
  const auto sos = staflow::design_butterworth_bandpass(FilterSpec{}, kFs);

  const double g20 = impulse_gain(sos, 20.0, kFs);
  REQUIRE(g20 >= 0.95);
  REQUIRE(g20 <= 1.05);

  const double g1 = impulse_gain(sos, 1.0, kFs);
  REQUIRE(20.0 * std::log10(g1) <= -40.0);

  const double g60 = impulse_gain(sos, 60.0, kFs);
  REQUIRE(20.0 * std::log10(g60) <= -10.0);
}

TEST_CASE("DC input decays below 1e-3 after the 2 s transient") {
  const auto sos = staflow::design_butterworth_bandpass(FilterSpec{}, kFs);
  std::vector<double> x(static_cast<std::size_t>(6 * kFs), 1.0);
  staflow::sosfilt_inplace(sos, x.data(), x.size());
  for (std::size_t i = static_cast<std::size_t>(2 * kFs); i < x.size(); ++i)
    REQUIRE(std::abs(x[i]) < 1e-3);
}

TEST_CASE("20 Hz sine passes at close to unit amplitude") {
  const auto sos = staflow::design_butterworth_bandpass(FilterSpec{}, kFs);
  auto x = sine(20.0, kFs, 10.0);
  staflow::sosfilt_inplace(sos, x.data(), x.size());
  double peak = 0.0;
  for (std::size_t i = static_cast<std::size_t>(5 * kFs);
       i < static_cast<std::size_t>(9 * kFs); ++i)
    peak = std::max(peak, std::abs(x[i]));
  REQUIRE(peak >= 0.95);
  REQUIRE(peak <= 1.05);
}

TEST_CASE("filtering is linear in the input") {
  const auto sos = staflow::design_butterworth_bandpass(FilterSpec{}, kFs);
  staflow::Rng rng(4);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> x(1000), y(1000);
  for (auto& v : x) v = dist(rng);
  for (auto& v : y) v = dist(rng);
  const double a = 1.3, b = -0.7;

  std::vector<double> combo(1000), fx = x, fy = y;
  for (std::size_t i = 0; i < 1000; ++i) combo[i] = a * x[i] + b * y[i];
  staflow::sosfilt_inplace(sos, combo.data(), combo.size());
  staflow::sosfilt_inplace(sos, fx.data(), fx.size());
  staflow::sosfilt_inplace(sos, fy.data(), fy.size());
  for (std::size_t i = 0; i < 1000; ++i)
    REQUIRE(combo[i] == Catch::Approx(a * fx[i] + b * fy[i]).margin(1e-6));
}

TEST_CASE("zero-phase filtering leaves a band-centered sine unshifted") {
  const auto sos = staflow::design_butterworth_bandpass(FilterSpec{}, kFs);
  auto x = sine(13.0, kFs, 8.0);
  auto y = x;
  staflow::sosfiltfilt_inplace(sos, y.data(), y.size());

  // cross-correlation over the steady-state middle, lags -5..5
  const std::size_t lo = static_cast<std::size_t>(2 * kFs);
  const std::size_t hi = static_cast<std::size_t>(6 * kFs);
  int best_lag = -99;
  double best = -1e300;
  for (int lag = -5; lag <= 5; ++lag) {
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i)
      acc += x[i] * y[static_cast<std::size_t>(long(i) + lag)];
    if (acc > best) {
      best = acc;
      best_lag = lag;
    }
  }
  REQUIRE(best_lag == 0);

  // forward-backward squares the magnitude response
  auto causal = sine(13.0, kFs, 8.0);
  staflow::sosfilt_inplace(sos, causal.data(), causal.size());
  double amp_ff = 0.0, amp_causal = 0.0;
  for (std::size_t i = lo; i < hi; ++i) {
    amp_ff = std::max(amp_ff, std::abs(y[i]));
    amp_causal = std::max(amp_causal, std::abs(causal[i]));
  }
  REQUIRE(amp_ff ==
          Catch::Approx(amp_causal * amp_causal).epsilon(0.02));
}
