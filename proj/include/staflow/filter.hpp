#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "staflow/common.hpp"

namespace staflow {

/// Butterworth bandpass parameters; realized as cascaded biquads designed
/// via the bilinear transform with frequency pre-warping.
struct FilterSpec {
  int order = 5;
  double low_hz = 4.0;
  double high_hz = 40.0;

  void validate(double fs) const {
    if (order < 1) throw ConfigError("filter order must be >= 1");
    if (!(low_hz > 0.0 && low_hz < high_hz))
      throw ConfigError("filter band requires 0 < low_hz < high_hz");
    if (!(high_hz < fs / 2.0))
      throw ConfigError("filter high_hz = " + std::to_string(high_hz) +
                        " must stay below the Nyquist frequency " +
                        std::to_string(fs / 2.0));
  }
};

/// Second-order section with a0 normalized to 1.
struct Biquad {
  double b0, b1, b2;
  double a1, a2;
};

namespace detail {

inline double prewarp(double hz, double fs) {
  return 2.0 * fs * std::tan(std::numbers::pi * hz / fs);
}

}  // namespace detail

/// Designs an order-N analog Butterworth prototype, transforms it to a
/// bandpass (2N poles), maps through the bilinear transform and groups the
/// result into N stable biquads, each carrying one zero at z=1 and one at
/// z=-1.
inline std::vector<Biquad> design_butterworth_bandpass(const FilterSpec& spec,
                                                       double fs) {
  spec.validate(fs);
  using cplx = std::complex<double>;
  const int n = spec.order;
  const double fs2 = 2.0 * fs;
  const double wl = detail::prewarp(spec.low_hz, fs);
  const double wh = detail::prewarp(spec.high_hz, fs);
  const double bw = wh - wl;
  const double w0 = std::sqrt(wl * wh);

  // lowpass prototype poles on the left unit semicircle
  std::vector<cplx> proto;
  for (int k = 1; k <= n; ++k) {
    const double theta =
        std::numbers::pi * (2.0 * k + n - 1.0) / (2.0 * n);
    proto.emplace_back(std::cos(theta), std::sin(theta));
  }

  // lowpass -> bandpass: each pole splits into two
  std::vector<cplx> poles;
  for (const cplx& p : proto) {
    const cplx scaled = p * (bw / 2.0);
    const cplx root = std::sqrt(scaled * scaled - cplx(w0 * w0, 0.0));
    poles.push_back(scaled + root);
    poles.push_back(scaled - root);
  }

  // bilinear transform; the N zeros at s=0 land on z=1, the N zeros at
  // infinity on z=-1
  std::vector<cplx> zpoles;
  cplx denom(1.0, 0.0);
  for (const cplx& p : poles) {
    zpoles.push_back((cplx(fs2, 0.0) + p) / (cplx(fs2, 0.0) - p));
    denom *= (cplx(fs2, 0.0) - p);
  }
  // overall gain bw^n * fs2^n / prod(fs2 - p); conjugate pairing makes the
  // product real and positive
  if (std::abs(denom.imag()) > 1e-6 * std::abs(denom.real()) ||
      denom.real() <= 0.0)
    throw NumericalError("butterworth design gain did not reduce to a real");
  const double k_total = std::pow(bw, n) * std::pow(fs2, n) / denom.real();

  // pair conjugate poles into sections; real poles pair with each other
  std::vector<cplx> reps;
  std::vector<double> reals;
  for (const cplx& p : zpoles) {
    if (std::abs(p.imag()) <= 1e-10 * std::max(1.0, std::abs(p))) {
      reals.push_back(p.real());
    } else if (p.imag() > 0.0) {
      reps.push_back(p);
    }
  }
  if (reals.size() % 2 != 0)
    throw NumericalError("butterworth design produced an odd real pole count");

  std::sort(reps.begin(), reps.end(), [](const cplx& a, const cplx& b) {
    const double ma = std::abs(a), mb = std::abs(b);
    if (ma != mb) return ma > mb;
    return a.real() < b.real();
  });
  std::sort(reals.begin(), reals.end());

  std::vector<Biquad> sections;
  for (const cplx& p : reps) {
    Biquad s{};
    s.a1 = -2.0 * p.real();
    s.a2 = std::norm(p);
    sections.push_back(s);
  }
  for (std::size_t i = 0; i + 1 < reals.size(); i += 2) {
    Biquad s{};
    s.a1 = -(reals[i] + reals[i + 1]);
    s.a2 = reals[i] * reals[i + 1];
    sections.push_back(s);
  }
  if (sections.size() != static_cast<std::size_t>(n))
    throw NumericalError("butterworth design produced " +
                         std::to_string(sections.size()) +
                         " sections, expected " + std::to_string(n));

  // numerator (z-1)(z+1) = z^2 - 1 per section, gain spread evenly
  const double g = std::pow(k_total, 1.0 / n);
  for (auto& s : sections) {
    s.b0 = g;
    s.b1 = 0.0;
    s.b2 = -g;
  }
  return sections;
}

/// Complex frequency response of the cascade at `hz`.
inline std::complex<double> cascade_response(const std::vector<Biquad>& sos,
                                             double hz, double fs) {
  using cplx = std::complex<double>;
  const double w = 2.0 * std::numbers::pi * hz / fs;
  const cplx e1 = std::polar(1.0, -w);
  const cplx e2 = std::polar(1.0, -2.0 * w);
  cplx h(1.0, 0.0);
  for (const auto& s : sos) {
    h *= (s.b0 + s.b1 * e1 + s.b2 * e2) / (1.0 + s.a1 * e1 + s.a2 * e2);
  }
  return h;
}

inline double cascade_gain(const std::vector<Biquad>& sos, double hz,
                           double fs) {
  return std::abs(cascade_response(sos, hz, fs));
}

/// Analog Butterworth bandpass magnitude evaluated at the pre-warped
/// frequency; the bilinear design matches this exactly.
inline double butterworth_bandpass_gain_analytic(const FilterSpec& spec,
                                                 double hz, double fs) {
  const double wa = detail::prewarp(hz, fs);
  const double wl = detail::prewarp(spec.low_hz, fs);
  const double wh = detail::prewarp(spec.high_hz, fs);
  const double bw = wh - wl;
  const double w0 = std::sqrt(wl * wh);
  const double x = (wa * wa - w0 * w0) / (bw * wa);
  return 1.0 / std::sqrt(1.0 + std::pow(x, 2.0 * spec.order));
}

/// Runs the cascade over a signal with zero initial conditions
/// (direct-form transposed II per section).
inline void sosfilt_inplace(const std::vector<Biquad>& sos, double* x,
                            std::size_t n) {
  for (const auto& s : sos) {
    double z1 = 0.0, z2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double in = x[i];
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      x[i] = out;
    }
  }
}

/// Forward-backward filtering: zero phase distortion, squared magnitude
/// response (doubling the effective order). Initial conditions are zero, so
/// edge transients remain.
inline void sosfiltfilt_inplace(const std::vector<Biquad>& sos, double* x,
                                std::size_t n) {
  sosfilt_inplace(sos, x, n);
  std::reverse(x, x + n);
  sosfilt_inplace(sos, x, n);
  std::reverse(x, x + n);
}

}  // namespace staflow
