#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "staflow/tensor.hpp"

namespace testutil {

using staflow::Rng;
using staflow::Shape;
using staflow::Tensor;

inline Shape random_shape(Rng& rng, std::size_t min_rank, std::size_t max_rank,
                          std::size_t max_extent) {
  std::uniform_int_distribution<std::size_t> rank_dist(min_rank, max_rank);
  std::uniform_int_distribution<std::size_t> ext_dist(1, max_extent);
  Shape s(rank_dist(rng));
  for (auto& e : s) e = ext_dist(rng);
  return s;
}

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng,
                                    double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  return Tensor<double>::uniform(shape, rng, lo, hi, requires_grad);
}

/// Nudges values away from |v| < margin so finite differences never straddle
/// an activation kink.
inline void avoid_kinks(Tensor<double>& t, double margin = 1e-3) {
  for (auto& v : t.values()) {
    if (std::abs(v) < margin) v = v < 0 ? -margin : margin;
  }
}

/// Central-difference gradient check. `make_loss` must rebuild the scalar
/// loss from the current values of `inputs` and be deterministic. Returns the
/// max relative error over every coordinate of every input.
inline double max_grad_error(std::vector<Tensor<double>> inputs,
                             const std::function<Tensor<double>()>& make_loss,
                             double step = 1e-5) {
  auto loss = make_loss();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) analytic.push_back(in.grad());

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& vals = inputs[i].values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double saved = vals[j];
      vals[j] = saved + step;
      const double f_plus = make_loss().item();
      vals[j] = saved - step;
      const double f_minus = make_loss().item();
      vals[j] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic[i][j];
      const double err =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Weighted sum with fixed random weights; exercises the full Jacobian
/// rather than just the row-sum.
inline Tensor<double> weighted_sum(const Tensor<double>& x, std::uint64_t seed) {
  Rng rng(seed);
  auto w = Tensor<double>::uniform(x.shape(), rng, -1.0, 1.0);
  return staflow::sum(staflow::mul(x, w));
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0; i < 10000; ++i) {
      auto candidate = base / ("staflow_" + tag + "_" + std::to_string(i));
      std::error_code ec;
      if (std::filesystem::create_directory(candidate, ec)) {
        path_ = candidate;
        return;
      }
    }
    throw std::runtime_error("could not create temp dir for " + tag);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
