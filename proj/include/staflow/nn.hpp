#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "staflow/blas.hpp"
#include "staflow/tensor.hpp"

namespace staflow {

// ---------------------------------------------------------------------------
// Affine maps
// ---------------------------------------------------------------------------

/// Affine map along the last axis: x[...,Din] -> x W^T + b, W is [Dout,Din].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias = {}) {
  if (weight.rank() != 2)
    throw ShapeError("linear: weight must be 2-d, got " +
                     shape_str(weight.shape()));
  const std::size_t d_out = weight.extent(0);
  const std::size_t d_in = weight.extent(1);
  if (x.rank() < 1 || x.shape().back() != d_in)
    throw ShapeError("linear: input " + shape_str(x.shape()) +
                     " incompatible with weight " + shape_str(weight.shape()) +
                     " on the last axis");
  if (bias.defined() && bias.shape() != Shape{d_out})
    throw ShapeError("linear: bias must have shape (" + std::to_string(d_out) +
                     "), got " + shape_str(bias.shape()));

  const std::size_t rows = x.size() / d_in;
  std::vector<T> out(rows * d_out);
  detail::dot_gemm_nt(static_cast<int>(rows), static_cast<int>(d_out),
                      static_cast<int>(d_in), x.data(), weight.data(),
                      out.data());
  if (bias.defined()) {
    const T* pb = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
      T* row = out.data() + r * d_out;
      for (std::size_t j = 0; j < d_out; ++j) row[j] += pb[j];
    }
  }

  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  auto xn = x.impl;
  auto wn = weight.impl;
  auto bn = bias.defined() ? bias.impl : nullptr;
  std::vector<Tensor<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), std::move(parents),
      [xn, wn, bn, rows, d_in, d_out](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        if (xn->requires_grad) {
          if (xn->grad.size() != xn->values.size())
            xn->grad.assign(xn->values.size(), T(0));
          detail::gemm<T>(false, false, static_cast<int>(rows),
                          static_cast<int>(d_in), static_cast<int>(d_out),
                          T(1), dy, static_cast<int>(d_out), wn->values.data(),
                          static_cast<int>(d_in), T(1), xn->grad.data(),
                          static_cast<int>(d_in));
        }
        if (wn->requires_grad) {
          if (wn->grad.size() != wn->values.size())
            wn->grad.assign(wn->values.size(), T(0));
          detail::gemm<T>(true, false, static_cast<int>(d_out),
                          static_cast<int>(d_in), static_cast<int>(rows), T(1),
                          dy, static_cast<int>(d_out), xn->values.data(),
                          static_cast<int>(d_in), T(1), wn->grad.data(),
                          static_cast<int>(d_in));
        }
        if (bn && bn->requires_grad) {
          if (bn->grad.size() != bn->values.size())
            bn->grad.assign(bn->values.size(), T(0));
          for (std::size_t r = 0; r < rows; ++r) {
            const T* row = dy + r * d_out;
            for (std::size_t j = 0; j < d_out; ++j) bn->grad[j] += row[j];
          }
        }
      });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects 2-d operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k)
    throw ShapeError("matmul: inner dimensions disagree: " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(m * n);
  detail::gemm<T>(false, false, static_cast<int>(m), static_cast<int>(n),
                  static_cast<int>(k), T(1), a.data(), static_cast<int>(k),
                  b.data(), static_cast<int>(n), T(0), out.data(),
                  static_cast<int>(n));
  auto an = a.impl;
  auto bn = b.impl;
  return detail::make_result<T>(
      Shape{m, n}, std::move(out), {a, b},
      [an, bn, m, n, k](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        if (an->requires_grad) {
          if (an->grad.size() != an->values.size())
            an->grad.assign(an->values.size(), T(0));
          detail::gemm<T>(false, true, static_cast<int>(m),
                          static_cast<int>(k), static_cast<int>(n), T(1), dy,
                          static_cast<int>(n), bn->values.data(),
                          static_cast<int>(n), T(1), an->grad.data(),
                          static_cast<int>(k));
        }
        if (bn->requires_grad) {
          if (bn->grad.size() != bn->values.size())
            bn->grad.assign(bn->values.size(), T(0));
          detail::gemm<T>(true, false, static_cast<int>(k),
                          static_cast<int>(n), static_cast<int>(m), T(1),
                          an->values.data(), static_cast<int>(k), dy,
                          static_cast<int>(n), T(1), bn->grad.data(),
                          static_cast<int>(n));
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

// M[(ci*kh+u)*kw+v, ho*wo_len+wo] = x[ci, ho+u, wo+v]; matches the row-major
// flattening of a [Cout,Cin,kh,kw] kernel.
template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t ho, std::size_t wo,
            T* m) {
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t u = 0; u < kh; ++u)
      for (std::size_t v = 0; v < kw; ++v) {
        T* row = m + ((ci * kh + u) * kw + v) * (ho * wo);
        for (std::size_t i = 0; i < ho; ++i) {
          const T* src = x + ci * h * w + (i + u) * w + v;
          std::copy(src, src + wo, row + i * wo);
        }
      }
}

template <typename T>
void col2im_add(const T* m, std::size_t cin, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, std::size_t ho, std::size_t wo,
                T* x) {
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t u = 0; u < kh; ++u)
      for (std::size_t v = 0; v < kw; ++v) {
        const T* row = m + ((ci * kh + u) * kw + v) * (ho * wo);
        for (std::size_t i = 0; i < ho; ++i) {
          T* dst = x + ci * h * w + (i + u) * w + v;
          const T* src = row + i * wo;
          for (std::size_t j = 0; j < wo; ++j) dst[j] += src[j];
        }
      }
}

}  // namespace detail

/// Valid (no padding, stride 1) cross-correlation of [B,Cin,H,W] with a
/// [Cout,Cin,kh,kw] kernel. Samples are processed independently, so outputs
/// do not depend on batch order or the thread budget.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias = {}) {
  if (x.rank() != 4)
    throw ShapeError("conv2d: input must be [B,Cin,H,W], got " +
                     shape_str(x.shape()));
  if (kernel.rank() != 4)
    throw ShapeError("conv2d: kernel must be [Cout,Cin,kh,kw], got " +
                     shape_str(kernel.shape()));
  const std::size_t b = x.extent(0), cin = x.extent(1), h = x.extent(2),
                    w = x.extent(3);
  const std::size_t cout = kernel.extent(0), kh = kernel.extent(2),
                    kw = kernel.extent(3);
  if (kernel.extent(1) != cin)
    throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                     " (axis 1) do not match kernel channels " +
                     std::to_string(kernel.extent(1)));
  if (kh > h)
    throw ShapeError("conv2d: kernel height " + std::to_string(kh) +
                     " exceeds input height " + std::to_string(h) +
                     " (axis 2)");
  if (kw > w)
    throw ShapeError("conv2d: kernel width " + std::to_string(kw) +
                     " exceeds input width " + std::to_string(w) + " (axis 3)");
  if (bias.defined() && bias.shape() != Shape{cout})
    throw ShapeError("conv2d: bias must have shape (" + std::to_string(cout) +
                     "), got " + shape_str(bias.shape()));

  const std::size_t ho = h - kh + 1, wo = w - kw + 1;
  const std::size_t cols = ho * wo, patch = cin * kh * kw;

  std::vector<T> out(b * cout * cols);
  const T* px = x.data();
  const T* pk = kernel.data();
  const T* pb = bias.defined() ? bias.data() : nullptr;
  parallel_for(b, [&](std::size_t sample) {
    std::vector<T> m(patch * cols);
    detail::im2col(px + sample * cin * h * w, cin, h, w, kh, kw, ho, wo,
                   m.data());
    T* y = out.data() + sample * cout * cols;
    detail::gemm<T>(false, false, static_cast<int>(cout),
                    static_cast<int>(cols), static_cast<int>(patch), T(1), pk,
                    static_cast<int>(patch), m.data(), static_cast<int>(cols),
                    T(0), y, static_cast<int>(cols));
    if (pb) {
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t j = 0; j < cols; ++j) y[o * cols + j] += pb[o];
    }
  });

  auto xn = x.impl;
  auto kn = kernel.impl;
  auto biasn = bias.defined() ? bias.impl : nullptr;
  std::vector<Tensor<T>> parents{x, kernel};
  if (bias.defined()) parents.push_back(bias);
  return detail::make_result<T>(
      Shape{b, cout, ho, wo}, std::move(out), std::move(parents),
      [xn, kn, biasn, b, cin, h, w, cout, kh, kw, ho,
       wo](detail::Node<T>& self) {
        const std::size_t cols = ho * wo, patch = cin * kh * kw;
        const T* dy = self.grad.data();
        const bool need_dx = xn->requires_grad;
        const bool need_dk = kn->requires_grad;
        if (need_dx && xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));

        // Per-sample kernel-gradient slabs, reduced in sample order below so
        // the result is independent of the thread budget.
        std::vector<T> dk_slabs;
        if (need_dk) dk_slabs.assign(b * cout * patch, T(0));

        parallel_for(b, [&](std::size_t sample) {
          const T* dy_s = dy + sample * cout * cols;
          if (need_dk) {
            std::vector<T> m(patch * cols);
            detail::im2col(xn->values.data() + sample * cin * h * w, cin, h, w,
                           kh, kw, ho, wo, m.data());
            detail::gemm<T>(false, true, static_cast<int>(cout),
                            static_cast<int>(patch), static_cast<int>(cols),
                            T(1), dy_s, static_cast<int>(cols), m.data(),
                            static_cast<int>(cols), T(0),
                            dk_slabs.data() + sample * cout * patch,
                            static_cast<int>(patch));
          }
          if (need_dx) {
            std::vector<T> g(patch * cols);
            detail::gemm<T>(true, false, static_cast<int>(patch),
                            static_cast<int>(cols), static_cast<int>(cout),
                            T(1), kn->values.data(), static_cast<int>(patch),
                            dy_s, static_cast<int>(cols), T(0), g.data(),
                            static_cast<int>(cols));
            detail::col2im_add(g.data(), cin, h, w, kh, kw, ho, wo,
                               xn->grad.data() + sample * cin * h * w);
          }
        });

        if (need_dk) {
          if (kn->grad.size() != kn->values.size())
            kn->grad.assign(kn->values.size(), T(0));
          for (std::size_t sample = 0; sample < b; ++sample) {
            const T* slab = dk_slabs.data() + sample * cout * patch;
            for (std::size_t i = 0; i < cout * patch; ++i)
              kn->grad[i] += slab[i];
          }
        }
        if (biasn && biasn->requires_grad) {
          if (biasn->grad.size() != biasn->values.size())
            biasn->grad.assign(biasn->values.size(), T(0));
          for (std::size_t sample = 0; sample < b; ++sample)
            for (std::size_t o = 0; o < cout; ++o) {
              const T* row = dy + (sample * cout + o) * cols;
              T acc = T(0);
              for (std::size_t j = 0; j < cols; ++j) acc += row[j];
              biasn->grad[o] += acc;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Strided window means over [B,C,H,W]; windows may overlap.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t ph, std::size_t pw,
                     std::size_t sh, std::size_t sw) {
  if (x.rank() != 4)
    throw ShapeError("avg_pool2d: input must be [B,C,H,W], got " +
                     shape_str(x.shape()));
  if (ph == 0 || pw == 0 || sh == 0 || sw == 0)
    throw ConfigError("avg_pool2d: kernel and stride must be positive");
  const std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2),
                    w = x.extent(3);
  if (ph > h || pw > w)
    throw ShapeError("avg_pool2d: kernel (" + std::to_string(ph) + "," +
                     std::to_string(pw) + ") exceeds input (" +
                     std::to_string(h) + "," + std::to_string(w) + ")");
  const std::size_t ho = (h - ph) / sh + 1, wo = (w - pw) / sw + 1;
  const T inv = T(1) / static_cast<T>(ph * pw);

  std::vector<T> out(b * c * ho * wo);
  const T* px = x.data();
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    const T* plane = px + bc * h * w;
    T* oplane = out.data() + bc * ho * wo;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        T acc = T(0);
        for (std::size_t u = 0; u < ph; ++u) {
          const T* row = plane + (i * sh + u) * w + j * sw;
          for (std::size_t v = 0; v < pw; ++v) acc += row[v];
        }
        oplane[i * wo + j] = acc * inv;
      }
  }
  auto xn = x.impl;
  return detail::make_result<T>(
      Shape{b, c, ho, wo}, std::move(out), {x},
      [xn, b, c, h, w, ph, pw, sh, sw, ho, wo, inv](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t bc = 0; bc < b * c; ++bc) {
          T* gplane = xn->grad.data() + bc * h * w;
          const T* dy = self.grad.data() + bc * ho * wo;
          for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) {
              const T g = dy[i * wo + j] * inv;
              for (std::size_t u = 0; u < ph; ++u) {
                T* row = gplane + (i * sh + u) * w + j * sw;
                for (std::size_t v = 0; v < pw; ++v) row[v] += g;
              }
            }
        }
      });
}

/// Adaptive mean pooling over the last axis; segment i covers
/// [floor(i*L/t), floor((i+1)*L/t)). t == L is the identity, t == 1 the mean.
template <typename T>
Tensor<T> adaptive_avg_pool1d(const Tensor<T>& x, std::size_t target) {
  if (x.rank() < 1)
    throw ShapeError("adaptive_avg_pool1d: input must have at least one axis");
  const std::size_t len = x.shape().back();
  if (target < 1 || target > len)
    throw ShapeError("adaptive_avg_pool1d: target " + std::to_string(target) +
                     " outside [1," + std::to_string(len) + "]");
  const std::size_t rows = x.size() / len;

  std::vector<std::size_t> bounds(target + 1);
  for (std::size_t i = 0; i <= target; ++i) bounds[i] = i * len / target;

  Shape out_shape = x.shape();
  out_shape.back() = target;
  std::vector<T> out(rows * target);
  const T* px = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * len;
    for (std::size_t i = 0; i < target; ++i) {
      T acc = T(0);
      for (std::size_t k = bounds[i]; k < bounds[i + 1]; ++k) acc += row[k];
      out[r * target + i] = acc / static_cast<T>(bounds[i + 1] - bounds[i]);
    }
  }
  auto xn = x.impl;
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, rows, len, target, bounds](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * target;
          T* dx = xn->grad.data() + r * len;
          for (std::size_t i = 0; i < target; ++i) {
            const T g = dy[i] / static_cast<T>(bounds[i + 1] - bounds[i]);
            for (std::size_t k = bounds[i]; k < bounds[i + 1]; ++k) dx[k] += g;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel normalization of [B,C,...]; batch statistics in train mode
/// (updating the running state), running statistics in eval mode.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormState<T>& state,
                     bool train, T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() < 2)
    throw ShapeError("batch_norm: input must be [B,C,...], got " +
                     shape_str(x.shape()));
  const std::size_t batch = x.extent(0), channels = x.extent(1);
  std::size_t inner = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.extent(i);
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels})
    throw ShapeError("batch_norm: gamma/beta must have shape (" +
                     std::to_string(channels) + ")");
  if (state.running_mean.size() != channels)
    throw ShapeError("batch_norm: running stats sized for " +
                     std::to_string(state.running_mean.size()) +
                     " channels, input has " + std::to_string(channels));
  if (train && batch < 2)
    throw ConfigError(
        "batch_norm: train mode requires batch size >= 2, got " +
        std::to_string(batch));

  const std::size_t m = batch * inner;
  std::vector<T> mean(channels), var(channels);
  const T* px = x.data();
  if (train) {
    const T inv_m = T(1) / static_cast<T>(m);
    for (std::size_t c = 0; c < channels; ++c) {
      T acc = T(0);
      for (std::size_t s = 0; s < batch; ++s) {
        const T* p = px + (s * channels + c) * inner;
        for (std::size_t k = 0; k < inner; ++k) acc += p[k];
      }
      mean[c] = acc * inv_m;
    }
    for (std::size_t c = 0; c < channels; ++c) {
      T acc = T(0);
      for (std::size_t s = 0; s < batch; ++s) {
        const T* p = px + (s * channels + c) * inner;
        for (std::size_t k = 0; k < inner; ++k) {
          const T d = p[k] - mean[c];
          acc += d * d;
        }
      }
      var[c] = acc * inv_m;
    }
    const T unbias = m > 1 ? static_cast<T>(m) / static_cast<T>(m - 1) : T(1);
    for (std::size_t c = 0; c < channels; ++c) {
      state.running_mean[c] =
          (T(1) - momentum) * state.running_mean[c] + momentum * mean[c];
      state.running_var[c] =
          (T(1) - momentum) * state.running_var[c] + momentum * var[c] * unbias;
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  std::vector<T> invstd(channels);
  for (std::size_t c = 0; c < channels; ++c)
    invstd[c] = T(1) / std::sqrt(var[c] + eps);

  std::vector<T> out(x.size());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  const T* pg = gamma.data();
  const T* pbeta = beta.data();
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (s * channels + c) * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        const T xh = (px[base + k] - mean[c]) * invstd[c];
        (*xhat)[base + k] = xh;
        out[base + k] = xh * pg[c] + pbeta[c];
      }
    }

  auto xn = x.impl;
  auto gn = gamma.impl;
  auto bn = beta.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat, invstd, batch, channels, inner, m,
       train](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        std::vector<T> sum_dy(channels, T(0)), sum_dy_xhat(channels, T(0));
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (s * channels + c) * inner;
            T s1 = T(0), s2 = T(0);
            for (std::size_t k = 0; k < inner; ++k) {
              s1 += dy[base + k];
              s2 += dy[base + k] * (*xhat)[base + k];
            }
            sum_dy[c] += s1;
            sum_dy_xhat[c] += s2;
          }
        if (bn->requires_grad) {
          if (bn->grad.size() != bn->values.size())
            bn->grad.assign(bn->values.size(), T(0));
          for (std::size_t c = 0; c < channels; ++c)
            bn->grad[c] += sum_dy[c];
        }
        if (gn->requires_grad) {
          if (gn->grad.size() != gn->values.size())
            gn->grad.assign(gn->values.size(), T(0));
          for (std::size_t c = 0; c < channels; ++c)
            gn->grad[c] += sum_dy_xhat[c];
        }
        if (xn->requires_grad) {
          if (xn->grad.size() != xn->values.size())
            xn->grad.assign(xn->values.size(), T(0));
          const T inv_m = T(1) / static_cast<T>(m);
          for (std::size_t s = 0; s < batch; ++s)
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t base = (s * channels + c) * inner;
              const T g = gn->values[c] * invstd[c];
              for (std::size_t k = 0; k < inner; ++k) {
                if (train) {
                  xn->grad[base + k] +=
                      g * inv_m *
                      (static_cast<T>(m) * dy[base + k] - sum_dy[c] -
                       (*xhat)[base + k] * sum_dy_xhat[c]);
                } else {
                  xn->grad[base + k] += g * dy[base + k];
                }
              }
            }
        }
      });
}

/// Normalizes over the last axis then applies the affine (gamma, beta).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() < 1)
    throw ShapeError("layer_norm: input must have at least one axis");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    throw ShapeError("layer_norm: gamma/beta must have shape (" +
                     std::to_string(d) + ")");
  const std::size_t rows = x.size() / d;

  std::vector<T> out(x.size());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto invstd = std::make_shared<std::vector<T>>(rows);
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  const T inv_d = T(1) / static_cast<T>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mu = T(0);
    for (std::size_t k = 0; k < d; ++k) mu += row[k];
    mu *= inv_d;
    T var = T(0);
    for (std::size_t k = 0; k < d; ++k) {
      const T dv = row[k] - mu;
      var += dv * dv;
    }
    var *= inv_d;
    const T is = T(1) / std::sqrt(var + eps);
    (*invstd)[r] = is;
    for (std::size_t k = 0; k < d; ++k) {
      const T xh = (row[k] - mu) * is;
      (*xhat)[r * d + k] = xh;
      out[r * d + k] = xh * pg[k] + pb[k];
    }
  }

  auto xn = x.impl;
  auto gn = gamma.impl;
  auto bn = beta.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat, invstd, rows, d, inv_d](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        if (bn->requires_grad) {
          if (bn->grad.size() != bn->values.size())
            bn->grad.assign(bn->values.size(), T(0));
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < d; ++k) bn->grad[k] += dy[r * d + k];
        }
        if (gn->requires_grad) {
          if (gn->grad.size() != gn->values.size())
            gn->grad.assign(gn->values.size(), T(0));
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < d; ++k)
              gn->grad[k] += dy[r * d + k] * (*xhat)[r * d + k];
        }
        if (xn->requires_grad) {
          if (xn->grad.size() != xn->values.size())
            xn->grad.assign(xn->values.size(), T(0));
          for (std::size_t r = 0; r < rows; ++r) {
            T sum_g = T(0), sum_gx = T(0);
            for (std::size_t k = 0; k < d; ++k) {
              const T g = dy[r * d + k] * gn->values[k];
              sum_g += g;
              sum_gx += g * (*xhat)[r * d + k];
            }
            const T is = (*invstd)[r];
            for (std::size_t k = 0; k < d; ++k) {
              const T g = dy[r * d + k] * gn->values[k];
              xn->grad[r * d + k] +=
                  is * (g - inv_d * sum_g - (*xhat)[r * d + k] * inv_d * sum_gx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: kept entries scaled by 1/(1-p) at train time so the
/// eval path is the identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool train, Rng& rng) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout: rate must lie in [0,1), got " +
                      std::to_string(p));
  if (!train || p == 0.0) return x;

  const T scale_keep = T(1.0 / (1.0 - p));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto mask = std::make_shared<std::vector<T>>(x.size());
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T m = unif(rng) < p ? T(0) : scale_keep;
    (*mask)[i] = m;
    out[i] = px[i] * m;
  }
  auto xn = x.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn, mask](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t i = 0; i < self.size(); ++i)
          xn->grad[i] += self.grad[i] * (*mask)[i];
      });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean over the batch of -log softmax(logits)[label], stabilized by
/// max-subtraction.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw ShapeError("softmax_cross_entropy: logits must be [B,K], got " +
                     shape_str(logits.shape()));
  const std::size_t batch = logits.extent(0), k = logits.extent(1);
  if (labels.size() != batch)
    throw ShapeError("softmax_cross_entropy: got " +
                     std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw DataError("softmax_cross_entropy: label " +
                      std::to_string(labels[i]) + " at index " +
                      std::to_string(i) + " outside [0," + std::to_string(k) +
                      ")");
  }

  auto probs = std::make_shared<std::vector<T>>(logits.size());
  const T* pl = logits.data();
  T loss = T(0);
  for (std::size_t s = 0; s < batch; ++s) {
    const T* row = pl + s * k;
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const T log_denom = std::log(denom);
    for (std::size_t j = 0; j < k; ++j)
      (*probs)[s * k + j] = std::exp(row[j] - mx) / denom;
    loss += log_denom - (row[static_cast<std::size_t>(labels[s])] - mx);
  }
  loss /= static_cast<T>(batch);

  auto ln = logits.impl;
  return detail::make_result<T>(
      Shape{}, std::vector<T>{loss}, {logits},
      [ln, probs, labels, batch, k](detail::Node<T>& self) {
        if (ln->grad.size() != ln->values.size())
          ln->grad.assign(ln->values.size(), T(0));
        const T g = self.grad[0] / static_cast<T>(batch);
        for (std::size_t s = 0; s < batch; ++s)
          for (std::size_t j = 0; j < k; ++j) {
            T p = (*probs)[s * k + j];
            if (j == static_cast<std::size_t>(labels[s])) p -= T(1);
            ln->grad[s * k + j] += g * p;
          }
      });
}

// ---------------------------------------------------------------------------
// Channel gating
// ---------------------------------------------------------------------------

/// out[b,d,l] = x[b,d,l] * gate[b,d]; the gate broadcasts over the last axis.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& gate) {
  if (x.rank() != 3)
    throw ShapeError("scale_channels: input must be [B,D,L], got " +
                     shape_str(x.shape()));
  const std::size_t b = x.extent(0), d = x.extent(1), l = x.extent(2);
  if (gate.shape() != Shape{b, d})
    throw ShapeError("scale_channels: gate must be [B,D] = (" +
                     std::to_string(b) + "," + std::to_string(d) + "), got " +
                     shape_str(gate.shape()));
  std::vector<T> out(x.size());
  const T* px = x.data();
  const T* pgate = gate.data();
  for (std::size_t bd = 0; bd < b * d; ++bd) {
    const T g = pgate[bd];
    const T* src = px + bd * l;
    T* dst = out.data() + bd * l;
    for (std::size_t k = 0; k < l; ++k) dst[k] = src[k] * g;
  }
  auto xn = x.impl;
  auto gn = gate.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gate},
      [xn, gn, b, d, l](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        if (xn->requires_grad) {
          if (xn->grad.size() != xn->values.size())
            xn->grad.assign(xn->values.size(), T(0));
          for (std::size_t bd = 0; bd < b * d; ++bd) {
            const T g = gn->values[bd];
            for (std::size_t k = 0; k < l; ++k)
              xn->grad[bd * l + k] += dy[bd * l + k] * g;
          }
        }
        if (gn->requires_grad) {
          if (gn->grad.size() != gn->values.size())
            gn->grad.assign(gn->values.size(), T(0));
          for (std::size_t bd = 0; bd < b * d; ++bd) {
            T acc = T(0);
            for (std::size_t k = 0; k < l; ++k)
              acc += dy[bd * l + k] * xn->values[bd * l + k];
            gn->grad[bd] += acc;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

/// One direction of a GRU; gates stacked (r, z, n) along the first axis of
/// the weight matrices, PyTorch-style.
template <typename T>
struct GruDirectionParams {
  Tensor<T> w_ih;  // [3H, Din]
  Tensor<T> w_hh;  // [3H, H]
  Tensor<T> b_ih;  // [3H]
  Tensor<T> b_hh;  // [3H]
};

template <typename T>
struct BiGruParams {
  GruDirectionParams<T> fwd;
  GruDirectionParams<T> bwd;
  std::size_t hidden = 0;
};

/// Standard GRU recurrence with the reset gate applied inside the candidate's
/// recurrent term; zero initial hidden state. Returns [B,L,H].
template <typename T>
Tensor<T> gru_direction(const Tensor<T>& x, const GruDirectionParams<T>& p,
                        std::size_t hidden, bool reverse) {
  if (x.rank() != 3)
    throw ShapeError("gru: input must be [B,L,Din], got " +
                     shape_str(x.shape()));
  const std::size_t b = x.extent(0), len = x.extent(1);
  if (p.w_ih.shape() != Shape{3 * hidden, x.extent(2)} ||
      p.w_hh.shape() != Shape{3 * hidden, hidden})
    throw ShapeError("gru: weight shapes inconsistent with hidden size " +
                     std::to_string(hidden) + " and input " +
                     shape_str(x.shape()));

  // One GEMM covers the input projection for every timestep.
  auto xg = linear(x, p.w_ih, p.b_ih);  // [B, L, 3H]

  Tensor<T> h = Tensor<T>::zeros({b, hidden});
  std::vector<Tensor<T>> outputs(len);
  for (std::size_t step = 0; step < len; ++step) {
    const std::size_t t = reverse ? len - 1 - step : step;
    auto xt = reshape(slice(xg, 1, t, 1), {b, 3 * hidden});
    auto hg = linear(h, p.w_hh, p.b_hh);  // [B, 3H]
    auto r = sigmoid(add(slice(xt, 1, 0, hidden), slice(hg, 1, 0, hidden)));
    auto z = sigmoid(
        add(slice(xt, 1, hidden, hidden), slice(hg, 1, hidden, hidden)));
    auto n = tanh_act(add(slice(xt, 1, 2 * hidden, hidden),
                          mul(r, slice(hg, 1, 2 * hidden, hidden))));
    // h' = (1 - z) * n + z * h
    h = add(sub(n, mul(z, n)), mul(z, h));
    outputs[t] = reshape(h, {b, 1, hidden});
  }
  return concat(outputs, 1);
}

/// Bidirectional GRU over [B,L,Din]: per-timestep concatenation of the
/// forward and backward hidden states, [B,L,2H].
template <typename T>
Tensor<T> bigru(const Tensor<T>& x, const BiGruParams<T>& params) {
  auto f = gru_direction(x, params.fwd, params.hidden, false);
  auto r = gru_direction(x, params.bwd, params.hidden, true);
  return concat({f, r}, 2);
}

}  // namespace staflow
