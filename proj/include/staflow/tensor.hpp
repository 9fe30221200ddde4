#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "staflow/common.hpp"

namespace staflow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

namespace detail {

inline bool& grad_mode_ref() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t size() const { return values.size(); }

  void accumulate(const T* g, std::size_t n) {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    for (std::size_t i = 0; i < n; ++i) grad[i] += g[i];
  }
};

}  // namespace detail

/// Disables gradient recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_mode_ref()) {
    detail::grad_mode_ref() = false;
  }
  ~NoGradGuard() { detail::grad_mode_ref() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

inline bool grad_enabled() { return detail::grad_mode_ref(); }

/// Dense row-major N-d array participating in a reverse-mode autodiff graph.
/// Copying a Tensor aliases the underlying node (shallow, like a handle).
template <typename T>
class Tensor {
 public:
  std::shared_ptr<detail::Node<T>> impl;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node<T>> node)
      : impl(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    auto node = std::make_shared<detail::Node<T>>();
    node->values.assign(shape_size(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from_vector(std::vector<T> values, Shape shape,
                            bool requires_grad = false) {
    if (values.size() != shape_size(shape)) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->values = std::move(values);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value) { return filled({}, value); }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1),
                      bool requires_grad = false) {
    std::normal_distribution<T> dist(T(0), stddev);
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl->values) v = dist(rng);
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi,
                        bool requires_grad = false) {
    std::uniform_real_distribution<T> dist(lo, hi);
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl->values) v = dist(rng);
    return t;
  }

  bool defined() const { return impl != nullptr; }
  const Shape& shape() const { return impl->shape; }
  std::size_t rank() const { return impl->shape.size(); }
  std::size_t size() const { return impl->values.size(); }
  std::size_t extent(std::size_t axis) const { return impl->shape[axis]; }

  std::vector<T>& values() { return impl->values; }
  const std::vector<T>& values() const { return impl->values; }
  T* data() { return impl->values.data(); }
  const T* data() const { return impl->values.data(); }

  bool requires_grad() const { return impl->requires_grad; }
  bool has_grad() const { return impl && !impl->grad.empty(); }
  std::vector<T>& grad() {
    if (impl->grad.size() != impl->values.size())
      impl->grad.assign(impl->values.size(), T(0));
    return impl->grad;
  }

  T item() const {
    if (size() != 1)
      throw UsageError("item() requires a single-element tensor, got shape " +
                       shape_str(shape()));
    return impl->values[0];
  }

  void zero_grad() {
    if (impl && !impl->grad.empty())
      std::fill(impl->grad.begin(), impl->grad.end(), T(0));
  }

  /// Detached copy of the values (leaf, no history).
  Tensor detach() const {
    return from_vector(impl->values, impl->shape, false);
  }

  /// Reverse-mode sweep from a scalar; visits each node once and accumulates
  /// gradients by summation into every reachable requires_grad tensor.
  void backward() const {
    if (!impl || size() != 1)
      throw UsageError("backward() requires a scalar tensor");
    if (!impl->requires_grad)
      throw UsageError("backward() called on a tensor with no gradient path");

    using Node = detail::Node<T>;
    Node* root = impl.get();
    if (root->grad.size() != root->values.size())
      root->grad.assign(root->values.size(), T(0));
    root->grad[0] += T(1);

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    visited.insert(root);
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* parent = node->parents[next++].get();
        if (parent->requires_grad && visited.insert(parent).second)
          stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    // Drop interior gradients so a later sweep through the same graph adds
    // exactly one more d(loss)/d(leaf) contribution; leaves keep accumulating.
    for (Node* node : order) {
      if (node->backward_fn) node->grad.clear();
    }
  }
};

namespace detail {

/// Wires up a result node: grad tracking only if enabled and some parent
/// requires it, otherwise the output is a plain leaf.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward) {
  auto out = Tensor<T>::from_vector(std::move(values), std::move(shape));
  bool track = grad_mode_ref();
  if (track) {
    track = false;
    for (const auto& p : parents) track = track || p.impl->requires_grad;
  }
  if (track) {
    out.impl->requires_grad = true;
    out.impl->parents.reserve(parents.size());
    for (auto& p : parents) out.impl->parents.push_back(p.impl);
    out.impl->backward_fn = std::move(backward);
  }
  return out;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  auto an = a.impl;
  auto bn = b.impl;
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
        if (an->requires_grad) an->accumulate(self.grad.data(), self.size());
        if (bn->requires_grad) bn->accumulate(self.grad.data(), self.size());
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  auto an = a.impl;
  auto bn = b.impl;
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
        if (an->requires_grad) an->accumulate(self.grad.data(), self.size());
        if (bn->requires_grad) {
          if (bn->grad.size() != bn->values.size())
            bn->grad.assign(bn->values.size(), T(0));
          for (std::size_t i = 0; i < self.size(); ++i)
            bn->grad[i] -= self.grad[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  auto an = a.impl;
  auto bn = b.impl;
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
        if (an->requires_grad) {
          if (an->grad.size() != an->values.size())
            an->grad.assign(an->values.size(), T(0));
          for (std::size_t i = 0; i < self.size(); ++i)
            an->grad[i] += self.grad[i] * bn->values[i];
        }
        if (bn->requires_grad) {
          if (bn->grad.size() != bn->values.size())
            bn->grad.assign(bn->values.size(), T(0));
          for (std::size_t i = 0; i < self.size(); ++i)
            bn->grad[i] += self.grad[i] * an->values[i];
        }
      });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -px[i];
  auto xn = x.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t i = 0; i < self.size(); ++i)
          xn->grad[i] -= self.grad[i];
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] + c;
  auto xn = x.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn](detail::Node<T>& self) {
        xn->accumulate(self.grad.data(), self.size());
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * c;
  auto xn = x.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn, c](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t i = 0; i < self.size(); ++i)
          xn->grad[i] += self.grad[i] * c;
      });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (const T v : x.values()) acc += v;
  auto xn = x.impl;
  return detail::make_result<T>(
      Shape{}, std::vector<T>{acc}, {x}, [xn](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        const T g = self.grad[0];
        for (auto& v : xn->grad) v += g;
      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.size());
  T acc = T(0);
  for (const T v : x.values()) acc += v;
  acc *= inv;
  auto xn = x.impl;
  return detail::make_result<T>(
      Shape{}, std::vector<T>{acc}, {x}, [xn, inv](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        const T g = self.grad[0] * inv;
        for (auto& v : xn->grad) v += g;
      });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise.
template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = px[i] > T(0) ? px[i] : std::expm1(px[i]);
  auto xn = x.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t i = 0; i < self.size(); ++i) {
          const T d = xn->values[i] > T(0) ? T(1) : self.values[i] + T(1);
          xn->grad[i] += self.grad[i] * d;
        }
      });
}

template <typename T>
Tensor<T> tanh_act(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(px[i]);
  auto xn = x.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t i = 0; i < self.size(); ++i) {
          const T y = self.values[i];
          xn->grad[i] += self.grad[i] * (T(1) - y * y);
        }
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = px[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                       : std::exp(v) / (T(1) + std::exp(v));
  }
  auto xn = x.impl;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t i = 0; i < self.size(); ++i) {
          const T y = self.values[i];
          xn->grad[i] += self.grad[i] * y * (T(1) - y);
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_size(new_shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  auto xn = x.impl;
  return detail::make_result<T>(
      std::move(new_shape), x.values(), {x}, [xn](detail::Node<T>& self) {
        xn->accumulate(self.grad.data(), self.size());
      });
}

/// Swaps two axes (copying transpose).
template <typename T>
Tensor<T> swap_axes(const Tensor<T>& x, std::size_t a, std::size_t b) {
  const Shape& shape = x.shape();
  if (a >= shape.size() || b >= shape.size())
    throw ShapeError("swap_axes: axis out of range for " + shape_str(shape));
  if (a == b) return reshape(x, shape);
  if (a > b) std::swap(a, b);

  Shape out_shape = shape;
  std::swap(out_shape[a], out_shape[b]);

  // Decompose as [outer, A, mid, B, inner].
  std::size_t outer = 1, mid = 1, inner = 1;
  for (std::size_t i = 0; i < a; ++i) outer *= shape[i];
  for (std::size_t i = a + 1; i < b; ++i) mid *= shape[i];
  for (std::size_t i = b + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t A = shape[a], B = shape[b];

  auto permute = [=](const T* src, T* dst) {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < A; ++i)
        for (std::size_t m = 0; m < mid; ++m)
          for (std::size_t j = 0; j < B; ++j) {
            const T* s = src + (((o * A + i) * mid + m) * B + j) * inner;
            T* d = dst + (((o * B + j) * mid + m) * A + i) * inner;
            std::copy(s, s + inner, d);
          }
  };

  std::vector<T> out(x.size());
  permute(x.data(), out.data());
  auto xn = x.impl;
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, outer, mid, inner, A, B](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        // inverse permutation: swap back, accumulating
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < B; ++j)
            for (std::size_t m = 0; m < mid; ++m)
              for (std::size_t i = 0; i < A; ++i) {
                const T* s =
                    self.grad.data() + (((o * B + j) * mid + m) * A + i) * inner;
                T* d = xn->grad.data() + (((o * A + i) * mid + m) * B + j) * inner;
                for (std::size_t k = 0; k < inner; ++k) d[k] += s[k];
              }
      });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start,
                std::size_t len) {
  const Shape& shape = x.shape();
  if (axis >= shape.size())
    throw ShapeError("slice: axis out of range for " + shape_str(shape));
  if (start + len > shape[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds extent " +
                     std::to_string(shape[axis]) + " on axis " +
                     std::to_string(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t extent = shape[axis];

  Shape out_shape = shape;
  out_shape[axis] = len;
  std::vector<T> out(outer * len * inner);
  const T* src = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    const T* s = src + (o * extent + start) * inner;
    std::copy(s, s + len * inner, out.data() + o * len * inner);
  }
  auto xn = x.impl;
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, outer, inner, extent, start, len](detail::Node<T>& self) {
        if (xn->grad.size() != xn->values.size())
          xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t o = 0; o < outer; ++o) {
          const T* g = self.grad.data() + o * len * inner;
          T* d = xn->grad.data() + (o * extent + start) * inner;
          for (std::size_t k = 0; k < len * inner; ++k) d[k] += g[k];
        }
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
  return concat(std::vector<Tensor<T>>(parts), axis);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size())
    throw ShapeError("concat: axis out of range for " + shape_str(first));
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size())
      throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " +
                       shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i])
        throw ShapeError("concat: extent mismatch on axis " +
                         std::to_string(i) + ": " + shape_str(first) + " vs " +
                         shape_str(s));
    }
    total_axis += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total_axis;

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  std::vector<T> out(outer * total_axis * inner);
  std::vector<std::size_t> offsets(parts.size());
  {
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = off;
      const std::size_t ext = parts[p].shape()[axis];
      const T* src = parts[p].data();
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy(src + o * ext * inner, src + (o + 1) * ext * inner,
                  out.data() + (o * total_axis + off) * inner);
      }
      off += ext;
    }
  }

  std::vector<std::shared_ptr<detail::Node<T>>> impls;
  impls.reserve(parts.size());
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    impls.push_back(p.impl);
    extents.push_back(p.shape()[axis]);
  }
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), parts,
      [impls, extents, offsets, outer, inner,
       total_axis](detail::Node<T>& self) {
        for (std::size_t p = 0; p < impls.size(); ++p) {
          auto& node = *impls[p];
          if (!node.requires_grad) continue;
          if (node.grad.size() != node.values.size())
            node.grad.assign(node.values.size(), T(0));
          const std::size_t ext = extents[p];
          for (std::size_t o = 0; o < outer; ++o) {
            const T* g =
                self.grad.data() + (o * total_axis + offsets[p]) * inner;
            T* d = node.grad.data() + o * ext * inner;
            for (std::size_t k = 0; k < ext * inner; ++k) d[k] += g[k];
          }
        }
      });
}

}  // namespace staflow
