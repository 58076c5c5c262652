// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// Minimal reverse-mode automatic differentiation.
//
// A Tensor is a handle to a graph node holding row-major data. Every op
// whose inputs require gradients records a pullback that accumulates into
// its parents' gradient buffers. backward() walks the nodes reachable from a
// scalar loss in reverse topological order, exactly once each.
//
// The scalar type is a template parameter: training runs in float, gradient
// checks run the same code in double.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "weakdns/error.hpp"

namespace weakdns::ad {

struct Shape {
  std::vector<std::size_t> dims;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> d) : dims(d) {}
  explicit Shape(std::vector<std::size_t> d) : dims(std::move(d)) {}

  std::size_t rank() const { return dims.size(); }
  std::size_t operator[](std::size_t i) const { return dims[i]; }
  std::size_t numel() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << ']';
    return os.str();
  }
};

/// Storage aligned to the widest vector unit, so Eigen kernels take the same
/// code path (and summation order) on every call.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> pullback;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<T> data) {
    if (data.size() != shape.numel())
      throw DomainError("tensor: data length " + std::to_string(data.size()) +
                        " does not match shape " + shape.str());
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data.assign(data.begin(), data.end());
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape) {
    const auto count = shape.numel();
    return constant(std::move(shape), std::vector<T>(count, T(0)));
  }
  static Tensor full(Shape shape, T value) {
    const auto count = shape.numel();
    return constant(std::move(shape), std::vector<T>(count, value));
  }
  static Tensor scalar(T value) { return constant(Shape{1}, {value}); }
  /// Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> data) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  const char* op() const { return node_->op; }

  bool requires_grad() const { return node_->requires_grad; }
  /// Only meaningful on leaves; freezing a parameter stops accumulation.
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on && node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), T(0));
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  T item() const {
    if (numel() != 1) throw DomainError("item: tensor of shape " + shape().str() + " is not scalar");
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& handle() const { return node_; }

  /// Fresh leaf sharing no graph history.
  Tensor detach() const { return constant(shape(), std::vector<T>(node_->data.begin(), node_->data.end())); }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

[[noreturn]] inline void shape_error(const char* op, const std::string& what) {
  throw DomainError(std::string(op) + ": " + what);
}

inline void same_shape(const char* op, const Shape& a, const Shape& b) {
  if (!(a == b)) shape_error(op, "shape mismatch " + a.str() + " vs " + b.str());
}

/// Creates the result node; the pullback is kept only if some input needs a
/// gradient.
template <typename T, typename Pullback>
Tensor<T> make_result(const char* op, Shape shape, Buffer<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, Pullback&& pb) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  n->leaf = false;
  for (const Tensor<T>* in : inputs)
    if (in->defined() && in->requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (const Tensor<T>* in : inputs)
      if (in->defined()) n->parents.push_back(in->handle());
    n->pullback = std::forward<Pullback>(pb);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> make_result_many(const char* op, Shape shape, Buffer<T> data,
                           const std::vector<Tensor<T>>& inputs,
                           std::function<void(Node<T>&)> pb) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  n->leaf = false;
  for (const auto& in : inputs)
    if (in.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (const auto& in : inputs) n->parents.push_back(in.handle());
    n->pullback = std::move(pb);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
bool wants(const Node<T>* n) {
  return n->requires_grad;
}

/// Elementwise unary op: f gives the value, df(x, y) the local derivative.
template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
  Buffer<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Node<T>* xn = x.node();
  return make_result<T>(op, x.shape(), std::move(out), {&x}, [xn, df](Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xn->grad[i] += self.grad[i] * df(xn->data[i], self.data[i]);
  });
}

/// outer x axis x inner decomposition used by concat/slice/axis reductions.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape("add", a.shape(), b.shape());
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& self) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape("sub", a.shape(), b.shape());
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>("sub", a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& self) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape("mul", a.shape(), b.shape());
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& self) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
  });
}

/// x * c for a scalar constant c.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary<T>("scale", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

/// x + c for a scalar constant c.
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary<T>("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape("maximum", a.shape(), b.shape());
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] >= b[i] ? a[i] : b[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>("maximum", a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const bool left = an->data[i] >= bn->data[i];
      if (left && an->requires_grad) an->grad[i] += self.grad[i];
      if (!left && bn->requires_grad) bn->grad[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Complex helpers on paired (re, im) tensors

/// |z| = sqrt(re^2 + im^2); the subgradient at z = 0 is taken as 0.
template <typename T>
Tensor<T> complex_abs(const Tensor<T>& re, const Tensor<T>& im) {
  detail::same_shape("complex_abs", re.shape(), im.shape());
  Buffer<T> out(re.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(re[i] * re[i] + im[i] * im[i]);
  Node<T>* rn = re.node();
  Node<T>* in = im.node();
  return detail::make_result<T>("complex_abs", re.shape(), std::move(out), {&re, &im}, [rn, in](Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.data[i];
      if (y == T(0)) continue;
      if (rn->requires_grad) rn->grad[i] += self.grad[i] * rn->data[i] / y;
      if (in->requires_grad) in->grad[i] += self.grad[i] * in->data[i] / y;
    }
  });
}

/// Largest value tanh_ratio lets tanh reach, so |z| * tanh_ratio(|z|) stays
/// below 1 after rounding.
template <typename T>
constexpr T mask_ceiling() {
  return T(1) - T(16) * std::numeric_limits<T>::epsilon();
}

/// g(a) = tanh(a) / a for a >= 0, with g(0) = 1. Multiplying a complex value
/// z by g(|z|) maps it into the unit disc without changing its phase.
template <typename T>
Tensor<T> tanh_ratio(const Tensor<T>& a) {
  constexpr T series_below = T(0.05);
  auto value = [](T x) -> T {
    if (x < series_below) {
      const T x2 = x * x;
      return T(1) - x2 / T(3) + T(2) * x2 * x2 / T(15) - T(17) * x2 * x2 * x2 / T(315);
    }
    return std::min(std::tanh(x), mask_ceiling<T>()) / x;
  };
  auto deriv = [](T x, T) -> T {
    if (x < series_below) {
      const T x2 = x * x;
      return -T(2) * x / T(3) + T(8) * x2 * x / T(15) - T(102) * x2 * x2 * x / T(315);
    }
    const T t = std::tanh(x);
    if (t >= mask_ceiling<T>()) return -mask_ceiling<T>() / (x * x);
    return ((T(1) - t * t) * x - t) / (x * x);
  };
  for (T v : a.data())
    if (v < T(0)) detail::shape_error("tanh_ratio", "negative input");
  return detail::unary<T>("tanh_ratio", a, value, deriv);
}

/// Output gate 1.04 + 3.6 * sigmoid(x). The sigmoid is held 2^-20 away from
/// 0 and 1 so the result stays strictly inside (1.04, 4.64) in float.
template <typename T>
Tensor<T> clamp_scale_gate(const Tensor<T>& x) {
  static constexpr T lo = T(1.0 / 1048576.0);
  static constexpr T hi = T(1) - lo;
  auto s = [](T v) { return std::clamp(stable_sigmoid(v), lo, hi); };
  return detail::unary<T>(
      "clamp_scale_gate", x, [s](T v) { return T(1.04) + T(3.6) * s(v); },
      [s](T v, T) {
        const T y = s(v);
        if (y <= lo || y >= hi) return T(0);
        return T(3.6) * y * (T(1) - y);
      });
}

// ---------------------------------------------------------------------------
// Reductions and layout

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Node<T>* xn = x.node();
  return detail::make_result<T>("sum", Shape{1}, {acc}, {&x}, [xn](Node<T>& self) {
    for (auto& g : xn->grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T n = T(x.numel());
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Node<T>* xn = x.node();
  return detail::make_result<T>("mean", Shape{1}, {acc / n}, {&x}, [xn, n](Node<T>& self) {
    for (auto& g : xn->grad) g += self.grad[0] / n;
  });
}

/// Mean over one axis; that axis keeps extent 1.
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.shape().rank()) detail::shape_error("mean_axis", "axis out of range for " + x.shape().str());
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape os = x.shape();
  os.dims[axis] = 1;
  Buffer<T> out(sp.outer * sp.inner, T(0));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.extent + e) * sp.inner + i];
  const T n = T(sp.extent);
  for (auto& v : out) v /= n;
  Node<T>* xn = x.node();
  return detail::make_result<T>("mean_axis", std::move(os), std::move(out), {&x}, [xn, sp, n](Node<T>& self) {
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < sp.extent; ++e)
        for (std::size_t i = 0; i < sp.inner; ++i)
          xn->grad[(o * sp.extent + e) * sp.inner + i] += self.grad[o * sp.inner + i] / n;
  });
}

/// Max over the frame axis (axis 2) of an [N, C, T, F] tensor; the gradient
/// goes to the first maximising frame.
template <typename T>
Tensor<T> reduce_max_over_frames(const Tensor<T>& x) {
  if (x.shape().rank() != 4) detail::shape_error("reduce_max_over_frames", "need rank 4, got " + x.shape().str());
  const auto sp = detail::split_axis(x.shape(), 2);
  if (sp.extent == 0) detail::shape_error("reduce_max_over_frames", "zero frames");
  Shape os = x.shape();
  os.dims[2] = 1;
  Buffer<T> out(sp.outer * sp.inner);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      T bv = x[o * sp.extent * sp.inner + i];
      for (std::size_t e = 1; e < sp.extent; ++e) {
        const T v = x[(o * sp.extent + e) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = e;
        }
      }
      out[o * sp.inner + i] = bv;
      arg[o * sp.inner + i] = (o * sp.extent + best) * sp.inner + i;
    }
  Node<T>* xn = x.node();
  return detail::make_result<T>("reduce_max_over_frames", std::move(os), std::move(out), {&x},
                                [xn, arg = std::move(arg)](Node<T>& self) {
                                  for (std::size_t j = 0; j < arg.size(); ++j) xn->grad[arg[j]] += self.grad[j];
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape.numel() != x.numel())
    detail::shape_error("reshape", "cannot reshape " + x.shape().str() + " to " + shape.str());
  Buffer<T> out(x.data().begin(), x.data().end());
  Node<T>* xn = x.node();
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {&x}, [xn](Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) detail::shape_error("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.rank()) detail::shape_error("concat", "axis out of range for " + first.str());
  Shape os = first;
  os.dims[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.rank() != first.rank()) detail::shape_error("concat", "rank mismatch " + first.str() + " vs " + probe.str());
    for (std::size_t d = 0; d < first.rank(); ++d)
      if (d != axis && probe[d] != first[d])
        detail::shape_error("concat", "shape mismatch " + first.str() + " vs " + probe.str());
    os.dims[axis] += probe[axis];
  }
  const auto osp = detail::split_axis(os, axis);
  Buffer<T> out(os.numel());
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto sp = detail::split_axis(p.shape(), axis);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(p.data().begin() + std::ptrdiff_t(o * sp.extent * sp.inner), sp.extent * sp.inner,
                  out.begin() + std::ptrdiff_t((o * osp.extent + off) * osp.inner));
    off += sp.extent;
  }
  std::vector<Node<T>*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result_many<T>(
      "concat", os, std::move(out), parts, [nodes, offsets, axis, osp](Node<T>& self) {
        for (std::size_t j = 0; j < nodes.size(); ++j) {
          Node<T>* pn = nodes[j];
          if (!pn->requires_grad) continue;
          const auto sp = detail::split_axis(pn->shape, axis);
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t k = 0; k < sp.extent * sp.inner; ++k)
              pn->grad[o * sp.extent * sp.inner + k] += self.grad[(o * osp.extent + offsets[j]) * osp.inner + k];
        }
      });
}

/// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.shape().rank() || begin >= end || end > x.shape()[axis])
    detail::shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                     ") on axis " + std::to_string(axis) + " invalid for " + x.shape().str());
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape os = x.shape();
  os.dims[axis] = end - begin;
  const std::size_t width = (end - begin) * sp.inner;
  Buffer<T> out(sp.outer * width);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data().begin() + std::ptrdiff_t((o * sp.extent + begin) * sp.inner), width,
                out.begin() + std::ptrdiff_t(o * width));
  Node<T>* xn = x.node();
  return detail::make_result<T>("slice", std::move(os), std::move(out), {&x}, [xn, sp, begin, width](Node<T>& self) {
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < width; ++k) xn->grad[(o * sp.extent + begin) * sp.inner + k] += self.grad[o * width + k];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2 || a.shape()[1] != b.shape()[0])
    detail::shape_error("matmul", "incompatible shapes " + a.shape().str() + " x " + b.shape().str());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Buffer<T> out(m * n);
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::CMatMap<T>(a.data().data(), m, k) * detail::CMatMap<T>(b.data().data(), k, n);
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>("matmul", Shape{m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](Node<T>& self) {
    detail::CMatMap<T> g(self.grad.data(), m, n);
    if (an->requires_grad)
      detail::MatMap<T>(an->grad.data(), m, k).noalias() += g * detail::CMatMap<T>(bn->data.data(), k, n).transpose();
    if (bn->requires_grad)
      detail::MatMap<T>(bn->grad.data(), k, n).noalias() += detail::CMatMap<T>(an->data.data(), m, k).transpose() * g;
  });
}

struct Stride2 {
  std::size_t time = 1;
  std::size_t freq = 1;
};

namespace detail {

/// Geometry of a same-padded strided convolution from an `in` grid to an
/// `out` grid: out = (in + 2 pad - k) / stride + 1, pad = (k - 1) / 2.
struct ConvGeometry {
  std::size_t channels, in_h, in_w, kh, kw, sh, sw, ph, pw, out_h, out_w;
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

inline ConvGeometry same_geometry(std::size_t channels, std::size_t h, std::size_t w, std::size_t kh,
                                  std::size_t kw, Stride2 s) {
  ConvGeometry g{channels, h, w, kh, kw, s.time, s.freq, (kh - 1) / 2, (kw - 1) / 2, 0, 0};
  g.out_h = (h + 2 * g.ph - kh) / s.time + 1;
  g.out_w = (w + 2 * g.pw - kw) / s.freq + 1;
  return g;
}

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j, ++row) {
        T* dst = cols + row * g.cols();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = std::ptrdiff_t(oh * g.sh + i) - std::ptrdiff_t(g.ph);
          T* d = dst + oh * g.out_w;
          if (ih < 0 || ih >= std::ptrdiff_t(g.in_h)) {
            std::fill_n(d, g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.in_h + std::size_t(ih)) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = std::ptrdiff_t(ow * g.sw + j) - std::ptrdiff_t(g.pw);
            d[ow] = (iw < 0 || iw >= std::ptrdiff_t(g.in_w)) ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j, ++row) {
        const T* srcrow = cols + row * g.cols();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = std::ptrdiff_t(oh * g.sh + i) - std::ptrdiff_t(g.ph);
          if (ih < 0 || ih >= std::ptrdiff_t(g.in_h)) continue;
          T* dst = img + (c * g.in_h + std::size_t(ih)) * g.in_w;
          const T* s = srcrow + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = std::ptrdiff_t(ow * g.sw + j) - std::ptrdiff_t(g.pw);
            if (iw >= 0 && iw < std::ptrdiff_t(g.in_w)) dst[iw] += s[ow];
          }
        }
      }
}

inline void check_conv_args(const char* op, const Shape& x, const Shape& w, std::size_t w_in_axis) {
  if (x.rank() != 4 || w.rank() != 4)
    shape_error(op, "need rank-4 input and weight, got " + x.str() + " and " + w.str());
  if (x[1] != w[w_in_axis]) shape_error(op, "channel mismatch: input " + x.str() + ", weight " + w.str());
  if (w[2] % 2 == 0 || w[3] % 2 == 0) shape_error(op, "kernel extents must be odd, got " + w.str());
}

}  // namespace detail

/// 2-D convolution over [N, C, T, F] with same padding and per-axis stride.
/// Weight [Cout, Cin, kt, kf], optional bias [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Stride2 stride = {}) {
  detail::check_conv_args("conv2d", x.shape(), w.shape(), 1);
  if (bias.defined() && !(bias.shape() == Shape{w.shape()[0]}))
    detail::shape_error("conv2d", "bias shape " + bias.shape().str() + " does not match weight " + w.shape().str());
  const std::size_t batch = x.shape()[0], cout = w.shape()[0];
  const auto g = detail::same_geometry(x.shape()[1], x.shape()[2], x.shape()[3], w.shape()[2], w.shape()[3], stride);
  const std::size_t in_size = g.channels * g.in_h * g.in_w, out_size = cout * g.cols();

  Buffer<T> out(batch * out_size);
  Buffer<T> cols(g.rows() * g.cols());
  detail::CMatMap<T> wm(w.data().data(), cout, g.rows());
  for (std::size_t b = 0; b < batch; ++b) {
    detail::im2col(x.data().data() + b * in_size, g, cols.data());
    detail::MatMap<T> o(out.data() + b * out_size, cout, g.cols());
    o.noalias() = wm * detail::CMatMap<T>(cols.data(), g.rows(), g.cols());
    if (bias.defined())
      for (std::size_t c = 0; c < cout; ++c) o.row(c).array() += bias[c];
  }
  Node<T>* xn = x.node();
  Node<T>* wn = w.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      "conv2d", Shape{batch, cout, g.out_h, g.out_w}, std::move(out), {&x, &w, &bias},
      [xn, wn, bn, g, batch, cout, in_size, out_size](Node<T>& self) {
        Buffer<T> cols(g.rows() * g.cols());
        detail::CMatMap<T> wm(wn->data.data(), cout, g.rows());
        for (std::size_t b = 0; b < batch; ++b) {
          detail::CMatMap<T> go(self.grad.data() + b * out_size, cout, g.cols());
          if (wn->requires_grad) {
            detail::im2col(xn->data.data() + b * in_size, g, cols.data());
            detail::MatMap<T>(wn->grad.data(), cout, g.rows()).noalias() +=
                go * detail::CMatMap<T>(cols.data(), g.rows(), g.cols()).transpose();
          }
          if (xn->requires_grad) {
            detail::MatMap<T>(cols.data(), g.rows(), g.cols()).noalias() = wm.transpose() * go;
            detail::col2im_add(cols.data(), g, xn->grad.data() + b * in_size);
          }
          if (bn && bn->requires_grad)
            for (std::size_t c = 0; c < cout; ++c) bn->grad[c] += go.row(c).sum();
        }
      });
}

/// Adjoint of a same-padded strided conv2d: maps [N, Cin, T, F] to
/// [N, Cout, out_t, out_f]. Weight [Cin, Cout, kt, kf], optional bias [Cout].
/// The output extent defaults to input extent times stride.
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Stride2 stride = {},
                            std::size_t out_t = 0, std::size_t out_f = 0) {
  detail::check_conv_args("transposed_conv2d", x.shape(), w.shape(), 0);
  const std::size_t batch = x.shape()[0], cin = w.shape()[0], cout = w.shape()[1];
  if (bias.defined() && !(bias.shape() == Shape{cout}))
    detail::shape_error("transposed_conv2d", "bias shape " + bias.shape().str() + " does not match weight " +
                                                 w.shape().str());
  if (out_t == 0) out_t = x.shape()[2] * stride.time;
  if (out_f == 0) out_f = x.shape()[3] * stride.freq;
  // The conv this op is the adjoint of maps [Cout, out_t, out_f] -> [Cin, T, F].
  const auto g = detail::same_geometry(cout, out_t, out_f, w.shape()[2], w.shape()[3], stride);
  if (g.out_h != x.shape()[2] || g.out_w != x.shape()[3])
    detail::shape_error("transposed_conv2d", "output extent " + std::to_string(out_t) + "x" + std::to_string(out_f) +
                                                 " inconsistent with input " + x.shape().str());
  const std::size_t in_size = cin * g.cols(), out_size = cout * out_t * out_f;
  Buffer<T> out(batch * out_size, T(0));
  Buffer<T> cols(g.rows() * g.cols());
  detail::CMatMap<T> wm(w.data().data(), cin, g.rows());
  for (std::size_t b = 0; b < batch; ++b) {
    detail::MatMap<T>(cols.data(), g.rows(), g.cols()).noalias() =
        wm.transpose() * detail::CMatMap<T>(x.data().data() + b * in_size, cin, g.cols());
    detail::col2im_add(cols.data(), g, out.data() + b * out_size);
    if (bias.defined())
      for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t i = 0; i < out_t * out_f; ++i) out[b * out_size + c * out_t * out_f + i] += bias[c];
  }
  Node<T>* xn = x.node();
  Node<T>* wn = w.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      "transposed_conv2d", Shape{batch, cout, out_t, out_f}, std::move(out), {&x, &w, &bias},
      [xn, wn, bn, g, batch, cin, cout, in_size, out_size](Node<T>& self) {
        Buffer<T> cols(g.rows() * g.cols());
        detail::CMatMap<T> wm(wn->data.data(), cin, g.rows());
        const std::size_t plane = g.in_h * g.in_w;
        for (std::size_t b = 0; b < batch; ++b) {
          detail::im2col(self.grad.data() + b * out_size, g, cols.data());
          detail::CMatMap<T> gc(cols.data(), g.rows(), g.cols());
          if (xn->requires_grad)
            detail::MatMap<T>(xn->grad.data() + b * in_size, cin, g.cols()).noalias() += wm * gc;
          if (wn->requires_grad)
            detail::MatMap<T>(wn->grad.data(), cin, g.rows()).noalias() +=
                detail::CMatMap<T>(xn->data.data() + b * in_size, cin, g.cols()) * gc.transpose();
          if (bn && bn->requires_grad)
            for (std::size_t c = 0; c < cout; ++c) {
              T acc = T(0);
              for (std::size_t i = 0; i < plane; ++i) acc += self.grad[b * out_size + c * plane + i];
              bn->grad[c] += acc;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Backward pass

/// Nodes reachable from `root` through gradient-carrying edges, in
/// topological order (parents before children).
template <typename T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  if (!root->requires_grad) return order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
/// gradient. Intermediate gradients are scratch and released afterwards.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw DomainError("backward: loss must be scalar, got shape " + loss.shape().str());
  const auto order = topological_order(loss.node());
  if (order.empty()) return;
  for (Node<T>* n : order) {
    if (!n->leaf) n->grad.assign(n->data.size(), T(0));
    else if (n->grad.size() != n->data.size()) n->grad.assign(n->data.size(), T(0));
  }
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->pullback) n->pullback(*n);
  }
  for (Node<T>* n : order)
    if (!n->leaf) Buffer<T>().swap(n->grad);
}

}  // namespace weakdns::ad
