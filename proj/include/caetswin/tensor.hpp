#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "caetswin/errors.hpp"

namespace caetswin {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first touched; then same length as value
  bool requires_grad = false;
  bool on_tape = false;        // produced by a recorded op
  const void* tape = nullptr;  // tape that recorded it

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

/// Dense row-major tensor handle. Copying a Tensor copies the handle, not the
/// buffer; value data is treated as immutable once the tensor has entered an
/// op, except for its grad buffer.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(shape_numel(t.node_->shape), T(0));
    return t;
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.value().begin(), t.value().end(), v);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("from_data: shape " + shape_to_string(shape) +
                       " does not match buffer of length " + std::to_string(data.size()));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }

  std::vector<T>& value() { return node_->value; }
  const std::vector<T>& value() const { return node_->value; }

  T item() const {
    if (numel() != 1)
      throw ValueError("item: tensor " + shape_to_string(shape()) + " is not scalar");
    return node_->value[0];
  }

  T& at(std::size_t i) { return node_->value[i]; }
  T& at(std::size_t i, std::size_t j) { return node_->value[i * dim(1) + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return node_->value[(i * dim(1) + j) * dim(2) + k];
  }
  T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return node_->value[((i * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }
  T at(std::size_t i) const { return node_->value[i]; }
  T at(std::size_t i, std::size_t j) const { return node_->value[i * dim(1) + j]; }
  T at(std::size_t i, std::size_t j, std::size_t k) const {
    return node_->value[(i * dim(1) + j) * dim(2) + k];
  }
  T at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return node_->value[((i * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  bool all_finite() const {
    for (T v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Reverse-mode tape: an ordered log of backward closures. Ops append in
/// execution order, so one reverse sweep is a valid topological traversal.
/// A tape and the tensors recorded on it belong to one thread of execution.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  void mark_output(Tensor<T>& t) {
    t.node()->on_tape = true;
    t.node()->tape = this;
  }

  std::size_t size() const { return steps_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays recorded steps in reverse,
  /// accumulating into grad buffers. Calling backward again without zeroing
  /// grads accumulates gradients on top of the previous ones.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ValueError("backward: loss must be scalar, got shape " +
                       shape_to_string(loss.shape()));
    if (!loss.node()->on_tape || loss.node()->tape != this)
      throw ValueError("backward: loss is detached from this tape");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  void clear() { steps_.clear(); }

 private:
  std::vector<std::function<void()>> steps_;
};

namespace detail {

template <typename T>
inline bool tracked(const Tensor<T>& t) {
  return t.node()->requires_grad || t.node()->on_tape;
}

template <typename T>
inline bool should_record(Tape<T>* tape, std::initializer_list<const Tensor<T>*> ins) {
  if (!tape) return false;
  for (auto* t : ins)
    if (tracked(**&t)) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core ops. Every op takes an optional tape; when the tape is non-null and at
// least one input participates in gradient flow, a backward closure is
// recorded.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_to_string(a.shape()) +
                     " x " + shape_to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c = Tensor<T>::zeros({m, n});
  {
    const T* av = a.value().data();
    const T* bv = b.value().data();
    T* cv = c.value().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = av[i * k + p];
        const T* brow = bv + p * n;
        T* crow = cv + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
  }
  if (detail::should_record(tape, {&a, &b})) {
    auto an = a.node(), bn = b.node(), cn = c.node();
    const bool need_a = detail::tracked(a), need_b = detail::tracked(b);
    tape->record([an, bn, cn, m, k, n, need_a, need_b] {
      if (cn->grad.empty()) return;
      const T* dc = cn->grad.data();
      if (need_a) {
        an->ensure_grad();
        T* da = an->grad.data();
        const T* bv = bn->value.data();
        // dA = dC . B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const T g = dc[i * n + j];
            if (g == T(0)) continue;
            const T* brow = bv + j;
            for (std::size_t p = 0; p < k; ++p) da[i * k + p] += g * brow[p * n];
          }
      }
      if (need_b) {
        bn->ensure_grad();
        T* db = bn->grad.data();
        const T* av = an->value.data();
        // dB = A^T . dC
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = av[i * k + p];
            if (aip == T(0)) continue;
            const T* dcrow = dc + i * n;
            T* dbrow = db + p * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
          }
      }
    });
    tape->mark_output(c);
  }
  return c;
}

/// Numerically stable softmax along `axis` (max-subtraction).
template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw ValueError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_to_string(x.shape()));
  const auto& sh = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t len = sh[axis];

  Tensor<T> y = Tensor<T>::zeros(sh);
  const T* xv = x.value().data();
  T* yv = y.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
      T sum = T(0);
      for (std::size_t l = 0; l < len; ++l) {
        const T e = std::exp(xv[base + l * inner] - mx);
        yv[base + l * inner] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < len; ++l) yv[base + l * inner] /= sum;
    }

  if (detail::should_record(tape, {&x})) {
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, outer, inner, len] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      const T* yv = yn->value.data();
      const T* dy = yn->grad.data();
      T* dx = xn->grad.data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = T(0);
          for (std::size_t l = 0; l < len; ++l)
            dot += dy[base + l * inner] * yv[base + l * inner];
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t i = base + l * inner;
            dx[i] += yv[i] * (dy[i] - dot);
          }
        }
    });
    tape->mark_output(y);
  }
  return y;
}

namespace detail {

enum class BinOp { Add, Sub, Mul };

template <typename T>
Tensor<T> binary_ew(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b, BinOp op) {
  const bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    throw ShapeError("elementwise: incompatible shapes " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()));
  const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  Tensor<T> c = Tensor<T>::zeros(out_shape);
  const std::size_t n = c.numel();
  const T* av = a.value().data();
  const T* bv = b.value().data();
  T* cv = c.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[a_scalar ? 0 : i];
    const T y = bv[b_scalar ? 0 : i];
    cv[i] = op == BinOp::Add ? x + y : op == BinOp::Sub ? x - y : x * y;
  }
  if (detail::should_record(tape, {&a, &b})) {
    auto an = a.node(), bn = b.node(), cn = c.node();
    const bool need_a = tracked(a), need_b = tracked(b);
    tape->record([an, bn, cn, n, a_scalar, b_scalar, op, need_a, need_b] {
      if (cn->grad.empty()) return;
      const T* dc = cn->grad.data();
      if (need_a) {
        an->ensure_grad();
        T* da = an->grad.data();
        for (std::size_t i = 0; i < n; ++i) {
          const T g = op == BinOp::Mul ? dc[i] * bn->value[b_scalar ? 0 : i] : dc[i];
          da[a_scalar ? 0 : i] += g;
        }
      }
      if (need_b) {
        bn->ensure_grad();
        T* db = bn->grad.data();
        for (std::size_t i = 0; i < n; ++i) {
          T g;
          if (op == BinOp::Mul)
            g = dc[i] * an->value[a_scalar ? 0 : i];
          else if (op == BinOp::Sub)
            g = -dc[i];
          else
            g = dc[i];
          db[b_scalar ? 0 : i] += g;
        }
      }
    });
    tape->mark_output(c);
  }
  return c;
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(tape, a, b, detail::BinOp::Add);
}
template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(tape, a, b, detail::BinOp::Sub);
}
template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(tape, a, b, detail::BinOp::Mul);
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T s) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) y.value()[i] = s * x.value()[i];
  if (detail::should_record(tape, {&x})) {
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, n, s] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) xn->grad[i] += s * yn->grad[i];
    });
    tape->mark_output(y);
  }
  return y;
}

/// x[..., d] + bias[d], broadcast over all leading axes.
template <typename T>
Tensor<T> add_bias(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.dim(0))
    throw ShapeError("add_bias: shapes " + shape_to_string(x.shape()) + " and " +
                     shape_to_string(bias.shape()));
  const std::size_t d = bias.dim(0), rows = x.numel() / d;
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j)
      y.value()[r * d + j] = x.value()[r * d + j] + bias.value()[j];
  if (detail::should_record(tape, {&x, &bias})) {
    auto xn = x.node(), bn = bias.node(), yn = y.node();
    const bool need_x = detail::tracked(x), need_b = detail::tracked(bias);
    tape->record([xn, bn, yn, rows, d, need_x, need_b] {
      if (yn->grad.empty()) return;
      if (need_x) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < rows * d; ++i) xn->grad[i] += yn->grad[i];
      }
      if (need_b) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) bn->grad[j] += yn->grad[r * d + j];
      }
    });
    tape->mark_output(y);
  }
  return y;
}

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) y.value()[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
  if (detail::should_record(tape, {&x})) {
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, n] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        if (xn->value[i] > T(0)) xn->grad[i] += yn->grad[i];
    });
    tape->mark_output(y);
  }
  return y;
}

/// GELU, tanh approximation:
///   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x) {
  constexpr double kC0 = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kC1 = 0.044715;
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x.value()[i]);
    const double t = std::tanh(kC0 * (v + kC1 * v * v * v));
    y.value()[i] = static_cast<T>(0.5 * v * (1.0 + t));
  }
  if (detail::should_record(tape, {&x})) {
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, n] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(xn->value[i]);
        const double u = kC0 * (v + kC1 * v * v * v);
        const double t = std::tanh(u);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC0 * (1.0 + 3.0 * kC1 * v * v);
        xn->grad[i] += static_cast<T>(d) * yn->grad[i];
      }
    });
    tape->mark_output(y);
  }
  return y;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.value()) s += v;
  Tensor<T> y = Tensor<T>::scalar(s);
  if (detail::should_record(tape, {&x})) {
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      const T g = yn->grad[0];
      for (auto& dv : xn->grad) dv += g;
    });
    tape->mark_output(y);
  }
  return y;
}

template <typename T>
Tensor<T> mean(Tape<T>* tape, const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.numel());
  Tensor<T> s = sum(tape, x);
  return scale(tape, s, inv);
}

/// Mean squared error between same-shape tensors, as one fused op.
template <typename T>
Tensor<T> mse(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mse: shapes differ " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  const std::size_t n = a.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.value()[i]) - static_cast<double>(b.value()[i]);
    acc += d * d;
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (detail::should_record(tape, {&a, &b})) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    const bool need_a = detail::tracked(a), need_b = detail::tracked(b);
    tape->record([an, bn, yn, n, need_a, need_b] {
      if (yn->grad.empty()) return;
      const T g = yn->grad[0] * T(2) / static_cast<T>(n);
      if (need_a) an->ensure_grad();
      if (need_b) bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T d = an->value[i] - bn->value[i];
        if (need_a) an->grad[i] += g * d;
        if (need_b) bn->grad[i] -= g * d;
      }
    });
    tape->mark_output(y);
  }
  return y;
}

template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                     shape_to_string(shape));
  Tensor<T> y = Tensor<T>::from_data(std::move(shape), x.value());
  if (detail::should_record(tape, {&x})) {
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
    });
    tape->mark_output(y);
  }
  return y;
}

template <typename T>
Tensor<T> transpose2d(Tape<T>* tape, const Tensor<T>& x) {
  if (x.rank() != 2)
    throw ShapeError("transpose2d: expected rank-2, got " + shape_to_string(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor<T> y = Tensor<T>::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y.value()[j * m + i] = x.value()[i * n + j];
  if (detail::should_record(tape, {&x})) {
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, m, n] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) xn->grad[i * n + j] += yn->grad[j * m + i];
    });
    tape->mark_output(y);
  }
  return y;
}

/// Concatenate along axis 0; all trailing dims must match.
template <typename T>
Tensor<T> concat0(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ValueError("concat0: no inputs");
  Shape out = parts[0].shape();
  std::size_t total0 = 0;
  for (const auto& p : parts) {
    if (p.rank() != out.size())
      throw ShapeError("concat0: rank mismatch");
    for (std::size_t i = 1; i < out.size(); ++i)
      if (p.shape()[i] != out[i]) throw ShapeError("concat0: trailing dims differ");
    total0 += p.shape()[0];
  }
  out[0] = total0;
  Tensor<T> y = Tensor<T>::zeros(out);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().begin(), p.value().end(), y.value().begin() + off);
    off += p.numel();
  }
  bool rec = false;
  if (tape)
    for (const auto& p : parts)
      if (detail::tracked(p)) rec = true;
  if (rec) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto yn = y.node();
    tape->record([nodes, yn] {
      if (yn->grad.empty()) return;
      std::size_t off = 0;
      for (auto& nd : nodes) {
        if (nd->requires_grad || nd->on_tape) {
          nd->ensure_grad();
          for (std::size_t i = 0; i < nd->value.size(); ++i) nd->grad[i] += yn->grad[off + i];
        }
        off += nd->value.size();
      }
    });
    tape->mark_output(y);
  }
  return y;
}

/// Concatenate rank-2 tensors along the last axis.
template <typename T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ValueError("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.dim(1);
  }
  Tensor<T> y = Tensor<T>::zeros({rows, cols});
  std::size_t coff = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(p.value().begin() + r * pc, p.value().begin() + (r + 1) * pc,
                y.value().begin() + r * cols + coff);
    coff += pc;
  }
  bool rec = false;
  if (tape)
    for (const auto& p : parts)
      if (detail::tracked(p)) rec = true;
  if (rec) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      widths.push_back(p.dim(1));
    }
    auto yn = y.node();
    tape->record([nodes, widths, yn, rows, cols] {
      if (yn->grad.empty()) return;
      std::size_t coff = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        auto& nd = nodes[pi];
        const std::size_t pc = widths[pi];
        if (nd->requires_grad || nd->on_tape) {
          nd->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < pc; ++j)
              nd->grad[r * pc + j] += yn->grad[r * cols + coff + j];
        }
        coff += pc;
      }
    });
    tape->mark_output(y);
  }
  return y;
}

/// Rows [start, start+count) along axis 0.
template <typename T>
Tensor<T> slice_rows(Tape<T>* tape, const Tensor<T>& x, std::size_t start, std::size_t count) {
  if (x.rank() < 1 || start + count > x.dim(0))
    throw ShapeError("slice_rows: [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") out of " + shape_to_string(x.shape()));
  Shape out = x.shape();
  out[0] = count;
  const std::size_t rowsz = x.numel() / x.dim(0);
  Tensor<T> y = Tensor<T>::zeros(out);
  std::copy(x.value().begin() + start * rowsz, x.value().begin() + (start + count) * rowsz,
            y.value().begin());
  if (detail::should_record(tape, {&x})) {
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, start, rowsz, count] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < count * rowsz; ++i)
        xn->grad[start * rowsz + i] += yn->grad[i];
    });
    tape->mark_output(y);
  }
  return y;
}

/// Pure data movement: out[i] = x[map[i]]. Gradients scatter-add through the
/// map, so bijective maps (rolls, window partitions, merges) route exactly.
template <typename T>
Tensor<T> gather_map(Tape<T>* tape, const Tensor<T>& x, std::shared_ptr<const std::vector<std::size_t>> map,
                     Shape out_shape) {
  if (shape_numel(out_shape) != map->size())
    throw ShapeError("gather_map: map length does not match output shape");
  Tensor<T> y = Tensor<T>::zeros(std::move(out_shape));
  const auto& mp = *map;
  for (std::size_t i = 0; i < mp.size(); ++i) y.value()[i] = x.value()[mp[i]];
  if (detail::should_record(tape, {&x})) {
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, map] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      const auto& mp = *map;
      for (std::size_t i = 0; i < mp.size(); ++i) xn->grad[mp[i]] += yn->grad[i];
    });
    tape->mark_output(y);
  }
  return y;
}

template <typename T>
Tensor<T> gather_map(Tape<T>* tape, const Tensor<T>& x, std::vector<std::size_t> map,
                     Shape out_shape) {
  return gather_map(tape, x, std::make_shared<const std::vector<std::size_t>>(std::move(map)),
                    std::move(out_shape));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.
// ---------------------------------------------------------------------------

/// Max per-coordinate relative error between the analytic gradient of the
/// scalar function f at x and central finite differences with step eps.
/// Coordinate error is |a - n| / (|a| + |n| + 1e-12); pairs where both sides
/// are below 1e-8 in magnitude count as exact (the relative form is
/// meaningless for two numerical zeros).
template <typename T>
double finite_diff_check(const std::function<Tensor<T>(Tape<T>*, const Tensor<T>&)>& f,
                         Tensor<T> x, double eps) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tape<T> tape;
  Tensor<T> loss = f(&tape, x);
  if (loss.numel() != 1) throw ValueError("finite_diff_check: f must be scalar-valued");
  tape.backward(loss);
  std::vector<T> analytic = x.grad();

  double max_err = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = x.value()[i];
    x.value()[i] = orig + static_cast<T>(eps);
    const double fp = static_cast<double>(f(nullptr, x).item());
    x.value()[i] = orig - static_cast<T>(eps);
    const double fm = static_cast<double>(f(nullptr, x).item());
    x.value()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    if (std::abs(a) < 1e-8 && std::abs(numeric) < 1e-8) continue;
    const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace caetswin
