#pragma once

// Dense 64-bit float tensors with reverse-mode automatic differentiation.
//
// Forward ops run eagerly. When a Tape is active on the current thread and an
// operand participates in differentiation, the op appends a backward rule to
// the tape. Tape::backward walks the recorded rules in reverse creation order
// (which is a topological order by construction) and accumulates gradients
// into every participating leaf.
//
// Reductions use fixed serial loops, so forward results are bit-identical
// across runs. Matrix products are delegated to Eigen maps over the flat
// buffers; Eigen's sequential kernels are deterministic for a fixed build.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "blockdrop/common.hpp"

namespace blockdrop {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw DimensionError("tensor extents must be positive");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;  // trainable leaf
  bool on_tape = false;        // produced by a recorded op

  bool participates() const { return requires_grad || on_tape; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

using DataPtr = std::shared_ptr<TensorData>;

struct Tape;
inline thread_local Tape* g_active_tape = nullptr;

struct TapeEntry {
  DataPtr out;
  std::function<void()> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    auto d = std::make_shared<detail::TensorData>();
    d->shape = std::move(shape);
    d->values = std::move(values);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 1.0, requires_grad);
  }
  static Tensor scalar(double value) { return from_data({1}, {value}); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int dim(std::size_t axis) const { return d_->shape.at(axis); }
  std::size_t ndim() const { return d_->shape.size(); }
  std::size_t numel() const { return d_->values.size(); }

  std::span<const double> values() const { return d_->values; }
  // In-place access for initialization and optimizer updates. Never call on a
  // tensor that is shared with a model that must stay frozen.
  std::span<double> mutable_values() { return d_->values; }

  double value() const {
    if (numel() != 1) throw ContractError("value() requires a single-element tensor");
    return d_->values[0];
  }
  double at(std::initializer_list<int> idx) const {
    const Shape& s = d_->shape;
    if (idx.size() != s.size()) throw DimensionError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (int i : idx) {
      if (i < 0 || i >= s[axis]) throw DimensionError("index out of range");
      flat = flat * static_cast<std::size_t>(s[axis]) + static_cast<std::size_t>(i);
      ++axis;
    }
    return d_->values[flat];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }
  bool has_grad() const { return !d_->grad.empty(); }
  std::span<const double> grad() const { return d_->grad; }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }
  std::span<double> mutable_grad() {
    d_->ensure_grad();
    return d_->grad;
  }

  // Deep copy of values; grad and tape state are not carried over.
  Tensor clone() const {
    auto d = std::make_shared<detail::TensorData>();
    d->shape = d_->shape;
    d->values = d_->values;
    d->requires_grad = d_->requires_grad;
    return Tensor(std::move(d));
  }

  bool shares_data(const Tensor& other) const { return d_ == other.d_; }

  detail::DataPtr data_handle() const { return d_; }
  explicit Tensor(detail::DataPtr d) : d_(std::move(d)) {}

 private:
  detail::DataPtr d_;
};

namespace detail {

// Record of one training step's forward pass.
struct Tape {
  std::vector<TapeEntry> entries;
};

}  // namespace detail

// Disables recording for its lifetime; inference helpers use this so they are
// safe to call from inside a training step.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::g_active_tape) { detail::g_active_tape = nullptr; }
  ~NoGradScope() { detail::g_active_tape = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  detail::Tape* previous_;
};

class Tape {
 public:
  class Scope {
   public:
    explicit Scope(detail::Tape* tape) : previous_(detail::g_active_tape) {
      detail::g_active_tape = tape;
    }
    ~Scope() { detail::g_active_tape = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    detail::Tape* previous_;
  };

  // Ops executed while the scope is alive are recorded on this tape.
  Scope activate() { return Scope(&tape_); }

  std::size_t size() const { return tape_.entries.size(); }
  void clear() { tape_.entries.clear(); }

  // Accumulates d(loss)/d(leaf) into every participating leaf's grad.
  // Interior gradients are rebuilt from scratch on each call, so repeated
  // calls accumulate exactly one extra copy of the gradient into the leaves.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward requires a scalar loss");
    const auto& handle = loss.data_handle();
    if (!handle->on_tape) throw ContractError("loss was not produced on this tape");
    bool found = false;
    for (auto& e : tape_.entries) {
      e.out->grad.assign(e.out->values.size(), 0.0);
      if (e.out == handle) found = true;
    }
    if (!found) throw ContractError("loss was not produced on this tape");
    handle->grad[0] = 1.0;
    for (auto it = tape_.entries.rbegin(); it != tape_.entries.rend(); ++it) {
      it->backward();
    }
  }

 private:
  detail::Tape tape_;
};

namespace detail {

inline bool recording() { return g_active_tape != nullptr; }

inline void record(DataPtr out, std::function<void()> backward) {
  out->on_tape = true;
  g_active_tape->entries.push_back({std::move(out), std::move(backward)});
}

inline void check_finite(const std::vector<double>& values, const char* op) {
#ifndef NDEBUG
  for (double v : values) {
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite value produced by ") + op);
  }
#else
  (void)values;
  (void)op;
#endif
}

inline DataPtr make_out(Shape shape, std::vector<double> values) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  return d;
}

using EMat = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CEMat = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix ops (2-D)

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw DimensionError("matmul expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  auto da = a.data_handle(), db = b.data_handle();
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  {
    detail::CEMat A(da->values.data(), m, k), B(db->values.data(), k, n);
    detail::EMat C(out.data(), m, n);
    C.noalias() = A * B;
  }
  detail::check_finite(out, "matmul");
  auto dout = detail::make_out({m, n}, std::move(out));
  if (detail::recording() && (da->participates() || db->participates())) {
    detail::record(dout, [da, db, dout, m, k, n] {
      detail::CEMat G(dout->grad.data(), m, n);
      if (da->participates()) {
        da->ensure_grad();
        detail::EMat dA(da->grad.data(), m, k);
        detail::CEMat B(db->values.data(), k, n);
        dA.noalias() += G * B.transpose();
      }
      if (db->participates()) {
        db->ensure_grad();
        detail::EMat dB(db->grad.data(), k, n);
        detail::CEMat A(da->values.data(), m, k);
        dB.noalias() += A.transpose() * G;
      }
    });
  }
  return Tensor(std::move(dout));
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("transpose expects a 2-D tensor");
  const int m = a.dim(0), n = a.dim(1);
  auto da = a.data_handle();
  std::vector<double> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j) * m + i] = da->values[static_cast<std::size_t>(i) * n + j];
  auto dout = detail::make_out({n, m}, std::move(out));
  if (detail::recording() && da->participates()) {
    detail::record(dout, [da, dout, m, n] {
      da->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          da->grad[static_cast<std::size_t>(i) * n + j] +=
              dout->grad[static_cast<std::size_t>(j) * m + i];
    });
  }
  return Tensor(std::move(dout));
}

// ---------------------------------------------------------------------------
// Elementwise binary ops. The second operand may have a shape equal to a
// trailing suffix of the first (leading-dimension broadcast), e.g. adding a
// [d] bias to a [T x d] activation. No other broadcast is supported.

namespace detail {

struct BroadcastPlan {
  std::size_t rows;    // number of leading repetitions of the smaller operand
  std::size_t cols;    // numel of the smaller operand
  bool swapped;        // true when `a` is the smaller operand
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b) {
  auto is_suffix = [](const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i)
      if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
  };
  if (a == b) return {1, shape_numel(a), false};
  if (is_suffix(b, a)) return {shape_numel(a) / shape_numel(b), shape_numel(b), false};
  if (is_suffix(a, b)) return {shape_numel(b) / shape_numel(a), shape_numel(a), true};
  throw DimensionError("incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// fwd(x, y); dfdx/dfdy get (x, y, out, g) and return the partial times g.
template <class Fwd, class DfdA, class DfdB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DfdA dfda,
                 DfdB dfdb) {
  auto da = a.data_handle(), db = b.data_handle();
  BroadcastPlan plan = broadcast_plan(da->shape, db->shape);
  const Shape& out_shape = plan.swapped ? db->shape : da->shape;
  const std::vector<double>& big = plan.swapped ? db->values : da->values;
  const std::vector<double>& small = plan.swapped ? da->values : db->values;
  std::vector<double> out(big.size());
  for (std::size_t r = 0; r < plan.rows; ++r) {
    std::size_t base = r * plan.cols;
    for (std::size_t c = 0; c < plan.cols; ++c) {
      double x = plan.swapped ? small[c] : big[base + c];
      double y = plan.swapped ? big[base + c] : small[c];
      out[base + c] = fwd(x, y);
    }
  }
  check_finite(out, name);
  auto dout = make_out(out_shape, std::move(out));
  if (recording() && (da->participates() || db->participates())) {
    record(dout, [da, db, dout, plan, dfda, dfdb] {
      const std::vector<double>& g = dout->grad;
      bool need_a = da->participates(), need_b = db->participates();
      if (need_a) da->ensure_grad();
      if (need_b) db->ensure_grad();
      for (std::size_t r = 0; r < plan.rows; ++r) {
        std::size_t base = r * plan.cols;
        for (std::size_t c = 0; c < plan.cols; ++c) {
          std::size_t ai = plan.swapped ? c : base + c;
          std::size_t bi = plan.swapped ? base + c : c;
          double x = da->values[ai], y = db->values[bi];
          double o = dout->values[base + c], gg = g[base + c];
          if (need_a) da->grad[ai] += dfda(x, y, o, gg);
          if (need_b) db->grad[bi] += dfdb(x, y, o, gg);
        }
      }
    });
  }
  return Tensor(std::move(dout));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g) { return g; },
      [](double, double, double, double g) { return g; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g) { return g; },
      [](double, double, double, double g) { return -g; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double, double g) { return g * y; },
      [](double x, double, double, double g) { return g * x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double, double g) { return g / y; },
      [](double x, double y, double, double g) { return -g * x / (y * y); });
}
// Ties route the gradient to the first operand.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double, double g) { return x <= y ? g : 0.0; },
      [](double x, double y, double, double g) { return x <= y ? 0.0 : g; });
}
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double, double g) { return x >= y ? g : 0.0; },
      [](double x, double y, double, double g) { return x >= y ? 0.0 : g; });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
  auto da = a.data_handle();
  std::vector<double> out(da->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(da->values[i]);
  check_finite(out, name);
  auto dout = make_out(da->shape, std::move(out));
  if (recording() && da->participates()) {
    record(dout, [da, dout, bwd] {
      da->ensure_grad();
      for (std::size_t i = 0; i < da->grad.size(); ++i)
        da->grad[i] += bwd(da->values[i], dout->values[i], dout->grad[i]);
    });
  }
  return Tensor(std::move(dout));
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline Tensor gelu(const Tensor& a) {
  using detail::kGeluA;
  using detail::kGeluC;
  return detail::unary_op(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
      [](double x, double, double g) {
        double u = kGeluC * (x + kGeluA * x * x * x);
        double t = std::tanh(u);
        double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
      });
}
inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y, double g) { return g * y; });
}
inline Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (v <= 0.0) throw DomainError("log requires strictly positive inputs");
  return detail::unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double, double g) { return g / x; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      "square", a, [](double x) { return x * x; },
      [](double x, double, double g) { return 2.0 * x * g; });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y, double g) { return g * (1.0 - y * y); });
}
inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      "softplus", a,
      [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double, double g) { return g / (1.0 + std::exp(-x)); });
}
inline Tensor neg(const Tensor& a) {
  return detail::unary_op(
      "neg", a, [](double x) { return -x; }, [](double, double, double g) { return -g; });
}
inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(
      "scale", a, [c](double x) { return c * x; }, [c](double, double, double g) { return c * g; });
}
inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double, double, double g) { return g; });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace detail {

struct AxisPlan {
  std::size_t outer, extent, inner;
};

inline AxisPlan axis_plan(const Shape& shape, int axis) {
  int nd = static_cast<int>(shape.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw DimensionError("axis out of range");
  AxisPlan p{1, static_cast<std::size_t>(shape[axis]), 1};
  for (int i = 0; i < axis; ++i) p.outer *= static_cast<std::size_t>(shape[i]);
  for (int i = axis + 1; i < nd; ++i) p.inner *= static_cast<std::size_t>(shape[i]);
  return p;
}

}  // namespace detail

inline Tensor softmax(const Tensor& a, int axis = -1) {
  auto da = a.data_handle();
  detail::AxisPlan p = detail::axis_plan(da->shape, axis);
  std::vector<double> out(da->values.size());
  for (std::size_t o = 0; o < p.outer; ++o) {
    for (std::size_t in = 0; in < p.inner; ++in) {
      std::size_t base = o * p.extent * p.inner + in;
      double mx = da->values[base];
      for (std::size_t c = 1; c < p.extent; ++c)
        mx = std::max(mx, da->values[base + c * p.inner]);
      double sum = 0.0;
      for (std::size_t c = 0; c < p.extent; ++c) {
        double e = std::exp(da->values[base + c * p.inner] - mx);
        out[base + c * p.inner] = e;
        sum += e;
      }
      for (std::size_t c = 0; c < p.extent; ++c) out[base + c * p.inner] /= sum;
    }
  }
  detail::check_finite(out, "softmax");
  auto dout = detail::make_out(da->shape, std::move(out));
  if (detail::recording() && da->participates()) {
    detail::record(dout, [da, dout, p] {
      da->ensure_grad();
      for (std::size_t o = 0; o < p.outer; ++o) {
        for (std::size_t in = 0; in < p.inner; ++in) {
          std::size_t base = o * p.extent * p.inner + in;
          double dot = 0.0;
          for (std::size_t c = 0; c < p.extent; ++c) {
            std::size_t i = base + c * p.inner;
            dot += dout->grad[i] * dout->values[i];
          }
          for (std::size_t c = 0; c < p.extent; ++c) {
            std::size_t i = base + c * p.inner;
            da->grad[i] += dout->values[i] * (dout->grad[i] - dot);
          }
        }
      }
    });
  }
  return Tensor(std::move(dout));
}

inline Tensor log_softmax(const Tensor& a, int axis = -1) {
  auto da = a.data_handle();
  detail::AxisPlan p = detail::axis_plan(da->shape, axis);
  std::vector<double> out(da->values.size());
  for (std::size_t o = 0; o < p.outer; ++o) {
    for (std::size_t in = 0; in < p.inner; ++in) {
      std::size_t base = o * p.extent * p.inner + in;
      double mx = da->values[base];
      for (std::size_t c = 1; c < p.extent; ++c)
        mx = std::max(mx, da->values[base + c * p.inner]);
      double sum = 0.0;
      for (std::size_t c = 0; c < p.extent; ++c)
        sum += std::exp(da->values[base + c * p.inner] - mx);
      double lse = mx + std::log(sum);
      for (std::size_t c = 0; c < p.extent; ++c)
        out[base + c * p.inner] = da->values[base + c * p.inner] - lse;
    }
  }
  detail::check_finite(out, "log_softmax");
  auto dout = detail::make_out(da->shape, std::move(out));
  if (detail::recording() && da->participates()) {
    detail::record(dout, [da, dout, p] {
      da->ensure_grad();
      for (std::size_t o = 0; o < p.outer; ++o) {
        for (std::size_t in = 0; in < p.inner; ++in) {
          std::size_t base = o * p.extent * p.inner + in;
          double gsum = 0.0;
          for (std::size_t c = 0; c < p.extent; ++c) gsum += dout->grad[base + c * p.inner];
          for (std::size_t c = 0; c < p.extent; ++c) {
            std::size_t i = base + c * p.inner;
            da->grad[i] += dout->grad[i] - std::exp(dout->values[i]) * gsum;
          }
        }
      }
    });
  }
  return Tensor(std::move(dout));
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  auto dx = x.data_handle(), dg = gain.data_handle(), db = bias.data_handle();
  if (x.ndim() < 1) throw DimensionError("layer_norm requires at least 1-D input");
  const std::size_t d = static_cast<std::size_t>(x.shape().back());
  if (dg->values.size() != d || db->values.size() != d)
    throw DimensionError("layer_norm gain/bias must match the last axis extent");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> norm(x.numel());   // pre-affine normalized values
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = dx->values.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      double n = (row[j] - mean) * is;
      norm[r * d + j] = n;
      out[r * d + j] = n * dg->values[j] + db->values[j];
    }
  }
  detail::check_finite(out, "layer_norm");
  auto dout = detail::make_out(dx->shape, std::move(out));
  if (detail::recording() && (dx->participates() || dg->participates() || db->participates())) {
    auto norm_keep = std::make_shared<std::vector<double>>(std::move(norm));
    auto is_keep = std::make_shared<std::vector<double>>(std::move(inv_std));
    detail::record(dout, [dx, dg, db, dout, norm_keep, is_keep, rows, d] {
      const std::vector<double>& g = dout->grad;
      bool need_x = dx->participates(), need_g = dg->participates(), need_b = db->participates();
      if (need_x) dx->ensure_grad();
      if (need_g) dg->ensure_grad();
      if (need_b) db->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* n = norm_keep->data() + r * d;
        const double* gr = g.data() + r * d;
        if (need_g || need_b) {
          for (std::size_t j = 0; j < d; ++j) {
            if (need_g) dg->grad[j] += gr[j] * n[j];
            if (need_b) db->grad[j] += gr[j];
          }
        }
        if (need_x) {
          double mean_dn = 0.0, mean_dn_n = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            double dn = gr[j] * dg->values[j];
            mean_dn += dn;
            mean_dn_n += dn * n[j];
          }
          mean_dn /= static_cast<double>(d);
          mean_dn_n /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            double dn = gr[j] * dg->values[j];
            dx->grad[r * d + j] += (*is_keep)[r] * (dn - mean_dn - n[j] * mean_dn_n);
          }
        }
      }
    });
  }
  return Tensor(std::move(dout));
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  auto da = a.data_handle();
  double s = 0.0;
  for (double v : da->values) s += v;
  auto dout = detail::make_out({1}, {s});
  if (detail::recording() && da->participates()) {
    detail::record(dout, [da, dout] {
      da->ensure_grad();
      double g = dout->grad[0];
      for (double& gi : da->grad) gi += g;
    });
  }
  return Tensor(std::move(dout));
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Structural ops (2-D)

inline Tensor slice_cols(const Tensor& a, int start, int count) {
  if (a.ndim() != 2) throw DimensionError("slice_cols expects a 2-D tensor");
  const int m = a.dim(0), n = a.dim(1);
  if (start < 0 || count <= 0 || start + count > n)
    throw DimensionError("slice_cols range out of bounds");
  auto da = a.data_handle();
  std::vector<double> out(static_cast<std::size_t>(m) * count);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < count; ++j)
      out[static_cast<std::size_t>(i) * count + j] =
          da->values[static_cast<std::size_t>(i) * n + start + j];
  auto dout = detail::make_out({m, count}, std::move(out));
  if (detail::recording() && da->participates()) {
    detail::record(dout, [da, dout, m, n, start, count] {
      da->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < count; ++j)
          da->grad[static_cast<std::size_t>(i) * n + start + j] +=
              dout->grad[static_cast<std::size_t>(i) * count + j];
    });
  }
  return Tensor(std::move(dout));
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols requires at least one part");
  const int m = parts[0].dim(0);
  int n = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != m)
      throw DimensionError("concat_cols parts must be 2-D with equal row counts");
    n += p.dim(1);
  }
  std::vector<detail::DataPtr> handles;
  handles.reserve(parts.size());
  bool any = false;
  for (const Tensor& p : parts) {
    handles.push_back(p.data_handle());
    any = any || handles.back()->participates();
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  int col = 0;
  for (const auto& h : handles) {
    int w = h->shape[1];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out[static_cast<std::size_t>(i) * n + col + j] =
            h->values[static_cast<std::size_t>(i) * w + j];
    col += w;
  }
  auto dout = detail::make_out({m, n}, std::move(out));
  if (detail::recording() && any) {
    detail::record(dout, [handles, dout, m, n] {
      int col = 0;
      for (const auto& h : handles) {
        int w = h->shape[1];
        if (h->participates()) {
          h->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              h->grad[static_cast<std::size_t>(i) * w + j] +=
                  dout->grad[static_cast<std::size_t>(i) * n + col + j];
        }
        col += w;
      }
    });
  }
  return Tensor(std::move(dout));
}

// Averages groups of `factor` consecutive rows; row count must divide evenly.
inline Tensor avg_pool_rows(const Tensor& a, int factor) {
  if (a.ndim() != 2) throw DimensionError("avg_pool_rows expects a 2-D tensor");
  const int m = a.dim(0), n = a.dim(1);
  if (factor <= 0 || m % factor != 0)
    throw DimensionError("avg_pool_rows factor must evenly divide the row count");
  const int mo = m / factor;
  auto da = a.data_handle();
  std::vector<double> out(static_cast<std::size_t>(mo) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    int r = i / factor;
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(r) * n + j] += da->values[static_cast<std::size_t>(i) * n + j];
  }
  const double inv = 1.0 / factor;
  for (double& v : out) v *= inv;
  auto dout = detail::make_out({mo, n}, std::move(out));
  if (detail::recording() && da->participates()) {
    detail::record(dout, [da, dout, m, n, factor, inv] {
      da->ensure_grad();
      for (int i = 0; i < m; ++i) {
        int r = i / factor;
        for (int j = 0; j < n; ++j)
          da->grad[static_cast<std::size_t>(i) * n + j] +=
              dout->grad[static_cast<std::size_t>(r) * n + j] * inv;
      }
    });
  }
  return Tensor(std::move(dout));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

}  // namespace blockdrop
