// Dense tensors with a reverse-mode differentiation tape.
//
// TensorT<T> is a shared handle to an n-d row-major buffer. Operations run
// eagerly; when a TapeT<T> is supplied and an input tracks gradients, the op
// pushes a backward closure onto the tape. TapeT::backward replays the
// closures in reverse record order and accumulates into .grad buffers.
//
// T is float for training and double for finite-difference gradient checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "advseg/common.hpp"

namespace advseg {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

template <typename T>
struct TensorStorageT {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;          // empty until first needed
  bool requires_grad = false;   // leaf flag set by the user
  bool tracked = false;         // true if backward must reach this tensor
  std::string name;             // diagnostic label (parameters)

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class TensorT {
 public:
  using Storage = TensorStorageT<T>;

  TensorT() = default;

  static TensorT zeros(const Shape& shape, bool requires_grad = false) {
    validate_shape(shape);
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = shape;
    t.s_->data.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
    t.s_->requires_grad = requires_grad;
    t.s_->tracked = requires_grad;
    return t;
  }

  static TensorT full(const Shape& shape, T value, bool requires_grad = false) {
    TensorT t = zeros(shape, requires_grad);
    std::fill(t.s_->data.begin(), t.s_->data.end(), value);
    return t;
  }

  static TensorT from(const Shape& shape, std::vector<T> values, bool requires_grad = false) {
    validate_shape(shape);
    ADVSEG_CHECK(shape_numel(shape) == static_cast<std::int64_t>(values.size()), ShapeError,
                 "tensor_from: shape ", shape_str(shape), " needs ", shape_numel(shape),
                 " values, got ", values.size());
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = shape;
    t.s_->data = std::move(values);
    t.s_->requires_grad = requires_grad;
    t.s_->tracked = requires_grad;
    return t;
  }

  static TensorT scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(s_->data.size()); }

  T* data() { return s_->data.data(); }
  const T* data() const { return s_->data.data(); }
  std::vector<T>& data_vec() { return s_->data; }
  const std::vector<T>& data_vec() const { return s_->data; }

  T* grad() {
    s_->ensure_grad();
    return s_->grad.data();
  }
  const std::vector<T>& grad_vec() const { return s_->grad; }
  bool has_grad() const { return !s_->grad.empty(); }
  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool v) {
    s_->requires_grad = v;
    s_->tracked = v;
  }
  bool tracked() const { return s_->tracked; }

  const std::string& name() const { return s_->name; }
  void set_name(std::string n) { s_->name = std::move(n); }

  // Scalar fetch; requires numel() == 1.
  T value() const {
    ADVSEG_CHECK(numel() == 1, ContractError, "value(): tensor has ", numel(), " elements");
    return s_->data[0];
  }

  T& at(std::initializer_list<int> idx) { return s_->data[offset(idx)]; }
  T at(std::initializer_list<int> idx) const { return s_->data[offset(idx)]; }

  std::shared_ptr<Storage> storage() const { return s_; }

  // Deep copy of data (grad not copied); keeps requires_grad and name.
  TensorT clone() const {
    TensorT t = from(s_->shape, s_->data, s_->requires_grad);
    t.s_->name = s_->name;
    return t;
  }

  bool all_finite() const {
    for (T v : s_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  static void validate_shape(const Shape& shape) {
    ADVSEG_CHECK(!shape.empty(), ShapeError, "tensor shape must have rank >= 1");
    for (int d : shape)
      ADVSEG_CHECK(d >= 1, ShapeError, "tensor shape ", shape_str(shape),
                   " has a non-positive dimension");
  }

  std::size_t offset(std::initializer_list<int> idx) const {
    std::size_t off = 0;
    std::size_t axis = 0;
    for (int i : idx) {
      off = off * static_cast<std::size_t>(s_->shape[axis]) + static_cast<std::size_t>(i);
      ++axis;
    }
    return off;
  }

  std::shared_ptr<Storage> s_;
};

// Matches the spec-facing constructor name.
template <typename T>
TensorT<T> tensor_from(const Shape& shape, std::vector<T> values, bool requires_grad = false) {
  return TensorT<T>::from(shape, std::move(values), requires_grad);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename T>
class TapeT {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::shared_ptr<TensorStorageT<T>> out, BackwardFn fn) {
    nodes_.push_back(Node{std::move(out), std::move(fn)});
  }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays every node once, newest first.
  // Gradients persist only on leaf (requires_grad) tensors; intermediate
  // buffers are dropped afterwards, so calling backward again accumulates
  // one more clean pass into the leaves.
  void backward(const TensorT<T>& loss) {
    ADVSEG_CHECK(loss.defined() && loss.numel() == 1, ContractError,
                 "backward: loss must be a scalar tensor");
    auto st = loss.storage();
    st->ensure_grad();
    st->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    for (auto& node : nodes_)
      if (!node.out->requires_grad) node.out->grad.clear();
  }

 private:
  struct Node {
    std::shared_ptr<TensorStorageT<T>> out;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

namespace detail {

// True when this op must record a backward closure.
template <typename T, typename... Ts>
bool needs_tape(TapeT<T>* tape, const Ts&... inputs) {
  if (!tape) return false;
  return (... || inputs.tracked());
}

template <typename T>
void mark_output(TapeT<T>* tape, TensorT<T>& out, bool record) {
  (void)tape;
  if (record) out.storage()->tracked = true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

enum class UnaryKind { Relu, LeakyRelu, Sigmoid, Log, Exp, Neg };

template <typename T>
TensorT<T> unary(TapeT<T>* tape, const TensorT<T>& x, UnaryKind kind, T slope = T(0)) {
  const std::int64_t n = x.numel();
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  switch (kind) {
    case UnaryKind::Relu:
      for (std::int64_t i = 0; i < n; ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
      break;
    case UnaryKind::LeakyRelu:
      for (std::int64_t i = 0; i < n; ++i) od[i] = xd[i] > T(0) ? xd[i] : slope * xd[i];
      break;
    case UnaryKind::Sigmoid:
      for (std::int64_t i = 0; i < n; ++i) od[i] = T(1) / (T(1) + std::exp(-xd[i]));
      break;
    case UnaryKind::Log:
      for (std::int64_t i = 0; i < n; ++i) {
        ADVSEG_CHECK(xd[i] > T(0), NumericError, "log: non-positive input ", xd[i],
                     " at index ", i);
        od[i] = std::log(xd[i]);
      }
      break;
    case UnaryKind::Exp:
      for (std::int64_t i = 0; i < n; ++i) od[i] = std::exp(xd[i]);
      break;
    case UnaryKind::Neg:
      for (std::int64_t i = 0; i < n; ++i) od[i] = -xd[i];
      break;
  }

  if (detail::needs_tape(tape, x)) {
    detail::mark_output(tape, out, true);
    auto xs = x.storage();
    auto os = out.storage();
    tape->record(os, [xs, os, kind, slope]() {
      xs->ensure_grad();
      const std::size_t n = xs->data.size();
      const T* g = os->grad.empty() ? nullptr : os->grad.data();
      if (!g) return;
      T* gx = xs->grad.data();
      const T* xd = xs->data.data();
      const T* od = os->data.data();
      switch (kind) {
        case UnaryKind::Relu:
          for (std::size_t i = 0; i < n; ++i) gx[i] += xd[i] > T(0) ? g[i] : T(0);
          break;
        case UnaryKind::LeakyRelu:
          // derivative at exactly 0 is the slope
          for (std::size_t i = 0; i < n; ++i) gx[i] += xd[i] > T(0) ? g[i] : slope * g[i];
          break;
        case UnaryKind::Sigmoid:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * od[i] * (T(1) - od[i]);
          break;
        case UnaryKind::Log:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / xd[i];
          break;
        case UnaryKind::Exp:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * od[i];
          break;
        case UnaryKind::Neg:
          for (std::size_t i = 0; i < n; ++i) gx[i] -= g[i];
          break;
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& x) {
  return unary(tape, x, UnaryKind::Relu);
}
template <typename T>
TensorT<T> leaky_relu(TapeT<T>* tape, const TensorT<T>& x, T slope) {
  return unary(tape, x, UnaryKind::LeakyRelu, slope);
}
template <typename T>
TensorT<T> sigmoid(TapeT<T>* tape, const TensorT<T>& x) {
  return unary(tape, x, UnaryKind::Sigmoid);
}
template <typename T>
TensorT<T> log(TapeT<T>* tape, const TensorT<T>& x) {
  return unary(tape, x, UnaryKind::Log);
}
template <typename T>
TensorT<T> exp(TapeT<T>* tape, const TensorT<T>& x) {
  return unary(tape, x, UnaryKind::Exp);
}
template <typename T>
TensorT<T> neg(TapeT<T>* tape, const TensorT<T>& x) {
  return unary(tape, x, UnaryKind::Neg);
}

// clamp passes gradient through coordinates that were inside [lo, hi].
template <typename T>
TensorT<T> clamp(TapeT<T>* tape, const TensorT<T>& x, T lo, T hi) {
  const std::int64_t n = x.numel();
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  for (std::int64_t i = 0; i < n; ++i) od[i] = std::min(hi, std::max(lo, xd[i]));
  if (detail::needs_tape(tape, x)) {
    detail::mark_output(tape, out, true);
    auto xs = x.storage();
    auto os = out.storage();
    tape->record(os, [xs, os, lo, hi]() {
      if (os->grad.empty()) return;
      xs->ensure_grad();
      const std::size_t n = xs->data.size();
      for (std::size_t i = 0; i < n; ++i)
        if (xs->data[i] >= lo && xs->data[i] <= hi) xs->grad[i] += os->grad[i];
    });
  }
  return out;
}

// y = c * x for a plain constant c.
template <typename T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& x, T c) {
  const std::int64_t n = x.numel();
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  for (std::int64_t i = 0; i < n; ++i) od[i] = c * xd[i];
  if (detail::needs_tape(tape, x)) {
    detail::mark_output(tape, out, true);
    auto xs = x.storage();
    auto os = out.storage();
    tape->record(os, [xs, os, c]() {
      if (os->grad.empty()) return;
      xs->ensure_grad();
      const std::size_t n = xs->data.size();
      for (std::size_t i = 0; i < n; ++i) xs->grad[i] += c * os->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops; b may broadcast along singleton dimensions.
// ---------------------------------------------------------------------------

enum class BinaryKind { Add, Sub, Mul, Div };

namespace detail {

// Strides of b against the output shape, 0 where b is broadcast.
inline std::vector<std::int64_t> broadcast_strides(const Shape& out, const Shape& b) {
  ADVSEG_CHECK(out.size() == b.size(), ShapeError, "binary: rank mismatch ", shape_str(out),
               " vs ", shape_str(b));
  std::vector<std::int64_t> strides(b.size());
  std::int64_t s = 1;
  for (int i = static_cast<int>(b.size()) - 1; i >= 0; --i) {
    strides[static_cast<std::size_t>(i)] = s;
    s *= b[static_cast<std::size_t>(i)];
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] == out[i]) continue;
    ADVSEG_CHECK(b[i] == 1, ShapeError, "binary: shape ", shape_str(b),
                 " does not broadcast against ", shape_str(out));
    strides[i] = 0;
  }
  return strides;
}

// Calls fn(out_index, b_index) for every element of `out`.
template <typename Fn>
void broadcast_walk(const Shape& out, const std::vector<std::int64_t>& b_strides, Fn&& fn) {
  const int rank = static_cast<int>(out.size());
  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  const std::int64_t n = shape_numel(out);
  std::int64_t boff = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, boff);
    for (int a = rank - 1; a >= 0; --a) {
      auto ua = static_cast<std::size_t>(a);
      ++idx[ua];
      boff += b_strides[ua];
      if (idx[ua] < out[ua]) break;
      boff -= b_strides[ua] * out[ua];
      idx[ua] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
TensorT<T> binary(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b, BinaryKind kind) {
  const bool same_shape = a.shape() == b.shape();
  std::vector<std::int64_t> bstr;
  if (!same_shape) bstr = detail::broadcast_strides(a.shape(), b.shape());

  if (kind == BinaryKind::Div) {
    const T* bd = b.data();
    for (std::int64_t i = 0; i < b.numel(); ++i)
      ADVSEG_CHECK(bd[i] != T(0), NumericError, "div: zero divisor at index ", i);
  }

  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  auto apply = [kind](T x, T y) {
    switch (kind) {
      case BinaryKind::Add: return x + y;
      case BinaryKind::Sub: return x - y;
      case BinaryKind::Mul: return x * y;
      case BinaryKind::Div: return x / y;
    }
    return T(0);
  };
  if (same_shape) {
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] = apply(ad[i], bd[i]);
  } else {
    detail::broadcast_walk(a.shape(), bstr,
                           [&](std::int64_t i, std::int64_t j) { od[i] = apply(ad[i], bd[j]); });
  }

  if (detail::needs_tape(tape, a, b)) {
    detail::mark_output(tape, out, true);
    auto as = a.storage();
    auto bs = b.storage();
    auto os = out.storage();
    Shape oshape = a.shape();
    tape->record(os, [as, bs, os, kind, same_shape, bstr, oshape]() {
      if (os->grad.empty()) return;
      const T* g = os->grad.data();
      const bool need_a = as->tracked;
      const bool need_b = bs->tracked;
      if (need_a) as->ensure_grad();
      if (need_b) bs->ensure_grad();
      auto acc = [&](std::int64_t i, std::int64_t j) {
        const T gi = g[i];
        switch (kind) {
          case BinaryKind::Add:
            if (need_a) as->grad[i] += gi;
            if (need_b) bs->grad[j] += gi;
            break;
          case BinaryKind::Sub:
            if (need_a) as->grad[i] += gi;
            if (need_b) bs->grad[j] -= gi;
            break;
          case BinaryKind::Mul:
            if (need_a) as->grad[i] += gi * bs->data[j];
            if (need_b) bs->grad[j] += gi * as->data[i];
            break;
          case BinaryKind::Div: {
            const T bj = bs->data[j];
            if (need_a) as->grad[i] += gi / bj;
            if (need_b) bs->grad[j] -= gi * as->data[i] / (bj * bj);
            break;
          }
        }
      };
      if (same_shape) {
        const std::int64_t n = static_cast<std::int64_t>(os->data.size());
        for (std::int64_t i = 0; i < n; ++i) acc(i, i);
      } else {
        detail::broadcast_walk(oshape, bstr, acc);
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  return binary(tape, a, b, BinaryKind::Add);
}
template <typename T>
TensorT<T> sub(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  return binary(tape, a, b, BinaryKind::Sub);
}
template <typename T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  return binary(tape, a, b, BinaryKind::Mul);
}
template <typename T>
TensorT<T> div(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  return binary(tape, a, b, BinaryKind::Div);
}

// ---------------------------------------------------------------------------
// softmax over the channel axis of a [B,C,H,W] tensor
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> softmax_channels(TapeT<T>* tape, const TensorT<T>& x) {
  ADVSEG_CHECK(x.rank() == 4, ShapeError, "softmax_channels: expected rank-4, got ",
               shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  for (int b = 0; b < B; ++b) {
    const std::int64_t base = static_cast<std::int64_t>(b) * C * plane;
    for (std::int64_t p = 0; p < plane; ++p) {
      T mx = xd[base + p];
      for (int c = 1; c < C; ++c) mx = std::max(mx, xd[base + c * plane + p]);
      T sum = T(0);
      for (int c = 0; c < C; ++c) {
        const T e = std::exp(xd[base + c * plane + p] - mx);
        od[base + c * plane + p] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int c = 0; c < C; ++c) od[base + c * plane + p] *= inv;
    }
  }

  if (detail::needs_tape(tape, x)) {
    detail::mark_output(tape, out, true);
    auto xs = x.storage();
    auto os = out.storage();
    tape->record(os, [xs, os, B, C, plane]() {
      if (os->grad.empty()) return;
      xs->ensure_grad();
      const T* g = os->grad.data();
      const T* p = os->data.data();
      T* gx = xs->grad.data();
      for (int b = 0; b < B; ++b) {
        const std::int64_t base = static_cast<std::int64_t>(b) * C * plane;
        for (std::int64_t q = 0; q < plane; ++q) {
          T dot = T(0);
          for (int c = 0; c < C; ++c) {
            const std::int64_t i = base + c * plane + q;
            dot += g[i] * p[i];
          }
          for (int c = 0; c < C; ++c) {
            const std::int64_t i = base + c * plane + q;
            gx[i] += p[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul [m,k] x [k,n] -> [m,n]
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  ADVSEG_CHECK(a.rank() == 2 && b.rank() == 2, ShapeError, "matmul: expected rank-2 inputs");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  ADVSEG_CHECK(k == k2, ShapeError, "matmul: inner dimensions ", k, " vs ", k2);
  TensorT<T> out = TensorT<T>::zeros({m, n});
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const T av = ad[i * k + kk];
      for (int j = 0; j < n; ++j) od[i * n + j] += av * bd[kk * n + j];
    }

  if (detail::needs_tape(tape, a, b)) {
    detail::mark_output(tape, out, true);
    auto as = a.storage();
    auto bs = b.storage();
    auto os = out.storage();
    tape->record(os, [as, bs, os, m, k, n]() {
      if (os->grad.empty()) return;
      const T* g = os->grad.data();
      if (as->tracked) {
        as->ensure_grad();  // dA = g . B^T
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            T acc = T(0);
            for (int j = 0; j < n; ++j) acc += g[i * n + j] * bs->data[kk * n + j];
            as->grad[i * k + kk] += acc;
          }
      }
      if (bs->tracked) {
        bs->ensure_grad();  // dB = A^T . g
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const T av = as->data[i * k + kk];
            for (int j = 0; j < n; ++j) bs->grad[kk * n + j] += av * g[i * n + j];
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

enum class ReduceKind { Sum, Mean };

template <typename T>
TensorT<T> reduce(TapeT<T>* tape, const TensorT<T>& x, ReduceKind kind,
                  const std::set<int>& axes, bool keepdims = false) {
  const int rank = x.rank();
  for (int a : axes)
    ADVSEG_CHECK(a >= 0 && a < rank, ShapeError, "reduce: axis ", a, " out of range for rank ",
                 rank);
  if (axes.empty()) {
    // identity copy
    TensorT<T> out = TensorT<T>::from(x.shape(), x.data_vec());
    if (detail::needs_tape(tape, x)) {
      detail::mark_output(tape, out, true);
      auto xs = x.storage();
      auto os = out.storage();
      tape->record(os, [xs, os]() {
        if (os->grad.empty()) return;
        xs->ensure_grad();
        for (std::size_t i = 0; i < xs->grad.size(); ++i) xs->grad[i] += os->grad[i];
      });
    }
    return out;
  }

  Shape oshape;
  std::int64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    if (axes.count(i)) {
      count *= x.dim(i);
      if (keepdims) oshape.push_back(1);
    } else {
      oshape.push_back(x.dim(i));
    }
  }
  if (oshape.empty()) oshape.push_back(1);

  // Map each input element to its output slot.
  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(rank));
  {
    std::int64_t s = 1;
    for (int i = rank - 1; i >= 0; --i) {
      in_strides[static_cast<std::size_t>(i)] = s;
      s *= x.dim(i);
    }
  }
  std::vector<std::int64_t> out_stride_for_axis(static_cast<std::size_t>(rank), 0);
  {
    std::int64_t s = 1;
    for (int i = rank - 1; i >= 0; --i) {
      if (!axes.count(i)) {
        out_stride_for_axis[static_cast<std::size_t>(i)] = s;
        s *= x.dim(i);
      }
    }
  }

  TensorT<T> out = TensorT<T>::zeros(oshape);
  T* od = out.data();
  const T* xd = x.data();
  const std::int64_t n = x.numel();
  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  std::int64_t ooff = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    od[ooff] += xd[i];
    for (int a = rank - 1; a >= 0; --a) {
      auto ua = static_cast<std::size_t>(a);
      ++idx[ua];
      ooff += out_stride_for_axis[ua];
      if (idx[ua] < x.dim(a)) break;
      ooff -= out_stride_for_axis[ua] * x.dim(a);
      idx[ua] = 0;
    }
  }
  if (kind == ReduceKind::Mean) {
    const T inv = T(1) / static_cast<T>(count);
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] *= inv;
  }

  if (detail::needs_tape(tape, x)) {
    detail::mark_output(tape, out, true);
    auto xs = x.storage();
    auto os = out.storage();
    const T inv = kind == ReduceKind::Mean ? T(1) / static_cast<T>(count) : T(1);
    Shape xshape = x.shape();
    tape->record(os, [xs, os, out_stride_for_axis, xshape, inv, rank]() {
      if (os->grad.empty()) return;
      xs->ensure_grad();
      const T* g = os->grad.data();
      T* gx = xs->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(xs->data.size());
      std::vector<int> idx(static_cast<std::size_t>(rank), 0);
      std::int64_t ooff = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        gx[i] += g[ooff] * inv;
        for (int a = rank - 1; a >= 0; --a) {
          auto ua = static_cast<std::size_t>(a);
          ++idx[ua];
          ooff += out_stride_for_axis[ua];
          if (idx[ua] < xshape[ua]) break;
          ooff -= out_stride_for_axis[ua] * xshape[ua];
          idx[ua] = 0;
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> reduce_sum_all(TapeT<T>* tape, const TensorT<T>& x) {
  std::set<int> axes;
  for (int i = 0; i < x.rank(); ++i) axes.insert(i);
  return reduce(tape, x, ReduceKind::Sum, axes, false);
}

template <typename T>
TensorT<T> reduce_mean_all(TapeT<T>* tape, const TensorT<T>& x) {
  std::set<int> axes;
  for (int i = 0; i < x.rank(); ++i) axes.insert(i);
  return reduce(tape, x, ReduceKind::Mean, axes, false);
}

// ---------------------------------------------------------------------------
// channel concatenation of [B,Ca,H,W] and [B,Cb,H,W]
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> concat_channels(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  ADVSEG_CHECK(a.rank() == 4 && b.rank() == 4, ShapeError, "concat_channels: rank-4 expected");
  ADVSEG_CHECK(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3), ShapeError,
               "concat_channels: batch/spatial mismatch ", shape_str(a.shape()), " vs ",
               shape_str(b.shape()));
  const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  TensorT<T> out = TensorT<T>::zeros({B, Ca + Cb, H, W});
  T* od = out.data();
  const T* ad = a.data();
  const T* bd = b.data();
  for (int bi = 0; bi < B; ++bi) {
    std::copy(ad + bi * Ca * plane, ad + (bi + 1) * Ca * plane,
              od + static_cast<std::int64_t>(bi) * (Ca + Cb) * plane);
    std::copy(bd + bi * Cb * plane, bd + (bi + 1) * Cb * plane,
              od + static_cast<std::int64_t>(bi) * (Ca + Cb) * plane + Ca * plane);
  }
  if (detail::needs_tape(tape, a, b)) {
    detail::mark_output(tape, out, true);
    auto as = a.storage();
    auto bs = b.storage();
    auto os = out.storage();
    tape->record(os, [as, bs, os, B, Ca, Cb, plane]() {
      if (os->grad.empty()) return;
      const T* g = os->grad.data();
      if (as->tracked) {
        as->ensure_grad();
        for (int bi = 0; bi < B; ++bi) {
          const T* src = g + static_cast<std::int64_t>(bi) * (Ca + Cb) * plane;
          T* dst = as->grad.data() + static_cast<std::int64_t>(bi) * Ca * plane;
          for (std::int64_t i = 0; i < Ca * plane; ++i) dst[i] += src[i];
        }
      }
      if (bs->tracked) {
        bs->ensure_grad();
        for (int bi = 0; bi < B; ++bi) {
          const T* src = g + static_cast<std::int64_t>(bi) * (Ca + Cb) * plane + Ca * plane;
          T* dst = bs->grad.data() + static_cast<std::int64_t>(bi) * Cb * plane;
          for (std::int64_t i = 0; i < Cb * plane; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

// Zeroes the grad buffers of every tensor in the list.
template <typename T>
void reset_grads(std::vector<TensorT<T>>& tensors) {
  for (auto& t : tensors) t.zero_grad();
}

}  // namespace advseg
