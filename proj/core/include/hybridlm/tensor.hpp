// Dense tensor arithmetic with reverse-mode differentiation.
//
// Tensors are contiguous row-major buffers (no views, no strides). Every
// differentiable op records its adjoint closure on the thread's active tape;
// Tape::backward replays the closures in reverse, so gradient accumulation
// order is fixed and runs are bit-reproducible for a given build.
//
// The scalar type is a template parameter: model code instantiates float,
// numeric oracles instantiate double.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hybridlm {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
};

template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape) {
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->data.assign(shape_numel(t.node_->shape), T(0));
    return t;
  }
  static TensorT full(Shape shape, T value) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.data(), t.data() + t.numel(), value);
    return t;
  }
  static TensorT from(Shape shape, std::vector<T> values) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
      throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    return t;
  }
  static TensorT scalar(T value) { return from({}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }
  int64_t extent(int64_t i) const { return node_->shape[static_cast<size_t>(i)]; }

  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }
  T operator()(int64_t i) const { return node_->data[static_cast<size_t>(i)]; }
  T operator()(int64_t i, int64_t j) const {
    return node_->data[static_cast<size_t>(i * extent(1) + j)];
  }
  T& at(int64_t i) { return node_->data[static_cast<size_t>(i)]; }
  T& at(int64_t i, int64_t j) { return node_->data[static_cast<size_t>(i * extent(1) + j)]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  }
  void clear_grad() { node_->grad.clear(); }
  T* grad_data() {
    ensure_grad();
    return node_->grad.data();
  }
  const std::vector<T>& grad() const { return node_->grad; }

  // Shares storage, never participates in gradient flow.
  TensorT detach() const {
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    return t;
  }

  TensorT clone() const {
    TensorT t = detach();
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// ---------------------------------------------------------------------------
// Tape

template <class T>
class TapeT {
 public:
  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  static TapeT*& current_slot() {
    thread_local TapeT* t = nullptr;
    return t;
  }
  static TapeT* current() { return no_grad_depth() ? nullptr : current_slot(); }
  static int& no_grad_depth() {
    thread_local int d = 0;
    return d;
  }

  void record(std::function<void()> adjoint) { records_.push_back(std::move(adjoint)); }
  size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  void backward(TensorT<T> loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw std::invalid_argument("backward() requires a scalar loss tensor");
    loss.ensure_grad();
    loss.grad_data()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> records_;
};

template <class T>
class TapeScopeT {
 public:
  explicit TapeScopeT(TapeT<T>& tape) : prev_(TapeT<T>::current_slot()) {
    TapeT<T>::current_slot() = &tape;
  }
  ~TapeScopeT() { TapeT<T>::current_slot() = prev_; }

 private:
  TapeT<T>* prev_;
};

template <class T>
class NoGradGuardT {
 public:
  NoGradGuardT() { ++TapeT<T>::no_grad_depth(); }
  ~NoGradGuardT() { --TapeT<T>::no_grad_depth(); }
};

template <class T>
void backward(TensorT<T> loss) {
  auto* tape = TapeT<T>::current_slot();
  if (!tape) throw std::runtime_error("backward() called with no active tape");
  tape->backward(std::move(loss));
}

// ---------------------------------------------------------------------------
// Op helpers

namespace detail {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<EMat<T>>;
template <class T>
using CMapM = Eigen::Map<const EMat<T>>;

template <class T>
bool track(std::initializer_list<const TensorT<T>*> inputs) {
  if (!TapeT<T>::current()) return false;
  for (auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <class T>
TensorT<T> make_output(Shape shape, bool requires_grad) {
  TensorT<T> out = TensorT<T>::zeros(std::move(shape));
  out.set_requires_grad(requires_grad);
  return out;
}

// Trailing-dimension broadcast: the smaller shape must be an exact suffix of
// the larger one (a rank-0 scalar broadcasts against anything).
template <class T>
void broadcast_extents(const TensorT<T>& a, const TensorT<T>& b, int64_t& lead, int64_t& inner,
                       bool& b_is_small, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const Shape *big = &sa, *small = &sb;
  b_is_small = true;
  if (sb.size() > sa.size()) {
    big = &sb;
    small = &sa;
    b_is_small = false;
  } else if (sa.size() == sb.size() && sa != sb) {
    throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(sa) + " and " +
                                shape_str(sb) + " are not broadcast-compatible");
  }
  size_t off = big->size() - small->size();
  for (size_t i = 0; i < small->size(); ++i) {
    if ((*small)[i] != (*big)[off + i])
      throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(sa) + " and " +
                                  shape_str(sb) + " are not broadcast-compatible");
  }
  inner = shape_numel(*small);
  lead = shape_numel(*big) / std::max<int64_t>(inner, 1);
  if (inner == 0) lead = 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <class T, class Fwd, class Bwd>
TensorT<T> unary_op(const TensorT<T>& x, Fwd f, Bwd dfdx_times) {
  bool rg = detail::track<T>({&x});
  TensorT<T> out = detail::make_output<T>(x.shape(), rg);
  const T* xp = x.data();
  T* op = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) op[i] = f(xp[i]);
  if (rg) {
    TapeT<T>::current()->record([xn = x.node(), on = out.node(), dfdx_times]() {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
      for (size_t i = 0; i < xn->data.size(); ++i)
        xn->grad[i] += dfdx_times(xn->data[i], on->data[i]) * on->grad[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> exp(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
TensorT<T> log(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
TensorT<T> neg(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <class T>
inline T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
inline T softplus_scalar(T v) {
  // max(v,0) + log1p(exp(-|v|)) avoids overflow on both tails.
  return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
TensorT<T> softplus(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return softplus_scalar(v); }, [](T v, T) { return sigmoid_scalar(v); });
}

template <class T>
TensorT<T> silu(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T c) {
  return unary_op(
      x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

namespace detail {

enum class BinKind { Add, Sub, Mul };

template <class T>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, BinKind kind, const char* name) {
  int64_t lead = 0, inner = 0;
  bool b_small = true;
  broadcast_extents(a, b, lead, inner, b_small, name);
  const TensorT<T>& big = b_small ? a : b;
  bool rg = track<T>({&a, &b});
  TensorT<T> out = make_output<T>(big.shape(), rg);
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  for (int64_t l = 0; l < lead; ++l) {
    for (int64_t i = 0; i < inner; ++i) {
      int64_t bi = l * inner + i;
      T av = b_small ? ap[bi] : ap[i];
      T bv = b_small ? bp[i] : bp[bi];
      switch (kind) {
        case BinKind::Add: op[bi] = av + bv; break;
        case BinKind::Sub: op[bi] = av - bv; break;
        case BinKind::Mul: op[bi] = av * bv; break;
      }
    }
  }
  if (rg) {
    TapeT<T>::current()->record(
        [an = a.node(), bn = b.node(), on = out.node(), kind, lead, inner, b_small]() {
          auto accumulate = [&](std::shared_ptr<TensorNode<T>>& n, bool is_a) {
            if (!n->requires_grad) return;
            if (n->grad.empty()) n->grad.assign(n->data.size(), T(0));
            bool small = is_a ? !b_small : b_small;
            for (int64_t l = 0; l < lead; ++l) {
              for (int64_t i = 0; i < inner; ++i) {
                int64_t bi = l * inner + i;
                T g = on->grad[static_cast<size_t>(bi)];
                T factor = T(1);
                if (kind == BinKind::Mul) {
                  auto& other = is_a ? bn : an;
                  bool other_small = is_a ? b_small : !b_small;
                  factor = other->data[static_cast<size_t>(other_small ? i : bi)];
                } else if (kind == BinKind::Sub && !is_a) {
                  factor = T(-1);
                }
                n->grad[static_cast<size_t>(small ? i : bi)] += factor * g;
              }
            }
          };
          accumulate(an, true);
          accumulate(bn, false);
        });
  }
  return out;
}

}  // namespace detail

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Add, "add");
}
template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Sub, "sub");
}
template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Mul, "mul");
}

// ---------------------------------------------------------------------------
// Matrix products

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  bool rg = detail::track<T>({&a, &b});
  TensorT<T> out = detail::make_output<T>({m, n}, rg);
  detail::MapM<T>(out.data(), m, n).noalias() =
      detail::CMapM<T>(a.data(), m, k) * detail::CMapM<T>(b.data(), k, n);
  if (rg) {
    TapeT<T>::current()->record([an = a.node(), bn = b.node(), on = out.node(), m, k, n]() {
      detail::CMapM<T> g(on->grad.data(), m, n);
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->data.size(), T(0));
        detail::MapM<T>(an->grad.data(), m, k).noalias() +=
            g * detail::CMapM<T>(bn->data.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        if (bn->grad.empty()) bn->grad.assign(bn->data.size(), T(0));
        detail::MapM<T>(bn->grad.data(), k, n).noalias() +=
            detail::CMapM<T>(an->data.data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

// a · bᵀ. This is the `linear` shape: rows of `b` are output features.
template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(1))
    throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()) + "^T");
  int64_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
  bool rg = detail::track<T>({&a, &b});
  TensorT<T> out = detail::make_output<T>({m, n}, rg);
  detail::MapM<T>(out.data(), m, n).noalias() =
      detail::CMapM<T>(a.data(), m, k) * detail::CMapM<T>(b.data(), n, k).transpose();
  if (rg) {
    TapeT<T>::current()->record([an = a.node(), bn = b.node(), on = out.node(), m, k, n]() {
      detail::CMapM<T> g(on->grad.data(), m, n);
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->data.size(), T(0));
        detail::MapM<T>(an->grad.data(), m, k).noalias() +=
            g * detail::CMapM<T>(bn->data.data(), n, k);
      }
      if (bn->requires_grad) {
        if (bn->grad.empty()) bn->grad.assign(bn->data.size(), T(0));
        detail::MapM<T>(bn->grad.data(), n, k).noalias() +=
            g.transpose() * detail::CMapM<T>(an->data.data(), m, k);
      }
    });
  }
  return out;
}

// x · Wᵀ with W stored (out_features × in_features), the convention used by
// every projection in the model code.
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w) {
  return matmul_nt(x, w);
}

// ---------------------------------------------------------------------------
// Row-structured ops

template <class T>
void require_matrix(const TensorT<T>& x, const char* op) {
  if (x.rank() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a rank-2 tensor, got " +
                                shape_str(x.shape()));
}

template <class T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
  require_matrix(x, "softmax_rows");
  int64_t rows = x.extent(0), cols = x.extent(1);
  bool rg = detail::track<T>({&x});
  TensorT<T> out = detail::make_output<T>(x.shape(), rg);
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * cols;
    T* yr = out.data() + r * cols;
    T mx = xr[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    double sum = 0;
    for (int64_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += static_cast<double>(yr[c]);
    }
    T inv = static_cast<T>(1.0 / sum);
    for (int64_t c = 0; c < cols; ++c) yr[c] *= inv;
  }
  if (rg) {
    TapeT<T>::current()->record([xn = x.node(), on = out.node(), rows, cols]() {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
      for (int64_t r = 0; r < rows; ++r) {
        const T* p = on->data.data() + r * cols;
        const T* g = on->grad.data() + r * cols;
        T* dx = xn->grad.data() + r * cols;
        double dot = 0;
        for (int64_t c = 0; c < cols; ++c) dot += static_cast<double>(g[c]) * p[c];
        for (int64_t c = 0; c < cols; ++c) dx[c] += p[c] * (g[c] - static_cast<T>(dot));
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> log_softmax_rows(const TensorT<T>& x) {
  require_matrix(x, "log_softmax_rows");
  int64_t rows = x.extent(0), cols = x.extent(1);
  bool rg = detail::track<T>({&x});
  TensorT<T> out = detail::make_output<T>(x.shape(), rg);
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * cols;
    T* yr = out.data() + r * cols;
    T mx = xr[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    double sum = 0;
    for (int64_t c = 0; c < cols; ++c) sum += std::exp(static_cast<double>(xr[c] - mx));
    T lse = mx + static_cast<T>(std::log(sum));
    for (int64_t c = 0; c < cols; ++c) yr[c] = xr[c] - lse;
  }
  if (rg) {
    TapeT<T>::current()->record([xn = x.node(), on = out.node(), rows, cols]() {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
      for (int64_t r = 0; r < rows; ++r) {
        const T* lp = on->data.data() + r * cols;
        const T* g = on->grad.data() + r * cols;
        T* dx = xn->grad.data() + r * cols;
        double gsum = 0;
        for (int64_t c = 0; c < cols; ++c) gsum += static_cast<double>(g[c]);
        for (int64_t c = 0; c < cols; ++c)
          dx[c] += g[c] - static_cast<T>(std::exp(static_cast<double>(lp[c])) * gsum);
      }
    });
  }
  return out;
}

// Sets entries strictly above the diagonal to a large negative constant, so a
// following softmax zeroes them. Masked entries pass no gradient.
template <class T>
TensorT<T> causal_mask(const TensorT<T>& scores) {
  require_matrix(scores, "causal_mask");
  if (scores.extent(0) != scores.extent(1))
    throw std::invalid_argument("causal_mask: expected square scores, got " +
                                shape_str(scores.shape()));
  int64_t n = scores.extent(0);
  constexpr T kMasked = T(-1e30);
  bool rg = detail::track<T>({&scores});
  TensorT<T> out = detail::make_output<T>(scores.shape(), rg);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.at(i, j) = j <= i ? scores(i, j) : kMasked;
  if (rg) {
    TapeT<T>::current()->record([xn = scores.node(), on = out.node(), n]() {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j <= i; ++j)
          xn->grad[static_cast<size_t>(i * n + j)] += on->grad[static_cast<size_t>(i * n + j)];
    });
  }
  return out;
}

template <class T>
TensorT<T> rmsnorm(const TensorT<T>& x, const TensorT<T>& weight, T eps = T(1e-5)) {
  require_matrix(x, "rmsnorm");
  int64_t rows = x.extent(0), cols = x.extent(1);
  if (weight.rank() != 1 || weight.extent(0) != cols)
    throw std::invalid_argument("rmsnorm: weight shape " + shape_str(weight.shape()) +
                                " does not match feature dim of " + shape_str(x.shape()));
  bool rg = detail::track<T>({&x, &weight});
  TensorT<T> out = detail::make_output<T>(x.shape(), rg);
  std::vector<T> inv_rms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * cols;
    double ms = 0;
    for (int64_t c = 0; c < cols; ++c) ms += static_cast<double>(xr[c]) * xr[c];
    ms = ms / static_cast<double>(cols) + static_cast<double>(eps);
    T inv = static_cast<T>(1.0 / std::sqrt(ms));
    inv_rms[static_cast<size_t>(r)] = inv;
    T* yr = out.data() + r * cols;
    for (int64_t c = 0; c < cols; ++c) yr[c] = xr[c] * inv * weight(c);
  }
  if (rg) {
    TapeT<T>::current()->record(
        [xn = x.node(), wn = weight.node(), on = out.node(), rows, cols, inv_rms]() {
          bool need_x = xn->requires_grad;
          bool need_w = wn->requires_grad;
          if (need_x && xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
          if (need_w && wn->grad.empty()) wn->grad.assign(wn->data.size(), T(0));
          for (int64_t r = 0; r < rows; ++r) {
            const T* xr = xn->data.data() + r * cols;
            const T* g = on->grad.data() + r * cols;
            T inv = inv_rms[static_cast<size_t>(r)];
            if (need_w)
              for (int64_t c = 0; c < cols; ++c) wn->grad[static_cast<size_t>(c)] += g[c] * xr[c] * inv;
            if (need_x) {
              double dot = 0;
              for (int64_t c = 0; c < cols; ++c)
                dot += static_cast<double>(g[c]) * wn->data[static_cast<size_t>(c)] * xr[c];
              T corr = static_cast<T>(dot / static_cast<double>(cols)) * inv * inv * inv;
              T* dx = xn->grad.data() + r * cols;
              for (int64_t c = 0; c < cols; ++c)
                dx[c] += g[c] * wn->data[static_cast<size_t>(c)] * inv - xr[c] * corr;
            }
          }
        });
  }
  return out;
}

template <class T>
TensorT<T> embedding(const TensorT<T>& table, std::span<const int32_t> ids) {
  require_matrix(table, "embedding");
  int64_t vocab = table.extent(0), dim = table.extent(1);
  int64_t rows = static_cast<int64_t>(ids.size());
  for (int32_t id : ids)
    if (id < 0 || id >= vocab)
      throw std::out_of_range("embedding: token id " + std::to_string(id) +
                              " out of range for vocab " + std::to_string(vocab));
  bool rg = detail::track<T>({&table});
  TensorT<T> out = detail::make_output<T>({rows, dim}, rg);
  for (int64_t r = 0; r < rows; ++r)
    std::copy_n(table.data() + static_cast<int64_t>(ids[static_cast<size_t>(r)]) * dim, dim,
                out.data() + r * dim);
  if (rg) {
    std::vector<int32_t> ids_copy(ids.begin(), ids.end());
    TapeT<T>::current()->record([tn = table.node(), on = out.node(), ids_copy, dim]() {
      if (!tn->requires_grad) return;
      if (tn->grad.empty()) tn->grad.assign(tn->data.size(), T(0));
      for (size_t r = 0; r < ids_copy.size(); ++r) {
        T* dst = tn->grad.data() + static_cast<int64_t>(ids_copy[r]) * dim;
        const T* src = on->grad.data() + static_cast<int64_t>(r) * dim;
        for (int64_t c = 0; c < dim; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_rows(const TensorT<T>& x, int64_t r0, int64_t r1) {
  require_matrix(x, "slice_rows");
  int64_t rows = x.extent(0), cols = x.extent(1);
  if (r0 < 0 || r1 < r0 || r1 > rows)
    throw std::out_of_range("slice_rows: range [" + std::to_string(r0) + "," +
                            std::to_string(r1) + ") out of bounds for " + shape_str(x.shape()));
  bool rg = detail::track<T>({&x});
  TensorT<T> out = detail::make_output<T>({r1 - r0, cols}, rg);
  std::copy_n(x.data() + r0 * cols, (r1 - r0) * cols, out.data());
  if (rg) {
    TapeT<T>::current()->record([xn = x.node(), on = out.node(), r0, cols]() {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
      for (size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[static_cast<size_t>(r0 * cols) + i] += on->grad[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  bool rg = detail::track<T>({&x});
  double acc = 0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(x.data()[i]);
  TensorT<T> out = detail::make_output<T>({}, rg);
  out.data()[0] = static_cast<T>(acc);
  if (rg) {
    TapeT<T>::current()->record([xn = x.node(), on = out.node()]() {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
      for (auto& g : xn->grad) g += on->grad[0];
    });
  }
  return out;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Rotates feature pairs of each row by position-dependent angles (rotary
// positional embedding). Row r is at position pos0 + r.
template <class T>
TensorT<T> rope_rows(const TensorT<T>& x, int64_t pos0, T base = T(10000)) {
  require_matrix(x, "rope_rows");
  int64_t rows = x.extent(0), cols = x.extent(1);
  if (cols % 2 != 0)
    throw std::invalid_argument("rope_rows: feature dim must be even, got " +
                                shape_str(x.shape()));
  bool rg = detail::track<T>({&x});
  TensorT<T> out = detail::make_output<T>(x.shape(), rg);
  std::vector<T> cs(static_cast<size_t>(rows * cols / 2)), sn(static_cast<size_t>(rows * cols / 2));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t p = 0; p < cols / 2; ++p) {
      double theta = static_cast<double>(pos0 + r) *
                     std::pow(static_cast<double>(base), -2.0 * static_cast<double>(p) /
                                                             static_cast<double>(cols));
      cs[static_cast<size_t>(r * cols / 2 + p)] = static_cast<T>(std::cos(theta));
      sn[static_cast<size_t>(r * cols / 2 + p)] = static_cast<T>(std::sin(theta));
    }
    const T* xr = x.data() + r * cols;
    T* yr = out.data() + r * cols;
    for (int64_t p = 0; p < cols / 2; ++p) {
      T c = cs[static_cast<size_t>(r * cols / 2 + p)], s = sn[static_cast<size_t>(r * cols / 2 + p)];
      yr[2 * p] = xr[2 * p] * c - xr[2 * p + 1] * s;
      yr[2 * p + 1] = xr[2 * p] * s + xr[2 * p + 1] * c;
    }
  }
  if (rg) {
    TapeT<T>::current()->record([xn = x.node(), on = out.node(), rows, cols, cs, sn]() {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), T(0));
      for (int64_t r = 0; r < rows; ++r) {
        const T* g = on->grad.data() + r * cols;
        T* dx = xn->grad.data() + r * cols;
        for (int64_t p = 0; p < cols / 2; ++p) {
          T c = cs[static_cast<size_t>(r * cols / 2 + p)],
            s = sn[static_cast<size_t>(r * cols / 2 + p)];
          dx[2 * p] += g[2 * p] * c + g[2 * p + 1] * s;
          dx[2 * p + 1] += -g[2 * p] * s + g[2 * p + 1] * c;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

namespace detail {

template <class T>
void check_target_range(const TensorT<T>& logits, std::span<const int32_t> targets, int64_t from,
                        int64_t to, const char* op) {
  require_matrix(logits, op);
  int64_t rows = logits.extent(0), vocab = logits.extent(1);
  if (static_cast<int64_t>(targets.size()) != rows)
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(rows) + " logit rows");
  if (from < 0 || to > rows || from > to)
    throw std::out_of_range(std::string(op) + ": row range [" + std::to_string(from) + "," +
                            std::to_string(to) + ") out of bounds");
  for (int64_t r = from; r < to; ++r) {
    int32_t t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= vocab)
      throw std::out_of_range(std::string(op) + ": target id " + std::to_string(t) +
                              " out of range for vocab " + std::to_string(vocab));
  }
}

// Shared kernel behind cross_entropy / sequence_logprob: per-row
// log p(target) with either mean (CE sign) or sum (log-prob sign) reduction.
template <class T>
TensorT<T> gathered_logprob(const TensorT<T>& logits, std::span<const int32_t> targets,
                            int64_t from, int64_t to, bool mean_nll, const char* op) {
  check_target_range(logits, targets, from, to, op);
  int64_t vocab = logits.extent(1);
  int64_t count = to - from;
  if (count == 0 && mean_nll)
    throw std::invalid_argument(std::string(op) + ": empty row range");
  bool rg = detail::track<T>({&logits});
  std::vector<T> lse(static_cast<size_t>(count));
  double acc = 0;
  for (int64_t r = from; r < to; ++r) {
    const T* row = logits.data() + r * vocab;
    T mx = row[0];
    for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    double sum = 0;
    for (int64_t c = 0; c < vocab; ++c) sum += std::exp(static_cast<double>(row[c] - mx));
    T l = mx + static_cast<T>(std::log(sum));
    lse[static_cast<size_t>(r - from)] = l;
    acc += static_cast<double>(row[targets[static_cast<size_t>(r)]] - l);
  }
  T value = mean_nll ? static_cast<T>(-acc / static_cast<double>(count)) : static_cast<T>(acc);
  TensorT<T> out = detail::make_output<T>({}, rg);
  out.data()[0] = value;
  if (rg) {
    std::vector<int32_t> tcopy(targets.begin(), targets.end());
    TapeT<T>::current()->record(
        [ln = logits.node(), on = out.node(), tcopy, lse, from, to, vocab, mean_nll]() {
          if (!ln->requires_grad) return;
          if (ln->grad.empty()) ln->grad.assign(ln->data.size(), T(0));
          T g = on->grad[0];
          T sign = mean_nll ? g / static_cast<T>(to - from) : -g;
          for (int64_t r = from; r < to; ++r) {
            const T* row = ln->data.data() + r * vocab;
            T* drow = ln->grad.data() + r * vocab;
            T l = lse[static_cast<size_t>(r - from)];
            for (int64_t c = 0; c < vocab; ++c)
              drow[c] += sign * static_cast<T>(std::exp(static_cast<double>(row[c] - l)));
            drow[tcopy[static_cast<size_t>(r)]] -= sign;
          }
        });
  }
  return out;
}

}  // namespace detail

// Mean negative log-likelihood of targets under row-wise softmax(logits).
template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, std::span<const int32_t> targets,
                         int64_t from = 0, int64_t to = -1) {
  if (to < 0) to = logits.extent(0);
  return detail::gathered_logprob(logits, targets, from, to, /*mean_nll=*/true, "cross_entropy");
}

// Sum of per-token log-probabilities over [from,to); the sequence-level
// log p(y) used by preference losses.
template <class T>
TensorT<T> sequence_logprob(const TensorT<T>& logits, std::span<const int32_t> targets,
                            int64_t from, int64_t to) {
  return detail::gathered_logprob(logits, targets, from, to, /*mean_nll=*/false,
                                  "sequence_logprob");
}

// Mean over rows in [from,to) of KL(P ‖ Q) where P = softmax(p_logits) is
// treated as a constant distribution and Q = softmax(q_logits) receives
// gradients. Throws if p_logits participates in gradient flow: reference
// distributions must be detached by the caller.
template <class T>
TensorT<T> kl_divergence_rows(const TensorT<T>& p_logits, const TensorT<T>& q_logits,
                              int64_t from = 0, int64_t to = -1) {
  require_matrix(p_logits, "kl_divergence_rows");
  require_matrix(q_logits, "kl_divergence_rows");
  if (p_logits.shape() != q_logits.shape())
    throw std::invalid_argument("kl_divergence_rows: shape mismatch " +
                                shape_str(p_logits.shape()) + " vs " +
                                shape_str(q_logits.shape()));
  if (p_logits.requires_grad())
    throw std::invalid_argument("kl_divergence_rows: reference logits must not require grad");
  int64_t rows = p_logits.extent(0), vocab = p_logits.extent(1);
  if (to < 0) to = rows;
  if (from < 0 || to > rows || from >= to)
    throw std::out_of_range("kl_divergence_rows: bad row range");
  int64_t count = to - from;
  bool rg = detail::track<T>({&q_logits});
  // P and per-row KL, computed once; the backward needs P and Q only.
  std::vector<T> p(static_cast<size_t>(count * vocab));
  std::vector<T> qs(static_cast<size_t>(count * vocab));
  double total = 0;
  for (int64_t r = from; r < to; ++r) {
    const T* pr = p_logits.data() + r * vocab;
    const T* qr = q_logits.data() + r * vocab;
    T* pd = p.data() + (r - from) * vocab;
    T* qd = qs.data() + (r - from) * vocab;
    T pmx = pr[0], qmx = qr[0];
    for (int64_t c = 1; c < vocab; ++c) {
      pmx = std::max(pmx, pr[c]);
      qmx = std::max(qmx, qr[c]);
    }
    double psum = 0, qsum = 0;
    for (int64_t c = 0; c < vocab; ++c) {
      psum += std::exp(static_cast<double>(pr[c] - pmx));
      qsum += std::exp(static_cast<double>(qr[c] - qmx));
    }
    double plse = static_cast<double>(pmx) + std::log(psum);
    double qlse = static_cast<double>(qmx) + std::log(qsum);
    double row_kl = 0;
    for (int64_t c = 0; c < vocab; ++c) {
      double lp = static_cast<double>(pr[c]) - plse;
      double lq = static_cast<double>(qr[c]) - qlse;
      double pv = std::exp(lp);
      pd[c - 0] = static_cast<T>(pv);
      qd[c - 0] = static_cast<T>(std::exp(lq));
      row_kl += pv * (lp - lq);
    }
    total += row_kl;
  }
  TensorT<T> out = detail::make_output<T>({}, rg);
  out.data()[0] = static_cast<T>(total / static_cast<double>(count));
  if (rg) {
    TapeT<T>::current()->record([qn = q_logits.node(), on = out.node(), p, qs, from, to, vocab]() {
      if (!qn->requires_grad) return;
      if (qn->grad.empty()) qn->grad.assign(qn->data.size(), T(0));
      T g = on->grad[0] / static_cast<T>(to - from);
      for (int64_t r = from; r < to; ++r) {
        const T* pd = p.data() + (r - from) * vocab;
        const T* qd = qs.data() + (r - from) * vocab;
        T* dq = qn->grad.data() + r * vocab;
        for (int64_t c = 0; c < vocab; ++c) dq[c] += g * (qd[c] - pd[c]);
      }
    });
  }
  return out;
}

}  // namespace hybridlm
