#pragma once

// Dense n-dimensional tensors with reverse-mode automatic differentiation.
//
// Tensors are shared handles over flat row-major storage. Operations are free
// functions; when a Tape is active (see TapeScope) and any input requires
// gradients, a backward closure is recorded. Tape::backward runs the closures
// in reverse and accumulates into leaf gradients. A tape serves exactly one
// forward trace; reusing it is a contract error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mltr/error.hpp"
#include "mltr/util.hpp"

namespace mltr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Multiply-add counter for the analytical-vs-measured cost model. Counts one
/// unit per scalar multiply-add inside matmul while enabled.
struct FlopCounter {
  static bool& enabled() {
    thread_local bool on = false;
    return on;
  }
  static long long& madds() {
    thread_local long long n = 0;
    return n;
  }
  static void reset() { madds() = 0; }
};

/// RAII enable/disable of multiply-add counting.
struct FlopScope {
  FlopScope() {
    FlopCounter::reset();
    FlopCounter::enabled() = true;
  }
  ~FlopScope() { FlopCounter::enabled() = false; }
  long long count() const { return FlopCounter::madds(); }
};

template <class S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
};

template <class S>
class TensorT {
 public:
  using value_type = S;

  TensorT() = default;

  explicit TensorT(Shape shape, S fill = S(0))
      : impl_(std::make_shared<TensorImpl<S>>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(shape_size(impl_->shape), fill);
  }

  TensorT(Shape shape, std::vector<S> values)
      : impl_(std::make_shared<TensorImpl<S>>()) {
    if (shape_size(shape) != values.size())
      throw ShapeError(strfmt("tensor init: shape %s holds %zu values, got %zu",
                              shape_str(shape).c_str(), shape_size(shape), values.size()));
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static TensorT scalar(S v) { return TensorT(Shape{}, std::vector<S>{v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t extent(std::size_t axis) const { return impl_->shape[axis]; }

  std::vector<S>& data() { return impl_->data; }
  const std::vector<S>& data() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  TensorT& set_requires_grad(bool v = true) {
    impl_->requires_grad = v;
    return *this;
  }

  /// Leaf gradient; empty until backward has touched this tensor.
  const std::vector<S>& grad() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), S(0));
  }

  S item() const {
    if (size() != 1)
      throw ContractError(strfmt("item() on tensor of %zu elements", size()));
    return impl_->data[0];
  }

  std::shared_ptr<TensorImpl<S>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<S>> impl_;
};

template <class S>
class TapeT {
 public:
  void record(std::function<void()> fn) {
    if (consumed_)
      throw ContractError("tape already consumed by backward(); start a new trace");
    entries_.push_back(std::move(fn));
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  /// Reverse sweep from a scalar loss. Frees the trace afterwards.
  void backward(const TensorT<S>& loss) {
    if (consumed_) throw ContractError("backward() called twice on one tape");
    if (loss.size() != 1)
      throw ContractError(strfmt("backward() needs a scalar loss, got shape %s",
                                 shape_str(loss.shape()).c_str()));
    if (entries_.empty()) throw ContractError("backward() on an empty tape");
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] = S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
    consumed_ = true;
  }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

template <class S>
inline TapeT<S>*& active_tape() {
  thread_local TapeT<S>* tape = nullptr;
  return tape;
}

/// Makes a tape current for the enclosing scope (per-thread).
template <class S>
struct TapeScopeT {
  explicit TapeScopeT(TapeT<S>& tape) : prev_(active_tape<S>()) { active_tape<S>() = &tape; }
  ~TapeScopeT() { active_tape<S>() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;

 private:
  TapeT<S>* prev_;
};

namespace detail {

template <class S>
inline bool tracing(bool any_requires) {
  return any_requires && active_tape<S>() != nullptr;
}

template <class S>
inline void record(std::function<void()> fn) {
  active_tape<S>()->record(std::move(fn));
}

// Left-pads shapes with 1s to a common rank and applies numpy broadcast rules.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(strfmt("cannot broadcast %s with %s", shape_str(a).c_str(),
                              shape_str(b).c_str()));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides, 0 on axes being broadcast.
inline std::vector<std::size_t> broadcast_strides(const Shape& from, const Shape& to) {
  std::vector<std::size_t> strides(to.size(), 0);
  std::size_t acc = 1;
  std::size_t offset = to.size() - from.size();
  for (std::size_t i = from.size(); i-- > 0;) {
    strides[i + offset] = (from[i] == 1 && to[i + offset] != 1) ? 0 : acc;
    acc *= from[i];
  }
  return strides;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <class F>
inline void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                               const std::vector<std::size_t>& sb, F&& fn) {
  std::size_t total = shape_size(out);
  std::size_t r = out.size();
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    fn(i, ia, ib);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

template <class S>
inline TensorT<S> make_result(Shape shape, std::vector<S> values, bool needs_grad) {
  TensorT<S> out(std::move(shape), std::move(values));
  out.set_requires_grad(needs_grad && active_tape<S>() != nullptr);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary operations (numpy-style broadcasting).
// ---------------------------------------------------------------------------

template <class S, class Fwd, class Bwd>
TensorT<S> binary_op(const TensorT<S>& a, const TensorT<S>& b, Fwd fwd, Bwd bwd) {
  Shape os = detail::broadcast_shape(a.shape(), b.shape());
  auto sa = detail::broadcast_strides(a.shape(), os);
  auto sb = detail::broadcast_strides(b.shape(), os);
  std::vector<S> out(shape_size(os));
  const auto& da = a.data();
  const auto& db = b.data();
  detail::for_each_broadcast(os, sa, sb,
                             [&](std::size_t i, std::size_t ia, std::size_t ib) {
                               out[i] = fwd(da[ia], db[ib]);
                             });
  bool req = a.requires_grad() || b.requires_grad();
  TensorT<S> result = detail::make_result<S>(os, std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto ai = a.impl(), bi = b.impl(), oi = result.impl();
    detail::record<S>([ai, bi, oi, os, sa, sb, bwd]() {
      if (oi->grad.empty()) return;
      bool need_a = ai->requires_grad, need_b = bi->requires_grad;
      if (need_a) ai->ensure_grad();
      if (need_b) bi->ensure_grad();
      detail::for_each_broadcast(os, sa, sb,
                                 [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                   S g = oi->grad[i];
                                   auto [ga, gb] = bwd(ai->data[ia], bi->data[ib], g);
                                   if (need_a) ai->grad[ia] += ga;
                                   if (need_b) bi->grad[ib] += gb;
                                 });
    });
  }
  return result;
}

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return binary_op(
      a, b, [](S x, S y) { return x + y; },
      [](S, S, S g) { return std::pair<S, S>(g, g); });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  return binary_op(
      a, b, [](S x, S y) { return x - y; },
      [](S, S, S g) { return std::pair<S, S>(g, -g); });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  return binary_op(
      a, b, [](S x, S y) { return x * y; },
      [](S x, S y, S g) { return std::pair<S, S>(g * y, g * x); });
}

template <class S>
TensorT<S> divide(const TensorT<S>& a, const TensorT<S>& b) {
  for (S v : b.data())
    if (v == S(0)) throw DomainError("division by zero");
  return binary_op(
      a, b, [](S x, S y) { return x / y; },
      [](S x, S y, S g) { return std::pair<S, S>(g / y, -g * x / (y * y)); });
}

// ---------------------------------------------------------------------------
// Elementwise unary operations.
// ---------------------------------------------------------------------------

template <class S, class Fwd, class Bwd>
TensorT<S> unary_op(const TensorT<S>& x, Fwd fwd, Bwd bwd) {
  std::vector<S> out(x.size());
  const auto& dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(dx[i]);
  bool req = x.requires_grad();
  TensorT<S> result = detail::make_result<S>(x.shape(), std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    detail::record<S>([xi, oi, bwd]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < xi->data.size(); ++i)
        xi->grad[i] += bwd(xi->data[i], oi->data[i], oi->grad[i]);
    });
  }
  return result;
}

template <class S>
TensorT<S> exp(const TensorT<S>& x) {
  return unary_op(
      x, [](S v) { return std::exp(v); }, [](S, S o, S g) { return g * o; });
}

template <class S>
TensorT<S> log(const TensorT<S>& x) {
  for (S v : x.data())
    if (!(v > S(0))) throw DomainError(strfmt("log of non-positive input %g", double(v)));
  return unary_op(
      x, [](S v) { return std::log(v); }, [](S v, S, S g) { return g / v; });
}

template <class S>
TensorT<S> sqrt(const TensorT<S>& x) {
  for (S v : x.data())
    if (v < S(0)) throw DomainError("sqrt of negative input");
  return unary_op(
      x, [](S v) { return std::sqrt(v); },
      [](S, S o, S g) { return o > S(0) ? g / (S(2) * o) : S(0); });
}

template <class S>
TensorT<S> neg(const TensorT<S>& x) {
  return unary_op(
      x, [](S v) { return -v; }, [](S, S, S g) { return -g; });
}

template <class S>
TensorT<S> relu(const TensorT<S>& x) {
  return unary_op(
      x, [](S v) { return v > S(0) ? v : S(0); },
      [](S v, S, S g) { return v > S(0) ? g : S(0); });
}

template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
  // Exact form: 0.5 x (1 + erf(x / sqrt 2)).
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_op(
      x,
      [=](S v) { return S(0.5) * v * (S(1) + S(std::erf(double(v) * kInvSqrt2))); },
      [=](S v, S, S g) {
        double cdf = 0.5 * (1.0 + std::erf(double(v) * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(v) * double(v));
        return g * S(cdf + double(v) * pdf);
      });
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  return unary_op(
      x,
      [](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S o, S g) { return g * o * (S(1) - o); });
}

template <class S>
TensorT<S> clamp(const TensorT<S>& x, S lo, S hi) {
  return unary_op(
      x, [=](S v) { return std::min(std::max(v, lo), hi); },
      [=](S v, S, S g) { return (v > lo && v < hi) ? g : S(0); });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& x, S c) {
  return unary_op(
      x, [=](S v) { return v + c; }, [](S, S, S g) { return g; });
}

template <class S>
TensorT<S> mul_scalar(const TensorT<S>& x, S c) {
  return unary_op(
      x, [=](S v) { return v * c; }, [=](S, S, S g) { return g * c; });
}

/// c - x.
template <class S>
TensorT<S> rsub_scalar(S c, const TensorT<S>& x) {
  return unary_op(
      x, [=](S v) { return c - v; }, [](S, S, S g) { return -g; });
}

/// x^p with scalar exponent. Negative bases need an integral exponent.
template <class S>
TensorT<S> pow_scalar(const TensorT<S>& x, S p) {
  bool integral = p == std::floor(p);
  for (S v : x.data()) {
    if (v < S(0) && !integral)
      throw DomainError("pow of negative base with fractional exponent");
    if (v == S(0) && p < S(0)) throw DomainError("pow: zero base, negative exponent");
  }
  return unary_op(
      x, [=](S v) { return std::pow(v, p); },
      [=](S v, S, S g) {
        if (p == S(0)) return S(0);
        if (v == S(0)) return p >= S(1) ? (p == S(1) ? g : S(0)) : S(0);
        return g * p * std::pow(v, p - S(1));
      });
}

// ---------------------------------------------------------------------------
// Matrix multiplication: [m,k]x[k,p]; [...,m,k]x[k,p]; [...,m,k]x[...,k,p]
// with identical leading dims. Counts multiply-adds when FlopCounter is on.
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
inline void mm_accum(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
                     std::size_t p) {
  // c (m x p) += a (m x k) * b (k x p); c must be zeroed by the caller.
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      S av = arow[kk];
      if (av == S(0)) continue;
      const S* brow = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// c (m x p) += a^T where a is (k x m), times b (k x p).
template <class S>
inline void mm_at_b(const S* a, const S* b, S* c, std::size_t k, std::size_t m,
                    std::size_t p) {
  for (std::size_t kk = 0; kk < k; ++kk) {
    const S* arow = a + kk * m;
    const S* brow = b + kk * p;
    for (std::size_t i = 0; i < m; ++i) {
      S av = arow[i];
      if (av == S(0)) continue;
      S* crow = c + i * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// c (m x k) += a (m x p) * b^T where b is (k x p).
template <class S>
inline void mm_a_bt(const S* a, const S* b, S* c, std::size_t m, std::size_t p,
                    std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * p;
    S* crow = c + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const S* brow = b + kk * p;
      S acc = S(0);
      for (std::size_t j = 0; j < p; ++j) acc += arow[j] * brow[j];
      crow[kk] += acc;
    }
  }
}

}  // namespace detail

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeError(strfmt("matmul needs rank >= 2 operands, got %s and %s",
                            shape_str(a.shape()).c_str(), shape_str(b.shape()).c_str()));
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
  std::size_t k2 = bs[bs.size() - 2], p = bs[bs.size() - 1];
  if (k != k2)
    throw ShapeError(strfmt("matmul inner extents differ: %s vs %s",
                            shape_str(as).c_str(), shape_str(bs).c_str()));

  bool b_is_2d = b.ndim() == 2;
  std::size_t lead = 1;
  if (!b_is_2d) {
    if (as.size() != bs.size() ||
        !std::equal(as.begin(), as.end() - 2, bs.begin()))
      throw ShapeError(strfmt("matmul leading dims differ: %s vs %s",
                              shape_str(as).c_str(), shape_str(bs).c_str()));
  }
  for (std::size_t i = 0; i + 2 < as.size(); ++i) lead *= as[i];

  Shape os(as.begin(), as.end() - 2);
  os.push_back(m);
  os.push_back(p);
  std::vector<S> out(lead * m * p, S(0));
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (std::size_t l = 0; l < lead; ++l)
    detail::mm_accum(pa + l * m * k, b_is_2d ? pb : pb + l * k * p, out.data() + l * m * p,
                     m, k, p);
  if (FlopCounter::enabled())
    FlopCounter::madds() += static_cast<long long>(lead) * m * k * p;

  bool req = a.requires_grad() || b.requires_grad();
  TensorT<S> result = detail::make_result<S>(os, std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto ai = a.impl(), bi = b.impl(), oi = result.impl();
    detail::record<S>([ai, bi, oi, lead, m, k, p, b_is_2d]() {
      if (oi->grad.empty()) return;
      const S* g = oi->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t l = 0; l < lead; ++l)
          detail::mm_a_bt(g + l * m * p,
                          b_is_2d ? bi->data.data() : bi->data.data() + l * k * p,
                          ai->grad.data() + l * m * k, m, p, k);
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t l = 0; l < lead; ++l)
          detail::mm_at_b(ai->data.data() + l * m * k, g + l * m * p,
                          b_is_2d ? bi->grad.data() : bi->grad.data() + l * k * p, m, k, p);
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Shape manipulation. All pure copies, so roundtrips are bit-exact.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw ShapeError(strfmt("reshape %s -> %s changes element count",
                            shape_str(x.shape()).c_str(), shape_str(shape).c_str()));
  bool req = x.requires_grad();
  TensorT<S> result = detail::make_result<S>(std::move(shape), x.data(), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    detail::record<S>([xi, oi]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return result;
}

/// Swaps two axes (copying).
template <class S>
TensorT<S> transpose(const TensorT<S>& x, std::size_t a0, std::size_t a1) {
  std::size_t r = x.ndim();
  if (a0 >= r || a1 >= r) throw ShapeError("transpose axis out of range");
  if (a0 == a1) return reshape(x, x.shape());
  if (a0 > a1) std::swap(a0, a1);
  const Shape& s = x.shape();
  Shape os = s;
  std::swap(os[a0], os[a1]);

  std::size_t outer = 1, mid = 1, inner = 1;
  for (std::size_t i = 0; i < a0; ++i) outer *= s[i];
  for (std::size_t i = a0 + 1; i < a1; ++i) mid *= s[i];
  for (std::size_t i = a1 + 1; i < r; ++i) inner *= s[i];
  std::size_t d0 = s[a0], d1 = s[a1];

  auto run = [=](const S* src, S* dst, bool accumulate) {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i0 = 0; i0 < d0; ++i0)
        for (std::size_t m = 0; m < mid; ++m)
          for (std::size_t i1 = 0; i1 < d1; ++i1) {
            const S* sp = src + (((o * d0 + i0) * mid + m) * d1 + i1) * inner;
            S* dp = dst + (((o * d1 + i1) * mid + m) * d0 + i0) * inner;
            if (accumulate)
              for (std::size_t q = 0; q < inner; ++q) dp[q] += sp[q];
            else
              for (std::size_t q = 0; q < inner; ++q) dp[q] = sp[q];
          }
  };

  std::vector<S> out(x.size());
  run(x.data().data(), out.data(), false);
  bool req = x.requires_grad();
  TensorT<S> result = detail::make_result<S>(os, std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    // The inverse of a swap is the same swap with (d0, d1) exchanged.
    auto run_back = [=](const S* src, S* dst) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i1 = 0; i1 < d1; ++i1)
          for (std::size_t m = 0; m < mid; ++m)
            for (std::size_t i0 = 0; i0 < d0; ++i0) {
              const S* sp = src + (((o * d1 + i1) * mid + m) * d0 + i0) * inner;
              S* dp = dst + (((o * d0 + i0) * mid + m) * d1 + i1) * inner;
              for (std::size_t q = 0; q < inner; ++q) dp[q] += sp[q];
            }
    };
    detail::record<S>([xi, oi, run_back]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      run_back(oi->grad.data(), xi->grad.data());
    });
  }
  return result;
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat axis out of range");
  Shape os = s0;
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw ShapeError(strfmt("concat shape mismatch: %s vs %s",
                                shape_str(s0).c_str(), shape_str(s).c_str()));
    total_axis += s[axis];
  }
  os[axis] = total_axis;

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  std::vector<S> out(shape_size(os));
  std::size_t offset = 0;
  bool req = false;
  for (const auto& p : parts) {
    std::size_t ax = p.shape()[axis];
    const S* src = p.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * ax * inner, src + (o + 1) * ax * inner,
                out.data() + (o * total_axis + offset) * inner);
    offset += ax;
    req = req || p.requires_grad();
  }

  TensorT<S> result = detail::make_result<S>(os, std::move(out), req);
  if (detail::tracing<S>(req)) {
    std::vector<std::shared_ptr<TensorImpl<S>>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    auto oi = result.impl();
    detail::record<S>([impls, oi, outer, inner, total_axis, axis]() {
      if (oi->grad.empty()) return;
      std::size_t offset = 0;
      for (auto& pi : impls) {
        std::size_t ax = pi->shape[axis];
        if (pi->requires_grad) {
          pi->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o) {
            const S* g = oi->grad.data() + (o * total_axis + offset) * inner;
            S* dst = pi->grad.data() + o * ax * inner;
            for (std::size_t q = 0; q < ax * inner; ++q) dst[q] += g[q];
          }
        }
        offset += ax;
      }
    });
  }
  return result;
}

template <class S>
TensorT<S> slice(const TensorT<S>& x, std::size_t axis, std::size_t start,
                 std::size_t len) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("slice axis out of range");
  if (start + len > s[axis])
    throw ShapeError(strfmt("slice [%zu,%zu) exceeds extent %zu", start, start + len,
                            s[axis]));
  Shape os = s;
  os[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  std::vector<S> out(shape_size(os));
  const S* src = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(src + (o * s[axis] + start) * inner, src + (o * s[axis] + start + len) * inner,
              out.data() + o * len * inner);

  bool req = x.requires_grad();
  std::size_t ax_extent = s[axis];
  TensorT<S> result = detail::make_result<S>(os, std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    detail::record<S>([xi, oi, outer, inner, ax_extent, start, len]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        const S* g = oi->grad.data() + o * len * inner;
        S* dst = xi->grad.data() + (o * ax_extent + start) * inner;
        for (std::size_t q = 0; q < len * inner; ++q) dst[q] += g[q];
      }
    });
  }
  return result;
}

/// out.data[i] = x.data[index_map[i]]. The map needs not be a bijection;
/// backward scatter-adds. Window partition/merge, cyclic shifts, patch
/// extraction and space-to-depth rearrangement are all instances of this.
template <class S>
TensorT<S> reindex(const TensorT<S>& x, const std::vector<std::size_t>& index_map,
                   Shape out_shape) {
  if (shape_size(out_shape) != index_map.size())
    throw ShapeError("reindex: map length does not match output shape");
  std::vector<S> out(index_map.size());
  const auto& dx = x.data();
  for (std::size_t i = 0; i < index_map.size(); ++i) {
    if (index_map[i] >= dx.size()) throw ShapeError("reindex: index out of range");
    out[i] = dx[index_map[i]];
  }
  bool req = x.requires_grad();
  TensorT<S> result = detail::make_result<S>(std::move(out_shape), std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    detail::record<S>([xi, oi, index_map]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < index_map.size(); ++i)
        xi->grad[index_map[i]] += oi->grad[i];
    });
  }
  return result;
}

/// Gathers along the last axis: table [..., K] with idx of length M gives
/// out [..., M]; used for relative position bias lookup.
template <class S>
TensorT<S> gather_last(const TensorT<S>& table, const std::vector<std::size_t>& idx,
                       std::size_t out_last) {
  if (idx.size() != out_last) throw ShapeError("gather_last: index length mismatch");
  const Shape& s = table.shape();
  std::size_t k = s.back();
  std::size_t rows = table.size() / k;
  for (auto j : idx)
    if (j >= k) throw ShapeError("gather_last: index out of range");
  Shape os = s;
  os.back() = out_last;
  std::vector<S> out(rows * out_last);
  const auto& dt = table.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < out_last; ++i) out[r * out_last + i] = dt[r * k + idx[i]];
  bool req = table.requires_grad();
  TensorT<S> result = detail::make_result<S>(os, std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto ti = table.impl(), oi = result.impl();
    detail::record<S>([ti, oi, idx, rows, k, out_last]() {
      if (oi->grad.empty()) return;
      ti->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < out_last; ++i)
          ti->grad[r * k + idx[i]] += oi->grad[r * out_last + i];
    });
  }
  return result;
}

/// Row-wise select: x [B, K] with indices [B] gives out [B].
template <class S>
TensorT<S> pick(const TensorT<S>& x, const std::vector<std::size_t>& indices) {
  if (x.ndim() != 2) throw ShapeError("pick expects a rank-2 tensor");
  std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (indices.size() != rows) throw ShapeError("pick: one index per row required");
  std::vector<S> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (indices[r] >= cols)
      throw ContractError(strfmt("pick: index %zu out of range %zu", indices[r], cols));
    out[r] = x.data()[r * cols + indices[r]];
  }
  bool req = x.requires_grad();
  TensorT<S> result = detail::make_result<S>(Shape{rows}, std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    detail::record<S>([xi, oi, indices, cols]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t r = 0; r < indices.size(); ++r)
        xi->grad[r * cols + indices[r]] += oi->grad[r];
    });
  }
  return result;
}

/// Tiles x along a new leading axis of extent n; backward sums over it.
template <class S>
TensorT<S> expand_lead(const TensorT<S>& x, std::size_t n) {
  Shape os;
  os.push_back(n);
  for (auto d : x.shape()) os.push_back(d);
  std::vector<S> out(n * x.size());
  for (std::size_t i = 0; i < n; ++i)
    std::copy(x.data().begin(), x.data().end(), out.begin() + i * x.size());
  bool req = x.requires_grad();
  TensorT<S> result = detail::make_result<S>(std::move(os), std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    std::size_t sz = x.size();
    detail::record<S>([xi, oi, n, sz]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t q = 0; q < sz; ++q) xi->grad[q] += oi->grad[i * sz + q];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  S acc = S(0);
  for (S v : x.data()) acc += v;
  bool req = x.requires_grad();
  TensorT<S> result = detail::make_result<S>(Shape{}, std::vector<S>{acc}, req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    detail::record<S>([xi, oi]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      S g = oi->grad[0];
      for (auto& v : xi->grad) v += g;
    });
  }
  return result;
}

template <class S>
TensorT<S> mean(const TensorT<S>& x) {
  return mul_scalar(sum(x), S(1) / S(x.size()));
}

namespace detail {
inline void reduce_extents(const Shape& s, std::size_t axis, std::size_t& outer,
                           std::size_t& n, std::size_t& inner) {
  if (axis >= s.size()) throw ShapeError("reduction axis out of range");
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  n = s[axis];
}
}  // namespace detail

template <class S>
TensorT<S> sum(const TensorT<S>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::reduce_extents(x.shape(), axis, outer, n, inner);
  Shape os;
  for (std::size_t i = 0; i < x.ndim(); ++i)
    if (i != axis) os.push_back(x.shape()[i]);
  std::vector<S> out(outer * inner, S(0));
  const S* src = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t q = 0; q < inner; ++q)
        out[o * inner + q] += src[(o * n + j) * inner + q];
  bool req = x.requires_grad();
  TensorT<S> result = detail::make_result<S>(std::move(os), std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    detail::record<S>([xi, oi, outer, n, inner]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t q = 0; q < inner; ++q)
            xi->grad[(o * n + j) * inner + q] += oi->grad[o * inner + q];
    });
  }
  return result;
}

template <class S>
TensorT<S> mean(const TensorT<S>& x, std::size_t axis) {
  return mul_scalar(sum(x, axis), S(1) / S(x.shape()[axis]));
}

// ---------------------------------------------------------------------------
// Softmax family and layer normalization (fused primitives with closed-form
// backward rules).
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> softmax(const TensorT<S>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::reduce_extents(x.shape(), axis, outer, n, inner);
  std::vector<S> out(x.size());
  const S* src = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t q = 0; q < inner; ++q) {
      S mx = src[o * n * inner + q];
      for (std::size_t j = 1; j < n; ++j)
        mx = std::max(mx, src[(o * n + j) * inner + q]);
      S denom = S(0);
      for (std::size_t j = 0; j < n; ++j) {
        S e = std::exp(src[(o * n + j) * inner + q] - mx);
        out[(o * n + j) * inner + q] = e;
        denom += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[(o * n + j) * inner + q] /= denom;
    }
  bool req = x.requires_grad();
  TensorT<S> result = detail::make_result<S>(x.shape(), std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    detail::record<S>([xi, oi, outer, n, inner]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t q = 0; q < inner; ++q) {
          S dot = S(0);
          for (std::size_t j = 0; j < n; ++j) {
            std::size_t at = (o * n + j) * inner + q;
            dot += oi->grad[at] * oi->data[at];
          }
          for (std::size_t j = 0; j < n; ++j) {
            std::size_t at = (o * n + j) * inner + q;
            xi->grad[at] += oi->data[at] * (oi->grad[at] - dot);
          }
        }
    });
  }
  return result;
}

template <class S>
TensorT<S> log_softmax(const TensorT<S>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::reduce_extents(x.shape(), axis, outer, n, inner);
  std::vector<S> out(x.size());
  const S* src = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t q = 0; q < inner; ++q) {
      S mx = src[o * n * inner + q];
      for (std::size_t j = 1; j < n; ++j)
        mx = std::max(mx, src[(o * n + j) * inner + q]);
      S denom = S(0);
      for (std::size_t j = 0; j < n; ++j)
        denom += std::exp(src[(o * n + j) * inner + q] - mx);
      S lse = mx + std::log(denom);
      for (std::size_t j = 0; j < n; ++j) {
        std::size_t at = (o * n + j) * inner + q;
        out[at] = src[at] - lse;
      }
    }
  bool req = x.requires_grad();
  TensorT<S> result = detail::make_result<S>(x.shape(), std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), oi = result.impl();
    detail::record<S>([xi, oi, outer, n, inner]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t q = 0; q < inner; ++q) {
          S gsum = S(0);
          for (std::size_t j = 0; j < n; ++j) gsum += oi->grad[(o * n + j) * inner + q];
          for (std::size_t j = 0; j < n; ++j) {
            std::size_t at = (o * n + j) * inner + q;
            xi->grad[at] += oi->grad[at] - std::exp(oi->data[at]) * gsum;
          }
        }
    });
  }
  return result;
}

/// Normalizes over the last axis, then applies the affine (gamma, beta).
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma,
                      const TensorT<S>& beta, S eps = S(1e-5)) {
  if (x.ndim() == 0) throw ShapeError("layer_norm needs at least rank 1");
  std::size_t n = x.shape().back();
  if (gamma.size() != n || beta.size() != n)
    throw ShapeError(strfmt("layer_norm affine size %zu does not match feature dim %zu",
                            gamma.size(), n));
  std::size_t rows = x.size() / n;
  std::vector<S> out(x.size());
  std::vector<S> xhat(x.size());
  std::vector<S> inv_std(rows);
  const S* src = x.data().data();
  const S* g = gamma.data().data();
  const S* b = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = src + r * n;
    S mu = S(0);
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= S(n);
    S var = S(0);
    for (std::size_t j = 0; j < n; ++j) {
      S d = row[j] - mu;
      var += d * d;
    }
    var /= S(n);
    S is = S(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      S xh = (row[j] - mu) * is;
      xhat[r * n + j] = xh;
      out[r * n + j] = xh * g[j] + b[j];
    }
  }
  bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  TensorT<S> result = detail::make_result<S>(x.shape(), std::move(out), req);
  if (detail::tracing<S>(req)) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = result.impl();
    auto xh = std::make_shared<std::vector<S>>(std::move(xhat));
    auto is = std::make_shared<std::vector<S>>(std::move(inv_std));
    detail::record<S>([xi, gi, bi, oi, xh, is, rows, n]() {
      if (oi->grad.empty()) return;
      if (gi->requires_grad) gi->ensure_grad();
      if (bi->requires_grad) bi->ensure_grad();
      if (xi->requires_grad) xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const S* go = oi->grad.data() + r * n;
        const S* xhr = xh->data() + r * n;
        if (gi->requires_grad || bi->requires_grad) {
          for (std::size_t j = 0; j < n; ++j) {
            if (gi->requires_grad) gi->grad[j] += go[j] * xhr[j];
            if (bi->requires_grad) bi->grad[j] += go[j];
          }
        }
        if (xi->requires_grad) {
          S sum_gy = S(0), sum_gyx = S(0);
          for (std::size_t j = 0; j < n; ++j) {
            S gy = go[j] * gi->data[j];
            sum_gy += gy;
            sum_gyx += gy * xhr[j];
          }
          S inv_n = S(1) / S(n);
          for (std::size_t j = 0; j < n; ++j) {
            S gy = go[j] * gi->data[j];
            xi->grad[r * n + j] +=
                (*is)[r] * (gy - inv_n * sum_gy - xhr[j] * inv_n * sum_gyx);
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Construction helpers.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> randn(const Shape& shape, Rng& rng, S stddev = S(1), S mean = S(0)) {
  TensorT<S> t(shape);
  for (auto& v : t.data()) v = S(rng.normal(double(mean), double(stddev)));
  return t;
}

template <class S>
TensorT<S> rand_uniform(const Shape& shape, Rng& rng, S lo = S(0), S hi = S(1)) {
  TensorT<S> t(shape);
  for (auto& v : t.data()) v = S(rng.uniform(double(lo), double(hi)));
  return t;
}

template <class S>
TensorT<S> full_like_value(const Shape& shape, S v) {
  return TensorT<S>(shape, v);
}

// Default scalar type; switch at build time with -DMLTR_SCALAR=float.
#ifndef MLTR_SCALAR
#define MLTR_SCALAR double
#endif
using real_t = MLTR_SCALAR;
using Tensor = TensorT<real_t>;
using Tape = TapeT<real_t>;
using TapeScope = TapeScopeT<real_t>;

template <class S>
void backward(TapeT<S>& tape, const TensorT<S>& loss) {
  tape.backward(loss);
}

}  // namespace mltr
