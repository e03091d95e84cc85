#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "fie/array.hpp"
#include "fie/autodiff.hpp"
#include "fie/error.hpp"

// Differentiable primitives over Var. Every op computes its value eagerly and
// registers a closure that scatters the output gradient back to its inputs.
namespace fie::ops {

namespace detail {

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
  return a.tape();
}

inline void require_matrix(const Shape& s, const char* what) {
  if (s.size() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got " + shape_string(s));
  }
}

// out[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* o = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

// out[m x k] += g[m x n] * b[k x n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* out, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* gr = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* br = b + p * n;
      T acc{0};
      for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
      out[i * k + p] += acc;
    }
  }
}

// out[k x n] += a[m x k]^T * g[m x n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* gr = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      T* o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * gr[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Array<T> out({m, n});
  detail::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.push(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<T>& t, const Array<T>& g) {
    if (t.requires_grad(ia)) {
      detail::gemm_nt(g.data(), t.value(ib).data(), t.grad_for_input(ia).data(), m, n, k);
    }
    if (t.requires_grad(ib)) {
      detail::gemm_tn(t.value(ia).data(), g.data(), t.grad_for_input(ib).data(), m, k, n);
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  detail::require_matrix(a.shape(), "transpose");
  const std::size_t m = a.value().dim(0), n = a.value().dim(1);
  Array<T> out({n, m});
  const auto& av = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = av(i, j);
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [ia, m, n](Tape<T>& t, const Array<T>& g) {
    auto& ga = t.grad_for_input(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga(i, j) += g(j, i);
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.push(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Array<T>& g) {
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto& dst = t.grad_for_input(id);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("sub shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.push(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Array<T>& g) {
    if (t.requires_grad(ia)) {
      auto& dst = t.grad_for_input(ia);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& dst = t.grad_for_input(ib);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
    }
  });
}

// Elementwise product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.push(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Array<T>& g) {
    if (t.requires_grad(ia)) {
      auto& dst = t.grad_for_input(ia);
      const auto& o = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * o[i];
    }
    if (t.requires_grad(ib)) {
      auto& dst = t.grad_for_input(ib);
      const auto& o = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * o[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Array<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [ia, factor](Tape<T>& t, const Array<T>& g) {
    auto& dst = t.grad_for_input(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * factor;
  });
}

// x[m x n] + bias[n], bias broadcast over rows.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  auto& tape = detail::same_tape(x, bias);
  detail::require_matrix(x.shape(), "add_bias");
  const std::size_t m = x.value().dim(0), n = x.value().dim(1);
  if (bias.value().size() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " does not match columns of " + shape_string(x.shape()));
  }
  Array<T> out = x.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += bv[j];
  const std::size_t ix = x.id(), ib = bias.id();
  return tape.push(std::move(out), {ix, ib}, [ix, ib, m, n](Tape<T>& t, const Array<T>& g) {
    if (t.requires_grad(ix)) {
      auto& dst = t.grad_for_input(ix);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& dst = t.grad_for_input(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dst[j] += g(i, j);
    }
  });
}

// GELU, tanh approximation.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto& xv = x.value();
  Array<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
  }
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix](Tape<T>& t, const Array<T>& g) {
    const auto& xs = t.value(ix);
    auto& dst = t.grad_for_input(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xs[i];
      const double u = kC * (v + kA * v * v * v);
      const double th = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * kA * v * v);
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
      dst[i] += static_cast<T>(g[i] * d);
    }
  });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  const auto& xv = x.value();
  Array<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > T{0})) throw NumericError("log of non-positive value");
    out[i] = std::log(xv[i]);
  }
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix](Tape<T>& t, const Array<T>& g) {
    const auto& xs = t.value(ix);
    auto& dst = t.grad_for_input(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] / xs[i];
  });
}

// Sum of all elements, as a shape-[1] array.
template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().values()) acc += v;
  const std::size_t ix = x.id();
  return x.tape().push(Array<T>({1}, acc), {ix}, [ix](Tape<T>& t, const Array<T>& g) {
    auto& dst = t.grad_for_input(ix);
    for (auto& v : dst.values()) v += g[0];
  });
}

// log(sum(exp(x))) over all elements; max-shifted.
template <typename T>
Var<T> logsumexp(const Var<T>& x) {
  const auto& xv = x.value();
  if (xv.empty()) throw DegenerateError("logsumexp over an empty array");
  const T mx = *std::max_element(xv.values().begin(), xv.values().end());
  T acc{0};
  for (T v : xv.values()) acc += std::exp(v - mx);
  const T lse = mx + std::log(acc);
  const std::size_t ix = x.id();
  return x.tape().push(Array<T>({1}, lse), {ix}, [ix, lse](Tape<T>& t, const Array<T>& g) {
    const auto& xs = t.value(ix);
    auto& dst = t.grad_for_input(ix);
    for (std::size_t i = 0; i < xs.size(); ++i) dst[i] += g[0] * std::exp(xs[i] - lse);
  });
}

namespace detail {

template <typename T>
void check_mask(const Array<T>& x, const Mask* mask) {
  if (mask && mask->shape() != x.shape()) {
    throw DimensionError("mask shape " + shape_string(mask->shape()) +
                         " does not match input " + shape_string(x.shape()));
  }
}

}  // namespace detail

// Softmax along `axis`. Masked entries (mask value 0) are exactly zero in
// the output and receive no gradient.
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis, const Mask* mask = nullptr) {
  const auto& xv = x.value();
  detail::check_mask(xv, mask);
  const auto sp = detail::split_axis(xv.shape(), axis);
  Array<T> out(xv.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      auto at = [&](std::size_t k) { return (o * sp.extent + k) * sp.inner + in; };
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        if (mask && !(*mask)[at(k)]) continue;
        mx = std::max(mx, xv[at(k)]);
        any = true;
      }
      if (!any) throw DegenerateError("softmax over a fully masked slice");
      T denom{0};
      for (std::size_t k = 0; k < sp.extent; ++k) {
        if (mask && !(*mask)[at(k)]) continue;
        const T e = std::exp(xv[at(k)] - mx);
        out[at(k)] = e;
        denom += e;
      }
      for (std::size_t k = 0; k < sp.extent; ++k) out[at(k)] /= denom;
    }
  }
  const std::size_t ix = x.id(), out_id = x.tape().size();
  return x.tape().push(std::move(out), {ix}, [ix, out_id, sp](Tape<T>& t, const Array<T>& g) {
    const auto& y = t.value(out_id);
    auto& dst = t.grad_for_input(ix);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        auto at = [&](std::size_t k) { return (o * sp.extent + k) * sp.inner + in; };
        T dot{0};
        for (std::size_t k = 0; k < sp.extent; ++k) dot += g[at(k)] * y[at(k)];
        for (std::size_t k = 0; k < sp.extent; ++k) dst[at(k)] += y[at(k)] * (g[at(k)] - dot);
      }
    }
  });
}

// Log-softmax along `axis`. Masked outputs are set to 0 and carry no
// gradient; callers must only read unmasked entries.
template <typename T>
Var<T> log_softmax(const Var<T>& x, std::size_t axis, const Mask* mask = nullptr) {
  const auto& xv = x.value();
  detail::check_mask(xv, mask);
  const auto sp = detail::split_axis(xv.shape(), axis);
  Array<T> out(xv.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      auto at = [&](std::size_t k) { return (o * sp.extent + k) * sp.inner + in; };
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        if (mask && !(*mask)[at(k)]) continue;
        mx = std::max(mx, xv[at(k)]);
        any = true;
      }
      if (!any) throw DegenerateError("log_softmax over a fully masked slice");
      T denom{0};
      for (std::size_t k = 0; k < sp.extent; ++k) {
        if (mask && !(*mask)[at(k)]) continue;
        denom += std::exp(xv[at(k)] - mx);
      }
      const T lse = mx + std::log(denom);
      for (std::size_t k = 0; k < sp.extent; ++k) {
        if (mask && !(*mask)[at(k)]) continue;
        out[at(k)] = xv[at(k)] - lse;
      }
    }
  }
  std::optional<Mask> kept;
  if (mask) kept = *mask;
  const std::size_t ix = x.id(), out_id = x.tape().size();
  return x.tape().push(std::move(out), {ix},
                       [ix, out_id, sp, kept = std::move(kept)](Tape<T>& t, const Array<T>& g) {
    const auto& y = t.value(out_id);
    auto& dst = t.grad_for_input(ix);
    auto live = [&](std::size_t idx) { return !kept || (*kept)[idx]; };
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        auto at = [&](std::size_t k) { return (o * sp.extent + k) * sp.inner + in; };
        T gsum{0};
        for (std::size_t k = 0; k < sp.extent; ++k)
          if (live(at(k))) gsum += g[at(k)];
        for (std::size_t k = 0; k < sp.extent; ++k)
          if (live(at(k))) dst[at(k)] += g[at(k)] - std::exp(y[at(k)]) * gsum;
      }
    }
  });
}

// Layer normalisation over the last axis followed by gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  auto& tape = detail::same_tape(x, gain);
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  const std::size_t m = n == 0 ? 0 : xv.size() / n;
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " do not match last dim of " +
                         shape_string(xv.shape()));
  }
  Array<T> out(xv.shape());
  Array<T> xhat(xv.shape());
  std::vector<T> inv_std(m);
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = xv.data() + r * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xr[j] - mean) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.push(std::move(out), {ix, ig, ib},
                   [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                       Tape<T>& t, const Array<T>& g) {
    const auto& gv = t.value(ig);
    if (t.requires_grad(ig)) {
      auto& dg = t.grad_for_input(ig);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) dg[j] += g[r * n + j] * xhat[r * n + j];
    }
    if (t.requires_grad(ib)) {
      auto& db = t.grad_for_input(ib);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
    }
    if (t.requires_grad(ix)) {
      auto& dx = t.grad_for_input(ix);
      for (std::size_t r = 0; r < m; ++r) {
        T s1{0}, s2{0};
        for (std::size_t j = 0; j < n; ++j) {
          const T dh = g[r * n + j] * gv[j];
          s1 += dh;
          s2 += dh * xhat[r * n + j];
        }
        const T inv_n = T{1} / static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) {
          const T dh = g[r * n + j] * gv[j];
          dx[r * n + j] += inv_std[r] * (dh - inv_n * s1 - xhat[r * n + j] * inv_n * s2);
        }
      }
    }
  });
}

// Concatenation along `axis`; the gradient is split back by each input's
// extent along that axis.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero arrays");
  auto& tape = parts.front().tape();
  const Shape& base = parts.front().shape();
  Shape out_shape = base;
  if (axis >= base.size()) throw DimensionError("concat axis out of range");
  out_shape[axis] = 0;
  std::vector<std::size_t> ids, extents;
  for (const auto& p : parts) {
    if (&p.tape() != &tape) throw ContractError("concat operands live on different tapes");
    const Shape& s = p.shape();
    bool ok = s.size() == base.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == base[i];
    if (!ok) {
      throw DimensionError("concat shape mismatch on axis " + std::to_string(axis) + ": " +
                           shape_string(base) + " vs " + shape_string(s));
    }
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
    extents.push_back(s[axis]);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= base[i];
  for (std::size_t i = axis + 1; i < base.size(); ++i) inner *= base[i];
  const std::size_t total = out_shape[axis];
  Array<T> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].value();
    const std::size_t block = extents[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * block, block, out.data() + (o * total + offset) * inner);
    }
    offset += extents[p];
  }
  return tape.push(std::move(out), ids,
                   [ids, extents, outer, inner, total](Tape<T>& t, const Array<T>& g) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t block = extents[p] * inner;
      if (t.requires_grad(ids[p]) && block > 0) {
        auto& dst = t.grad_for_input(ids[p]);
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = g.data() + (o * total + off) * inner;
          T* d = dst.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) d[i] += src[i];
        }
      }
      off += extents[p];
    }
  });
}

// Elements [begin, end) along `axis`.
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  const auto sp = detail::split_axis(s, axis);
  if (begin > end || end > sp.extent) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range on axis " + std::to_string(axis) + " of " +
                         shape_string(s));
  }
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Array<T> out(out_shape);
  const std::size_t block = (end - begin) * sp.inner;
  const auto& v = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(v.data() + (o * sp.extent + begin) * sp.inner, block, out.data() + o * block);
  }
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix, sp, begin, block](Tape<T>& t, const Array<T>& g) {
    if (block == 0) return;
    auto& dst = t.grad_for_input(ix);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      T* d = dst.data() + (o * sp.extent + begin) * sp.inner;
      const T* src = g.data() + o * block;
      for (std::size_t i = 0; i < block; ++i) d[i] += src[i];
    }
  });
}

// Rows of a matrix selected by index; repeated indices accumulate gradient.
template <typename T>
Var<T> gather_rows(const Var<T>& x, const std::vector<std::size_t>& rows) {
  detail::require_matrix(x.shape(), "gather_rows");
  const std::size_t m = x.value().dim(0), n = x.value().dim(1);
  Array<T> out({rows.size(), n});
  const auto& v = x.value();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) {
      throw DimensionError("gather_rows index " + std::to_string(rows[r]) +
                           " out of range for " + std::to_string(m) + " rows");
    }
    std::copy_n(v.data() + rows[r] * n, n, out.data() + r * n);
  }
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix, rows, n](Tape<T>& t, const Array<T>& g) {
    auto& dst = t.grad_for_input(ix);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      T* d = dst.data() + rows[r] * n;
      const T* src = g.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += src[j];
    }
  });
}

// Flat-index gather producing a rank-1 array.
template <typename T>
Var<T> gather(const Var<T>& x, const std::vector<std::size_t>& index) {
  const auto& v = x.value();
  Array<T> out({index.size()});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= v.size()) throw DimensionError("gather index out of range");
    out[i] = v[index[i]];
  }
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix, index](Tape<T>& t, const Array<T>& g) {
    auto& dst = t.grad_for_input(ix);
    for (std::size_t i = 0; i < index.size(); ++i) dst[index[i]] += g[i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (element_count(shape) != x.value().size()) {
    throw DimensionError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  Array<T> out(std::move(shape), x.value().storage());
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix](Tape<T>& t, const Array<T>& g) {
    auto& dst = t.grad_for_input(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

template <typename T>
Var<T> embedding_lookup(Tape<T>& tape, Parameter<T>& table, const std::vector<std::size_t>& ids) {
  for (std::size_t id : ids) {
    if (id >= table.value.dim(0)) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(table.value.dim(0)));
    }
  }
  return gather_rows(tape.parameter(table), ids);
}

// x * W + b for a row-major batch of vectors.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_bias(matmul(x, w), b);
}

template <typename T>
bool all_finite(const Array<T>& a) {
  for (T v : a.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace fie::ops
