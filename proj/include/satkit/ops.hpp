#pragma once

// Differentiable primitives. None of them broadcast implicitly: binary ops
// need identical shapes, and the only row-broadcast is add_bias. Reductions
// named *_lastdim act on the final axis and treat the rest as rows.

#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "satkit/tensor.hpp"

namespace satkit {

namespace detail {

template <class Real>
std::vector<Real>* grad_of(Node<Real>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->grad : nullptr;
}

template <class Real>
void check_finite(const char* op, std::span<const Real> v) {
  for (Real x : v)
    if (!std::isfinite(x)) throw Error(std::string(op) + ": non-finite input");
}

template <class Real>
void require_same(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) shape_mismatch(op, a.shape(), b.shape());
}

template <class Real>
void require_rank(const char* op, const Tensor<Real>& a, std::size_t r) {
  if (a.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(a.shape()));
}

template <class Real>
Shape drop_last(const Shape& s) {
  return Shape(s.begin(), s.end() - (s.empty() ? 0 : 1));
}

// C[m,n] (+)= A[m,k] * B[k,n], serial in k for each output element.
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_rows(m, k * n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      Real* ci = c + i * n;
      const Real* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const Real av = ai[p];
        const Real* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  });
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_rows(m, k * n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const Real* ai = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const Real* bj = b + j * k;
        Real s = 0;
        for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        c[i * n + j] += s;
      }
    }
  });
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* ai = a + i * k;
    const Real* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = ai[p];
      if (av == Real(0)) continue;
      Real* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

template <class Real, class F, class D>
Tensor<Real> unary(const char* op, const Tensor<Real>& x, F f, D dfdx) {
  std::vector<Real> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_op<Real>(op, x.shape(), std::move(out), {&x}, [dfdx](Node<Real>& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& xin = self.parents[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      (*gx)[i] += self.grad[i] * dfdx(xin[i], self.value[i]);
  });
}

}  // namespace detail

// (m x k) * (k x n)
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_mismatch("matmul", a.shape(), b.shape());
  std::vector<Real> out(m * n, Real(0));
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_op<Real>("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node<Real>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* ga = detail::grad_of(self, 0))
      detail::gemm_nt(self.grad.data(), bv.data(), ga->data(), m, n, k);
    if (auto* gb = detail::grad_of(self, 1))
      detail::gemm_tn(av.data(), self.grad.data(), gb->data(), m, k, n);
  });
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<Real> out(m * n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_op<Real>("transpose", {n, m}, std::move(out), {&a}, [m, n](Node<Real>& self) {
    auto* ga = detail::grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += self.grad[j * m + i];
  });
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same("add", a, b);
  std::vector<Real> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op<Real>("add", a.shape(), std::move(out), {&a, &b}, [](Node<Real>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* g = detail::grad_of(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same("sub", a, b);
  std::vector<Real> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_op<Real>("sub", a.shape(), std::move(out), {&a, &b}, [](Node<Real>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same("mul", a, b);
  std::vector<Real> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_op<Real>("mul", a.shape(), std::move(out), {&a, &b}, [](Node<Real>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
  std::vector<Real> out(a.values());
  for (auto& v : out) v *= s;
  return make_op<Real>("scale", a.shape(), std::move(out), {&a}, [s](Node<Real>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real s) {
  std::vector<Real> out(a.values());
  for (auto& v : out) v += s;
  return make_op<Real>("add_scalar", a.shape(), std::move(out), {&a}, [](Node<Real>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

// x[..., n] + bias[n], bias repeated over every row.
template <class Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias) {
  detail::require_rank("add_bias", bias, 1);
  if (x.rank() == 0 || x.cols() != bias.numel()) shape_mismatch("add_bias", x.shape(), bias.shape());
  const std::size_t n = bias.numel(), rows = x.rows();
  std::vector<Real> out(x.values());
  const auto& bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  return make_op<Real>("add_bias", x.shape(), std::move(out), {&x, &bias},
                       [rows, n](Node<Real>& self) {
                         if (auto* g = detail::grad_of(self, 0))
                           for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
                         if (auto* g = detail::grad_of(self, 1))
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[r * n + j];
                       });
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  return detail::unary<Real>(
      "relu", x, [](Real v) { return v > Real(0) ? v : Real(0); },
      [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

template <class Real>
Tensor<Real> tanh(const Tensor<Real>& x) {
  return detail::unary<Real>(
      "tanh", x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& x) {
  return detail::unary<Real>(
      "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

// Natural log; zero maps to -inf, negative or non-finite input is an error.
template <class Real>
Tensor<Real> log(const Tensor<Real>& x) {
  detail::check_finite<Real>("log", x.data());
  for (Real v : x.values())
    if (v < Real(0)) throw Error("log: negative input");
  return detail::unary<Real>(
      "log", x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

template <class Real>
Tensor<Real> softmax_lastdim(const Tensor<Real>& x) {
  detail::check_finite<Real>("softmax_lastdim", x.data());
  const std::size_t n = x.cols(), rows = x.rows();
  std::vector<Real> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * n;
    Real* yr = out.data() + r * n;
    const Real mx = *std::max_element(xr, xr + n);
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  return make_op<Real>("softmax_lastdim", x.shape(), std::move(out), {&x},
                       [rows, n](Node<Real>& self) {
                         auto* g = detail::grad_of(self, 0);
                         if (!g) return;
                         for (std::size_t r = 0; r < rows; ++r) {
                           const Real* y = self.value.data() + r * n;
                           const Real* dy = self.grad.data() + r * n;
                           Real dot = 0;
                           for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                           for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += y[j] * (dy[j] - dot);
                         }
                       });
}

// Softmax restricted to entries with allowed[i] != 0; disallowed entries act
// as -inf logits and come out as exact zeros. Each row needs one allowed entry.
template <class Real>
Tensor<Real> masked_softmax_lastdim(const Tensor<Real>& x, const std::vector<char>& allowed) {
  if (allowed.size() != x.numel())
    throw ShapeError("masked_softmax_lastdim: mask has " + std::to_string(allowed.size()) +
                     " entries for shape " + shape_str(x.shape()));
  detail::check_finite<Real>("masked_softmax_lastdim", x.data());
  const std::size_t n = x.cols(), rows = x.rows();
  std::vector<Real> out(x.numel(), Real(0));
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * n;
    const char* ar = allowed.data() + r * n;
    Real* yr = out.data() + r * n;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (ar[j]) mx = std::max(mx, xr[j]);
    if (mx == -std::numeric_limits<Real>::infinity())
      throw Error("masked_softmax_lastdim: row " + std::to_string(r) + " is fully masked");
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (ar[j]) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j)
      if (ar[j]) yr[j] /= z;
  }
  return make_op<Real>("masked_softmax_lastdim", x.shape(), std::move(out), {&x},
                       [rows, n](Node<Real>& self) {
                         auto* g = detail::grad_of(self, 0);
                         if (!g) return;
                         for (std::size_t r = 0; r < rows; ++r) {
                           const Real* y = self.value.data() + r * n;
                           const Real* dy = self.grad.data() + r * n;
                           Real dot = 0;
                           for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                           for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += y[j] * (dy[j] - dot);
                         }
                       });
}

template <class Real>
Tensor<Real> log_softmax_lastdim(const Tensor<Real>& x) {
  detail::check_finite<Real>("log_softmax_lastdim", x.data());
  const std::size_t n = x.cols(), rows = x.rows();
  std::vector<Real> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * n;
    Real* yr = out.data() + r * n;
    const Real mx = *std::max_element(xr, xr + n);
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
    const Real lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] - lse;
  }
  return make_op<Real>("log_softmax_lastdim", x.shape(), std::move(out), {&x},
                       [rows, n](Node<Real>& self) {
                         auto* g = detail::grad_of(self, 0);
                         if (!g) return;
                         for (std::size_t r = 0; r < rows; ++r) {
                           const Real* y = self.value.data() + r * n;
                           const Real* dy = self.grad.data() + r * n;
                           Real s = 0;
                           for (std::size_t j = 0; j < n; ++j) s += dy[j];
                           for (std::size_t j = 0; j < n; ++j)
                             (*g)[r * n + j] += dy[j] - std::exp(y[j]) * s;
                         }
                       });
}

// Reduces the last axis; a rank-1 input gives a scalar.
template <class Real>
Tensor<Real> logsumexp_lastdim(const Tensor<Real>& x) {
  detail::check_finite<Real>("logsumexp_lastdim", x.data());
  if (x.rank() == 0) throw ShapeError("logsumexp_lastdim: scalar input");
  const std::size_t n = x.cols(), rows = x.rows();
  std::vector<Real> out(rows);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * n;
    const Real mx = *std::max_element(xr, xr + n);
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
    out[r] = mx + std::log(z);
  }
  return make_op<Real>("logsumexp_lastdim", detail::drop_last<Real>(x.shape()), std::move(out), {&x},
                       [rows, n](Node<Real>& self) {
                         auto* g = detail::grad_of(self, 0);
                         if (!g) return;
                         const auto& xin = self.parents[0]->value;
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j)
                             (*g)[r * n + j] += self.grad[r] * std::exp(xin[r * n + j] - self.value[r]);
                       });
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_mismatch("reshape", x.shape(), shape);
  return make_op<Real>("reshape", std::move(shape), x.values(), {&x}, [](Node<Real>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

// Concatenates along `axis`; every other extent must agree.
template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) shape_mismatch("concat", s0, p.shape());
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && p.dim(d) != s0[d]) shape_mismatch("concat", s0, p.shape());
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  const std::size_t out_stride = out_shape[axis] * inner;
  std::vector<Real> out(shape_numel(out_shape));
  std::vector<std::size_t> widths, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    const auto& pv = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * w, w, out.data() + o * out_stride + off);
    widths.push_back(w);
    offsets.push_back(off);
    off += w;
  }
  auto n = std::make_shared<Node<Real>>();
  n->op = "concat";
  n->shape = out_shape;
  n->value = std::move(out);
  bool needs = false;
  if (grad_mode_flag())
    for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    n->backward_fn = [outer, out_stride, widths, offsets](Node<Real>& self) {
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        auto* g = detail::grad_of(self, i);
        if (!g) continue;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < widths[i]; ++j)
            (*g)[o * widths[i] + j] += self.grad[o * out_stride + offsets[i] + j];
      }
    };
  }
  return Tensor<Real>(std::move(n));
}

// Half-open range [begin, end) along `axis`.
template <class Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t in_stride = x.dim(axis) * inner, w = (end - begin) * inner, off = begin * inner;
  std::vector<Real> out(outer * w);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.data() + o * in_stride + off, w, out.data() + o * w);
  return make_op<Real>("slice", std::move(out_shape), std::move(out), {&x},
                       [outer, in_stride, w, off](Node<Real>& self) {
                         auto* g = detail::grad_of(self, 0);
                         if (!g) return;
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t j = 0; j < w; ++j)
                             (*g)[o * in_stride + off + j] += self.grad[o * w + j];
                       });
}

// Normalizes the last axis, then applies gain and bias (both of that width).
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-6)) {
  const std::size_t n = x.cols(), rows = x.rows();
  if (gain.numel() != n) shape_mismatch("layer_norm", x.shape(), gain.shape());
  if (bias.numel() != n) shape_mismatch("layer_norm", x.shape(), bias.shape());
  std::vector<Real> out(x.numel()), xhat(x.numel()), inv_std(rows);
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * n;
    Real mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= Real(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= Real(n);
    inv_std[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mean) * inv_std[r];
      out[r * n + j] = gv[j] * xhat[r * n + j] + bv[j];
    }
  }
  return make_op<Real>(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
      [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Real>& self) {
        const auto& gv = self.parents[1]->value;
        auto* gx = detail::grad_of(self, 0);
        auto* gg = detail::grad_of(self, 1);
        auto* gb = detail::grad_of(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* dy = self.grad.data() + r * n;
          const Real* xh = xhat.data() + r * n;
          if (gg)
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += dy[j] * xh[j];
          if (gb)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += dy[j];
          if (gx) {
            Real m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const Real d = dy[j] * gv[j];
              m1 += d;
              m2 += d * xh[j];
            }
            m1 /= Real(n);
            m2 /= Real(n);
            for (std::size_t j = 0; j < n; ++j)
              (*gx)[r * n + j] += inv_std[r] * (dy[j] * gv[j] - m1 - xh[j] * m2);
          }
        }
      });
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real s = 0;
  for (Real v : x.values()) s += v;
  return make_op<Real>("sum", Shape{}, std::vector<Real>{s}, {&x}, [](Node<Real>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (auto& v : *g) v += self.grad[0];
  });
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  return scale(sum(x), Real(1) / Real(x.numel()));
}

// Rows of a (V x d) table selected by id.
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& table, const std::vector<int>& ids) {
  detail::require_rank("gather_rows", table, 2);
  const std::size_t d = table.dim(1), v = table.dim(0);
  std::vector<Real> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " outside table " +
                       shape_str(table.shape()));
    std::copy_n(table.values().data() + ids[i] * d, d, out.data() + i * d);
  }
  return make_op<Real>("gather_rows", {ids.size(), d}, std::move(out), {&table},
                       [ids, d](Node<Real>& self) {
                         auto* g = detail::grad_of(self, 0);
                         if (!g) return;
                         for (std::size_t i = 0; i < ids.size(); ++i)
                           for (std::size_t j = 0; j < d; ++j)
                             (*g)[ids[i] * d + j] += self.grad[i * d + j];
                       });
}

// Elements at flat indices, as a rank-1 tensor.
template <class Real>
Tensor<Real> take(const Tensor<Real>& x, const std::vector<std::size_t>& idx) {
  std::vector<Real> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.numel())
      throw ShapeError("take: index " + std::to_string(idx[i]) + " outside " + shape_str(x.shape()));
    out[i] = x.values()[idx[i]];
  }
  return make_op<Real>("take", {idx.size()}, std::move(out), {&x}, [idx](Node<Real>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < idx.size(); ++i) (*g)[idx[i]] += self.grad[i];
  });
}

// Row t*V + v of the result is a[t] + b[v], for a (T x d) and b (V x d).
template <class Real>
Tensor<Real> pair_add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_rank("pair_add", a, 2);
  detail::require_rank("pair_add", b, 2);
  if (a.dim(1) != b.dim(1)) shape_mismatch("pair_add", a.shape(), b.shape());
  const std::size_t T = a.dim(0), V = b.dim(0), d = a.dim(1);
  std::vector<Real> out(T * V * d);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t v = 0; v < V; ++v)
      for (std::size_t j = 0; j < d; ++j) out[(t * V + v) * d + j] = av[t * d + j] + bv[v * d + j];
  return make_op<Real>("pair_add", {T * V, d}, std::move(out), {&a, &b}, [T, V, d](Node<Real>& self) {
    auto* ga = detail::grad_of(self, 0);
    auto* gb = detail::grad_of(self, 1);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t v = 0; v < V; ++v)
        for (std::size_t j = 0; j < d; ++j) {
          const Real g = self.grad[(t * V + v) * d + j];
          if (ga) (*ga)[t * d + j] += g;
          if (gb) (*gb)[v * d + j] += g;
        }
  });
}

// Inverted dropout; identity when rate is 0.
template <class Real, class Rng>
Tensor<Real> dropout(const Tensor<Real>& x, Real rate, Rng& rng) {
  if (rate <= Real(0)) return x;
  if (rate >= Real(1)) throw Error("dropout: rate must be below 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const Real s = Real(1) / (Real(1) - rate);
  std::vector<Real> m(x.numel());
  for (auto& v : m) v = keep(rng) ? s : Real(0);
  return mul(x, Tensor<Real>(x.shape(), std::move(m)));
}

}  // namespace satkit
