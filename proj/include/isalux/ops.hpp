// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <numbers>

#include "isalux/tensor.hpp"

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

// Differentiable operations. Every op computes its forward value eagerly and,
// when gradients are enabled and an input requires grad, appends a backward
// rule to the thread's tape. Reductions accumulate in double regardless of T.

namespace isalux::ops {

namespace detail {

template <class T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <class T>
bool needs_record(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* x : inputs) {
    if (x->requires_grad()) return true;
  }
  return false;
}

template <class T, class Backward>
BasicTensor<T> record(BasicTensor<T> out, std::initializer_list<const BasicTensor<T>*> inputs, const char* name,
                      Backward&& backward) {
  if (!needs_record<T>(inputs)) return out;
  out.set_requires_grad(true);
  typename Tape<T>::Record rec;
  for (const auto* x : inputs) rec.inputs.push_back(x->impl());
  rec.output = out.impl();
  rec.backward = std::forward<Backward>(backward);
  rec.op = name;
  Tape<T>::current().push(std::move(rec));
  return out;
}

template <class T>
BasicTensor<T> record_list(BasicTensor<T> out, const std::vector<BasicTensor<T>>& inputs, const char* name,
                           std::function<void()> backward) {
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& x : inputs) any = any || x.requires_grad();
  if (!any) return out;
  out.set_requires_grad(true);
  typename Tape<T>::Record rec;
  for (const auto& x : inputs) rec.inputs.push_back(x.impl());
  rec.output = out.impl();
  rec.backward = std::move(backward);
  rec.op = name;
  Tape<T>::current().push(std::move(rec));
  return out;
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
void require_rank(const BasicTensor<T>& x, std::size_t rank, const char* op) {
  if (!(x.rank() == rank))
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(x.shape()));
}

#if defined(__AVX512F__)
// acc (8 x 16) = sum over k of ap[k * 8 + r] * panel[k * 16 + j].
inline void micro_8x16(const double* ap, const float* panel, std::size_t l, double (*acc)[16]) {
  __m512d c[8][2];
  for (auto& row : c) row[0] = row[1] = _mm512_setzero_pd();
  for (std::size_t k = 0; k < l; ++k) {
    const __m512d b0 = _mm512_cvtps_pd(_mm256_loadu_ps(panel + k * 16));
    const __m512d b1 = _mm512_cvtps_pd(_mm256_loadu_ps(panel + k * 16 + 8));
    const double* a = ap + k * 8;
    for (int r = 0; r < 8; ++r) {
      const __m512d av = _mm512_set1_pd(a[r]);
      c[r][0] = _mm512_fmadd_pd(av, b0, c[r][0]);
      c[r][1] = _mm512_fmadd_pd(av, b1, c[r][1]);
    }
  }
  for (int r = 0; r < 8; ++r) {
    _mm512_storeu_pd(acc[r], c[r][0]);
    _mm512_storeu_pd(acc[r] + 8, c[r][1]);
  }
}
inline constexpr bool kWideKernel = true;
#else
inline constexpr bool kWideKernel = false;
#endif

// C (M x N) (+)= A (M x L) * B (L x N) with A(m, l) = a[m * a_m + l * a_l] and
// row l of B at b + l * ldb. Double accumulation, fixed summation order over l.
template <class T>
void gemm_strided(const T* a, std::size_t a_m, std::size_t a_l, const T* b, std::size_t ldb, std::size_t m,
                  std::size_t n, std::size_t l, T* c, std::size_t ldc, bool accumulate) {
  constexpr bool wide = kWideKernel && std::is_same_v<T, float>;
  constexpr std::size_t R = wide ? 8 : 4;
  constexpr std::size_t P = 16;
  const std::size_t blocks = (m + R - 1) / R;
  std::vector<double> apack(blocks * l * R, 0.0);
  for (std::size_t ib = 0; ib < blocks; ++ib) {
    for (std::size_t r = 0; r < R && ib * R + r < m; ++r) {
      const T* arow = a + (ib * R + r) * a_m;
      double* dst = apack.data() + ib * l * R + r;
      for (std::size_t k = 0; k < l; ++k) dst[k * R] = arow[k * a_l];
    }
  }
  auto store = [&](std::size_t ib, std::size_t j0, std::size_t jn, const double (*acc)[P]) {
    for (std::size_t r = 0; r < R && ib * R + r < m; ++r) {
      T* crow = c + (ib * R + r) * ldc + j0;
      if (accumulate) {
        for (std::size_t j = 0; j < jn; ++j) crow[j] = static_cast<T>(crow[j] + acc[r][j]);
      } else {
        for (std::size_t j = 0; j < jn; ++j) crow[j] = static_cast<T>(acc[r][j]);
      }
    }
  };
  // B is copied panel by panel (L x P, contiguous) so that the inner loop does
  // not stride across rows of a large matrix.
  std::vector<T> panel(l * P);
  for (std::size_t j0 = 0; j0 < n; j0 += P) {
    const std::size_t jn = std::min(P, n - j0);
    for (std::size_t k = 0; k < l; ++k) std::copy_n(b + k * ldb + j0, jn, panel.data() + k * P);
    for (std::size_t ib = 0; ib < blocks; ++ib) {
      double acc[R][P] = {};
      const double* ap = apack.data() + ib * l * R;
      if constexpr (wide) {
        if (jn == P) {
#if defined(__AVX512F__)
          micro_8x16(ap, panel.data(), l, acc);
#endif
          store(ib, j0, jn, acc);
          continue;
        }
      }
      for (std::size_t k = 0; k < l; ++k) {
        const T* brow = panel.data() + k * P;
        double bv[P];
        for (std::size_t j = 0; j < P; ++j) bv[j] = static_cast<double>(brow[j]);
        for (std::size_t r = 0; r < R; ++r) {
          const double av = ap[k * R + r];
          for (std::size_t j = 0; j < P; ++j) acc[r][j] += av * bv[j];
        }
      }
      store(ib, j0, jn, acc);
    }
  }
}

// C (M x N) (+)= op(A) (M x K) * op(B) (K x N).
template <class T>
void gemm(const T* a, bool ta, const T* b, bool tb, std::size_t m, std::size_t n, std::size_t k, T* c,
          bool accumulate) {
  if (n < 16 && m >= 16) {
    // Narrow result: compute C^T = op(B)^T op(A)^T so the wide dimension is vectorized.
    std::vector<T> ct(n * m);
    gemm(b, !tb, a, !ta, n, m, k, ct.data(), false);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] = accumulate ? c[i * n + j] + ct[j * m + i] : ct[j * m + i];
    }
    return;
  }
  std::vector<T> bt;
  const T* bp = b;
  if (tb) {
    bt.resize(k * n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t s = 0; s < k; ++s) bt[s * n + r] = b[r * k + s];
    }
    bp = bt.data();
  }
  if (ta) {
    gemm_strided(a, std::size_t{1}, m, bp, n, m, n, k, c, n, accumulate);
  } else {
    gemm_strided(a, k, std::size_t{1}, bp, n, m, n, k, c, n, accumulate);
  }
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// col is (K x P): row r = (ci, ky, kx), column = output position.
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((ci * g.kh + ky) * g.kw + kx) * g.p();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * g.p();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

// out (Co x P) = W (Co x K) * col (K x P).
template <class T>
void conv_gemm(const T* w, const T* col, std::size_t co_n, std::size_t kdim, std::size_t pdim, T* out) {
  gemm_strided(w, kdim, std::size_t{1}, col, pdim, co_n, pdim, kdim, out, pdim, false);
}

// dW (Co x K) += dY (Co x P) * col^T, with colT (P x K).
template <class T>
void conv_grad_weight(const T* dy, const T* colt, std::size_t co_n, std::size_t kdim, std::size_t pdim, T* dw) {
  gemm_strided(dy, pdim, std::size_t{1}, colt, kdim, co_n, kdim, pdim, dw, kdim, true);
}

// dcol (K x P) = W^T (K x Co) * dY (Co x P).
template <class T>
void conv_grad_col(const T* w, const T* dy, std::size_t co_n, std::size_t kdim, std::size_t pdim, T* dcol) {
  gemm_strided(w, std::size_t{1}, kdim, dy, pdim, kdim, pdim, co_n, dcol, pdim, false);
}

// Per-axis bilinear taps for half-pixel-centred resampling.
struct Taps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 gets 1 - w1
};

inline Taps bilinear_taps(std::size_t in, std::size_t out) {
  Taps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t.i0[o] = lo;
    t.i1[o] = std::min(lo + 1, in - 1);
    t.w1[o] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution and normalization

/// 2-D cross-correlation without bias. x: [N,Cin,H,W], kernel: [Cout,Cin,kh,kw].
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernel, std::size_t stride = 1,
                      std::size_t padding = 0) {
  detail::require_rank(x, 4, "conv2d input");
  detail::require_rank(kernel, 4, "conv2d kernel");
  if (!(stride >= 1)) throw ShapeError("conv2d: stride must be >= 1");
  if (!(x.dim(1) == kernel.dim(1)))
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels but kernel expects " +
                     std::to_string(kernel.dim(1)) + " (kernel shape " + shape_str(kernel.shape()) + ")");
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2), kernel.dim(3),
                         stride,   padding,  0,        0};
  if (!(g.h + 2 * padding >= g.kh && g.w + 2 * padding >= g.kw))
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  BasicTensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  const std::size_t in_stride = g.cin * g.h * g.w;
  const std::size_t out_stride = g.cout * g.p();
  std::vector<T> col(g.pointwise() ? 0 : g.k() * g.p());
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* xn = x.data().data() + n * in_stride;
    const T* cp = xn;
    if (!g.pointwise()) {
      detail::im2col(xn, g, col.data());
      cp = col.data();
    }
    detail::conv_gemm(kernel.data().data(), cp, g.cout, g.k(), g.p(), out.data().data() + n * out_stride);
  }

  auto* xi = x.impl().get();
  auto* wi = kernel.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x, &kernel}, "conv2d", [xi, wi, oi, g, in_stride, out_stride] {
    const bool need_x = xi->requires_grad;
    const bool need_w = wi->requires_grad;
    std::vector<T> col(g.k() * g.p());
    std::vector<T> colt;
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* dy = oi->grad.data() + n * out_stride;
      const T* xn = xi->data.data() + n * in_stride;
      if (need_w) {
        const T* cp = xn;
        if (!g.pointwise()) {
          detail::im2col(xn, g, col.data());
          cp = col.data();
        }
        colt.resize(g.k() * g.p());
        for (std::size_t k = 0; k < g.k(); ++k) {
          for (std::size_t p = 0; p < g.p(); ++p) colt[p * g.k() + k] = cp[k * g.p() + p];
        }
        detail::conv_grad_weight(dy, colt.data(), g.cout, g.k(), g.p(), wi->ensure_grad());
      }
      if (need_x) {
        detail::conv_grad_col(wi->data.data(), dy, g.cout, g.k(), g.p(), col.data());
        T* dx = xi->ensure_grad() + n * in_stride;
        if (g.pointwise()) {
          for (std::size_t i = 0; i < in_stride; ++i) dx[i] += col[i];
        } else {
          detail::col2im_add(col.data(), g, dx);
        }
      }
    }
  });
}

/// Normalizes over the channel axis at each (n, y, x) location of an [N,C,H,W]
/// map, then applies per-channel scale and shift.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& scale, const BasicTensor<T>& shift,
                          double eps = 1e-5) {
  detail::require_rank(x, 4, "layer_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (!(scale.numel() == c && shift.numel() == c))
    throw ShapeError("layer_norm: scale/shift need " + std::to_string(c) + " elements");
  BasicTensor<T> out(x.shape());
  std::vector<double> mean(n * hw), rstd(n * hw);
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      const T* xp = xd + b * c * hw + p;
      double s = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) s += xp[ch * hw];
      const double mu = s / static_cast<double>(c);
      double v = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = xp[ch * hw] - mu;
        v += d * d;
      }
      v /= static_cast<double>(c);
      const double r = 1.0 / std::sqrt(v + eps);
      mean[b * hw + p] = mu;
      rstd[b * hw + p] = r;
      T* op = od + b * c * hw + p;
      for (std::size_t ch = 0; ch < c; ++ch) {
        op[ch * hw] =
            static_cast<T>((xp[ch * hw] - mu) * r * static_cast<double>(scale[ch]) + static_cast<double>(shift[ch]));
      }
    }
  }
  auto* xi = x.impl().get();
  auto* si = scale.impl().get();
  auto* bi = shift.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x, &scale, &shift}, "layer_norm",
                        [xi, si, bi, oi, n, c, hw, mean = std::move(mean), rstd = std::move(rstd)] {
                          std::vector<double> dscale(c, 0.0), dshift(c, 0.0);
                          std::vector<double> xhat(c), dxhat(c);
                          T* dx = xi->requires_grad ? xi->ensure_grad() : nullptr;
                          for (std::size_t b = 0; b < n; ++b) {
                            for (std::size_t p = 0; p < hw; ++p) {
                              const std::size_t base = b * c * hw + p;
                              const double mu = mean[b * hw + p], r = rstd[b * hw + p];
                              double m1 = 0.0, m2 = 0.0;
                              for (std::size_t ch = 0; ch < c; ++ch) {
                                const double dy = oi->grad[base + ch * hw];
                                xhat[ch] = (xi->data[base + ch * hw] - mu) * r;
                                dxhat[ch] = dy * static_cast<double>(si->data[ch]);
                                dscale[ch] += dy * xhat[ch];
                                dshift[ch] += dy;
                                m1 += dxhat[ch];
                                m2 += dxhat[ch] * xhat[ch];
                              }
                              if (dx) {
                                m1 /= static_cast<double>(c);
                                m2 /= static_cast<double>(c);
                                for (std::size_t ch = 0; ch < c; ++ch) {
                                  dx[base + ch * hw] += static_cast<T>(r * (dxhat[ch] - m1 - xhat[ch] * m2));
                                }
                              }
                            }
                          }
                          if (si->requires_grad) {
                            T* g = si->ensure_grad();
                            for (std::size_t ch = 0; ch < c; ++ch) g[ch] += static_cast<T>(dscale[ch]);
                          }
                          if (bi->requires_grad) {
                            T* g = bi->ensure_grad();
                            for (std::size_t ch = 0; ch < c; ++ch) g[ch] += static_cast<T>(dshift[ch]);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Softmax, matmul, activations

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  if (!(axis < x.rank()))
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for shape " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  BasicTensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, static_cast<double>(xd[base + i * inner]));
      double s = 0.0;
      for (std::size_t i = 0; i < len; ++i) s += std::exp(xd[base + i * inner] - mx);
      for (std::size_t i = 0; i < len; ++i) {
        od[base + i * inner] = static_cast<T>(std::exp(xd[base + i * inner] - mx) / s);
      }
    }
  }
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "softmax", [xi, oi, outer, inner, len] {
    T* dx = xi->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          dot += static_cast<double>(oi->grad[base + i * inner]) * oi->data[base + i * inner];
        }
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t j = base + i * inner;
          dx[j] += static_cast<T>(oi->data[j] * (oi->grad[j] - dot));
        }
      }
    }
  });
}

/// Rank-2 product op(a) * op(b), where op transposes when the flag is set.
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, bool transpose_a = false,
                      bool transpose_b = false) {
  detail::require_rank(a, 2, "matmul lhs");
  detail::require_rank(b, 2, "matmul rhs");
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t k = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (!(k == kb))
    throw ShapeError("matmul: inner extents differ (" + shape_str(a.shape()) + " x " + shape_str(b.shape()) + ")");
  BasicTensor<T> out(Shape{m, n});
  detail::gemm(a.data().data(), transpose_a, b.data().data(), transpose_b, m, n, k, out.data().data(), false);
  auto* ai = a.impl().get();
  auto* bi = b.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&a, &b}, "matmul", [ai, bi, oi, transpose_a, transpose_b, m, n, k] {
    const T* dc = oi->grad.data();
    if (ai->requires_grad) {
      if (!transpose_a) {
        detail::gemm(dc, false, bi->data.data(), !transpose_b, m, k, n, ai->ensure_grad(), true);
      } else {
        detail::gemm(bi->data.data(), transpose_b, dc, true, k, m, n, ai->ensure_grad(), true);
      }
    }
    if (bi->requires_grad) {
      if (!transpose_b) {
        detail::gemm(ai->data.data(), !transpose_a, dc, false, k, n, m, bi->ensure_grad(), true);
      } else {
        detail::gemm(dc, true, ai->data.data(), transpose_a, n, k, m, bi->ensure_grad(), true);
      }
    }
  });
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

/// GELU, tanh approximation.
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(detail::kGeluC * (v + detail::kGeluA * v * v * v))));
  }
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "gelu", [xi, oi] {
    T* dx = xi->ensure_grad();
    for (std::size_t i = 0; i < xi->data.size(); ++i) {
      const double v = xi->data[i];
      const double t = std::tanh(detail::kGeluC * (v + detail::kGeluA * v * v * v));
      const double d =
          0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
      dx[i] += static_cast<T>(oi->grad[i] * d);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  auto* ai = a.impl().get();
  auto* bi = b.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&a, &b}, "add", [ai, bi, oi] {
    for (auto* t : {ai, bi}) {
      if (!t->requires_grad) continue;
      T* d = t->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += oi->grad[i];
    }
  });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  auto* ai = a.impl().get();
  auto* bi = b.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&a, &b}, "sub", [ai, bi, oi] {
    if (ai->requires_grad) {
      T* d = ai->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += oi->grad[i];
    }
    if (bi->requires_grad) {
      T* d = bi->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] -= oi->grad[i];
    }
  });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  auto* ai = a.impl().get();
  auto* bi = b.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&a, &b}, "mul", [ai, bi, oi] {
    if (ai->requires_grad) {
      T* d = ai->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += oi->grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      T* d = bi->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += oi->grad[i] * ai->data[i];
    }
  });
}

template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "div");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] / b[i];
  auto* ai = a.impl().get();
  auto* bi = b.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&a, &b}, "div", [ai, bi, oi] {
    if (ai->requires_grad) {
      T* d = ai->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += oi->grad[i] / bi->data[i];
    }
    if (bi->requires_grad) {
      T* d = bi->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] -= oi->grad[i] * oi->data[i] / bi->data[i];
    }
  });
}

/// x * c for a constant c.
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, double c) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(x[i] * c);
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "scale", [xi, oi, c] {
    T* d = xi->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += static_cast<T>(oi->grad[i] * c);
  });
}

/// x + c for a constant c.
template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, double c) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(x[i] + c);
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "add_scalar", [xi, oi] {
    T* d = xi->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += oi->grad[i];
  });
}

/// x * s, where s is a single-element tensor (learnable scalars, gate scores).
template <class T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, const BasicTensor<T>& s) {
  if (!(s.numel() == 1)) throw ShapeError("mul_scalar: factor must have one element, got " + shape_str(s.shape()));
  BasicTensor<T> out(x.shape());
  const T sv = s[0];
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * sv;
  auto* xi = x.impl().get();
  auto* si = s.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x, &s}, "mul_scalar", [xi, si, oi] {
    if (xi->requires_grad) {
      T* d = xi->ensure_grad();
      const T sv = si->data[0];
      for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += oi->grad[i] * sv;
    }
    if (si->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < oi->grad.size(); ++i) acc += static_cast<double>(oi->grad[i]) * xi->data[i];
      si->ensure_grad()[0] += static_cast<T>(acc);
    }
  });
}

/// x / t for a single-element tensor t, with |t| clamped to at least min_abs.
/// The clamp passes no gradient to t.
template <class T>
BasicTensor<T> div_scalar_clamped(const BasicTensor<T>& x, const BasicTensor<T>& t, double min_abs) {
  if (!(t.numel() == 1)) throw ShapeError("div_scalar_clamped: divisor must have one element");
  const double tv = t[0];
  const bool clamped = std::abs(tv) < min_abs;
  const double te = clamped ? (tv < 0 ? -min_abs : min_abs) : tv;
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(x[i] / te);
  auto* xi = x.impl().get();
  auto* ti = t.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x, &t}, "div_scalar_clamped", [xi, ti, oi, te, clamped] {
    if (xi->requires_grad) {
      T* d = xi->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += static_cast<T>(oi->grad[i] / te);
    }
    if (ti->requires_grad && !clamped) {
      double acc = 0.0;
      for (std::size_t i = 0; i < oi->grad.size(); ++i) acc += static_cast<double>(oi->grad[i]) * xi->data[i];
      ti->ensure_grad()[0] += static_cast<T>(-acc / (te * te));
    }
  });
}

template <class T>
BasicTensor<T> square(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * x[i];
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "square", [xi, oi] {
    T* d = xi->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += 2 * xi->data[i] * oi->grad[i];
  });
}

/// |x|; the subgradient at 0 is 0.
template <class T>
BasicTensor<T> abs(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::abs(x[i]);
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "abs", [xi, oi] {
    T* d = xi->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      const T v = xi->data[i];
      d[i] += v > 0 ? oi->grad[i] : (v < 0 ? -oi->grad[i] : T(0));
    }
  });
}

/// max(x, lo); no gradient where the clamp is active.
template <class T>
BasicTensor<T> clamp_min(const BasicTensor<T>& x, double lo) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::max(x[i], static_cast<T>(lo));
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "clamp_min", [xi, oi, lo] {
    T* d = xi->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      if (xi->data[i] > static_cast<T>(lo)) d[i] += oi->grad[i];
    }
  });
}

/// x^p for x >= 0. The derivative at x == 0 is taken as 0.
template <class T>
BasicTensor<T> pow_scalar(const BasicTensor<T>& x, double p) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(std::pow(static_cast<double>(x[i]), p));
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "pow_scalar", [xi, oi, p] {
    T* d = xi->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      const double v = xi->data[i];
      if (v <= 0.0) continue;
      d[i] += static_cast<T>(oi->grad[i] * p * std::pow(v, p - 1.0));
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  BasicTensor<T> out(Shape{1}, static_cast<T>(acc));
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "sum", [xi, oi] {
    T* d = xi->ensure_grad();
    const T g = oi->grad[0];
    for (std::size_t i = 0; i < xi->data.size(); ++i) d[i] += g;
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (!(x.numel() > 0)) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  const double count = static_cast<double>(x.numel());
  BasicTensor<T> out(Shape{1}, static_cast<T>(acc / count));
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "mean", [xi, oi, count] {
    T* d = xi->ensure_grad();
    const T g = static_cast<T>(oi->grad[0] / count);
    for (std::size_t i = 0; i < xi->data.size(); ++i) d[i] += g;
  });
}

/// [N,C,H,W] -> [N,C], spatial mean.
template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  BasicTensor<T> out(Shape{x.dim(0), x.dim(1)});
  for (std::size_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < hw; ++p) acc += x[i * hw + p];
    out[i] = static_cast<T>(acc / static_cast<double>(hw));
  }
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "global_avg_pool", [xi, oi, nc, hw] {
    T* d = xi->ensure_grad();
    for (std::size_t i = 0; i < nc; ++i) {
      const T g = static_cast<T>(oi->grad[i] / static_cast<double>(hw));
      for (std::size_t p = 0; p < hw; ++p) d[i * hw + p] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resampling of [N,C,H,W] by `factor` (half-pixel centres, edge clamp).
/// H*factor and W*factor must be integers.
template <class T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, double factor) {
  detail::require_rank(x, 4, "resize_bilinear");
  if (!(factor > 0.0)) throw ShapeError("resize_bilinear: factor must be positive");
  const std::size_t h = x.dim(2), w = x.dim(3);
  const double fh = static_cast<double>(h) * factor, fw = static_cast<double>(w) * factor;
  const auto ho = static_cast<std::size_t>(std::llround(fh));
  const auto wo = static_cast<std::size_t>(std::llround(fw));
  if (!(ho >= 1 && wo >= 1 && std::abs(fh - ho) < 1e-9 && std::abs(fw - wo) < 1e-9))
    throw ShapeError("resize_bilinear: extents " + shape_str(x.shape()) + " not divisible by factor " +
                     std::to_string(factor));
  auto ty = std::make_shared<detail::Taps>(detail::bilinear_taps(h, ho));
  auto tx = std::make_shared<detail::Taps>(detail::bilinear_taps(w, wo));
  const std::size_t planes = x.dim(0) * x.dim(1);
  BasicTensor<T> out(Shape{x.dim(0), x.dim(1), ho, wo});
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = x.data().data() + pl * h * w;
    T* dst = out.data().data() + pl * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const double wy1 = ty->w1[oy], wy0 = 1.0 - wy1;
      const T* r0 = src + ty->i0[oy] * w;
      const T* r1 = src + ty->i1[oy] * w;
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const double wx1 = tx->w1[ox], wx0 = 1.0 - wx1;
        const std::size_t a = tx->i0[ox], b = tx->i1[ox];
        dst[oy * wo + ox] = static_cast<T>(wy0 * (wx0 * r0[a] + wx1 * r0[b]) + wy1 * (wx0 * r1[a] + wx1 * r1[b]));
      }
    }
  }
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "resize_bilinear", [xi, oi, ty, tx, planes, h, w, ho, wo] {
    T* dx = xi->ensure_grad();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      T* d = dx + pl * h * w;
      const T* g = oi->grad.data() + pl * ho * wo;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        const double wy1 = ty->w1[oy], wy0 = 1.0 - wy1;
        T* r0 = d + ty->i0[oy] * w;
        T* r1 = d + ty->i1[oy] * w;
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const double gv = g[oy * wo + ox];
          const double wx1 = tx->w1[ox], wx0 = 1.0 - wx1;
          const std::size_t a = tx->i0[ox], b = tx->i1[ox];
          r0[a] += static_cast<T>(gv * wy0 * wx0);
          r0[b] += static_cast<T>(gv * wy0 * wx1);
          r1[a] += static_cast<T>(gv * wy1 * wx0);
          r1[b] += static_cast<T>(gv * wy1 * wx1);
        }
      }
    }
  });
}

/// Nearest-neighbour upsampling of [N,C,H,W] by an integer factor.
template <class T>
BasicTensor<T> nearest_upsample(const BasicTensor<T>& x, std::size_t factor = 2) {
  detail::require_rank(x, 4, "nearest_upsample");
  if (!(factor >= 1)) throw ShapeError("nearest_upsample: factor must be >= 1");
  const std::size_t h = x.dim(2), w = x.dim(3), ho = h * factor, wo = w * factor;
  const std::size_t planes = x.dim(0) * x.dim(1);
  BasicTensor<T> out(Shape{x.dim(0), x.dim(1), ho, wo});
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xx = 0; xx < wo; ++xx) {
        out[(pl * ho + y) * wo + xx] = x[(pl * h + y / factor) * w + xx / factor];
      }
    }
  }
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "nearest_upsample", [xi, oi, planes, h, w, ho, wo, factor] {
    T* d = xi->ensure_grad();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t xx = 0; xx < wo; ++xx) {
          d[(pl * h + y / factor) * w + xx / factor] += oi->grad[(pl * ho + y) * wo + xx];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Layout: concatenation, slicing, reshaping

/// Concatenates [N,Ci,H,W] maps along the channel axis.
template <class T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& xs) {
  if (!(!xs.empty())) throw ShapeError("concat_channels: no inputs");
  for (const auto& x : xs) {
    detail::require_rank(x, 4, "concat_channels");
    if (!(x.dim(0) == xs[0].dim(0) && x.dim(2) == xs[0].dim(2) && x.dim(3) == xs[0].dim(3)))
      throw ShapeError("concat_channels: extents differ (" + shape_str(x.shape()) + " vs " + shape_str(xs[0].shape()) +
                       ")");
  }
  const std::size_t n = xs[0].dim(0), hw = xs[0].dim(2) * xs[0].dim(3);
  std::size_t c_total = 0;
  for (const auto& x : xs) c_total += x.dim(1);
  BasicTensor<T> out(Shape{n, c_total, xs[0].dim(2), xs[0].dim(3)});
  std::vector<TensorImpl<T>*> impls;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t c = x.dim(1);
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(x.data().data() + b * c * hw, c * hw, out.data().data() + (b * c_total + offset) * hw);
    }
    offset += c;
    impls.push_back(x.impl().get());
  }
  auto* oi = out.impl().get();
  return detail::record_list<T>(out, xs, "concat_channels", [impls, oi, n, hw, c_total] {
    std::size_t off = 0;
    for (auto* xi : impls) {
      const std::size_t c = xi->shape[1];
      if (xi->requires_grad) {
        T* d = xi->ensure_grad();
        for (std::size_t b = 0; b < n; ++b) {
          const T* g = oi->grad.data() + (b * c_total + off) * hw;
          for (std::size_t i = 0; i < c * hw; ++i) d[b * c * hw + i] += g[i];
        }
      }
      off += c;
    }
  });
}

template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return concat_channels<T>(std::vector<BasicTensor<T>>{a, b});
}

/// Channels [begin, begin+count) of an [N,C,H,W] map.
template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 4, "slice_channels");
  if (!(begin + count <= x.dim(1) && count > 0))
    throw ShapeError("slice_channels: range out of bounds for " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  BasicTensor<T> out(Shape{n, count, x.dim(2), x.dim(3)});
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(x.data().data() + (b * c + begin) * hw, count * hw, out.data().data() + b * count * hw);
  }
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "slice_channels", [xi, oi, n, c, hw, begin, count] {
    T* d = xi->ensure_grad();
    for (std::size_t b = 0; b < n; ++b) {
      const T* g = oi->grad.data() + b * count * hw;
      T* dst = d + (b * c + begin) * hw;
      for (std::size_t i = 0; i < count * hw; ++i) dst[i] += g[i];
    }
  });
}

/// Sample n of a batch, keeping a leading extent of 1.
template <class T>
BasicTensor<T> slice_batch(const BasicTensor<T>& x, std::size_t n) {
  if (!(x.rank() >= 1 && n < x.dim(0))) throw ShapeError("slice_batch: index out of range for " + shape_str(x.shape()));
  const std::size_t stride = x.numel() / x.dim(0);
  Shape s = x.shape();
  s[0] = 1;
  BasicTensor<T> out(s);
  std::copy_n(x.data().data() + n * stride, stride, out.data().data());
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "slice_batch", [xi, oi, n, stride] {
    T* d = xi->ensure_grad() + n * stride;
    for (std::size_t i = 0; i < stride; ++i) d[i] += oi->grad[i];
  });
}

/// Stacks tensors along the leading axis; all trailing extents must agree.
template <class T>
BasicTensor<T> concat_batch(const std::vector<BasicTensor<T>>& xs) {
  if (!(!xs.empty())) throw ShapeError("concat_batch: no inputs");
  Shape s = xs[0].shape();
  std::size_t total = 0;
  for (const auto& x : xs) {
    if (!(x.rank() == s.size() && std::equal(x.shape().begin() + 1, x.shape().end(), s.begin() + 1)))
      throw ShapeError("concat_batch: trailing extents differ");
    total += x.dim(0);
  }
  if (xs.size() == 1) return xs[0];
  s[0] = total;
  BasicTensor<T> out(s);
  std::vector<TensorImpl<T>*> impls;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    std::copy_n(x.data().data(), x.numel(), out.data().data() + offset);
    offset += x.numel();
    impls.push_back(x.impl().get());
  }
  auto* oi = out.impl().get();
  return detail::record_list<T>(out, xs, "concat_batch", [impls, oi] {
    std::size_t off = 0;
    for (auto* xi : impls) {
      if (xi->requires_grad) {
        T* d = xi->ensure_grad();
        for (std::size_t i = 0; i < xi->data.size(); ++i) d[i] += oi->grad[off + i];
      }
      off += xi->data.size();
    }
  });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (!(numel_of(shape) == x.numel()))
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  BasicTensor<T> out(std::move(shape), x.storage());
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "reshape", [xi, oi] {
    T* d = xi->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) d[i] += oi->grad[i];
  });
}

/// Spatial window [top, top+h) x [left, left+w) of an [N,C,H,W] map.
template <class T>
BasicTensor<T> crop(const BasicTensor<T>& x, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  detail::require_rank(x, 4, "crop");
  if (!(h > 0 && w > 0 && top + h <= x.dim(2) && left + w <= x.dim(3)))
    throw ShapeError("crop: window out of bounds for " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), ih = x.dim(2), iw = x.dim(3);
  BasicTensor<T> out(Shape{x.dim(0), x.dim(1), h, w});
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(x.data().data() + (pl * ih + top + y) * iw + left, w, out.data().data() + (pl * h + y) * w);
    }
  }
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "crop", [xi, oi, planes, ih, iw, top, left, h, w] {
    T* d = xi->ensure_grad();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      for (std::size_t y = 0; y < h; ++y) {
        T* dst = d + (pl * ih + top + y) * iw + left;
        const T* g = oi->grad.data() + (pl * h + y) * w;
        for (std::size_t i = 0; i < w; ++i) dst[i] += g[i];
      }
    }
  });
}

/// Sample n of an [N,C,H,W] map as a token matrix [H*W, C].
template <class T>
BasicTensor<T> to_tokens(const BasicTensor<T>& x, std::size_t n = 0) {
  detail::require_rank(x, 4, "to_tokens");
  if (!(n < x.dim(0))) throw ShapeError("to_tokens: sample index out of range");
  const std::size_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  BasicTensor<T> out(Shape{hw, c});
  const T* src = x.data().data() + n * c * hw;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) out[p * c + ch] = src[ch * hw + p];
  }
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "to_tokens", [xi, oi, n, c, hw] {
    T* d = xi->ensure_grad() + n * c * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) d[ch * hw + p] += oi->grad[p * c + ch];
    }
  });
}

/// Token matrix [H*W, C] back to a [1,C,H,W] map.
template <class T>
BasicTensor<T> from_tokens(const BasicTensor<T>& t, std::size_t h, std::size_t w) {
  detail::require_rank(t, 2, "from_tokens");
  if (!(t.dim(0) == h * w))
    throw ShapeError("from_tokens: " + std::to_string(t.dim(0)) + " tokens cannot form " + std::to_string(h) + "x" +
                     std::to_string(w));
  const std::size_t c = t.dim(1), hw = h * w;
  BasicTensor<T> out(Shape{1, c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] = t[p * c + ch];
  }
  auto* ti = t.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&t}, "from_tokens", [ti, oi, c, hw] {
    T* d = ti->ensure_grad();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) d[p * c + ch] += oi->grad[ch * hw + p];
    }
  });
}

/// Columns [begin, begin+count) of a rank-2 tensor.
template <class T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 2, "slice_cols");
  if (!(count > 0 && begin + count <= x.dim(1)))
    throw ShapeError("slice_cols: range out of bounds for " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  BasicTensor<T> out(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data().data() + r * cols + begin, count, out.data().data() + r * count);
  }
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "slice_cols", [xi, oi, rows, cols, begin, count] {
    T* d = xi->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < count; ++j) d[r * cols + begin + j] += oi->grad[r * count + j];
    }
  });
}

/// Concatenates rank-2 tensors with equal row counts along columns.
template <class T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& xs) {
  if (!(!xs.empty())) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = xs[0].dim(0);
  std::size_t cols = 0;
  for (const auto& x : xs) {
    detail::require_rank(x, 2, "concat_cols");
    if (!(x.dim(0) == rows)) throw ShapeError("concat_cols: row counts differ");
    cols += x.dim(1);
  }
  if (xs.size() == 1) return xs[0];
  BasicTensor<T> out(Shape{rows, cols});
  std::vector<TensorImpl<T>*> impls;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t c = x.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(x.data().data() + r * c, c, out.data().data() + r * cols + off);
    }
    off += c;
    impls.push_back(x.impl().get());
  }
  auto* oi = out.impl().get();
  return detail::record_list<T>(out, xs, "concat_cols", [impls, oi, rows, cols] {
    std::size_t o = 0;
    for (auto* xi : impls) {
      const std::size_t c = xi->shape[1];
      if (xi->requires_grad) {
        T* d = xi->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < c; ++j) d[r * c + j] += oi->grad[r * cols + o + j];
        }
      }
      o += c;
    }
  });
}

/// Element i of x (flat index) as a single-element tensor.
template <class T>
BasicTensor<T> element(const BasicTensor<T>& x, std::size_t i) {
  if (!(i < x.numel())) throw ShapeError("element: index out of range");
  BasicTensor<T> out(Shape{1}, x[i]);
  auto* xi = x.impl().get();
  auto* oi = out.impl().get();
  return detail::record(out, {&x}, "element", [xi, oi, i] { xi->ensure_grad()[i] += oi->grad[0]; });
}

}  // namespace isalux::ops
