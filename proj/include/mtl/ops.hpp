#pragma once

// Differentiable layer ops. Forward computes into a fresh buffer and emits
// a tape node whose closure accumulates gradients into the parents.
//
// Determinism contract: every output element's floating-point accumulation
// order is fixed by the loop structure below and does not depend on the
// thread count. parallel_for splits only across disjoint output slices.

#include <algorithm>

#include "mtl/tensor.hpp"

namespace mtl {

// Fixed-order lane reduction: 8 partial sums combined left to right.
// Chosen (rather than a plain sequential sum) so the compiler can keep the
// lanes in vector registers; the order is still pinned by this code.
template <class T>
inline T dot_lanes(const T* a, const T* b, int n) {
  constexpr int L = 8;
  T acc[L] = {};
  int i = 0;
  for (; i + L <= n; i += L)
    for (int l = 0; l < L; ++l) acc[l] += a[i + l] * b[i + l];
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  T s = T(0);
  for (int l = 0; l < L; ++l) s += acc[l];
  return s + tail;
}

template <class T>
inline void axpy(T* __restrict y, T a, const T* __restrict x, int n) {
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
inline void axpy2(T* __restrict y, T a0, const T* __restrict x0, T a1, const T* __restrict x1,
                  int n) {
  for (int i = 0; i < n; ++i) y[i] += a0 * x0[i] + a1 * x1[i];
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation (no kernel flip), zero padding.
// x [N,C,H,W] * w [F,C,KH,KW] + b [F] -> [N,F,OH,OW]
//
// The kernels stage through channels-last buffers (padded input, transposed
// weights) so the innermost loops run over a contiguous channel axis with
// register-blocked accumulators. The accumulation order per output element
// is (kh, kw, c) resp. (kh, kw, f), fixed regardless of thread count.

namespace detail {

constexpr int kBlock = 16;  // accumulator block along the vectorized axis

// NCHW -> zero-padded channels-last [N, H+2p, W+2p, C]
template <class T>
std::vector<T> pack_nhwc_padded(const T* x, int N, int C, int H, int W, int p) {
  const int Hp = H + 2 * p, Wp = W + 2 * p;
  std::vector<T> out((size_t)N * Hp * Wp * C, T(0));
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = x + ((int64_t)n * C + c) * H * W;
      for (int h = 0; h < H; ++h) {
        T* dst = out.data() + (((int64_t)n * Hp + h + p) * Wp + p) * C + c;
        for (int w = 0; w < W; ++w) dst[(int64_t)w * C] = src[(int64_t)h * W + w];
      }
    }
  return out;
}

// [F,C,KH,KW] -> [KH,KW,C,F] (f contiguous) or [KH,KW,F,C] (c contiguous)
template <class T>
std::vector<T> repack_weight(const T* w, int F, int C, int KH, int KW, bool c_inner) {
  std::vector<T> out((size_t)F * C * KH * KW);
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c)
      for (int kh = 0; kh < KH; ++kh)
        for (int kw = 0; kw < KW; ++kw) {
          int64_t tap = (int64_t)kh * KW + kw;
          int64_t dst = c_inner ? (tap * F + f) * C + c : (tap * C + c) * F + f;
          out[dst] = w[(((int64_t)f * C + c) * KH + kh) * KW + kw];
        }
  return out;
}

// NCHW -> channels-last [N,OH,OW,F]
template <class T>
std::vector<T> pack_nhwc(const T* y, int N, int F, int OH, int OW) {
  std::vector<T> out((size_t)N * OH * OW * F);
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f) {
      const T* src = y + ((int64_t)n * F + f) * OH * OW;
      T* dst = out.data() + (int64_t)n * OH * OW * F + f;
      for (int64_t i = 0; i < (int64_t)OH * OW; ++i) dst[i * F] = src[i];
    }
  return out;
}

// Register-blocked broadcast-FMA over one kernel tap: for BLK contiguous
// lanes, io[l] += sum_c bcast[c] * rows[c*stride + l]. The local
// accumulator starts at zero and is folded into io once at the end; GCC
// keeps it in vector registers, and noinline stops the surrounding loops
// from defeating that.
template <class T, int BLK>
#if defined(__GNUC__)
__attribute__((noinline, no_stack_protector))
#endif
void lane_fma(T* __restrict io, const T* __restrict bcast, const T* __restrict rows, int count,
              int64_t stride) {
  T acc[BLK] = {};
  for (int c = 0; c < count; ++c) {
    T xv = bcast[c];
    const T* __restrict row = rows + (int64_t)c * stride;
    for (int l = 0; l < BLK; ++l) acc[l] += xv * row[l];
  }
  for (int l = 0; l < BLK; ++l) io[l] += acc[l];
}

template <class T, int BLK>
#if defined(__GNUC__)
__attribute__((noinline, no_stack_protector))
#endif
void lane_fma2(T* __restrict io0, T* __restrict io1, const T* __restrict bcast0,
               const T* __restrict bcast1, const T* __restrict rows, int count, int64_t stride) {
  T acc0[BLK] = {};
  T acc1[BLK] = {};
  for (int c = 0; c < count; ++c) {
    T x0 = bcast0[c];
    T x1 = bcast1[c];
    const T* __restrict row = rows + (int64_t)c * stride;
    for (int l = 0; l < BLK; ++l) acc0[l] += x0 * row[l];
    for (int l = 0; l < BLK; ++l) acc1[l] += x1 * row[l];
  }
  for (int l = 0; l < BLK; ++l) io0[l] += acc0[l];
  for (int l = 0; l < BLK; ++l) io1[l] += acc1[l];
}

template <class T>
void lane_fma2_any(T* __restrict io0, T* __restrict io1, int blk, const T* __restrict bcast0,
                   const T* __restrict bcast1, const T* __restrict rows, int count,
                   int64_t stride) {
  switch (blk) {
    case 16: lane_fma2<T, 16>(io0, io1, bcast0, bcast1, rows, count, stride); return;
    case 8: lane_fma2<T, 8>(io0, io1, bcast0, bcast1, rows, count, stride); return;
    case 4: lane_fma2<T, 4>(io0, io1, bcast0, bcast1, rows, count, stride); return;
    default:
      for (int c = 0; c < count; ++c) {
        const T* row = rows + (int64_t)c * stride;
        for (int l = 0; l < blk; ++l) io0[l] += bcast0[c] * row[l];
        for (int l = 0; l < blk; ++l) io1[l] += bcast1[c] * row[l];
      }
  }
}

template <class T>
void lane_fma_any(T* __restrict io, int blk, const T* __restrict bcast, const T* __restrict rows,
                  int count, int64_t stride) {
  switch (blk) {
    case 16: lane_fma<T, 16>(io, bcast, rows, count, stride); return;
    case 8: lane_fma<T, 8>(io, bcast, rows, count, stride); return;
    case 4: lane_fma<T, 4>(io, bcast, rows, count, stride); return;
    default:
      for (int c = 0; c < count; ++c) {
        T xv = bcast[c];
        const T* row = rows + (int64_t)c * stride;
        for (int l = 0; l < blk; ++l) io[l] += xv * row[l];
      }
  }
}

template <class T>
void conv2d_forward(const std::vector<T>& xp, const T* w, const T* b, T* y, int N, int C, int H,
                    int W, int F, int KH, int KW, int OH, int OW, int s, int p) {
  const int Hp = H + 2 * p, Wp = W + 2 * p;
  const std::vector<T> wt = repack_weight(w, F, C, KH, KW, /*c_inner=*/false);

  parallel_for(N, [&](int64_t n) {
    std::vector<T> fbuf((size_t)2 * F);
    for (int oh = 0; oh < OH; ++oh) {
      int ow = 0;
      // pairs of output columns share each weight-row load; the (kw, c)
      // axes are contiguous in both the padded input and the repacked
      // weights, so each kernel row is one fused run
      for (; ow + 2 <= OW; ow += 2) {
        const T* xbase = xp.data() + (((int64_t)n * Hp + oh * s) * Wp + ow * s) * C;
        for (int f0 = 0; f0 < F; f0 += kBlock) {
          const int blk = std::min(kBlock, F - f0);
          T acc0[kBlock], acc1[kBlock];
          for (int l = 0; l < blk; ++l) acc0[l] = acc1[l] = b[f0 + l];
          for (int kh = 0; kh < KH; ++kh)
            lane_fma2_any(acc0, acc1, blk, xbase + (int64_t)kh * Wp * C,
                          xbase + (int64_t)kh * Wp * C + (int64_t)s * C,
                          wt.data() + ((int64_t)kh * KW * C) * F + f0, KW * C, (int64_t)F);
          for (int l = 0; l < blk; ++l) fbuf[f0 + l] = acc0[l];
          for (int l = 0; l < blk; ++l) fbuf[F + f0 + l] = acc1[l];
        }
        T* yp = y + ((int64_t)n * F * OH + oh) * OW + ow;
        for (int f = 0; f < F; ++f) {
          yp[(int64_t)f * OH * OW] = fbuf[f];
          yp[(int64_t)f * OH * OW + 1] = fbuf[F + f];
        }
      }
      for (; ow < OW; ++ow) {
        const T* xbase = xp.data() + (((int64_t)n * Hp + oh * s) * Wp + ow * s) * C;
        for (int f0 = 0; f0 < F; f0 += kBlock) {
          const int blk = std::min(kBlock, F - f0);
          T acc[kBlock];
          for (int l = 0; l < blk; ++l) acc[l] = b[f0 + l];
          for (int kh = 0; kh < KH; ++kh)
            lane_fma_any(acc, blk, xbase + (int64_t)kh * Wp * C,
                         wt.data() + ((int64_t)kh * KW * C) * F + f0, KW * C, (int64_t)F);
          for (int l = 0; l < blk; ++l) fbuf[f0 + l] = acc[l];
        }
        T* yp = y + ((int64_t)n * F * OH + oh) * OW + ow;
        for (int f = 0; f < F; ++f) yp[(int64_t)f * OH * OW] = fbuf[f];
      }
    }
  });
}

// One valid tap for one register block: blk lanes over the contiguous axis
// of wr, broadcasting each gy value.
template <class T, int BLK>
void tap_fma(T* __restrict io, const T* __restrict gyr, const T* __restrict wr, int F,
             int64_t lane_stride) {
  T acc[BLK];
  for (int l = 0; l < BLK; ++l) acc[l] = io[l];
  for (int f = 0; f < F; ++f) {
    T gv = gyr[f];
    const T* __restrict wrow = wr + (int64_t)f * lane_stride;
    for (int l = 0; l < BLK; ++l) acc[l] += gv * wrow[l];
  }
  for (int l = 0; l < BLK; ++l) io[l] = acc[l];
}

template <class T>
void tap_fma_any(T* __restrict acc, int blk, const T* __restrict gyr, const T* __restrict wr,
                 int F, int64_t lane_stride) {
  switch (blk) {
    case kBlock: tap_fma<T, kBlock>(acc, gyr, wr, F, lane_stride); return;
    case 8: tap_fma<T, 8>(acc, gyr, wr, F, lane_stride); return;
    case 4: tap_fma<T, 4>(acc, gyr, wr, F, lane_stride); return;
    default:
      for (int f = 0; f < F; ++f) {
        T gv = gyr[f];
        const T* wrow = wr + (int64_t)f * lane_stride;
        for (int l = 0; l < blk; ++l) acc[l] += gv * wrow[l];
      }
  }
}

// dx[n,c,ih,iw] += sum over valid taps of gy[n,f,oh,ow] * w[f,c,kh,kw]
template <class T>
void conv2d_backward_input(T* dx, const T* w, const std::vector<T>& gyt, int N, int C, int H,
                           int W, int F, int KH, int KW, int OH, int OW, int s, int p) {
  // [KH, KW reversed, F, C]: walking gy columns forward then matches
  // ascending kw-reversed weight rows, so interior stride-1 positions fuse
  // the (kw, f) axes into one contiguous run
  std::vector<T> wt((size_t)F * C * KH * KW);
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c)
      for (int kh = 0; kh < KH; ++kh)
        for (int kw = 0; kw < KW; ++kw)
          wt[((((int64_t)kh * KW + (KW - 1 - kw)) * F + f)) * C + c] =
              w[(((int64_t)f * C + c) * KH + kh) * KW + kw];

  parallel_for(N, [&](int64_t n) {
    std::vector<T> cbuf((size_t)2 * C);
    auto slow_taps = [&](T* acc, int blk, int ih, int iw, int c0) {
      for (int kh = 0; kh < KH; ++kh) {
        const int th = ih + p - kh;
        if (th < 0 || th % s || th / s >= OH) continue;
        for (int kw = 0; kw < KW; ++kw) {
          const int tw = iw + p - kw;
          if (tw < 0 || tw % s || tw / s >= OW) continue;
          const T* gyr = gyt.data() + (((int64_t)n * OH + th / s) * OW + tw / s) * F;
          const T* wr = wt.data() + (((int64_t)kh * KW + (KW - 1 - kw)) * F) * C + c0;
          lane_fma_any(acc, blk, gyr, wr, F, (int64_t)C);
        }
      }
    };
    for (int ih = 0; ih < H; ++ih) {
      int iw = 0;
      auto fused_ok = [&](int col) { return s == 1 && col + p - (KW - 1) >= 0 && col + p < OW; };
      for (; iw < W; ++iw) {
        if (iw + 1 < W && fused_ok(iw) && fused_ok(iw + 1)) break;
        for (int c0 = 0; c0 < C; c0 += kBlock) {
          const int blk = std::min(kBlock, C - c0);
          T acc[kBlock] = {};
          slow_taps(acc, blk, ih, iw, c0);
          for (int l = 0; l < blk; ++l) cbuf[c0 + l] = acc[l];
        }
        T* dxp = dx + ((int64_t)n * C * H + ih) * W + iw;
        for (int c = 0; c < C; ++c) dxp[(int64_t)c * H * W] += cbuf[c];
      }
      for (; iw + 2 <= W && fused_ok(iw) && fused_ok(iw + 1); iw += 2) {
        for (int c0 = 0; c0 < C; c0 += kBlock) {
          const int blk = std::min(kBlock, C - c0);
          T acc0[kBlock] = {};
          T acc1[kBlock] = {};
          for (int kh = 0; kh < KH; ++kh) {
            const int th = ih + p - kh;
            if (th < 0 || th >= OH) continue;
            const T* gyr = gyt.data() + (((int64_t)n * OH + th) * OW + iw + p - (KW - 1)) * F;
            const T* wr = wt.data() + ((int64_t)kh * KW * F) * C + c0;
            lane_fma2_any(acc0, acc1, blk, gyr, gyr + F, wr, KW * F, (int64_t)C);
          }
          for (int l = 0; l < blk; ++l) cbuf[c0 + l] = acc0[l];
          for (int l = 0; l < blk; ++l) cbuf[C + c0 + l] = acc1[l];
        }
        T* dxp = dx + ((int64_t)n * C * H + ih) * W + iw;
        for (int c = 0; c < C; ++c) {
          dxp[(int64_t)c * H * W] += cbuf[c];
          dxp[(int64_t)c * H * W + 1] += cbuf[C + c];
        }
      }
      for (; iw < W; ++iw) {
        const bool fused = fused_ok(iw);
        for (int c0 = 0; c0 < C; c0 += kBlock) {
          const int blk = std::min(kBlock, C - c0);
          T acc[kBlock] = {};
          if (fused) {
            for (int kh = 0; kh < KH; ++kh) {
              const int th = ih + p - kh;
              if (th < 0 || th >= OH) continue;
              const T* gyr =
                  gyt.data() + (((int64_t)n * OH + th) * OW + iw + p - (KW - 1)) * F;
              const T* wr = wt.data() + ((int64_t)kh * KW * F) * C + c0;
              lane_fma_any(acc, blk, gyr, wr, KW * F, (int64_t)C);
            }
          } else {
            slow_taps(acc, blk, ih, iw, c0);
          }
          for (int l = 0; l < blk; ++l) cbuf[c0 + l] = acc[l];
        }
        T* dxp = dx + ((int64_t)n * C * H + ih) * W + iw;
        for (int c = 0; c < C; ++c) dxp[(int64_t)c * H * W] += cbuf[c];
      }
    }
  });
}

// dw[f,c,kh,kw] += sum_{n,oh,ow} gy[n,f,oh,ow] * x[n,c,ih,iw]
template <class T>
void conv2d_backward_weight(T* dw, const std::vector<T>& xp, const std::vector<T>& gyt, int N,
                            int C, int H, int W, int F, int KH, int KW, int OH, int OW, int s,
                            int p) {
  const int Hp = H + 2 * p, Wp = W + 2 * p;

  // accumulate into [KH,KW,C,F]; tap x channel-block tasks own disjoint slices
  std::vector<T> dwt((size_t)KH * KW * C * F, T(0));
  const int cblocks = (C + kBlock - 1) / kBlock;
  parallel_for((int64_t)KH * KW * cblocks, [&](int64_t task) {
    const int tap = (int)(task / cblocks);
    const int kh = tap / KW, kw = tap % KW;
    const int c0 = (int)(task % cblocks) * kBlock;
    const int c1 = std::min(C, c0 + kBlock);
    T* slice = dwt.data() + ((int64_t)tap * C) * F;
    for (int n = 0; n < N; ++n)
      for (int oh = 0; oh < OH; ++oh) {
        const int ihp = oh * s + kh;
        if (ihp >= Hp) continue;
        int ow = 0;
        for (; ow + 2 <= OW; ow += 2) {
          const T* xr = xp.data() + (((int64_t)n * Hp + ihp) * Wp + ow * s + kw) * C;
          const T* gyr = gyt.data() + (((int64_t)n * OH + oh) * OW + ow) * F;
          for (int c = c0; c < c1; ++c)
            axpy2(slice + (int64_t)c * F, xr[c], gyr, xr[(int64_t)s * C + c], gyr + F, F);
        }
        for (; ow < OW; ++ow) {
          const T* xr = xp.data() + (((int64_t)n * Hp + ihp) * Wp + ow * s + kw) * C;
          const T* gyr = gyt.data() + (((int64_t)n * OH + oh) * OW + ow) * F;
          for (int c = c0; c < c1; ++c) axpy(slice + (int64_t)c * F, xr[c], gyr, F);
        }
      }
  });
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c)
      for (int kh = 0; kh < KH; ++kh)
        for (int kw = 0; kw < KW; ++kw)
          dw[(((int64_t)f * C + c) * KH + kh) * KW + kw] +=
              dwt[(((int64_t)kh * KW + kw) * C + c) * F + f];
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int padding) {
  check(x.shape.size() == 4, "conv2d input must be [N,C,H,W], got " + shape_str(x.shape));
  check(w.shape.size() == 4, "conv2d weight must be [F,C,kh,kw], got " + shape_str(w.shape));
  check(x.shape[1] == w.shape[1], "conv2d channel mismatch: input " + shape_str(x.shape) +
                                      " vs weight " + shape_str(w.shape));
  check(b.shape.size() == 1 && b.shape[0] == w.shape[0],
        "conv2d bias must be [F]=" + std::to_string(w.shape[0]) + ", got " + shape_str(b.shape));
  check(stride >= 1, "conv2d stride must be positive");
  check(padding >= 0, "conv2d padding must be non-negative");
  const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int F = w.shape[0], KH = w.shape[2], KW = w.shape[3];
  check(H + 2 * padding >= KH && W + 2 * padding >= KW,
        "conv2d kernel " + shape_str(w.shape) + " larger than padded input " + shape_str(x.shape));
  const int OH = (H + 2 * padding - KH) / stride + 1;
  const int OW = (W + 2 * padding - KW) / stride + 1;
  check(OH >= 1 && OW >= 1, "conv2d output has zero spatial size");

  Tensor<T> y(Shape{N, F, OH, OW});
  auto xpad = std::make_shared<std::vector<T>>(
      detail::pack_nhwc_padded(x.ptr(), N, C, H, W, padding));
  detail::conv2d_forward(*xpad, w.ptr(), b.ptr(), y.ptr(), N, C, H, W, F, KH, KW, OH, OW,
                         stride, padding);
  debug_check_finite(y, "conv2d");

  int xn = x.node, wn = w.node, bn = b.node;
  auto wv = w;  // shallow copy keeps the weight buffer alive
  int s = stride, p = padding;
  y.node = g.emit(Op::conv2d, {xn, wn, bn}, y,
                  [=](Graph<T>& gg, int self) {
                    const T* gy = gg.grad(self).data();
                    const std::vector<T> gyt = detail::pack_nhwc(gy, N, F, OH, OW);
                    if (xn >= 0)
                      detail::conv2d_backward_input(gg.grad(xn).data(), wv.ptr(), gyt, N, C, H, W,
                                                    F, KH, KW, OH, OW, s, p);
                    if (wn >= 0)
                      detail::conv2d_backward_weight(gg.grad(wn).data(), *xpad, gyt, N, C, H, W,
                                                     F, KH, KW, OH, OW, s, p);
                    if (bn >= 0) {
                      T* db = gg.grad(bn).data();
                      for (int n = 0; n < N; ++n)
                        for (int f = 0; f < F; ++f) {
                          const T* gyp = gy + ((int64_t)n * F + f) * OH * OW;
                          T acc = T(0);
                          for (int i = 0; i < OH * OW; ++i) acc += gyp[i];
                          db[f] += acc;
                        }
                    }
                  });
  return y;
}

// ---------------------------------------------------------------------------
// relu: subgradient at 0 is 0.

template <class T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> y(x.shape);
  const T* xp = x.ptr();
  T* yp = y.ptr();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = xp[i] > T(0) ? xp[i] : T(0);
  int xn = x.node;
  auto xv = x;
  y.node = g.emit(Op::relu, {xn}, y, [=](Graph<T>& gg, int self) {
    if (xn < 0) return;
    const T* gy = gg.grad(self).data();
    T* dx = gg.grad(xn).data();
    const T* xq = xv.ptr();
    for (int64_t i = 0; i < n; ++i)
      if (xq[i] > T(0)) dx[i] += gy[i];
  });
  return y;
}

// ---------------------------------------------------------------------------
// batch_norm over [N,C,H,W], per-channel statistics.
// Train mode normalizes by batch moments (biased variance) and updates the
// running buffers in place; gradients flow through the batch statistics.
// Eval mode uses the running buffers as constants.

template <class T>
Tensor<T> batch_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& run_mean, Tensor<T>& run_var, bool train,
                     T momentum = T(0.9), T eps = T(1e-5)) {
  check(x.shape.size() == 4, "batch_norm input must be [N,C,H,W], got " + shape_str(x.shape));
  const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  check(gamma.shape == Shape{C} && beta.shape == Shape{C},
        "batch_norm gamma/beta must be [C]=" + std::to_string(C));
  check(run_mean.shape == Shape{C} && run_var.shape == Shape{C},
        "batch_norm running stats must be [C]=" + std::to_string(C));
  const int64_t m = (int64_t)N * H * W;
  if (train) check(m >= 2, "batch_norm train mode needs N*H*W >= 2, got " + std::to_string(m));

  const int64_t hw = (int64_t)H * W;
  Tensor<T> y(x.shape);
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(C);
  const T* xp = x.ptr();
  T* yp = y.ptr();

  for (int c = 0; c < C; ++c) {
    T mean, var;
    if (train) {
      T sum = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = xp + ((int64_t)n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) sum += p[i];
      }
      mean = sum / (T)m;
      T sq = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = xp + ((int64_t)n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          T d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / (T)m;
      (*run_mean.data)[c] = momentum * (*run_mean.data)[c] + (T(1) - momentum) * mean;
      (*run_var.data)[c] = momentum * (*run_var.data)[c] + (T(1) - momentum) * var;
    } else {
      mean = (*run_mean.data)[c];
      var = (*run_var.data)[c];
    }
    T inv = T(1) / std::sqrt(var + eps);
    (*inv_std)[c] = inv;
    T gc = gamma[c], bc = beta[c];
    for (int n = 0; n < N; ++n) {
      const T* p = xp + ((int64_t)n * C + c) * hw;
      T* xh = xhat->data() + ((int64_t)n * C + c) * hw;
      T* yq = yp + ((int64_t)n * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        xh[i] = (p[i] - mean) * inv;
        yq[i] = gc * xh[i] + bc;
      }
    }
  }
  debug_check_finite(y, "batch_norm");

  int xn = x.node, gn = gamma.node, bn = beta.node;
  auto gv = gamma;
  y.node = g.emit(Op::batch_norm, {xn, gn, bn}, y, [=](Graph<T>& gg, int self) {
    const T* gy = gg.grad(self).data();
    for (int c = 0; c < C; ++c) {
      T s1 = T(0), s2 = T(0);
      for (int n = 0; n < N; ++n) {
        const T* gyp = gy + ((int64_t)n * C + c) * hw;
        const T* xh = xhat->data() + ((int64_t)n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          s1 += gyp[i];
          s2 += gyp[i] * xh[i];
        }
      }
      if (gn >= 0) gg.grad(gn)[c] += s2;
      if (bn >= 0) gg.grad(bn)[c] += s1;
      if (xn >= 0) {
        T* dx = gg.grad(xn).data();
        T gc = gv[c], inv = (*inv_std)[c];
        if (train) {
          T k = gc * inv / (T)m;
          for (int n = 0; n < N; ++n) {
            const T* gyp = gy + ((int64_t)n * C + c) * hw;
            const T* xh = xhat->data() + ((int64_t)n * C + c) * hw;
            T* dxp = dx + ((int64_t)n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i)
              dxp[i] += k * ((T)m * gyp[i] - s1 - xh[i] * s2);
          }
        } else {
          T k = gc * inv;
          for (int n = 0; n < N; ++n) {
            const T* gyp = gy + ((int64_t)n * C + c) * hw;
            T* dxp = dx + ((int64_t)n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) dxp[i] += k * gyp[i];
          }
        }
      }
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// global_avg_pool: [N,C,H,W] -> [N,C], arithmetic mean per channel.

template <class T>
Tensor<T> global_avg_pool(Graph<T>& g, const Tensor<T>& x) {
  check(x.shape.size() == 4, "global_avg_pool input must be [N,C,H,W], got " + shape_str(x.shape));
  const int N = x.shape[0], C = x.shape[1];
  const int64_t hw = (int64_t)x.shape[2] * x.shape[3];
  Tensor<T> y(Shape{N, C});
  const T* xp = x.ptr();
  for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
    const T* p = xp + nc * hw;
    T s = T(0);
    for (int64_t i = 0; i < hw; ++i) s += p[i];
    y[nc] = s / (T)hw;
  }
  int xn = x.node;
  y.node = g.emit(Op::global_avg_pool, {xn}, y, [=](Graph<T>& gg, int self) {
    if (xn < 0) return;
    const T* gy = gg.grad(self).data();
    T* dx = gg.grad(xn).data();
    for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
      T gshare = gy[nc] / (T)hw;
      T* p = dx + nc * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] += gshare;
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// upsample_bilinear, align_corners=false:
//   src = (i + 0.5) * in / out - 0.5, clamped. Identity when sizes match.

template <class T>
Tensor<T> upsample_bilinear(Graph<T>& g, const Tensor<T>& x, int out_h, int out_w) {
  check(x.shape.size() == 4, "upsample input must be [N,C,h,w], got " + shape_str(x.shape));
  const int N = x.shape[0], C = x.shape[1], h = x.shape[2], w = x.shape[3];
  check(out_h >= h && out_w >= w, "upsample target " + std::to_string(out_h) + "x" +
                                      std::to_string(out_w) + " smaller than input " +
                                      shape_str(x.shape));

  struct Lerp {
    int i0, i1;
    T f;
  };
  auto make_table = [](int in, int out) {
    std::vector<Lerp> t(out);
    for (int i = 0; i < out; ++i) {
      double src = (i + 0.5) * (double)in / out - 0.5;
      if (src < 0) src = 0;
      int i0 = (int)src;
      if (i0 > in - 1) i0 = in - 1;
      int i1 = std::min(i0 + 1, in - 1);
      t[i] = Lerp{i0, i1, (T)(src - i0)};
    }
    return t;
  };
  auto rows = std::make_shared<std::vector<Lerp>>(make_table(h, out_h));
  auto cols = std::make_shared<std::vector<Lerp>>(make_table(w, out_w));

  Tensor<T> y(Shape{N, C, out_h, out_w});
  const T* xp = x.ptr();
  T* yp = y.ptr();
  for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
    const T* p = xp + nc * h * w;
    T* q = yp + nc * (int64_t)out_h * out_w;
    for (int i = 0; i < out_h; ++i) {
      const Lerp& r = (*rows)[i];
      for (int j = 0; j < out_w; ++j) {
        const Lerp& c = (*cols)[j];
        T top = p[r.i0 * w + c.i0] + c.f * (p[r.i0 * w + c.i1] - p[r.i0 * w + c.i0]);
        T bot = p[r.i1 * w + c.i0] + c.f * (p[r.i1 * w + c.i1] - p[r.i1 * w + c.i0]);
        q[(int64_t)i * out_w + j] = top + r.f * (bot - top);
      }
    }
  }
  int xn = x.node;
  y.node = g.emit(Op::upsample_bilinear, {xn}, y, [=](Graph<T>& gg, int self) {
    if (xn < 0) return;
    const T* gy = gg.grad(self).data();
    T* dx = gg.grad(xn).data();
    for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
      T* p = dx + nc * h * w;
      const T* q = gy + nc * (int64_t)out_h * out_w;
      for (int i = 0; i < out_h; ++i) {
        const Lerp& r = (*rows)[i];
        for (int j = 0; j < out_w; ++j) {
          const Lerp& c = (*cols)[j];
          T gv = q[(int64_t)i * out_w + j];
          p[r.i0 * w + c.i0] += (T(1) - r.f) * (T(1) - c.f) * gv;
          p[r.i0 * w + c.i1] += (T(1) - r.f) * c.f * gv;
          p[r.i1 * w + c.i0] += r.f * (T(1) - c.f) * gv;
          p[r.i1 * w + c.i1] += r.f * c.f * gv;
        }
      }
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// linear: x [N,D] * w [D,M] + b [M] -> [N,M]

template <class T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check(x.shape.size() == 2 && w.shape.size() == 2,
        "linear expects x [N,D] and w [D,M], got " + shape_str(x.shape) + " and " +
            shape_str(w.shape));
  check(x.shape[1] == w.shape[0], "linear inner dim mismatch: " + shape_str(x.shape) + " vs " +
                                      shape_str(w.shape));
  const int N = x.shape[0], D = x.shape[1], M = w.shape[1];
  check(b.shape.size() == 1 && b.shape[0] == M,
        "linear bias must be [M]=" + std::to_string(M) + ", got " + shape_str(b.shape));

  Tensor<T> y(Shape{N, M});
  const T* xp = x.ptr();
  const T* wp = w.ptr();
  T* yp = y.ptr();
  for (int n = 0; n < N; ++n) {
    T* yrow = yp + (int64_t)n * M;
    for (int m = 0; m < M; ++m) yrow[m] = b[m];
    const T* xrow = xp + (int64_t)n * D;
    for (int d = 0; d < D; ++d) axpy(yrow, xrow[d], wp + (int64_t)d * M, M);
  }
  int xn = x.node, wn = w.node, bn = b.node;
  auto xv = x, wv = w;
  y.node = g.emit(Op::linear, {xn, wn, bn}, y, [=](Graph<T>& gg, int self) {
    const T* gy = gg.grad(self).data();
    if (xn >= 0) {
      T* dx = gg.grad(xn).data();
      for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d)
          dx[(int64_t)n * D + d] += dot_lanes(gy + (int64_t)n * M, wv.ptr() + (int64_t)d * M, M);
    }
    if (wn >= 0) {
      T* dw = gg.grad(wn).data();
      for (int n = 0; n < N; ++n) {
        const T* xrow = xv.ptr() + (int64_t)n * D;
        const T* gyrow = gy + (int64_t)n * M;
        for (int d = 0; d < D; ++d) axpy(dw + (int64_t)d * M, xrow[d], gyrow, M);
      }
    }
    if (bn >= 0) {
      T* db = gg.grad(bn).data();
      for (int n = 0; n < N; ++n) axpy(db, T(1), gy + (int64_t)n * M, M);
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise / reduction plumbing.

template <class T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape == b.shape, "add shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> y(a.shape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
  int an = a.node, bn = b.node;
  y.node = g.emit(Op::add, {an, bn}, y, [=](Graph<T>& gg, int self) {
    const auto& gy = gg.grad(self);
    gg.accumulate(an, gy);
    gg.accumulate(bn, gy);
  });
  return y;
}

template <class T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape == b.shape, "mul shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> y(a.shape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
  int an = a.node, bn = b.node;
  auto av = a, bv = b;
  y.node = g.emit(Op::mul, {an, bn}, y, [=](Graph<T>& gg, int self) {
    const T* gy = gg.grad(self).data();
    if (an >= 0) {
      T* da = gg.grad(an).data();
      for (int64_t i = 0; i < n; ++i) da[i] += gy[i] * bv[i];
    }
    if (bn >= 0) {
      T* db = gg.grad(bn).data();
      for (int64_t i = 0; i < n; ++i) db[i] += gy[i] * av[i];
    }
  });
  return y;
}

template <class T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& a, T c) {
  Tensor<T> y(a.shape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = c * a[i];
  int an = a.node;
  y.node = g.emit(Op::scale, {an}, y, [=](Graph<T>& gg, int self) {
    if (an < 0) return;
    const T* gy = gg.grad(self).data();
    T* da = gg.grad(an).data();
    for (int64_t i = 0; i < n; ++i) da[i] += c * gy[i];
  });
  return y;
}

template <class T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& a) {
  T s = T(0);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += a[i];
  Tensor<T> y = Tensor<T>::scalar(s);
  int an = a.node;
  y.node = g.emit(Op::sum, {an}, y, [=](Graph<T>& gg, int self) {
    if (an < 0) return;
    T gv = gg.grad(self)[0];
    T* da = gg.grad(an).data();
    for (int64_t i = 0; i < n; ++i) da[i] += gv;
  });
  return y;
}

template <class T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& a) {
  T s = T(0);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += a[i];
  Tensor<T> y = Tensor<T>::scalar(s / (T)n);
  int an = a.node;
  y.node = g.emit(Op::mean, {an}, y, [=](Graph<T>& gg, int self) {
    if (an < 0) return;
    T gv = gg.grad(self)[0] / (T)n;
    T* da = gg.grad(an).data();
    for (int64_t i = 0; i < n; ++i) da[i] += gv;
  });
  return y;
}

template <class T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& a, Shape s) {
  check(shape_numel(s) == a.numel(),
        "reshape " + shape_str(a.shape) + " -> " + shape_str(s) + " changes element count");
  Tensor<T> y = a;  // same buffer
  y.shape = std::move(s);
  int an = a.node;
  y.node = g.emit(Op::reshape, {an}, y, [=](Graph<T>& gg, int self) {
    if (an < 0) return;
    gg.accumulate(an, gg.grad(self));
  });
  return y;
}

template <class T>
Tensor<T> sigmoid(Graph<T>& g, const Tensor<T>& a) {
  Tensor<T> y(a.shape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    T v = a[i];
    y[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  int an = a.node;
  auto yv = y;
  y.node = g.emit(Op::sigmoid, {an}, y, [=](Graph<T>& gg, int self) {
    if (an < 0) return;
    const T* gy = gg.grad(self).data();
    T* da = gg.grad(an).data();
    for (int64_t i = 0; i < n; ++i) da[i] += gy[i] * yv[i] * (T(1) - yv[i]);
  });
  return y;
}

// log_softmax over the class axis: axis 1 for [N,K,H,W], axis 1 for [N,K].

template <class T>
Tensor<T> log_softmax(Graph<T>& g, const Tensor<T>& a) {
  check(a.shape.size() == 2 || a.shape.size() == 4,
        "log_softmax expects [N,K] or [N,K,H,W], got " + shape_str(a.shape));
  const int N = a.shape[0], K = a.shape[1];
  const int64_t hw = a.shape.size() == 4 ? (int64_t)a.shape[2] * a.shape[3] : 1;
  Tensor<T> y(a.shape);
  const T* ap = a.ptr();
  T* yp = y.ptr();
  for (int n = 0; n < N; ++n)
    for (int64_t i = 0; i < hw; ++i) {
      const int64_t base = (int64_t)n * K * hw + i;
      T mx = ap[base];
      for (int k = 1; k < K; ++k) mx = std::max(mx, ap[base + k * hw]);
      T se = T(0);
      for (int k = 0; k < K; ++k) se += std::exp(ap[base + k * hw] - mx);
      T lse = mx + std::log(se);
      for (int k = 0; k < K; ++k) yp[base + k * hw] = ap[base + k * hw] - lse;
    }
  int an = a.node;
  auto yv = y;
  y.node = g.emit(Op::log_softmax, {an}, y, [=](Graph<T>& gg, int self) {
    if (an < 0) return;
    const T* gy = gg.grad(self).data();
    T* da = gg.grad(an).data();
    for (int n = 0; n < N; ++n)
      for (int64_t i = 0; i < hw; ++i) {
        const int64_t base = (int64_t)n * K * hw + i;
        T gsum = T(0);
        for (int k = 0; k < K; ++k) gsum += gy[base + k * hw];
        for (int k = 0; k < K; ++k)
          da[base + k * hw] += gy[base + k * hw] - std::exp(yv[base + k * hw]) * gsum;
      }
  });
  return y;
}

}  // namespace mtl
