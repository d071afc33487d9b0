// Convolution, normalization, pooling and upsampling primitives.
//
// conv2d uses im2col plus small row-major GEMM kernels. Output size follows
// floor semantics, H' = floor((H + 2*pad - kh)/stride) + 1, so stride-2 3x3
// blocks halve odd and even extents alike. The raw kernels live in detail::
// so tests can drive them directly.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg {

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_acc(int M, int N, int K, const T* A, const T* B, T* C) {
  for (int m = 0; m < M; ++m) {
    const T* arow = A + static_cast<std::size_t>(m) * K;
    T* crow = C + static_cast<std::size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const T a = arow[k];
      const T* brow = B + static_cast<std::size_t>(k) * N;
      for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C[M,K] += A[M,N] * B[K,N]^T  (dot of rows)
template <typename T>
void gemm_abt_acc(int M, int K, int N, const T* A, const T* B, T* C) {
  for (int m = 0; m < M; ++m) {
    const T* arow = A + static_cast<std::size_t>(m) * N;
    T* crow = C + static_cast<std::size_t>(m) * K;
    for (int k = 0; k < K; ++k) {
      const T* brow = B + static_cast<std::size_t>(k) * N;
      T acc = T(0);
      for (int n = 0; n < N; ++n) acc += arow[n] * brow[n];
      crow[k] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_atb_acc(int K, int N, int M, const T* A, const T* B, T* C) {
  for (int m = 0; m < M; ++m) {
    const T* arow = A + static_cast<std::size_t>(m) * K;
    const T* brow = B + static_cast<std::size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const T a = arow[k];
      T* crow = C + static_cast<std::size_t>(k) * N;
      for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
  const int span = in + 2 * pad - k;
  ADVSEG_CHECK(span >= 0, ShapeError, "conv2d: kernel ", k, " does not fit input ", in,
               " with pad ", pad);
  return span / stride + 1;
}

// col has layout [Cin*kh*kw, OH*OW] for one batch item.
template <typename T>
void im2col(const T* x, int Cin, int H, int W, int kh, int kw, int stride, int pad, int OH,
            int OW, T* col) {
  const std::int64_t ohw = static_cast<std::int64_t>(OH) * OW;
  for (int c = 0; c < Cin; ++c) {
    const T* xc = x + static_cast<std::int64_t>(c) * H * W;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + (static_cast<std::int64_t>(c) * kh * kw + ky * kw + kx) * ohw;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride + ky - pad;
          T* dst = row + static_cast<std::int64_t>(oy) * OW;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + OW, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::int64_t>(iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add of a col buffer back into the input image.
template <typename T>
void col2im_add(const T* col, int Cin, int H, int W, int kh, int kw, int stride, int pad, int OH,
                int OW, T* dx) {
  const std::int64_t ohw = static_cast<std::int64_t>(OH) * OW;
  for (int c = 0; c < Cin; ++c) {
    T* xc = dx + static_cast<std::int64_t>(c) * H * W;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + (static_cast<std::int64_t>(c) * kh * kw + ky * kw + kx) * ohw;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + static_cast<std::int64_t>(oy) * OW;
          T* dst = xc + static_cast<std::int64_t>(iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// out[b] = W x col(x[b]) + bias, for every batch item.
template <typename T>
void conv2d_forward(const T* x, int B, int Cin, int H, int W, const T* w, int Cout, int kh,
                    int kw, const T* bias, int stride, int pad, int OH, int OW, T* out) {
  const int K = Cin * kh * kw;
  const std::int64_t ohw = static_cast<std::int64_t>(OH) * OW;
  std::vector<T> col(static_cast<std::size_t>(K) * ohw);
  for (int b = 0; b < B; ++b) {
    im2col(x + static_cast<std::int64_t>(b) * Cin * H * W, Cin, H, W, kh, kw, stride, pad, OH, OW,
           col.data());
    T* ob = out + static_cast<std::int64_t>(b) * Cout * ohw;
    for (int co = 0; co < Cout; ++co)
      std::fill(ob + co * ohw, ob + (co + 1) * ohw, bias ? bias[co] : T(0));
    gemm_acc(Cout, static_cast<int>(ohw), K, w, col.data(), ob);
  }
}

// Accumulates dx, dw, db from the output gradient g. Null targets are skipped.
template <typename T>
void conv2d_backward(const T* x, const T* g, int B, int Cin, int H, int W, const T* w, int Cout,
                     int kh, int kw, int stride, int pad, int OH, int OW, T* dx, T* dw, T* db) {
  const int K = Cin * kh * kw;
  const std::int64_t ohw = static_cast<std::int64_t>(OH) * OW;
  std::vector<T> col(static_cast<std::size_t>(K) * ohw);
  std::vector<T> dcol;
  if (dx) dcol.resize(static_cast<std::size_t>(K) * ohw);
  for (int b = 0; b < B; ++b) {
    const T* gb = g + static_cast<std::int64_t>(b) * Cout * ohw;
    if (db) {
      for (int co = 0; co < Cout; ++co) {
        T acc = T(0);
        const T* row = gb + co * ohw;
        for (std::int64_t i = 0; i < ohw; ++i) acc += row[i];
        db[co] += acc;
      }
    }
    if (dw || dx) {
      if (dw) {
        im2col(x + static_cast<std::int64_t>(b) * Cin * H * W, Cin, H, W, kh, kw, stride, pad, OH,
               OW, col.data());
        gemm_abt_acc(Cout, K, static_cast<int>(ohw), gb, col.data(), dw);
      }
      if (dx) {
        std::fill(dcol.begin(), dcol.end(), T(0));
        gemm_atb_acc(K, static_cast<int>(ohw), Cout, w, gb, dcol.data());
        col2im_add(dcol.data(), Cin, H, W, kh, kw, stride, pad, OH, OW,
                   dx + static_cast<std::int64_t>(b) * Cin * H * W);
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: x[B,Cin,H,W] * w[Cout,Cin,kh,kw] + bias[Cout], cross-correlation
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv2d(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  int stride, int pad) {
  ADVSEG_CHECK(x.rank() == 4, ShapeError, "conv2d: input must be rank-4, got ",
               shape_str(x.shape()));
  ADVSEG_CHECK(w.rank() == 4, ShapeError, "conv2d: weight must be rank-4, got ",
               shape_str(w.shape()));
  ADVSEG_CHECK(bias.rank() == 1, ShapeError, "conv2d: bias must be rank-1");
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  ADVSEG_CHECK(w.dim(1) == Cin, ShapeError, "conv2d: weight expects ", w.dim(1),
               " input channels, got ", Cin);
  ADVSEG_CHECK(bias.dim(0) == Cout, ShapeError, "conv2d: bias size ", bias.dim(0), " vs ", Cout,
               " output channels");
  ADVSEG_CHECK((kh == 1 || kh == 3) && (kw == 1 || kw == 3), ShapeError,
               "conv2d: kernel sizes are limited to 1 and 3, got ", kh, "x", kw);
  ADVSEG_CHECK(stride == 1 || stride == 2, ShapeError, "conv2d: stride must be 1 or 2");
  ADVSEG_CHECK(pad >= 0, ShapeError, "conv2d: negative pad");
  const int OH = detail::conv_out_extent(H, kh, stride, pad);
  const int OW = detail::conv_out_extent(W, kw, stride, pad);

  TensorT<T> out = TensorT<T>::zeros({B, Cout, OH, OW});
  detail::conv2d_forward(x.data(), B, Cin, H, W, w.data(), Cout, kh, kw, bias.data(), stride, pad,
                         OH, OW, out.data());

  if (detail::needs_tape(tape, x, w, bias)) {
    detail::mark_output(tape, out, true);
    auto xs = x.storage();
    auto ws = w.storage();
    auto bs = bias.storage();
    auto os = out.storage();
    tape->record(os, [xs, ws, bs, os, B, Cin, H, W, Cout, kh, kw, stride, pad, OH, OW]() {
      if (os->grad.empty()) return;
      T* dx = nullptr;
      T* dw = nullptr;
      T* db = nullptr;
      if (xs->tracked) {
        xs->ensure_grad();
        dx = xs->grad.data();
      }
      if (ws->tracked) {
        ws->ensure_grad();
        dw = ws->grad.data();
      }
      if (bs->tracked) {
        bs->ensure_grad();
        db = bs->grad.data();
      }
      detail::conv2d_backward(xs->data.data(), os->grad.data(), B, Cin, H, W, ws->data.data(),
                              Cout, kh, kw, stride, pad, OH, OW, dx, dw, db);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// instance normalization over each (batch, channel) plane
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> instance_norm(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gamma,
                         const TensorT<T>& beta, T eps = T(1e-5)) {
  ADVSEG_CHECK(x.rank() == 4, ShapeError, "instance_norm: input must be rank-4");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  ADVSEG_CHECK(gamma.rank() == 1 && gamma.dim(0) == C, ShapeError, "instance_norm: gamma size");
  ADVSEG_CHECK(beta.rank() == 1 && beta.dim(0) == C, ShapeError, "instance_norm: beta size");
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  ADVSEG_CHECK(plane >= 2, ShapeError, "instance_norm: needs at least 2 spatial elements");

  TensorT<T> out = TensorT<T>::zeros(x.shape());
  std::vector<T> mean(static_cast<std::size_t>(B) * C), inv_std(static_cast<std::size_t>(B) * C);
  const T* xd = x.data();
  const T* gd = gamma.data();
  const T* bd = beta.data();
  T* od = out.data();
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
      double mu = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) mu += static_cast<double>(xd[base + i]);
      mu /= static_cast<double>(plane);
      double var = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(xd[base + i]) - mu;
        var += d * d;
      }
      var /= static_cast<double>(plane);  // biased
      const T m = static_cast<T>(mu);
      const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      mean[static_cast<std::size_t>(b) * C + c] = m;
      inv_std[static_cast<std::size_t>(b) * C + c] = is;
      const T g = gd[c], be = bd[c];
      for (std::int64_t i = 0; i < plane; ++i)
        od[base + i] = (xd[base + i] - m) * is * g + be;
    }
  }

  if (detail::needs_tape(tape, x, gamma, beta)) {
    detail::mark_output(tape, out, true);
    auto xs = x.storage();
    auto gs = gamma.storage();
    auto bs = beta.storage();
    auto os = out.storage();
    tape->record(os, [xs, gs, bs, os, B, C, plane, mean, inv_std]() {
      if (os->grad.empty()) return;
      const T* g = os->grad.data();
      const T* xd = xs->data.data();
      if (gs->tracked) gs->ensure_grad();
      if (bs->tracked) bs->ensure_grad();
      if (xs->tracked) xs->ensure_grad();
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
          const T m = mean[static_cast<std::size_t>(b) * C + c];
          const T is = inv_std[static_cast<std::size_t>(b) * C + c];
          if (gs->tracked || bs->tracked) {
            double dg = 0.0, db = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) {
              const double gi = static_cast<double>(g[base + i]);
              dg += gi * static_cast<double>((xd[base + i] - m) * is);
              db += gi;
            }
            if (gs->tracked) gs->grad[static_cast<std::size_t>(c)] += static_cast<T>(dg);
            if (bs->tracked) bs->grad[static_cast<std::size_t>(c)] += static_cast<T>(db);
          }
          if (xs->tracked) {
            // dx = gamma*is * (g - mean(g) - xhat * mean(g*xhat))
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) {
              const double gi = static_cast<double>(g[base + i]);
              sum_g += gi;
              sum_gx += gi * static_cast<double>((xd[base + i] - m) * is);
            }
            const double mg = sum_g / static_cast<double>(plane);
            const double mgx = sum_gx / static_cast<double>(plane);
            const double scale = static_cast<double>(gs->data[static_cast<std::size_t>(c)]) *
                                 static_cast<double>(is);
            for (std::int64_t i = 0; i < plane; ++i) {
              const double xhat = static_cast<double>((xd[base + i] - m) * is);
              xs->grad[base + i] +=
                  static_cast<T>(scale * (static_cast<double>(g[base + i]) - mg - xhat * mgx));
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2; gradient goes to the first maximum in scan order
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> maxpool2(TapeT<T>* tape, const TensorT<T>& x) {
  ADVSEG_CHECK(x.rank() == 4, ShapeError, "maxpool2: input must be rank-4");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  ADVSEG_CHECK(H % 2 == 0 && W % 2 == 0, ShapeError, "maxpool2: spatial extents must be even, got ",
               H, "x", W);
  const int OH = H / 2, OW = W / 2;
  TensorT<T> out = TensorT<T>::zeros({B, C, OH, OW});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  const T* xd = x.data();
  T* od = out.data();
  std::int64_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * H * W;
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t best_i = -1;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::int64_t i = base + static_cast<std::int64_t>(oy * 2 + dy) * W + ox * 2 + dx;
              if (xd[i] > best) {  // strict: first occurrence wins ties
                best = xd[i];
                best_i = i;
              }
            }
          od[o] = best;
          argmax[static_cast<std::size_t>(o)] = best_i;
          ++o;
        }
    }

  if (detail::needs_tape(tape, x)) {
    detail::mark_output(tape, out, true);
    auto xs = x.storage();
    auto os = out.storage();
    tape->record(os, [xs, os, argmax]() {
      if (os->grad.empty()) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < argmax.size(); ++i)
        xs->grad[static_cast<std::size_t>(argmax[i])] += os->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// nearest-neighbor 2x upsampling
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> upsample_nn2(TapeT<T>* tape, const TensorT<T>& x) {
  ADVSEG_CHECK(x.rank() == 4, ShapeError, "upsample_nn2: input must be rank-4");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  TensorT<T> out = TensorT<T>::zeros({B, C, 2 * H, 2 * W});
  const T* xd = x.data();
  T* od = out.data();
  for (int bc = 0; bc < B * C; ++bc) {
    const T* xp = xd + static_cast<std::int64_t>(bc) * H * W;
    T* op = od + static_cast<std::int64_t>(bc) * 4 * H * W;
    for (int y = 0; y < H; ++y) {
      T* row0 = op + static_cast<std::int64_t>(2 * y) * 2 * W;
      T* row1 = row0 + 2 * W;
      for (int x2 = 0; x2 < W; ++x2) {
        const T v = xp[y * W + x2];
        row0[2 * x2] = v;
        row0[2 * x2 + 1] = v;
        row1[2 * x2] = v;
        row1[2 * x2 + 1] = v;
      }
    }
  }
  if (detail::needs_tape(tape, x)) {
    detail::mark_output(tape, out, true);
    auto xs = x.storage();
    auto os = out.storage();
    tape->record(os, [xs, os, B, C, H, W]() {
      if (os->grad.empty()) return;
      xs->ensure_grad();
      const T* g = os->grad.data();
      for (int bc = 0; bc < B * C; ++bc) {
        T* gx = xs->grad.data() + static_cast<std::int64_t>(bc) * H * W;
        const T* gp = g + static_cast<std::int64_t>(bc) * 4 * H * W;
        for (int y = 0; y < H; ++y) {
          const T* row0 = gp + static_cast<std::int64_t>(2 * y) * 2 * W;
          const T* row1 = row0 + 2 * W;
          for (int x2 = 0; x2 < W; ++x2)
            gx[y * W + x2] += row0[2 * x2] + row0[2 * x2 + 1] + row1[2 * x2] + row1[2 * x2 + 1];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// global average pooling [B,C,H,W] -> [B,C]
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> global_avg_pool(TapeT<T>* tape, const TensorT<T>& x) {
  ADVSEG_CHECK(x.rank() == 4, ShapeError, "global_avg_pool: input must be rank-4");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  TensorT<T> out = TensorT<T>::zeros({B, C});
  const T* xd = x.data();
  T* od = out.data();
  for (int bc = 0; bc < B * C; ++bc) {
    double acc = 0.0;
    const T* xp = xd + static_cast<std::int64_t>(bc) * plane;
    for (std::int64_t i = 0; i < plane; ++i) acc += static_cast<double>(xp[i]);
    od[bc] = static_cast<T>(acc / static_cast<double>(plane));
  }
  if (detail::needs_tape(tape, x)) {
    detail::mark_output(tape, out, true);
    auto xs = x.storage();
    auto os = out.storage();
    tape->record(os, [xs, os, B, C, plane]() {
      if (os->grad.empty()) return;
      xs->ensure_grad();
      const T inv = T(1) / static_cast<T>(plane);
      for (int bc = 0; bc < B * C; ++bc) {
        const T gv = os->grad[static_cast<std::size_t>(bc)] * inv;
        T* gx = xs->grad.data() + static_cast<std::int64_t>(bc) * plane;
        for (std::int64_t i = 0; i < plane; ++i) gx[i] += gv;
      }
    });
  }
  return out;
}

}  // namespace advseg
