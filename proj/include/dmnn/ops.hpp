// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dmnn/tensor.hpp"
#include "dmnn/threading.hpp"

namespace dmnn {

using i64 = std::int64_t;

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, i64 M, i64 K, i64 N) {
  for (i64 m = 0; m < M; ++m) {
    const T* a = A + m * K;
    T* c = C + m * N;
    for (i64 k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T(0)) continue;
      const T* b = B + k * N;
      for (i64 n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_abt(const T* A, const T* B, T* C, i64 M, i64 K, i64 N) {
  for (i64 m = 0; m < M; ++m) {
    const T* a = A + m * K;
    T* c = C + m * N;
    for (i64 n = 0; n < N; ++n) {
      const T* b = B + n * K;
      T acc = T(0);
      for (i64 k = 0; k < K; ++k) acc += a[k] * b[k];
      c[n] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_atb(const T* A, const T* B, T* C, i64 M, i64 K, i64 N) {
  for (i64 m = 0; m < M; ++m) {
    const T* a = A + m * K;
    const T* b = B + m * N;
    for (i64 k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T(0)) continue;
      T* c = C + k * N;
      for (i64 n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// cols is [Cin*k*k x OH*OW], zero-filled for padding taps.
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int OH, int OW,
            T* cols) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + ((static_cast<i64>(c) * k + ky) * k + kx) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + static_cast<i64>(oy) * OW;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + OW, T(0));
            continue;
          }
          const T* src = x + (static_cast<i64>(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int C, int H, int W, int k, int stride, int pad, int OH, int OW,
                T* x) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + ((static_cast<i64>(c) * k + ky) * k + kx) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (static_cast<i64>(c) * H + iy) * W;
          const T* src = row + static_cast<i64>(oy) * OW;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* op, const char* arg) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

}  // namespace detail

/// 2-D cross-correlation. x: [B,Cin,H,W], w: [Cout,Cin,k,k], square kernel,
/// no bias. Output spatial extent is floor((H + 2*pad - k)/stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  detail::require_rank(x, 4, "conv2d", "x");
  detail::require_rank(w, 4, "conv2d", "w");
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin) {
    throw ShapeError("conv2d: input-channel dimension mismatch: x has C_in=" +
                     std::to_string(Cin) + ", w expects C_in=" + std::to_string(w.dim(1)));
  }
  if (w.dim(3) != k) {
    throw ShapeError("conv2d: kernel must be square, got " + std::to_string(k) + "x" +
                     std::to_string(w.dim(3)));
  }
  const int OH = detail::conv_out_extent(H, k, stride, pad);
  const int OW = detail::conv_out_extent(W, k, stride, pad);
  if (OH <= 0 || OW <= 0) {
    throw ShapeError("conv2d: spatial dimension collapses to " + std::to_string(OH) + "x" +
                     std::to_string(OW) + " for input " + std::to_string(H) + "x" +
                     std::to_string(W));
  }

  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const i64 colsz = static_cast<i64>(Cin) * k * k * OH * OW;
  std::vector<T> out(static_cast<std::size_t>(B) * Cout * OH * OW, T(0));

  parallel_for(B, [&](i64 b0, i64 b1) {
    std::vector<T> cols;
    if (!pointwise) cols.resize(static_cast<std::size_t>(colsz));
    for (i64 b = b0; b < b1; ++b) {
      const T* xb = x.data() + b * Cin * H * W;
      T* ob = out.data() + b * Cout * OH * OW;
      const T* rhs = xb;
      if (!pointwise) {
        detail::im2col(xb, Cin, H, W, k, stride, pad, OH, OW, cols.data());
        rhs = cols.data();
      }
      detail::gemm_acc(w.data(), rhs, ob, Cout, static_cast<i64>(Cin) * k * k,
                       static_cast<i64>(OH) * OW);
    }
  });

  auto backward = [x, w, stride, pad, B, Cin, H, W, Cout, k, OH, OW, pointwise, colsz](
                      const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    std::vector<T>* dx = pg[0];
    std::vector<T>* dw = pg[1];
    const int chunks = plan_chunks(B);
    std::vector<std::vector<T>> dw_partial;
    if (dw) dw_partial.assign(static_cast<std::size_t>(chunks), std::vector<T>(w.values().size(), T(0)));
    const i64 chunk = (B + chunks - 1) / chunks;

    parallel_for(B, [&](i64 b0, i64 b1) {
      const int slot = static_cast<int>(b0 / std::max<i64>(chunk, 1));
      std::vector<T> cols, colgrad;
      if (!pointwise) cols.resize(static_cast<std::size_t>(colsz));
      if (dx && !pointwise) colgrad.resize(static_cast<std::size_t>(colsz));
      for (i64 b = b0; b < b1; ++b) {
        const T* xb = x.data() + b * Cin * H * W;
        const T* gb = gout.data() + b * Cout * OH * OW;
        const T* rhs = xb;
        if (!pointwise) {
          detail::im2col(xb, Cin, H, W, k, stride, pad, OH, OW, cols.data());
          rhs = cols.data();
        }
        if (dw) {
          // dW += gy_b [Cout x OHOW] * cols_b^T
          detail::gemm_abt(gb, rhs, dw_partial[static_cast<std::size_t>(slot)].data(), Cout,
                           static_cast<i64>(OH) * OW, static_cast<i64>(Cin) * k * k);
        }
        if (dx) {
          T* dxb = dx->data() + b * Cin * H * W;
          if (pointwise) {
            detail::gemm_atb(w.data(), gb, dxb, Cout, static_cast<i64>(Cin), static_cast<i64>(OH) * OW);
          } else {
            std::fill(colgrad.begin(), colgrad.end(), T(0));
            detail::gemm_atb(w.data(), gb, colgrad.data(), Cout, static_cast<i64>(Cin) * k * k,
                             static_cast<i64>(OH) * OW);
            detail::col2im_add(colgrad.data(), Cin, H, W, k, stride, pad, OH, OW, dxb);
          }
        }
      }
    });

    if (dw) {
      // chunk-index order keeps the reduction deterministic for a fixed thread count
      for (const auto& part : dw_partial)
        for (std::size_t i = 0; i < part.size(); ++i) (*dw)[i] += part[i];
    }
  };

  return Tensor<T>::make_op({B, Cout, OH, OW}, std::move(out), {x, w}, std::move(backward));
}

/// Depthwise 2-D convolution. x: [B,C,H,W], w: [C,1,k,k]; output channel c
/// depends only on input channel c.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  detail::require_rank(x, 4, "depthwise_conv2d", "x");
  detail::require_rank(w, 4, "depthwise_conv2d", "w");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int k = w.dim(2);
  if (w.dim(0) != C) {
    throw ShapeError("depthwise_conv2d: channel dimension mismatch: x has C=" + std::to_string(C) +
                     ", w has C=" + std::to_string(w.dim(0)));
  }
  if (w.dim(1) != 1) {
    throw ShapeError("depthwise_conv2d: w channel-multiplier dimension must be 1, got " +
                     std::to_string(w.dim(1)));
  }
  const int OH = detail::conv_out_extent(H, k, stride, pad);
  const int OW = detail::conv_out_extent(W, k, stride, pad);
  if (OH <= 0 || OW <= 0) {
    throw ShapeError("depthwise_conv2d: spatial dimension collapses for input " +
                     std::to_string(H) + "x" + std::to_string(W));
  }

  std::vector<T> out(static_cast<std::size_t>(B) * C * OH * OW, T(0));
  const i64 planes = static_cast<i64>(B) * C;

  parallel_for(planes, [&](i64 p0, i64 p1) {
    for (i64 p = p0; p < p1; ++p) {
      const i64 c = p % C;
      const T* xp = x.data() + p * H * W;
      const T* wp = w.data() + c * k * k;
      T* op = out.data() + p * OH * OW;
      for (int oy = 0; oy < OH; ++oy) {
        for (int ox = 0; ox < OW; ++ox) {
          T acc = T(0);
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              acc += xp[static_cast<i64>(iy) * W + ix] * wp[ky * k + kx];
            }
          }
          op[static_cast<i64>(oy) * OW + ox] = acc;
        }
      }
    }
  });

  auto backward = [x, w, stride, pad, B, C, H, W, k, OH, OW](
                      const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    std::vector<T>* dx = pg[0];
    std::vector<T>* dw = pg[1];
    for (i64 b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const i64 p = b * C + c;
        const T* xp = x.data() + p * H * W;
        const T* gp = gout.data() + p * OH * OW;
        const T* wp = w.data() + static_cast<i64>(c) * k * k;
        for (int oy = 0; oy < OH; ++oy) {
          for (int ox = 0; ox < OW; ++ox) {
            const T g = gp[static_cast<i64>(oy) * OW + ox];
            if (g == T(0)) continue;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                if (dx) (*dx)[p * H * W + static_cast<i64>(iy) * W + ix] += g * wp[ky * k + kx];
                if (dw)
                  (*dw)[static_cast<i64>(c) * k * k + ky * k + kx] +=
                      g * xp[static_cast<i64>(iy) * W + ix];
              }
            }
          }
        }
      }
    }
  };

  return Tensor<T>::make_op({B, C, OH, OW}, std::move(out), {x, w}, std::move(backward));
}

/// y = x * w^T + b. x: [B,n], w: [m,n], b: [m].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(x, 2, "linear", "x");
  detail::require_rank(w, 2, "linear", "w");
  detail::require_rank(b, 1, "linear", "b");
  const int B = x.dim(0), n = x.dim(1), m = w.dim(0);
  if (w.dim(1) != n) {
    throw ShapeError("linear: feature dimension mismatch: x has n=" + std::to_string(n) +
                     ", w expects n=" + std::to_string(w.dim(1)));
  }
  if (b.dim(0) != m) {
    throw ShapeError("linear: bias dimension " + std::to_string(b.dim(0)) +
                     " does not match output features m=" + std::to_string(m));
  }

  std::vector<T> out(static_cast<std::size_t>(B) * m);
  for (int r = 0; r < B; ++r)
    for (int c = 0; c < m; ++c) out[static_cast<std::size_t>(r) * m + c] = b[c];
  detail::gemm_abt(x.data(), w.data(), out.data(), B, n, m);

  auto backward = [x, w, B, n, m](const std::vector<T>& gout,
                                  const std::vector<std::vector<T>*>& pg) {
    if (pg[0]) detail::gemm_acc(gout.data(), w.data(), pg[0]->data(), B, m, n);
    if (pg[1]) detail::gemm_atb(gout.data(), x.data(), pg[1]->data(), B, m, n);
    if (pg[2]) {
      for (int r = 0; r < B; ++r)
        for (int c = 0; c < m; ++c) (*pg[2])[static_cast<std::size_t>(c)] += gout[static_cast<std::size_t>(r) * m + c];
    }
  };

  return Tensor<T>::make_op({B, m}, std::move(out), {x, w, b}, std::move(backward));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[static_cast<i64>(i)] > T(0) ? x[static_cast<i64>(i)] : T(0);
  auto backward = [x](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < gout.size(); ++i)
      if (x[static_cast<i64>(i)] > T(0)) (*pg[0])[i] += gout[i];
  };
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, std::move(backward));
}

/// Softmax over the last dimension, numerically stabilised.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("softmax: scalar input");
  const i64 D = x.dim(x.rank() - 1);
  const i64 rows = x.numel() / D;
  std::vector<T> out(x.values().size());
  for (i64 r = 0; r < rows; ++r) {
    const T* xi = x.data() + r * D;
    T* yo = out.data() + r * D;
    T mx = xi[0];
    for (i64 j = 1; j < D; ++j) mx = std::max(mx, xi[j]);
    T sum = T(0);
    for (i64 j = 0; j < D; ++j) {
      yo[j] = std::exp(xi[j] - mx);
      sum += yo[j];
    }
    const T inv = T(1) / sum;
    for (i64 j = 0; j < D; ++j) yo[j] *= inv;
  }
  // y is captured by value: closures must not hold their own node
  std::vector<T> y = out;
  auto backward = [y, D, rows](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (!pg[0]) return;
    for (i64 r = 0; r < rows; ++r) {
      const T* yr = y.data() + r * D;
      const T* gr = gout.data() + r * D;
      T dot = T(0);
      for (i64 j = 0; j < D; ++j) dot += yr[j] * gr[j];
      T* pr = pg[0]->data() + r * D;
      for (i64 j = 0; j < D; ++j) pr[j] += yr[j] * (gr[j] - dot);
    }
  };
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, std::move(backward));
}

/// Per-channel spatial mean: [B,C,H,W] -> [B,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool", "x");
  const int B = x.dim(0), C = x.dim(1);
  const i64 HW = static_cast<i64>(x.dim(2)) * x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(B) * C);
  for (i64 p = 0; p < static_cast<i64>(B) * C; ++p) {
    const T* xp = x.data() + p * HW;
    T acc = T(0);
    for (i64 i = 0; i < HW; ++i) acc += xp[i];
    out[static_cast<std::size_t>(p)] = acc / static_cast<T>(HW);
  }
  auto backward = [B, C, HW](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (!pg[0]) return;
    const T inv = T(1) / static_cast<T>(HW);
    for (i64 p = 0; p < static_cast<i64>(B) * C; ++p) {
      const T g = gout[static_cast<std::size_t>(p)] * inv;
      T* dst = pg[0]->data() + p * HW;
      for (i64 i = 0; i < HW; ++i) dst[i] += g;
    }
  };
  return Tensor<T>::make_op({B, C}, std::move(out), {x}, std::move(backward));
}

/// Max pooling with argmax routing in backward.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int k, int stride, int pad) {
  detail::require_rank(x, 4, "max_pool2d", "x");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = detail::conv_out_extent(H, k, stride, pad);
  const int OW = detail::conv_out_extent(W, k, stride, pad);
  if (OH <= 0 || OW <= 0) throw ShapeError("max_pool2d: output collapses");
  std::vector<T> out(static_cast<std::size_t>(B) * C * OH * OW);
  std::vector<i64> arg(out.size());
  const i64 planes = static_cast<i64>(B) * C;
  for (i64 p = 0; p < planes; ++p) {
    const T* xp = x.data() + p * H * W;
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        i64 besti = -1;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            const T v = xp[static_cast<i64>(iy) * W + ix];
            if (v > best) {
              best = v;
              besti = static_cast<i64>(iy) * W + ix;
            }
          }
        }
        const i64 o = (p * OH + oy) * OW + ox;
        out[static_cast<std::size_t>(o)] = best;
        arg[static_cast<std::size_t>(o)] = p * H * W + besti;
      }
    }
  }
  auto backward = [arg](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[static_cast<std::size_t>(arg[i])] += gout[i];
  };
  return Tensor<T>::make_op({B, C, OH, OW}, std::move(out), {x}, std::move(backward));
}

/// Batch normalisation over dim 1. Train mode normalises with batch
/// statistics and folds them into the running estimates
/// (running = momentum*running + (1-momentum)*batch); eval mode uses the
/// running estimates. gamma/beta are the affine parameters.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     double momentum = 0.9, double eps = 1e-5) {
  if (x.rank() < 2) throw ShapeError("batch_norm: x must have at least 2 dims");
  const int C = x.dim(1);
  if (gamma.dim(0) != C || beta.dim(0) != C) {
    throw ShapeError("batch_norm: affine parameter channel dimension does not match C=" +
                     std::to_string(C));
  }
  const i64 B = x.dim(0);
  const i64 inner = x.numel() / (B * C);
  const i64 reduce = B * inner;  // elements per channel

  std::vector<T> mu(static_cast<std::size_t>(C), T(0));
  std::vector<T> invstd(static_cast<std::size_t>(C), T(0));

  if (training) {
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      for (i64 b = 0; b < B; ++b) {
        const T* xp = x.data() + (b * C + c) * inner;
        for (i64 i = 0; i < inner; ++i) acc += xp[i];
      }
      mu[static_cast<std::size_t>(c)] = acc / static_cast<T>(reduce);
    }
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      const T m = mu[static_cast<std::size_t>(c)];
      for (i64 b = 0; b < B; ++b) {
        const T* xp = x.data() + (b * C + c) * inner;
        for (i64 i = 0; i < inner; ++i) {
          const T d = xp[i] - m;
          acc += d * d;
        }
      }
      const T var = acc / static_cast<T>(reduce);
      invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + static_cast<T>(eps));
      const T unbiased = reduce > 1 ? acc / static_cast<T>(reduce - 1) : var;
      running_mean[c] = static_cast<T>(momentum) * running_mean[c] + static_cast<T>(1.0 - momentum) * m;
      running_var[c] = static_cast<T>(momentum) * running_var[c] + static_cast<T>(1.0 - momentum) * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mu[static_cast<std::size_t>(c)] = running_mean[c];
      invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(running_var[c] + static_cast<T>(eps));
    }
  }

  std::vector<T> out(x.values().size());
  for (i64 b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const T m = mu[static_cast<std::size_t>(c)];
      const T is = invstd[static_cast<std::size_t>(c)];
      const T g = gamma[c], be = beta[c];
      const T* xp = x.data() + (b * C + c) * inner;
      T* op = out.data() + (b * C + c) * inner;
      for (i64 i = 0; i < inner; ++i) op[i] = (xp[i] - m) * is * g + be;
    }
  }

  auto backward = [x, gamma, mu, invstd, B, C, inner, reduce, training](
                      const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    for (int c = 0; c < C; ++c) {
      const T m = mu[static_cast<std::size_t>(c)];
      const T is = invstd[static_cast<std::size_t>(c)];
      T sum_g = T(0), sum_gx = T(0);
      for (i64 b = 0; b < B; ++b) {
        const T* xp = x.data() + (b * C + c) * inner;
        const T* gp = gout.data() + (b * C + c) * inner;
        for (i64 i = 0; i < inner; ++i) {
          sum_g += gp[i];
          sum_gx += gp[i] * (xp[i] - m) * is;
        }
      }
      if (pg[1]) (*pg[1])[static_cast<std::size_t>(c)] += sum_gx;
      if (pg[2]) (*pg[2])[static_cast<std::size_t>(c)] += sum_g;
      if (pg[0]) {
        const T g = gamma[c];
        const T mean_g = sum_g / static_cast<T>(reduce);
        const T mean_gx = sum_gx / static_cast<T>(reduce);
        for (i64 b = 0; b < B; ++b) {
          const T* xp = x.data() + (b * C + c) * inner;
          const T* gp = gout.data() + (b * C + c) * inner;
          T* dp = pg[0]->data() + (b * C + c) * inner;
          if (training) {
            for (i64 i = 0; i < inner; ++i) {
              const T xhat = (xp[i] - m) * is;
              dp[i] += g * is * (gp[i] - mean_g - xhat * mean_gx);
            }
          } else {
            for (i64 i = 0; i < inner; ++i) dp[i] += g * is * gp[i];
          }
        }
      }
    }
  };

  return Tensor<T>::make_op(x.shape(), std::move(out), {x, gamma, beta}, std::move(backward));
}

/// Mean negative log-likelihood of probabilities p: [B,K] against integer
/// labels (one-hot k in -sum_j k_j log p_j).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& p, std::vector<int> labels) {
  detail::require_rank(p, 2, "cross_entropy", "p");
  const int B = p.dim(0), K = p.dim(1);
  if (static_cast<int>(labels.size()) != B) {
    throw ShapeError("cross_entropy: label count " + std::to_string(labels.size()) +
                     " does not match batch " + std::to_string(B));
  }
  const T floor = std::numeric_limits<T>::min();
  T loss = T(0);
  for (int b = 0; b < B; ++b) {
    const T pl = std::max(p[static_cast<i64>(b) * K + labels[static_cast<std::size_t>(b)]], floor);
    loss -= std::log(pl);
  }
  loss /= static_cast<T>(B);

  auto backward = [p, labels, B, K, floor](const std::vector<T>& gout,
                                           const std::vector<std::vector<T>*>& pg) {
    if (!pg[0]) return;
    const T g = gout[0] / static_cast<T>(B);
    for (int b = 0; b < B; ++b) {
      const i64 idx = static_cast<i64>(b) * K + labels[static_cast<std::size_t>(b)];
      const T pl = std::max(p[idx], floor);
      (*pg[0])[static_cast<std::size_t>(idx)] -= g / pl;
    }
  };
  return Tensor<T>::make_op({1}, {loss}, {p}, std::move(backward));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[static_cast<i64>(i)] + b[static_cast<i64>(i)];
  auto backward = [](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    for (int s = 0; s < 2; ++s)
      if (pg[s])
        for (std::size_t i = 0; i < gout.size(); ++i) (*pg[s])[i] += gout[i];
  };
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, std::move(backward));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[static_cast<i64>(i)] - b[static_cast<i64>(i)];
  auto backward = [](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (pg[0])
      for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[i] += gout[i];
    if (pg[1])
      for (std::size_t i = 0; i < gout.size(); ++i) (*pg[1])[i] -= gout[i];
  };
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, std::move(backward));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[static_cast<i64>(i)] * b[static_cast<i64>(i)];
  auto backward = [a, b](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (pg[0])
      for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[i] += gout[i] * b[static_cast<i64>(i)];
    if (pg[1])
      for (std::size_t i = 0; i < gout.size(); ++i) (*pg[1])[i] += gout[i] * a[static_cast<i64>(i)];
  };
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, std::move(backward));
}

/// y = scale * x + shift, elementwise with scalar coefficients.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  std::vector<T> out(x.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x[static_cast<i64>(i)] + shift;
  auto backward = [scale](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[i] += scale * gout[i];
  };
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, std::move(backward));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (std::size_t i = 0; i < x.values().size(); ++i) acc += x[static_cast<i64>(i)];
  auto backward = [](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (!pg[0]) return;
    for (auto& v : *pg[0]) v += gout[0];
  };
  return Tensor<T>::make_op({1}, {acc}, {x}, std::move(backward));
}

/// Multiplies every sample's slice by its per-sample coefficient.
/// x: [B, ...], s: [B].
template <typename T>
Tensor<T> scale_per_sample(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.rank() != 1 || s.dim(0) != x.dim(0)) {
    throw ShapeError("scale_per_sample: s must be [B] with B=" + std::to_string(x.dim(0)) +
                     ", got " + shape_str(s.shape()));
  }
  const i64 B = x.dim(0);
  const i64 inner = x.numel() / B;
  std::vector<T> out(x.values().size());
  for (i64 b = 0; b < B; ++b) {
    const T sv = s[b];
    const T* xp = x.data() + b * inner;
    T* op = out.data() + b * inner;
    for (i64 i = 0; i < inner; ++i) op[i] = xp[i] * sv;
  }
  auto backward = [x, s, B, inner](const std::vector<T>& gout,
                                   const std::vector<std::vector<T>*>& pg) {
    if (pg[0]) {
      for (i64 b = 0; b < B; ++b) {
        const T sv = s[b];
        const T* gp = gout.data() + b * inner;
        T* dp = pg[0]->data() + b * inner;
        for (i64 i = 0; i < inner; ++i) dp[i] += gp[i] * sv;
      }
    }
    if (pg[1]) {
      for (i64 b = 0; b < B; ++b) {
        const T* gp = gout.data() + b * inner;
        const T* xp = x.data() + b * inner;
        T acc = T(0);
        for (i64 i = 0; i < inner; ++i) acc += gp[i] * xp[i];
        (*pg[1])[static_cast<std::size_t>(b)] += acc;
      }
    }
  };
  return Tensor<T>::make_op(x.shape(), std::move(out), {x, s}, std::move(backward));
}

/// Picks index j along the last dimension: [..., D] -> [...].
template <typename T>
Tensor<T> select_lastdim(const Tensor<T>& x, int j) {
  const i64 D = x.dim(x.rank() - 1);
  const i64 rows = x.numel() / D;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<T> out(static_cast<std::size_t>(rows));
  for (i64 r = 0; r < rows; ++r) out[static_cast<std::size_t>(r)] = x[r * D + j];
  auto backward = [D, rows, j](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (!pg[0]) return;
    for (i64 r = 0; r < rows; ++r) (*pg[0])[static_cast<std::size_t>(r * D + j)] += gout[static_cast<std::size_t>(r)];
  };
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), {x}, std::move(backward));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out = x.values();
  auto backward = [](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[i] += gout[i];
  };
  return Tensor<T>::make_op(std::move(shape), std::move(out), {x}, std::move(backward));
}

/// sum_{r,c} x[r,c] * w[c] for x: [R,C] and a constant weight vector.
template <typename T>
Tensor<T> sum_weighted(const Tensor<T>& x, std::vector<T> w) {
  detail::require_rank(x, 2, "sum_weighted", "x");
  const i64 R = x.dim(0), C = x.dim(1);
  if (static_cast<i64>(w.size()) != C) {
    throw ShapeError("sum_weighted: weight length " + std::to_string(w.size()) +
                     " does not match columns " + std::to_string(C));
  }
  T acc = T(0);
  for (i64 r = 0; r < R; ++r)
    for (i64 c = 0; c < C; ++c) acc += x[r * C + c] * w[static_cast<std::size_t>(c)];
  auto backward = [w, R, C](const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg) {
    if (!pg[0]) return;
    for (i64 r = 0; r < R; ++r)
      for (i64 c = 0; c < C; ++c) (*pg[0])[static_cast<std::size_t>(r * C + c)] += gout[0] * w[static_cast<std::size_t>(c)];
  };
  return Tensor<T>::make_op({1}, {acc}, {x}, std::move(backward));
}

}  // namespace dmnn
