#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <type_traits>
#include <span>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "gattn/tensor.hpp"

namespace gattn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline int thread_id() {
#ifdef _OPENMP
  return omp_get_thread_num();
#else
  return 0;
#endif
}

namespace detail {

template <typename T>
void require_rank(const Tensor<T>& t, std::int64_t r, const char* op, const char* arg) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(r) +
                     ", got shape " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

/// Gathers conv patches of sample `x` (C,H,W) into cols[(C*kh*kw) x (Ho*Wo)].
template <typename T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t Ho,
            std::int64_t Wo, T* cols) {
  const std::int64_t plane = H * W;
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * (Ho * Wo);
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          const std::int64_t iy = oy * stride + ki - pad;
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + c * plane + iy * W;
          if (stride == 1) {
            // Contiguous strip with zero-filled out-of-image edges.
            const std::int64_t ix0 = kj - pad;
            std::int64_t lo = std::max<std::int64_t>(0, -ix0);
            std::int64_t hi = std::min<std::int64_t>(Wo, W - ix0);
            if (lo > hi) lo = hi = 0;
            std::fill(dst, dst + lo, T(0));
            if (hi > lo) std::copy(src + ix0 + lo, src + ix0 + hi, dst + lo);
            std::fill(dst + std::max(lo, hi), dst + Wo, T(0));
          } else {
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
              const std::int64_t ix = ox * stride + kj - pad;
              dst[ox] = (ix < 0 || ix >= W) ? T(0) : src[ix];
            }
          }
        }
      }
    }
  }
}

/// Scatter-add of cols back into a (C,H,W) gradient plane; inverse of im2col.
template <typename T>
void col2im_add(const T* cols, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
                std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t Ho,
                std::int64_t Wo, T* dx) {
  const std::int64_t plane = H * W;
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * (Ho * Wo);
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          const std::int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= H) continue;
          T* dst = dx + c * plane + iy * W;
          const T* src = row + oy * Wo;
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            const std::int64_t ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw].
/// Ho = (H + 2*pad - kh) / stride + 1, likewise Wo.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w,
                 const std::type_identity_t<std::optional<Tensor<T>>>& bias = std::nullopt,
                 std::int64_t stride = 1, std::int64_t pad = 0) {
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(w, 4, "conv2d", "kernel");
  const std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Cin)
    throw ShapeError("conv2d: input channels (input axis 1 = " + std::to_string(Cin) +
                     ") do not match kernel input channels (kernel axis 1 = " +
                     std::to_string(w.dim(1)) + ")");
  if (kh < 1 || kw < 1) throw ShapeError("conv2d: kernel extents must be >= 1");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  if (bias && bias->numel() != Cout)
    throw ShapeError("conv2d: bias has " + std::to_string(bias->numel()) +
                     " entries for " + std::to_string(Cout) + " output channels (kernel axis 0)");
  const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho < 1 || Wo < 1)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " does not fit input " +
                     shape_str(x.shape()) + " with pad " + std::to_string(pad));

  const std::int64_t K = Cin * kh * kw;
  const std::int64_t P = Ho * Wo;
  Tensor<T> out = Tensor<T>::zeros({N, Cout, Ho, Wo});

  const int nt = max_threads();
  std::vector<std::vector<T>> colbuf(static_cast<std::size_t>(nt));

  {
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    const T* bd = bias ? bias->data().data() : nullptr;
    T* od = out.data().data();
    ConstMatMap<T> wm(wd, Cout, K);
#pragma omp parallel for schedule(static)
    for (std::int64_t n = 0; n < N; ++n) {
      auto& cols = colbuf[static_cast<std::size_t>(thread_id())];
      cols.resize(static_cast<std::size_t>(K * P));
      detail::im2col(xd + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
      ConstMatMap<T> cm(cols.data(), K, P);
      MatMap<T> om(od + n * Cout * P, Cout, P);
      om.noalias() = wm * cm;
      if (bd)
        for (std::int64_t c = 0; c < Cout; ++c) om.row(c).array() += bd[c];
    }
  }

  auto xp = x.payload();
  auto wp = w.payload();
  auto bp = bias ? bias->payload() : nullptr;
  auto op = out.payload();
  mark_recorded(out, {&x, &w, bias ? &*bias : nullptr},
                [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g) return;
    const T* gd = g->data();
    const int tn = max_threads();
    std::vector<std::vector<T>> cols_t(static_cast<std::size_t>(tn));
    if (wp->requires_grad || bp) {
      // Weight/bias gradients: per-thread partials reduced in thread order so
      // results are deterministic for a fixed thread count.
      std::vector<std::vector<T>> dw_t(static_cast<std::size_t>(tn));
      std::vector<std::vector<T>> db_t(static_cast<std::size_t>(tn));
#pragma omp parallel for schedule(static)
      for (std::int64_t n = 0; n < N; ++n) {
        const int t = thread_id();
        auto& cols = cols_t[static_cast<std::size_t>(t)];
        cols.resize(static_cast<std::size_t>(K * P));
        detail::im2col(xp->value.data() + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho,
                       Wo, cols.data());
        ConstMatMap<T> cm(cols.data(), K, P);
        ConstMatMap<T> gm(gd + n * Cout * P, Cout, P);
        if (wp->requires_grad) {
          auto& dw = dw_t[static_cast<std::size_t>(t)];
          if (dw.empty()) dw.assign(static_cast<std::size_t>(Cout * K), T(0));
          MatMap<T>(dw.data(), Cout, K).noalias() += gm * cm.transpose();
        }
        if (bp && bp->requires_grad) {
          auto& db = db_t[static_cast<std::size_t>(t)];
          if (db.empty()) db.assign(static_cast<std::size_t>(Cout), T(0));
          // Scalar loop: Eigen's vectorized redux depends on heap alignment,
          // which would break bitwise run-to-run determinism.
          const T* gp = gd + n * Cout * P;
          for (std::int64_t c = 0; c < Cout; ++c) {
            T s = T(0);
            for (std::int64_t p = 0; p < P; ++p) s += gp[c * P + p];
            db[static_cast<std::size_t>(c)] += s;
          }
        }
      }
      if (wp->requires_grad) {
        auto& dw = ctx.acc(wp);
        for (auto& part : dw_t)
          if (!part.empty())
            for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += part[i];
      }
      if (bp && bp->requires_grad) {
        auto& db = ctx.acc(bp);
        for (auto& part : db_t)
          if (!part.empty())
            for (std::size_t i = 0; i < db.size(); ++i) db[i] += part[i];
      }
    }
    if (xp->requires_grad) {
      auto& dx = ctx.acc(xp);
      T* dxd = dx.data();
      ConstMatMap<T> wm(wp->value.data(), Cout, K);
#pragma omp parallel for schedule(static)
      for (std::int64_t n = 0; n < N; ++n) {
        auto& cols = cols_t[static_cast<std::size_t>(thread_id())];
        cols.resize(static_cast<std::size_t>(K * P));
        ConstMatMap<T> gm(gd + n * Cout * P, Cout, P);
        MatMap<T>(cols.data(), K, P).noalias() = wm.transpose() * gm;
        detail::col2im_add(cols.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                           dxd + n * Cin * H * W);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map of x[N,F] by w[O,F] plus optional bias[O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w,
                 const std::type_identity_t<std::optional<Tensor<T>>>& bias = std::nullopt) {
  detail::require_rank(x, 2, "linear", "input");
  detail::require_rank(w, 2, "linear", "weight");
  const std::int64_t N = x.dim(0), F = x.dim(1), O = w.dim(0);
  if (w.dim(1) != F)
    throw ShapeError("linear: input features (input axis 1 = " + std::to_string(F) +
                     ") do not match weight axis 1 = " + std::to_string(w.dim(1)));
  if (bias && bias->numel() != O)
    throw ShapeError("linear: bias has " + std::to_string(bias->numel()) + " entries for " +
                     std::to_string(O) + " outputs");
  Tensor<T> out = Tensor<T>::zeros({N, O});
  {
    ConstMatMap<T> xm(x.data().data(), N, F);
    ConstMatMap<T> wm(w.data().data(), O, F);
    MatMap<T> om(out.data().data(), N, O);
    om.noalias() = xm * wm.transpose();
    if (bias) {
      const T* bd = bias->data().data();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) out.data()[static_cast<std::size_t>(n * O + o)] += bd[o];
    }
  }
  auto xp = x.payload();
  auto wp = w.payload();
  auto bp = bias ? bias->payload() : nullptr;
  auto op = out.payload();
  mark_recorded(out, {&x, &w, bias ? &*bias : nullptr}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g) return;
    ConstMatMap<T> gm(g->data(), N, O);
    if (wp->requires_grad) {
      MatMap<T> dw(ctx.acc(wp).data(), O, F);
      dw.noalias() += gm.transpose() * ConstMatMap<T>(xp->value.data(), N, F);
    }
    if (bp && bp->requires_grad) {
      auto& db = ctx.acc(bp);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) db[static_cast<std::size_t>(o)] += (*g)[static_cast<std::size_t>(n * O + o)];
    }
    if (xp->requires_grad) {
      MatMap<T> dx(ctx.acc(xp).data(), N, F);
      dx.noalias() += gm * ConstMatMap<T>(wp->value.data(), O, F);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch norm over [N,C,H,W]. In train mode normalizes with batch
/// statistics (biased variance) and updates running stats in place; in eval
/// mode uses the frozen running statistics. running_mean/var are state, not
/// differentiable parameters.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool train,
                       T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require_rank(x, 4, "batch_norm2d", "input");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw ShapeError("batch_norm2d: parameter length does not match channel axis 1 = " +
                     std::to_string(C));
  const std::int64_t plane = H * W;
  const std::int64_t M = N * plane;
  Tensor<T> out = Tensor<T>::zeros(x.shape());

  std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  {
    const T* xd = x.data().data();
    T* od = out.data().data();
    const T* gm = gamma.data().data();
    const T* bt = beta.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < C; ++c) {
      T mu, is;
      if (train) {
        double s = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* p = xd + (n * C + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) s += static_cast<double>(p[i]);
        }
        mu = static_cast<T>(s / static_cast<double>(M));
        double v = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* p = xd + (n * C + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            const double d = static_cast<double>(p[i]) - static_cast<double>(mu);
            v += d * d;
          }
        }
        const T var = static_cast<T>(v / static_cast<double>(M));
        is = T(1) / std::sqrt(var + eps);
        running_mean.data()[static_cast<std::size_t>(c)] =
            (T(1) - momentum) * running_mean.data()[static_cast<std::size_t>(c)] + momentum * mu;
        running_var.data()[static_cast<std::size_t>(c)] =
            (T(1) - momentum) * running_var.data()[static_cast<std::size_t>(c)] + momentum * var;
      } else {
        mu = running_mean.data()[static_cast<std::size_t>(c)];
        is = T(1) / std::sqrt(running_var.data()[static_cast<std::size_t>(c)] + eps);
      }
      mean[static_cast<std::size_t>(c)] = mu;
      invstd[static_cast<std::size_t>(c)] = is;
      const T a = gm[c] * is;
      const T b = bt[c] - a * mu;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = xd + (n * C + c) * plane;
        T* q = od + (n * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) q[i] = a * p[i] + b;
      }
    }
  }

  auto xp = x.payload();
  auto gp = gamma.payload();
  auto bp = beta.payload();
  auto op = out.payload();
  mark_recorded(out, {&x, &gamma, &beta}, [=, mean = std::move(mean),
                                           invstd = std::move(invstd)](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g) return;
    const T* gd = g->data();
    const T* xd = xp->value.data();
    std::vector<T>* dx = xp->requires_grad ? &ctx.acc(xp) : nullptr;
    std::vector<T>* dg = gp->requires_grad ? &ctx.acc(gp) : nullptr;
    std::vector<T>* db = bp->requires_grad ? &ctx.acc(bp) : nullptr;
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < C; ++c) {
      const T mu = mean[static_cast<std::size_t>(c)];
      const T is = invstd[static_cast<std::size_t>(c)];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* gy = gd + (n * C + c) * plane;
        const T* px = xd + (n * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          sum_dy += static_cast<double>(gy[i]);
          sum_dy_xhat += static_cast<double>(gy[i]) * static_cast<double>((px[i] - mu) * is);
        }
      }
      if (db) (*db)[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy);
      if (dg) (*dg)[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy_xhat);
      if (dx) {
        const T gmc = gp->value[static_cast<std::size_t>(c)];
        if (train) {
          const T k = gmc * is / static_cast<T>(M);
          const T sdy = static_cast<T>(sum_dy);
          const T sdx = static_cast<T>(sum_dy_xhat);
          for (std::int64_t n = 0; n < N; ++n) {
            const T* gy = gd + (n * C + c) * plane;
            const T* px = xd + (n * C + c) * plane;
            T* q = dx->data() + (n * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              const T xhat = (px[i] - mu) * is;
              q[i] += k * (static_cast<T>(M) * gy[i] - sdy - xhat * sdx);
            }
          }
        } else {
          const T a = gmc * is;
          for (std::int64_t n = 0; n < N; ++n) {
            const T* gy = gd + (n * C + c) * plane;
            T* q = dx->data() + (n * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) q[i] += a * gy[i];
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2; spatial extents must be even. Ties resolve
/// to the first maximum in scan order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x) {
  detail::require_rank(x, 4, "max_pool2d", "input");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError("max_pool2d: spatial extents must be even, got " + shape_str(x.shape()));
  const std::int64_t Ho = H / 2, Wo = W / 2;
  Tensor<T> out = Tensor<T>::zeros({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(N * C * Ho * Wo));
  {
    const T* xd = x.data().data();
    T* od = out.data().data();
    std::int64_t* am = argmax->data();
#pragma omp parallel for schedule(static)
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const T* p = xd + nc * H * W;
      T* q = od + nc * Ho * Wo;
      std::int64_t* a = am + nc * Ho * Wo;
      for (std::int64_t oy = 0; oy < Ho; ++oy) {
        for (std::int64_t ox = 0; ox < Wo; ++ox) {
          const std::int64_t base = (2 * oy) * W + 2 * ox;
          std::int64_t best = base;
          T bv = p[base];
          const std::int64_t cand[3] = {base + 1, base + W, base + W + 1};
          for (std::int64_t k = 0; k < 3; ++k)
            if (p[cand[k]] > bv) {
              bv = p[cand[k]];
              best = cand[k];
            }
          q[oy * Wo + ox] = bv;
          a[oy * Wo + ox] = nc * H * W + best;
        }
      }
    }
  }
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    auto& dx = ctx.acc(xp);
    const auto& am = *argmax;
    for (std::size_t i = 0; i < g->size(); ++i) dx[static_cast<std::size_t>(am[i])] += (*g)[i];
  });
  return out;
}

/// Spatial mean over H,W: [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool", "input");
  const std::int64_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({N, C});
  {
    const T* xd = x.data().data();
    T* od = out.data().data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      double s = 0.0;
      const T* p = xd + nc * plane;
      for (std::int64_t i = 0; i < plane; ++i) s += static_cast<double>(p[i]);
      od[nc] = static_cast<T>(s / static_cast<double>(plane));
    }
  }
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    auto& dx = ctx.acc(xp);
    const T inv = T(1) / static_cast<T>(plane);
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const T gv = (*g)[static_cast<std::size_t>(nc)] * inv;
      T* q = dx.data() + nc * plane;
      for (std::int64_t i = 0; i < plane; ++i) q[i] += gv;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    auto& dx = ctx.acc(xp);
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (xp->value[i] > T(0)) dx[i] += (*g)[i];
  });
  return out;
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = std::tanh(xv[i]);
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    auto& dx = ctx.acc(xp);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T y = op->value[i];
      dx[i] += (*g)[i] * (T(1) - y * y);
    }
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    ov[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                      : std::exp(v) / (T(1) + std::exp(v));
  }
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    auto& dx = ctx.acc(xp);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T y = op->value[i];
      dx[i] += (*g)[i] * y * (T(1) - y);
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  auto ap = a.payload();
  auto bp = b.payload();
  auto op = out.payload();
  mark_recorded(out, {&a, &b}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g) return;
    if (ap->requires_grad) {
      auto& da = ctx.acc(ap);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += (*g)[i];
    }
    if (bp->requires_grad) {
      auto& db = ctx.acc(bp);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += (*g)[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  auto ap = a.payload();
  auto bp = b.payload();
  auto op = out.payload();
  mark_recorded(out, {&a, &b}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g) return;
    if (ap->requires_grad) {
      auto& da = ctx.acc(ap);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += (*g)[i] * bp->value[i];
    }
    if (bp->requires_grad) {
      auto& db = ctx.acc(bp);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += (*g)[i] * ap->value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = c * x.data()[i];
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    auto& dx = ctx.acc(xp);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += c * (*g)[i];
  });
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  double s = 0.0;
  for (T v : x.data()) s += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s));
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    auto& dx = ctx.acc(xp);
    const T gv = (*g)[0];
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gv;
  });
  return out;
}

/// Same data, new shape (copy). Backward is the inverse reshape.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> out = Tensor<T>::from_data(std::move(shape), x.data());
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    auto& dx = ctx.acc(xp);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += (*g)[i];
  });
  return out;
}

/// Identity forward, zero backward: the result is a constant leaf.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return Tensor<T>::from_data(x.shape(), x.data());
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {

/// Softmax over the middle extent of a logical [outer, len, inner] view.
/// Max-subtracted; rejects non-finite inputs.
template <typename T>
void softmax_slices(const T* x, T* y, std::int64_t outer, std::int64_t len, std::int64_t inner,
                    const char* op) {
  bool bad = false;
#pragma omp parallel for schedule(static) reduction(|| : bad)
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const T* px = x + o * len * inner + in;
      T* py = y + o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t k = 0; k < len; ++k) {
        const T v = px[k * inner];
        if (!std::isfinite(v)) bad = true;
        if (v > mx) mx = v;
      }
      T z = T(0);
      for (std::int64_t k = 0; k < len; ++k) {
        const T e = std::exp(px[k * inner] - mx);
        py[k * inner] = e;
        z += e;
      }
      const T invz = T(1) / z;
      for (std::int64_t k = 0; k < len; ++k) py[k * inner] *= invz;
    }
  }
  if (bad) throw ValueError(std::string(op) + ": non-finite input");
}

/// dL/dx = y * (dL/dy - sum_k dL/dy_k * y_k) per slice.
template <typename T>
void softmax_slices_backward(const T* y, const T* gy, T* gx, std::int64_t outer, std::int64_t len,
                             std::int64_t inner) {
#pragma omp parallel for schedule(static)
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const T* py = y + o * len * inner + in;
      const T* pg = gy + o * len * inner + in;
      T* px = gx + o * len * inner + in;
      T dot = T(0);
      for (std::int64_t k = 0; k < len; ++k) dot += pg[k * inner] * py[k * inner];
      for (std::int64_t k = 0; k < len; ++k)
        px[k * inner] += py[k * inner] * (pg[k * inner] - dot);
    }
  }
}

}  // namespace detail

/// Softmax along `axis` of an arbitrary-rank tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::int64_t len = x.dim(axis);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  detail::softmax_slices(x.data().data(), out.data().data(), outer, len, inner, "softmax");
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    detail::softmax_slices_backward(op->value.data(), g->data(), ctx.acc(xp).data(), outer, len,
                                    inner);
  });
  return out;
}

/// Channel-wise softmax over the spatial grid: for every (n,c) the H*W cells
/// form a distribution.
template <typename T>
Tensor<T> spatial_softmax(const Tensor<T>& x) {
  detail::require_rank(x, 4, "spatial_softmax", "input");
  const std::int64_t outer = x.dim(0) * x.dim(1);
  const std::int64_t len = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  detail::softmax_slices(x.data().data(), out.data().data(), outer, len, 1, "spatial_softmax");
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    detail::softmax_slices_backward(op->value.data(), g->data(), ctx.acc(xp).data(), outer, len,
                                    1);
  });
  return out;
}

/// Divides each slice along `axis` by its sum. Input must be nonnegative with
/// positive slice sums (used to renormalize sigmoid-mode head outputs).
template <typename T>
Tensor<T> renormalize(const Tensor<T>& x, std::int64_t axis) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("renormalize: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::int64_t len = x.dim(axis);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    const T* xd = x.data().data();
    T* od = out.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t in = 0; in < inner; ++in) {
        const T* px = xd + o * len * inner + in;
        T* py = od + o * len * inner + in;
        T s = T(0);
        for (std::int64_t k = 0; k < len; ++k) {
          const T v = px[k * inner];
          if (v < T(0)) throw ValueError("renormalize: negative entry");
          s += v;
        }
        if (!(s > T(0))) throw ValueError("renormalize: slice sums to zero");
        const T inv = T(1) / s;
        for (std::int64_t k = 0; k < len; ++k) py[k * inner] = px[k * inner] * inv;
      }
  }
  auto xp = x.payload();
  auto op = out.payload();
  mark_recorded(out, {&x}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !xp->requires_grad) return;
    auto& dx = ctx.acc(xp);
    const T* xd = xp->value.data();
    const T* yd = op->value.data();
    const T* gd = g->data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        T s = T(0), dot = T(0);
        for (std::int64_t k = 0; k < len; ++k) {
          s += xd[base + k * inner];
          dot += gd[base + k * inner] * yd[base + k * inner];
        }
        const T inv = T(1) / s;
        for (std::int64_t k = 0; k < len; ++k)
          dx[static_cast<std::size_t>(base + k * inner)] += (gd[base + k * inner] - dot) * inv;
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Attention aggregation primitives
// ---------------------------------------------------------------------------

/// out[n,k,l] = sum_{x,y} mask[n,k,x,y] * maps[n,k,l,x,y].
template <typename T>
Tensor<T> weighted_spatial_sum(const Tensor<T>& mask, const Tensor<T>& maps) {
  detail::require_rank(mask, 4, "weighted_spatial_sum", "mask");
  detail::require_rank(maps, 5, "weighted_spatial_sum", "maps");
  const std::int64_t N = mask.dim(0), K = mask.dim(1), H = mask.dim(2), W = mask.dim(3);
  const std::int64_t L = maps.dim(2);
  if (maps.dim(0) != N || maps.dim(1) != K || maps.dim(3) != H || maps.dim(4) != W)
    throw ShapeError("weighted_spatial_sum: mask " + shape_str(mask.shape()) +
                     " is incompatible with maps " + shape_str(maps.shape()) +
                     " (axes 0,1 and spatial axes must match)");
  const std::int64_t P = H * W;
  Tensor<T> out = Tensor<T>::zeros({N, K, L});
  {
    const T* md = mask.data().data();
    const T* pd = maps.data().data();
    T* od = out.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t nk = 0; nk < N * K; ++nk) {
      const T* m = md + nk * P;
      for (std::int64_t l = 0; l < L; ++l) {
        const T* p = pd + (nk * L + l) * P;
        T s = T(0);
        for (std::int64_t i = 0; i < P; ++i) s += m[i] * p[i];
        od[nk * L + l] = s;
      }
    }
  }
  auto mp = mask.payload();
  auto pp = maps.payload();
  auto op = out.payload();
  mark_recorded(out, {&mask, &maps}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g) return;
    const T* gd = g->data();
    if (mp->requires_grad) {
      auto& dm = ctx.acc(mp);
#pragma omp parallel for schedule(static)
      for (std::int64_t nk = 0; nk < N * K; ++nk) {
        T* q = dm.data() + nk * P;
        for (std::int64_t l = 0; l < L; ++l) {
          const T gv = gd[nk * L + l];
          const T* p = pp->value.data() + (nk * L + l) * P;
          for (std::int64_t i = 0; i < P; ++i) q[i] += gv * p[i];
        }
      }
    }
    if (pp->requires_grad) {
      auto& dp = ctx.acc(pp);
#pragma omp parallel for schedule(static)
      for (std::int64_t nk = 0; nk < N * K; ++nk) {
        const T* m = mp->value.data() + nk * P;
        for (std::int64_t l = 0; l < L; ++l) {
          const T gv = gd[nk * L + l];
          T* q = dp.data() + (nk * L + l) * P;
          for (std::int64_t i = 0; i < P; ++i) q[i] += gv * m[i];
        }
      }
    }
  });
  return out;
}

/// Stacks G tensors of shape [N,L] into [N,G,L].
template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("stack_rows: empty input list");
  const std::int64_t G = static_cast<std::int64_t>(parts.size());
  detail::require_rank(parts[0], 2, "stack_rows", "part");
  const std::int64_t N = parts[0].dim(0), L = parts[0].dim(1);
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "stack_rows", "part");
    if (p.dim(0) != N || p.dim(1) != L)
      throw ShapeError("stack_rows: mismatched part shape " + shape_str(p.shape()) + " vs " +
                       shape_str(parts[0].shape()));
  }
  Tensor<T> out = Tensor<T>::zeros({N, G, L});
  for (std::int64_t g = 0; g < G; ++g) {
    const T* src = parts[static_cast<std::size_t>(g)].data().data();
    T* dst = out.data().data();
    for (std::int64_t n = 0; n < N; ++n)
      std::copy(src + n * L, src + (n + 1) * L, dst + (n * G + g) * L);
  }
  std::vector<std::shared_ptr<TensorPayload<T>>> pls;
  pls.reserve(parts.size());
  for (const auto& p : parts) pls.push_back(p.payload());
  auto op = out.payload();
  Tape<T>* tape = Tape<T>::active();
  bool needs = false;
  for (const auto& p : parts)
    if (p.requires_grad()) needs = true;
  if (tape && needs) {
    out.set_requires_grad(true);
    op->tape = tape;
    op->step = tape->record([=](BackwardCtx<T>& ctx) {
      const std::vector<T>* gr = ctx.incoming(op);
      if (!gr) return;
      for (std::int64_t g = 0; g < G; ++g) {
        auto& pl = pls[static_cast<std::size_t>(g)];
        if (!pl->requires_grad) continue;
        auto& d = ctx.acc(pl);
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t l = 0; l < L; ++l)
            d[static_cast<std::size_t>(n * L + l)] += (*gr)[static_cast<std::size_t>((n * G + g) * L + l)];
      }
    });
  }
  return out;
}

/// Convex mixture of G stacked distributions: out[n,l] = sum_g w[n,g] * comps[n,g,l].
template <typename T>
Tensor<T> mix_distributions(const Tensor<T>& weights, const Tensor<T>& comps) {
  detail::require_rank(weights, 2, "mix_distributions", "weights");
  detail::require_rank(comps, 3, "mix_distributions", "components");
  const std::int64_t N = comps.dim(0), G = comps.dim(1), L = comps.dim(2);
  if (weights.dim(0) != N || weights.dim(1) != G)
    throw ShapeError("mix_distributions: weights " + shape_str(weights.shape()) +
                     " do not match components " + shape_str(comps.shape()) +
                     " (want [" + std::to_string(N) + "," + std::to_string(G) + "])");
  Tensor<T> out = Tensor<T>::zeros({N, L});
  {
    const T* wd = weights.data().data();
    const T* cd = comps.data().data();
    T* od = out.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
      T* o = od + n * L;
      for (std::int64_t g = 0; g < G; ++g) {
        const T wv = wd[n * G + g];
        const T* c = cd + (n * G + g) * L;
        for (std::int64_t l = 0; l < L; ++l) o[l] += wv * c[l];
      }
    }
  }
  auto wp = weights.payload();
  auto cp = comps.payload();
  auto op = out.payload();
  mark_recorded(out, {&weights, &comps}, [=](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g) return;
    const T* gd = g->data();
    if (wp->requires_grad) {
      auto& dw = ctx.acc(wp);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t gi = 0; gi < G; ++gi) {
          const T* c = cp->value.data() + (n * G + gi) * L;
          T s = T(0);
          for (std::int64_t l = 0; l < L; ++l) s += c[l] * gd[n * L + l];
          dw[static_cast<std::size_t>(n * G + gi)] += s;
        }
    }
    if (cp->requires_grad) {
      auto& dc = ctx.acc(cp);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t gi = 0; gi < G; ++gi) {
          const T wv = wp->value[static_cast<std::size_t>(n * G + gi)];
          T* q = dc.data() + (n * G + gi) * L;
          for (std::int64_t l = 0; l < L; ++l) q[l] += wv * gd[n * L + l];
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of probability rows. Each row of pred[N,L]
/// must already sum to 1 within 1e-4. log is floored at 1e-12.
template <typename T>
Tensor<T> nll_from_probs(const Tensor<T>& pred, std::span<const int> targets) {
  detail::require_rank(pred, 2, "nll_from_probs", "pred");
  const std::int64_t N = pred.dim(0), L = pred.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != N)
    throw ShapeError("nll_from_probs: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(N) + " rows");
  constexpr T kFloor = T(1e-12);
  const T* pd = pred.data().data();
  double loss = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    double s = 0.0;
    for (std::int64_t l = 0; l < L; ++l) s += static_cast<double>(pd[n * L + l]);
    if (std::abs(s - 1.0) > 1e-4)
      throw ValueError("nll_from_probs: row " + std::to_string(n) + " sums to " +
                       std::to_string(s) + ", expected 1");
    const int t = targets[static_cast<std::size_t>(n)];
    if (t < 0 || t >= L)
      throw ValueError("nll_from_probs: target " + std::to_string(t) + " out of range for " +
                       std::to_string(L) + " classes");
    loss -= std::log(std::max(static_cast<double>(pd[n * L + t]), static_cast<double>(kFloor)));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(N)));
  auto pp = pred.payload();
  auto op = out.payload();
  std::vector<int> tgt(targets.begin(), targets.end());
  mark_recorded(out, {&pred}, [=, tgt = std::move(tgt)](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !pp->requires_grad) return;
    auto& dp = ctx.acc(pp);
    const T gv = (*g)[0] / static_cast<T>(N);
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t i = n * L + tgt[static_cast<std::size_t>(n)];
      dp[static_cast<std::size_t>(i)] -= gv / std::max(pp->value[static_cast<std::size_t>(i)], kFloor);
    }
  });
  return out;
}

}  // namespace gattn
