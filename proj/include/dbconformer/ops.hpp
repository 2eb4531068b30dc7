#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dbconformer/rng.hpp"
#include "dbconformer/tensor.hpp"

namespace dbc {

namespace fault {
/// Test-only fault injection: scales the GELU backward rule. Must stay 1.0
/// outside of mutation tests.
inline thread_local double gelu_backward_scale = 1.0;
}  // namespace fault

namespace ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using CMapV = Eigen::Map<const Eigen::VectorXd>;

inline CMapM cmat(const double* p, std::size_t r, std::size_t c) {
  return CMapM(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MapM mat(double* p, std::size_t r, std::size_t c) {
  return MapM(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline CMapV cvec(const double* p, std::size_t n) { return CMapV(p, static_cast<Eigen::Index>(n)); }
inline MapV vec(double* p, std::size_t n) { return MapV(p, static_cast<Eigen::Index>(n)); }

template <typename F>
void record(const char* op, Tensor& out, F&& backward) {
  out.set_requires_grad(true);
  Graph::active()->record(op, std::forward<F>(backward));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

}  // namespace detail

using dbc::detail::needs_tape;
using dbc::detail::wants_grad;

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product of a [m, k] and b [k, n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  detail::mat(out.ptr(), m, n).noalias() = detail::cmat(a.ptr(), m, k) * detail::cmat(b.ptr(), k, n);
  if (needs_tape(a, b)) {
    detail::record("matmul", out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      auto g = detail::cmat(out.grad().data(), m, n);
      if (wants_grad(a)) detail::mat(a.grad().data(), m, k).noalias() += g * detail::cmat(b.ptr(), k, n).transpose();
      if (wants_grad(b)) detail::mat(b.grad().data(), k, n).noalias() += detail::cmat(a.ptr(), m, k).transpose() * g;
    });
  }
  return out;
}

/// Batched product over the leading axis: a [bt, m, k] times b [bt, k, n]
/// (or b [bt, n, k] transposed when `transpose_b`).
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  detail::require_rank(a, 3, "bmm");
  detail::require_rank(b, 3, "bmm");
  const std::size_t bt = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != bt || bk != k) {
    throw DimensionError("bmm: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()) +
                         (transpose_b ? " (transposed)" : ""));
  }
  Tensor out({bt, m, n});
  for (std::size_t i = 0; i < bt; ++i) {
    auto A = detail::cmat(a.ptr() + i * m * k, m, k);
    auto C = detail::mat(out.ptr() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * detail::cmat(b.ptr() + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * detail::cmat(b.ptr() + i * k * n, k, n);
    }
  }
  if (needs_tape(a, b)) {
    detail::record("bmm", out, [a, b, out, bt, m, k, n, transpose_b]() mutable {
      if (!out.has_grad()) return;
      const bool ga = wants_grad(a), gb = wants_grad(b);
      for (std::size_t i = 0; i < bt; ++i) {
        auto G = detail::cmat(out.grad().data() + i * m * n, m, n);
        auto A = detail::cmat(a.ptr() + i * m * k, m, k);
        if (transpose_b) {
          auto B = detail::cmat(b.ptr() + i * n * k, n, k);
          if (ga) detail::mat(a.grad().data() + i * m * k, m, k).noalias() += G * B;
          if (gb) detail::mat(b.grad().data() + i * n * k, n, k).noalias() += G.transpose() * A;
        } else {
          auto B = detail::cmat(b.ptr() + i * k * n, k, n);
          if (ga) detail::mat(a.grad().data() + i * m * k, m, k).noalias() += G * B.transpose();
          if (gb) detail::mat(b.grad().data() + i * k * n, k, n).noalias() += A.transpose() * G;
        }
      }
    });
  }
  return out;
}

/// y = x Wᵀ + b over the last axis. x [..., in], weight [out, in], bias [out] or undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  detail::require_rank(weight, 2, "linear weight");
  const std::size_t in = weight.dim(1), outf = weight.dim(0);
  if (x.rank() < 1 || x.shape().back() != in) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf)) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  Tensor out(out_shape);
  auto Y = detail::mat(out.ptr(), rows, outf);
  Y.noalias() = detail::cmat(x.ptr(), rows, in) * detail::cmat(weight.ptr(), outf, in).transpose();
  if (bias.defined()) Y.rowwise() += detail::cvec(bias.ptr(), outf).transpose();
  if (needs_tape(x, weight, bias)) {
    detail::record("linear", out, [x, weight, bias, out, rows, in, outf]() mutable {
      if (!out.has_grad()) return;
      auto G = detail::cmat(out.grad().data(), rows, outf);
      if (wants_grad(x)) {
        detail::mat(x.grad().data(), rows, in).noalias() += G * detail::cmat(weight.ptr(), outf, in);
      }
      if (wants_grad(weight)) {
        detail::mat(weight.grad().data(), outf, in).noalias() += G.transpose() * detail::cmat(x.ptr(), rows, in);
      }
      if (wants_grad(bias)) detail::vec(bias.grad().data(), outf) += G.colwise().sum().transpose();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling

struct Conv1dOptions {
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;

  static Conv1dOptions padded(std::size_t p, std::size_t groups = 1, std::size_t stride = 1) {
    return {groups, stride, p, p};
  }
  /// Length-preserving padding for stride 1; the extra pad of even kernels goes right.
  static Conv1dOptions same(std::size_t kernel, std::size_t groups = 1) {
    const std::size_t total = kernel - 1;
    return {groups, 1, total / 2, total - total / 2};
  }
};

/// Grouped 1-D convolution (cross-correlation). x [B, Cin, T], w [Cout, Cin/G, K],
/// bias [Cout] or undefined. Output [B, Cout, floor((T + pads - K)/stride) + 1].
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias = {}, Conv1dOptions opt = {}) {
  detail::require_rank(x, 3, "conv1d input");
  detail::require_rank(w, 3, "conv1d weight");
  const std::size_t B = x.dim(0), Cin = x.dim(1), T = x.dim(2);
  const std::size_t Cout = w.dim(0), cpg = w.dim(1), K = w.dim(2);
  const std::size_t G = opt.groups, s = opt.stride, pl = opt.pad_left;
  if (G == 0 || s == 0) throw DimensionError("conv1d: groups and stride must be positive");
  if (Cin % G != 0 || Cout % G != 0) {
    throw DimensionError("conv1d: grouping error, channels in=" + std::to_string(Cin) + " out=" +
                         std::to_string(Cout) + " not divisible by groups=" + std::to_string(G));
  }
  if (cpg != Cin / G) {
    throw DimensionError("conv1d: weight " + to_string(w.shape()) + " expects " + std::to_string(cpg) +
                         " input channels per group, input " + to_string(x.shape()) + " gives " +
                         std::to_string(Cin / G));
  }
  const std::size_t padded = T + opt.pad_left + opt.pad_right;
  if (K > padded) {
    throw DimensionError("conv1d: kernel too large, K=" + std::to_string(K) + " exceeds padded length " +
                         std::to_string(padded));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw DimensionError("conv1d: bias " + to_string(bias.shape()) + " does not match Cout=" + std::to_string(Cout));
  }
  const std::size_t To = (padded - K) / s + 1;
  const std::size_t opg = Cout / G;

  // Output positions t with 0 <= t*s + k - pl < T form one contiguous range per tap.
  auto range = [=](std::size_t k) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pl);
    std::ptrdiff_t lo = 0;
    if (off < 0) lo = (-off + static_cast<std::ptrdiff_t>(s) - 1) / static_cast<std::ptrdiff_t>(s);
    const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(T) - 1 - off;
    std::ptrdiff_t hi = last < 0 ? 0 : last / static_cast<std::ptrdiff_t>(s) + 1;
    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(To));
    return std::pair<std::ptrdiff_t, std::ptrdiff_t>{lo, std::max(lo, hi)};
  };

  Tensor out({B, Cout, To});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Cout; ++o) {
      double* y = out.ptr() + (b * Cout + o) * To;
      if (bias.defined()) std::fill(y, y + To, bias[o]);
      const std::size_t g = o / opg;
      for (std::size_t ci = 0; ci < cpg; ++ci) {
        const double* xin = x.ptr() + (b * Cin + g * cpg + ci) * T;
        const double* wk = w.ptr() + (o * cpg + ci) * K;
        for (std::size_t k = 0; k < K; ++k) {
          const double wv = wk[k];
          const auto [lo, hi] = range(k);
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pl);
          if (s == 1) {
            if (hi > lo) {
              const auto n = static_cast<std::size_t>(hi - lo);
              detail::vec(y + lo, n) += wv * detail::cvec(xin + (lo + off), n);
            }
          } else {
            for (std::ptrdiff_t t = lo; t < hi; ++t) y[t] += wv * xin[t * static_cast<std::ptrdiff_t>(s) + off];
          }
        }
      }
    }
  }

  if (needs_tape(x, w, bias)) {
    detail::record("conv1d", out, [=]() mutable {
      if (!out.has_grad()) return;
      const bool gx = wants_grad(x), gw = wants_grad(w), gb = wants_grad(bias);
      const double* dy_all = out.grad().data();
      double* dx_all = gx ? x.grad().data() : nullptr;
      double* dw_all = gw ? w.grad().data() : nullptr;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t o = 0; o < Cout; ++o) {
          const double* dy = dy_all + (b * Cout + o) * To;
          if (gb) bias.grad()[o] += detail::cvec(dy, To).sum();
          const std::size_t g = o / opg;
          for (std::size_t ci = 0; ci < cpg; ++ci) {
            const std::size_t xoff = (b * Cin + g * cpg + ci) * T;
            const double* xin = x.ptr() + xoff;
            const double* wk = w.ptr() + (o * cpg + ci) * K;
            for (std::size_t k = 0; k < K; ++k) {
              const auto [lo, hi] = range(k);
              if (hi <= lo) continue;
              const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pl);
              const std::size_t n = static_cast<std::size_t>(hi - lo);
              if (s == 1) {
                if (gw) dw_all[(o * cpg + ci) * K + k] += detail::cvec(dy + lo, n).dot(detail::cvec(xin + lo + off, n));
                if (gx) {
                  detail::vec(dx_all + xoff + (lo + off), n) += wk[k] * detail::cvec(dy + lo, n);
                }
              } else {
                for (std::ptrdiff_t t = lo; t < hi; ++t) {
                  const std::ptrdiff_t pos = t * static_cast<std::ptrdiff_t>(s) + off;
                  if (gw) dw_all[(o * cpg + ci) * K + k] += dy[t] * xin[pos];
                  if (gx) dx_all[xoff + pos] += wk[k] * dy[t];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

/// Single-input-channel valid convolution followed by a global mean over time,
/// fused: x [N, 1, T], w [Cout, 1, K], bias [Cout] -> [N, Cout]. Uses
/// mean_t conv(x)[t] = sum_k w[k] * mean(x[k .. k+T'-1]) with T' = T-K+1, which
/// equals conv1d followed by a mean over the output axis.
inline Tensor conv1d_global_mean(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  detail::require_rank(x, 3, "conv1d_global_mean input");
  detail::require_rank(w, 3, "conv1d_global_mean weight");
  const std::size_t N = x.dim(0), T = x.dim(2), Cout = w.dim(0), K = w.dim(2);
  if (x.dim(1) != 1 || w.dim(1) != 1) {
    throw DimensionError("conv1d_global_mean: expects one input channel, got input " + to_string(x.shape()) +
                         " and weight " + to_string(w.shape()));
  }
  if (K > T) {
    throw DimensionError("conv1d_global_mean: kernel too large, K=" + std::to_string(K) + " exceeds T=" +
                         std::to_string(T));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw DimensionError("conv1d_global_mean: bias " + to_string(bias.shape()) + " does not match Cout");
  }
  const std::size_t Tv = T - K + 1;
  // Window means m[n, k] of x over [k, k + Tv).
  Buffer means(N * K);
  for (std::size_t n = 0; n < N; ++n) {
    const double* xn = x.ptr() + n * T;
    double window = detail::cvec(xn, Tv).sum();
    for (std::size_t k = 0; k < K; ++k) {
      if (k > 0) window += xn[k + Tv - 1] - xn[k - 1];
      means[n * K + k] = window / static_cast<double>(Tv);
    }
  }
  Tensor out({N, Cout});
  auto Y = detail::mat(out.ptr(), N, Cout);
  Y.noalias() = detail::cmat(means.data(), N, K) * detail::cmat(w.ptr(), Cout, K).transpose();
  if (bias.defined()) Y.rowwise() += detail::cvec(bias.ptr(), Cout).transpose();
  if (needs_tape(x, w, bias)) {
    detail::record("conv1d_global_mean", out, [=, means = std::move(means)]() mutable {
      if (!out.has_grad()) return;
      auto G = detail::cmat(out.grad().data(), N, Cout);
      if (wants_grad(w)) detail::mat(w.grad().data(), Cout, K).noalias() += G.transpose() * detail::cmat(means.data(), N, K);
      if (wants_grad(bias)) detail::vec(bias.grad().data(), Cout) += G.colwise().sum().transpose();
      if (wants_grad(x)) {
        detail::RowMat gm = G * detail::cmat(w.ptr(), Cout, K);  // dL/dm [N, K]
        double* dx = x.grad().data();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t k = 0; k < K; ++k) {
            const double v = gm(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) / static_cast<double>(Tv);
            double* d = dx + n * T + k;
            for (std::size_t t = 0; t < Tv; ++t) d[t] += v;
          }
        }
      }
    });
  }
  return out;
}

/// Non-overlapping average pooling over the last axis; x [B, F, T] -> [B, F, T/W].
/// A trailing remainder shorter than the window is dropped.
inline Tensor avgpool1d(const Tensor& x, std::size_t window) {
  detail::require_rank(x, 3, "avgpool1d");
  const std::size_t B = x.dim(0), F = x.dim(1), T = x.dim(2);
  if (window == 0 || T < window) {
    throw DimensionError("avgpool1d: window " + std::to_string(window) + " does not fit length " + std::to_string(T));
  }
  const std::size_t P = T / window;
  Tensor out({B, F, P});
  const double inv = 1.0 / static_cast<double>(window);
  for (std::size_t r = 0; r < B * F; ++r) {
    for (std::size_t p = 0; p < P; ++p) {
      out[r * P + p] = detail::cvec(x.ptr() + r * T + p * window, window).sum() * inv;
    }
  }
  if (needs_tape(x)) {
    detail::record("avgpool1d", out, [=]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t r = 0; r < B * F; ++r) {
        for (std::size_t p = 0; p < P; ++p) {
          const double g = dy[r * P + p] * inv;
          for (std::size_t t = 0; t < window; ++t) dx[r * T + p * window + t] += g;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Running statistics of a batch-norm layer (not trainable).
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;

  explicit BatchNormStats(std::size_t features = 1)
      : running_mean({features}, 0.0), running_var({features}, 1.0) {}
};

enum class Mode { train, eval };

/// Batch normalization over (batch, time) per feature. x [B, F, T] or [B, F].
/// Train mode uses batch statistics (biased variance) and updates the running
/// estimates with the unbiased variance; eval mode uses the running estimates.
inline Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                          Mode mode, double eps = 1e-5, double momentum = 0.1) {
  if (x.rank() != 2 && x.rank() != 3) throw DimensionError("batchnorm1d: expected rank 2 or 3, got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), F = x.dim(1), T = x.rank() == 3 ? x.dim(2) : 1;
  if (gamma.size() != F || beta.size() != F || stats.running_mean.size() != F) {
    throw DimensionError("batchnorm1d: affine/statistics size does not match " + std::to_string(F) + " features");
  }
  const std::size_t n = B * T;
  const bool train = mode == Mode::train;
  if (train && n < 2) {
    throw DimensionError("batchnorm1d: batch too small, need batch*time >= 2 in train mode, got " + std::to_string(n));
  }
  Buffer mean(F), inv_std(F);
  for (std::size_t f = 0; f < F; ++f) {
    if (train) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) s += detail::cvec(x.ptr() + (b * F + f) * T, T).sum();
      const double mu = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        ss += (detail::cvec(x.ptr() + (b * F + f) * T, T).array() - mu).square().sum();
      }
      const double var = ss / static_cast<double>(n);
      mean[f] = mu;
      inv_std[f] = 1.0 / std::sqrt(var + eps);
      stats.running_mean[f] = (1.0 - momentum) * stats.running_mean[f] + momentum * mu;
      stats.running_var[f] = (1.0 - momentum) * stats.running_var[f] +
                             momentum * var * static_cast<double>(n) / static_cast<double>(n - 1);
    } else {
      mean[f] = stats.running_mean[f];
      inv_std[f] = 1.0 / std::sqrt(stats.running_var[f] + eps);
    }
  }
  Tensor out(x.shape());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) {
      const double* xi = x.ptr() + (b * F + f) * T;
      double* yi = out.ptr() + (b * F + f) * T;
      const double a = gamma[f] * inv_std[f];
      const double c = beta[f] - a * mean[f];
      for (std::size_t t = 0; t < T; ++t) yi[t] = a * xi[t] + c;
    }
  }
  if (needs_tape(x, gamma, beta)) {
    detail::record("batchnorm1d", out, [=]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      const bool gx = wants_grad(x), gg = wants_grad(gamma), gbt = wants_grad(beta);
      for (std::size_t f = 0; f < F; ++f) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t o = (b * F + f) * T;
          for (std::size_t t = 0; t < T; ++t) {
            const double xhat = (x[o + t] - mean[f]) * inv_std[f];
            sum_dy += dy[o + t];
            sum_dy_xhat += dy[o + t] * xhat;
          }
        }
        if (gg) gamma.grad()[f] += sum_dy_xhat;
        if (gbt) beta.grad()[f] += sum_dy;
        if (!gx) continue;
        auto dx = x.grad();
        const double gi = gamma[f] * inv_std[f];
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t o = (b * F + f) * T;
          for (std::size_t t = 0; t < T; ++t) {
            if (train) {
              const double xhat = (x[o + t] - mean[f]) * inv_std[f];
              dx[o + t] += gi * (dy[o + t] - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
            } else {
              dx[o + t] += gi * dy[o + t];
            }
          }
        }
      }
    });
  }
  return out;
}

/// Layer normalization over the last axis.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t D = x.shape().back();
  if (gamma.size() != D || beta.size() != D) {
    throw DimensionError("layernorm: affine size does not match last axis of " + to_string(x.shape()));
  }
  const std::size_t rows = x.size() / D;
  Tensor out(x.shape());
  Buffer xhat(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = detail::cvec(x.ptr() + r * D, D);
    const double mu = xr.mean();
    const double var = (xr.array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t d = 0; d < D; ++d) {
      xhat[r * D + d] = (x[r * D + d] - mu) * inv_std[r];
      out[r * D + d] = gamma[d] * xhat[r * D + d] + beta[d];
    }
  }
  if (needs_tape(x, gamma, beta)) {
    detail::record("layernorm", out, [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      const bool gx = wants_grad(x);
      for (std::size_t r = 0; r < rows; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
          const double g = dy[r * D + d];
          if (wants_grad(gamma)) gamma.grad()[d] += g * xhat[r * D + d];
          if (wants_grad(beta)) beta.grad()[d] += g;
          const double dxh = g * gamma[d];
          s1 += dxh;
          s2 += dxh * xhat[r * D + d];
        }
        if (!gx) continue;
        auto dx = x.grad();
        const double invD = 1.0 / static_cast<double>(D);
        for (std::size_t d = 0; d < D; ++d) {
          const double dxh = dy[r * D + d] * gamma[d];
          dx[r * D + d] += inv_std[r] * (dxh - invD * s1 - xhat[r * D + d] * invD * s2);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

enum class Activation { gelu, elu, tanh };


/// GELU uses the exact Gaussian-CDF form; ELU uses alpha = 1.
inline Tensor activation(const Tensor& x, Activation kind) {
  Tensor out(x.shape());
  const std::size_t n = x.size();
  const double* xs = x.ptr();
  double* ys = out.ptr();
  Buffer cdf;
  switch (kind) {
    case Activation::gelu:
      cdf.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        cdf[i] = 0.5 * (1.0 + std::erf(xs[i] * (std::numbers::sqrt2 / 2.0)));
        ys[i] = xs[i] * cdf[i];
      }
      break;
    case Activation::elu:
      for (std::size_t i = 0; i < n; ++i) ys[i] = xs[i] > 0.0 ? xs[i] : std::expm1(xs[i]);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) ys[i] = std::tanh(xs[i]);
      break;
  }
  if (needs_tape(x)) {
    const char* name = kind == Activation::gelu ? "gelu" : kind == Activation::elu ? "elu" : "tanh";
    detail::record(name, out, [=, cdf = std::move(cdf)]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto dx = x.grad();
      switch (kind) {
        case Activation::gelu: {
          const double scale = fault::gelu_backward_scale;
          auto v = detail::cvec(x.ptr(), n).array();
          auto pdf = (-0.5 * v * v).exp() * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
          detail::vec(dx.data(), n).array() +=
              detail::cvec(dy.data(), n).array() * (detail::cvec(cdf.data(), n).array() + v * pdf) * scale;
          break;
        }
        case Activation::elu:
          for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * (x[i] > 0.0 ? 1.0 : out[i] + 1.0);
          break;
        case Activation::tanh:
          for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * (1.0 - out[i] * out[i]);
          break;
      }
    });
  }
  return out;
}

inline Tensor gelu(const Tensor& x) { return activation(x, Activation::gelu); }
inline Tensor elu(const Tensor& x) { return activation(x, Activation::elu); }
inline Tensor tanh(const Tensor& x) { return activation(x, Activation::tanh); }

/// Inverted dropout: identity in eval mode or when p == 0; in train mode each
/// element is kept with probability 1-p and scaled by 1/(1-p).
inline Tensor dropout(const Tensor& x, double p, Mode mode, Rng* rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  if (mode == Mode::eval || p == 0.0) return x;
  if (!rng) throw ContractError("dropout in train mode needs a random stream");
  const double keep = 1.0 - p;
  const double scale = 1.0 / keep;
  Buffer mask(x.size());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng->uniform() < keep ? scale : 0.0;
    out[i] = x[i] * mask[i];
  }
  if (needs_tape(x)) {
    detail::record("dropout", out, [=, mask = std::move(mask)]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < mask.size(); ++i) dx[i] += dy[i] * mask[i];
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  detail::vec(out.ptr(), out.size()) = detail::cvec(a.ptr(), a.size()) + detail::cvec(b.ptr(), b.size());
  if (needs_tape(a, b)) {
    detail::record("add", out, [=]() mutable {
      if (!out.has_grad()) return;
      auto g = detail::cvec(out.grad().data(), out.size());
      if (wants_grad(a)) detail::vec(a.grad().data(), a.size()) += g;
      if (wants_grad(b)) detail::vec(b.grad().data(), b.size()) += g;
    });
  }
  return out;
}

/// x + b where b's shape equals the trailing dimensions of x (b repeats over
/// the leading ones), e.g. tokens [B, N, D] plus positional table [N, D].
inline Tensor add_broadcast(const Tensor& x, const Tensor& b) {
  const std::size_t r = b.rank();
  if (r > x.rank() || !std::equal(b.shape().begin(), b.shape().end(), x.shape().end() - static_cast<std::ptrdiff_t>(r))) {
    throw DimensionError("add_broadcast: " + to_string(b.shape()) + " is not a suffix of " + to_string(x.shape()));
  }
  const std::size_t inner = b.size(), outer = x.size() / inner;
  Tensor out(x.shape());
  detail::mat(out.ptr(), outer, inner) =
      detail::cmat(x.ptr(), outer, inner).rowwise() + detail::cvec(b.ptr(), inner).transpose();
  if (needs_tape(x, b)) {
    detail::record("add_broadcast", out, [=]() mutable {
      if (!out.has_grad()) return;
      auto G = detail::cmat(out.grad().data(), outer, inner);
      if (wants_grad(x)) detail::mat(x.grad().data(), outer, inner) += G;
      if (wants_grad(b)) detail::vec(b.grad().data(), inner) += G.colwise().sum().transpose();
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  if (needs_tape(a, b)) {
    detail::record("mul", out, [=]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      // Separate loops: when a and b alias, both contributions accumulate.
      if (wants_grad(a)) {
        auto da = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b[i];
      }
      if (wants_grad(b)) {
        auto db = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& x, double s) {
  Tensor out(x.shape());
  detail::vec(out.ptr(), out.size()) = detail::cvec(x.ptr(), x.size()) * s;
  if (needs_tape(x)) {
    detail::record("scale", out, [=]() mutable {
      if (!out.has_grad()) return;
      detail::vec(x.grad().data(), x.size()) += detail::cvec(out.grad().data(), out.size()) * s;
    });
  }
  return out;
}

/// Sum of all elements, shape {1}.
inline Tensor sum(const Tensor& x) {
  Tensor out = Tensor::scalar(detail::cvec(x.ptr(), x.size()).sum());
  if (needs_tape(x)) {
    detail::record("sum", out, [=]() mutable {
      if (!out.has_grad()) return;
      detail::vec(x.grad().data(), x.size()).array() += out.grad()[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor out(std::move(shape), Buffer(x.data().begin(), x.data().end()));
  if (needs_tape(x)) {
    detail::record("reshape", out, [=]() mutable {
      if (!out.has_grad()) return;
      detail::vec(x.grad().data(), x.size()) += detail::cvec(out.grad().data(), out.size());
    });
  }
  return out;
}

/// Axis permutation: output axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch for " + to_string(x.shape()));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation for " + to_string(x.shape()));
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * x.dim(i + 1);
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(perm[i]);
    src_stride[i] = in_stride[perm[i]];
  }
  // Gather map: out flat index -> source flat index.
  std::vector<std::size_t> src(x.size());
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    src[flat] = off;
    for (std::size_t a = r; a-- > 0;) {
      ++idx[a];
      off += src_stride[a];
      if (idx[a] < out_shape[a]) break;
      off -= src_stride[a] * idx[a];
      idx[a] = 0;
    }
  }
  Tensor out(out_shape);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x[src[i]];
  if (needs_tape(x)) {
    detail::record("permute", out, [=, src = std::move(src)]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < src.size(); ++i) dx[src[i]] += dy[i];
    });
  }
  return out;
}

/// Mean over one axis, which is removed (a rank-1 input yields shape {1}).
inline Tensor mean(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("mean: axis out of range for " + to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  Tensor out(shape);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    auto acc = detail::vec(out.ptr() + o * inner, inner);
    for (std::size_t j = 0; j < n; ++j) acc += detail::cvec(x.ptr() + (o * n + j) * inner, inner);
    acc *= inv;
  }
  if (needs_tape(x)) {
    detail::record("mean", out, [=]() mutable {
      if (!out.has_grad()) return;
      for (std::size_t o = 0; o < outer; ++o) {
        auto g = detail::cvec(out.grad().data() + o * inner, inner);
        for (std::size_t j = 0; j < n; ++j) detail::vec(x.grad().data() + (o * n + j) * inner, inner) += g * inv;
      }
    });
  }
  return out;
}

/// Concatenation along the last axis; leading dimensions must agree.
inline Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw DimensionError("concat: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t wa = a.shape().back(), wb = b.shape().back(), rows = a.size() / wa;
  Shape shape = a.shape();
  shape.back() = wa + wb;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.ptr() + r * wa, wa, out.ptr() + r * (wa + wb));
    std::copy_n(b.ptr() + r * wb, wb, out.ptr() + r * (wa + wb) + wa);
  }
  if (needs_tape(a, b)) {
    detail::record("concat", out, [=]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (wants_grad(a)) {
          auto da = a.grad();
          for (std::size_t i = 0; i < wa; ++i) da[r * wa + i] += dy[r * (wa + wb) + i];
        }
        if (wants_grad(b)) {
          auto db = b.grad();
          for (std::size_t i = 0; i < wb; ++i) db[r * wb + i] += dy[r * (wa + wb) + wa + i];
        }
      }
    });
  }
  return out;
}

/// Softmax along `axis`, max-subtracted for stability.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  if (needs_tape(x)) {
    detail::record("softmax", out, [=]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += dy[base + j * inner] * out[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            dx[base + j * inner] += out[base + j * inner] * (dy[base + j * inner] - dot);
          }
        }
      }
    });
  }
  return out;
}

/// Mean over the batch of -log softmax(logits)[label]. logits [B, Nc].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t B = logits.dim(0), Nc = logits.dim(1);
  if (labels.size() != B) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= Nc) {
      throw LabelError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(Nc) + ")");
    }
  }
  Buffer prob(B * Nc);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = logits.ptr() + b * Nc;
    const double mx = *std::max_element(row, row + Nc);
    double z = 0.0;
    for (std::size_t c = 0; c < Nc; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < Nc; ++c) prob[b * Nc + c] = std::exp(row[c] - lse);
    total += lse - row[labels[b]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));
  if (needs_tape(logits)) {
    std::vector<int> ys(labels.begin(), labels.end());
    detail::record("cross_entropy", out, [=, prob = std::move(prob), ys = std::move(ys)]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(B);
      auto dx = logits.grad();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < Nc; ++c) {
          dx[b * Nc + c] += g * (prob[b * Nc + c] - (static_cast<int>(c) == ys[b] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

}  // namespace ops
using ops::Mode;

}  // namespace dbc
