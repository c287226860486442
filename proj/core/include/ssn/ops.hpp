#pragma once

// Forward/backward kernels for every layer primitive. All sums run in
// ascending index order so results are reproducible run to run.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssn/tensor.hpp"

namespace ssn {

struct ConvGeometry {
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  int out_extent(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
  bool operator==(const ConvGeometry&) const = default;
};

namespace ops {

// ---------------------------------------------------------------------------
// Convolution. Weights are [out, in, kernel, kernel] in row-major order; a 1x1
// convolution therefore accepts a plain [out, in] matrix.

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, std::span<const T> weight, int out_channels,
                          std::span<const T> bias, const ConvGeometry& g) {
  const int in_channels = x.channels();
  const std::size_t expected = static_cast<std::size_t>(out_channels) * in_channels * g.kernel * g.kernel;
  if (weight.size() != expected) {
    throw DimensionError("conv weight input-channel axis: expected " + std::to_string(expected) +
                         " values for " + std::to_string(in_channels) + " input channels, got " +
                         std::to_string(weight.size()));
  }
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(out_channels)) {
    throw DimensionError("conv bias axis: expected " + std::to_string(out_channels) + ", got " +
                         std::to_string(bias.size()));
  }
  const int oh = g.out_extent(x.height());
  const int ow = g.out_extent(x.width());
  if (oh < 1 || ow < 1) throw DimensionError("conv spatial axis: input " + x.shape().str() + " too small");
  Tensor4<T> y(Shape4{x.batch(), out_channels, oh, ow});
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;

  if (g.kernel == 1 && g.stride == 1 && g.pad == 0) {
    for (int b = 0; b < x.batch(); ++b) {
      for (int o = 0; o < out_channels; ++o) {
        T* out = y.plane(b, o).data();
        const T init = bias.empty() ? T(0) : bias[o];
        for (std::size_t p = 0; p < out_plane; ++p) out[p] = init;
        for (int i = 0; i < in_channels; ++i) {
          const T w = weight[static_cast<std::size_t>(o) * in_channels + i];
          const T* in = x.plane(b, i).data();
          for (std::size_t p = 0; p < out_plane; ++p) out[p] += w * in[p];
        }
      }
    }
    return y;
  }

  const int k = g.kernel;
  const std::size_t rows = static_cast<std::size_t>(in_channels) * k * k;
  std::vector<T> col(rows * out_plane);
  for (int b = 0; b < x.batch(); ++b) {
    // im2col
    for (int i = 0; i < in_channels; ++i) {
      const T* in = x.plane(b, i).data();
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          T* dst = col.data() + ((static_cast<std::size_t>(i) * k + ky) * k + kx) * out_plane;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              dst[static_cast<std::size_t>(oy) * ow + ox] =
                  (iy >= 0 && iy < x.height() && ix >= 0 && ix < x.width())
                      ? in[static_cast<std::size_t>(iy) * x.width() + ix]
                      : T(0);
            }
          }
        }
      }
    }
    for (int o = 0; o < out_channels; ++o) {
      T* out = y.plane(b, o).data();
      const T init = bias.empty() ? T(0) : bias[o];
      for (std::size_t p = 0; p < out_plane; ++p) out[p] = init;
      const T* wrow = weight.data() + static_cast<std::size_t>(o) * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const T w = wrow[r];
        const T* src = col.data() + r * out_plane;
        for (std::size_t p = 0; p < out_plane; ++p) out[p] += w * src[p];
      }
    }
  }
  return y;
}

/// Accumulates into grad_x (if non-null), grad_w and grad_b (if non-empty).
template <typename T>
void conv2d_backward(const Tensor4<T>& x, std::span<const T> weight, const ConvGeometry& g,
                     const Tensor4<T>& gy, Tensor4<T>* grad_x, std::span<T> grad_w, std::span<T> grad_b) {
  const int in_channels = x.channels();
  const int out_channels = gy.channels();
  const int oh = gy.height();
  const int ow = gy.width();
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;

  if (!grad_b.empty()) {
    for (int b = 0; b < gy.batch(); ++b) {
      for (int o = 0; o < out_channels; ++o) {
        const T* g_out = gy.plane(b, o).data();
        T s = 0;
        for (std::size_t p = 0; p < out_plane; ++p) s += g_out[p];
        grad_b[o] += s;
      }
    }
  }

  if (g.kernel == 1 && g.stride == 1 && g.pad == 0) {
    for (int b = 0; b < x.batch(); ++b) {
      for (int o = 0; o < out_channels; ++o) {
        const T* g_out = gy.plane(b, o).data();
        for (int i = 0; i < in_channels; ++i) {
          const std::size_t wi = static_cast<std::size_t>(o) * in_channels + i;
          if (!grad_w.empty()) {
            const T* in = x.plane(b, i).data();
            T s = 0;
            for (std::size_t p = 0; p < out_plane; ++p) s += g_out[p] * in[p];
            grad_w[wi] += s;
          }
        }
      }
      if (grad_x) {
        for (int i = 0; i < in_channels; ++i) {
          T* g_in = grad_x->plane(b, i).data();
          for (int o = 0; o < out_channels; ++o) {
            const T w = weight[static_cast<std::size_t>(o) * in_channels + i];
            const T* g_out = gy.plane(b, o).data();
            for (std::size_t p = 0; p < out_plane; ++p) g_in[p] += w * g_out[p];
          }
        }
      }
    }
    return;
  }

  const int k = g.kernel;
  const std::size_t rows = static_cast<std::size_t>(in_channels) * k * k;
  std::vector<T> col(rows * out_plane);
  std::vector<T> gcol(rows * out_plane);
  for (int b = 0; b < x.batch(); ++b) {
    for (int i = 0; i < in_channels; ++i) {
      const T* in = x.plane(b, i).data();
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          T* dst = col.data() + ((static_cast<std::size_t>(i) * k + ky) * k + kx) * out_plane;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              dst[static_cast<std::size_t>(oy) * ow + ox] =
                  (iy >= 0 && iy < x.height() && ix >= 0 && ix < x.width())
                      ? in[static_cast<std::size_t>(iy) * x.width() + ix]
                      : T(0);
            }
          }
        }
      }
    }
    if (!grad_w.empty()) {
      for (int o = 0; o < out_channels; ++o) {
        const T* g_out = gy.plane(b, o).data();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* src = col.data() + r * out_plane;
          T s = 0;
          for (std::size_t p = 0; p < out_plane; ++p) s += g_out[p] * src[p];
          grad_w[static_cast<std::size_t>(o) * rows + r] += s;
        }
      }
    }
    if (grad_x) {
      std::fill(gcol.begin(), gcol.end(), T(0));
      for (std::size_t r = 0; r < rows; ++r) {
        T* dst = gcol.data() + r * out_plane;
        for (int o = 0; o < out_channels; ++o) {
          const T w = weight[static_cast<std::size_t>(o) * rows + r];
          const T* g_out = gy.plane(b, o).data();
          for (std::size_t p = 0; p < out_plane; ++p) dst[p] += w * g_out[p];
        }
      }
      // col2im
      for (int i = 0; i < in_channels; ++i) {
        T* g_in = grad_x->plane(b, i).data();
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const T* src = gcol.data() + ((static_cast<std::size_t>(i) * k + ky) * k + kx) * out_plane;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= x.height()) continue;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= x.width()) continue;
                g_in[static_cast<std::size_t>(iy) * x.width() + ix] += src[static_cast<std::size_t>(oy) * ow + ox];
              }
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Bilinear sampling with zero fill outside [0,H) x [0,W).

template <typename T>
T bilinear_sample(std::span<const T> plane, int height, int width, T x, T y) {
  const T fx0 = std::floor(x);
  const T fy0 = std::floor(y);
  const T ax = x - fx0;
  const T ay = y - fy0;
  // Far outside: avoid int overflow on huge coordinates.
  if (fx0 < T(-2) || fy0 < T(-2) || fx0 > T(width) || fy0 > T(height)) return T(0);
  const int x0 = static_cast<int>(fx0);
  const int y0 = static_cast<int>(fy0);
  auto at = [&](int yy, int xx) -> T {
    if (yy < 0 || yy >= height || xx < 0 || xx >= width) return T(0);
    return plane[static_cast<std::size_t>(yy) * width + xx];
  };
  return (T(1) - ax) * (T(1) - ay) * at(y0, x0) + ax * (T(1) - ay) * at(y0, x0 + 1) +
         (T(1) - ax) * ay * at(y0 + 1, x0) + ax * ay * at(y0 + 1, x0 + 1);
}

// ---------------------------------------------------------------------------
// Element-wise activations.

enum class Activation { kRelu, kSoftplus, kSigmoid };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kSoftplus: return "softplus";
    case Activation::kSigmoid: return "sigmoid";
  }
  return "?";
}

template <typename T>
T sigmoid(T v) {
  if (v >= 0) {
    const T e = std::exp(-v);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
T softplus(T v) {
  return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

template <typename T>
T activate(Activation a, T v) {
  switch (a) {
    case Activation::kRelu: return v <= T(0) ? T(0) : v;  // NaN passes through
    case Activation::kSoftplus: return softplus(v);
    case Activation::kSigmoid: return sigmoid(v);
  }
  return v;
}

/// Derivative expressed through the input v and output y = activate(v).
template <typename T>
T activate_grad(Activation a, T v, T y) {
  switch (a) {
    case Activation::kRelu: return v > T(0) ? T(1) : T(0);
    case Activation::kSoftplus: return sigmoid(v);
    case Activation::kSigmoid: return y * (T(1) - y);
  }
  return T(1);
}

template <typename T>
Tensor4<T> activation_forward(const Tensor4<T>& x, Activation a) {
  Tensor4<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(a, x[i]);
  return y;
}

// ---------------------------------------------------------------------------
// Normalization. Batch-norm reduces over (B, H, W) per channel; group-norm over
// (C/G, H, W) per (batch, group). Both apply a per-channel scale and offset.

enum class NormKind { kBatch, kGroup };

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr int kDefaultGroups = 32;

/// Group count actually used for `channels`: the default (32) clamped to the
/// channel count.
inline int effective_groups(int requested, int channels) {
  const int g = requested > 0 ? requested : kDefaultGroups;
  return std::min(g, channels);
}

template <typename T>
struct NormCache {
  std::vector<T> mean;     // per reduction slot
  std::vector<T> inv_std;  // per reduction slot
  Tensor4<T> xhat;
};

template <typename T>
Tensor4<T> batch_norm_forward(const Tensor4<T>& x, std::span<const T> scale, std::span<const T> offset,
                              std::span<T> running_mean, std::span<T> running_var, bool train,
                              NormCache<T>* cache) {
  const int c_count = x.channels();
  if (scale.size() != static_cast<std::size_t>(c_count)) {
    throw DimensionError("batch-norm channel axis: expected " + std::to_string(scale.size()) +
                         " channels, got " + std::to_string(c_count));
  }
  const std::size_t plane = x.shape().plane();
  const std::size_t n = plane * x.batch();
  const T eps = T(kNormEpsilon);
  Tensor4<T> y(x.shape());
  NormCache<T> local;
  NormCache<T>& cc = cache ? *cache : local;
  cc.mean.assign(c_count, T(0));
  cc.inv_std.assign(c_count, T(0));
  cc.xhat = Tensor4<T>(x.shape());
  for (int c = 0; c < c_count; ++c) {
    T mean, var;
    if (train) {
      T s = 0;
      for (int b = 0; b < x.batch(); ++b) {
        const T* p = x.plane(b, c).data();
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mean = s / T(n);
      T v = 0;
      for (int b = 0; b < x.batch(); ++b) {
        const T* p = x.plane(b, c).data();
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mean) * (p[i] - mean);
      }
      var = v / T(n);
      const T unbiased = n > 1 ? v / T(n - 1) : var;
      const T m = T(kBatchNormMomentum);
      running_mean[c] = (T(1) - m) * running_mean[c] + m * mean;
      running_var[c] = (T(1) - m) * running_var[c] + m * unbiased;
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T inv = T(1) / std::sqrt(var + eps);
    cc.mean[c] = mean;
    cc.inv_std[c] = inv;
    for (int b = 0; b < x.batch(); ++b) {
      const T* p = x.plane(b, c).data();
      T* h = cc.xhat.plane(b, c).data();
      T* o = y.plane(b, c).data();
      for (std::size_t i = 0; i < plane; ++i) {
        h[i] = (p[i] - mean) * inv;
        o[i] = scale[c] * h[i] + offset[c];
      }
    }
  }
  return y;
}

template <typename T>
void batch_norm_backward(const NormCache<T>& cache, std::span<const T> scale, bool train, const Tensor4<T>& gy,
                         Tensor4<T>* grad_x, std::span<T> grad_scale, std::span<T> grad_offset) {
  const int c_count = gy.channels();
  const std::size_t plane = gy.shape().plane();
  const T n = T(plane * gy.batch());
  for (int c = 0; c < c_count; ++c) {
    T sum_g = 0, sum_gh = 0;
    for (int b = 0; b < gy.batch(); ++b) {
      const T* g = gy.plane(b, c).data();
      const T* h = cache.xhat.plane(b, c).data();
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += g[i];
        sum_gh += g[i] * h[i];
      }
    }
    if (!grad_scale.empty()) grad_scale[c] += sum_gh;
    if (!grad_offset.empty()) grad_offset[c] += sum_g;
    if (!grad_x) continue;
    const T k = scale[c] * cache.inv_std[c];
    for (int b = 0; b < gy.batch(); ++b) {
      const T* g = gy.plane(b, c).data();
      const T* h = cache.xhat.plane(b, c).data();
      T* gx = grad_x->plane(b, c).data();
      if (train) {
        for (std::size_t i = 0; i < plane; ++i) gx[i] += k * (g[i] - sum_g / n - h[i] * sum_gh / n);
      } else {
        for (std::size_t i = 0; i < plane; ++i) gx[i] += k * g[i];
      }
    }
  }
}

template <typename T>
Tensor4<T> group_norm_forward(const Tensor4<T>& x, int groups, std::span<const T> scale, std::span<const T> offset,
                              NormCache<T>* cache) {
  const int c_count = x.channels();
  if (groups < 1 || c_count % groups != 0) {
    throw ConfigError("group-norm: " + std::to_string(groups) + " groups do not divide " +
                      std::to_string(c_count) + " channels");
  }
  if (scale.size() != static_cast<std::size_t>(c_count)) {
    throw DimensionError("group-norm channel axis: expected " + std::to_string(scale.size()) +
                         " channels, got " + std::to_string(c_count));
  }
  const int per = c_count / groups;
  const std::size_t plane = x.shape().plane();
  const T n = T(plane * per);
  const T eps = T(kNormEpsilon);
  Tensor4<T> y(x.shape());
  NormCache<T> local;
  NormCache<T>& cc = cache ? *cache : local;
  cc.mean.assign(static_cast<std::size_t>(x.batch()) * groups, T(0));
  cc.inv_std.assign(cc.mean.size(), T(0));
  cc.xhat = Tensor4<T>(x.shape());
  for (int b = 0; b < x.batch(); ++b) {
    for (int grp = 0; grp < groups; ++grp) {
      T s = 0;
      for (int c = grp * per; c < (grp + 1) * per; ++c) {
        const T* p = x.plane(b, c).data();
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const T mean = s / n;
      T v = 0;
      for (int c = grp * per; c < (grp + 1) * per; ++c) {
        const T* p = x.plane(b, c).data();
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mean) * (p[i] - mean);
      }
      const T inv = T(1) / std::sqrt(v / n + eps);
      cc.mean[static_cast<std::size_t>(b) * groups + grp] = mean;
      cc.inv_std[static_cast<std::size_t>(b) * groups + grp] = inv;
      for (int c = grp * per; c < (grp + 1) * per; ++c) {
        const T* p = x.plane(b, c).data();
        T* h = cc.xhat.plane(b, c).data();
        T* o = y.plane(b, c).data();
        for (std::size_t i = 0; i < plane; ++i) {
          h[i] = (p[i] - mean) * inv;
          o[i] = scale[c] * h[i] + offset[c];
        }
      }
    }
  }
  return y;
}

template <typename T>
void group_norm_backward(const NormCache<T>& cache, int groups, std::span<const T> scale, const Tensor4<T>& gy,
                         Tensor4<T>* grad_x, std::span<T> grad_scale, std::span<T> grad_offset) {
  const int c_count = gy.channels();
  const int per = c_count / groups;
  const std::size_t plane = gy.shape().plane();
  const T n = T(plane * per);
  for (int b = 0; b < gy.batch(); ++b) {
    for (int c = 0; c < c_count; ++c) {
      const T* g = gy.plane(b, c).data();
      const T* h = cache.xhat.plane(b, c).data();
      T sg = 0, sgh = 0;
      for (std::size_t i = 0; i < plane; ++i) {
        sg += g[i];
        sgh += g[i] * h[i];
      }
      if (!grad_scale.empty()) grad_scale[c] += sgh;
      if (!grad_offset.empty()) grad_offset[c] += sg;
    }
    if (!grad_x) continue;
    for (int grp = 0; grp < groups; ++grp) {
      // Sums of the gradient w.r.t. xhat, which carries the per-channel scale.
      T sum_g = 0, sum_gh = 0;
      for (int c = grp * per; c < (grp + 1) * per; ++c) {
        const T* g = gy.plane(b, c).data();
        const T* h = cache.xhat.plane(b, c).data();
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += scale[c] * g[i];
          sum_gh += scale[c] * g[i] * h[i];
        }
      }
      const T inv = cache.inv_std[static_cast<std::size_t>(b) * groups + grp];
      for (int c = grp * per; c < (grp + 1) * per; ++c) {
        const T* g = gy.plane(b, c).data();
        const T* h = cache.xhat.plane(b, c).data();
        T* gx = grad_x->plane(b, c).data();
        for (std::size_t i = 0; i < plane; ++i) {
          gx[i] += inv * (scale[c] * g[i] - sum_g / n - h[i] * sum_gh / n);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Max pooling with implicit -inf padding. Ties resolve to the first element in
// row-major window order.

template <typename T>
Tensor4<T> max_pool_forward(const Tensor4<T>& x, const ConvGeometry& g, std::vector<std::size_t>* argmax) {
  const int oh = g.out_extent(x.height());
  const int ow = g.out_extent(x.width());
  if (oh < 1 || ow < 1) throw DimensionError("max-pool spatial axis: input " + x.shape().str() + " too small");
  Tensor4<T> y(Shape4{x.batch(), x.channels(), oh, ow});
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t out_i = 0;
  for (int b = 0; b < x.batch(); ++b) {
    for (int c = 0; c < x.channels(); ++c) {
      const std::size_t base = (static_cast<std::size_t>(b) * x.channels() + c) * x.shape().plane();
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++out_i) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_i = base;
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= x.height()) continue;
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= x.width()) continue;
              const std::size_t idx = base + static_cast<std::size_t>(iy) * x.width() + ix;
              if (x[idx] > best) {
                best = x[idx];
                best_i = idx;
              }
            }
          }
          y[out_i] = best;
          if (argmax) (*argmax)[out_i] = best_i;
        }
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Per-(batch, channel) spatial normalization: out = v / sum(v).

template <typename T>
Tensor4<T> spatial_normalize_forward(const Tensor4<T>& x, std::vector<T>* sums) {
  Tensor4<T> y(x.shape());
  if (sums) sums->assign(static_cast<std::size_t>(x.batch()) * x.channels(), T(0));
  const std::size_t plane = x.shape().plane();
  for (int b = 0; b < x.batch(); ++b) {
    for (int c = 0; c < x.channels(); ++c) {
      const T* p = x.plane(b, c).data();
      T s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      T* o = y.plane(b, c).data();
      for (std::size_t i = 0; i < plane; ++i) o[i] = p[i] / s;
      if (sums) (*sums)[static_cast<std::size_t>(b) * x.channels() + c] = s;
    }
  }
  return y;
}

}  // namespace ops
}  // namespace ssn
