#pragma once

// Feature Shifting Module.
//
// P [B,C,H,W] --1x1 (w_alpha)--> R [B,K,H,W] --shift (dx,dy)--> S
// P --1x1 (w_f)--> act --(normalize over H*W)--> F          (correlation attention)
// Q = relu(batchnorm(P + 1x1_{w_beta}(F * S)))
//
// Shifting is S_k(x, y) = R_k(x - dx_k, y - dy_k) with bilinear interpolation
// and zero fill. Positive dx moves content toward increasing x.

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "ssn/layers.hpp"
#include "ssn/ops.hpp"
#include "ssn/tape.hpp"
#include "ssn/tensor.hpp"

namespace ssn::fsm {

/// How the attention gate is produced from the 1x1 response.
enum class CaVariant {
  kSoftplusNormalized,  // softplus, then divided by its spatial sum per (b, k)
  kSigmoid,             // sigmoid, no spatial normalization
};

std::string to_string(CaVariant v);
CaVariant parse_ca_variant(const std::string& s);

struct FsmInit {
  double offset_range = 1.0;  // offsets ~ U[-range, range]
  bool zero_w_beta = true;
};

template <typename T>
struct FsmParams {
  int channels = 0;        // C
  int shift_channels = 0;  // K
  CaVariant variant = CaVariant::kSoftplusNormalized;
  Param<T> w_alpha;  // [K, C]
  Param<T> w_beta;   // [C, K]
  Param<T> w_f;      // [K, C]
  Param<T> dx;       // [K]
  Param<T> dy;       // [K]
  NormParams<T> branch_norm;

  FsmParams() = default;
  FsmParams(const std::string& prefix, int c, int k, CaVariant v)
      : channels(c),
        shift_channels(k),
        variant(v),
        w_alpha(prefix + ".w_alpha", {k, c}),
        w_beta(prefix + ".w_beta", {c, k}),
        w_f(prefix + ".w_f", {k, c}),
        dx(prefix + ".dx", {k}),
        dy(prefix + ".dy", {k}),
        branch_norm(prefix + ".bn", ops::NormKind::kBatch, c) {
    if (c < 1 || k < 1) throw ConfigError(prefix + ": FSM needs C >= 1 and K >= 1");
  }

  /// Projection weights ~ N(0, 1/C), w_beta zero (or N(0, 1/K)), offsets uniform.
  template <typename Rng>
  void initialize(Rng& rng, const FsmInit& init = {}) {
    std::normal_distribution<double> in_proj(0.0, 1.0 / std::sqrt(double(channels)));
    for (T& v : w_alpha.value) v = T(in_proj(rng));
    for (T& v : w_f.value) v = T(in_proj(rng));
    std::normal_distribution<double> out_proj(0.0, 1.0 / std::sqrt(double(shift_channels)));
    for (T& v : w_beta.value) v = init.zero_w_beta ? T(0) : T(out_proj(rng));
    reset_offsets(rng, init.offset_range);
  }

  template <typename Rng>
  void reset_offsets(Rng& rng, double range) {
    std::uniform_real_distribution<double> u(-range, range);
    for (T& v : dx.value) v = T(u(rng));
    for (T& v : dy.value) v = T(u(rng));
  }

  /// Trainable parameters in a fixed order; offsets last.
  std::vector<Param<T>*> parameters() {
    return {&w_alpha, &w_beta, &w_f, &branch_norm.scale, &branch_norm.offset, &dx, &dy};
  }
  std::vector<Param<T>*> buffers() { return {&branch_norm.running_mean, &branch_norm.running_var}; }

  void clamp_offsets(T limit) {
    for (T& v : dx.value) v = std::clamp(v, -limit, limit);
    for (T& v : dy.value) v = std::clamp(v, -limit, limit);
  }
};

// ---------------------------------------------------------------------------
// Shifting.

template <typename T>
struct ShiftGrads {
  Tensor4<T> maps;
  std::vector<T> dx;
  std::vector<T> dy;
};

namespace detail {

// Integer base and fraction of the sampling coordinate x - d.
template <typename T>
struct SampleOffset {
  int base;
  T frac;
  explicit SampleOffset(T d) {
    const T s = -d;
    const T f = std::floor(s);
    base = static_cast<int>(f);
    frac = s - f;
  }
};

}  // namespace detail

template <typename T>
Tensor4<T> shift_forward(const Tensor4<T>& maps, std::span<const T> dx, std::span<const T> dy) {
  const int k_count = maps.channels();
  if (dx.size() != static_cast<std::size_t>(k_count) || dy.size() != static_cast<std::size_t>(k_count)) {
    throw DimensionError("shift channel axis: " + std::to_string(k_count) + " map channels but " +
                         std::to_string(dx.size()) + "/" + std::to_string(dy.size()) + " offsets");
  }
  const int h = maps.height(), w = maps.width();
  Tensor4<T> out(maps.shape());
  for (int k = 0; k < k_count; ++k) {
    const T limit = T(4) * T(std::max(h, w));
    if (!(std::abs(dx[k]) < limit && std::abs(dy[k]) < limit)) continue;  // fully out of view
    const detail::SampleOffset<T> ox(dx[k]), oy(dy[k]);
    const T w00 = (T(1) - ox.frac) * (T(1) - oy.frac);
    const T w01 = ox.frac * (T(1) - oy.frac);
    const T w10 = (T(1) - ox.frac) * oy.frac;
    const T w11 = ox.frac * oy.frac;
    for (int b = 0; b < maps.batch(); ++b) {
      const T* in = maps.plane(b, k).data();
      T* o = out.plane(b, k).data();
      auto at = [&](int yy, int xx) -> T {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return T(0);
        return in[static_cast<std::size_t>(yy) * w + xx];
      };
      for (int y = 0; y < h; ++y) {
        const int y0 = y + oy.base;
        for (int x = 0; x < w; ++x) {
          const int x0 = x + ox.base;
          o[static_cast<std::size_t>(y) * w + x] =
              w00 * at(y0, x0) + w01 * at(y0, x0 + 1) + w10 * at(y0 + 1, x0) + w11 * at(y0 + 1, x0 + 1);
        }
      }
    }
  }
  return out;
}

/// Gradients of sum(upstream * shift_forward(maps, dx, dy)).
template <typename T>
ShiftGrads<T> shift_backward(const Tensor4<T>& maps, std::span<const T> dx, std::span<const T> dy,
                             const Tensor4<T>& upstream) {
  const int k_count = maps.channels();
  if (!(upstream.shape() == maps.shape())) {
    throw DimensionError("shift backward: upstream " + upstream.shape().str() + " vs maps " + maps.shape().str());
  }
  const int h = maps.height(), w = maps.width();
  ShiftGrads<T> g{Tensor4<T>(maps.shape()), std::vector<T>(k_count, T(0)), std::vector<T>(k_count, T(0))};
  for (int k = 0; k < k_count; ++k) {
    const T limit = T(4) * T(std::max(h, w));
    if (!(std::abs(dx[k]) < limit && std::abs(dy[k]) < limit)) continue;
    const detail::SampleOffset<T> ox(dx[k]), oy(dy[k]);
    const T w00 = (T(1) - ox.frac) * (T(1) - oy.frac);
    const T w01 = ox.frac * (T(1) - oy.frac);
    const T w10 = (T(1) - ox.frac) * oy.frac;
    const T w11 = ox.frac * oy.frac;
    T sum_dx = 0, sum_dy = 0;
    for (int b = 0; b < maps.batch(); ++b) {
      const T* in = maps.plane(b, k).data();
      const T* up = upstream.plane(b, k).data();
      T* gm = g.maps.plane(b, k).data();
      auto inside = [&](int yy, int xx) { return yy >= 0 && yy < h && xx >= 0 && xx < w; };
      auto at = [&](int yy, int xx) -> T { return inside(yy, xx) ? in[static_cast<std::size_t>(yy) * w + xx] : T(0); };
      auto scatter = [&](int yy, int xx, T v) {
        if (inside(yy, xx)) gm[static_cast<std::size_t>(yy) * w + xx] += v;
      };
      for (int y = 0; y < h; ++y) {
        const int y0 = y + oy.base;
        for (int x = 0; x < w; ++x) {
          const T u = up[static_cast<std::size_t>(y) * w + x];
          if (u == T(0)) continue;
          const int x0 = x + ox.base;
          const T v00 = at(y0, x0), v01 = at(y0, x0 + 1), v10 = at(y0 + 1, x0), v11 = at(y0 + 1, x0 + 1);
          scatter(y0, x0, u * w00);
          scatter(y0, x0 + 1, u * w01);
          scatter(y0 + 1, x0, u * w10);
          scatter(y0 + 1, x0 + 1, u * w11);
          // d(sample)/d(sample x); the sample coordinate is x - dx, hence the sign flip.
          const T ds_dx = (T(1) - oy.frac) * (v01 - v00) + oy.frac * (v11 - v10);
          const T ds_dy = (T(1) - ox.frac) * (v10 - v00) + ox.frac * (v11 - v01);
          sum_dx -= u * ds_dx;
          sum_dy -= u * ds_dy;
        }
      }
    }
    g.dx[k] = sum_dx;
    g.dy[k] = sum_dy;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Correlation attention.

template <typename T>
Tensor4<T> ca_forward(const Tensor4<T>& p, std::span<const T> w_f, int shift_channels, CaVariant variant) {
  Tensor4<T> z = ops::conv2d_forward<T>(p, w_f, shift_channels, {}, ConvGeometry{});
  if (variant == CaVariant::kSigmoid) return ops::activation_forward(z, ops::Activation::kSigmoid);
  return ops::spatial_normalize_forward<T>(ops::activation_forward(z, ops::Activation::kSoftplus), nullptr);
}

// ---------------------------------------------------------------------------
// Tape versions.

template <typename T>
Var shift(Tape<T>& tape, Var maps, Param<T>& dx, Param<T>& dy, std::string label = "shift") {
  const Tensor4<T>& in = tape.value(maps);
  Tensor4<T> out = shift_forward<T>(in, dx.value, dy.value);
  if (tape.track_kinks()) {
    for (std::size_t k = 0; k < dx.size(); ++k) {
      for (T d : {dx.value[k], dy.value[k]}) {
        const T f = d - std::floor(d);
        tape.note_kink(std::min(f, T(1) - f));
      }
    }
  }
  const bool trainable = dx.requires_grad || dy.requires_grad;
  return tape.record(
      std::move(out), {maps}, trainable,
      [maps, &dx, &dy](Tape<T>& t, const Tensor4<T>& gy) {
        ShiftGrads<T> g = shift_backward<T>(t.value(maps), dx.value, dy.value, gy);
        if (Tensor4<T>* gm = t.grad_buffer(maps)) {
          for (std::size_t i = 0; i < gm->size(); ++i) (*gm)[i] += g.maps[i];
        }
        if (dx.requires_grad) {
          for (std::size_t k = 0; k < dx.size(); ++k) dx.grad[k] += g.dx[k];
        }
        if (dy.requires_grad) {
          for (std::size_t k = 0; k < dy.size(); ++k) dy.grad[k] += g.dy[k];
        }
      },
      std::move(label));
}

template <typename T>
Var correlation_attention(Tape<T>& tape, Var p, Param<T>& w_f, CaVariant variant, const std::string& prefix) {
  Var z = ag::conv2d(tape, p, w_f, static_cast<Param<T>*>(nullptr), ConvGeometry{}, prefix + ".ca_conv");
  if (variant == CaVariant::kSigmoid) return ag::activation(tape, z, ops::Activation::kSigmoid, prefix + ".ca");
  Var f = ag::activation(tape, z, ops::Activation::kSoftplus, prefix + ".ca_softplus");
  return ag::spatial_normalize(tape, f, prefix + ".ca");
}

/// Intermediate maps of one FSM evaluation.
struct FsmTaps {
  Var input;       // P
  Var pre_shift;   // R
  Var post_shift;  // S
  Var attention;   // F
  Var non_local;   // output of the w_beta 1x1 conv
  Var output;      // Q
};

template <typename T>
FsmTaps fsm(Tape<T>& tape, Var p, FsmParams<T>& params, bool train, const std::string& prefix = "fsm") {
  const Tensor4<T>& in = tape.value(p);
  if (in.channels() != params.channels) {
    throw DimensionError(prefix + " channel axis: module expects C=" + std::to_string(params.channels) +
                         ", input has " + std::to_string(in.channels()));
  }
  FsmTaps taps;
  taps.input = p;
  Param<T>* no_bias = nullptr;
  taps.pre_shift = ag::conv2d(tape, p, params.w_alpha, no_bias, ConvGeometry{}, prefix + ".alpha");
  taps.post_shift = shift(tape, taps.pre_shift, params.dx, params.dy, prefix + ".shift");
  taps.attention = correlation_attention(tape, p, params.w_f, params.variant, prefix);
  Var gated = ag::mul(tape, taps.attention, taps.post_shift, prefix + ".gate");
  taps.non_local = ag::conv2d(tape, gated, params.w_beta, no_bias, ConvGeometry{}, prefix + ".beta");
  Var sum = ag::add(tape, p, taps.non_local, prefix + ".residual");
  Var normed = ag::normalize(tape, sum, params.branch_norm, train, prefix + ".bn");
  taps.output = ag::activation(tape, normed, ops::Activation::kRelu, prefix + ".relu");
  return taps;
}

/// Factored forward without a tape.
template <typename T>
Tensor4<T> fsm_forward(const Tensor4<T>& p, FsmParams<T>& params, bool train) {
  Tape<T> tape;
  Var in = tape.constant(p, "P");
  FsmTaps taps = fsm(tape, in, params, train);
  return tape.value(taps.output);
}

/// Explicit induced-convolution evaluation of the module:
///   pre_c(x,y) = P_c(x,y) + sum_k sum_c' wFSM[c,k,c'](x,y) * P*_c'(x - dx_k, y - dy_k)
///   wFSM[c,k,c'](x,y) = w_beta[c,k] * w_alpha[k,c'] * F_k(x,y)
/// followed by the same normalization and ReLU. Cost O(C^2 K H W); for
/// checking the factored path only. Running statistics are left untouched.
template <typename T>
Tensor4<T> fsm_oracle(const Tensor4<T>& p, const FsmParams<T>& params, bool train) {
  const int c_count = params.channels, k_count = params.shift_channels;
  if (p.channels() != c_count) throw DimensionError("fsm_oracle channel axis mismatch");
  const int h = p.height(), w = p.width();
  // Attention computed independently of the tape path.
  Tensor4<T> f(Shape4{p.batch(), k_count, h, w});
  for (int b = 0; b < p.batch(); ++b) {
    for (int k = 0; k < k_count; ++k) {
      T total = 0;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          T z = 0;
          for (int c = 0; c < c_count; ++c) z += params.w_f.value[static_cast<std::size_t>(k) * c_count + c] * p(b, c, y, x);
          const T a = params.variant == CaVariant::kSigmoid ? T(1) / (T(1) + std::exp(-z))
                                                            : std::log(T(1) + std::exp(z));
          f(b, k, y, x) = a;
          total += a;
        }
      }
      if (params.variant == CaVariant::kSoftplusNormalized) {
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) f(b, k, y, x) /= total;
      }
    }
  }
  Tensor4<T> pre(p.shape());
  for (int b = 0; b < p.batch(); ++b) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < c_count; ++c) {
          T acc = p(b, c, y, x);
          for (int k = 0; k < k_count; ++k) {
            const T sx = T(x) - params.dx.value[k];
            const T sy = T(y) - params.dy.value[k];
            for (int c2 = 0; c2 < c_count; ++c2) {
              const T w_fsm = params.w_beta.value[static_cast<std::size_t>(c) * k_count + k] *
                              params.w_alpha.value[static_cast<std::size_t>(k) * c_count + c2] * f(b, k, y, x);
              acc += w_fsm * ops::bilinear_sample<T>(p.plane(b, c2), h, w, sx, sy);
            }
          }
          pre(b, c, y, x) = acc;
        }
      }
    }
  }
  std::vector<T> rm = params.branch_norm.running_mean.value;
  std::vector<T> rv = params.branch_norm.running_var.value;
  Tensor4<T> normed = ops::batch_norm_forward<T>(pre, params.branch_norm.scale.value, params.branch_norm.offset.value,
                                                  rm, rv, train, nullptr);
  return ops::activation_forward(normed, ops::Activation::kRelu);
}

// ---------------------------------------------------------------------------
// Cost formulas.

struct ParamCounts {
  std::int64_t fsm = 0;              // 3KC + 2K
  std::int64_t active_conv = 0;      // KC^2 + 2K
  std::int64_t deformable_conv = 0;  // KC^2 + 2KC
};

ParamCounts fsm_param_count(std::int64_t channels, std::int64_t shift_channels);

// ---------------------------------------------------------------------------
// Induced convolution window energy: sum_c' (w_beta[c,k] w_alpha[k,c'] F_k(x,y))^2.

template <typename T>
std::vector<double> window_energy_factored(const FsmParams<T>& p, const Tensor4<T>& attention, int b, int c, int y,
                                           int x) {
  std::vector<double> e(p.shift_channels, 0.0);
  for (int k = 0; k < p.shift_channels; ++k) {
    double alpha_sq = 0;
    for (int c2 = 0; c2 < p.channels; ++c2) {
      const double a = p.w_alpha.value[static_cast<std::size_t>(k) * p.channels + c2];
      alpha_sq += a * a;
    }
    const double g = double(p.w_beta.value[static_cast<std::size_t>(c) * p.shift_channels + k]) * attention(b, k, y, x);
    e[k] = g * g * alpha_sq;
  }
  return e;
}

template <typename T>
std::vector<double> window_energy_explicit(const FsmParams<T>& p, const Tensor4<T>& attention, int b, int c, int y,
                                           int x) {
  // Materialize wFSM[c, k, c'] at (x, y) then reduce over c'.
  std::vector<double> w_fsm(static_cast<std::size_t>(p.shift_channels) * p.channels);
  for (int k = 0; k < p.shift_channels; ++k) {
    for (int c2 = 0; c2 < p.channels; ++c2) {
      w_fsm[static_cast<std::size_t>(k) * p.channels + c2] =
          double(p.w_beta.value[static_cast<std::size_t>(c) * p.shift_channels + k]) *
          double(p.w_alpha.value[static_cast<std::size_t>(k) * p.channels + c2]) * double(attention(b, k, y, x));
    }
  }
  std::vector<double> e(p.shift_channels, 0.0);
  for (int k = 0; k < p.shift_channels; ++k) {
    for (int c2 = 0; c2 < p.channels; ++c2) {
      const double v = w_fsm[static_cast<std::size_t>(k) * p.channels + c2];
      e[k] += v * v;
    }
  }
  return e;
}

// ---------------------------------------------------------------------------
// Offset export: "module_id,k,dx,dy" rows with a one-line header.

struct OffsetRow {
  int module_id = 0;
  int k = 0;
  double dx = 0;
  double dy = 0;
  bool operator==(const OffsetRow&) const = default;
};

template <typename T>
std::vector<OffsetRow> offset_rows(int module_id, const FsmParams<T>& p) {
  std::vector<OffsetRow> rows;
  for (int k = 0; k < p.shift_channels; ++k) rows.push_back({module_id, k, double(p.dx.value[k]), double(p.dy.value[k])});
  return rows;
}

void write_offsets_csv(std::ostream& os, const std::vector<OffsetRow>& rows);
std::vector<OffsetRow> read_offsets_csv(std::istream& is);

}  // namespace ssn::fsm
