#pragma once

// Differentiable ops recorded on a Tape. Each wraps a forward kernel from
// ops.hpp and registers the matching backward.

#include <memory>
#include <string>
#include <vector>

#include "ssn/ops.hpp"
#include "ssn/tape.hpp"

namespace ssn {

/// Scale/offset plus running statistics for one normalization layer.
template <typename T>
struct NormParams {
  ops::NormKind kind = ops::NormKind::kBatch;
  int groups = 1;
  Param<T> scale;
  Param<T> offset;
  Param<T> running_mean;
  Param<T> running_var;

  NormParams() = default;
  NormParams(const std::string& prefix, ops::NormKind k, int channels, int requested_groups = ops::kDefaultGroups)
      : kind(k),
        groups(k == ops::NormKind::kGroup ? ops::effective_groups(requested_groups, channels) : 1),
        scale(prefix + ".scale", {channels}, T(1)),
        offset(prefix + ".offset", {channels}, T(0)),
        running_mean(prefix + ".running_mean", {channels}, T(0), false),
        running_var(prefix + ".running_var", {channels}, T(1), false) {
    if (kind == ops::NormKind::kGroup && channels % groups != 0) {
      throw ConfigError(prefix + ": " + std::to_string(groups) + " groups do not divide " +
                        std::to_string(channels) + " channels");
    }
  }

  int channels() const { return scale.dim(0); }
  bool uses_running_stats() const { return kind == ops::NormKind::kBatch; }
};

namespace ag {

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Param<T>& weight, Param<T>* bias, const ConvGeometry& g,
           std::string label = "conv") {
  const int out_channels = weight.dim(0);
  const Tensor4<T>& in = tape.value(x);
  if (weight.shape.size() >= 2 && weight.dim(1) != in.channels()) {
    throw DimensionError(label + ": weight input-channel axis is " + std::to_string(weight.dim(1)) +
                         " but input has " + std::to_string(in.channels()) + " channels");
  }
  std::span<const T> b = bias ? std::span<const T>(bias->value) : std::span<const T>();
  Tensor4<T> out = ops::conv2d_forward<T>(in, weight.value, out_channels, b, g);
  const bool trainable = weight.requires_grad || (bias && bias->requires_grad);
  return tape.record(
      std::move(out), {x}, trainable,
      [x, &weight, bias, g](Tape<T>& t, const Tensor4<T>& gy) {
        std::span<T> gw = weight.requires_grad ? std::span<T>(weight.grad) : std::span<T>();
        std::span<T> gb = (bias && bias->requires_grad) ? std::span<T>(bias->grad) : std::span<T>();
        ops::conv2d_backward<T>(t.value(x), weight.value, g, gy, t.grad_buffer(x), gw, gb);
      },
      std::move(label));
}

template <typename T>
Var normalize(Tape<T>& tape, Var x, NormParams<T>& p, bool train, std::string label = "norm") {
  auto cache = std::make_shared<ops::NormCache<T>>();
  const Tensor4<T>& in = tape.value(x);
  Tensor4<T> out;
  const bool batch_stats = train && p.kind == ops::NormKind::kBatch;
  if (p.kind == ops::NormKind::kBatch) {
    out = ops::batch_norm_forward<T>(in, p.scale.value, p.offset.value, p.running_mean.value, p.running_var.value,
                                     train, cache.get());
  } else {
    out = ops::group_norm_forward<T>(in, p.groups, p.scale.value, p.offset.value, cache.get());
  }
  const bool trainable = p.scale.requires_grad || p.offset.requires_grad;
  return tape.record(
      std::move(out), {x}, trainable,
      [x, &p, cache, batch_stats](Tape<T>& t, const Tensor4<T>& gy) {
        std::span<T> gs = p.scale.requires_grad ? std::span<T>(p.scale.grad) : std::span<T>();
        std::span<T> go = p.offset.requires_grad ? std::span<T>(p.offset.grad) : std::span<T>();
        if (p.kind == ops::NormKind::kBatch) {
          ops::batch_norm_backward<T>(*cache, p.scale.value, batch_stats, gy, t.grad_buffer(x), gs, go);
        } else {
          ops::group_norm_backward<T>(*cache, p.groups, p.scale.value, gy, t.grad_buffer(x), gs, go);
        }
      },
      std::move(label));
}

template <typename T>
Var activation(Tape<T>& tape, Var x, ops::Activation a, std::string label = "") {
  const Tensor4<T>& in = tape.value(x);
  if (tape.track_kinks() && a == ops::Activation::kRelu) {
    for (std::size_t i = 0; i < in.size(); ++i) tape.note_kink(std::abs(in[i]));
  }
  Tensor4<T> out = ops::activation_forward(in, a);
  if (label.empty()) label = ops::to_string(a);
  const Var out_var = tape.record(
      std::move(out), {x}, false,
      [x, a](Tape<T>& t, const Tensor4<T>& gy) {
        Tensor4<T>* gx = t.grad_buffer(x);
        if (!gx) return;
        const Tensor4<T>& v = t.value(x);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          (*gx)[i] += gy[i] * ops::activate_grad(a, v[i], ops::activate(a, v[i]));
        }
      },
      std::move(label));
  return out_var;
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b, std::string label = "add") {
  const Tensor4<T>& va = tape.value(a);
  const Tensor4<T>& vb = tape.value(b);
  if (!(va.shape() == vb.shape())) {
    throw DimensionError(label + ": shape " + va.shape().str() + " vs " + vb.shape().str());
  }
  Tensor4<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  return tape.record(
      std::move(out), {a, b}, false,
      [a, b](Tape<T>& t, const Tensor4<T>& gy) {
        if (Tensor4<T>* ga = t.grad_buffer(a)) {
          for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i];
        }
        if (Tensor4<T>* gb = t.grad_buffer(b)) {
          for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i] += gy[i];
        }
      },
      std::move(label));
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b, std::string label = "mul") {
  const Tensor4<T>& va = tape.value(a);
  const Tensor4<T>& vb = tape.value(b);
  if (!(va.shape() == vb.shape())) {
    throw DimensionError(label + ": shape " + va.shape().str() + " vs " + vb.shape().str());
  }
  Tensor4<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return tape.record(
      std::move(out), {a, b}, false,
      [a, b](Tape<T>& t, const Tensor4<T>& gy) {
        const Tensor4<T>& xa = t.value(a);
        const Tensor4<T>& xb = t.value(b);
        if (Tensor4<T>* ga = t.grad_buffer(a)) {
          for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * xb[i];
        }
        if (Tensor4<T>* gb = t.grad_buffer(b)) {
          for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i] += gy[i] * xa[i];
        }
      },
      std::move(label));
}

template <typename T>
Var spatial_normalize(Tape<T>& tape, Var x, std::string label = "spatial_norm") {
  auto sums = std::make_shared<std::vector<T>>();
  Tensor4<T> out = ops::spatial_normalize_forward(tape.value(x), sums.get());
  // The backward reads its own output, which lives on the tape at the index
  // the record call is about to assign.
  const Var self{static_cast<int>(tape.size())};
  return tape.record(
      std::move(out), {x}, false,
      [x, sums, self](Tape<T>& t, const Tensor4<T>& gy) {
        Tensor4<T>* gx = t.grad_buffer(x);
        if (!gx) return;
        const Tensor4<T>& f = t.value(self);
        const std::size_t plane = gy.shape().plane();
        for (int b = 0; b < gy.batch(); ++b) {
          for (int c = 0; c < gy.channels(); ++c) {
            const T* g = gy.plane(b, c).data();
            const T* fv = f.plane(b, c).data();
            T dot = 0;
            for (std::size_t i = 0; i < plane; ++i) dot += g[i] * fv[i];
            const T s = (*sums)[static_cast<std::size_t>(b) * gy.channels() + c];
            T* o = gx->plane(b, c).data();
            for (std::size_t i = 0; i < plane; ++i) o[i] += (g[i] - dot) / s;
          }
        }
      },
      std::move(label));
}

template <typename T>
Var max_pool(Tape<T>& tape, Var x, const ConvGeometry& g, std::string label = "max_pool") {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor4<T> out = ops::max_pool_forward(tape.value(x), g, argmax.get());
  return tape.record(
      std::move(out), {x}, false,
      [x, argmax](Tape<T>& t, const Tensor4<T>& gy) {
        Tensor4<T>* gx = t.grad_buffer(x);
        if (!gx) return;
        for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[(*argmax)[i]] += gy[i];
      },
      std::move(label));
}

/// Mean squared error over all elements; returns a scalar node.
template <typename T>
Var mse(Tape<T>& tape, Var pred, const Tensor4<T>& target, std::string label = "mse") {
  const Tensor4<T>& p = tape.value(pred);
  if (!(p.shape() == target.shape())) {
    throw DimensionError(label + ": prediction " + p.shape().str() + " vs target " + target.shape().str());
  }
  T s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - target[i]) * (p[i] - target[i]);
  const T n = T(p.size());
  auto tgt = std::make_shared<Tensor4<T>>(target);
  return tape.record(
      Tensor4<T>(Shape4{}, s / n), {pred}, false,
      [pred, tgt, n](Tape<T>& t, const Tensor4<T>& gy) {
        Tensor4<T>* gp = t.grad_buffer(pred);
        if (!gp) return;
        const Tensor4<T>& pv = t.value(pred);
        const T k = T(2) * gy[0] / n;
        for (std::size_t i = 0; i < pv.size(); ++i) (*gp)[i] += k * (pv[i] - (*tgt)[i]);
      },
      std::move(label));
}

/// Scalar sum(weights * x); a random projection of an op's output.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor4<T>& weights, std::string label = "weighted_sum") {
  const Tensor4<T>& v = tape.value(x);
  if (!(v.shape() == weights.shape())) {
    throw DimensionError(label + ": value " + v.shape().str() + " vs weights " + weights.shape().str());
  }
  T s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * weights[i];
  auto w = std::make_shared<Tensor4<T>>(weights);
  return tape.record(
      Tensor4<T>(Shape4{}, s), {x}, false,
      [x, w](Tape<T>& t, const Tensor4<T>& gy) {
        Tensor4<T>* gx = t.grad_buffer(x);
        if (!gx) return;
        for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += gy[0] * (*w)[i];
      },
      std::move(label));
}

/// Tensor view of a parameter, so parameters can enter element-wise ops.
template <typename T>
Var param_tensor(Tape<T>& tape, Param<T>& p, Shape4 shape, std::string label = "") {
  if (shape.count() != p.size()) {
    throw DimensionError("param_tensor '" + p.name + "': shape " + shape.str() + " does not hold " +
                         std::to_string(p.size()) + " values");
  }
  if (label.empty()) label = p.name;
  return tape.record(
      Tensor4<T>(shape, p.value), {}, p.requires_grad,
      [&p](Tape<T>&, const Tensor4<T>& gy) {
        for (std::size_t i = 0; i < gy.size(); ++i) p.grad[i] += gy[i];
      },
      std::move(label));
}

}  // namespace ag
}  // namespace ssn
