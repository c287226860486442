#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ssn/error.hpp"
#include "ssn/tensor.hpp"

namespace ssn {

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
  bool operator==(const Var&) const = default;
};

/// Reverse-mode gradient tape.
///
/// Nodes are appended in evaluation order, which is a topological order of the
/// computation. backward() walks them once in reverse and calls each node's
/// backward function with the accumulated output gradient; that function adds
/// into its parents' gradient buffers (and into Param::grad for parameters).
/// Gradients therefore accumulate in a fixed order and repeated runs are
/// bit-identical.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor4<T>&)>;

  /// Value that never receives a gradient.
  Var constant(Tensor4<T> value, std::string label = "const") {
    return push(std::move(value), false, nullptr, std::move(label));
  }

  /// Leaf whose gradient is kept (e.g. the network input for receptive-field maps).
  Var leaf(Tensor4<T> value, std::string label = "leaf") {
    return push(std::move(value), true, nullptr, std::move(label));
  }

  /// Records an op output. `fn` runs only if some parent (or a parameter the op
  /// touches, flagged by `touches_trainable`) needs a gradient.
  Var record(Tensor4<T> value, std::initializer_list<Var> parents, bool touches_trainable, BackwardFn fn,
             std::string label) {
    bool needs = touches_trainable;
    for (Var p : parents) needs = needs || needs_grad(p);
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, std::move(label));
  }

  const Tensor4<T>& value(Var v) const { return node(v).value; }
  const std::string& label(Var v) const { return node(v).label; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }
  bool has_grad(Var v) const { return node(v).grad_ready; }
  std::size_t size() const { return nodes_.size(); }

  /// Accumulated gradient of `v`; zeros when nothing flowed into it.
  Tensor4<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.grad_ready) return n.grad;
    return Tensor4<T>(n.value.shape());
  }

  /// Gradient buffer of a parent, allocated on first use. Only valid inside backward.
  Tensor4<T>* grad_buffer(Var v) {
    Node& n = node(v);
    if (!n.needs_grad) return nullptr;
    if (!n.grad_ready) {
      n.grad = Tensor4<T>(n.value.shape());
      n.grad_ready = true;
    }
    return &n.grad;
  }

  /// Back-propagates from a scalar (single-element) node with seed 1.
  void backward(Var loss) {
    if (node(loss).value.size() != 1) {
      throw DimensionError("backward(): loss node '" + label(loss) + "' is not a scalar");
    }
    backward(loss, Tensor4<T>(node(loss).value.shape(), T(1)));
  }

  /// Back-propagates from `v` with an explicit output gradient.
  void backward(Var v, const Tensor4<T>& seed) {
    Node& start = node(v);
    if (!(seed.shape() == start.value.shape())) {
      throw DimensionError("backward(): seed shape " + seed.shape().str() + " != node shape " +
                           start.value.shape().str());
    }
    if (!start.needs_grad) return;
    Tensor4<T>* g = grad_buffer(v);
    for (std::size_t i = 0; i < seed.size(); ++i) (*g)[i] += seed[i];
    for (int i = v.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.grad_ready || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Clears every node gradient so backward() can run again from scratch.
  void zero_grad() {
    for (Node& n : nodes_) {
      if (n.grad_ready) n.grad.fill(T(0));
      n.grad_ready = false;
    }
  }

  // Distance of the recorded inputs to the nearest non-differentiable point
  // (ReLU at 0, integer shift offsets). Finite-difference checks use it to
  // confirm their perturbations stay on one smooth piece.
  void set_track_kinks(bool on) { track_kinks_ = on; }
  bool track_kinks() const { return track_kinks_; }
  void note_kink(T distance) { kink_margin_ = std::min(kink_margin_, distance); }
  T kink_margin() const { return kink_margin_; }

 private:
  struct Node {
    Tensor4<T> value;
    Tensor4<T> grad;
    bool grad_ready = false;
    bool needs_grad = false;
    BackwardFn backward;
    std::string label;
  };

  Var push(Tensor4<T> value, bool needs, BackwardFn fn, std::string label) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    n.backward = std::move(fn);
    n.label = std::move(label);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(Var v) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw ArgumentError("invalid tape variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw ArgumentError("invalid tape variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  std::vector<Node> nodes_;
  bool track_kinks_ = false;
  T kink_margin_ = std::numeric_limits<T>::infinity();
};

}  // namespace ssn
