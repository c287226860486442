#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ssn/error.hpp"
#include "ssn/tensor.hpp"

namespace ssn {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates for one parameter.
template <typename T>
struct AdamMoments {
  std::vector<T> m;
  std::vector<T> v;
};

/// One bias-corrected Adam update of `param` from its current gradient.
/// `step` is the 1-based update count of the parameter's group.
template <typename T>
void adam_step(Param<T>& param, AdamMoments<T>& state, long step, double lr, const AdamOptions& o = {}) {
  if (state.m.size() != param.size() || state.v.size() != param.size()) {
    throw DimensionError("adam state for '" + param.name + "' does not match parameter size");
  }
  const double c1 = 1.0 - std::pow(o.beta1, double(step));
  const double c2 = 1.0 - std::pow(o.beta2, double(step));
  const T b1 = T(o.beta1), b2 = T(o.beta2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = param.grad[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
    const double m_hat = double(state.m[i]) / c1;
    const double v_hat = double(state.v[i]) / c2;
    param.value[i] = T(double(param.value[i]) - lr * m_hat / (std::sqrt(v_hat) + o.epsilon));
  }
}

/// Adam over named parameter groups, each with its own learning rate and
/// step counter (so groups that join late still get correct bias correction).
template <typename T>
class Adam {
 public:
  struct Group {
    std::string name;
    std::vector<Param<T>*> params;
    std::vector<AdamMoments<T>> moments;
    double lr = 1e-3;
    long steps = 0;
  };

  explicit Adam(AdamOptions options = {}) : options_(options) {}

  int add_group(std::string name, std::vector<Param<T>*> params, double lr) {
    Group g;
    g.name = std::move(name);
    g.lr = lr;
    for (Param<T>* p : params) {
      g.params.push_back(p);
      g.moments.push_back({std::vector<T>(p->size(), T(0)), std::vector<T>(p->size(), T(0))});
    }
    groups_.push_back(std::move(g));
    return static_cast<int>(groups_.size()) - 1;
  }

  int find_group(const std::string& name) const {
    for (std::size_t i = 0; i < groups_.size(); ++i) {
      if (groups_[i].name == name) return static_cast<int>(i);
    }
    return -1;
  }

  void set_lr(int group, double lr) { groups_.at(group).lr = lr; }
  double lr(int group) const { return groups_.at(group).lr; }

  void step() {
    for (Group& g : groups_) {
      ++g.steps;
      for (std::size_t i = 0; i < g.params.size(); ++i) adam_step(*g.params[i], g.moments[i], g.steps, g.lr, options_);
    }
  }

  void zero_grad() {
    for (Group& g : groups_) {
      for (Param<T>* p : g.params) p->zero_grad();
    }
  }

  std::vector<Group>& groups() { return groups_; }
  const std::vector<Group>& groups() const { return groups_; }
  const AdamOptions& options() const { return options_; }

 private:
  AdamOptions options_;
  std::vector<Group> groups_;
};

}  // namespace ssn
