#pragma once

#include <functional>
#include <span>
#include <string>

#include "ssn/tape.hpp"
#include "ssn/tensor.hpp"

namespace ssn {

/// Builds a scalar loss on the tape from the current values of the checked
/// parameters. Called once for the analytic pass and twice per perturbed scalar.
using LossBuilder = std::function<Var(Tape<double>&)>;

struct GradCheckOptions {
  double step = 1e-3;        // central-difference half step
  double tolerance = 1e-4;   // max relative error
  double denominator_floor = 1e-2;  // |a-n| / max(|a|, |n|, floor)
  double min_kink_margin = 0.0;     // required distance from ReLU/integer-offset kinks
};

struct GradCheckReport {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::string worst;  // "<param>[index]"
  std::size_t checked = 0;
  double kink_margin = 0;
  bool finite = true;
  bool pass = false;
  std::string diagnostic;
};

/// Compares analytic gradients against central differences for every scalar
/// of every listed parameter.
GradCheckReport finite_diff_gradcheck(const LossBuilder& build, std::span<Param<double>* const> params,
                                      const GradCheckOptions& options = {});

/// Forward-only pass reporting the distance to the nearest recorded kink.
double kink_margin(const LossBuilder& build);

}  // namespace ssn
