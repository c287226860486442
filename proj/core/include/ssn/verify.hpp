#pragma once

// Seeded self-check suites shared by the command-line tool and the tests.

#include <cstdint>
#include <string>
#include <vector>

#include "ssn/gradcheck.hpp"

namespace ssn {

enum class GradOp { kConv1x1, kShift, kCaSoftplus, kCaSigmoid, kFsm, kBottleneck };

std::string to_string(GradOp op);
inline constexpr GradOp kAllGradOps[] = {GradOp::kConv1x1,   GradOp::kShift, GradOp::kCaSoftplus,
                                         GradOp::kCaSigmoid, GradOp::kFsm,   GradOp::kBottleneck};

struct GradCase {
  GradOp op = GradOp::kConv1x1;
  std::uint64_t seed = 0;
  int resamples = 0;  // draws rejected for sitting too close to a kink
  GradCheckReport report;
};

struct GradSuiteReport {
  std::vector<GradCase> cases;
  double max_rel_error = 0;
  bool pass = false;
};

/// Minimum distance from ReLU zero crossings and integer offsets accepted for
/// a finite-difference draw (the step is 1e-3).
inline constexpr double kGradCheckKinkMargin = 0.005;

/// Finite-difference check of one op family on a random small problem drawn
/// from `seed`. Draws too close to a kink are redrawn from derived seeds.
GradCase gradcheck_case(GradOp op, std::uint64_t seed, const GradCheckOptions& options = {});

/// `cases` cases cycling through every op family.
GradSuiteReport run_gradcheck_suite(int cases, std::uint64_t seed, const GradCheckOptions& options = {});

struct OracleCase {
  std::uint64_t seed = 0;
  int batch = 0, channels = 0, shift_channels = 0, height = 0, width = 0;
  bool sigmoid = false;
  bool train = false;
  double max_rel_error = 0;
};

struct OracleSuiteReport {
  std::vector<OracleCase> cases;
  double max_rel_error = 0;
  bool pass = false;
};

/// Factored FSM forward vs the explicit induced-convolution oracle in double
/// precision. Relative error is |a - b| / max(|a|, |b|, 1e-3) per element.
OracleSuiteReport run_oracle_suite(int cases, std::uint64_t seed, double tolerance = 1e-6);

}  // namespace ssn
