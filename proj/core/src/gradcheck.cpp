#include "ssn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace ssn {

namespace {

double evaluate(const LossBuilder& build) {
  Tape<double> tape;
  Var loss = build(tape);
  return tape.value(loss)[0];
}

}  // namespace

double kink_margin(const LossBuilder& build) {
  Tape<double> tape;
  tape.set_track_kinks(true);
  build(tape);
  return tape.kink_margin();
}

GradCheckReport finite_diff_gradcheck(const LossBuilder& build, std::span<Param<double>* const> params,
                                      const GradCheckOptions& options) {
  GradCheckReport report;
  for (Param<double>* p : params) p->zero_grad();

  Tape<double> tape;
  tape.set_track_kinks(true);
  Var loss = build(tape);
  report.kink_margin = tape.kink_margin();
  if (!std::isfinite(tape.value(loss)[0])) {
    report.finite = false;
    report.diagnostic = "non-finite loss at unperturbed point";
    return report;
  }
  tape.backward(loss);

  if (report.kink_margin < options.min_kink_margin) {
    report.diagnostic = "inputs within " + std::to_string(report.kink_margin) +
                        " of a non-differentiable point (required " + std::to_string(options.min_kink_margin) + ")";
    return report;
  }

  for (Param<double>* p : params) {
    const std::vector<double> analytic = p->grad;
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + options.step;
      const double up = evaluate(build);
      p->value[i] = saved - options.step;
      const double down = evaluate(build);
      p->value[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[i])) {
        report.finite = false;
        report.diagnostic = "non-finite value while perturbing " + p->name + "[" + std::to_string(i) + "]";
        return report;
      }
      const double numeric = (up - down) / (2.0 * options.step);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.denominator_floor});
      const double rel = abs_err / denom;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.worst.empty()) {
        if (rel >= report.max_rel_error) report.worst = p->name + "[" + std::to_string(i) + "]";
        report.max_rel_error = std::max(report.max_rel_error, rel);
      }
      ++report.checked;
    }
  }
  report.pass = report.max_rel_error < options.tolerance;
  if (!report.pass) {
    report.diagnostic = "max relative error " + std::to_string(report.max_rel_error) + " at " + report.worst;
  }
  return report;
}

}  // namespace ssn
