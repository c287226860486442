#include "ssn/verify.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ssn/error.hpp"
#include "ssn/fsm.hpp"
#include "ssn/layers.hpp"
#include "ssn/model.hpp"

namespace ssn {

std::string to_string(GradOp op) {
  switch (op) {
    case GradOp::kConv1x1: return "conv1x1";
    case GradOp::kShift: return "shift";
    case GradOp::kCaSoftplus: return "ca_softplus";
    case GradOp::kCaSigmoid: return "ca_sigmoid";
    case GradOp::kFsm: return "fsm";
    case GradOp::kBottleneck: return "bottleneck";
  }
  return "?";
}

namespace {

using Rng = std::mt19937_64;

void fill_normal(std::vector<double>& v, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  for (double& x : v) x = n(rng);
}

Tensor4<double> random_tensor(Shape4 s, Rng& rng) {
  Tensor4<double> t(s);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& x : t.values()) x = n(rng);
  return t;
}

// Non-integer offsets in [-2, 2].
void random_offsets(Param<double>& p, Rng& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (double& x : p.value) x = u(rng);
}

// One problem instance: owned parameters plus a loss builder over them.
struct Problem {
  std::vector<std::unique_ptr<Param<double>>> owned;
  fsm::FsmParams<double> fsm_params;
  BottleneckParams<double> block;
  std::vector<Param<double>*> checked;
  LossBuilder build;

  Param<double>& make(const std::string& name, std::vector<int> shape, Rng& rng) {
    owned.push_back(std::make_unique<Param<double>>(name, std::move(shape)));
    fill_normal(owned.back()->value, rng);
    checked.push_back(owned.back().get());
    return *owned.back();
  }
};

// Loss = sum(out * R) with a fixed random projection R, so every output
// element carries a distinct weight.
Var project(Tape<double>& tape, Var out, std::uint64_t seed) {
  Rng rng(seed);
  return ag::weighted_sum(tape, out, random_tensor(tape.value(out).shape(), rng), "projection");
}

ConvLayer<double> gc_conv(const std::string& name, int in, int out, ConvGeometry g, bool relu, Rng& rng) {
  ConvLayer<double> c;
  c.geom = g;
  c.weight = Param<double>(name + ".weight", {out, in, g.kernel, g.kernel});
  fill_normal(c.weight.value, rng, 1.0);  // scale is irrelevant after normalization; larger weights keep curvature low
  c.norm = NormParams<double>(name + ".norm", ops::NormKind::kGroup, out, 1);
  std::uniform_real_distribution<double> scale(0.75, 1.5);  // away from 0, where curvature explodes
  for (double& v : c.norm->scale.value) v = scale(rng);
  fill_normal(c.norm->offset.value, rng, 0.5);
  c.relu = relu;
  return c;
}

std::unique_ptr<Problem> make_problem(GradOp op, std::uint64_t seed) {
  auto pr = std::make_unique<Problem>();
  Problem& P = *pr;
  Rng rng(seed);
  const std::uint64_t proj_seed = seed ^ 0xabcdefULL;
  switch (op) {
    case GradOp::kConv1x1: {
      auto& x = P.make("input", {2, 3, 5, 6}, rng);
      auto& w = P.make("weight", {4, 3}, rng);
      auto& b = P.make("bias", {4}, rng);
      P.build = [&x, &w, &b, proj_seed](Tape<double>& t) {
        Var in = ag::param_tensor(t, x, Shape4{2, 3, 5, 6});
        return project(t, ag::conv2d(t, in, w, &b, ConvGeometry{}), proj_seed);
      };
      break;
    }
    case GradOp::kShift: {
      auto& x = P.make("maps", {2, 3, 5, 6}, rng);
      auto& dx = P.make("dx", {3}, rng);
      auto& dy = P.make("dy", {3}, rng);
      random_offsets(dx, rng);
      random_offsets(dy, rng);
      P.build = [&x, &dx, &dy, proj_seed](Tape<double>& t) {
        Var in = ag::param_tensor(t, x, Shape4{2, 3, 5, 6});
        return project(t, fsm::shift(t, in, dx, dy), proj_seed);
      };
      break;
    }
    case GradOp::kCaSoftplus:
    case GradOp::kCaSigmoid: {
      const auto variant = op == GradOp::kCaSigmoid ? fsm::CaVariant::kSigmoid : fsm::CaVariant::kSoftplusNormalized;
      auto& x = P.make("input", {2, 3, 4, 5}, rng);
      auto& wf = P.make("w_f", {4, 3}, rng);
      P.build = [&x, &wf, variant, proj_seed](Tape<double>& t) {
        Var in = ag::param_tensor(t, x, Shape4{2, 3, 4, 5});
        return project(t, fsm::correlation_attention(t, in, wf, variant, "ca"), proj_seed);
      };
      break;
    }
    case GradOp::kFsm: {
      auto& x = P.make("input", {2, 3, 5, 5}, rng);
      const auto variant = (seed & 1) ? fsm::CaVariant::kSigmoid : fsm::CaVariant::kSoftplusNormalized;
      P.fsm_params = fsm::FsmParams<double>("fsm", 3, 4, variant);
      auto& fp = P.fsm_params;
      fp.initialize(rng, fsm::FsmInit{2.0, false});
      fill_normal(fp.branch_norm.offset.value, rng, 0.3);
      for (Param<double>* p : fp.parameters()) P.checked.push_back(p);
      P.build = [&x, &fp, proj_seed](Tape<double>& t) {
        Var in = ag::param_tensor(t, x, Shape4{2, 3, 5, 5});
        return project(t, fsm::fsm(t, in, fp, true).output, proj_seed);
      };
      break;
    }
    case GradOp::kBottleneck: {
      auto& x = P.make("input", {2, 4, 5, 5}, rng);
      const int stride = (seed & 1) ? 2 : 1;
      auto& b = P.block;
      b.stride = stride;
      b.reduce = gc_conv("conv1", 4, 2, {1, 1, 0}, true, rng);
      b.spatial = gc_conv("conv2", 2, 2, {3, stride, 1}, true, rng);
      b.expand = gc_conv("conv3", 2, 8, {1, 1, 0}, false, rng);
      b.projection = gc_conv("proj", 4, 8, {1, stride, 0}, false, rng);
      for (ConvLayer<double>* c : {&b.reduce, &b.spatial, &b.expand, &*b.projection}) {
        P.checked.push_back(&c->weight);
        P.checked.push_back(&c->norm->scale);
        P.checked.push_back(&c->norm->offset);
      }
      P.build = [&x, &b, proj_seed](Tape<double>& t) {
        Var in = ag::param_tensor(t, x, Shape4{2, 4, 5, 5});
        return project(t, bottleneck_forward(t, in, b, true, "block"), proj_seed);
      };
      break;
    }
  }
  return pr;
}

}  // namespace

GradCase gradcheck_case(GradOp op, std::uint64_t seed, const GradCheckOptions& options) {
  GradCase c;
  c.op = op;
  c.seed = seed;
  GradCheckOptions o = options;
  o.min_kink_margin = std::max(o.min_kink_margin, kGradCheckKinkMargin);
  constexpr int kMaxDraws = 200;
  for (int draw = 0; draw < kMaxDraws; ++draw) {
    const std::uint64_t s = seed * 1000003ULL + static_cast<std::uint64_t>(draw);
    auto problem = make_problem(op, s);
    if (kink_margin(problem->build) < o.min_kink_margin) {
      ++c.resamples;
      continue;
    }
    c.report = finite_diff_gradcheck(problem->build, problem->checked, o);
    return c;
  }
  c.report.diagnostic = "no draw cleared the kink margin after " + std::to_string(kMaxDraws) + " attempts";
  return c;
}

GradSuiteReport run_gradcheck_suite(int cases, std::uint64_t seed, const GradCheckOptions& options) {
  if (cases < 1) throw ArgumentError("gradcheck suite needs at least one case");
  GradSuiteReport r;
  r.pass = true;
  constexpr int kOps = static_cast<int>(std::size(kAllGradOps));
  for (int i = 0; i < cases; ++i) {
    GradCase c = gradcheck_case(kAllGradOps[i % kOps], seed + static_cast<std::uint64_t>(i), options);
    r.max_rel_error = std::max(r.max_rel_error, c.report.max_rel_error);
    r.pass = r.pass && c.report.pass;
    r.cases.push_back(std::move(c));
  }
  return r;
}

OracleSuiteReport run_oracle_suite(int cases, std::uint64_t seed, double tolerance) {
  if (cases < 1) throw ArgumentError("oracle suite needs at least one case");
  OracleSuiteReport r;
  for (int i = 0; i < cases; ++i) {
    OracleCase c;
    c.seed = seed + static_cast<std::uint64_t>(i);
    Rng rng(c.seed);
    std::uniform_int_distribution<int> small(1, 3), ch(1, 6), sp(2, 7);
    c.batch = small(rng);
    c.channels = ch(rng);
    c.shift_channels = ch(rng);
    c.height = sp(rng);
    c.width = sp(rng);
    c.sigmoid = (i % 2) == 1;
    c.train = (i % 4) < 2;
    fsm::FsmParams<double> p("fsm", c.channels, c.shift_channels,
                             c.sigmoid ? fsm::CaVariant::kSigmoid : fsm::CaVariant::kSoftplusNormalized);
    p.initialize(rng, fsm::FsmInit{3.0, false});
    fill_normal(p.branch_norm.scale.value, rng, 1.0);
    fill_normal(p.branch_norm.offset.value, rng, 0.5);
    fill_normal(p.branch_norm.running_mean.value, rng, 0.5);
    for (double& v : p.branch_norm.running_var.value) v = 0.5 + std::abs(v);
    Tensor4<double> x = random_tensor(Shape4{c.batch, c.channels, c.height, c.width}, rng);

    // The oracle must see the running stats as they were before the forward.
    const Tensor4<double> expected = fsm::fsm_oracle(x, p, c.train);
    const Tensor4<double> got = fsm::fsm_forward(x, p, c.train);
    for (std::size_t j = 0; j < got.size(); ++j) {
      const double d = std::abs(got[j] - expected[j]) / std::max({std::abs(got[j]), std::abs(expected[j]), 1e-3});
      c.max_rel_error = std::max(c.max_rel_error, d);
    }
    r.max_rel_error = std::max(r.max_rel_error, c.max_rel_error);
    r.cases.push_back(c);
  }
  r.pass = r.max_rel_error < tolerance;
  return r;
}

}  // namespace ssn
