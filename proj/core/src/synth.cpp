#include "ssn/synth.hpp"

#include <cmath>
#include <numbers>

#include "ssn/error.hpp"
#include "ssn/ops.hpp"

namespace ssn {

Tensor4<double> heatmap_target(const std::vector<Point>& keypoints, int height, int width, double sigma) {
  if (!(sigma > 0)) throw ConfigError("heatmap sigma must be > 0");
  Tensor4<double> maps(Shape4{1, static_cast<int>(std::max<std::size_t>(keypoints.size(), 1)), height, width});
  for (std::size_t m = 0; m < keypoints.size(); ++m) {
    const Point k = keypoints[m];
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double d2 = (x - k.x) * (x - k.x) + (y - k.y) * (y - k.y);
        maps(0, static_cast<int>(m), y, x) = std::exp(-d2 / (2 * sigma * sigma));
      }
    }
  }
  return maps;
}

namespace {

void add_blob(Tensor4<double>& img, int c, Point p, double sigma, double amplitude) {
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const double d2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
      img(0, c, y, x) += amplitude * std::exp(-d2 / (2 * sigma * sigma));
    }
  }
}

double dist(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace

SynthSample SynthDataset::generate(const SynthSpec& spec, int index) {
  const int s = spec.image_size;
  if (std::abs(spec.displacement_x) >= s || std::abs(spec.displacement_y) >= s) {
    throw ConfigError("synth: displacement must be smaller than the image size");
  }
  if (spec.channels != 1 && spec.channels != 3) throw ConfigError("synth: channels must be 1 or 3");
  if (spec.heatmap_stride < 1 || s % spec.heatmap_stride != 0) {
    throw ConfigError("synth: heatmap_stride must divide image_size");
  }
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);

  const int lo = spec.margin, hi = s - 1 - spec.margin;
  const int dx = static_cast<int>(std::lround(spec.displacement_x));
  const int dy = static_cast<int>(std::lround(spec.displacement_y));
  const int cx_lo = std::max(lo, lo - dx), cx_hi = std::min(hi, hi - dx);
  const int cy_lo = std::max(lo, lo - dy), cy_hi = std::min(hi, hi - dy);
  if (cx_lo > cx_hi || cy_lo > cy_hi) throw Error("synth: no room for cue/target pair with this displacement");

  SynthSample out;
  std::uniform_int_distribution<int> ux(cx_lo, cx_hi), uy(cy_lo, cy_hi);
  out.cue = {double(ux(rng)), double(uy(rng))};
  const Point target{out.cue.x + spec.displacement_x, out.cue.y + spec.displacement_y};
  out.keypoints = {target};

  std::uniform_int_distribution<int> any(lo, hi);
  constexpr int kMaxTries = 10000;
  for (int d = 0; d < spec.distractors; ++d) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxTries && !placed; ++attempt) {
      const Point p{double(any(rng)), double(any(rng))};
      bool ok = dist(p, target) >= spec.min_separation && dist(p, out.cue) >= spec.min_separation;
      for (const Point& q : out.distractor_positions) ok = ok && dist(p, q) >= spec.min_separation;
      if (ok) {
        out.distractor_positions.push_back(p);
        placed = true;
      }
    }
    if (!placed) {
      throw Error("synth: could not place distractor " + std::to_string(d) + " for sample " + std::to_string(index) +
                  " after " + std::to_string(kMaxTries) + " tries");
    }
  }

  Tensor4<double> img(Shape4{1, spec.channels, s, s});
  if (spec.channels == 3) {
    add_blob(img, 0, out.cue, spec.cue_sigma, 1.0);
    add_blob(img, 1, target, spec.blob_sigma, 1.0);
    for (const Point& p : out.distractor_positions) add_blob(img, 1, p, spec.blob_sigma, 1.0);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) img(0, 2, y, x) = 0.5 * (img(0, 0, y, x) + img(0, 1, y, x));
  } else {
    add_blob(img, 0, out.cue, spec.cue_sigma, -1.0);
    add_blob(img, 0, target, spec.blob_sigma, 1.0);
    for (const Point& p : out.distractor_positions) add_blob(img, 0, p, spec.blob_sigma, 1.0);
  }
  if (spec.noise_std > 0) {
    std::normal_distribution<double> noise(0.0, spec.noise_std);
    for (double& v : img.values()) v += noise(rng);
  }
  out.image = std::move(img);
  const int hm = s / spec.heatmap_stride;
  out.target_heatmaps = heatmap_target({Point{target.x / spec.heatmap_stride, target.y / spec.heatmap_stride}}, hm, hm,
                                       spec.heatmap_sigma);
  return out;
}

SynthDataset::SynthDataset(SynthSpec spec) : spec_(spec) {
  if (spec_.count < 1) throw ConfigError("synth: count must be >= 1");
  samples_.reserve(static_cast<std::size_t>(spec_.count));
  for (int i = 0; i < spec_.count; ++i) samples_.push_back(generate(spec_, i));
}

Point matched_filter_locate(const SynthSample& s) {
  const int c = s.image.channels() == 3 ? 1 : 0;
  const int h = s.image.height(), w = s.image.width();
  double best = -std::numeric_limits<double>::infinity();
  Point best_p;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double r = 0;
      for (int ky = -1; ky <= 1; ++ky) {
        for (int kx = -1; kx <= 1; ++kx) {
          const int yy = y + ky, xx = x + kx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) r += s.image(0, c, yy, xx);
        }
      }
      if (r > best) {
        best = r;
        best_p = {double(x), double(y)};
      }
    }
  }
  return best_p;
}

double matched_filter_accuracy(const SynthDataset& data, double radius) {
  int hits = 0;
  for (int i = 0; i < data.size(); ++i) {
    const SynthSample& s = data[i];
    const Point p = matched_filter_locate(s);
    if (std::hypot(p.x - s.keypoints[0].x, p.y - s.keypoints[0].y) <= radius) ++hits;
  }
  return double(hits) / data.size();
}

// ---------------------------------------------------------------------------

Point AffineDraw::apply(Point p, double cx, double cy) const {
  const double t = rotation_deg * std::numbers::pi / 180.0;
  const double ux = p.x - cx, uy = p.y - cy;
  return {cx + scale * (std::cos(t) * ux - std::sin(t) * uy) + shift_x,
          cy + scale * (std::sin(t) * ux + std::cos(t) * uy) + shift_y};
}

Point AffineDraw::invert(Point p, double cx, double cy) const {
  const double t = rotation_deg * std::numbers::pi / 180.0;
  const double ux = (p.x - cx - shift_x) / scale, uy = (p.y - cy - shift_y) / scale;
  return {cx + std::cos(t) * ux + std::sin(t) * uy, cy - std::sin(t) * ux + std::cos(t) * uy};
}

AffineDraw draw_affine(const AugmentRanges& r, int width, int height, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> rot(-r.rotation_deg, r.rotation_deg);
  std::uniform_real_distribution<double> scale(r.scale_min, r.scale_max);
  std::uniform_real_distribution<double> shift(-r.shift_frac, r.shift_frac);
  AffineDraw a;
  a.rotation_deg = rot(rng);
  a.scale = scale(rng);
  a.shift_x = shift(rng) * width;
  a.shift_y = shift(rng) * height;
  return a;
}

SynthSample apply_affine(const SynthSample& s, const AffineDraw& a, double heatmap_sigma) {
  const int h = s.image.height(), w = s.image.width();
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  SynthSample out = s;
  for (int c = 0; c < s.image.channels(); ++c) {
    auto plane = s.image.plane(0, c);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Point src = a.invert({double(x), double(y)}, cx, cy);
        out.image(0, c, y, x) = ops::bilinear_sample<double>(plane, h, w, src.x, src.y);
      }
    }
  }
  for (Point& k : out.keypoints) k = a.apply(k, cx, cy);
  for (Point& k : out.distractor_positions) k = a.apply(k, cx, cy);
  out.cue = a.apply(s.cue, cx, cy);
  const int mh = s.target_heatmaps.height(), mw = s.target_heatmaps.width();
  const double stride = double(w) / mw;
  std::vector<Point> scaled;
  for (const Point& k : out.keypoints) scaled.push_back({k.x / stride, k.y / stride});
  out.target_heatmaps = heatmap_target(scaled, mh, mw, heatmap_sigma);
  return out;
}

SynthSample augment_sample(const SynthSample& s, const AugmentRanges& r, double heatmap_sigma, std::mt19937_64& rng) {
  return apply_affine(s, draw_affine(r, s.image.width(), s.image.height(), rng), heatmap_sigma);
}

}  // namespace ssn
