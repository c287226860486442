#pragma once

// Synthetic long-range-dependency keypoint data, augmentation and heatmap
// targets.
//
// Each image holds one cue blob (channel 0) and several identical target-like
// blobs (channel 1). Only the blob sitting exactly `displacement` away from the
// cue is the keypoint, so a detector has to see both ends of that vector.

#include <cstdint>
#include <random>
#include <vector>

#include "ssn/tensor.hpp"

namespace ssn {

struct Point {
  double x = 0;
  double y = 0;
  bool operator==(const Point&) const = default;
};

struct SynthSpec {
  int image_size = 32;
  int channels = 3;
  double displacement_x = 10;
  double displacement_y = 0;
  double blob_sigma = 1.5;
  double cue_sigma = 1.5;
  int distractors = 2;
  double noise_std = 0.0;
  int count = 256;
  std::uint64_t seed = 0;
  int heatmap_stride = 2;      // image pixels per heatmap cell
  double heatmap_sigma = 1.0;  // in heatmap cells
  int min_separation = 5;      // pixels between any two blobs
  int margin = 3;              // pixels kept clear of the border
};

struct SynthSample {
  Tensor4<double> image;            // [1, channels, S, S]
  std::vector<Point> keypoints;     // image coordinates
  std::vector<Point> distractor_positions;
  Point cue;
  Tensor4<double> target_heatmaps;  // [1, M, S/stride, S/stride]
};

/// Gaussian maps exp(-((x-kx)^2 + (y-ky)^2) / (2 sigma^2)) in map coordinates.
Tensor4<double> heatmap_target(const std::vector<Point>& keypoints, int height, int width, double sigma);

/// Per-channel argmax of maps[b]; ties resolve to the lowest (y, then x).
template <typename T>
std::vector<Point> decode_heatmap(const Tensor4<T>& maps, int b = 0) {
  std::vector<Point> out;
  for (int c = 0; c < maps.channels(); ++c) {
    auto plane = maps.plane(b, c);
    std::size_t best = 0;
    for (std::size_t i = 1; i < plane.size(); ++i) {
      if (plane[i] > plane[best]) best = i;
    }
    out.push_back({double(best % static_cast<std::size_t>(maps.width())),
                   double(best / static_cast<std::size_t>(maps.width()))});
  }
  return out;
}

/// Deterministic generator: sample i depends only on (spec.seed, i).
class SynthDataset {
 public:
  explicit SynthDataset(SynthSpec spec);

  const SynthSpec& spec() const { return spec_; }
  int size() const { return static_cast<int>(samples_.size()); }
  const SynthSample& operator[](int i) const { return samples_.at(static_cast<std::size_t>(i)); }
  int heatmap_size() const { return spec_.image_size / spec_.heatmap_stride; }

  static SynthSample generate(const SynthSpec& spec, int index);

 private:
  SynthSpec spec_;
  std::vector<SynthSample> samples_;
};

/// 3x3 box-matched filter on the target channel, argmax with lowest-index
/// ties. A purely local detector used as a reference for the task difficulty.
Point matched_filter_locate(const SynthSample& s);

/// Fraction of samples whose matched-filter location is within `radius` pixels
/// of the ground-truth keypoint.
double matched_filter_accuracy(const SynthDataset& data, double radius = 1.0);

// ---------------------------------------------------------------------------
// Augmentation.

struct AugmentRanges {
  double rotation_deg = 30;
  double scale_min = 0.75;
  double scale_max = 1.25;
  double shift_frac = 0.05;
};

/// p' = center + scale * R(rotation) (p - center) + shift
struct AffineDraw {
  double rotation_deg = 0;
  double scale = 1;
  double shift_x = 0;  // pixels
  double shift_y = 0;

  Point apply(Point p, double center_x, double center_y) const;
  Point invert(Point p, double center_x, double center_y) const;
};

AffineDraw draw_affine(const AugmentRanges& r, int width, int height, std::mt19937_64& rng);

/// Warps the image (inverse mapping, bilinear, zero fill), moves keypoints and
/// rebuilds the heatmaps at the sample's current heatmap resolution.
SynthSample apply_affine(const SynthSample& s, const AffineDraw& a, double heatmap_sigma);

SynthSample augment_sample(const SynthSample& s, const AugmentRanges& r, double heatmap_sigma, std::mt19937_64& rng);

}  // namespace ssn
