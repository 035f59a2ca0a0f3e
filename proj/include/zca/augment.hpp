#pragma once

#include "zca/rng.hpp"
#include "zca/synthetic.hpp"

namespace zca {

struct AugmentConfig {
  double flip_p = 0.5;
  double shift_limit = 0.2;  // fraction of the image extent, per axis
  double shift_p = 0.5;
  double scale_limit = 0.2;  // relative
  double scale_p = 0.5;
  double hsv_limit = 5;      // hue rotation amplitude, degrees
  double hsv_p = 0.5;
  double contrast_limit = 0.3;
  double contrast_p = 0.5;

  static AugmentConfig disabled();
  void validate() const;
};

// Geometric parameters of one stream (clothing or U-Net conditions).
struct StreamWarp {
  double shift_x = 0, shift_y = 0;  // fractions of width / height
  double scale = 1;
  bool identity() const { return shift_x == 0 && shift_y == 0 && scale == 1; }
};

// One concrete augmentation draw.
struct AugmentDraw {
  bool flip = false;
  StreamWarp clothing;
  StreamWarp condition;
  double hue_degrees = 0;
  double contrast = 1;
};

AugmentDraw draw_augmentation(const AugmentConfig& cfg, Rng& rng);

// Pixel-space affine of one stream: shift after scale (about the image
// centre) after an optional flip.
Affine2 stream_transform(const StreamWarp& w, bool flip, int height, int width);

// Applies a draw: geometry per stream (images bilinear, masks nearest
// neighbour), then the joint photometric jitter on clothing, person and
// agnostic. The placement affines are composed so correspondence stays exact.
SyntheticSample apply_augmentation(const SyntheticSample& s, const AugmentDraw& d);

SyntheticSample augment_pair(const SyntheticSample& s, const AugmentConfig& cfg, Rng& rng);

struct AnnotationCheck {
  double max_error = 0;
  int checked_pixels = 0;
};

// Compares the person's garment pixels against the clothing image sampled
// through the annotated transform, on pixels whose texture neighbourhood is
// nearly flat (range <= 0.02), so resampling blur stays small.
AnnotationCheck annotation_consistency(const SyntheticSample& s);

}  // namespace zca
