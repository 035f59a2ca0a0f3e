#include "zca/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace zca {

AugmentConfig AugmentConfig::disabled() {
  AugmentConfig c;
  c.flip_p = c.shift_p = c.scale_p = c.hsv_p = c.contrast_p = 0;
  return c;
}

void AugmentConfig::validate() const {
  for (double p : {flip_p, shift_p, scale_p, hsv_p, contrast_p}) {
    if (!(p >= 0 && p <= 1)) throw std::invalid_argument("augment: probabilities must lie in [0, 1]");
  }
  for (double l : {shift_limit, scale_limit, hsv_limit, contrast_limit}) {
    if (!(l >= 0)) throw std::invalid_argument("augment: limits must be non-negative");
  }
  // A shift of a full extent or a zero scale leaves nothing of the image on the canvas.
  if (shift_limit >= 1 || scale_limit >= 1 || contrast_limit >= 1) {
    throw std::invalid_argument("augment: shift, scale and contrast limits must be below 1");
  }
}

AugmentDraw draw_augmentation(const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  AugmentDraw d;
  d.flip = rng.bernoulli(cfg.flip_p);
  for (StreamWarp* w : {&d.clothing, &d.condition}) {
    if (rng.bernoulli(cfg.shift_p)) {
      w->shift_x = rng.uniform(-cfg.shift_limit, cfg.shift_limit);
      w->shift_y = rng.uniform(-cfg.shift_limit, cfg.shift_limit);
    }
    if (rng.bernoulli(cfg.scale_p)) w->scale = 1 + rng.uniform(-cfg.scale_limit, cfg.scale_limit);
  }
  if (rng.bernoulli(cfg.hsv_p)) d.hue_degrees = rng.uniform(-cfg.hsv_limit, cfg.hsv_limit);
  if (rng.bernoulli(cfg.contrast_p)) d.contrast = 1 + rng.uniform(-cfg.contrast_limit, cfg.contrast_limit);
  return d;
}

Affine2 stream_transform(const StreamWarp& w, bool flip, int height, int width) {
  Affine2 t = flip ? Affine2::flip_x(width) : Affine2{};
  if (w.scale != 1) t = Affine2::similarity(w.scale, 0, 0.5 * width, 0.5 * height).after(t);
  if (w.shift_x != 0 || w.shift_y != 0) t = Affine2::translation(w.shift_x * width, w.shift_y * height).after(t);
  return t;
}

namespace {

enum class Border { replicate, constant };

Tensor<double> warp_image(const Tensor<double>& img, const Affine2& fwd, Border border, double fill) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const Affine2 inv = fwd.inverse();
  Tensor<double> out(img.shape());
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      auto q = inv.apply(c + 0.5, r + 0.5);
      if (border == Border::replicate) {
        q[0] = std::clamp(q[0], 0.5, W - 0.5);
        q[1] = std::clamp(q[1], 0.5, H - 0.5);
      }
      for (int ch = 0; ch < C; ++ch) out.at(ch, r, c) = sample_bilinear(img, ch, q[0], q[1], fill);
    }
  }
  return out;
}

Tensor<double> warp_mask(const Tensor<double>& mask, const Affine2& fwd) {
  const int H = mask.dim(1), W = mask.dim(2);
  const Affine2 inv = fwd.inverse();
  Tensor<double> out(mask.shape());
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const auto q = inv.apply(c + 0.5, r + 0.5);
      const int rr = static_cast<int>(std::floor(q[1])), cc = static_cast<int>(std::floor(q[0]));
      if (rr >= 0 && rr < H && cc >= 0 && cc < W) out.at(0, r, c) = mask.at(0, rr, cc);
    }
  }
  return out;
}

void rotate_hue(Tensor<double>& img, double degrees) {
  const int H = img.dim(1), W = img.dim(2);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      double& R = img.at(0, r, c);
      double& G = img.at(1, r, c);
      double& B = img.at(2, r, c);
      const double mx = std::max({R, G, B}), mn = std::min({R, G, B}), delta = mx - mn;
      if (delta <= 0) continue;
      double h;
      if (mx == R) h = 60.0 * std::fmod((G - B) / delta, 6.0);
      else if (mx == G) h = 60.0 * ((B - R) / delta + 2.0);
      else h = 60.0 * ((R - G) / delta + 4.0);
      h = std::fmod(h + degrees, 360.0);
      if (h < 0) h += 360.0;
      const double x = delta * (1 - std::abs(std::fmod(h / 60.0, 2.0) - 1));
      double rgb[3];
      if (h < 60) rgb[0] = delta, rgb[1] = x, rgb[2] = 0;
      else if (h < 120) rgb[0] = x, rgb[1] = delta, rgb[2] = 0;
      else if (h < 180) rgb[0] = 0, rgb[1] = delta, rgb[2] = x;
      else if (h < 240) rgb[0] = 0, rgb[1] = x, rgb[2] = delta;
      else if (h < 300) rgb[0] = x, rgb[1] = 0, rgb[2] = delta;
      else rgb[0] = delta, rgb[1] = 0, rgb[2] = x;
      R = rgb[0] + mn;
      G = rgb[1] + mn;
      B = rgb[2] + mn;
    }
  }
}

void stretch_contrast(Tensor<double>& img, double factor) {
  for (auto& v : img.values()) v = std::clamp(0.5 + factor * (v - 0.5), 0.0, 1.0);
}

}  // namespace

SyntheticSample apply_augmentation(const SyntheticSample& s, const AugmentDraw& d) {
  const int H = s.person.dim(1), W = s.person.dim(2);
  SyntheticSample out = s;
  if (d.flip || !d.clothing.identity()) {
    const Affine2 tc = stream_transform(d.clothing, d.flip, H, W);
    out.clothing = warp_image(s.clothing, tc, Border::constant, 0.85);
    out.clothing_from_texture = tc.after(s.clothing_from_texture);
  }
  if (d.flip || !d.condition.identity()) {
    const Affine2 tp = stream_transform(d.condition, d.flip, H, W);
    out.person = warp_image(s.person, tp, Border::replicate, 0);
    out.agnostic = warp_image(s.agnostic, tp, Border::replicate, 0);
    out.pose = warp_image(s.pose, tp, Border::constant, 0);
    out.garment_mask = warp_mask(s.garment_mask, tp);
    out.agnostic_mask = warp_mask(s.agnostic_mask, tp);
    out.person_from_texture = tp.after(s.person_from_texture);
  }
  if (d.hue_degrees != 0) {
    for (ImageTensor* img : {&out.clothing, &out.person, &out.agnostic}) rotate_hue(*img, d.hue_degrees);
  }
  if (d.contrast != 1) {
    for (ImageTensor* img : {&out.clothing, &out.person, &out.agnostic}) stretch_contrast(*img, d.contrast);
  }
  return out;
}

SyntheticSample augment_pair(const SyntheticSample& s, const AugmentConfig& cfg, Rng& rng) {
  return apply_augmentation(s, draw_augmentation(cfg, rng));
}

namespace {
constexpr double kFlatRange = 0.02;
}

AnnotationCheck annotation_consistency(const SyntheticSample& s) {
  const int H = s.person.dim(1), W = s.person.dim(2);
  const Affine2 texture_from_person = s.person_from_texture.inverse();
  AnnotationCheck res;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      if (s.garment_mask.at(0, r, c) < 0.5) continue;
      const auto t = texture_from_person.apply(c + 0.5, r + 0.5);
      if (!s.texture_box.contains(t[0], t[1], 2.5)) continue;
      const auto q = s.clothing_from_texture.apply(t[0], t[1]);
      // texture must be near-constant over a 5x5 texture-pixel neighbourhood
      bool flat = true;
      double lo[3] = {1e9, 1e9, 1e9}, hi[3] = {-1e9, -1e9, -1e9};
      for (int dy = -2; dy <= 2 && flat; ++dy) {
        for (int dx = -2; dx <= 2 && flat; ++dx) {
          const auto n = s.clothing_from_texture.apply(t[0] + dx, t[1] + dy);
          const int rr = static_cast<int>(std::floor(n[1])), cc = static_cast<int>(std::floor(n[0]));
          if (rr < 0 || rr >= H || cc < 0 || cc >= W) {
            flat = false;
            break;
          }
          for (int ch = 0; ch < 3; ++ch) {
            const double v = s.clothing.at(ch, rr, cc);
            lo[ch] = std::min(lo[ch], v);
            hi[ch] = std::max(hi[ch], v);
            if (hi[ch] - lo[ch] > kFlatRange) flat = false;
          }
        }
      }
      if (!flat) continue;
      for (int ch = 0; ch < 3; ++ch) {
        const double want = sample_bilinear(s.clothing, ch, q[0], q[1], 0.85);
        res.max_error = std::max(res.max_error, std::abs(want - s.person.at(ch, r, c)));
      }
      ++res.checked_pixels;
    }
  }
  return res;
}

}  // namespace zca
