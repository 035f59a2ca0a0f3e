#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "zca/codec.hpp"
#include "zca/rng.hpp"

namespace zca {

// x' = a x + b y + c,  y' = d x + e y + f, in continuous pixel coordinates
// (x to the right, y down, pixel (r, c) covering [c, c+1) x [r, r+1)).
struct Affine2 {
  double a = 1, b = 0, c = 0;
  double d = 0, e = 1, f = 0;

  std::array<double, 2> apply(double x, double y) const { return {a * x + b * y + c, d * x + e * y + f}; }
  double det() const { return a * e - b * d; }
  // Throws std::domain_error for a (near) singular map.
  Affine2 inverse() const;
  // (*this)(other(p))
  Affine2 after(const Affine2& other) const;

  static Affine2 translation(double dx, double dy);
  // Scale s and rotation `degrees` about (cx, cy).
  static Affine2 similarity(double s, double degrees, double cx, double cy);
  static Affine2 flip_x(double width);
};

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(double x, double y, double inset = 0.0) const {
    return x >= x0 + inset && x <= x1 - inset && y >= y0 + inset && y <= y1 - inset;
  }
};

enum class TextureFamily { stripes, checkers, glyphs, color_fields };

struct DatasetConfig {
  int image_h = 64;
  int image_w = 48;
  // Canonical garment box in the clothing image (texture space), pixels.
  int box_x0 = 10, box_y0 = 12, box_x1 = 38, box_y1 = 52;
  double max_translation = 4.0;  // pixels, per axis
  double max_scale = 0.1;        // relative
  double max_rotation = 10.0;    // degrees
  int mask_margin = 2;           // dilation of the garment mask, pixels
  std::vector<TextureFamily> families{TextureFamily::stripes, TextureFamily::checkers, TextureFamily::glyphs,
                                      TextureFamily::color_fields};

  Box texture_box() const {
    return {static_cast<double>(box_x0), static_cast<double>(box_y0), static_cast<double>(box_x1),
            static_cast<double>(box_y1)};
  }
  // Rejects ranges that can push any garment corner off the canvas.
  void validate() const;
};

inline constexpr double kNeutralGray = 0.5;
inline constexpr int kNoCorrespondence = -1;

struct SyntheticSample {
  ImageTensor person;            // (3, H, W)
  ImageTensor clothing;          // (3, H, W)
  ImageTensor agnostic;          // (3, H, W)
  Tensor<double> agnostic_mask;  // (1, H, W) binary
  ImageTensor pose;              // (3, H, W): texture u, texture v, inside flag
  Tensor<double> garment_mask;   // (1, H, W) binary
  Box texture_box;
  Affine2 clothing_from_texture;
  Affine2 person_from_texture;
  TextureFamily family = TextureFamily::stripes;

  // truth_transform: clothing-image coordinates -> person-image coordinates.
  Affine2 truth_transform() const { return person_from_texture.after(clothing_from_texture.inverse()); }
};

SyntheticSample generate_sample(Rng& rng, const DatasetConfig& cfg);

// Renders a sample for an explicit person_from_texture placement (no draw).
SyntheticSample render_sample(Rng& rng, const DatasetConfig& cfg, TextureFamily family, const Affine2& placement);

// Key index k*wk + l for each garment query cell, kNoCorrespondence elsewhere.
// Returned as (Hq, Wq).
Tensor<int> correspondence_truth(const SyntheticSample& s, int query_h, int query_w, int key_h, int key_w);

// Bilinear sample of channel `ch` at continuous point (x, y); outside -> fill.
double sample_bilinear(const Tensor<double>& img, int ch, double x, double y, double fill);

// Brute-force re-rendering of the garment through truth_transform: for every
// person pixel inside the garment mask, the clothing image sampled at the
// inverse-mapped pixel centre. Pixels outside the mask are 0.
ImageTensor rewarp_garment(const SyntheticSample& s);

// Dataset persistence: one sub-directory per sample plus index.csv.
void save_sample(const std::filesystem::path& dir, const SyntheticSample& s);
SyntheticSample load_sample(const std::filesystem::path& dir);
void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples,
                  const std::vector<std::uint64_t>& seeds);

std::string family_name(TextureFamily f);
TextureFamily parse_family(const std::string& name);

// Samples drawn from one seed; sample i uses a stream derived from (seed, i).
std::vector<SyntheticSample> generate_dataset(std::uint64_t seed, int count, const DatasetConfig& cfg);
std::uint64_t sample_seed(std::uint64_t seed, int index);

}  // namespace zca
