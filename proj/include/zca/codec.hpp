#pragma once

#include <filesystem>

#include "zca/diffusion.hpp"
#include "zca/tensor.hpp"

namespace zca {

// (3, H, W) RGB image with values in [0, 1]. Single-channel (1, H, W) tensors
// of the same type are used for masks.
using ImageTensor = Tensor<double>;

inline constexpr int kLatentChannels = 4;
inline constexpr int kDefaultPatch = 4;

// Per-channel mean over non-overlapping patch x patch blocks. Any channel count.
Tensor<double> patch_mean(const Tensor<double>& img, int patch);

// Fixed stand-in for a learned image encoder: patch means of the three colour
// channels plus one zero channel, giving a (4, H/patch, W/patch) latent.
LatentTensor encode(const ImageTensor& img, int patch = kDefaultPatch);

// Nearest-neighbour upsample of latent channels 0..2, clamped to [0, 1].
ImageTensor decode(const LatentTensor& lat, int patch = kDefaultPatch);

// Binary PPM (P6, 8-bit) for RGB and PGM (P5, 8-bit) for single-channel images.
void write_ppm(const std::filesystem::path& path, const ImageTensor& img);
ImageTensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor<double>& gray);
Tensor<double> read_pgm(const std::filesystem::path& path);

}  // namespace zca
