#include "zca/codec.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace zca {

Tensor<double> patch_mean(const Tensor<double>& img, int patch) {
  if (img.rank() != 3) throw std::invalid_argument("patch_mean: expected (C, H, W)");
  if (patch < 1 || img.dim(1) % patch != 0 || img.dim(2) % patch != 0) {
    throw std::invalid_argument("patch_mean: image " + shape_str(img.shape()) + " not divisible by patch " +
                                std::to_string(patch));
  }
  const int c = img.dim(0), h = img.dim(1) / patch, w = img.dim(2) / patch;
  Tensor<double> out({c, h, w});
  const double inv = 1.0 / (patch * patch);
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double s = 0.0;
        for (int di = 0; di < patch; ++di)
          for (int dj = 0; dj < patch; ++dj) s += img.at(ci, i * patch + di, j * patch + dj);
        out.at(ci, i, j) = s * inv;
      }
  return out;
}

LatentTensor encode(const ImageTensor& img, int patch) {
  if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("encode: expected a (3, H, W) image");
  const Tensor<double> means = patch_mean(img, patch);
  LatentTensor lat({kLatentChannels, means.dim(1), means.dim(2)});
  std::copy(means.data(), means.data() + means.size(), lat.data());
  return lat;
}

ImageTensor decode(const LatentTensor& lat, int patch) {
  if (lat.rank() != 3 || lat.dim(0) != kLatentChannels) {
    throw std::invalid_argument("decode: expected a 4-channel latent, got " + shape_str(lat.shape()));
  }
  if (patch < 1) throw std::invalid_argument("decode: patch must be positive");
  const int h = lat.dim(1) * patch, w = lat.dim(2) * patch;
  ImageTensor img({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) img.at(c, i, j) = std::clamp(lat.at(c, i / patch, j / patch), 0.0, 1.0);
  return img;
}

namespace {

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_netpbm(const std::filesystem::path& path, const Tensor<double>& img, int channels, const char* magic) {
  if (img.rank() != 3 || img.dim(0) != channels) {
    throw std::invalid_argument(std::string("write ") + magic + ": expected " + std::to_string(channels) +
                                " channels, got " + shape_str(img.shape()));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const int h = img.dim(1), w = img.dim(2);
  os << magic << '\n' << w << ' ' << h << "\n255\n";
  std::string row(static_cast<std::size_t>(w * channels), '\0');
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < channels; ++c) row[static_cast<std::size_t>(j * channels + c)] = static_cast<char>(to_byte(img.at(c, i, j)));
    os.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

// Reads the next header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& is) {
  std::string tok;
  while (is) {
    const int ch = is.get();
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    if (ch == EOF) break;
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

Tensor<double> read_netpbm(const std::filesystem::path& path, int channels, const char* magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  if (header_token(is) != magic) throw std::runtime_error(path.string() + ": expected " + magic + " header");
  const int w = std::stoi(header_token(is));
  const int h = std::stoi(header_token(is));
  const int maxval = std::stoi(header_token(is));
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw std::runtime_error(path.string() + ": unsupported header");
  Tensor<double> img({channels, h, w});
  std::string row(static_cast<std::size_t>(w * channels), '\0');
  for (int i = 0; i < h; ++i) {
    is.read(row.data(), static_cast<std::streamsize>(row.size()));
    if (!is) throw std::runtime_error(path.string() + ": truncated pixel data");
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < channels; ++c)
        img.at(c, i, j) = static_cast<unsigned char>(row[static_cast<std::size_t>(j * channels + c)]) / static_cast<double>(maxval);
  }
  return img;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const ImageTensor& img) { write_netpbm(path, img, 3, "P6"); }
ImageTensor read_ppm(const std::filesystem::path& path) { return read_netpbm(path, 3, "P6"); }
void write_pgm(const std::filesystem::path& path, const Tensor<double>& gray) { write_netpbm(path, gray, 1, "P5"); }
Tensor<double> read_pgm(const std::filesystem::path& path) { return read_netpbm(path, 1, "P5"); }

}  // namespace zca
