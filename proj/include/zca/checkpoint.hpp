#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "zca/diffusion.hpp"
#include "zca/network.hpp"
#include "zca/params.hpp"

namespace zca {

// A checkpoint directory holds
//   manifest.txt  key = value header, then one `param` line per tensor:
//                 param <name> group=<g> frozen=<0|1> shape=<d0,d1,..> offset=<bytes> count=<n>
//   params.f32    all tensors, little-endian 32-bit floats, manifest order
//   schedule.f64  beta then alpha_bar, little-endian 64-bit floats
struct Checkpoint {
  UNetConfig model;
  NoiseSchedule schedule;
  double beta_start = 0, beta_end = 0;
  ParamStore<float> params;
  std::map<std::string, std::string> meta;  // stage, iteration, ...
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Raw little-endian blobs.
void write_f32_blob(const std::filesystem::path& path, const std::vector<float>& values);
std::vector<float> read_f32_blob(const std::filesystem::path& path);
void write_f64_blob(const std::filesystem::path& path, const std::vector<double>& values);
std::vector<double> read_f64_blob(const std::filesystem::path& path);

}  // namespace zca
