#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "zca/config.hpp"
#include "zca/network.hpp"
#include "zca/objectives.hpp"
#include "zca/synthetic.hpp"

namespace zca {

struct BlockStats {
  int level = 0;
  int query_h = 0, query_w = 0, key_h = 0, key_w = 0;
  long queries = 0;  // garment-region queries with a truth index
  long hits_r0 = 0;
  long hits_r1 = 0;
  double entropy_sum = 0;
  double tv_sum = 0;  // masked center-map TV summed over samples
  int samples = 0;

  double acc_r0() const { return queries ? static_cast<double>(hits_r0) / queries : 0; }
  double acc_r1() const { return queries ? static_cast<double>(hits_r1) / queries : 0; }
  double mean_entropy() const { return queries ? entropy_sum / queries : 0; }
  double mean_tv() const { return samples ? tv_sum / samples : 0; }
  double chance() const { return 1.0 / (key_h * key_w); }
};

struct EvalReport {
  std::vector<BlockStats> blocks;  // finest first
  double rmse = 0;                 // garment-region RMSE of repainted samples
  int rmse_samples = 0;

  long queries() const;
  double acc_r0() const;
  double acc_r1() const;
  // Query-weighted mean of 1/(hk wk) over blocks.
  double chance() const;
  double mean_entropy() const;
  // Mean over samples of the TV summed over blocks.
  double mean_tv() const;
};

// Scores one sample's attention maps (finest first, one per attention level)
// against correspondence_truth and accumulates into `blocks`.
template <typename T>
void score_attention(const std::vector<AttentionMap<T>>& maps, const SyntheticSample& s, std::vector<BlockStats>& blocks);

// Attention captured at the fixed step t_eval with per-sample fixed noise;
// RMSE from full repainted sampling on the first `sample_subset` samples.
EvalReport eval_correspondence(const ConditionedUNet<float>& net, const NoiseSchedule& sched,
                               const std::vector<SyntheticSample>& set, const ExperimentConfig& cfg, int t_eval,
                               int sample_subset);

// Reverse diffusion for one sample with the known (non-garment) region
// re-imposed from the encoded agnostic map after every step.
LatentTensor sample_tryon(const ConditionedUNet<float>& net, const NoiseSchedule& sched, const SyntheticSample& s,
                          const ExperimentConfig& cfg, Rng& rng);

inline constexpr const char* kMetricsHeader =
    "label,block,level,query_h,query_w,key_h,key_w,queries,acc_r0,acc_r1,chance,entropy,masked_tv,rmse,rmse_samples";
void write_metrics_csv(const std::filesystem::path& path, const std::string& label, const EvalReport& r);

// Per block: attn_l<level>.f32 (Hq*Wq*hk*wk floats), overlay_l<level>.ppm
// ((Hq*hk) x (Wq*wk)), center_l<level>.ppm and one manifest.txt.
std::vector<std::filesystem::path> dump_attention(const ConditionedUNet<float>& net, const NoiseSchedule& sched,
                                                  const SyntheticSample& s, const ExperimentConfig& cfg, int t_eval,
                                                  const std::filesystem::path& out_dir);

// Overlay mosaic: tile (i, j) shows query (i, j)'s attention over the
// clothing image downsampled to the key grid.
ImageTensor attention_mosaic(const AttentionMap<double>& a, const ImageTensor& clothing);
// F rendered over the query grid: red = horizontal, green = vertical
// component, each mapped from [-1/(hk wk), 1/(hk wk)] to [0, 1]; masked
// queries have blue = 1.
ImageTensor center_map_image(const Tensor<double>& F, const Tensor<double>& mask, int key_cells, int scale);

}  // namespace zca
