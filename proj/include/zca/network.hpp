#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "zca/diffusion.hpp"
#include "zca/graph.hpp"
#include "zca/objectives.hpp"
#include "zca/params.hpp"

namespace zca {

inline constexpr int kZetaChannels = 13;  // z_t (4) + agnostic (4) + mask (1) + pose (4)
inline constexpr int kExtraChannels = kZetaChannels - 4;

struct UNetConfig {
  int base_width = 16;
  int depth = 2;
  int heads = 4;
  int latent_h = 16;
  int latent_w = 12;
  int image_h = 64;  // exemplar resolution
  int image_w = 48;
  int groups = 4;
  int embed_width = 8;

  int temb_dim() const { return 4 * base_width; }
  int channels(int level) const { return level == 0 ? base_width : 2 * base_width; }
  int level_h(int level) const { return latent_h >> level; }
  int level_w(int level) const { return latent_w >> level; }
  // Levels carrying zero cross-attention: every level except the coarsest.
  std::vector<int> attn_levels() const;
  void validate() const;
};

// The four conditioned U-Net inputs at latent resolution.
struct ZetaInput {
  LatentTensor z_t;           // (4, h, w)
  LatentTensor agnostic_lat;  // (4, h, w)
  Tensor<double> mask;        // (1, h, w) in [0, 1]
  LatentTensor pose_lat;      // (4, h, w)
};

// [z_t; E(x_a); x_ma; E(x_p)] in that order -> (13, h, w).
LatentTensor assemble_zeta(const ZetaInput& z);

// Finest to coarsest spatial-encoder feature maps.
template <typename T>
using FeaturePyramid = std::vector<Tensor<T>>;

struct UNetVars {
  Var eps_hat;
  std::vector<Var> attn;  // one (Hq*Wq, hk*wk) node per zero cross-attention block, finest first
  std::vector<int> attn_level;
};

struct BlockVars {
  Var out;
  Var attn;
};

template <typename T>
struct UNetOutput {
  Tensor<T> eps_hat;
  std::vector<AttentionMap<T>> attn;
};

// Miniature denoising U-Net with a zero-initialised 9-channel input expansion,
// a spatial encoder built as a structural copy of the U-Net encoder, zero
// cross-attention blocks on the decoder side, and a global exemplar embedder
// feeding the timestep-embedding pathway.
template <typename T>
class ConditionedUNet {
 public:
  ConditionedUNet(UNetConfig cfg, std::uint64_t seed);
  // Wraps an existing parameter set (e.g. loaded from a checkpoint).
  ConditionedUNet(UNetConfig cfg, ParamStore<T> params);

  const UNetConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // Overwrites the spatial encoder with the current U-Net encoder weights.
  void copy_encoder_to_spatial();

  // Graph-level building blocks.
  Var time_embedding(ParamBinder<T>& b, int t) const;
  Var exemplar_embed(ParamBinder<T>& b, Var image) const;
  std::vector<Var> spatial_encoder(ParamBinder<T>& b, Var clothing, Var temb) const;
  BlockVars zero_cross_attention(ParamBinder<T>& b, int level, Var x, Var kv) const;
  // zeta is (13, h, w), or (4, h, w) for the unconditioned base path.
  // Without a pyramid the zero cross-attention blocks are skipped.
  UNetVars unet(ParamBinder<T>& b, Var zeta, Var temb, const std::vector<Var>* pyramid) const;

  // Full conditioned pass: exemplar embedding, spatial encoder and U-Net.
  UNetVars forward(ParamBinder<T>& b, const Tensor<T>& zeta, int t, const Tensor<T>* exemplar_image,
                   const Tensor<T>* clothing_lat) const;

  // Value-level wrappers.
  Tensor<T> exemplar_embed(const Tensor<T>& image) const;
  FeaturePyramid<T> spatial_encoder_forward(const Tensor<T>& clothing_lat, int t) const;
  std::pair<Tensor<T>, AttentionMap<T>> zero_cross_attention(int level, const Tensor<T>& x, const Tensor<T>& kv) const;
  UNetOutput<T> unet_forward(const Tensor<T>& zeta, int t, const Tensor<T>* exemplar_embedding,
                             const FeaturePyramid<T>* pyramid) const;
  UNetOutput<T> predict(const Tensor<T>& zeta, int t, const Tensor<T>* exemplar_image,
                        const Tensor<T>* clothing_lat) const;

 private:
  struct Conv {
    int w = -1, b = -1;
  };
  struct Lin {
    int w = -1, b = -1;
  };
  struct Norm {
    int g = -1, b = -1;
  };
  struct Res {
    Norm n1;
    Conv c1;
    Lin temb;
    Norm n2;
    Conv c2;
    Conv skip;
  };
  struct Zca {
    Norm ln1;
    Lin sq, sk, sv, so;
    Norm ln2, ln_kv;
    Lin cq, ck, cv, co;
    Norm ln3;
    Lin ff1, ff2;
    Lin zero;
  };
  struct Encoder {
    Conv in;
    std::vector<Res> res;
    std::vector<Conv> down;
  };

  void build(std::uint64_t seed);
  void bind_layout();

  Var res_block(ParamBinder<T>& b, const Res& r, Var x, Var temb) const;
  std::vector<Var> encoder_levels(ParamBinder<T>& b, const Encoder& e, Var h, Var temb) const;
  Var lin(ParamBinder<T>& b, const Lin& l, Var x) const;
  Var norm_tokens(ParamBinder<T>& b, const Norm& n, Var x) const;

  UNetConfig cfg_;
  ParamStore<T> params_;
  // layout
  Lin time1_, time2_;
  Conv extra_in_;
  Encoder enc_, spatial_;
  Res mid_;
  std::vector<Res> dec_;
  std::vector<Conv> up_;
  Norm out_norm_;
  Conv out_conv_;
  std::vector<Zca> zca_;  // indexed by level; unused for the coarsest
  Conv emb1_, emb2_;
  Lin emb_proj_;
};

enum class TrainStage {
  pretrain,  // unconditional base model: only the original blocks train
  phase1,    // conditioned denoising: original blocks frozen
  phase2,    // conditioned denoising plus attention TV: same split as phase1
};

// Sets the frozen flag of every parameter for `stage`.
template <typename T>
void apply_freeze_policy(ParamStore<T>& params, TrainStage stage) {
  for (auto& p : params.all()) {
    const bool original = p.group == "base";
    p.frozen = stage == TrainStage::pretrain ? !original : original;
  }
}

// Sinusoidal embedding of a step index, (1, dim).
template <typename T>
Tensor<T> timestep_features(int t, int dim);

}  // namespace zca
