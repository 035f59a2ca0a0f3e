#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "zca/checkpoint.hpp"
#include "zca/config.hpp"
#include "zca/network.hpp"
#include "zca/synthetic.hpp"

namespace zca {

// A sample in model space: latents, masks and the exemplar image.
struct PreparedSample {
  LatentTensor z0;            // E(person)
  LatentTensor agnostic_lat;  // E(agnostic)
  Tensor<double> mask_lat;    // (1, h, w) agnostic mask, max-pooled to latent cells
  LatentTensor pose_lat;      // E(pose)
  LatentTensor clothing_lat;  // E(clothing)
  ImageTensor clothing;       // exemplar image
  std::vector<Tensor<double>> query_masks;  // (Hq, Wq) garment mask per attention level
};

PreparedSample prepare_sample(const SyntheticSample& s, const UNetConfig& model, int patch);

// Max over each patch of a binary (1, H, W) mask.
Tensor<double> mask_to_latent(const Tensor<double>& mask, int patch);

template <typename T>
struct StepLoss {
  Var total;
  Var ldm;
  double ldm_value = 0;
  std::vector<double> atv_values;  // one per attention block, finest first
  double total_value = 0;
};

// Builds the loss of one sample on `b`'s graph. Pretraining uses the
// unconditioned 4-channel path; the conditioned stages use the full model and
// add lambda_atv * sum of attention TV terms (graph nodes only when lambda > 0).
template <typename T>
StepLoss<T> build_step_loss(ParamBinder<T>& b, const ConditionedUNet<T>& net, const PreparedSample& s, int t,
                            const LatentTensor& eps, const NoiseSchedule& sched, TrainStage stage, double lambda_atv);

// Draws training samples: either fresh ones or from a fixed pool, augmented
// when requested.
class SampleSource {
 public:
  SampleSource(const ExperimentConfig& cfg, std::uint64_t seed, bool augment);
  SyntheticSample next();

 private:
  const ExperimentConfig& cfg_;
  Rng rng_;
  bool augment_;
  std::vector<SyntheticSample> pool_;
};

struct FreezeAudit {
  double max_change = 0;
  std::size_t tensors = 0;
  bool passed() const { return max_change == 0; }
};

template <typename T>
std::vector<Tensor<T>> snapshot_frozen(const ParamStore<T>& params);
template <typename T>
FreezeAudit audit_frozen(const ParamStore<T>& params, const std::vector<Tensor<T>>& snapshot);

// Training-curve CSV with a fixed header.
class CurveLog {
 public:
  static constexpr const char* kHeader = "stage,iteration,loss_total,loss_ldm,loss_atv,heldout_ldm,seconds";
  explicit CurveLog(const std::filesystem::path& path);
  void row(const std::string& stage, int iteration, double total, double ldm, double atv,
           std::optional<double> heldout, double seconds);

 private:
  std::ofstream out_;
};

struct PhaseResult {
  TrainStage stage = TrainStage::phase1;
  int iterations = 0;
  double heldout_initial = 0;
  double heldout_final = 0;
  std::vector<double> losses;  // total loss per iteration
  FreezeAudit freeze;
};

// Runs `iters` optimiser steps of one stage on `net`. The freeze policy for
// the stage is applied first; the audit compares frozen tensors before/after.
PhaseResult run_phase(ConditionedUNet<float>& net, const ExperimentConfig& cfg, const NoiseSchedule& sched,
                      TrainStage stage, int iters, CurveLog* log, std::uint64_t stream_seed);

NoiseSchedule schedule_from(const ExperimentConfig& cfg);
Checkpoint to_checkpoint(const ConditionedUNet<float>& net, const ExperimentConfig& cfg, const NoiseSchedule& sched,
                         const std::string& stage, int iterations);
ConditionedUNet<float> model_from(const Checkpoint& ck);

struct TrainOutcome {
  std::filesystem::path checkpoint;
  PhaseResult result;
};

// Unconditional base pretraining, then the weight copy into the spatial encoder.
TrainOutcome pretrain_base(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);
// Phase 1 from a pretrained base checkpoint (pretrains in-process when absent).
TrainOutcome train_base(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                        const std::optional<std::filesystem::path>& base_ckpt);
// Phase 2 from a phase-1 checkpoint.
TrainOutcome finetune_atv(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                          const std::filesystem::path& phase1_ckpt);

const char* stage_name(TrainStage s);

}  // namespace zca
