#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "zca/rng.hpp"
#include "zca/tensor.hpp"

namespace zca {

// (channels, height, width) latent grid. Holds z_0, z_t, noise and encoded conditions.
using LatentTensor = Tensor<double>;

// Variance schedule over steps t = 1..T. Arrays are stored 0-based, so
// beta[t - 1] is the variance of step t.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  // Cumulative product up to step t; t = 0 gives 1 (clean data).
  double alpha_bar_at(int t) const;
};

// Linear beta from beta_start to beta_end over T steps.
NoiseSchedule build_schedule(int steps, double beta_start, double beta_end);

// Throws std::invalid_argument unless every schedule invariant holds.
void validate_schedule(const NoiseSchedule& sched);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, for 1 <= t <= T.
LatentTensor forward_diffuse(const LatentTensor& z0, int t, const LatentTensor& eps, const NoiseSchedule& sched);

enum class StepKind {
  ancestral,      // posterior mean plus sqrt(posterior variance) * noise
  deterministic,  // sigma = 0 update through the predicted clean latent
};

// One reverse step from t to t_prev < t. The effective per-step beta is
// 1 - abar_t / abar_prev, so strided schedules use the same code path.
LatentTensor reverse_step(const LatentTensor& z_t, const LatentTensor& eps_hat, int t, int t_prev,
                          const NoiseSchedule& sched, const LatentTensor& noise, StepKind kind);

// Reverse step from t to t - 1. At t = 1 the noise term is dropped.
LatentTensor ancestral_step(const LatentTensor& z_t, const LatentTensor& eps_hat, int t, const NoiseSchedule& sched,
                            const LatentTensor& noise, StepKind kind = StepKind::ancestral);

// known * forward_diffuse(z0_known, t_next, noise) + (1 - known) * z_next.
// `known_mask` is binary with one channel (broadcast) or the latent's channel count.
// At t_next = 0 the known region is z0_known exactly.
LatentTensor repaint_blend(const LatentTensor& z_next, const LatentTensor& z0_known, const LatentTensor& known_mask,
                           int t_next, const NoiseSchedule& sched, const LatentTensor& noise);

// Evenly spaced descending subset of 1..T with `count` entries, starting at T.
std::vector<int> strided_timesteps(int total_steps, int count);

using Denoiser = std::function<LatentTensor(const LatentTensor& z_t, int t)>;

struct RepaintInputs {
  LatentTensor z0_known;
  LatentTensor known_mask;
};

// Reverse loop from pure noise. With repaint inputs, the known region is
// re-imposed after every step.
LatentTensor sample(const Denoiser& model, const Shape& latent_shape, const NoiseSchedule& sched, int steps,
                    const std::optional<RepaintInputs>& repaint, Rng& rng, StepKind kind = StepKind::ancestral);

}  // namespace zca
