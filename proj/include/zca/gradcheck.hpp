#pragma once

#include <string>
#include <vector>

#include "zca/config.hpp"

namespace zca {

struct GroupCheck {
  std::string group;
  std::string state;  // "init" (zero-initialised layers at zero) or "perturbed"
  int entries = 0;
  double max_rel = 0;
  double max_abs_analytic = 0;
  std::string worst;  // parameter[index] with the largest relative error
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  std::size_t parameter_count = 0;
  double tolerance = 1e-3;
  double step = 1e-5;
  double max_rel() const;
  bool passed() const;
};

// Small model and canvas used for gradient checks (<= 1e4 parameters).
ExperimentConfig miniature_config();

// Central differences (64-bit) against the analytic gradient of the phase-2
// loss L_LDM + lambda * sum L_ATV for every parameter group, frozen groups
// included. Runs twice: at initialisation and after randomising the
// zero-initialised layers so every path carries gradient. `max_per_tensor`
// caps the checked entries of one tensor (0 = all).
GradCheckReport grad_check(const ExperimentConfig& cfg, double lambda_atv, int max_per_tensor = 0, double h = 1e-5);

// Linear-layer-only model with an MSE loss; returns the max relative error.
double linear_micro_check(std::uint64_t seed, double h = 1e-5);

// rel = |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-7);

}  // namespace zca
