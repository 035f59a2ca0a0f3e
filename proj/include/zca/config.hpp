#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zca/augment.hpp"
#include "zca/network.hpp"
#include "zca/synthetic.hpp"

namespace zca {

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.01;
  int batch_size = 16;
  int pretrain_iters = 2000;  // unconditional base training before freezing
  double pretrain_lr = 1e-3;
  int phase1_iters = 20000;
  int phase2_iters = 2000;
  double lambda_atv = 0.001;
  int train_size = 0;  // fixed training pool size; 0 draws a fresh sample every time
  bool augment = true;
  int heldout_size = 16;
  int log_every = 50;
};

struct EvalConfig {
  int eval_size = 512;
  std::uint64_t eval_seed = 7001;
  int t_eval = -1;  // -1 selects T/2
  int sample_subset = 8;
  int sample_steps = 50;
  bool deterministic_sampler = false;
};

struct ExperimentConfig {
  UNetConfig model;
  ScheduleConfig schedule;
  AugmentConfig augment;
  DatasetConfig data;
  TrainConfig train;
  EvalConfig eval;
  int patch = kDefaultPatch;
  std::uint64_t seed = 1;
  std::string out = "run";

  int t_eval() const { return eval.t_eval > 0 ? eval.t_eval : schedule.steps / 2; }
  // Checks every section and the cross-section consistency (image / latent sizes).
  void validate() const;
};

struct ConfigKey {
  std::string key;
  std::string doc;
};

// Every recognised key with a one-line description.
const std::vector<ConfigKey>& config_keys();

// Applies one `key=value` assignment; throws on unknown keys or bad values.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& cfg, const std::string& key);

// Flat UTF-8 `key = value` text; '#' starts a comment.
ExperimentConfig load_config(const std::filesystem::path& path);
void apply_config_text(ExperimentConfig& cfg, const std::string& text, const std::string& origin);
void save_config(const std::filesystem::path& path, const ExperimentConfig& cfg);
std::string config_text(const ExperimentConfig& cfg);

}  // namespace zca
