// Command-line front end: data generation, the two training phases,
// sampling, evaluation, attention dumps and gradient checks.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "zca/checkpoint.hpp"
#include "zca/codec.hpp"
#include "zca/config.hpp"
#include "zca/eval.hpp"
#include "zca/gradcheck.hpp"
#include "zca/train.hpp"

namespace fs = std::filesystem;
using namespace zca;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "key = value experiment config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.sets, "override one config key (key=value); repeatable");
  sub->add_option("--seed", c.seed, "master seed (overrides the config)");
  sub->add_option("--out", c.out, "output directory (overrides the config)");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.out = *c.out;
  cfg.validate();
  fs::create_directories(cfg.out);
  save_config(fs::path(cfg.out) / "config.txt", cfg);
  return cfg;
}

std::vector<SyntheticSample> eval_set(const ExperimentConfig& cfg, const std::string& data_dir) {
  if (data_dir.empty()) return generate_dataset(cfg.eval.eval_seed, cfg.eval.eval_size, cfg.data);
  std::vector<SyntheticSample> out;
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(data_dir)) {
    if (e.is_directory() && fs::exists(e.path() / "annotation.txt")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) out.push_back(load_sample(d));
  if (out.empty()) throw std::runtime_error("no samples with annotations under " + data_dir);
  return out;
}

SyntheticSample pick_sample(const ExperimentConfig& cfg, const std::string& sample_dir, int index) {
  if (!sample_dir.empty()) return load_sample(sample_dir);
  Rng rng(sample_seed(cfg.eval.eval_seed, index));
  return generate_sample(rng, cfg.data);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero cross-attention conditioning on a synthetic try-on task"};
  app.require_subcommand(1);

  Common c_gen, c_train, c_ft, c_sample, c_eval, c_dump, c_grad;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset (PPM/PGM + annotations + index.csv)");
  add_common(gen, c_gen);
  int gen_count = -1;
  gen->add_option("--count", gen_count, "number of samples (default: eval.eval_size)");

  auto* train = app.add_subcommand("train", "pretrain the base model, then run phase 1");
  add_common(train, c_train);
  std::string base_ckpt;
  train->add_option("--base", base_ckpt, "existing pretrained base checkpoint directory");

  auto* ft = app.add_subcommand("finetune-atv", "phase 2: denoising plus attention TV");
  add_common(ft, c_ft);
  std::string ft_ckpt;
  ft->add_option("--ckpt", ft_ckpt, "phase-1 checkpoint directory")->required();

  auto* smp = app.add_subcommand("sample", "repainted sampling for one sample");
  add_common(smp, c_sample);
  std::string smp_ckpt, smp_dir;
  int smp_index = 0;
  smp->add_option("--ckpt", smp_ckpt, "checkpoint directory")->required();
  smp->add_option("--sample-dir", smp_dir, "sample directory written by gen-data");
  smp->add_option("--index", smp_index, "evaluation-set index when no sample directory is given");

  auto* ev = app.add_subcommand("eval", "correspondence, entropy, masked TV and RMSE metrics");
  add_common(ev, c_eval);
  std::string ev_ckpt, ev_data, ev_label = "eval";
  ev->add_option("--ckpt", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--data", ev_data, "dataset directory (default: regenerate from eval.eval_seed)");
  ev->add_option("--label", ev_label, "label column of metrics.csv");

  auto* dump = app.add_subcommand("dump-attn", "attention blobs, overlay mosaics and center-map renderings");
  add_common(dump, c_dump);
  std::string dump_ckpt, dump_dir;
  int dump_index = 0;
  dump->add_option("--ckpt", dump_ckpt, "checkpoint directory")->required();
  dump->add_option("--sample-dir", dump_dir, "sample directory written by gen-data");
  dump->add_option("--index", dump_index, "evaluation-set index when no sample directory is given");

  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every parameter group (64-bit)");
  add_common(grad, c_grad);
  double grad_lambda = -1;
  int grad_cap = 0;
  grad->add_option("--lambda", grad_lambda, "ATV weight for the checked loss (default: train.lambda_atv)");
  grad->add_option("--max-per-tensor", grad_cap, "checked entries per tensor, 0 = all");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const ExperimentConfig cfg = resolve(c_gen);
      const int n = gen_count >= 0 ? gen_count : cfg.eval.eval_size;
      std::vector<std::uint64_t> seeds;
      for (int i = 0; i < n; ++i) seeds.push_back(sample_seed(cfg.eval.eval_seed, i));
      save_dataset(fs::path(cfg.out) / "data", generate_dataset(cfg.eval.eval_seed, n, cfg.data), seeds);
      std::printf("wrote %d samples to %s\n", n, (fs::path(cfg.out) / "data").c_str());
    } else if (*train) {
      const ExperimentConfig cfg = resolve(c_train);
      std::optional<fs::path> base;
      if (!base_ckpt.empty()) base = fs::path(base_ckpt);
      const TrainOutcome o = train_base(cfg, cfg.out, base);
      std::printf("phase1: %d iterations, held-out ldm %.6f -> %.6f, frozen audit max change %g over %zu tensors\n",
                  o.result.iterations, o.result.heldout_initial, o.result.heldout_final, o.result.freeze.max_change,
                  o.result.freeze.tensors);
      std::printf("checkpoint: %s\n", o.checkpoint.c_str());
    } else if (*ft) {
      const ExperimentConfig cfg = resolve(c_ft);
      const TrainOutcome o = finetune_atv(cfg, cfg.out, ft_ckpt);
      std::printf("phase2: %d iterations, held-out ldm %.6f -> %.6f, frozen audit max change %g\n", o.result.iterations,
                  o.result.heldout_initial, o.result.heldout_final, o.result.freeze.max_change);
      std::printf("checkpoint: %s\n", o.checkpoint.c_str());
    } else if (*smp) {
      const ExperimentConfig cfg = resolve(c_sample);
      const Checkpoint ck = load_checkpoint(smp_ckpt);
      const ConditionedUNet<float> net = model_from(ck);
      const SyntheticSample s = pick_sample(cfg, smp_dir, smp_index);
      Rng rng(cfg.seed);
      const ImageTensor img = decode(sample_tryon(net, ck.schedule, s, cfg, rng), cfg.patch);
      const fs::path out(cfg.out);
      write_ppm(out / "sample.ppm", img);
      write_ppm(out / "person.ppm", s.person);
      write_ppm(out / "agnostic.ppm", s.agnostic);
      write_ppm(out / "clothing.ppm", s.clothing);
      std::printf("wrote %s\n", (out / "sample.ppm").c_str());
    } else if (*ev) {
      const ExperimentConfig cfg = resolve(c_eval);
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      const ConditionedUNet<float> net = model_from(ck);
      const auto set = eval_set(cfg, ev_data);
      const EvalReport r = eval_correspondence(net, ck.schedule, set, cfg, cfg.t_eval(), cfg.eval.sample_subset);
      write_metrics_csv(fs::path(cfg.out) / "metrics.csv", ev_label, r);
      std::printf("queries %ld  acc@0 %.4f  acc@1 %.4f  chance %.4f  entropy %.4f  masked TV %.6g  rmse %.4f (%d)\n",
                  r.queries(), r.acc_r0(), r.acc_r1(), r.chance(), r.mean_entropy(), r.mean_tv(), r.rmse,
                  r.rmse_samples);
    } else if (*dump) {
      const ExperimentConfig cfg = resolve(c_dump);
      const Checkpoint ck = load_checkpoint(dump_ckpt);
      const ConditionedUNet<float> net = model_from(ck);
      const SyntheticSample s = pick_sample(cfg, dump_dir, dump_index);
      for (const auto& f : dump_attention(net, ck.schedule, s, cfg, cfg.t_eval(), fs::path(cfg.out) / "attention")) {
        std::printf("%s\n", f.c_str());
      }
    } else if (*grad) {
      ExperimentConfig cfg = miniature_config();
      if (!c_grad.config.empty()) cfg = load_config(c_grad.config);
      for (const auto& s : c_grad.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value");
        set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
      }
      if (c_grad.seed) cfg.seed = *c_grad.seed;
      if (c_grad.out) cfg.out = *c_grad.out;
      cfg.validate();
      fs::create_directories(cfg.out);
      const double lambda = grad_lambda >= 0 ? grad_lambda : cfg.train.lambda_atv;
      const GradCheckReport r = grad_check(cfg, lambda, grad_cap);
      std::ofstream csv(fs::path(cfg.out) / "gradcheck.csv");
      csv << "group,state,entries,max_rel,max_abs_analytic,worst\n";
      for (const auto& g : r.groups) {
        csv << g.group << "," << g.state << "," << g.entries << "," << g.max_rel << "," << g.max_abs_analytic << ","
            << g.worst << "\n";
        std::printf("%-16s %-10s entries %6d  max rel %.3e  max |grad| %.3e  %s\n", g.group.c_str(), g.state.c_str(),
                    g.entries, g.max_rel, g.max_abs_analytic, g.worst.c_str());
      }
      std::printf("%zu parameters, tolerance %.0e: %s\n", r.parameter_count, r.tolerance, r.passed() ? "PASS" : "FAIL");
      return r.passed() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
