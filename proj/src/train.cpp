#include "zca/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include "zca/augment.hpp"
#include "zca/codec.hpp"
#include "zca/objectives.hpp"
#include "zca/optim.hpp"

namespace zca {

const char* stage_name(TrainStage s) {
  switch (s) {
    case TrainStage::pretrain: return "pretrain";
    case TrainStage::phase1: return "phase1";
    case TrainStage::phase2: return "phase2";
  }
  return "?";
}

Tensor<double> mask_to_latent(const Tensor<double>& mask, int patch) {
  require_binary(mask, "mask_to_latent");
  const Tensor<double> pooled = patch_mean(mask, patch);
  Tensor<double> out(pooled.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pooled[i] > 0 ? 1.0 : 0.0;
  return out;
}

PreparedSample prepare_sample(const SyntheticSample& s, const UNetConfig& model, int patch) {
  PreparedSample p;
  p.z0 = encode(s.person, patch);
  p.agnostic_lat = encode(s.agnostic, patch);
  p.mask_lat = mask_to_latent(s.agnostic_mask, patch);
  p.pose_lat = encode(s.pose, patch);
  p.clothing_lat = encode(s.clothing, patch);
  p.clothing = s.clothing;
  for (int l = 0; l < model.depth; ++l) {
    p.query_masks.push_back(resize_mask_nearest(s.garment_mask, model.level_h(l), model.level_w(l)));
  }
  return p;
}

template <typename T>
StepLoss<T> build_step_loss(ParamBinder<T>& b, const ConditionedUNet<T>& net, const PreparedSample& s, int t,
                            const LatentTensor& eps, const NoiseSchedule& sched, TrainStage stage, double lambda_atv) {
  if (lambda_atv < 0) throw std::invalid_argument("build_step_loss: negative lambda");
  Graph<T>& g = b.graph();
  const LatentTensor zt = forward_diffuse(s.z0, t, eps, sched);
  StepLoss<T> out;
  Var target = g.constant(eps.template cast<T>());
  if (stage == TrainStage::pretrain) {
    UNetVars v = net.unet(b, g.constant(zt.template cast<T>()), net.time_embedding(b, t), nullptr);
    out.ldm = mse(g, v.eps_hat, target);
    out.total = out.ldm;
  } else {
    const Tensor<T> zeta = assemble_zeta({zt, s.agnostic_lat, s.mask_lat, s.pose_lat}).template cast<T>();
    const Tensor<T> img = s.clothing.template cast<T>();
    const Tensor<T> cl = s.clothing_lat.template cast<T>();
    UNetVars v = net.forward(b, zeta, t, &img, &cl);
    out.ldm = mse(g, v.eps_hat, target);
    std::vector<Var> terms{out.ldm};
    std::vector<T> weights{T(1)};
    const UNetConfig& mc = net.config();
    for (std::size_t i = 0; i < v.attn.size(); ++i) {
      const int l = v.attn_level[i];
      const int hq = mc.level_h(l), wq = mc.level_w(l);
      const Tensor<double> grid = normalized_grid(hq, wq);
      const Tensor<double>& mask = s.query_masks.at(static_cast<std::size_t>(l));
      if (lambda_atv > 0) {
        Var tv = atv_loss(g, center_coordinate_map(g, v.attn[i], hq, wq, grid), mask);
        terms.push_back(tv);
        weights.push_back(static_cast<T>(lambda_atv));
        out.atv_values.push_back(static_cast<double>(g.value(tv)[0]));
      } else {
        AttentionMap<T> m{g.value(v.attn[i]).reshaped({hq, wq, hq, wq})};
        out.atv_values.push_back(static_cast<double>(atv_loss(center_coordinate_map(m, grid), mask)));
      }
    }
    out.total = terms.size() > 1 ? weighted_sum(g, terms, weights) : out.ldm;
  }
  out.ldm_value = static_cast<double>(g.value(out.ldm)[0]);
  out.total_value = static_cast<double>(g.value(out.total)[0]);
  return out;
}

template StepLoss<float> build_step_loss<float>(ParamBinder<float>&, const ConditionedUNet<float>&, const PreparedSample&,
                                                int, const LatentTensor&, const NoiseSchedule&, TrainStage, double);
template StepLoss<double> build_step_loss<double>(ParamBinder<double>&, const ConditionedUNet<double>&,
                                                  const PreparedSample&, int, const LatentTensor&, const NoiseSchedule&,
                                                  TrainStage, double);

SampleSource::SampleSource(const ExperimentConfig& cfg, std::uint64_t seed, bool augment)
    : cfg_(cfg), rng_(seed), augment_(augment) {
  if (cfg.train.train_size > 0) pool_ = generate_dataset(sample_seed(cfg.seed, 0x7001), cfg.train.train_size, cfg.data);
}

SyntheticSample SampleSource::next() {
  SyntheticSample s;
  if (pool_.empty()) {
    Rng child = rng_.split();
    s = generate_sample(child, cfg_.data);
  } else {
    s = pool_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(pool_.size()) - 1))];
  }
  if (augment_) s = augment_pair(s, cfg_.augment, rng_);
  return s;
}

template <typename T>
std::vector<Tensor<T>> snapshot_frozen(const ParamStore<T>& params) {
  std::vector<Tensor<T>> out;
  for (const auto& p : params.all()) out.push_back(p.frozen ? p.value : Tensor<T>());
  return out;
}

template <typename T>
FreezeAudit audit_frozen(const ParamStore<T>& params, const std::vector<Tensor<T>>& snapshot) {
  FreezeAudit a;
  for (std::size_t i = 0; i < snapshot.size(); ++i) {
    if (snapshot[i].empty()) continue;
    ++a.tensors;
    const auto& v = params[static_cast<int>(i)].value;
    for (std::size_t k = 0; k < v.size(); ++k) {
      // a bitwise comparison: NaN or signed-zero flips count as changes
      if (std::memcmp(&v[k], &snapshot[i][k], sizeof(T)) != 0) {
        a.max_change = std::max(a.max_change, std::isfinite(static_cast<double>(v[k] - snapshot[i][k]))
                                                  ? std::max(1e-300, std::abs(static_cast<double>(v[k] - snapshot[i][k])))
                                                  : INFINITY);
      }
    }
  }
  return a;
}

template std::vector<Tensor<float>> snapshot_frozen<float>(const ParamStore<float>&);
template std::vector<Tensor<double>> snapshot_frozen<double>(const ParamStore<double>&);
template FreezeAudit audit_frozen<float>(const ParamStore<float>&, const std::vector<Tensor<float>>&);
template FreezeAudit audit_frozen<double>(const ParamStore<double>&, const std::vector<Tensor<double>>&);

CurveLog::CurveLog(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw std::runtime_error("cannot write " + path.string());
  out_ << kHeader << "\n";
}

void CurveLog::row(const std::string& stage, int iteration, double total, double ldm, double atv,
                   std::optional<double> heldout, double seconds) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%d,%.9g,%.9g,%.9g,", stage.c_str(), iteration, total, ldm, atv);
  out_ << buf;
  if (heldout) {
    std::snprintf(buf, sizeof buf, "%.9g", *heldout);
    out_ << buf;
  }
  std::snprintf(buf, sizeof buf, ",%.3f\n", seconds);
  out_ << buf;
  out_.flush();
}

NoiseSchedule schedule_from(const ExperimentConfig& cfg) {
  return build_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end);
}

namespace {

struct Heldout {
  std::vector<PreparedSample> samples;
  std::vector<int> steps;
  std::vector<LatentTensor> noise;
};

Heldout make_heldout(const ExperimentConfig& cfg, const NoiseSchedule& sched) {
  Heldout h;
  const std::uint64_t seed = sample_seed(cfg.seed, 0x4e1d);
  Rng rng(seed ^ 0xabcdefULL);
  for (const auto& s : generate_dataset(seed, cfg.train.heldout_size, cfg.data)) {
    h.samples.push_back(prepare_sample(s, cfg.model, cfg.patch));
    h.steps.push_back(rng.uniform_int(1, sched.steps));
    h.noise.push_back(rng.normal_tensor(h.samples.back().z0.shape()));
  }
  return h;
}

double heldout_loss(const ConditionedUNet<float>& net, const Heldout& h, const NoiseSchedule& sched, TrainStage stage) {
  if (h.samples.empty()) return 0;
  double sum = 0;
  for (std::size_t i = 0; i < h.samples.size(); ++i) {
    Graph<float> g;
    ParamBinder<float> b(g, net.params(), GradMode::none);
    sum += build_step_loss(b, net, h.samples[i], h.steps[i], h.noise[i], sched, stage, 0.0).ldm_value;
  }
  return sum / static_cast<double>(h.samples.size());
}

bool grads_finite(const GradBuffer<float>& gb) {
  for (const auto& g : gb.grads) {
    if (!g.all_finite()) return false;
  }
  return true;
}

void nan_dump(const ConditionedUNet<float>& net, const ExperimentConfig& cfg, const NoiseSchedule& sched,
              TrainStage stage, int iteration, double loss, const GradBuffer<float>& grads) {
  const std::filesystem::path dir = std::filesystem::path(cfg.out) / "nan_dump";
  std::filesystem::create_directories(dir);
  std::ofstream d(dir / "diagnostics.txt");
  d << "stage = " << stage_name(stage) << "\niteration = " << iteration << "\nloss = " << loss << "\n";
  for (std::size_t i = 0; i < grads.grads.size(); ++i) {
    const auto& p = net.params()[static_cast<int>(i)];
    d << "param " << p.name << " value_finite=" << p.value.all_finite() << " grad_finite=" << grads.grads[i].all_finite()
      << "\n";
  }
  save_checkpoint(dir / "checkpoint", to_checkpoint(net, cfg, sched, stage_name(stage), iteration));
}

}  // namespace

PhaseResult run_phase(ConditionedUNet<float>& net, const ExperimentConfig& cfg, const NoiseSchedule& sched,
                      TrainStage stage, int iters, CurveLog* log, std::uint64_t stream_seed) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };

  apply_freeze_policy(net.params(), stage);
  const auto snapshot = snapshot_frozen(net.params());
  AdamWConfig oc;
  oc.lr = stage == TrainStage::pretrain ? cfg.train.pretrain_lr : cfg.train.lr;
  oc.weight_decay = cfg.train.weight_decay;
  AdamW<float> opt(net.params(), oc);
  SampleSource source(cfg, stream_seed, stage != TrainStage::pretrain && cfg.train.augment);
  Rng noise_rng(stream_seed ^ 0x6e6f697365ULL);
  const double lambda = stage == TrainStage::phase2 ? cfg.train.lambda_atv : 0.0;
  const Heldout heldout = make_heldout(cfg, sched);

  PhaseResult res;
  res.stage = stage;
  res.heldout_initial = heldout_loss(net, heldout, sched, stage);
  res.heldout_final = res.heldout_initial;
  if (log) log->row(stage_name(stage), 0, NAN, NAN, NAN, res.heldout_initial, elapsed());

  GradBuffer<float> grads(net.params());
  for (int it = 1; it <= iters; ++it) {
    grads.zero();
    double total = 0, ldm = 0, atv = 0;
    for (int k = 0; k < cfg.train.batch_size; ++k) {
      const PreparedSample s = prepare_sample(source.next(), cfg.model, cfg.patch);
      const int t = noise_rng.uniform_int(1, sched.steps);
      const LatentTensor eps = noise_rng.normal_tensor(s.z0.shape());
      Graph<float> g;
      ParamBinder<float> b(g, net.params(), GradMode::trainable);
      const StepLoss<float> L = build_step_loss(b, net, s, t, eps, sched, stage, lambda);
      g.backward(L.total);
      b.accumulate(grads);
      total += L.total_value;
      ldm += L.ldm_value;
      for (double a : L.atv_values) atv += a;
    }
    const double inv = 1.0 / cfg.train.batch_size;
    grads.scale(static_cast<float>(inv));
    total *= inv;
    ldm *= inv;
    atv *= inv;
    if (!std::isfinite(total) || !grads_finite(grads)) {
      nan_dump(net, cfg, sched, stage, it, total, grads);
      throw std::runtime_error(std::string("non-finite loss or gradient in ") + stage_name(stage) + " at iteration " +
                               std::to_string(it) + "; diagnostics written to " + cfg.out + "/nan_dump");
    }
    opt.step(net.params(), grads);
    res.losses.push_back(total);
    res.iterations = it;
    std::optional<double> ho;
    if (it % cfg.train.log_every == 0 || it == iters) {
      res.heldout_final = heldout_loss(net, heldout, sched, stage);
      ho = res.heldout_final;
    }
    if (log) log->row(stage_name(stage), it, total, ldm, atv, ho, elapsed());
  }
  res.freeze = audit_frozen(net.params(), snapshot);
  if (!res.freeze.passed()) throw std::logic_error("freeze audit failed: a frozen tensor changed during training");
  return res;
}

Checkpoint to_checkpoint(const ConditionedUNet<float>& net, const ExperimentConfig& cfg, const NoiseSchedule& sched,
                         const std::string& stage, int iterations) {
  Checkpoint ck;
  ck.model = net.config();
  ck.schedule = sched;
  ck.beta_start = cfg.schedule.beta_start;
  ck.beta_end = cfg.schedule.beta_end;
  ck.params = net.params();
  ck.meta["stage"] = stage;
  ck.meta["iterations"] = std::to_string(iterations);
  ck.meta["seed"] = std::to_string(cfg.seed);
  return ck;
}

ConditionedUNet<float> model_from(const Checkpoint& ck) { return ConditionedUNet<float>(ck.model, ck.params); }

namespace {

void check_compatible(const Checkpoint& ck, const ExperimentConfig& cfg) {
  const UNetConfig& a = ck.model;
  const UNetConfig& b = cfg.model;
  if (a.base_width != b.base_width || a.depth != b.depth || a.heads != b.heads || a.latent_h != b.latent_h ||
      a.latent_w != b.latent_w || a.groups != b.groups || a.embed_width != b.embed_width) {
    throw std::invalid_argument("checkpoint model does not match the experiment config");
  }
  if (ck.schedule.steps != cfg.schedule.steps) throw std::invalid_argument("checkpoint schedule length differs from config");
}

}  // namespace

TrainOutcome pretrain_base(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const NoiseSchedule sched = schedule_from(cfg);
  ConditionedUNet<float> net(cfg.model, cfg.seed);
  CurveLog log(out_dir / "curve_pretrain.csv");
  TrainOutcome o;
  o.result = run_phase(net, cfg, sched, TrainStage::pretrain, cfg.train.pretrain_iters, &log, sample_seed(cfg.seed, 101));
  net.copy_encoder_to_spatial();
  apply_freeze_policy(net.params(), TrainStage::phase1);
  o.checkpoint = out_dir / "base";
  save_checkpoint(o.checkpoint, to_checkpoint(net, cfg, sched, "pretrain", o.result.iterations));
  return o;
}

TrainOutcome train_base(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                        const std::optional<std::filesystem::path>& base_ckpt) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path base = base_ckpt ? *base_ckpt : pretrain_base(cfg, out_dir).checkpoint;
  const Checkpoint ck = load_checkpoint(base);
  check_compatible(ck, cfg);
  ConditionedUNet<float> net = model_from(ck);
  CurveLog log(out_dir / "curve_phase1.csv");
  TrainOutcome o;
  o.result = run_phase(net, cfg, ck.schedule, TrainStage::phase1, cfg.train.phase1_iters, &log, sample_seed(cfg.seed, 102));
  o.checkpoint = out_dir / "phase1";
  save_checkpoint(o.checkpoint, to_checkpoint(net, cfg, ck.schedule, "phase1", o.result.iterations));
  return o;
}

TrainOutcome finetune_atv(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                          const std::filesystem::path& phase1_ckpt) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const Checkpoint ck = load_checkpoint(phase1_ckpt);
  check_compatible(ck, cfg);
  ConditionedUNet<float> net = model_from(ck);
  CurveLog log(out_dir / "curve_phase2.csv");
  TrainOutcome o;
  o.result = run_phase(net, cfg, ck.schedule, TrainStage::phase2, cfg.train.phase2_iters, &log, sample_seed(cfg.seed, 103));
  o.checkpoint = out_dir / "phase2";
  save_checkpoint(o.checkpoint, to_checkpoint(net, cfg, ck.schedule, "phase2", o.result.iterations));
  return o;
}

}  // namespace zca
