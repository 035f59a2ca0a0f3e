#include "zca/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "zca/train.hpp"

namespace zca {

double GradCheckReport::max_rel() const {
  double m = 0;
  for (const auto& g : groups) m = std::max(m, g.max_rel);
  return m;
}

bool GradCheckReport::passed() const { return !groups.empty() && max_rel() < tolerance; }

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

ExperimentConfig miniature_config() {
  ExperimentConfig c;
  c.model.base_width = 2;
  c.model.depth = 2;
  c.model.heads = 2;
  c.model.groups = 2;
  c.model.embed_width = 2;
  c.data.image_h = 32;
  c.data.image_w = 32;
  c.data.box_x0 = 8;
  c.data.box_y0 = 6;
  c.data.box_x1 = 24;
  c.data.box_y1 = 26;
  c.data.max_translation = 2;
  c.data.max_scale = 0.05;
  c.data.max_rotation = 5;
  c.patch = 4;
  c.model.image_h = c.data.image_h;
  c.model.image_w = c.data.image_w;
  c.model.latent_h = c.data.image_h / c.patch;
  c.model.latent_w = c.data.image_w / c.patch;
  c.schedule.steps = 100;
  return c;
}

namespace {

using LossFn = std::function<double(const ParamStore<double>&)>;
using GradFn = std::function<GradBuffer<double>(const ParamStore<double>&)>;

void check_store(ParamStore<double>& store, const LossFn& loss, const GradFn& grad, const std::string& state,
                 int max_per_tensor, double h, std::uint64_t seed, GradCheckReport& report) {
  const GradBuffer<double> analytic = grad(store);
  Rng pick(seed);
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store[static_cast<int>(i)];
    auto it = std::find_if(report.groups.begin(), report.groups.end(),
                           [&](const GroupCheck& g) { return g.group == p.group && g.state == state; });
    if (it == report.groups.end()) {
      report.groups.push_back({p.group, state, 0, 0, 0, ""});
      it = report.groups.end() - 1;
    }
    std::vector<std::size_t> idx(p.value.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    if (max_per_tensor > 0 && idx.size() > static_cast<std::size_t>(max_per_tensor)) {
      for (std::size_t k = 0; k < static_cast<std::size_t>(max_per_tensor); ++k) {
        std::swap(idx[k], idx[k + static_cast<std::size_t>(pick.uniform_int(0, static_cast<int>(idx.size() - k) - 1))]);
      }
      idx.resize(static_cast<std::size_t>(max_per_tensor));
    }
    for (std::size_t k : idx) {
      const double orig = p.value[k];
      p.value[k] = orig + h;
      const double up = loss(store);
      p.value[k] = orig - h;
      const double down = loss(store);
      p.value[k] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.grads[i][k];
      const double rel = relative_error(a, numeric);
      ++it->entries;
      it->max_abs_analytic = std::max(it->max_abs_analytic, std::abs(a));
      if (rel >= it->max_rel) {
        it->max_rel = rel;
        it->worst = p.name + "[" + std::to_string(k) + "]";
      }
    }
  }
}

}  // namespace

GradCheckReport grad_check(const ExperimentConfig& cfg, double lambda_atv, int max_per_tensor, double h) {
  cfg.validate();
  GradCheckReport report;
  report.step = h;
  const NoiseSchedule sched = schedule_from(cfg);
  ConditionedUNet<double> net(cfg.model, cfg.seed);
  report.parameter_count = net.params().element_count();
  Rng rng(cfg.seed ^ 0x67726164ULL);
  const SyntheticSample s = generate_sample(rng, cfg.data);
  const PreparedSample p = prepare_sample(s, cfg.model, cfg.patch);
  const int t = std::max(1, sched.steps / 2);
  const LatentTensor eps = rng.normal_tensor(p.z0.shape());

  auto run = [&](const ParamStore<double>& store, GradBuffer<double>* out) {
    ConditionedUNet<double> m(cfg.model, store);
    Graph<double> g;
    ParamBinder<double> b(g, m.params(), out ? GradMode::all : GradMode::none);
    const StepLoss<double> L = build_step_loss(b, m, p, t, eps, sched, TrainStage::phase2, lambda_atv);
    if (out) {
      g.backward(L.total);
      b.accumulate(*out);
    }
    return L.total_value;
  };
  LossFn loss = [&](const ParamStore<double>& st) { return run(st, nullptr); };
  GradFn grad = [&](const ParamStore<double>& st) {
    GradBuffer<double> gb(st);
    run(st, &gb);
    return gb;
  };

  ParamStore<double> store = net.params();
  check_store(store, loss, grad, "init", max_per_tensor, h, cfg.seed + 1, report);
  for (auto& prm : store.all()) {
    bool all_zero = std::all_of(prm.value.values().begin(), prm.value.values().end(), [](double v) { return v == 0; });
    if (!all_zero) continue;
    for (auto& v : prm.value.values()) v = 0.2 * rng.normal();
  }
  check_store(store, loss, grad, "perturbed", max_per_tensor, h, cfg.seed + 2, report);
  return report;
}

double linear_micro_check(std::uint64_t seed, double h) {
  Rng rng(seed);
  ParamStore<double> store;
  auto randn = [&](Shape s) {
    Tensor<double> t(s);
    for (auto& v : t.values()) v = rng.normal();
    return t;
  };
  store.add("l1.w", "micro", false, randn({5, 4}));
  store.add("l1.b", "micro", false, randn({5}));
  store.add("l2.w", "micro", false, randn({3, 5}));
  store.add("l2.b", "micro", false, randn({3}));
  const Tensor<double> x = randn({6, 4});
  const Tensor<double> y = randn({6, 3});
  auto run = [&](const ParamStore<double>& st, GradBuffer<double>* out) {
    Graph<double> g;
    ParamBinder<double> b(g, st, out ? GradMode::all : GradMode::none);
    Var hdn = linear(g, g.constant(x), b(0), b(1));
    Var o = linear(g, hdn, b(2), b(3));
    Var l = mse(g, o, g.constant(y));
    if (out) {
      g.backward(l);
      b.accumulate(*out);
    }
    return g.value(l)[0];
  };
  GradBuffer<double> analytic(store);
  run(store, &analytic);
  double worst = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store[static_cast<int>(i)];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double orig = p.value[k];
      p.value[k] = orig + h;
      const double up = run(store, nullptr);
      p.value[k] = orig - h;
      const double down = run(store, nullptr);
      p.value[k] = orig;
      worst = std::max(worst, relative_error(analytic.grads[i][k], (up - down) / (2 * h)));
    }
  }
  return worst;
}

}  // namespace zca
