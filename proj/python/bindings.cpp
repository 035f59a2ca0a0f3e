#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "zca/augment.hpp"
#include "zca/checkpoint.hpp"
#include "zca/config.hpp"
#include "zca/eval.hpp"
#include "zca/gradcheck.hpp"
#include "zca/objectives.hpp"
#include "zca/train.hpp"

namespace py = pybind11;
using namespace zca;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <typename T>
Array to_numpy(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  double* dst = out.mutable_data();
  for (std::size_t i = 0; i < t.size(); ++i) dst[i] = static_cast<double>(t[i]);
  return out;
}

Array to_numpy(const std::vector<double>& v) {
  return Array(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())}, v.data());
}

Tensor<double> from_numpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<double>(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

ExperimentConfig make_config(const std::map<std::string, std::string>& overrides) {
  ExperimentConfig cfg;
  for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  cfg.validate();
  return cfg;
}

py::dict sample_dict(const SyntheticSample& s) {
  py::dict d;
  d["person"] = to_numpy(s.person);
  d["clothing"] = to_numpy(s.clothing);
  d["agnostic"] = to_numpy(s.agnostic);
  d["agnostic_mask"] = to_numpy(s.agnostic_mask);
  d["pose"] = to_numpy(s.pose);
  d["garment_mask"] = to_numpy(s.garment_mask);
  d["family"] = family_name(s.family);
  const Affine2 t = s.truth_transform();
  d["truth_transform"] = std::vector<double>{t.a, t.b, t.c, t.d, t.e, t.f};
  return d;
}

struct Model {
  Checkpoint ck;
  ConditionedUNet<float> net;

  explicit Model(const std::filesystem::path& dir) : ck(load_checkpoint(dir)), net(model_from(ck)) {}

  std::vector<Array> attention(const SyntheticSample& s, int t, std::uint64_t seed) const {
    const PreparedSample p = prepare_sample(s, net.config(), net.config().image_h / net.config().latent_h);
    Rng rng(seed);
    const LatentTensor eps = rng.normal_tensor(p.z0.shape());
    const LatentTensor zt = forward_diffuse(p.z0, t, eps, ck.schedule);
    const Tensor<float> zeta = assemble_zeta({zt, p.agnostic_lat, p.mask_lat, p.pose_lat}).cast<float>();
    const Tensor<float> img = p.clothing.cast<float>();
    const Tensor<float> cl = p.clothing_lat.cast<float>();
    std::vector<Array> out;
    for (const auto& a : net.predict(zeta, t, &img, &cl).attn) out.push_back(to_numpy(a.weights));
    return out;
  }
};

}  // namespace

PYBIND11_MODULE(_zca, m) {
  m.doc() = "Zero cross-attention conditioning on a synthetic try-on task";

  py::class_<NoiseSchedule>(m, "Schedule")
      .def(py::init([](int steps, double beta_start, double beta_end) {
             return build_schedule(steps, beta_start, beta_end);
           }),
           py::arg("steps") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02)
      .def_readonly("steps", &NoiseSchedule::steps)
      .def_property_readonly("beta", [](const NoiseSchedule& s) { return to_numpy(s.beta); })
      .def_property_readonly("alpha_bar", [](const NoiseSchedule& s) { return to_numpy(s.alpha_bar); })
      .def("alpha_bar_at", &NoiseSchedule::alpha_bar_at)
      .def("forward_diffuse", [](const NoiseSchedule& s, const Array& z0, int t, const Array& eps) {
        return to_numpy(forward_diffuse(from_numpy(z0), t, from_numpy(eps), s));
      })
      .def(
          "reverse_step",
          [](const NoiseSchedule& s, const Array& zt, const Array& eps_hat, int t, int t_prev, const Array& noise,
             bool deterministic) {
            return to_numpy(reverse_step(from_numpy(zt), from_numpy(eps_hat), t, t_prev, s, from_numpy(noise),
                                         deterministic ? StepKind::deterministic : StepKind::ancestral));
          },
          py::arg("z_t"), py::arg("eps_hat"), py::arg("t"), py::arg("t_prev"), py::arg("noise"),
          py::arg("deterministic") = false)
      .def("repaint_blend", [](const NoiseSchedule& s, const Array& z_next, const Array& z0_known, const Array& known,
                               int t_next, const Array& noise) {
        return to_numpy(
            repaint_blend(from_numpy(z_next), from_numpy(z0_known), from_numpy(known), t_next, s, from_numpy(noise)));
      });

  m.def("strided_timesteps", &strided_timesteps, py::arg("total_steps"), py::arg("count"));

  m.def(
      "encode", [](const Array& img, int patch) { return to_numpy(encode(from_numpy(img), patch)); }, py::arg("image"),
      py::arg("patch") = kDefaultPatch);
  m.def(
      "decode", [](const Array& lat, int patch) { return to_numpy(decode(from_numpy(lat), patch)); }, py::arg("latent"),
      py::arg("patch") = kDefaultPatch);

  m.def(
      "center_coordinate_map",
      [](const Array& attn) {
        if (attn.ndim() != 4) throw std::invalid_argument("attention must be (Hq, Wq, hk, wk)");
        AttentionMap<double> a{from_numpy(attn)};
        return to_numpy(center_coordinate_map(a, normalized_grid(a.key_h(), a.key_w())));
      },
      py::arg("attention"));
  m.def(
      "atv_loss", [](const Array& F, const Array& mask) { return atv_loss(from_numpy(F), from_numpy(mask)); },
      py::arg("center_map"), py::arg("mask"));
  m.def(
      "atv_loss_grad",
      [](const Array& F, const Array& mask) { return to_numpy(atv_loss_grad(from_numpy(F), from_numpy(mask))); },
      py::arg("center_map"), py::arg("mask"));

  py::class_<SyntheticSample>(m, "Sample")
      .def("arrays", &sample_dict)
      .def(
          "truth",
          [](const SyntheticSample& s, int qh, int qw, int kh, int kw) {
            return to_numpy(correspondence_truth(s, qh, qw, kh, kw).cast<double>());
          },
          py::arg("query_h"), py::arg("query_w"), py::arg("key_h"), py::arg("key_w"))
      .def("augmented", [](const SyntheticSample& s, std::uint64_t seed) {
        Rng rng(seed);
        return augment_pair(s, AugmentConfig{}, rng);
      });

  m.def(
      "generate_sample",
      [](std::uint64_t seed, int index, const std::map<std::string, std::string>& overrides) {
        const ExperimentConfig cfg = make_config(overrides);
        Rng rng(sample_seed(seed, index));
        return generate_sample(rng, cfg.data);
      },
      py::arg("seed"), py::arg("index") = 0, py::arg("config") = std::map<std::string, std::string>{});

  m.def("config_keys", [] {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : config_keys()) out.emplace_back(k.key, k.doc);
    return out;
  });
  m.def(
      "config_text", [](const std::map<std::string, std::string>& o) { return config_text(make_config(o)); },
      py::arg("config") = std::map<std::string, std::string>{});

  m.def(
      "train",
      [](const std::map<std::string, std::string>& overrides, const std::filesystem::path& out) {
        const ExperimentConfig cfg = make_config(overrides);
        py::gil_scoped_release release;
        return train_base(cfg, out, std::nullopt).checkpoint;
      },
      py::arg("config"), py::arg("out"));
  m.def(
      "finetune_atv",
      [](const std::map<std::string, std::string>& overrides, const std::filesystem::path& out,
         const std::filesystem::path& ckpt) {
        const ExperimentConfig cfg = make_config(overrides);
        py::gil_scoped_release release;
        return finetune_atv(cfg, out, ckpt).checkpoint;
      },
      py::arg("config"), py::arg("out"), py::arg("ckpt"));

  py::class_<Model>(m, "Model")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint_dir"))
      .def_property_readonly("parameter_count", [](const Model& mdl) { return mdl.net.params().element_count(); })
      .def("attention", &Model::attention, py::arg("sample"), py::arg("t"), py::arg("seed") = 0)
      .def(
          "evaluate",
          [](const Model& mdl, const std::map<std::string, std::string>& overrides) {
            const ExperimentConfig cfg = make_config(overrides);
            const auto set = generate_dataset(cfg.eval.eval_seed, cfg.eval.eval_size, cfg.data);
            const EvalReport r =
                eval_correspondence(mdl.net, mdl.ck.schedule, set, cfg, cfg.t_eval(), cfg.eval.sample_subset);
            py::dict d;
            d["queries"] = r.queries();
            d["acc_r0"] = r.acc_r0();
            d["acc_r1"] = r.acc_r1();
            d["chance"] = r.chance();
            d["entropy"] = r.mean_entropy();
            d["masked_tv"] = r.mean_tv();
            d["rmse"] = r.rmse;
            return d;
          },
          py::arg("config") = std::map<std::string, std::string>{});

  m.def(
      "grad_check",
      [](double lambda_atv, int max_per_tensor) {
        const GradCheckReport r = grad_check(miniature_config(), lambda_atv, max_per_tensor);
        py::dict d;
        d["passed"] = r.passed();
        d["max_rel"] = r.max_rel();
        d["parameters"] = r.parameter_count;
        return d;
      },
      py::arg("lambda_atv") = 1e-3, py::arg("max_per_tensor") = 8);
}
