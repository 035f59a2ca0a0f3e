#include "zca/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "zca/checkpoint.hpp"
#include "zca/codec.hpp"
#include "zca/train.hpp"

namespace zca {

long EvalReport::queries() const {
  long n = 0;
  for (const auto& b : blocks) n += b.queries;
  return n;
}

double EvalReport::acc_r0() const {
  long h = 0;
  for (const auto& b : blocks) h += b.hits_r0;
  return queries() ? static_cast<double>(h) / queries() : 0;
}

double EvalReport::acc_r1() const {
  long h = 0;
  for (const auto& b : blocks) h += b.hits_r1;
  return queries() ? static_cast<double>(h) / queries() : 0;
}

double EvalReport::chance() const {
  double c = 0;
  for (const auto& b : blocks) c += b.queries * b.chance();
  return queries() ? c / queries() : 0;
}

double EvalReport::mean_entropy() const {
  double e = 0;
  for (const auto& b : blocks) e += b.entropy_sum;
  return queries() ? e / queries() : 0;
}

double EvalReport::mean_tv() const {
  double tv = 0;
  for (const auto& b : blocks) tv += b.mean_tv();
  return tv;
}

template <typename T>
void score_attention(const std::vector<AttentionMap<T>>& maps, const SyntheticSample& s, std::vector<BlockStats>& blocks) {
  if (blocks.empty()) blocks.resize(maps.size());
  if (blocks.size() != maps.size()) throw std::invalid_argument("score_attention: block count changed between samples");
  for (std::size_t bi = 0; bi < maps.size(); ++bi) {
    const AttentionMap<T>& a = maps[bi];
    BlockStats& st = blocks[bi];
    const int hq = a.query_h(), wq = a.query_w(), hk = a.key_h(), wk = a.key_w();
    st.level = static_cast<int>(bi);
    st.query_h = hq;
    st.query_w = wq;
    st.key_h = hk;
    st.key_w = wk;
    const Tensor<int> truth = correspondence_truth(s, hq, wq, hk, wk);
    const std::size_t keys = static_cast<std::size_t>(hk * wk);
    Tensor<double> F({hq, wq, 2});
    const Tensor<double> grid = normalized_grid(hk, wk);
    for (int q = 0; q < hq * wq; ++q) {
      const T* row = a.weights.data() + static_cast<std::size_t>(q) * keys;
      for (std::size_t k = 0; k < keys; ++k) {
        F[static_cast<std::size_t>(q) * 2] += static_cast<double>(row[k]) * grid[k * 2];
        F[static_cast<std::size_t>(q) * 2 + 1] += static_cast<double>(row[k]) * grid[k * 2 + 1];
      }
      const int want = truth[static_cast<std::size_t>(q)];
      if (want == kNoCorrespondence) continue;
      std::size_t best = 0;
      double entropy = 0;
      for (std::size_t k = 0; k < keys; ++k) {
        if (row[k] > row[best]) best = k;
        const double p = static_cast<double>(row[k]);
        if (p > 0) entropy -= p * std::log(p);
      }
      ++st.queries;
      st.entropy_sum += entropy;
      const int br = static_cast<int>(best) / wk, bc = static_cast<int>(best) % wk;
      const int tr = want / wk, tc = want % wk;
      if (static_cast<int>(best) == want) ++st.hits_r0;
      if (std::abs(br - tr) <= 1 && std::abs(bc - tc) <= 1) ++st.hits_r1;
    }
    for (auto& v : F.values()) v /= static_cast<double>(keys);
    st.tv_sum += atv_loss(F, resize_mask_nearest(s.garment_mask, hq, wq));
    ++st.samples;
  }
}

template void score_attention<float>(const std::vector<AttentionMap<float>>&, const SyntheticSample&, std::vector<BlockStats>&);
template void score_attention<double>(const std::vector<AttentionMap<double>>&, const SyntheticSample&, std::vector<BlockStats>&);

namespace {

std::uint64_t eval_noise_seed(const ExperimentConfig& cfg, std::size_t i) {
  return sample_seed(cfg.eval.eval_seed ^ 0x5a5a5a5aULL, static_cast<int>(i));
}

UNetOutput<float> attention_at(const ConditionedUNet<float>& net, const NoiseSchedule& sched, const PreparedSample& p,
                               int t, Rng& rng) {
  const LatentTensor eps = rng.normal_tensor(p.z0.shape());
  const LatentTensor zt = forward_diffuse(p.z0, t, eps, sched);
  const Tensor<float> zeta = assemble_zeta({zt, p.agnostic_lat, p.mask_lat, p.pose_lat}).cast<float>();
  const Tensor<float> img = p.clothing.cast<float>();
  const Tensor<float> cl = p.clothing_lat.cast<float>();
  return net.predict(zeta, t, &img, &cl);
}

}  // namespace

LatentTensor sample_tryon(const ConditionedUNet<float>& net, const NoiseSchedule& sched, const SyntheticSample& s,
                          const ExperimentConfig& cfg, Rng& rng) {
  const PreparedSample p = prepare_sample(s, net.config(), cfg.patch);
  const Tensor<float> img = p.clothing.cast<float>();
  const Tensor<float> cl = p.clothing_lat.cast<float>();
  Denoiser model = [&](const LatentTensor& z, int t) {
    const Tensor<float> zeta = assemble_zeta({z, p.agnostic_lat, p.mask_lat, p.pose_lat}).cast<float>();
    return net.predict(zeta, t, &img, &cl).eps_hat.cast<double>();
  };
  Tensor<double> known(p.mask_lat.shape());
  for (std::size_t i = 0; i < known.size(); ++i) known[i] = 1.0 - p.mask_lat[i];
  return sample(model, p.z0.shape(), sched, cfg.eval.sample_steps, RepaintInputs{p.agnostic_lat, known}, rng,
                cfg.eval.deterministic_sampler ? StepKind::deterministic : StepKind::ancestral);
}

EvalReport eval_correspondence(const ConditionedUNet<float>& net, const NoiseSchedule& sched,
                               const std::vector<SyntheticSample>& set, const ExperimentConfig& cfg, int t_eval,
                               int sample_subset) {
  if (t_eval < 1 || t_eval > sched.steps) throw std::out_of_range("eval_correspondence: t_eval outside 1..T");
  EvalReport r;
  double sq = 0;
  long px = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const PreparedSample p = prepare_sample(set[i], net.config(), cfg.patch);
    Rng rng(eval_noise_seed(cfg, i));
    const UNetOutput<float> out = attention_at(net, sched, p, t_eval, rng);
    score_attention(out.attn, set[i], r.blocks);
    if (static_cast<int>(i) < sample_subset) {
      const ImageTensor img = decode(sample_tryon(net, sched, set[i], cfg, rng), cfg.patch);
      const auto& m = set[i].garment_mask;
      for (int ch = 0; ch < 3; ++ch) {
        for (int y = 0; y < m.dim(1); ++y) {
          for (int x = 0; x < m.dim(2); ++x) {
            if (m.at(0, y, x) < 0.5) continue;
            const double d = img.at(ch, y, x) - set[i].person.at(ch, y, x);
            sq += d * d;
            ++px;
          }
        }
      }
      ++r.rmse_samples;
    }
  }
  r.rmse = px ? std::sqrt(sq / static_cast<double>(px)) : 0;
  return r;
}

void write_metrics_csv(const std::filesystem::path& path, const std::string& label, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kMetricsHeader << "\n";
  char buf[512];
  for (std::size_t i = 0; i < r.blocks.size(); ++i) {
    const auto& b = r.blocks[i];
    std::snprintf(buf, sizeof buf, "%s,%zu,%d,%d,%d,%d,%d,%ld,%.9g,%.9g,%.9g,%.9g,%.9g,,\n", label.c_str(), i, b.level,
                  b.query_h, b.query_w, b.key_h, b.key_w, b.queries, b.acc_r0(), b.acc_r1(), b.chance(),
                  b.mean_entropy(), b.mean_tv());
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%s,all,,,,,,%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n", label.c_str(), r.queries(),
                r.acc_r0(), r.acc_r1(), r.chance(), r.mean_entropy(), r.mean_tv(), r.rmse, r.rmse_samples);
  out << buf;
}

ImageTensor attention_mosaic(const AttentionMap<double>& a, const ImageTensor& clothing) {
  const int hq = a.query_h(), wq = a.query_w(), hk = a.key_h(), wk = a.key_w();
  if (clothing.dim(1) % hk != 0 || clothing.dim(2) % wk != 0) {
    throw std::invalid_argument("attention_mosaic: clothing size is not a multiple of the key grid");
  }
  const Tensor<double> small = patch_mean(clothing, clothing.dim(1) / hk);
  ImageTensor out({3, hq * hk, wq * wk});
  for (int i = 0; i < hq; ++i) {
    for (int j = 0; j < wq; ++j) {
      const double* row = a.weights.data() + static_cast<std::size_t>(i * wq + j) * hk * wk;
      double mx = 0;
      for (int k = 0; k < hk * wk; ++k) mx = std::max(mx, row[k]);
      for (int k = 0; k < hk; ++k) {
        for (int l = 0; l < wk; ++l) {
          const double v = mx > 0 ? 0.75 * row[k * wk + l] / mx : 0;
          for (int ch = 0; ch < 3; ++ch) {
            const double heat = ch == 0 ? 1.0 : 0.0;
            out.at(ch, i * hk + k, j * wk + l) = (1 - v) * 0.6 * small.at(ch, k, l) + v * heat;
          }
        }
      }
    }
  }
  return out;
}

ImageTensor center_map_image(const Tensor<double>& F, const Tensor<double>& mask, int key_cells, int scale) {
  const int hq = F.dim(0), wq = F.dim(1);
  const double bound = 1.0 / key_cells;
  ImageTensor out({3, hq * scale, wq * scale});
  for (int i = 0; i < hq; ++i) {
    for (int j = 0; j < wq; ++j) {
      const std::size_t q = static_cast<std::size_t>(i * wq + j);
      const double rgb[3] = {std::clamp(0.5 + 0.5 * F[q * 2] / bound, 0.0, 1.0),
                             std::clamp(0.5 + 0.5 * F[q * 2 + 1] / bound, 0.0, 1.0), mask[q] > 0.5 ? 1.0 : 0.0};
      for (int y = 0; y < scale; ++y) {
        for (int x = 0; x < scale; ++x) {
          for (int ch = 0; ch < 3; ++ch) out.at(ch, i * scale + y, j * scale + x) = rgb[ch];
        }
      }
    }
  }
  return out;
}

std::vector<std::filesystem::path> dump_attention(const ConditionedUNet<float>& net, const NoiseSchedule& sched,
                                                  const SyntheticSample& s, const ExperimentConfig& cfg, int t_eval,
                                                  const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw std::runtime_error("cannot create " + out_dir.string());
  const PreparedSample p = prepare_sample(s, net.config(), cfg.patch);
  Rng rng(eval_noise_seed(cfg, 0));
  const UNetOutput<float> out = attention_at(net, sched, p, t_eval, rng);
  std::vector<std::filesystem::path> files;
  std::ofstream m(out_dir / "manifest.txt");
  if (!m) throw std::runtime_error("cannot write " + (out_dir / "manifest.txt").string());
  m << "dtype = f32\nendianness = little\nstep = " << t_eval << "\nlayout = query_h,query_w,key_h,key_w\n";
  for (std::size_t bi = 0; bi < out.attn.size(); ++bi) {
    const AttentionMap<double> a{out.attn[bi].weights.cast<double>()};
    const int hq = a.query_h(), wq = a.query_w(), hk = a.key_h(), wk = a.key_w();
    const std::string tag = "l" + std::to_string(bi);
    const auto blob = out_dir / ("attn_" + tag + ".f32");
    write_f32_blob(blob, out.attn[bi].weights.storage());
    const Tensor<double> F = center_coordinate_map(a, normalized_grid(hk, wk));
    const auto fblob = out_dir / ("center_" + tag + ".f32");
    write_f32_blob(fblob, F.cast<float>().storage());
    const auto overlay = out_dir / ("overlay_" + tag + ".ppm");
    write_ppm(overlay, attention_mosaic(a, s.clothing));
    const auto center = out_dir / ("center_" + tag + ".ppm");
    write_ppm(center, center_map_image(F, resize_mask_nearest(s.garment_mask, hq, wq), hk * wk, 8));
    m << "block " << bi << " level=" << bi << " step=" << t_eval << " query_h=" << hq << " query_w=" << wq
      << " key_h=" << hk << " key_w=" << wk << " count=" << a.weights.size() << " attn=" << blob.filename().string()
      << " center=" << fblob.filename().string() << " center_shape=" << hq << "," << wq << ",2"
      << " overlay=" << overlay.filename().string() << " center_image=" << center.filename().string() << "\n";
    files.insert(files.end(), {blob, fblob, overlay, center});
  }
  files.push_back(out_dir / "manifest.txt");
  return files;
}

}  // namespace zca
