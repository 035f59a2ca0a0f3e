#include "zca/network.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "zca/rng.hpp"

namespace zca {

std::vector<int> UNetConfig::attn_levels() const {
  std::vector<int> out;
  for (int l = 0; l < depth; ++l) out.push_back(l);
  return out;
}

void UNetConfig::validate() const {
  if (base_width < 1 || depth < 1 || heads < 1 || groups < 1 || embed_width < 1) {
    throw std::invalid_argument("UNetConfig: widths, depth, heads and groups must be positive");
  }
  if (latent_h % (1 << depth) != 0 || latent_w % (1 << depth) != 0) {
    throw std::invalid_argument("UNetConfig: latent size must be divisible by 2^depth");
  }
  if (base_width % groups != 0) throw std::invalid_argument("UNetConfig: base_width must be divisible by groups");
  for (int l : attn_levels()) {
    if (channels(l) % heads != 0) throw std::invalid_argument("UNetConfig: attention width not divisible by heads");
  }
  if (image_h % 4 != 0 || image_w % 4 != 0) throw std::invalid_argument("UNetConfig: image size must be divisible by 4");
}

LatentTensor assemble_zeta(const ZetaInput& z) {
  auto check = [&](const Tensor<double>& t, int ch, const char* name) {
    if (t.rank() != 3 || t.dim(0) != ch || t.dim(1) != z.z_t.dim(1) || t.dim(2) != z.z_t.dim(2)) {
      throw std::invalid_argument(std::string("assemble_zeta: ") + name + " has shape " + shape_str(t.shape()));
    }
  };
  if (z.z_t.rank() != 3) throw std::invalid_argument("assemble_zeta: z_t must be (4, h, w)");
  check(z.z_t, 4, "z_t");
  check(z.agnostic_lat, 4, "agnostic latent");
  check(z.mask, 1, "mask");
  check(z.pose_lat, 4, "pose latent");
  LatentTensor out({kZetaChannels, z.z_t.dim(1), z.z_t.dim(2)});
  double* dst = out.data();
  for (const Tensor<double>* part : {&z.z_t, &z.agnostic_lat, &z.mask, &z.pose_lat}) {
    dst = std::copy(part->data(), part->data() + part->size(), dst);
  }
  return out;
}

template <typename T>
Tensor<T> timestep_features(int t, int dim) {
  Tensor<T> f({1, dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
    f[static_cast<std::size_t>(i)] = static_cast<T>(std::sin(t * freq));
    f[static_cast<std::size_t>(i + half)] = static_cast<T>(std::cos(t * freq));
  }
  return f;
}

namespace {

enum class Init { normal, zeros, ones };

}  // namespace

template <typename T>
ConditionedUNet<T>::ConditionedUNet(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  build(seed);
  copy_encoder_to_spatial();
}

template <typename T>
ConditionedUNet<T>::ConditionedUNet(UNetConfig cfg, ParamStore<T> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  bind_layout();
}

template <typename T>
void ConditionedUNet<T>::build(std::uint64_t seed) {
  params_ = ParamStore<T>{};
  {
    Rng r(seed);
    auto make = [&](const std::string& name, const std::string& group, bool frozen, Shape shape, Init init,
                    double fan_in) {
      Tensor<T> v(shape);
      if (init == Init::ones) v.fill(T(1));
      if (init == Init::normal) {
        const double sd = 1.0 / std::sqrt(fan_in);
        for (auto& x : v.values()) x = static_cast<T>(r.normal() * sd);
      }
      params_.add(name, group, frozen, std::move(v));
    };
    const int c0 = cfg_.base_width, te = cfg_.temb_dim(), d = cfg_.depth;
    auto conv = [&](const std::string& n, const std::string& grp, bool fr, int cin, int cout, int k, bool bias,
                    Init init = Init::normal) {
      make(n + ".w", grp, fr, {cout, cin, k, k}, init, static_cast<double>(cin * k * k));
      if (bias) make(n + ".b", grp, fr, {cout}, Init::zeros, 1.0);
    };
    auto linear_p = [&](const std::string& n, const std::string& grp, bool fr, int cin, int cout, bool bias,
                        Init init = Init::normal) {
      make(n + ".w", grp, fr, {cout, cin}, init, static_cast<double>(cin));
      if (bias) make(n + ".b", grp, fr, {cout}, Init::zeros, 1.0);
    };
    auto norm = [&](const std::string& n, const std::string& grp, bool fr, int c) {
      make(n + ".g", grp, fr, {c}, Init::ones, 1.0);
      make(n + ".b", grp, fr, {c}, Init::zeros, 1.0);
    };
    auto res = [&](const std::string& n, const std::string& grp, bool fr, int cin, int cout) {
      norm(n + ".n1", grp, fr, cin);
      conv(n + ".c1", grp, fr, cin, cout, 3, true);
      linear_p(n + ".temb", grp, fr, te, cout, true);
      norm(n + ".n2", grp, fr, cout);
      conv(n + ".c2", grp, fr, cout, cout, 3, true);
      if (cin != cout) conv(n + ".skip", grp, fr, cin, cout, 1, true);
    };
    auto encoder = [&](const std::string& prefix, const std::string& grp, bool fr) {
      conv(prefix + "in", grp, fr, 4, c0, 3, true);
      for (int l = 0; l <= d; ++l) {
        res(prefix + "res" + std::to_string(l), grp, fr, l == 0 ? c0 : cfg_.channels(l - 1), cfg_.channels(l));
        if (l < d) conv(prefix + "down" + std::to_string(l), grp, fr, cfg_.channels(l), cfg_.channels(l), 3, true);
      }
    };
    // Original blocks.
    linear_p("time1", "base", true, c0, te, true);
    linear_p("time2", "base", true, te, te, true);
    encoder("enc.", "base", true);
    res("mid", "base", true, cfg_.channels(d), cfg_.channels(d));
    for (int l = d; l >= 0; --l) {
      const int below = l == d ? cfg_.channels(d) : cfg_.channels(l + 1);
      res("dec" + std::to_string(l), "base", true, below + cfg_.channels(l), cfg_.channels(l));
      if (l > 0) conv("up" + std::to_string(l), "base", true, cfg_.channels(l), cfg_.channels(l), 3, true);
    }
    norm("out_norm", "base", true, c0);
    conv("out", "base", true, c0, 4, 3, true);
    // Conditioning pathways.
    conv("expand_in", "expansion", false, kExtraChannels, c0, 3, false, Init::zeros);
    encoder("spatial.", "spatial", false);
    for (int l : cfg_.attn_levels()) {
      const std::string p = "zca" + std::to_string(l) + ".";
      const std::string grp = "zero_attn.l" + std::to_string(l);
      const int c = cfg_.channels(l);
      norm(p + "ln1", grp, false, c);
      linear_p(p + "sq", grp, false, c, c, false);
      linear_p(p + "sk", grp, false, c, c, false);
      linear_p(p + "sv", grp, false, c, c, false);
      linear_p(p + "so", grp, false, c, c, true);
      norm(p + "ln2", grp, false, c);
      norm(p + "ln_kv", grp, false, c);
      linear_p(p + "cq", grp, false, c, c, false);
      linear_p(p + "ck", grp, false, c, c, false);
      linear_p(p + "cv", grp, false, c, c, false);
      linear_p(p + "co", grp, false, c, c, true);
      norm(p + "ln3", grp, false, c);
      linear_p(p + "ff1", grp, false, c, 2 * c, true);
      linear_p(p + "ff2", grp, false, 2 * c, c, true);
      linear_p(p + "zero", grp, false, c, c, true, Init::zeros);
    }
    const int e = cfg_.embed_width;
    conv("emb1", "embedder", false, 3, e, 3, true);
    conv("emb2", "embedder", false, e, 2 * e, 3, true);
    linear_p("emb_proj", "embedder", false, 2 * e, te, true, Init::zeros);
  }
  bind_layout();
}

template <typename T>
void ConditionedUNet<T>::bind_layout() {
  auto idx = [&](const std::string& name, bool required = true) {
    const int i = params_.find(name);
    if (i < 0 && required) throw std::invalid_argument("model parameters missing " + name);
    return i;
  };
  auto conv = [&](const std::string& n, bool bias = true) { return Conv{idx(n + ".w"), bias ? idx(n + ".b") : -1}; };
  auto lin = [&](const std::string& n, bool bias = true) { return Lin{idx(n + ".w"), bias ? idx(n + ".b") : -1}; };
  auto norm = [&](const std::string& n) { return Norm{idx(n + ".g"), idx(n + ".b")}; };
  auto res = [&](const std::string& n) {
    Res r;
    r.n1 = norm(n + ".n1");
    r.c1 = conv(n + ".c1");
    r.temb = lin(n + ".temb");
    r.n2 = norm(n + ".n2");
    r.c2 = conv(n + ".c2");
    r.skip = Conv{idx(n + ".skip.w", false), idx(n + ".skip.b", false)};
    return r;
  };
  auto encoder = [&](const std::string& prefix) {
    Encoder e;
    e.in = conv(prefix + "in");
    for (int l = 0; l <= cfg_.depth; ++l) {
      e.res.push_back(res(prefix + "res" + std::to_string(l)));
      if (l < cfg_.depth) e.down.push_back(conv(prefix + "down" + std::to_string(l)));
    }
    return e;
  };
  time1_ = lin("time1");
  time2_ = lin("time2");
  enc_ = encoder("enc.");
  mid_ = res("mid");
  dec_.assign(static_cast<std::size_t>(cfg_.depth + 1), Res{});
  up_.assign(static_cast<std::size_t>(cfg_.depth + 1), Conv{});
  for (int l = cfg_.depth; l >= 0; --l) {
    dec_[static_cast<std::size_t>(l)] = res("dec" + std::to_string(l));
    if (l > 0) up_[static_cast<std::size_t>(l)] = conv("up" + std::to_string(l));
  }
  out_norm_ = norm("out_norm");
  out_conv_ = conv("out");
  extra_in_ = conv("expand_in", false);
  spatial_ = encoder("spatial.");
  zca_.assign(static_cast<std::size_t>(cfg_.depth), Zca{});
  for (int l : cfg_.attn_levels()) {
    const std::string p = "zca" + std::to_string(l) + ".";
    Zca z;
    z.ln1 = norm(p + "ln1");
    z.sq = lin(p + "sq", false);
    z.sk = lin(p + "sk", false);
    z.sv = lin(p + "sv", false);
    z.so = lin(p + "so");
    z.ln2 = norm(p + "ln2");
    z.ln_kv = norm(p + "ln_kv");
    z.cq = lin(p + "cq", false);
    z.ck = lin(p + "ck", false);
    z.cv = lin(p + "cv", false);
    z.co = lin(p + "co");
    z.ln3 = norm(p + "ln3");
    z.ff1 = lin(p + "ff1");
    z.ff2 = lin(p + "ff2");
    z.zero = lin(p + "zero");
    zca_[static_cast<std::size_t>(l)] = z;
  }
  emb1_ = conv("emb1");
  emb2_ = conv("emb2");
  emb_proj_ = lin("emb_proj");
}

template <typename T>
void ConditionedUNet<T>::copy_encoder_to_spatial() {
  for (auto& p : params_.all()) {
    if (p.name.rfind("spatial.", 0) != 0) continue;
    const int src = params_.find("enc." + p.name.substr(8));
    if (src < 0) throw std::logic_error("spatial encoder parameter without encoder counterpart: " + p.name);
    p.value = params_[src].value;
  }
}

template <typename T>
Var ConditionedUNet<T>::lin(ParamBinder<T>& b, const Lin& l, Var x) const {
  return linear(b.graph(), x, b(l.w), b(l.b));
}

template <typename T>
Var ConditionedUNet<T>::norm_tokens(ParamBinder<T>& b, const Norm& n, Var x) const {
  return layer_norm(b.graph(), x, b(n.g), b(n.b));
}

template <typename T>
Var ConditionedUNet<T>::res_block(ParamBinder<T>& b, const Res& r, Var x, Var temb_act) const {
  Graph<T>& g = b.graph();
  Var h = silu(g, group_norm(g, x, b(r.n1.g), b(r.n1.b), cfg_.groups));
  h = conv2d(g, h, b(r.c1.w), b(r.c1.b), 1, 1);
  h = add_channel_bias(g, h, linear(g, temb_act, b(r.temb.w), b(r.temb.b)));
  h = silu(g, group_norm(g, h, b(r.n2.g), b(r.n2.b), cfg_.groups));
  h = conv2d(g, h, b(r.c2.w), b(r.c2.b), 1, 1);
  Var skip = r.skip.w >= 0 ? conv2d(g, x, b(r.skip.w), b(r.skip.b), 1, 0) : x;
  return add(g, h, skip);
}

template <typename T>
std::vector<Var> ConditionedUNet<T>::encoder_levels(ParamBinder<T>& b, const Encoder& e, Var h, Var temb_act) const {
  std::vector<Var> levels;
  for (int l = 0; l <= cfg_.depth; ++l) {
    h = res_block(b, e.res[static_cast<std::size_t>(l)], h, temb_act);
    levels.push_back(h);
    if (l < cfg_.depth) {
      const Conv& dn = e.down[static_cast<std::size_t>(l)];
      h = conv2d(b.graph(), h, b(dn.w), b(dn.b), 2, 1);
    }
  }
  return levels;
}

template <typename T>
Var ConditionedUNet<T>::time_embedding(ParamBinder<T>& b, int t) const {
  Graph<T>& g = b.graph();
  Var f = g.constant(timestep_features<T>(t, cfg_.base_width));
  Var h = silu(g, lin(b, time1_, f));
  return lin(b, time2_, h);
}

template <typename T>
Var ConditionedUNet<T>::exemplar_embed(ParamBinder<T>& b, Var image) const {
  Graph<T>& g = b.graph();
  const Tensor<T>& iv = g.value(image);
  if (iv.rank() != 3 || iv.dim(0) != 3 || iv.dim(1) != cfg_.image_h || iv.dim(2) != cfg_.image_w) {
    throw std::invalid_argument("exemplar_embed: expected (3, " + std::to_string(cfg_.image_h) + ", " +
                                std::to_string(cfg_.image_w) + ") image, got " + shape_str(iv.shape()));
  }
  Var h = silu(g, conv2d(g, image, b(emb1_.w), b(emb1_.b), 2, 1));
  h = silu(g, conv2d(g, h, b(emb2_.w), b(emb2_.b), 2, 1));
  return lin(b, emb_proj_, global_avg_pool(g, h));
}

template <typename T>
std::vector<Var> ConditionedUNet<T>::spatial_encoder(ParamBinder<T>& b, Var clothing, Var temb) const {
  Graph<T>& g = b.graph();
  const Tensor<T>& cv = g.value(clothing);
  if (cv.rank() != 3 || cv.dim(0) != 4 || cv.dim(1) != cfg_.latent_h || cv.dim(2) != cfg_.latent_w) {
    throw std::invalid_argument("spatial_encoder: clothing latent " + shape_str(cv.shape()) +
                                " does not match the configured latent resolution");
  }
  Var h = conv2d(g, clothing, b(spatial_.in.w), b(spatial_.in.b), 1, 1);
  return encoder_levels(b, spatial_, h, silu(g, temb));
}

template <typename T>
BlockVars ConditionedUNet<T>::zero_cross_attention(ParamBinder<T>& b, int level, Var x, Var kv) const {
  if (level < 0 || level >= cfg_.depth) throw std::invalid_argument("zero_cross_attention: no block at this level");
  Graph<T>& g = b.graph();
  const Zca& z = zca_[static_cast<std::size_t>(level)];
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& kvv = g.value(kv);
  const int c = cfg_.channels(level);
  if (xv.rank() != 3 || xv.dim(0) != c || kvv.rank() != 3 || kvv.dim(0) != c) {
    throw std::invalid_argument("zero_cross_attention: channel mismatch at level " + std::to_string(level));
  }
  const int max_tokens = cfg_.latent_h * cfg_.latent_w;
  if (xv.dim(1) * xv.dim(2) > max_tokens || kvv.dim(1) * kvv.dim(2) > max_tokens) {
    throw std::invalid_argument("zero_cross_attention: token count exceeds the configured maximum");
  }
  const int qh = xv.dim(1), qw = xv.dim(2);
  Var tok = to_tokens(g, x);
  Var keys = to_tokens(g, kv);
  // self-attention
  Var h = norm_tokens(b, z.ln1, tok);
  AttentionVars sa = attention(g, lin(b, z.sq, h), lin(b, z.sk, h), lin(b, z.sv, h), cfg_.heads);
  Var x1 = add(g, tok, lin(b, z.so, sa.out));
  // cross-attention: queries from the self-attention output, keys/values from the spatial encoder
  Var hq = norm_tokens(b, z.ln2, x1);
  Var hk = norm_tokens(b, z.ln_kv, keys);
  AttentionVars ca = attention(g, lin(b, z.cq, hq), lin(b, z.ck, hk), lin(b, z.cv, hk), cfg_.heads);
  Var x2 = add(g, x1, lin(b, z.co, ca.out));
  // feed-forward
  Var f = silu(g, lin(b, z.ff1, norm_tokens(b, z.ln3, x2)));
  Var x3 = add(g, x2, lin(b, z.ff2, f));
  Var out = add(g, tok, lin(b, z.zero, x3));
  return {from_tokens(g, out, qh, qw), ca.weights};
}

template <typename T>
UNetVars ConditionedUNet<T>::unet(ParamBinder<T>& b, Var zeta, Var temb, const std::vector<Var>* pyramid) const {
  Graph<T>& g = b.graph();
  const Tensor<T>& zv = g.value(zeta);
  if (zv.rank() != 3 || (zv.dim(0) != kZetaChannels && zv.dim(0) != 4) || zv.dim(1) != cfg_.latent_h ||
      zv.dim(2) != cfg_.latent_w) {
    throw std::invalid_argument("unet: expected (13 or 4, " + std::to_string(cfg_.latent_h) + ", " +
                                std::to_string(cfg_.latent_w) + ") input, got " + shape_str(zv.shape()));
  }
  if (pyramid && pyramid->size() < static_cast<std::size_t>(cfg_.depth)) {
    throw std::invalid_argument("unet: pyramid is missing attention levels");
  }
  const bool conditioned = zv.dim(0) == kZetaChannels;
  Var temb_act = silu(g, temb);
  Var zt = conditioned ? slice_channels(g, zeta, 0, 4) : zeta;
  Var h = conv2d(g, zt, b(enc_.in.w), b(enc_.in.b), 1, 1);
  if (conditioned) {
    Var extra = slice_channels(g, zeta, 4, kZetaChannels);
    h = add(g, h, conv2d(g, extra, b(extra_in_.w), Var{}, 1, 1));
  }
  std::vector<Var> skips = encoder_levels(b, enc_, h, temb_act);
  h = res_block(b, mid_, skips.back(), temb_act);
  UNetVars out;
  for (int l = cfg_.depth; l >= 0; --l) {
    h = concat_channels(g, h, skips[static_cast<std::size_t>(l)]);
    h = res_block(b, dec_[static_cast<std::size_t>(l)], h, temb_act);
    if (l < cfg_.depth && pyramid) {
      BlockVars blk = zero_cross_attention(b, l, h, (*pyramid)[static_cast<std::size_t>(l)]);
      h = blk.out;
      out.attn.push_back(blk.attn);
      out.attn_level.push_back(l);
    }
    if (l > 0) {
      const Conv& u = up_[static_cast<std::size_t>(l)];
      h = conv2d(g, upsample_nearest2x(g, h), b(u.w), b(u.b), 1, 1);
    }
  }
  h = silu(g, group_norm(g, h, b(out_norm_.g), b(out_norm_.b), cfg_.groups));
  out.eps_hat = conv2d(g, h, b(out_conv_.w), b(out_conv_.b), 1, 1);
  // finest first
  std::reverse(out.attn.begin(), out.attn.end());
  std::reverse(out.attn_level.begin(), out.attn_level.end());
  return out;
}

template <typename T>
UNetVars ConditionedUNet<T>::forward(ParamBinder<T>& b, const Tensor<T>& zeta, int t, const Tensor<T>* exemplar_image,
                                     const Tensor<T>* clothing_lat) const {
  Graph<T>& g = b.graph();
  Var temb = time_embedding(b, t);
  if (exemplar_image) temb = add(g, temb, exemplar_embed(b, g.constant(*exemplar_image)));
  std::vector<Var> pyramid;
  if (clothing_lat) pyramid = spatial_encoder(b, g.constant(*clothing_lat), temb);
  return unet(b, g.constant(zeta), temb, clothing_lat ? &pyramid : nullptr);
}

namespace {

template <typename T>
AttentionMap<T> to_map(const Tensor<T>& w, int qh, int qw, int kh, int kw) {
  return AttentionMap<T>{w.reshaped({qh, qw, kh, kw})};
}

}  // namespace

template <typename T>
Tensor<T> ConditionedUNet<T>::exemplar_embed(const Tensor<T>& image) const {
  Graph<T> g;
  ParamBinder<T> b(g, params_, GradMode::none);
  return g.value(exemplar_embed(b, g.constant(image)));
}

template <typename T>
FeaturePyramid<T> ConditionedUNet<T>::spatial_encoder_forward(const Tensor<T>& clothing_lat, int t) const {
  Graph<T> g;
  ParamBinder<T> b(g, params_, GradMode::none);
  FeaturePyramid<T> out;
  for (Var v : spatial_encoder(b, g.constant(clothing_lat), time_embedding(b, t))) out.push_back(g.value(v));
  return out;
}

template <typename T>
std::pair<Tensor<T>, AttentionMap<T>> ConditionedUNet<T>::zero_cross_attention(int level, const Tensor<T>& x,
                                                                               const Tensor<T>& kv) const {
  Graph<T> g;
  ParamBinder<T> b(g, params_, GradMode::none);
  BlockVars blk = zero_cross_attention(b, level, g.constant(x), g.constant(kv));
  return {g.value(blk.out), to_map(g.value(blk.attn), x.dim(1), x.dim(2), kv.dim(1), kv.dim(2))};
}

template <typename T>
UNetOutput<T> ConditionedUNet<T>::unet_forward(const Tensor<T>& zeta, int t, const Tensor<T>* exemplar_embedding,
                                               const FeaturePyramid<T>* pyramid) const {
  Graph<T> g;
  ParamBinder<T> b(g, params_, GradMode::none);
  Var temb = time_embedding(b, t);
  if (exemplar_embedding) temb = add(g, temb, g.constant(*exemplar_embedding));
  std::vector<Var> pyr;
  if (pyramid) {
    for (const auto& lvl : *pyramid) pyr.push_back(g.constant(lvl));
  }
  UNetVars v = unet(b, g.constant(zeta), temb, pyramid ? &pyr : nullptr);
  UNetOutput<T> out{g.value(v.eps_hat), {}};
  for (std::size_t i = 0; i < v.attn.size(); ++i) {
    const int l = v.attn_level[i];
    const auto& kv = pyr[static_cast<std::size_t>(l)];
    out.attn.push_back(to_map(g.value(v.attn[i]), cfg_.level_h(l), cfg_.level_w(l), g.value(kv).dim(1), g.value(kv).dim(2)));
  }
  return out;
}

template <typename T>
UNetOutput<T> ConditionedUNet<T>::predict(const Tensor<T>& zeta, int t, const Tensor<T>* exemplar_image,
                                          const Tensor<T>* clothing_lat) const {
  Graph<T> g;
  ParamBinder<T> b(g, params_, GradMode::none);
  UNetVars v = forward(b, zeta, t, exemplar_image, clothing_lat);
  UNetOutput<T> out{g.value(v.eps_hat), {}};
  for (std::size_t i = 0; i < v.attn.size(); ++i) {
    const int l = v.attn_level[i];
    out.attn.push_back(to_map(g.value(v.attn[i]), cfg_.level_h(l), cfg_.level_w(l), cfg_.level_h(l), cfg_.level_w(l)));
  }
  return out;
}

template class ConditionedUNet<float>;
template class ConditionedUNet<double>;
template Tensor<float> timestep_features<float>(int, int);
template Tensor<double> timestep_features<double>(int, int);

}  // namespace zca
