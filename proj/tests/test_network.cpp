#include <cmath>

#include "doctest.h"
#include "zca/network.hpp"
#include "zca/rng.hpp"

using namespace zca;

namespace {

UNetConfig small_config() {
  UNetConfig c;
  c.base_width = 8;
  c.depth = 2;
  c.heads = 2;
  c.groups = 2;
  c.embed_width = 4;
  c.latent_h = 8;
  c.latent_w = 8;
  c.image_h = 32;
  c.image_w = 32;
  return c;
}

template <typename T>
Tensor<T> randn(Rng& rng, Shape s, double scale = 1.0) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <typename T>
Tensor<T> with_zero_extra(const Tensor<T>& zeta) {
  Tensor<T> z = zeta;
  const std::size_t plane = static_cast<std::size_t>(z.dim(1)) * z.dim(2);
  for (std::size_t i = 4 * plane; i < z.size(); ++i) z[i] = 0;
  return z;
}

template <typename T>
void zero_init_identities(double tol) {
  const UNetConfig cfg = small_config();
  ConditionedUNet<T> net(cfg, 3);
  Rng rng(8);
  Tensor<T> zeta = randn<T>(rng, {13, 8, 8});
  Tensor<T> image = randn<T>(rng, {3, 32, 32});
  Tensor<T> cloth = randn<T>(rng, {4, 8, 8});
  Tensor<T> other = randn<T>(rng, {4, 8, 8}, 3.0);

  const auto full = net.predict(zeta, 500, &image, &cloth);
  const auto zeroed = net.predict(with_zero_extra(zeta), 500, &image, &cloth);
  CHECK(static_cast<double>(max_abs_diff(full.eps_hat, zeroed.eps_hat)) < tol);

  const auto base = net.predict(zeta, 500, nullptr, nullptr);
  CHECK(static_cast<double>(max_abs_diff(full.eps_hat, base.eps_hat)) < tol);
  const auto swapped = net.predict(zeta, 500, &image, &other);
  CHECK(static_cast<double>(max_abs_diff(full.eps_hat, swapped.eps_hat)) < tol);

  // 4-channel base path equals the 13-channel path at init
  Tensor<T> z4({4, 8, 8});
  std::copy(zeta.data(), zeta.data() + z4.size(), z4.data());
  const auto narrow = net.predict(z4, 500, nullptr, nullptr);
  CHECK(static_cast<double>(max_abs_diff(full.eps_hat, narrow.eps_hat)) < tol);
}

}  // namespace

TEST_CASE("assemble_zeta order and shape") {
  ZetaInput z{LatentTensor({4, 2, 3}, 1.0), LatentTensor({4, 2, 3}, 2.0), Tensor<double>({1, 2, 3}, 3.0),
              LatentTensor({4, 2, 3}, 4.0)};
  LatentTensor out = assemble_zeta(z);
  CHECK(out.shape() == Shape{kZetaChannels, 2, 3});
  CHECK(kZetaChannels == 4 + 4 + 1 + 4);
  const double want[13] = {1, 1, 1, 1, 2, 2, 2, 2, 3, 4, 4, 4, 4};
  for (int c = 0; c < 13; ++c) CHECK(out.at(c, 1, 2) == want[c]);
  ZetaInput zero{LatentTensor({4, 2, 3}), LatentTensor({4, 2, 3}), Tensor<double>({1, 2, 3}), LatentTensor({4, 2, 3})};
  CHECK(max_abs(assemble_zeta(zero)) == 0.0);
  z.mask = Tensor<double>({1, 2, 2});
  CHECK_THROWS_AS(assemble_zeta(z), std::invalid_argument);
}

TEST_CASE("config: attention levels exclude the coarsest") {
  UNetConfig c;
  CHECK(c.attn_levels() == std::vector<int>{0, 1});
  c.depth = 3;
  c.latent_h = 16;
  c.latent_w = 16;
  CHECK(c.attn_levels() == std::vector<int>{0, 1, 2});
  c.latent_w = 12;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("zero-init: expansion conv, projection and zero layers are exactly zero") {
  ConditionedUNet<float> net(UNetConfig{}, 1);
  int zeroed = 0;
  for (const auto& p : net.params().all()) {
    const bool must_be_zero = p.name == "expand_in.w" || p.name == "emb_proj.w" || p.name == "emb_proj.b" ||
                              p.name.find(".zero.") != std::string::npos;
    if (!must_be_zero) continue;
    ++zeroed;
    CHECK(max_abs(p.value) == 0.0f);
  }
  CHECK(zeroed == 3 + 2 * 2);
}

TEST_CASE("zero-init dual identity, 32-bit") { zero_init_identities<float>(1e-6); }
TEST_CASE("zero-init dual identity, 64-bit") { zero_init_identities<double>(1e-12); }

TEST_CASE("spatial encoder: structural copy, shapes and purity") {
  const UNetConfig cfg = small_config();
  ConditionedUNet<double> net(cfg, 5);
  int pairs = 0;
  for (const auto& p : net.params().all()) {
    if (p.name.rfind("enc.", 0) != 0) continue;
    const int j = net.params().find("spatial." + p.name.substr(4));
    REQUIRE(j >= 0);
    CHECK(net.params()[j].value.storage() == p.value.storage());
    CHECK(net.params()[j].group == "spatial");
    ++pairs;
  }
  CHECK(pairs > 0);

  Tensor<double> zero({4, 8, 8}, 0.0);
  const auto pyr = net.spatial_encoder_forward(zero, 10);
  REQUIRE(pyr.size() == static_cast<std::size_t>(cfg.depth + 1));
  for (int l = 0; l <= cfg.depth; ++l) {
    CHECK(pyr[static_cast<std::size_t>(l)].shape() == Shape{cfg.channels(l), cfg.level_h(l), cfg.level_w(l)});
  }
  CHECK(max_abs(pyr[0]) > 0.0);
  const auto again = net.spatial_encoder_forward(zero, 10);
  for (std::size_t l = 0; l < pyr.size(); ++l) CHECK(pyr[l].storage() == again[l].storage());
  CHECK_THROWS_AS(net.spatial_encoder_forward(Tensor<double>({4, 4, 4}), 10), std::invalid_argument);
}

TEST_CASE("zero cross-attention block") {
  const UNetConfig cfg = small_config();
  ConditionedUNet<double> net(cfg, 7);
  Rng rng(2);
  // give the zero layers weight so the cross path is live
  for (auto& p : net.params().all())
    if (p.name.find(".zero.") != std::string::npos)
      for (auto& v : p.value.values()) v = 0.3 * rng.normal();

  Tensor<double> x = randn<double>(rng, {8, 8, 8});
  Tensor<double> kv = randn<double>(rng, {8, 4, 6});
  const auto [out, attn] = net.zero_cross_attention(0, x, kv);
  CHECK(attn.weights.shape() == Shape{8, 8, 4, 6});
  for (int r = 0; r < 64; ++r) {
    double s = 0;
    for (int m = 0; m < 24; ++m) {
      const double w = attn.weights[static_cast<std::size_t>(r * 24 + m)];
      CHECK(w >= 0.0);
      s += w;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }

  SUBCASE("single key token gives rows of exactly one") {
    const auto one = net.zero_cross_attention(0, x, randn<double>(rng, {8, 1, 1}));
    for (double w : one.second.weights.values()) CHECK(w == 1.0);
  }
  SUBCASE("key permutation permutes the attention and leaves the output") {
    std::vector<int> perm(24);
    for (int i = 0; i < 24; ++i) perm[static_cast<std::size_t>(i)] = (7 * i + 5) % 24;
    Tensor<double> kvp(kv.shape());
    for (int c = 0; c < 8; ++c)
      for (int m = 0; m < 24; ++m) kvp[static_cast<std::size_t>(c * 24 + m)] = kv[static_cast<std::size_t>(c * 24 + perm[static_cast<std::size_t>(m)])];
    const auto [outp, attnp] = net.zero_cross_attention(0, x, kvp);
    CHECK(max_abs_diff(out, outp) < 1e-12);
    for (int r = 0; r < 64; ++r)
      for (int m = 0; m < 24; ++m) {
        CHECK(std::abs(attnp.weights[static_cast<std::size_t>(r * 24 + m)] -
                       attn.weights[static_cast<std::size_t>(r * 24 + perm[static_cast<std::size_t>(m)])]) < 1e-12);
      }
  }
  SUBCASE("fresh block is the identity for any key/value input") {
    ConditionedUNet<double> fresh(cfg, 7);
    const auto a = fresh.zero_cross_attention(1, randn<double>(rng, {16, 4, 4}), randn<double>(rng, {16, 4, 4}));
    const auto b = fresh.zero_cross_attention(1, a.first, randn<double>(rng, {16, 2, 2}, 5.0));
    CHECK(max_abs_diff(a.first, b.first) == 0.0);
  }
  CHECK_THROWS_AS(net.zero_cross_attention(2, x, kv), std::invalid_argument);
  CHECK_THROWS_AS(net.zero_cross_attention(0, x, randn<double>(rng, {5, 4, 4})), std::invalid_argument);
}

TEST_CASE("exemplar embedding") {
  const UNetConfig cfg = small_config();
  ConditionedUNet<double> net(cfg, 4);
  Rng rng(1);
  Tensor<double> img = randn<double>(rng, {3, 32, 32});
  const auto e1 = net.exemplar_embed(img);
  CHECK(e1.size() == static_cast<std::size_t>(cfg.temb_dim()));
  CHECK(e1.storage() == net.exemplar_embed(img).storage());
  for (auto& p : net.params().all()) {
    if (p.group != "embedder") continue;
    const bool bias = p.name == "emb_proj.b";
    for (auto& v : p.value.values()) v = bias ? 0.25 : 0.0;
  }
  const auto e2 = net.exemplar_embed(img);
  for (double v : e2.values()) CHECK(v == 0.25);
  CHECK_THROWS_AS(net.exemplar_embed(Tensor<double>({3, 16, 16})), std::invalid_argument);
}

TEST_CASE("unet forward: shapes, attention normalisation and determinism") {
  const UNetConfig cfg = small_config();
  ConditionedUNet<float> net(cfg, 9);
  Rng rng(3);
  Tensor<float> zeta = randn<float>(rng, {13, 8, 8});
  Tensor<float> img = randn<float>(rng, {3, 32, 32});
  Tensor<float> cloth = randn<float>(rng, {4, 8, 8});
  const auto out = net.predict(zeta, 250, &img, &cloth);
  CHECK(out.eps_hat.shape() == Shape{4, 8, 8});
  REQUIRE(out.attn.size() == 2);
  for (std::size_t b = 0; b < out.attn.size(); ++b) {
    const auto& a = out.attn[b];
    CHECK(a.query_h() == cfg.level_h(static_cast<int>(b)));
    const int keys = a.key_h() * a.key_w();
    for (int r = 0; r < a.query_h() * a.query_w(); ++r) {
      double s = 0;
      for (int m = 0; m < keys; ++m) s += a.weights[static_cast<std::size_t>(r * keys + m)];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  const auto again = net.predict(zeta, 250, &img, &cloth);
  CHECK(out.eps_hat.storage() == again.eps_hat.storage());
  CHECK_THROWS_AS(net.predict(Tensor<float>({12, 8, 8}), 250, &img, &cloth), std::invalid_argument);

  ConditionedUNet<float> twin(cfg, 9);
  CHECK(twin.predict(zeta, 250, &img, &cloth).eps_hat.storage() == out.eps_hat.storage());
}

TEST_CASE("freeze policy partitions the groups") {
  ConditionedUNet<float> net(UNetConfig{}, 1);
  const auto groups = net.params().groups();
  for (const char* g : {"base", "expansion", "spatial", "zero_attn.l0", "zero_attn.l1", "embedder"}) {
    CHECK(std::find(groups.begin(), groups.end(), g) != groups.end());
  }
  apply_freeze_policy(net.params(), TrainStage::phase1);
  for (const auto& p : net.params().all()) CHECK(p.frozen == (p.group == "base"));
  apply_freeze_policy(net.params(), TrainStage::pretrain);
  for (const auto& p : net.params().all()) CHECK(p.frozen == (p.group != "base"));
}
