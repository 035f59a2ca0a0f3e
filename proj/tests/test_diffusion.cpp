#include <cmath>

#include "doctest.h"
#include "zca/diffusion.hpp"

using namespace zca;

namespace {

LatentTensor filled(Shape s, double v) { return LatentTensor(std::move(s), v); }

}  // namespace

TEST_CASE("schedule: small hand cases") {
  NoiseSchedule s1 = build_schedule(1, 0.1, 0.1);
  CHECK(s1.alpha_bar_at(1) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s1.alpha_bar_at(0) == 1.0);

  NoiseSchedule s2 = build_schedule(2, 0.1, 0.2);
  CHECK(s2.beta[0] == 0.1);
  CHECK(s2.beta[1] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(s2.alpha_bar_at(1) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s2.alpha_bar_at(2) == doctest::Approx(0.72).epsilon(1e-15));
}

TEST_CASE("schedule: T=1000 linear matches the precomputed running product") {
  // 40-digit running product of (1 - beta_t), computed outside this code base.
  const double abar_500 = 0.07858724288177823734;
  const double abar_1000 = 4.035829765375683314e-05;
  NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
  CHECK(std::abs(s.alpha_bar_at(500) - abar_500) / abar_500 < 1e-12);
  CHECK(std::abs(s.alpha_bar_at(1000) - abar_1000) / abar_1000 < 1e-12);
}

TEST_CASE("schedule: invariants and rejection") {
  NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
  double prod = 1.0;
  for (int t = 1; t <= s.steps; ++t) {
    const auto i = static_cast<std::size_t>(t - 1);
    REQUIRE(s.beta[i] > 0.0);
    REQUIRE(s.beta[i] < 1.0);
    REQUIRE(s.alpha[i] == 1.0 - s.beta[i]);
    prod *= s.alpha[i];
    REQUIRE(std::abs(s.alpha_bar[i] - prod) <= 1e-12 * t);
    if (t > 1) REQUIRE(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
  }
  CHECK_THROWS_AS(build_schedule(0, 1e-4, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(build_schedule(10, 0.0, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(build_schedule(10, 1e-4, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(build_schedule(10, 0.3, 0.2), std::invalid_argument);

  NoiseSchedule bad = s;
  bad.alpha_bar[10] *= 1.001;
  CHECK_THROWS_AS(validate_schedule(bad), std::invalid_argument);
}

TEST_CASE("forward_diffuse: closed form cases") {
  NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
  Rng rng(3);
  LatentTensor z0 = rng.normal_tensor({4, 3, 2});
  LatentTensor zero = filled({4, 3, 2}, 0.0);
  LatentTensor zt = forward_diffuse(z0, 300, zero, s);
  for (std::size_t i = 0; i < zt.size(); ++i) CHECK(zt[i] == std::sqrt(s.alpha_bar_at(300)) * z0[i]);

  LatentTensor eps = rng.normal_tensor({4, 3, 2});
  LatentTensor zT = forward_diffuse(z0, 1000, eps, s);
  const double bound = std::sqrt(s.alpha_bar_at(1000)) * max_abs(z0) +
                       std::abs(std::sqrt(1 - s.alpha_bar_at(1000)) - 1) * max_abs(eps);
  CHECK(max_abs_diff(zT, eps) <= bound + 1e-15);

  CHECK_THROWS_AS(forward_diffuse(z0, 0, eps, s), std::out_of_range);
  CHECK_THROWS_AS(forward_diffuse(z0, 1001, eps, s), std::out_of_range);
  CHECK_THROWS_AS(forward_diffuse(z0, 5, filled({4, 3, 3}, 0.0), s), std::invalid_argument);
}

TEST_CASE("forward_diffuse: Monte Carlo mean and variance within 5 sigma") {
  NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
  Rng rng(11);
  const int n = 10000;
  const int pairs[5] = {1, 50, 250, 600, 1000};
  for (int t : pairs) {
    LatentTensor z0 = rng.normal_tensor({4, 2, 2});
    std::vector<double> sum(z0.size(), 0.0), sq(z0.size(), 0.0);
    for (int k = 0; k < n; ++k) {
      LatentTensor zt = forward_diffuse(z0, t, rng.normal_tensor(z0.shape()), s);
      for (std::size_t i = 0; i < zt.size(); ++i) {
        sum[i] += zt[i];
        sq[i] += zt[i] * zt[i];
      }
    }
    const double ab = s.alpha_bar_at(t);
    const double var = 1 - ab;
    for (std::size_t i = 0; i < z0.size(); ++i) {
      const double mean = sum[i] / n;
      const double v = (sq[i] - n * mean * mean) / (n - 1);
      CHECK(std::abs(mean - std::sqrt(ab) * z0[i]) <= 5 * std::sqrt(var / n));
      CHECK(std::abs(v - var) <= 5 * var * std::sqrt(2.0 / (n - 1)));
    }
  }
}

TEST_CASE("reverse step: terminal, inversion and linearity") {
  NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
  Rng rng(5);
  LatentTensor z0 = rng.normal_tensor({4, 3, 3});
  LatentTensor eps = rng.normal_tensor({4, 3, 3});
  LatentTensor noise = rng.normal_tensor({4, 3, 3});

  SUBCASE("t = 1 returns the posterior mean without noise") {
    LatentTensor z1 = forward_diffuse(z0, 1, eps, s);
    LatentTensor a = ancestral_step(z1, eps, 1, s, noise);
    LatentTensor b = ancestral_step(z1, eps, 1, s, filled({4, 3, 3}, 0.0));
    CHECK(max_abs_diff(a, b) == 0.0);
    CHECK(max_abs_diff(a, z0) < 1e-10);
  }
  SUBCASE("deterministic single-step schedule recovers z0") {
    NoiseSchedule one = build_schedule(1, 0.3, 0.3);
    LatentTensor z1 = forward_diffuse(z0, 1, eps, one);
    LatentTensor back = ancestral_step(z1, eps, 1, one, filled({4, 3, 3}, 0.0), StepKind::deterministic);
    CHECK(max_abs_diff(back, z0) < 1e-10);
  }
  SUBCASE("posterior mean matches the 1/sqrt(alpha) form") {
    const int t = 400;
    LatentTensor zt = forward_diffuse(z0, t, eps, s);
    LatentTensor eps_hat = rng.normal_tensor({4, 3, 3});
    LatentTensor mean = ancestral_step(zt, eps_hat, t, s, filled({4, 3, 3}, 0.0));
    const double a = s.alpha[t - 1], b = s.beta[t - 1], ab = s.alpha_bar_at(t);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double ref = (zt[i] - b / std::sqrt(1 - ab) * eps_hat[i]) / std::sqrt(a);
      CHECK(mean[i] == doctest::Approx(ref).epsilon(1e-12));
    }
    LatentTensor noisy = ancestral_step(zt, eps_hat, t, s, noise);
    const double sigma = std::sqrt((1 - s.alpha_bar_at(t - 1)) / (1 - ab) * b);
    for (std::size_t i = 0; i < mean.size(); ++i) CHECK(noisy[i] - mean[i] == doctest::Approx(sigma * noise[i]));
  }
  SUBCASE("zero inputs give zero") {
    LatentTensor z = filled({4, 3, 3}, 0.0);
    for (StepKind k : {StepKind::ancestral, StepKind::deterministic}) {
      CHECK(max_abs(ancestral_step(z, z, 700, s, z, k)) == 0.0);
    }
  }
  CHECK_THROWS_AS(ancestral_step(z0, eps, 0, s, noise), std::out_of_range);
  CHECK_THROWS_AS(reverse_step(z0, eps, 10, 10, s, noise, StepKind::ancestral), std::out_of_range);
  CHECK_THROWS_AS(ancestral_step(z0, filled({4, 3, 2}, 0.0), 3, s, noise), std::invalid_argument);
}

TEST_CASE("repaint_blend") {
  NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
  Rng rng(8);
  LatentTensor zn = rng.normal_tensor({4, 4, 4});
  LatentTensor known = rng.normal_tensor({4, 4, 4});
  LatentTensor noise = rng.normal_tensor({4, 4, 4});

  LatentTensor ones({1, 4, 4}, 1.0), zeros({1, 4, 4}, 0.0);
  CHECK(max_abs_diff(repaint_blend(zn, known, ones, 200, s, noise), forward_diffuse(known, 200, noise, s)) == 0.0);
  CHECK(max_abs_diff(repaint_blend(zn, known, zeros, 200, s, noise), zn) == 0.0);

  LatentTensor checker({1, 4, 4});
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) checker.at(0, r, c) = (r + c) % 2;
  LatentTensor out = repaint_blend(zn, known, checker, 0, s, filled({4, 4, 4}, 0.0));
  for (int ch = 0; ch < 4; ++ch)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        CHECK(out.at(ch, r, c) == ((r + c) % 2 ? known.at(ch, r, c) : zn.at(ch, r, c)));
      }

  LatentTensor once = repaint_blend(zn, known, checker, 300, s, noise);
  LatentTensor twice = repaint_blend(once, known, checker, 300, s, noise);
  CHECK(max_abs_diff(once, twice) == 0.0);

  LatentTensor soft({1, 4, 4}, 0.5);
  CHECK_THROWS_AS(repaint_blend(zn, known, soft, 3, s, noise), std::invalid_argument);
  CHECK_THROWS_AS(repaint_blend(zn, known, LatentTensor({2, 4, 4}, 1.0), 3, s, noise), std::invalid_argument);
}

TEST_CASE("strided timesteps and the sampling loop") {
  CHECK(strided_timesteps(1000, 4) == std::vector<int>{1000, 750, 500, 250});
  CHECK(strided_timesteps(10, 10).back() == 1);
  CHECK_THROWS_AS(strided_timesteps(10, 11), std::invalid_argument);

  NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
  Denoiser stub = [](const LatentTensor& z, int) { return z; };
  Rng r1(2);
  LatentTensor one = sample(stub, {4, 3, 3}, s, 1, std::nullopt, r1);
  CHECK(one.shape() == Shape{4, 3, 3});
  CHECK(one.all_finite());

  Rng rng(4);
  RepaintInputs rp{rng.normal_tensor({4, 4, 3}), LatentTensor({1, 4, 3}, 0.0)};
  for (int i = 0; i < 6; ++i) rp.known_mask[static_cast<std::size_t>(i)] = 1.0;
  for (StepKind k : {StepKind::ancestral, StepKind::deterministic}) {
    Rng a(9), b(9);
    LatentTensor x = sample(stub, {4, 4, 3}, s, 50, rp, a, k);
    LatentTensor y = sample(stub, {4, 4, 3}, s, 50, rp, b, k);
    CHECK(max_abs_diff(x, y) == 0.0);
    for (int ch = 0; ch < 4; ++ch)
      for (int i = 0; i < 12; ++i) {
        if (rp.known_mask[static_cast<std::size_t>(i)] == 1.0) {
          const std::size_t at = static_cast<std::size_t>(ch * 12 + i);
          CHECK(x[at] == rp.z0_known[at]);
        }
      }
  }
  Rng r3(1);
  CHECK_THROWS_AS(sample(stub, {4, 3, 3}, build_schedule(10, 1e-4, 0.02), 11, std::nullopt, r3),
                  std::invalid_argument);
}
