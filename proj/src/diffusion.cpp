#include "zca/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace zca {

namespace {

void check_step(const NoiseSchedule& sched, int t, const char* what) {
  if (t < 1 || t > sched.steps) {
    throw std::out_of_range(std::string(what) + ": step " + std::to_string(t) + " outside [1, " +
                            std::to_string(sched.steps) + "]");
  }
}

void check_same(const LatentTensor& a, const LatentTensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

}  // namespace

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > steps) throw std::out_of_range("alpha_bar_at: step out of range");
  return alpha_bar[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("build_schedule: step count must be positive");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end)) {
    throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(static_cast<std::size_t>(steps));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.beta[static_cast<std::size_t>(i)] = b;
    s.alpha[static_cast<std::size_t>(i)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<std::size_t>(i)] = prod;
  }
  validate_schedule(s);
  return s;
}

void validate_schedule(const NoiseSchedule& s) {
  const auto n = static_cast<std::size_t>(s.steps);
  if (s.steps < 1 || s.beta.size() != n || s.alpha.size() != n || s.alpha_bar.size() != n) {
    throw std::invalid_argument("schedule: inconsistent array lengths");
  }
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(s.beta[i] > 0.0 && s.beta[i] < 1.0)) throw std::invalid_argument("schedule: beta outside (0,1)");
    if (s.alpha[i] != 1.0 - s.beta[i]) throw std::invalid_argument("schedule: alpha != 1 - beta");
    prod *= s.alpha[i];
    if (std::abs(s.alpha_bar[i] - prod) > 1e-12 * static_cast<double>(i + 1)) {
      throw std::invalid_argument("schedule: alpha_bar is not the running product of alpha");
    }
    if (!(s.alpha_bar[i] > 0.0 && s.alpha_bar[i] < 1.0)) throw std::invalid_argument("schedule: alpha_bar outside (0,1)");
    if (i > 0 && !(s.alpha_bar[i] < s.alpha_bar[i - 1])) {
      throw std::invalid_argument("schedule: alpha_bar not strictly decreasing");
    }
  }
}

LatentTensor forward_diffuse(const LatentTensor& z0, int t, const LatentTensor& eps, const NoiseSchedule& sched) {
  check_step(sched, t, "forward_diffuse");
  check_same(z0, eps, "forward_diffuse");
  const double ab = sched.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  LatentTensor out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

LatentTensor reverse_step(const LatentTensor& z_t, const LatentTensor& eps_hat, int t, int t_prev,
                          const NoiseSchedule& sched, const LatentTensor& noise, StepKind kind) {
  check_step(sched, t, "reverse_step");
  if (t_prev < 0 || t_prev >= t) throw std::out_of_range("reverse_step: need 0 <= t_prev < t");
  check_same(z_t, eps_hat, "reverse_step");
  check_same(z_t, noise, "reverse_step");
  const double ab_t = sched.alpha_bar_at(t);
  const double ab_prev = sched.alpha_bar_at(t_prev);
  const double sqrt_ab_t = std::sqrt(ab_t);
  const double sqrt_1m_ab_t = std::sqrt(1.0 - ab_t);
  LatentTensor out(z_t.shape());
  if (kind == StepKind::deterministic) {
    const double c0 = std::sqrt(ab_prev), c1 = std::sqrt(1.0 - ab_prev);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x0 = (z_t[i] - sqrt_1m_ab_t * eps_hat[i]) / sqrt_ab_t;
      out[i] = c0 * x0 + c1 * eps_hat[i];
    }
    return out;
  }
  const double alpha_eff = ab_t / ab_prev;
  const double beta_eff = 1.0 - alpha_eff;
  const double c_x0 = std::sqrt(ab_prev) * beta_eff / (1.0 - ab_t);
  const double c_zt = std::sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t);
  const double sigma = t_prev == 0 ? 0.0 : std::sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta_eff);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (z_t[i] - sqrt_1m_ab_t * eps_hat[i]) / sqrt_ab_t;
    out[i] = c_x0 * x0 + c_zt * z_t[i];
    if (sigma != 0.0) out[i] += sigma * noise[i];
  }
  return out;
}

LatentTensor ancestral_step(const LatentTensor& z_t, const LatentTensor& eps_hat, int t, const NoiseSchedule& sched,
                            const LatentTensor& noise, StepKind kind) {
  return reverse_step(z_t, eps_hat, t, t - 1, sched, noise, kind);
}

LatentTensor repaint_blend(const LatentTensor& z_next, const LatentTensor& z0_known, const LatentTensor& known_mask,
                           int t_next, const NoiseSchedule& sched, const LatentTensor& noise) {
  check_same(z_next, z0_known, "repaint_blend");
  check_same(z_next, noise, "repaint_blend");
  if (t_next < 0 || t_next > sched.steps) throw std::out_of_range("repaint_blend: step out of range");
  if (z_next.rank() != 3 || known_mask.rank() != 3 || known_mask.dim(1) != z_next.dim(1) ||
      known_mask.dim(2) != z_next.dim(2) || (known_mask.dim(0) != 1 && known_mask.dim(0) != z_next.dim(0))) {
    throw std::invalid_argument("repaint_blend: mask shape " + shape_str(known_mask.shape()) +
                                " incompatible with latent " + shape_str(z_next.shape()));
  }
  for (double m : known_mask.values()) {
    if (m != 0.0 && m != 1.0) throw std::invalid_argument("repaint_blend: mask must be binary");
  }
  const bool broadcast = known_mask.dim(0) == 1;
  const std::size_t plane = static_cast<std::size_t>(z_next.dim(1)) * z_next.dim(2);
  const double ab = sched.alpha_bar_at(t_next);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  LatentTensor out = z_next;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = broadcast ? known_mask[i % plane] : known_mask[i];
    if (m == 1.0) out[i] = t_next == 0 ? z0_known[i] : a * z0_known[i] + b * noise[i];
  }
  return out;
}

std::vector<int> strided_timesteps(int total_steps, int count) {
  if (count < 1 || count > total_steps) throw std::invalid_argument("strided_timesteps: need 1 <= steps <= T");
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(count));
  for (int i = count; i >= 1; --i) {
    ts.push_back(static_cast<int>((static_cast<long long>(i) * total_steps) / count));
  }
  return ts;
}

LatentTensor sample(const Denoiser& model, const Shape& latent_shape, const NoiseSchedule& sched, int steps,
                    const std::optional<RepaintInputs>& repaint, Rng& rng, StepKind kind) {
  if (steps > sched.steps) throw std::invalid_argument("sample: steps exceeds schedule length");
  const std::vector<int> ts = strided_timesteps(sched.steps, steps);
  LatentTensor z = rng.normal_tensor(latent_shape);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const LatentTensor eps_hat = model(z, t);
    const LatentTensor noise = rng.normal_tensor(latent_shape);
    z = reverse_step(z, eps_hat, t, t_prev, sched, noise, kind);
    if (repaint) {
      const LatentTensor known_noise = rng.normal_tensor(latent_shape);
      z = repaint_blend(z, repaint->z0_known, repaint->known_mask, t_prev, sched, known_noise);
    }
  }
  return z;
}

}  // namespace zca
