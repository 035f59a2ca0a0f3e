#pragma once

#include <cmath>
#include <vector>

#include "zca/params.hpp"

namespace zca {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay Adam. Frozen parameters are never touched.
template <typename T>
class AdamW {
 public:
  AdamW(const ParamStore<T>& store, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& p : store.all()) {
      m_.emplace_back(p.value.shape(), T(0));
      v_.emplace_back(p.value.shape(), T(0));
    }
  }

  void step(ParamStore<T>& store, const GradBuffer<T>& grads) {
    ++t_;
    const double bc1 = 1 - std::pow(cfg_.beta1, t_), bc2 = 1 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store[static_cast<int>(i)];
      if (p.frozen) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& g = grads.grads[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double gk = g[k];
        m[k] = static_cast<T>(cfg_.beta1 * m[k] + (1 - cfg_.beta1) * gk);
        v[k] = static_cast<T>(cfg_.beta2 * v[k] + (1 - cfg_.beta2) * gk * gk);
        const double mh = m[k] / bc1, vh = v[k] / bc2;
        const double w = p.value[k];
        p.value[k] = static_cast<T>(w - cfg_.lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w));
      }
    }
  }

  int steps_taken() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  int t_ = 0;
};

}  // namespace zca
