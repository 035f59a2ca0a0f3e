#pragma once

#include <algorithm>
#include <string>
#include <unordered_map>
#include <vector>

#include "zca/graph.hpp"
#include "zca/tensor.hpp"

namespace zca {

template <typename T>
struct Parameter {
  std::string name;
  std::string group;
  bool frozen = false;
  Tensor<T> value;
};

// Ordered, named parameter collection. Insertion order is the checkpoint order.
template <typename T>
class ParamStore {
 public:
  int add(std::string name, std::string group, bool frozen, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_.emplace(name, static_cast<int>(params_.size()));
    params_.push_back({std::move(name), std::move(group), frozen, std::move(value)});
    return static_cast<int>(params_.size()) - 1;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](int i) { return params_.at(static_cast<std::size_t>(i)); }
  const Parameter<T>& operator[](int i) const { return params_.at(static_cast<std::size_t>(i)); }
  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::vector<std::string> groups() const {
    std::vector<std::string> out;
    for (const auto& p : params_)
      if (std::find(out.begin(), out.end(), p.group) == out.end()) out.push_back(p.group);
    return out;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p.name, p.group, p.frozen, p.value.template cast<U>());
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, int> index_;
};

// Per-parameter gradient accumulators matching a ParamStore.
template <typename T>
struct GradBuffer {
  std::vector<Tensor<T>> grads;

  explicit GradBuffer(const ParamStore<T>& store) {
    grads.reserve(store.size());
    for (const auto& p : store.all()) grads.emplace_back(p.value.shape(), T(0));
  }
  void zero() {
    for (auto& g : grads) g.fill(T(0));
  }
  void scale(T s) {
    for (auto& g : grads)
      for (auto& v : g.values()) v *= s;
  }
};

enum class GradMode {
  none,       // inference: no closures recorded
  trainable,  // gradients for non-frozen parameters only
  all,        // gradients for every parameter, frozen ones included
};

// Lazily places parameters on a graph as leaves. Parameters outside the
// selected GradMode are constants, so their weight gradients are never formed.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(Graph<T>& g, const ParamStore<T>& store, GradMode mode = GradMode::trainable)
      : g_(g), store_(store), mode_(mode), vars_(store.size()) {}

  Graph<T>& graph() { return g_; }

  Var operator()(int index) {
    if (index < 0) return Var{};
    Var& v = vars_.at(static_cast<std::size_t>(index));
    if (!v.valid()) {
      const auto& p = store_[index];
      const bool rg = mode_ == GradMode::all || (mode_ == GradMode::trainable && !p.frozen);
      v = g_.leaf(p.value, rg);
    }
    return v;
  }

  void accumulate(GradBuffer<T>& buf) const {
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      if (!vars_[i].valid() || !g_.has_grad(vars_[i])) continue;
      const Tensor<T>& gr = g_.grad(vars_[i]);
      Tensor<T>& dst = buf.grads[i];
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += gr[k];
    }
  }

 private:
  Graph<T>& g_;
  const ParamStore<T>& store_;
  GradMode mode_;
  std::vector<Var> vars_;
};

}  // namespace zca
