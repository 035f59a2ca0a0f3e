#pragma once

#include <functional>
#include <vector>

#include "zca/tensor.hpp"

namespace zca {

// Handle to a node recorded on a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Single-use reverse-mode tape. Every op records its output value together with
// a closure that scatters the output gradient into its inputs. Nodes are
// processed in reverse creation order, so an op with several outputs attaches
// its closure to the last one it creates.
template <typename T>
class Graph {
 public:
  Graph() { nodes_.reserve(512); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<T> value) { return record(std::move(value), false, nullptr); }
  Var leaf(Tensor<T> value, bool requires_grad) {
    return record(std::move(value), requires_grad, nullptr);
  }
  Var record(Tensor<T> value, bool requires_grad, std::function<void()> backward);

  const Tensor<T>& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  bool requires_grad(Var v) const { return v.valid() && nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  bool has_grad(Var v) const { return v.valid() && !nodes_[static_cast<std::size_t>(v.id)].grad.empty(); }
  // Gradient buffer of `v`, zero-allocated on first access.
  Tensor<T>& grad(Var v);

  // Seeds d(out)/d(out) = 1 for a single-element output and runs all closures.
  void backward(Var out);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

struct AttentionVars {
  Var out;      // (N, D)
  Var weights;  // (N, M) head-averaged softmax rows
};

// Convolution over a (C, H, W) map with weight (Cout, Cin, k, k) and optional bias (Cout).
template <typename T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b, int stride, int pad);

template <typename T>
Var add(Graph<T>& g, Var a, Var b);

// x (C, H, W) plus a per-channel vector v with C elements (any shape).
template <typename T>
Var add_channel_bias(Graph<T>& g, Var x, Var v);

template <typename T>
Var silu(Graph<T>& g, Var x);

template <typename T>
Var group_norm(Graph<T>& g, Var x, Var gamma, Var beta, int groups, T eps = T(1e-5));

template <typename T>
Var concat_channels(Graph<T>& g, Var a, Var b);

// Channels [begin, end) of a (C, H, W) map.
template <typename T>
Var slice_channels(Graph<T>& g, Var x, int begin, int end);

template <typename T>
Var upsample_nearest2x(Graph<T>& g, Var x);

// (C, H, W) <-> (H*W, C)
template <typename T>
Var to_tokens(Graph<T>& g, Var x);
template <typename T>
Var from_tokens(Graph<T>& g, Var x, int height, int width);

// x (N, Cin) times w^T with w (Cout, Cin), plus optional bias (Cout).
template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b);

// Normalizes each row of (N, C).
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-5));

// Multi-head scaled dot-product attention. q (N, D), k and v (M, D), D divisible by heads.
// Logits are max-subtracted before exponentiation.
template <typename T>
AttentionVars attention(Graph<T>& g, Var q, Var k, Var v, int heads);

// (C, H, W) -> (1, C)
template <typename T>
Var global_avg_pool(Graph<T>& g, Var x);

// Mean squared error against a target of the same shape -> (1)
template <typename T>
Var mse(Graph<T>& g, Var pred, Var target);

// sum_i weights[i] * terms[i] over single-element terms -> (1)
template <typename T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& terms, const std::vector<T>& weights);

}  // namespace zca
