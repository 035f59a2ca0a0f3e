#pragma once

#include <vector>

#include "zca/diffusion.hpp"
#include "zca/graph.hpp"
#include "zca/tensor.hpp"

namespace zca {

// Head-averaged cross-attention weights laid out as (Hq, Wq, hk, wk); every
// (i, j) slice is a softmax distribution over the key grid.
template <typename T>
struct AttentionMap {
  Tensor<T> weights;

  int query_h() const { return weights.dim(0); }
  int query_w() const { return weights.dim(1); }
  int key_h() const { return weights.dim(2); }
  int key_w() const { return weights.dim(3); }
};

// Mean squared error between true and predicted noise (mean reduction).
double ldm_loss(const LatentTensor& eps, const LatentTensor& eps_hat);
// d ldm_loss / d eps_hat = 2 (eps_hat - eps) / N
LatentTensor ldm_loss_grad(const LatentTensor& eps, const LatentTensor& eps_hat);

// (h, w, 2) grid with channel 0 horizontal and channel 1 vertical, both
// spanning [-1, 1]; a singleton axis maps to 0.
Tensor<double> normalized_grid(int h, int w);

// Sum of all grid cells, accumulated in mirrored pairs so symmetric grids
// cancel exactly.
std::vector<double> grid_grand_sum(const Tensor<double>& grid);

// F_ijn = 1/(hk wk) sum_kl A_ijkl G_kln, returned as (Hq, Wq, 2).
template <typename T>
Tensor<T> center_coordinate_map(const AttentionMap<T>& attn, const Tensor<double>& grid);

// Vector-Jacobian product of center_coordinate_map: dF (Hq, Wq, 2) -> dA (Hq, Wq, hk, wk).
template <typename T>
Tensor<T> center_coordinate_map_vjp(const Tensor<T>& dF, const Tensor<double>& grid);

// L1 norm of forward differences of F * M along both query axes; the last
// row and column differences are zero. `mask` is (Hq, Wq) and binary.
template <typename T>
T atv_loss(const Tensor<T>& F, const Tensor<double>& mask);

// Subgradient of atv_loss with sign(0) = 0.
template <typename T>
Tensor<T> atv_loss_grad(const Tensor<T>& F, const Tensor<double>& mask);

// l_ldm + lambda * sum(atv_terms); lambda must be non-negative.
double finetune_loss(double l_ldm, const std::vector<double>& atv_terms, double lambda_atv);

// Nearest-neighbour resample of a (1, H, W) or (H, W) binary mask to (h, w),
// sampling at cell centres.
Tensor<double> resize_mask_nearest(const Tensor<double>& mask, int h, int w);

void require_binary(const Tensor<double>& mask, const char* what);

// Differentiable versions. `weights` is the (Hq*Wq, hk*wk) attention node.
template <typename T>
Var center_coordinate_map(Graph<T>& g, Var weights, int query_h, int query_w, const Tensor<double>& grid);
template <typename T>
Var atv_loss(Graph<T>& g, Var F, const Tensor<double>& mask);

}  // namespace zca
