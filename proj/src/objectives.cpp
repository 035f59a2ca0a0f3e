#include "zca/objectives.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace zca {

double ldm_loss(const LatentTensor& eps, const LatentTensor& eps_hat) {
  if (!eps.same_shape(eps_hat)) throw std::invalid_argument("ldm_loss: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) s += (eps[i] - eps_hat[i]) * (eps[i] - eps_hat[i]);
  return s / static_cast<double>(eps.size());
}

LatentTensor ldm_loss_grad(const LatentTensor& eps, const LatentTensor& eps_hat) {
  if (!eps.same_shape(eps_hat)) throw std::invalid_argument("ldm_loss_grad: shape mismatch");
  LatentTensor g(eps.shape());
  const double n = static_cast<double>(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) g[i] = 2.0 * (eps_hat[i] - eps[i]) / n;
  return g;
}

Tensor<double> normalized_grid(int h, int w) {
  if (h < 1 || w < 1) throw std::invalid_argument("normalized_grid: dimensions must be positive");
  Tensor<double> grid({h, w, 2});
  for (int k = 0; k < h; ++k)
    for (int l = 0; l < w; ++l) {
      // Integer numerators keep mirrored cells exact negatives of each other.
      const double x = w == 1 ? 0.0 : static_cast<double>(2 * l - (w - 1)) / (w - 1);
      const double y = h == 1 ? 0.0 : static_cast<double>(2 * k - (h - 1)) / (h - 1);
      grid[(static_cast<std::size_t>(k) * w + l) * 2 + 0] = x;
      grid[(static_cast<std::size_t>(k) * w + l) * 2 + 1] = y;
    }
  return grid;
}

std::vector<double> grid_grand_sum(const Tensor<double>& grid) {
  const std::size_t m = grid.size() / 2;
  std::vector<double> s(2, 0.0);
  for (std::size_t a = 0, b = m - 1; a <= b; ++a, --b) {
    for (int n = 0; n < 2; ++n) s[static_cast<std::size_t>(n)] += a == b ? grid[a * 2 + n] : grid[a * 2 + n] + grid[b * 2 + n];
    if (b == 0) break;
  }
  return s;
}

namespace {

void check_grid(const Tensor<double>& grid, int kh, int kw) {
  if (grid.rank() != 3 || grid.dim(0) != kh || grid.dim(1) != kw || grid.dim(2) != 2) {
    throw std::invalid_argument("center_coordinate_map: grid " + shape_str(grid.shape()) + " does not match key grid (" +
                                std::to_string(kh) + "," + std::to_string(kw) + ")");
  }
}

// Row-wise kernel shared by the value and graph versions. Terms for key m
// and its mirror M-1-m are added together first.
template <typename T>
void ccm_rows(const T* a, int rows, int keys, const double* grid, double prefactor, T* f) {
  for (int r = 0; r < rows; ++r) {
    const T* row = a + static_cast<std::size_t>(r) * keys;
    T sx = 0, sy = 0;
    for (int lo = 0, hi = keys - 1; lo <= hi; ++lo, --hi) {
      if (lo == hi) {
        sx += row[lo] * static_cast<T>(grid[lo * 2]);
        sy += row[lo] * static_cast<T>(grid[lo * 2 + 1]);
      } else {
        sx += row[lo] * static_cast<T>(grid[lo * 2]) + row[hi] * static_cast<T>(grid[hi * 2]);
        sy += row[lo] * static_cast<T>(grid[lo * 2 + 1]) + row[hi] * static_cast<T>(grid[hi * 2 + 1]);
      }
    }
    f[r * 2] = sx * static_cast<T>(prefactor);
    f[r * 2 + 1] = sy * static_cast<T>(prefactor);
  }
}

template <typename T>
void ccm_rows_vjp(const T* df, int rows, int keys, const double* grid, double prefactor, T* da) {
  for (int r = 0; r < rows; ++r) {
    const T gx = df[r * 2] * static_cast<T>(prefactor);
    const T gy = df[r * 2 + 1] * static_cast<T>(prefactor);
    T* row = da + static_cast<std::size_t>(r) * keys;
    for (int m = 0; m < keys; ++m) row[m] += gx * static_cast<T>(grid[m * 2]) + gy * static_cast<T>(grid[m * 2 + 1]);
  }
}

void check_field(int fh, int fw, int fc, const Tensor<double>& mask, int& mh, int& mw) {
  if (fc != 2) throw std::invalid_argument("atv_loss: field must have 2 coordinate channels");
  const bool ok = (mask.rank() == 2 && mask.dim(0) == fh && mask.dim(1) == fw) ||
                  (mask.rank() == 3 && mask.dim(0) == 1 && mask.dim(1) == fh && mask.dim(2) == fw);
  if (!ok) throw std::invalid_argument("atv_loss: mask shape " + shape_str(mask.shape()) + " does not match field");
  require_binary(mask, "atv_loss");
  mh = fh;
  mw = fw;
}

template <typename T>
T atv_kernel(const T* f, int h, int w, const double* m, T* df) {
  auto p = [&](int i, int j, int n) { return f[(i * w + j) * 2 + n] * static_cast<T>(m[i * w + j]); };
  T total = 0;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int n = 0; n < 2; ++n) {
        const T here = p(i, j, n);
        if (i + 1 < h) {
          const T d = p(i + 1, j, n) - here;
          total += std::abs(d);
          if (df && d != T(0)) {
            const T s = d > 0 ? T(1) : T(-1);
            df[((i + 1) * w + j) * 2 + n] += s * static_cast<T>(m[(i + 1) * w + j]);
            df[(i * w + j) * 2 + n] -= s * static_cast<T>(m[i * w + j]);
          }
        }
        if (j + 1 < w) {
          const T d = p(i, j + 1, n) - here;
          total += std::abs(d);
          if (df && d != T(0)) {
            const T s = d > 0 ? T(1) : T(-1);
            df[(i * w + j + 1) * 2 + n] += s * static_cast<T>(m[i * w + j + 1]);
            df[(i * w + j) * 2 + n] -= s * static_cast<T>(m[i * w + j]);
          }
        }
      }
  return total;
}

}  // namespace

void require_binary(const Tensor<double>& mask, const char* what) {
  for (double v : mask.values())
    if (v != 0.0 && v != 1.0) throw std::invalid_argument(std::string(what) + ": mask must be binary");
}

template <typename T>
Tensor<T> center_coordinate_map(const AttentionMap<T>& attn, const Tensor<double>& grid) {
  if (attn.weights.rank() != 4) throw std::invalid_argument("center_coordinate_map: attention must be rank 4");
  const int kh = attn.key_h(), kw = attn.key_w();
  check_grid(grid, kh, kw);
  const int rows = attn.query_h() * attn.query_w();
  Tensor<T> f({attn.query_h(), attn.query_w(), 2});
  ccm_rows(attn.weights.data(), rows, kh * kw, grid.data(), 1.0 / (static_cast<double>(kh) * kw), f.data());
  return f;
}

template <typename T>
Tensor<T> center_coordinate_map_vjp(const Tensor<T>& dF, const Tensor<double>& grid) {
  if (dF.rank() != 3 || dF.dim(2) != 2 || grid.rank() != 3) throw std::invalid_argument("center_coordinate_map_vjp: shapes");
  const int kh = grid.dim(0), kw = grid.dim(1);
  Tensor<T> da({dF.dim(0), dF.dim(1), kh, kw});
  ccm_rows_vjp(dF.data(), dF.dim(0) * dF.dim(1), kh * kw, grid.data(), 1.0 / (static_cast<double>(kh) * kw), da.data());
  return da;
}

template <typename T>
T atv_loss(const Tensor<T>& F, const Tensor<double>& mask) {
  if (F.rank() != 3) throw std::invalid_argument("atv_loss: field must be (Hq, Wq, 2)");
  int h = 0, w = 0;
  check_field(F.dim(0), F.dim(1), F.dim(2), mask, h, w);
  return atv_kernel<T>(F.data(), h, w, mask.data(), nullptr);
}

template <typename T>
Tensor<T> atv_loss_grad(const Tensor<T>& F, const Tensor<double>& mask) {
  if (F.rank() != 3) throw std::invalid_argument("atv_loss_grad: field must be (Hq, Wq, 2)");
  int h = 0, w = 0;
  check_field(F.dim(0), F.dim(1), F.dim(2), mask, h, w);
  Tensor<T> df(F.shape());
  atv_kernel<T>(F.data(), h, w, mask.data(), df.data());
  return df;
}

double finetune_loss(double l_ldm, const std::vector<double>& atv_terms, double lambda_atv) {
  if (!(lambda_atv >= 0.0)) throw std::invalid_argument("finetune_loss: lambda_atv must be non-negative");
  double s = 0.0;
  for (double v : atv_terms) s += v;
  return l_ldm + lambda_atv * s;
}

Tensor<double> resize_mask_nearest(const Tensor<double>& mask, int h, int w) {
  int mh = 0, mw = 0;
  if (mask.rank() == 2) {
    mh = mask.dim(0);
    mw = mask.dim(1);
  } else if (mask.rank() == 3 && mask.dim(0) == 1) {
    mh = mask.dim(1);
    mw = mask.dim(2);
  } else {
    throw std::invalid_argument("resize_mask_nearest: expected (H, W) or (1, H, W)");
  }
  Tensor<double> out({h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const int si = std::min(mh - 1, static_cast<int>((i + 0.5) * mh / h));
      const int sj = std::min(mw - 1, static_cast<int>((j + 0.5) * mw / w));
      out[static_cast<std::size_t>(i) * w + j] = mask[static_cast<std::size_t>(si) * mw + sj];
    }
  return out;
}

template <typename T>
Var center_coordinate_map(Graph<T>& g, Var weights, int query_h, int query_w, const Tensor<double>& grid) {
  const Tensor<T>& a = g.value(weights);
  if (grid.rank() != 3) throw std::invalid_argument("center_coordinate_map: grid rank");
  const int kh = grid.dim(0), kw = grid.dim(1);
  if (a.rank() != 2 || a.dim(0) != query_h * query_w || a.dim(1) != kh * kw) {
    throw std::invalid_argument("center_coordinate_map: attention " + shape_str(a.shape()) + " does not match dims");
  }
  check_grid(grid, kh, kw);
  const double pre = 1.0 / (static_cast<double>(kh) * kw);
  Tensor<T> f({query_h, query_w, 2});
  ccm_rows(a.data(), query_h * query_w, kh * kw, grid.data(), pre, f.data());
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(f), g.requires_grad(weights), [&g, weights, y_id, grid, pre, query_h, query_w, kh, kw]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    ccm_rows_vjp(g.grad(y).data(), query_h * query_w, kh * kw, grid.data(), pre, g.grad(weights).data());
  });
}

template <typename T>
Var atv_loss(Graph<T>& g, Var F, const Tensor<double>& mask) {
  const Tensor<T>& f = g.value(F);
  if (f.rank() != 3) throw std::invalid_argument("atv_loss: field must be (Hq, Wq, 2)");
  int h = 0, w = 0;
  check_field(f.dim(0), f.dim(1), f.dim(2), mask, h, w);
  Tensor<T> df(f.shape());
  const T total = atv_kernel<T>(f.data(), h, w, mask.data(), df.data());
  const int y_id = static_cast<int>(g.size());
  return g.record(Tensor<T>({1}, total), g.requires_grad(F), [&g, F, y_id, df = std::move(df)]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const T s = g.grad(y)[0];
    Tensor<T>& d = g.grad(F);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * df[i];
  });
}

#define ZCA_INSTANTIATE_OBJECTIVES(T)                                                               \
  template Tensor<T> center_coordinate_map<T>(const AttentionMap<T>&, const Tensor<double>&);       \
  template Tensor<T> center_coordinate_map_vjp<T>(const Tensor<T>&, const Tensor<double>&);         \
  template T atv_loss<T>(const Tensor<T>&, const Tensor<double>&);                                  \
  template Tensor<T> atv_loss_grad<T>(const Tensor<T>&, const Tensor<double>&);                     \
  template Var center_coordinate_map<T>(Graph<T>&, Var, int, int, const Tensor<double>&);           \
  template Var atv_loss<T>(Graph<T>&, Var, const Tensor<double>&);

ZCA_INSTANTIATE_OBJECTIVES(float)
ZCA_INSTANTIATE_OBJECTIVES(double)

}  // namespace zca
