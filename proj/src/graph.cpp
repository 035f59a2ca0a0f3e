#include "zca/graph.hpp"

#include <Eigen/Core>
#include <cmath>
#include <sstream>

namespace zca {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
MatMap<T> as_mat(Tensor<T>& t, int rows, int cols) {
  return MatMap<T>(t.data(), rows, cols);
}
template <typename T>
ConstMatMap<T> as_mat(const Tensor<T>& t, int rows, int cols) {
  return ConstMatMap<T>(t.data(), rows, cols);
}

template <typename T>
void im2col(const T* x, int channels, int height, int width, int k, int stride, int pad, int out_h,
            int out_w, T* col) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * plane;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - pad + ki;
          T* dst = row + oh * out_w;
          if (ih < 0 || ih >= height) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * height + ih) * width;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride - pad + kj;
            dst[ow] = (iw < 0 || iw >= width) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int channels, int height, int width, int k, int stride, int pad,
                int out_h, int out_w, T* dx) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * plane;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= height) continue;
          T* dst = dx + (static_cast<std::size_t>(c) * height + ih) * width;
          const T* src = row + oh * out_w;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

template <typename T>
Var Graph<T>::record(Tensor<T> value, bool requires_grad, std::function<void()> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Graph<T>::grad(Var v) {
  Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T(0));
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var out) {
  if (value(out).size() != 1) throw std::invalid_argument("backward: output must be a scalar");
  if (!requires_grad(out)) return;
  grad(out)[0] += T(1);
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.requires_grad && n.backward) n.backward();
  }
}

template <typename T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b, int stride, int pad) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wv = g.value(w);
  require_shape(xv.rank() == 3 && wv.rank() == 4 && wv.dim(1) == xv.dim(0) && wv.dim(2) == wv.dim(3),
                "conv2d: incompatible input " + shape_str(xv.shape()) + " and weight " +
                    shape_str(wv.shape()));
  const int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int cout = wv.dim(0), k = wv.dim(2);
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  require_shape(oh > 0 && ow > 0, "conv2d: empty output");
  if (b.valid()) require_shape(g.value(b).size() == static_cast<std::size_t>(cout), "conv2d: bias size");
  const int kk = cin * k * k;
  const int plane = oh * ow;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> col;
  if (!direct) {
    col = Tensor<T>({kk, plane});
    im2col(xv.data(), cin, h, wd, k, stride, pad, oh, ow, col.data());
  }
  const Tensor<T>& cols = direct ? xv : col;
  Tensor<T> out({cout, oh, ow});
  auto om = as_mat(out, cout, plane);
  om.noalias() = as_mat(wv, cout, kk) * as_mat(cols, kk, plane);
  if (b.valid()) {
    const Tensor<T>& bv = g.value(b);
    for (int c = 0; c < cout; ++c) om.row(c).array() += bv[static_cast<std::size_t>(c)];
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(w) || g.requires_grad(b);
  Var y{};
  y = g.record(std::move(out), rg, [&g, x, w, b, y_id = static_cast<int>(g.size()), col = std::move(col),
                                    cin, h, wd, cout, k, stride, pad, oh, ow, kk, plane, direct]() {
    Var yv{y_id};
    if (!g.has_grad(yv)) return;
    const Tensor<T>& dy = g.grad(yv);
    auto dym = as_mat(dy, cout, plane);
    const Tensor<T>& cols = direct ? g.value(x) : col;
    if (g.requires_grad(w)) {
      as_mat(g.grad(w), cout, kk).noalias() += dym * as_mat(cols, kk, plane).transpose();
    }
    if (g.requires_grad(b)) {
      Tensor<T>& db = g.grad(b);
      for (int c = 0; c < cout; ++c) db[static_cast<std::size_t>(c)] += dym.row(c).sum();
    }
    if (g.requires_grad(x)) {
      if (direct) {
        as_mat(g.grad(x), kk, plane).noalias() += as_mat(g.value(w), cout, kk).transpose() * dym;
      } else {
        Tensor<T> dcol({kk, plane});
        as_mat(dcol, kk, plane).noalias() = as_mat(g.value(w), cout, kk).transpose() * dym;
        col2im_add(dcol.data(), cin, h, wd, k, stride, pad, oh, ow, g.grad(x).data());
      }
    }
  });
  return y;
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  require_shape(av.same_shape(bv), "add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(out), g.requires_grad(a) || g.requires_grad(b), [&g, a, b, y_id]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const Tensor<T>& dy = g.grad(y);
    for (Var in : {a, b}) {
      if (!g.requires_grad(in)) continue;
      Tensor<T>& d = g.grad(in);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
  });
}

template <typename T>
Var add_channel_bias(Graph<T>& g, Var x, Var v) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& vv = g.value(v);
  require_shape(xv.rank() == 3 && vv.size() == static_cast<std::size_t>(xv.dim(0)),
                "add_channel_bias: channel mismatch");
  const int c = xv.dim(0);
  const std::size_t plane = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor<T> out = xv;
  for (int ci = 0; ci < c; ++ci) {
    T* p = out.data() + ci * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += vv[static_cast<std::size_t>(ci)];
  }
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(out), g.requires_grad(x) || g.requires_grad(v), [&g, x, v, y_id, c, plane]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const Tensor<T>& dy = g.grad(y);
    if (g.requires_grad(x)) {
      Tensor<T>& dx = g.grad(x);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    }
    if (g.requires_grad(v)) {
      Tensor<T>& dv = g.grad(v);
      for (int ci = 0; ci < c; ++ci) {
        const T* p = dy.data() + ci * plane;
        T s = 0;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        dv[static_cast<std::size_t>(ci)] += s;
      }
    }
  });
}

template <typename T>
Var silu(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sigmoid(xv[i]);
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(out), g.requires_grad(x), [&g, x, y_id]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const Tensor<T>& dy = g.grad(y);
    const Tensor<T>& xv = g.value(x);
    Tensor<T>& dx = g.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T s = sigmoid(xv[i]);
      dx[i] += dy[i] * s * (T(1) + xv[i] * (T(1) - s));
    }
  });
}

template <typename T>
Var group_norm(Graph<T>& g, Var x, Var gamma, Var beta, int groups, T eps) {
  const Tensor<T>& xv = g.value(x);
  require_shape(xv.rank() == 3 && groups > 0 && xv.dim(0) % groups == 0, "group_norm: channels not divisible by groups");
  const int c = xv.dim(0);
  require_shape(g.value(gamma).size() == static_cast<std::size_t>(c) &&
                    g.value(beta).size() == static_cast<std::size_t>(c),
                "group_norm: affine size");
  const std::size_t plane = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  const int cpg = c / groups;
  const std::size_t gsize = plane * cpg;
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(groups));
  for (int gi = 0; gi < groups; ++gi) {
    const T* p = xv.data() + gi * gsize;
    T mean = 0;
    for (std::size_t i = 0; i < gsize; ++i) mean += p[i];
    mean /= static_cast<T>(gsize);
    T var = 0;
    for (std::size_t i = 0; i < gsize; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<T>(gsize);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(gi)] = is;
    T* q = xhat.data() + gi * gsize;
    for (std::size_t i = 0; i < gsize; ++i) q[i] = (p[i] - mean) * is;
  }
  Tensor<T> out(xv.shape());
  const Tensor<T>& gv = g.value(gamma);
  const Tensor<T>& bv = g.value(beta);
  for (int ci = 0; ci < c; ++ci) {
    const T* q = xhat.data() + ci * plane;
    T* o = out.data() + ci * plane;
    for (std::size_t i = 0; i < plane; ++i) o[i] = q[i] * gv[static_cast<std::size_t>(ci)] + bv[static_cast<std::size_t>(ci)];
  }
  const int y_id = static_cast<int>(g.size());
  const bool rg = g.requires_grad(x) || g.requires_grad(gamma) || g.requires_grad(beta);
  return g.record(std::move(out), rg,
                  [&g, x, gamma, beta, y_id, xhat = std::move(xhat), inv_std = std::move(inv_std), c, plane, cpg,
                   gsize, groups]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const Tensor<T>& dy = g.grad(y);
    const Tensor<T>& gv = g.value(gamma);
    if (g.requires_grad(gamma) || g.requires_grad(beta)) {
      for (int ci = 0; ci < c; ++ci) {
        const T* d = dy.data() + ci * plane;
        const T* q = xhat.data() + ci * plane;
        T sg = 0, sb = 0;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += d[i] * q[i];
          sb += d[i];
        }
        if (g.requires_grad(gamma)) g.grad(gamma)[static_cast<std::size_t>(ci)] += sg;
        if (g.requires_grad(beta)) g.grad(beta)[static_cast<std::size_t>(ci)] += sb;
      }
    }
    if (!g.requires_grad(x)) return;
    Tensor<T>& dx = g.grad(x);
    std::vector<T> dxhat(gsize);
    for (int gi = 0; gi < groups; ++gi) {
      T m1 = 0, m2 = 0;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ci = gi * cpg + cc;
        const T gam = gv[static_cast<std::size_t>(ci)];
        const T* d = dy.data() + ci * plane;
        const T* q = xhat.data() + ci * plane;
        T* dh = dxhat.data() + cc * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          dh[i] = d[i] * gam;
          m1 += dh[i];
          m2 += dh[i] * q[i];
        }
      }
      m1 /= static_cast<T>(gsize);
      m2 /= static_cast<T>(gsize);
      const T is = inv_std[static_cast<std::size_t>(gi)];
      const T* q = xhat.data() + gi * gsize;
      T* out = dx.data() + gi * gsize;
      for (std::size_t i = 0; i < gsize; ++i) out[i] += is * (dxhat[i] - m1 - q[i] * m2);
    }
  });
}

template <typename T>
Var concat_channels(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  require_shape(av.rank() == 3 && bv.rank() == 3 && av.dim(1) == bv.dim(1) && av.dim(2) == bv.dim(2),
                "concat_channels: spatial mismatch");
  Tensor<T> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::copy(av.data(), av.data() + av.size(), out.data());
  std::copy(bv.data(), bv.data() + bv.size(), out.data() + av.size());
  const std::size_t na = av.size();
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(out), g.requires_grad(a) || g.requires_grad(b), [&g, a, b, y_id, na]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const Tensor<T>& dy = g.grad(y);
    if (g.requires_grad(a)) {
      Tensor<T>& da = g.grad(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
    }
    if (g.requires_grad(b)) {
      Tensor<T>& db = g.grad(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[na + i];
    }
  });
}

template <typename T>
Var slice_channels(Graph<T>& g, Var x, int begin, int end) {
  const Tensor<T>& xv = g.value(x);
  require_shape(xv.rank() == 3 && 0 <= begin && begin < end && end <= xv.dim(0), "slice_channels: bad range");
  const std::size_t plane = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor<T> out({end - begin, xv.dim(1), xv.dim(2)});
  std::copy(xv.data() + begin * plane, xv.data() + end * plane, out.data());
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(out), g.requires_grad(x), [&g, x, y_id, begin, plane]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const Tensor<T>& dy = g.grad(y);
    T* dx = g.grad(x).data() + begin * plane;
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

template <typename T>
Var upsample_nearest2x(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  require_shape(xv.rank() == 3, "upsample_nearest2x: rank");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor<T> out({c, 2 * h, 2 * w});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j) out.at(ci, i, j) = xv.at(ci, i / 2, j / 2);
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(out), g.requires_grad(x), [&g, x, y_id, c, h, w]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const Tensor<T>& dy = g.grad(y);
    Tensor<T>& dx = g.grad(x);
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) dx.at(ci, i / 2, j / 2) += dy.at(ci, i, j);
  });
}

template <typename T>
Var to_tokens(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  require_shape(xv.rank() == 3, "to_tokens: rank");
  const int c = xv.dim(0), n = xv.dim(1) * xv.dim(2);
  Tensor<T> out({n, c});
  as_mat(out, n, c) = as_mat(xv, c, n).transpose();
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(out), g.requires_grad(x), [&g, x, y_id, c, n]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    as_mat(g.grad(x), c, n) += as_mat(g.grad(y), n, c).transpose();
  });
}

template <typename T>
Var from_tokens(Graph<T>& g, Var x, int height, int width) {
  const Tensor<T>& xv = g.value(x);
  require_shape(xv.rank() == 2 && xv.dim(0) == height * width, "from_tokens: token count mismatch");
  const int c = xv.dim(1), n = xv.dim(0);
  Tensor<T> out({c, height, width});
  as_mat(out, c, n) = as_mat(xv, n, c).transpose();
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(out), g.requires_grad(x), [&g, x, y_id, c, n]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    as_mat(g.grad(x), n, c) += as_mat(g.grad(y), c, n).transpose();
  });
}

template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wv = g.value(w);
  require_shape(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1),
                "linear: incompatible input " + shape_str(xv.shape()) + " and weight " + shape_str(wv.shape()));
  const int n = xv.dim(0), cin = xv.dim(1), cout = wv.dim(0);
  if (b.valid()) require_shape(g.value(b).size() == static_cast<std::size_t>(cout), "linear: bias size");
  Tensor<T> out({n, cout});
  auto om = as_mat(out, n, cout);
  om.noalias() = as_mat(xv, n, cin) * as_mat(wv, cout, cin).transpose();
  if (b.valid()) {
    const Tensor<T>& bv = g.value(b);
    for (int j = 0; j < cout; ++j) om.col(j).array() += bv[static_cast<std::size_t>(j)];
  }
  const int y_id = static_cast<int>(g.size());
  const bool rg = g.requires_grad(x) || g.requires_grad(w) || g.requires_grad(b);
  return g.record(std::move(out), rg, [&g, x, w, b, y_id, n, cin, cout]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    auto dy = as_mat(g.grad(y), n, cout);
    if (g.requires_grad(x)) as_mat(g.grad(x), n, cin).noalias() += dy * as_mat(g.value(w), cout, cin);
    if (g.requires_grad(w)) as_mat(g.grad(w), cout, cin).noalias() += dy.transpose() * as_mat(g.value(x), n, cin);
    if (g.requires_grad(b)) {
      Tensor<T>& db = g.grad(b);
      for (int j = 0; j < cout; ++j) db[static_cast<std::size_t>(j)] += dy.col(j).sum();
    }
  });
}

template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps) {
  const Tensor<T>& xv = g.value(x);
  require_shape(xv.rank() == 2, "layer_norm: rank");
  const int n = xv.dim(0), c = xv.dim(1);
  require_shape(g.value(gamma).size() == static_cast<std::size_t>(c) &&
                    g.value(beta).size() == static_cast<std::size_t>(c),
                "layer_norm: affine size");
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* p = xv.data() + static_cast<std::size_t>(i) * c;
    T mean = 0;
    for (int j = 0; j < c; ++j) mean += p[j];
    mean /= c;
    T var = 0;
    for (int j = 0; j < c; ++j) var += (p[j] - mean) * (p[j] - mean);
    var /= c;
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    T* q = xhat.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) q[j] = (p[j] - mean) * is;
  }
  Tensor<T> out(xv.shape());
  const Tensor<T>& gv = g.value(gamma);
  const Tensor<T>& bv = g.value(beta);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * c + j;
      out[k] = xhat[k] * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
    }
  const int y_id = static_cast<int>(g.size());
  const bool rg = g.requires_grad(x) || g.requires_grad(gamma) || g.requires_grad(beta);
  return g.record(std::move(out), rg,
                  [&g, x, gamma, beta, y_id, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const Tensor<T>& dy = g.grad(y);
    const Tensor<T>& gv = g.value(gamma);
    if (g.requires_grad(gamma) || g.requires_grad(beta)) {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const std::size_t k = static_cast<std::size_t>(i) * c + j;
          if (g.requires_grad(gamma)) g.grad(gamma)[static_cast<std::size_t>(j)] += dy[k] * xhat[k];
          if (g.requires_grad(beta)) g.grad(beta)[static_cast<std::size_t>(j)] += dy[k];
        }
    }
    if (!g.requires_grad(x)) return;
    Tensor<T>& dx = g.grad(x);
    std::vector<T> dh(static_cast<std::size_t>(c));
    for (int i = 0; i < n; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * c;
      T m1 = 0, m2 = 0;
      for (int j = 0; j < c; ++j) {
        dh[static_cast<std::size_t>(j)] = dy[base + j] * gv[static_cast<std::size_t>(j)];
        m1 += dh[static_cast<std::size_t>(j)];
        m2 += dh[static_cast<std::size_t>(j)] * xhat[base + j];
      }
      m1 /= c;
      m2 /= c;
      const T is = inv_std[static_cast<std::size_t>(i)];
      for (int j = 0; j < c; ++j) dx[base + j] += is * (dh[static_cast<std::size_t>(j)] - m1 - xhat[base + j] * m2);
    }
  });
}

template <typename T>
AttentionVars attention(Graph<T>& g, Var q, Var k, Var v, int heads) {
  const Tensor<T>& qv = g.value(q);
  const Tensor<T>& kv = g.value(k);
  const Tensor<T>& vv = g.value(v);
  require_shape(qv.rank() == 2 && kv.rank() == 2 && vv.rank() == 2 && kv.dim(1) == qv.dim(1) &&
                    vv.dim(1) == qv.dim(1) && vv.dim(0) == kv.dim(0),
                "attention: incompatible q/k/v shapes");
  const int n = qv.dim(0), m = kv.dim(0), d = qv.dim(1);
  require_shape(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
  const int dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  auto qm = as_mat(qv, n, d);
  auto km = as_mat(kv, m, d);
  auto vm = as_mat(vv, m, d);
  std::vector<RowMat<T>> probs(static_cast<std::size_t>(heads));
  Tensor<T> out({n, d});
  Tensor<T> avg({n, m});
  auto om = as_mat(out, n, d);
  auto am = as_mat(avg, n, m);
  for (int hi = 0; hi < heads; ++hi) {
    RowMat<T>& p = probs[static_cast<std::size_t>(hi)];
    p.noalias() = (qm.middleCols(hi * dh, dh) * km.middleCols(hi * dh, dh).transpose()) * scale;
    for (int i = 0; i < n; ++i) {
      auto row = p.row(i);
      const T mx = row.maxCoeff();
      if (!std::isfinite(mx)) throw std::domain_error("attention: non-finite logits");
      row = (row.array() - mx).exp();
      row /= row.sum();
    }
    om.middleCols(hi * dh, dh).noalias() = p * vm.middleCols(hi * dh, dh);
    am += p / static_cast<T>(heads);
  }
  const bool rg = g.requires_grad(q) || g.requires_grad(k) || g.requires_grad(v);
  Var out_var = g.record(std::move(out), rg, nullptr);
  Var w_var = g.record(std::move(avg), rg,
                       [&g, q, k, v, out_var, w_id = static_cast<int>(g.size()), probs = std::move(probs), n, m, d,
                        dh, heads, scale]() {
    Var wv{w_id};
    const bool gout = g.has_grad(out_var), gw = g.has_grad(wv);
    if (!gout && !gw) return;
    auto qm = as_mat(g.value(q), n, d);
    auto km = as_mat(g.value(k), m, d);
    auto vm = as_mat(g.value(v), m, d);
    for (int hi = 0; hi < heads; ++hi) {
      const RowMat<T>& p = probs[static_cast<std::size_t>(hi)];
      RowMat<T> dp = RowMat<T>::Zero(n, m);
      if (gout) {
        auto dom = as_mat(g.grad(out_var), n, d).middleCols(hi * dh, dh);
        dp.noalias() += dom * vm.middleCols(hi * dh, dh).transpose();
        if (g.requires_grad(v)) as_mat(g.grad(v), m, d).middleCols(hi * dh, dh).noalias() += p.transpose() * dom;
      }
      if (gw) dp += as_mat(g.grad(wv), n, m) / static_cast<T>(heads);
      // softmax backward: ds = p * (dp - <p, dp>)
      RowMat<T> ds = p.cwiseProduct(dp);
      for (int i = 0; i < n; ++i) {
        const T dot = ds.row(i).sum();
        ds.row(i) -= p.row(i) * dot;
      }
      ds *= scale;
      if (g.requires_grad(q)) as_mat(g.grad(q), n, d).middleCols(hi * dh, dh).noalias() += ds * km.middleCols(hi * dh, dh);
      if (g.requires_grad(k)) as_mat(g.grad(k), m, d).middleCols(hi * dh, dh).noalias() += ds.transpose() * qm.middleCols(hi * dh, dh);
    }
  });
  return {out_var, w_var};
}

template <typename T>
Var global_avg_pool(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  require_shape(xv.rank() == 3, "global_avg_pool: rank");
  const int c = xv.dim(0);
  const std::size_t plane = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor<T> out({1, c});
  for (int ci = 0; ci < c; ++ci) {
    T s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += xv[ci * plane + i];
    out[static_cast<std::size_t>(ci)] = s / static_cast<T>(plane);
  }
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(out), g.requires_grad(x), [&g, x, y_id, c, plane]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const Tensor<T>& dy = g.grad(y);
    Tensor<T>& dx = g.grad(x);
    for (int ci = 0; ci < c; ++ci) {
      const T s = dy[static_cast<std::size_t>(ci)] / static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) dx[ci * plane + i] += s;
    }
  });
}

template <typename T>
Var mse(Graph<T>& g, Var pred, Var target) {
  const Tensor<T>& pv = g.value(pred);
  const Tensor<T>& tv = g.value(target);
  require_shape(pv.same_shape(tv), "mse: shape mismatch " + shape_str(pv.shape()) + " vs " + shape_str(tv.shape()));
  T s = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  const T nn = static_cast<T>(pv.size());
  Tensor<T> out({1}, s / nn);
  const int y_id = static_cast<int>(g.size());
  return g.record(std::move(out), g.requires_grad(pred) || g.requires_grad(target), [&g, pred, target, y_id, nn]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const T dy = g.grad(y)[0];
    const Tensor<T>& pv = g.value(pred);
    const Tensor<T>& tv = g.value(target);
    if (g.requires_grad(pred)) {
      Tensor<T>& dp = g.grad(pred);
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += dy * T(2) * (pv[i] - tv[i]) / nn;
    }
    if (g.requires_grad(target)) {
      Tensor<T>& dt = g.grad(target);
      for (std::size_t i = 0; i < dt.size(); ++i) dt[i] -= dy * T(2) * (pv[i] - tv[i]) / nn;
    }
  });
}

template <typename T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& terms, const std::vector<T>& weights) {
  require_shape(terms.size() == weights.size(), "weighted_sum: size mismatch");
  T s = 0;
  bool rg = false;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require_shape(g.value(terms[i]).size() == 1, "weighted_sum: terms must be scalars");
    s += weights[i] * g.value(terms[i])[0];
    rg = rg || g.requires_grad(terms[i]);
  }
  const int y_id = static_cast<int>(g.size());
  return g.record(Tensor<T>({1}, s), rg, [&g, terms, weights, y_id]() {
    Var y{y_id};
    if (!g.has_grad(y)) return;
    const T dy = g.grad(y)[0];
    for (std::size_t i = 0; i < terms.size(); ++i)
      if (g.requires_grad(terms[i])) g.grad(terms[i])[0] += dy * weights[i];
  });
}

#define ZCA_INSTANTIATE_GRAPH(T)                                                   \
  template class Graph<T>;                                                         \
  template Var conv2d<T>(Graph<T>&, Var, Var, Var, int, int);                      \
  template Var add<T>(Graph<T>&, Var, Var);                                        \
  template Var add_channel_bias<T>(Graph<T>&, Var, Var);                           \
  template Var silu<T>(Graph<T>&, Var);                                            \
  template Var group_norm<T>(Graph<T>&, Var, Var, Var, int, T);                    \
  template Var concat_channels<T>(Graph<T>&, Var, Var);                            \
  template Var upsample_nearest2x<T>(Graph<T>&, Var);  \
  template Var slice_channels<T>(Graph<T>&, Var, int, int);                            \
  template Var to_tokens<T>(Graph<T>&, Var);                                       \
  template Var from_tokens<T>(Graph<T>&, Var, int, int);                           \
  template Var linear<T>(Graph<T>&, Var, Var, Var);                                \
  template Var layer_norm<T>(Graph<T>&, Var, Var, Var, T);                         \
  template AttentionVars attention<T>(Graph<T>&, Var, Var, Var, int);              \
  template Var global_avg_pool<T>(Graph<T>&, Var);                                 \
  template Var mse<T>(Graph<T>&, Var, Var);                                        \
  template Var weighted_sum<T>(Graph<T>&, const std::vector<Var>&, const std::vector<T>&);

ZCA_INSTANTIATE_GRAPH(float)
ZCA_INSTANTIATE_GRAPH(double)

}  // namespace zca
