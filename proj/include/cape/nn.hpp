#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "cape/cape.hpp"
#include "cape/tensor.hpp"

namespace cape::nn {

/// Reverse-mode tape. Ops append nodes holding the forward value and a
/// closure that pushes the node's gradient into its inputs. One tape per
/// forward/backward pass; inference simply never calls backward().
template <typename S>
class TapeT {
 public:
  using Tensor = TensorT<S>;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_live = false;
    std::function<void(TapeT&)> backward;
  };

  int leaf(Tensor v, bool requires_grad = false) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient buffer, zero-initialized on first touch.
  Tensor& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_live) {
      n.grad = Tensor(n.value.shape);
      n.grad_live = true;
    }
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad_live; }

  /// Emits a node; requires_grad is inherited from the inputs. The backward
  /// closure is attached afterwards (it usually captures the new id).
  int emit(Tensor value, const std::vector<int>& inputs) {
    Node n;
    n.value = std::move(value);
    for (int i : inputs) {
      if (needs_grad(i)) {
        n.requires_grad = true;
        break;
      }
    }
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_backward(int id, std::function<void(TapeT&)> fn) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.requires_grad) n.backward = std::move(fn);
  }

  void backward(int loss_id) {
    if (val(loss_id).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad(loss_id).fill(S(1));
    for (int id = loss_id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.requires_grad && n.grad_live && n.backward) n.backward(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
inline void axpy(TensorT<S>& dst, const S* src, std::int64_t n) {
  S* d = dst.ptr();
  for (std::int64_t i = 0; i < n; ++i) d[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and arithmetic

template <typename S>
int add(TapeT<S>& t, int a, int b) {
  if (!t.val(a).same_shape(t.val(b))) throw std::invalid_argument("add: shape mismatch");
  TensorT<S> out(t.val(a).shape);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.at(i) = t.val(a).at(i) + t.val(b).at(i);
  const int id = t.emit(std::move(out), {a, b});
  t.set_backward(id, [id, a, b](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    if (tp.needs_grad(a)) detail::axpy(tp.grad(a), g.ptr(), g.numel());
    if (tp.needs_grad(b)) detail::axpy(tp.grad(b), g.ptr(), g.numel());
  });
  return id;
}

template <typename S>
int sub(TapeT<S>& t, int a, int b) {
  if (!t.val(a).same_shape(t.val(b))) throw std::invalid_argument("sub: shape mismatch");
  TensorT<S> out(t.val(a).shape);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.at(i) = t.val(a).at(i) - t.val(b).at(i);
  const int id = t.emit(std::move(out), {a, b});
  t.set_backward(id, [id, a, b](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    if (tp.needs_grad(a)) detail::axpy(tp.grad(a), g.ptr(), g.numel());
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::int64_t i = 0; i < g.numel(); ++i) gb.at(i) -= g.at(i);
    }
  });
  return id;
}

template <typename S>
int mul(TapeT<S>& t, int a, int b) {
  if (!t.val(a).same_shape(t.val(b))) throw std::invalid_argument("mul: shape mismatch");
  TensorT<S> out(t.val(a).shape);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.at(i) = t.val(a).at(i) * t.val(b).at(i);
  const int id = t.emit(std::move(out), {a, b});
  t.set_backward(id, [id, a, b](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a);
      const auto& vb = tp.val(b);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i) * vb.at(i);
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      const auto& va = tp.val(a);
      for (std::int64_t i = 0; i < g.numel(); ++i) gb.at(i) += g.at(i) * va.at(i);
    }
  });
  return id;
}

template <typename S>
int scale(TapeT<S>& t, int a, double c) {
  TensorT<S> out(t.val(a).shape);
  const S cs = static_cast<S>(c);
  for (std::int64_t i = 0; i < out.numel(); ++i) out.at(i) = t.val(a).at(i) * cs;
  const int id = t.emit(std::move(out), {a});
  t.set_backward(id, [id, a, cs](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    auto& ga = tp.grad(a);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i) * cs;
  });
  return id;
}

template <typename S>
int silu(TapeT<S>& t, int a) {
  TensorT<S> out(t.val(a).shape);
  const auto& x = t.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const S xi = x.at(i);
    out.at(i) = xi / (S(1) + std::exp(-xi));
  }
  const int id = t.emit(std::move(out), {a});
  t.set_backward(id, [id, a](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    const auto& x = tp.val(a);
    auto& ga = tp.grad(a);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const S xi = x.at(i);
      const S sig = S(1) / (S(1) + std::exp(-xi));
      ga.at(i) += g.at(i) * sig * (S(1) + xi * (S(1) - sig));
    }
  });
  return id;
}

// ---------------------------------------------------------------------------
// Matrix ops (2-D tensors [rows, cols])

template <typename S>
int matmul(TapeT<S>& t, int a, int b) {
  const auto& va = t.val(a);
  const auto& vb = t.val(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_string(va) + " x " +
                                shape_string(vb));
  }
  const std::int64_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  TensorT<S> out({m, n});
  {
    detail::ConstMatMap<S> A(va.ptr(), m, k), B(vb.ptr(), k, n);
    detail::MatMap<S> C(out.ptr(), m, n);
    C.noalias() = A * B;
  }
  const int id = t.emit(std::move(out), {a, b});
  t.set_backward(id, [id, a, b, m, k, n](TapeT<S>& tp) {
    detail::ConstMatMap<S> G(tp.grad(id).ptr(), m, n);
    if (tp.needs_grad(a)) {
      detail::ConstMatMap<S> B(tp.val(b).ptr(), k, n);
      detail::MatMap<S> GA(tp.grad(a).ptr(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (tp.needs_grad(b)) {
      detail::ConstMatMap<S> A(tp.val(a).ptr(), m, k);
      detail::MatMap<S> GB(tp.grad(b).ptr(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
  return id;
}

template <typename S>
int transpose2d(TapeT<S>& t, int a) {
  const auto& va = t.val(a);
  if (va.rank() != 2) throw std::invalid_argument("transpose2d: rank must be 2");
  const std::int64_t m = va.dim(0), n = va.dim(1);
  TensorT<S> out({n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out.at(j * m + i) = va.at(i * n + j);
  const int id = t.emit(std::move(out), {a});
  t.set_backward(id, [id, a, m, n](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    auto& ga = tp.grad(a);
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t i = 0; i < m; ++i) ga.at(i * n + j) += g.at(j * m + i);
  });
  return id;
}

/// y = x * w (+ bias per output column when bias >= 0).
template <typename S>
int linear(TapeT<S>& t, int x, int w, int bias) {
  int y = matmul(t, x, w);
  if (bias < 0) return y;
  const auto& vb = t.val(bias);
  const auto& vy = t.val(y);
  if (vb.rank() != 1 || vb.dim(0) != vy.dim(1)) throw std::invalid_argument("linear: bad bias");
  const std::int64_t rows = vy.dim(0), cols = vy.dim(1);
  TensorT<S> out(vy.shape);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) out.at(i * cols + j) = vy.at(i * cols + j) + vb.at(j);
  const int id = t.emit(std::move(out), {y, bias});
  t.set_backward(id, [id, y, bias, rows, cols](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    if (tp.needs_grad(y)) detail::axpy(tp.grad(y), g.ptr(), g.numel());
    if (tp.needs_grad(bias)) {
      auto& gb = tp.grad(bias);
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) gb.at(j) += g.at(i * cols + j);
    }
  });
  return id;
}

template <typename S>
int softmax_rows(TapeT<S>& t, int a) {
  const auto& va = t.val(a);
  if (va.rank() != 2) throw std::invalid_argument("softmax_rows: rank must be 2");
  const std::int64_t rows = va.dim(0), cols = va.dim(1);
  TensorT<S> out(va.shape);
  for (std::int64_t i = 0; i < rows; ++i) {
    const S* x = va.ptr() + i * cols;
    S* y = out.ptr() + i * cols;
    S mx = x[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    S sum = S(0);
    for (std::int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const S inv = S(1) / sum;
    for (std::int64_t j = 0; j < cols; ++j) y[j] *= inv;
  }
  const int id = t.emit(std::move(out), {a});
  t.set_backward(id, [id, a, rows, cols](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    const auto& y = tp.val(id);
    auto& ga = tp.grad(a);
    for (std::int64_t i = 0; i < rows; ++i) {
      const S* gr = g.ptr() + i * cols;
      const S* yr = y.ptr() + i * cols;
      S* gar = ga.ptr() + i * cols;
      S dot = S(0);
      for (std::int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
      for (std::int64_t j = 0; j < cols; ++j) gar[j] += yr[j] * (gr[j] - dot);
    }
  });
  return id;
}

/// Row-wise layer normalization with learned affine: y = gamma * xhat + beta.
template <typename S>
int layernorm_rows(TapeT<S>& t, int x, int gamma, int beta, double eps = 1e-5) {
  const auto& vx = t.val(x);
  if (vx.rank() != 2) throw std::invalid_argument("layernorm_rows: rank must be 2");
  const std::int64_t rows = vx.dim(0), cols = vx.dim(1);
  auto xhat = std::make_shared<TensorT<S>>(vx.shape);
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  TensorT<S> out(vx.shape);
  const auto& vg = t.val(gamma);
  const auto& vb = t.val(beta);
  for (std::int64_t i = 0; i < rows; ++i) {
    const S* xr = vx.ptr() + i * cols;
    S mean = S(0);
    for (std::int64_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<S>(cols);
    S var = S(0);
    for (std::int64_t j = 0; j < cols; ++j) {
      const S d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<S>(cols);
    const S istd = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*inv_std)[static_cast<std::size_t>(i)] = istd;
    S* xh = xhat->ptr() + i * cols;
    S* yr = out.ptr() + i * cols;
    for (std::int64_t j = 0; j < cols; ++j) {
      xh[j] = (xr[j] - mean) * istd;
      yr[j] = vg.at(j) * xh[j] + vb.at(j);
    }
  }
  const int id = t.emit(std::move(out), {x, gamma, beta});
  t.set_backward(id, [id, x, gamma, beta, rows, cols, xhat, inv_std](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    const auto& vg = tp.val(gamma);
    if (tp.needs_grad(gamma)) {
      auto& gg = tp.grad(gamma);
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j)
          gg.at(j) += g.at(i * cols + j) * xhat->at(i * cols + j);
    }
    if (tp.needs_grad(beta)) {
      auto& gb = tp.grad(beta);
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) gb.at(j) += g.at(i * cols + j);
    }
    if (tp.needs_grad(x)) {
      auto& gx = tp.grad(x);
      for (std::int64_t i = 0; i < rows; ++i) {
        const S* gr = g.ptr() + i * cols;
        const S* xh = xhat->ptr() + i * cols;
        S* gxr = gx.ptr() + i * cols;
        const S istd = (*inv_std)[static_cast<std::size_t>(i)];
        S m1 = S(0), m2 = S(0);
        for (std::int64_t j = 0; j < cols; ++j) {
          const S gj = gr[j] * vg.at(j);
          m1 += gj;
          m2 += gj * xh[j];
        }
        m1 /= static_cast<S>(cols);
        m2 /= static_cast<S>(cols);
        for (std::int64_t j = 0; j < cols; ++j) {
          const S gj = gr[j] * vg.at(j);
          gxr[j] += istd * (gj - m1 - xh[j] * m2);
        }
      }
    }
  });
  return id;
}

// ---------------------------------------------------------------------------
// Convolutional ops on [C, H, W] images

template <typename S>
void im2col(const TensorT<S>& x, int kh, int kw, int stride, int pad, TensorT<S>& cols) {
  const std::int64_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t wo = (w + 2 * pad - kw) / stride + 1;
  S* cp = cols.ptr();
  for (std::int64_t c = 0; c < ci; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + ki - pad;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride + kj - pad;
            *cp++ = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x.at((c * h + iy) * w + ix) : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_accum(const TensorT<S>& cols, int kh, int kw, int stride, int pad, TensorT<S>& gx) {
  const std::int64_t ci = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
  const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t wo = (w + 2 * pad - kw) / stride + 1;
  const S* cp = cols.ptr();
  for (std::int64_t c = 0; c < ci; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + ki - pad;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride + kj - pad;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) gx.at((c * h + iy) * w + ix) += *cp;
            ++cp;
          }
        }
      }
    }
  }
}

/// 2-D convolution, zero padding. x: [Ci,H,W], w: [Co,Ci,kh,kw], b: [Co] or -1.
template <typename S>
int conv2d(TapeT<S>& t, int x, int w, int b, int stride, int pad) {
  const auto& vx = t.val(x);
  const auto& vw = t.val(w);
  if (vx.rank() != 3 || vw.rank() != 4 || vx.dim(0) != vw.dim(1)) {
    throw std::invalid_argument("conv2d: incompatible shapes " + shape_string(vx) + ", " +
                                shape_string(vw));
  }
  const std::int64_t co = vw.dim(0), ci = vw.dim(1);
  const int kh = static_cast<int>(vw.dim(2)), kw = static_cast<int>(vw.dim(3));
  const std::int64_t h = vx.dim(1), wd = vx.dim(2);
  const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: output would be empty");

  auto cols = std::make_shared<TensorT<S>>(std::vector<std::int64_t>{ci * kh * kw, ho * wo});
  im2col(vx, kh, kw, stride, pad, *cols);

  TensorT<S> out({co, ho, wo});
  {
    detail::ConstMatMap<S> W(vw.ptr(), co, ci * kh * kw);
    detail::ConstMatMap<S> C(cols->ptr(), ci * kh * kw, ho * wo);
    detail::MatMap<S> Y(out.ptr(), co, ho * wo);
    Y.noalias() = W * C;
  }
  if (b >= 0) {
    const auto& vb = t.val(b);
    if (vb.rank() != 1 || vb.dim(0) != co) throw std::invalid_argument("conv2d: bad bias");
    for (std::int64_t c = 0; c < co; ++c) {
      S* row = out.ptr() + c * ho * wo;
      const S bc = vb.at(c);
      for (std::int64_t i = 0; i < ho * wo; ++i) row[i] += bc;
    }
  }

  std::vector<int> inputs = {x, w};
  if (b >= 0) inputs.push_back(b);
  const int id = t.emit(std::move(out), inputs);
  t.set_backward(id, [id, x, w, b, stride, pad, kh, kw, co, ci, ho, wo, cols](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    detail::ConstMatMap<S> G(g.ptr(), co, ho * wo);
    if (tp.needs_grad(w)) {
      detail::MatMap<S> GW(tp.grad(w).ptr(), co, ci * kh * kw);
      detail::ConstMatMap<S> C(cols->ptr(), ci * kh * kw, ho * wo);
      GW.noalias() += G * C.transpose();
    }
    if (b >= 0 && tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::int64_t c = 0; c < co; ++c) {
        const S* row = g.ptr() + c * ho * wo;
        S acc = S(0);
        for (std::int64_t i = 0; i < ho * wo; ++i) acc += row[i];
        gb.at(c) += acc;
      }
    }
    if (tp.needs_grad(x)) {
      TensorT<S> gcols({ci * kh * kw, ho * wo});
      detail::ConstMatMap<S> W(tp.val(w).ptr(), co, ci * kh * kw);
      detail::MatMap<S> GC(gcols.ptr(), ci * kh * kw, ho * wo);
      GC.noalias() = W.transpose() * G;
      col2im_accum(gcols, kh, kw, stride, pad, tp.grad(x));
    }
  });
  return id;
}

template <typename S>
int upsample2x(TapeT<S>& t, int x) {
  const auto& vx = t.val(x);
  if (vx.rank() != 3) throw std::invalid_argument("upsample2x: rank must be 3");
  const std::int64_t c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
  TensorT<S> out({c, 2 * h, 2 * w});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) {
        const S v = vx.at((ch * h + i) * w + j);
        const std::int64_t base = (ch * 2 * h + 2 * i) * 2 * w + 2 * j;
        out.at(base) = v;
        out.at(base + 1) = v;
        out.at(base + 2 * w) = v;
        out.at(base + 2 * w + 1) = v;
      }
  const int id = t.emit(std::move(out), {x});
  t.set_backward(id, [id, x, c, h, w](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    auto& gx = tp.grad(x);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < w; ++j) {
          const std::int64_t base = (ch * 2 * h + 2 * i) * 2 * w + 2 * j;
          gx.at((ch * h + i) * w + j) +=
              g.at(base) + g.at(base + 1) + g.at(base + 2 * w) + g.at(base + 2 * w + 1);
        }
  });
  return id;
}

template <typename S>
int concat_chw(TapeT<S>& t, int a, int b) {
  const auto& va = t.val(a);
  const auto& vb = t.val(b);
  if (va.rank() != 3 || vb.rank() != 3 || va.dim(1) != vb.dim(1) || va.dim(2) != vb.dim(2)) {
    throw std::invalid_argument("concat_chw: incompatible shapes");
  }
  const std::int64_t ca = va.dim(0), cb = vb.dim(0), h = va.dim(1), w = va.dim(2);
  TensorT<S> out({ca + cb, h, w});
  std::copy(va.data.begin(), va.data.end(), out.data.begin());
  std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(ca * h * w));
  const int id = t.emit(std::move(out), {a, b});
  t.set_backward(id, [id, a, b, ca, cb, h, w](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    if (tp.needs_grad(a)) detail::axpy(tp.grad(a), g.ptr(), ca * h * w);
    if (tp.needs_grad(b)) detail::axpy(tp.grad(b), g.ptr() + ca * h * w, cb * h * w);
  });
  return id;
}

/// y[c] = x[c] + bias[c], broadcast over H, W.
template <typename S>
int add_channel_bias(TapeT<S>& t, int x, int bias) {
  const auto& vx = t.val(x);
  const auto& vb = t.val(bias);
  if (vx.rank() != 3 || vb.rank() != 1 || vb.dim(0) != vx.dim(0)) {
    throw std::invalid_argument("add_channel_bias: incompatible shapes");
  }
  const std::int64_t c = vx.dim(0), hw = vx.dim(1) * vx.dim(2);
  TensorT<S> out(vx.shape);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const S bc = vb.at(ch);
    for (std::int64_t i = 0; i < hw; ++i) out.at(ch * hw + i) = vx.at(ch * hw + i) + bc;
  }
  const int id = t.emit(std::move(out), {x, bias});
  t.set_backward(id, [id, x, bias, c, hw](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    if (tp.needs_grad(x)) detail::axpy(tp.grad(x), g.ptr(), g.numel());
    if (tp.needs_grad(bias)) {
      auto& gb = tp.grad(bias);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        S acc = S(0);
        for (std::int64_t i = 0; i < hw; ++i) acc += g.at(ch * hw + i);
        gb.at(ch) += acc;
      }
    }
  });
  return id;
}

// ---------------------------------------------------------------------------
// Layout changes between [C,H,W] images and [T,C] token matrices

template <typename S>
int to_tokens(TapeT<S>& t, int x) {
  const auto& vx = t.val(x);
  if (vx.rank() != 3) throw std::invalid_argument("to_tokens: rank must be 3");
  const std::int64_t c = vx.dim(0), hw = vx.dim(1) * vx.dim(2);
  TensorT<S> out({hw, c});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t p = 0; p < hw; ++p) out.at(p * c + ch) = vx.at(ch * hw + p);
  const int id = t.emit(std::move(out), {x});
  t.set_backward(id, [id, x, c, hw](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    auto& gx = tp.grad(x);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t p = 0; p < hw; ++p) gx.at(ch * hw + p) += g.at(p * c + ch);
  });
  return id;
}

template <typename S>
int from_tokens(TapeT<S>& t, int x, std::int64_t h, std::int64_t w) {
  const auto& vx = t.val(x);
  if (vx.rank() != 2 || vx.dim(0) != h * w) throw std::invalid_argument("from_tokens: bad shape");
  const std::int64_t c = vx.dim(1), hw = h * w;
  TensorT<S> out({c, h, w});
  for (std::int64_t p = 0; p < hw; ++p)
    for (std::int64_t ch = 0; ch < c; ++ch) out.at(ch * hw + p) = vx.at(p * c + ch);
  const int id = t.emit(std::move(out), {x});
  t.set_backward(id, [id, x, c, hw](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    auto& gx = tp.grad(x);
    for (std::int64_t p = 0; p < hw; ++p)
      for (std::int64_t ch = 0; ch < c; ++ch) gx.at(p * c + ch) += g.at(ch * hw + p);
  });
  return id;
}

/// Stacks [T_i, d] matrices along rows.
template <typename S>
int vstack(TapeT<S>& t, const std::vector<int>& parts) {
  if (parts.empty()) throw std::invalid_argument("vstack: empty input");
  const std::int64_t d = t.val(parts[0]).dim(1);
  std::int64_t rows = 0;
  for (int p : parts) {
    if (t.val(p).rank() != 2 || t.val(p).dim(1) != d) throw std::invalid_argument("vstack: shapes");
    rows += t.val(p).dim(0);
  }
  TensorT<S> out({rows, d});
  std::int64_t off = 0;
  for (int p : parts) {
    const auto& v = t.val(p);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.numel();
  }
  const int id = t.emit(std::move(out), parts);
  std::vector<int> parts_copy = parts;
  t.set_backward(id, [id, parts_copy](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    std::int64_t off = 0;
    for (int p : parts_copy) {
      const std::int64_t n = tp.val(p).numel();
      if (tp.needs_grad(p)) detail::axpy(tp.grad(p), g.ptr() + off, n);
      off += n;
    }
  });
  return id;
}

/// Stacks [T, d_i] matrices along columns.
template <typename S>
int hstack(TapeT<S>& t, const std::vector<int>& parts) {
  if (parts.empty()) throw std::invalid_argument("hstack: empty input");
  const std::int64_t rows = t.val(parts[0]).dim(0);
  std::int64_t cols = 0;
  for (int p : parts) {
    if (t.val(p).rank() != 2 || t.val(p).dim(0) != rows) {
      throw std::invalid_argument("hstack: shapes");
    }
    cols += t.val(p).dim(1);
  }
  TensorT<S> out({rows, cols});
  std::int64_t off = 0;
  for (int p : parts) {
    const auto& v = t.val(p);
    const std::int64_t d = v.dim(1);
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < d; ++j) out.at(i * cols + off + j) = v.at(i * d + j);
    off += d;
  }
  const int id = t.emit(std::move(out), parts);
  std::vector<int> parts_copy = parts;
  t.set_backward(id, [id, parts_copy, rows, cols](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    std::int64_t off = 0;
    for (int p : parts_copy) {
      const std::int64_t d = tp.val(p).dim(1);
      if (tp.needs_grad(p)) {
        auto& gp = tp.grad(p);
        for (std::int64_t i = 0; i < rows; ++i)
          for (std::int64_t j = 0; j < d; ++j) gp.at(i * d + j) += g.at(i * cols + off + j);
      }
      off += d;
    }
  });
  return id;
}

template <typename S>
int slice_cols(TapeT<S>& t, int x, std::int64_t off, std::int64_t len) {
  const auto& vx = t.val(x);
  if (vx.rank() != 2 || off < 0 || off + len > vx.dim(1)) {
    throw std::invalid_argument("slice_cols: bad range");
  }
  const std::int64_t rows = vx.dim(0), cols = vx.dim(1);
  TensorT<S> out({rows, len});
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < len; ++j) out.at(i * len + j) = vx.at(i * cols + off + j);
  const int id = t.emit(std::move(out), {x});
  t.set_backward(id, [id, x, off, len, rows, cols](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    auto& gx = tp.grad(x);
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < len; ++j) gx.at(i * cols + off + j) += g.at(i * len + j);
  });
  return id;
}

/// Applies the camera positional transform to every row of a [T, d] matrix.
/// The map is linear in the features, so backward multiplies by Psi^T.
template <typename S>
int cape_rows(TapeT<S>& t, int x, const Pose& pose, AttentionRole role, const CapeConfig& cfg) {
  const auto& vx = t.val(x);
  if (vx.rank() != 2) throw std::invalid_argument("cape_rows: rank must be 2");
  const std::int64_t rows = vx.dim(0), d = vx.dim(1);
  check_cape_dimension(d, cfg.mode);
  TensorT<S> out = vx;
  for (std::int64_t i = 0; i < rows; ++i) {
    apply_cape<S>(std::span<S>(out.ptr() + i * d, static_cast<std::size_t>(d)), pose, role, cfg);
  }
  const int id = t.emit(std::move(out), {x});
  t.set_backward(id, [id, x, rows, d, pose, role, cfg](TapeT<S>& tp) {
    const auto& g = tp.grad(id);
    auto& gx = tp.grad(x);
    std::vector<S> row(static_cast<std::size_t>(d));
    for (std::int64_t i = 0; i < rows; ++i) {
      std::copy_n(g.ptr() + i * d, d, row.data());
      apply_cape_transpose<S>(std::span<S>(row.data(), row.size()), pose, role, cfg);
      for (std::int64_t j = 0; j < d; ++j) gx.at(i * d + j) += row[static_cast<std::size_t>(j)];
    }
  });
  return id;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
int mean_all(TapeT<S>& t, int x) {
  const auto& vx = t.val(x);
  const std::int64_t n = vx.numel();
  S acc = S(0);
  for (std::int64_t i = 0; i < n; ++i) acc += vx.at(i);
  TensorT<S> out({1});
  out.at(0) = acc / static_cast<S>(n);
  const int id = t.emit(std::move(out), {x});
  t.set_backward(id, [id, x, n](TapeT<S>& tp) {
    const S g = tp.grad(id).at(0) / static_cast<S>(n);
    auto& gx = tp.grad(x);
    for (std::int64_t i = 0; i < n; ++i) gx.at(i) += g;
  });
  return id;
}

/// Mean squared error against a constant target.
template <typename S>
int mse_vs_const(TapeT<S>& t, int pred, std::shared_ptr<const TensorT<S>> target) {
  const auto& vp = t.val(pred);
  if (!vp.same_shape(*target)) throw std::invalid_argument("mse_vs_const: shape mismatch");
  const std::int64_t n = vp.numel();
  S acc = S(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const S d = vp.at(i) - target->at(i);
    acc += d * d;
  }
  TensorT<S> out({1});
  out.at(0) = acc / static_cast<S>(n);
  const int id = t.emit(std::move(out), {pred});
  t.set_backward(id, [id, pred, target, n](TapeT<S>& tp) {
    const S g = tp.grad(id).at(0) * S(2) / static_cast<S>(n);
    const auto& vp = tp.val(pred);
    auto& gp = tp.grad(pred);
    for (std::int64_t i = 0; i < n; ++i) gp.at(i) += g * (vp.at(i) - target->at(i));
  });
  return id;
}

}  // namespace cape::nn
