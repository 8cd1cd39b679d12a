#pragma once

#include <Eigen/Dense>
#include <string>
#include <variant>
#include <vector>

#include "granage/common.hpp"
#include "granage/tensor.hpp"

namespace granage::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

namespace detail {

// Lay out one sample's receptive fields as a (C*k*k) x (OH*OW) matrix;
// out-of-image taps read zero.
inline void im2col(const double* x, int C, int H, int W, int k, int stride, int pad,
                   int OH, int OW, double* col) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = col + static_cast<size_t>((c * k + ki) * k + kj) * OH * OW;
        for (int oi = 0; oi < OH; ++oi) {
          const int ii = oi * stride + ki - pad;
          for (int oj = 0; oj < OW; ++oj) {
            const int jj = oj * stride + kj - pad;
            row[oi * OW + oj] = (ii >= 0 && ii < H && jj >= 0 && jj < W)
                                    ? x[(static_cast<size_t>(c) * H + ii) * W + jj]
                                    : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, int C, int H, int W, int k, int stride, int pad,
                       int OH, int OW, double* gx) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* row = col + static_cast<size_t>((c * k + ki) * k + kj) * OH * OW;
        for (int oi = 0; oi < OH; ++oi) {
          const int ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= H) continue;
          for (int oj = 0; oj < OW; ++oj) {
            const int jj = oj * stride + kj - pad;
            if (jj < 0 || jj >= W) continue;
            gx[(static_cast<size_t>(c) * H + ii) * W + jj] += row[oi * OW + oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

struct Conv2d {
  int in_ch = 0, out_ch = 0, ksize = 3, stride = 1, pad = 0;
  Tensor w;  // {out_ch, in_ch, k, k}
  Tensor b;  // {out_ch}

  Conv2d() = default;
  Conv2d(int in, int out, int k, int s, int p, Rng& rng)
      : in_ch(in), out_ch(out), ksize(k), stride(s), pad(p),
        w({out, in, k, k}), b({out}) {
    const double std = std::sqrt(2.0 / (in * k * k));
    for (double& v : w.data) v = rng.normal(0.0, std);
  }

  int out_dim(int in_dim) const { return (in_dim + 2 * pad - ksize) / stride + 1; }

  Tensor forward(const Tensor& x) const {
    if (x.shape.size() != 4 || x.dim(1) != in_ch)
      throw ValueError("conv: expected {N," + std::to_string(in_ch) + ",H,W}, got " + x.shape_str());
    const int N = static_cast<int>(x.dim(0));
    const int H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
    const int OH = out_dim(H), OW = out_dim(W);
    if (OH < 1 || OW < 1)
      throw ValueError("conv: input " + x.shape_str() + " too small for kernel");
    Tensor y({N, out_ch, OH, OW});
    std::vector<double> col(static_cast<size_t>(in_ch) * ksize * ksize * OH * OW);
    ConstMatMap wm(w.data.data(), out_ch, in_ch * ksize * ksize);
    for (int n = 0; n < N; ++n) {
      detail::im2col(x.data.data() + static_cast<size_t>(n) * in_ch * H * W,
                     in_ch, H, W, ksize, stride, pad, OH, OW, col.data());
      ConstMatMap cm(col.data(), in_ch * ksize * ksize, OH * OW);
      MatMap ym(y.data.data() + static_cast<size_t>(n) * out_ch * OH * OW, out_ch, OH * OW);
      ym.noalias() = wm * cm;
      ym.colwise() += ConstVecMap(b.data.data(), out_ch);
    }
    return y;
  }

  // Recomputes im2col from the cached input rather than caching the much
  // larger column matrices.
  Tensor backward(const Tensor& x, const Tensor& gy, Tensor& gw, Tensor& gb,
                  bool need_input_grad) const {
    const int N = static_cast<int>(x.dim(0));
    const int H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
    const int OH = static_cast<int>(gy.dim(2)), OW = static_cast<int>(gy.dim(3));
    Tensor gx(need_input_grad ? x.shape : std::vector<int64_t>{0});
    std::vector<double> col(static_cast<size_t>(in_ch) * ksize * ksize * OH * OW);
    std::vector<double> gcol(need_input_grad ? col.size() : 0);
    ConstMatMap wm(w.data.data(), out_ch, in_ch * ksize * ksize);
    MatMap gwm(gw.data.data(), out_ch, in_ch * ksize * ksize);
    VecMap gbm(gb.data.data(), out_ch);
    for (int n = 0; n < N; ++n) {
      detail::im2col(x.data.data() + static_cast<size_t>(n) * in_ch * H * W,
                     in_ch, H, W, ksize, stride, pad, OH, OW, col.data());
      ConstMatMap cm(col.data(), in_ch * ksize * ksize, OH * OW);
      ConstMatMap gym(gy.data.data() + static_cast<size_t>(n) * out_ch * OH * OW, out_ch, OH * OW);
      gwm.noalias() += gym * cm.transpose();
      gbm.noalias() += gym.rowwise().sum();
      if (need_input_grad) {
        MatMap gcm(gcol.data(), in_ch * ksize * ksize, OH * OW);
        gcm.noalias() = wm.transpose() * gym;
        detail::col2im_add(gcol.data(), in_ch, H, W, ksize, stride, pad, OH, OW,
                           gx.data.data() + static_cast<size_t>(n) * in_ch * H * W);
      }
    }
    return gx;
  }
};

struct Dense {
  int in_dim = 0, out_dim = 0;
  Tensor w;  // {out, in}
  Tensor b;  // {out}

  Dense() = default;
  Dense(int in, int out, Rng& rng) : in_dim(in), out_dim(out), w({out, in}), b({out}) {
    const double std = std::sqrt(2.0 / in);
    for (double& v : w.data) v = rng.normal(0.0, std);
  }

  Tensor forward(const Tensor& x) const {
    if (x.shape.size() != 2 || x.dim(1) != in_dim)
      throw ValueError("dense: expected {N," + std::to_string(in_dim) + "}, got " + x.shape_str());
    const int N = static_cast<int>(x.dim(0));
    Tensor y({N, out_dim});
    ConstMatMap xm(x.data.data(), N, in_dim);
    ConstMatMap wm(w.data.data(), out_dim, in_dim);
    MatMap ym(y.data.data(), N, out_dim);
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += ConstVecMap(b.data.data(), out_dim).transpose();
    return y;
  }

  Tensor backward(const Tensor& x, const Tensor& gy, Tensor& gw, Tensor& gb,
                  bool need_input_grad) const {
    const int N = static_cast<int>(x.dim(0));
    ConstMatMap xm(x.data.data(), N, in_dim);
    ConstMatMap gym(gy.data.data(), N, out_dim);
    MatMap gwm(gw.data.data(), out_dim, in_dim);
    gwm.noalias() += gym.transpose() * xm;
    VecMap(gb.data.data(), out_dim).noalias() += gym.colwise().sum().transpose();
    Tensor gx(need_input_grad ? x.shape : std::vector<int64_t>{0});
    if (need_input_grad) {
      ConstMatMap wm(w.data.data(), out_dim, in_dim);
      MatMap(gx.data.data(), N, in_dim).noalias() = gym * wm;
    }
    return gx;
  }
};

struct ReLU {
  Tensor forward(const Tensor& x) const {
    Tensor y = x;
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    return y;
  }
  Tensor backward(const Tensor& x, const Tensor& gy) const {
    Tensor gx = gy;
    for (size_t i = 0; i < gx.data.size(); ++i)
      if (x.data[i] <= 0.0) gx.data[i] = 0.0;
    return gx;
  }
};

// {N,C,H,W} -> {N,C} spatial mean; the bridge from the conv stage to the
// dense stage, making the stack input-size agnostic.
struct GlobalAvgPool {
  Tensor forward(const Tensor& x) const {
    if (x.shape.size() != 4) throw ValueError("gap: expected {N,C,H,W}, got " + x.shape_str());
    const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1));
    const int HW = static_cast<int>(x.dim(2) * x.dim(3));
    Tensor y({N, C});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double* p = x.data.data() + (static_cast<size_t>(n) * C + c) * HW;
        double acc = 0.0;
        for (int i = 0; i < HW; ++i) acc += p[i];
        y.data[static_cast<size_t>(n) * C + c] = acc / HW;
      }
    return y;
  }
  Tensor backward(const Tensor& x, const Tensor& gy) const {
    const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1));
    const int HW = static_cast<int>(x.dim(2) * x.dim(3));
    Tensor gx(x.shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double g = gy.data[static_cast<size_t>(n) * C + c] / HW;
        double* p = gx.data.data() + (static_cast<size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) p[i] = g;
      }
    return gx;
  }
};

using Layer = std::variant<Conv2d, ReLU, GlobalAvgPool, Dense>;

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

inline void collect_params(std::vector<Layer>& layers, const std::string& prefix,
                           std::vector<ParamRef>& out) {
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    if (auto* c = std::get_if<Conv2d>(&layers[i])) {
      out.push_back({base + ".w", &c->w});
      out.push_back({base + ".b", &c->b});
    } else if (auto* d = std::get_if<Dense>(&layers[i])) {
      out.push_back({base + ".w", &d->w});
      out.push_back({base + ".b", &d->b});
    }
  }
}

// Feed-forward stack ending in a {N,F} feature matrix. `ctx`, when given,
// records each layer's input for the backward pass.
struct LayerStack {
  std::vector<Layer> layers;

  Tensor forward(const Tensor& x, std::vector<Tensor>* ctx = nullptr) const {
    Tensor cur = x;
    for (const auto& layer : layers) {
      if (ctx) ctx->push_back(cur);
      cur = std::visit([&](const auto& l) { return l.forward(cur); }, layer);
    }
    return cur;
  }

  // `grads` must be aligned with collect_params order for this stack.
  void backward(const Tensor& grad_features, const std::vector<Tensor>& ctx,
                std::vector<Tensor*> grads) const {
    size_t slot = grads.size();
    Tensor g = grad_features;
    for (size_t i = layers.size(); i-- > 0;) {
      const Tensor& input = ctx[i];
      const bool need_gx = i > 0;
      if (const auto* c = std::get_if<Conv2d>(&layers[i])) {
        Tensor& gb = *grads[--slot];
        Tensor& gw = *grads[--slot];
        g = c->backward(input, g, gw, gb, need_gx);
      } else if (const auto* d = std::get_if<Dense>(&layers[i])) {
        Tensor& gb = *grads[--slot];
        Tensor& gw = *grads[--slot];
        g = d->backward(input, g, gw, gb, need_gx);
      } else if (const auto* r = std::get_if<ReLU>(&layers[i])) {
        g = r->backward(input, g);
      } else if (const auto* p = std::get_if<GlobalAvgPool>(&layers[i])) {
        g = p->backward(input, g);
      }
    }
  }
};

}  // namespace granage::nn
