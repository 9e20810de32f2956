#pragma once

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ps2kit/autodiff.hpp"
#include "ps2kit/tensor.hpp"

namespace ps2kit::ad {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatRM<T>>;

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

/// Single-image patch matrix: (Cin*k*k, Ho*Wo), zero padding.
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, T* col) {
  const int Ho = conv_out(H, k, stride, pad), Wo = conv_out(W, k, stride, pad);
  const std::size_t cols = static_cast<std::size_t>(Ho) * Wo;
  std::size_t r = 0;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx, ++r) {
        T* dst = col + r * cols;
        const T* plane = x + static_cast<std::size_t>(c) * H * W;
        std::size_t i = 0;
        for (int y = 0; y < Ho; ++y) {
          int sy = y * stride - pad + ky;
          if (sy < 0 || sy >= H) {
            for (int xx = 0; xx < Wo; ++xx) dst[i++] = T(0);
            continue;
          }
          for (int xx = 0; xx < Wo; ++xx) {
            int sx = xx * stride - pad + kx;
            dst[i++] = (sx >= 0 && sx < W) ? plane[static_cast<std::size_t>(sy) * W + sx] : T(0);
          }
        }
      }
}

/// Adjoint of im2col: scatter-adds the patch matrix back into (C,H,W).
template <typename T>
void col2im(const T* col, int C, int H, int W, int k, int stride, int pad, T* x) {
  const int Ho = conv_out(H, k, stride, pad), Wo = conv_out(W, k, stride, pad);
  const std::size_t cols = static_cast<std::size_t>(Ho) * Wo;
  std::size_t r = 0;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx, ++r) {
        const T* src = col + r * cols;
        T* plane = x + static_cast<std::size_t>(c) * H * W;
        std::size_t i = 0;
        for (int y = 0; y < Ho; ++y) {
          int sy = y * stride - pad + ky;
          if (sy < 0 || sy >= H) {
            i += static_cast<std::size_t>(Wo);
            continue;
          }
          for (int xx = 0; xx < Wo; ++xx) {
            int sx = xx * stride - pad + kx;
            if (sx >= 0 && sx < W) plane[static_cast<std::size_t>(sy) * W + sx] += src[i];
            ++i;
          }
        }
      }
}

}  // namespace detail

/// w is (Cout,Cin,k,k), b is (Cout); x (B,Cin,H,W) -> (B,Cout,Ho,Wo).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int Cout = w->value.dim(0), k = w->value.dim(2);
  if (w->value.dim(1) != C) throw shape_error("conv2d: weight cin mismatch");
  if (b->value.numel() != static_cast<std::size_t>(Cout)) throw shape_error("conv2d: bias size mismatch");
  const int Ho = detail::conv_out(H, k, stride, pad), Wo = detail::conv_out(W, k, stride, pad);
  if (Ho <= 0 || Wo <= 0) throw shape_error("conv2d: output would be empty");
  const std::size_t krows = static_cast<std::size_t>(C) * k * k;
  const std::size_t cols = static_cast<std::size_t>(Ho) * Wo;

  Tensor<T> v({B, Cout, Ho, Wo});
  std::vector<T> col(krows * cols);
  detail::MapCM<T> Wm(w->value.data(), Cout, static_cast<Eigen::Index>(krows));
  for (int bb = 0; bb < B; ++bb) {
    detail::im2col(x->value.data() + static_cast<std::size_t>(bb) * C * H * W, C, H, W, k, stride, pad, col.data());
    detail::MapCM<T> Cm(col.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(cols));
    detail::MapM<T> Om(v.data() + static_cast<std::size_t>(bb) * Cout * cols, Cout, static_cast<Eigen::Index>(cols));
    Om.noalias() = Wm * Cm;
    for (int c = 0; c < Cout; ++c) Om.row(c).array() += b->value[static_cast<std::size_t>(c)];
  }

  Var<T> out = detail::make(std::move(v), {x, w, b});
  if (out->requires_grad)
    out->backfn = [x, w, b, stride, pad, B, C, H, W, Cout, k, krows, cols, o = out.get()] {
      std::vector<T> col(krows * cols);
      detail::MapCM<T> Wm(w->value.data(), Cout, static_cast<Eigen::Index>(krows));
      for (int bb = 0; bb < B; ++bb) {
        detail::MapCM<T> Gm(o->grad.data() + static_cast<std::size_t>(bb) * Cout * cols, Cout,
                            static_cast<Eigen::Index>(cols));
        if (w->requires_grad || b->requires_grad) {
          if (w->requires_grad) {
            detail::im2col(x->value.data() + static_cast<std::size_t>(bb) * C * H * W, C, H, W, k, stride, pad,
                           col.data());
            detail::MapCM<T> Cm(col.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(cols));
            detail::MapM<T> dW(w->grad_ref().data(), Cout, static_cast<Eigen::Index>(krows));
            dW.noalias() += Gm * Cm.transpose();
          }
          if (b->requires_grad) {
            auto& gb = b->grad_ref();
            for (int c = 0; c < Cout; ++c) gb[static_cast<std::size_t>(c)] += Gm.row(c).sum();
          }
        }
        if (x->requires_grad) {
          detail::MapM<T> Cm(col.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(cols));
          Cm.noalias() = Wm.transpose() * Gm;
          detail::col2im(col.data(), C, H, W, k, stride, pad,
                         x->grad_ref().data() + static_cast<std::size_t>(bb) * C * H * W);
        }
      }
    };
  return out;
}

/// w is (Cin,Cout,k,k), b is (Cout); x (B,Cin,H,W) -> (B,Cout,Ho,Wo) with
/// Ho = (H-1)*stride - 2*pad + k. Exact adjoint of conv2d over the data path.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int Cout = w->value.dim(1), k = w->value.dim(2);
  if (w->value.dim(0) != C) throw shape_error("conv_transpose2d: weight cin mismatch");
  if (b->value.numel() != static_cast<std::size_t>(Cout)) throw shape_error("conv_transpose2d: bias size mismatch");
  const int Ho = (H - 1) * stride - 2 * pad + k, Wo = (W - 1) * stride - 2 * pad + k;
  if (Ho <= 0 || Wo <= 0) throw shape_error("conv_transpose2d: output would be empty");
  const std::size_t krows = static_cast<std::size_t>(Cout) * k * k;
  const std::size_t cols = static_cast<std::size_t>(H) * W;

  Tensor<T> v = Tensor<T>::zeros({B, Cout, Ho, Wo});
  std::vector<T> colbuf(krows * cols);
  detail::MapCM<T> Wm(w->value.data(), C, static_cast<Eigen::Index>(krows));
  for (int bb = 0; bb < B; ++bb) {
    detail::MapCM<T> Xm(x->value.data() + static_cast<std::size_t>(bb) * C * cols, C,
                        static_cast<Eigen::Index>(cols));
    detail::MapM<T> Cm(colbuf.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(cols));
    Cm.noalias() = Wm.transpose() * Xm;
    T* outp = v.data() + static_cast<std::size_t>(bb) * Cout * Ho * Wo;
    detail::col2im(colbuf.data(), Cout, Ho, Wo, k, stride, pad, outp);
    for (int c = 0; c < Cout; ++c) {
      T* p = outp + static_cast<std::size_t>(c) * Ho * Wo;
      for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) p[i] += b->value[static_cast<std::size_t>(c)];
    }
  }

  Var<T> out = detail::make(std::move(v), {x, w, b});
  if (out->requires_grad)
    out->backfn = [x, w, b, stride, pad, B, C, H, W, Cout, k, Ho, Wo, krows, cols, o = out.get()] {
      std::vector<T> colbuf(krows * cols);
      detail::MapCM<T> Wm(w->value.data(), C, static_cast<Eigen::Index>(krows));
      for (int bb = 0; bb < B; ++bb) {
        const T* gout = o->grad.data() + static_cast<std::size_t>(bb) * Cout * Ho * Wo;
        detail::im2col(gout, Cout, Ho, Wo, k, stride, pad, colbuf.data());
        detail::MapCM<T> dCm(colbuf.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(cols));
        if (x->requires_grad) {
          detail::MapM<T> dX(x->grad_ref().data() + static_cast<std::size_t>(bb) * C * cols, C,
                             static_cast<Eigen::Index>(cols));
          dX.noalias() += Wm * dCm;
        }
        if (w->requires_grad) {
          detail::MapCM<T> Xm(x->value.data() + static_cast<std::size_t>(bb) * C * cols, C,
                              static_cast<Eigen::Index>(cols));
          detail::MapM<T> dW(w->grad_ref().data(), C, static_cast<Eigen::Index>(krows));
          dW.noalias() += Xm * dCm.transpose();
        }
        if (b->requires_grad) {
          auto& gb = b->grad_ref();
          for (int c = 0; c < Cout; ++c) {
            const T* p = gout + static_cast<std::size_t>(c) * Ho * Wo;
            T s = T(0);
            for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) s += p[i];
            gb[static_cast<std::size_t>(c)] += s;
          }
        }
      }
    };
  return out;
}

/// x (B,Fin), w (Fout,Fin), b (Fout) -> (B,Fout).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const int B = x->value.dim(0), Fin = x->value.dim(1), Fout = w->value.dim(0);
  if (w->value.dim(1) != Fin) throw shape_error("linear: weight fin mismatch");
  if (b->value.numel() != static_cast<std::size_t>(Fout)) throw shape_error("linear: bias size mismatch");
  Tensor<T> v({B, Fout});
  detail::MapCM<T> Xm(x->value.data(), B, Fin);
  detail::MapCM<T> Wm(w->value.data(), Fout, Fin);
  detail::MapM<T> Om(v.data(), B, Fout);
  Om.noalias() = Xm * Wm.transpose();
  for (int bb = 0; bb < B; ++bb)
    for (int f = 0; f < Fout; ++f) v.at(bb, f) += b->value[static_cast<std::size_t>(f)];
  Var<T> out = detail::make(std::move(v), {x, w, b});
  if (out->requires_grad)
    out->backfn = [x, w, b, B, Fin, Fout, o = out.get()] {
      detail::MapCM<T> Gm(o->grad.data(), B, Fout);
      if (x->requires_grad) {
        detail::MapCM<T> Wm(w->value.data(), Fout, Fin);
        detail::MapM<T> dX(x->grad_ref().data(), B, Fin);
        dX.noalias() += Gm * Wm;
      }
      if (w->requires_grad) {
        detail::MapCM<T> Xm(x->value.data(), B, Fin);
        detail::MapM<T> dW(w->grad_ref().data(), Fout, Fin);
        dW.noalias() += Gm.transpose() * Xm;
      }
      if (b->requires_grad) {
        auto& gb = b->grad_ref();
        for (int f = 0; f < Fout; ++f) gb[static_cast<std::size_t>(f)] += Gm.col(f).sum();
      }
    };
  return out;
}

/// Batch statistics while training (running buffers updated in place);
/// frozen running statistics in eval.
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   const std::shared_ptr<Tensor<T>>& running_mean, const std::shared_ptr<Tensor<T>>& running_var,
                   bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (gamma->value.numel() != static_cast<std::size_t>(C)) throw shape_error("batchnorm2d: gamma size mismatch");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const T n = static_cast<T>(static_cast<std::size_t>(B) * plane);

  std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  if (training) {
    for (int c = 0; c < C; ++c) {
      T s = T(0);
      for (int b = 0; b < B; ++b) {
        const T* p = x->value.data() + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      T mu = s / n;
      T vs = T(0);
      for (int b = 0; b < B; ++b) {
        const T* p = x->value.data() + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) vs += (p[i] - mu) * (p[i] - mu);
      }
      T var = vs / n;
      mean[static_cast<std::size_t>(c)] = mu;
      invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + eps);
      T unbiased = n > T(1) ? vs / (n - T(1)) : var;
      (*running_mean)[static_cast<std::size_t>(c)] =
          (T(1) - momentum) * (*running_mean)[static_cast<std::size_t>(c)] + momentum * mu;
      (*running_var)[static_cast<std::size_t>(c)] =
          (T(1) - momentum) * (*running_var)[static_cast<std::size_t>(c)] + momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = (*running_mean)[static_cast<std::size_t>(c)];
      invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt((*running_var)[static_cast<std::size_t>(c)] + eps);
    }
  }

  Tensor<T> v({B, C, H, W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data() + (static_cast<std::size_t>(b) * C + c) * plane;
      T* q = v.data() + (static_cast<std::size_t>(b) * C + c) * plane;
      T mu = mean[static_cast<std::size_t>(c)], is = invstd[static_cast<std::size_t>(c)];
      T g = gamma->value[static_cast<std::size_t>(c)], bt = beta->value[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < plane; ++i) q[i] = g * (p[i] - mu) * is + bt;
    }

  Var<T> out = detail::make(std::move(v), {x, gamma, beta});
  if (out->requires_grad)
    out->backfn = [x, gamma, beta, mean = std::move(mean), invstd = std::move(invstd), training, B, C, plane, n,
                   o = out.get()] {
      for (int c = 0; c < C; ++c) {
        T mu = mean[static_cast<std::size_t>(c)], is = invstd[static_cast<std::size_t>(c)];
        T g = gamma->value[static_cast<std::size_t>(c)];
        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (int b = 0; b < B; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            T dy = o->grad.data()[off + i];
            sum_dy += dy;
            sum_dy_xhat += dy * (x->value.data()[off + i] - mu) * is;
          }
        }
        if (gamma->requires_grad) gamma->grad_ref()[static_cast<std::size_t>(c)] += sum_dy_xhat;
        if (beta->requires_grad) beta->grad_ref()[static_cast<std::size_t>(c)] += sum_dy;
        if (x->requires_grad) {
          T* gx = x->grad_ref().data();
          for (int b = 0; b < B; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              T dy = o->grad.data()[off + i];
              T xhat = (x->value.data()[off + i] - mu) * is;
              if (training)
                gx[off + i] += g * is * (dy - sum_dy / n - xhat * sum_dy_xhat / n);
              else
                gx[off + i] += g * is * dy;
            }
          }
        }
      }
    };
  return out;
}

}  // namespace ps2kit::ad

// ---------------------------------------------------------------------------
// Layers

namespace ps2kit::nn {

using ad::Var;

template <typename T>
struct Ctx {
  bool training = true;
  std::mt19937* rng = nullptr;
};

template <typename T>
using ParamList = std::vector<std::pair<std::string, Var<T>>>;
template <typename T>
using BufferList = std::vector<std::pair<std::string, std::shared_ptr<Tensor<T>>>>;

namespace detail {

template <typename T>
Tensor<T> randn(const std::vector<int>& shape, double stddev, std::mt19937& rng) {
  // drawn in double so float and double instantiations share streams
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

}  // namespace detail

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int cin, int cout, int k, int stride, int pad, std::mt19937& rng)
      : stride_(stride), pad_(pad) {
    double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    w_ = ad::leaf(detail::randn<T>({cout, cin, k, k}, std, rng));
    b_ = ad::leaf(Tensor<T>::zeros({cout}));
  }
  Var<T> forward(const Var<T>& x) const { return ad::conv2d(x, w_, b_, stride_, pad_); }
  void params(const std::string& p, ParamList<T>& out) const {
    out.push_back({p + ".weight", w_});
    out.push_back({p + ".bias", b_});
  }

 private:
  Var<T> w_, b_;
  int stride_ = 1, pad_ = 0;
};

template <typename T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(int cin, int cout, int k, int stride, int pad, std::mt19937& rng)
      : stride_(stride), pad_(pad) {
    double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    w_ = ad::leaf(detail::randn<T>({cin, cout, k, k}, std, rng));
    b_ = ad::leaf(Tensor<T>::zeros({cout}));
  }
  Var<T> forward(const Var<T>& x) const { return ad::conv_transpose2d(x, w_, b_, stride_, pad_); }
  void params(const std::string& p, ParamList<T>& out) const {
    out.push_back({p + ".weight", w_});
    out.push_back({p + ".bias", b_});
  }

 private:
  Var<T> w_, b_;
  int stride_ = 1, pad_ = 0;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int c) {
    gamma_ = ad::leaf(Tensor<T>::full({c}, T(1)));
    beta_ = ad::leaf(Tensor<T>::zeros({c}));
    rmean_ = std::make_shared<Tensor<T>>(Tensor<T>::zeros({c}));
    rvar_ = std::make_shared<Tensor<T>>(Tensor<T>::full({c}, T(1)));
  }
  Var<T> forward(const Var<T>& x, const Ctx<T>& ctx) const {
    return ad::batchnorm2d(x, gamma_, beta_, rmean_, rvar_, ctx.training);
  }
  void params(const std::string& p, ParamList<T>& out) const {
    out.push_back({p + ".gamma", gamma_});
    out.push_back({p + ".beta", beta_});
  }
  void buffers(const std::string& p, BufferList<T>& out) const {
    out.push_back({p + ".running_mean", rmean_});
    out.push_back({p + ".running_var", rvar_});
  }

 private:
  Var<T> gamma_, beta_;
  std::shared_ptr<Tensor<T>> rmean_, rvar_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int fin, int fout, std::mt19937& rng) {
    w_ = ad::leaf(detail::randn<T>({fout, fin}, std::sqrt(2.0 / fin), rng));
    b_ = ad::leaf(Tensor<T>::zeros({fout}));
  }
  Var<T> forward(const Var<T>& x) const { return ad::linear(x, w_, b_); }
  void params(const std::string& p, ParamList<T>& out) const {
    out.push_back({p + ".weight", w_});
    out.push_back({p + ".bias", b_});
  }

 private:
  Var<T> w_, b_;
};

template <typename T>
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double p) : p_(p) {}
  Var<T> forward(const Var<T>& x, const Ctx<T>& ctx) const {
    if (!ctx.training || p_ <= 0.0) return x;
    if (!ctx.rng) throw shape_error("Dropout: training forward needs an rng");
    return ad::dropout(x, p_, true, *ctx.rng);
  }

 private:
  double p_ = 0.0;
};

}  // namespace ps2kit::nn
