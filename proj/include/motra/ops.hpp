#pragma once

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <vector>

#include "motra/tape.hpp"

namespace motra {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

namespace detail {

// SAME padding: stride 1 pads floor(K/2) on each side; stride 2 puts the odd
// pad on the top/left so that out = ceil(in/stride).
inline void same_padding(int in, int k, int stride, int* out, int* pad_begin) {
  *out = (in + stride - 1) / stride;
  int total = std::max(0, (*out - 1) * stride + k - in);
  *pad_begin = (total + 1) / 2;
}

template <typename T>
void im2col(const T* x, int C, int H, int W, int K, int stride, int Ho, int Wo, int ph, int pw,
            T* col) {
  // col layout: (C*K*K) x (Ho*Wo)
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        T* row = col + ((static_cast<int64_t>(c) * K + ky) * K + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - ph + ky;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < Wo; ++ox) row[oy * Wo + ox] = T(0);
            continue;
          }
          const T* src = x + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride - pw + kx;
            row[oy * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const T* col, int C, int H, int W, int K, int stride, int Ho, int Wo, int ph,
                  int pw, T* x) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        const T* row = col + ((static_cast<int64_t>(c) * K + ky) * K + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - ph + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride - pw + kx;
            if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: (N,Cin,H,W), w: (Cout,Cin,K,K), b: (Cout). SAME padding, stride 1 or 2.
template <typename T>
Var conv2d_op(Tape<T>& tp, Var x, Var w, Var b, int stride) {
  const auto& xv = tp.value(x);
  const auto& wv = tp.value(w);
  const auto& bv = tp.value(b);
  if (xv.rank() != 4 || wv.rank() != 4) throw std::invalid_argument("conv2d: rank-4 expected");
  int N = xv.shape[0], Cin = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  int Cout = wv.shape[0], K = wv.shape[2];
  if (wv.shape[1] != Cin)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(Cin) +
                                " do not match kernel " + std::to_string(wv.shape[1]));
  if (wv.shape[3] != K || K % 2 == 0) throw std::invalid_argument("conv2d: kernel must be odd square");
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  if (bv.numel() != Cout) throw std::invalid_argument("conv2d: bias size mismatch");

  int Ho, Wo, ph, pw;
  detail::same_padding(H, K, stride, &Ho, &ph);
  detail::same_padding(W, K, stride, &Wo, &pw);

  Tensor<T> out({N, Cout, Ho, Wo});
  std::vector<T> col(static_cast<size_t>(Cin) * K * K * Ho * Wo);
  CMapM<T> Wm(wv.ptr(), Cout, Cin * K * K);
  for (int n = 0; n < N; ++n) {
    detail::im2col(xv.ptr() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W, K, stride, Ho, Wo,
                   ph, pw, col.data());
    CMapM<T> Col(col.data(), Cin * K * K, Ho * Wo);
    MapM<T> Y(out.ptr() + static_cast<int64_t>(n) * Cout * Ho * Wo, Cout, Ho * Wo);
    Y.noalias() = Wm * Col;
    for (int c = 0; c < Cout; ++c) Y.row(c).array() += bv[c];
  }

  bool ng = tp.needs_grad(x) || tp.needs_grad(w) || tp.needs_grad(b);
  return tp.make(
      std::move(out), ng,
      [&tp, x, w, b, stride, N, Cin, H, W, Cout, K, Ho, Wo, ph, pw, self = Var{(int)tp.size()}]() {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& xv2 = tp.value(x);
        const Tensor<T>& wv2 = tp.value(w);
        std::vector<T> col(static_cast<size_t>(Cin) * K * K * Ho * Wo);
        std::vector<T> dcol;
        bool need_x = tp.needs_grad(x);
        bool need_w = tp.needs_grad(w);
        bool need_b = tp.needs_grad(b);
        if (need_x) dcol.resize(col.size());
        CMapM<T> Wm(wv2.ptr(), Cout, Cin * K * K);
        for (int n = 0; n < N; ++n) {
          CMapM<T> dY(g.ptr() + static_cast<int64_t>(n) * Cout * Ho * Wo, Cout, Ho * Wo);
          if (need_w || need_x) {
            detail::im2col(xv2.ptr() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W, K, stride,
                           Ho, Wo, ph, pw, col.data());
          }
          if (need_w) {
            CMapM<T> Col(col.data(), Cin * K * K, Ho * Wo);
            MapM<T> dW(tp.grad(w).ptr(), Cout, Cin * K * K);
            dW.noalias() += dY * Col.transpose();
          }
          if (need_b) {
            Tensor<T>& db = tp.grad(b);
            for (int c = 0; c < Cout; ++c) db[c] += dY.row(c).sum();
          }
          if (need_x) {
            MapM<T> dCol(dcol.data(), Cin * K * K, Ho * Wo);
            dCol.noalias() = Wm.transpose() * dY;
            detail::col2im_accum(dcol.data(), Cin, H, W, K, stride, Ho, Wo, ph, pw,
                                 tp.grad(x).ptr() + static_cast<int64_t>(n) * Cin * H * W);
          }
        }
      });
}

// Per-(sample, channel) normalization over the spatial extent; no affine.
template <typename T>
Var instance_norm(Tape<T>& tp, Var x, T eps = T(1e-5)) {
  const auto& xv = tp.value(x);
  if (xv.rank() != 4) throw std::invalid_argument("instance_norm: rank-4 expected");
  int N = xv.shape[0], C = xv.shape[1];
  int64_t HW = static_cast<int64_t>(xv.shape[2]) * xv.shape[3];
  Tensor<T> out(xv.shape);
  auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * C);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* src = xv.ptr() + (static_cast<int64_t>(n) * C + c) * HW;
      T* dst = out.ptr() + (static_cast<int64_t>(n) * C + c) * HW;
      T mu = 0;
      for (int64_t i = 0; i < HW; ++i) mu += src[i];
      mu /= static_cast<T>(HW);
      T var = 0;
      for (int64_t i = 0; i < HW; ++i) var += (src[i] - mu) * (src[i] - mu);
      var /= static_cast<T>(HW);
      T is = T(1) / std::sqrt(var + eps);
      (*istd)[static_cast<size_t>(n) * C + c] = is;
      for (int64_t i = 0; i < HW; ++i) dst[i] = (src[i] - mu) * is;
    }
  }
  return tp.make(std::move(out), tp.needs_grad(x),
                 [&tp, x, N, C, HW, istd, self = Var{(int)tp.size()}]() {
                   const Tensor<T>& g = tp.grad(self);
                   const Tensor<T>& yv = tp.value(self);
                   tp.accum_if(x, [&](Tensor<T>& gx) {
                     for (int n = 0; n < N; ++n)
                       for (int c = 0; c < C; ++c) {
                         int64_t base = (static_cast<int64_t>(n) * C + c) * HW;
                         const T* gy = g.ptr() + base;
                         const T* y = yv.ptr() + base;
                         T* dx = gx.ptr() + base;
                         T mg = 0, mgy = 0;
                         for (int64_t i = 0; i < HW; ++i) {
                           mg += gy[i];
                           mgy += gy[i] * y[i];
                         }
                         mg /= static_cast<T>(HW);
                         mgy /= static_cast<T>(HW);
                         T is = (*istd)[static_cast<size_t>(n) * C + c];
                         for (int64_t i = 0; i < HW; ++i)
                           dx[i] += is * (gy[i] - mg - y[i] * mgy);
                       }
                   });
                 });
}

// Channelwise softmax of (N,C,H,W) over C.
template <typename T>
Var softmax_channels(Tape<T>& tp, Var x) {
  const auto& xv = tp.value(x);
  if (xv.rank() != 4) throw std::invalid_argument("softmax_channels: rank-4 expected");
  int N = xv.shape[0], C = xv.shape[1];
  int64_t HW = static_cast<int64_t>(xv.shape[2]) * xv.shape[3];
  Tensor<T> out(xv.shape);
  for (int n = 0; n < N; ++n) {
    const T* src = xv.ptr() + static_cast<int64_t>(n) * C * HW;
    T* dst = out.ptr() + static_cast<int64_t>(n) * C * HW;
    for (int64_t i = 0; i < HW; ++i) {
      T mx = src[i];
      for (int c = 1; c < C; ++c) mx = std::max(mx, src[c * HW + i]);
      T z = 0;
      for (int c = 0; c < C; ++c) {
        T e = std::exp(src[c * HW + i] - mx);
        dst[c * HW + i] = e;
        z += e;
      }
      for (int c = 0; c < C; ++c) dst[c * HW + i] /= z;
    }
  }
  return tp.make(std::move(out), tp.needs_grad(x),
                 [&tp, x, N, C, HW, self = Var{(int)tp.size()}]() {
                   const Tensor<T>& g = tp.grad(self);
                   const Tensor<T>& y = tp.value(self);
                   tp.accum_if(x, [&](Tensor<T>& gx) {
                     for (int n = 0; n < N; ++n) {
                       int64_t base = static_cast<int64_t>(n) * C * HW;
                       for (int64_t i = 0; i < HW; ++i) {
                         T dot = 0;
                         for (int c = 0; c < C; ++c)
                           dot += g.data[base + c * HW + i] * y.data[base + c * HW + i];
                         for (int c = 0; c < C; ++c)
                           gx.data[base + c * HW + i] +=
                               y.data[base + c * HW + i] * (g.data[base + c * HW + i] - dot);
                       }
                     }
                   });
                 });
}

// Per-pixel renormalization of channels to sum 1 (used after upsampling scores).
template <typename T>
Var normalize_channels(Tape<T>& tp, Var x, T eps = T(1e-12)) {
  const auto& xv = tp.value(x);
  if (xv.rank() != 4) throw std::invalid_argument("normalize_channels: rank-4 expected");
  int N = xv.shape[0], C = xv.shape[1];
  int64_t HW = static_cast<int64_t>(xv.shape[2]) * xv.shape[3];
  Tensor<T> out(xv.shape);
  for (int n = 0; n < N; ++n) {
    const T* src = xv.ptr() + static_cast<int64_t>(n) * C * HW;
    T* dst = out.ptr() + static_cast<int64_t>(n) * C * HW;
    for (int64_t i = 0; i < HW; ++i) {
      T z = eps;
      for (int c = 0; c < C; ++c) z += src[c * HW + i];
      for (int c = 0; c < C; ++c) dst[c * HW + i] = src[c * HW + i] / z;
    }
  }
  return tp.make(std::move(out), tp.needs_grad(x),
                 [&tp, x, N, C, HW, eps, self = Var{(int)tp.size()}]() {
                   const Tensor<T>& g = tp.grad(self);
                   const Tensor<T>& xv2 = tp.value(x);
                   tp.accum_if(x, [&](Tensor<T>& gx) {
                     for (int n = 0; n < N; ++n) {
                       int64_t base = static_cast<int64_t>(n) * C * HW;
                       for (int64_t i = 0; i < HW; ++i) {
                         T z = eps;
                         for (int c = 0; c < C; ++c) z += xv2.data[base + c * HW + i];
                         T dot = 0;
                         for (int c = 0; c < C; ++c)
                           dot += g.data[base + c * HW + i] * xv2.data[base + c * HW + i];
                         for (int c = 0; c < C; ++c)
                           gx.data[base + c * HW + i] +=
                               (g.data[base + c * HW + i] - dot / z) / z;
                       }
                     }
                   });
                 });
}

namespace detail {
struct LinW {
  int i0, i1;
  double w0, w1;
};
inline LinW lin_weights(int out_i, int out_n, int in_n) {
  LinW r;
  if (out_n == 1 || in_n == 1) {
    r.i0 = r.i1 = 0;
    r.w0 = 1.0;
    r.w1 = 0.0;
    return r;
  }
  double pos = static_cast<double>(out_i) * (in_n - 1) / (out_n - 1);
  r.i0 = static_cast<int>(pos);
  r.i1 = std::min(r.i0 + 1, in_n - 1);
  r.w1 = pos - r.i0;
  r.w0 = 1.0 - r.w1;
  return r;
}
}  // namespace detail

// Align-corners bilinear upsampling by an integer factor.
template <typename T>
Var upsample_bilinear(Tape<T>& tp, Var x, int factor) {
  const auto& xv = tp.value(x);
  if (xv.rank() != 4) throw std::invalid_argument("upsample_bilinear: rank-4 expected");
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor >= 1");
  if (factor == 1) return reshape(tp, x, xv.shape);
  int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  int Ho = H * factor, Wo = W * factor;
  Tensor<T> out({N, C, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = xv.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
      T* dst = out.ptr() + (static_cast<int64_t>(n) * C + c) * Ho * Wo;
      for (int oy = 0; oy < Ho; ++oy) {
        auto wy = detail::lin_weights(oy, Ho, H);
        for (int ox = 0; ox < Wo; ++ox) {
          auto wx = detail::lin_weights(ox, Wo, W);
          dst[oy * Wo + ox] = static_cast<T>(
              wy.w0 * (wx.w0 * src[wy.i0 * W + wx.i0] + wx.w1 * src[wy.i0 * W + wx.i1]) +
              wy.w1 * (wx.w0 * src[wy.i1 * W + wx.i0] + wx.w1 * src[wy.i1 * W + wx.i1]));
        }
      }
    }
  return tp.make(std::move(out), tp.needs_grad(x),
                 [&tp, x, N, C, H, W, Ho, Wo, self = Var{(int)tp.size()}]() {
                   const Tensor<T>& g = tp.grad(self);
                   tp.accum_if(x, [&](Tensor<T>& gx) {
                     for (int n = 0; n < N; ++n)
                       for (int c = 0; c < C; ++c) {
                         const T* gs = g.ptr() + (static_cast<int64_t>(n) * C + c) * Ho * Wo;
                         T* gd = gx.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
                         for (int oy = 0; oy < Ho; ++oy) {
                           auto wy = detail::lin_weights(oy, Ho, H);
                           for (int ox = 0; ox < Wo; ++ox) {
                             auto wx = detail::lin_weights(ox, Wo, W);
                             T gv = gs[oy * Wo + ox];
                             gd[wy.i0 * W + wx.i0] += static_cast<T>(wy.w0 * wx.w0) * gv;
                             gd[wy.i0 * W + wx.i1] += static_cast<T>(wy.w0 * wx.w1) * gv;
                             gd[wy.i1 * W + wx.i0] += static_cast<T>(wy.w1 * wx.w0) * gv;
                             gd[wy.i1 * W + wx.i1] += static_cast<T>(wy.w1 * wx.w1) * gv;
                           }
                         }
                       }
                   });
                 });
}

// 2D matrix product.
template <typename T>
Var matmul(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
    throw std::invalid_argument("matmul: shape mismatch");
  int M = av.shape[0], K = av.shape[1], N = bv.shape[1];
  Tensor<T> out({M, N});
  CMapM<T> A(av.ptr(), M, K);
  CMapM<T> B(bv.ptr(), K, N);
  MapM<T>(out.ptr(), M, N).noalias() = A * B;
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.make(std::move(out), ng, [&tp, a, b, M, K, N, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    CMapM<T> G(g.ptr(), M, N);
    tp.accum_if(a, [&](Tensor<T>& ga) {
      CMapM<T> B(tp.value(b).ptr(), K, N);
      MapM<T>(ga.ptr(), M, K).noalias() += G * B.transpose();
    });
    tp.accum_if(b, [&](Tensor<T>& gb) {
      CMapM<T> A(tp.value(a).ptr(), M, K);
      MapM<T>(gb.ptr(), K, N).noalias() += A.transpose() * G;
    });
  });
}

// Attention fusion over multiple sources. q_src[j], a_src[j]: (Cq,Ns)/(Ca,Ns)
// matrices; q_tgt: (Cq,Nt). Scores (q_j)^T q_tgt / sqrt(Cq) are softmaxed
// jointly over (source, source position) per target position, then used to
// blend the a_src columns. With normalize=false the raw unnormalized scores
// are used as blend weights instead.
template <typename T>
Var attention_fuse(Tape<T>& tp, const std::vector<Var>& q_src, Var q_tgt,
                   const std::vector<Var>& a_src, bool normalize = true) {
  size_t b = q_src.size();
  if (b == 0 || a_src.size() != b) throw std::invalid_argument("attention_fuse: empty sources");
  const auto& qt = tp.value(q_tgt);
  int Cq = qt.shape[0], Nt = qt.shape[1];
  int Ns = tp.value(q_src[0]).shape[1];
  int Ca = tp.value(a_src[0]).shape[0];
  bool ng = tp.needs_grad(q_tgt);
  for (size_t j = 0; j < b; ++j) {
    const auto& qj = tp.value(q_src[j]);
    const auto& aj = tp.value(a_src[j]);
    if (qj.shape[0] != Cq || qj.shape[1] != Ns || aj.shape[0] != Ca || aj.shape[1] != Ns)
      throw std::invalid_argument("attention_fuse: source shape mismatch");
    ng = ng || tp.needs_grad(q_src[j]) || tp.needs_grad(a_src[j]);
  }
  T sc = T(1) / std::sqrt(static_cast<T>(Cq));

  // weights[j]: (Ns,Nt), cached for the backward pass
  auto weights = std::make_shared<std::vector<Tensor<T>>>();
  weights->reserve(b);
  for (size_t j = 0; j < b; ++j) {
    Tensor<T> Sj({Ns, Nt});
    CMapM<T> Qj(tp.value(q_src[j]).ptr(), Cq, Ns);
    CMapM<T> Qt(qt.ptr(), Cq, Nt);
    MapM<T>(Sj.ptr(), Ns, Nt).noalias() = (Qj.transpose() * Qt) * sc;
    weights->push_back(std::move(Sj));
  }
  if (normalize) {
    for (int t = 0; t < Nt; ++t) {
      T mx = -std::numeric_limits<T>::infinity();
      for (size_t j = 0; j < b; ++j)
        for (int s = 0; s < Ns; ++s) mx = std::max(mx, (*weights)[j][s * Nt + t]);
      T z = 0;
      for (size_t j = 0; j < b; ++j)
        for (int s = 0; s < Ns; ++s) {
          T e = std::exp((*weights)[j][s * Nt + t] - mx);
          (*weights)[j][s * Nt + t] = e;
          z += e;
        }
      for (size_t j = 0; j < b; ++j)
        for (int s = 0; s < Ns; ++s) (*weights)[j][s * Nt + t] /= z;
    }
  }

  Tensor<T> out({Ca, Nt});
  MapM<T> O(out.ptr(), Ca, Nt);
  O.setZero();
  for (size_t j = 0; j < b; ++j) {
    CMapM<T> Aj(tp.value(a_src[j]).ptr(), Ca, Ns);
    CMapM<T> Wj((*weights)[j].ptr(), Ns, Nt);
    O.noalias() += Aj * Wj;
  }

  return tp.make(
      std::move(out), ng,
      [&tp, q_src, q_tgt, a_src, weights, normalize, b, Cq, Ca, Ns, Nt, sc,
       self = Var{(int)tp.size()}]() {
        const Tensor<T>& g = tp.grad(self);
        CMapM<T> G(g.ptr(), Ca, Nt);
        // dW_j = a_j^T G
        std::vector<Tensor<T>> dW(b);
        for (size_t j = 0; j < b; ++j) {
          dW[j] = Tensor<T>({Ns, Nt});
          CMapM<T> Aj(tp.value(a_src[j]).ptr(), Ca, Ns);
          MapM<T>(dW[j].ptr(), Ns, Nt).noalias() = Aj.transpose() * G;
          tp.accum_if(a_src[j], [&](Tensor<T>& gaj) {
            CMapM<T> Wj((*weights)[j].ptr(), Ns, Nt);
            MapM<T>(gaj.ptr(), Ca, Ns).noalias() += G * Wj.transpose();
          });
        }
        if (normalize) {
          // joint softmax backward per target column
          for (int t = 0; t < Nt; ++t) {
            T dot = 0;
            for (size_t j = 0; j < b; ++j)
              for (int s = 0; s < Ns; ++s)
                dot += (*weights)[j][s * Nt + t] * dW[j][s * Nt + t];
            for (size_t j = 0; j < b; ++j)
              for (int s = 0; s < Ns; ++s)
                dW[j][s * Nt + t] = (*weights)[j][s * Nt + t] * (dW[j][s * Nt + t] - dot);
          }
        }
        // scores S_j = sc * q_j^T q_tgt
        for (size_t j = 0; j < b; ++j) {
          CMapM<T> dS(dW[j].ptr(), Ns, Nt);
          tp.accum_if(q_src[j], [&](Tensor<T>& gqj) {
            CMapM<T> Qt(tp.value(q_tgt).ptr(), Cq, Nt);
            MapM<T>(gqj.ptr(), Cq, Ns).noalias() += (Qt * dS.transpose()) * sc;
          });
          tp.accum_if(q_tgt, [&](Tensor<T>& gqt) {
            CMapM<T> Qj(tp.value(q_src[j]).ptr(), Cq, Ns);
            MapM<T>(gqt.ptr(), Cq, Nt).noalias() += (Qj * dS) * sc;
          });
        }
      });
}

// Weighted pixelwise cross-entropy from logits against integer labels.
// logits: (N,K,H,W); labels, weights: (N,H,W). Normalized by the weight mass.
template <typename T>
Var cross_entropy_logits(Tape<T>& tp, Var logits, const Tensor<int>& labels,
                         const Tensor<T>& weights) {
  const auto& lv = tp.value(logits);
  if (lv.rank() != 4) throw std::invalid_argument("cross_entropy_logits: rank-4 expected");
  int N = lv.shape[0], K = lv.shape[1];
  int64_t HW = static_cast<int64_t>(lv.shape[2]) * lv.shape[3];
  if (labels.numel() != N * HW || weights.numel() != N * HW)
    throw std::invalid_argument("cross_entropy_logits: label/weight shape mismatch");

  auto probs = std::make_shared<Tensor<T>>(lv.shape);
  T wsum = 0;
  for (T w : weights.data) wsum += w;
  T norm = wsum > T(0) ? T(1) / wsum : T(0);

  T loss = 0;
  for (int n = 0; n < N; ++n) {
    const T* src = lv.ptr() + static_cast<int64_t>(n) * K * HW;
    T* p = probs->ptr() + static_cast<int64_t>(n) * K * HW;
    for (int64_t i = 0; i < HW; ++i) {
      T mx = src[i];
      for (int c = 1; c < K; ++c) mx = std::max(mx, src[c * HW + i]);
      T z = 0;
      for (int c = 0; c < K; ++c) {
        T e = std::exp(src[c * HW + i] - mx);
        p[c * HW + i] = e;
        z += e;
      }
      for (int c = 0; c < K; ++c) p[c * HW + i] /= z;
      T w = weights.data[n * HW + i];
      if (w != T(0)) {
        int lab = labels.data[n * HW + i];
        T pl = std::max(p[lab * HW + i], T(1e-12));
        loss -= w * std::log(pl);
      }
    }
  }
  Tensor<T> out({1});
  out[0] = loss * norm;
  auto labs = std::make_shared<Tensor<int>>(labels);
  auto wts = std::make_shared<Tensor<T>>(weights);
  return tp.make(std::move(out), tp.needs_grad(logits),
                 [&tp, logits, probs, labs, wts, norm, N, K, HW, self = Var{(int)tp.size()}]() {
                   T g = tp.grad(self)[0] * norm;
                   tp.accum_if(logits, [&](Tensor<T>& gl) {
                     for (int n = 0; n < N; ++n) {
                       const T* p = probs->ptr() + static_cast<int64_t>(n) * K * HW;
                       T* gd = gl.ptr() + static_cast<int64_t>(n) * K * HW;
                       for (int64_t i = 0; i < HW; ++i) {
                         T w = wts->data[n * HW + i];
                         if (w == T(0)) continue;
                         int lab = labs->data[n * HW + i];
                         for (int c = 0; c < K; ++c) {
                           T delta = (c == lab) ? T(1) : T(0);
                           gd[c * HW + i] += g * w * (p[c * HW + i] - delta);
                         }
                       }
                     }
                   });
                 });
}

// Mean binary cross-entropy of probabilities p against constant targets, with
// probabilities clamped to [eps, 1-eps]; clamped entries get zero gradient.
template <typename T>
Var bce_mean(Tape<T>& tp, Var p, const Tensor<T>& target, T eps = T(1e-6)) {
  const auto& pv = tp.value(p);
  if (pv.numel() != target.numel()) throw std::invalid_argument("bce_mean: shape mismatch");
  int64_t n = pv.numel();
  T loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    T pc = std::min(std::max(pv[i], eps), T(1) - eps);
    T t = target[i];
    loss -= t * std::log(pc) + (T(1) - t) * std::log(T(1) - pc);
  }
  Tensor<T> out({1});
  out[0] = loss / static_cast<T>(n);
  auto tgt = std::make_shared<Tensor<T>>(target);
  return tp.make(std::move(out), tp.needs_grad(p),
                 [&tp, p, tgt, eps, n, self = Var{(int)tp.size()}]() {
                   T g = tp.grad(self)[0] / static_cast<T>(n);
                   const Tensor<T>& pv2 = tp.value(p);
                   tp.accum_if(p, [&](Tensor<T>& gp) {
                     for (int64_t i = 0; i < n; ++i) {
                       if (pv2[i] <= eps || pv2[i] >= T(1) - eps) continue;
                       T t = tgt->data[i];
                       gp[i] += g * (-t / pv2[i] + (T(1) - t) / (T(1) - pv2[i]));
                     }
                   });
                 });
}

}  // namespace motra
