#pragma once

#include "motra/ops.hpp"

namespace motra {

namespace detail {
template <typename T>
struct Axis {
  int i0, i1;
  T frac;  // weight of i1
};
// Align-corners mapping of a clamped [0,1] coordinate onto texel index space.
template <typename T>
inline Axis<T> locate(T u, int n) {
  T uc = std::min(std::max(u, T(0)), T(1));
  T x = uc * static_cast<T>(n - 1);
  int i0 = static_cast<int>(x);
  if (i0 > n - 2) i0 = std::max(n - 2, 0);
  Axis<T> a;
  a.i0 = i0;
  a.i1 = std::min(i0 + 1, n - 1);
  a.frac = x - static_cast<T>(i0);
  return a;
}
}  // namespace detail

// Bilinear lookup of one texel; `tex` is a single-channel (H_T,W_T) plane
// addressed by u (along width) and v (along height), both in [0,1].
template <typename T>
inline T sample_bilinear(const T* tex, int Ht, int Wt, T u, T v) {
  auto ax = detail::locate(u, Wt);
  auto ay = detail::locate(v, Ht);
  T top = tex[ay.i0 * Wt + ax.i0] * (T(1) - ax.frac) + tex[ay.i0 * Wt + ax.i1] * ax.frac;
  T bot = tex[ay.i1 * Wt + ax.i0] * (T(1) - ax.frac) + tex[ay.i1 * Wt + ax.i1] * ax.frac;
  return top * (T(1) - ay.frac) + bot * ay.frac;
}

// R^k[x,y] = T^k[U_k[x,y], V_k[x,y]] with bilinear interpolation.
/// tex: (n,3,Ht,Wt); uv: (B,2n,H,W) -> out (B, n*3, H, W).
// Gradients flow into both the atlas and the coordinates; the coordinate
// gradient is zero on an axis wherever the clamp to [0,1] is active.
template <typename T>
Var render_parts(Tape<T>& tp, Var tex, Var uv) {
  const auto& tv = tp.value(tex);
  const auto& cv = tp.value(uv);
  if (tv.rank() != 4 || cv.rank() != 4) throw std::invalid_argument("render_parts: rank-4");
  int n = tv.shape[0], Ht = tv.shape[2], Wt = tv.shape[3];
  if (tv.shape[1] != 3) throw std::invalid_argument("render_parts: atlas must be RGB");
  int B = cv.shape[0], H = cv.shape[2], W = cv.shape[3];
  if (cv.shape[1] != 2 * n) throw std::invalid_argument("render_parts: uv channels != 2n");

  Tensor<T> out({B, n * 3, H, W});
  int64_t plane = static_cast<int64_t>(H) * W;
  int64_t tplane = static_cast<int64_t>(Ht) * Wt;
  for (int bi = 0; bi < B; ++bi)
    for (int k = 0; k < n; ++k) {
      const T* U = cv.ptr() + (static_cast<int64_t>(bi) * 2 * n + 2 * k) * plane;
      const T* V = U + plane;
      for (int c = 0; c < 3; ++c) {
        const T* tp_ = tv.ptr() + (static_cast<int64_t>(k) * 3 + c) * tplane;
        T* dst = out.ptr() + (static_cast<int64_t>(bi) * n * 3 + k * 3 + c) * plane;
        for (int64_t i = 0; i < plane; ++i) dst[i] = sample_bilinear(tp_, Ht, Wt, U[i], V[i]);
      }
    }

  bool ng = tp.needs_grad(tex) || tp.needs_grad(uv);
  return tp.make(std::move(out), ng,
                 [&tp, tex, uv, n, Ht, Wt, B, H, W, plane, tplane, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& tv2 = tp.value(tex);
    const Tensor<T>& cv2 = tp.value(uv);
    bool need_t = tp.needs_grad(tex);
    bool need_c = tp.needs_grad(uv);
    Tensor<T>* gt = need_t ? &tp.grad(tex) : nullptr;
    Tensor<T>* gc = need_c ? &tp.grad(uv) : nullptr;
    for (int bi = 0; bi < B; ++bi)
      for (int k = 0; k < n; ++k) {
        const T* U = cv2.ptr() + (static_cast<int64_t>(bi) * 2 * n + 2 * k) * plane;
        const T* V = U + plane;
        T* gU = need_c ? gc->ptr() + (static_cast<int64_t>(bi) * 2 * n + 2 * k) * plane : nullptr;
        T* gV = need_c ? gU + plane : nullptr;
        for (int64_t i = 0; i < plane; ++i) {
          auto ax = detail::locate(U[i], Wt);
          auto ay = detail::locate(V[i], Ht);
          bool u_in = U[i] > T(0) && U[i] < T(1);
          bool v_in = V[i] > T(0) && V[i] < T(1);
          for (int c = 0; c < 3; ++c) {
            T gv = g.data[((static_cast<int64_t>(bi) * n * 3 + k * 3 + c)) * plane + i];
            if (gv == T(0)) continue;
            const T* tpp = tv2.ptr() + (static_cast<int64_t>(k) * 3 + c) * tplane;
            T t00 = tpp[ay.i0 * Wt + ax.i0], t01 = tpp[ay.i0 * Wt + ax.i1];
            T t10 = tpp[ay.i1 * Wt + ax.i0], t11 = tpp[ay.i1 * Wt + ax.i1];
            if (need_t) {
              T* gtp = gt->ptr() + (static_cast<int64_t>(k) * 3 + c) * tplane;
              gtp[ay.i0 * Wt + ax.i0] += gv * (T(1) - ax.frac) * (T(1) - ay.frac);
              gtp[ay.i0 * Wt + ax.i1] += gv * ax.frac * (T(1) - ay.frac);
              gtp[ay.i1 * Wt + ax.i0] += gv * (T(1) - ax.frac) * ay.frac;
              gtp[ay.i1 * Wt + ax.i1] += gv * ax.frac * ay.frac;
            }
            if (need_c) {
              if (u_in) {
                T dx = (t01 - t00) * (T(1) - ay.frac) + (t11 - t10) * ay.frac;
                gU[i] += gv * dx * static_cast<T>(Wt - 1);
              }
              if (v_in) {
                T dy = (t10 - t00) * (T(1) - ax.frac) + (t11 - t01) * ax.frac;
                gV[i] += gv * dy * static_cast<T>(Ht - 1);
              }
            }
          }
        }
      }
  });
}

// Foreground blend: fg = sum_k S^k * R^k, background channel excluded.
// parts: (B,n*3,H,W); scores: (B,n+1,H,W) -> (B,3,H,W).
template <typename T>
Var compose_parts(Tape<T>& tp, Var parts, Var scores) {
  const auto& rv = tp.value(parts);
  const auto& sv = tp.value(scores);
  int B = rv.shape[0], H = rv.shape[2], W = rv.shape[3];
  int n = rv.shape[1] / 3;
  if (rv.shape[1] != n * 3 || sv.shape[1] != n + 1 || sv.shape[0] != B || sv.shape[2] != H ||
      sv.shape[3] != W)
    throw std::invalid_argument("compose_parts: shape mismatch");
  int64_t plane = static_cast<int64_t>(H) * W;
  Tensor<T> out({B, 3, H, W});
  for (int bi = 0; bi < B; ++bi)
    for (int k = 0; k < n; ++k) {
      const T* S = sv.ptr() + (static_cast<int64_t>(bi) * (n + 1) + k) * plane;
      for (int c = 0; c < 3; ++c) {
        const T* R = rv.ptr() + (static_cast<int64_t>(bi) * n * 3 + k * 3 + c) * plane;
        T* O = out.ptr() + (static_cast<int64_t>(bi) * 3 + c) * plane;
        for (int64_t i = 0; i < plane; ++i) O[i] += S[i] * R[i];
      }
    }
  bool ng = tp.needs_grad(parts) || tp.needs_grad(scores);
  return tp.make(std::move(out), ng,
                 [&tp, parts, scores, B, n, plane, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& rv2 = tp.value(parts);
    const Tensor<T>& sv2 = tp.value(scores);
    tp.accum_if(parts, [&](Tensor<T>& gr) {
      for (int bi = 0; bi < B; ++bi)
        for (int k = 0; k < n; ++k) {
          const T* S = sv2.ptr() + (static_cast<int64_t>(bi) * (n + 1) + k) * plane;
          for (int c = 0; c < 3; ++c) {
            const T* G = g.ptr() + (static_cast<int64_t>(bi) * 3 + c) * plane;
            T* GR = gr.ptr() + (static_cast<int64_t>(bi) * n * 3 + k * 3 + c) * plane;
            for (int64_t i = 0; i < plane; ++i) GR[i] += S[i] * G[i];
          }
        }
    });
    tp.accum_if(scores, [&](Tensor<T>& gs) {
      for (int bi = 0; bi < B; ++bi)
        for (int k = 0; k < n; ++k) {
          T* GS = gs.ptr() + (static_cast<int64_t>(bi) * (n + 1) + k) * plane;
          for (int c = 0; c < 3; ++c) {
            const T* G = g.ptr() + (static_cast<int64_t>(bi) * 3 + c) * plane;
            const T* R = rv2.ptr() + (static_cast<int64_t>(bi) * n * 3 + k * 3 + c) * plane;
            for (int64_t i = 0; i < plane; ++i) GS[i] += R[i] * G[i];
          }
        }
    });
  });
}

// Background compositing: out = fg + S^{n+1} * B. The foreground already
// carries weight mass 1 - S^{n+1}. bg: (3,H,W), shared across the batch.
template <typename T>
Var composite_bg(Tape<T>& tp, Var fg, Var scores, Var bg) {
  const auto& fv = tp.value(fg);
  const auto& sv = tp.value(scores);
  const auto& bv = tp.value(bg);
  int B = fv.shape[0], H = fv.shape[2], W = fv.shape[3];
  int n = sv.shape[1] - 1;
  if (bv.rank() != 3 || bv.shape[0] != 3 || bv.shape[1] != H || bv.shape[2] != W)
    throw std::invalid_argument("composite_bg: background must be (3,H,W)");
  int64_t plane = static_cast<int64_t>(H) * W;
  Tensor<T> out = fv;
  for (int bi = 0; bi < B; ++bi) {
    const T* S = sv.ptr() + (static_cast<int64_t>(bi) * (n + 1) + n) * plane;
    for (int c = 0; c < 3; ++c) {
      const T* Bg = bv.ptr() + static_cast<int64_t>(c) * plane;
      T* O = out.ptr() + (static_cast<int64_t>(bi) * 3 + c) * plane;
      for (int64_t i = 0; i < plane; ++i) O[i] += S[i] * Bg[i];
    }
  }
  bool ng = tp.needs_grad(fg) || tp.needs_grad(scores) || tp.needs_grad(bg);
  return tp.make(std::move(out), ng,
                 [&tp, fg, scores, bg, B, n, plane, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& sv2 = tp.value(scores);
    const Tensor<T>& bv2 = tp.value(bg);
    tp.accum_if(fg, [&](Tensor<T>& gf) { gf.add_(g); });
    tp.accum_if(scores, [&](Tensor<T>& gs) {
      for (int bi = 0; bi < B; ++bi) {
        T* GS = gs.ptr() + (static_cast<int64_t>(bi) * (n + 1) + n) * plane;
        for (int c = 0; c < 3; ++c) {
          const T* G = g.ptr() + (static_cast<int64_t>(bi) * 3 + c) * plane;
          const T* Bg = bv2.ptr() + static_cast<int64_t>(c) * plane;
          for (int64_t i = 0; i < plane; ++i) GS[i] += Bg[i] * G[i];
        }
      }
    });
    tp.accum_if(bg, [&](Tensor<T>& gb) {
      for (int bi = 0; bi < B; ++bi) {
        const T* S = sv2.ptr() + (static_cast<int64_t>(bi) * (n + 1) + n) * plane;
        for (int c = 0; c < 3; ++c) {
          const T* G = g.ptr() + (static_cast<int64_t>(bi) * 3 + c) * plane;
          T* GB = gb.ptr() + static_cast<int64_t>(c) * plane;
          for (int64_t i = 0; i < plane; ++i) GB[i] += S[i] * G[i];
        }
      }
    });
  });
}

// Full render: composite(compose(render_parts(T,C), S), S, B).
template <typename T>
Var render(Tape<T>& tp, Var tex, Var uv, Var scores, Var bg) {
  Var parts = render_parts(tp, tex, uv);
  Var fg = compose_parts(tp, parts, scores);
  return composite_bg(tp, fg, scores, bg);
}

// Foreground-only render: the weighted part blend without the background term.
template <typename T>
Var render_fg(Tape<T>& tp, Var tex, Var uv, Var scores) {
  return compose_parts(tp, render_parts(tp, tex, uv), scores);
}

// HD render: UV map, scores and background are bilinearly upsampled, scores
// renormalized per pixel, then rendered against the (possibly larger) atlas.
template <typename T>
Var render_hd(Tape<T>& tp, Var tex, Var uv, Var scores, Var bg, int scale) {
  if (scale < 1) throw std::invalid_argument("render_hd: scale >= 1");
  if (scale == 1) return render(tp, tex, uv, scores, bg);
  Var uv_hd = upsample_bilinear(tp, uv, scale);
  Var s_hd = normalize_channels(tp, upsample_bilinear(tp, scores, scale));
  const auto& bv = tp.value(bg);
  Var bg4 = reshape(tp, bg, {1, bv.shape[0], bv.shape[1], bv.shape[2]});
  Var bg_hd = upsample_bilinear(tp, bg4, scale);
  const auto& bhv = tp.value(bg_hd);
  Var bg3 = reshape(tp, bg_hd, {bhv.shape[1], bhv.shape[2], bhv.shape[3]});
  return render(tp, tex, uv_hd, s_hd, bg3);
}

}  // namespace motra
