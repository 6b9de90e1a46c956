#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "motra/netblocks.hpp"

namespace motra {

struct LossWeights {
  double lambda_I = 1.0;
  double lambda_M = 1.0;
  double lambda_RT = 1.0;
  double lambda_RC = 20.0;
  double lambda_RM = 0.8;
};

// Per-term values plus the weighted total; `total_var` carries the same sum
// on the tape for the backward pass.
struct LossReport {
  std::map<std::string, double> terms;
  double total = 0;
  Var total_var{-1};

  nlohmann::json to_json() const {
    nlohmann::json j{{"total", total}};
    for (const auto& [k, v] : terms) j[k] = v;
    return j;
  }
};

// Frozen seeded conv pyramid standing in for a pretrained perceptual net:
// stride-2 conv + relu per level, features taken after every level.
template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor(int in_channels, uint64_t seed, std::vector<int> channels = {8, 16, 32, 64},
                   int kernel = 3)
      : channels_(std::move(channels)) {
    Rng rng(Rng::mix(seed ^ 0xfea7ULL));
    int cin = in_channels;
    for (int c : channels_) {
      Tensor<T> w({c, cin, kernel, kernel});
      double bound = std::sqrt(6.0 / (static_cast<double>(cin) * kernel * kernel));
      rng.fill_uniform(w, -bound, bound);
      w_.push_back(std::move(w));
      b_.push_back(Tensor<T>({c}));
      cin = c;
    }
  }

  int levels() const { return static_cast<int>(channels_.size()); }

  std::vector<Var> features(Tape<T>& tp, Var x) const {
    std::vector<Var> out;
    for (size_t i = 0; i < w_.size(); ++i) {
      x = relu(tp, conv2d_op(tp, x, tp.constant(w_[i]), tp.constant(b_[i]), 2));
      out.push_back(x);
    }
    return out;
  }

 private:
  std::vector<int> channels_;
  std::vector<Tensor<T>> w_, b_;
};

namespace lossdetail {

// mean_{i: w_i != 0} w_i |x_i - t_i| with the weight mass detached; zero
// weight mass yields a constant zero loss.
template <typename T>
Var l1_weighted(Tape<T>& tp, Var x, const Tensor<T>& target, const Tensor<T>& weights) {
  const auto& xv = tp.value(x);
  check_shape(xv, target.shape, "l1_weighted target");
  check_shape(xv, weights.shape, "l1_weighted weights");
  T mass = 0;
  for (T w : weights.data) mass += w;
  if (mass <= T(0)) {
    Tensor<T> zero({1});
    return tp.constant(std::move(zero));
  }
  Var d = abs_val(tp, sub(tp, x, tp.constant(target)));
  return scale(tp, sum(tp, mul(tp, d, tp.constant(weights))), T(1) / mass);
}

template <typename T>
Var l1_mean(Tape<T>& tp, Var x, const Tensor<T>& target) {
  const auto& xv = tp.value(x);
  check_shape(xv, target.shape, "l1_mean target");
  return mean(tp, abs_val(tp, sub(tp, x, tp.constant(target))));
}

template <typename T>
Tensor<int> argmax_channels(const Tensor<T>& s) {
  int N = s.shape[0], K = s.shape[1];
  int64_t HW = static_cast<int64_t>(s.shape[2]) * s.shape[3];
  Tensor<int> lab({N, s.shape[2], s.shape[3]});
  for (int n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      int best = 0;
      T bv = s.data[static_cast<int64_t>(n) * K * HW + i];
      for (int k = 1; k < K; ++k) {
        T v = s.data[(static_cast<int64_t>(n) * K + k) * HW + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      lab.data[n * HW + i] = best;
    }
  return lab;
}

}  // namespace lossdetail

// Initialization losses against the oracle geometry: masked L1 on the UV map
// (weights = oracle part scores, replicated over the two UV channels of each
// part) and mean pixelwise cross-entropy of the score logits.
template <typename T>
std::pair<Var, Var> loss_init_geometry(Tape<T>& tp, Var coords, Var score_logits,
                                       const Tensor<T>& c_star, const Tensor<T>& s_star) {
  const auto& cv = tp.value(coords);
  check_shape(cv, c_star.shape, "loss_init_geometry C*");
  check_shape(tp.value(score_logits), s_star.shape, "loss_init_geometry S*");
  int B = cv.shape[0], n2 = cv.shape[1], H = cv.shape[2], W = cv.shape[3];
  int n = n2 / 2;
  int64_t HW = static_cast<int64_t>(H) * W;

  Tensor<T> w(cv.shape);
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < n; ++k)
      for (int64_t i = 0; i < HW; ++i) {
        T s = s_star.data[(static_cast<int64_t>(b) * (n + 1) + k) * HW + i];
        w.data[(static_cast<int64_t>(b) * n2 + 2 * k) * HW + i] = s;
        w.data[(static_cast<int64_t>(b) * n2 + 2 * k + 1) * HW + i] = s;
      }
  Var lc = lossdetail::l1_weighted(tp, coords, c_star, w);

  Tensor<T> ones({B, H, W});
  ones.fill(T(1));
  Var ls = cross_entropy_logits(tp, score_logits, lossdetail::argmax_channels(s_star), ones);
  return {lc, ls};
}

// Visible-texel L1 between the generated atlas and each partial texture,
// normalized by the visible element count. tex: (1,3n,H_T,W_T) on the tape;
// partial atlases (n,3,H_T,W_T) with sigmas (n,H_T,W_T).
template <typename T>
Var loss_init_texture(Tape<T>& tp, Var tex, const std::vector<Tensor<T>>& partial_atlases,
                      const std::vector<Tensor<T>>& sigmas, bool* warn_empty = nullptr) {
  if (partial_atlases.empty() || partial_atlases.size() != sigmas.size())
    throw std::invalid_argument("loss_init_texture: need matching nonempty partials");
  if (warn_empty) {
    T mass = 0;
    for (const auto& s : sigmas) mass += s.sum();
    *warn_empty = (mass <= T(0));
  }
  const auto& xv = tp.value(tex);
  int n = xv.shape[1] / 3, h = xv.shape[2], wdt = xv.shape[3];
  int64_t HW = static_cast<int64_t>(h) * wdt;

  // single fused target/weight pair: stack partials along dim0
  size_t b = partial_atlases.size();
  Tensor<T> target({static_cast<int>(b), 3 * n, h, wdt});
  Tensor<T> weight(target.shape);
  for (size_t j = 0; j < b; ++j) {
    check_shape(partial_atlases[j], {n, 3, h, wdt}, "loss_init_texture partial");
    check_shape(sigmas[j], {n, h, wdt}, "loss_init_texture sigma");
    for (int k = 0; k < n; ++k)
      for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < HW; ++i) {
          int64_t dst = ((static_cast<int64_t>(j) * n + k) * 3 + c) * HW + i;
          target.data[dst] = partial_atlases[j].data[(static_cast<int64_t>(k) * 3 + c) * HW + i];
          weight.data[dst] = sigmas[j].data[k * HW + i];
        }
  }
  std::vector<Var> reps(b, tex);
  Var stacked = concat_dim0(tp, reps);
  return lossdetail::l1_weighted(tp, stacked, target, weight);
}

// L1 pixel term plus perceptual feature terms, every term mean-normalized.
// With a mask m the comparison is rendered vs m * target (foreground path);
// without it the full frames are compared.
template <typename T>
Var image_loss(Tape<T>& tp, Var rendered, const Tensor<T>& target,
               std::type_identity_t<const Tensor<T>*> mask, const FeatureExtractor<T>& fx) {
  const auto& rv = tp.value(rendered);
  check_shape(rv, target.shape, "image_loss target");
  Tensor<T> tgt = target;
  if (mask) {
    int B = rv.shape[0];
    int64_t HW = static_cast<int64_t>(rv.shape[2]) * rv.shape[3];
    check_shape(*mask, {B, 1, rv.shape[2], rv.shape[3]}, "image_loss mask");
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < HW; ++i)
          tgt.data[(static_cast<int64_t>(b) * 3 + c) * HW + i] *= mask->data[b * HW + i];
  }
  Var loss = lossdetail::l1_mean(tp, rendered, tgt);
  Tape<T> ref;  // target features are constants; compute them off-tape
  auto tgt_feats = fx.features(ref, ref.constant(tgt));
  auto feats = fx.features(tp, rendered);
  for (size_t v = 0; v < feats.size(); ++v)
    loss = add(tp, loss, lossdetail::l1_mean(tp, feats[v], ref.value(tgt_feats[v])));
  return loss;
}

// BCE between the predicted background score and the oracle background mask.
template <typename T>
Var mask_loss(Tape<T>& tp, Var scores, const Tensor<T>& fg_mask) {
  const auto& sv = tp.value(scores);
  int n = sv.shape[1] - 1;
  check_shape(fg_mask, {sv.shape[0], 1, sv.shape[2], sv.shape[3]}, "mask_loss mask");
  Tensor<T> bg_target = fg_mask;
  for (auto& v : bg_target.data) v = T(1) - v;
  return bce_mean(tp, slice_channels(tp, scores, n, n + 1), bg_target);
}

// Multi-video regularizers anchored at the oracle geometry: L_RC weights the
// UV deviation by the *predicted* soft scores; L_RM is cross-entropy against
// the oracle parts restricted to oracle-foreground pixels.
template <typename T>
Var reg_coord_loss(Tape<T>& tp, Var coords, Var scores, const Tensor<T>& c_star) {
  const auto& cv = tp.value(coords);
  const auto& sv = tp.value(scores);
  check_shape(cv, c_star.shape, "reg_coord_loss C*");
  int B = cv.shape[0], n = cv.shape[1] / 2, H = cv.shape[2], W = cv.shape[3];
  check_shape(sv, {B, sv.shape[1], H, W}, "reg_coord_loss scores");
  if (sv.shape[1] < n) throw std::invalid_argument("reg_coord_loss: too few score channels");
  int64_t HW = static_cast<int64_t>(H) * W;
  int Ks = sv.shape[1];

  // fused N/M with N = Σ s_k (|du|+|dv|), M = 2 Σ s_k so the score-mass
  // normalization keeps exact gradients w.r.t. both coords and scores
  T num = 0, mass = 0;
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < n; ++k)
      for (int64_t i = 0; i < HW; ++i) {
        T s = sv.data[(static_cast<int64_t>(b) * Ks + k) * HW + i];
        int64_t cu = (static_cast<int64_t>(b) * 2 * n + 2 * k) * HW + i;
        num += s * (std::abs(cv.data[cu] - c_star.data[cu]) +
                    std::abs(cv.data[cu + HW] - c_star.data[cu + HW]));
        mass += 2 * s;
      }
  if (mass <= T(0)) return tp.constant(Tensor<T>({1}));

  Tensor<T> out({1});
  out[0] = num / mass;
  auto cs = std::make_shared<Tensor<T>>(c_star);
  bool ng = tp.needs_grad(coords) || tp.needs_grad(scores);
  return tp.make(std::move(out), ng,
                 [&tp, coords, scores, cs, num, mass, B, n, Ks, HW,
                  self = Var{(int)tp.size()}]() {
                   T g = tp.grad(self)[0];
                   const auto& cv2 = tp.value(coords);
                   const auto& sv2 = tp.value(scores);
                   tp.accum_if(coords, [&](Tensor<T>& gc) {
                     for (int b = 0; b < B; ++b)
                       for (int k = 0; k < n; ++k)
                         for (int64_t i = 0; i < HW; ++i) {
                           T s = sv2.data[(static_cast<int64_t>(b) * Ks + k) * HW + i];
                           for (int d = 0; d < 2; ++d) {
                             int64_t c = (static_cast<int64_t>(b) * 2 * n + 2 * k + d) * HW + i;
                             T diff = cv2.data[c] - cs->data[c];
                             gc.data[c] += g * s * (diff > 0 ? T(1) : diff < 0 ? T(-1) : T(0)) / mass;
                           }
                         }
                   });
                   tp.accum_if(scores, [&](Tensor<T>& gs) {
                     for (int b = 0; b < B; ++b)
                       for (int k = 0; k < n; ++k)
                         for (int64_t i = 0; i < HW; ++i) {
                           int64_t cu = (static_cast<int64_t>(b) * 2 * n + 2 * k) * HW + i;
                           T d = std::abs(cv2.data[cu] - cs->data[cu]) +
                                 std::abs(cv2.data[cu + HW] - cs->data[cu + HW]);
                           gs.data[(static_cast<int64_t>(b) * Ks + k) * HW + i] +=
                               g * (d / mass - T(2) * num / (mass * mass));
                         }
                   });
                 });
}

template <typename T>
Var reg_mask_loss(Tape<T>& tp, Var score_logits, const Tensor<T>& s_star) {
  const auto& lv = tp.value(score_logits);
  check_shape(lv, s_star.shape, "reg_mask_loss S*");
  int B = lv.shape[0], n = lv.shape[1] - 1;
  int64_t HW = static_cast<int64_t>(lv.shape[2]) * lv.shape[3];
  Tensor<T> w({B, lv.shape[2], lv.shape[3]});
  for (int b = 0; b < B; ++b)
    for (int64_t i = 0; i < HW; ++i)
      w.data[b * HW + i] =
          T(1) - s_star.data[(static_cast<int64_t>(b) * (n + 1) + n) * HW + i];
  return cross_entropy_logits(tp, score_logits, lossdetail::argmax_channels(s_star), w);
}

namespace lossdetail {
inline void check_term(const std::string& name, double v) {
  if (!std::isfinite(v)) throw std::runtime_error("loss term is not finite: " + name);
}
}  // namespace lossdetail

// Weighted sum of named unweighted terms. Missing terms are treated as absent
// (weight skipped), non-finite terms are a hard error naming the term.
template <typename T>
LossReport total_loss(Tape<T>& tp, const std::map<std::string, Var>& terms,
                      const LossWeights& w) {
  const std::map<std::string, double> lambdas = {{"L_I", w.lambda_I},
                                                 {"L_M", w.lambda_M},
                                                 {"L_RT", w.lambda_RT},
                                                 {"L_RC", w.lambda_RC},
                                                 {"L_RM", w.lambda_RM}};
  LossReport rep;
  Var acc{-1};
  for (const auto& [name, v] : terms) {
    auto it = lambdas.find(name);
    if (it == lambdas.end()) throw std::invalid_argument("total_loss: unknown term " + name);
    double val = static_cast<double>(tp.value(v)[0]);
    lossdetail::check_term(name, val);
    rep.terms[name] = val;
    Var weighted = scale(tp, v, static_cast<T>(it->second));
    acc = acc.id < 0 ? weighted : add(tp, acc, weighted);
  }
  if (acc.id < 0) acc = tp.constant(Tensor<T>({1}));
  rep.total_var = acc;
  rep.total = static_cast<double>(tp.value(acc)[0]);
  lossdetail::check_term("total", rep.total);
  return rep;
}

// Validation objective: full-frame image loss plus the mask and geometry
// regularizers; the texture regularizer is excluded. The oracle foreground
// mask is recovered from the background channel of S*.
template <typename T>
LossReport test_loss(Tape<T>& tp, Var rendered_full, const Tensor<T>& target, Var score_logits,
                     Var scores, Var coords, const Tensor<T>& s_star, const Tensor<T>& c_star,
                     const FeatureExtractor<T>& fx, const LossWeights& w) {
  int B = s_star.shape[0], n = s_star.shape[1] - 1;
  int64_t HW = static_cast<int64_t>(s_star.shape[2]) * s_star.shape[3];
  Tensor<T> fg({B, 1, s_star.shape[2], s_star.shape[3]});
  for (int b = 0; b < B; ++b)
    for (int64_t i = 0; i < HW; ++i)
      fg.data[b * HW + i] = T(1) - s_star.data[(static_cast<int64_t>(b) * (n + 1) + n) * HW + i];
  std::map<std::string, Var> terms;
  terms["L_I"] = image_loss(tp, rendered_full, target, nullptr, fx);
  terms["L_M"] = mask_loss(tp, scores, fg);
  terms["L_RC"] = reg_coord_loss(tp, coords, scores, c_star);
  terms["L_RM"] = reg_mask_loss(tp, score_logits, s_star);
  return total_loss(tp, terms, w);
}

}  // namespace motra
