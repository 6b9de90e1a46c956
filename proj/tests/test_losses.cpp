#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "motra/gradcheck.hpp"
#include "motra/losses.hpp"

using namespace motra;

namespace {

template <typename T>
Tensor<T> rnd(std::vector<int> shape, Rng& rng, T lo = T(0), T hi = T(1)) {
  Tensor<T> t(std::move(shape));
  rng.fill_uniform(t, lo, hi);
  return t;
}

// one-hot scores over n+1 channels from integer labels
template <typename T>
Tensor<T> onehot(const Tensor<int>& lab, int K) {
  Tensor<T> s({lab.shape[0], K, lab.shape[1], lab.shape[2]});
  int64_t HW = static_cast<int64_t>(lab.shape[1]) * lab.shape[2];
  for (int b = 0; b < lab.shape[0]; ++b)
    for (int64_t i = 0; i < HW; ++i)
      s.data[(static_cast<int64_t>(b) * K + lab.data[b * HW + i]) * HW + i] = T(1);
  return s;
}

// scalar softmax cross-entropy of one pixel column
double ce_pixel(const std::vector<double>& logits, int lab) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0;
  for (double v : logits) z += std::exp(v - mx);
  return -(logits[lab] - mx - std::log(z));
}

}  // namespace

TEST_CASE("loss_init_geometry: zeros, mask annihilation, scalar oracle") {
  Rng rng(7);
  const int B = 2, n = 3, H = 4, W = 4;
  auto c_star = rnd<double>({B, 2 * n, H, W}, rng);
  Tensor<int> lab({B, H, W});
  for (auto& v : lab.data) v = rng.uniform_int(n + 1);
  auto s_star = onehot<double>(lab, n + 1);

  {
    Tape<double> tp;
    auto [lc, ls] = loss_init_geometry(tp, tp.constant(c_star),
                                       tp.constant(rnd<double>({B, n + 1, H, W}, rng, -2.0, 2.0)),
                                       c_star, s_star);
    REQUIRE(tp.value(lc)[0] == 0.0);
    (void)ls;
  }
  {
    // all-background oracle: L_C vanishes regardless of the prediction
    Tensor<int> bg({B, H, W});
    for (auto& v : bg.data) v = n;
    Tape<double> tp;
    auto [lc, ls] = loss_init_geometry(tp, tp.constant(rnd<double>({B, 2 * n, H, W}, rng)),
                                       tp.constant(rnd<double>({B, n + 1, H, W}, rng)),
                                       c_star, onehot<double>(bg, n + 1));
    REQUIRE(tp.value(lc)[0] == 0.0);
    (void)ls;
  }

  auto coords = rnd<double>({B, 2 * n, H, W}, rng);
  auto logits = rnd<double>({B, n + 1, H, W}, rng, -2.0, 2.0);
  Tape<double> tp;
  auto [lc, ls] =
      loss_init_geometry(tp, tp.constant(coords), tp.constant(logits), c_star, s_star);

  // brute-force references
  double ref_c = 0, cnt = 0, ref_s = 0;
  int64_t HW = H * W;
  for (int b = 0; b < B; ++b)
    for (int64_t i = 0; i < HW; ++i) {
      int l = lab.data[b * HW + i];
      std::vector<double> col(n + 1);
      for (int k = 0; k <= n; ++k) col[k] = logits.data[(b * (n + 1) + k) * HW + i];
      ref_s += ce_pixel(col, l);
      if (l < n)
        for (int d = 0; d < 2; ++d) {
          int64_t idx = (b * 2 * n + 2 * l + d) * HW + i;
          ref_c += std::abs(coords.data[idx] - c_star.data[idx]);
          cnt += 1;
        }
    }
  REQUIRE(tp.value(lc)[0] == Catch::Approx(ref_c / cnt).epsilon(0).margin(1e-6));
  REQUIRE(tp.value(ls)[0] == Catch::Approx(ref_s / (B * HW)).epsilon(0).margin(1e-6));

  // gradient check w.r.t. coords and logits
  std::map<std::string, Tensor<double>> in{{"c", coords}, {"l", logits}};
  auto rep = grad_check(
      in,
      [&](Tape<double>& t, std::map<std::string, Var>& v) {
        auto [a, b2] = loss_init_geometry(t, v["c"], v["l"], c_star, s_star);
        return add(t, a, b2);
      },
      1e-5, 0, 3);
  REQUIRE(rep.finite);
  REQUIRE(rep.max_rel_error <= 1e-4);
}

TEST_CASE("loss_init_texture: zero, half-visible closed form, oracle, empty warning") {
  Rng rng(11);
  const int n = 2, hs = 4;
  auto tex = rnd<double>({1, 3 * n, hs, hs}, rng);

  std::vector<Tensor<double>> atl, sig;
  for (int j = 0; j < 2; ++j) {
    atl.push_back(rnd<double>({n, 3, hs, hs}, rng));
    sig.push_back(rnd<double>({n, hs, hs}, rng, 0.0, 1.0));
    for (auto& v : sig.back().data) v = v > 0.5 ? 1.0 : 0.0;
  }

  {
    // T equal to every partial on its support
    Tensor<double> same(tex.shape);
    std::vector<Tensor<double>> eq(2, Tensor<double>({n, 3, hs, hs}));
    for (int j = 0; j < 2; ++j)
      for (int64_t i = 0; i < eq[j].numel(); ++i) eq[j].data[i] = tex.data[i];
    Tape<double> tp;
    Var l = loss_init_texture(tp, tp.constant(tex), eq, sig);
    REQUIRE(tp.value(l)[0] == 0.0);
  }
  {
    // single input, offset 0.5 on exactly half the visible texels -> 0.25
    Tensor<double> s({1, hs, hs});
    for (int i = 0; i < 8; ++i) s.data[i] = 1.0;  // 8 visible texels
    Tensor<double> t1({1, 3, hs, hs});
    Tensor<double> t2({1, 1 * 3, hs, hs});
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < hs * hs; ++i) {
        t1.data[c * hs * hs + i] = 0.25;
        t2.data[c * hs * hs + i] = (i < 4) ? 0.75 : 0.25;  // half of the visible ones differ
      }
    Tape<double> tp;
    Var l = loss_init_texture(tp, tp.constant(t2), {t1}, {s});
    REQUIRE(tp.value(l)[0] == Catch::Approx(0.25).margin(1e-12));
  }

  Tape<double> tp;
  Var l = loss_init_texture(tp, tp.constant(tex), atl, sig);
  double ref = 0, mass = 0;
  int64_t HW = hs * hs;
  for (int j = 0; j < 2; ++j)
    for (int k = 0; k < n; ++k)
      for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < HW; ++i) {
          double w = sig[j].data[k * HW + i];
          ref += w * std::abs(tex.data[(k * 3 + c) * HW + i] -
                              atl[j].data[(static_cast<int64_t>(k) * 3 + c) * HW + i]);
          mass += w;
        }
  REQUIRE(tp.value(l)[0] == Catch::Approx(ref / mass).epsilon(0).margin(1e-6));

  {
    std::vector<Tensor<double>> zs(2, Tensor<double>({n, hs, hs}));
    bool warn = false;
    Tape<double> t2;
    Var z = loss_init_texture(t2, t2.constant(tex), atl, zs, &warn);
    REQUIRE(t2.value(z)[0] == 0.0);
    REQUIRE(warn);
  }

  std::map<std::string, Tensor<double>> in{{"t", tex}};
  auto rep = grad_check(
      in,
      [&](Tape<double>& t, std::map<std::string, Var>& v) {
        return loss_init_texture(t, v["t"], atl, sig);
      },
      1e-5, 0, 5);
  REQUIRE(rep.finite);
  REQUIRE(rep.max_rel_error <= 1e-4);
}

TEST_CASE("image_loss: zero, pixel closed form, feature re-evaluation oracle") {
  Rng rng(21);
  const int B = 1, H = 8, W = 8;
  auto target = rnd<double>({B, 3, H, W}, rng);
  FeatureExtractor<double> fx0(3, 4, {});       // pixel term only
  FeatureExtractor<double> fx(3, 4, {4, 8});    // two feature levels

  {
    Tape<double> tp;
    Var l = image_loss(tp, tp.constant(target), target, nullptr, fx);
    REQUIRE(tp.value(l)[0] == 0.0);
  }
  {
    Tensor<double> shifted = target;
    for (auto& v : shifted.data) v += 0.1;
    Tensor<double> ones({B, 1, H, W});
    ones.fill(1.0);
    Tape<double> tp;
    Var l = image_loss(tp, tp.constant(shifted), target, &ones, fx0);
    REQUIRE(tp.value(l)[0] == Catch::Approx(0.1).margin(1e-12));
  }

  auto rendered = rnd<double>({B, 3, H, W}, rng);
  auto mask = rnd<double>({B, 1, H, W}, rng);
  for (auto& v : mask.data) v = v > 0.4 ? 1.0 : 0.0;
  Tape<double> tp;
  Var l = image_loss(tp, tp.constant(rendered), target, &mask, fx);

  // independent recomputation through the extractor on a fresh tape
  Tensor<double> masked = target;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < H * W; ++i) masked.data[c * H * W + i] *= mask.data[i];
  Tape<double> ref;
  double want = 0;
  {
    Tensor<double> d = rendered;
    for (int64_t i = 0; i < d.numel(); ++i) d.data[i] = std::abs(d.data[i] - masked.data[i]);
    want += d.sum() / static_cast<double>(d.numel());
  }
  auto fa = fx.features(ref, ref.constant(rendered));
  auto fb = fx.features(ref, ref.constant(masked));
  for (size_t v = 0; v < fa.size(); ++v) {
    const auto& a = ref.value(fa[v]);
    const auto& b = ref.value(fb[v]);
    double acc = 0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += std::abs(a.data[i] - b.data[i]);
    want += acc / static_cast<double>(a.numel());
  }
  REQUIRE(tp.value(l)[0] == Catch::Approx(want).epsilon(0).margin(1e-6));

  std::map<std::string, Tensor<double>> in{{"r", rendered}};
  auto rep = grad_check(
      in,
      [&](Tape<double>& t, std::map<std::string, Var>& v) {
        return image_loss(t, v["r"], target, &mask, fx);
      },
      1e-5, 120, 9);
  REQUIRE(rep.finite);
  REQUIRE(rep.max_rel_error <= 1e-4);
}

TEST_CASE("mask_loss: clamp floor, ln2 closed form, scalar oracle") {
  Rng rng(31);
  const int B = 1, n = 2, H = 4, W = 4;
  auto m = rnd<double>({B, 1, H, W}, rng);
  for (auto& v : m.data) v = v > 0.5 ? 1.0 : 0.0;

  {
    Tensor<double> s({B, n + 1, H, W});
    for (int i = 0; i < H * W; ++i) s.data[(n * H * W) + i] = 1.0 - m.data[i];
    Tape<double> tp;
    REQUIRE(tp.value(mask_loss(tp, tp.constant(s), m))[0] <= 1e-5);
  }
  {
    Tensor<double> s({B, n + 1, H, W});
    for (int i = 0; i < H * W; ++i) s.data[(n * H * W) + i] = 0.5;
    Tape<double> tp;
    REQUIRE(tp.value(mask_loss(tp, tp.constant(s), m))[0] ==
            Catch::Approx(std::log(2.0)).margin(1e-12));
  }

  auto s = rnd<double>({B, n + 1, H, W}, rng, 0.05, 0.95);
  Tape<double> tp;
  Var l = mask_loss(tp, tp.constant(s), m);
  double ref = 0;
  for (int i = 0; i < H * W; ++i) {
    double p = s.data[n * H * W + i];
    double t = 1.0 - m.data[i];
    ref -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  REQUIRE(tp.value(l)[0] == Catch::Approx(ref / (H * W)).epsilon(0).margin(1e-6));

  std::map<std::string, Tensor<double>> in{{"s", s}};
  auto rep = grad_check(
      in,
      [&](Tape<double>& t, std::map<std::string, Var>& v) { return mask_loss(t, v["s"], m); },
      1e-6, 0, 2);
  REQUIRE(rep.finite);
  REQUIRE(rep.max_rel_error <= 1e-4);
}

TEST_CASE("reg losses: anchors, closed forms, scalar oracles, gradients") {
  Rng rng(41);
  const int B = 2, n = 2, H = 4, W = 4;
  auto c_star = rnd<double>({B, 2 * n, H, W}, rng);
  Tensor<int> lab({B, H, W});
  for (auto& v : lab.data) v = rng.uniform_int(n + 1);
  auto s_star = onehot<double>(lab, n + 1);
  auto scores = rnd<double>({B, n + 1, H, W}, rng, 0.05, 0.95);

  {
    Tape<double> tp;
    Var l = reg_coord_loss(tp, tp.constant(c_star), tp.constant(scores), c_star);
    REQUIRE(tp.value(l)[0] == 0.0);
  }
  {
    // logits strongly agreeing with S* on foreground
    Tensor<double> big(s_star);
    for (auto& v : big.data) v = v * 40.0 - 20.0;
    Tape<double> tp;
    REQUIRE(tp.value(reg_mask_loss(tp, tp.constant(big), s_star))[0] <= 1e-5);
  }

  auto coords = rnd<double>({B, 2 * n, H, W}, rng);
  auto logits = rnd<double>({B, n + 1, H, W}, rng, -2.0, 2.0);
  int64_t HW = H * W;
  {
    Tape<double> tp;
    Var l = reg_coord_loss(tp, tp.constant(coords), tp.constant(scores), c_star);
    double num = 0, mass = 0;
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < n; ++k)
        for (int64_t i = 0; i < HW; ++i) {
          double sv = scores.data[(b * (n + 1) + k) * HW + i];
          for (int d = 0; d < 2; ++d) {
            int64_t c = (b * 2 * n + 2 * k + d) * HW + i;
            num += sv * std::abs(coords.data[c] - c_star.data[c]);
            mass += sv;
          }
        }
    REQUIRE(tp.value(l)[0] == Catch::Approx(num / mass).epsilon(0).margin(1e-6));
  }
  {
    Tape<double> tp;
    Var l = reg_mask_loss(tp, tp.constant(logits), s_star);
    double ref = 0, mass = 0;
    for (int b = 0; b < B; ++b)
      for (int64_t i = 0; i < HW; ++i) {
        double w = 1.0 - s_star.data[(b * (n + 1) + n) * HW + i];
        if (w == 0.0) continue;
        std::vector<double> col(n + 1);
        for (int k = 0; k <= n; ++k) col[k] = logits.data[(b * (n + 1) + k) * HW + i];
        ref += w * ce_pixel(col, lab.data[b * HW + i]);
        mass += w;
      }
    REQUIRE(tp.value(l)[0] == Catch::Approx(ref / mass).epsilon(0).margin(1e-6));
  }

  std::map<std::string, Tensor<double>> in{{"c", coords}, {"s", scores}, {"l", logits}};
  auto rep = grad_check(
      in,
      [&](Tape<double>& t, std::map<std::string, Var>& v) {
        return add(t, reg_coord_loss(t, v["c"], v["s"], c_star),
                   reg_mask_loss(t, v["l"], s_star));
      },
      1e-5, 0, 6);
  REQUIRE(rep.finite);
  REQUIRE(rep.max_rel_error <= 1e-4);
}

TEST_CASE("total_loss: defaults sum to 23.8, consistency, NaN naming") {
  Tape<float> tp;
  auto one = [&]() {
    Tensor<float> t({1});
    t[0] = 1.0f;
    return tp.constant(t);
  };
  std::map<std::string, Var> terms{{"L_I", one()}, {"L_M", one()}, {"L_RT", one()},
                                   {"L_RC", one()}, {"L_RM", one()}};
  LossWeights w;
  auto rep = total_loss(tp, terms, w);
  REQUIRE(rep.total == Catch::Approx(23.8).margin(1e-6));

  LossWeights zero;
  zero.lambda_I = zero.lambda_M = zero.lambda_RT = zero.lambda_RC = zero.lambda_RM = 0.0;
  REQUIRE(total_loss(tp, terms, zero).total == 0.0);

  // single term
  std::map<std::string, Var> only{{"L_RC", one()}};
  REQUIRE(total_loss(tp, only, w).total == Catch::Approx(20.0).margin(1e-6));

  // report consistency: total == sum of lambda * term
  Rng rng(5);
  std::map<std::string, Var> rnd_terms;
  for (const auto& name : {"L_I", "L_M", "L_RT", "L_RC", "L_RM"}) {
    Tensor<float> t({1});
    t[0] = static_cast<float>(rng.uniform(0.0, 2.0));
    rnd_terms[name] = tp.constant(t);
  }
  auto r2 = total_loss(tp, rnd_terms, w);
  double manual = w.lambda_I * r2.terms["L_I"] + w.lambda_M * r2.terms["L_M"] +
                  w.lambda_RT * r2.terms["L_RT"] + w.lambda_RC * r2.terms["L_RC"] +
                  w.lambda_RM * r2.terms["L_RM"];
  REQUIRE(r2.total == Catch::Approx(manual).margin(1e-6));
  REQUIRE(r2.to_json()["total"].get<double>() == r2.total);

  Tensor<float> bad({1});
  bad[0] = std::numeric_limits<float>::quiet_NaN();
  std::map<std::string, Var> nan_terms{{"L_M", tp.constant(bad)}};
  REQUIRE_THROWS_WITH(total_loss(tp, nan_terms, w),
                      Catch::Matchers::ContainsSubstring("L_M"));
}

TEST_CASE("test_loss matches term-by-term recomputation and excludes L_RT") {
  Rng rng(51);
  const int B = 1, n = 2, H = 8, W = 8;
  auto target = rnd<double>({B, 3, H, W}, rng);
  auto rendered = rnd<double>({B, 3, H, W}, rng);
  auto coords = rnd<double>({B, 2 * n, H, W}, rng);
  auto c_star = rnd<double>({B, 2 * n, H, W}, rng);
  auto logits = rnd<double>({B, n + 1, H, W}, rng, -2.0, 2.0);
  Tensor<int> lab({B, H, W});
  for (auto& v : lab.data) v = rng.uniform_int(n + 1);
  auto s_star = onehot<double>(lab, n + 1);
  FeatureExtractor<double> fx(3, 4, {4, 8});

  Tape<double> tp;
  Var lg = tp.constant(logits);
  Var sc = softmax_channels(tp, lg);
  auto rep = test_loss(tp, tp.constant(rendered), target, lg, sc, tp.constant(coords), s_star,
                       c_star, fx, LossWeights{});

  REQUIRE(rep.terms.count("L_RT") == 0);
  Tensor<double> fg({B, 1, H, W});
  for (int i = 0; i < H * W; ++i) fg.data[i] = 1.0 - s_star.data[(n)*H * W + i];
  LossWeights w;
  double want = w.lambda_I * tp.value(image_loss(tp, tp.constant(rendered), target, nullptr, fx))[0] +
                w.lambda_M * tp.value(mask_loss(tp, sc, fg))[0] +
                w.lambda_RC * tp.value(reg_coord_loss(tp, tp.constant(coords), sc, c_star))[0] +
                w.lambda_RM * tp.value(reg_mask_loss(tp, lg, s_star))[0];
  REQUIRE(rep.total == Catch::Approx(want).epsilon(0).margin(1e-6));
}
