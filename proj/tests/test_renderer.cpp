#include <catch2/catch_amalgamated.hpp>

#include "motra/gradcheck.hpp"
#include "motra/renderer.hpp"
#include "motra/rng.hpp"

using namespace motra;

namespace {

// scalar reference for the full rendering model, double precision
Tensor<double> render_reference(const Tensor<double>& tex, const Tensor<double>& uv,
                                const Tensor<double>& scores, const Tensor<double>& bg) {
  int B = uv.shape[0], n = uv.shape[1] / 2, H = uv.shape[2], W = uv.shape[3];
  int Ht = tex.shape[2], Wt = tex.shape[3];
  Tensor<double> out({B, 3, H, W});
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) {
          double acc = scores.at4(b, n, y, x) * bg.at3(c, y, x);
          for (int k = 0; k < n; ++k) {
            double u = uv.at4(b, 2 * k, y, x), v = uv.at4(b, 2 * k + 1, y, x);
            double r = sample_bilinear(tex.ptr() + (static_cast<int64_t>(k) * 3 + c) * Ht * Wt,
                                       Ht, Wt, u, v);
            acc += scores.at4(b, k, y, x) * r;
          }
          out.at4(b, c, y, x) = acc;
        }
  return out;
}

struct Scene {
  Tensor<double> tex, uv, scores, bg;
};

Scene random_scene(Rng& rng, int B, int n, int H, int W, int Ht, int Wt) {
  Scene s;
  s.tex = Tensor<double>({n, 3, Ht, Wt});
  rng.fill_uniform(s.tex, 0.0, 1.0);
  s.uv = Tensor<double>({B, 2 * n, H, W});
  rng.fill_uniform(s.uv, 0.05, 0.95);  // interior: keeps finite differences valid
  s.bg = Tensor<double>({3, H, W});
  rng.fill_uniform(s.bg, 0.0, 1.0);
  // random positive scores normalized across channels
  s.scores = Tensor<double>({B, n + 1, H, W});
  rng.fill_uniform(s.scores, 0.1, 1.0);
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double sum = 0;
        for (int k = 0; k <= n; ++k) sum += s.scores.at4(b, k, y, x);
        for (int k = 0; k <= n; ++k) s.scores.at4(b, k, y, x) /= sum;
      }
  return s;
}

}  // namespace

TEST_CASE("bilinear sampling: corners, center, clamping") {
  // 2x2 texture, align-corners: u,v pick exact corners
  double tex[4] = {0.0, 1.0, 2.0, 3.0};
  REQUIRE(sample_bilinear(tex, 2, 2, 0.0, 0.0) == 0.0);
  REQUIRE(sample_bilinear(tex, 2, 2, 1.0, 0.0) == 1.0);
  REQUIRE(sample_bilinear(tex, 2, 2, 0.0, 1.0) == 2.0);
  REQUIRE(sample_bilinear(tex, 2, 2, 1.0, 1.0) == 3.0);
  REQUIRE(sample_bilinear(tex, 2, 2, 0.5, 0.5) == Catch::Approx(1.5));
  // out-of-range coordinates clamp to the border
  REQUIRE(sample_bilinear(tex, 2, 2, -3.0, 0.0) == 0.0);
  REQUIRE(sample_bilinear(tex, 2, 2, 2.0, 2.0) == 3.0);
}

TEST_CASE("render_parts on a constant atlas is constant") {
  Rng rng(4);
  Tape<double> tp;
  Tensor<double> tex({2, 3, 5, 5});
  for (int k = 0; k < 2; ++k)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 25; ++i) tex.data[(k * 3 + c) * 25 + i] = 0.1 * (k * 3 + c);
  Tensor<double> uv({1, 4, 6, 6});
  rng.fill_uniform(uv, -0.2, 1.2);  // includes out-of-range, must clamp
  Var out = render_parts(tp, tp.constant(tex), tp.constant(uv));
  const auto& ov = tp.value(out);
  REQUIRE(ov.shape == std::vector<int>{1, 6, 6, 6});
  for (int kc = 0; kc < 6; ++kc)
    for (int i = 0; i < 36; ++i)
      REQUIRE(ov.data[kc * 36 + i] == Catch::Approx(0.1 * kc).margin(1e-12));
}

TEST_CASE("full render matches the scalar reference") {
  Rng rng(11);
  auto s = random_scene(rng, 2, 3, 7, 6, 4, 5);
  Tape<double> tp;
  Var out = render(tp, tp.constant(s.tex), tp.constant(s.uv), tp.constant(s.scores),
                   tp.constant(s.bg));
  auto ref = render_reference(s.tex, s.uv, s.scores, s.bg);
  REQUIRE(max_abs_diff(tp.value(out), ref) <= 1e-12);
}

TEST_CASE("render output is a convex combination of atlas and background") {
  Rng rng(12);
  auto s = random_scene(rng, 1, 4, 8, 8, 6, 6);
  Tape<double> tp;
  Var out = render(tp, tp.constant(s.tex), tp.constant(s.uv), tp.constant(s.scores),
                   tp.constant(s.bg));
  for (double v : tp.value(out).data) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
}

TEST_CASE("render is linear in the atlas") {
  Rng rng(13);
  auto s = random_scene(rng, 1, 2, 5, 5, 4, 4);
  auto run = [&](const Tensor<double>& tex) {
    Tape<double> tp;
    Var o = render_fg(tp, tp.constant(tex), tp.constant(s.uv), tp.constant(s.scores));
    return tp.value(o);
  };
  Tensor<double> tex2 = s.tex;
  tex2.scale_(2.5);
  auto a = run(s.tex);
  auto b = run(tex2);
  a.scale_(2.5);
  REQUIRE(max_abs_diff(a, b) <= 1e-12);
}

TEST_CASE("one-hot scores select a single part; bg channel selects background") {
  Rng rng(14);
  auto s = random_scene(rng, 1, 3, 6, 6, 4, 4);
  // force one-hot on part 1 everywhere
  s.scores.fill(0);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) s.scores.at4(0, 1, y, x) = 1.0;
  Tape<double> tp;
  Var out = render(tp, tp.constant(s.tex), tp.constant(s.uv), tp.constant(s.scores),
                   tp.constant(s.bg));
  const auto& ov = tp.value(out);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        double u = s.uv.at4(0, 2, y, x), v = s.uv.at4(0, 3, y, x);
        double want = sample_bilinear(s.tex.ptr() + (3 + c) * 16, 4, 4, u, v);
        REQUIRE(ov.at4(0, c, y, x) == Catch::Approx(want).margin(1e-12));
      }

  s.scores.fill(0);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) s.scores.at4(0, 3, y, x) = 1.0;
  Tape<double> tp2;
  Var out2 = render(tp2, tp2.constant(s.tex), tp2.constant(s.uv), tp2.constant(s.scores),
                    tp2.constant(s.bg));
  Tensor<double> bg4 = s.bg;
  bg4.shape = {1, 3, 6, 6};
  REQUIRE(max_abs_diff(tp2.value(out2), bg4) <= 1e-12);
}

TEST_CASE("render gradients match finite differences") {
  Rng rng(15);
  auto s = random_scene(rng, 1, 2, 4, 4, 3, 3);
  Tensor<double> wsum({1, 3, 4, 4});
  rng.fill_uniform(wsum, -1.0, 1.0);

  std::map<std::string, Tensor<double>> inputs = {
      {"tex", s.tex}, {"uv", s.uv}, {"scores", s.scores}, {"bg", s.bg}};
  auto fwd = [&](Tape<double>& tp, const std::map<std::string, Var>& in) {
    Var o = render(tp, in.at("tex"), in.at("uv"), in.at("scores"), in.at("bg"));
    Var w = tp.constant(wsum);
    return sum(tp, mul(tp, o, w));
  };
  auto rep = grad_check(inputs, fwd, 1e-5);
  INFO(rep.worst_tensor);
  REQUIRE(rep.finite);
  REQUIRE(rep.max_rel_error <= 1e-4);
}

TEST_CASE("clamped uv coordinates get zero gradient on the clamped axis") {
  Tensor<double> tex({1, 3, 4, 4});
  Rng rng(16);
  rng.fill_uniform(tex, 0.0, 1.0);
  Tensor<double> uv({1, 2, 1, 1});
  uv[0] = 1.4;   // u clamped
  uv[1] = 0.37;  // v interior
  Tape<double> tp;
  Var uvv = tp.leaf(uv, true);
  Var o = render_parts(tp, tp.constant(tex), uvv);
  Var l = sum(tp, o);
  tp.backward(l);
  const auto& g = tp.grad(uvv);
  REQUIRE(g[0] == 0.0);
  REQUIRE(g[1] != 0.0);
}

TEST_CASE("render_hd at scale 1 is the plain render") {
  Rng rng(17);
  auto s = random_scene(rng, 1, 2, 6, 6, 4, 4);
  Tape<double> tp;
  Var a = render(tp, tp.constant(s.tex), tp.constant(s.uv), tp.constant(s.scores),
                 tp.constant(s.bg));
  Var b = render_hd(tp, tp.constant(s.tex), tp.constant(s.uv), tp.constant(s.scores),
                    tp.constant(s.bg), 1);
  REQUIRE(max_abs_diff(tp.value(a), tp.value(b)) <= 1e-12);
}

TEST_CASE("render_hd: constant inputs upsample to constants, scores renormalized") {
  int n = 2;
  Tensor<double> tex({n, 3, 3, 3});
  tex.fill(0.25);
  Tensor<double> uv({1, 2 * n, 4, 4});
  uv.fill(0.5);
  Tensor<double> scores({1, n + 1, 4, 4});
  scores.fill(1.0 / (n + 1));
  Tensor<double> bg({3, 4, 4});
  bg.fill(0.85);
  Tape<double> tp;
  Var o = render_hd(tp, tp.constant(tex), tp.constant(uv), tp.constant(scores), tp.constant(bg),
                    2);
  const auto& ov = tp.value(o);
  REQUIRE(ov.shape == std::vector<int>{1, 3, 8, 8});
  double want = (2.0 * 0.25 + 0.85) / 3.0;
  for (double v : ov.data) REQUIRE(v == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("render_hd gradients match finite differences") {
  Rng rng(18);
  auto s = random_scene(rng, 1, 2, 3, 3, 3, 3);
  Tensor<double> wsum({1, 3, 6, 6});
  rng.fill_uniform(wsum, -1.0, 1.0);
  std::map<std::string, Tensor<double>> inputs = {
      {"tex", s.tex}, {"uv", s.uv}, {"scores", s.scores}, {"bg", s.bg}};
  auto fwd = [&](Tape<double>& tp, const std::map<std::string, Var>& in) {
    Var o = render_hd(tp, in.at("tex"), in.at("uv"), in.at("scores"), in.at("bg"), 2);
    return sum(tp, mul(tp, o, tp.constant(wsum)));
  };
  auto rep = grad_check(inputs, fwd, 1e-5);
  INFO(rep.worst_tensor);
  REQUIRE(rep.finite);
  REQUIRE(rep.max_rel_error <= 1e-4);
}

TEST_CASE("shape validation rejects mismatched inputs") {
  Tape<double> tp;
  Tensor<double> tex({2, 3, 4, 4}), uv({1, 6, 5, 5});  // 3 parts worth of uv, 2 in atlas
  REQUIRE_THROWS(render_parts(tp, tp.constant(tex), tp.constant(uv)));
}
