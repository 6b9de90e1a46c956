#include <catch2/catch_amalgamated.hpp>

#include "motra/gradcheck.hpp"
#include "motra/texture_gen.hpp"

using namespace motra;

namespace {
TextureConfig tiny_cfg() {
  TextureConfig c;
  c.n_parts = 2;
  c.atlas_size = 8;
  c.channels = {4, 6, 8};
  c.n_resblocks = 1;
  return c;
}
}  // namespace

TEST_CASE("reshape_parts is a bitwise round trip with part-major channels") {
  Tape<float> tp;
  Tensor<float> atlas({1, 2, 3, 4, 4});
  Rng rng(1);
  rng.fill_uniform(atlas, 0.0, 1.0);
  Var a = tp.constant(atlas);
  Var flat = reshape_parts(tp, a);
  REQUIRE(tp.value(flat).shape == std::vector<int>{1, 6, 4, 4});
  // channel index = part*3 + rgb
  for (int p = 0; p < 2; ++p)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 16; ++i)
        REQUIRE(tp.value(flat).data[(p * 3 + c) * 16 + i] ==
                atlas.data[(p * 3 + c) * 16 + i]);
  Var back = unreshape_parts(tp, flat);
  REQUIRE(tp.value(back).shape == atlas.shape);
  REQUIRE(max_abs_diff(tp.value(back), atlas) == 0.0);
}

TEST_CASE("merge_embeddings: identity, direct mean, permutation invariance") {
  Tape<float> tp;
  Tensor<float> one({1, 2, 1, 1});
  one[0] = 1;
  one[1] = 3;
  REQUIRE(max_abs_diff(tp.value(merge_embeddings(tp, tp.constant(one))), one) == 0.0);

  Tensor<float> two({2, 2, 1, 1});
  two[0] = 1;
  two[1] = 3;
  two[2] = 3;
  two[3] = 1;
  const auto& m = tp.value(merge_embeddings(tp, tp.constant(two)));
  REQUIRE(m[0] == 2.0f);
  REQUIRE(m[1] == 2.0f);

  Rng rng(2);
  Tensor<float> five({5, 3, 2, 2});
  rng.fill_uniform(five, 0.0, 1.0);
  Tensor<float> perm_t(five.shape);
  int perm[5] = {4, 2, 0, 1, 3};
  for (int j = 0; j < 5; ++j)
    std::copy_n(five.data.begin() + perm[j] * 12, 12, perm_t.data.begin() + j * 12);
  REQUIRE(max_abs_diff(tp.value(merge_embeddings(tp, tp.constant(five))),
                       tp.value(merge_embeddings(tp, tp.constant(perm_t)))) <= 1e-6);

  Tensor<float> empty;
  REQUIRE_THROWS(merge_embeddings(tp, tp.constant(Tensor<float>({1, 2}))));
}

TEST_CASE("encoder/decoder shape contracts (desk config)") {
  TextureConfig cfg;  // 8 parts, 32x32, embedding 128 x 4 x 4
  auto ps = init_texture_params<float>(cfg, 3);
  Tape<float> tp;
  ParamBinder<float> pb(tp, ps, false);
  Rng rng(4);
  Tensor<float> partials({2, 24, 32, 32});
  rng.fill_uniform(partials, 0.0, 1.0);
  Var t = encode_texture(pb, cfg, tp.constant(partials));
  REQUIRE(tp.value(t).shape == std::vector<int>{2, 128, 4, 4});
  Var out = decode_texture(pb, cfg, merge_embeddings(tp, t));
  REQUIRE(tp.value(out).shape == std::vector<int>{1, 24, 32, 32});
  for (float v : tp.value(out).data) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
  // mismatched atlas rejected
  REQUIRE_THROWS(encode_texture(pb, cfg, tp.constant(Tensor<float>({1, 24, 16, 16}))));
  REQUIRE_THROWS(decode_texture(pb, cfg, tp.constant(Tensor<float>({1, 64, 4, 4}))));
}

TEST_CASE("forward is order- and duplication-invariant") {
  TextureConfig cfg = tiny_cfg();
  auto ps = init_texture_params<double>(cfg, 5);
  Rng rng(6);
  Tensor<double> in({3, 6, 8, 8});
  rng.fill_uniform(in, 0.0, 1.0);

  auto run = [&](const Tensor<double>& x) {
    Tape<double> tp;
    ParamBinder<double> pb(tp, ps, false);
    return tp.value(texture_forward(pb, cfg, tp.constant(x)));
  };
  auto base = run(in);

  Tensor<double> perm_t(in.shape);
  int perm[3] = {1, 2, 0};
  for (int j = 0; j < 3; ++j)
    std::copy_n(in.data.begin() + perm[j] * 6 * 64, 6 * 64, perm_t.data.begin() + j * 6 * 64);
  REQUIRE(max_abs_diff(base, run(perm_t)) <= 1e-5);

  // duplicating the whole set twice leaves the mean embedding unchanged
  Tensor<double> dup({6, 6, 8, 8});
  std::copy_n(in.data.begin(), in.numel(), dup.data.begin());
  std::copy_n(in.data.begin(), in.numel(), dup.data.begin() + in.numel());
  REQUIRE(max_abs_diff(base, run(dup)) <= 1e-5);
}

TEST_CASE("fully occluded part still decodes to a usable slice") {
  TextureConfig cfg = tiny_cfg();
  auto ps = init_texture_params<double>(cfg, 7);
  Rng rng(8);
  Tensor<double> in({2, 6, 8, 8});
  rng.fill_uniform(in, 0.0, 1.0);
  // part 1 (channels 3..5) invisible in every input
  for (int j = 0; j < 2; ++j)
    for (int c = 3; c < 6; ++c)
      for (int i = 0; i < 64; ++i) in.data[(j * 6 + c) * 64 + i] = 0.0;
  Tape<double> tp;
  ParamBinder<double> pb(tp, ps, false);
  const auto& out = tp.value(texture_forward(pb, cfg, tp.constant(in)));
  double mn = 1e9, mx = -1e9, s = 0, s2 = 0;
  int cnt = 0;
  for (int c = 3; c < 6; ++c)
    for (int i = 0; i < 64; ++i) {
      double v = out.data[c * 64 + i];
      mn = std::min(mn, v);
      mx = std::max(mx, v);
      s += v;
      s2 += v * v;
      ++cnt;
    }
  REQUIRE(mn >= 0.0);
  REQUIRE(mx <= 1.0);
  double var = s2 / cnt - (s / cnt) * (s / cnt);
  REQUIRE(var > 0.0);  // not a degenerate constant
}

TEST_CASE("decode gradient w.r.t. the embedding matches finite differences") {
  TextureConfig cfg = tiny_cfg();
  auto ps = init_texture_params<double>(cfg, 9);
  Rng rng(10);
  std::map<std::string, Tensor<double>> in;
  Tensor<double> t({1, cfg.embed_channels(), cfg.embed_size(), cfg.embed_size()});
  rng.fill_uniform(t, -1, 1);
  in["t"] = t;
  Tensor<double> w({1, 6, 8, 8});
  rng.fill_uniform(w, -1, 1);
  auto fwd = [&](Tape<double>& tp, std::map<std::string, Var>& v) {
    ParamBinder<double> pb(tp, ps, false);
    return sum(tp, mul(tp, decode_texture(pb, cfg, v["t"]), tp.constant(w)));
  };
  auto rep = grad_check(in, fwd, 1e-5, 200, 1);
  INFO(rep.worst_tensor);
  REQUIRE(rep.finite);
  REQUIRE(rep.max_rel_error <= 1e-3);
}

TEST_CASE("decode is continuous in the embedding") {
  TextureConfig cfg = tiny_cfg();
  auto ps = init_texture_params<double>(cfg, 11);
  Rng rng(12);
  Tensor<double> t({1, cfg.embed_channels(), cfg.embed_size(), cfg.embed_size()});
  rng.fill_uniform(t, -1, 1);
  Tensor<double> dir(t.shape);
  rng.fill_uniform(dir, -1, 1);

  auto run = [&](const Tensor<double>& x) {
    Tape<double> tp;
    ParamBinder<double> pb(tp, ps, false);
    return tp.value(decode_texture(pb, cfg, tp.constant(x)));
  };
  auto base = run(t);
  double prev = 1e9;
  for (double eps : {1e-1, 1e-2, 1e-3, 1e-4}) {
    Tensor<double> tp2 = t;
    for (int64_t i = 0; i < tp2.numel(); ++i) tp2[i] += eps * dir[i];
    double d = max_abs_diff(base, run(tp2));
    REQUIRE(d < prev + 1e-12);  // shrinking perturbation never grows the output change
    prev = d;
  }
  REQUIRE(prev <= 1e-3);  // vanishing perturbation, vanishing change
}
