#include <catch2/catch_amalgamated.hpp>

#include "motra/geometry_gen.hpp"
#include "motra/gradcheck.hpp"

using namespace motra;

namespace {

GeometryConfig tiny_cfg() {
  GeometryConfig c;
  c.n_parts = 2;
  c.stickman_channels = 3;
  c.image_size = 16;
  c.channels = {4, 6};
  c.n_resblocks = 1;
  return c;
}

Tensor<double> rand_t(Rng& rng, std::vector<int> shape, double lo = 0.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  rng.fill_uniform(t, lo, hi);
  return t;
}

}  // namespace

TEST_CASE("attention_fuse: degenerate and symmetric cases") {
  Tape<double> tp;
  // b=1, single spatial position: softmax over one entry is 1, so d_a == a_1
  Tensor<double> q1({3, 1}), qt({3, 1}), a1({5, 1});
  Rng rng(2);
  rng.fill_uniform(q1, -1, 1);
  rng.fill_uniform(qt, -1, 1);
  rng.fill_uniform(a1, -1, 1);
  Var f = attention_fuse(tp, {tp.constant(q1)}, tp.constant(qt), {tp.constant(a1)});
  REQUIRE(max_abs_diff(tp.value(f), a1) <= 1e-12);

  // two identical sources == one source
  Tensor<double> q({3, 4}), a({5, 4}), qt2({3, 6});
  rng.fill_uniform(q, -1, 1);
  rng.fill_uniform(a, -1, 1);
  rng.fill_uniform(qt2, -1, 1);
  Var one = attention_fuse(tp, {tp.constant(q)}, tp.constant(qt2), {tp.constant(a)});
  Var two = attention_fuse(tp, {tp.constant(q), tp.constant(q)}, tp.constant(qt2),
                           {tp.constant(a), tp.constant(a)});
  REQUIRE(max_abs_diff(tp.value(one), tp.value(two)) <= 1e-12);
}

TEST_CASE("attention_fuse matches a scalar reference") {
  int C = 2, Ca = 3, Ns = 3, Nt = 4, b = 2;
  Rng rng(3);
  std::vector<Tensor<double>> q(b), a(b);
  for (int j = 0; j < b; ++j) {
    q[j] = rand_t(rng, {C, Ns}, -1, 1);
    a[j] = rand_t(rng, {Ca, Ns}, -1, 1);
  }
  Tensor<double> qt = rand_t(rng, {C, Nt}, -1, 1);

  Tape<double> tp;
  std::vector<Var> qv, av;
  for (int j = 0; j < b; ++j) {
    qv.push_back(tp.constant(q[j]));
    av.push_back(tp.constant(a[j]));
  }
  Var f = attention_fuse(tp, qv, tp.constant(qt), av);

  // brute force: per target position, joint softmax over (source, position)
  Tensor<double> ref({Ca, Nt});
  for (int t = 0; t < Nt; ++t) {
    std::vector<double> sc;
    for (int j = 0; j < b; ++j)
      for (int s = 0; s < Ns; ++s) {
        double dot = 0;
        for (int c = 0; c < C; ++c) dot += q[j][c * Ns + s] * qt[c * Nt + t];
        sc.push_back(dot / std::sqrt(static_cast<double>(C)));
      }
    double mx = *std::max_element(sc.begin(), sc.end()), z = 0;
    for (double& v : sc) {
      v = std::exp(v - mx);
      z += v;
    }
    for (int j = 0; j < b; ++j)
      for (int s = 0; s < Ns; ++s)
        for (int c = 0; c < Ca; ++c)
          ref[c * Nt + t] += a[j][c * Ns + s] * sc[j * Ns + s] / z;
  }
  REQUIRE(max_abs_diff(tp.value(f), ref) <= 1e-6);

  // weights nonnegative, sum to 1 per target position: blend of all-ones
  // value matrices must give exactly 1
  Tensor<double> ones({1, Ns});
  ones.fill(1.0);
  Var w1 = attention_fuse(tp, qv, tp.constant(qt), {tp.constant(ones), tp.constant(ones)});
  for (double v : tp.value(w1).data) REQUIRE(v == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("attention_fuse gradients match finite differences") {
  Rng rng(4);
  std::map<std::string, Tensor<double>> in = {
      {"q1", rand_t(rng, {2, 3}, -1, 1)}, {"q2", rand_t(rng, {2, 3}, -1, 1)},
      {"a1", rand_t(rng, {3, 3}, -1, 1)}, {"a2", rand_t(rng, {3, 3}, -1, 1)},
      {"qt", rand_t(rng, {2, 4}, -1, 1)}};
  Tensor<double> w = rand_t(rng, {3, 4}, -1, 1);
  auto fwd = [&](Tape<double>& tp, std::map<std::string, Var>& v) {
    Var f = attention_fuse(tp, {v["q1"], v["q2"]}, v["qt"], {v["a1"], v["a2"]});
    return sum(tp, mul(tp, f, tp.constant(w)));
  };
  auto rep = grad_check(in, fwd, 1e-5);
  INFO(rep.worst_tensor);
  REQUIRE(rep.finite);
  REQUIRE(rep.max_rel_error <= 1e-4);
}

TEST_CASE("encode_sources: shape contract and determinism") {
  GeometryConfig cfg;  // desk defaults
  auto ps = init_geometry_params<float>(cfg, 1);
  Rng rng(5);
  Tensor<float> imgs({2, 3, 64, 64}), poses({2, 18, 64, 64});
  rng.fill_uniform(imgs, 0.0, 1.0);
  // duplicated source: copy row 0 onto row 1
  for (int i = 0; i < 3 * 64 * 64; ++i) imgs.data[3 * 64 * 64 + i] = imgs.data[i];
  rng.fill_uniform(poses, 0.0, 1.0);
  for (int i = 0; i < 18 * 64 * 64; ++i) poses.data[18 * 64 * 64 + i] = poses.data[i];

  Tape<float> tp;
  ParamBinder<float> pb(tp, ps, false);
  auto srcs = encode_sources(pb, cfg, tp.constant(imgs), tp.constant(poses));
  REQUIRE(srcs.a.size() == 4);
  int sizes[4] = {32, 16, 8, 4};
  for (int l = 0; l < 4; ++l) {
    const auto& av = tp.value(srcs.a[l]);
    REQUIRE(av.shape == std::vector<int>{2, cfg.channels[l], sizes[l], sizes[l]});
    REQUIRE(tp.value(srcs.q[l]).shape == av.shape);
    // identical inputs give bitwise identical per-source features
    int64_t half = av.numel() / 2;
    for (int64_t i = 0; i < half; ++i) REQUIRE(av.data[i] == av.data[half + i]);
  }
}

TEST_CASE("geometry forward: ranges, normalization, source invariances") {
  GeometryConfig cfg = tiny_cfg();
  auto ps = init_geometry_params<double>(cfg, 7);
  Rng rng(6);
  Tensor<double> imgs = rand_t(rng, {3, 3, 16, 16});
  Tensor<double> poses = rand_t(rng, {3, 3, 16, 16});
  Tensor<double> tgt = rand_t(rng, {2, 3, 16, 16});

  auto run = [&](const Tensor<double>& si, const Tensor<double>& sp) {
    Tape<double> tp;
    ParamBinder<double> pb(tp, ps, false);
    auto srcs = encode_sources(pb, cfg, tp.constant(si), tp.constant(sp));
    auto out = geometry_forward(pb, cfg, tp.constant(tgt), srcs);
    Var s = part_scores(tp, out.score_logits);
    return std::pair{tp.value(out.coords), tp.value(s)};
  };

  auto [coords, scores] = run(imgs, poses);
  REQUIRE(coords.shape == std::vector<int>{2, 4, 16, 16});
  REQUIRE(scores.shape == std::vector<int>{2, 3, 16, 16});
  for (double v : coords.data) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 256; ++i) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += scores.at4(b, k, i / 16, i % 16);
      REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
    }

  // permuting the source order changes nothing
  Tensor<double> imgs_p({3, 3, 16, 16}), poses_p({3, 3, 16, 16});
  int perm[3] = {2, 0, 1};
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 3 * 256; ++i) {
      imgs_p.data[j * 3 * 256 + i] = imgs.data[perm[j] * 3 * 256 + i];
      poses_p.data[j * 3 * 256 + i] = poses.data[perm[j] * 3 * 256 + i];
    }
  auto [coords_p, scores_p] = run(imgs_p, poses_p);
  REQUIRE(max_abs_diff(coords, coords_p) <= 1e-5);
  REQUIRE(max_abs_diff(scores, scores_p) <= 1e-5);

  // b copies of one source behave like a single source
  auto one_img = Tensor<double>({1, 3, 16, 16});
  auto one_pose = Tensor<double>({1, 3, 16, 16});
  std::copy_n(imgs.data.begin(), 3 * 256, one_img.data.begin());
  std::copy_n(poses.data.begin(), 3 * 256, one_pose.data.begin());
  Tensor<double> dup_img({3, 3, 16, 16}), dup_pose({3, 3, 16, 16});
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 3 * 256; ++i) {
      dup_img.data[j * 3 * 256 + i] = one_img.data[i];
      dup_pose.data[j * 3 * 256 + i] = one_pose.data[i];
    }
  auto [c1, s1] = run(one_img, one_pose);
  auto [c3, s3] = run(dup_img, dup_pose);
  REQUIRE(max_abs_diff(c1, c3) <= 1e-5);
  REQUIRE(max_abs_diff(s1, s3) <= 1e-5);
}

TEST_CASE("geometry forward gradient check on a tiny config") {
  GeometryConfig cfg = tiny_cfg();
  auto ps = init_geometry_params<double>(cfg, 11);
  Rng rng(12);
  std::map<std::string, Tensor<double>> in = ps.tensors;
  in["in.src_img"] = rand_t(rng, {2, 3, 16, 16});
  in["in.src_pose"] = rand_t(rng, {2, 3, 16, 16});
  in["in.tgt_pose"] = rand_t(rng, {1, 3, 16, 16});
  Tensor<double> wc = rand_t(rng, {1, 4, 16, 16}, -1, 1);
  Tensor<double> ws = rand_t(rng, {1, 3, 16, 16}, -1, 1);

  auto fwd = [&](Tape<double>& tp, std::map<std::string, Var>& v) {
    ParamSet<double> dummy;
    ParamBinder<double> pb(tp, dummy, true);
    for (auto& [name, var] : v)
      if (name.rfind("in.", 0) != 0) pb.bind_external(name, var);
    auto srcs = encode_sources(pb, cfg, v["in.src_img"], v["in.src_pose"]);
    auto out = geometry_forward(pb, cfg, v["in.tgt_pose"], srcs);
    Var s = part_scores(tp, out.score_logits);
    return add(tp, sum(tp, mul(tp, out.coords, tp.constant(wc))),
               sum(tp, mul(tp, s, tp.constant(ws))));
  };
  auto rep = grad_check(in, fwd, 1e-5, 500, 99);
  INFO(rep.worst_tensor);
  REQUIRE(rep.finite);
  REQUIRE(rep.max_rel_error <= 1e-3);
}

TEST_CASE("parameter bookkeeping and validation") {
  GeometryConfig cfg;  // desk
  auto ps = init_geometry_params<float>(cfg, 0);
  // every level of every subnet plus both heads exists
  for (const char* stem : {"EI", "EW", "EP", "DC", "DS"})
    for (int l = 0; l < 4; ++l)
      REQUIRE(ps.tensors.count(std::string(stem) + ".l" + std::to_string(l) + ".w") == 1);
  REQUIRE(ps.tensors.count("DC.head.w") == 1);
  REQUIRE(ps.tensors.count("DS.head.w") == 1);
  REQUIRE(ps.at("DC.head.w").shape == std::vector<int>{16, 16, 3, 3});
  REQUIRE(ps.at("DS.head.w").shape == std::vector<int>{9, 16, 3, 3});
  REQUIRE(ps.param_count() > 0);

  GeometryConfig bad = cfg;
  bad.image_size = 60;  // not divisible by 2^4
  REQUIRE_THROWS(init_geometry_params<float>(bad, 0));
  bad = cfg;
  bad.first_kernel = 4;
  REQUIRE_THROWS(init_geometry_params<float>(bad, 0));
}
