#pragma once

#include <vector>

#include "motra/geometry_gen.hpp"
#include "motra/gradcheck.hpp"
#include "motra/losses.hpp"
#include "motra/renderer.hpp"
#include "motra/texture_gen.hpp"

namespace motra {

// One analytic-vs-finite-difference check; end-to-end generator graphs get the
// looser tolerance because float-free double FD still accumulates curvature.
struct GradSuiteItem {
  std::string name;
  double tol = 1e-4;
  GradCheckReport rep;

  bool pass() const { return rep.ok(tol); }
};

// Central-difference checks across the renderer, network blocks, both
// generators, and every loss term. Deterministic; runs in well under a minute.
inline std::vector<GradSuiteItem> run_grad_suite() {
  std::vector<GradSuiteItem> items;
  auto check = [&](const std::string& name, double tol,
                 std::map<std::string, Tensor<double>> in,
                 const std::function<Var(Tape<double>&, std::map<std::string, Var>&)>& fwd,
                 int max_entries = 0, uint64_t seed = 0) {
    GradSuiteItem it{name, tol, grad_check(std::move(in), fwd, 1e-5, max_entries, seed)};
    items.push_back(std::move(it));
  };
  auto rand_t = [](Rng& rng, std::vector<int> shape, double lo = 0.05, double hi = 0.95) {
    Tensor<double> t(std::move(shape));
    rng.fill_uniform(t, lo, hi);
    return t;
  };

  {  // renderer w.r.t. atlas, coordinates, scores, and background
    Rng rng(301);
    std::map<std::string, Tensor<double>> in{{"tex", rand_t(rng, {2, 3, 4, 4})},
                                             {"uv", rand_t(rng, {1, 4, 6, 6}, 0.1, 0.9)},
                                             {"scores", rand_t(rng, {1, 3, 6, 6})},
                                             {"bg", rand_t(rng, {3, 6, 6})}};
    Tensor<double> w = rand_t(rng, {1, 3, 6, 6}, -1, 1);
    check("renderer.render", 1e-4, in, [w](Tape<double>& tp, std::map<std::string, Var>& v) {
      Var o = render(tp, v["tex"], v["uv"], v["scores"], v["bg"]);
      return sum(tp, mul(tp, o, tp.constant(w)));
    });
  }

  {  // conv + relu + instance norm
    Rng rng(302);
    std::map<std::string, Tensor<double>> in{{"x", rand_t(rng, {2, 3, 6, 6}, -1, 1)},
                                             {"w", rand_t(rng, {4, 3, 3, 3}, -0.5, 0.5)},
                                             {"b", rand_t(rng, {4}, -0.2, 0.2)}};
    Tensor<double> m = rand_t(rng, {2, 4, 3, 3}, -1, 1);
    check("netblocks.crn", 1e-4, in, [m](Tape<double>& tp, std::map<std::string, Var>& v) {
      return sum(tp, mul(tp, crn(tp, v["x"], v["w"], v["b"], 2), tp.constant(m)));
    });
  }

  {  // residual block
    Rng rng(303);
    ParamSet<double> ps;
    add_resblock(ps, "rb", 3, Rng(304));
    std::map<std::string, Tensor<double>> in = ps.tensors;
    in["in.x"] = rand_t(rng, {1, 3, 6, 6}, -1, 1);
    Tensor<double> m = rand_t(rng, {1, 3, 6, 6}, -1, 1);
    check("netblocks.resblock", 1e-4, in, [m](Tape<double>& tp, std::map<std::string, Var>& v) {
      ParamSet<double> dummy;
      ParamBinder<double> pb(tp, dummy, true);
      for (auto& [name, var] : v)
        if (name != "in.x") pb.bind_external(name, var);
      return sum(tp, mul(tp, resblock(pb, "rb", v["in.x"]), tp.constant(m)));
    });
  }

  GeometryConfig gc;
  gc.n_parts = 2;
  gc.stickman_channels = 3;
  gc.image_size = 8;
  gc.channels = {4, 6};
  gc.n_resblocks = 1;
  {  // geometry generator end to end, parameters and inputs
    Rng rng(305);
    std::map<std::string, Tensor<double>> in = init_geometry_params<double>(gc, 31).tensors;
    in["in.src_img"] = rand_t(rng, {2, 3, 8, 8});
    in["in.src_pose"] = rand_t(rng, {2, 3, 8, 8});
    in["in.tgt_pose"] = rand_t(rng, {1, 3, 8, 8});
    Tensor<double> wc = rand_t(rng, {1, 4, 8, 8}, -1, 1);
    Tensor<double> ws = rand_t(rng, {1, 3, 8, 8}, -1, 1);
    check(
        "geometry_gen.forward", 1e-3, in,
        [gc, wc, ws](Tape<double>& tp, std::map<std::string, Var>& v) {
          ParamSet<double> dummy;
          ParamBinder<double> pb(tp, dummy, true);
          for (auto& [name, var] : v)
            if (name.rfind("in.", 0) != 0) pb.bind_external(name, var);
          auto srcs = encode_sources(pb, gc, v["in.src_img"], v["in.src_pose"]);
          auto out = geometry_forward(pb, gc, v["in.tgt_pose"], srcs);
          Var s = part_scores(tp, out.score_logits);
          return add(tp, sum(tp, mul(tp, out.coords, tp.constant(wc))),
                     sum(tp, mul(tp, s, tp.constant(ws))));
        },
        300, 99);
  }

  TextureConfig tc;
  tc.n_parts = 2;
  tc.atlas_size = 8;
  tc.channels = {4, 6, 8};
  tc.n_resblocks = 1;
  {  // texture generator end to end
    Rng rng(306);
    std::map<std::string, Tensor<double>> in = init_texture_params<double>(tc, 32).tensors;
    in["in.partials"] = rand_t(rng, {2, 6, 8, 8});
    Tensor<double> w = rand_t(rng, {1, 6, 8, 8}, -1, 1);
    check(
        "texture_gen.forward", 1e-3, in,
        [tc, w](Tape<double>& tp, std::map<std::string, Var>& v) {
          ParamSet<double> dummy;
          ParamBinder<double> pb(tp, dummy, true);
          for (auto& [name, var] : v)
            if (name.rfind("in.", 0) != 0) pb.bind_external(name, var);
          return sum(tp, mul(tp, texture_forward(pb, tc, v["in.partials"]), tp.constant(w)));
        },
        300, 98);
  }

  {  // image loss with the frozen feature pyramid
    Rng rng(307);
    FeatureExtractor<double> fx(3, 5, {4, 6}, 3);
    Tensor<double> target = rand_t(rng, {1, 3, 8, 8});
    Tensor<double> mask = rand_t(rng, {1, 1, 8, 8});
    std::map<std::string, Tensor<double>> in{{"rendered", rand_t(rng, {1, 3, 8, 8})}};
    check("losses.image_loss", 1e-4, in,
        [fx, target, mask](Tape<double>& tp, std::map<std::string, Var>& v) {
          return image_loss(tp, v["rendered"], target, &mask, fx);
        });
  }

  {  // mask loss
    Rng rng(308);
    Tensor<double> m = rand_t(rng, {1, 1, 6, 6});
    std::map<std::string, Tensor<double>> in{{"logits", rand_t(rng, {1, 3, 6, 6}, -1, 1)}};
    check("losses.mask_loss", 1e-4, in, [m](Tape<double>& tp, std::map<std::string, Var>& v) {
      return mask_loss(tp, part_scores(tp, v["logits"]), m);
    });
  }

  {  // initialization losses against the oracle
    Rng rng(309);
    Tensor<double> c_star = rand_t(rng, {1, 4, 6, 6});
    Tensor<double> s_star({1, 3, 6, 6});
    for (int i = 0; i < 36; ++i) s_star[(static_cast<int64_t>(i) % 3) * 36 + i] = 1.0;
    std::map<std::string, Tensor<double>> in{{"coords", rand_t(rng, {1, 4, 6, 6})},
                                             {"logits", rand_t(rng, {1, 3, 6, 6}, -1, 1)}};
    check("losses.init_geometry", 1e-4, in,
        [c_star, s_star](Tape<double>& tp, std::map<std::string, Var>& v) {
          auto [lc, ls] = loss_init_geometry(tp, v["coords"], v["logits"], c_star, s_star);
          return add(tp, lc, ls);
        });
  }

  {  // partial-texture reconstruction loss
    Rng rng(310);
    std::vector<Tensor<double>> partials{rand_t(rng, {2, 3, 4, 4}), rand_t(rng, {2, 3, 4, 4})};
    std::vector<Tensor<double>> sigmas{Tensor<double>({2, 4, 4}), Tensor<double>({2, 4, 4})};
    for (auto& s : sigmas)
      for (int64_t i = 0; i < s.numel(); i += 2) s[i] = 1.0;
    std::map<std::string, Tensor<double>> in{{"tex", rand_t(rng, {1, 6, 4, 4})}};
    check("losses.init_texture", 1e-4, in,
        [partials, sigmas](Tape<double>& tp, std::map<std::string, Var>& v) {
          return loss_init_texture(tp, v["tex"], partials, sigmas);
        });
  }

  {  // coordinate regularizer (both the coords and the score mass get grads)
    Rng rng(311);
    Tensor<double> c_star = rand_t(rng, {1, 4, 6, 6});
    std::map<std::string, Tensor<double>> in{{"coords", rand_t(rng, {1, 4, 6, 6})},
                                             {"logits", rand_t(rng, {1, 3, 6, 6}, -1, 1)}};
    check("losses.reg_coord", 1e-4, in,
        [c_star](Tape<double>& tp, std::map<std::string, Var>& v) {
          return reg_coord_loss(tp, v["coords"], part_scores(tp, v["logits"]), c_star);
        });
  }

  {  // mask regularizer
    Rng rng(312);
    Tensor<double> s_star({1, 3, 6, 6});
    for (int i = 0; i < 36; ++i) s_star[(static_cast<int64_t>(i) % 3) * 36 + i] = 1.0;
    std::map<std::string, Tensor<double>> in{{"logits", rand_t(rng, {1, 3, 6, 6}, -1, 1)}};
    check("losses.reg_mask", 1e-4, in,
        [s_star](Tape<double>& tp, std::map<std::string, Var>& v) {
          return reg_mask_loss(tp, v["logits"], s_star);
        });
  }

  return items;
}

}  // namespace motra
