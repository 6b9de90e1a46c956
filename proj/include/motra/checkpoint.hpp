#pragma once

#include <string>

#include "motra/adam.hpp"
#include "motra/bundle.hpp"
#include "motra/netblocks.hpp"

namespace motra {

// Everything needed to resume or apply a model: both generators, the
// optional per-person personalization (embedding t, background B), optimizer
// state, and the training-loop RNG position.
struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();  // run config echo
  ParamSet<float> geo, tex;
  Tensor<float> embedding;   // (1,C,h,w); empty until fine-tuning
  Tensor<float> background;  // (3,H,W); empty until fine-tuning
  Tensor<float> src_images;  // (b,3,H,W) conditioning set; empty until fine-tuning
  Tensor<float> src_poses;   // (b,stickman,H,W)
  AdamState<float> opt_geo, opt_tex;
  uint64_t rng_state = 0;
  int epoch = 0;
};

namespace ckptdetail {

inline void put_group(Bundle& b, const std::string& prefix,
                      const std::map<std::string, Tensor<float>>& ts) {
  for (const auto& [name, t] : ts) b.put(prefix + name, t);
}

inline void get_group(const Bundle& b, const std::string& prefix,
                      std::map<std::string, Tensor<float>>& ts) {
  for (const auto& [name, t] : b.tensors())
    if (name.rfind(prefix, 0) == 0) ts[name.substr(prefix.size())] = t;
}

inline void put_adam(Bundle& b, const std::string& prefix, const AdamState<float>& st) {
  put_group(b, prefix + "m/", st.m);
  put_group(b, prefix + "v/", st.v);
  b.meta[prefix + "step"] = st.step;
}

inline void get_adam(const Bundle& b, const std::string& prefix, AdamState<float>& st) {
  get_group(b, prefix + "m/", st.m);
  get_group(b, prefix + "v/", st.v);
  if (b.meta.contains(prefix + "step")) st.step = b.meta.at(prefix + "step").get<int64_t>();
}

}  // namespace ckptdetail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  Bundle b;
  b.meta["config"] = ck.config;
  b.meta["rng_state"] = ck.rng_state;
  b.meta["epoch"] = ck.epoch;
  ckptdetail::put_group(b, "geo/", ck.geo.tensors);
  ckptdetail::put_group(b, "tex/", ck.tex.tensors);
  if (ck.embedding.numel() > 0) b.put("embedding", ck.embedding);
  if (ck.background.numel() > 0) b.put("background", ck.background);
  if (ck.src_images.numel() > 0) b.put("src_images", ck.src_images);
  if (ck.src_poses.numel() > 0) b.put("src_poses", ck.src_poses);
  ckptdetail::put_adam(b, "opt_geo/", ck.opt_geo);
  ckptdetail::put_adam(b, "opt_tex/", ck.opt_tex);
  b.save(path, kMagicCheckpoint);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  Bundle b = Bundle::load(path, kMagicCheckpoint);
  Checkpoint ck;
  ck.config = b.meta.value("config", nlohmann::json::object());
  ck.rng_state = b.meta.value("rng_state", uint64_t{0});
  ck.epoch = b.meta.value("epoch", 0);
  ckptdetail::get_group(b, "geo/", ck.geo.tensors);
  ckptdetail::get_group(b, "tex/", ck.tex.tensors);
  if (b.has("embedding")) ck.embedding = b.get("embedding");
  if (b.has("background")) ck.background = b.get("background");
  if (b.has("src_images")) ck.src_images = b.get("src_images");
  if (b.has("src_poses")) ck.src_poses = b.get("src_poses");
  ckptdetail::get_adam(b, "opt_geo/", ck.opt_geo);
  ckptdetail::get_adam(b, "opt_tex/", ck.opt_tex);
  return ck;
}

// Refuses checkpoints whose parameter shapes disagree with a freshly
// initialized model of the given configs, naming the offending tensor.
template <typename GeoCfg, typename TexCfg, typename GeoInit, typename TexInit>
void check_checkpoint_shapes(const Checkpoint& ck, const GeoCfg& gc, const TexCfg& tc,
                             GeoInit geo_init, TexInit tex_init) {
  ParamSet<float> g = geo_init(gc, /*seed=*/0);
  ParamSet<float> t = tex_init(tc, /*seed=*/0);
  auto compare = [](const ParamSet<float>& want, const ParamSet<float>& have,
                    const char* group) {
    for (const auto& [name, w] : want.tensors) {
      auto it = have.tensors.find(name);
      if (it == have.tensors.end())
        throw std::runtime_error(std::string("checkpoint: missing tensor ") + group + "/" + name);
      if (it->second.shape != w.shape)
        throw std::runtime_error(std::string("checkpoint: shape mismatch for ") + group + "/" +
                                 name);
    }
  };
  compare(g, ck.geo, "geo");
  compare(t, ck.tex, "tex");
}

}  // namespace motra
