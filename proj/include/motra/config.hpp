#pragma once

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "motra/trainer.hpp"

namespace motra {

struct EvalConfig {
  int frames = 20;  // held-out frames scored per person

  void validate() const {
    if (frames < 1) throw std::invalid_argument("eval.frames >= 1");
  }
};

// Full run description: world generation, model shapes, training schedules,
// fine-tuning and evaluation. A top-level seed feeds every section unless the
// section sets its own.
struct RunConfig {
  world::WorldConfig world;
  TrainConfig train;
  FinetuneConfig finetune;
  EvalConfig eval;
  uint64_t seed = 0;

  void validate() const {
    world.validate();
    train.validate();
    finetune.validate();
    eval.validate();
    if (train.geometry.n_parts != world.n_parts || train.texture.n_parts != world.n_parts)
      throw std::invalid_argument("config: model n_parts must match world.n_parts");
    if (train.geometry.image_size != world.image_size)
      throw std::invalid_argument("config: geometry.image_size must match world.image_size");
    if (train.texture.atlas_size != world.atlas_size)
      throw std::invalid_argument("config: texture.atlas_size must match world.atlas_size");
  }
};

namespace cfgdetail {

inline void strict(const nlohmann::json& j, const std::string& where,
                   const std::set<std::string>& allowed) {
  if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

}  // namespace cfgdetail

inline nlohmann::json finetune_config_json(const FinetuneConfig& c) {
  return {{"geometry_steps", c.geometry_steps},
          {"embed_bg_steps", c.embed_bg_steps},
          {"lr_geometry", c.lr_geometry},
          {"lr_embed_bg", c.lr_embed_bg},
          {"b_sources", c.b_sources},
          {"targets_per_step", c.targets_per_step},
          {"sources_per_step", c.sources_per_step},
          {"weights", loss_weights_json(c.weights)},
          {"feature_seed", c.feature_seed},
          {"seed", c.seed}};
}

inline nlohmann::json run_config_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"world", world::world_config_json(c.world)},
          {"model",
           {{"geometry", geometry_config_json(c.train.geometry)},
            {"texture", texture_config_json(c.train.texture)}}},
          {"train",
           [&] {
             nlohmann::json t = train_config_json(c.train);
             t.erase("geometry");
             t.erase("texture");
             return t;
           }()},
          {"finetune", finetune_config_json(c.finetune)},
          {"eval", {{"frames", c.eval.frames}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using cfgdetail::strict;
  strict(j, "top level", {"seed", "world", "model", "train", "finetune", "eval"});
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.world.seed = c.seed;
  c.train.seed = c.seed;
  c.finetune.seed = c.seed;

  if (j.contains("world")) {
    const auto& w = j.at("world");
    strict(w, "world",
           {"n_parts", "image_size", "atlas_size", "persons_train", "persons_test",
            "frames_per_person", "stick_width", "max_angle_delta", "seed"});
    c.world.n_parts = w.value("n_parts", c.world.n_parts);
    c.world.image_size = w.value("image_size", c.world.image_size);
    c.world.atlas_size = w.value("atlas_size", c.world.atlas_size);
    c.world.persons_train = w.value("persons_train", c.world.persons_train);
    c.world.persons_test = w.value("persons_test", c.world.persons_test);
    c.world.frames_per_person = w.value("frames_per_person", c.world.frames_per_person);
    c.world.stick_width = w.value("stick_width", c.world.stick_width);
    c.world.max_angle_delta = w.value("max_angle_delta", c.world.max_angle_delta);
    c.world.seed = w.value("seed", c.world.seed);
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    strict(m, "model", {"geometry", "texture"});
    if (m.contains("geometry")) {
      strict(m.at("geometry"), "model.geometry",
             {"n_parts", "stickman_channels", "image_size", "channels", "first_kernel",
              "decoder_kernel", "n_resblocks", "attention_normalize"});
      c.train.geometry = geometry_config_from_json(m.at("geometry"));
    }
    if (m.contains("texture")) {
      strict(m.at("texture"), "model.texture",
             {"n_parts", "atlas_size", "channels", "n_resblocks", "first_kernel"});
      c.train.texture = texture_config_from_json(m.at("texture"));
    }
  }
  // the model follows the world unless set explicitly
  if (!j.contains("model") || !j.at("model").contains("geometry")) {
    c.train.geometry.n_parts = c.world.n_parts;
    c.train.geometry.image_size = c.world.image_size;
  }
  if (!j.contains("model") || !j.at("model").contains("texture")) {
    c.train.texture.n_parts = c.world.n_parts;
    c.train.texture.atlas_size = c.world.atlas_size;
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    strict(t, "train",
           {"init_epochs", "init_halve", "mv_epochs", "mv_halve", "base_lr", "batch_init_geo",
            "batch_init_tex", "batch_mv", "steps_per_person", "b_train", "clip_norm", "weights",
            "val_fraction", "seed", "feature_seed"});
    if (t.contains("weights"))
      strict(t.at("weights"), "train.weights",
             {"lambda_I", "lambda_M", "lambda_RT", "lambda_RC", "lambda_RM"});
    uint64_t seed = c.train.seed;
    auto geo = c.train.geometry;
    auto tex = c.train.texture;
    c.train = train_config_from_json(t);
    c.train.geometry = geo;
    c.train.texture = tex;
    if (!t.contains("seed")) c.train.seed = seed;
  }

  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    strict(f, "finetune",
           {"geometry_steps", "embed_bg_steps", "lr_geometry", "lr_embed_bg", "b_sources",
            "targets_per_step", "sources_per_step", "weights", "feature_seed", "seed"});
    if (f.contains("weights"))
      strict(f.at("weights"), "finetune.weights",
             {"lambda_I", "lambda_M", "lambda_RT", "lambda_RC", "lambda_RM"});
    c.finetune.geometry_steps = f.value("geometry_steps", c.finetune.geometry_steps);
    c.finetune.embed_bg_steps = f.value("embed_bg_steps", c.finetune.embed_bg_steps);
    c.finetune.lr_geometry = f.value("lr_geometry", c.finetune.lr_geometry);
    c.finetune.lr_embed_bg = f.value("lr_embed_bg", c.finetune.lr_embed_bg);
    c.finetune.b_sources = f.value("b_sources", c.finetune.b_sources);
    c.finetune.targets_per_step = f.value("targets_per_step", c.finetune.targets_per_step);
    c.finetune.sources_per_step = f.value("sources_per_step", c.finetune.sources_per_step);
    if (f.contains("weights")) c.finetune.weights = loss_weights_from_json(f.at("weights"));
    c.finetune.feature_seed = f.value("feature_seed", c.finetune.feature_seed);
    c.finetune.seed = f.value("seed", c.finetune.seed);
  }

  if (j.contains("eval")) {
    strict(j.at("eval"), "eval", {"frames"});
    c.eval.frames = j.at("eval").value("frames", c.eval.frames);
  }

  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config: parse error in " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace motra
