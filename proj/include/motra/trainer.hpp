#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "motra/adam.hpp"
#include "motra/checkpoint.hpp"
#include "motra/geometry_gen.hpp"
#include "motra/losses.hpp"
#include "motra/renderer.hpp"
#include "motra/synthworld.hpp"
#include "motra/texture_gen.hpp"

namespace motra {

struct TrainConfig {
  GeometryConfig geometry;
  TextureConfig texture;
  int init_epochs = 10;
  std::vector<int> init_halve = {5};
  int mv_epochs = 15;
  std::vector<int> mv_halve = {5, 10};
  double base_lr = 2e-4;
  int batch_init_geo = 16;
  int batch_init_tex = 8;
  int batch_mv = 10;
  int steps_per_person = 1;  // minibatch draws per person per epoch
  int b_train = 4;           // source images per batch
  double clip_norm = 10.0;
  LossWeights weights;
  double val_fraction = 0.1;  // trailing frames held out per person
  uint64_t seed = 0;
  uint64_t feature_seed = 17;

  void validate() const {
    geometry.validate();
    texture.validate();
    if (init_epochs < 0 || mv_epochs < 0) throw std::invalid_argument("train: epochs >= 0");
    if (base_lr <= 0) throw std::invalid_argument("train: base_lr > 0");
    if (batch_init_geo < 1 || batch_init_tex < 1 || batch_mv < 1 || steps_per_person < 1 ||
        b_train < 1)
      throw std::invalid_argument("train: batch sizes >= 1");
    if (val_fraction <= 0 || val_fraction >= 1)
      throw std::invalid_argument("train: val_fraction in (0,1)");
  }
};

struct FinetuneConfig {
  int geometry_steps = 40;
  int embed_bg_steps = 300;
  double lr_geometry = 2e-4;
  double lr_embed_bg = 5e-3;
  int b_sources = 20;
  int targets_per_step = 4;
  int sources_per_step = 4;  // conditioning subset per geometry step
  LossWeights weights;
  uint64_t feature_seed = 17;
  uint64_t seed = 0;

  void validate() const {
    if (geometry_steps < 0 || embed_bg_steps < 0) throw std::invalid_argument("finetune: steps >= 0");
    if (lr_geometry <= 0 || lr_embed_bg <= 0) throw std::invalid_argument("finetune: lrs > 0");
    if (b_sources < 1 || targets_per_step < 1 || sources_per_step < 1)
      throw std::invalid_argument("finetune: batch sizes >= 1");
  }
};

struct TrainDivergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using LogFn = std::function<void(const nlohmann::json&)>;

inline nlohmann::json geometry_config_json(const GeometryConfig& c) {
  return {{"n_parts", c.n_parts},       {"stickman_channels", c.stickman_channels},
          {"image_size", c.image_size}, {"channels", c.channels},
          {"first_kernel", c.first_kernel}, {"decoder_kernel", c.decoder_kernel},
          {"n_resblocks", c.n_resblocks},   {"attention_normalize", c.attention_normalize}};
}

inline GeometryConfig geometry_config_from_json(const nlohmann::json& j) {
  GeometryConfig c;
  c.n_parts = j.value("n_parts", c.n_parts);
  c.stickman_channels = j.value("stickman_channels", c.stickman_channels);
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.first_kernel = j.value("first_kernel", c.first_kernel);
  c.decoder_kernel = j.value("decoder_kernel", c.decoder_kernel);
  c.n_resblocks = j.value("n_resblocks", c.n_resblocks);
  c.attention_normalize = j.value("attention_normalize", c.attention_normalize);
  return c;
}

inline nlohmann::json texture_config_json(const TextureConfig& c) {
  return {{"n_parts", c.n_parts}, {"atlas_size", c.atlas_size}, {"channels", c.channels},
          {"n_resblocks", c.n_resblocks}, {"first_kernel", c.first_kernel}};
}

inline TextureConfig texture_config_from_json(const nlohmann::json& j) {
  TextureConfig c;
  c.n_parts = j.value("n_parts", c.n_parts);
  c.atlas_size = j.value("atlas_size", c.atlas_size);
  c.channels = j.value("channels", c.channels);
  c.n_resblocks = j.value("n_resblocks", c.n_resblocks);
  c.first_kernel = j.value("first_kernel", c.first_kernel);
  return c;
}

inline nlohmann::json loss_weights_json(const LossWeights& w) {
  return {{"lambda_I", w.lambda_I}, {"lambda_M", w.lambda_M}, {"lambda_RT", w.lambda_RT},
          {"lambda_RC", w.lambda_RC}, {"lambda_RM", w.lambda_RM}};
}

inline LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  w.lambda_I = j.value("lambda_I", w.lambda_I);
  w.lambda_M = j.value("lambda_M", w.lambda_M);
  w.lambda_RT = j.value("lambda_RT", w.lambda_RT);
  w.lambda_RC = j.value("lambda_RC", w.lambda_RC);
  w.lambda_RM = j.value("lambda_RM", w.lambda_RM);
  return w;
}

inline nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"geometry", geometry_config_json(c.geometry)},
          {"texture", texture_config_json(c.texture)},
          {"init_epochs", c.init_epochs},     {"init_halve", c.init_halve},
          {"mv_epochs", c.mv_epochs},         {"mv_halve", c.mv_halve},
          {"base_lr", c.base_lr},             {"batch_init_geo", c.batch_init_geo},
          {"batch_init_tex", c.batch_init_tex}, {"batch_mv", c.batch_mv},
          {"steps_per_person", c.steps_per_person}, {"b_train", c.b_train},
          {"clip_norm", c.clip_norm},         {"weights", loss_weights_json(c.weights)},
          {"val_fraction", c.val_fraction},   {"seed", c.seed},
          {"feature_seed", c.feature_seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("geometry")) c.geometry = geometry_config_from_json(j.at("geometry"));
  if (j.contains("texture")) c.texture = texture_config_from_json(j.at("texture"));
  c.init_epochs = j.value("init_epochs", c.init_epochs);
  c.init_halve = j.value("init_halve", c.init_halve);
  c.mv_epochs = j.value("mv_epochs", c.mv_epochs);
  c.mv_halve = j.value("mv_halve", c.mv_halve);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.batch_init_geo = j.value("batch_init_geo", c.batch_init_geo);
  c.batch_init_tex = j.value("batch_init_tex", c.batch_init_tex);
  c.batch_mv = j.value("batch_mv", c.batch_mv);
  c.steps_per_person = j.value("steps_per_person", c.steps_per_person);
  c.b_train = j.value("b_train", c.b_train);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  if (j.contains("weights")) c.weights = loss_weights_from_json(j.at("weights"));
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.seed = j.value("seed", c.seed);
  c.feature_seed = j.value("feature_seed", c.feature_seed);
  return c;
}

// Piecewise-constant halving: lr(epoch) = base / 2^(#{h in halve : epoch >= h}).
inline double lr_at(double base, int epoch, const std::vector<int>& halve) {
  double lr = base;
  for (int h : halve)
    if (epoch >= h) lr *= 0.5;
  return lr;
}

namespace trdetail {

inline void log_line(const LogFn& log, nlohmann::json j) {
  if (log) log(std::move(j));
}

template <typename V>
void shuffle_vec(std::vector<V>& v, Rng& rng) {
  for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
    std::swap(v[i], v[rng.uniform_int(i + 1)]);
}

inline Tensor<float> stack0(const std::vector<Tensor<float>>& ts) {
  std::vector<int> shape{static_cast<int>(ts.size())};
  for (int d : ts[0].shape) shape.push_back(d);
  Tensor<float> out(shape);
  int64_t per = ts[0].numel();
  for (size_t i = 0; i < ts.size(); ++i) {
    check_shape(ts[i], ts[0].shape, "stack0");
    std::copy(ts[i].data.begin(), ts[i].data.end(), out.data.begin() + i * per);
  }
  return out;
}

// k distinct indices from [0, limit)
inline std::vector<int> sample_distinct(int limit, int k, Rng& rng) {
  if (k > limit) throw std::runtime_error("sampler: insufficient frames");
  std::vector<int> idx(limit);
  for (int i = 0; i < limit; ++i) idx[i] = i;
  for (int i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.uniform_int(limit - i)]);
  idx.resize(k);
  return idx;
}

}  // namespace trdetail

// One training minibatch: b source frames conditioning the generators and
// `batch` disjoint target frames with their oracles, all from one person.
struct PersonBatch {
  std::string person;
  std::vector<int> src_idx, tgt_idx;
  Tensor<float> src_images, src_poses;
  std::vector<Tensor<float>> partial_atlas;  // per source, (n,3,ht,wt)
  std::vector<Tensor<float>> partial_sigma;  // per source, (n,ht,wt)
  Tensor<float> tgt_poses, tgt_images, tgt_masks, c_star, s_star;
};

// frame_limit < 0 means the whole sequence; otherwise frames [0, frame_limit)
// are eligible (the tail being a validation hold-out).
inline PersonBatch sample_person_batch(const world::Dataset& ds, const std::string& person, int b,
                                       int batch, int atlas_size, Rng& rng,
                                       int frame_limit = -1) {
  int limit = frame_limit < 0 ? ds.frames_of(person) : frame_limit;
  auto idx = trdetail::sample_distinct(limit, b + batch, rng);

  PersonBatch out;
  out.person = person;
  out.src_idx.assign(idx.begin(), idx.begin() + b);
  out.tgt_idx.assign(idx.begin() + b, idx.end());

  std::vector<Tensor<float>> si, sp, tpz, ti, tm, cs, ss;
  for (int i : out.src_idx) {
    const Bundle& f = ds.frame(person, i);
    si.push_back(f.get("image"));
    sp.push_back(f.get("stickman"));
    auto pt = world::extract_partial_texture(f.get("image"), f.get("uv"), f.get("scores"),
                                             atlas_size);
    out.partial_atlas.push_back(std::move(pt.atlas));
    out.partial_sigma.push_back(std::move(pt.sigma));
  }
  for (int i : out.tgt_idx) {
    const Bundle& f = ds.frame(person, i);
    tpz.push_back(f.get("stickman"));
    ti.push_back(f.get("image"));
    tm.push_back(f.get("mask"));
    cs.push_back(f.get("uv"));
    ss.push_back(f.get("scores"));
  }
  out.src_images = trdetail::stack0(si);
  out.src_poses = trdetail::stack0(sp);
  out.tgt_poses = trdetail::stack0(tpz);
  out.tgt_images = trdetail::stack0(ti);
  out.tgt_masks = trdetail::stack0(tm);
  out.c_star = trdetail::stack0(cs);
  out.s_star = trdetail::stack0(ss);
  return out;
}

namespace trdetail {

// partial atlases of one batch as a (b,3n,ht,wt) network input
inline Tensor<float> stack_partials(const PersonBatch& pb) {
  std::vector<Tensor<float>> flat;
  for (const auto& a : pb.partial_atlas) {
    Tensor<float> f({a.shape[0] * a.shape[1], a.shape[2], a.shape[3]});
    f.data = a.data;  // (n,3,h,w) is already part-major contiguous
    flat.push_back(std::move(f));
  }
  return stack0(flat);
}

inline void guard_finite(double v, const char* where, Checkpoint& ck, const Checkpoint& last_good,
                         const LogFn& log) {
  if (std::isfinite(v)) return;
  log_line(log, {{"event", "divergence"}, {"stage", where}});
  ck = last_good;
  throw TrainDivergence(std::string("training diverged in ") + where);
}

}  // namespace trdetail

// Held-out metrics for the initialization stage: mean L_C / L_S and
// argmax-score pixel accuracy over validation frames of the train persons.
struct InitValReport {
  double l_c = 0, l_s = 0, accuracy = 0;
};

inline InitValReport validate_geometry(const world::Dataset& ds, Checkpoint& ck,
                                       const TrainConfig& cfg, int frames_per_person = 2) {
  auto persons = ds.person_ids("train");
  Rng rng(Rng::mix(cfg.seed ^ 0x7a11da7eULL));
  InitValReport rep;
  int count = 0;
  int64_t hits = 0, pixels = 0;
  for (const auto& person : persons) {
    int frames = ds.frames_of(person);
    int limit = frames - static_cast<int>(frames * cfg.val_fraction);
    // sources from the train slice, targets from the held-out tail
    auto sidx = trdetail::sample_distinct(limit, cfg.b_train, rng);
    std::vector<Tensor<float>> si, sp, tpz, cs, ss;
    for (int i : sidx) {
      const Bundle& f = ds.frame(person, i);
      si.push_back(f.get("image"));
      sp.push_back(f.get("stickman"));
    }
    auto tidx = trdetail::sample_distinct(frames - limit, std::min(frames_per_person, frames - limit), rng);
    for (int i : tidx) {
      const Bundle& f = ds.frame(person, limit + i);
      tpz.push_back(f.get("stickman"));
      cs.push_back(f.get("uv"));
      ss.push_back(f.get("scores"));
    }
    Tape<float> tp;
    ParamBinder<float> pb(tp, ck.geo, false);
    auto srcs = encode_sources(pb, cfg.geometry, tp.constant(trdetail::stack0(si)),
                               tp.constant(trdetail::stack0(sp)));
    auto out = geometry_forward(pb, cfg.geometry, tp.constant(trdetail::stack0(tpz)), srcs);
    Tensor<float> c_star = trdetail::stack0(cs), s_star = trdetail::stack0(ss);
    auto [lc, ls] = loss_init_geometry(tp, out.coords, out.score_logits, c_star, s_star);
    rep.l_c += tp.value(lc)[0];
    rep.l_s += tp.value(ls)[0];
    ++count;

    const auto& logits = tp.value(out.score_logits);
    auto pred = lossdetail::argmax_channels(logits);
    auto want = lossdetail::argmax_channels(s_star);
    for (int64_t i = 0; i < pred.numel(); ++i) hits += pred.data[i] == want.data[i];
    pixels += pred.numel();
  }
  rep.l_c /= count;
  rep.l_s /= count;
  rep.accuracy = static_cast<double>(hits) / static_cast<double>(pixels);
  return rep;
}

// Masked-L1 reconstruction on held-out frames: full forward through both
// generators, foreground render compared against m * I*.
inline double validate_reconstruction(const world::Dataset& ds, Checkpoint& ck,
                                      const TrainConfig& cfg, int frames_per_person = 2) {
  auto persons = ds.person_ids("train");
  Rng rng(Rng::mix(cfg.seed ^ 0x7ec0f00dULL));
  double total = 0;
  int count = 0;
  for (const auto& person : persons) {
    int frames = ds.frames_of(person);
    int limit = frames - static_cast<int>(frames * cfg.val_fraction);
    Rng pr = rng.fork(std::hash<std::string>{}(person));
    auto sidx = trdetail::sample_distinct(limit, cfg.b_train, pr);
    PersonBatch pb_data;
    pb_data = sample_person_batch(ds, person, cfg.b_train, 1, cfg.texture.atlas_size, pr, limit);
    // overwrite targets with held-out frames
    (void)sidx;
    auto tidx = trdetail::sample_distinct(frames - limit,
                                          std::min(frames_per_person, frames - limit), pr);
    std::vector<Tensor<float>> tpz, ti, tm;
    for (int i : tidx) {
      const Bundle& f = ds.frame(person, limit + i);
      tpz.push_back(f.get("stickman"));
      ti.push_back(f.get("image"));
      tm.push_back(f.get("mask"));
    }
    Tensor<float> tgt_poses = trdetail::stack0(tpz);
    Tensor<float> tgt_images = trdetail::stack0(ti);
    Tensor<float> tgt_masks = trdetail::stack0(tm);

    Tape<float> tp;
    ParamBinder<float> gb(tp, ck.geo, false);
    ParamBinder<float> xb(tp, ck.tex, false);
    auto srcs = encode_sources(gb, cfg.geometry, tp.constant(pb_data.src_images),
                               tp.constant(pb_data.src_poses));
    auto out = geometry_forward(gb, cfg.geometry, tp.constant(tgt_poses), srcs);
    Var scores = part_scores(tp, out.score_logits);
    Var tex = texture_forward(xb, cfg.texture, tp.constant(trdetail::stack_partials(pb_data)));
    int n = cfg.texture.n_parts, nt = cfg.texture.atlas_size;
    Var texr = reshape(tp, tex, {n, 3, nt, nt});
    Var fg = render_fg(tp, texr, out.coords, scores);

    const auto& rv = tp.value(fg);
    double acc = 0, mass = 0;
    int64_t HW = static_cast<int64_t>(rv.shape[2]) * rv.shape[3];
    for (int b = 0; b < rv.shape[0]; ++b)
      for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < HW; ++i) {
          float m = tgt_masks.data[b * HW + i];
          acc += m * std::abs(rv.data[(static_cast<int64_t>(b) * 3 + c) * HW + i] -
                              tgt_images.data[(static_cast<int64_t>(b) * 3 + c) * HW + i]);
          mass += m;
        }
    total += mass > 0 ? acc / mass : 0;
    ++count;
  }
  return total / count;
}

// Stage 1: the geometry generator learns the oracle (C*, S*) maps, then the
// texture generator learns to complete partial textures.
inline Checkpoint stage_init(const world::Dataset& ds, const TrainConfig& cfg,
                             const LogFn& log = {}) {
  cfg.validate();
  Checkpoint ck;
  ck.config = train_config_json(cfg);
  ck.geo = init_geometry_params<float>(cfg.geometry, cfg.seed);
  ck.tex = init_texture_params<float>(cfg.texture, cfg.seed + 1);

  auto persons = ds.person_ids("train");
  if (persons.empty()) throw std::runtime_error("stage_init: no train persons");
  Rng rng(Rng::mix(cfg.seed ^ 0x5e1f1e57ULL));
  Checkpoint last_good = ck;

  for (int epoch = 0; epoch < cfg.init_epochs; ++epoch) {
    double lr = lr_at(cfg.base_lr, epoch, cfg.init_halve);
    auto order = persons;
    trdetail::shuffle_vec(order, rng);
    for (const auto& person : order) {
      int frames = ds.frames_of(person);
      int limit = frames - static_cast<int>(frames * cfg.val_fraction);
      for (int step = 0; step < cfg.steps_per_person; ++step) {
        // geometry step
        {
          auto batch = sample_person_batch(ds, person, cfg.b_train, cfg.batch_init_geo,
                                           cfg.texture.atlas_size, rng, limit);
          Tape<float> tp;
          ParamBinder<float> pb(tp, ck.geo, true);
          auto srcs = encode_sources(pb, cfg.geometry, tp.constant(batch.src_images),
                                     tp.constant(batch.src_poses));
          auto out = geometry_forward(pb, cfg.geometry, tp.constant(batch.tgt_poses), srcs);
          auto [lc, ls] =
              loss_init_geometry(tp, out.coords, out.score_logits, batch.c_star, batch.s_star);
          Var total = add(tp, lc, ls);
          trdetail::guard_finite(tp.value(total)[0], "init_geometry", ck, last_good, log);
          tp.backward(total);
          auto grads = pb.collect_grads();
          clip_global_norm(grads, cfg.clip_norm);
          adam_step(ck.geo.tensors, grads, ck.opt_geo, lr);
          trdetail::log_line(log, {{"stage", "init_geometry"},
                                   {"epoch", epoch},
                                   {"person", person},
                                   {"L_C", tp.value(lc)[0]},
                                   {"L_S", tp.value(ls)[0]},
                                   {"lr", lr}});
        }
        // texture step
        {
          auto batch = sample_person_batch(ds, person, cfg.batch_init_tex, 1,
                                           cfg.texture.atlas_size, rng, limit);
          Tape<float> tp;
          ParamBinder<float> pb(tp, ck.tex, true);
          Var tex = texture_forward(pb, cfg.texture,
                                    tp.constant(trdetail::stack_partials(batch)));
          bool warn = false;
          Var lt = loss_init_texture(tp, tex, batch.partial_atlas, batch.partial_sigma, &warn);
          trdetail::guard_finite(tp.value(lt)[0], "init_texture", ck, last_good, log);
          tp.backward(lt);
          auto grads = pb.collect_grads();
          clip_global_norm(grads, cfg.clip_norm);
          adam_step(ck.tex.tensors, grads, ck.opt_tex, lr);
          trdetail::log_line(log, {{"stage", "init_texture"},
                                   {"epoch", epoch},
                                   {"person", person},
                                   {"L_T", tp.value(lt)[0]},
                                   {"empty_sigma", warn},
                                   {"lr", lr}});
        }
      }
    }
    last_good = ck;
  }
  ck.rng_state = rng.state();
  ck.epoch = 0;
  return ck;
}

// Stage 2: joint training of both generators with the full objective.
// Resumes from ck.epoch; each finished epoch updates ck.epoch and the
// training RNG position so an interrupted run continues identically.
inline void stage_multivideo(const world::Dataset& ds, Checkpoint& ck, const TrainConfig& cfg,
                             const LogFn& log = {}) {
  cfg.validate();
  auto persons = ds.person_ids("train");
  if (persons.empty()) throw std::runtime_error("stage_multivideo: no train persons");
  Rng rng(Rng::mix(cfg.seed ^ 0x3117b00cULL));
  if (ck.epoch > 0) rng.set_state(ck.rng_state);
  FeatureExtractor<float> fx(3, cfg.feature_seed);
  int n = cfg.texture.n_parts, nt = cfg.texture.atlas_size;
  Checkpoint last_good = ck;

  for (int epoch = ck.epoch; epoch < cfg.mv_epochs; ++epoch) {
    double lr = lr_at(cfg.base_lr, epoch, cfg.mv_halve);
    auto order = persons;
    trdetail::shuffle_vec(order, rng);
    for (const auto& person : order) {
      int frames = ds.frames_of(person);
      int limit = frames - static_cast<int>(frames * cfg.val_fraction);
      for (int step = 0; step < cfg.steps_per_person; ++step) {
        auto batch = sample_person_batch(ds, person, cfg.b_train, cfg.batch_mv,
                                         cfg.texture.atlas_size, rng, limit);
        Tape<float> tp;
        ParamBinder<float> gb(tp, ck.geo, true);
        ParamBinder<float> xb(tp, ck.tex, true);
        auto srcs = encode_sources(gb, cfg.geometry, tp.constant(batch.src_images),
                                   tp.constant(batch.src_poses));
        auto out = geometry_forward(gb, cfg.geometry, tp.constant(batch.tgt_poses), srcs);
        Var scores = part_scores(tp, out.score_logits);
        Var tex = texture_forward(xb, cfg.texture,
                                  tp.constant(trdetail::stack_partials(batch)));
        Var texr = reshape(tp, tex, {n, 3, nt, nt});
        Var fg = render_fg(tp, texr, out.coords, scores);

        std::map<std::string, Var> terms;
        terms["L_I"] = image_loss(tp, fg, batch.tgt_images, &batch.tgt_masks, fx);
        terms["L_M"] = mask_loss(tp, scores, batch.tgt_masks);
        terms["L_RT"] = loss_init_texture(tp, tex, batch.partial_atlas, batch.partial_sigma);
        terms["L_RC"] = reg_coord_loss(tp, out.coords, scores, batch.c_star);
        terms["L_RM"] = reg_mask_loss(tp, out.score_logits, batch.s_star);
        LossReport rep;
        try {
          rep = total_loss(tp, terms, cfg.weights);
        } catch (const std::runtime_error&) {
          trdetail::guard_finite(std::nan(""), "multivideo", ck, last_good, log);
        }
        tp.backward(rep.total_var);
        auto geo_grads = gb.collect_grads();
        auto tex_grads = xb.collect_grads();
        clip_global_norm(geo_grads, cfg.clip_norm);
        clip_global_norm(tex_grads, cfg.clip_norm);
        adam_step(ck.geo.tensors, geo_grads, ck.opt_geo, lr);
        adam_step(ck.tex.tensors, tex_grads, ck.opt_tex, lr);
        nlohmann::json line = rep.to_json();
        line["stage"] = "multivideo";
        line["epoch"] = epoch;
        line["person"] = person;
        line["lr"] = lr;
        trdetail::log_line(log, std::move(line));
      }
    }
    ck.epoch = epoch + 1;
    ck.rng_state = rng.state();
    last_good = ck;
  }
}

// Median of the background-observed values per pixel; pixels no frame ever
// shows are filled by repeated nearest-valid-neighbor averaging.
inline Tensor<float> merge_background(const std::vector<Tensor<float>>& images,
                                      const std::vector<Tensor<float>>& masks) {
  if (images.empty() || images.size() != masks.size())
    throw std::invalid_argument("merge_background: need matching nonempty frames");
  int H = images[0].shape[1], W = images[0].shape[2];
  int64_t HW = static_cast<int64_t>(H) * W;
  Tensor<float> out({3, H, W});
  std::vector<uint8_t> filled(HW, 0);
  std::vector<float> vals;
  for (int64_t i = 0; i < HW; ++i) {
    for (int c = 0; c < 3; ++c) {
      vals.clear();
      for (size_t f = 0; f < images.size(); ++f)
        if (masks[f].data[i] < 0.5f) vals.push_back(images[f].data[c * HW + i]);
      if (vals.empty()) break;
      std::sort(vals.begin(), vals.end());
      size_t m = vals.size() / 2;
      out.data[c * HW + i] =
          vals.size() % 2 ? vals[m] : 0.5f * (vals[m - 1] + vals[m]);
      filled[i] = 1;
    }
  }
  // diffusion fill: average the already-filled 4-neighbors until covered
  for (;;) {
    std::vector<int64_t> frontier;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int64_t i = static_cast<int64_t>(y) * W + x;
        if (filled[i]) continue;
        float acc[3] = {0, 0, 0};
        int cnt = 0;
        auto take = [&](int yy, int xx) {
          int64_t j = static_cast<int64_t>(yy) * W + xx;
          if (filled[j]) {
            for (int c = 0; c < 3; ++c) acc[c] += out.data[c * HW + j];
            ++cnt;
          }
        };
        if (y > 0) take(y - 1, x);
        if (y + 1 < H) take(y + 1, x);
        if (x > 0) take(y, x - 1);
        if (x + 1 < W) take(y, x + 1);
        if (cnt > 0) {
          for (int c = 0; c < 3; ++c) out.data[c * HW + i] = acc[c] / cnt;
          frontier.push_back(i);
        }
      }
    if (frontier.empty()) break;
    for (int64_t i : frontier) filled[i] = 1;
  }
  return out;
}

namespace trdetail {

// loss of one fine-tune step; geometry recomputed when `geo_trainable`
struct FinetuneData {
  std::vector<Tensor<float>> images, poses, masks, uvs, scores;
  std::vector<Tensor<float>> partial_atlas, partial_sigma;
};

inline FinetuneData load_finetune_sources(const world::Dataset& ds, const std::string& person,
                                          int b, int atlas_size, Rng& rng) {
  FinetuneData d;
  auto idx = sample_distinct(ds.frames_of(person), b, rng);
  for (int i : idx) {
    const Bundle& f = ds.frame(person, i);
    d.images.push_back(f.get("image"));
    d.poses.push_back(f.get("stickman"));
    d.masks.push_back(f.get("mask"));
    d.uvs.push_back(f.get("uv"));
    d.scores.push_back(f.get("scores"));
    auto pt = world::extract_partial_texture(f.get("image"), f.get("uv"), f.get("scores"),
                                             atlas_size);
    d.partial_atlas.push_back(std::move(pt.atlas));
    d.partial_sigma.push_back(std::move(pt.sigma));
  }
  return d;
}

}  // namespace trdetail

// Few-shot personalization: initialize the embedding t as the mean encoding
// of the source partial textures and B from the merged visible background,
// then fine-tune geometry briefly and (t, B) for longer on the test loss.
// Returns a checkpoint carrying embedding, background and the source set.
inline Checkpoint finetune_fewshot(const Checkpoint& base, const world::Dataset& ds,
                                   const std::string& person, const FinetuneConfig& fc,
                                   const LogFn& log = {}) {
  fc.validate();
  TrainConfig tc = train_config_from_json(base.config);
  int n = tc.texture.n_parts, nt = tc.texture.atlas_size;

  Checkpoint ck = base;
  ck.opt_geo = AdamState<float>{};  // fresh optimizer per phase
  ck.opt_tex = AdamState<float>{};
  Rng rng(Rng::mix(fc.seed ^ 0xf17e57e9ULL));
  auto src = trdetail::load_finetune_sources(ds, person, fc.b_sources, nt, rng);
  int b = static_cast<int>(src.images.size());

  ck.src_images = trdetail::stack0(src.images);
  ck.src_poses = trdetail::stack0(src.poses);
  ck.background = merge_background(src.images, src.masks);
  {
    // t = mean of the encoded source partials
    Tape<float> tp;
    ParamBinder<float> xb(tp, ck.tex, false);
    std::vector<Tensor<float>> flat;
    for (const auto& a : src.partial_atlas) {
      Tensor<float> f({a.shape[0] * a.shape[1], a.shape[2], a.shape[3]});
      f.data = a.data;
      flat.push_back(std::move(f));
    }
    Var emb = encode_texture(xb, tc.texture, tp.constant(trdetail::stack0(flat)));
    ck.embedding = tp.value(merge_embeddings(tp, emb));
  }
  FeatureExtractor<float> fx(3, fc.feature_seed);

  auto step_targets = [&](Rng& r, int count) {
    return trdetail::sample_distinct(b, std::min(count, b), r);
  };
  auto gather = [&](const std::vector<Tensor<float>>& pool, const std::vector<int>& idx) {
    std::vector<Tensor<float>> sel;
    for (int i : idx) sel.push_back(pool[i]);
    return trdetail::stack0(sel);
  };

  // phase 1: geometry
  AdamState<float> opt_geo;
  Checkpoint best = ck;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int step = 0; step < fc.geometry_steps; ++step) {
    auto tgt = step_targets(rng, fc.targets_per_step);
    auto cond = trdetail::sample_distinct(b, std::min(fc.sources_per_step, b), rng);
    Tape<float> tp;
    ParamBinder<float> gb(tp, ck.geo, true);
    ParamBinder<float> xb(tp, ck.tex, false);
    auto srcs = encode_sources(gb, tc.geometry, tp.constant(gather(src.images, cond)),
                               tp.constant(gather(src.poses, cond)));
    auto out = geometry_forward(gb, tc.geometry, tp.constant(gather(src.poses, tgt)), srcs);
    Var scores = part_scores(tp, out.score_logits);
    Var tex = decode_texture(xb, tc.texture, tp.constant(ck.embedding));
    Var texr = reshape(tp, tex, {n, 3, nt, nt});
    Var img = render(tp, texr, out.coords, scores, tp.constant(ck.background));
    LossReport rep =
        test_loss(tp, img, gather(src.images, tgt), out.score_logits, scores, out.coords,
                  gather(src.scores, tgt), gather(src.uvs, tgt), fx, fc.weights);
    if (!std::isfinite(rep.total)) {
      trdetail::log_line(log, {{"event", "divergence"}, {"stage", "finetune_geometry"}});
      ck = best;
      return ck;
    }
    if (rep.total < best_loss) {
      best_loss = rep.total;
      best = ck;
    }
    tp.backward(rep.total_var);
    auto grads = gb.collect_grads();
    clip_global_norm(grads, tc.clip_norm);
    adam_step(ck.geo.tensors, grads, opt_geo, fc.lr_geometry);
    nlohmann::json line = rep.to_json();
    line["stage"] = "finetune_geometry";
    line["step"] = step;
    trdetail::log_line(log, std::move(line));
  }

  // phase 2: embedding + background against fixed geometry; C and S for the
  // source poses are computed once and reused
  std::vector<Tensor<float>> fixed_coords(b), fixed_logits(b);
  if (fc.embed_bg_steps > 0) {
    Tape<float> tp;
    ParamBinder<float> gb(tp, ck.geo, false);
    auto srcs = encode_sources(gb, tc.geometry, tp.constant(ck.src_images),
                               tp.constant(ck.src_poses));
    auto out = geometry_forward(gb, tc.geometry, tp.constant(ck.src_poses), srcs);
    for (int i = 0; i < b; ++i) {
      fixed_coords[i] = tp.value(slice_dim0(tp, out.coords, i, i + 1));
      fixed_logits[i] = tp.value(slice_dim0(tp, out.score_logits, i, i + 1));
    }
  }
  AdamState<float> opt_tb;
  best = ck;
  best_loss = std::numeric_limits<double>::infinity();
  for (int step = 0; step < fc.embed_bg_steps; ++step) {
    auto tgt = step_targets(rng, fc.targets_per_step);
    Tape<float> tp;
    ParamBinder<float> xb(tp, ck.tex, false);
    Var t = tp.leaf(ck.embedding, true);
    Var bg = tp.leaf(ck.background, true);
    std::vector<Tensor<float>> cc, ll;
    for (int i : tgt) {
      cc.push_back(fixed_coords[i]);
      ll.push_back(fixed_logits[i]);
    }
    Tensor<float> coords_t = trdetail::stack0(cc);
    Tensor<float> logits_t = trdetail::stack0(ll);
    coords_t.shape = {static_cast<int>(tgt.size()), 2 * n, coords_t.shape[3], coords_t.shape[4]};
    logits_t.shape = {static_cast<int>(tgt.size()), n + 1, logits_t.shape[3], logits_t.shape[4]};
    Var coords = tp.constant(coords_t);
    Var logits = tp.constant(logits_t);
    Var scores = part_scores(tp, logits);
    Var tex = decode_texture(xb, tc.texture, t);
    Var texr = reshape(tp, tex, {n, 3, nt, nt});
    Var img = render(tp, texr, coords, scores, bg);
    LossReport rep = test_loss(tp, img, gather(src.images, tgt), logits, scores, coords,
                               gather(src.scores, tgt), gather(src.uvs, tgt), fx, fc.weights);
    if (!std::isfinite(rep.total)) {
      trdetail::log_line(log, {{"event", "divergence"}, {"stage", "finetune_embed_bg"}});
      ck = best;
      return ck;
    }
    if (rep.total < best_loss) {
      best_loss = rep.total;
      best = ck;
    }
    tp.backward(rep.total_var);
    std::map<std::string, Tensor<float>> params{{"t", ck.embedding}, {"B", ck.background}};
    std::map<std::string, Tensor<float>> grads;
    grads["t"] = tp.has_grad(t) ? tp.grad(t) : Tensor<float>(ck.embedding.shape);
    grads["B"] = tp.has_grad(bg) ? tp.grad(bg) : Tensor<float>(ck.background.shape);
    clip_global_norm(grads, tc.clip_norm);
    adam_step(params, grads, opt_tb, fc.lr_embed_bg);
    ck.embedding = params.at("t");
    ck.background = params.at("B");
    nlohmann::json line = rep.to_json();
    line["stage"] = "finetune_embed_bg";
    line["step"] = step;
    trdetail::log_line(log, std::move(line));
  }
  return ck;
}

// Applies a personalized checkpoint to a pose sequence. Deterministic;
// sources are re-encoded per chunk of target frames.
struct TransferOut {
  Tensor<float> images;  // (N,3,H,W)
  Tensor<float> scores;  // (N,n+1,H,W)
  Tensor<float> coords;  // (N,2n,H,W)
};

inline TransferOut transfer(const Checkpoint& ck, const Tensor<float>& poses, int chunk = 8) {
  if (ck.embedding.numel() == 0 || ck.background.numel() == 0 || ck.src_images.numel() == 0)
    throw std::runtime_error("transfer: checkpoint is not personalized");
  TrainConfig tc = train_config_from_json(ck.config);
  int n = tc.texture.n_parts, nt = tc.texture.atlas_size;
  int N = poses.shape[0], H = poses.shape[2], W = poses.shape[3];

  TransferOut out;
  out.images = Tensor<float>({N, 3, H, W});
  out.scores = Tensor<float>({N, n + 1, H, W});
  out.coords = Tensor<float>({N, 2 * n, H, W});
  Checkpoint& mut = const_cast<Checkpoint&>(ck);  // binders need mutable refs; not modified

  for (int at = 0; at < N; at += chunk) {
    int take = std::min(chunk, N - at);
    Tensor<float> sub({take, poses.shape[1], H, W});
    std::copy(poses.data.begin() + static_cast<int64_t>(at) * poses.numel() / N,
              poses.data.begin() + static_cast<int64_t>(at + take) * poses.numel() / N,
              sub.data.begin());
    Tape<float> tp;
    ParamBinder<float> gb(tp, mut.geo, false);
    ParamBinder<float> xb(tp, mut.tex, false);
    auto srcs = encode_sources(gb, tc.geometry, tp.constant(ck.src_images),
                               tp.constant(ck.src_poses));
    auto g = geometry_forward(gb, tc.geometry, tp.constant(sub), srcs);
    Var scores = part_scores(tp, g.score_logits);
    Var tex = decode_texture(xb, tc.texture, tp.constant(ck.embedding));
    Var texr = reshape(tp, tex, {n, 3, nt, nt});
    Var img = render(tp, texr, g.coords, scores, tp.constant(ck.background));

    auto blit = [&](Tensor<float>& dst, const Tensor<float>& srct) {
      int64_t per = srct.numel() / take;
      std::copy(srct.data.begin(), srct.data.end(), dst.data.begin() + at * per);
    };
    blit(out.images, tp.value(img));
    blit(out.scores, tp.value(scores));
    blit(out.coords, tp.value(g.coords));
  }
  return out;
}

}  // namespace motra
