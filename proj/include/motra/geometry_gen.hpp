#pragma once

#include <string>
#include <vector>

#include "motra/netblocks.hpp"

namespace motra {

// Geometry generator: an image-context encoder and a pose encoder over the
// sources, a target-pose encoder seeding the decoder state, attention fusion
// of source features at every pyramid level, and two decoder branches
// producing the UV map (sigmoid) and the part-score logits.
struct GeometryConfig {
  int n_parts = 8;
  int stickman_channels = 18;
  int image_size = 64;
  std::vector<int> channels = {16, 32, 64, 64};  // one stride-2 level each
  int first_kernel = 3;
  int decoder_kernel = 3;
  int n_resblocks = 4;
  bool attention_normalize = true;

  int levels() const { return static_cast<int>(channels.size()); }

  void validate() const {
    if (n_parts < 1) throw std::invalid_argument("geometry.n_parts >= 1");
    if (stickman_channels < 1) throw std::invalid_argument("geometry.stickman_channels >= 1");
    if (channels.empty()) throw std::invalid_argument("geometry.channels empty");
    for (int c : channels)
      if (c < 1) throw std::invalid_argument("geometry.channels must be positive");
    if (first_kernel < 1 || first_kernel % 2 == 0 || decoder_kernel < 1 || decoder_kernel % 2 == 0)
      throw std::invalid_argument("geometry kernels must be odd");
    if (n_resblocks < 0) throw std::invalid_argument("geometry.n_resblocks >= 0");
    if (image_size % (1 << levels()) != 0)
      throw std::invalid_argument("geometry.image_size must be divisible by 2^levels");
  }
};

namespace geodetail {
inline std::string lvl(const std::string& stem, int l) { return stem + ".l" + std::to_string(l); }

inline ConvSpec encoder_spec(const GeometryConfig& c, int input_ch, int l) {
  return {l == 0 ? input_ch : c.channels[l - 1], c.channels[l], l == 0 ? c.first_kernel : 3, 2};
}

inline ConvSpec decoder_spec(const GeometryConfig& c, int l) {
  int deeper = (l == c.levels() - 1) ? c.channels.back() : c.channels[l + 1];
  return {deeper + c.channels[l], c.channels[l], 3, 1};
}
}  // namespace geodetail

template <typename T>
ParamSet<T> init_geometry_params(const GeometryConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamSet<T> ps;
  Rng rng(Rng::mix(seed ^ 0x9e0115ULL));
  int L = cfg.levels();
  for (int l = 0; l < L; ++l) {
    ps.add_conv(geodetail::lvl("EI", l), geodetail::encoder_spec(cfg, 3, l),
                rng.fork(geodetail::lvl("EI", l)));
    ps.add_conv(geodetail::lvl("EW", l), geodetail::encoder_spec(cfg, cfg.stickman_channels, l),
                rng.fork(geodetail::lvl("EW", l)));
    ps.add_conv(geodetail::lvl("EP", l), geodetail::encoder_spec(cfg, cfg.stickman_channels, l),
                rng.fork(geodetail::lvl("EP", l)));
  }
  for (int r = 0; r < cfg.n_resblocks; ++r)
    add_resblock(ps, "EP.res" + std::to_string(r), cfg.channels.back(), rng);
  for (const char* br : {"DC", "DS"}) {
    for (int l = 0; l < L; ++l)
      ps.add_conv(geodetail::lvl(br, l), geodetail::decoder_spec(cfg, l),
                  rng.fork(geodetail::lvl(br, l)));
    int out = br[1] == 'C' ? 2 * cfg.n_parts : cfg.n_parts + 1;
    ps.add_conv(std::string(br) + ".head", {cfg.channels[0], out, cfg.decoder_kernel, 1},
                rng.fork(std::string(br) + ".head"));
  }
  return ps;
}

// Per-level source features: a[l] from the image encoder, q[l] from the pose
// encoder, each (b, C_l, h_l, w_l). Computed once and reused for every target.
struct SourcePyramids {
  std::vector<Var> a;
  std::vector<Var> q;
  int b = 0;
};

template <typename T>
SourcePyramids encode_sources(ParamBinder<T>& pb, const GeometryConfig& cfg, Var images,
                              Var poses) {
  cfg.validate();
  const auto& iv = pb.tape().value(images);
  const auto& pv = pb.tape().value(poses);
  if (iv.rank() != 4 || iv.shape[1] != 3)
    throw std::invalid_argument("encode_sources: images must be (b,3,H,W)");
  if (pv.rank() != 4 || pv.shape[1] != cfg.stickman_channels || pv.shape[0] != iv.shape[0])
    throw std::invalid_argument("encode_sources: poses must be (b,stickman,H,W)");
  SourcePyramids out;
  out.b = iv.shape[0];
  Var a = images, q = poses;
  for (int l = 0; l < cfg.levels(); ++l) {
    a = crn(pb, geodetail::lvl("EI", l), a, 2);
    q = crn(pb, geodetail::lvl("EW", l), q, 2);
    out.a.push_back(a);
    out.q.push_back(q);
  }
  return out;
}

struct GeometryOut {
  Var coords;        // (B, 2n, H, W) in [0,1]
  Var score_logits;  // (B, n+1, H, W)
};

template <typename T>
GeometryOut geometry_forward(ParamBinder<T>& pb, const GeometryConfig& cfg, Var target_poses,
                             const SourcePyramids& srcs) {
  cfg.validate();
  Tape<T>& tp = pb.tape();
  const auto& tv = tp.value(target_poses);
  if (tv.rank() != 4 || tv.shape[1] != cfg.stickman_channels)
    throw std::invalid_argument("geometry_forward: target poses must be (B,stickman,H,W)");
  int B = tv.shape[0], L = cfg.levels();
  if (static_cast<int>(srcs.a.size()) != L)
    throw std::invalid_argument("geometry_forward: source pyramid depth mismatch");

  // target pose through the (shared-weight) pose encoder: attention queries
  std::vector<Var> qt;
  Var x = target_poses;
  for (int l = 0; l < L; ++l) {
    x = crn(pb, geodetail::lvl("EW", l), x, 2);
    qt.push_back(x);
  }

  // target pose through its own encoder + resblock trunk: decoder seed
  Var dp = target_poses;
  for (int l = 0; l < L; ++l) dp = crn(pb, geodetail::lvl("EP", l), dp, 2);
  for (int r = 0; r < cfg.n_resblocks; ++r) dp = resblock(pb, "EP.res" + std::to_string(r), dp);

  // attention fusion at every level, one joint softmax per target position
  std::vector<Var> da(L);
  for (int l = 0; l < L; ++l) {
    const auto& qs = tp.value(srcs.q[l]).shape;
    int C = qs[1], h = qs[2], w = qs[3], N = h * w;
    int Ca = tp.value(srcs.a[l]).shape[1];
    std::vector<Var> q_src, a_src;
    for (int j = 0; j < srcs.b; ++j) {
      q_src.push_back(reshape(tp, slice_dim0(tp, srcs.q[l], j, j + 1), {C, N}));
      a_src.push_back(reshape(tp, slice_dim0(tp, srcs.a[l], j, j + 1), {Ca, N}));
    }
    std::vector<Var> fused;
    for (int i = 0; i < B; ++i) {
      Var qi = reshape(tp, slice_dim0(tp, qt[l], i, i + 1), {C, N});
      Var f = attention_fuse(tp, q_src, qi, a_src, cfg.attention_normalize);
      fused.push_back(reshape(tp, f, {1, Ca, h, w}));
    }
    da[l] = concat_dim0(tp, fused);
  }

  auto decode = [&](const std::string& br) {
    Var y = dp;
    for (int l = L - 1; l >= 0; --l) {
      y = concat_channels(tp, {da[l], y});
      y = crn(pb, geodetail::lvl(br, l), y, 1);
      y = upsample2x(tp, y);
    }
    return conv(pb, br + ".head", y, 1);
  };
  GeometryOut out;
  out.coords = sigmoid(tp, decode("DC"));
  out.score_logits = decode("DS");
  return out;
}

template <typename T>
Var part_scores(Tape<T>& tp, Var score_logits) {
  return softmax_channels(tp, score_logits);
}

}  // namespace motra
