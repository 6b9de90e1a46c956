#pragma once

#include <string>
#include <vector>

#include "motra/netblocks.hpp"

namespace motra {

// Texture generator: each partial atlas is reshaped part-major into a
// (3*n_parts)-channel image, encoded to a bottleneck embedding, embeddings are
// averaged across inputs, and a decoder produces the complete atlas.
struct TextureConfig {
  int n_parts = 8;
  int atlas_size = 32;
  // stem (stride 1) followed by one stride-2 stage per remaining entry;
  // the last entry is the embedding channel count
  std::vector<int> channels = {32, 64, 128, 128};
  int n_resblocks = 3;
  int first_kernel = 3;

  int stages() const { return static_cast<int>(channels.size()) - 1; }
  int embed_channels() const { return channels.back(); }
  int embed_size() const { return atlas_size >> stages(); }

  void validate() const {
    if (n_parts < 1) throw std::invalid_argument("texture.n_parts >= 1");
    if (channels.size() < 2) throw std::invalid_argument("texture.channels needs >= 2 entries");
    for (int c : channels)
      if (c < 1) throw std::invalid_argument("texture.channels must be positive");
    if (first_kernel < 1 || first_kernel % 2 == 0)
      throw std::invalid_argument("texture.first_kernel must be odd");
    if (n_resblocks < 0) throw std::invalid_argument("texture.n_resblocks >= 0");
    if (atlas_size % (1 << stages()) != 0)
      throw std::invalid_argument("texture.atlas_size must be divisible by 2^stages");
  }
};

template <typename T>
ParamSet<T> init_texture_params(const TextureConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamSet<T> ps;
  Rng rng(Rng::mix(seed ^ 0x7e87e80ULL));
  int S = cfg.stages();
  ps.add_conv("ET.stem", {3 * cfg.n_parts, cfg.channels[0], cfg.first_kernel, 1},
              rng.fork("ET.stem"));
  for (int i = 0; i < S; ++i) {
    std::string name = "ET.l" + std::to_string(i);
    ps.add_conv(name, {cfg.channels[i], cfg.channels[i + 1], 3, 2}, rng.fork(name));
  }
  for (int r = 0; r < cfg.n_resblocks; ++r)
    add_resblock(ps, "DT.res" + std::to_string(r), cfg.embed_channels(), rng);
  for (int i = S - 1; i >= 0; --i) {
    std::string name = "DT.l" + std::to_string(i);
    ps.add_conv(name, {cfg.channels[i + 1], cfg.channels[i], 3, 1}, rng.fork(name));
  }
  ps.add_conv("DT.head", {cfg.channels[0], 3 * cfg.n_parts, 3, 1}, rng.fork("DT.head"));
  return ps;
}

// (b,n,3,h,w) -> (b,3n,h,w): row-major layout already stores channels
// part-major (index = part*3 + rgb), so this is a pure reshape.
template <typename T>
Var reshape_parts(Tape<T>& tp, Var atlas) {
  const auto& v = tp.value(atlas);
  if (v.rank() != 5) throw std::invalid_argument("reshape_parts: (b,n,3,h,w) expected");
  return reshape(tp, atlas, {v.shape[0], v.shape[1] * v.shape[2], v.shape[3], v.shape[4]});
}

template <typename T>
Var unreshape_parts(Tape<T>& tp, Var flat) {
  const auto& v = tp.value(flat);
  if (v.rank() != 4 || v.shape[1] % 3 != 0)
    throw std::invalid_argument("unreshape_parts: (b,3n,h,w) expected");
  return reshape(tp, flat, {v.shape[0], v.shape[1] / 3, 3, v.shape[2], v.shape[3]});
}

// atlases: (b, 3n, H_T, W_T) -> embeddings (b, C, H_T/2^S, W_T/2^S)
template <typename T>
Var encode_texture(ParamBinder<T>& pb, const TextureConfig& cfg, Var atlases) {
  cfg.validate();
  const auto& v = pb.tape().value(atlases);
  if (v.rank() != 4 || v.shape[1] != 3 * cfg.n_parts || v.shape[2] != cfg.atlas_size ||
      v.shape[3] != cfg.atlas_size)
    throw std::invalid_argument("encode_texture: atlas shape does not match config");
  Var x = crn(pb, "ET.stem", atlases, 1);
  for (int i = 0; i < cfg.stages(); ++i) x = crn(pb, "ET.l" + std::to_string(i), x, 2);
  return x;
}

// Mean over the leading (source) dimension: (b,C,h,w) -> (1,C,h,w).
template <typename T>
Var merge_embeddings(Tape<T>& tp, Var embeddings) {
  const auto& v = tp.value(embeddings);
  if (v.rank() != 4 || v.shape[0] < 1)
    throw std::invalid_argument("merge_embeddings: nonempty (b,C,h,w) expected");
  int b = v.shape[0];
  Var acc = slice_dim0(tp, embeddings, 0, 1);
  for (int j = 1; j < b; ++j) acc = add(tp, acc, slice_dim0(tp, embeddings, j, j + 1));
  return scale(tp, acc, T(1) / static_cast<T>(b));
}

// t: (B, C, h, w) -> complete atlases (B, 3n, H_T, W_T), sigmoid range.
template <typename T>
Var decode_texture(ParamBinder<T>& pb, const TextureConfig& cfg, Var t) {
  cfg.validate();
  Tape<T>& tp = pb.tape();
  const auto& v = tp.value(t);
  if (v.rank() != 4 || v.shape[1] != cfg.embed_channels() || v.shape[2] != cfg.embed_size() ||
      v.shape[3] != cfg.embed_size())
    throw std::invalid_argument("decode_texture: embedding shape does not match config");
  Var x = t;
  for (int r = 0; r < cfg.n_resblocks; ++r) x = resblock(pb, "DT.res" + std::to_string(r), x);
  for (int i = cfg.stages() - 1; i >= 0; --i) {
    x = upsample2x(tp, x);
    x = crn(pb, "DT.l" + std::to_string(i), x, 1);
  }
  return sigmoid(tp, conv(pb, "DT.head", x, 1));
}

// decode(mean(encode(each partial atlas))): (b,3n,H_T,W_T) -> (1,3n,H_T,W_T)
template <typename T>
Var texture_forward(ParamBinder<T>& pb, const TextureConfig& cfg, Var partial_atlases) {
  return decode_texture(pb, cfg,
                        merge_embeddings(pb.tape(), encode_texture(pb, cfg, partial_atlases)));
}

}  // namespace motra
