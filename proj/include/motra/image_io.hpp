#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "motra/tensor.hpp"

namespace motra {
namespace pngdetail {

inline uint32_t crc32(const uint8_t* d, size_t n, uint32_t crc = 0xffffffffu) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ d[i]) & 0xff] ^ (crc >> 8);
  return crc;
}

inline void be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(x >> 24);
  v.push_back(x >> 16);
  v.push_back(x >> 8);
  v.push_back(x);
}

inline void chunk(std::vector<uint8_t>& out, const char* tag, const std::vector<uint8_t>& body) {
  be32(out, static_cast<uint32_t>(body.size()));
  std::vector<uint8_t> tb(tag, tag + 4);
  tb.insert(tb.end(), body.begin(), body.end());
  out.insert(out.end(), tb.begin(), tb.end());
  be32(out, crc32(tb.data(), tb.size()) ^ 0xffffffffu);
}

// zlib stream of stored (uncompressed) deflate blocks
inline std::vector<uint8_t> zlib_store(const std::vector<uint8_t>& raw) {
  std::vector<uint8_t> z{0x78, 0x01};
  size_t pos = 0;
  do {
    size_t take = std::min<size_t>(raw.size() - pos, 65535);
    bool last = pos + take == raw.size();
    z.push_back(last ? 1 : 0);
    z.push_back(take & 0xff);
    z.push_back(take >> 8);
    z.push_back(~take & 0xff);
    z.push_back((~take >> 8) & 0xff);
    z.insert(z.end(), raw.begin() + pos, raw.begin() + pos + take);
    pos += take;
  } while (pos < raw.size());
  uint32_t a = 1, b = 0;
  for (uint8_t c : raw) {
    a = (a + c) % 65521;
    b = (b + a) % 65521;
  }
  be32(z, (b << 16) | a);
  return z;
}

}  // namespace pngdetail

// 8-bit RGB PNG from a (3,H,W) image in [0,1]; values are clamped.
inline void write_png(const std::string& path, const Tensor<float>& img) {
  if (img.rank() != 3 || img.shape[0] != 3)
    throw std::invalid_argument("write_png: (3,H,W) image expected");
  int H = img.shape[1], W = img.shape[2];
  int64_t plane = static_cast<int64_t>(H) * W;

  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(H) * (1 + 3 * W));
  for (int y = 0; y < H; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = img[c * plane + y * static_cast<int64_t>(W) + x];
        v = std::min(std::max(v, 0.0f), 1.0f);
        raw.push_back(static_cast<uint8_t>(v * 255.0f + 0.5f));
      }
  }

  std::vector<uint8_t> out{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<uint8_t> ihdr;
  pngdetail::be32(ihdr, static_cast<uint32_t>(W));
  pngdetail::be32(ihdr, static_cast<uint32_t>(H));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, truecolor
  pngdetail::chunk(out, "IHDR", ihdr);
  pngdetail::chunk(out, "IDAT", pngdetail::zlib_store(raw));
  pngdetail::chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_png: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write_png: write failed for " + path);
}

}  // namespace motra
