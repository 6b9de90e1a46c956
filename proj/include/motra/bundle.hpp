#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "motra/tensor.hpp"

namespace motra {

// Named-tensor container backing the on-disk "PGT1" (data) and "PGTC"
// (checkpoint) files:
//   magic[4] | u32 version | u32 header_len | header JSON | raw f32 LE payloads
// The header carries a tensor directory [{name, dtype, shape, offset}] plus an
// optional free-form "meta" object. Offsets are relative to the payload start.
class Bundle {
 public:
  static constexpr uint32_t kVersion = 1;

  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, const Tensor<float>& t) { tensors_[name] = t; }
  template <typename T>
  void put_cast(const std::string& name, const Tensor<T>& t) {
    tensors_[name] = t.template cast<float>();
  }

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }

  const Tensor<float>& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::runtime_error("bundle: missing tensor '" + name + "'");
    return it->second;
  }
  template <typename T>
  Tensor<T> get_as(const std::string& name) const {
    return get(name).template cast<T>();
  }

  const std::map<std::string, Tensor<float>>& tensors() const { return tensors_; }

  std::vector<uint8_t> serialize(const char magic[4]) const {
    nlohmann::json dir = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors_) {  // std::map: sorted, deterministic
      dir.push_back({{"name", name},
                     {"dtype", "f32"},
                     {"shape", t.shape},
                     {"offset", offset}});
      offset += static_cast<uint64_t>(t.numel()) * 4;
    }
    nlohmann::json header = {{"directory", dir}, {"meta", meta}};
    std::string hs = header.dump();

    std::vector<uint8_t> out;
    out.reserve(12 + hs.size() + offset);
    out.insert(out.end(), magic, magic + 4);
    append_u32(out, kVersion);
    append_u32(out, static_cast<uint32_t>(hs.size()));
    out.insert(out.end(), hs.begin(), hs.end());
    for (const auto& [name, t] : tensors_) {
      (void)name;
      append_f32(out, t.data);
    }
    return out;
  }

  static Bundle deserialize(const std::vector<uint8_t>& bytes, const char magic[4]) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), magic, 4) != 0)
      throw std::runtime_error("bundle: bad magic");
    uint32_t version = read_u32(bytes, 4);
    if (version != kVersion) throw std::runtime_error("bundle: unsupported version");
    uint32_t hlen = read_u32(bytes, 8);
    if (bytes.size() < 12 + static_cast<size_t>(hlen))
      throw std::runtime_error("bundle: truncated header");
    nlohmann::json header =
        nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);

    Bundle b;
    b.meta = header.value("meta", nlohmann::json::object());
    size_t payload = 12 + hlen;
    for (const auto& e : header.at("directory")) {
      std::string name = e.at("name");
      if (e.at("dtype") != "f32") throw std::runtime_error("bundle: unsupported dtype");
      std::vector<int> shape = e.at("shape").get<std::vector<int>>();
      uint64_t off = e.at("offset");
      Tensor<float> t(shape);
      size_t begin = payload + off;
      size_t nbytes = static_cast<size_t>(t.numel()) * 4;
      if (begin + nbytes > bytes.size())
        throw std::runtime_error("bundle: truncated payload for '" + name + "'");
      std::memcpy(t.data.data(), bytes.data() + begin, nbytes);
      b.tensors_[name] = std::move(t);
    }
    return b;
  }

  void save(const std::string& path, const char magic[4]) const {
    auto bytes = serialize(magic);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("bundle: cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("bundle: write failed: " + path);
  }

  static Bundle load(const std::string& path, const char magic[4]) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("bundle: cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return deserialize(bytes, magic);
  }

 private:
  std::map<std::string, Tensor<float>> tensors_;

  static void append_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
  }
  static void append_f32(std::vector<uint8_t>& out, const std::vector<float>& v) {
    // little-endian IEEE754; memcpy is fine on every target we build for
    size_t base = out.size();
    out.resize(base + v.size() * 4);
    std::memcpy(out.data() + base, v.data(), v.size() * 4);
  }
  static uint32_t read_u32(const std::vector<uint8_t>& b, size_t off) {
    return static_cast<uint32_t>(b[off]) | (static_cast<uint32_t>(b[off + 1]) << 8) |
           (static_cast<uint32_t>(b[off + 2]) << 16) | (static_cast<uint32_t>(b[off + 3]) << 24);
  }
};

inline constexpr char kMagicData[4] = {'P', 'G', 'T', '1'};
inline constexpr char kMagicCheckpoint[4] = {'P', 'G', 'T', 'C'};

}  // namespace motra
