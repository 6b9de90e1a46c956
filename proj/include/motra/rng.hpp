#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "motra/tensor.hpp"

namespace motra {

// Counter-free splitmix64 generator. Bit-reproducible across platforms and
// serializable as a single u64, which the checkpoint format relies on.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  double normal() {
    // Box-Muller; one draw per call keeps the stream position simple.
    double u1 = std::max(uniform(), 1e-300);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Independent substream for a named purpose.
  Rng fork(uint64_t tag) const { return Rng(mix(state_ ^ mix(tag))); }
  Rng fork(const std::string& tag) const {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : tag) h = (h ^ c) * 1099511628211ULL;
    return fork(h);
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

  template <typename T>
  void fill_uniform(Tensor<T>& t, double lo, double hi) {
    for (auto& v : t.data) v = static_cast<T>(uniform(lo, hi));
  }
  template <typename T>
  void fill_normal(Tensor<T>& t, double mean = 0.0, double stddev = 1.0) {
    for (auto& v : t.data) v = static_cast<T>(mean + stddev * normal());
  }

  // Fisher-Yates over [0,n)
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(p[i], p[uniform_int(i + 1)]);
    return p;
  }

 private:
  uint64_t state_;
};

}  // namespace motra
