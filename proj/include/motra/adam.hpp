#pragma once

#include <cmath>
#include <map>
#include <string>

#include "motra/tensor.hpp"

namespace motra {

// Bias-corrected Adam over named tensors. One state instance per optimized
// parameter group; moments are created lazily with the parameter's shape.
template <typename T>
struct AdamState {
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::map<std::string, Tensor<T>> m, v;
};

// Scales all gradients in place so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <typename T>
double clip_global_norm(std::map<std::string, Tensor<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (T x : g.data) sq += static_cast<double>(x) * x;
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    T s = static_cast<T>(max_norm / norm);
    for (auto& [name, g] : grads)
      for (T& x : g.data) x *= s;
  }
  return norm;
}

template <typename T>
void adam_step(std::map<std::string, Tensor<T>>& params,
               const std::map<std::string, Tensor<T>>& grads, AdamState<T>& st, double lr) {
  for (const auto& [name, g] : grads)
    for (T x : g.data)
      if (!std::isfinite(static_cast<double>(x)))
        throw std::runtime_error("adam_step: non-finite gradient for " + name);

  ++st.step;
  double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (const auto& [name, g] : grads) {
    auto pit = params.find(name);
    if (pit == params.end()) throw std::runtime_error("adam_step: unknown parameter " + name);
    Tensor<T>& p = pit->second;
    check_shape(g, p.shape, "adam_step grad");
    Tensor<T>& m = st.m.try_emplace(name, Tensor<T>(p.shape)).first->second;
    Tensor<T>& v = st.v.try_emplace(name, Tensor<T>(p.shape)).first->second;
    for (int64_t i = 0; i < p.numel(); ++i) {
      double gi = g.data[i];
      double mi = st.beta1 * m.data[i] + (1.0 - st.beta1) * gi;
      double vi = st.beta2 * v.data[i] + (1.0 - st.beta2) * gi * gi;
      m.data[i] = static_cast<T>(mi);
      v.data[i] = static_cast<T>(vi);
      p.data[i] -= static_cast<T>(lr * (mi / c1) / (std::sqrt(vi / c2) + st.eps));
    }
  }
}

}  // namespace motra
