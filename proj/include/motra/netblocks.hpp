#pragma once

#include <map>
#include <string>

#include "motra/ops.hpp"
#include "motra/rng.hpp"

namespace motra {

struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;

  void validate() const {
    if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("conv: channels >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("conv: kernel must be odd");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv: stride must be 1 or 2");
  }
  int64_t param_count() const {
    return static_cast<int64_t>(in_channels) * out_channels * kernel * kernel + out_channels;
  }
};

// Named parameter collection for a model (or a whole training state).
template <typename T>
struct ParamSet {
  std::map<std::string, Tensor<T>> tensors;

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("param not found: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("param not found: " + name);
    return it->second;
  }

  // Kaiming-uniform fan-in conv weights, zero bias.
  void add_conv(const std::string& prefix, const ConvSpec& spec, Rng rng) {
    spec.validate();
    Tensor<T> w({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel});
    double fan_in = static_cast<double>(spec.in_channels) * spec.kernel * spec.kernel;
    double bound = std::sqrt(6.0 / fan_in);
    rng.fill_uniform(w, -bound, bound);
    tensors[prefix + ".w"] = std::move(w);
    tensors[prefix + ".b"] = Tensor<T>({spec.out_channels});
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [k, t] : tensors) {
      (void)k;
      n += t.numel();
    }
    return n;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> r;
    for (const auto& [k, t] : tensors) r.tensors[k] = t.template cast<U>();
    return r;
  }
};

// Binds a ParamSet onto a tape for one forward/backward pass and remembers
// which Var each tensor got, so the trainer can collect gradients afterwards.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(Tape<T>& tape, ParamSet<T>& params, bool trainable = true)
      : tape_(tape), params_(params), trainable_(trainable) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var v = tape_.leaf(params_.at(name), trainable_);
    bound_[name] = v;
    return v;
  }

  // Use an already-created tape Var for `name` instead of binding from the
  // ParamSet (gradient checking, parameter sharing across binders).
  void bind_external(const std::string& name, Var v) { bound_[name] = v; }

  const std::map<std::string, Var>& bound() const { return bound_; }
  Tape<T>& tape() { return tape_; }
  ParamSet<T>& params() { return params_; }

  // Gradients of all bound parameters, zeros where untouched by backward.
  std::map<std::string, Tensor<T>> collect_grads() {
    std::map<std::string, Tensor<T>> g;
    for (auto& [name, v] : bound_) {
      g[name] = tape_.has_grad(v) ? tape_.grad(v) : Tensor<T>(tape_.value(v).shape);
    }
    return g;
  }

 private:
  Tape<T>& tape_;
  ParamSet<T>& params_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

// conv -> relu -> instance norm
template <typename T>
Var crn(Tape<T>& tp, Var x, Var w, Var b, int stride) {
  return instance_norm(tp, relu(tp, conv2d_op(tp, x, w, b, stride)));
}

template <typename T>
Var crn(ParamBinder<T>& pb, const std::string& prefix, Var x, int stride) {
  return crn(pb.tape(), x, pb(prefix + ".w"), pb(prefix + ".b"), stride);
}

template <typename T>
Var conv(ParamBinder<T>& pb, const std::string& prefix, Var x, int stride) {
  return conv2d_op(pb.tape(), x, pb(prefix + ".w"), pb(prefix + ".b"), stride);
}

// x + IN(conv(relu(IN(conv(x))))), channel-preserving
template <typename T>
Var resblock(ParamBinder<T>& pb, const std::string& prefix, Var x) {
  Tape<T>& tp = pb.tape();
  Var h = instance_norm(tp, conv(pb, prefix + ".c1", x, 1));
  h = relu(tp, h);
  h = instance_norm(tp, conv(pb, prefix + ".c2", h, 1));
  return add(tp, x, h);
}

template <typename T>
void add_resblock(ParamSet<T>& ps, const std::string& prefix, int channels, const Rng& rng) {
  ps.add_conv(prefix + ".c1", {channels, channels, 3, 1}, rng.fork(prefix + ".c1"));
  ps.add_conv(prefix + ".c2", {channels, channels, 3, 1}, rng.fork(prefix + ".c2"));
}

template <typename T>
Var upsample2x(Tape<T>& tp, Var x) {
  return upsample_bilinear(tp, x, 2);
}

}  // namespace motra
