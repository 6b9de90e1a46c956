#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "motra/tensor.hpp"

namespace motra {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. A fresh tape is built per forward pass; leaves either
// carry gradients (parameters, checked inputs) or are constants. Ops append
// nodes with a closure that scatters the output gradient into the parents.
// Closures run in strict reverse insertion order, so reductions are
// deterministic regardless of how the graph was assembled.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily
    std::function<void()> backprop;
    bool needs_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor<T> value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var make(Tensor<T> value, bool needs_grad, std::function<void()> backprop) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  Tensor<T>& grad(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_[v.id].grad.data.empty(); }

  // Accumulate into a parent's gradient only if it participates.
  void accum_if(Var v, const std::function<void(Tensor<T>&)>& add) {
    if (nodes_[v.id].needs_grad) add(grad(v));
  }

  void backward(Var loss) {
    const Tensor<T>& lv = nodes_[loss.id].value;
    if (lv.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad(loss).fill(T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.backprop && !n.grad.data.empty()) n.backprop();
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

// ---- basic elementwise ops ----

template <typename T>
Var add(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
  Tensor<T> out = av;
  out.add_(bv);
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.make(std::move(out), ng, [&tp, a, b, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    tp.accum_if(a, [&](Tensor<T>& ga) { ga.add_(g); });
    tp.accum_if(b, [&](Tensor<T>& gb) { gb.add_(g); });
  });
}

template <typename T>
Var sub(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("sub: shape mismatch");
  Tensor<T> out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.make(std::move(out), ng, [&tp, a, b, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    tp.accum_if(a, [&](Tensor<T>& ga) { ga.add_(g); });
    tp.accum_if(b, [&](Tensor<T>& gb) {
      for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] -= g.data[i];
    });
  });
}

template <typename T>
Var mul(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("mul: shape mismatch");
  Tensor<T> out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.make(std::move(out), ng, [&tp, a, b, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& av2 = tp.value(a);
    const Tensor<T>& bv2 = tp.value(b);
    tp.accum_if(a, [&](Tensor<T>& ga) {
      for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
    });
    tp.accum_if(b, [&](Tensor<T>& gb) {
      for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += g.data[i] * av2.data[i];
    });
  });
}

template <typename T>
Var scale(Tape<T>& tp, Var a, T s) {
  Tensor<T> out = tp.value(a);
  out.scale_(s);
  return tp.make(std::move(out), tp.needs_grad(a), [&tp, a, s, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    tp.accum_if(a, [&](Tensor<T>& ga) {
      for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += s * g.data[i];
    });
  });
}

template <typename T>
Var relu(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.value(a);
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return tp.make(std::move(out), tp.needs_grad(a), [&tp, a, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& av = tp.value(a);
    tp.accum_if(a, [&](Tensor<T>& ga) {
      for (size_t i = 0; i < ga.data.size(); ++i)
        if (av.data[i] > T(0)) ga.data[i] += g.data[i];
    });
  });
}

template <typename T>
Var sigmoid(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.value(a);
  for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  return tp.make(std::move(out), tp.needs_grad(a), [&tp, a, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& sv = tp.value(self);
    tp.accum_if(a, [&](Tensor<T>& ga) {
      for (size_t i = 0; i < ga.data.size(); ++i)
        ga.data[i] += g.data[i] * sv.data[i] * (T(1) - sv.data[i]);
    });
  });
}

// |x| with subgradient 0 at the origin
template <typename T>
Var abs_val(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.value(a);
  for (auto& v : out.data) v = std::abs(v);
  return tp.make(std::move(out), tp.needs_grad(a), [&tp, a, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& av = tp.value(a);
    tp.accum_if(a, [&](Tensor<T>& ga) {
      for (size_t i = 0; i < ga.data.size(); ++i) {
        T s = av.data[i] > T(0) ? T(1) : (av.data[i] < T(0) ? T(-1) : T(0));
        ga.data[i] += s * g.data[i];
      }
    });
  });
}

template <typename T>
Var sum(Tape<T>& tp, Var a) {
  Tensor<T> out({1});
  out[0] = tp.value(a).sum();
  return tp.make(std::move(out), tp.needs_grad(a), [&tp, a, self = Var{(int)tp.size()}]() {
    T g = tp.grad(self)[0];
    tp.accum_if(a, [&](Tensor<T>& ga) {
      for (auto& v : ga.data) v += g;
    });
  });
}

template <typename T>
Var mean(Tape<T>& tp, Var a) {
  int64_t n = tp.value(a).numel();
  return scale(tp, sum(tp, a), T(1) / static_cast<T>(n));
}

// ---- shape ops ----

template <typename T>
Var reshape(Tape<T>& tp, Var a, std::vector<int> shape) {
  const auto& av = tp.value(a);
  Tensor<T> out;
  out.shape = std::move(shape);
  if (Tensor<T>::numel_of(out.shape) != av.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  out.data = av.data;
  return tp.make(std::move(out), tp.needs_grad(a), [&tp, a, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    tp.accum_if(a, [&](Tensor<T>& ga) {
      for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[i];
    });
  });
}

// Slice along the outermost dimension: rows of a matrix, batch of NCHW.
template <typename T>
Var slice_dim0(Tape<T>& tp, Var a, int i0, int i1) {
  const auto& av = tp.value(a);
  if (i0 < 0 || i1 <= i0 || i1 > av.shape[0]) throw std::invalid_argument("slice_dim0: range");
  int64_t stride = av.numel() / av.shape[0];
  std::vector<int> shape = av.shape;
  shape[0] = i1 - i0;
  Tensor<T> out(shape);
  std::copy(av.data.begin() + i0 * stride, av.data.begin() + i1 * stride, out.data.begin());
  return tp.make(std::move(out), tp.needs_grad(a),
                 [&tp, a, i0, stride, self = Var{(int)tp.size()}]() {
                   const Tensor<T>& g = tp.grad(self);
                   tp.accum_if(a, [&](Tensor<T>& ga) {
                     for (int64_t i = 0; i < g.numel(); ++i)
                       ga.data[static_cast<size_t>(i0 * stride + i)] += g.data[i];
                   });
                 });
}

template <typename T>
Var concat_dim0(Tape<T>& tp, const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_dim0: empty");
  std::vector<int> shape = tp.value(parts[0]).shape;
  int total = 0;
  bool ng = false;
  for (Var p : parts) {
    const auto& pv = tp.value(p);
    for (size_t d = 1; d < shape.size(); ++d)
      if (pv.shape[d] != shape[d]) throw std::invalid_argument("concat_dim0: shape mismatch");
    total += pv.shape[0];
    ng = ng || tp.needs_grad(p);
  }
  shape[0] = total;
  Tensor<T> out(shape);
  int64_t off = 0;
  for (Var p : parts) {
    const auto& pv = tp.value(p);
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + off);
    off += pv.numel();
  }
  return tp.make(std::move(out), ng, [&tp, parts, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    int64_t off2 = 0;
    for (Var p : parts) {
      int64_t n = tp.value(p).numel();
      tp.accum_if(p, [&](Tensor<T>& gp) {
        for (int64_t i = 0; i < n; ++i) gp.data[i] += g.data[off2 + i];
      });
      off2 += n;
    }
  });
}

// Slice a channel range of a (N,C,H,W) tensor.
template <typename T>
Var slice_channels(Tape<T>& tp, Var a, int c0, int c1) {
  const auto& av = tp.value(a);
  if (av.rank() != 4) throw std::invalid_argument("slice_channels: rank-4 expected");
  int N = av.shape[0], C = av.shape[1], H = av.shape[2], W = av.shape[3];
  if (c0 < 0 || c1 <= c0 || c1 > C) throw std::invalid_argument("slice_channels: range");
  Tensor<T> out({N, c1 - c0, H, W});
  int64_t plane = static_cast<int64_t>(H) * W;
  for (int n = 0; n < N; ++n)
    for (int c = c0; c < c1; ++c)
      std::copy(av.data.begin() + (static_cast<int64_t>(n) * C + c) * plane,
                av.data.begin() + (static_cast<int64_t>(n) * C + c + 1) * plane,
                out.data.begin() + (static_cast<int64_t>(n) * (c1 - c0) + (c - c0)) * plane);
  return tp.make(std::move(out), tp.needs_grad(a),
                 [&tp, a, c0, c1, N, C, plane, self = Var{(int)tp.size()}]() {
                   const Tensor<T>& g = tp.grad(self);
                   tp.accum_if(a, [&](Tensor<T>& ga) {
                     for (int n = 0; n < N; ++n)
                       for (int c = c0; c < c1; ++c) {
                         const T* gs = g.data.data() +
                                       (static_cast<int64_t>(n) * (c1 - c0) + (c - c0)) * plane;
                         T* gd = ga.data.data() + (static_cast<int64_t>(n) * C + c) * plane;
                         for (int64_t i = 0; i < plane; ++i) gd[i] += gs[i];
                       }
                   });
                 });
}

template <typename T>
Var concat_channels(Tape<T>& tp, const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: empty");
  const auto& first = tp.value(parts[0]);
  if (first.rank() != 4) throw std::invalid_argument("concat_channels: rank-4 expected");
  int N = first.shape[0], H = first.shape[2], W = first.shape[3];
  int Ctot = 0;
  bool ng = false;
  for (Var p : parts) {
    const auto& pv = tp.value(p);
    if (pv.shape[0] != N || pv.shape[2] != H || pv.shape[3] != W)
      throw std::invalid_argument("concat_channels: shape mismatch");
    Ctot += pv.shape[1];
    ng = ng || tp.needs_grad(p);
  }
  Tensor<T> out({N, Ctot, H, W});
  int64_t plane = static_cast<int64_t>(H) * W;
  int coff = 0;
  for (Var p : parts) {
    const auto& pv = tp.value(p);
    int Cp = pv.shape[1];
    for (int n = 0; n < N; ++n)
      std::copy(pv.data.begin() + static_cast<int64_t>(n) * Cp * plane,
                pv.data.begin() + static_cast<int64_t>(n + 1) * Cp * plane,
                out.data.begin() + (static_cast<int64_t>(n) * Ctot + coff) * plane);
    coff += Cp;
  }
  return tp.make(std::move(out), ng, [&tp, parts, N, Ctot, plane, self = Var{(int)tp.size()}]() {
    const Tensor<T>& g = tp.grad(self);
    int coff2 = 0;
    for (Var p : parts) {
      int Cp = tp.value(p).shape[1];
      tp.accum_if(p, [&](Tensor<T>& gp) {
        for (int n = 0; n < N; ++n) {
          const T* gs = g.data.data() + (static_cast<int64_t>(n) * Ctot + coff2) * plane;
          T* gd = gp.data.data() + static_cast<int64_t>(n) * Cp * plane;
          for (int64_t i = 0; i < static_cast<int64_t>(Cp) * plane; ++i) gd[i] += gs[i];
        }
      });
      coff2 += Cp;
    }
  });
}

}  // namespace motra
