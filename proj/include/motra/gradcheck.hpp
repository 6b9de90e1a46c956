#pragma once

#include <functional>
#include <map>
#include <string>

#include "motra/rng.hpp"
#include "motra/tape.hpp"

namespace motra {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  bool finite = true;
  std::string nonfinite_tensor;

  bool ok(double tol) const { return finite && max_rel_error <= tol; }
};

// Central finite-difference check of d(loss)/d(inputs) at double precision.
// forward() must rebuild the whole graph from the given leaves every call.
// max_entries == 0 checks every entry; otherwise a seeded subset per tensor.
inline GradCheckReport grad_check(
    std::map<std::string, Tensor<double>> inputs,
    const std::function<Var(Tape<double>&, std::map<std::string, Var>&)>& forward,
    double h = 1e-4, int max_entries = 0, uint64_t seed = 0) {
  GradCheckReport rep;

  auto run = [&](bool with_grad) {
    auto tp = std::make_unique<Tape<double>>();
    std::map<std::string, Var> vars;
    for (auto& [name, t] : inputs) vars[name] = tp->leaf(t, with_grad);
    Var loss = forward(*tp, vars);
    return std::tuple<std::unique_ptr<Tape<double>>, std::map<std::string, Var>, Var>(
        std::move(tp), std::move(vars), loss);
  };

  auto [tape, vars, loss] = run(true);
  tape->backward(loss);

  std::map<std::string, Tensor<double>> analytic;
  for (auto& [name, v] : vars) {
    analytic[name] =
        tape->has_grad(v) ? tape->grad(v) : Tensor<double>(tape->value(v).shape);
    if (!analytic[name].all_finite()) {
      rep.finite = false;
      rep.nonfinite_tensor = name;
      return rep;
    }
  }
  tape.reset();

  auto eval_loss = [&]() {
    auto [tp2, vars2, loss2] = run(false);
    return tp2->value(loss2)[0];
  };

  Rng pick(Rng::mix(seed ^ 0x67ad3c1f));
  for (auto& [name, t] : inputs) {
    int64_t n = t.numel();
    std::vector<int64_t> idx;
    if (max_entries <= 0 || n <= max_entries) {
      idx.resize(n);
      for (int64_t i = 0; i < n; ++i) idx[i] = i;
    } else {
      for (int i = 0; i < max_entries; ++i)
        idx.push_back(pick.uniform_int(static_cast<int>(n)));
    }
    for (int64_t i : idx) {
      double orig = t[i];
      t[i] = orig + h;
      double lp = eval_loss();
      t[i] = orig - h;
      double lm = eval_loss();
      t[i] = orig;
      double numeric = (lp - lm) / (2.0 * h);
      double a = analytic[name][i];
      double denom = std::abs(a) + std::abs(numeric);
      if (denom < 1e-7) continue;  // both effectively zero
      double rel = std::abs(a - numeric) / std::max(denom, 1e-4);
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_tensor = name;
      }
    }
  }
  return rep;
}

}  // namespace motra
