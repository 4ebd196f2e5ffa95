#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace dispick::segnet {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::int64_t t = 0;

  static AdamState zeros_for(const std::vector<Tensor<T>>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

/// One Adam update.  Nothing is modified when any gradient is non-finite;
/// the NumericalError names the offending tensor.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               const AdamConfig& cfg, const std::vector<std::string>* names = nullptr) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw StructuralError("adam: parameter/gradient/state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || state.m[i].shape() != params[i].shape() ||
        state.v[i].shape() != params[i].shape())
      throw StructuralError("adam: shape mismatch at tensor " + std::to_string(i));
    for (std::size_t j = 0; j < grads[i].size(); ++j)
      if (!std::isfinite(static_cast<double>(grads[i][j])))
        throw NumericalError("adam: non-finite gradient in " +
                             (names && i < names->size() ? (*names)[i] : "tensor " + std::to_string(i)) +
                             " at element " + std::to_string(j) + " (step " + std::to_string(state.t + 1) + ")");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* th = params[i].data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    const T* g = grads[i].data();
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      th[j] = static_cast<T>(th[j] - cfg.learning_rate * (mj / c1) / (std::sqrt(vj / c2) + cfg.epsilon));
    }
  }
}

}  // namespace dispick::segnet
