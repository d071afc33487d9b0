// Adam with bias correction, plus the stepped learning-rate schedule.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "advseg/models.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

template <typename T>
struct AdamStateT {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::vector<std::vector<T>> m, v;

  void init(const NamedParams<T>& params) {
    m.clear();
    v.clear();
    for (const auto& [name, p] : params) {
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
    t = 0;
  }
};

using AdamState = AdamStateT<float>;

// One update over the whole parameter list. Validates every gradient before
// touching any parameter so a bad step never leaves the model half-updated.
// Missing grad buffers count as all-zero. Grads are not cleared here.
template <typename T>
void adam_step(NamedParams<T>& params, AdamStateT<T>& state, double lr) {
  ADVSEG_CHECK(state.m.size() == params.size(), ContractError,
               "adam_step: state not initialized for this parameter list");
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad_vec())
      ADVSEG_CHECK(std::isfinite(static_cast<double>(g)), NumericError,
                   "adam_step: non-finite gradient in ", name, " at step ", state.t + 1);
  }
  state.t += 1;
  const T b1 = static_cast<T>(state.beta1);
  const T b2 = static_cast<T>(state.beta2);
  const T corr1 = static_cast<T>(1.0 - std::pow(state.beta1, static_cast<double>(state.t)));
  const T corr2 = static_cast<T>(1.0 - std::pow(state.beta2, static_cast<double>(state.t)));
  const T eps = static_cast<T>(state.eps);
  const T step = static_cast<T>(lr);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi].second;
    const bool has_grad = p.has_grad();
    T* w = p.data();
    const T* g = has_grad ? p.grad_vec().data() : nullptr;
    T* mp = state.m[pi].data();
    T* vp = state.v[pi].data();
    const std::int64_t n = p.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      const T gi = g ? g[i] : T(0);
      mp[i] = b1 * mp[i] + (T(1) - b1) * gi;
      vp[i] = b2 * vp[i] + (T(1) - b2) * gi * gi;
      const T mhat = mp[i] / corr1;
      const T vhat = vp[i] / corr2;
      w[i] -= step * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename T>
void zero_grads(NamedParams<T>& params) {
  for (auto& [name, p] : params) p.zero_grad();
}

// lr0 halved every halve_every epochs, piecewise constant.
inline double lr_at(int epoch, double lr0, int halve_every, int total_epochs) {
  ADVSEG_CHECK(epoch >= 0 && epoch < total_epochs, ContractError, "lr_at: epoch ", epoch,
               " outside [0, ", total_epochs, ")");
  return lr0 * std::pow(0.5, epoch / halve_every);
}

}  // namespace advseg
