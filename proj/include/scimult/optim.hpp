#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "scimult/tensor.hpp"

namespace scimult {

// Linear warmup to peak_lr over the first warmup_fraction of total_steps,
// then linear decay to zero at total_steps.
inline double scheduled_lr(double peak_lr, double warmup_fraction,
                           std::int64_t total_steps, std::int64_t step) {
  if (total_steps <= 0) throw config_error("schedule: total_steps must be > 0");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0)
    throw config_error("schedule: warmup_fraction outside [0, 1]");
  if (step < 0 || step > total_steps)
    throw contract_error("schedule: step outside [0, total_steps]");
  const double warmup_end = warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warmup_end) return peak_lr * s / warmup_end;
  const double tail = static_cast<double>(total_steps) - warmup_end;
  if (tail <= 0.0) return peak_lr;
  return peak_lr * (static_cast<double>(total_steps) - s) / tail;
}

// Decoupled weight decay; moments stored per parameter in registration
// order. Hyper-parameters live here so a checkpoint can carry them.
template <class S>
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double peak_lr = 3e-4;
  double warmup_fraction = 0.05;
  std::int64_t total_steps = 1;
  std::int64_t step_count = 0;
  std::vector<std::vector<S>> m, v;

  void init(const std::vector<Tensor<S>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.numel(), S(0));
      v.emplace_back(p.numel(), S(0));
    }
    step_count = 0;
  }

  double lr_at(std::int64_t step) const {
    return scheduled_lr(peak_lr, warmup_fraction, total_steps, step);
  }
};

// `active`, when given, freezes the masked-out parameters completely (no
// moment update, no decay) — used to keep off-task experts untouched.
template <class S>
void adamw_step(std::vector<Tensor<S>>& params, OptimizerState<S>& st,
                double lr, const std::vector<std::uint8_t>* active = nullptr) {
  if (st.m.size() != params.size() || st.v.size() != params.size())
    throw contract_error("adamw: state not initialized for this parameter set");
  if (active && active->size() != params.size())
    throw contract_error("adamw: active mask does not match parameter count");
  const std::int64_t t = st.step_count + 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(t));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    if (active && !(*active)[pi]) continue;
    auto& p = params[pi];
    if (!p.has_grad())
      throw contract_error("adamw: parameter has no gradient");
    if (st.m[pi].size() != p.numel())
      throw contract_error("adamw: moment size does not match parameter");
    auto data = p.data();
    const auto grad = p.grad();
    auto& m = st.m[pi];
    auto& v = st.v[pi];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      if (!std::isfinite(g)) throw contract_error("adamw: non-finite gradient");
      const double mi = st.beta1 * static_cast<double>(m[i]) +
                        (1.0 - st.beta1) * g;
      const double vi = st.beta2 * static_cast<double>(v[i]) +
                        (1.0 - st.beta2) * g * g;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      const double x = static_cast<double>(data[i]);
      data[i] = static_cast<S>(x - lr * mhat / (std::sqrt(vhat) + st.eps) -
                               lr * st.weight_decay * x);
    }
  }
  ++st.step_count;
}

}  // namespace scimult
