#pragma once

// AdamW with decoupled decay, warmup + cosine schedule, global-norm clipping.

#include <cmath>
#include <numbers>
#include <vector>

#include "smt/layers/basic.hpp"

namespace smt {

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// First and second moments per parameter, in parameter order.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::int64_t step = 0;  // updates applied so far

  static AdamState zeros_like(const NamedTensors<T>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.push_back(Tensor<T>(p.tensor.shape()));
      s.v.push_back(Tensor<T>(p.tensor.shape()));
    }
    return s;
  }
};

/// One update. Tensors without an accumulated gradient are treated as having
/// a zero gradient. Decay multiplies the weight by (1 - lr*wd) before the
/// adaptive step and only touches tensors flagged `decay`.
template <typename T>
void adamw_step(const NamedTensors<T>& params, AdamState<T>& state, const AdamWHyper& h) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw UsageError("optimizer state has " + std::to_string(state.m.size()) + " slots for " + std::to_string(params.size()) +
                     " parameters");
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.shape() != w.shape() || v.shape() != w.shape())
      throw UsageError("optimizer state for " + params[i].name + " has shape " + shape_str(m.shape()) + ", parameter is " +
                       shape_str(w.shape()));
    const auto g = w.grad();
    const bool has_grad = !g.empty();
    const double shrink = params[i].decay ? 1.0 - h.lr * h.weight_decay : 1.0;
    for (Index k = 0; k < w.numel(); ++k) {
      const double gk = has_grad ? static_cast<double>(g[static_cast<std::size_t>(k)]) : 0.0;
      const double mk = h.beta1 * static_cast<double>(m[k]) + (1.0 - h.beta1) * gk;
      const double vk = h.beta2 * static_cast<double>(v[k]) + (1.0 - h.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = (mk / c1) / (std::sqrt(vk / c2) + h.eps);
      w[k] = static_cast<T>(static_cast<double>(w[k]) * shrink - h.lr * update);
    }
  }
}

struct LrSchedule {
  std::int64_t total_steps = 1;
  std::int64_t warmup_steps = 0;
  double base_lr = 1e-3;
  double warmup_lr = 1e-6;
  double min_lr = 1e-5;
};

/// Linear warmup from warmup_lr to base_lr over [0, warmup_steps], then a
/// half cosine reaching min_lr at the last step (total_steps - 1).
inline double cosine_lr(std::int64_t step, const LrSchedule& s) {
  if (step < 0) throw UsageError("cosine_lr: step must be >= 0, got " + std::to_string(step));
  if (step < s.warmup_steps)
    return s.warmup_lr + (s.base_lr - s.warmup_lr) * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  const std::int64_t span = s.total_steps - 1 - s.warmup_steps;
  if (span <= 0) return s.base_lr;
  const double progress = std::min(1.0, static_cast<double>(step - s.warmup_steps) / static_cast<double>(span));
  return s.min_lr + (s.base_lr - s.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
double global_grad_norm(const NamedTensors<T>& params) {
  double sq = 0;
  for (const auto& p : params)
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

/// Scales every gradient by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the applied factor (1 when nothing changed); the
/// pre-clip norm goes to `norm_out`.
template <typename T>
double clip_grad_norm(const NamedTensors<T>& params, double max_norm, double* norm_out = nullptr) {
  if (!(max_norm > 0)) throw UsageError("clip_grad_norm: max_norm must be > 0");
  const double norm = global_grad_norm(params);
  if (norm_out) *norm_out = norm;
  if (!(norm > max_norm)) return 1.0;
  const double scale = max_norm / norm;
  for (const auto& p : params) {
    auto t = p.tensor;
    for (T& g : t.grad()) g = static_cast<T>(static_cast<double>(g) * scale);
  }
  return scale;
}

}  // namespace smt
