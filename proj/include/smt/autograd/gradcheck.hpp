#pragma once

// Finite-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <type_traits>
#include <vector>

#include "smt/layers/basic.hpp"

namespace smt {

struct GradCheckOptions {
  double tolerance = 1e-5;
  double step = 1e-5;
  Index coords_per_tensor = 20;  // all coordinates when the tensor is smaller
  std::uint64_t seed = 0;
  // Differences below this magnitude are treated as agreement; keeps
  // near-zero gradients from turning rounding noise into huge ratios.
  double abs_floor = 1e-8;
};

struct GradCheckEntry {
  std::string name;
  Index checked = 0;
  double max_rel_error = 0;
  Index worst_index = -1;
  double worst_analytic = 0, worst_numeric = 0;
};

struct GradReport {
  double tolerance = 0;
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const { return max_rel_error() <= tolerance; }
};

inline double grad_rel_error(double analytic, double numeric, double abs_floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= abs_floor) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), abs_floor});
}

/// `loss` must rebuild the scalar loss from the current tensor values on every
/// call. Buffers in `tensors` are skipped.
template <typename T>
GradReport grad_check(const NamedTensors<T>& tensors, const std::function<Tensor<T>()>& loss, const GradCheckOptions& opt = {}) {
  if constexpr (!std::is_same_v<T, double>) {
    throw UsageError("grad_check requires f64 tensors; f32 finite differences are too noisy");
  } else {
    for (const auto& nt : tensors) {
      if (nt.buffer) continue;
      auto t = nt.tensor;
      t.set_requires_grad(true);
      t.drop_grad();
    }
    {
      Tape<double> tape;
      TapeScope<double> scope(tape);
      tape.backward(loss());
    }
    auto eval = [&] {
      NoGradScope<double> ng;
      return loss().item();
    };
    GradReport report;
    report.tolerance = opt.tolerance;
    Rng rng(mix_seed({opt.seed, 0x67636b}));
    for (const auto& nt : tensors) {
      if (nt.buffer) continue;
      auto t = nt.tensor;
      GradCheckEntry entry;
      entry.name = nt.name;
      std::vector<Index> coords;
      if (t.numel() <= opt.coords_per_tensor) {
        coords.resize(static_cast<std::size_t>(t.numel()));
        std::iota(coords.begin(), coords.end(), Index{0});
      } else {
        for (Index i = 0; i < opt.coords_per_tensor; ++i)
          coords.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(t.numel()))));
      }
      for (Index i : coords) {
        const double analytic = t.has_grad() ? t.grad()[static_cast<std::size_t>(i)] : 0.0;
        const double keep = t[i];
        t[i] = keep + opt.step;
        const double up = eval();
        t[i] = keep - opt.step;
        const double down = eval();
        t[i] = keep;
        const double numeric = (up - down) / (2 * opt.step);
        const double err = grad_rel_error(analytic, numeric, opt.abs_floor);
        ++entry.checked;
        if (err > entry.max_rel_error || entry.worst_index < 0) {
          entry.max_rel_error = std::max(entry.max_rel_error, err);
          entry.worst_index = i;
          entry.worst_analytic = analytic;
          entry.worst_numeric = numeric;
        }
      }
      report.entries.push_back(std::move(entry));
    }
    for (const auto& nt : tensors) {
      auto t = nt.tensor;
      t.set_requires_grad(false);
      t.drop_grad();
    }
    return report;
  }
}

}  // namespace smt
