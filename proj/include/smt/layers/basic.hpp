#pragma once

// Parameterized primitives (linear, conv, norms) plus the plumbing every layer
// shares: named-tensor collection, cost rows and the per-forward context.

#include <cstdint>
#include <string>
#include <vector>

#include "smt/ops.hpp"
#include "smt/rng.hpp"

namespace smt {

inline constexpr double kInitStd = 0.02;
inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool buffer = false;  // running statistics: saved, never optimized
  bool decay = false;   // weight matrices and kernels; biases and norm affines are exempt
};

template <typename T>
using NamedTensors = std::vector<NamedTensor<T>>;

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

template <typename T>
Tensor<T> init_truncated_normal(Shape shape, Rng& rng, double std = kInitStd) {
  Tensor<T> t(std::move(shape));
  if (!rng.draws) return t;
  for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(std));
  return t;
}

/// One line of the static cost model. `flops` uses the multiply-accumulate
/// convention; `params` counts the scalars owned by this row.
struct CostRow {
  std::string name;
  std::string kind;  // conv, linear, norm, attention_matmul, softmax, activation, elementwise, pool
  int stage = -1;    // -1 for stem and head
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct CostSheet {
  std::vector<CostRow> rows;
  int stage = -1;

  void add(std::string name, std::string kind, std::int64_t params, std::int64_t flops) {
    rows.push_back({std::move(name), std::move(kind), stage, params, flops});
  }
};

// Fixed per-element operation counts for the non-MAC ops.
inline constexpr std::int64_t kNormOps = 4;
inline constexpr std::int64_t kGeluOps = 8;
inline constexpr std::int64_t kSoftmaxOps = 5;

template <typename T>
struct SamCapture {
  std::string layer;
  int stage = 0;
  Index stride = 1;  // input pixels per feature-map cell
  std::vector<Tensor<T>> heads;  // per-head MHMC outputs
  Tensor<T> pre_aggregation;     // concatenated MHMC output
  Tensor<T> modulator;           // M
  Tensor<T> value;               // V
  Tensor<T> modulated;           // Z
};

template <typename T>
struct AttentionCapture {
  std::string layer;
  int stage = 0;
  Index stride = 1;
  Index grid_h = 0, grid_w = 0;
  Tensor<T> probs;  // [N, heads, tokens, tokens]
};

template <typename T>
struct Captures {
  bool sam = false;
  bool attention = false;
  std::vector<SamCapture<T>> sams;
  std::vector<AttentionCapture<T>> attentions;
};

template <typename T>
struct ForwardContext {
  ops::NormMode mode = ops::NormMode::eval;
  std::uint64_t drop_seed = 0;  // keyed per training step
  Captures<T>* captures = nullptr;

  bool training() const { return mode == ops::NormMode::train; }
};

template <typename T>
struct Linear {
  Index in = 0, out = 0;
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out] or undefined

  Linear() = default;
  Linear(Index in_, Index out_, bool with_bias, Rng& rng) : in(in_), out(out_) {
    weight = init_truncated_normal<T>({in, out}, rng);
    if (with_bias) bias = Tensor<T>::zeros({out});
  }

  Tensor<T> forward(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }

  void collect(const std::string& prefix, NamedTensors<T>& out_list) const {
    out_list.push_back({join_name(prefix, "weight"), weight, false, true});
    if (bias.defined()) out_list.push_back({join_name(prefix, "bias"), bias});
  }

  std::int64_t param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }

  void cost(const std::string& name, std::int64_t rows, CostSheet& sheet) const {
    sheet.add(name, "linear", param_count(), rows * in * out);
  }
};

/// Pointwise map with block-diagonal (possibly uneven) channel groups.
template <typename T>
struct GroupedLinear {
  ops::GroupLayout layout;
  Tensor<T> weight;  // flat, blocks back to back
  Tensor<T> bias;

  GroupedLinear() = default;
  GroupedLinear(ops::GroupLayout layout_, bool with_bias, Rng& rng) : layout(std::move(layout_)) {
    weight = init_truncated_normal<T>({layout.weight_count()}, rng);
    if (with_bias) bias = Tensor<T>::zeros({layout.out_total()});
  }

  Tensor<T> forward(const Tensor<T>& x) const { return ops::grouped_linear(x, weight, bias, layout); }

  void collect(const std::string& prefix, NamedTensors<T>& out_list) const {
    out_list.push_back({join_name(prefix, "weight"), weight, false, true});
    if (bias.defined()) out_list.push_back({join_name(prefix, "bias"), bias});
  }

  std::int64_t param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }

  void cost(const std::string& name, std::int64_t rows, CostSheet& sheet) const {
    sheet.add(name, "linear", param_count(), rows * layout.weight_count());
  }
};

template <typename T>
struct Conv2d {
  Index in = 0, out = 0, kernel = 1;
  ops::Conv2dParams params;
  Tensor<T> weight;  // [k, k, in/groups, out]
  Tensor<T> bias;

  Conv2d() = default;
  Conv2d(Index in_, Index out_, Index kernel_, ops::Conv2dParams p, bool with_bias, Rng& rng)
      : in(in_), out(out_), kernel(kernel_), params(p) {
    if (in % p.groups != 0 || out % p.groups != 0)
      throw ConfigError("conv " + std::to_string(in) + "->" + std::to_string(out) + ": channels not divisible by groups " +
                        std::to_string(p.groups));
    weight = init_truncated_normal<T>({kernel, kernel, in / p.groups, out}, rng);
    if (with_bias) bias = Tensor<T>::zeros({out});
  }

  Tensor<T> forward(const Tensor<T>& x) const { return ops::conv2d(x, weight, bias, params); }

  Index out_extent(Index e) const { return ops::conv_out_extent(e, kernel, params.stride, params.padding); }

  void collect(const std::string& prefix, NamedTensors<T>& out_list) const {
    out_list.push_back({join_name(prefix, "weight"), weight, false, true});
    if (bias.defined()) out_list.push_back({join_name(prefix, "bias"), bias});
  }

  std::int64_t param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }

  /// Takes the input extents; appends one row and returns nothing.
  void cost(const std::string& name, Index h, Index w, CostSheet& sheet) const {
    const std::int64_t cells = out_extent(h) * out_extent(w);
    sheet.add(name, "conv", param_count(), cells * kernel * kernel * (in / params.groups) * out);
  }
};

template <typename T>
struct LayerNorm {
  Index channels = 0;
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(Index c) : channels(c), gamma(Tensor<T>::ones({c})), beta(Tensor<T>::zeros({c})) {}

  Tensor<T> forward(const Tensor<T>& x) const { return ops::layer_norm(x, gamma, beta, static_cast<T>(kLayerNormEps)); }

  void collect(const std::string& prefix, NamedTensors<T>& out_list) const {
    out_list.push_back({join_name(prefix, "weight"), gamma});
    out_list.push_back({join_name(prefix, "bias"), beta});
  }

  void cost(const std::string& name, std::int64_t rows, CostSheet& sheet) const {
    sheet.add(name, "norm", 2 * channels, kNormOps * rows * channels);
  }
};

template <typename T>
struct BatchNorm {
  Index channels = 0;
  Tensor<T> gamma, beta, running_mean, running_var;

  BatchNorm() = default;
  explicit BatchNorm(Index c)
      : channels(c),
        gamma(Tensor<T>::ones({c})),
        beta(Tensor<T>::zeros({c})),
        running_mean(Tensor<T>::zeros({c})),
        running_var(Tensor<T>::ones({c})) {}

  /// Running statistics are updated in place in train mode; handles are
  /// shared, so the const method still mutates the layer's buffers.
  Tensor<T> forward(const Tensor<T>& x, ops::NormMode mode) const {
    Tensor<T> rm = running_mean, rv = running_var;
    return ops::batch_norm(x, gamma, beta, rm, rv, mode, static_cast<T>(kBatchNormMomentum), static_cast<T>(kBatchNormEps));
  }

  void collect(const std::string& prefix, NamedTensors<T>& out_list) const {
    out_list.push_back({join_name(prefix, "weight"), gamma});
    out_list.push_back({join_name(prefix, "bias"), beta});
    out_list.push_back({join_name(prefix, "running_mean"), running_mean, true});
    out_list.push_back({join_name(prefix, "running_var"), running_var, true});
  }

  void cost(const std::string& name, std::int64_t rows, CostSheet& sheet) const {
    sheet.add(name, "norm", 2 * channels, kNormOps * rows * channels);
  }
};

}  // namespace smt
