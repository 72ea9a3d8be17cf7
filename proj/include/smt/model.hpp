#pragma once

#include <set>
#include <string>
#include <vector>

#include "smt/config.hpp"
#include "smt/log.hpp"

namespace smt {

/// Stem BN needs at least this many samples for batch statistics in training.
inline constexpr Index kMinBatchNormBatch = 8;

struct LayerInfo {
  std::string name;
  std::string kind;  // stem, downsample, sam_block, msa_block, head
  int stage = -1;
  int index = 0;     // position inside the stage
};

template <typename T>
struct Stage {
  bool has_downsample = false;
  Downsample<T> downsample;
  std::vector<Block<T>> blocks;
};

template <typename T>
class Model {
 public:
  ModelConfig config;
  Stem<T> stem;
  std::array<Stage<T>, 4> stages;
  Head<T> head;
  std::vector<LayerInfo> layers;

  /// Downsampling factor of stage `s` relative to the input (4, 8, 16, 32).
  static Index stage_stride(int s) { return Index{4} << s; }

  /// Parameters and buffers in deterministic build order.
  NamedTensors<T> tensors() const {
    NamedTensors<T> out;
    stem.collect("stem", out);
    for (int s = 0; s < 4; ++s) {
      const auto& st = stages[static_cast<std::size_t>(s)];
      const std::string prefix = "stages." + std::to_string(s);
      if (st.has_downsample) st.downsample.collect(prefix + ".downsample", out);
      for (std::size_t b = 0; b < st.blocks.size(); ++b) st.blocks[b].collect(prefix + ".blocks." + std::to_string(b), out);
    }
    head.collect("head", out);
    return out;
  }

  /// Trainable tensors only.
  NamedTensors<T> parameters() const {
    NamedTensors<T> out;
    for (auto& nt : tensors())
      if (!nt.buffer) out.push_back(nt);
    return out;
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& nt : parameters()) n += nt.tensor.numel();
    return n;
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4) throw InputError("model input must be N x H x W x C, got " + shape_str(x.shape()));
    if (x.dim(3) != config.in_channels)
      throw InputError("model input has " + std::to_string(x.dim(3)) + " channels, expected " + std::to_string(config.in_channels));
    check_input_size(x.dim(1), x.dim(2));
  }

  static void check_input_size(Index h, Index w) {
    if (h % 32 != 0 || w % 32 != 0 || h < 32 || w < 32)
      throw InputError("input size " + std::to_string(h) + "x" + std::to_string(w) +
                       " must be a positive multiple of 32 (total downsampling of the four stages)");
  }

  /// Logits [N, num_classes]. `stage_outputs`, when given, receives the
  /// feature map leaving each stage.
  Tensor<T> forward(const Tensor<T>& x, ForwardContext<T>& ctx, std::vector<Tensor<T>>* stage_outputs = nullptr) const {
    check_input(x);
    auto bn_mode = ctx.mode;
    if (bn_mode == ops::NormMode::train && x.dim(0) < kMinBatchNormBatch) {
      log::warn("batch of " + std::to_string(x.dim(0)) + " is below " + std::to_string(kMinBatchNormBatch) +
                "; stem batch norm uses running statistics");
      bn_mode = ops::NormMode::eval;
    }
    auto h = stem.forward(x, bn_mode);
    for (const auto& st : stages) {
      if (st.has_downsample) h = st.downsample.forward(h);
      for (const auto& b : st.blocks) h = b.forward(h, ctx);
      if (stage_outputs) stage_outputs->push_back(h);
    }
    return head.forward(h);
  }

  Tensor<T> forward(const Tensor<T>& x, ops::NormMode mode = ops::NormMode::eval) const {
    ForwardContext<T> ctx;
    ctx.mode = mode;
    return forward(x, ctx);
  }

  /// Static cost rows for an input of h x w.
  CostSheet cost(Index h, Index w) const {
    check_input_size(h, w);
    CostSheet sheet;
    stem.cost("stem", h, w, sheet);
    h /= 4;
    w /= 4;
    for (int s = 0; s < 4; ++s) {
      sheet.stage = s;
      const auto& st = stages[static_cast<std::size_t>(s)];
      const std::string prefix = "stages." + std::to_string(s);
      if (st.has_downsample) {
        st.downsample.cost(prefix + ".downsample", h, w, sheet);
        h /= 2;
        w /= 2;
      }
      for (std::size_t b = 0; b < st.blocks.size(); ++b) st.blocks[b].cost(prefix + ".blocks." + std::to_string(b), h, w, sheet);
    }
    sheet.stage = -1;
    head.cost("head", h, w, sheet);
    return sheet;
  }
};

/// Parameters drawn from one stream seeded by `seed`, in build order. With
/// `initialize` false the weights stay zero (cost analysis only needs shapes).
template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed, bool initialize = true) {
  validate(cfg);
  Rng rng(mix_seed({seed, 0x6d6f64656cULL}));
  rng.draws = initialize;
  Model<T> m;
  m.config = cfg;
  m.stem = Stem<T>(cfg.in_channels, cfg.stages[0].dim, cfg.stem_kernel, cfg.bias, rng);
  m.layers.push_back({"stem", "stem", -1, 0});

  Index total_blocks = 0;
  for (const auto& st : cfg.stages) total_blocks += st.depth;
  std::uint64_t global = 0;
  for (int s = 0; s < 4; ++s) {
    const auto& sc = cfg.stages[static_cast<std::size_t>(s)];
    auto& stage = m.stages[static_cast<std::size_t>(s)];
    const std::string prefix = "stages." + std::to_string(s);
    if (s > 0) {
      stage.has_downsample = true;
      stage.downsample = Downsample<T>(cfg.stages[static_cast<std::size_t>(s - 1)].dim, sc.dim, cfg.bias, rng);
      m.layers.push_back({prefix + ".downsample", "downsample", s, 0});
    }
    SamOptions opts;
    opts.heads = sc.sam_heads;
    opts.expansion = sc.sam_expansion;
    opts.aggregation = sc.aggregation;
    opts.wiring = cfg.saa_wiring;
    opts.split = sc.sam_head_split;
    opts.bias = cfg.bias;
    const auto plan = resolved_plan(cfg, s);
    for (std::size_t b = 0; b < plan.size(); ++b, ++global) {
      const double drop = total_blocks > 1 ? cfg.drop_path_max * static_cast<double>(global) / static_cast<double>(total_blocks - 1) : 0.0;
      stage.blocks.emplace_back(plan[b], sc.dim, opts, sc.msa_heads, cfg.stage_ffn_ratio(s), drop, global, rng);
      const std::string name = prefix + ".blocks." + std::to_string(b);
      stage.blocks.back().set_identity(name, s, Model<T>::stage_stride(s));
      m.layers.push_back({name, plan[b] == BlockKind::sam ? "sam_block" : "msa_block", s, static_cast<int>(b)});
    }
  }
  m.head = Head<T>(cfg.stages[3].dim, cfg.num_classes, cfg.bias, rng);
  m.layers.push_back({"head", "head", -1, 0});

  std::set<std::string> seen;
  for (const auto& nt : m.tensors())
    if (!seen.insert(nt.name).second) throw ConfigError("internal: duplicate parameter name " + nt.name);
  return m;
}

}  // namespace smt
