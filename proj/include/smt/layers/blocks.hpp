#pragma once

// Multi-head mixed convolution, scale-aware aggregation, the modulation mixer,
// self-attention, the detail FFN and the residual block, plus stem,
// downsampler and classifier head.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "smt/layers/basic.hpp"

namespace smt {

enum class AggregationKind { none, single_linear, two_linears, ibn, saa };
enum class SaaWiring { expand_mix, bottleneck };
enum class HeadSplit { even, balanced };
enum class BlockKind { sam, msa };

/// Channel counts per head. `even` demands divisibility; `balanced` hands the
/// remainder out one channel at a time to the leading heads.
inline std::vector<Index> split_heads(Index channels, Index heads, HeadSplit split) {
  if (heads < 1) throw ConfigError("head count must be >= 1, got " + std::to_string(heads));
  if (heads > channels)
    throw ConfigError("head count " + std::to_string(heads) + " exceeds channel count " + std::to_string(channels));
  if (split == HeadSplit::even && channels % heads != 0)
    throw ConfigError("channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
  std::vector<Index> sizes(static_cast<std::size_t>(heads), channels / heads);
  for (Index j = 0; j < channels % heads; ++j) ++sizes[static_cast<std::size_t>(j)];
  return sizes;
}

inline std::vector<Index> offsets_of(const std::vector<Index>& sizes) {
  std::vector<Index> off(sizes.size(), 0);
  for (std::size_t i = 1; i < sizes.size(); ++i) off[i] = off[i - 1] + sizes[i - 1];
  return off;
}

/// Group i collects channel i of every head that has one, in head order.
/// Returns perm with out-channel o = in-channel perm[o]; for equal heads of
/// size M this is out (i*N + j) = in (j*M + i).
inline std::vector<Index> saa_permutation(const std::vector<Index>& head_sizes) {
  const auto off = offsets_of(head_sizes);
  const Index longest = *std::max_element(head_sizes.begin(), head_sizes.end());
  std::vector<Index> perm;
  for (Index i = 0; i < longest; ++i)
    for (std::size_t j = 0; j < head_sizes.size(); ++j)
      if (i < head_sizes[j]) perm.push_back(off[j] + i);
  return perm;
}

inline std::vector<Index> saa_group_sizes(const std::vector<Index>& head_sizes) {
  const Index longest = *std::max_element(head_sizes.begin(), head_sizes.end());
  std::vector<Index> groups(static_cast<std::size_t>(longest), 0);
  for (Index s : head_sizes)
    for (Index i = 0; i < s; ++i) ++groups[static_cast<std::size_t>(i)];
  return groups;
}

inline std::vector<Index> invert_permutation(const std::vector<Index>& perm) {
  std::vector<Index> inv(perm.size());
  for (std::size_t o = 0; o < perm.size(); ++o) inv[static_cast<std::size_t>(perm[o])] = static_cast<Index>(o);
  return inv;
}

template <typename T>
Tensor<T> saa_shuffle(const Tensor<T>& x, Index heads) {
  return ops::permute_channels(x, saa_permutation(split_heads(x.dim(-1), heads, HeadSplit::even)));
}

/// Per-head depthwise convolutions with kernel 3, 5, 7, ... over contiguous
/// channel slices.
template <typename T>
struct Mhmc {
  std::vector<Index> head_sizes, offsets, kernels;
  std::vector<Conv2d<T>> convs;

  Mhmc() = default;
  Mhmc(Index channels, Index heads, HeadSplit split, bool bias, Rng& rng)
      : head_sizes(split_heads(channels, heads, split)), offsets(offsets_of(head_sizes)) {
    for (Index i = 0; i < heads; ++i) {
      const Index k = 3 + 2 * i;
      const Index c = head_sizes[static_cast<std::size_t>(i)];
      kernels.push_back(k);
      convs.emplace_back(c, c, k, ops::Conv2dParams{1, k / 2, c}, bias, rng);
    }
  }

  Index heads() const { return static_cast<Index>(convs.size()); }

  Tensor<T> forward(const Tensor<T>& x, std::vector<Tensor<T>>* per_head = nullptr) const {
    if (heads() == 1) {
      auto y = convs[0].forward(x);
      if (per_head) per_head->push_back(y);
      return y;
    }
    std::vector<Tensor<T>> outs;
    for (std::size_t i = 0; i < convs.size(); ++i)
      outs.push_back(convs[i].forward(ops::slice_channels(x, offsets[i], head_sizes[i])));
    if (per_head) per_head->insert(per_head->end(), outs.begin(), outs.end());
    return ops::concat_channels(outs);
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect(join_name(prefix, "head" + std::to_string(i)), out);
  }

  void cost(const std::string& prefix, Index h, Index w, CostSheet& sheet) const {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].cost(join_name(prefix, "head" + std::to_string(i)), h, w, sheet);
  }
};

/// Scale-aware aggregation. Shuffle into cross-head groups, then
///   expand_mix: grouped expand (g -> e*g), GELU, dense e*C -> C
///   bottleneck: grouped expand, GELU, grouped reduce (e*g -> g), dense C -> C
template <typename T>
struct Saa {
  std::vector<Index> perm, groups;
  Index channels = 0, expansion = 2;
  SaaWiring wiring = SaaWiring::expand_mix;
  bool activation = true;  // tests switch this off to build exact identities
  GroupedLinear<T> expand, reduce;
  Linear<T> inter;

  Saa() = default;
  Saa(Index c, Index heads, Index e, SaaWiring wiring_, HeadSplit split, bool bias, Rng& rng)
      : channels(c), expansion(e), wiring(wiring_) {
    if (e < 1) throw ConfigError("aggregation expansion must be >= 1, got " + std::to_string(e));
    const auto sizes = split_heads(c, heads, split);
    perm = saa_permutation(sizes);
    groups = saa_group_sizes(sizes);
    std::vector<Index> wide(groups.size());
    std::transform(groups.begin(), groups.end(), wide.begin(), [e](Index g) { return g * e; });
    expand = GroupedLinear<T>(ops::GroupLayout{groups, wide}, bias, rng);
    if (wiring == SaaWiring::bottleneck) {
      reduce = GroupedLinear<T>(ops::GroupLayout{wide, groups}, bias, rng);
      inter = Linear<T>(c, c, bias, rng);
    } else {
      inter = Linear<T>(e * c, c, bias, rng);
    }
  }

  Tensor<T> shuffle(const Tensor<T>& x) const { return ops::permute_channels(x, perm); }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto h = expand.forward(shuffle(x));
    if (activation) h = ops::gelu(h);
    if (wiring == SaaWiring::bottleneck) h = reduce.forward(h);
    return inter.forward(h);
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    expand.collect(join_name(prefix, "expand"), out);
    if (wiring == SaaWiring::bottleneck) reduce.collect(join_name(prefix, "reduce"), out);
    inter.collect(join_name(prefix, "inter"), out);
  }

  void cost(const std::string& prefix, std::int64_t rows, CostSheet& sheet) const {
    expand.cost(join_name(prefix, "expand"), rows, sheet);
    if (activation) sheet.add(join_name(prefix, "act"), "activation", 0, kGeluOps * rows * expansion * channels);
    if (wiring == SaaWiring::bottleneck) reduce.cost(join_name(prefix, "reduce"), rows, sheet);
    inter.cost(join_name(prefix, "inter"), rows, sheet);
  }
};

/// Fusion of the MHMC output: SAA or one of the simpler ablation substitutes.
template <typename T>
struct Aggregation {
  AggregationKind kind = AggregationKind::saa;
  Index channels = 0;
  Linear<T> fc1, fc2;
  Saa<T> saa;

  Aggregation() = default;
  Aggregation(AggregationKind k, Index c, Index heads, Index e, SaaWiring wiring, HeadSplit split, bool bias, Rng& rng)
      : kind(k), channels(c) {
    switch (kind) {
      case AggregationKind::none: break;
      case AggregationKind::single_linear: fc1 = Linear<T>(c, c, bias, rng); break;
      case AggregationKind::two_linears:
        fc1 = Linear<T>(c, c, bias, rng);
        fc2 = Linear<T>(c, c, bias, rng);
        break;
      case AggregationKind::ibn:
        fc1 = Linear<T>(c, 2 * c, bias, rng);
        fc2 = Linear<T>(2 * c, c, bias, rng);
        break;
      case AggregationKind::saa: saa = Saa<T>(c, heads, e, wiring, split, bias, rng); break;
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    switch (kind) {
      case AggregationKind::none: return x;
      case AggregationKind::single_linear: return fc1.forward(x);
      case AggregationKind::two_linears:
      case AggregationKind::ibn: return fc2.forward(ops::gelu(fc1.forward(x)));
      case AggregationKind::saa: return saa.forward(x);
    }
    return x;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    switch (kind) {
      case AggregationKind::none: break;
      case AggregationKind::single_linear: fc1.collect(join_name(prefix, "fc1"), out); break;
      case AggregationKind::two_linears:
      case AggregationKind::ibn:
        fc1.collect(join_name(prefix, "fc1"), out);
        fc2.collect(join_name(prefix, "fc2"), out);
        break;
      case AggregationKind::saa: saa.collect(prefix, out); break;
    }
  }

  void cost(const std::string& prefix, std::int64_t rows, CostSheet& sheet) const {
    switch (kind) {
      case AggregationKind::none: break;
      case AggregationKind::single_linear: fc1.cost(join_name(prefix, "fc1"), rows, sheet); break;
      case AggregationKind::two_linears:
      case AggregationKind::ibn:
        fc1.cost(join_name(prefix, "fc1"), rows, sheet);
        sheet.add(join_name(prefix, "act"), "activation", 0, kGeluOps * rows * fc1.out);
        fc2.cost(join_name(prefix, "fc2"), rows, sheet);
        break;
      case AggregationKind::saa: saa.cost(prefix, rows, sheet); break;
    }
  }
};

struct SamOptions {
  Index heads = 4;
  Index expansion = 2;
  AggregationKind aggregation = AggregationKind::saa;
  SaaWiring wiring = SaaWiring::expand_mix;
  HeadSplit split = HeadSplit::even;
  bool bias = true;
};

/// Scale-aware modulation: Z = Agg(MHMC(x Ws)) * (x Wv), then an output projection.
template <typename T>
struct Sam {
  Index channels = 0;
  Linear<T> s, v, proj;
  Mhmc<T> mhmc;
  Aggregation<T> agg;
  // Identify captures.
  std::string name;
  int stage = 0;
  Index stride = 1;

  Sam() = default;
  Sam(Index c, const SamOptions& o, Rng& rng) : channels(c) {
    s = Linear<T>(c, c, o.bias, rng);
    v = Linear<T>(c, c, o.bias, rng);
    mhmc = Mhmc<T>(c, o.heads, o.split, o.bias, rng);
    agg = Aggregation<T>(o.aggregation, c, o.heads, o.expansion, o.wiring, o.split, o.bias, rng);
    proj = Linear<T>(c, c, o.bias, rng);
  }

  /// Returns the projected output; `z_out`, when given, receives Z = M * V.
  Tensor<T> forward(const Tensor<T>& x, ForwardContext<T>& ctx, Tensor<T>* z_out = nullptr) const {
    const bool capture = ctx.captures != nullptr && ctx.captures->sam;
    SamCapture<T> cap;
    auto value = v.forward(x);
    auto mixed = mhmc.forward(s.forward(x), capture ? &cap.heads : nullptr);
    auto modulator = agg.forward(mixed);
    auto z = ops::mul(modulator, value);
    if (z_out) *z_out = z;
    if (capture) {
      cap.layer = name;
      cap.stage = stage;
      cap.stride = stride;
      cap.pre_aggregation = mixed;
      cap.modulator = modulator;
      cap.value = value;
      cap.modulated = z;
      ctx.captures->sams.push_back(std::move(cap));
    }
    return proj.forward(z);
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    s.collect(join_name(prefix, "s"), out);
    v.collect(join_name(prefix, "v"), out);
    mhmc.collect(join_name(prefix, "mhmc"), out);
    agg.collect(join_name(prefix, "agg"), out);
    proj.collect(join_name(prefix, "proj"), out);
  }

  void cost(const std::string& prefix, Index h, Index w, CostSheet& sheet) const {
    const std::int64_t rows = h * w;
    s.cost(join_name(prefix, "s"), rows, sheet);
    v.cost(join_name(prefix, "v"), rows, sheet);
    mhmc.cost(join_name(prefix, "mhmc"), h, w, sheet);
    agg.cost(join_name(prefix, "agg"), rows, sheet);
    sheet.add(join_name(prefix, "modulate"), "elementwise", 0, rows * channels);
    proj.cost(join_name(prefix, "proj"), rows, sheet);
  }
};

/// Full (global) multi-head self-attention over the H*W tokens.
template <typename T>
struct Msa {
  Index channels = 0, heads = 1;
  Linear<T> qkv, proj;
  std::string name;
  int stage = 0;
  Index stride = 1;

  Msa() = default;
  Msa(Index c, Index h, bool bias, Rng& rng) : channels(c), heads(h) {
    if (h < 1 || c % h != 0)
      throw ConfigError("attention channels " + std::to_string(c) + " not divisible by heads " + std::to_string(h));
    qkv = Linear<T>(c, 3 * c, bias, rng);
    proj = Linear<T>(c, c, bias, rng);
  }

  T scale() const { return static_cast<T>(1.0 / std::sqrt(static_cast<double>(channels / heads))); }

  Tensor<T> forward(const Tensor<T>& x, ForwardContext<T>& ctx) const {
    const Index n = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto packed = ops::reshape(qkv.forward(x), {n, h * w, 3 * channels});
    const bool capture = ctx.captures != nullptr && ctx.captures->attention;
    Tensor<T> probs;
    auto y = ops::attention(packed, heads, scale(), capture ? &probs : nullptr);
    if (capture) ctx.captures->attentions.push_back({name, stage, stride, h, w, probs});
    return proj.forward(ops::reshape(y, {n, h, w, channels}));
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    qkv.collect(join_name(prefix, "qkv"), out);
    proj.collect(join_name(prefix, "proj"), out);
  }

  void cost(const std::string& prefix, Index h, Index w, CostSheet& sheet) const {
    const std::int64_t t = h * w;
    qkv.cost(join_name(prefix, "qkv"), t, sheet);
    sheet.add(join_name(prefix, "qk"), "attention_matmul", 0, t * t * channels);
    sheet.add(join_name(prefix, "softmax"), "softmax", 0, kSoftmaxOps * heads * t * t);
    sheet.add(join_name(prefix, "pv"), "attention_matmul", 0, t * t * channels);
    proj.cost(join_name(prefix, "proj"), t, sheet);
  }
};

/// expand -> GELU -> (a + DW3x3(a)) -> reduce
template <typename T>
struct Ffn {
  Index channels = 0, hidden = 0;
  Linear<T> fc1, fc2;
  Conv2d<T> dw;

  Ffn() = default;
  Ffn(Index c, Index ratio, bool bias, Rng& rng) : channels(c), hidden(c * ratio) {
    if (ratio < 1) throw ConfigError("ffn ratio must be >= 1, got " + std::to_string(ratio));
    fc1 = Linear<T>(c, hidden, bias, rng);
    dw = Conv2d<T>(hidden, hidden, 3, ops::Conv2dParams{1, 1, hidden}, bias, rng);
    fc2 = Linear<T>(hidden, c, bias, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto a = ops::gelu(fc1.forward(x));
    return fc2.forward(ops::add(a, dw.forward(a)));
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    fc1.collect(join_name(prefix, "fc1"), out);
    dw.collect(join_name(prefix, "dw"), out);
    fc2.collect(join_name(prefix, "fc2"), out);
  }

  void cost(const std::string& prefix, Index h, Index w, CostSheet& sheet) const {
    const std::int64_t rows = h * w;
    fc1.cost(join_name(prefix, "fc1"), rows, sheet);
    sheet.add(join_name(prefix, "act"), "activation", 0, kGeluOps * rows * hidden);
    dw.cost(join_name(prefix, "dw"), h, w, sheet);
    sheet.add(join_name(prefix, "detail_add"), "elementwise", 0, rows * hidden);
    fc2.cost(join_name(prefix, "fc2"), rows, sheet);
  }
};

/// Per-sample residual-branch scaling: dropped samples get 0, kept samples
/// 1/(1-p) so the expectation matches evaluation.
template <typename T>
Tensor<T> drop_path(const Tensor<T>& branch, double p, const ForwardContext<T>& ctx, std::uint64_t block, std::uint64_t slot) {
  if (!ctx.training() || p <= 0) return branch;
  const Index n = branch.dim(0);
  std::vector<T> factors(static_cast<std::size_t>(n), T(0));
  if (p < 1) {
    for (Index s = 0; s < n; ++s) {
      const double u = unit_uniform(mix_seed({ctx.drop_seed, block, slot, static_cast<std::uint64_t>(s)}));
      if (u >= p) factors[static_cast<std::size_t>(s)] = static_cast<T>(1.0 / (1.0 - p));
    }
  }
  return ops::scale_samples(branch, std::move(factors));
}

template <typename T>
struct Block {
  BlockKind kind = BlockKind::sam;
  Index channels = 0;
  double drop_prob = 0;
  std::uint64_t index = 0;  // global position, keys the drop-path stream
  LayerNorm<T> norm1, norm2;
  Sam<T> sam;
  Msa<T> msa;
  Ffn<T> ffn;

  Block() = default;
  Block(BlockKind k, Index c, const SamOptions& sam_opts, Index msa_heads, Index ffn_ratio, double drop, std::uint64_t idx,
        Rng& rng)
      : kind(k), channels(c), drop_prob(drop), index(idx), norm1(c), norm2(c) {
    if (kind == BlockKind::sam)
      sam = Sam<T>(c, sam_opts, rng);
    else
      msa = Msa<T>(c, msa_heads, sam_opts.bias, rng);
    ffn = Ffn<T>(c, ffn_ratio, sam_opts.bias, rng);
  }

  std::string mixer_name() const { return kind == BlockKind::sam ? "sam" : "msa"; }

  void set_identity(const std::string& name, int stage, Index stride) {
    sam.name = msa.name = join_name(name, mixer_name());
    sam.stage = msa.stage = stage;
    sam.stride = msa.stride = stride;
  }

  Tensor<T> forward(const Tensor<T>& x, ForwardContext<T>& ctx) const {
    auto n1 = norm1.forward(x);
    auto mixed = kind == BlockKind::sam ? sam.forward(n1, ctx) : msa.forward(n1, ctx);
    auto h = ops::add(x, drop_path(mixed, drop_prob, ctx, index, 0));
    return ops::add(h, drop_path(ffn.forward(norm2.forward(h)), drop_prob, ctx, index, 1));
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    norm1.collect(join_name(prefix, "norm1"), out);
    if (kind == BlockKind::sam)
      sam.collect(join_name(prefix, "sam"), out);
    else
      msa.collect(join_name(prefix, "msa"), out);
    norm2.collect(join_name(prefix, "norm2"), out);
    ffn.collect(join_name(prefix, "ffn"), out);
  }

  void cost(const std::string& prefix, Index h, Index w, CostSheet& sheet) const {
    const std::int64_t rows = h * w;
    norm1.cost(join_name(prefix, "norm1"), rows, sheet);
    if (kind == BlockKind::sam)
      sam.cost(join_name(prefix, "sam"), h, w, sheet);
    else
      msa.cost(join_name(prefix, "msa"), h, w, sheet);
    sheet.add(join_name(prefix, "residual1"), "elementwise", 0, rows * channels);
    norm2.cost(join_name(prefix, "norm2"), rows, sheet);
    ffn.cost(join_name(prefix, "ffn"), h, w, sheet);
    sheet.add(join_name(prefix, "residual2"), "elementwise", 0, rows * channels);
  }
};

/// conv k x k stride 2 + BN, conv 2 x 2 stride 2 + LN: /4 overall.
template <typename T>
struct Stem {
  Conv2d<T> conv1, conv2;
  BatchNorm<T> bn;
  LayerNorm<T> ln;

  Stem() = default;
  Stem(Index in_channels, Index dim, Index kernel, bool bias, Rng& rng) {
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("stem kernel must be odd and >= 1, got " + std::to_string(kernel));
    conv1 = Conv2d<T>(in_channels, dim, kernel, ops::Conv2dParams{2, kernel / 2, 1}, bias, rng);
    bn = BatchNorm<T>(dim);
    conv2 = Conv2d<T>(dim, dim, 2, ops::Conv2dParams{2, 0, 1}, bias, rng);
    ln = LayerNorm<T>(dim);
  }

  Tensor<T> forward(const Tensor<T>& x, ops::NormMode bn_mode) const {
    return ln.forward(conv2.forward(bn.forward(conv1.forward(x), bn_mode)));
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    conv1.collect(join_name(prefix, "conv1"), out);
    bn.collect(join_name(prefix, "bn"), out);
    conv2.collect(join_name(prefix, "conv2"), out);
    ln.collect(join_name(prefix, "norm"), out);
  }

  void cost(const std::string& prefix, Index h, Index w, CostSheet& sheet) const {
    conv1.cost(join_name(prefix, "conv1"), h, w, sheet);
    const Index h1 = conv1.out_extent(h), w1 = conv1.out_extent(w);
    bn.cost(join_name(prefix, "bn"), h1 * w1, sheet);
    conv2.cost(join_name(prefix, "conv2"), h1, w1, sheet);
    ln.cost(join_name(prefix, "norm"), conv2.out_extent(h1) * conv2.out_extent(w1), sheet);
  }
};

/// conv 3 x 3 stride 2 padding 1 + LN.
template <typename T>
struct Downsample {
  Conv2d<T> conv;
  LayerNorm<T> ln;

  Downsample() = default;
  Downsample(Index in, Index out, bool bias, Rng& rng)
      : conv(in, out, 3, ops::Conv2dParams{2, 1, 1}, bias, rng), ln(out) {}

  Tensor<T> forward(const Tensor<T>& x) const { return ln.forward(conv.forward(x)); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    conv.collect(join_name(prefix, "conv"), out);
    ln.collect(join_name(prefix, "norm"), out);
  }

  void cost(const std::string& prefix, Index h, Index w, CostSheet& sheet) const {
    conv.cost(join_name(prefix, "conv"), h, w, sheet);
    ln.cost(join_name(prefix, "norm"), conv.out_extent(h) * conv.out_extent(w), sheet);
  }
};

/// Global average pool -> LN -> linear.
template <typename T>
struct Head {
  LayerNorm<T> ln;
  Linear<T> fc;

  Head() = default;
  Head(Index dim, Index classes, bool bias, Rng& rng) : ln(dim), fc(dim, classes, bias, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const { return fc.forward(ln.forward(ops::global_avg_pool(x))); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    ln.collect(join_name(prefix, "norm"), out);
    fc.collect(join_name(prefix, "fc"), out);
  }

  void cost(const std::string& prefix, Index h, Index w, CostSheet& sheet) const {
    sheet.add(join_name(prefix, "pool"), "pool", 0, h * w * ln.channels);
    ln.cost(join_name(prefix, "norm"), 1, sheet);
    fc.cost(join_name(prefix, "fc"), 1, sheet);
  }
};

}  // namespace smt
