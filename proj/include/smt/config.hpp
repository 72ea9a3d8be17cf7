#pragma once

// Architecture descriptions: stage/model configs, block-plan resolution,
// named presets (paper variants and ablations) and the JSON schema.

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smt/layers/blocks.hpp"

namespace smt {

enum class StackingStrategy { interleave, split, all_sam, all_msa };

struct StageConfig {
  Index dim = 64;
  Index depth = 1;
  Index sam_heads = 4;
  Index sam_expansion = 2;
  Index msa_heads = 8;
  AggregationKind aggregation = AggregationKind::saa;
  std::vector<BlockKind> block_plan;  // empty: derived from the model strategy
  std::optional<Index> ffn_ratio;     // overrides the model-level ratio
  HeadSplit sam_head_split = HeadSplit::even;

  bool operator==(const StageConfig&) const = default;
};

struct ModelConfig {
  std::string name = "custom";
  Index stem_kernel = 3;
  Index in_channels = 3;
  Index num_classes = 1000;
  Index ffn_ratio = 4;
  double drop_path_max = 0.1;
  StackingStrategy stacking_strategy = StackingStrategy::interleave;
  SaaWiring saa_wiring = SaaWiring::expand_mix;
  bool bias = true;
  std::array<StageConfig, 4> stages{};

  bool operator==(const ModelConfig&) const = default;

  Index stage_ffn_ratio(int s) const { return stages[static_cast<std::size_t>(s)].ffn_ratio.value_or(ffn_ratio); }
};

// ---------------------------------------------------------------------------
// Enum names
// ---------------------------------------------------------------------------

namespace names {
inline const std::vector<std::pair<StackingStrategy, std::string>> stacking{
    {StackingStrategy::interleave, "interleave"},
    {StackingStrategy::split, "split"},
    {StackingStrategy::all_sam, "all_sam"},
    {StackingStrategy::all_msa, "all_msa"}};
inline const std::vector<std::pair<AggregationKind, std::string>> aggregation{
    {AggregationKind::none, "none"},
    {AggregationKind::single_linear, "single_linear"},
    {AggregationKind::two_linears, "two_linears"},
    {AggregationKind::ibn, "ibn"},
    {AggregationKind::saa, "saa"}};
inline const std::vector<std::pair<BlockKind, std::string>> block{{BlockKind::sam, "SAM"}, {BlockKind::msa, "MSA"}};
inline const std::vector<std::pair<HeadSplit, std::string>> head_split{{HeadSplit::even, "even"},
                                                                        {HeadSplit::balanced, "balanced"}};
inline const std::vector<std::pair<SaaWiring, std::string>> saa_wiring{{SaaWiring::expand_mix, "expand_mix"},
                                                                        {SaaWiring::bottleneck, "bottleneck"}};

template <typename E>
std::string to_string(const std::vector<std::pair<E, std::string>>& table, E value) {
  for (const auto& [e, s] : table)
    if (e == value) return s;
  return "?";
}

template <typename E>
std::optional<E> from_string(const std::vector<std::pair<E, std::string>>& table, const std::string& text) {
  for (const auto& [e, s] : table)
    if (s == text) return e;
  return std::nullopt;
}

template <typename E>
std::string choices(const std::vector<std::pair<E, std::string>>& table) {
  std::string out;
  for (const auto& [e, s] : table) out += (out.empty() ? "" : ", ") + s;
  return out;
}
}  // namespace names

inline std::string to_string(StackingStrategy s) { return names::to_string(names::stacking, s); }
inline std::string to_string(AggregationKind k) { return names::to_string(names::aggregation, k); }
inline std::string to_string(BlockKind k) { return names::to_string(names::block, k); }

// ---------------------------------------------------------------------------
// Block plans
// ---------------------------------------------------------------------------

/// interleave: (SAM, MSA) x depth/2; split: SAM x depth/2 then MSA x depth/2.
inline std::vector<BlockKind> stacking_plan(Index depth, StackingStrategy strategy) {
  if (depth < 1) throw ConfigError("stage depth must be >= 1, got " + std::to_string(depth));
  std::vector<BlockKind> plan;
  switch (strategy) {
    case StackingStrategy::all_sam: return std::vector<BlockKind>(static_cast<std::size_t>(depth), BlockKind::sam);
    case StackingStrategy::all_msa: return std::vector<BlockKind>(static_cast<std::size_t>(depth), BlockKind::msa);
    case StackingStrategy::interleave:
    case StackingStrategy::split:
      if (depth % 2 != 0)
        throw ConfigError("hybrid stacking '" + to_string(strategy) + "' needs an even depth, got " + std::to_string(depth) +
                          "; give an explicit block_plan for this stage instead");
      for (Index i = 0; i < depth; ++i) {
        if (strategy == StackingStrategy::interleave)
          plan.push_back(i % 2 == 0 ? BlockKind::sam : BlockKind::msa);
        else
          plan.push_back(i < depth / 2 ? BlockKind::sam : BlockKind::msa);
      }
      return plan;
  }
  return plan;
}

/// Stages 1-2 are SAM, stage 3 follows the strategy, stage 4 is MSA. The
/// uniform strategies cover stages 3 and 4 jointly. An explicit plan wins.
inline std::vector<BlockKind> resolved_plan(const ModelConfig& cfg, int s) {
  const auto& st = cfg.stages[static_cast<std::size_t>(s)];
  if (!st.block_plan.empty()) return st.block_plan;
  if (s < 2) return stacking_plan(st.depth, StackingStrategy::all_sam);
  const auto strategy = cfg.stacking_strategy;
  if (strategy == StackingStrategy::all_sam || strategy == StackingStrategy::all_msa) return stacking_plan(st.depth, strategy);
  if (s == 3) return stacking_plan(st.depth, StackingStrategy::all_msa);
  return stacking_plan(st.depth, strategy);
}

inline std::string stage_path(int s, const std::string& key) { return "$.stages[" + std::to_string(s) + "]." + key; }

/// Checks every invariant; errors cite the JSON path of the offending value.
inline void validate(const ModelConfig& cfg) {
  auto fail = [](const std::string& path, const std::string& what) { throw ConfigError(path + ": " + what); };
  if (cfg.stem_kernel < 1 || cfg.stem_kernel % 2 == 0) fail("$.stem_kernel", "must be an odd integer >= 1");
  if (cfg.in_channels < 1) fail("$.in_channels", "must be >= 1");
  if (cfg.num_classes < 1) fail("$.num_classes", "must be >= 1");
  if (cfg.ffn_ratio < 1) fail("$.ffn_ratio", "must be >= 1");
  if (!(cfg.drop_path_max >= 0 && cfg.drop_path_max < 1)) fail("$.drop_path_max", "must lie in [0, 1)");
  for (int s = 0; s < 4; ++s) {
    const auto& st = cfg.stages[static_cast<std::size_t>(s)];
    if (st.dim < 1) fail(stage_path(s, "dim"), "must be >= 1");
    if (st.depth < 1) fail(stage_path(s, "depth"), "must be >= 1");
    if (st.ffn_ratio && *st.ffn_ratio < 1) fail(stage_path(s, "ffn_ratio"), "must be >= 1");
    if (!st.block_plan.empty() && static_cast<Index>(st.block_plan.size()) != st.depth)
      fail(stage_path(s, "block_plan"), "has " + std::to_string(st.block_plan.size()) + " entries but depth is " + std::to_string(st.depth));
    std::vector<BlockKind> plan;
    try {
      plan = resolved_plan(cfg, s);
    } catch (const ConfigError& e) {
      fail(stage_path(s, "depth"), e.what());
    }
    const bool any_sam = std::count(plan.begin(), plan.end(), BlockKind::sam) > 0;
    const bool any_msa = std::count(plan.begin(), plan.end(), BlockKind::msa) > 0;
    if (any_sam) {
      if (st.sam_heads < 1) fail(stage_path(s, "sam_heads"), "must be >= 1");
      if (st.sam_heads > st.dim) fail(stage_path(s, "sam_heads"), "exceeds dim " + std::to_string(st.dim));
      if (st.sam_head_split == HeadSplit::even && st.dim % st.sam_heads != 0)
        fail(stage_path(s, "dim"), "dim " + std::to_string(st.dim) + " is not divisible by sam_heads " + std::to_string(st.sam_heads));
      if (st.sam_expansion < 1) fail(stage_path(s, "sam_expansion"), "must be >= 1");
    }
    if (any_msa) {
      if (st.msa_heads < 1) fail(stage_path(s, "msa_heads"), "must be >= 1");
      if (st.dim % st.msa_heads != 0)
        fail(stage_path(s, "dim"), "dim " + std::to_string(st.dim) + " is not divisible by msa_heads " + std::to_string(st.msa_heads));
    }
  }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

namespace detail {

inline ModelConfig make_preset(std::string name, std::array<Index, 4> dims, std::array<Index, 4> depths, Index stem_kernel,
                               double drop_path, std::array<Index, 4> ffn_ratios) {
  ModelConfig cfg;
  cfg.name = std::move(name);
  cfg.stem_kernel = stem_kernel;
  cfg.drop_path_max = drop_path;
  cfg.ffn_ratio = 4;
  const std::array<Index, 4> msa_heads{2, 4, 8, 16};
  for (std::size_t s = 0; s < 4; ++s) {
    auto& st = cfg.stages[s];
    st.dim = dims[s];
    st.depth = depths[s];
    st.sam_heads = 4;
    st.sam_expansion = 2;
    st.msa_heads = msa_heads[s];
    if (ffn_ratios[s] != cfg.ffn_ratio) st.ffn_ratio = ffn_ratios[s];
  }
  return cfg;
}

inline const std::map<std::string, ModelConfig>& preset_table() {
  static const std::map<std::string, ModelConfig> table = [] {
    std::map<std::string, ModelConfig> t;
    const std::array<Index, 4> base{64, 128, 256, 512};
    // The last stage of M/T/S/B runs a narrower FFN; see README "Presets".
    t["smt-m"] = make_preset("smt-m", base, {1, 1, 4, 1}, 3, 0.1, {4, 4, 2, 2});
    t["smt-t"] = make_preset("smt-t", base, {2, 2, 8, 1}, 3, 0.1, {4, 4, 4, 2});
    t["smt-s"] = make_preset("smt-s", base, {3, 4, 18, 1}, 7, 0.2, {4, 4, 4, 2});
    t["smt-b"] = make_preset("smt-b", base, {4, 6, 28, 2}, 7, 0.3, {4, 4, 4, 2});
    t["smt-l"] = make_preset("smt-l", {96, 192, 384, 768}, {4, 6, 28, 3}, 7, 0.5, {4, 4, 4, 4});
    auto micro = make_preset("smt-micro", {16, 32, 64, 128}, {1, 1, 2, 1}, 3, 0.0, {4, 4, 4, 4});
    micro.num_classes = 2;
    const std::array<Index, 4> micro_msa{1, 2, 2, 4};
    for (std::size_t s = 0; s < 4; ++s) micro.stages[s].msa_heads = micro_msa[s];
    t["smt-micro"] = micro;

    const ModelConfig& tiny = t["smt-t"];
    for (Index h : {1, 2, 4, 6, 8}) {
      auto c = tiny;
      c.name = "smt-t-heads" + std::to_string(h);
      for (auto& st : c.stages) {
        st.sam_heads = h;
        if (st.dim % h != 0) st.sam_head_split = HeadSplit::balanced;
      }
      t[c.name] = c;
    }
    const std::vector<std::pair<std::string, AggregationKind>> aggs{{"none", AggregationKind::none},
                                                                     {"single", AggregationKind::single_linear},
                                                                     {"two", AggregationKind::two_linears},
                                                                     {"ibn", AggregationKind::ibn},
                                                                     {"saa", AggregationKind::saa}};
    for (const auto& [suffix, kind] : aggs) {
      auto c = tiny;
      c.name = "smt-t-agg-" + suffix;
      for (auto& st : c.stages) st.aggregation = kind;
      t[c.name] = c;
    }
    const std::vector<std::pair<std::string, StackingStrategy>> stacks{{"all-sam", StackingStrategy::all_sam},
                                                                        {"all-msa", StackingStrategy::all_msa},
                                                                        {"interleave", StackingStrategy::interleave},
                                                                        {"split", StackingStrategy::split}};
    for (const auto& [suffix, strategy] : stacks) {
      auto c = tiny;
      c.name = "smt-t-stack-" + suffix;
      c.stacking_strategy = strategy;
      t[c.name] = c;
    }
    // Component chain: single-head conv + single linear, attention-free;
    // then multi-head; then SAA; then the hybrid stacking (= smt-t).
    auto comp = [&](std::string suffix, Index heads, AggregationKind agg, StackingStrategy strategy) {
      auto c = tiny;
      c.name = "smt-t-comp-" + suffix;
      c.stacking_strategy = strategy;
      for (auto& st : c.stages) {
        st.sam_heads = heads;
        st.aggregation = agg;
      }
      t[c.name] = c;
    };
    comp("baseline", 1, AggregationKind::single_linear, StackingStrategy::all_sam);
    comp("mhmc", 4, AggregationKind::single_linear, StackingStrategy::all_sam);
    comp("saa", 4, AggregationKind::saa, StackingStrategy::all_sam);
    comp("ehn", 4, AggregationKind::saa, StackingStrategy::interleave);
    for (auto& [n, c] : t) validate(c);
    return t;
  }();
  return table;
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& [n, c] : detail::preset_table()) out.push_back(n);
  return out;
}

inline ModelConfig preset(const std::string& name) {
  const auto& table = detail::preset_table();
  auto it = table.find(name);
  if (it == table.end()) {
    std::string valid;
    for (const auto& [n, c] : table) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "'; valid presets: " + valid);
  }
  return it->second;
}

/// Variant ids for one ablation family, in table order.
inline std::vector<std::string> ablation_family(const std::string& family) {
  if (family == "heads") return {"smt-t-heads1", "smt-t-heads2", "smt-t-heads4", "smt-t-heads6", "smt-t-heads8"};
  if (family == "aggregation")
    return {"smt-t-agg-none", "smt-t-agg-single", "smt-t-agg-two", "smt-t-agg-ibn", "smt-t-agg-saa"};
  if (family == "stacking") return {"smt-t-stack-all-sam", "smt-t-stack-all-msa", "smt-t-stack-interleave", "smt-t-stack-split"};
  if (family == "components") return {"smt-t-comp-baseline", "smt-t-comp-mhmc", "smt-t-comp-saa", "smt-t-comp-ehn"};
  throw ConfigError("unknown ablation family '" + family + "'; valid: heads, aggregation, stacking, components");
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["name"] = cfg.name;
  j["stem_kernel"] = cfg.stem_kernel;
  j["in_channels"] = cfg.in_channels;
  j["num_classes"] = cfg.num_classes;
  j["ffn_ratio"] = cfg.ffn_ratio;
  j["drop_path_max"] = cfg.drop_path_max;
  j["stacking_strategy"] = to_string(cfg.stacking_strategy);
  j["saa_wiring"] = names::to_string(names::saa_wiring, cfg.saa_wiring);
  j["bias"] = cfg.bias;
  j["stages"] = nlohmann::json::array();
  for (const auto& st : cfg.stages) {
    nlohmann::json s;
    s["dim"] = st.dim;
    s["depth"] = st.depth;
    s["sam_heads"] = st.sam_heads;
    s["sam_expansion"] = st.sam_expansion;
    s["msa_heads"] = st.msa_heads;
    s["aggregation"] = to_string(st.aggregation);
    if (!st.block_plan.empty()) {
      s["block_plan"] = nlohmann::json::array();
      for (auto k : st.block_plan) s["block_plan"].push_back(to_string(k));
    }
    if (st.ffn_ratio) s["ffn_ratio"] = *st.ffn_ratio;
    if (st.sam_head_split != HeadSplit::even) s["sam_head_split"] = names::to_string(names::head_split, st.sam_head_split);
    j["stages"].push_back(std::move(s));
  }
  return j;
}

inline std::string serialize_config(const ModelConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

namespace detail {

class JsonReader {
 public:
  JsonReader(const nlohmann::json& obj, std::string path, std::vector<std::string> required, std::vector<std::string> optional)
      : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_ + ": expected an object");
    for (const auto& [k, v] : obj_.items()) {
      const bool known = std::find(required.begin(), required.end(), k) != required.end() ||
                         std::find(optional.begin(), optional.end(), k) != optional.end();
      if (!known) throw ConfigError(at(k) + ": unknown key");
    }
    for (const auto& k : required)
      if (!obj_.contains(k)) throw ConfigError(at(k) + ": missing required key");
  }

  std::string at(const std::string& key) const { return path_ + "." + key; }
  bool has(const std::string& key) const { return obj_.contains(key); }
  const nlohmann::json& raw(const std::string& key) const { return obj_.at(key); }

  Index integer(const std::string& key) const {
    const auto& v = obj_.at(key);
    if (!v.is_number_integer()) throw ConfigError(at(key) + ": expected an integer");
    return v.get<Index>();
  }
  double number(const std::string& key) const {
    const auto& v = obj_.at(key);
    if (!v.is_number()) throw ConfigError(at(key) + ": expected a number");
    return v.get<double>();
  }
  bool boolean(const std::string& key) const {
    const auto& v = obj_.at(key);
    if (!v.is_boolean()) throw ConfigError(at(key) + ": expected a boolean");
    return v.get<bool>();
  }
  std::string string(const std::string& key) const {
    const auto& v = obj_.at(key);
    if (!v.is_string()) throw ConfigError(at(key) + ": expected a string");
    return v.get<std::string>();
  }
  template <typename E>
  E enumeration(const std::string& key, const std::vector<std::pair<E, std::string>>& table) const {
    const auto text = string(key);
    auto e = names::from_string(table, text);
    if (!e) throw ConfigError(at(key) + ": '" + text + "' is not one of " + names::choices(table));
    return *e;
  }

 private:
  const nlohmann::json& obj_;
  std::string path_;
};

}  // namespace detail

inline ModelConfig config_from_json(const nlohmann::json& j) {
  detail::JsonReader top(j, "$",
                         {"name", "stem_kernel", "num_classes", "ffn_ratio", "drop_path_max", "stacking_strategy", "stages"},
                         {"in_channels", "saa_wiring", "bias"});
  ModelConfig cfg;
  cfg.name = top.string("name");
  cfg.stem_kernel = top.integer("stem_kernel");
  cfg.num_classes = top.integer("num_classes");
  cfg.ffn_ratio = top.integer("ffn_ratio");
  cfg.drop_path_max = top.number("drop_path_max");
  cfg.stacking_strategy = top.enumeration("stacking_strategy", names::stacking);
  if (top.has("in_channels")) cfg.in_channels = top.integer("in_channels");
  if (top.has("saa_wiring")) cfg.saa_wiring = top.enumeration("saa_wiring", names::saa_wiring);
  if (top.has("bias")) cfg.bias = top.boolean("bias");
  const auto& stages = top.raw("stages");
  if (!stages.is_array() || stages.size() != 4) throw ConfigError("$.stages: expected an array of exactly 4 stage objects");
  for (int s = 0; s < 4; ++s) {
    detail::JsonReader r(stages[static_cast<std::size_t>(s)], "$.stages[" + std::to_string(s) + "]",
                         {"dim", "depth", "sam_heads", "sam_expansion", "msa_heads", "aggregation"},
                         {"block_plan", "ffn_ratio", "sam_head_split"});
    auto& st = cfg.stages[static_cast<std::size_t>(s)];
    st.dim = r.integer("dim");
    st.depth = r.integer("depth");
    st.sam_heads = r.integer("sam_heads");
    st.sam_expansion = r.integer("sam_expansion");
    st.msa_heads = r.integer("msa_heads");
    st.aggregation = r.enumeration("aggregation", names::aggregation);
    if (r.has("ffn_ratio")) st.ffn_ratio = r.integer("ffn_ratio");
    if (r.has("sam_head_split")) st.sam_head_split = r.enumeration("sam_head_split", names::head_split);
    if (r.has("block_plan")) {
      const auto& plan = r.raw("block_plan");
      if (!plan.is_array()) throw ConfigError(r.at("block_plan") + ": expected an array");
      for (std::size_t i = 0; i < plan.size(); ++i) {
        const std::string path = r.at("block_plan") + "[" + std::to_string(i) + "]";
        if (!plan[i].is_string()) throw ConfigError(path + ": expected \"SAM\" or \"MSA\"");
        auto k = names::from_string(names::block, plan[i].get<std::string>());
        if (!k) throw ConfigError(path + ": expected \"SAM\" or \"MSA\"");
        st.block_plan.push_back(*k);
      }
    }
  }
  validate(cfg);
  return cfg;
}

/// Malformed JSON raises ParseError with the byte offset; schema problems
/// raise ConfigError with the JSON path.
inline ModelConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("config is not valid JSON: ") + e.what(), e.byte);
  }
  return config_from_json(j);
}

}  // namespace smt
