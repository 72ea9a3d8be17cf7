#pragma once

// Static cost model (params, FLOPs), mean attention distance, modulation-map
// extraction and the summary table.

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smt/io.hpp"
#include "smt/model.hpp"

namespace smt {

inline constexpr const char* kCountingConvention =
    "1 multiply-accumulate = 1 FLOP; norm 4/elem, GELU 8/elem, softmax 5/elem, elementwise 1/elem";

struct AttentionDistanceRow {
  std::string layer;
  int stage = 0;
  std::vector<double> per_head;  // pixels
  double mean = 0;
  double std = 0;  // population std across heads
};

struct AnalysisReport {
  std::string model;
  Index input_h = 0, input_w = 0;
  std::string convention = kCountingConvention;
  std::vector<CostRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
  std::vector<AttentionDistanceRow> attention;
  bool no_attention_layers = false;
};

namespace detail {
inline void fill_totals(AnalysisReport& r) {
  r.total_params = r.total_flops = 0;
  for (const auto& row : r.rows) {
    r.total_params += row.params;
    r.total_flops += row.flops;
  }
}
}  // namespace detail

/// Exact scalar-parameter count, one row per parameterized op.
template <typename T>
AnalysisReport count_params(const Model<T>& model) {
  AnalysisReport r;
  r.model = model.config.name;
  for (auto row : model.cost(32, 32).rows) {
    if (row.params == 0) continue;
    row.flops = 0;
    r.rows.push_back(std::move(row));
  }
  detail::fill_totals(r);
  return r;
}

template <typename T>
AnalysisReport count_flops(const Model<T>& model, Index h, Index w) {
  AnalysisReport r;
  r.model = model.config.name;
  r.input_h = h;
  r.input_w = w;
  r.rows = model.cost(h, w).rows;
  detail::fill_totals(r);
  return r;
}

// ---------------------------------------------------------------------------
// Attention distance
// ---------------------------------------------------------------------------

/// Per-head mean over samples and queries of sum_j p(q, j) * |c_q - c_j|,
/// with token centers `stride` input pixels apart. `probs` is
/// [N, heads, T, T] with T = grid_h * grid_w in row-major token order.
template <typename T>
std::vector<double> attention_distance_per_head(const Tensor<T>& probs, Index grid_h, Index grid_w, double stride) {
  if (probs.rank() != 4 || probs.dim(2) != grid_h * grid_w || probs.dim(3) != grid_h * grid_w)
    throw InputError("attention probabilities " + shape_str(probs.shape()) + " do not match a " + std::to_string(grid_h) + "x" +
                     std::to_string(grid_w) + " token grid");
  const Index n = probs.dim(0), heads = probs.dim(1), t = grid_h * grid_w;
  // Distances depend only on the (dy, dx) offset; tabulate them once.
  std::vector<double> dist(static_cast<std::size_t>((2 * grid_h - 1) * (2 * grid_w - 1)));
  for (Index dy = -(grid_h - 1); dy < grid_h; ++dy)
    for (Index dx = -(grid_w - 1); dx < grid_w; ++dx)
      dist[static_cast<std::size_t>((dy + grid_h - 1) * (2 * grid_w - 1) + dx + grid_w - 1)] =
          stride * std::sqrt(static_cast<double>(dy * dy + dx * dx));
  std::vector<double> out(static_cast<std::size_t>(heads), 0.0);
  for (Index s = 0; s < n; ++s)
    for (Index h = 0; h < heads; ++h) {
      const T* p = probs.ptr() + ((s * heads + h) * t) * t;
      double acc = 0;
      for (Index q = 0; q < t; ++q) {
        const Index qy = q / grid_w, qx = q % grid_w;
        for (Index k = 0; k < t; ++k) {
          const Index dy = k / grid_w - qy, dx = k % grid_w - qx;
          acc += static_cast<double>(p[q * t + k]) * dist[static_cast<std::size_t>((dy + grid_h - 1) * (2 * grid_w - 1) + dx + grid_w - 1)];
        }
      }
      out[static_cast<std::size_t>(h)] += acc / static_cast<double>(t);
    }
  for (auto& v : out) v /= static_cast<double>(n);
  return out;
}

inline AttentionDistanceRow summarize_heads(std::string layer, int stage, std::vector<double> per_head) {
  AttentionDistanceRow row{std::move(layer), stage, std::move(per_head), 0, 0};
  for (double d : row.per_head) row.mean += d;
  row.mean /= static_cast<double>(row.per_head.size());
  for (double d : row.per_head) row.std += (d - row.mean) * (d - row.mean);
  row.std = std::sqrt(row.std / static_cast<double>(row.per_head.size()));
  return row;
}

/// Runs `batch` in eval mode and measures every MSA layer.
template <typename T>
AnalysisReport mean_attention_distance(const Model<T>& model, const Tensor<T>& batch) {
  AnalysisReport r;
  r.model = model.config.name;
  r.input_h = batch.dim(1);
  r.input_w = batch.dim(2);
  Captures<T> caps;
  caps.attention = true;
  ForwardContext<T> ctx;
  ctx.captures = &caps;
  {
    NoGradScope<T> ng;
    model.forward(batch, ctx);
  }
  for (const auto& c : caps.attentions)
    r.attention.push_back(
        summarize_heads(c.layer, c.stage, attention_distance_per_head(c.probs, c.grid_h, c.grid_w, static_cast<double>(c.stride))));
  r.no_attention_layers = r.attention.empty();
  if (r.no_attention_layers) log::warn("model " + model.config.name + " has no attention layers; distance table is empty");
  return r;
}

// ---------------------------------------------------------------------------
// Modulation maps
// ---------------------------------------------------------------------------

enum class MapReduce { channel_mean, single_channel };
enum class Upsample { none, nearest, bilinear };

inline std::string to_string(Upsample u) {
  switch (u) {
    case Upsample::none: return "none";
    case Upsample::nearest: return "nearest";
    case Upsample::bilinear: return "bilinear";
  }
  return "?";
}

struct MapOptions {
  int stage = 0;  // 1..4; 0 selects every stage
  MapReduce reduce = MapReduce::channel_mean;
  Index channel = 0;  // for single_channel
  Upsample upsample = Upsample::none;
  bool per_head = false;        // also export each MHMC head
  bool pre_aggregation = false;  // also export the MHMC output before SAA
  Index sample = 0;
};

struct Grid {
  std::string name;   // file stem
  std::string layer;  // owning SAM layer
  int stage = 0;      // 1-based
  std::string what;   // modulator, pre_aggregation, head<i>
  std::string reduction;
  std::string upsample;
  Index height = 0, width = 0;
  std::vector<float> values;  // row-major
};

struct MapExport {
  std::vector<Grid> grids;
  bool no_sam_layers = false;
};

template <typename T>
Grid reduce_map(const Tensor<T>& fmap, Index sample, MapReduce reduce, Index channel) {
  const Index h = fmap.dim(1), w = fmap.dim(2), c = fmap.dim(3);
  if (sample < 0 || sample >= fmap.dim(0)) throw InputError("sample index " + std::to_string(sample) + " out of range");
  if (reduce == MapReduce::single_channel && (channel < 0 || channel >= c))
    throw InputError("channel " + std::to_string(channel) + " outside [0, " + std::to_string(c) + ")");
  Grid g;
  g.height = h;
  g.width = w;
  g.values.resize(static_cast<std::size_t>(h * w));
  g.reduction = reduce == MapReduce::channel_mean ? "channel_mean" : "channel_" + std::to_string(channel);
  for (Index p = 0; p < h * w; ++p) {
    const T* px = fmap.ptr() + (sample * h * w + p) * c;
    double v = 0;
    if (reduce == MapReduce::channel_mean) {
      for (Index i = 0; i < c; ++i) v += px[i];
      v /= static_cast<double>(c);
    } else {
      v = px[channel];
    }
    g.values[static_cast<std::size_t>(p)] = static_cast<float>(v);
  }
  return g;
}

/// Nearest or bilinear (half-pixel centers, edge clamped) resize.
inline Grid upsample_grid(const Grid& g, Index out_h, Index out_w, Upsample mode) {
  if (mode == Upsample::none) return g;
  Grid r = g;
  r.height = out_h;
  r.width = out_w;
  r.upsample = to_string(mode);
  r.values.assign(static_cast<std::size_t>(out_h * out_w), 0.0f);
  const double sy = static_cast<double>(g.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(g.width) / static_cast<double>(out_w);
  auto at = [&](Index y, Index x) { return g.values[static_cast<std::size_t>(y * g.width + x)]; };
  for (Index y = 0; y < out_h; ++y)
    for (Index x = 0; x < out_w; ++x) {
      float v;
      if (mode == Upsample::nearest) {
        const Index iy = std::min<Index>(g.height - 1, static_cast<Index>(std::floor((y + 0.5) * sy)));
        const Index ix = std::min<Index>(g.width - 1, static_cast<Index>(std::floor((x + 0.5) * sx)));
        v = at(iy, ix);
      } else {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(g.height - 1));
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(g.width - 1));
        const Index y0 = static_cast<Index>(fy), x0 = static_cast<Index>(fx);
        const Index y1 = std::min(y0 + 1, g.height - 1), x1 = std::min(x0 + 1, g.width - 1);
        const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
        v = static_cast<float>((1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1)));
      }
      r.values[static_cast<std::size_t>(y * out_w + x)] = v;
    }
  return r;
}

/// Runs `image` (batch allowed; `opt.sample` picks one) in eval mode and
/// collects the modulator of every SAM layer in the selected stage(s).
template <typename T>
MapExport extract_modulation_maps(const Model<T>& model, const Tensor<T>& image, const MapOptions& opt) {
  if (opt.stage < 0 || opt.stage > 4) throw InputError("stage filter must be 1-4 (or 0 for all), got " + std::to_string(opt.stage));
  Captures<T> caps;
  caps.sam = true;
  ForwardContext<T> ctx;
  ctx.captures = &caps;
  {
    NoGradScope<T> ng;
    model.forward(image, ctx);
  }
  MapExport out;
  const Index in_h = image.dim(1), in_w = image.dim(2);
  auto emit = [&](const SamCapture<T>& c, const Tensor<T>& fmap, const std::string& what) {
    Grid g = reduce_map(fmap, opt.sample, opt.reduce, opt.channel);
    g.layer = c.layer;
    g.stage = c.stage + 1;
    g.what = what;
    g.upsample = "none";
    g = upsample_grid(g, in_h, in_w, opt.upsample);
    g.name = c.layer + "." + what;
    out.grids.push_back(std::move(g));
  };
  for (const auto& c : caps.sams) {
    if (opt.stage != 0 && c.stage + 1 != opt.stage) continue;
    emit(c, c.modulator, "modulator");
    if (opt.pre_aggregation) emit(c, c.pre_aggregation, "pre_aggregation");
    if (opt.per_head)
      for (std::size_t h = 0; h < c.heads.size(); ++h) emit(c, c.heads[h], "head" + std::to_string(h));
  }
  out.no_sam_layers = out.grids.empty();
  if (out.no_sam_layers) log::warn("no SAM layers matched the stage filter; nothing to export");
  return out;
}

inline std::string encode_grid(const Grid& g) {
  io::ByteWriter w;
  w.put_bytes("SMTGRID1");
  w.put(static_cast<std::uint32_t>(g.height));
  w.put(static_cast<std::uint32_t>(g.width));
  for (float v : g.values) w.put(v);
  return w.bytes();
}

inline Grid decode_grid(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.get_bytes(8) != "SMTGRID1") throw ParseError("bad grid magic", 0);
  Grid g;
  g.height = r.get<std::uint32_t>();
  g.width = r.get<std::uint32_t>();
  g.values.resize(static_cast<std::size_t>(g.height * g.width));
  for (auto& v : g.values) v = r.get<float>();
  if (r.remaining() != 0) throw ParseError("trailing bytes after grid payload", r.offset());
  return g;
}

/// One .grid file per map plus manifest.json describing them.
inline void write_map_export(const std::filesystem::path& dir, const MapExport& maps) {
  nlohmann::json manifest;
  manifest["format"] = "SMTGRID1";
  manifest["maps"] = nlohmann::json::array();
  for (const auto& g : maps.grids) {
    const std::string file = g.name + ".grid";
    io::atomic_write(dir / file, encode_grid(g));
    manifest["maps"].push_back({{"file", file},
                                {"layer", g.layer},
                                {"stage", g.stage},
                                {"map", g.what},
                                {"reduction", g.reduction},
                                {"upsampling", g.upsample},
                                {"height", g.height},
                                {"width", g.width}});
  }
  manifest["warning"] = maps.no_sam_layers ? "no SAM layers matched the stage filter" : "";
  io::atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Splits one RFC-4180 record (no embedded newlines).
inline std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

struct StageSummary {
  int stage = 0;  // 1-based
  Index dim = 0, depth = 0, resolution_h = 0, resolution_w = 0;
  std::string plan;  // e.g. "SAM,MSA,SAM,MSA"
  std::int64_t params = 0, flops = 0;
};

struct ModelSummary {
  std::string model;
  Index input_h = 0, input_w = 0;
  std::vector<StageSummary> stages;
  std::int64_t other_params = 0, other_flops = 0;  // stem and head
  std::int64_t total_params = 0, total_flops = 0;
};

template <typename T>
ModelSummary summarize(const Model<T>& model, Index h, Index w) {
  const auto report = count_flops(model, h, w);
  ModelSummary s;
  s.model = model.config.name;
  s.input_h = h;
  s.input_w = w;
  for (int i = 0; i < 4; ++i) {
    StageSummary st;
    st.stage = i + 1;
    st.dim = model.config.stages[static_cast<std::size_t>(i)].dim;
    st.depth = model.config.stages[static_cast<std::size_t>(i)].depth;
    st.resolution_h = h / Model<T>::stage_stride(i);
    st.resolution_w = w / Model<T>::stage_stride(i);
    for (auto k : resolved_plan(model.config, i)) st.plan += (st.plan.empty() ? "" : ",") + to_string(k);
    s.stages.push_back(st);
  }
  for (const auto& row : report.rows) {
    if (row.stage >= 0) {
      s.stages[static_cast<std::size_t>(row.stage)].params += row.params;
      s.stages[static_cast<std::size_t>(row.stage)].flops += row.flops;
    } else {
      s.other_params += row.params;
      s.other_flops += row.flops;
    }
  }
  s.total_params = report.total_params;
  s.total_flops = report.total_flops;
  return s;
}

inline std::string format_summary(const ModelSummary& s) {
  std::ostringstream os;
  os << "model " << s.model << " @ " << s.input_h << "x" << s.input_w << "\n";
  os << std::left << std::setw(6) << "stage" << std::setw(6) << "dim" << std::setw(7) << "depth" << std::setw(10) << "res"
     << std::setw(12) << "params(M)" << std::setw(11) << "FLOPs(G)" << "plan\n";
  os << std::fixed;
  for (const auto& st : s.stages) {
    os << std::setw(6) << st.stage << std::setw(6) << st.dim << std::setw(7) << st.depth << std::setw(10)
       << (std::to_string(st.resolution_h) + "x" + std::to_string(st.resolution_w)) << std::setw(12) << std::setprecision(3)
       << st.params / 1e6 << std::setw(11) << st.flops / 1e9 << st.plan << "\n";
  }
  os << std::setw(29) << "stem+head" << std::setw(12) << s.other_params / 1e6 << std::setw(11) << s.other_flops / 1e9 << "\n";
  os << std::setw(29) << "total" << std::setw(12) << s.total_params / 1e6 << std::setw(11) << s.total_flops / 1e9 << "\n";
  os << "(" << kCountingConvention << ")\n";
  return os.str();
}

inline std::string summary_csv(const ModelSummary& s) {
  std::ostringstream os;
  os << "stage,dim,depth,resolution,plan,params,flops\r\n";
  for (const auto& st : s.stages)
    os << st.stage << ',' << st.dim << ',' << st.depth << ',' << st.resolution_h << 'x' << st.resolution_w << ','
       << csv_field(st.plan) << ',' << st.params << ',' << st.flops << "\r\n";
  os << "stem+head,,,,," << s.other_params << ',' << s.other_flops << "\r\n";
  os << "total,,,,," << s.total_params << ',' << s.total_flops << "\r\n";
  return os.str();
}

inline std::string rows_csv(const AnalysisReport& r) {
  std::ostringstream os;
  os << "name,kind,stage,params,flops\r\n";
  for (const auto& row : r.rows)
    os << csv_field(row.name) << ',' << row.kind << ',' << row.stage << ',' << row.params << ',' << row.flops << "\r\n";
  return os.str();
}

inline std::string attention_csv(const AnalysisReport& r) {
  std::ostringstream os;
  os << "layer,stage,head,mean_distance_px,layer_mean_px,layer_std_px\r\n";
  os << std::setprecision(10);
  for (const auto& row : r.attention)
    for (std::size_t h = 0; h < row.per_head.size(); ++h)
      os << csv_field(row.layer) << ',' << row.stage + 1 << ',' << h << ',' << row.per_head[h] << ',' << row.mean << ',' << row.std
         << "\r\n";
  return os.str();
}

}  // namespace smt
