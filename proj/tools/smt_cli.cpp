// smt: command-line front end for building, inspecting, verifying, training
// and analyzing SMT models.
//
// Exit codes: 0 success, 1 domain failure (bad config, data, checkpoint,
// failed verification), 2 usage error.

#include <CLI11.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "smt/analyzer.hpp"
#include "smt/train.hpp"
#include "smt/verify.hpp"

namespace fs = std::filesystem;
using namespace smt;

namespace {

constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;
constexpr std::string_view kSynthPrefix = "synth:";

struct ModelSource {
  std::string preset;
  std::string config_path;

  ModelConfig load() const {
    if (!preset.empty()) return smt::preset(preset);
    return parse_config(io::read_file(config_path));
  }
};

void add_model_source(CLI::App* cmd, ModelSource& src, bool required) {
  auto* p = cmd->add_option("--preset", src.preset, "preset name (smt-t, smt-micro, ...)");
  auto* c = cmd->add_option("--config", src.config_path, "model config JSON")->check(CLI::ExistingFile);
  p->excludes(c);
  c->excludes(p);
  if (required) {
    cmd->callback([p, c] {
      if (p->count() == 0 && c->count() == 0) throw CLI::RequiredError("--preset or --config");
    });
  }
}

struct Splits {
  Dataset train, val;
};

bool is_synth(const std::string& src) { return src.starts_with(kSynthPrefix); }

void check_synth_task(const std::string& src) {
  const auto task = src.substr(kSynthPrefix.size());
  if (task != "scale_discrimination") throw DatasetError("unknown synthetic task '" + task + "'; valid: scale_discrimination");
}

// Synthetic data: train and validation sets are drawn from separate streams
// keyed by the seed. Directories: root/train and root/val when both exist,
// otherwise root serves as both.
Splits load_splits(const std::string& src, const TrainSpec& spec) {
  if (is_synth(src)) {
    check_synth_task(src);
    return {synth_dataset(mix_seed({spec.seed, 1}), spec.synth_per_class).data,
            synth_dataset(mix_seed({spec.seed, 2}), spec.synth_eval_per_class).data};
  }
  const fs::path root(src);
  if (fs::is_directory(root / "train") && fs::is_directory(root / "val"))
    return {load_dataset_dir(root / "train", {}, "train"), load_dataset_dir(root / "val", {}, "val")};
  log::warn("no train/ and val/ under " + src + "; evaluating on the training images");
  auto ds = load_dataset_dir(root, {}, "all");
  return {ds, ds};
}

Dataset load_eval_set(const std::string& src, std::uint64_t seed, Index synth_per_class) {
  if (is_synth(src)) {
    check_synth_task(src);
    return synth_dataset(mix_seed({seed, 2}), synth_per_class).data;
  }
  const fs::path root(src);
  if (fs::is_directory(root / "val")) return load_dataset_dir(root / "val", {}, "val");
  return load_dataset_dir(root, {}, "all");
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw InputError("cannot create output directory " + dir.string());
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct SummarizeArgs {
  ModelSource model;
  Index input_size = 224;
  std::string csv, rows_csv;
};

int run_summarize(const SummarizeArgs& a) {
  const auto cfg = a.model.load();
  const auto model = build_model<float>(cfg, 0, false);
  const auto s = summarize(model, a.input_size, a.input_size);
  std::cout << format_summary(s);
  if (!a.csv.empty()) io::atomic_write(a.csv, summary_csv(s));
  if (!a.rows_csv.empty()) io::atomic_write(a.rows_csv, rows_csv(count_flops(model, a.input_size, a.input_size)));
  return 0;
}

struct GradcheckArgs {
  ModelSource model;
  double tolerance = 1e-5;
  double step = 1e-5;
  std::uint64_t seed = 0;
  Index coords = 20;
  Index input_size = 64;
};

int run_gradcheck(const GradcheckArgs& a) {
  ModelSource src = a.model;
  if (src.preset.empty() && src.config_path.empty()) src.preset = "smt-micro";
  const auto cfg = src.load();
  ModelGradCheckOptions opt;
  opt.check.tolerance = a.tolerance;
  opt.check.step = a.step;
  opt.check.coords_per_tensor = a.coords;
  opt.input_size = a.input_size;
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = gradcheck_model(cfg, a.seed, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Index coords = 0;
  for (const auto& e : report.entries) {
    coords += e.checked;
    const bool ok = e.max_rel_error <= report.tolerance;
    if (!ok || log::threshold() == log::Level::debug)
      std::cout << (ok ? "ok   " : "FAIL ") << e.name << " max rel " << e.max_rel_error << " at " << e.worst_index << " (analytic "
                << e.worst_analytic << ", numeric " << e.worst_numeric << ")\n";
  }
  std::cout << "gradcheck " << cfg.name << ": " << report.entries.size() << " tensors, " << coords << " coordinates, max rel error "
            << report.max_rel_error() << " (tolerance " << report.tolerance << ") " << (report.passed() ? "PASS" : "FAIL") << " in "
            << fixed(secs, 1) << " s\n";
  return report.passed() ? 0 : kExitDomain;
}

struct TrainArgs {
  ModelSource model;
  std::string data, spec_path, out, resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
};

int run_train(const TrainArgs& a) {
  auto cfg = a.model.load();
  TrainSpec spec = a.spec_path.empty() ? TrainSpec{} : parse_train_spec(io::read_file(a.spec_path));
  if (a.seed) spec.seed = *a.seed;
  if (a.steps) spec.steps = *a.steps;
  validate(spec);
  const auto data = load_splits(a.data, spec);
  if (cfg.num_classes != data.train.num_classes())
    throw ConfigError("config " + cfg.name + " predicts " + std::to_string(cfg.num_classes) + " classes but " + a.data + " has " +
                      std::to_string(data.train.num_classes()) + "; set num_classes in the config");
  const fs::path out(a.out);
  ensure_dir(out);
  io::atomic_write(out / "config.json", serialize_config(cfg));
  io::atomic_write(out / "spec.json", to_json(spec).dump(2) + "\n");
  TrainOptions opt{out, std::nullopt, -1};
  if (!a.resume.empty()) opt.resume = a.resume;
  log::info("training " + cfg.name + " on " + a.data + " (" + std::to_string(data.train.size()) + " train / " +
            std::to_string(data.val.size()) + " val) for " + std::to_string(spec.steps) + " steps");
  const auto res = train<float>(cfg, data.train, data.val, spec, opt);
  std::cout << "final accuracy " << fixed(res.final_eval.accuracy, 4) << " loss " << fixed(res.final_eval.loss, 4) << " on "
            << res.final_eval.count << " images; best " << fixed(res.loop.best_accuracy, 4) << " at step " << res.loop.best_step
            << "\n";
  std::cout << "wrote " << (out / "final.smt").string() << ", " << (out / "best.smt").string() << ", " << (out / "metrics.csv").string()
            << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data;
  Index batch = 64;
  std::uint64_t seed = 0;
  Index synth_per_class = TrainSpec{}.synth_eval_per_class;
};

int run_eval(const EvalArgs& a) {
  const auto model = model_from_checkpoint<float>(load_checkpoint(a.ckpt));
  const auto ds = load_eval_set(a.data, a.seed, a.synth_per_class);
  const auto e = evaluate(model, ds, a.batch);
  std::cout << "accuracy " << fixed(e.accuracy, 4) << " loss " << fixed(e.loss, 4) << " on " << e.count << " images\n";
  return 0;
}

struct ExportMapsArgs {
  std::string ckpt, image, out;
  int stage = 1;
  std::string upsample = "none";
  bool per_head = false, pre_aggregation = false;
  std::optional<Index> channel;
};

int run_export_maps(const ExportMapsArgs& a) {
  const auto model = model_from_checkpoint<float>(load_checkpoint(a.ckpt));
  const auto image = load_ppm(a.image);
  MapOptions opt;
  opt.stage = a.stage;
  opt.upsample = a.upsample == "nearest" ? Upsample::nearest : a.upsample == "bilinear" ? Upsample::bilinear : Upsample::none;
  opt.per_head = a.per_head;
  opt.pre_aggregation = a.pre_aggregation;
  if (a.channel) {
    opt.reduce = MapReduce::single_channel;
    opt.channel = *a.channel;
  }
  const auto maps = extract_modulation_maps(model, image, opt);
  ensure_dir(a.out);
  write_map_export(a.out, maps);
  std::cout << "wrote " << maps.grids.size() << " maps to " << a.out << "\n";
  return 0;
}

struct AttnArgs {
  std::string ckpt, data, out;
  Index samples = 16;
  std::uint64_t seed = 0;
};

int run_attn_distance(const AttnArgs& a) {
  const auto model = model_from_checkpoint<float>(load_checkpoint(a.ckpt));
  const auto ds = load_eval_set(a.data, a.seed, std::max<Index>(1, (a.samples + 1) / 2));
  std::vector<Index> idx;
  for (Index i = 0; i < std::min(a.samples, ds.size()); ++i) idx.push_back(i);
  const auto report = mean_attention_distance(model, ds.batch<float>(idx));
  io::atomic_write(a.out, attention_csv(report));
  for (const auto& row : report.attention)
    std::cout << row.layer << " (stage " << row.stage + 1 << "): mean " << fixed(row.mean, 2) << " px, std " << fixed(row.std, 2)
              << " px over " << row.per_head.size() << " heads\n";
  if (report.no_attention_layers) std::cout << "no attention layers in " << model.config.name << "\n";
  return 0;
}

struct BenchArgs {
  ModelSource model;
  Index batch = 1, reps = 10, input_size = 224;
  std::uint64_t seed = 0;
};

int run_bench(const BenchArgs& a) {
  const auto cfg = a.model.load();
  const auto model = build_model<float>(cfg, a.seed);
  Rng rng(mix_seed({a.seed, 0x62656e6368ULL}));
  Tensor<float> x(Shape{a.batch, a.input_size, a.input_size, 3});
  for (auto& v : x.data()) v = static_cast<float>(rng.normal());
  NoGradScope<float> ng;
  model.forward(x, ops::NormMode::eval);  // warm-up
  std::vector<double> ms;
  for (Index r = 0; r < a.reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(x, ops::NormMode::eval);
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  const double median = ms[ms.size() / 2];
  std::cout << cfg.name << " forward @ " << a.input_size << "x" << a.input_size << ", batch " << a.batch << ": median "
            << fixed(median, 2) << " ms (min " << fixed(ms.front(), 2) << ", max " << fixed(ms.back(), 2) << ") over " << a.reps
            << " reps, " << fixed(1000.0 * static_cast<double>(a.batch) / median, 2) << " images/s\n";
  return 0;
}

struct AblationArgs {
  std::string family, out;
  Index input_size = 224;
};

int run_ablation(const AblationArgs& a) {
  std::ostringstream csv;
  csv << "variant,params,flops,params_m,flops_g\r\n";
  std::cout << std::left << std::setw(28) << "variant" << std::setw(12) << "params(M)" << "FLOPs(G)\n";
  for (const auto& name : ablation_family(a.family)) {
    const auto model = build_model<float>(preset(name), 0, false);
    const auto r = count_flops(model, a.input_size, a.input_size);
    csv << name << ',' << r.total_params << ',' << r.total_flops << ',' << fixed(r.total_params / 1e6, 3) << ','
        << fixed(r.total_flops / 1e9, 3) << "\r\n";
    std::cout << std::setw(28) << name << std::setw(12) << fixed(r.total_params / 1e6, 3) << fixed(r.total_flops / 1e9, 3) << "\n";
  }
  io::atomic_write(a.out, csv.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees the same large activation buffers every
  // step; keeping them on the heap avoids an mmap/munmap round trip each time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"SMT workbench: build, inspect, verify, train and analyze SMT models"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  SummarizeArgs sum;
  auto* c_sum = app.add_subcommand("summarize", "per-stage params/FLOPs table");
  add_model_source(c_sum, sum.model, true);
  c_sum->add_option("--input-size", sum.input_size, "square input resolution")->check(CLI::PositiveNumber);
  c_sum->add_option("--csv", sum.csv, "write the stage table as CSV");
  c_sum->add_option("--rows-csv", sum.rows_csv, "write every costed layer as CSV");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "f64 finite-difference check of every parameter gradient");
  add_model_source(c_gc, gc.model, false);
  c_gc->add_option("--tolerance", gc.tolerance, "relative tolerance")->check(CLI::PositiveNumber);
  c_gc->add_option("--step", gc.step, "central-difference step")->check(CLI::PositiveNumber);
  c_gc->add_option("--seed", gc.seed, "weights, input and coordinate sampling seed");
  c_gc->add_option("--coords", gc.coords, "random coordinates per tensor")->check(CLI::PositiveNumber);
  c_gc->add_option("--input-size", gc.input_size, "square input resolution")->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "train on a PPM directory or synthetic data");
  add_model_source(c_tr, tr.model, true);
  c_tr->add_option("--data", tr.data, "dataset directory or synth:scale_discrimination")->required();
  c_tr->add_option("--spec", tr.spec_path, "training spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  c_tr->add_option("--out", tr.out, "output directory")->required();
  c_tr->add_option("--resume", tr.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  c_tr->add_option("--seed", tr.seed, "overrides the spec seed");
  c_tr->add_option("--steps", tr.steps, "overrides the spec step count")->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "accuracy of a checkpoint");
  c_ev->add_option("--ckpt", ev.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  c_ev->add_option("--data", ev.data, "dataset directory (val/ when present) or synth:scale_discrimination")->required();
  c_ev->add_option("--batch", ev.batch, "batch size")->check(CLI::PositiveNumber);
  c_ev->add_option("--seed", ev.seed, "synthetic data seed");
  c_ev->add_option("--synth-per-class", ev.synth_per_class, "synthetic images per class")->check(CLI::PositiveNumber);

  ExportMapsArgs em;
  auto* c_em = app.add_subcommand("export-maps", "dump SAM modulation maps for one image");
  c_em->add_option("--ckpt", em.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  c_em->add_option("--image", em.image, "P6 PPM image")->required()->check(CLI::ExistingFile);
  c_em->add_option("--stage", em.stage, "stage 1-4")->check(CLI::Range(1, 4));
  c_em->add_option("--out", em.out, "output directory")->required();
  c_em->add_option("--upsample", em.upsample, "none, nearest or bilinear")->check(CLI::IsMember({"none", "nearest", "bilinear"}));
  c_em->add_flag("--per-head", em.per_head, "also export each MHMC head");
  c_em->add_flag("--pre-aggregation", em.pre_aggregation, "also export the MHMC output before aggregation");
  c_em->add_option("--channel", em.channel, "export one channel instead of the channel mean")->check(CLI::NonNegativeNumber);

  AttnArgs at;
  auto* c_at = app.add_subcommand("attn-distance", "mean attention distance per MSA head");
  c_at->add_option("--ckpt", at.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  c_at->add_option("--data", at.data, "dataset directory or synth:scale_discrimination")->required();
  c_at->add_option("--out", at.out, "output CSV")->required();
  c_at->add_option("--samples", at.samples, "images to average over")->check(CLI::PositiveNumber);
  c_at->add_option("--seed", at.seed, "synthetic data seed");

  BenchArgs be;
  auto* c_be = app.add_subcommand("bench", "forward wall-clock timing");
  add_model_source(c_be, be.model, true);
  c_be->add_option("--batch", be.batch, "batch size")->check(CLI::PositiveNumber);
  c_be->add_option("--reps", be.reps, "timed repetitions")->check(CLI::PositiveNumber);
  c_be->add_option("--input-size", be.input_size, "square input resolution")->check(CLI::PositiveNumber);
  c_be->add_option("--seed", be.seed, "weights and input seed");

  AblationArgs ab;
  auto* c_ab = app.add_subcommand("ablation", "params/FLOPs for an ablation family");
  c_ab->add_option("--family", ab.family, "heads, aggregation, stacking or components")
      ->required()
      ->check(CLI::IsMember({"heads", "aggregation", "stacking", "components"}));
  c_ab->add_option("--out", ab.out, "output CSV")->required();
  c_ab->add_option("--input-size", ab.input_size, "square input resolution")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*c_sum) return run_summarize(sum);
    if (*c_gc) return run_gradcheck(gc);
    if (*c_tr) return run_train(tr);
    if (*c_ev) return run_eval(ev);
    if (*c_em) return run_export_maps(em);
    if (*c_at) return run_attn_distance(at);
    if (*c_be) return run_bench(be);
    if (*c_ab) return run_ablation(ab);
  } catch (const Error& e) {
    log::error(e.what());
    return e.kind() == ErrorKind::usage ? kExitUsage : kExitDomain;
  } catch (const std::exception& e) {
    log::error(e.what());
    return kExitDomain;
  }
  return kExitUsage;
}
