#pragma once

// Training and evaluation loop with deterministic batching, metrics logs and
// resumable checkpoints.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>

#include "smt/checkpoint.hpp"
#include "smt/data.hpp"
#include "smt/model.hpp"
#include "smt/optim.hpp"

namespace smt {

struct TrainSpec {
  std::int64_t steps = 2000;
  Index batch_size = 32;
  double base_lr = 2e-3;
  std::int64_t warmup_steps = 100;
  double warmup_lr = 1e-6;
  double min_lr = 1e-5;
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double label_smoothing = 0.1;
  double clip_norm = 5.0;
  std::optional<double> drop_path_max;  // overrides the model config when set
  std::uint64_t seed = 0;
  bool flip = true;
  std::int64_t eval_every = 200;
  std::int64_t checkpoint_every = 0;  // 0: only best and final
  Index eval_batch_size = 64;
  // Synthetic data sizes, used when the data source is synth:...
  Index synth_per_class = 512;
  Index synth_eval_per_class = 128;

  bool operator==(const TrainSpec&) const = default;

  LrSchedule schedule() const { return {steps, warmup_steps, base_lr, warmup_lr, min_lr}; }
  AdamWHyper hyper(double lr) const { return {lr, beta1, beta2, eps, weight_decay}; }
};

inline void validate(const TrainSpec& s) {
  auto fail = [](const std::string& key, const std::string& what) { throw ConfigError("$." + key + ": " + what); };
  if (s.steps < 1) fail("steps", "must be >= 1");
  if (s.batch_size < 1) fail("batch_size", "must be >= 1");
  if (s.eval_batch_size < 1) fail("eval_batch_size", "must be >= 1");
  if (!(s.base_lr >= 0)) fail("base_lr", "must be >= 0");
  if (s.warmup_steps < 0) fail("warmup_steps", "must be >= 0");
  if (!(s.warmup_lr >= 0 && s.warmup_lr <= s.base_lr)) fail("warmup_lr", "must lie in [0, base_lr]");
  if (!(s.min_lr >= 0 && s.min_lr <= s.base_lr)) fail("min_lr", "must lie in [0, base_lr]");
  if (!(s.weight_decay >= 0)) fail("weight_decay", "must be >= 0");
  if (!(s.beta1 >= 0 && s.beta1 < 1)) fail("beta1", "must lie in [0, 1)");
  if (!(s.beta2 >= 0 && s.beta2 < 1)) fail("beta2", "must lie in [0, 1)");
  if (!(s.eps > 0)) fail("eps", "must be > 0");
  if (!(s.label_smoothing >= 0 && s.label_smoothing < 1)) fail("label_smoothing", "must lie in [0, 1)");
  if (!(s.clip_norm > 0)) fail("clip_norm", "must be > 0");
  if (s.drop_path_max && !(*s.drop_path_max >= 0 && *s.drop_path_max < 1)) fail("drop_path_max", "must lie in [0, 1)");
  if (s.eval_every < 0) fail("eval_every", "must be >= 0");
  if (s.checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
  if (s.synth_per_class < 1) fail("synth_per_class", "must be >= 1");
  if (s.synth_eval_per_class < 1) fail("synth_eval_per_class", "must be >= 1");
}

inline nlohmann::json to_json(const TrainSpec& s) {
  nlohmann::json j{{"steps", s.steps},
                   {"batch_size", s.batch_size},
                   {"base_lr", s.base_lr},
                   {"warmup_steps", s.warmup_steps},
                   {"warmup_lr", s.warmup_lr},
                   {"min_lr", s.min_lr},
                   {"weight_decay", s.weight_decay},
                   {"beta1", s.beta1},
                   {"beta2", s.beta2},
                   {"eps", s.eps},
                   {"label_smoothing", s.label_smoothing},
                   {"clip_norm", s.clip_norm},
                   {"seed", s.seed},
                   {"flip", s.flip},
                   {"eval_every", s.eval_every},
                   {"checkpoint_every", s.checkpoint_every},
                   {"eval_batch_size", s.eval_batch_size},
                   {"synth_per_class", s.synth_per_class},
                   {"synth_eval_per_class", s.synth_eval_per_class}};
  if (s.drop_path_max) j["drop_path_max"] = *s.drop_path_max;
  return j;
}

/// Every key is optional; unknown keys are rejected.
inline TrainSpec parse_train_spec(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("train spec is not valid JSON: ") + e.what(), e.byte);
  }
  TrainSpec s;
  std::vector<std::string> keys;
  const auto defaults = to_json(s);
  for (const auto& [k, v] : defaults.items()) keys.push_back(k);
  keys.push_back("drop_path_max");
  detail::JsonReader r(j, "$", {}, keys);
  auto integer = [&](const char* k, auto& dst) {
    if (r.has(k)) dst = static_cast<std::remove_reference_t<decltype(dst)>>(r.integer(k));
  };
  auto number = [&](const char* k, double& dst) {
    if (r.has(k)) dst = r.number(k);
  };
  integer("steps", s.steps);
  integer("batch_size", s.batch_size);
  number("base_lr", s.base_lr);
  integer("warmup_steps", s.warmup_steps);
  number("warmup_lr", s.warmup_lr);
  number("min_lr", s.min_lr);
  number("weight_decay", s.weight_decay);
  number("beta1", s.beta1);
  number("beta2", s.beta2);
  number("eps", s.eps);
  number("label_smoothing", s.label_smoothing);
  number("clip_norm", s.clip_norm);
  if (r.has("drop_path_max")) s.drop_path_max = r.number("drop_path_max");
  if (r.has("seed")) {
    if (!r.raw("seed").is_number_unsigned()) throw ConfigError("$.seed: expected a non-negative integer");
    s.seed = r.raw("seed").get<std::uint64_t>();
  }
  if (r.has("flip")) s.flip = r.boolean("flip");
  integer("eval_every", s.eval_every);
  integer("checkpoint_every", s.checkpoint_every);
  integer("eval_batch_size", s.eval_batch_size);
  integer("synth_per_class", s.synth_per_class);
  integer("synth_eval_per_class", s.synth_eval_per_class);
  validate(s);
  return s;
}

struct MetricRow {
  std::int64_t step = 0;
  double loss = 0, lr = 0, grad_norm = 0, wall_ms = 0;
};

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
  Index count = 0;
};

struct EvalRow {
  std::int64_t step = 0;  // updates completed when measured
  EvalResult result;
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "step,loss,lr,grad_norm,wall_ms\n";
  for (const auto& r : rows) os << r.step << ',' << r.loss << ',' << r.lr << ',' << r.grad_norm << ',' << std::setprecision(6) << r.wall_ms << std::setprecision(17) << '\n';
  return os.str();
}

inline std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "step,loss,lr,grad_norm,wall_ms") throw ParseError("metrics log: unexpected header '" + line + "'", 0);
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricRow r;
    char c;
    std::istringstream ls(line);
    if (!(ls >> r.step >> c >> r.loss >> c >> r.lr >> c >> r.grad_norm >> c >> r.wall_ms))
      throw ParseError("metrics log: malformed row '" + line + "'", 0);
    rows.push_back(r);
  }
  return rows;
}

inline std::string eval_csv(const std::vector<EvalRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(17) << "step,accuracy,loss\n";
  for (const auto& e : rows) os << e.step << ',' << e.result.accuracy << ',' << e.result.loss << '\n';
  return os.str();
}

inline std::vector<EvalRow> parse_eval_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "step,accuracy,loss") throw ParseError("eval log: unexpected header '" + line + "'", 0);
  std::vector<EvalRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EvalRow r;
    char c;
    std::istringstream ls(line);
    if (!(ls >> r.step >> c >> r.result.accuracy >> c >> r.result.loss)) throw ParseError("eval log: malformed row '" + line + "'", 0);
    rows.push_back(r);
  }
  return rows;
}

/// Sample index consumed at global position `pos` (= step * batch + i): each
/// pass over the data uses a fresh permutation keyed by (seed, epoch).
class BatchPlan {
 public:
  BatchPlan(std::uint64_t seed, Index n) : seed_(seed), n_(n) {}

  Index at(std::int64_t pos) {
    const std::int64_t epoch = pos / n_;
    if (epoch != epoch_) {
      perm_.resize(static_cast<std::size_t>(n_));
      std::iota(perm_.begin(), perm_.end(), Index{0});
      Rng rng(mix_seed({seed_, 0x6570ULL, static_cast<std::uint64_t>(epoch)}));
      for (Index i = n_ - 1; i > 0; --i) std::swap(perm_[static_cast<std::size_t>(i)], perm_[rng.below(static_cast<std::uint64_t>(i + 1))]);
      epoch_ = epoch;
    }
    return perm_[static_cast<std::size_t>(pos % n_)];
  }

 private:
  std::uint64_t seed_;
  Index n_;
  std::int64_t epoch_ = -1;
  std::vector<Index> perm_;
};

template <typename T>
EvalResult evaluate(const Model<T>& model, const Dataset& ds, Index batch_size = 64) {
  if (ds.num_classes() != model.config.num_classes)
    throw ConfigError("model predicts " + std::to_string(model.config.num_classes) + " classes but the dataset has " +
                      std::to_string(ds.num_classes()));
  NoGradScope<T> ng;
  EvalResult r;
  Index correct = 0;
  double loss_sum = 0;
  for (Index start = 0; start < ds.size(); start += batch_size) {
    std::vector<Index> idx;
    for (Index i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    const auto labels = ds.batch_labels(idx);
    auto logits = model.forward(ds.batch<T>(idx), ops::NormMode::eval);
    loss_sum += static_cast<double>(ops::cross_entropy(logits, labels, T(0)).item()) * static_cast<double>(idx.size());
    const Index k = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const T* row = logits.ptr() + static_cast<Index>(b) * k;
      correct += std::max_element(row, row + k) - row == labels[b];
    }
  }
  r.count = ds.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  r.loss = loss_sum / static_cast<double>(ds.size());
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoint <-> model / optimizer
// ---------------------------------------------------------------------------

struct LoopState {
  std::int64_t step = 0;  // updates completed
  std::uint64_t seed = 0;
  double best_accuracy = -1;
  std::int64_t best_step = -1;
};

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, const AdamState<T>* adam, const LoopState& loop) {
  Checkpoint c;
  c.config_json = serialize_config(model.config);
  const auto tensors = model.tensors();
  for (const auto& nt : tensors) c.tensors.push_back(StoredTensor::from(nt.name, nt.tensor));
  if (adam) {
    std::size_t i = 0;
    for (const auto& nt : tensors) {
      if (nt.buffer) continue;
      c.tensors.push_back(StoredTensor::from("opt/m/" + nt.name, adam->m[i]));
      c.tensors.push_back(StoredTensor::from("opt/v/" + nt.name, adam->v[i]));
      ++i;
    }
    c.tensors.push_back(StoredTensor::scalars("opt/adam_step", {static_cast<double>(adam->step)}));
  }
  c.tensors.push_back(StoredTensor::scalars("opt/step", {static_cast<double>(loop.step)}));
  // The loop's randomness is counter based: (seed, step) is its whole state.
  c.tensors.push_back(StoredTensor::scalars("opt/rng", {static_cast<double>(loop.seed >> 32), static_cast<double>(loop.seed & 0xffffffffULL)}));
  c.tensors.push_back(StoredTensor::scalars("opt/best", {loop.best_accuracy, static_cast<double>(loop.best_step)}));
  return c;
}

template <typename T>
std::map<std::string, Shape> tensor_shapes(const Model<T>& model) {
  std::map<std::string, Shape> out;
  for (const auto& nt : model.tensors()) out[nt.name] = nt.tensor.shape();
  return out;
}

/// Copies stored values into `model`; refuses (listing every offending name)
/// when the tensor sets differ.
template <typename T>
void load_model_tensors(Model<T>& model, const Checkpoint& c) {
  const auto bad = checkpoint_mismatches(c, tensor_shapes(model));
  if (!bad.empty()) {
    std::string msg = "checkpoint does not match model " + model.config.name + "; mismatched tensors:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ConfigError(msg);
  }
  for (auto& nt : model.tensors()) {
    auto src = c.at(nt.name).template as<T>();
    std::copy(src.data().begin(), src.data().end(), nt.tensor.data().begin());
  }
}

/// Model rebuilt from the config stored in the checkpoint.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& c) {
  auto m = build_model<T>(parse_config(c.config_json), 0, false);
  load_model_tensors(m, c);
  return m;
}

template <typename T>
void load_optimizer(const Model<T>& model, const Checkpoint& c, AdamState<T>& adam, LoopState& loop) {
  adam = AdamState<T>::zeros_like(model.parameters());
  std::size_t i = 0;
  for (const auto& nt : model.parameters()) {
    adam.m[i] = c.at("opt/m/" + nt.name).template as<T>();
    adam.v[i] = c.at("opt/v/" + nt.name).template as<T>();
    ++i;
  }
  adam.step = static_cast<std::int64_t>(c.at("opt/adam_step").as<double>()[0]);
  loop.step = static_cast<std::int64_t>(c.at("opt/step").as<double>()[0]);
  const auto rng = c.at("opt/rng").as<double>();
  loop.seed = (static_cast<std::uint64_t>(rng[0]) << 32) | static_cast<std::uint64_t>(rng[1]);
  const auto best = c.at("opt/best").as<double>();
  loop.best_accuracy = best[0];
  loop.best_step = static_cast<std::int64_t>(best[1]);
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::optional<std::filesystem::path> resume;
  std::int64_t stop_after = -1;  // end early once this many updates are done (tests)
};

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<MetricRow> metrics;
  std::vector<EvalRow> evals;
  LoopState loop;
  EvalResult final_eval;
};

/// Trains `cfg` (num_classes must match the data). Deterministic in
/// (cfg, data, spec); wall_ms is the only non-reproducible column.
template <typename T>
TrainResult<T> train(ModelConfig cfg, const Dataset& train_set, const Dataset& val_set, const TrainSpec& spec,
                     const TrainOptions& opt = {}) {
  validate(spec);
  if (spec.drop_path_max) cfg.drop_path_max = *spec.drop_path_max;
  if (cfg.num_classes != train_set.num_classes())
    throw ConfigError("config has num_classes " + std::to_string(cfg.num_classes) + " but the dataset has " +
                      std::to_string(train_set.num_classes()) + " classes");
  if (val_set.num_classes() != train_set.num_classes()) throw DatasetError("train and validation sets disagree on the class count");
  if (spec.batch_size < kMinBatchNormBatch)
    log::warn("batch_size " + std::to_string(spec.batch_size) + " < " + std::to_string(kMinBatchNormBatch) +
              "; stem batch norm will use running statistics");

  TrainResult<T> res{build_model<T>(cfg, spec.seed), {}, {}, {}, {}};
  auto& model = res.model;
  auto params = model.parameters();
  AdamState<T> adam = AdamState<T>::zeros_like(params);
  LoopState& loop = res.loop;
  loop.seed = spec.seed;

  const bool write = !opt.out_dir.empty();
  if (opt.resume) {
    const auto c = load_checkpoint(*opt.resume);
    load_model_tensors(model, c);
    load_optimizer(model, c, adam, loop);
    if (loop.seed != spec.seed)
      log::warn("checkpoint seed " + std::to_string(loop.seed) + " differs from spec seed " + std::to_string(spec.seed) +
                "; continuing with the checkpoint's");
    log::info("resumed at step " + std::to_string(loop.step));
    if (write && std::filesystem::exists(opt.out_dir / "metrics.csv")) {
      for (const auto& r : parse_metrics_csv(io::read_file(opt.out_dir / "metrics.csv")))
        if (r.step < loop.step) res.metrics.push_back(r);
    }
    // An eval at the checkpoint's own step ran before the checkpoint was written.
    if (write && std::filesystem::exists(opt.out_dir / "eval.csv")) {
      for (const auto& e : parse_eval_csv(io::read_file(opt.out_dir / "eval.csv")))
        if (e.step <= loop.step) res.evals.push_back(e);
    }
  }

  for (auto& p : params) p.tensor.set_requires_grad(true);
  auto save = [&](const std::string& file) {
    if (write) save_checkpoint(opt.out_dir / file, make_checkpoint(model, &adam, loop));
  };
  auto flush_logs = [&] {
    if (!write) return;
    io::atomic_write(opt.out_dir / "metrics.csv", metrics_csv(res.metrics));
    io::atomic_write(opt.out_dir / "eval.csv", eval_csv(res.evals));
  };
  auto run_eval = [&] {
    const auto e = evaluate(model, val_set, spec.eval_batch_size);
    res.evals.push_back({loop.step, e});
    log::info("step " + std::to_string(loop.step) + " eval accuracy " + std::to_string(e.accuracy) + " loss " + std::to_string(e.loss));
    if (e.accuracy > loop.best_accuracy) {
      loop.best_accuracy = e.accuracy;
      loop.best_step = loop.step;
      save("best.smt");
    }
    return e;
  };

  const auto sched = spec.schedule();
  BatchPlan plan(loop.seed, train_set.size());
  const std::int64_t end = opt.stop_after >= 0 ? std::min(spec.steps, opt.stop_after) : spec.steps;
  while (loop.step < end) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::int64_t step = loop.step;
    const double lr = cosine_lr(step, sched);
    std::vector<Index> idx;
    std::vector<bool> flip;
    for (Index i = 0; i < spec.batch_size; ++i) {
      idx.push_back(plan.at(step * spec.batch_size + i));
      flip.push_back(spec.flip &&
                     unit_uniform(mix_seed({loop.seed, 0x666c6970ULL, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)})) < 0.5);
    }
    const auto labels = train_set.batch_labels(idx);
    const auto x = train_set.batch<T>(idx, flip);

    double loss_value;
    {
      Tape<T> tape;
      TapeScope<T> scope(tape);
      ForwardContext<T> ctx;
      ctx.mode = ops::NormMode::train;
      ctx.drop_seed = mix_seed({loop.seed, 0x64726f70ULL, static_cast<std::uint64_t>(step)});
      auto loss = ops::cross_entropy(model.forward(x, ctx), labels, static_cast<T>(spec.label_smoothing));
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        flush_logs();
        throw DivergenceError("loss became " + std::to_string(loss_value) + " at step " + std::to_string(step) + " (lr " +
                                  std::to_string(lr) + "); aborting",
                              step);
      }
      tape.backward(loss);
    }
    double norm = 0;
    clip_grad_norm(params, spec.clip_norm, &norm);
    {
      NoGradScope<T> ng;
      adamw_step(params, adam, spec.hyper(lr));
    }
    for (auto& p : params) p.tensor.zero_grad();
    loop.step += 1;
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.push_back({step, loss_value, lr, norm, ms});
    log::debug("step " + std::to_string(step) + " loss " + std::to_string(loss_value) + " lr " + std::to_string(lr));

    if (spec.eval_every > 0 && loop.step % spec.eval_every == 0 && loop.step < spec.steps) run_eval();
    if (spec.checkpoint_every > 0 && loop.step % spec.checkpoint_every == 0) save("ckpt_step" + std::to_string(loop.step) + ".smt");
    if (spec.eval_every > 0 && loop.step % spec.eval_every == 0) flush_logs();
  }
  if (loop.step == spec.steps) {
    res.final_eval = run_eval();
    save("final.smt");
  }
  for (auto& p : params) {
    p.tensor.set_requires_grad(false);
    p.tensor.drop_grad();
  }
  flush_logs();
  return res;
}

}  // namespace smt
