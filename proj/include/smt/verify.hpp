#pragma once

// Whole-model gradient verification in f64.

#include "smt/autograd/gradcheck.hpp"
#include "smt/model.hpp"

namespace smt {

struct ModelGradCheckOptions {
  GradCheckOptions check;
  Index input_size = 64;
  Index batch = 2;
};

/// Checks d(sum(logits * R))/d(param) for every parameter tensor of `cfg`
/// against central differences. Runs in eval mode: batch norm then uses its
/// running statistics, so the loss is a smooth function of the parameters and
/// independent of batch composition. Input and R are drawn from `seed`.
inline GradReport gradcheck_model(const ModelConfig& cfg, std::uint64_t seed, const ModelGradCheckOptions& opt = {}) {
  auto model = build_model<double>(cfg, seed);
  Rng rng(mix_seed({seed, 0x6763ULL}));
  Tensor<double> x(Shape{opt.batch, opt.input_size, opt.input_size, 3});
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
  Tensor<double> r(Shape{opt.batch, cfg.num_classes});
  for (auto& v : r.data()) v = rng.uniform(-1.0, 1.0);
  auto check = opt.check;
  check.seed = mix_seed({seed, 0x636f6f7264ULL});
  return grad_check<double>(model.parameters(), [&] { return ops::sum(ops::mul(model.forward(x, ops::NormMode::eval), r)); }, check);
}

}  // namespace smt
