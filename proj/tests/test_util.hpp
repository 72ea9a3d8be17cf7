#pragma once

// Test-only helpers: random tensors, finite differences and naive loop
// oracles. Nothing here shares code with the kernels under test.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "smt/tensor.hpp"

namespace smt::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Central finite-difference gradient of `f` with respect to every element of `x`.
inline std::vector<double> numeric_grad(Tensor<double>& x, const std::function<double()>& f, double h = 1e-5) {
  std::vector<double> g(static_cast<std::size_t>(x.numel()));
  for (Index i = 0; i < x.numel(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[static_cast<std::size_t>(i)] = (up - down) / (2 * h);
  }
  return g;
}

inline double rel_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

/// y[n,oh,ow,co] = b[co] + sum over (ky,kx,ci in group) x * w.
template <typename T>
std::vector<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Index stride, Index pad,
                            Index groups, Index& oh, Index& ow) {
  const Index n = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  const Index k = w.dim(0), cout = w.dim(3);
  const Index cin_g = cin / groups, cout_g = cout / groups;
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(n * oh * ow * cout), T(0));
  for (Index in = 0; in < n; ++in)
    for (Index y = 0; y < oh; ++y)
      for (Index xo = 0; xo < ow; ++xo)
        for (Index co = 0; co < cout; ++co) {
          const Index g = co / cout_g;
          double acc = b.defined() ? double(b[co]) : 0.0;
          for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx)
              for (Index ci = 0; ci < cin_g; ++ci) {
                const Index iy = y * stride - pad + ky, ix = xo * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += double(x[((in * h + iy) * wd + ix) * cin + g * cin_g + ci]) *
                       double(w[((ky * k + kx) * cin_g + ci) * cout + co]);
              }
          out[static_cast<std::size_t>(((in * oh + y) * ow + xo) * cout + co)] = static_cast<T>(acc);
        }
  return out;
}

template <typename T>
std::vector<T> naive_matmul(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const Index cin = w.dim(0), cout = w.dim(1), rows = x.numel() / cin;
  std::vector<T> out(static_cast<std::size_t>(rows * cout));
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < cout; ++j) {
      double acc = b.defined() ? double(b[j]) : 0.0;
      for (Index i = 0; i < cin; ++i) acc += double(x[r * cin + i]) * double(w[i * cout + j]);
      out[static_cast<std::size_t>(r * cout + j)] = static_cast<T>(acc);
    }
  return out;
}

/// Per-head attention from separate q, k, v slices of packed [N, T, 3C] input.
template <typename T>
std::vector<T> naive_attention(const Tensor<T>& qkv, Index heads, double scale) {
  const Index n = qkv.dim(0), t = qkv.dim(1), c = qkv.dim(2) / 3, d = c / heads;
  std::vector<T> out(static_cast<std::size_t>(n * t * c), T(0));
  auto at = [&](Index s, Index tok, Index which, Index h, Index e) {
    return double(qkv[(s * t + tok) * 3 * c + which * c + h * d + e]);
  };
  for (Index s = 0; s < n; ++s)
    for (Index h = 0; h < heads; ++h)
      for (Index i = 0; i < t; ++i) {
        std::vector<double> logits(static_cast<std::size_t>(t));
        double mx = -1e300;
        for (Index j = 0; j < t; ++j) {
          double dot = 0;
          for (Index e = 0; e < d; ++e) dot += at(s, i, 0, h, e) * at(s, j, 1, h, e);
          logits[static_cast<std::size_t>(j)] = dot * scale;
          mx = std::max(mx, dot * scale);
        }
        double z = 0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (Index e = 0; e < d; ++e) {
          double acc = 0;
          for (Index j = 0; j < t; ++j) acc += logits[static_cast<std::size_t>(j)] / z * at(s, j, 2, h, e);
          out[static_cast<std::size_t>((s * t + i) * c + h * d + e)] = static_cast<T>(acc);
        }
      }
  return out;
}

/// Multi-head mixed depthwise convolution: head j covers channels
/// [off_j, off_j + size_j) and uses its own k_j x k_j kernel, "same" padding.
/// weights[j] is [k_j, k_j, 1, size_j]; biases[j] may be undefined.
template <typename T>
std::vector<T> naive_mhmc(const Tensor<T>& x, const std::vector<Index>& sizes, const std::vector<Tensor<T>>& weights,
                          const std::vector<Tensor<T>>& biases) {
  const Index n = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(x.numel()), T(0));
  Index off = 0;
  for (std::size_t j = 0; j < sizes.size(); ++j) {
    const auto& w = weights[j];
    const Index k = w.dim(0), pad = k / 2;
    for (Index s = 0; s < n; ++s)
      for (Index y = 0; y < h; ++y)
        for (Index xo = 0; xo < wd; ++xo)
          for (Index ch = 0; ch < sizes[j]; ++ch) {
            double acc = biases[j].defined() ? double(biases[j][ch]) : 0.0;
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index iy = y - pad + ky, ix = xo - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += double(x[((s * h + iy) * wd + ix) * c + off + ch]) * double(w[(ky * k + kx) * sizes[j] + ch]);
              }
            out[static_cast<std::size_t>(((s * h + y) * wd + xo) * c + off + ch)] = static_cast<T>(acc);
          }
    off += sizes[j];
  }
  return out;
}

/// Scale-aware aggregation with n equal heads of m = C/n channels:
/// shuffle so group g holds channel g of every head, expand each group
/// n -> e*n, exact GELU, then a dense e*C -> C projection.
/// expand_w holds the m blocks [n, e*n] back to back.
template <typename T>
std::vector<T> naive_saa(const Tensor<T>& x, Index heads, Index e, const Tensor<T>& expand_w, const Tensor<T>& expand_b,
                         const Tensor<T>& inter_w, const Tensor<T>& inter_b) {
  const Index c = x.dim(-1), rows = x.numel() / c, n = heads, m = c / n, wide = e * c;
  std::vector<T> out(static_cast<std::size_t>(rows * c));
  std::vector<double> shuffled(static_cast<std::size_t>(c)), hidden(static_cast<std::size_t>(wide));
  for (Index r = 0; r < rows; ++r) {
    for (Index g = 0; g < m; ++g)
      for (Index j = 0; j < n; ++j) shuffled[static_cast<std::size_t>(g * n + j)] = double(x[r * c + j * m + g]);
    for (Index g = 0; g < m; ++g)
      for (Index o = 0; o < e * n; ++o) {
        double acc = expand_b.defined() ? double(expand_b[g * e * n + o]) : 0.0;
        for (Index i = 0; i < n; ++i) acc += shuffled[static_cast<std::size_t>(g * n + i)] * double(expand_w[(g * n + i) * e * n + o]);
        hidden[static_cast<std::size_t>(g * e * n + o)] = 0.5 * acc * (1.0 + std::erf(acc / std::sqrt(2.0)));
      }
    for (Index o = 0; o < c; ++o) {
      double acc = inter_b.defined() ? double(inter_b[o]) : 0.0;
      for (Index i = 0; i < wide; ++i) acc += hidden[static_cast<std::size_t>(i)] * double(inter_w[i * c + o]);
      out[static_cast<std::size_t>(r * c + o)] = static_cast<T>(acc);
    }
  }
  return out;
}

}  // namespace smt::testing
