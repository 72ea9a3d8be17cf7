#pragma once

// Differentiable kernels over NHWC tensors. Every op validates shapes, computes
// its forward result and, when recording, registers a backward rule on the
// active tape. Inner loops run along the contiguous channel axis.

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "smt/tensor.hpp"

namespace smt::ops {

namespace detail {

// Row-major views for the dense matrix products.
template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
void axpy(T* __restrict y, const T* __restrict x, T a, Index n) {
  for (Index i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw InputError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline std::string dim_msg(std::string_view op, std::string_view what, Index got, Index want) {
  return std::string(op) + ": " + std::string(what) + " is " + std::to_string(got) + ", expected " +
         std::to_string(want);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) out[i] = a[i] + b[i];
  record_op<T>("add", {a, b}, out, [a, b](std::span<const T> g) mutable {
    for (auto* t : {&a, &b}) {
      auto s = grad_sink(*t);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) out[i] = a[i] * b[i];
  record_op<T>("mul", {a, b}, out, [a, b](std::span<const T> g) mutable {
    if (auto s = grad_sink(a); !s.empty())
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * b[static_cast<Index>(i)];
    if (auto s = grad_sink(b); !s.empty())
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * a[static_cast<Index>(i)];
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (Index i = 0; i < x.numel(); ++i) out[i] = x[i] * factor;
  record_op<T>("scale", {x}, out, [x, factor](std::span<const T> g) mutable {
    auto s = grad_sink(x);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * factor;
  });
  return out;
}

/// Multiplies sample n (leading axis) by `factors[n]`. Used by drop path.
template <typename T>
Tensor<T> scale_samples(const Tensor<T>& x, std::vector<T> factors) {
  const Index n = x.dim(0);
  if (static_cast<Index>(factors.size()) != n) {
    throw InputError(detail::dim_msg("scale_samples", "factor count", static_cast<Index>(factors.size()), n));
  }
  const Index per = x.numel() / n;
  Tensor<T> out(x.shape());
  for (Index s = 0; s < n; ++s)
    for (Index i = 0; i < per; ++i) out[s * per + i] = x[s * per + i] * factors[static_cast<std::size_t>(s)];
  record_op<T>("scale_samples", {x}, out, [x, factors, n, per](std::span<const T> g) mutable {
    auto d = grad_sink(x);
    if (d.empty()) return;
    for (Index s = 0; s < n; ++s)
      for (Index i = 0; i < per; ++i)
        d[static_cast<std::size_t>(s * per + i)] += g[static_cast<std::size_t>(s * per + i)] * factors[static_cast<std::size_t>(s)];
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (Index i = 0; i < x.numel(); ++i) acc += x[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  record_op<T>("sum", {x}, out, [x](std::span<const T> g) mutable {
    auto s = grad_sink(x);
    for (auto& v : s) v += g[0];
  });
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (Index i = 0; i < x.numel(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  record_op<T>("gelu", {x}, out, [x](std::span<const T> g) mutable {
    auto s = grad_sink(x);
    if (s.empty()) return;
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const T v = x[static_cast<Index>(i)];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      s[i] += g[i] * (cdf + v * pdf);
    }
  });
  return out;
}

/// Copy with a new shape of equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw InputError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  record_op<T>("reshape", {x}, out, [x](std::span<const T> g) mutable {
    auto s = grad_sink(x);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Channel-axis (last axis) manipulation
// ---------------------------------------------------------------------------

/// out[..., o] = x[..., perm[o]]; `perm` must be a permutation of 0..C-1.
template <typename T>
Tensor<T> permute_channels(const Tensor<T>& x, const std::vector<Index>& perm) {
  const Index c = x.dim(-1);
  if (static_cast<Index>(perm.size()) != c) {
    throw InputError(detail::dim_msg("permute_channels", "permutation length", static_cast<Index>(perm.size()), c));
  }
  const Index rows = x.numel() / c;
  Tensor<T> out(x.shape());
  for (Index r = 0; r < rows; ++r)
    for (Index o = 0; o < c; ++o) out[r * c + o] = x[r * c + perm[static_cast<std::size_t>(o)]];
  record_op<T>("permute_channels", {x}, out, [x, perm, rows, c](std::span<const T> g) mutable {
    auto s = grad_sink(x);
    if (s.empty()) return;
    for (Index r = 0; r < rows; ++r)
      for (Index o = 0; o < c; ++o)
        s[static_cast<std::size_t>(r * c + perm[static_cast<std::size_t>(o)])] += g[static_cast<std::size_t>(r * c + o)];
  });
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, Index start, Index count) {
  const Index c = x.dim(-1);
  if (start < 0 || count < 1 || start + count > c) {
    throw InputError("slice_channels: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " + std::to_string(c) + " channels");
  }
  Shape shape = x.shape();
  shape.back() = count;
  const Index rows = x.numel() / c;
  Tensor<T> out(shape);
  for (Index r = 0; r < rows; ++r)
    std::copy_n(x.ptr() + r * c + start, count, out.ptr() + r * count);
  record_op<T>("slice_channels", {x}, out, [x, start, count, rows, c](std::span<const T> g) mutable {
    auto s = grad_sink(x);
    if (s.empty()) return;
    for (Index r = 0; r < rows; ++r)
      for (Index i = 0; i < count; ++i) s[static_cast<std::size_t>(r * c + start + i)] += g[static_cast<std::size_t>(r * count + i)];
  });
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw InputError("concat_channels: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  Index total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    l.pop_back();
    if (l != lead) throw InputError("concat_channels: leading extents differ: " + shape_str(p.shape()));
    total += p.dim(-1);
  }
  Shape shape = lead;
  shape.push_back(total);
  const Index rows = numel(lead);
  Tensor<T> out(shape);
  Index off = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    const Index c = p.dim(-1);
    for (Index r = 0; r < rows; ++r) std::copy_n(p.ptr() + r * c, c, out.ptr() + r * total + off);
    offsets.push_back(off);
    off += c;
  }
  record_op<T>("concat_channels", parts, out, [parts, offsets, rows, total](std::span<const T> g) mutable {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto s = grad_sink(parts[k]);
      if (s.empty()) continue;
      const Index c = parts[k].dim(-1);
      for (Index r = 0; r < rows; ++r)
        for (Index i = 0; i < c; ++i) s[static_cast<std::size_t>(r * c + i)] += g[static_cast<std::size_t>(r * total + offsets[k] + i)];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// out[..., j] = sum_i x[..., i] * w[i, j] + b[j]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  if (w.rank() != 2) throw ConfigError("linear: weight must be rank 2, got " + shape_str(w.shape()));
  const Index cin = w.dim(0), cout = w.dim(1);
  if (x.dim(-1) != cin) throw ConfigError(detail::dim_msg("linear", "input channel extent", x.dim(-1), cin));
  if (b.defined() && b.numel() != cout) throw ConfigError(detail::dim_msg("linear", "bias length", b.numel(), cout));
  Shape shape = x.shape();
  shape.back() = cout;
  const Index rows = x.numel() / cin;
  Tensor<T> out(shape);
  using detail::ConstMatMap, detail::MatMap;
  MatMap<T> o(out.ptr(), rows, cout);
  o.noalias() = ConstMatMap<T>(x.ptr(), rows, cin) * ConstMatMap<T>(w.ptr(), cin, cout);
  if (b.defined()) o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.ptr(), cout);
  record_op<T>("linear", {x, w, b}, out, [x, w, b, rows, cin, cout](std::span<const T> g) mutable {
    ConstMatMap<T> gm(g.data(), rows, cout);
    if (auto dx = grad_sink(x); !dx.empty())
      MatMap<T>(dx.data(), rows, cin).noalias() += gm * ConstMatMap<T>(w.ptr(), cin, cout).transpose();
    if (auto dw = grad_sink(w); !dw.empty())
      MatMap<T>(dw.data(), cin, cout).noalias() += ConstMatMap<T>(x.ptr(), rows, cin).transpose() * gm;
    if (auto db = grad_sink(b); !db.empty())
      for (Index r = 0; r < rows; ++r) detail::axpy(db.data(), g.data() + r * cout, T(1), cout);
  });
  return out;
}

/// Block-diagonal pointwise map: channel group g maps its `in_sizes[g]` inputs
/// to `out_sizes[g]` outputs with its own dense block. `w` stores the blocks
/// back to back, each row-major [in_g, out_g].
struct GroupLayout {
  std::vector<Index> in_sizes;
  std::vector<Index> out_sizes;

  Index in_total() const { return std::accumulate(in_sizes.begin(), in_sizes.end(), Index{0}); }
  Index out_total() const { return std::accumulate(out_sizes.begin(), out_sizes.end(), Index{0}); }
  Index weight_count() const {
    Index n = 0;
    for (std::size_t g = 0; g < in_sizes.size(); ++g) n += in_sizes[g] * out_sizes[g];
    return n;
  }
  static GroupLayout uniform(Index groups, Index in_per_group, Index out_per_group) {
    return {std::vector<Index>(static_cast<std::size_t>(groups), in_per_group),
            std::vector<Index>(static_cast<std::size_t>(groups), out_per_group)};
  }
};

template <typename T>
Tensor<T> grouped_linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const GroupLayout& layout) {
  const Index cin = layout.in_total(), cout = layout.out_total();
  if (layout.in_sizes.size() != layout.out_sizes.size() || layout.in_sizes.empty())
    throw ConfigError("grouped_linear: malformed group layout");
  if (x.dim(-1) != cin) throw ConfigError(detail::dim_msg("grouped_linear", "input channel extent", x.dim(-1), cin));
  if (w.numel() != layout.weight_count())
    throw ConfigError(detail::dim_msg("grouped_linear", "weight length", w.numel(), layout.weight_count()));
  if (b.defined() && b.numel() != cout) throw ConfigError(detail::dim_msg("grouped_linear", "bias length", b.numel(), cout));
  Shape shape = x.shape();
  shape.back() = cout;
  const Index rows = x.numel() / cin;
  Tensor<T> out(shape);
  auto for_groups = [layout](auto&& fn) {
    Index io = 0, oo = 0, wo = 0;
    for (std::size_t g = 0; g < layout.in_sizes.size(); ++g) {
      fn(io, layout.in_sizes[g], oo, layout.out_sizes[g], wo);
      io += layout.in_sizes[g];
      oo += layout.out_sizes[g];
      wo += layout.in_sizes[g] * layout.out_sizes[g];
    }
  };
  for (Index r = 0; r < rows; ++r) {
    T* orow = out.ptr() + r * cout;
    if (b.defined()) std::copy_n(b.ptr(), cout, orow);
    const T* xrow = x.ptr() + r * cin;
    for_groups([&](Index io, Index ni, Index oo, Index no, Index wo) {
      for (Index i = 0; i < ni; ++i) detail::axpy(orow + oo, w.ptr() + wo + i * no, xrow[io + i], no);
    });
  }
  record_op<T>("grouped_linear", {x, w, b}, out, [x, w, b, rows, cin, cout, for_groups](std::span<const T> g) mutable {
    auto dx = grad_sink(x);
    auto dw = grad_sink(w);
    auto db = grad_sink(b);
    for (Index r = 0; r < rows; ++r) {
      const T* grow = g.data() + r * cout;
      const T* xrow = x.ptr() + r * cin;
      for_groups([&](Index io, Index ni, Index oo, Index no, Index wo) {
        for (Index i = 0; i < ni; ++i) {
          const T* wrow = w.ptr() + wo + i * no;
          if (!dx.empty()) {
            T acc = 0;
            for (Index j = 0; j < no; ++j) acc += grow[oo + j] * wrow[j];
            dx[static_cast<std::size_t>(r * cin + io + i)] += acc;
          }
          if (!dw.empty()) detail::axpy(dw.data() + wo + i * no, grow + oo, xrow[io + i], no);
        }
      });
      if (!db.empty()) detail::axpy(db.data(), grow, T(1), cout);
    }
  });
  return out;
}

struct Conv2dParams {
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;
};

inline Index conv_out_extent(Index in, Index k, Index stride, Index padding) {
  return (in + 2 * padding - k) / stride + 1;
}

/// Cross-correlation over NHWC input with weight [k, k, Cin/groups, Cout].
namespace detail {

// Stride-1 depthwise convolution walks whole output rows: for a fixed tap
// the valid output span and its input span are both contiguous in NHWC, so
// the weight is tiled along the row and the inner loop stays contiguous.
template <typename T>
struct DepthwiseRows {
  Index n, h, w, c, k, pad, oh, ow;

  // fn(out_offset, in_offset, tap, length) for every (image, row, tap) run.
  template <typename Fn>
  void each(Fn&& fn) const {
    for (Index in = 0; in < n; ++in)
      for (Index y = 0; y < oh; ++y)
        for (Index ky = 0; ky < k; ++ky) {
          const Index iy = y - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (Index kx = 0; kx < k; ++kx) {
            const Index x0 = std::max<Index>(0, pad - kx);
            const Index x1 = std::min<Index>(ow, w + pad - kx);
            if (x1 <= x0) continue;
            fn(((in * oh + y) * ow + x0) * c, ((in * h + iy) * w + x0 - pad + kx) * c, ky * k + kx, (x1 - x0) * c);
          }
        }
  }

  // Row-length copies of each tap's weights.
  std::vector<T> tiled(const T* wp) const {
    std::vector<T> out(static_cast<std::size_t>(k * k * ow * c));
    for (Index t = 0; t < k * k; ++t)
      for (Index x = 0; x < ow; ++x) std::copy_n(wp + t * c, c, out.data() + (t * ow + x) * c);
    return out;
  }
};

template <typename T>
Tensor<T> depthwise_conv2d_s1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const DepthwiseRows<T>& rows,
                              Tensor<T> out) {
  const Index c = rows.c, span = rows.ow * c;
  {
    const auto wt = rows.tiled(w.ptr());
    T* op = out.ptr();
    const T* xp = x.ptr();
    if (b.defined())
      for (Index i = 0; i < out.numel() / c; ++i) std::copy_n(b.ptr(), c, op + i * c);
    rows.each([&](Index ob, Index ib, Index tap, Index len) {
      T* __restrict o = op + ob;
      const T* __restrict xi = xp + ib;
      const T* __restrict wk = wt.data() + tap * span;
      for (Index j = 0; j < len; ++j) o[j] += xi[j] * wk[j];
    });
  }
  record_op<T>("conv2d", {x, w, b}, out, [x, w, b, rows, c, span](std::span<const T> g) mutable {
    auto dx = grad_sink(x);
    auto dw = grad_sink(w);
    auto db = grad_sink(b);
    const T* gp = g.data();
    if (!db.empty())
      for (std::size_t i = 0; i < g.size(); i += static_cast<std::size_t>(c)) axpy(db.data(), gp + i, T(1), c);
    if (!dx.empty()) {
      const auto wt = rows.tiled(w.ptr());
      rows.each([&](Index ob, Index ib, Index tap, Index len) {
        T* __restrict d = dx.data() + ib;
        const T* __restrict go = gp + ob;
        const T* __restrict wk = wt.data() + tap * span;
        for (Index j = 0; j < len; ++j) d[j] += go[j] * wk[j];
      });
    }
    if (!dw.empty()) {
      // Per-tap row accumulators, folded to one channel vector at the end.
      std::vector<T> acc(static_cast<std::size_t>(rows.k * rows.k * span), T(0));
      const T* xp = x.ptr();
      rows.each([&](Index ob, Index ib, Index tap, Index len) {
        T* __restrict a = acc.data() + tap * span;
        const T* __restrict go = gp + ob;
        const T* __restrict xi = xp + ib;
        for (Index j = 0; j < len; ++j) a[j] += go[j] * xi[j];
      });
      for (Index t = 0; t < rows.k * rows.k; ++t)
        for (Index xo = 0; xo < rows.ow; ++xo) axpy(dw.data() + t * c, acc.data() + t * span + xo * c, T(1), c);
    }
  });
  return out;
}

// Ungrouped convolution as one matrix product over unfolded patches: row p of
// `cols` holds the k*k*cin inputs under output pixel p (zero where padded),
// which matches the weight's row-major [k*k*cin, cout] layout.
template <typename T, typename Taps>
Tensor<T> dense_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Taps& taps, Index pixels, Index k,
                       Index cin, Index cout, Tensor<T> out) {
  const Index patch = k * k * cin;
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(pixels * patch), T(0));
  const T* xp = x.ptr();
  taps([&](Index ob, Index ib, Index wb) {
    std::copy_n(xp + ib, cin, cols->data() + (ob / cout) * patch + wb / cout);
  });
  MatMap<T> o(out.ptr(), pixels, cout);
  o.noalias() = ConstMatMap<T>(cols->data(), pixels, patch) * ConstMatMap<T>(w.ptr(), patch, cout);
  if (b.defined()) o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.ptr(), cout);
  record_op<T>("conv2d", {x, w, b}, out, [x, w, b, taps, cols, pixels, patch, cin, cout](std::span<const T> g) mutable {
    ConstMatMap<T> gm(g.data(), pixels, cout);
    if (auto db = grad_sink(b); !db.empty())
      for (Index i = 0; i < pixels; ++i) axpy(db.data(), g.data() + i * cout, T(1), cout);
    if (auto dw = grad_sink(w); !dw.empty())
      MatMap<T>(dw.data(), patch, cout).noalias() += ConstMatMap<T>(cols->data(), pixels, patch).transpose() * gm;
    if (auto dx = grad_sink(x); !dx.empty()) {
      std::vector<T> dcols(static_cast<std::size_t>(pixels * patch));
      MatMap<T>(dcols.data(), pixels, patch).noalias() = gm * ConstMatMap<T>(w.ptr(), patch, cout).transpose();
      taps([&](Index ob, Index ib, Index wb) {
        axpy(dx.data() + ib, dcols.data() + (ob / cout) * patch + wb / cout, T(1), cin);
      });
    }
  });
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Conv2dParams p) {
  if (x.rank() != 4) throw ConfigError("conv2d: input must be N x H x W x C, got " + shape_str(x.shape()));
  if (w.rank() != 4 || w.dim(0) != w.dim(1))
    throw ConfigError("conv2d: weight must be k x k x Cin/groups x Cout, got " + shape_str(w.shape()));
  if (p.stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (p.padding < 0) throw ConfigError("conv2d: padding must be >= 0");
  if (p.groups < 1) throw ConfigError("conv2d: groups must be >= 1");
  const Index n = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  const Index k = w.dim(0), cout = w.dim(3);
  if (cin % p.groups != 0)
    throw ConfigError("conv2d: input channels " + std::to_string(cin) + " not divisible by groups " + std::to_string(p.groups));
  if (cout % p.groups != 0)
    throw ConfigError("conv2d: output channels " + std::to_string(cout) + " not divisible by groups " + std::to_string(p.groups));
  const Index cin_g = cin / p.groups, cout_g = cout / p.groups;
  if (w.dim(2) != cin_g) throw ConfigError(detail::dim_msg("conv2d", "weight input-channel extent", w.dim(2), cin_g));
  if (b.defined() && b.numel() != cout) throw ConfigError(detail::dim_msg("conv2d", "bias length", b.numel(), cout));
  const Index oh = conv_out_extent(h, k, p.stride, p.padding), ow = conv_out_extent(wd, k, p.stride, p.padding);
  if (oh < 1 || ow < 1)
    throw InputError("conv2d: kernel " + std::to_string(k) + " does not fit input " + shape_str(x.shape()));

  Tensor<T> out(Shape{n, oh, ow, cout});
  const bool depthwise = cin_g == 1 && cout_g == 1;
  const T* xp = x.ptr();
  const T* wp = w.ptr();
  T* op = out.ptr();

  // Visits every (output pixel, kernel tap) pair whose input pixel is in range.
  auto taps = [=](auto&& fn) {
    for (Index in = 0; in < n; ++in)
      for (Index y = 0; y < oh; ++y)
        for (Index xo = 0; xo < ow; ++xo) {
          const Index obase = ((in * oh + y) * ow + xo) * cout;
          for (Index ky = 0; ky < k; ++ky) {
            const Index iy = y * p.stride - p.padding + ky;
            if (iy < 0 || iy >= h) continue;
            for (Index kx = 0; kx < k; ++kx) {
              const Index ix = xo * p.stride - p.padding + kx;
              if (ix < 0 || ix >= wd) continue;
              fn(obase, ((in * h + iy) * wd + ix) * cin, (ky * k + kx) * cin_g * cout);
            }
          }
        }
  };

  if (p.groups == 1 && !depthwise) return detail::dense_conv2d(x, w, b, taps, n * oh * ow, k, cin, cout, out);
  if (depthwise && p.stride == 1)
    return detail::depthwise_conv2d_s1(x, w, b, detail::DepthwiseRows<T>{n, h, wd, cin, k, p.padding, oh, ow}, out);

  if (b.defined())
    for (Index i = 0; i < n * oh * ow; ++i) std::copy_n(b.ptr(), cout, op + i * cout);
  if (depthwise) {
    taps([&](Index ob, Index ib, Index wb) {
      T* o = op + ob;
      const T* xi = xp + ib;
      const T* wk = wp + wb;
      for (Index c = 0; c < cout; ++c) o[c] += xi[c] * wk[c];
    });
  } else {
    taps([&](Index ob, Index ib, Index wb) {
      for (Index g = 0; g < p.groups; ++g)
        for (Index ci = 0; ci < cin_g; ++ci)
          detail::axpy(op + ob + g * cout_g, wp + wb + ci * cout + g * cout_g, xp[ib + g * cin_g + ci], cout_g);
    });
  }

  record_op<T>("conv2d", {x, w, b}, out,
               [x, w, b, taps, depthwise, n, oh, ow, k, cin, cout, cin_g, cout_g, groups = p.groups](std::span<const T> g) mutable {
    auto dx = grad_sink(x);
    auto dw = grad_sink(w);
    auto db = grad_sink(b);
    const T* gp = g.data();
    const T* xp = x.ptr();
    const T* wp = w.ptr();
    if (!db.empty())
      for (Index i = 0; i < n * oh * ow; ++i) detail::axpy(db.data(), gp + i * cout, T(1), cout);
    if (depthwise) {
      taps([&](Index ob, Index ib, Index wb) {
        const T* go = gp + ob;
        if (!dx.empty()) {
          T* d = dx.data() + ib;
          const T* wk = wp + wb;
          for (Index c = 0; c < cout; ++c) d[c] += go[c] * wk[c];
        }
        if (!dw.empty()) {
          T* d = dw.data() + wb;
          const T* xi = xp + ib;
          for (Index c = 0; c < cout; ++c) d[c] += go[c] * xi[c];
        }
      });
      return;
    }
    // Transposed weight so the input-gradient update is a contiguous axpy.
    std::vector<T> wt;
    if (!dx.empty()) {
      wt.resize(static_cast<std::size_t>(k * k * cin_g * cout));
      for (Index t = 0; t < k * k; ++t)
        for (Index ci = 0; ci < cin_g; ++ci)
          for (Index co = 0; co < cout; ++co)
            wt[static_cast<std::size_t>((t * cout + co) * cin_g + ci)] = wp[(t * cin_g + ci) * cout + co];
    }
    taps([&](Index ob, Index ib, Index wb) {
      const Index tap = wb / (cin_g * cout);
      for (Index gi = 0; gi < groups; ++gi) {
        if (!dx.empty()) {
          for (Index co = 0; co < cout_g; ++co) {
            const Index oc = gi * cout_g + co;
            detail::axpy(dx.data() + ib + gi * cin_g, wt.data() + (tap * cout + oc) * cin_g, gp[ob + oc], cin_g);
          }
        }
        if (!dw.empty()) {
          for (Index ci = 0; ci < cin_g; ++ci)
            detail::axpy(dw.data() + wb + ci * cout + gi * cout_g, gp + ob + gi * cout_g, xp[ib + gi * cin_g + ci], cout_g);
        }
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Normalizes each position over the last (channel) axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const Index c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c)
    throw ConfigError(detail::dim_msg("layer_norm", "affine length", gamma.numel(), c));
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be > 0");
  const Index rows = x.numel() / c;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * c;
    T mean = 0;
    for (Index i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<T>(c);
    T var = 0;
    for (Index i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = rs;
    for (Index i = 0; i < c; ++i) {
      const T xh = (xr[i] - mean) * rs;
      xhat[static_cast<std::size_t>(r * c + i)] = xh;
      out[r * c + i] = xh * gamma[i] + beta[i];
    }
  }
  record_op<T>("layer_norm", {x, gamma, beta}, out, [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), rows, c](std::span<const T> g) mutable {
    auto dx = grad_sink(x);
    auto dg = grad_sink(gamma);
    auto dbeta = grad_sink(beta);
    for (Index r = 0; r < rows; ++r) {
      const T* gr = g.data() + r * c;
      const T* xh = xhat.data() + r * c;
      if (!dg.empty())
        for (Index i = 0; i < c; ++i) dg[static_cast<std::size_t>(i)] += gr[i] * xh[i];
      if (!dbeta.empty())
        for (Index i = 0; i < c; ++i) dbeta[static_cast<std::size_t>(i)] += gr[i];
      if (dx.empty()) continue;
      T mean_d = 0, mean_dx = 0;
      for (Index i = 0; i < c; ++i) {
        const T d = gr[i] * gamma[i];
        mean_d += d;
        mean_dx += d * xh[i];
      }
      mean_d /= static_cast<T>(c);
      mean_dx /= static_cast<T>(c);
      const T rs = rstd[static_cast<std::size_t>(r)];
      for (Index i = 0; i < c; ++i)
        dx[static_cast<std::size_t>(r * c + i)] += rs * (gr[i] * gamma[i] - mean_d - xh[i] * mean_dx);
    }
  });
  return out;
}

enum class NormMode { train, eval };

/// Per-channel normalization over N*H*W. In train mode uses batch statistics and
/// updates the running buffers in place (running var stored unbiased).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, NormMode mode, T momentum, T eps) {
  const Index c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c)
    throw ConfigError(detail::dim_msg("batch_norm", "channel parameter length", gamma.numel(), c));
  const Index rows = x.numel() / c;
  Tensor<T> out(x.shape());
  std::vector<T> mean(static_cast<std::size_t>(c), T(0)), rstd(static_cast<std::size_t>(c));
  if (mode == NormMode::train) {
    std::vector<T> var(static_cast<std::size_t>(c), T(0));
    for (Index r = 0; r < rows; ++r)
      for (Index i = 0; i < c; ++i) mean[static_cast<std::size_t>(i)] += x[r * c + i];
    for (auto& m : mean) m /= static_cast<T>(rows);
    for (Index r = 0; r < rows; ++r)
      for (Index i = 0; i < c; ++i) {
        const T d = x[r * c + i] - mean[static_cast<std::size_t>(i)];
        var[static_cast<std::size_t>(i)] += d * d;
      }
    for (Index i = 0; i < c; ++i) {
      const T v = var[static_cast<std::size_t>(i)] / static_cast<T>(rows);
      rstd[static_cast<std::size_t>(i)] = T(1) / std::sqrt(v + eps);
      const T unbiased = rows > 1 ? var[static_cast<std::size_t>(i)] / static_cast<T>(rows - 1) : v;
      running_mean[i] = (T(1) - momentum) * running_mean[i] + momentum * mean[static_cast<std::size_t>(i)];
      running_var[i] = (T(1) - momentum) * running_var[i] + momentum * unbiased;
    }
  } else {
    for (Index i = 0; i < c; ++i) {
      mean[static_cast<std::size_t>(i)] = running_mean[i];
      rstd[static_cast<std::size_t>(i)] = T(1) / std::sqrt(running_var[i] + eps);
    }
  }
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  for (Index r = 0; r < rows; ++r)
    for (Index i = 0; i < c; ++i) {
      const T xh = (x[r * c + i] - mean[static_cast<std::size_t>(i)]) * rstd[static_cast<std::size_t>(i)];
      xhat[static_cast<std::size_t>(r * c + i)] = xh;
      out[r * c + i] = xh * gamma[i] + beta[i];
    }
  const bool batch_stats = mode == NormMode::train;
  record_op<T>("batch_norm", {x, gamma, beta}, out,
               [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), rows, c, batch_stats](std::span<const T> g) mutable {
    auto dx = grad_sink(x);
    auto dg = grad_sink(gamma);
    auto dbeta = grad_sink(beta);
    std::vector<T> sum_d(static_cast<std::size_t>(c), T(0)), sum_dxh(static_cast<std::size_t>(c), T(0));
    for (Index r = 0; r < rows; ++r)
      for (Index i = 0; i < c; ++i) {
        const T gr = g[static_cast<std::size_t>(r * c + i)];
        sum_d[static_cast<std::size_t>(i)] += gr;
        sum_dxh[static_cast<std::size_t>(i)] += gr * xhat[static_cast<std::size_t>(r * c + i)];
      }
    if (!dg.empty())
      for (Index i = 0; i < c; ++i) dg[static_cast<std::size_t>(i)] += sum_dxh[static_cast<std::size_t>(i)];
    if (!dbeta.empty())
      for (Index i = 0; i < c; ++i) dbeta[static_cast<std::size_t>(i)] += sum_d[static_cast<std::size_t>(i)];
    if (dx.empty()) return;
    const T inv_rows = T(1) / static_cast<T>(rows);
    for (Index r = 0; r < rows; ++r)
      for (Index i = 0; i < c; ++i) {
        const std::size_t at = static_cast<std::size_t>(r * c + i);
        const std::size_t ch = static_cast<std::size_t>(i);
        const T scale = gamma[i] * rstd[ch];
        if (batch_stats) {
          dx[at] += scale * (g[at] - sum_d[ch] * inv_rows - xhat[at] * sum_dxh[ch] * inv_rows);
        } else {
          dx[at] += scale * g[at];
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax, pooling, losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw InputError("softmax: axis out of range for shape " + shape_str(x.shape()));
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const Index len = x.dim(axis);
  Tensor<T> out(x.shape());
  for (Index o = 0; o < outer; ++o)
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * len * inner + in;
      T mx = x[base];
      for (Index i = 1; i < len; ++i) mx = std::max(mx, x[base + i * inner]);
      T z = 0;
      for (Index i = 0; i < len; ++i) {
        const T e = std::exp(x[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      for (Index i = 0; i < len; ++i) out[base + i * inner] /= z;
    }
  Tensor<T> y = out;
  record_op<T>("softmax", {x}, out, [x, y, outer, inner, len](std::span<const T> g) mutable {
    auto dx = grad_sink(x);
    if (dx.empty()) return;
    for (Index o = 0; o < outer; ++o)
      for (Index in = 0; in < inner; ++in) {
        const Index base = o * len * inner + in;
        T dot = 0;
        for (Index i = 0; i < len; ++i) dot += g[static_cast<std::size_t>(base + i * inner)] * y[base + i * inner];
        for (Index i = 0; i < len; ++i) {
          const Index at = base + i * inner;
          dx[static_cast<std::size_t>(at)] += y[at] * (g[static_cast<std::size_t>(at)] - dot);
        }
      }
  });
  return out;
}

/// [N, H, W, C] -> [N, C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw InputError("global_avg_pool: expected N x H x W x C, got " + shape_str(x.shape()));
  const Index n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor<T> out(Shape{n, c});
  const T inv = T(1) / static_cast<T>(hw);
  for (Index s = 0; s < n; ++s) {
    T* o = out.ptr() + s * c;
    for (Index p = 0; p < hw; ++p) detail::axpy(o, x.ptr() + (s * hw + p) * c, T(1), c);
    for (Index i = 0; i < c; ++i) o[i] *= inv;
  }
  record_op<T>("global_avg_pool", {x}, out, [x, n, hw, c, inv](std::span<const T> g) mutable {
    auto dx = grad_sink(x);
    if (dx.empty()) return;
    for (Index s = 0; s < n; ++s)
      for (Index p = 0; p < hw; ++p) detail::axpy(dx.data() + (s * hw + p) * c, g.data() + s * c, inv, c);
  });
  return out;
}

/// Mean over the batch of the cross entropy against targets mixing one-hot
/// weight 1 - s with uniform s / K.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, T smoothing) {
  if (logits.rank() != 2) throw InputError("cross_entropy: logits must be N x K, got " + shape_str(logits.shape()));
  const Index n = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n)
    throw InputError(detail::dim_msg("cross_entropy", "label count", static_cast<Index>(labels.size()), n));
  if (!(smoothing >= 0 && smoothing < 1)) throw InputError("cross_entropy: smoothing must lie in [0, 1)");
  for (int l : labels)
    if (l < 0 || l >= k) throw InputError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
  std::vector<T> prob(static_cast<std::size_t>(n * k));
  T loss = 0;
  const T off = smoothing / static_cast<T>(k);
  for (Index s = 0; s < n; ++s) {
    const T* z = logits.ptr() + s * k;
    T mx = z[0];
    for (Index j = 1; j < k; ++j) mx = std::max(mx, z[j]);
    T sum = 0;
    for (Index j = 0; j < k; ++j) sum += std::exp(z[j] - mx);
    const T lse = mx + std::log(sum);
    for (Index j = 0; j < k; ++j) {
      const T logp = z[j] - lse;
      prob[static_cast<std::size_t>(s * k + j)] = std::exp(logp);
      const T target = off + (j == labels[static_cast<std::size_t>(s)] ? T(1) - smoothing : T(0));
      loss -= target * logp;
    }
  }
  Tensor<T> out = Tensor<T>::scalar(loss / static_cast<T>(n));
  record_op<T>("cross_entropy", {logits}, out, [logits, labels, prob = std::move(prob), n, k, smoothing, off](std::span<const T> g) mutable {
    auto d = grad_sink(logits);
    if (d.empty()) return;
    const T s = g[0] / static_cast<T>(n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < k; ++j) {
        const T target = off + (j == labels[static_cast<std::size_t>(i)] ? T(1) - smoothing : T(0));
        d[static_cast<std::size_t>(i * k + j)] += s * (prob[static_cast<std::size_t>(i * k + j)] - target);
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Scaled dot-product attention over packed projections `qkv` [N, T, 3C]
/// (q, k, v contiguous along the last axis, head h owning channels
/// [h*d, (h+1)*d) of each). Returns [N, T, C]. When `probs_out` is given it
/// receives the attention probabilities [N, heads, T, T].
template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, Index heads, T scale, Tensor<T>* probs_out = nullptr) {
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0)
    throw InputError("attention: expected N x T x 3C projections, got " + shape_str(qkv.shape()));
  const Index n = qkv.dim(0), t = qkv.dim(1), c = qkv.dim(2) / 3;
  if (heads < 1 || c % heads != 0)
    throw ConfigError("attention: channels " + std::to_string(c) + " not divisible by heads " + std::to_string(heads));
  const Index d = c / heads, c3 = 3 * c;
  Tensor<T> out(Shape{n, t, c});
  Tensor<T> probs(Shape{n, heads, t, t});
  const T* src = qkv.ptr();
  for (Index s = 0; s < n; ++s)
    for (Index h = 0; h < heads; ++h) {
      T* p = probs.ptr() + ((s * heads + h) * t) * t;
      for (Index i = 0; i < t; ++i) {
        const T* q = src + (s * t + i) * c3 + h * d;
        T* prow = p + i * t;
        T mx = -std::numeric_limits<T>::infinity();
        for (Index j = 0; j < t; ++j) {
          const T* kk = src + (s * t + j) * c3 + c + h * d;
          T dot = 0;
          for (Index e = 0; e < d; ++e) dot += q[e] * kk[e];
          prow[j] = dot * scale;
          mx = std::max(mx, prow[j]);
        }
        T z = 0;
        for (Index j = 0; j < t; ++j) {
          prow[j] = std::exp(prow[j] - mx);
          z += prow[j];
        }
        T* o = out.ptr() + (s * t + i) * c + h * d;
        for (Index j = 0; j < t; ++j) {
          prow[j] /= z;
          detail::axpy(o, src + (s * t + j) * c3 + 2 * c + h * d, prow[j], d);
        }
      }
    }
  if (probs_out != nullptr) *probs_out = probs.clone();
  record_op<T>("attention", {qkv}, out, [qkv, probs, n, t, c, heads, d, c3, scale](std::span<const T> g) mutable {
    auto dq = grad_sink(qkv);
    if (dq.empty()) return;
    const T* src = qkv.ptr();
    std::vector<T> dp(static_cast<std::size_t>(t));
    for (Index s = 0; s < n; ++s)
      for (Index h = 0; h < heads; ++h) {
        const T* p = probs.ptr() + ((s * heads + h) * t) * t;
        for (Index i = 0; i < t; ++i) {
          const T* go = g.data() + (s * t + i) * c + h * d;
          const T* prow = p + i * t;
          // dV_j += P_ij * dO_i ; dP_ij = dO_i . V_j
          T dot = 0;
          for (Index j = 0; j < t; ++j) {
            const T* v = src + (s * t + j) * c3 + 2 * c + h * d;
            T acc = 0;
            for (Index e = 0; e < d; ++e) acc += go[e] * v[e];
            dp[static_cast<std::size_t>(j)] = acc;
            dot += acc * prow[j];
            detail::axpy(dq.data() + (s * t + j) * c3 + 2 * c + h * d, go, prow[j], d);
          }
          const T* q = src + (s * t + i) * c3 + h * d;
          T* dqi = dq.data() + (s * t + i) * c3 + h * d;
          for (Index j = 0; j < t; ++j) {
            const T ds = prow[j] * (dp[static_cast<std::size_t>(j)] - dot) * scale;
            const T* kk = src + (s * t + j) * c3 + c + h * d;
            detail::axpy(dqi, kk, ds, d);
            detail::axpy(dq.data() + (s * t + j) * c3 + c + h * d, q, ds, d);
          }
        }
      }
  });
  return out;
}

}  // namespace smt::ops
