#pragma once

// Differentiable primitives. Feature maps are channel-last: [H×W×C] or
// batched [B×H×W×C]. Every op computes its forward eagerly and, when
// recording, registers a closure that accumulates into input gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "chronotrack/kernels.hpp"
#include "chronotrack/tensor.hpp"

namespace chronotrack {

using detail::record;
using detail::require;

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = a[i] + b[i];
  }
  record<T>("add", out, {a, b}, [a, b, out]() mutable {
    auto g = out.grad();
    for (const Tensor<T>* in : {&a, &b}) {
      if (in->requires_grad()) {
        auto& gi = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          gi[i] += g[i];
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "sub: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = a[i] - b[i];
  }
  record<T>("sub", out, {a, b}, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = a[i] * b[i];
  }
  record<T>("mul", out, {a, b}, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
  return out;
}

// scale * a + shift
template <typename T>
Tensor<T> affine(const Tensor<T>& a, T scale, T shift) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = scale * a[i] + shift;
  }
  record<T>("affine", out, {a}, [a, out, scale]() mutable {
    auto g = out.grad();
    auto& ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return affine(a, s, T(0));
}

// b's shape must be a suffix of a's shape; b is repeated over the leading axes.
template <typename T>
Tensor<T> add_trailing(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  require(sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin()),
          "add_trailing: " + shape_str(sb) + " is not a suffix of " + shape_str(sa));
  Tensor<T> out = Tensor<T>::zeros(sa);
  const std::size_t inner = b.size();
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = a[i] + b[i % inner];
  }
  record<T>("add_trailing", out, {a, b}, [a, b, out, inner]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  record<T>("sum", out, {a}, [a, out]() mutable {
    const T g = out.grad()[0];
    auto& ga = a.grad_buffer();
    for (auto& v : ga) v += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto& o = out.values();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = T(0.5) * a[i] * (T(1) + std::erf(a[i] * inv_sqrt2));
  }
  record<T>("gelu", out, {a}, [a, out, inv_sqrt2]() mutable {
    auto g = out.grad();
    auto& ga = a.grad_buffer();
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = a[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      ga[i] += g[i] * (cdf + x * pdf);
    }
  });
  return out;
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(numel(shape) == a.size(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape), a.values());
  record<T>("reshape", out, {a}, [a, out]() mutable {
    auto g = out.grad();
    auto& ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

// out.shape[i] = a.shape[axes[i]]
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  require(axes.size() == r, "permute: axis list length " + std::to_string(axes.size()) +
                                " does not match rank " + std::to_string(r));
  Shape out_shape(r);
  std::vector<bool> seen(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    require(axes[i] < r && !seen[axes[i]], "permute: invalid axis permutation");
    seen[axes[i]] = true;
    out_shape[i] = a.dim(axes[i]);
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
  // source offset for each destination element
  std::vector<std::size_t> src(a.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[axes[i]];
    src[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[src[i]];
  record<T>("permute", out, {a}, [a, out, src = std::move(src)]() mutable {
    auto g = out.grad();
    auto& ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[src[i]] += g[i];
  });
  return out;
}

// 2-D transpose, the common case of permute.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require(a.rank() == 2, "transpose: expected rank 2, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

// ---------------------------------------------------------------- dense

// [M×K]·[K×N], or batched [B×M×K]·[B×K×N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool batched = a.rank() == 3;
  require((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3),
          "matmul: unsupported ranks " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  const std::size_t B = batched ? a.dim(0) : 1;
  const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
  const std::size_t K2 = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
  require(K == K2 && (!batched || b.dim(0) == B),
          "matmul: inner axes differ, " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(batched ? Shape{B, M, N} : Shape{M, N});
  for (std::size_t i = 0; i < B; ++i) {
    kernels::gemm_nn(M, N, K, a.data().data() + i * M * K, b.data().data() + i * K * N,
                     out.data().data() + i * M * N, false);
  }
  record<T>("matmul", out, {a, b}, [a, b, out, B, M, N, K]() mutable {
    const T* g = out.grad().data();
    if (a.requires_grad()) {
      T* ga = a.grad_buffer().data();
      for (std::size_t i = 0; i < B; ++i)
        kernels::gemm_nt(M, K, N, g + i * M * N, b.data().data() + i * K * N, ga + i * M * K, true);
    }
    if (b.requires_grad()) {
      T* gb = b.grad_buffer().data();
      for (std::size_t i = 0; i < B; ++i)
        kernels::gemm_tn(K, N, M, a.data().data() + i * M * K, g + i * M * N, gb + i * K * N, true);
    }
  });
  return out;
}

// x[...×in] · W[in×out] + b[out]; bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require(x.rank() >= 1 && w.rank() == 2 && x.shape().back() == w.dim(0),
          "linear: input " + shape_str(x.shape()) + " does not match weight " +
              shape_str(w.shape()));
  const std::size_t in = w.dim(0), outd = w.dim(1);
  require(!bias.defined() || bias.shape() == Shape{outd},
          "linear: bias " + (bias.defined() ? shape_str(bias.shape()) : std::string("?")) +
              " does not match output width " + std::to_string(outd));
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  T* o = out.data().data();
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(bias.data().begin(), bias.data().end(), o + r * outd);
  }
  kernels::gemm_nn(rows, outd, in, x.data().data(), w.data().data(), o, true);
  record<T>("linear", out, {x, w, bias}, [x, w, bias, out, rows, in, outd]() mutable {
    const T* g = out.grad().data();
    if (x.requires_grad()) {
      kernels::gemm_nt(rows, in, outd, g, w.data().data(), x.grad_buffer().data(), true);
    }
    if (w.requires_grad()) {
      kernels::gemm_tn(in, outd, rows, x.data().data(), g, w.grad_buffer().data(), true);
    }
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = bias.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < outd; ++j) gb[j] += g[r * outd + j];
    }
  });
  return out;
}

// Softmax of (temperature · x) along the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, T temperature = T(1)) {
  require(x.rank() >= 1, "softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n ? x.size() / n : 0;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto& o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = x.data().data() + r * n;
    T* oi = o.data() + r * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, temperature * xi[j]);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      oi[j] = std::exp(temperature * xi[j] - mx);
      z += oi[j];
    }
    for (std::size_t j = 0; j < n; ++j) oi[j] /= z;
  }
  record<T>("softmax", out, {x}, [x, out, n, rows, temperature]() mutable {
    auto g = out.grad();
    auto& gx = x.grad_buffer();
    const auto& y = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx[r * n + j] += temperature * y[r * n + j] * (g[r * n + j] - dot);
    }
  });
  return out;
}

// Normalizes the last axis; gamma/beta may be undefined (no affine).
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(1e-5)) {
  require(x.rank() >= 1, "layernorm: scalar input");
  const std::size_t n = x.shape().back();
  require(!gamma.defined() || gamma.shape() == Shape{n},
          "layernorm: gamma does not match feature width " + std::to_string(n));
  require(!beta.defined() || beta.shape() == Shape{n},
          "layernorm: beta does not match feature width " + std::to_string(n));
  const std::size_t rows = x.size() / n;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  auto& o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = x.data().data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<T>(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xi[j] - mu) * rstd[r];
      xhat[r * n + j] = h;
      o[r * n + j] = (gamma.defined() ? gamma[j] : T(1)) * h + (beta.defined() ? beta[j] : T(0));
    }
  }
  record<T>("layernorm", out, {x, gamma, beta},
            [x, gamma, beta, out, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)]() mutable {
              auto g = out.grad();
              if (gamma.defined() && gamma.requires_grad()) {
                auto& gg = gamma.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
              }
              if (beta.defined() && beta.requires_grad()) {
                auto& gb = beta.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
              }
              if (x.requires_grad()) {
                auto& gx = x.grad_buffer();
                std::vector<T> dh(n);
                for (std::size_t r = 0; r < rows; ++r) {
                  T m1 = 0, m2 = 0;
                  for (std::size_t j = 0; j < n; ++j) {
                    dh[j] = g[r * n + j] * (gamma.defined() ? gamma[j] : T(1));
                    m1 += dh[j];
                    m2 += dh[j] * xhat[r * n + j];
                  }
                  m1 /= static_cast<T>(n);
                  m2 /= static_cast<T>(n);
                  for (std::size_t j = 0; j < n; ++j)
                    gx[r * n + j] += rstd[r] * (dh[j] - m1 - xhat[r * n + j] * m2);
                }
              }
            });
  return out;
}

// ---------------------------------------------------------------- convolution

struct ConvGeometry {
  std::size_t batch, h, w, cin, kh, kw, cout, stride, pad, oh, ow;
};

// input [H×W×Cin] or [B×H×W×Cin]; weight [kh×kw×Cin×Cout]; cross-correlation.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  require(input.rank() == 3 || input.rank() == 4,
          "conv2d: input must be [H×W×C] or [B×H×W×C], got " + shape_str(input.shape()));
  require(weight.rank() == 4, "conv2d: weight must be [kh×kw×Cin×Cout], got " +
                                  shape_str(weight.shape()));
  const bool batched = input.rank() == 4;
  ConvGeometry g{};
  g.batch = batched ? input.dim(0) : 1;
  g.h = input.dim(batched ? 1 : 0);
  g.w = input.dim(batched ? 2 : 1);
  g.cin = input.dim(batched ? 3 : 2);
  g.kh = weight.dim(0);
  g.kw = weight.dim(1);
  g.cout = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  require(weight.dim(2) == g.cin, "conv2d: channel axis mismatch, input Cin=" +
                                      std::to_string(g.cin) + " weight Cin=" +
                                      std::to_string(weight.dim(2)));
  require(g.kh % 2 == 1 && g.kw % 2 == 1, "conv2d: kernel extents kh, kw must be odd");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(g.h + 2 * padding >= g.kh && g.w + 2 * padding >= g.kw,
          "conv2d: kernel larger than padded input along H/W axes");
  require(!bias.defined() || bias.shape() == Shape{g.cout}, "conv2d: bias axis mismatch");
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  Shape os = batched ? Shape{g.batch, g.oh, g.ow, g.cout} : Shape{g.oh, g.ow, g.cout};
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  T* o = out.data().data();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t oy = 0; oy < g.oh; ++oy)
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        T* op = o + ((b * g.oh + oy) * g.ow + ox) * g.cout;
        if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), op);
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            const T* xp = x + ((b * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)) * g.cin;
            const T* wp = wt + (ky * g.kw + kx) * g.cin * g.cout;
            kernels::gemm_nn<T>(1, g.cout, g.cin, xp, wp, op, true);
          }
        }
      }
  record<T>("conv2d", out, {input, weight, bias}, [input, weight, bias, out, g]() mutable {
    const T* go = out.grad().data();
    const T* x = input.data().data();
    const T* wt = weight.data().data();
    T* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
    T* gw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          const T* gp = go + ((b * g.oh + oy) * g.ow + ox) * g.cout;
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              const std::size_t xoff = ((b * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)) * g.cin;
              const std::size_t woff = (ky * g.kw + kx) * g.cin * g.cout;
              if (gx) kernels::dot_rows<T>(g.cin, g.cout, gp, wt + woff, gx + xoff);
              if (gw) kernels::outer_acc<T>(g.cin, g.cout, x + xoff, gp, gw + woff);
            }
          }
        }
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = bias.grad_buffer();
      const std::size_t rows = g.batch * g.oh * g.ow;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < g.cout; ++c) gb[c] += go[r * g.cout + c];
    }
  });
  return out;
}

// Fractionally-strided convolution, the adjoint of conv2d in its input:
// out[iy·s − p + ky][ix·s − p + kx] += x[iy][ix] · w[ky][kx]. Output extent is
// (H − 1)·s − 2p + kh. weight [kh×kw×Cin×Cout].
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride, std::size_t padding) {
  require(input.rank() == 3 || input.rank() == 4,
          "conv_transpose2d: input must be [H×W×C] or [B×H×W×C], got " + shape_str(input.shape()));
  require(weight.rank() == 4, "conv_transpose2d: weight must be [kh×kw×Cin×Cout]");
  const bool batched = input.rank() == 4;
  ConvGeometry g{};
  g.batch = batched ? input.dim(0) : 1;
  g.h = input.dim(batched ? 1 : 0);
  g.w = input.dim(batched ? 2 : 1);
  g.cin = input.dim(batched ? 3 : 2);
  g.kh = weight.dim(0);
  g.kw = weight.dim(1);
  g.cout = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  require(weight.dim(2) == g.cin, "conv_transpose2d: channel axis mismatch, input Cin=" +
                                      std::to_string(g.cin) + " weight Cin=" +
                                      std::to_string(weight.dim(2)));
  require(stride >= 1, "conv_transpose2d: stride must be >= 1");
  require((g.h - 1) * stride + g.kh > 2 * padding && (g.w - 1) * stride + g.kw > 2 * padding,
          "conv_transpose2d: padding exceeds output extent");
  require(!bias.defined() || bias.shape() == Shape{g.cout}, "conv_transpose2d: bias axis mismatch");
  g.oh = (g.h - 1) * stride + g.kh - 2 * padding;
  g.ow = (g.w - 1) * stride + g.kw - 2 * padding;

  // weight regrouped as [Cin × (kh·kw·Cout)] so one row-vector product per input pixel
  const std::size_t taps = g.kh * g.kw;
  std::vector<T> wr(g.cin * taps * g.cout);
  for (std::size_t t = 0; t < taps; ++t)
    for (std::size_t ci = 0; ci < g.cin; ++ci)
      for (std::size_t co = 0; co < g.cout; ++co)
        wr[(ci * taps + t) * g.cout + co] = weight[(t * g.cin + ci) * g.cout + co];

  Shape os = batched ? Shape{g.batch, g.oh, g.ow, g.cout} : Shape{g.oh, g.ow, g.cout};
  Tensor<T> out = Tensor<T>::zeros(os);
  T* o = out.data().data();
  if (bias.defined()) {
    for (std::size_t r = 0; r < g.batch * g.oh * g.ow; ++r)
      std::copy(bias.data().begin(), bias.data().end(), o + r * g.cout);
  }
  std::vector<T> contrib(taps * g.cout);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t iy = 0; iy < g.h; ++iy)
      for (std::size_t ix = 0; ix < g.w; ++ix) {
        const T* xp = input.data().data() + ((b * g.h + iy) * g.w + ix) * g.cin;
        kernels::gemm_nn<T>(1, taps * g.cout, g.cin, xp, wr.data(), contrib.data(), false);
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(g.oh)) continue;
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(g.ow)) continue;
            T* op = o + ((b * g.oh + static_cast<std::size_t>(oy)) * g.ow + static_cast<std::size_t>(ox)) * g.cout;
            const T* cp = contrib.data() + (ky * g.kw + kx) * g.cout;
            for (std::size_t co = 0; co < g.cout; ++co) op[co] += cp[co];
          }
        }
      }
  record<T>("conv_transpose2d", out, {input, weight, bias},
            [input, weight, bias, out, g, wr = std::move(wr)]() mutable {
              const T* go = out.grad().data();
              const std::size_t taps = g.kh * g.kw;
              T* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
              std::vector<T> gwr(weight.requires_grad() ? wr.size() : 0, T(0));
              std::vector<T> gathered(taps * g.cout);
              for (std::size_t b = 0; b < g.batch; ++b)
                for (std::size_t iy = 0; iy < g.h; ++iy)
                  for (std::size_t ix = 0; ix < g.w; ++ix) {
                    std::fill(gathered.begin(), gathered.end(), T(0));
                    for (std::size_t ky = 0; ky < g.kh; ++ky) {
                      const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                      if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(g.oh)) continue;
                      for (std::size_t kx = 0; kx < g.kw; ++kx) {
                        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(g.ow)) continue;
                        const T* gp = go + ((b * g.oh + static_cast<std::size_t>(oy)) * g.ow + static_cast<std::size_t>(ox)) * g.cout;
                        std::copy(gp, gp + g.cout, gathered.data() + (ky * g.kw + kx) * g.cout);
                      }
                    }
                    const std::size_t xoff = ((b * g.h + iy) * g.w + ix) * g.cin;
                    if (gx) kernels::dot_rows<T>(g.cin, taps * g.cout, gathered.data(), wr.data(), gx + xoff);
                    if (!gwr.empty())
                      kernels::outer_acc<T>(g.cin, taps * g.cout, input.data().data() + xoff, gathered.data(), gwr.data());
                  }
              if (!gwr.empty()) {
                auto& gw = weight.grad_buffer();
                for (std::size_t t = 0; t < taps; ++t)
                  for (std::size_t ci = 0; ci < g.cin; ++ci)
                    for (std::size_t co = 0; co < g.cout; ++co)
                      gw[(t * g.cin + ci) * g.cout + co] += gwr[(ci * taps + t) * g.cout + co];
              }
              if (bias.defined() && bias.requires_grad()) {
                auto& gb = bias.grad_buffer();
                for (std::size_t r = 0; r < g.batch * g.oh * g.ow; ++r)
                  for (std::size_t c = 0; c < g.cout; ++c) gb[c] += go[r * g.cout + c];
              }
            });
  return out;
}

// ---------------------------------------------------------------- sampling

struct SamplePoint {
  std::size_t t;
  double gx;
  double gy;
};

namespace detail {

struct BilinearTaps {
  std::size_t idx[4];
  double w[4];
};

// Clamps (gx, gy) to the grid and returns the four neighbours with weights.
inline BilinearTaps bilinear_taps(std::size_t h, std::size_t w, double gx, double gy) {
  if (!std::isfinite(gx) || !std::isfinite(gy)) {
    throw ArgumentError("bilinear sampling at non-finite coordinate");
  }
  gx = std::clamp(gx, 0.0, static_cast<double>(w - 1));
  gy = std::clamp(gy, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(gx));
  const auto y0 = static_cast<std::size_t>(std::floor(gy));
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const double fx = gx - static_cast<double>(x0);
  const double fy = gy - static_cast<double>(y0);
  return {{y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1},
          {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy}};
}

}  // namespace detail

// features [T×H×W×C]; one bilinear sample per point -> [Q×C]
template <typename T>
Tensor<T> sample_points(const Tensor<T>& features, const std::vector<SamplePoint>& points) {
  require(features.rank() == 4, "sample_points: features must be [T×H×W×C], got " +
                                    shape_str(features.shape()));
  const std::size_t nt = features.dim(0), h = features.dim(1), w = features.dim(2),
                    c = features.dim(3);
  std::vector<detail::BilinearTaps> taps;
  taps.reserve(points.size());
  for (const auto& p : points) {
    if (p.t >= nt) throw ArgumentError("sample_points: frame index out of range");
    auto tp = detail::bilinear_taps(h, w, p.gx, p.gy);
    for (auto& i : tp.idx) i += p.t * h * w;
    taps.push_back(tp);
  }
  Tensor<T> out = Tensor<T>::zeros({points.size(), c});
  auto& o = out.values();
  const auto& f = features.values();
  for (std::size_t q = 0; q < taps.size(); ++q)
    for (int k = 0; k < 4; ++k) {
      const T wk = static_cast<T>(taps[q].w[k]);
      const T* src = f.data() + taps[q].idx[k] * c;
      for (std::size_t j = 0; j < c; ++j) o[q * c + j] += wk * src[j];
    }
  record<T>("sample_points", out, {features}, [features, out, c, taps = std::move(taps)]() mutable {
    auto g = out.grad();
    auto& gf = features.grad_buffer();
    for (std::size_t q = 0; q < taps.size(); ++q)
      for (int k = 0; k < 4; ++k) {
        const T wk = static_cast<T>(taps[q].w[k]);
        T* dst = gf.data() + taps[q].idx[k] * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += wk * g[q * c + j];
      }
  });
  return out;
}

// feature [H×W×C] sampled at grid coordinate (x, y) -> [C]
template <typename T>
Tensor<T> bilinear_sample2d(const Tensor<T>& feature, double x, double y) {
  require(feature.rank() == 3, "bilinear_sample2d: feature must be [H×W×C], got " +
                                   shape_str(feature.shape()));
  Shape s4{1, feature.dim(0), feature.dim(1), feature.dim(2)};
  Tensor<T> f4 = reshape(feature, s4);
  return reshape(sample_points(f4, {{0, x, y}}), Shape{feature.dim(2)});
}

// ---------------------------------------------------------------- attention

// Multi-head self-attention within each batch item. qkv [B×N×3C] laid out as
// [q | k | v] along the last axis, heads split C evenly -> [B×N×C].
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& qkv, std::size_t heads) {
  require(qkv.rank() == 3 && qkv.dim(2) % 3 == 0, "multihead_attention: expected [B×N×3C], got " +
                                                      shape_str(qkv.shape()));
  const std::size_t B = qkv.dim(0), N = qkv.dim(1), C = qkv.dim(2) / 3;
  require(heads >= 1 && C % heads == 0, "multihead_attention: channels not divisible by heads");
  const std::size_t d = C / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> out = Tensor<T>::zeros({B, N, C});
  std::vector<T> probs(B * heads * N * N);
  std::vector<T> q(N * d), k(N * d), v(N * d), o(N * d);
  const T* src = qkv.data().data();
  auto gather = [&](std::size_t b, std::size_t h, std::size_t part, std::vector<T>& dst) {
    for (std::size_t i = 0; i < N; ++i) {
      const T* row = src + (b * N + i) * 3 * C + part * C + h * d;
      std::copy(row, row + d, dst.data() + i * d);
    }
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      gather(b, h, 0, q);
      gather(b, h, 1, k);
      gather(b, h, 2, v);
      T* p = probs.data() + (b * heads + h) * N * N;
      kernels::gemm_nt(N, N, d, q.data(), k.data(), p, false);
      for (std::size_t i = 0; i < N; ++i) {
        T* row = p + i * N;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < N; ++j) {
          row[j] *= sc;
          mx = std::max(mx, row[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < N; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < N; ++j) row[j] /= z;
      }
      kernels::gemm_nn(N, d, N, p, v.data(), o.data(), false);
      for (std::size_t i = 0; i < N; ++i)
        std::copy(o.data() + i * d, o.data() + (i + 1) * d, out.data().data() + (b * N + i) * C + h * d);
    }
  record<T>("multihead_attention", out, {qkv},
            [qkv, out, B, N, C, heads, d, sc, probs = std::move(probs)]() mutable {
              const T* src = qkv.data().data();
              const T* go = out.grad().data();
              T* gsrc = qkv.grad_buffer().data();
              std::vector<T> q(N * d), k(N * d), v(N * d), dout(N * d), dp(N * N), dq(N * d),
                  dk(N * d), dv(N * d);
              for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < heads; ++h) {
                  for (std::size_t i = 0; i < N; ++i) {
                    const T* row = src + (b * N + i) * 3 * C + h * d;
                    std::copy(row, row + d, q.data() + i * d);
                    std::copy(row + C, row + C + d, k.data() + i * d);
                    std::copy(row + 2 * C, row + 2 * C + d, v.data() + i * d);
                    const T* grow = go + (b * N + i) * C + h * d;
                    std::copy(grow, grow + d, dout.data() + i * d);
                  }
                  const T* p = probs.data() + (b * heads + h) * N * N;
                  kernels::gemm_nt(N, N, d, dout.data(), v.data(), dp.data(), false);
                  kernels::gemm_tn(N, d, N, p, dout.data(), dv.data(), false);
                  for (std::size_t i = 0; i < N; ++i) {
                    T dot = 0;
                    for (std::size_t j = 0; j < N; ++j) dot += dp[i * N + j] * p[i * N + j];
                    for (std::size_t j = 0; j < N; ++j)
                      dp[i * N + j] = sc * p[i * N + j] * (dp[i * N + j] - dot);
                  }
                  kernels::gemm_nn(N, d, N, dp.data(), k.data(), dq.data(), false);
                  kernels::gemm_tn(N, d, N, dp.data(), q.data(), dk.data(), false);
                  for (std::size_t i = 0; i < N; ++i) {
                    T* row = gsrc + (b * N + i) * 3 * C + h * d;
                    for (std::size_t j = 0; j < d; ++j) {
                      row[j] += dq[i * d + j];
                      row[C + j] += dk[i * d + j];
                      row[2 * C + j] += dv[i * d + j];
                    }
                  }
                }
            });
  return out;
}

// Per-location attention along time. q, k, v [T×H×W×C]; frame t attends to
// frames t+n, n ∈ [−radius, radius], truncated at the clip boundaries. Logits
// are q·k/√C plus bias[n + radius] when a bias of length 2·radius+1 is given.
template <typename T>
Tensor<T> temporal_window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                    std::size_t radius, const Tensor<T>& bias = {}) {
  require(q.rank() == 4 && q.shape() == k.shape() && q.shape() == v.shape(),
          "temporal_window_attention: q, k, v must share shape [T×H×W×C]");
  const std::size_t win = 2 * radius + 1;
  require(!bias.defined() || bias.shape() == Shape{win},
          "temporal_window_attention: bias must have length 2·radius+1");
  const std::size_t nt = q.dim(0), locs = q.dim(1) * q.dim(2), c = q.dim(3);
  const T sc = T(1) / std::sqrt(static_cast<T>(c));
  Tensor<T> out = Tensor<T>::zeros(q.shape());
  std::vector<T> alpha(nt * locs * win, T(0));
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  T* od = out.data().data();
  const auto r = static_cast<std::ptrdiff_t>(radius);
  for (std::size_t t = 0; t < nt; ++t) {
    const std::size_t lo = t >= radius ? t - radius : 0;
    const std::size_t hi = std::min(nt - 1, t + radius);
    for (std::size_t l = 0; l < locs; ++l) {
      const T* qp = qd + (t * locs + l) * c;
      T* a = alpha.data() + (t * locs + l) * win;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t s = lo; s <= hi; ++s) {
        const std::size_t n = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(s) - static_cast<std::ptrdiff_t>(t) + r);
        const T* kp = kd + (s * locs + l) * c;
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += qp[j] * kp[j];
        a[n] = dot * sc + (bias.defined() ? bias[n] : T(0));
        mx = std::max(mx, a[n]);
      }
      T z = 0;
      for (std::size_t s = lo; s <= hi; ++s) {
        const std::size_t n = s + radius - t;
        a[n] = std::exp(a[n] - mx);
        z += a[n];
      }
      T* op = od + (t * locs + l) * c;
      for (std::size_t s = lo; s <= hi; ++s) {
        const std::size_t n = s + radius - t;
        a[n] /= z;
        const T* vp = vd + (s * locs + l) * c;
        for (std::size_t j = 0; j < c; ++j) op[j] += a[n] * vp[j];
      }
    }
  }
  record<T>("temporal_window_attention", out, {q, k, v, bias},
            [q, k, v, bias, out, nt, locs, c, radius, win, sc, alpha = std::move(alpha)]() mutable {
              const T* go = out.grad().data();
              const T* qd = q.data().data();
              const T* kd = k.data().data();
              const T* vd = v.data().data();
              T* gq = q.requires_grad() ? q.grad_buffer().data() : nullptr;
              T* gk = k.requires_grad() ? k.grad_buffer().data() : nullptr;
              T* gv = v.requires_grad() ? v.grad_buffer().data() : nullptr;
              T* gb = bias.defined() && bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
              std::vector<T> ds(win);
              for (std::size_t t = 0; t < nt; ++t) {
                const std::size_t lo = t >= radius ? t - radius : 0;
                const std::size_t hi = std::min(nt - 1, t + radius);
                for (std::size_t l = 0; l < locs; ++l) {
                  const T* a = alpha.data() + (t * locs + l) * win;
                  const T* gp = go + (t * locs + l) * c;
                  T dot = 0;
                  for (std::size_t s = lo; s <= hi; ++s) {
                    const std::size_t n = s + radius - t;
                    const T* vp = vd + (s * locs + l) * c;
                    T da = 0;
                    for (std::size_t j = 0; j < c; ++j) da += gp[j] * vp[j];
                    ds[n] = da;
                    dot += da * a[n];
                    if (gv) {
                      T* dv = gv + (s * locs + l) * c;
                      for (std::size_t j = 0; j < c; ++j) dv[j] += a[n] * gp[j];
                    }
                  }
                  const T* qp = qd + (t * locs + l) * c;
                  for (std::size_t s = lo; s <= hi; ++s) {
                    const std::size_t n = s + radius - t;
                    const T dlogit = a[n] * (ds[n] - dot);
                    if (gb) gb[n] += dlogit;
                    if (gq) {
                      const T* kp = kd + (s * locs + l) * c;
                      T* dq = gq + (t * locs + l) * c;
                      for (std::size_t j = 0; j < c; ++j) dq[j] += dlogit * sc * kp[j];
                    }
                    if (gk) {
                      T* dk = gk + (s * locs + l) * c;
                      for (std::size_t j = 0; j < c; ++j) dk[j] += dlogit * sc * qp[j];
                    }
                  }
                }
              }
            });
  return out;
}

// Attention weights only, same conventions as temporal_window_attention:
// [T×H×W×(2r+1)], zeros outside the truncated window. Not differentiable.
template <typename T>
std::vector<T> temporal_window_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t radius,
                                       const Tensor<T>& bias = {}) {
  require(q.rank() == 4 && q.shape() == k.shape(), "temporal_window_weights: shape mismatch");
  const std::size_t win = 2 * radius + 1;
  const std::size_t nt = q.dim(0), locs = q.dim(1) * q.dim(2), c = q.dim(3);
  const T sc = T(1) / std::sqrt(static_cast<T>(c));
  std::vector<T> alpha(nt * locs * win, T(0));
  for (std::size_t t = 0; t < nt; ++t) {
    const std::size_t lo = t >= radius ? t - radius : 0;
    const std::size_t hi = std::min(nt - 1, t + radius);
    for (std::size_t l = 0; l < locs; ++l) {
      T* a = alpha.data() + (t * locs + l) * win;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t s = lo; s <= hi; ++s) {
        const std::size_t n = s + radius - t;
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += q[(t * locs + l) * c + j] * k[(s * locs + l) * c + j];
        a[n] = dot * sc + (bias.defined() ? bias[n] : T(0));
        mx = std::max(mx, a[n]);
      }
      T z = 0;
      for (std::size_t s = lo; s <= hi; ++s) {
        a[s + radius - t] = std::exp(a[s + radius - t] - mx);
        z += a[s + radius - t];
      }
      for (std::size_t s = lo; s <= hi; ++s) a[s + radius - t] /= z;
    }
  }
  return alpha;
}

// Depthwise convolution along time with zero padding. x [T×H×W×C],
// w [N×C] (N odd), b [C].
template <typename T>
Tensor<T> temporal_conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.rank() == 4 && w.rank() == 2 && w.dim(1) == x.dim(3) && w.dim(0) % 2 == 1,
          "temporal_conv1d: expected x [T×H×W×C], w [N×C] with N odd, got " +
              shape_str(x.shape()) + ", " + shape_str(w.shape()));
  require(!b.defined() || b.shape() == Shape{x.dim(3)}, "temporal_conv1d: bias axis mismatch");
  const std::size_t nt = x.dim(0), locs = x.dim(1) * x.dim(2), c = x.dim(3), n = w.dim(0);
  const std::size_t r = n / 2;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  T* o = out.data().data();
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t l = 0; l < locs; ++l) {
      T* op = o + (t * locs + l) * c;
      if (b.defined()) std::copy(b.data().begin(), b.data().end(), op);
      for (std::size_t i = 0; i < n; ++i) {
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + i) - static_cast<std::ptrdiff_t>(r);
        if (s < 0 || s >= static_cast<std::ptrdiff_t>(nt)) continue;
        const T* xp = x.data().data() + (static_cast<std::size_t>(s) * locs + l) * c;
        const T* wp = w.data().data() + i * c;
        for (std::size_t j = 0; j < c; ++j) op[j] += wp[j] * xp[j];
      }
    }
  record<T>("temporal_conv1d", out, {x, w, b}, [x, w, b, out, nt, locs, c, n, r]() mutable {
    const T* go = out.grad().data();
    T* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
    T* gw = w.requires_grad() ? w.grad_buffer().data() : nullptr;
    for (std::size_t t = 0; t < nt; ++t)
      for (std::size_t l = 0; l < locs; ++l) {
        const T* gp = go + (t * locs + l) * c;
        for (std::size_t i = 0; i < n; ++i) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + i) - static_cast<std::ptrdiff_t>(r);
          if (s < 0 || s >= static_cast<std::ptrdiff_t>(nt)) continue;
          const std::size_t xoff = (static_cast<std::size_t>(s) * locs + l) * c;
          for (std::size_t j = 0; j < c; ++j) {
            if (gx) gx[xoff + j] += w[i * c + j] * gp[j];
            if (gw) gw[i * c + j] += x[xoff + j] * gp[j];
          }
        }
      }
    if (b.defined() && b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t r2 = 0; r2 < nt * locs; ++r2)
        for (std::size_t j = 0; j < c; ++j) gb[j] += go[r2 * c + j];
    }
  });
  return out;
}

// Spatio-temporal convolution, stride 1, "same" zero padding on every axis.
// x [T×H×W×Cin], w [kt×kh×kw×Cin×Cout] with odd extents, b [Cout].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.rank() == 4 && w.rank() == 5 && w.dim(3) == x.dim(3),
          "conv3d: expected x [T×H×W×Cin], w [kt×kh×kw×Cin×Cout], got " + shape_str(x.shape()) +
              ", " + shape_str(w.shape()));
  require(w.dim(0) % 2 == 1 && w.dim(1) % 2 == 1 && w.dim(2) % 2 == 1,
          "conv3d: kernel extents must be odd");
  const std::size_t nt = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  const std::size_t kt = w.dim(0), kh = w.dim(1), kw = w.dim(2), cout = w.dim(4);
  require(!b.defined() || b.shape() == Shape{cout}, "conv3d: bias axis mismatch");
  const auto rt = static_cast<std::ptrdiff_t>(kt / 2), ry = static_cast<std::ptrdiff_t>(kh / 2),
             rx = static_cast<std::ptrdiff_t>(kw / 2);
  Tensor<T> out = Tensor<T>::zeros({nt, h, wd, cout});
  auto for_taps = [=](auto&& fn) {
    for (std::size_t t = 0; t < nt; ++t)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < wd; ++xx) {
          const std::size_t ooff = ((t * h + y) * wd + xx) * cout;
          for (std::size_t it = 0; it < kt; ++it) {
            const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(t + it) - rt;
            if (st < 0 || st >= static_cast<std::ptrdiff_t>(nt)) continue;
            for (std::size_t iy = 0; iy < kh; ++iy) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + iy) - ry;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t ix = 0; ix < kw; ++ix) {
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + ix) - rx;
                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
                const std::size_t xoff =
                    ((static_cast<std::size_t>(st) * h + static_cast<std::size_t>(sy)) * wd +
                     static_cast<std::size_t>(sx)) * cin;
                const std::size_t woff = ((it * kh + iy) * kw + ix) * cin * cout;
                fn(ooff, xoff, woff);
              }
            }
          }
        }
  };
  T* o = out.data().data();
  if (b.defined()) {
    for (std::size_t r = 0; r < nt * h * wd; ++r) std::copy(b.data().begin(), b.data().end(), o + r * cout);
  }
  for_taps([&](std::size_t ooff, std::size_t xoff, std::size_t woff) {
    kernels::gemm_nn<T>(1, cout, cin, x.data().data() + xoff, w.data().data() + woff, o + ooff, true);
  });
  record<T>("conv3d", out, {x, w, b}, [x, w, b, out, for_taps, nt, h, wd, cin, cout]() mutable {
    const T* go = out.grad().data();
    T* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
    T* gw = w.requires_grad() ? w.grad_buffer().data() : nullptr;
    for_taps([&](std::size_t ooff, std::size_t xoff, std::size_t woff) {
      if (gx) kernels::dot_rows<T>(cin, cout, go + ooff, w.data().data() + woff, gx + xoff);
      if (gw) kernels::outer_acc<T>(cin, cout, x.data().data() + xoff, go + ooff, gw + woff);
    });
    if (b.defined() && b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t r = 0; r < nt * h * wd; ++r)
        for (std::size_t j = 0; j < cout; ++j) gb[j] += go[r * cout + j];
    }
  });
  return out;
}

}  // namespace chronotrack
