#include "bvit/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "bvit/error.hpp"
#include "bvit/kernels/kernels.hpp"

namespace bvit::nn {
namespace {

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw ShapeError(std::string(op) + ": " + what);
}

bool wants_grad(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

// ---------------------------------------------------------------- im2col

struct ConvDims {
  int c, h, w;
  int kh, kw;
  ConvGeometry g;
  int ho, wo;
  int rows() const { return c * kh * kw; }
  int cols() const { return ho * wo; }
};

// Fills col (rows x (q1-q0)) for output pixels [q0, q1).
void im2col(const float* x, const ConvDims& d, int q0, int q1, float* col) {
  const int qn = q1 - q0;
  int r = 0;
  for (int c = 0; c < d.c; ++c) {
    const float* xc = x + static_cast<std::ptrdiff_t>(c) * d.h * d.w;
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx, ++r) {
        float* dst = col + static_cast<std::ptrdiff_t>(r) * qn;
        int oy = q0 / d.wo;
        int ox = q0 % d.wo;
        const int dy = ky * d.g.dilation - d.g.padding;
        const int dx = kx * d.g.dilation - d.g.padding;
        for (int q = 0; q < qn; ++q) {
          const int iy = oy * d.g.stride + dy;
          const int ix = ox * d.g.stride + dx;
          dst[q] = (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) ? xc[iy * d.w + ix] : 0.0f;
          if (++ox == d.wo) {
            ox = 0;
            ++oy;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvDims& d, int q0, int q1, float* dx) {
  const int qn = q1 - q0;
  int r = 0;
  for (int c = 0; c < d.c; ++c) {
    float* dxc = dx + static_cast<std::ptrdiff_t>(c) * d.h * d.w;
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx, ++r) {
        const float* src = col + static_cast<std::ptrdiff_t>(r) * qn;
        int oy = q0 / d.wo;
        int ox = q0 % d.wo;
        const int dy = ky * d.g.dilation - d.g.padding;
        const int ddx = kx * d.g.dilation - d.g.padding;
        for (int q = 0; q < qn; ++q) {
          const int iy = oy * d.g.stride + dy;
          const int ix = ox * d.g.stride + ddx;
          if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) dxc[iy * d.w + ix] += src[q];
          if (++ox == d.wo) {
            ox = 0;
            ++oy;
          }
        }
      }
    }
  }
}

int col_chunk(const ConvDims& d) {
  constexpr std::int64_t kBudget = 1 << 21;  // floats per im2col buffer
  const std::int64_t per = std::max<std::int64_t>(1, kBudget / std::max(1, d.rows()));
  return static_cast<int>(std::clamp<std::int64_t>(per, 16, d.cols()));
}

std::vector<float>& scratch(int slot) {
  thread_local std::vector<float> buffers[2];
  return buffers[slot];
}

}  // namespace

int conv_output_size(int in, int kernel, const ConvGeometry& g) {
  return (in + 2 * g.padding - g.dilation * (kernel - 1) - 1) / g.stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g) {
  require(x.ndim() == 4, "conv2d", "input must be NCHW, got " + shape_str(x.shape()));
  require(weight.ndim() == 4, "conv2d", "weight must be OxCxkhxkw");
  require(x.dim(1) == weight.dim(1), "conv2d",
          "input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
              std::to_string(weight.dim(1)));
  const int n = x.dim(0);
  const int o = weight.dim(0);
  ConvDims d{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), g, 0, 0};
  d.ho = conv_output_size(d.h, d.kh, g);
  d.wo = conv_output_size(d.w, d.kw, g);
  require(d.ho > 0 && d.wo > 0, "conv2d", "empty output for input " + shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == o, "conv2d", "bias size mismatch");

  const bool pointwise = d.kh == 1 && d.kw == 1 && g.stride == 1 && g.padding == 0;
  const int k = d.rows();
  const int p = d.cols();
  const std::ptrdiff_t in_stride = static_cast<std::ptrdiff_t>(d.c) * d.h * d.w;
  const std::ptrdiff_t out_stride = static_cast<std::ptrdiff_t>(o) * p;

  std::vector<float> out(static_cast<std::size_t>(n) * out_stride);
  const float* wv = weight.data();
  const int chunk = col_chunk(d);
  auto& col = scratch(0);
  for (int b = 0; b < n; ++b) {
    const float* xn = x.data() + b * in_stride;
    float* yn = out.data() + b * out_stride;
    if (pointwise) {
      kernels::gemm(false, false, o, p, k, 1.0f, wv, k, xn, p, 0.0f, yn, p);
    } else {
      for (int q0 = 0; q0 < p; q0 += chunk) {
        const int q1 = std::min(p, q0 + chunk);
        const int qn = q1 - q0;
        col.resize(static_cast<std::size_t>(k) * qn);
        im2col(xn, d, q0, q1, col.data());
        kernels::gemm(false, false, o, qn, k, 1.0f, wv, k, col.data(), qn, 0.0f, yn + q0, p);
      }
    }
    if (has_bias) {
      for (int oc = 0; oc < o; ++oc) {
        float* row = yn + static_cast<std::ptrdiff_t>(oc) * p;
        const float bv = bias.data()[oc];
        for (int q = 0; q < p; ++q) row[q] += bv;
      }
    }
  }

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(
      {n, o, d.ho, d.wo}, std::move(out), inputs,
      [d, n, o, k, p, pointwise, chunk, has_bias, in_stride, out_stride](Node& self) {
        auto& xin = self.inputs[0];
        auto& win = self.inputs[1];
        const float* dy = self.grad.data();
        const float* wv = win->value.data();
        float* dw = wants_grad(win) ? win->ensure_grad().data() : nullptr;
        float* dx = wants_grad(xin) ? xin->ensure_grad().data() : nullptr;
        auto& col = scratch(0);
        auto& dcol = scratch(1);
        for (int b = 0; b < n; ++b) {
          const float* xn = xin->value.data() + b * in_stride;
          const float* dyn = dy + b * out_stride;
          if (pointwise) {
            if (dw) kernels::gemm(false, true, o, k, p, 1.0f, dyn, p, xn, p, 1.0f, dw, k);
            if (dx) kernels::gemm(true, false, k, p, o, 1.0f, wv, k, dyn, p, 1.0f, dx + b * in_stride, p);
            continue;
          }
          for (int q0 = 0; q0 < p; q0 += chunk) {
            const int q1 = std::min(p, q0 + chunk);
            const int qn = q1 - q0;
            if (dw) {
              col.resize(static_cast<std::size_t>(k) * qn);
              im2col(xn, d, q0, q1, col.data());
              kernels::gemm(false, true, o, k, qn, 1.0f, dyn + q0, p, col.data(), qn, 1.0f, dw, k);
            }
            if (dx) {
              dcol.resize(static_cast<std::size_t>(k) * qn);
              kernels::gemm(true, false, k, qn, o, 1.0f, wv, k, dyn + q0, p, 0.0f, dcol.data(), qn);
              col2im_add(dcol.data(), d, q0, q1, dx + b * in_stride);
            }
          }
        }
        if (has_bias && wants_grad(self.inputs[2])) {
          float* db = self.inputs[2]->ensure_grad().data();
          for (int b = 0; b < n; ++b) {
            for (int oc = 0; oc < o; ++oc) {
              const float* row = dy + b * out_stride + static_cast<std::ptrdiff_t>(oc) * p;
              double s = 0.0;
              for (int q = 0; q < p; ++q) s += row[q];
              db[oc] += static_cast<float>(s);
            }
          }
        }
      });
}

// ---------------------------------------------------------------- normalization

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps) {
  require(x.ndim() >= 2, "group_norm", "input must be N x C x ...");
  const int n = x.dim(0);
  const int c = x.dim(1);
  require(groups > 0 && c % groups == 0, "group_norm",
          std::to_string(c) + " channels not divisible into " + std::to_string(groups) + " groups");
  require(gamma.numel() == c && beta.numel() == c, "group_norm", "affine size mismatch");
  const std::int64_t spatial = x.numel() / (static_cast<std::int64_t>(n) * c);
  const int cpg = c / groups;
  const std::int64_t m = spatial * cpg;

  std::vector<float> out(x.values().begin(), x.values().end());
  std::vector<float> mean(static_cast<std::size_t>(n) * groups);
  std::vector<float> rstd(mean.size());
  const float* xv = x.data();
  for (int b = 0; b < n; ++b) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * c + gi * cpg) * spatial;
      double s = 0.0, s2 = 0.0;
      for (std::int64_t i = 0; i < m; ++i) {
        s += xv[base + i];
      }
      const double mu = s / static_cast<double>(m);
      for (std::int64_t i = 0; i < m; ++i) {
        const double dv = xv[base + i] - mu;
        s2 += dv * dv;
      }
      const double var = s2 / static_cast<double>(m);
      const float r = static_cast<float>(1.0 / std::sqrt(var + eps));
      mean[static_cast<std::size_t>(b) * groups + gi] = static_cast<float>(mu);
      rstd[static_cast<std::size_t>(b) * groups + gi] = r;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = gi * cpg + cc;
        const float ga = gamma.data()[ch];
        const float be = beta.data()[ch];
        float* o = out.data() + base + cc * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
          o[i] = (o[i] - static_cast<float>(mu)) * r * ga + be;
        }
      }
    }
  }

  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, c, groups, cpg, spatial, m, mean = std::move(mean), rstd = std::move(rstd)](Node& self) {
        auto& xin = self.inputs[0];
        auto& gin = self.inputs[1];
        auto& bin = self.inputs[2];
        const float* xv = xin->value.data();
        const float* dy = self.grad.data();
        const float* ga = gin->value.data();
        float* dx = wants_grad(xin) ? xin->ensure_grad().data() : nullptr;
        float* dg = wants_grad(gin) ? gin->ensure_grad().data() : nullptr;
        float* db = wants_grad(bin) ? bin->ensure_grad().data() : nullptr;
        for (int b = 0; b < n; ++b) {
          for (int gi = 0; gi < groups; ++gi) {
            const std::size_t gidx = static_cast<std::size_t>(b) * groups + gi;
            const float mu = mean[gidx];
            const float r = rstd[gidx];
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * c + gi * cpg) * spatial;
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int cc = 0; cc < cpg; ++cc) {
              const int ch = gi * cpg + cc;
              double sdy = 0.0, sdy_xhat = 0.0;
              for (std::int64_t i = 0; i < spatial; ++i) {
                const std::ptrdiff_t idx = base + cc * spatial + i;
                const double xhat = (xv[idx] - mu) * r;
                sdy += dy[idx];
                sdy_xhat += dy[idx] * xhat;
              }
              if (dg) dg[ch] += static_cast<float>(sdy_xhat);
              if (db) db[ch] += static_cast<float>(sdy);
              sum_dxhat += sdy * ga[ch];
              sum_dxhat_xhat += sdy_xhat * ga[ch];
            }
            if (!dx) continue;
            const double mean_dxhat = sum_dxhat / static_cast<double>(m);
            const double mean_dxhat_xhat = sum_dxhat_xhat / static_cast<double>(m);
            for (int cc = 0; cc < cpg; ++cc) {
              const int ch = gi * cpg + cc;
              for (std::int64_t i = 0; i < spatial; ++i) {
                const std::ptrdiff_t idx = base + cc * spatial + i;
                const double xhat = (xv[idx] - mu) * r;
                dx[idx] += static_cast<float>(
                    r * (dy[idx] * ga[ch] - mean_dxhat - xhat * mean_dxhat_xhat));
              }
            }
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int c = x.dim(-1);
  require(gamma.numel() == c && beta.numel() == c, "layer_norm", "affine size mismatch");
  const std::int64_t rows = x.numel() / c;
  std::vector<float> out(static_cast<std::size_t>(x.numel()));
  std::vector<float> mean(static_cast<std::size_t>(rows));
  std::vector<float> rstd(static_cast<std::size_t>(rows));
  const float* xv = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = xv + r * c;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < c; ++i) s += xr[i];
    const double mu = s / c;
    for (int i = 0; i < c; ++i) s2 += (xr[i] - mu) * (xr[i] - mu);
    const float rs = static_cast<float>(1.0 / std::sqrt(s2 / c + eps));
    mean[static_cast<std::size_t>(r)] = static_cast<float>(mu);
    rstd[static_cast<std::size_t>(r)] = rs;
    float* o = out.data() + r * c;
    for (int i = 0; i < c; ++i) {
      o[i] = (xr[i] - static_cast<float>(mu)) * rs * gamma.data()[i] + beta.data()[i];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [c, rows, mean = std::move(mean), rstd = std::move(rstd)](Node& self) {
        auto& xin = self.inputs[0];
        auto& gin = self.inputs[1];
        auto& bin = self.inputs[2];
        const float* xv = xin->value.data();
        const float* dy = self.grad.data();
        const float* ga = gin->value.data();
        float* dx = wants_grad(xin) ? xin->ensure_grad().data() : nullptr;
        float* dg = wants_grad(gin) ? gin->ensure_grad().data() : nullptr;
        float* db = wants_grad(bin) ? bin->ensure_grad().data() : nullptr;
        for (std::int64_t r = 0; r < rows; ++r) {
          const float mu = mean[static_cast<std::size_t>(r)];
          const float rs = rstd[static_cast<std::size_t>(r)];
          const float* xr = xv + r * c;
          const float* dyr = dy + r * c;
          double s1 = 0.0, s2 = 0.0;
          for (int i = 0; i < c; ++i) {
            const double xhat = (xr[i] - mu) * rs;
            if (dg) dg[i] += static_cast<float>(dyr[i] * xhat);
            if (db) db[i] += dyr[i];
            const double dxhat = dyr[i] * ga[i];
            s1 += dxhat;
            s2 += dxhat * xhat;
          }
          if (!dx) continue;
          float* dxr = dx + r * c;
          for (int i = 0; i < c; ++i) {
            const double xhat = (xr[i] - mu) * rs;
            dxr[i] += static_cast<float>(rs * (dyr[i] * ga[i] - s1 / c - xhat * s2 / c));
          }
        }
      });
}

// ---------------------------------------------------------------- dense

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const int in = x.dim(-1);
  require(weight.ndim() == 2 && weight.dim(1) == in, "linear",
          "weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  const int out_f = weight.dim(0);
  const bool has_bias = bias.defined();
  const int rows = static_cast<int>(x.numel() / in);
  std::vector<float> out(static_cast<std::size_t>(rows) * out_f);
  kernels::gemm(false, true, rows, out_f, in, 1.0f, x.data(), in, weight.data(), in, 0.0f,
                out.data(), out_f);
  if (has_bias) {
    for (int r = 0; r < rows; ++r) {
      kernels::axpy(static_cast<std::size_t>(out_f), 1.0f, bias.data(),
                    out.data() + static_cast<std::ptrdiff_t>(r) * out_f);
    }
  }
  Shape shape = x.shape();
  shape.back() = out_f;
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(shape), std::move(out), inputs,
                     [rows, in, out_f, has_bias](Node& self) {
                       auto& xin = self.inputs[0];
                       auto& win = self.inputs[1];
                       const float* dy = self.grad.data();
                       if (wants_grad(xin)) {
                         kernels::gemm(false, false, rows, in, out_f, 1.0f, dy, out_f,
                                       win->value.data(), in, 1.0f, xin->ensure_grad().data(), in);
                       }
                       if (wants_grad(win)) {
                         kernels::gemm(true, false, out_f, in, rows, 1.0f, dy, out_f,
                                       xin->value.data(), in, 1.0f, win->ensure_grad().data(), in);
                       }
                       if (has_bias && wants_grad(self.inputs[2])) {
                         float* db = self.inputs[2]->ensure_grad().data();
                         for (int r = 0; r < rows; ++r) {
                           kernels::axpy(static_cast<std::size_t>(out_f), 1.0f,
                                         dy + static_cast<std::ptrdiff_t>(r) * out_f, db);
                         }
                       }
                     });
}

// ---------------------------------------------------------------- elementwise

Tensor relu(const Tensor& x) {
  std::vector<float> out(static_cast<std::size_t>(x.numel()));
  kernels::relu_forward(out.size(), x.data(), out.data());
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    auto& xin = self.inputs[0];
    kernels::relu_backward(self.grad.size(), xin->value.data(), self.grad.data(),
                           xin->ensure_grad().data());
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  std::vector<float> out(static_cast<std::size_t>(x.numel()));
  const float* xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2)));
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    auto& xin = self.inputs[0];
    const float* xv = xin->value.data();
    float* dx = xin->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      dx[i] += static_cast<float>(self.grad[i] * (cdf + v * pdf));
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add",
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> out(static_cast<std::size_t>(a.numel()));
  kernels::add(out.size(), a.data(), b.data(), out.data());
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (wants_grad(in)) kernels::axpy(self.grad.size(), 1.0f, self.grad.data(), in->ensure_grad().data());
    }
  });
}

Tensor add_broadcast(const Tensor& x, const Tensor& b) {
  require(b.ndim() <= x.ndim() &&
              std::equal(b.shape().begin(), b.shape().end(), x.shape().end() - b.ndim()),
          "add_broadcast", shape_str(b.shape()) + " is not a suffix of " + shape_str(x.shape()));
  const std::size_t inner = static_cast<std::size_t>(b.numel());
  const std::size_t outer = static_cast<std::size_t>(x.numel()) / inner;
  std::vector<float> out(x.values().begin(), x.values().end());
  for (std::size_t o = 0; o < outer; ++o) kernels::axpy(inner, 1.0f, b.data(), out.data() + o * inner);
  return make_result(x.shape(), std::move(out), {x, b}, [inner, outer](Node& self) {
    auto& xin = self.inputs[0];
    auto& bin = self.inputs[1];
    if (wants_grad(xin)) {
      kernels::axpy(self.grad.size(), 1.0f, self.grad.data(), xin->ensure_grad().data());
    }
    if (wants_grad(bin)) {
      float* db = bin->ensure_grad().data();
      for (std::size_t o = 0; o < outer; ++o) kernels::axpy(inner, 1.0f, self.grad.data() + o * inner, db);
    }
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.values().begin(), x.values().end());
  for (float& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), {x}, [factor](Node& self) {
    kernels::axpy(self.grad.size(), factor, self.grad.data(), self.inputs[0]->ensure_grad().data());
  });
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (float v : x.values()) s += v;
  const double n = static_cast<double>(x.numel());
  return make_result({1}, {static_cast<float>(s / n)}, {x}, [n](Node& self) {
    auto g = self.inputs[0]->ensure_grad();
    const float d = static_cast<float>(self.grad[0] / n);
    for (float& v : g) v += d;
  });
}

// ---------------------------------------------------------------- layout

Tensor concat_channels(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_channels", "no inputs");
  const int n = parts[0].dim(0);
  const int h = parts[0].dim(2);
  const int w = parts[0].dim(3);
  int total = 0;
  std::vector<int> channels;
  for (const auto& t : parts) {
    require(t.ndim() == 4 && t.dim(0) == n && t.dim(2) == h && t.dim(3) == w, "concat_channels",
            "incompatible part " + shape_str(t.shape()) + " vs " + shape_str(parts[0].shape()));
    channels.push_back(t.dim(1));
    total += t.dim(1);
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<float> out(static_cast<std::size_t>(n) * total * hw);
  for (int b = 0; b < n; ++b) {
    std::size_t offset = static_cast<std::size_t>(b) * total * hw;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::size_t len = channels[i] * hw;
      std::memcpy(out.data() + offset, parts[i].data() + b * len, len * sizeof(float));
      offset += len;
    }
  }
  return make_result({n, total, h, w}, std::move(out), parts,
                     [n, total, hw, channels](Node& self) {
                       for (int b = 0; b < n; ++b) {
                         std::size_t offset = static_cast<std::size_t>(b) * total * hw;
                         for (std::size_t i = 0; i < channels.size(); ++i) {
                           const std::size_t len = channels[i] * hw;
                           auto& in = self.inputs[i];
                           if (wants_grad(in)) {
                             kernels::axpy(len, 1.0f, self.grad.data() + offset,
                                           in->ensure_grad().data() + b * len);
                           }
                           offset += len;
                         }
                       }
                     });
}

Tensor max_pool2x2(const Tensor& x) {
  require(x.ndim() == 4, "max_pool2x2", "input must be NCHW");
  const int nc = x.dim(0) * x.dim(1);
  const int h = x.dim(2);
  const int w = x.dim(3);
  const int ho = (h + 1) / 2;
  const int wo = (w + 1) / 2;
  std::vector<float> out(static_cast<std::size_t>(nc) * ho * wo);
  std::vector<std::int32_t> argmax(out.size());
  const float* xv = x.data();
  for (int p = 0; p < nc; ++p) {
    const float* plane = xv + static_cast<std::ptrdiff_t>(p) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        int best_idx = 0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int iy = 2 * oy + dy;
            const int ix = 2 * ox + dx;
            if (iy >= h || ix >= w) continue;
            const float v = plane[iy * w + ix];
            if (v > best) {
              best = v;
              best_idx = iy * w + ix;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(p) * ho + oy) * wo + ox;
        out[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  return make_result({x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                     [nc, h, w, ho, wo, argmax = std::move(argmax)](Node& self) {
                       float* dx = self.inputs[0]->ensure_grad().data();
                       for (int p = 0; p < nc; ++p) {
                         for (int i = 0; i < ho * wo; ++i) {
                           const std::size_t o = static_cast<std::size_t>(p) * ho * wo + i;
                           dx[static_cast<std::ptrdiff_t>(p) * h * w + argmax[o]] += self.grad[o];
                         }
                       }
                     });
}

namespace {

struct Taps {
  std::vector<int> lo, hi;
  std::vector<float> frac;
};

Taps bilinear_taps(int in, int out) {
  Taps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    lo = std::min(lo, in - 1);
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = static_cast<float>(src - lo);
  }
  return t;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  require(x.ndim() == 4, "resize_bilinear", "input must be NCHW");
  require(out_h > 0 && out_w > 0, "resize_bilinear", "output size must be positive");
  const int nc = x.dim(0) * x.dim(1);
  const int h = x.dim(2);
  const int w = x.dim(3);
  if (h == out_h && w == out_w) {
    std::vector<float> out(x.values().begin(), x.values().end());
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
      kernels::axpy(self.grad.size(), 1.0f, self.grad.data(), self.inputs[0]->ensure_grad().data());
    });
  }
  Taps ty = bilinear_taps(h, out_h);
  Taps tx = bilinear_taps(w, out_w);
  std::vector<float> out(static_cast<std::size_t>(nc) * out_h * out_w);
  const float* xv = x.data();
  for (int p = 0; p < nc; ++p) {
    const float* plane = xv + static_cast<std::ptrdiff_t>(p) * h * w;
    float* o = out.data() + static_cast<std::ptrdiff_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const float fy = ty.frac[oy];
      const float* r0 = plane + ty.lo[oy] * w;
      const float* r1 = plane + ty.hi[oy] * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const float fx = tx.frac[ox];
        const float top = r0[tx.lo[ox]] * (1 - fx) + r0[tx.hi[ox]] * fx;
        const float bot = r1[tx.lo[ox]] * (1 - fx) + r1[tx.hi[ox]] * fx;
        o[oy * out_w + ox] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return make_result({x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x},
                     [nc, h, w, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](Node& self) {
                       float* dx = self.inputs[0]->ensure_grad().data();
                       for (int p = 0; p < nc; ++p) {
                         float* plane = dx + static_cast<std::ptrdiff_t>(p) * h * w;
                         const float* g = self.grad.data() + static_cast<std::ptrdiff_t>(p) * out_h * out_w;
                         for (int oy = 0; oy < out_h; ++oy) {
                           const float fy = ty.frac[oy];
                           float* r0 = plane + ty.lo[oy] * w;
                           float* r1 = plane + ty.hi[oy] * w;
                           for (int ox = 0; ox < out_w; ++ox) {
                             const float fx = tx.frac[ox];
                             const float gv = g[oy * out_w + ox];
                             r0[tx.lo[ox]] += gv * (1 - fy) * (1 - fx);
                             r0[tx.hi[ox]] += gv * (1 - fy) * fx;
                             r1[tx.lo[ox]] += gv * fy * (1 - fx);
                             r1[tx.hi[ox]] += gv * fy * fx;
                           }
                         }
                       }
                     });
}

Tensor nchw_to_tokens(const Tensor& x) {
  require(x.ndim() == 4, "nchw_to_tokens", "input must be NCHW");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<float> out(static_cast<std::size_t>(x.numel()));
  const float* xv = x.data();
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (int t = 0; t < hw; ++t) {
        out[(static_cast<std::size_t>(b) * hw + t) * c + ch] = xv[(static_cast<std::size_t>(b) * c + ch) * hw + t];
      }
    }
  }
  return make_result({n, hw, c}, std::move(out), {x}, [n, c, hw](Node& self) {
    float* dx = self.inputs[0]->ensure_grad().data();
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        for (int t = 0; t < hw; ++t) {
          dx[(static_cast<std::size_t>(b) * c + ch) * hw + t] += self.grad[(static_cast<std::size_t>(b) * hw + t) * c + ch];
        }
      }
    }
  });
}

Tensor tokens_to_nchw(const Tensor& tokens, int h, int w) {
  require(tokens.ndim() == 3 && tokens.dim(1) == h * w, "tokens_to_nchw",
          "token tensor " + shape_str(tokens.shape()) + " is not a " + std::to_string(h) + "x" +
              std::to_string(w) + " grid");
  const int n = tokens.dim(0), c = tokens.dim(2), hw = h * w;
  std::vector<float> out(static_cast<std::size_t>(tokens.numel()));
  const float* tv = tokens.data();
  for (int b = 0; b < n; ++b) {
    for (int t = 0; t < hw; ++t) {
      for (int ch = 0; ch < c; ++ch) {
        out[(static_cast<std::size_t>(b) * c + ch) * hw + t] = tv[(static_cast<std::size_t>(b) * hw + t) * c + ch];
      }
    }
  }
  return make_result({n, c, h, w}, std::move(out), {tokens}, [n, c, hw](Node& self) {
    float* dt = self.inputs[0]->ensure_grad().data();
    for (int b = 0; b < n; ++b) {
      for (int t = 0; t < hw; ++t) {
        for (int ch = 0; ch < c; ++ch) {
          dt[(static_cast<std::size_t>(b) * hw + t) * c + ch] += self.grad[(static_cast<std::size_t>(b) * c + ch) * hw + t];
        }
      }
    }
  });
}

// ---------------------------------------------------------------- attention

Tensor multi_head_attention(const Tensor& qkv, int heads) {
  require(qkv.ndim() == 3 && qkv.dim(2) % 3 == 0, "multi_head_attention",
          "qkv must be N x T x 3C, got " + shape_str(qkv.shape()));
  const int n = qkv.dim(0);
  const int t = qkv.dim(1);
  const int c = qkv.dim(2) / 3;
  require(heads > 0 && c % heads == 0, "multi_head_attention",
          std::to_string(c) + " channels not divisible into " + std::to_string(heads) + " heads");
  const int hd = c / heads;
  const int ld = 3 * c;
  const float scale_f = 1.0f / std::sqrt(static_cast<float>(hd));
  const bool keep = grad_enabled() && qkv.requires_grad();

  std::vector<float> out(static_cast<std::size_t>(n) * t * c);
  std::vector<float> probs(keep ? static_cast<std::size_t>(n) * heads * t * t : 0);
  std::vector<float> local(static_cast<std::size_t>(t) * t);
  for (int b = 0; b < n; ++b) {
    const float* base = qkv.data() + static_cast<std::ptrdiff_t>(b) * t * ld;
    for (int hh = 0; hh < heads; ++hh) {
      float* p = keep ? probs.data() + (static_cast<std::size_t>(b) * heads + hh) * t * t : local.data();
      const float* q = base + hh * hd;
      const float* k = base + c + hh * hd;
      const float* v = base + 2 * c + hh * hd;
      kernels::gemm(false, true, t, t, hd, scale_f, q, ld, k, ld, 0.0f, p, t);
      for (int i = 0; i < t; ++i) {
        float* row = p + static_cast<std::ptrdiff_t>(i) * t;
        const float mx = *std::max_element(row, row + t);
        double s = 0.0;
        for (int j = 0; j < t; ++j) {
          row[j] = std::exp(row[j] - mx);
          s += row[j];
        }
        const float inv = static_cast<float>(1.0 / s);
        for (int j = 0; j < t; ++j) row[j] *= inv;
      }
      float* o = out.data() + static_cast<std::ptrdiff_t>(b) * t * c + hh * hd;
      kernels::gemm(false, false, t, hd, t, 1.0f, p, t, v, ld, 0.0f, o, c);
    }
  }

  return make_result(
      {n, t, c}, std::move(out), {qkv},
      [n, t, c, heads, hd, ld, scale_f, probs = std::move(probs)](Node& self) {
        auto& in = self.inputs[0];
        const float* qv = in->value.data();
        float* dq_all = in->ensure_grad().data();
        std::vector<float> dp(static_cast<std::size_t>(t) * t);
        for (int b = 0; b < n; ++b) {
          const float* base = qv + static_cast<std::ptrdiff_t>(b) * t * ld;
          float* dbase = dq_all + static_cast<std::ptrdiff_t>(b) * t * ld;
          for (int hh = 0; hh < heads; ++hh) {
            const float* p = probs.data() + (static_cast<std::size_t>(b) * heads + hh) * t * t;
            const float* q = base + hh * hd;
            const float* k = base + c + hh * hd;
            const float* v = base + 2 * c + hh * hd;
            const float* dout = self.grad.data() + static_cast<std::ptrdiff_t>(b) * t * c + hh * hd;
            // dV += P^T dO
            kernels::gemm(true, false, t, hd, t, 1.0f, p, t, dout, c, 1.0f, dbase + 2 * c + hh * hd, ld);
            // dP = dO V^T
            kernels::gemm(false, true, t, t, hd, 1.0f, dout, c, v, ld, 0.0f, dp.data(), t);
            // dS = P * (dP - rowsum(dP * P))
            for (int i = 0; i < t; ++i) {
              const float* pr = p + static_cast<std::ptrdiff_t>(i) * t;
              float* dr = dp.data() + static_cast<std::ptrdiff_t>(i) * t;
              const float s = kernels::dot(static_cast<std::size_t>(t), pr, dr);
              for (int j = 0; j < t; ++j) dr[j] = pr[j] * (dr[j] - s);
            }
            // dQ += scale dS K ; dK += scale dS^T Q
            kernels::gemm(false, false, t, hd, t, scale_f, dp.data(), t, k, ld, 1.0f, dbase + hh * hd, ld);
            kernels::gemm(true, false, t, hd, t, scale_f, dp.data(), t, q, ld, 1.0f, dbase + c + hh * hd, ld);
          }
        }
      });
}

// ---------------------------------------------------------------- losses

namespace {

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Tensor soft_dice(const Tensor& logits, const Tensor& target, float eps) {
  require(logits.shape() == target.shape(), "soft_dice",
          "shape mismatch " + shape_str(logits.shape()) + " vs " + shape_str(target.shape()));
  const int n = logits.dim(0);
  const std::int64_t per = logits.numel() / n;
  std::vector<double> inter(n), denom(n);
  double total = 0.0;
  for (int b = 0; b < n; ++b) {
    double si = 0.0, sp = 0.0, st = 0.0;
    for (std::int64_t i = 0; i < per; ++i) {
      const double p = sigmoid(logits.data()[b * per + i]);
      const double tv = target.data()[b * per + i];
      si += p * tv;
      sp += p;
      st += tv;
    }
    inter[b] = 2.0 * si + eps;
    denom[b] = sp + st + eps;
    total += 1.0 - inter[b] / denom[b];
  }
  return make_result({1}, {static_cast<float>(total / n)}, {logits, target},
                     [n, per, inter = std::move(inter), denom = std::move(denom)](Node& self) {
                       auto& lin = self.inputs[0];
                       if (!wants_grad(lin)) return;
                       const float* xv = lin->value.data();
                       const float* tv = self.inputs[1]->value.data();
                       float* dx = lin->ensure_grad().data();
                       const double g = self.grad[0] / n;
                       for (int b = 0; b < n; ++b) {
                         const double d2 = denom[b] * denom[b];
                         for (std::int64_t i = 0; i < per; ++i) {
                           const std::int64_t idx = b * per + i;
                           const double p = sigmoid(xv[idx]);
                           const double dl_dp = -(2.0 * tv[idx] * denom[b] - inter[b]) / d2;
                           dx[idx] += static_cast<float>(g * dl_dp * p * (1.0 - p));
                         }
                       }
                     });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  require(logits.shape() == target.shape(), "bce_with_logits",
          "shape mismatch " + shape_str(logits.shape()) + " vs " + shape_str(target.shape()));
  const std::int64_t count = logits.numel();
  double total = 0.0;
  for (std::int64_t i = 0; i < count; ++i) {
    const double x = logits.data()[i];
    const double t = target.data()[i];
    total += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  return make_result({1}, {static_cast<float>(total / static_cast<double>(count))}, {logits, target},
                     [count](Node& self) {
                       auto& lin = self.inputs[0];
                       if (!wants_grad(lin)) return;
                       const float* xv = lin->value.data();
                       const float* tv = self.inputs[1]->value.data();
                       float* dx = lin->ensure_grad().data();
                       const double g = self.grad[0] / static_cast<double>(count);
                       for (std::int64_t i = 0; i < count; ++i) {
                         dx[i] += static_cast<float>(g * (sigmoid(xv[i]) - tv[i]));
                       }
                     });
}

}  // namespace bvit::nn
