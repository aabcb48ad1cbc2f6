// Portable reference kernels. These define the semantics the SIMD variants
// are tested against, so they stay deliberately plain.

#include <cmath>

#include "tables.hpp"

namespace bvit::kernels::detail {
namespace {

inline float elem_a(bool trans, const float* a, int lda, int i, int p) {
  return trans ? a[static_cast<std::ptrdiff_t>(p) * lda + i]
               : a[static_cast<std::ptrdiff_t>(i) * lda + p];
}

void gemm_scalar(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (beta == 0.0f) {
      for (int j = 0; j < n; ++j) crow[j] = 0.0f;
    } else if (beta != 1.0f) {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (int p = 0; p < k; ++p) {
      const float av = alpha * elem_a(trans_a, a, lda, i, p);
      if (trans_b) {
        for (int j = 0; j < n; ++j) crow[j] += av * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
      } else {
        const float* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

void axpy_scalar(std::size_t n, float alpha, const float* x, float* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void add_scalar(std::size_t n, const float* a, const float* b, float* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

float dot_scalar(std::size_t n, const float* a, const float* b) {
  float s = 0.0f;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void relu_forward_scalar(std::size_t n, const float* x, float* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward_scalar(std::size_t n, const float* x, const float* dy, float* dx) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > 0.0f) dx[i] += dy[i];
  }
}

void adam_update_scalar(std::size_t n, float* p, const float* g, float* m, float* v,
                        const AdamParams& ap) {
  const float step = ap.lr / ap.bias_correction1;
  const float inv_bc2 = 1.0f / ap.bias_correction2;
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = ap.beta1 * m[i] + (1.0f - ap.beta1) * g[i];
    v[i] = ap.beta2 * v[i] + (1.0f - ap.beta2) * g[i] * g[i];
    p[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + ap.eps);
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable t{Isa::scalar,        gemm_scalar,         axpy_scalar,
                             add_scalar,         dot_scalar,          relu_forward_scalar,
                             relu_backward_scalar, adam_update_scalar};
  return t;
}

}  // namespace bvit::kernels::detail
