#pragma once

// Numeric inner loops used by the tensor engine.
//
// Every kernel has a portable scalar reference implementation and, on x86-64,
// an AVX2/FMA variant. The variant is chosen once at startup from CPUID and
// can be forced with BILATERAL_SIMD=scalar|avx2 or kernels::select().

#include <cstddef>
#include <string_view>

namespace bvit::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

struct AdamParams {
  float lr;
  float beta1;
  float beta2;
  float eps;
  float bias_correction1;  // 1 - beta1^t
  float bias_correction2;  // 1 - beta2^t
};

struct KernelTable {
  Isa isa;

  // Row-major C = alpha * op(A) * op(B) + beta * C, op(X) = X or X^T.
  // op(A) is m x k, op(B) is k x n. beta == 0 overwrites C (NaNs in C are ignored).
  void (*gemm)(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
               const float* a, int lda, const float* b, int ldb, float beta,
               float* c, int ldc);

  // y += alpha * x
  void (*axpy)(std::size_t n, float alpha, const float* x, float* y);

  // y = a + b
  void (*add)(std::size_t n, const float* a, const float* b, float* y);

  float (*dot)(std::size_t n, const float* a, const float* b);

  // y = max(x, 0)
  void (*relu_forward)(std::size_t n, const float* x, float* y);

  // dx += (x > 0) ? dy : 0
  void (*relu_backward)(std::size_t n, const float* x, const float* dy, float* dx);

  // In-place Adam update of p with gradient g and moments m, v.
  void (*adam_update)(std::size_t n, float* p, const float* g, float* m, float* v,
                      const AdamParams& params);
};

const KernelTable& table(Isa isa);
bool supported(Isa isa);

// Currently selected table. Thread-safe to read; select() is meant for
// startup and tests.
const KernelTable& active();
Isa active_isa();
void select(Isa isa);

// RAII override used by equivalence tests.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(active_isa()) { select(isa); }
  ~ScopedIsa() { select(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  active().gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
inline void axpy(std::size_t n, float alpha, const float* x, float* y) {
  active().axpy(n, alpha, x, y);
}
inline void add(std::size_t n, const float* a, const float* b, float* y) {
  active().add(n, a, b, y);
}
inline float dot(std::size_t n, const float* a, const float* b) { return active().dot(n, a, b); }
inline void relu_forward(std::size_t n, const float* x, float* y) {
  active().relu_forward(n, x, y);
}
inline void relu_backward(std::size_t n, const float* x, const float* dy, float* dx) {
  active().relu_backward(n, x, dy, dx);
}
inline void adam_update(std::size_t n, float* p, const float* g, float* m, float* v,
                        const AdamParams& params) {
  active().adam_update(n, p, g, m, v, params);
}

}  // namespace bvit::kernels
