#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "tables.hpp"

namespace bvit::kernels {

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
  }
  return "unknown";
}

bool supported(Isa isa) {
  switch (isa) {
    case Isa::scalar: return true;
    case Isa::avx2:
#if defined(BVIT_HAVE_AVX2)
      __builtin_cpu_init();
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& table(Isa isa) {
  if (!supported(isa)) {
    throw std::runtime_error("kernel variant '" + std::string(isa_name(isa)) +
                             "' is not available on this CPU/build");
  }
#if defined(BVIT_HAVE_AVX2)
  if (isa == Isa::avx2) return detail::avx2_table();
#endif
  return detail::scalar_table();
}

namespace {

const KernelTable* initial_table() {
  if (const char* env = std::getenv("BILATERAL_SIMD")) {
    const std::string_view want(env);
    if (want == "scalar") return &table(Isa::scalar);
    if (want == "avx2" && supported(Isa::avx2)) return &table(Isa::avx2);
  }
  return supported(Isa::avx2) ? &table(Isa::avx2) : &table(Isa::scalar);
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> ptr{initial_table()};
  return ptr;
}

}  // namespace

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

Isa active_isa() { return active().isa; }

void select(Isa isa) { current().store(&table(isa), std::memory_order_release); }

}  // namespace bvit::kernels
