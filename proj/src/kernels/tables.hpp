#pragma once

#include "bvit/kernels/kernels.hpp"

namespace bvit::kernels::detail {

const KernelTable& scalar_table();
#if defined(BVIT_HAVE_AVX2)
const KernelTable& avx2_table();
#endif

}  // namespace bvit::kernels::detail
