#include <cmath>
#include <random>
#include <vector>

#include "bvit/kernels/kernels.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bvit::kernels;

namespace {

double max_rel_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max(1.0, static_cast<double>(std::abs(b[i])));
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]) / scale);
  }
  return worst;
}

// Textbook triple loop used as an oracle for both variants.
std::vector<float> naive_gemm(bool ta, bool tb, int m, int n, int k, float alpha, const std::vector<float>& a, int lda,
                              const std::vector<float>& b, int ldb, float beta, std::vector<float> c, int ldc) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) {
        const float av = ta ? a[p * lda + i] : a[i * lda + p];
        const float bv = tb ? b[j * ldb + p] : b[p * ldb + j];
        acc += static_cast<double>(av) * bv;
      }
      float& dst = c[i * ldc + j];
      dst = static_cast<float>(alpha * acc + (beta == 0.0f ? 0.0 : beta * dst));
    }
  }
  return c;
}

std::vector<Isa> isas() {
  std::vector<Isa> out{Isa::scalar};
  if (supported(Isa::avx2)) out.push_back(Isa::avx2);
  return out;
}

}  // namespace

TEST_CASE("gemm matches the naive product for every transpose combination and ragged size") {
  std::mt19937_64 rng(11);
  const int sizes[][3] = {{1, 1, 1}, {3, 5, 7}, {8, 8, 8}, {17, 9, 33}, {31, 64, 15}, {64, 70, 129}};
  for (Isa isa : isas()) {
    CAPTURE(isa_name(isa));
    for (const auto& s : sizes) {
      const int m = s[0], n = s[1], k = s[2];
      for (int t = 0; t < 4; ++t) {
        const bool ta = t & 1, tb = t & 2;
        const int lda = ta ? m : k, ldb = tb ? k : n;
        const auto a = testing::random_values(static_cast<std::size_t>(m) * k, rng);
        const auto b = testing::random_values(static_cast<std::size_t>(k) * n, rng);
        const auto c0 = testing::random_values(static_cast<std::size_t>(m) * n, rng);
        for (float beta : {0.0f, 1.0f, 0.5f}) {
          auto c = c0;
          table(isa).gemm(ta, tb, m, n, k, 0.75f, a.data(), lda, b.data(), ldb, beta, c.data(), n);
          const auto want = naive_gemm(ta, tb, m, n, k, 0.75f, a, lda, b, ldb, beta, c0, n);
          CHECK(max_rel_diff(c, want) < 1e-5);
        }
      }
    }
  }
}

TEST_CASE("gemm with beta 0 ignores NaN in the output buffer") {
  for (Isa isa : isas()) {
    std::vector<float> a{1, 2, 3, 4}, b{1, 0, 0, 1}, c(4, std::nanf(""));
    table(isa).gemm(false, false, 2, 2, 2, 1.0f, a.data(), 2, b.data(), 2, 0.0f, c.data(), 2);
    CHECK(c == std::vector<float>{1, 2, 3, 4});
  }
}

TEST_CASE("avx2 elementwise kernels agree with the scalar reference") {
  if (!supported(Isa::avx2)) return;
  const auto& s = table(Isa::scalar);
  const auto& v = table(Isa::avx2);
  std::mt19937_64 rng(5);
  for (std::size_t n : {std::size_t{0}, std::size_t{1}, std::size_t{7}, std::size_t{8}, std::size_t{9},
                        std::size_t{31}, std::size_t{1000}, std::size_t{4099}}) {
    CAPTURE(n);
    const auto x = testing::random_values(n, rng), y0 = testing::random_values(n, rng);

    auto ys = y0, yv = y0;
    s.axpy(n, 1.3f, x.data(), ys.data());
    v.axpy(n, 1.3f, x.data(), yv.data());
    CHECK(max_rel_diff(yv, ys) < 1e-6);

    std::vector<float> as(n), av(n);
    s.add(n, x.data(), y0.data(), as.data());
    v.add(n, x.data(), y0.data(), av.data());
    CHECK(av == as);

    const double ds = s.dot(n, x.data(), y0.data()), dv = v.dot(n, x.data(), y0.data());
    CHECK(std::abs(ds - dv) <= 1e-5 * std::max(1.0, std::abs(ds)));

    std::vector<float> rs(n), rv(n);
    s.relu_forward(n, x.data(), rs.data());
    v.relu_forward(n, x.data(), rv.data());
    CHECK(rv == rs);

    auto gs = y0, gv = y0;
    s.relu_backward(n, x.data(), x.data(), gs.data());
    v.relu_backward(n, x.data(), x.data(), gv.data());
    CHECK(gv == gs);

    AdamParams p{1e-3f, 0.9f, 0.999f, 1e-8f, 0.1f, 0.001f};
    auto ps = y0, pv = y0;
    std::vector<float> ms(n, 0.01f), vs(n, 0.02f), mv = ms, vv = vs;
    s.adam_update(n, ps.data(), x.data(), ms.data(), vs.data(), p);
    v.adam_update(n, pv.data(), x.data(), mv.data(), vv.data(), p);
    CHECK(max_rel_diff(pv, ps) < 1e-6);
    CHECK(max_rel_diff(mv, ms) < 1e-6);
    CHECK(max_rel_diff(vv, vs) < 1e-6);
  }
}

TEST_CASE("adam kernel performs the textbook update") {
  for (Isa isa : isas()) {
    std::vector<float> p{1.0f}, g{0.5f}, m{0.0f}, v{0.0f};
    const AdamParams ap{0.1f, 0.9f, 0.999f, 1e-8f, 1.0f - 0.9f, 1.0f - 0.999f};
    table(isa).adam_update(1, p.data(), g.data(), m.data(), v.data(), ap);
    // First step: m_hat = g, v_hat = g^2, so the step is lr * sign(g).
    CHECK(m[0] == doctest::Approx(0.05));
    CHECK(v[0] == doctest::Approx(0.00025));
    CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-6));
  }
}

TEST_CASE("scoped selection restores the previous kernel set") {
  const Isa before = active_isa();
  {
    ScopedIsa scoped(Isa::scalar);
    CHECK(active_isa() == Isa::scalar);
    CHECK(active().isa == Isa::scalar);
  }
  CHECK(active_isa() == before);
  CHECK(isa_name(Isa::scalar) == "scalar");
  CHECK(isa_name(Isa::avx2) == "avx2");
}
