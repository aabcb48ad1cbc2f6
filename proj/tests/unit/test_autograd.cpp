#include <cmath>
#include <random>

#include "bvit/error.hpp"
#include "bvit/nn/ops.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bvit::nn;
using testing::check_gradients;
using testing::random_tensor;

namespace {

// Projects an arbitrary tensor onto a fixed random direction so every output
// element contributes to the checked scalar.
Tensor project(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor w = random_tensor(y.shape(), rng, false);
  std::vector<float> prod(y.values().begin(), y.values().end());
  const Tensor weighted = make_result(y.shape(), [&] {
    for (std::size_t i = 0; i < prod.size(); ++i) prod[i] *= w.values()[i];
    return prod;
  }(), {y}, [w](Node& self) {
    auto& in = *self.inputs[0];
    auto g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * w.values()[i];
  });
  return scale(mean(weighted), static_cast<float>(y.numel()));
}

void expect_close(const testing::GradCheck& r, double rel = 2e-2) {
  CAPTURE(r.max_abs_error);
  CAPTURE(r.max_abs_grad);
  CHECK(r.max_abs_grad > 0.0);
  CHECK(r.max_abs_error <= rel * std::max(r.max_abs_grad, 1e-3));
}

}  // namespace

TEST_CASE("conv2d gradients (stride, padding, dilation, bias)") {
  std::mt19937_64 rng(1);
  for (ConvGeometry g : {ConvGeometry{1, 1, 1}, ConvGeometry{2, 1, 1}, ConvGeometry{1, 2, 2}}) {
    auto x = random_tensor({2, 3, 6, 5}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    auto b = random_tensor({4}, rng);
    expect_close(check_gradients([&](const auto& in) { return project(conv2d(in[0], in[1], in[2], g), 7); },
                                 {x, w, b}));
  }
}

TEST_CASE("group_norm and layer_norm gradients") {
  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 4, 3, 3}, rng);
  auto gamma = random_tensor({4}, rng, true, 0.5f, 1.5f);
  auto beta = random_tensor({4}, rng);
  expect_close(check_gradients([](const auto& in) { return project(group_norm(in[0], 2, in[1], in[2]), 3); },
                               {x, gamma, beta}, 1e-2f));
  auto t = random_tensor({2, 3, 6}, rng);
  auto lg = random_tensor({6}, rng, true, 0.5f, 1.5f);
  auto lb = random_tensor({6}, rng);
  expect_close(check_gradients([](const auto& in) { return project(layer_norm(in[0], in[1], in[2]), 4); },
                               {t, lg, lb}, 1e-2f));
}

TEST_CASE("linear, gelu, add_broadcast gradients") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 5}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto b = random_tensor({4}, rng);
  expect_close(check_gradients([](const auto& in) { return project(gelu(linear(in[0], in[1], in[2])), 5); },
                               {x, w, b}));
  auto y = random_tensor({2, 3, 4}, rng);
  auto c = random_tensor({3, 4}, rng);
  expect_close(check_gradients([](const auto& in) { return project(add_broadcast(in[0], in[1]), 6); }, {y, c}));
}

TEST_CASE("relu and max_pool gradients away from ties and kinks") {
  std::mt19937_64 rng(4);
  std::vector<float> v(2 * 2 * 5 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i % 2 ? 1.0f : -1.0f) * (0.1f + 0.01f * static_cast<float>(i));
  std::shuffle(v.begin(), v.end(), rng);
  auto x = Tensor::from_data({2, 2, 5, 5}, v, true);
  expect_close(check_gradients([](const auto& in) { return project(relu(in[0]), 8); }, {x}, 1e-3f));
  expect_close(check_gradients([](const auto& in) { return project(max_pool2x2(in[0]), 9); }, {x}, 1e-3f));
  CHECK(max_pool2x2(x).shape() == Shape{2, 2, 3, 3});
}

TEST_CASE("resize, concat and token reshapes gradients") {
  std::mt19937_64 rng(5);
  auto a = random_tensor({1, 2, 3, 4}, rng);
  auto b = random_tensor({1, 1, 3, 4}, rng);
  expect_close(check_gradients(
      [](const auto& in) { return project(resize_bilinear(concat_channels({in[0], in[1]}), 7, 5), 10); }, {a, b}));
  auto t = random_tensor({2, 6, 3}, rng);
  expect_close(check_gradients(
      [](const auto& in) { return project(nchw_to_tokens(scale(tokens_to_nchw(in[0], 2, 3), 2.0f)), 11); }, {t}));
}

TEST_CASE("multi-head attention gradient") {
  std::mt19937_64 rng(6);
  auto qkv = random_tensor({2, 5, 12}, rng);
  expect_close(check_gradients([](const auto& in) { return project(multi_head_attention(in[0], 2), 12); }, {qkv}));
}

TEST_CASE("tokens round trip is lossless") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3, 4, 5}, rng, false);
  const auto back = tokens_to_nchw(nchw_to_tokens(x), 4, 5);
  CHECK(back.shape() == x.shape());
  CHECK(std::equal(back.values().begin(), back.values().end(), x.values().begin()));
}

TEST_CASE("bilinear resize to the same size is the identity") {
  std::mt19937_64 rng(8);
  auto x = random_tensor({1, 2, 5, 6}, rng, false);
  const auto y = resize_bilinear(x, 5, 6);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-6));
}

TEST_CASE("no-grad guard stops graph recording") {
  auto x = Tensor::full({2}, 1.0f, true);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(relu(x).requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(relu(x).requires_grad());
}

TEST_CASE("gradients accumulate over shared uses") {
  auto x = Tensor::from_data({1}, {3.0f}, true);
  mean(add(x, x)).backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0));
}
