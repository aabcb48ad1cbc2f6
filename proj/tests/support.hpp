#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bvit/nn/tensor.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "bvit") {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << text;
}

inline std::vector<float> random_values(std::size_t n, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline bvit::nn::Tensor random_tensor(bvit::nn::Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                                      float lo = -1.0f, float hi = 1.0f) {
  const auto n = static_cast<std::size_t>(bvit::nn::shape_numel(shape));
  return bvit::nn::Tensor::from_data(std::move(shape), random_values(n, rng, lo, hi), requires_grad);
}

struct GradCheck {
  double max_abs_error = 0.0;
  double max_abs_grad = 0.0;
};

// Compares the autograd gradient of scalar f with respect to each input
// against float central differences.
inline GradCheck check_gradients(const std::function<bvit::nn::Tensor(const std::vector<bvit::nn::Tensor>&)>& f,
                                 std::vector<bvit::nn::Tensor> inputs, float h = 1e-2f) {
  for (auto& t : inputs) t.zero_grad();
  f(inputs).backward();
  GradCheck out;
  bvit::nn::NoGradGuard guard;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<float> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const float saved = t.values()[i];
      t.values()[i] = saved + h;
      const double up = f(inputs).item();
      t.values()[i] = saved - h;
      const double down = f(inputs).item();
      t.values()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      out.max_abs_error = std::max(out.max_abs_error, std::abs(numeric - analytic[i]));
      out.max_abs_grad = std::max(out.max_abs_grad, std::abs(numeric));
    }
  }
  return out;
}

}  // namespace testing
