#pragma once

// Parameterized building blocks. Layers hold Tensor handles, so copies share
// parameters; collect() exposes them by hierarchical name for initialization,
// optimization and checkpointing.

#include <string>
#include <vector>

#include "bvit/nn/ops.hpp"
#include "bvit/nn/tensor.hpp"

namespace bvit::nn {

enum class ParamKind { conv_weight, linear_weight, bias, norm_scale, norm_shift, embedding };

struct NamedParameter {
  std::string name;
  Tensor tensor;
  ParamKind kind;
  int fan_in = 0;
};

using ParameterList = std::vector<NamedParameter>;

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, ConvGeometry geometry, bool with_bias);

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight_, bias_, geometry_); }
  void collect(const std::string& prefix, ParameterList& out) const;

  int in_channels() const { return weight_.dim(1); }
  int out_channels() const { return weight_.dim(0); }

 private:
  Tensor weight_;
  Tensor bias_;
  ConvGeometry geometry_;
};

// Channels per group is kept >= 2 so 1x1 maps still normalize non-trivially.
int default_group_count(int channels);

class GroupNorm {
 public:
  GroupNorm() = default;
  explicit GroupNorm(int channels, int groups = 0);

  Tensor operator()(const Tensor& x) const { return group_norm(x, groups_, gamma_, beta_); }
  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  int groups_ = 1;
  Tensor gamma_;
  Tensor beta_;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, bool with_bias = true);

  Tensor operator()(const Tensor& x) const { return linear(x, weight_, bias_); }
  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  Tensor weight_;
  Tensor bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int features);

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma_, beta_); }
  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  Tensor gamma_;
  Tensor beta_;
};

// 3x3 conv (no bias) -> GroupNorm -> ReLU.
class ConvNormRelu {
 public:
  ConvNormRelu() = default;
  ConvNormRelu(int in_channels, int out_channels, int dilation = 1, int stride = 1);

  Tensor operator()(const Tensor& x) const { return relu(norm_(conv_(x))); }
  void collect(const std::string& prefix, ParameterList& out) const;

  int out_channels() const { return conv_.out_channels(); }

 private:
  Conv2d conv_;
  GroupNorm norm_;
};

}  // namespace bvit::nn
