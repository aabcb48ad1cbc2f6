#include "bvit/nn/layers.hpp"

#include "bvit/error.hpp"

namespace bvit::nn {

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, ConvGeometry geometry, bool with_bias)
    : weight_(Tensor::zeros({out_channels, in_channels, kernel, kernel}, true)), geometry_(geometry) {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0) {
    throw ConfigError("Conv2d: channel counts and kernel size must be positive");
  }
  if (with_bias) bias_ = Tensor::zeros({out_channels}, true);
}

void Conv2d::collect(const std::string& prefix, ParameterList& out) const {
  const int fan_in = weight_.dim(1) * weight_.dim(2) * weight_.dim(3);
  out.push_back({join_name(prefix, "weight"), weight_, ParamKind::conv_weight, fan_in});
  if (bias_.defined()) out.push_back({join_name(prefix, "bias"), bias_, ParamKind::bias, fan_in});
}

int default_group_count(int channels) {
  for (int g = 8; g > 1; --g) {
    if (channels % g == 0 && channels / g >= 2) return g;
  }
  return 1;
}

GroupNorm::GroupNorm(int channels, int groups)
    : groups_(groups > 0 ? groups : default_group_count(channels)),
      gamma_(Tensor::full({channels}, 1.0f, true)),
      beta_(Tensor::zeros({channels}, true)) {}

void GroupNorm::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({join_name(prefix, "weight"), gamma_, ParamKind::norm_scale, 0});
  out.push_back({join_name(prefix, "bias"), beta_, ParamKind::norm_shift, 0});
}

Linear::Linear(int in_features, int out_features, bool with_bias)
    : weight_(Tensor::zeros({out_features, in_features}, true)) {
  if (with_bias) bias_ = Tensor::zeros({out_features}, true);
}

void Linear::collect(const std::string& prefix, ParameterList& out) const {
  const int fan_in = weight_.dim(1);
  out.push_back({join_name(prefix, "weight"), weight_, ParamKind::linear_weight, fan_in});
  if (bias_.defined()) out.push_back({join_name(prefix, "bias"), bias_, ParamKind::bias, fan_in});
}

LayerNorm::LayerNorm(int features)
    : gamma_(Tensor::full({features}, 1.0f, true)), beta_(Tensor::zeros({features}, true)) {}

void LayerNorm::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({join_name(prefix, "weight"), gamma_, ParamKind::norm_scale, 0});
  out.push_back({join_name(prefix, "bias"), beta_, ParamKind::norm_shift, 0});
}

ConvNormRelu::ConvNormRelu(int in_channels, int out_channels, int dilation, int stride)
    : conv_(in_channels, out_channels, 3, ConvGeometry{stride, dilation, dilation}, false),
      norm_(out_channels) {}

void ConvNormRelu::collect(const std::string& prefix, ParameterList& out) const {
  conv_.collect(join_name(prefix, "conv"), out);
  norm_.collect(join_name(prefix, "norm"), out);
}

}  // namespace bvit::nn
