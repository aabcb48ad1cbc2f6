#pragma once

// Bilateral-ViT and its ablation siblings.
//
//   main branch   3-stage residual CNN stem (strides 2/4/8) -> stride-2 patch
//                 embedding -> transformer blocks -> token grid at stride 16
//   vessel branch four SIG blocks (residual U-blocks) on the vessel map
//                 rescaled to strides 16/8/4/2
//   decoder       three MFF blocks (residual U-blocks of depth 4/5/6 with mid
//                 channels 128/64/32) or a plain conv-upsample decoder
//   head          two conv layers on [MFF3 | SIG4], bilinear upsample to S x S
//
// The model emits logits; sigmoid lives in the loss and in inference.

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "bvit/core_types.hpp"
#include "bvit/nn/layers.hpp"

namespace bvit {

using nn::Tensor;

struct FeaturePyramid {
  std::array<Tensor, 3> skips;  // strides 2, 4, 8
  Tensor bottleneck;            // transformer tokens as a stride-16 map
};

struct SIGOutputs {
  std::vector<Tensor> maps;  // strides 16, 8, 4, 2 (coarse to fine)
};

// Residual U-block: input conv, a small encoder-decoder of `depth` levels with
// a dilated bottom, and a residual add of the input conv.
class ResidualUBlock {
 public:
  ResidualUBlock() = default;
  ResidualUBlock(int in_channels, int mid_channels, int out_channels, int depth);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;

  int depth() const { return depth_; }
  int mid_channels() const { return mid_channels_; }
  int out_channels() const { return out_channels_; }

 private:
  int depth_ = 0;
  int mid_channels_ = 0;
  int out_channels_ = 0;
  nn::ConvNormRelu input_;
  std::vector<nn::ConvNormRelu> encoder_;
  nn::ConvNormRelu bottom_;
  std::vector<nn::ConvNormRelu> decoder_;
};

class BilateralViT {
 public:
  // Throws ConfigError for an invalid configuration.
  explicit BilateralViT(const NetworkConfig& config);

  const NetworkConfig& config() const { return config_; }
  Variant variant() const { return config_.variant; }

  // image: N x 3 x S x S.
  FeaturePyramid encode(const Tensor& image) const;
  // vessel_input: N x C x S x S with C = vessel_input_channels(variant).
  SIGOutputs vessel_branch(const Tensor& vessel_input) const;
  // sig may be null only for vit_plain.
  Tensor decode(const FeaturePyramid& pyramid, const SIGOutputs* sig) const;

  // Full forward pass returning N x 1 x S x S logits. The vessel input is
  // required for vit_vb_*, rejected for vit_plain, and optional for
  // vit_vbfundus_mff (defaults to the image itself).
  Tensor forward(const Tensor& image, const std::optional<Tensor>& vessel = std::nullopt) const;

  nn::ParameterList parameters() const;
  std::int64_t parameter_count() const;

  // Mid channels of the built MFF blocks; empty for plain-decoder variants.
  std::vector<int> mff_mid_channels() const;
  std::vector<int> mff_depths() const;

 private:
  struct ResidualStage {
    nn::ConvNormRelu conv1;
    nn::Conv2d conv2;
    nn::GroupNorm norm2;
    nn::Conv2d shortcut;
    nn::GroupNorm shortcut_norm;
  };
  struct TransformerBlock {
    nn::LayerNorm norm1;
    nn::Linear qkv;
    nn::Linear proj;
    nn::LayerNorm norm2;
    nn::Linear fc1;
    nn::Linear fc2;
  };
  struct PlainStage {
    nn::ConvNormRelu conv1;
    nn::ConvNormRelu conv2;
  };

  Tensor run_stage(const ResidualStage& s, const Tensor& x) const;
  Tensor run_block(const TransformerBlock& b, const Tensor& tokens) const;
  void check_image(const Tensor& image) const;

  NetworkConfig config_;

  std::array<ResidualStage, 3> stages_;
  nn::Conv2d patch_embed_;
  Tensor pos_embed_;
  std::vector<TransformerBlock> blocks_;
  nn::LayerNorm encoder_norm_;

  std::vector<ResidualUBlock> sig_blocks_;

  nn::ConvNormRelu bottleneck_proj_;
  std::vector<ResidualUBlock> mff_blocks_;
  std::vector<PlainStage> plain_stages_;  // 3 skip stages + full-resolution stage

  nn::ConvNormRelu head_conv1_;
  nn::Conv2d head_conv2_;
};

BilateralViT build_model(const NetworkConfig& config);

// Kaiming-normal (fan-in, ReLU gain) conv and linear weights, zero biases and
// embeddings, unit norm scales. Deterministic in `seed`.
void init_weights(BilateralViT& model, std::uint64_t seed);

}  // namespace bvit
