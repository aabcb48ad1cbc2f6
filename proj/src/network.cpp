#include "bvit/network.hpp"

#include <cmath>
#include <random>

#include "bvit/error.hpp"

namespace bvit {

using nn::ConvGeometry;
using nn::ConvNormRelu;

// ----------------------------------------------------------------- RSU

ResidualUBlock::ResidualUBlock(int in_channels, int mid_channels, int out_channels, int depth)
    : depth_(depth), mid_channels_(mid_channels), out_channels_(out_channels) {
  if (depth < 2) throw ConfigError("residual U-block depth must be >= 2");
  input_ = ConvNormRelu(in_channels, out_channels);
  encoder_.emplace_back(out_channels, mid_channels);
  for (int i = 1; i < depth - 1; ++i) encoder_.emplace_back(mid_channels, mid_channels);
  bottom_ = ConvNormRelu(mid_channels, mid_channels, /*dilation=*/2);
  decoder_.emplace_back(2 * mid_channels, out_channels);
  for (int i = 1; i < depth - 1; ++i) decoder_.emplace_back(2 * mid_channels, mid_channels);
}

Tensor ResidualUBlock::operator()(const Tensor& x) const {
  const Tensor hx_in = input_(x);
  std::vector<Tensor> enc;
  enc.reserve(encoder_.size());
  enc.push_back(encoder_[0](hx_in));
  for (std::size_t i = 1; i < encoder_.size(); ++i) enc.push_back(encoder_[i](nn::max_pool2x2(enc.back())));

  Tensor d = bottom_(enc.back());
  for (std::size_t i = encoder_.size(); i-- > 0;) {
    const Tensor& skip = enc[i];
    if (d.dim(2) != skip.dim(2) || d.dim(3) != skip.dim(3)) {
      d = nn::resize_bilinear(d, skip.dim(2), skip.dim(3));
    }
    d = decoder_[i](nn::concat_channels({d, skip}));
  }
  return nn::add(d, hx_in);
}

void ResidualUBlock::collect(const std::string& prefix, nn::ParameterList& out) const {
  input_.collect(nn::join_name(prefix, "in"), out);
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    encoder_[i].collect(nn::join_name(prefix, "enc" + std::to_string(i)), out);
  }
  bottom_.collect(nn::join_name(prefix, "bottom"), out);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    decoder_[i].collect(nn::join_name(prefix, "dec" + std::to_string(i)), out);
  }
}

// ----------------------------------------------------------------- model

BilateralViT::BilateralViT(const NetworkConfig& config) : config_(config) {
  config_.validate();
  const auto& c = config_;
  const auto& cs = c.cnn_stage_channels;

  int in = c.in_channels;
  for (int i = 0; i < 3; ++i) {
    const int out = cs[static_cast<std::size_t>(i)];
    stages_[i] = ResidualStage{ConvNormRelu(in, out, 1, 2),
                               nn::Conv2d(out, out, 3, ConvGeometry{1, 1, 1}, false),
                               nn::GroupNorm(out),
                               nn::Conv2d(in, out, 1, ConvGeometry{2, 0, 1}, false),
                               nn::GroupNorm(out)};
    in = out;
  }

  const int hidden = c.transformer_hidden_dim;
  patch_embed_ = nn::Conv2d(cs[2], hidden, 2, ConvGeometry{2, 0, 1}, true);
  pos_embed_ = Tensor::zeros({c.patch_grid * c.patch_grid, hidden}, true);
  for (int i = 0; i < c.transformer_blocks; ++i) {
    blocks_.push_back(TransformerBlock{nn::LayerNorm(hidden), nn::Linear(hidden, 3 * hidden),
                                       nn::Linear(hidden, hidden), nn::LayerNorm(hidden),
                                       nn::Linear(hidden, c.mlp_ratio * hidden),
                                       nn::Linear(c.mlp_ratio * hidden, hidden)});
  }
  encoder_norm_ = nn::LayerNorm(hidden);

  const bool vessel = has_vessel_branch(c.variant);
  if (vessel) {
    const int vin = vessel_input_channels(c.variant);
    for (int k = 0; k < c.sig_block_count; ++k) {
      sig_blocks_.emplace_back(vin, c.sig_mid_channels, c.sig_out_channels, c.sig_depth);
    }
  }
  const int sig_ch = vessel ? c.sig_out_channels : 0;

  bottleneck_proj_ = ConvNormRelu(hidden, c.bottleneck_channels);
  int prev = c.bottleneck_channels + sig_ch;
  if (has_mff_decoder(c.variant)) {
    for (int k = 0; k < 3; ++k) {
      const int skip = cs[static_cast<std::size_t>(2 - k)];
      mff_blocks_.emplace_back(skip + prev + sig_ch, c.mff_mid_channels[k], c.decoder_channels[k],
                               c.mff_depths[k]);
      prev = c.decoder_channels[k];
    }
    head_conv1_ = ConvNormRelu(prev + sig_ch, c.head_channels);
  } else {
    for (int k = 0; k < 3; ++k) {
      const int skip = cs[static_cast<std::size_t>(2 - k)];
      const int out = c.decoder_channels[k];
      plain_stages_.push_back(PlainStage{ConvNormRelu(prev + skip + sig_ch, out), ConvNormRelu(out, out)});
      prev = out;
    }
    plain_stages_.push_back(
        PlainStage{ConvNormRelu(prev, c.head_channels), ConvNormRelu(c.head_channels, c.head_channels)});
  }
  head_conv2_ = nn::Conv2d(c.head_channels, 1, 3, ConvGeometry{1, 1, 1}, true);
}

void BilateralViT::check_image(const Tensor& image) const {
  const int s = config_.input_size;
  if (image.ndim() != 4 || image.dim(1) != config_.in_channels || image.dim(2) != s ||
      image.dim(3) != s) {
    throw ShapeError("expected image of shape Nx" + std::to_string(config_.in_channels) + "x" +
                     std::to_string(s) + "x" + std::to_string(s) + ", got " +
                     nn::shape_str(image.shape()));
  }
}

Tensor BilateralViT::run_stage(const ResidualStage& s, const Tensor& x) const {
  const Tensor main = s.norm2(s.conv2(s.conv1(x)));
  const Tensor shortcut = s.shortcut_norm(s.shortcut(x));
  return nn::relu(nn::add(main, shortcut));
}

Tensor BilateralViT::run_block(const TransformerBlock& b, const Tensor& tokens) const {
  const Tensor attn = b.proj(nn::multi_head_attention(b.qkv(b.norm1(tokens)), config_.attention_heads));
  const Tensor x = nn::add(tokens, attn);
  const Tensor mlp = b.fc2(nn::gelu(b.fc1(b.norm2(x))));
  return nn::add(x, mlp);
}

FeaturePyramid BilateralViT::encode(const Tensor& image) const {
  check_image(image);
  FeaturePyramid p;
  Tensor x = image;
  for (int i = 0; i < 3; ++i) {
    x = run_stage(stages_[i], x);
    p.skips[i] = x;
  }
  const Tensor embedded = patch_embed_(x);
  const int grid = embedded.dim(2);
  if (grid != config_.patch_grid || embedded.dim(3) != config_.patch_grid) {
    throw ShapeError("patch embedding produced a " + std::to_string(grid) + " grid, expected " +
                     std::to_string(config_.patch_grid));
  }
  Tensor tokens = nn::add_broadcast(nn::nchw_to_tokens(embedded), pos_embed_);
  for (const auto& b : blocks_) tokens = run_block(b, tokens);
  tokens = encoder_norm_(tokens);
  p.bottleneck = nn::tokens_to_nchw(tokens, grid, grid);
  return p;
}

SIGOutputs BilateralViT::vessel_branch(const Tensor& vessel_input) const {
  if (!has_vessel_branch(config_.variant)) {
    throw ConfigError("variant " + std::string(to_string(config_.variant)) + " has no vessel branch");
  }
  const int s = config_.input_size;
  const int ch = vessel_input_channels(config_.variant);
  if (vessel_input.ndim() != 4 || vessel_input.dim(1) != ch || vessel_input.dim(2) != s ||
      vessel_input.dim(3) != s) {
    throw ShapeError("vessel branch of " + std::string(to_string(config_.variant)) + " expects Nx" +
                     std::to_string(ch) + "x" + std::to_string(s) + "x" + std::to_string(s) +
                     ", got " + nn::shape_str(vessel_input.shape()));
  }
  SIGOutputs out;
  int stride = NetworkConfig::kEncoderStride;
  for (const auto& block : sig_blocks_) {
    const int size = s / stride;
    out.maps.push_back(block(nn::resize_bilinear(vessel_input, size, size)));
    stride /= 2;
  }
  return out;
}

Tensor BilateralViT::decode(const FeaturePyramid& pyramid, const SIGOutputs* sig) const {
  const bool vessel = has_vessel_branch(config_.variant);
  if (vessel && (!sig || sig->maps.size() != sig_blocks_.size())) {
    throw ShapeError("decoder of " + std::string(to_string(config_.variant)) +
                     " needs " + std::to_string(sig_blocks_.size()) + " SIG feature maps");
  }
  auto check_stage = [](const char* stage, const Tensor& a, const Tensor& b) {
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
      throw ShapeError(std::string("decoder stage ") + stage + ": feature sizes " +
                       nn::shape_str(a.shape()) + " and " + nn::shape_str(b.shape()) + " do not align");
    }
  };

  Tensor hidden = bottleneck_proj_(pyramid.bottleneck);
  if (vessel) {
    check_stage("bottleneck", hidden, sig->maps[0]);
    hidden = nn::concat_channels({hidden, sig->maps[0]});
  }

  static constexpr const char* kStageNames[3] = {"1", "2", "3"};
  for (int k = 0; k < 3; ++k) {
    const Tensor& skip = pyramid.skips[static_cast<std::size_t>(2 - k)];
    const Tensor up = nn::resize_bilinear(hidden, skip.dim(2), skip.dim(3));
    check_stage(kStageNames[k], up, skip);
    std::vector<Tensor> parts;
    if (!mff_blocks_.empty()) {
      parts = {skip, up};
    } else {
      parts = {up, skip};
    }
    if (vessel) {
      check_stage(kStageNames[k], skip, sig->maps[static_cast<std::size_t>(k + 1)]);
      parts.push_back(sig->maps[static_cast<std::size_t>(k + 1)]);
    }
    const Tensor fused = nn::concat_channels(parts);
    if (!mff_blocks_.empty()) {
      hidden = mff_blocks_[static_cast<std::size_t>(k)](fused);
    } else {
      const auto& st = plain_stages_[static_cast<std::size_t>(k)];
      hidden = st.conv2(st.conv1(fused));
    }
  }

  const int s = config_.input_size;
  if (!mff_blocks_.empty()) {
    const Tensor cat = nn::concat_channels({hidden, sig->maps.back()});
    const Tensor h = head_conv1_(cat);
    return head_conv2_(nn::resize_bilinear(h, s, s));
  }
  const auto& last = plain_stages_.back();
  const Tensor h = last.conv2(last.conv1(nn::resize_bilinear(hidden, s, s)));
  return head_conv2_(h);
}

Tensor BilateralViT::forward(const Tensor& image, const std::optional<Tensor>& vessel) const {
  check_image(image);
  const Variant v = config_.variant;
  if (!has_vessel_branch(v)) {
    if (vessel.has_value()) {
      throw ConfigError("variant vit_plain has no vessel branch; a vessel input is not accepted");
    }
    return decode(encode(image), nullptr);
  }
  Tensor vin;
  if (vessel.has_value()) {
    vin = *vessel;
  } else if (v == Variant::vit_vbfundus_mff) {
    vin = image;
  } else {
    throw ConfigError("variant " + std::string(to_string(v)) + " requires a vessel map input");
  }
  if (vin.dim(0) != image.dim(0)) throw ShapeError("image and vessel batch sizes differ");
  const SIGOutputs sig = vessel_branch(vin);
  return decode(encode(image), &sig);
}

nn::ParameterList BilateralViT::parameters() const {
  nn::ParameterList out;
  for (int i = 0; i < 3; ++i) {
    const std::string p = "encoder.stage" + std::to_string(i + 1);
    stages_[i].conv1.collect(p + ".conv1", out);
    stages_[i].conv2.collect(p + ".conv2", out);
    stages_[i].norm2.collect(p + ".norm2", out);
    stages_[i].shortcut.collect(p + ".shortcut", out);
    stages_[i].shortcut_norm.collect(p + ".shortcut_norm", out);
  }
  patch_embed_.collect("encoder.patch_embed", out);
  out.push_back({"encoder.pos_embed", pos_embed_, nn::ParamKind::embedding, 0});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "encoder.block" + std::to_string(i);
    blocks_[i].norm1.collect(p + ".norm1", out);
    blocks_[i].qkv.collect(p + ".attn.qkv", out);
    blocks_[i].proj.collect(p + ".attn.proj", out);
    blocks_[i].norm2.collect(p + ".norm2", out);
    blocks_[i].fc1.collect(p + ".mlp.fc1", out);
    blocks_[i].fc2.collect(p + ".mlp.fc2", out);
  }
  encoder_norm_.collect("encoder.norm", out);
  for (std::size_t i = 0; i < sig_blocks_.size(); ++i) {
    sig_blocks_[i].collect("vessel.sig" + std::to_string(i + 1), out);
  }
  bottleneck_proj_.collect("decoder.bottleneck", out);
  for (std::size_t i = 0; i < mff_blocks_.size(); ++i) {
    mff_blocks_[i].collect("decoder.mff" + std::to_string(i + 1), out);
  }
  for (std::size_t i = 0; i < plain_stages_.size(); ++i) {
    const std::string p = "decoder.plain" + std::to_string(i + 1);
    plain_stages_[i].conv1.collect(p + ".conv1", out);
    plain_stages_[i].conv2.collect(p + ".conv2", out);
  }
  if (!mff_blocks_.empty()) head_conv1_.collect("head.conv1", out);
  head_conv2_.collect("head.conv2", out);
  return out;
}

std::int64_t BilateralViT::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

std::vector<int> BilateralViT::mff_mid_channels() const {
  std::vector<int> out;
  for (const auto& b : mff_blocks_) out.push_back(b.mid_channels());
  return out;
}

std::vector<int> BilateralViT::mff_depths() const {
  std::vector<int> out;
  for (const auto& b : mff_blocks_) out.push_back(b.depth());
  return out;
}

BilateralViT build_model(const NetworkConfig& config) { return BilateralViT(config); }

void init_weights(BilateralViT& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : model.parameters()) {
    auto values = p.tensor.values();
    switch (p.kind) {
      case nn::ParamKind::conv_weight:
      case nn::ParamKind::linear_weight: {
        std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(p.fan_in)));
        for (float& v : values) v = dist(rng);
        break;
      }
      case nn::ParamKind::norm_scale:
        std::fill(values.begin(), values.end(), 1.0f);
        break;
      case nn::ParamKind::bias:
      case nn::ParamKind::norm_shift:
      case nn::ParamKind::embedding:
        std::fill(values.begin(), values.end(), 0.0f);
        break;
    }
    p.tensor.zero_grad();
  }
}

}  // namespace bvit
