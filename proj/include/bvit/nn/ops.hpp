#pragma once

// Differentiable operations on NCHW feature maps and N x T x C token tensors.

#include <vector>

#include "bvit/nn/tensor.hpp"

namespace bvit::nn {

struct ConvGeometry {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

int conv_output_size(int in, int kernel, const ConvGeometry& g);

// x: N x C x H x W, weight: O x C x kh x kw, bias: O or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g);

// x: N x C x ...; gamma, beta: C.
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

// Normalizes over the last dimension. gamma, beta: C.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-6f);

// x: ... x in, weight: out x in, bias: out or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
// b's shape must equal the trailing dimensions of x's shape.
Tensor add_broadcast(const Tensor& x, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor mean(const Tensor& x);

// Concatenates N x Ci x H x W maps along the channel axis.
Tensor concat_channels(const std::vector<Tensor>& parts);

// 2x2 max pooling, stride 2, ceil mode (odd sizes keep their last row/column).
Tensor max_pool2x2(const Tensor& x);

// Bilinear resampling with half-pixel centers (align_corners = false).
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);

// N x C x H x W  <->  N x (H*W) x C, tokens in row-major spatial order.
Tensor nchw_to_tokens(const Tensor& x);
Tensor tokens_to_nchw(const Tensor& tokens, int h, int w);

// Scaled dot-product self-attention. qkv: N x T x 3C laid out as [q | k | v],
// each split into `heads` contiguous slices of C / heads. Returns N x T x C.
Tensor multi_head_attention(const Tensor& qkv, int heads);

// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps) per sample with p = sigmoid(logits),
// averaged over the batch (first) dimension.
Tensor soft_dice(const Tensor& logits, const Tensor& target, float eps = 1.0f);

// Mean binary cross-entropy on logits, in the stable softplus form.
Tensor bce_with_logits(const Tensor& logits, const Tensor& target);

}  // namespace bvit::nn
