#pragma once

// Geometric normalization of fundus images (black-border crop, square pad,
// resize), fovea target masks, intensity normalization and train-time
// augmentation.

#include <array>
#include <cstdint>
#include <vector>

#include "bvit/core_types.hpp"

namespace bvit {

enum class Interpolation { bilinear, nearest };

inline constexpr float kDarknessThreshold = 10.0f / 255.0f;

struct CropResult {
  Image image;
  CropBox box;
};

// Tight box around pixels whose max channel exceeds `threshold`; the full
// image (identity box) if none does.
CropResult crop_black_background(const Image& image, float threshold = kDarknessThreshold);

struct Preprocessed {
  Image image;
  PreprocessTransform transform;
};

// Zero-pads the shorter side symmetrically (extra pixel at right/bottom) and
// resizes to target_size x target_size. `box` is where `cropped` sits in the
// original image. Throws ConfigError for a degenerate box or target_size <= 0.
Preprocessed pad_and_resize(const Image& cropped, const CropBox& box, int target_size,
                            Interpolation interp = Interpolation::bilinear);

// crop_black_background followed by pad_and_resize.
Preprocessed preprocess(const Image& original, int target_size);

// Resamples any raster registered with the original image (vessel maps,
// masks) into network space using an existing transform.
Image warp_to_network(const Image& original, const PreprocessTransform& t,
                      Interpolation interp = Interpolation::bilinear);

Point2 transform_point(const PreprocessTransform& t, const Point2& p, Direction d);

struct FoveaMask {
  Image mask;  // single channel, values in {0, 1}
  bool center_outside = false;
};

// Pixel (x, y) is 1 iff its center lies within `radius` of `center`.
// Throws ConfigError if radius <= 0.
FoveaMask make_fovea_mask(const Point2& center, double radius, int width, int height);
inline FoveaMask make_fovea_mask(const Point2& center, double radius, int size) {
  return make_fovea_mask(center, radius, size, size);
}

// R/4 in network pixels when R is known (> 0), else 32 px scaled to the
// network resolution (32 at 512).
double default_mask_radius(double disc_radius_network, int target_size, double factor = 0.25);

struct Normalization {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> std{0.25f, 0.25f, 0.25f};
  friend bool operator==(const Normalization&, const Normalization&) = default;
};

void to_json(nlohmann::json& j, const Normalization& n);
void from_json(const nlohmann::json& j, Normalization& n);

// Per-channel (x - mean) / std, returned planar (C x H x W) for the network.
std::vector<float> normalize_intensity(const Image& image, const Normalization& norm);

// Row-major single-channel image -> planar buffer (identity layout).
std::vector<float> to_planar(const Image& image);

// ----------------------------------------------------------------- augmentation

struct AugmentConfig {
  double flip_probability = 0.5;
  double max_rotation_deg = 15.0;
  double max_scale_jitter = 0.10;
  double max_brightness = 0.20;
  double max_contrast = 0.20;
};

struct AugmentParams {
  bool flip = false;
  double rotation_deg = 0.0;
  double scale = 1.0;
  double brightness = 0.0;  // multiplicative gain offset
  double contrast = 0.0;    // gain around the image mean

  static AugmentParams identity() { return {}; }
  static AugmentParams sample(std::uint64_t seed, const AugmentConfig& cfg = {});
};

// Geometry shared by the image, mask and vessel map: horizontal flip
// (x -> W - 1 - x) followed by rotation and scaling about the image center.
struct AugmentGeometry {
  int width = 0;
  int height = 0;
  AugmentParams params;
  Point2 map(const Point2& p) const;
  Point2 unmap(const Point2& q) const;
};

struct Augmented {
  Image image;
  Image mask;
  Image vessel;
  AugmentGeometry geometry;
};

// Applies one geometric transform to all three inputs (bilinear for image and
// vessel map, nearest for the mask) and photometric jitter to the image only.
// Inputs must share width and height; empty mask/vessel images pass through.
Augmented augment(const Image& image, const Image& mask, const Image& vessel,
                  const AugmentParams& params);
Augmented augment(const Image& image, const Image& mask, const Image& vessel, std::uint64_t seed,
                  const AugmentConfig& cfg = {});

}  // namespace bvit
