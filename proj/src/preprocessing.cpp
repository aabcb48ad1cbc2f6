#include "bvit/preprocessing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "bvit/error.hpp"

namespace bvit {

CropResult crop_black_background(const Image& image, float threshold) {
  int x0 = image.width, y0 = image.height, x1 = -1, y1 = -1;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      float mx = image.at(x, y, 0);
      for (int c = 1; c < image.channels; ++c) mx = std::max(mx, image.at(x, y, c));
      if (mx > threshold) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
    }
  }
  if (x1 < 0) return {image, {0, 0, image.width, image.height}};

  CropBox box{x0, y0, x1 + 1, y1 + 1};
  Image out(box.width(), box.height(), image.channels);
  for (int y = 0; y < box.height(); ++y) {
    const float* src = image.pixels.data() + image.index(box.x0, box.y0 + y);
    std::copy(src, src + static_cast<std::ptrdiff_t>(box.width()) * image.channels,
              out.pixels.data() + out.index(0, y));
  }
  return {std::move(out), box};
}

namespace {

// Samples `src` at (sx, sy) in the coordinates of a zero-padded canvas whose
// top-left holds src at offset (off_x, off_y). Indices clamp to the canvas.
float sample(const Image& src, int off_x, int off_y, int canvas_w, int canvas_h, double sx,
             double sy, int c, Interpolation interp) {
  auto fetch = [&](int ix, int iy) -> float {
    ix = std::clamp(ix, 0, canvas_w - 1) - off_x;
    iy = std::clamp(iy, 0, canvas_h - 1) - off_y;
    if (ix < 0 || iy < 0 || ix >= src.width || iy >= src.height) return 0.0f;
    return src.at(ix, iy, c);
  };
  if (interp == Interpolation::nearest) {
    return fetch(static_cast<int>(std::lround(sx)), static_cast<int>(std::lround(sy)));
  }
  const double fx = std::floor(sx);
  const double fy = std::floor(sy);
  const int ix = static_cast<int>(fx);
  const int iy = static_cast<int>(fy);
  const float ax = static_cast<float>(sx - fx);
  const float ay = static_cast<float>(sy - fy);
  const float top = fetch(ix, iy) * (1 - ax) + (ax > 0 ? fetch(ix + 1, iy) * ax : 0.0f);
  if (ay == 0.0f) return top;
  const float bot = fetch(ix, iy + 1) * (1 - ax) + (ax > 0 ? fetch(ix + 1, iy + 1) * ax : 0.0f);
  return top * (1 - ay) + bot * ay;
}

PreprocessTransform make_transform(const CropBox& box, int target_size) {
  PreprocessTransform t;
  t.crop = box;
  t.target_size = target_size;
  const int w = box.width();
  const int h = box.height();
  if (w < h) {
    t.pad.left = (h - w) / 2;
    t.pad.right = h - w - t.pad.left;
  } else if (h < w) {
    t.pad.top = (w - h) / 2;
    t.pad.bottom = w - h - t.pad.top;
  }
  t.scale = static_cast<double>(target_size) / std::max(w, h);
  return t;
}

Image resample(const Image& cropped, const PreprocessTransform& t, Interpolation interp) {
  const int canvas = std::max(t.crop.width(), t.crop.height());
  Image out(t.target_size, t.target_size, cropped.channels);
  for (int y = 0; y < t.target_size; ++y) {
    const double sy = y / t.scale;
    for (int x = 0; x < t.target_size; ++x) {
      const double sx = x / t.scale;
      for (int c = 0; c < cropped.channels; ++c) {
        out.at(x, y, c) = sample(cropped, t.pad.left, t.pad.top, canvas, canvas, sx, sy, c, interp);
      }
    }
  }
  return out;
}

}  // namespace

Preprocessed pad_and_resize(const Image& cropped, const CropBox& box, int target_size,
                            Interpolation interp) {
  if (box.x1 <= box.x0 || box.y1 <= box.y0) throw ConfigError("degenerate crop box");
  if (target_size <= 0) throw ConfigError("target_size must be positive");
  if (cropped.width != box.width() || cropped.height != box.height()) {
    throw ShapeError("cropped image does not match its crop box");
  }
  PreprocessTransform t = make_transform(box, target_size);
  return {resample(cropped, t, interp), t};
}

Preprocessed preprocess(const Image& original, int target_size) {
  CropResult crop = crop_black_background(original);
  return pad_and_resize(crop.image, crop.box, target_size);
}

Image warp_to_network(const Image& original, const PreprocessTransform& t, Interpolation interp) {
  t.validate();
  if (t.crop.x1 > original.width || t.crop.y1 > original.height || t.crop.x0 < 0 || t.crop.y0 < 0) {
    throw ShapeError("crop box lies outside the raster");
  }
  Image cropped(t.crop.width(), t.crop.height(), original.channels);
  for (int y = 0; y < cropped.height; ++y) {
    const float* src = original.pixels.data() + original.index(t.crop.x0, t.crop.y0 + y);
    std::copy(src, src + static_cast<std::ptrdiff_t>(cropped.width) * original.channels,
              cropped.pixels.data() + cropped.index(0, y));
  }
  return resample(cropped, t, interp);
}

Point2 transform_point(const PreprocessTransform& t, const Point2& p, Direction d) {
  return t.apply(p, d);
}

FoveaMask make_fovea_mask(const Point2& center, double radius, int width, int height) {
  if (!(radius > 0.0)) throw ConfigError("mask radius must be positive");
  FoveaMask out{Image(width, height, 1), false};
  out.center_outside =
      !(center.x >= 0 && center.x < width && center.y >= 0 && center.y < height);
  const int ylo = std::max(0, static_cast<int>(std::floor(center.y - radius)));
  const int yhi = std::min(height - 1, static_cast<int>(std::ceil(center.y + radius)));
  const int xlo = std::max(0, static_cast<int>(std::floor(center.x - radius)));
  const int xhi = std::min(width - 1, static_cast<int>(std::ceil(center.x + radius)));
  const double r2 = radius * radius;
  for (int y = ylo; y <= yhi; ++y) {
    for (int x = xlo; x <= xhi; ++x) {
      const double dx = x - center.x;
      const double dy = y - center.y;
      if (dx * dx + dy * dy <= r2) out.mask.at(x, y) = 1.0f;
    }
  }
  return out;
}

double default_mask_radius(double disc_radius_network, int target_size, double factor) {
  if (disc_radius_network > 0.0) return factor * disc_radius_network;
  return 32.0 * target_size / 512.0;
}

void to_json(nlohmann::json& j, const Normalization& n) {
  j = nlohmann::json{{"mean", n.mean}, {"std", n.std}};
}

void from_json(const nlohmann::json& j, Normalization& n) {
  n.mean = j.at("mean").get<std::array<float, 3>>();
  n.std = j.at("std").get<std::array<float, 3>>();
}

std::vector<float> normalize_intensity(const Image& image, const Normalization& norm) {
  if (image.channels != 3) throw ShapeError("normalize_intensity expects 3 channels");
  const std::size_t plane = static_cast<std::size_t>(image.width) * image.height;
  std::vector<float> out(plane * 3);
  for (int c = 0; c < 3; ++c) {
    const float inv = 1.0f / norm.std[c];
    for (std::size_t i = 0; i < plane; ++i) {
      const float v = (image.pixels[i * 3 + c] - norm.mean[c]) * inv;
      out[c * plane + i] = std::isfinite(v) ? v : 0.0f;
    }
  }
  return out;
}

std::vector<float> to_planar(const Image& image) {
  const std::size_t plane = static_cast<std::size_t>(image.width) * image.height;
  std::vector<float> out(plane * image.channels);
  for (int c = 0; c < image.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = image.pixels[i * image.channels + c];
  }
  return out;
}

// ----------------------------------------------------------------- augmentation

AugmentParams AugmentParams::sample(std::uint64_t seed, const AugmentConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto symmetric = [&](double m) { return (2.0 * unit(rng) - 1.0) * m; };
  AugmentParams p;
  p.flip = unit(rng) < cfg.flip_probability;
  p.rotation_deg = symmetric(cfg.max_rotation_deg);
  p.scale = 1.0 + symmetric(cfg.max_scale_jitter);
  p.brightness = symmetric(cfg.max_brightness);
  p.contrast = symmetric(cfg.max_contrast);
  return p;
}

Point2 AugmentGeometry::map(const Point2& p) const {
  const double cx = (width - 1) / 2.0;
  const double cy = (height - 1) / 2.0;
  const double fx = params.flip ? (width - 1) - p.x : p.x;
  const double th = params.rotation_deg * std::numbers::pi / 180.0;
  const double dx = fx - cx;
  const double dy = p.y - cy;
  return {cx + params.scale * (std::cos(th) * dx - std::sin(th) * dy),
          cy + params.scale * (std::sin(th) * dx + std::cos(th) * dy)};
}

Point2 AugmentGeometry::unmap(const Point2& q) const {
  const double cx = (width - 1) / 2.0;
  const double cy = (height - 1) / 2.0;
  const double th = params.rotation_deg * std::numbers::pi / 180.0;
  const double dx = (q.x - cx) / params.scale;
  const double dy = (q.y - cy) / params.scale;
  const double fx = cx + std::cos(th) * dx + std::sin(th) * dy;
  const double fy = cy - std::sin(th) * dx + std::cos(th) * dy;
  return {params.flip ? (width - 1) - fx : fx, fy};
}

namespace {

bool is_identity_geometry(const AugmentParams& p) {
  return !p.flip && p.rotation_deg == 0.0 && p.scale == 1.0;
}

Image warp(const Image& src, const AugmentGeometry& g, Interpolation interp) {
  if (src.empty()) return src;
  if (is_identity_geometry(g.params)) return src;
  Image out(src.width, src.height, src.channels);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      const Point2 s = g.unmap({static_cast<double>(x), static_cast<double>(y)});
      // Outside the source raster everything is background.
      if (s.x < -0.5 || s.y < -0.5 || s.x > src.width - 0.5 || s.y > src.height - 0.5) continue;
      for (int c = 0; c < src.channels; ++c) {
        out.at(x, y, c) = sample(src, 0, 0, src.width, src.height, s.x, s.y, c, interp);
      }
    }
  }
  return out;
}

}  // namespace

Augmented augment(const Image& image, const Image& mask, const Image& vessel,
                  const AugmentParams& params) {
  auto same_size = [&](const Image& other) {
    return other.empty() || (other.width == image.width && other.height == image.height);
  };
  if (!same_size(mask) || !same_size(vessel)) {
    throw ShapeError("augment: image, mask and vessel map must be spatially aligned");
  }
  AugmentGeometry geom{image.width, image.height, params};
  Augmented out{warp(image, geom, Interpolation::bilinear), warp(mask, geom, Interpolation::nearest),
                warp(vessel, geom, Interpolation::bilinear), geom};

  if (params.brightness != 0.0 || params.contrast != 0.0) {
    double mean = 0.0;
    for (float v : out.image.pixels) mean += v;
    mean /= std::max<std::size_t>(1, out.image.pixels.size());
    const double gain = 1.0 + params.brightness;
    const double contrast = 1.0 + params.contrast;
    const double pivot = mean * gain;
    for (float& v : out.image.pixels) {
      const double b = v * gain;
      v = static_cast<float>(std::clamp((b - pivot) * contrast + pivot, 0.0, 1.0));
    }
  }
  return out;
}

Augmented augment(const Image& image, const Image& mask, const Image& vessel, std::uint64_t seed,
                  const AugmentConfig& cfg) {
  return augment(image, mask, vessel, AugmentParams::sample(seed, cfg));
}

}  // namespace bvit
