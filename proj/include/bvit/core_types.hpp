#pragma once

// Shared domain types. Coordinates are (x, y) in pixels, x to the right,
// y downward, with the origin at the center of the top-left pixel.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace bvit {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

double distance(const Point2& a, const Point2& b);

// Dense H x W x C float raster, interleaved channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c),
        pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  bool empty() const { return pixels.empty(); }
  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  float& at(int x, int y, int c = 0) { return pixels[index(x, y, c)]; }
  float at(int x, int y, int c = 0) const { return pixels[index(x, y, c)]; }
  friend bool operator==(const Image&, const Image&) = default;
};

enum class DiseaseStatus { normal, diseased };

std::string_view to_string(DiseaseStatus s);
DiseaseStatus parse_disease_status(std::string_view text);

struct FundusSample {
  std::string id;
  Image image;  // H x W x 3, intensities in [0,1] (loaders normalize 8-bit data)
  Point2 fovea;
  double disc_radius = 0.0;  // optic-disc radius R in original pixels
  DiseaseStatus disease = DiseaseStatus::normal;
  std::string dataset_tag;
  std::string split;
};

// Returns human-readable descriptions of every violated invariant.
std::vector<std::string> validate_sample(const FundusSample& sample);

// Half-open pixel box [x0, x1) x [y0, y1).
struct CropBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  friend bool operator==(const CropBox&, const CropBox&) = default;
};

struct Padding {
  int left = 0, top = 0, right = 0, bottom = 0;
  friend bool operator==(const Padding&, const Padding&) = default;
};

enum class Direction { forward, inverse };

// Original-image <-> network-input mapping produced by preprocessing:
// network = (original - crop origin + pad offset) * scale.
struct PreprocessTransform {
  CropBox crop;
  Padding pad;
  double scale = 1.0;  // target_size / padded_size
  int target_size = 512;

  static PreprocessTransform identity(int size);

  Point2 forward(const Point2& p) const;
  Point2 inverse(const Point2& p) const;
  Point2 apply(const Point2& p, Direction d) const {
    return d == Direction::forward ? forward(p) : inverse(p);
  }
  // Throws ConfigError on a degenerate crop box or non-positive size/scale.
  void validate() const;
  std::string fingerprint() const;

  friend bool operator==(const PreprocessTransform&, const PreprocessTransform&) = default;
};

// Single-channel map in [0,1] registered to the network input.
struct VesselMap {
  Image map;
};

// Post-sigmoid per-pixel fovea-region scores in [0,1].
struct ProbabilityMap {
  Image scores;
};

// ----------------------------------------------------------------- network

enum class Variant { vit_plain, vit_vb_plain, vit_vb_mff, vit_vbfundus_mff };

std::string_view to_string(Variant v);
// Throws ConfigError listing the valid names.
Variant parse_variant(std::string_view name);
const std::array<Variant, 4>& all_variants();
// Row label used in ablation tables.
std::string_view table_label(Variant v);
bool has_vessel_branch(Variant v);
bool has_mff_decoder(Variant v);
// Channel count the vessel branch consumes (0 if there is no vessel branch).
int vessel_input_channels(Variant v);

struct NetworkConfig {
  Variant variant = Variant::vit_vb_mff;
  int input_size = 512;
  int in_channels = 3;
  int transformer_blocks = 12;
  int transformer_hidden_dim = 768;
  int attention_heads = 12;
  int mlp_ratio = 4;
  int patch_grid = 32;  // tokens per side, input_size / 16
  std::vector<int> cnn_stage_channels{64, 128, 256};
  int bottleneck_channels = 512;
  std::array<int, 3> decoder_channels{256, 128, 64};
  std::array<int, 3> mff_mid_channels{128, 64, 32};
  std::array<int, 3> mff_depths{4, 5, 6};
  int sig_block_count = 4;
  int sig_depth = 4;
  int sig_mid_channels = 32;
  int sig_out_channels = 64;
  int head_channels = 16;
  bool toy_mode = false;

  static constexpr int kEncoderStride = 16;

  static NetworkConfig defaults(Variant v = Variant::vit_vb_mff);
  // Small configuration for desk-scale runs (input 64, 2 transformer blocks).
  static NetworkConfig toy(Variant v = Variant::vit_vb_mff, int input_size = 64);

  // Empty iff the configuration is buildable.
  std::vector<std::string> problems() const;
  // Throws ConfigError joining problems().
  void validate() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

// ----------------------------------------------------------------- evaluation

// Threshold multiplier k of the optic-disc radius, stored as a fraction so
// labels like "2/3R" stay exact.
struct Multiplier {
  int num = 1;
  int den = 1;
  double value() const { return static_cast<double>(num) / den; }
  std::string label() const;  // "1/8R", "1R", "2R", ...
  friend bool operator==(const Multiplier&, const Multiplier&) = default;
};

struct EvalThresholds {
  std::string name;
  std::vector<Multiplier> multipliers;

  static EvalThresholds messidor();
  static EvalThresholds palm();
  // "messidor" | "palm"; throws ConfigError otherwise.
  static EvalThresholds preset(std::string_view name);

  // Throws ConfigError unless strictly increasing and positive.
  void validate() const;
};

enum class Stratum { overall, normal, diseased };
std::string_view to_string(Stratum s);
Stratum parse_stratum(std::string_view text);
inline constexpr std::array<Stratum, 3> kStrata{Stratum::overall, Stratum::normal, Stratum::diseased};

struct StratumCounts {
  int overall = 0;
  int normal = 0;
  int diseased = 0;
  int get(Stratum s) const;
  int& get(Stratum s);
  friend bool operator==(const StratumCounts&, const StratumCounts&) = default;
};

struct ThresholdResult {
  Multiplier multiplier;
  StratumCounts hits;
  friend bool operator==(const ThresholdResult&, const ThresholdResult&) = default;
};

struct EvalReport {
  std::string preset;
  std::string train_dataset;
  std::string test_dataset;
  StratumCounts totals;
  std::vector<ThresholdResult> results;  // one per multiplier, increasing
  double mean_pixel_error = 0.0;         // original-resolution pixels

  // 100 * hits / total; 0 when the stratum is empty.
  double accuracy(std::size_t threshold_index, Stratum s) const;
};

}  // namespace bvit
