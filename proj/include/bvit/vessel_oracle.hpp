#pragma once

// Vessel maps for the vessel branch: from a trained vessel model, from an
// on-disk cache, or from a synthetic branching-tree generator.
//
// Cache layout: <cache_dir>/<dataset>/<sample_id>.png, 8-bit grayscale with
// 255 = probability 1. A sidecar <sample_id>.json records the preprocessing
// fingerprint the map was computed under.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "bvit/checkpoint.hpp"
#include "bvit/network.hpp"
#include "bvit/preprocessing.hpp"
#include "bvit/training.hpp"

namespace bvit {

enum class VesselSource { model, cache, synthetic };

std::string_view to_string(VesselSource s);
VesselSource parse_vessel_source(std::string_view text);

// Cache root: $BILATERAL_CACHE when set, else `fallback`.
std::filesystem::path resolve_cache_dir(const std::filesystem::path& fallback);
std::filesystem::path cache_path(const std::filesystem::path& cache_dir, const std::string& dataset,
                                 const std::string& sample_id);

// Draws a binary vessel tree rooted at `disc` into `map` (1 channel). When
// `avoid` is set, branches bend away from it (arcades around the macula).
// Returns the foreground fraction.
double draw_vessel_tree(Image& map, const Point2& disc, const std::optional<Point2>& avoid,
                        std::mt19937_64& rng);

// size x size map in {0,1} with branching curves leaving a simulated disc.
// Deterministic in seed. Throws ConfigError if size <= 0.
VesselMap synth_vessels(int size, std::uint64_t seed);

class VesselOracle {
 public:
  struct Options {
    bool binarize = false;
    float binarize_threshold = 0.5f;
    // Model/synthetic maps are stored into cache_dir; the model source also
    // reuses a stored map whose preprocessing fingerprint matches.
    bool write_cache = false;
    // Zero model probabilities where the fundus image is black (outside the
    // field of view).
    bool fov_mask = true;
  };

  static VesselOracle synthetic(std::uint64_t seed, Options opts);
  static VesselOracle synthetic(std::uint64_t seed = 0) { return synthetic(seed, Options{}); }
  static VesselOracle cache(std::filesystem::path cache_dir, Options opts);
  static VesselOracle cache(std::filesystem::path cache_dir) { return cache(std::move(cache_dir), Options{}); }
  // Throws DataError if the checkpoint is not a 1-channel vit_plain model.
  static VesselOracle model(const Checkpoint& ckpt, Options opts);
  static VesselOracle model(const Checkpoint& ckpt) { return model(ckpt, Options{}); }

  VesselSource source() const { return source_; }
  const std::filesystem::path& cache_dir() const { return cache_dir_; }
  void set_cache_dir(std::filesystem::path dir) { cache_dir_ = std::move(dir); }

  // `network_image` is the preprocessed sample (3 channels, network size).
  // Returns a map of the same spatial size with values in [0,1]. A cache miss
  // throws DataError naming the id; a fingerprint mismatch with the cached
  // sidecar also throws DataError.
  VesselMap get(const std::string& dataset, const std::string& sample_id, const Image& network_image,
                const std::string& transform_fingerprint = {}) const;

  // Atomic write of a map into the cache.
  static void store(const std::filesystem::path& cache_dir, const std::string& dataset,
                    const std::string& sample_id, const VesselMap& map,
                    const std::string& transform_fingerprint = {});

 private:
  VesselOracle() = default;
  VesselMap finish(VesselMap m) const;

  VesselSource source_ = VesselSource::synthetic;
  Options opts_;
  std::uint64_t seed_ = 0;
  std::filesystem::path cache_dir_;
  std::shared_ptr<const BilateralViT> model_;
  Normalization model_norm_;
};

// Sets the map to 0 wherever every channel of `image` is at or below
// `threshold`. Sizes must match.
void apply_fov_mask(VesselMap& map, const Image& image, float threshold = kDarknessThreshold);

// Runs the vessel model on one network-resolution image.
VesselMap run_vessel_model(const BilateralViT& model, const Image& network_image,
                           const Normalization& norm);

struct VesselPair {
  std::string id;
  Image fundus;   // network resolution, 3 channels
  Image vessels;  // network resolution, 1 channel ground truth
};

// Trains a vit_plain model on fundus/vessel-ground-truth pairs with the
// standard training recipe. The checkpoints are tagged "kind": "vessel".
// Throws ConfigError on an empty dataset or a non-vit_plain config.
TrainResult train_vessel_model(BilateralViT& model, const std::vector<VesselPair>& pairs,
                               const TrainConfig& config, const TrainOptions& options);

// Mean dice coefficient (not loss) of thresholded predictions on the pairs.
double vessel_dice(const BilateralViT& model, const std::vector<VesselPair>& pairs,
                   const Normalization& norm);

}  // namespace bvit
