#pragma once

// Manifest-driven dataset loading, train/test splitting, and a synthetic
// fundus generator producing the same on-disk layout as real adapters.
//
// Manifest CSV columns (header required, this order):
//   id,image_path,fovea_x,fovea_y,disc_radius_R,disease_status,split
// image_path is relative to the dataset root unless absolute.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bvit/core_types.hpp"
#include "bvit/preprocessing.hpp"
#include "bvit/vessel_oracle.hpp"

namespace bvit {

inline constexpr const char* kManifestHeader =
    "id,image_path,fovea_x,fovea_y,disc_radius_R,disease_status,split";

struct ManifestRow {
  std::string id;
  std::string image_path;
  double fovea_x = 0.0;
  double fovea_y = 0.0;
  double disc_radius = 0.0;
  DiseaseStatus disease = DiseaseStatus::normal;
  std::string split;
  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

// Reads rows without touching images. Malformed rows are reported in
// `problems` (with line numbers) and skipped. Throws DataError if the file is
// unreadable or the header is wrong.
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path, std::vector<std::string>* problems = nullptr);
// Shortest round-trip number formatting; fields with commas or quotes are quoted.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);

struct LoadOptions {
  std::optional<std::string> split;  // keep only rows with this split value
  std::string dataset_tag;           // defaults to the manifest directory name
};

struct LoadReport {
  std::size_t rows = 0;
  std::size_t loaded = 0;
  std::size_t skipped = 0;
  std::vector<std::string> problems;
};

struct LoadedDataset {
  std::vector<FundusSample> samples;
  LoadReport report;
};

// Loads and validates samples. Rows with missing images, malformed fields or
// failed validation are skipped and described in the report. Throws DataError
// if nothing survives.
LoadedDataset load_dataset(const std::filesystem::path& root_dir, const std::filesystem::path& manifest_csv,
                           const LoadOptions& options = {});

struct SplitScheme {
  enum class Kind { manifest, ratio };
  Kind kind = Kind::manifest;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;

  static SplitScheme from_manifest() { return {}; }
  static SplitScheme ratio(std::uint64_t seed, double train_fraction) {
    return {Kind::ratio, seed, train_fraction};
  }
};

struct Split {
  std::vector<FundusSample> train;
  std::vector<FundusSample> test;
};

// manifest: split == "train" goes to train, everything else to test.
// ratio: seeded shuffle stratified by disease status; round(frac * n) samples
// go to train, apportioned across strata by largest remainder.
// Throws DataError if either side ends up empty.
Split make_split(const std::vector<FundusSample>& samples, const SplitScheme& scheme);

// Per-channel mean/std over all pixels of the given (network-space) images.
Normalization compute_channel_stats(const std::vector<const Image*>& images);

// ----------------------------------------------------------------- vessel pairs

// Fundus / vessel ground-truth pairs listed in a CSV with the header
// id,image_path,vessel_path (paths relative to root_dir). Both rasters are
// mapped to network space with the fundus image's preprocessing transform.
// Throws DataError if the file is unreadable or no pair loads.
std::vector<VesselPair> load_vessel_pairs(const std::filesystem::path& root_dir,
                                          const std::filesystem::path& pairs_csv, int network_size);

// ----------------------------------------------------------------- synthetic

struct Lesion {
  Point2 center;
  double radius = 0.0;
  bool bright = false;  // atrophy-like pale patch vs. dark hemorrhage
};

struct SynthOptions {
  double disc_radius_min = 0.075;  // as a fraction of the image size
  double disc_radius_max = 0.095;
  double fovea_overlap_probability = 0.75;  // diseased samples
  double noise_sigma = 0.01;
  std::string dataset_tag = "synth";
};

struct SynthSample {
  FundusSample sample;   // image already quantized to 8 bits
  Image vessels;         // original resolution, {0,1}
  std::vector<Lesion> lesions;
  bool lesion_covers_fovea = false;
};

// Deterministic in (n, size, seed, options). Throws ConfigError unless n > 0
// and size is a positive multiple of 16.
std::vector<SynthSample> generate_synthetic(int n, int size, std::uint64_t seed, const SynthOptions& options = {});

struct SynthDataset {
  std::vector<SynthSample> samples;
  std::filesystem::path manifest;
  std::filesystem::path vessel_cache;  // <out>/vessel_cache
  std::filesystem::path vessel_pairs;  // <out>/vessels.csv
};

// Writes <out>/images/<id>.png, <out>/manifest.csv, network-space vessel
// maps at <out>/vessel_cache/<tag>/<id>.png, and the original-resolution
// vessel ground truth at <out>/vessels/<id>.png listed in <out>/vessels.csv. Output is byte-identical for the
// same arguments.
SynthDataset synth_dataset(int n, int size, std::uint64_t seed, const std::filesystem::path& out,
                           const SynthOptions& options = {});

}  // namespace bvit
