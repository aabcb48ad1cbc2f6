#pragma once

// Command implementations behind the bilateral-vit executable.
//
// Run configuration file (JSON). Every section and key is optional; missing
// keys take the defaults shown by `bilateral-vit show-config`.
//
//   {
//     "network":  { "variant": "vit_vb_mff", "toy_mode": true, "input_size": 64, ... },
//     "training": { "epochs": 200, "batch_size": 2, "lr0": 0.001, "lr_min": 1e-7,
//                   "seed": 0, "max_iterations": 0, "augment": true, ... },
//     "data":     { "split": "manifest", "train_fraction": 0.8, "split_seed": 0,
//                   "vessel_source": "cache", "cache_dir": "", "vessel_model": "",
//                   "binarize_vessels": false, "dataset_normalization": true }
//   }
//
// Precedence: defaults < config file < command-line flags. The vessel cache
// directory is the --cache-dir flag, else $BILATERAL_CACHE, else
// data.cache_dir, else <data>/vessel_cache.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "bvit/core_types.hpp"
#include "bvit/training.hpp"

namespace bvit::cli {

struct DataConfig {
  std::string split = "manifest";  // manifest | ratio
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
  std::string vessel_source = "cache";  // cache | model | synthetic
  std::string cache_dir;
  std::string vessel_model;
  bool binarize_vessels = false;
  bool dataset_normalization = true;  // per-channel stats of the training images
};

struct RunConfig {
  NetworkConfig network = NetworkConfig::defaults();
  TrainConfig training;
  DataConfig data;
};

void to_json(nlohmann::json& j, const RunConfig& c);
// Throws ConfigError on unknown sections/keys or malformed values.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
// First 8 hex digits of a hash of the resolved configuration.
std::string config_hash(const RunConfig& c);

struct DataLocation {
  std::filesystem::path root;
  std::filesystem::path manifest;  // defaults to <root>/manifest.csv
  std::string cache_dir_flag;
};

struct TrainOverrides {
  bool toy = false;  // replace the network section with the toy configuration
  std::optional<int> input_size;
  std::optional<std::string> variant;
  std::optional<int> epochs;
  std::optional<int> max_iterations;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> vessel_source;
  std::optional<std::string> vessel_model;
};

void apply_overrides(RunConfig& cfg, const TrainOverrides& o);

int cmd_make_synth(int n, int size, std::uint64_t seed, const std::filesystem::path& out);

int cmd_train(const std::optional<std::filesystem::path>& config_path, const DataLocation& data,
              const std::filesystem::path& out, const TrainOverrides& overrides,
              const std::optional<std::filesystem::path>& resume_dir);

struct EvalArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path predictions;  // eval only: score an existing predictions file instead
  DataLocation data;
  std::string thresholds = "messidor";
  std::filesystem::path report_dir;
  std::optional<std::string> split;
  std::optional<std::string> vessel_source;
  std::optional<std::string> vessel_model;
};

int cmd_eval(const EvalArgs& args);
int cmd_predict(const EvalArgs& args, const std::filesystem::path& out_jsonl);

struct AblateArgs {
  DataLocation data;
  std::filesystem::path out;
  std::optional<std::filesystem::path> config_path;
  TrainOverrides overrides;
  std::string thresholds = "messidor";
  int stop_after = 0;  // stop after this many variants (0 = all)
};

int cmd_ablate(const AblateArgs& args);

int cmd_train_vessel(const std::optional<std::filesystem::path>& config_path, const DataLocation& data,
                     const std::filesystem::path& out, const TrainOverrides& overrides);

int cmd_show_config(const std::optional<std::filesystem::path>& config_path);

}  // namespace bvit::cli
