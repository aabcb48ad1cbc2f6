#pragma once

// Loss functions, the cosine learning-rate schedule, Adam, and the training
// loop with best/last checkpointing and resume.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bvit/checkpoint.hpp"
#include "bvit/network.hpp"
#include "bvit/preprocessing.hpp"

namespace bvit {

class VesselOracle;

// ----------------------------------------------------------------- losses

// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps), p = sigmoid(logits),
// averaged over the batch. Throws ShapeError on mismatched shapes.
Tensor dice_loss(const Tensor& logits, const Tensor& target, float eps = 1.0f);
// Mean binary cross-entropy with logits.
Tensor bce_loss(const Tensor& logits, const Tensor& target);
// dice_loss + bce_loss with unit weights.
Tensor combined_loss(const Tensor& logits, const Tensor& target);

// ----------------------------------------------------------------- schedule

// lr_min + (lr0 - lr_min) (1 + cos(pi epoch / total_epochs)) / 2.
// Throws ConfigError unless 0 <= epoch <= total_epochs.
double lr_at(int epoch, int total_epochs = 200, double lr0 = 1e-3, double lr_min = 1e-7);

// ----------------------------------------------------------------- optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // One update of every parameter holding a gradient; gradients are cleared.
  void step(const nn::ParameterList& params, double lr);

  std::int64_t steps() const { return steps_; }

  // Moment buffers as named tensors ("adam.m.<param>", "adam.v.<param>").
  void save_state(Checkpoint& ckpt) const;
  void load_state(const Checkpoint& ckpt);

 private:
  struct Moments {
    std::vector<float> m;
    std::vector<float> v;
  };
  AdamConfig cfg_;
  std::int64_t steps_ = 0;
  std::map<std::string, Moments> state_;
};

// ----------------------------------------------------------------- loop

struct TrainConfig {
  int epochs = 200;
  int batch_size = 2;
  double lr0 = 1e-3;
  double lr_min = 1e-7;
  AdamConfig adam;
  std::uint64_t seed = 0;
  int max_iterations = 0;  // 0 = run all epochs
  bool augment = true;
  AugmentConfig augment_config;
  double mask_radius_factor = 0.25;  // mask radius = factor * R (network pixels)

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// One network-resolution training pair. `vessel` is empty for variants
// without a vessel-map input.
struct TrainingExample {
  std::string id;
  Image image;   // 3 channels in [0,1], before intensity normalization
  Image target;  // 1 channel, binary
  Image vessel;  // 1 channel in [0,1] or empty
};

// Preprocesses a sample to network space and builds its fovea mask of radius
// mask_radius_factor * R (R mapped to network pixels). The vessel map is
// fetched only for variants that take one; `vessels` may then not be null.
TrainingExample make_fovea_example(const FundusSample& sample, const NetworkConfig& config,
                                   const VesselOracle* vessels, double mask_radius_factor);
std::vector<TrainingExample> make_fovea_examples(const std::vector<FundusSample>& samples,
                                                 const NetworkConfig& config, const VesselOracle* vessels,
                                                 double mask_radius_factor);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

struct TrainOptions {
  std::filesystem::path run_dir;  // checkpoints + metrics.jsonl; empty = no files
  std::optional<std::filesystem::path> resume_from;
  Normalization normalization;
  nlohmann::json extra_meta = nlohmann::json::object();
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<double> iteration_losses;  // this invocation only
  int iterations = 0;                    // total, including resumed ones
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
};

inline constexpr const char* kLastCheckpointName = "checkpoint_last.bvit";
inline constexpr const char* kBestCheckpointName = "checkpoint_best.bvit";
inline constexpr const char* kMetricsLogName = "metrics.jsonl";

// Trains with shuffled mini-batches, Adam and a per-epoch cosine schedule.
// Throws ConfigError for an empty dataset or bad config and TrainingError
// (after writing nonfinite_dump.json into run_dir) if the loss diverges.
TrainResult train(BilateralViT& model, const std::vector<TrainingExample>& train_set,
                  const std::vector<TrainingExample>& val_set, const TrainConfig& config,
                  const TrainOptions& options);

// Assembles N x C x S x S batches.
Tensor batch_images(const std::vector<const Image*>& images, const Normalization& norm);
Tensor batch_planes(const std::vector<const Image*>& planes);

// Mean combined loss over a set without augmentation or gradients.
double evaluate_loss(const BilateralViT& model, const std::vector<TrainingExample>& set,
                     const Normalization& norm, int batch_size);

}  // namespace bvit
