#pragma once

// From network logits to a fovea coordinate in original image space.

#include <filesystem>
#include <string>
#include <vector>

#include "bvit/network.hpp"
#include "bvit/preprocessing.hpp"

namespace bvit {

class VesselOracle;

// Elementwise sigmoid of an H x W logit plane (row-major).
ProbabilityMap scores_to_probmap(const Image& logits);
// Sigmoid of sample `index` of an N x 1 x H x W logit tensor.
ProbabilityMap scores_to_probmap(const Tensor& logits, int index = 0);

// Median of the values, averaging the two middle ones for even counts.
double median(std::vector<double> values);

struct FoveaEstimate {
  Point2 position;  // network pixels
  double confidence = 0.0;
  bool empty_set = false;
  std::size_t candidates = 0;
};

// Candidates are pixels with prob > threshold; the estimate is their per-axis
// median. With no candidates, the first argmax pixel (row-major) is returned
// and empty_set is set.
FoveaEstimate extract_fovea(const ProbabilityMap& prob, double threshold = 0.5);

struct Prediction {
  std::string id;
  Point2 position;  // original image pixels
  double confidence = 0.0;
  bool empty_set = false;
  Point2 network_position;
  std::size_t candidates = 0;
  PreprocessTransform transform;
};

struct PredictOptions {
  Normalization normalization;
  double threshold = 0.5;
};

// preprocess -> vessel map (vit_vb_* only) -> forward -> extract_fovea ->
// inverse transform. `vessels` may be null for variants that do not take a
// vessel map. Errors are rethrown with the sample id prepended.
Prediction predict(const BilateralViT& model, const FundusSample& sample, const VesselOracle* vessels,
                   const PredictOptions& options = {});

// One JSON object per line: {"id", "x", "y", "confidence", "empty_set_flag"}.
std::string to_json_line(const Prediction& p);
Prediction prediction_from_json_line(const std::string& line);
void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& preds);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);

}  // namespace bvit
