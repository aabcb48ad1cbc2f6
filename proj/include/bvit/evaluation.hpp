#pragma once

// Localization scoring under the R-rule: a prediction is a hit at multiplier
// k when its distance to the ground truth is at most k * R, with R the
// sample's optic-disc radius. Results are stratified into normal/diseased.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "bvit/core_types.hpp"
#include "bvit/inference.hpp"

namespace bvit {

// Inclusive: distance == multiplier * R is a hit. Throws ConfigError if R <= 0.
bool is_hit(const Point2& gt, const Point2& pred, double R, double multiplier);
inline bool is_hit(const Point2& gt, const Point2& pred, double R, const Multiplier& m) {
  return is_hit(gt, pred, R, m.value());
}

// "1/8R", "2/3R", "1R", "2R" (trailing R optional). Throws ConfigError.
Multiplier parse_multiplier(std::string_view text);

struct GroundTruth {
  std::string id;
  Point2 fovea;  // original pixels
  double disc_radius = 0.0;
  DiseaseStatus disease = DiseaseStatus::normal;
};

std::vector<GroundTruth> ground_truth_of(const std::vector<FundusSample>& samples);

// Throws DataError listing every sample id without a prediction, and
// ConfigError for invalid thresholds or a non-positive R.
EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& truth,
                    const EvalThresholds& thresholds);
EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<FundusSample>& samples,
                    const EvalThresholds& thresholds);

struct EvalRun {
  EvalReport report;
  std::vector<Prediction> predictions;
};

// Predicts every sample with `model` and scores the result. The report is
// tagged with the dataset the model was trained on and the tested one.
EvalRun cross_dataset_eval(const BilateralViT& model, const std::vector<FundusSample>& samples,
                           const VesselOracle* vessels, const PredictOptions& options,
                           const EvalThresholds& thresholds, const std::string& train_dataset,
                           const std::string& test_dataset);

// Text table with one row per stratum and one column per multiplier plus the
// mean pixel error. PALM-preset accuracies print as integers, others with
// two decimals.
std::string format_report_text(const EvalReport& report);

// CSV: multiplier,stratum,hits,total,accuracy_pct (one row per pair).
std::string format_report_csv(const EvalReport& report);
// Recovers results, totals and (when the multipliers match a preset) the
// preset name. Throws DataError on malformed input.
EvalReport parse_report_csv(const std::string& text);

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

// Accuracy-vs-multiplier line plot, one line per stratum.
void plot_report(const EvalReport& report, const std::filesystem::path& path);

enum class ReportFormat { text, csv, plot, json };

// Writes report.txt / report.csv / report.png / report.json into `dir` for the
// requested formats and returns the paths written. Throws DataError if the
// directory cannot be written.
std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& dir,
                                               const std::vector<ReportFormat>& formats = {
                                                   ReportFormat::text, ReportFormat::csv, ReportFormat::plot,
                                                   ReportFormat::json});

}  // namespace bvit
