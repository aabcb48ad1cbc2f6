#include "bvit/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "bvit/error.hpp"
#include "bvit/training.hpp"
#include "bvit/vessel_oracle.hpp"

namespace bvit {
namespace {

float sigmoid(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

}  // namespace

ProbabilityMap scores_to_probmap(const Image& logits) {
  if (logits.channels != 1) throw ShapeError("logit map must have one channel");
  ProbabilityMap p{logits};
  for (float& v : p.scores.pixels) v = sigmoid(v);
  return p;
}

ProbabilityMap scores_to_probmap(const Tensor& logits, int index) {
  if (logits.ndim() != 4 || logits.dim(1) != 1) {
    throw ShapeError("expected N x 1 x H x W logits, got " + nn::shape_str(logits.shape()));
  }
  if (index < 0 || index >= logits.dim(0)) throw ShapeError("batch index out of range");
  const int h = logits.dim(2), w = logits.dim(3);
  Image plane(w, h, 1);
  const float* src = logits.data() + static_cast<std::size_t>(index) * h * w;
  std::copy(src, src + plane.pixels.size(), plane.pixels.begin());
  return scores_to_probmap(plane);
}

double median(std::vector<double> values) {
  if (values.empty()) throw DataError("median of an empty set");
  const std::size_t n = values.size();
  const auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(values.begin(), mid, values.end());
  const double upper = *mid;
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), mid);
  return 0.5 * (lower + upper);
}

FoveaEstimate extract_fovea(const ProbabilityMap& prob, double threshold) {
  const Image& s = prob.scores;
  if (s.empty() || s.channels != 1) throw ShapeError("probability map must be a non-empty single plane");
  std::vector<double> xs, ys;
  double sum = 0.0;
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const float v = s.at(x, y);
      if (v > threshold) {
        xs.push_back(x);
        ys.push_back(y);
        sum += v;
      }
    }
  }
  FoveaEstimate e;
  e.candidates = xs.size();
  if (!xs.empty()) {
    e.confidence = sum / static_cast<double>(xs.size());
    e.position = {median(std::move(xs)), median(std::move(ys))};
    return e;
  }
  const auto best = std::max_element(s.pixels.begin(), s.pixels.end());
  const auto idx = static_cast<int>(best - s.pixels.begin());
  e.position = {static_cast<double>(idx % s.width), static_cast<double>(idx / s.width)};
  e.confidence = *best;
  e.empty_set = true;
  return e;
}

Prediction predict(const BilateralViT& model, const FundusSample& sample, const VesselOracle* vessels,
                   const PredictOptions& options) {
  try {
    const int size = model.config().input_size;
    const Preprocessed pre = preprocess(sample.image, size);
    const Tensor x = batch_images({&pre.image}, options.normalization);
    Tensor logits;
    {
      nn::NoGradGuard no_grad;
      const Variant v = model.variant();
      if (v == Variant::vit_vb_plain || v == Variant::vit_vb_mff) {
        if (!vessels) throw ConfigError("variant " + std::string(to_string(v)) + " needs a vessel map source");
        const VesselMap vm = vessels->get(sample.dataset_tag, sample.id, pre.image, pre.transform.fingerprint());
        logits = model.forward(x, batch_planes({&vm.map}));
      } else {
        logits = model.forward(x);
      }
    }
    const FoveaEstimate e = extract_fovea(scores_to_probmap(logits, 0), options.threshold);
    Prediction p;
    p.id = sample.id;
    p.network_position = e.position;
    p.position = pre.transform.inverse(e.position);
    p.confidence = e.confidence;
    p.empty_set = e.empty_set;
    p.candidates = e.candidates;
    p.transform = pre.transform;
    return p;
  } catch (const ConfigError& e) {
    throw ConfigError("sample '" + sample.id + "': " + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError("sample '" + sample.id + "': " + e.what());
  } catch (const DataError& e) {
    throw DataError("sample '" + sample.id + "': " + e.what());
  } catch (const Error& e) {
    throw Error("sample '" + sample.id + "': " + e.what());
  }
}

std::string to_json_line(const Prediction& p) {
  return nlohmann::json{{"id", p.id},
                        {"x", p.position.x},
                        {"y", p.position.y},
                        {"confidence", p.confidence},
                        {"empty_set_flag", p.empty_set}}
      .dump();
}

Prediction prediction_from_json_line(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    Prediction p;
    p.id = j.at("id").get<std::string>();
    p.position = {j.at("x").get<double>(), j.at("y").get<double>()};
    p.confidence = j.at("confidence").get<double>();
    p.empty_set = j.at("empty_set_flag").get<bool>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed prediction record: ") + e.what());
  }
}

void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& preds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write predictions to '" + path.string() + "'");
  for (const auto& p : preds) os << to_json_line(p) << '\n';
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read predictions from '" + path.string() + "'");
  std::vector<Prediction> out;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) out.push_back(prediction_from_json_line(line));
  }
  return out;
}

}  // namespace bvit
