#include "bvit/vessel_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>

#include <opencv2/imgproc.hpp>

#include "bvit/error.hpp"
#include "bvit/image.hpp"
#include "bvit/inference.hpp"
#include "bvit/seed.hpp"

namespace bvit {

std::string_view to_string(VesselSource s) {
  switch (s) {
    case VesselSource::model: return "model";
    case VesselSource::cache: return "cache";
    case VesselSource::synthetic: return "synthetic";
  }
  return "?";
}

VesselSource parse_vessel_source(std::string_view text) {
  if (text == "model") return VesselSource::model;
  if (text == "cache") return VesselSource::cache;
  if (text == "synthetic") return VesselSource::synthetic;
  throw ConfigError("unknown vessel source '" + std::string(text) + "' (valid: model, cache, synthetic)");
}

std::filesystem::path resolve_cache_dir(const std::filesystem::path& fallback) {
  if (const char* env = std::getenv("BILATERAL_CACHE"); env && *env) return env;
  return fallback;
}

std::filesystem::path cache_path(const std::filesystem::path& cache_dir, const std::string& dataset,
                                 const std::string& sample_id) {
  return cache_dir / (dataset.empty() ? std::string("default") : dataset) / (sample_id + ".png");
}

// ----------------------------------------------------------------- generator

namespace {

struct Branch {
  Point2 p;
  double heading;
  double width;   // vessel diameter in pixels
  double length;  // remaining path length in pixels
  int depth;
};

constexpr double kPi = 3.14159265358979323846;
constexpr double kMinFraction = 0.02;
constexpr double kMaxFraction = 0.19;

class TreePainter {
 public:
  TreePainter(Image& map, double cap) : map_(map), cap_(cap) {
    for (float v : map.pixels) set_ += v > 0.5f ? 1 : 0;
  }

  bool full() const { return static_cast<double>(set_) >= cap_; }
  std::int64_t set_count() const { return set_; }

  void stamp(const Point2& p, double width) {
    const double r = width / 2.0;
    const int x0 = static_cast<int>(std::floor(p.x - r)), x1 = static_cast<int>(std::ceil(p.x + r));
    const int y0 = static_cast<int>(std::floor(p.y - r)), y1 = static_cast<int>(std::ceil(p.y + r));
    for (int y = std::max(0, y0); y <= std::min(map_.height - 1, y1); ++y) {
      for (int x = std::max(0, x0); x <= std::min(map_.width - 1, x1); ++x) {
        const double dx = x - p.x, dy = y - p.y;
        if (dx * dx + dy * dy <= r * r) set(x, y);
      }
    }
    const int cx = static_cast<int>(std::lround(p.x)), cy = static_cast<int>(std::lround(p.y));
    if (cx >= 0 && cy >= 0 && cx < map_.width && cy < map_.height) set(cx, cy);
  }

 private:
  void set(int x, int y) {
    if (full()) return;
    float& v = map_.at(x, y);
    if (v < 0.5f) {
      v = 1.0f;
      ++set_;
    }
  }

  Image& map_;
  double cap_;
  std::int64_t set_ = 0;
};

}  // namespace

double draw_vessel_tree(Image& map, const Point2& disc, const std::optional<Point2>& avoid,
                        std::mt19937_64& rng) {
  if (map.channels != 1 || map.empty()) throw ShapeError("vessel tree needs a non-empty 1-channel map");
  const double s = std::min(map.width, map.height);
  const double total = static_cast<double>(map.width) * map.height;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> wobble(0.0, 0.07);
  auto uniform = [&](double a, double b) { return a + (b - a) * u(rng); };
  const double step = std::max(0.5, s * 0.005);
  const double deg = kPi / 180.0;

  TreePainter painter(map, kMaxFraction * total);
  std::vector<Branch> pending;
  const double base = avoid ? std::atan2(avoid->y - disc.y, avoid->x - disc.x) : uniform(-kPi, kPi);
  const double avoid_radius = avoid ? 0.45 * distance(disc, *avoid) : 0.0;

  auto main_branch = [&](double heading) {
    pending.push_back({disc, heading, std::max(1.0, s * uniform(0.010, 0.014)), s * uniform(0.55, 0.85), 0});
  };
  for (double sign : {-1.0, 1.0}) main_branch(base + sign * uniform(25.0, 45.0) * deg);
  for (double sign : {-1.0, 1.0}) main_branch(base + kPi + sign * uniform(20.0, 60.0) * deg);
  if (u(rng) < 0.5) main_branch(base + kPi + uniform(-15.0, 15.0) * deg);

  auto grow = [&](Branch b) {
    const double initial = b.length;
    while (b.length > 0.0 && !painter.full()) {
      painter.stamp(b.p, b.width);
      b.heading += wobble(rng);
      double dx = std::cos(b.heading), dy = std::sin(b.heading);
      if (avoid) {
        const double ax = b.p.x - avoid->x, ay = b.p.y - avoid->y;
        const double d = std::hypot(ax, ay);
        const double push = d > 1e-9 ? std::max(0.0, (1.5 * avoid_radius - d) / avoid_radius) : 0.0;
        if (push > 0.0) {
          dx += 0.6 * push * ax / d;
          dy += 0.6 * push * ay / d;
          b.heading = std::atan2(dy, dx);
          dx = std::cos(b.heading);
          dy = std::sin(b.heading);
        }
      }
      b.p.x += step * dx;
      b.p.y += step * dy;
      b.length -= step;
      b.width = std::max(1.0, b.width * (1.0 - 0.25 * step / initial));
      if (b.p.x < -2.0 || b.p.y < -2.0 || b.p.x > map.width + 1.0 || b.p.y > map.height + 1.0) break;
      if (b.depth < 3 && u(rng) < step / (s * 0.10)) {
        const double side = u(rng) < 0.5 ? -1.0 : 1.0;
        pending.push_back({b.p, b.heading + side * uniform(25.0, 55.0) * deg, b.width * uniform(0.6, 0.75),
                           b.length * uniform(0.4, 0.8), b.depth + 1});
        b.width *= 0.9;
      }
    }
  };

  for (std::size_t i = 0; i < pending.size(); ++i) grow(pending[i]);
  for (int extra = 0; extra < 32 && painter.set_count() < kMinFraction * total; ++extra) {
    const std::size_t from = pending.size();
    main_branch(uniform(-kPi, kPi));
    for (std::size_t i = from; i < pending.size(); ++i) grow(pending[i]);
  }
  return static_cast<double>(painter.set_count()) / total;
}

namespace {

Image synth_vessel_plane(int width, int height, std::uint64_t seed) {
  if (width <= 0 || height <= 0) throw ConfigError("vessel map size must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double s = std::min(width, height);
  const double side = u(rng) < 0.5 ? -1.0 : 1.0;
  const Point2 disc{width / 2.0 + side * s * (0.18 + 0.08 * u(rng)), height / 2.0 + s * (u(rng) - 0.5) * 0.12};
  const Point2 fovea{disc.x - side * s * (0.28 + 0.04 * u(rng)), disc.y + s * (u(rng) - 0.5) * 0.06};
  Image map(width, height, 1);
  draw_vessel_tree(map, disc, fovea, rng);
  return map;
}

Image resize_plane(const Image& src, int width, int height, int interp) {
  cv::Mat in(src.height, src.width, src.channels == 3 ? CV_32FC3 : CV_32FC1,
             const_cast<float*>(src.pixels.data()));
  cv::Mat out;
  cv::resize(in, out, cv::Size(width, height), 0, 0, interp);
  Image r(width, height, src.channels);
  std::copy(out.ptr<float>(), out.ptr<float>() + r.pixels.size(), r.pixels.begin());
  return r;
}

}  // namespace

VesselMap synth_vessels(int size, std::uint64_t seed) {
  if (size <= 0) throw ConfigError("synth_vessels: size must be positive");
  return {synth_vessel_plane(size, size, seed)};
}

// ----------------------------------------------------------------- oracle

VesselOracle VesselOracle::synthetic(std::uint64_t seed, Options opts) {
  VesselOracle o;
  o.source_ = VesselSource::synthetic;
  o.seed_ = seed;
  o.opts_ = opts;
  return o;
}

VesselOracle VesselOracle::cache(std::filesystem::path cache_dir, Options opts) {
  VesselOracle o;
  o.source_ = VesselSource::cache;
  o.cache_dir_ = std::move(cache_dir);
  o.opts_ = opts;
  return o;
}

VesselOracle VesselOracle::model(const Checkpoint& ckpt, Options opts) {
  if (ckpt.config.variant != Variant::vit_plain) {
    throw DataError("vessel model checkpoint must hold a vit_plain network, found " +
                    std::string(to_string(ckpt.config.variant)));
  }
  if (ckpt.meta.contains("kind") && ckpt.meta["kind"] != "vessel") {
    throw DataError("checkpoint is not a vessel model (kind " + ckpt.meta["kind"].dump() + ")");
  }
  VesselOracle o;
  o.source_ = VesselSource::model;
  o.opts_ = opts;
  o.model_ = std::make_shared<const BilateralViT>(model_from_checkpoint(ckpt));
  if (ckpt.meta.contains("normalization")) o.model_norm_ = ckpt.meta["normalization"].get<Normalization>();
  return o;
}

VesselMap VesselOracle::finish(VesselMap m) const {
  if (opts_.binarize) {
    for (float& v : m.map.pixels) v = v > opts_.binarize_threshold ? 1.0f : 0.0f;
  }
  return m;
}

VesselMap VesselOracle::get(const std::string& dataset, const std::string& sample_id,
                            const Image& network_image, const std::string& transform_fingerprint) const {
  if (network_image.empty()) throw ShapeError("vessel map requested for an empty image");
  const int w = network_image.width, h = network_image.height;
  switch (source_) {
    case VesselSource::synthetic: {
      const auto seed = mix_seed({seed_, hash_string(dataset), hash_string(sample_id)});
      VesselMap m{synth_vessel_plane(w, h, seed)};
      if (opts_.write_cache && !cache_dir_.empty()) store(cache_dir_, dataset, sample_id, m, transform_fingerprint);
      return finish(std::move(m));
    }
    case VesselSource::cache: {
      const auto path = cache_path(cache_dir_, dataset, sample_id);
      if (!std::filesystem::exists(path)) {
        throw DataError("vessel cache miss for sample '" + sample_id + "' (expected " + path.string() + ")");
      }
      if (!transform_fingerprint.empty()) {
        auto side = path;
        side.replace_extension(".json");
        if (std::ifstream is(side); is) {
          const auto j = nlohmann::json::parse(is, nullptr, false);
          if (!j.is_discarded() && j.contains("preprocess") && j["preprocess"] != transform_fingerprint) {
            throw DataError("cached vessel map for sample '" + sample_id +
                            "' was computed under different preprocessing");
          }
        }
      }
      VesselMap m{load_image(path, true)};
      if (m.map.width != w || m.map.height != h) {
        throw DataError("cached vessel map for sample '" + sample_id + "' is " + std::to_string(m.map.width) +
                        "x" + std::to_string(m.map.height) + ", expected " + std::to_string(w) + "x" +
                        std::to_string(h));
      }
      return finish(std::move(m));
    }
    case VesselSource::model: {
      if (!model_) throw DataError("vessel model unavailable");
      if (opts_.write_cache && !cache_dir_.empty() && !transform_fingerprint.empty()) {
        const auto path = cache_path(cache_dir_, dataset, sample_id);
        auto side = path;
        side.replace_extension(".json");
        if (std::filesystem::exists(path) && std::filesystem::exists(side)) {
          std::ifstream is(side);
          const auto j = nlohmann::json::parse(is, nullptr, false);
          if (!j.is_discarded() && j.value("preprocess", std::string()) == transform_fingerprint) {
            VesselMap m{load_image(path, true)};
            if (m.map.width == w && m.map.height == h) return finish(std::move(m));
          }
        }
      }
      const int s = model_->config().input_size;
      VesselMap m;
      if (w == s && h == s) {
        m = run_vessel_model(*model_, network_image, model_norm_);
      } else {
        m = run_vessel_model(*model_, resize_plane(network_image, s, s, cv::INTER_LINEAR), model_norm_);
        m.map = resize_plane(m.map, w, h, cv::INTER_LINEAR);
        for (float& v : m.map.pixels) v = std::clamp(v, 0.0f, 1.0f);
      }
      if (opts_.fov_mask) apply_fov_mask(m, network_image);
      if (opts_.write_cache && !cache_dir_.empty()) store(cache_dir_, dataset, sample_id, m, transform_fingerprint);
      return finish(std::move(m));
    }
  }
  throw DataError("unknown vessel source");
}

void VesselOracle::store(const std::filesystem::path& cache_dir, const std::string& dataset,
                         const std::string& sample_id, const VesselMap& map,
                         const std::string& transform_fingerprint) {
  const auto path = cache_path(cache_dir, dataset, sample_id);
  std::filesystem::create_directories(path.parent_path());
  save_image_atomic(path, map.map);
  if (!transform_fingerprint.empty()) {
    auto side = path;
    side.replace_extension(".json");
    auto tmp = side;
    tmp += ".tmp";
    {
      std::ofstream os(tmp, std::ios::trunc);
      if (!os) throw DataError("cannot write '" + tmp.string() + "'");
      os << nlohmann::json{{"preprocess", transform_fingerprint}}.dump() << '\n';
    }
    std::filesystem::rename(tmp, side);
  }
}

// ----------------------------------------------------------------- vessel model

void apply_fov_mask(VesselMap& map, const Image& image, float threshold) {
  if (map.map.width != image.width || map.map.height != image.height || map.map.channels != 1) {
    throw ShapeError("FOV mask: vessel map and image sizes differ");
  }
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      float peak = 0.0f;
      for (int c = 0; c < image.channels; ++c) peak = std::max(peak, image.at(x, y, c));
      if (peak <= threshold) map.map.at(x, y) = 0.0f;
    }
  }
}

VesselMap run_vessel_model(const BilateralViT& model, const Image& network_image, const Normalization& norm) {
  nn::NoGradGuard no_grad;
  const Tensor logits = model.forward(batch_images({&network_image}, norm));
  return {scores_to_probmap(logits, 0).scores};
}

TrainResult train_vessel_model(BilateralViT& model, const std::vector<VesselPair>& pairs,
                               const TrainConfig& config, const TrainOptions& options) {
  if (pairs.empty()) throw ConfigError("vessel training set is empty");
  if (model.variant() != Variant::vit_plain) {
    throw ConfigError("the vessel model uses the vit_plain variant");
  }
  std::vector<TrainingExample> examples;
  for (const auto& p : pairs) {
    TrainingExample ex;
    ex.id = p.id;
    ex.image = p.fundus;
    ex.target = p.vessels;
    for (float& v : ex.target.pixels) v = v >= 0.5f ? 1.0f : 0.0f;
    examples.push_back(std::move(ex));
  }
  TrainOptions opts = options;
  opts.extra_meta["kind"] = "vessel";
  return train(model, examples, {}, config, opts);
}

double vessel_dice(const BilateralViT& model, const std::vector<VesselPair>& pairs, const Normalization& norm) {
  if (pairs.empty()) throw ConfigError("no vessel pairs to score");
  double total = 0.0;
  for (const auto& p : pairs) {
    const VesselMap pred = run_vessel_model(model, p.fundus, norm);
    double inter = 0.0, a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < pred.map.pixels.size(); ++i) {
      const double x = pred.map.pixels[i] > 0.5f ? 1.0 : 0.0;
      const double y = p.vessels.pixels[i] >= 0.5f ? 1.0 : 0.0;
      inter += x * y;
      a += x;
      b += y;
    }
    total += (a + b) > 0.0 ? 2.0 * inter / (a + b) : 1.0;
  }
  return total / static_cast<double>(pairs.size());
}

}  // namespace bvit
