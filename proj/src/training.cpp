#include "bvit/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "bvit/error.hpp"
#include "bvit/kernels/kernels.hpp"
#include "bvit/seed.hpp"
#include "bvit/vessel_oracle.hpp"

namespace bvit {

Tensor dice_loss(const Tensor& logits, const Tensor& target, float eps) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("dice_loss: shape mismatch " + nn::shape_str(logits.shape()) + " vs " +
                     nn::shape_str(target.shape()));
  }
  return nn::soft_dice(logits, target, eps);
}

Tensor bce_loss(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("bce_loss: shape mismatch " + nn::shape_str(logits.shape()) + " vs " +
                     nn::shape_str(target.shape()));
  }
  return nn::bce_with_logits(logits, target);
}

Tensor combined_loss(const Tensor& logits, const Tensor& target) {
  return nn::add(dice_loss(logits, target), bce_loss(logits, target));
}

double lr_at(int epoch, int total_epochs, double lr0, double lr_min) {
  if (total_epochs <= 0) throw ConfigError("total_epochs must be positive");
  if (epoch < 0 || epoch > total_epochs) {
    throw ConfigError("epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(total_epochs) + "]");
  }
  const double pi = std::acos(-1.0);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(pi * epoch / total_epochs));
}

// ----------------------------------------------------------------- Adam

void Adam::step(const nn::ParameterList& params, double lr) {
  ++steps_;
  kernels::AdamParams ap{};
  ap.lr = static_cast<float>(lr);
  ap.beta1 = static_cast<float>(cfg_.beta1);
  ap.beta2 = static_cast<float>(cfg_.beta2);
  ap.eps = static_cast<float>(cfg_.eps);
  ap.bias_correction1 = static_cast<float>(1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_)));
  ap.bias_correction2 = static_cast<float>(1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_)));
  for (const auto& p : params) {
    Tensor t = p.tensor;
    if (!t.has_grad()) continue;
    auto& st = state_[p.name];
    const auto n = static_cast<std::size_t>(t.numel());
    if (st.m.size() != n) {
      st.m.assign(n, 0.0f);
      st.v.assign(n, 0.0f);
    }
    kernels::adam_update(n, t.data(), t.grad().data(), st.m.data(), st.v.data(), ap);
    t.zero_grad();
  }
}

void Adam::save_state(Checkpoint& ckpt) const {
  for (const auto& [name, st] : state_) {
    const int n = static_cast<int>(st.m.size());
    ckpt.tensors.push_back({"adam.m." + name, {n}, st.m});
    ckpt.tensors.push_back({"adam.v." + name, {n}, st.v});
  }
  ckpt.meta["adam_steps"] = steps_;
}

void Adam::load_state(const Checkpoint& ckpt) {
  state_.clear();
  steps_ = ckpt.meta.value("adam_steps", std::int64_t{0});
  const std::string m_prefix = "adam.m.";
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind(m_prefix, 0) != 0) continue;
    const std::string name = t.name.substr(m_prefix.size());
    const NamedTensor* v = ckpt.find("adam.v." + name);
    if (!v || v->values.size() != t.values.size()) {
      throw DataError("checkpoint optimizer state for '" + name + "' is incomplete");
    }
    state_[name] = {t.values, v->values};
  }
}

// ----------------------------------------------------------------- config

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (epochs <= 0) bad.push_back("epochs must be positive");
  if (batch_size <= 0) bad.push_back("batch_size must be positive");
  if (!(lr0 > 0.0)) bad.push_back("lr0 must be positive");
  if (!(lr_min >= 0.0) || lr_min > lr0) bad.push_back("lr_min must lie in [0, lr0]");
  if (max_iterations < 0) bad.push_back("max_iterations must be >= 0");
  if (!(mask_radius_factor > 0.0)) bad.push_back("mask_radius_factor must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    bad.push_back("adam betas must lie in [0, 1)");
  }
  if (bad.empty()) return;
  std::string msg = "invalid training config:";
  for (const auto& b : bad) msg += " " + b + ";";
  msg.pop_back();
  throw ConfigError(msg);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr0", c.lr0},
       {"lr_min", c.lr_min},
       {"adam_beta1", c.adam.beta1},
       {"adam_beta2", c.adam.beta2},
       {"adam_eps", c.adam.eps},
       {"seed", c.seed},
       {"max_iterations", c.max_iterations},
       {"augment", c.augment},
       {"augment_flip_probability", c.augment_config.flip_probability},
       {"augment_max_rotation_deg", c.augment_config.max_rotation_deg},
       {"augment_max_scale_jitter", c.augment_config.max_scale_jitter},
       {"augment_max_brightness", c.augment_config.max_brightness},
       {"augment_max_contrast", c.augment_config.max_contrast},
       {"mask_radius_factor", c.mask_radius_factor}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known = {
      "epochs", "batch_size", "lr0", "lr_min", "adam_beta1", "adam_beta2", "adam_eps", "seed",
      "max_iterations", "augment", "augment_flip_probability", "augment_max_rotation_deg",
      "augment_max_scale_jitter", "augment_max_brightness", "augment_max_contrast",
      "mask_radius_factor"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown training option '" + key + "'");
    }
  }
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr0 = j.value("lr0", d.lr0);
  c.lr_min = j.value("lr_min", d.lr_min);
  c.adam.beta1 = j.value("adam_beta1", d.adam.beta1);
  c.adam.beta2 = j.value("adam_beta2", d.adam.beta2);
  c.adam.eps = j.value("adam_eps", d.adam.eps);
  c.seed = j.value("seed", d.seed);
  c.max_iterations = j.value("max_iterations", d.max_iterations);
  c.augment = j.value("augment", d.augment);
  c.augment_config.flip_probability = j.value("augment_flip_probability", d.augment_config.flip_probability);
  c.augment_config.max_rotation_deg = j.value("augment_max_rotation_deg", d.augment_config.max_rotation_deg);
  c.augment_config.max_scale_jitter = j.value("augment_max_scale_jitter", d.augment_config.max_scale_jitter);
  c.augment_config.max_brightness = j.value("augment_max_brightness", d.augment_config.max_brightness);
  c.augment_config.max_contrast = j.value("augment_max_contrast", d.augment_config.max_contrast);
  c.mask_radius_factor = j.value("mask_radius_factor", d.mask_radius_factor);
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss}};
  if (r.val_loss) j["val_loss"] = *r.val_loss;
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
  r.epoch = j.at("epoch").get<int>();
  r.lr = j.at("lr").get<double>();
  r.train_loss = j.at("train_loss").get<double>();
  if (j.contains("val_loss")) r.val_loss = j.at("val_loss").get<double>();
  else r.val_loss.reset();
}

// ----------------------------------------------------------------- examples

TrainingExample make_fovea_example(const FundusSample& sample, const NetworkConfig& config,
                                   const VesselOracle* vessels, double mask_radius_factor) {
  const int size = config.input_size;
  const Preprocessed pre = preprocess(sample.image, size);
  TrainingExample ex;
  ex.id = sample.id;
  ex.image = pre.image;
  const Point2 center = pre.transform.forward(sample.fovea);
  const double radius = default_mask_radius(sample.disc_radius * pre.transform.scale, size, mask_radius_factor);
  ex.target = make_fovea_mask(center, radius, size).mask;
  const Variant v = config.variant;
  if (v == Variant::vit_vb_plain || v == Variant::vit_vb_mff) {
    if (!vessels) throw ConfigError("variant " + std::string(to_string(v)) + " needs a vessel map source");
    ex.vessel = vessels->get(sample.dataset_tag, sample.id, pre.image, pre.transform.fingerprint()).map;
  }
  return ex;
}

std::vector<TrainingExample> make_fovea_examples(const std::vector<FundusSample>& samples,
                                                 const NetworkConfig& config, const VesselOracle* vessels,
                                                 double mask_radius_factor) {
  std::vector<TrainingExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(make_fovea_example(s, config, vessels, mask_radius_factor));
  return out;
}

// ----------------------------------------------------------------- batches

Tensor batch_images(const std::vector<const Image*>& images, const Normalization& norm) {
  if (images.empty()) throw ShapeError("empty batch");
  const Image& first = *images.front();
  const int h = first.height, w = first.width;
  std::vector<float> data;
  data.reserve(images.size() * 3 * static_cast<std::size_t>(h) * w);
  for (const Image* im : images) {
    if (im->width != w || im->height != h || im->channels != 3) {
      throw ShapeError("batch images must share size and have 3 channels");
    }
    auto planar = normalize_intensity(*im, norm);
    data.insert(data.end(), planar.begin(), planar.end());
  }
  return Tensor::from_data({static_cast<int>(images.size()), 3, h, w}, std::move(data));
}

Tensor batch_planes(const std::vector<const Image*>& planes) {
  if (planes.empty()) throw ShapeError("empty batch");
  const int h = planes.front()->height, w = planes.front()->width;
  std::vector<float> data;
  data.reserve(planes.size() * static_cast<std::size_t>(h) * w);
  for (const Image* im : planes) {
    if (im->width != w || im->height != h || im->channels != 1) {
      throw ShapeError("batch planes must share size and have 1 channel");
    }
    data.insert(data.end(), im->pixels.begin(), im->pixels.end());
  }
  return Tensor::from_data({static_cast<int>(planes.size()), 1, h, w}, std::move(data));
}

namespace {

bool takes_vessel_map(Variant v) { return v == Variant::vit_vb_plain || v == Variant::vit_vb_mff; }

struct Batch {
  std::vector<Image> images, targets, vessels;
  std::vector<std::string> ids;
};

Tensor forward_batch(const BilateralViT& model, const Batch& b, const Normalization& norm) {
  std::vector<const Image*> imgs;
  for (const auto& im : b.images) imgs.push_back(&im);
  Tensor x = batch_images(imgs, norm);
  if (!takes_vessel_map(model.variant())) return model.forward(x);
  std::vector<const Image*> ves;
  for (const auto& v : b.vessels) ves.push_back(&v);
  return model.forward(x, batch_planes(ves));
}

Tensor target_tensor(const Batch& b) {
  std::vector<const Image*> ts;
  for (const auto& t : b.targets) ts.push_back(&t);
  return batch_planes(ts);
}

void check_examples(const std::vector<TrainingExample>& set, const BilateralViT& model,
                    const char* which) {
  const int s = model.config().input_size;
  for (const auto& ex : set) {
    if (ex.image.width != s || ex.image.height != s || ex.image.channels != 3) {
      throw ShapeError(std::string(which) + " example '" + ex.id + "' image is not " +
                       std::to_string(s) + "x" + std::to_string(s) + "x3");
    }
    if (ex.target.width != s || ex.target.height != s || ex.target.channels != 1) {
      throw ShapeError(std::string(which) + " example '" + ex.id + "' target has the wrong shape");
    }
    if (takes_vessel_map(model.variant()) &&
        (ex.vessel.width != s || ex.vessel.height != s || ex.vessel.channels != 1)) {
      throw ShapeError(std::string(which) + " example '" + ex.id + "' lacks a " +
                       std::to_string(s) + "x" + std::to_string(s) + " vessel map");
    }
  }
}

void write_metrics(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write metrics log '" + path.string() + "'");
  for (const auto& r : history) os << nlohmann::json(r).dump() << '\n';
}

void append_metric(const std::filesystem::path& path, const EpochRecord& r) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw DataError("cannot write metrics log '" + path.string() + "'");
  os << nlohmann::json(r).dump() << '\n';
}

[[noreturn]] void diverged(const TrainOptions& options, const BilateralViT& model, int epoch,
                           int iteration, double lr, double loss, const Batch& b) {
  nlohmann::json dump;
  dump["epoch"] = epoch;
  dump["iteration"] = iteration;
  dump["lr"] = lr;
  dump["loss"] = std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json(std::to_string(loss));
  dump["batch_ids"] = b.ids;
  nlohmann::json norms = nlohmann::json::object();
  for (const auto& p : model.parameters()) {
    double sq = 0.0;
    bool finite = true;
    for (float v : p.tensor.values()) {
      if (!std::isfinite(v)) finite = false;
      sq += static_cast<double>(v) * v;
    }
    norms[p.name] = finite ? nlohmann::json(std::sqrt(sq)) : nlohmann::json("non-finite");
  }
  dump["parameter_norms"] = norms;

  std::ostringstream msg;
  msg << "non-finite loss at epoch " << epoch << ", iteration " << iteration << " (batch:";
  for (const auto& id : b.ids) msg << ' ' << id;
  msg << ')';
  if (!options.run_dir.empty()) {
    const auto path = options.run_dir / "nonfinite_dump.json";
    std::ofstream os(path, std::ios::trunc);
    os << dump.dump(2) << '\n';
    msg << "; state dumped to " << path.string();
  }
  throw TrainingError(msg.str());
}

}  // namespace

double evaluate_loss(const BilateralViT& model, const std::vector<TrainingExample>& set,
                     const Normalization& norm, int batch_size) {
  if (set.empty()) throw ConfigError("cannot evaluate the loss of an empty set");
  nn::NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t i = 0; i < set.size(); i += static_cast<std::size_t>(batch_size)) {
    Batch b;
    const std::size_t end = std::min(set.size(), i + static_cast<std::size_t>(batch_size));
    for (std::size_t k = i; k < end; ++k) {
      b.images.push_back(set[k].image);
      b.targets.push_back(set[k].target);
      b.vessels.push_back(set[k].vessel);
    }
    const Tensor logits = forward_batch(model, b, norm);
    total += combined_loss(logits, target_tensor(b)).item() * static_cast<double>(end - i);
  }
  return total / static_cast<double>(set.size());
}

TrainResult train(BilateralViT& model, const std::vector<TrainingExample>& train_set,
                  const std::vector<TrainingExample>& val_set, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");
  check_examples(train_set, model, "training");
  check_examples(val_set, model, "validation");

  const bool write_files = !options.run_dir.empty();
  if (write_files) std::filesystem::create_directories(options.run_dir);
  const auto last_path = options.run_dir / kLastCheckpointName;
  const auto best_path = options.run_dir / kBestCheckpointName;
  const auto metrics_path = options.run_dir / kMetricsLogName;

  const auto params = model.parameters();
  Adam adam(config.adam);
  TrainResult result;
  int start_epoch = 0;
  double best_loss = std::numeric_limits<double>::infinity();

  if (options.resume_from) {
    const Checkpoint ckpt = load_checkpoint(*options.resume_from);
    if (!(ckpt.config == model.config())) {
      throw ConfigError("cannot resume: checkpoint network config differs from the model's");
    }
    load_parameters(model, ckpt);
    adam.load_state(ckpt);
    const auto& st = ckpt.meta.at("train_state");
    start_epoch = st.at("next_epoch").get<int>();
    result.iterations = st.at("iterations").get<int>();
    if (st.contains("best_loss") && st["best_loss"].is_number()) best_loss = st["best_loss"].get<double>();
    result.history = st.at("history").get<std::vector<EpochRecord>>();
    if (write_files && std::filesystem::exists(best_path)) result.best_checkpoint = best_path;
  }
  if (write_files) write_metrics(metrics_path, result.history);

  auto meta_for = [&](int next_epoch) {
    nlohmann::json meta = options.extra_meta;
    meta["normalization"] = options.normalization;
    meta["train_config"] = config;
    meta["train_state"] = {{"next_epoch", next_epoch},
                           {"iterations", result.iterations},
                           {"best_loss", std::isfinite(best_loss) ? nlohmann::json(best_loss) : nlohmann::json()},
                           {"history", result.history}};
    return meta;
  };

  const std::size_t n = train_set.size();
  const auto bs = static_cast<std::size_t>(config.batch_size);
  auto budget_left = [&] { return config.max_iterations == 0 || result.iterations < config.max_iterations; };

  for (int epoch = start_epoch; epoch < config.epochs && budget_left(); ++epoch) {
    const double lr = lr_at(epoch, config.epochs, config.lr0, config.lr_min);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(mix_seed({config.seed, static_cast<std::uint64_t>(epoch), 0x5348u}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t i = 0; i < n && budget_left(); i += bs) {
      Batch b;
      const std::size_t end = std::min(n, i + bs);
      for (std::size_t k = i; k < end; ++k) {
        const TrainingExample& ex = train_set[order[k]];
        b.ids.push_back(ex.id);
        if (config.augment) {
          const auto seed = mix_seed({config.seed, static_cast<std::uint64_t>(epoch), order[k]});
          Augmented a = augment(ex.image, ex.target, ex.vessel, seed, config.augment_config);
          b.images.push_back(std::move(a.image));
          b.targets.push_back(std::move(a.mask));
          b.vessels.push_back(std::move(a.vessel));
        } else {
          b.images.push_back(ex.image);
          b.targets.push_back(ex.target);
          b.vessels.push_back(ex.vessel);
        }
      }
      Tensor loss = combined_loss(forward_batch(model, b, options.normalization), target_tensor(b));
      const double value = loss.item();
      ++result.iterations;
      if (!std::isfinite(value)) diverged(options, model, epoch, result.iterations, lr, value, b);
      loss.backward();
      adam.step(params, lr);
      result.iteration_losses.push_back(value);
      epoch_loss += value * static_cast<double>(end - i);
      seen += end - i;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = epoch_loss / static_cast<double>(seen);
    if (!val_set.empty()) {
      rec.val_loss = evaluate_loss(model, val_set, options.normalization, config.batch_size);
    }
    result.history.push_back(rec);
    const double selection = rec.val_loss.value_or(rec.train_loss);
    const bool improved = selection < best_loss;
    if (improved) best_loss = selection;

    if (write_files) {
      append_metric(metrics_path, rec);
      if (improved) {
        save_checkpoint(best_path, make_checkpoint(model, meta_for(epoch + 1)));
        result.best_checkpoint = best_path;
      }
      Checkpoint last = make_checkpoint(model, meta_for(epoch + 1));
      adam.save_state(last);
      save_checkpoint(last_path, last);
      result.last_checkpoint = last_path;
    }
    if (options.on_epoch) options.on_epoch(rec);
  }
  if (write_files && result.last_checkpoint.empty() && std::filesystem::exists(last_path)) {
    result.last_checkpoint = last_path;
  }
  return result;
}

}  // namespace bvit
