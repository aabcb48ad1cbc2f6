#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "bvit/checkpoint.hpp"
#include "bvit/datasets.hpp"
#include "bvit/error.hpp"
#include "bvit/evaluation.hpp"
#include "bvit/inference.hpp"
#include "bvit/network.hpp"
#include "bvit/seed.hpp"
#include "bvit/vessel_oracle.hpp"

namespace bvit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ----------------------------------------------------------------- config

void to_json(json& j, const RunConfig& c) {
  j["network"] = c.network;
  j["training"] = c.training;
  j["data"] = {{"split", c.data.split},
               {"train_fraction", c.data.train_fraction},
               {"split_seed", c.data.split_seed},
               {"vessel_source", c.data.vessel_source},
               {"cache_dir", c.data.cache_dir},
               {"vessel_model", c.data.vessel_model},
               {"binarize_vessels", c.data.binarize_vessels},
               {"dataset_normalization", c.data.dataset_normalization}};
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "network" && key != "training" && key != "data") {
      throw ConfigError("unknown config section '" + key + "' (expected network, training, data)");
    }
  }
  RunConfig c;
  try {
    if (j.contains("network")) c.network = j["network"].get<NetworkConfig>();
    if (j.contains("training")) c.training = j["training"].get<TrainConfig>();
    if (j.contains("data")) {
      const json& d = j["data"];
      static const std::set<std::string> known = {"split", "train_fraction", "split_seed", "vessel_source",
                                                  "cache_dir", "vessel_model", "binarize_vessels",
                                                  "dataset_normalization"};
      for (const auto& [key, _] : d.items()) {
        if (!known.count(key)) throw ConfigError("unknown data option '" + key + "'");
      }
      DataConfig def;
      c.data.split = d.value("split", def.split);
      c.data.train_fraction = d.value("train_fraction", def.train_fraction);
      c.data.split_seed = d.value("split_seed", def.split_seed);
      c.data.vessel_source = d.value("vessel_source", def.vessel_source);
      c.data.cache_dir = d.value("cache_dir", def.cache_dir);
      c.data.vessel_model = d.value("vessel_model", def.vessel_model);
      c.data.binarize_vessels = d.value("binarize_vessels", def.binarize_vessels);
      c.data.dataset_normalization = d.value("dataset_normalization", def.dataset_normalization);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (c.data.split != "manifest" && c.data.split != "ratio") {
    throw ConfigError("data.split must be 'manifest' or 'ratio'");
  }
  parse_vessel_source(c.data.vessel_source);
  c.network.validate();
  c.training.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config '" + path.string() + "'");
  const json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config '" + path.string() + "' is not valid JSON");
  return run_config_from_json(j);
}

std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(hash_string(json(c).dump())));
  return std::string(buf, 8);
}

void apply_overrides(RunConfig& cfg, const TrainOverrides& o) {
  const Variant v = o.variant ? parse_variant(*o.variant) : cfg.network.variant;
  if (o.toy) {
    cfg.network = NetworkConfig::toy(v, o.input_size.value_or(64));
  } else if (o.input_size) {
    cfg.network.input_size = *o.input_size;
    cfg.network.patch_grid = *o.input_size / NetworkConfig::kEncoderStride;
  }
  cfg.network.variant = v;
  if (o.epochs) cfg.training.epochs = *o.epochs;
  if (o.max_iterations) cfg.training.max_iterations = *o.max_iterations;
  if (o.seed) cfg.training.seed = *o.seed;
  if (o.vessel_source) {
    parse_vessel_source(*o.vessel_source);
    cfg.data.vessel_source = *o.vessel_source;
  }
  if (o.vessel_model) cfg.data.vessel_model = *o.vessel_model;
  cfg.network.validate();
  cfg.training.validate();
}

// ----------------------------------------------------------------- helpers

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!(os << j.dump(2) << '\n')) throw DataError("cannot write '" + path.string() + "'");
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read '" + path.string() + "'");
  const json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) throw DataError("'" + path.string() + "' is not valid JSON");
  return j;
}

fs::path manifest_of(const DataLocation& d) { return d.manifest.empty() ? d.root / "manifest.csv" : d.manifest; }

LoadedDataset load_data(const DataLocation& d, const std::optional<std::string>& split = std::nullopt) {
  LoadOptions opts;
  opts.split = split;
  LoadedDataset ds = load_dataset(d.root, manifest_of(d), opts);
  if (ds.report.skipped > 0) {
    std::cerr << "warning: skipped " << ds.report.skipped << " of " << ds.report.rows << " manifest rows\n";
    for (const auto& p : ds.report.problems) std::cerr << "  " << p << '\n';
  }
  return ds;
}

fs::path cache_dir_for(const DataLocation& d, const DataConfig& cfg) {
  if (!d.cache_dir_flag.empty()) return d.cache_dir_flag;
  return resolve_cache_dir(cfg.cache_dir.empty() ? d.root / "vessel_cache" : fs::path(cfg.cache_dir));
}

std::unique_ptr<VesselOracle> make_oracle(const DataLocation& d, const DataConfig& cfg, std::uint64_t seed) {
  VesselOracle::Options opts;
  opts.binarize = cfg.binarize_vessels;
  switch (parse_vessel_source(cfg.vessel_source)) {
    case VesselSource::cache:
      return std::make_unique<VesselOracle>(VesselOracle::cache(cache_dir_for(d, cfg), opts));
    case VesselSource::synthetic:
      return std::make_unique<VesselOracle>(VesselOracle::synthetic(seed, opts));
    case VesselSource::model: {
      if (cfg.vessel_model.empty()) throw ConfigError("vessel_source 'model' needs a vessel model checkpoint");
      opts.write_cache = true;
      auto o = std::make_unique<VesselOracle>(VesselOracle::model(load_checkpoint(cfg.vessel_model), opts));
      const auto key = hash_string(fs::weakly_canonical(cfg.vessel_model).string());
      char tag[32];
      std::snprintf(tag, sizeof(tag), "model-%08llx", static_cast<unsigned long long>(key & 0xffffffffull));
      o->set_cache_dir(cache_dir_for(d, cfg) / tag);
      return o;
    }
  }
  throw ConfigError("unknown vessel source");
}

std::string timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  localtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

Split split_samples(const std::vector<FundusSample>& samples, const DataConfig& cfg) {
  if (cfg.split == "ratio") return make_split(samples, SplitScheme::ratio(cfg.split_seed, cfg.train_fraction));
  Split s;
  for (const auto& x : samples) (x.split == "train" ? s.train : s.test).push_back(x);
  if (s.train.empty()) throw DataError("the manifest assigns no samples to split 'train'");
  return s;
}

std::vector<std::string> ids_of(const std::vector<FundusSample>& v) {
  std::vector<std::string> out;
  for (const auto& s : v) out.push_back(s.id);
  return out;
}

std::vector<FundusSample> select_ids(const std::vector<FundusSample>& all, const std::vector<std::string>& ids) {
  std::map<std::string, const FundusSample*> by_id;
  for (const auto& s : all) by_id[s.id] = &s;
  std::vector<FundusSample> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("sample '" + id + "' from the saved split is no longer in the dataset");
    out.push_back(*it->second);
  }
  return out;
}

struct TrainedRun {
  fs::path run_dir;
  TrainResult result;
};

TrainedRun run_training(const RunConfig& cfg, const DataLocation& data, const std::vector<FundusSample>& train_s,
                        const std::vector<FundusSample>& val_s, const fs::path& run_dir, bool resume) {
  fs::create_directories(run_dir);
  write_json(run_dir / "config.json", json(cfg));
  write_json(run_dir / "split.json", {{"train", ids_of(train_s)}, {"validation", ids_of(val_s)}});

  const auto oracle = make_oracle(data, cfg.data, cfg.training.seed);
  const double factor = cfg.training.mask_radius_factor;
  const auto train_ex = make_fovea_examples(train_s, cfg.network, oracle.get(), factor);
  const auto val_ex = make_fovea_examples(val_s, cfg.network, oracle.get(), factor);

  TrainOptions opts;
  opts.run_dir = run_dir;
  if (cfg.data.dataset_normalization) {
    std::vector<const Image*> ims;
    for (const auto& e : train_ex) ims.push_back(&e.image);
    opts.normalization = compute_channel_stats(ims);
  }
  opts.extra_meta = {{"kind", "fovea"},
                     {"train_dataset", train_s.front().dataset_tag},
                     {"vessel_source", cfg.data.vessel_source},
                     {"vessel_model", cfg.data.vessel_model},
                     {"binarize_vessels", cfg.data.binarize_vessels}};
  const fs::path last = run_dir / kLastCheckpointName;
  if (resume && fs::exists(last)) opts.resume_from = last;
  const int total = cfg.training.epochs;
  opts.on_epoch = [total](const EpochRecord& r) {
    std::cout << "epoch " << (r.epoch + 1) << "/" << total << "  lr " << r.lr << "  train_loss " << std::fixed
              << std::setprecision(4) << r.train_loss;
    if (r.val_loss) std::cout << "  val_loss " << *r.val_loss;
    std::cout << std::defaultfloat << std::endl;
  };

  BilateralViT model(cfg.network);
  init_weights(model, cfg.training.seed);
  TrainedRun run{run_dir, train(model, train_ex, val_ex, cfg.training, opts)};
  return run;
}

struct LoadedModel {
  Checkpoint ckpt;
  std::unique_ptr<BilateralViT> model;
  PredictOptions options;
};

LoadedModel load_model(const fs::path& path) {
  LoadedModel m;
  m.ckpt = load_checkpoint(path);
  if (m.ckpt.meta.value("kind", std::string("fovea")) != "fovea") {
    throw ConfigError("'" + path.string() + "' is not a fovea localization checkpoint");
  }
  m.model = std::make_unique<BilateralViT>(model_from_checkpoint(m.ckpt));
  if (m.ckpt.meta.contains("normalization")) m.options.normalization = m.ckpt.meta["normalization"].get<Normalization>();
  return m;
}

DataConfig eval_data_config(const LoadedModel& m, const EvalArgs& args) {
  DataConfig d;
  d.vessel_source = m.ckpt.meta.value("vessel_source", d.vessel_source);
  d.vessel_model = m.ckpt.meta.value("vessel_model", d.vessel_model);
  d.binarize_vessels = m.ckpt.meta.value("binarize_vessels", d.binarize_vessels);
  if (args.vessel_source) d.vessel_source = *args.vessel_source;
  if (args.vessel_model) d.vessel_model = *args.vessel_model;
  return d;
}

std::uint64_t train_seed_of(const LoadedModel& m) {
  if (m.ckpt.meta.contains("train_config")) return m.ckpt.meta["train_config"].value("seed", std::uint64_t{0});
  return 0;
}

}  // namespace

// ----------------------------------------------------------------- commands

int cmd_make_synth(int n, int size, std::uint64_t seed, const fs::path& out) {
  if (n <= 0) throw ConfigError("--n must be positive");
  const auto start = std::chrono::steady_clock::now();
  const SynthDataset ds = synth_dataset(n, size, seed, out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << "wrote " << ds.samples.size() << " samples (" << size << "x" << size << ") to " << out.string()
            << " in " << std::fixed << std::setprecision(2) << secs << " s\n";
  std::cout << "manifest: " << ds.manifest.string() << "\n";
  return 0;
}

int cmd_show_config(const std::optional<fs::path>& config_path) {
  const RunConfig cfg = config_path ? load_run_config(*config_path) : RunConfig{};
  std::cout << json(cfg).dump(2) << '\n';
  return 0;
}

int cmd_train(const std::optional<fs::path>& config_path, const DataLocation& data, const fs::path& out,
              const TrainOverrides& overrides, const std::optional<fs::path>& resume_dir) {
  RunConfig cfg;
  fs::path run_dir;
  if (resume_dir) {
    cfg = load_run_config(*resume_dir / "config.json");
    if (overrides.variant && parse_variant(*overrides.variant) != cfg.network.variant) {
      throw ConfigError("--variant differs from the run being resumed");
    }
    TrainOverrides o = overrides;
    o.variant.reset();
    apply_overrides(cfg, o);
    run_dir = *resume_dir;
  } else {
    if (config_path) cfg = load_run_config(*config_path);
    apply_overrides(cfg, overrides);
    run_dir = out / ("run-" + timestamp() + "-" + config_hash(cfg));
  }

  const LoadedDataset ds = load_data(data);
  Split split;
  if (resume_dir && fs::exists(*resume_dir / "split.json")) {
    const json s = read_json(*resume_dir / "split.json");
    split.train = select_ids(ds.samples, s.at("train").get<std::vector<std::string>>());
    split.test = select_ids(ds.samples, s.at("validation").get<std::vector<std::string>>());
  } else {
    split = split_samples(ds.samples, cfg.data);
  }
  std::cout << "run directory: " << run_dir.string() << "\n";
  std::cout << "variant " << to_string(cfg.network.variant) << ", " << split.train.size() << " training / "
            << split.test.size() << " validation samples" << std::endl;
  const TrainedRun run = run_training(cfg, data, split.train, split.test, run_dir, resume_dir.has_value());
  std::cout << "checkpoint: " << run.result.last_checkpoint.string() << "\n";
  return 0;
}

int cmd_eval(const EvalArgs& args) {
  if (args.checkpoint.empty() == args.predictions.empty()) {
    throw ConfigError("eval needs exactly one of --checkpoint and --predictions");
  }
  const fs::path dir = args.report_dir.empty() ? fs::path("report") : args.report_dir;
  if (!args.predictions.empty()) {
    const LoadedDataset ds = load_data(args.data, args.split);
    const auto preds = read_predictions(args.predictions);
    EvalReport report = evaluate(preds, ds.samples, EvalThresholds::preset(args.thresholds));
    report.test_dataset = ds.samples.front().dataset_tag;
    emit_report(report, dir);
    std::cout << format_report_text(report);
    std::cout << "report written to " << dir.string() << "\n";
    return 0;
  }
  const LoadedModel m = load_model(args.checkpoint);
  const DataConfig dcfg = eval_data_config(m, args);
  const LoadedDataset ds = load_data(args.data, args.split);
  const auto oracle = make_oracle(args.data, dcfg, train_seed_of(m));
  const EvalThresholds thresholds = EvalThresholds::preset(args.thresholds);
  const std::string train_tag = m.ckpt.meta.value("train_dataset", std::string());
  const EvalRun run = cross_dataset_eval(*m.model, ds.samples, oracle.get(), m.options, thresholds, train_tag,
                                         ds.samples.front().dataset_tag);
  emit_report(run.report, dir);
  write_predictions(dir / "predictions.jsonl", run.predictions);
  std::cout << format_report_text(run.report);
  std::cout << "report written to " << dir.string() << "\n";
  return 0;
}

int cmd_predict(const EvalArgs& args, const fs::path& out_jsonl) {
  const LoadedModel m = load_model(args.checkpoint);
  const DataConfig dcfg = eval_data_config(m, args);
  const LoadedDataset ds = load_data(args.data, args.split);
  const auto oracle = make_oracle(args.data, dcfg, train_seed_of(m));
  std::vector<Prediction> preds;
  for (const auto& s : ds.samples) preds.push_back(predict(*m.model, s, oracle.get(), m.options));
  if (out_jsonl.empty()) {
    for (const auto& p : preds) std::cout << to_json_line(p) << '\n';
  } else {
    write_predictions(out_jsonl, preds);
    std::cout << "wrote " << preds.size() << " predictions to " << out_jsonl.string() << "\n";
  }
  return 0;
}

int cmd_ablate(const AblateArgs& args) {
  fs::create_directories(args.out);
  const fs::path cfg_path = args.out / "ablation_config.json";
  RunConfig base;
  if (fs::exists(cfg_path)) {
    base = load_run_config(cfg_path);
    std::cout << "resuming ablation in " << args.out.string() << "\n";
  } else {
    if (args.config_path) base = load_run_config(*args.config_path);
    TrainOverrides o = args.overrides;
    o.variant.reset();
    apply_overrides(base, o);
    write_json(cfg_path, json(base));
  }

  const LoadedDataset ds = load_data(args.data);
  const fs::path split_path = args.out / "split.json";
  Split split;
  if (fs::exists(split_path)) {
    const json s = read_json(split_path);
    split.train = select_ids(ds.samples, s.at("train").get<std::vector<std::string>>());
    split.test = select_ids(ds.samples, s.at("test").get<std::vector<std::string>>());
  } else {
    split = split_samples(ds.samples, base.data);
    write_json(split_path, {{"train", ids_of(split.train)}, {"test", ids_of(split.test)}});
  }
  const auto& eval_set = split.test.empty() ? split.train : split.test;
  const EvalThresholds thresholds = EvalThresholds::preset(args.thresholds);

  std::vector<std::pair<Variant, EvalReport>> rows;
  int done_now = 0;
  for (Variant v : all_variants()) {
    const fs::path dir = args.out / std::string(to_string(v));
    const fs::path report_path = dir / "report" / "report.json";
    if (fs::exists(report_path)) {
      std::cout << to_string(v) << ": reusing completed run\n";
      rows.emplace_back(v, read_json(report_path).get<EvalReport>());
      continue;
    }
    if (args.stop_after > 0 && done_now >= args.stop_after) {
      std::cout << "stopping before " << to_string(v) << " as requested\n";
      return 0;
    }
    RunConfig cfg = base;
    cfg.network.variant = v;
    cfg.network.validate();
    std::cout << to_string(v) << ": training (" << table_label(v) << ")" << std::endl;
    const TrainedRun run = run_training(cfg, args.data, split.train, {}, dir, true);

    const fs::path ckpt = run.result.best_checkpoint.empty() ? run.result.last_checkpoint : run.result.best_checkpoint;
    const LoadedModel m = load_model(ckpt);
    const auto oracle = make_oracle(args.data, cfg.data, cfg.training.seed);
    const EvalRun er = cross_dataset_eval(*m.model, eval_set, oracle.get(), m.options, thresholds,
                                          eval_set.front().dataset_tag, eval_set.front().dataset_tag);
    emit_report(er.report, dir / "report");
    write_predictions(dir / "report" / "predictions.jsonl", er.predictions);
    rows.emplace_back(v, er.report);
    ++done_now;
  }

  // Combined comparison, one row per variant.
  std::ostringstream txt, csv;
  std::vector<std::string> header{"Method"};
  for (const auto& m : thresholds.multipliers) header.push_back(m.label() + " (%)");
  header.push_back("Error (px)");
  std::vector<std::vector<std::string>> table{header};
  csv << "variant,label,multiplier,accuracy_pct,mean_pixel_error\n";
  for (const auto& [v, rep] : rows) {
    std::vector<std::string> row{std::string(table_label(v))};
    for (std::size_t i = 0; i < rep.results.size(); ++i) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(2) << rep.accuracy(i, Stratum::overall);
      row.push_back(cell.str());
      csv << to_string(v) << ",\"" << table_label(v) << "\"," << rep.results[i].multiplier.label() << ','
          << std::setprecision(17) << rep.accuracy(i, Stratum::overall) << ',' << rep.mean_pixel_error << '\n';
    }
    std::ostringstream err;
    err << std::fixed << std::setprecision(2) << rep.mean_pixel_error;
    row.push_back(err.str());
    table.push_back(row);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& r : table) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  for (const auto& r : table) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c == 0) txt << std::left << std::setw(static_cast<int>(width[c])) << r[c];
      else txt << "  " << std::right << std::setw(static_cast<int>(width[c])) << r[c];
    }
    txt << '\n';
  }
  {
    std::ofstream os(args.out / "ablation.txt", std::ios::trunc);
    os << txt.str();
    std::ofstream cs(args.out / "ablation.csv", std::ios::trunc);
    cs << csv.str();
    if (!os || !cs) throw DataError("cannot write the ablation table into '" + args.out.string() + "'");
  }
  std::cout << txt.str();
  return 0;
}

int cmd_train_vessel(const std::optional<fs::path>& config_path, const DataLocation& data, const fs::path& out,
                     const TrainOverrides& overrides) {
  RunConfig cfg;
  if (config_path) cfg = load_run_config(*config_path);
  TrainOverrides o = overrides;
  o.variant = "vit_plain";
  apply_overrides(cfg, o);
  const fs::path pairs_csv = data.manifest.empty() ? data.root / "vessels.csv" : data.manifest;
  const auto pairs = load_vessel_pairs(data.root, pairs_csv, cfg.network.input_size);

  const fs::path run_dir = out / ("vessel-" + timestamp() + "-" + config_hash(cfg));
  fs::create_directories(run_dir);
  write_json(run_dir / "config.json", json(cfg));
  TrainOptions opts;
  opts.run_dir = run_dir;
  if (cfg.data.dataset_normalization) {
    std::vector<const Image*> ims;
    for (const auto& p : pairs) ims.push_back(&p.fundus);
    opts.normalization = compute_channel_stats(ims);
  }
  opts.on_epoch = [&](const EpochRecord& r) {
    std::cout << "epoch " << (r.epoch + 1) << "/" << cfg.training.epochs << "  train_loss " << r.train_loss
              << std::endl;
  };
  BilateralViT model(cfg.network);
  init_weights(model, cfg.training.seed);
  const TrainResult res = train_vessel_model(model, pairs, cfg.training, opts);
  std::cout << "training dice " << std::fixed << std::setprecision(4)
            << vessel_dice(model, pairs, opts.normalization) << "\n";
  std::cout << "checkpoint: " << res.last_checkpoint.string() << "\n";
  return 0;
}

}  // namespace bvit::cli
