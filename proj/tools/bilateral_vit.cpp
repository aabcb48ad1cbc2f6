// bilateral-vit: synthetic data, training, prediction, evaluation and
// ablation for vessel-guided fovea localization.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "bvit/error.hpp"
#include "bvit/kernels/kernels.hpp"
#include "commands.hpp"

namespace {

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

void add_data_options(CLI::App* cmd, bvit::cli::DataLocation& data, bool required = true) {
  cmd->add_option("--data", data.root, "dataset root directory")->required(required);
  cmd->add_option("--manifest", data.manifest, "manifest CSV (default <data>/manifest.csv)");
  cmd->add_option("--cache-dir", data.cache_dir_flag, "vessel-map cache directory");
}

void add_train_overrides(CLI::App* cmd, bvit::cli::TrainOverrides& o, bool with_variant = true) {
  if (with_variant) cmd->add_option("--variant", o.variant, "vit_plain | vit_vb_plain | vit_vb_mff | vit_vbfundus_mff");
  cmd->add_flag("--toy", o.toy, "use the small desk-scale network configuration");
  cmd->add_option("--input-size", o.input_size, "network input size (multiple of 16)");
  cmd->add_option("--epochs", o.epochs, "number of epochs");
  cmd->add_option("--max-iterations", o.max_iterations, "stop after this many iterations (0 = no limit)");
  cmd->add_option("--seed", o.seed, "training seed");
  cmd->add_option("--vessel-source", o.vessel_source, "cache | model | synthetic");
  cmd->add_option("--vessel-model", o.vessel_model, "vessel model checkpoint for --vessel-source model");
}

}  // namespace

int main(int argc, char** argv) {
  namespace cli = bvit::cli;
  CLI::App app{"Vessel-guided fovea localization: data, training, evaluation and ablation"};
  app.require_subcommand(1);
  std::string isa;
  app.add_option("--simd", isa, "kernel set: scalar | avx2 (default: best available)");

  int synth_n = 0, synth_size = 64;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  auto* synth = app.add_subcommand("make-synth", "generate a synthetic fundus dataset");
  synth->add_option("--n", synth_n, "number of samples")->required()->check(CLI::Range(1, 1000000));
  synth->add_option("--size", synth_size, "image size in pixels (multiple of 16)");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output directory")->required();

  std::optional<std::filesystem::path> config_path, resume_dir;
  cli::DataLocation data;
  std::string out_dir;
  cli::TrainOverrides overrides;
  auto* train = app.add_subcommand("train", "train a fovea localization model");
  train->add_option("--config", config_path, "run configuration (JSON)");
  add_data_options(train, data);
  train->add_option("--out", out_dir, "directory that receives the run directory")->required();
  train->add_option("--resume", resume_dir, "continue the run in this run directory");
  add_train_overrides(train, overrides);

  cli::EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "predict a dataset and write R-rule reports");
  auto* eval_ckpt = eval->add_option("--checkpoint", eval_args.checkpoint, "trained checkpoint");
  auto* eval_preds = eval->add_option("--predictions", eval_args.predictions,
                                      "score this predictions JSONL instead of running a checkpoint");
  eval_ckpt->excludes(eval_preds);
  add_data_options(eval, eval_args.data);
  eval->add_option("--thresholds", eval_args.thresholds, "messidor | palm")
      ->check(CLI::IsMember({"messidor", "palm"}));
  eval->add_option("--report-dir", eval_args.report_dir, "report output directory")->required();
  eval->add_option("--split", eval_args.split, "only evaluate manifest rows with this split");
  eval->add_option("--vessel-source", eval_args.vessel_source, "cache | model | synthetic");
  eval->add_option("--vessel-model", eval_args.vessel_model, "vessel model checkpoint");

  cli::EvalArgs predict_args;
  std::string predict_out;
  auto* predict = app.add_subcommand("predict", "write one prediction record per sample");
  predict->add_option("--checkpoint", predict_args.checkpoint, "trained checkpoint")->required();
  add_data_options(predict, predict_args.data);
  predict->add_option("--split", predict_args.split, "only predict manifest rows with this split");
  predict->add_option("--out", predict_out, "output JSONL file (default: stdout)");
  predict->add_option("--vessel-source", predict_args.vessel_source, "cache | model | synthetic");
  predict->add_option("--vessel-model", predict_args.vessel_model, "vessel model checkpoint");

  cli::AblateArgs ablate_args;
  std::string ablate_out;
  auto* ablate = app.add_subcommand("ablate", "train and evaluate all four variants on one split");
  add_data_options(ablate, ablate_args.data);
  ablate->add_option("--out", ablate_out, "ablation directory (rerun to resume)")->required();
  ablate->add_option("--config", ablate_args.config_path, "run configuration (JSON)");
  ablate->add_option("--thresholds", ablate_args.thresholds, "messidor | palm")
      ->check(CLI::IsMember({"messidor", "palm"}));
  ablate->add_option("--stop-after", ablate_args.stop_after, "stop after training this many variants");
  add_train_overrides(ablate, ablate_args.overrides, false);

  std::optional<std::filesystem::path> vessel_config;
  cli::DataLocation vessel_data;
  std::string vessel_out;
  cli::TrainOverrides vessel_overrides;
  auto* train_vessel = app.add_subcommand("train-vessel", "train the vessel segmentation model");
  train_vessel->add_option("--config", vessel_config, "run configuration (JSON)");
  train_vessel->add_option("--data", vessel_data.root, "directory holding vessels.csv")->required();
  train_vessel->add_option("--pairs", vessel_data.manifest, "pair list (default <data>/vessels.csv)");
  train_vessel->add_option("--out", vessel_out, "directory that receives the run directory")->required();
  add_train_overrides(train_vessel, vessel_overrides, false);

  std::optional<std::filesystem::path> show_path;
  auto* show = app.add_subcommand("show-config", "print the resolved run configuration");
  show->add_option("--config", show_path, "run configuration (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "bilateral-vit: usage error: " << one_line(e.what()) << " (see --help)\n";
    return 2;
  }

  try {
    if (!isa.empty()) {
      const auto want = isa == "scalar" ? bvit::kernels::Isa::scalar
                        : isa == "avx2" ? bvit::kernels::Isa::avx2
                                        : throw bvit::ConfigError("--simd must be scalar or avx2");
      bvit::kernels::select(want);
    }
    if (*synth) return cli::cmd_make_synth(synth_n, synth_size, synth_seed, synth_out);
    if (*train) return cli::cmd_train(config_path, data, out_dir, overrides, resume_dir);
    if (*eval) return cli::cmd_eval(eval_args);
    if (*predict) return cli::cmd_predict(predict_args, predict_out);
    if (*ablate) {
      ablate_args.out = ablate_out;
      return cli::cmd_ablate(ablate_args);
    }
    if (*train_vessel) return cli::cmd_train_vessel(vessel_config, vessel_data, vessel_out, vessel_overrides);
    if (*show) return cli::cmd_show_config(show_path);
  } catch (const std::exception& e) {
    std::cerr << "bilateral-vit: error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
