// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

// isalux: train, run and evaluate the low-light enhancement model.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "isalux/commands.hpp"

namespace {

void add_config_flags(CLI::App* cmd, isalux::ConfigOptions& opt) {
  cmd->add_option("--preset", opt.preset, "Base configuration: desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}))
      ->capture_default_str();
  cmd->add_option("--config", opt.config_file, "Config file (key = value lines) applied on top of the preset");
  cmd->add_option("--set", opt.overrides, "Override one config key, key=value (repeatable)")->take_all();
  cmd->add_option("--seed", opt.seed, "Seed for initialization, sampling and synthetic priors");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ISALux low-light image enhancement"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "isalux 1.0.0");

  isalux::TrainOptions train;
  auto* c_train = app.add_subcommand("train", "Train a model on <data-dir>/low and <data-dir>/high pairs");
  add_config_flags(c_train, train.config);
  c_train->add_option("--data-dir", train.data_dir, "Directory with low/, high/ and optional priors/")->required();
  c_train->add_option("--out-dir", train.out_dir, "Output directory for checkpoints and loss.csv")->required();
  c_train->add_option("--resume", train.resume, "Checkpoint to resume from");

  isalux::InferOptions infer;
  auto* c_infer = app.add_subcommand("infer", "Enhance one PNG image");
  c_infer->add_option("--checkpoint", infer.checkpoint, "Model checkpoint (.isat)")->required();
  c_infer->add_option("--input", infer.input, "Input PNG")->required();
  c_infer->add_option("--output", infer.output, "Output PNG")->required();
  c_infer->add_option("--seg-prior", infer.seg_prior, "Semantic prior file (.isat, semantic_prior record)");
  c_infer->add_flag("--synthetic-prior", infer.synthetic_prior, "Use the built-in synthetic semantic prior");
  c_infer->add_option("--seed", infer.seed, "Seed for the synthetic prior (default: checkpoint seed)");

  isalux::EvalOptions eval;
  auto* c_eval = app.add_subcommand("eval", "PSNR/SSIM/MS-SSIM of predictions against ground truth");
  c_eval->add_option("--pred-dir", eval.pred_dir, "Directory of predicted PNGs")->required();
  c_eval->add_option("--gt-dir", eval.gt_dir, "Directory of ground-truth PNGs (matched by filename)")->required();
  c_eval->add_option("--output", eval.output, "Write the CSV here instead of stdout");

  isalux::ConfigOptions describe;
  auto* c_describe = app.add_subcommand("describe", "Print the resolved config and every parameter name and shape");
  add_config_flags(c_describe, describe);

  isalux::AblateOptions ablate;
  auto* c_ablate = app.add_subcommand("ablate", "Train and evaluate every cell of an ablation matrix");
  add_config_flags(c_ablate, ablate.config);
  c_ablate->add_option("--data-dir", ablate.data_dir, "Training pairs")->required();
  c_ablate->add_option("--matrix", ablate.matrix, "Matrix file, one 'label | key=value ...' cell per line")->required();
  c_ablate->add_option("--eval-dir", ablate.eval_dir, "Evaluation pairs (default: --data-dir)");
  c_ablate->add_option("--out-dir", ablate.out_dir, "Per-cell checkpoints and ablation.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? isalux::kExitOk : isalux::kExitUsage;
  }

  return isalux::run_guarded(
      [&] {
        if (c_train->parsed()) return isalux::cmd_train(train, std::cout, std::cerr);
        if (c_infer->parsed()) return isalux::cmd_infer(infer, std::cout, std::cerr);
        if (c_eval->parsed()) return isalux::cmd_eval(eval, std::cout, std::cerr);
        if (c_describe->parsed()) return isalux::cmd_describe(describe, std::cout);
        return isalux::cmd_ablate(ablate, std::cout, std::cerr);
      },
      std::cerr);
}
