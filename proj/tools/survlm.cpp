// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// survlm command-line entry point. Exit codes: 0 success, 1 usage error,
// 2 data error, 3 numeric failure.

#include <iostream>

#include <CLI11.hpp>

#include "survlm/cli.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

}  // namespace

int main(int argc, char** argv) {
  using namespace survlm;
  CLI::App app{"Survival prediction with a multimodal language model, desk-scale reference"};
  app.set_version_flag("--version", SURVLM_VERSION);
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  app.add_option("--config", config, "JSON config for the command");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--seed", seed, "Seed overriding the config");
  app.add_option("--threads", threads, "Worker threads (the reference runs single-threaded)")->check(CLI::PositiveNumber);

  // prepare-data
  cli::PrepareOptions prep;
  auto* c_prep = app.add_subcommand("prepare-data", "Extract QA pairs and word frequencies from reports");
  c_prep->add_option("--reports", prep.reports, "Reports JSONL")->required();
  c_prep->add_option("--templates", prep.templates, "Template/trigger JSON");
  c_prep->add_option("--top-k", prep.top_k, "Rows in word_freq.csv");

  // synth
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic cohort");

  // pretrain / finetune
  cli::TrainOptions train;
  auto add_train_options = [&](CLI::App* c) {
    c->add_option("--data", train.data_dir, "Cohort directory")->required();
    c->add_option("--model-config", train.model_config, "Model dimensions JSON");
    c->add_option("--templates", train.templates, "Template/trigger JSON");
    c->add_option("--total-steps", train.total_steps, "Override total_steps");
    c->add_option("--resume", train.resume, "Continue from a checkpoint of this run");
    c->add_option("--stop-after", train.stop_after, "Stop (resumably) once this step is reached");
  };
  auto* c_pre = app.add_subcommand("pretrain", "Stage 1: visual-instruction pre-training");
  add_train_options(c_pre);
  auto* c_fine = app.add_subcommand("finetune", "Stage 2: joint survival fine-tuning");
  add_train_options(c_fine);
  c_fine->add_option("--init", train.init_checkpoint, "Stage-1 checkpoint");
  c_fine->add_flag("--from-scratch", train.from_scratch, "Start from a fresh initialization");

  // evaluate
  cli::EvaluateOptions eval;
  auto* c_eval = app.add_subcommand("evaluate", "Score a checkpoint on a cohort");
  c_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint to score");
  c_eval->add_option("--risks", eval.risks, "Score a patient_id,risk CSV instead of a checkpoint");
  c_eval->add_option("--data", eval.data_dir, "Cohort directory")->required();
  c_eval->add_option("--templates", eval.templates, "Template/trigger JSON");
  c_eval->add_option("--split", eval.split, "auto, train, test or all")
      ->check(CLI::IsMember({"auto", "train", "test", "all"}));
  c_eval->add_option("--answer-tokens", eval.answer_tokens, "Generated tokens per answer; 0 skips token F1");
  c_eval->add_flag("--svg", eval.svg, "Also write km.svg");

  // gradcheck
  cli::GradcheckOptions gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Compare tape gradients with finite differences");
  c_gc->add_option("--loss", gc.loss, "Loss name or 'all'");
  c_gc->add_option("--configs", gc.configs, "Random configurations per loss");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (c_prep->parsed()) {
      prep.out_dir = out_dir;
      if (!prep.templates && config) prep.templates = config;
      cli::cmd_prepare_data(prep);
    } else if (c_synth->parsed()) {
      cli::cmd_synth({config, seed, out_dir});
    } else if (c_pre->parsed() || c_fine->parsed()) {
      train.config = config;
      train.seed = seed;
      train.out_dir = out_dir;
      train.log = &std::cerr;
      if (c_fine->parsed() && !train.init_checkpoint && !train.from_scratch && !train.resume) {
        std::cerr << "error: finetune needs --init <stage-1 checkpoint>, --from-scratch or --resume\n";
        return kUsage;
      }
      if (c_pre->parsed()) cli::cmd_pretrain(train); else cli::cmd_finetune(train);
    } else if (c_eval->parsed()) {
      eval.out_dir = out_dir;
      const auto m = cli::cmd_evaluate(eval);
      std::cout << to_json(m).dump() << '\n';
    } else if (c_gc->parsed()) {
      if (seed) gc.seed = *seed;
      if (app.get_option("--out")->count() > 0) gc.out_dir = out_dir;
      if (!cli::cmd_gradcheck(gc, std::cout)) return kNumeric;
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
