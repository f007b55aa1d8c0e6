// Copyright 2026 The Trifuse Authors
// Command-line entry point: synth, extract, train, eval, params, gradcheck
//
// Licensed under the Apache License, Version 2.0

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "trifuse/branches.hpp"
#include "trifuse/checkpoint.hpp"
#include "trifuse/data.hpp"
#include "trifuse/dsp.hpp"
#include "trifuse/errors.hpp"
#include "trifuse/gradsuite.hpp"
#include "trifuse/train.hpp"

namespace {

namespace fs = std::filesystem;
using namespace trifuse;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

void write_run_stamp(const fs::path& out_dir, const std::string& command,
                     const nlohmann::json& resolved) {
  fs::create_directories(out_dir);
  nlohmann::json stamp{{"command", command}, {"config", resolved}};
  std::ofstream os(out_dir / ("run_config_" + command + ".json"));
  os << stamp.dump(2) << "\n";
}

dsp::FeatureKind parse_feature(const std::string& name) {
  if (name == "mel") return dsp::FeatureKind::kLogMel;
  if (name == "mfcc") return dsp::FeatureKind::kMfcc;
  throw ConfigError("unknown feature kind: " + name);
}

/// Per-split, per-task record counts and total audio hours.
void print_manifest_summary(const data::Manifest& manifest) {
  const data::ManifestSummary summary = data::summarize(manifest, true);
  std::printf("%-14s %7s %7s %7s %10s\n", "split", "task0", "task1", "task2",
              summary.has_durations ? "hours" : "");
  for (const char* split : data::kSplitNames) {
    const auto& counts = summary.counts.at(split);
    if (summary.has_durations) {
      const auto& seconds = summary.seconds.at(split);
      std::printf("%-14s %7d %7d %7d %10.3f\n", split, counts[0], counts[1],
                  counts[2], (seconds[0] + seconds[1] + seconds[2]) / 3600.0);
    } else {
      std::printf("%-14s %7d %7d %7d\n", split, counts[0], counts[1],
                  counts[2]);
    }
  }
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int subjects = 600;
  double seconds = 1.0;
  double audio_informativeness = 1.0;
  double semantic_informativeness = 1.0;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& args) {
  data::SynthConfig cfg;
  cfg.n_subjects = args.subjects;
  cfg.audio_seconds = args.seconds;
  cfg.audio_informativeness = args.audio_informativeness;
  cfg.semantic_informativeness = args.semantic_informativeness;
  cfg.noise_level = args.noise;
  cfg.seed = args.seed;

  const data::SynthResult result = data::generate_synthetic(cfg, args.out);
  write_run_stamp(args.out, "synth",
                  {{"subjects", cfg.n_subjects},
                   {"audio_seconds", cfg.audio_seconds},
                   {"audio_informativeness", cfg.audio_informativeness},
                   {"semantic_informativeness", cfg.semantic_informativeness},
                   {"noise_level", cfg.noise_level},
                   {"seed", cfg.seed}});
  std::cout << "wrote " << result.n_records << " records to "
            << result.manifest_path.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ExtractArgs {
  std::string manifest;
  std::string out;
  std::string feature = "mel";
  std::string format = "csv";
  std::uint64_t seed = 0;
};

int cmd_extract(const ExtractArgs& args) {
  const data::Manifest manifest = data::load_manifest(args.manifest);
  for (const std::string& warning : manifest.warnings) {
    std::cerr << "warning: " << warning << "\n";
  }
  print_manifest_summary(manifest);
  const dsp::FeatureKind kind = parse_feature(args.feature);
  if (args.format != "csv" && args.format != "bin") {
    throw ConfigError("format must be csv or bin");
  }
  const dsp::FeatureConfig cfg;
  fs::create_directories(args.out);

  for (const data::SampleRecord& rec : manifest.records) {
    const dsp::AudioBuffer audio = data::read_wav(manifest.resolve_audio(rec));
    const dsp::FeatureMatrix feat = kind == dsp::FeatureKind::kMfcc
                                        ? dsp::mfcc(audio, cfg)
                                        : dsp::mel_spectrogram(audio, cfg);
    if (args.format == "csv") {
      std::ofstream os(fs::path(args.out) / (rec.id + ".csv"));
      os << "frame,bin,value\n";
      char buf[96];
      for (Eigen::Index f = 0; f < feat.frames(); ++f) {
        for (Eigen::Index b = 0; b < feat.bins(); ++b) {
          std::snprintf(buf, sizeof(buf), "%lld,%lld,%.17g\n",
                        static_cast<long long>(f), static_cast<long long>(b),
                        feat.values(f, b));
          os << buf;
        }
      }
    } else {
      ckpt::Checkpoint container;
      container.metadata = {{"format", "trifuse-features"},
                            {"id", rec.id},
                            {"kind", args.feature},
                            {"frames", feat.frames()},
                            {"bins", feat.bins()}};
      ckpt::ParamRecord record;
      record.name = "feature";
      record.dims = {static_cast<std::uint64_t>(feat.frames()),
                     static_cast<std::uint64_t>(feat.bins())};
      record.data.reserve(static_cast<std::size_t>(feat.values.size()));
      for (Eigen::Index f = 0; f < feat.frames(); ++f) {
        for (Eigen::Index b = 0; b < feat.bins(); ++b) {
          record.data.push_back(feat.values(f, b));
        }
      }
      container.records.push_back(std::move(record));
      ckpt::save(container, fs::path(args.out) / (rec.id + ".bin"));
    }
  }
  write_run_stamp(args.out, "extract",
                  {{"manifest", args.manifest},
                   {"feature", args.feature},
                   {"format", args.format},
                   {"seed", args.seed}});
  std::cout << "extracted features for " << manifest.records.size()
            << " records\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string out;
  std::string task = "all";
  std::string stage = "all";
  std::string feature = "mel";
  std::uint64_t seed = 0;
  int max_epochs = 200;
  int patience = 20;
  double lr1 = 0.0, lr2 = 0.0, lr3 = 0.0;  // 0 = keep plan defaults
  int batch1 = 0, batch2 = 0, batch3 = 0;
};

std::vector<int> parse_tasks(const std::string& task) {
  if (task == "all") return {0, 1, 2};
  if (task == "0" || task == "1" || task == "2") return {task[0] - '0'};
  throw ConfigError("task must be 0, 1, 2 or all");
}

int cmd_train(const TrainArgs& args) {
  train::TrainPlan plan;
  plan.seed = args.seed;
  plan.max_epochs = args.max_epochs;
  plan.patience = args.patience;
  if (args.lr1 > 0.0) plan.stage1_lr = {args.lr1, args.lr1, args.lr1};
  if (args.lr2 > 0.0) plan.stage2_lr = {args.lr2, args.lr2, args.lr2};
  if (args.lr3 > 0.0) plan.stage3_lr = {args.lr3, args.lr3, args.lr3};
  if (args.batch1 > 0) plan.stage_batch[0] = args.batch1;
  if (args.batch2 > 0) plan.stage_batch[1] = args.batch2;
  if (args.batch3 > 0) plan.stage_batch[2] = args.batch3;

  int first_stage = 1, last_stage = 3;
  if (args.stage != "all") {
    if (args.stage != "1" && args.stage != "2" && args.stage != "3") {
      throw ConfigError("stage must be 1, 2, 3 or all");
    }
    first_stage = last_stage = args.stage[0] - '0';
  }

  write_run_stamp(args.out, "train",
                  {{"manifest", args.manifest},
                   {"task", args.task},
                   {"stage", args.stage},
                   {"feature", args.feature},
                   {"seed", args.seed},
                   {"max_epochs", plan.max_epochs},
                   {"patience", plan.patience},
                   {"lr1", plan.stage1_lr[0]},
                   {"lr2", plan.stage2_lr[0]},
                   {"lr3", plan.stage3_lr[0]},
                   {"batch", plan.stage_batch}});

  print_manifest_summary(data::load_manifest(args.manifest));

  for (const int task : parse_tasks(args.task)) {
    train::PipelineOptions options;
    options.manifest_path = args.manifest;
    options.out_dir = args.out;
    options.task = task;
    options.first_stage = first_stage;
    options.last_stage = last_stage;
    options.feature_kind = parse_feature(args.feature);
    options.plan = plan;

    const train::PipelineResult result = train::run_pipeline(options);
    std::cout << "task " << task << ": ";
    for (std::size_t i = 0; i < result.histories.size(); ++i) {
      const train::StageHistory& h = result.histories[i];
      std::cout << "stage " << (first_stage + static_cast<int>(i)) << " best "
                << h.best_val_loss << " @" << h.best_epoch << " ("
                << h.rows.size() << " epochs)  ";
    }
    std::cout << "internal-val accuracy "
              << result.final_internal_val_accuracy << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string manifest;
  std::string out;
  bool ablate = false;
};

int cmd_eval(const EvalArgs& args) {
  const data::Manifest manifest = data::load_manifest(args.manifest);
  write_run_stamp(args.out, "eval",
                  {{"manifest", args.manifest}, {"ablate", args.ablate}});

  struct Loaded {
    train::TaskSystem system;
    train::TaskData data;
  };
  std::vector<Loaded> systems;
  for (int task = 0; task < 3; ++task) {
    const fs::path ckpt_path =
        train::stage_checkpoint_path(args.out, task, 3);
    if (!fs::exists(ckpt_path)) {
      throw DataError("missing stage-3 checkpoint for task " +
                      std::to_string(task) + ": " + ckpt_path.string());
    }
    train::TaskSystem system = train::load_system(ckpt_path);
    train::TaskData data = train::build_task_data(
        manifest, task, system.tokenizer, system.config.feature_kind,
        system.config.feature_cfg);
    systems.push_back({std::move(system), std::move(data)});
  }

  const auto combined_accuracy = [&systems](const fusion::ModalityMask& mask,
                                            int* n_out) {
    // subject -> (label, per-task probability)
    std::map<std::string, std::array<std::optional<Eigen::Vector2d>, 3>> probs;
    std::map<std::string, int> labels;
    for (int task = 0; task < 3; ++task) {
      for (const train::TaskItem& item : systems[static_cast<std::size_t>(task)].data.dev) {
        probs[item.subject_id][static_cast<std::size_t>(task)] =
            systems[static_cast<std::size_t>(task)].system.model.predict(
                item.audio, item.feature, item.tokens, mask);
        labels[item.subject_id] = item.label;
      }
    }
    int correct = 0, total = 0;
    for (const auto& [subject, entries] : probs) {
      if (!entries[0] || !entries[1] || !entries[2]) continue;
      const Eigen::Vector2d mean =
          train::ensemble_predict({*entries[0], *entries[1], *entries[2]});
      const int predicted = mean[1] > mean[0] ? 1 : 0;
      if (predicted == labels[subject]) ++correct;
      ++total;
    }
    if (total == 0) {
      throw DataError("no dev subject has samples for all three tasks");
    }
    if (n_out != nullptr) *n_out = total;
    return static_cast<double>(correct) / static_cast<double>(total);
  };

  // Per-task rows plus the ensemble row.
  std::ofstream tasks_csv(fs::path(args.out) / "eval_tasks.csv");
  tasks_csv << "row,n,accuracy\n";
  std::ofstream preds_csv(fs::path(args.out) / "predictions.csv");
  preds_csv << "task,sample_id,subject_id,label,predicted,p_at_risk\n";
  std::ofstream imp_csv(fs::path(args.out) / "modality_importance.csv");
  imp_csv << "task,importance_time,importance_tf,importance_semantic\n";

  for (int task = 0; task < 3; ++task) {
    Loaded& loaded = systems[static_cast<std::size_t>(task)];
    const train::EvalMetrics metrics = train::evaluate(
        [&loaded](const train::TaskItem& item) {
          return loaded.system.model.predict(item.audio, item.feature,
                                             item.tokens);
        },
        loaded.data.dev);
    tasks_csv << "task" << task << "," << metrics.total << ","
              << metrics.accuracy << "\n";
    for (const train::PredictionRow& row : metrics.rows) {
      preds_csv << task << "," << row.sample_id << "," << row.subject_id << ","
                << row.label << "," << row.predicted << "," << row.p_at_risk
                << "\n";
    }
    const std::array<double, 3> importance =
        train::modality_importance(loaded.system, loaded.data.dev);
    imp_csv << task << "," << importance[0] << "," << importance[1] << ","
            << importance[2] << "\n";
    std::cout << "task " << task << " dev accuracy: " << metrics.accuracy
              << " (n=" << metrics.total << ")\n";
  }
  int n_combined = 0;
  const double combined = combined_accuracy({}, &n_combined);
  tasks_csv << "combined," << n_combined << "," << combined << "\n";
  std::cout << "combined dev accuracy: " << combined << " (n=" << n_combined
            << ")\n";

  if (args.ablate) {
    struct AblationRow {
      const char* name;
      fusion::ModalityMask mask;
    };
    const std::array<AblationRow, 6> rows = {{
        {"waveform", {true, false, false}},
        {"mel", {false, true, false}},
        {"text", {false, false, true}},
        {"text_waveform", {true, false, true}},
        {"text_mel", {false, true, true}},
        {"text_mel_waveform", {true, true, true}},
    }};
    std::ofstream ablation_csv(fs::path(args.out) / "eval_ablation.csv");
    ablation_csv << "config,acoustic_time,acoustic_tf,semantic,n,accuracy\n";
    for (const AblationRow& row : rows) {
      int n = 0;
      const double acc = combined_accuracy(row.mask, &n);
      ablation_csv << row.name << "," << row.mask.time << "," << row.mask.tf
                   << "," << row.mask.sem << "," << n << "," << acc << "\n";
      std::cout << "ablation " << row.name << ": " << acc << "\n";
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_params(const std::string& out_file) {
  const branches::FullScaleReport report = branches::fullscale_report();

  // Desk-scale defaults: analytic vs instantiated.
  fusion::FusedModelConfig desk_cfg;
  desk_cfg.sem.vocab_size = 64;
  Pcg32 rng(0, 1);
  fusion::FusedModel desk(desk_cfg, rng);
  const std::int64_t desk_analytic = desk.param_count();
  const std::int64_t desk_instantiated =
      nn::instantiated_param_count(desk.parameters());

  std::string text;
  char buf[160];
  const auto line = [&](const char* key, double value) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f\n", key, value);
    text += buf;
  };
  text += "quantity,value\n";
  line("time_full_params", static_cast<double>(report.time_full));
  line("time_lightweight_params", static_cast<double>(report.time_lightweight));
  line("time_reduction", report.time_reduction);
  line("semantic_full_params", static_cast<double>(report.semantic_full));
  line("semantic_lightweight_params",
       static_cast<double>(report.semantic_lightweight));
  line("semantic_reduction", report.semantic_reduction);
  line("tf_crnn_params", static_cast<double>(report.tf_crnn));
  line("baseline_total_params", static_cast<double>(report.baseline_total));
  line("proposed_total_params", static_cast<double>(report.proposed_total));
  line("proposed_over_baseline", report.proposed_over_baseline);
  line("desk_model_params_analytic", static_cast<double>(desk_analytic));
  line("desk_model_params_instantiated",
       static_cast<double>(desk_instantiated));

  std::cout << text;
  if (!out_file.empty()) {
    std::ofstream os(out_file);
    os << text;
  }
  if (desk_analytic != desk_instantiated) {
    std::cerr << "desk model analytic/instantiated counts disagree\n";
    return kExitNumeric;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(int instances, std::uint64_t seed, bool corrupt_backward) {
  if (corrupt_backward) {
    detail::set_backward_corruption(1e-3);
  }
  const gradsuite::SuiteReport report = gradsuite::run_suite(instances, seed);
  detail::set_backward_corruption(0.0);

  std::printf("%-30s %12s %10s %12s %6s\n", "check", "max_rel_err",
              "threshold", "abs_tiny", "status");
  for (const gradsuite::CheckResult& r : report.results) {
    std::printf("%-30s %12.3e %10.0e %12.3e %6s\n", r.name.c_str(),
                r.max_rel_error, r.threshold, r.max_abs_error_tiny,
                r.passed() ? "ok" : "FAIL");
  }
  if (!report.all_passed()) {
    std::printf("gradient check FAILED\n");
    return kExitNumeric;
  }
  std::printf("all gradient checks passed\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "trifuse: a lightweight three-branch audio/text classifier with "
      "dynamic fusion"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--out", synth_args.out, "output directory")->required();
  synth->add_option("--subjects", synth_args.subjects, "number of subjects");
  synth->add_option("--seconds", synth_args.seconds, "audio seconds per clip");
  synth->add_option("--audio-informativeness", synth_args.audio_informativeness,
                    "0 = audio carries no label signal, 1 = separable");
  synth->add_option("--semantic-informativeness",
                    synth_args.semantic_informativeness,
                    "0 = text carries no label signal, 1 = separable");
  synth->add_option("--noise", synth_args.noise, "additive noise level");
  synth->add_option("--seed", synth_args.seed, "generator seed");

  ExtractArgs extract_args;
  CLI::App* extract =
      app.add_subcommand("extract", "dump features for every manifest record");
  extract->add_option("--manifest", extract_args.manifest, "manifest path")
      ->required();
  extract->add_option("--out", extract_args.out, "output directory")
      ->required();
  extract->add_option("--feature", extract_args.feature, "mel or mfcc");
  extract->add_option("--format", extract_args.format, "csv or bin");
  extract->add_option("--seed", extract_args.seed, "unused, kept for stamps");

  TrainArgs train_args;
  CLI::App* train_cmd =
      app.add_subcommand("train", "run the three-stage training protocol");
  train_cmd->add_option("--manifest", train_args.manifest, "manifest path")
      ->required();
  train_cmd->add_option("--out", train_args.out, "checkpoint directory")
      ->required();
  train_cmd->add_option("--task", train_args.task, "0, 1, 2 or all");
  train_cmd->add_option("--stage", train_args.stage, "1, 2, 3 or all");
  train_cmd->add_option("--feature", train_args.feature, "mel or mfcc");
  train_cmd->add_option("--seed", train_args.seed, "training seed");
  train_cmd->add_option("--max-epochs", train_args.max_epochs, "epoch cap");
  train_cmd->add_option("--patience", train_args.patience,
                        "early-stopping patience");
  train_cmd->add_option("--lr1", train_args.lr1, "override stage-1 lr");
  train_cmd->add_option("--lr2", train_args.lr2, "override stage-2 lr");
  train_cmd->add_option("--lr3", train_args.lr3, "override stage-3 lr");
  train_cmd->add_option("--batch1", train_args.batch1, "override stage-1 batch");
  train_cmd->add_option("--batch2", train_args.batch2, "override stage-2 batch");
  train_cmd->add_option("--batch3", train_args.batch3, "override stage-3 batch");

  EvalArgs eval_args;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "evaluate trained systems and the ensemble");
  eval_cmd->add_option("--manifest", eval_args.manifest, "manifest path")
      ->required();
  eval_cmd->add_option("--out", eval_args.out,
                       "directory with checkpoints; reports land here")
      ->required();
  eval_cmd->add_flag("--ablate", eval_args.ablate,
                     "also emit the modality-ablation table");

  std::string params_out;
  CLI::App* params_cmd = app.add_subcommand(
      "params", "print analytic parameter counts and reduction ratios");
  params_cmd->add_option("--out", params_out, "also write the CSV here");

  int gc_instances = 20;
  std::uint64_t gc_seed = 20260810;
  bool gc_corrupt = false;
  CLI::App* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "finite-difference verification of every op and layer");
  gradcheck_cmd->add_option("--instances", gc_instances,
                            "random instances per op");
  gradcheck_cmd->add_option("--seed", gc_seed, "suite seed");
  gradcheck_cmd
      ->add_flag("--corrupt-backward", gc_corrupt,
                 "negative control: corrupt one backward pass")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
    if (synth->parsed()) return cmd_synth(synth_args);
    if (extract->parsed()) return cmd_extract(extract_args);
    if (train_cmd->parsed()) return cmd_train(train_args);
    if (eval_cmd->parsed()) return cmd_eval(eval_args);
    if (params_cmd->parsed()) return cmd_params(params_out);
    if (gradcheck_cmd->parsed()) {
      return cmd_gradcheck(gc_instances, gc_seed, gc_corrupt);
    }
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const InvalidInputError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitData;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ContractError& e) {
    std::cerr << "contract error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}
