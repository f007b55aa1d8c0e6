// Copyright 2026 The Trifuse Authors
// Three-stage training protocol, Adam, early stopping, ensemble
// inference and evaluation
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "trifuse/checkpoint.hpp"
#include "trifuse/data.hpp"
#include "trifuse/dsp.hpp"
#include "trifuse/fusion.hpp"

namespace trifuse::train {

/// Stage schedule. Learning rates and batch sizes are per (stage, task):
/// stage 1 fine-tunes the time branch at 5e-5 / batch 8 for every task,
/// stage 2 the semantic branch at 5e-5 / 5e-5 / 5e-4 with batch 16, and
/// stage 3 trains the TF branch, fusion weights and classifier at
/// 1e-5 / 3e-5 / 4e-5 with batch 8. Up to 200 epochs with early stopping
/// (patience 20) on internal-validation loss.
struct TrainPlan {
  std::array<double, 3> stage1_lr = {5e-5, 5e-5, 5e-5};
  std::array<double, 3> stage2_lr = {5e-5, 5e-5, 5e-4};
  std::array<double, 3> stage3_lr = {1e-5, 3e-5, 4e-5};
  std::array<int, 3> stage_batch = {8, 16, 8};
  int max_epochs = 200;
  int patience = 20;
  std::uint64_t seed = 0;

  double lr(int stage, int task) const;
  int batch(int stage) const;
  void validate() const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list. Parameters that are
/// frozen or non-trainable at step time are skipped entirely: no update,
/// no moment change.
class Adam {
 public:
  explicit Adam(nn::ParamRefs params, AdamConfig cfg = {});
  void step(double lr);
  void zero_grad();

 private:
  nn::ParamRefs params_;
  AdamConfig cfg_;
  std::vector<Eigen::ArrayXd> m_, v_;
  std::int64_t t_ = 0;
};

/// Minimum-validation-loss bookkeeping with patience. The owner snapshots
/// parameters whenever observe() reports an improvement and restores the
/// best snapshot when training ends (stopped early or not).
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience);
  /// Returns true when val_loss strictly improves on the best seen.
  bool observe(double val_loss);
  bool should_stop() const { return epochs_since_best_ >= patience_; }
  double best_loss() const { return best_loss_; }
  int best_epoch() const { return best_epoch_; }

 private:
  int patience_;
  double best_loss_;
  int best_epoch_ = -1;
  int epochs_since_best_ = 0;
  int epoch_ = 0;
};

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct StageHistory {
  std::vector<EpochRow> rows;
  int best_epoch = -1;
  double best_val_loss = 0.0;
};

/// `epoch,split,loss,accuracy` with one train and one internal_val row
/// per epoch.
void write_history_csv(const std::filesystem::path& path,
                       const StageHistory& history);

// ---------------------------------------------------------------------------
// Data binding
// ---------------------------------------------------------------------------

/// One utterance with everything the model consumes precomputed.
struct TaskItem {
  std::string sample_id;
  std::string subject_id;
  dsp::AudioBuffer audio;
  dsp::FeatureMatrix feature;
  std::vector<int> tokens;
  int label = 0;
};

struct TaskData {
  std::vector<TaskItem> train, internal_val, dev;
};

/// Extracts features and tokens for every record of one task.
TaskData build_task_data(const data::Manifest& manifest, int task,
                         const data::Tokenizer& tokenizer,
                         dsp::FeatureKind feature_kind,
                         const dsp::FeatureConfig& feature_cfg);

// ---------------------------------------------------------------------------
// Generic fit loop
// ---------------------------------------------------------------------------

struct FitSpec {
  /// Builds the per-sample loss graph; probs_out receives the softmax of
  /// the same forward pass (for train accuracy bookkeeping).
  std::function<Tensor(const TaskItem&, Eigen::Vector2d* probs_out)> loss_fn;
  /// No-grad probability for validation.
  std::function<Eigen::Vector2d(const TaskItem&)> predict_fn;
  nn::ParamRefs trainable;
  double lr = 1e-3;
  int batch = 8;
  int max_epochs = 200;
  int patience = 20;
};

/// Epoch loop: seeded shuffle, batches as gradient accumulation (last
/// partial batch kept), Adam updates, early stopping on validation loss
/// with best-weights restoration.
StageHistory fit(const FitSpec& spec, const std::vector<TaskItem>& train_items,
                 const std::vector<TaskItem>& val_items, Pcg32& shuffle_rng);

// ---------------------------------------------------------------------------
// Task systems and the three-stage protocol
// ---------------------------------------------------------------------------

struct SystemConfig {
  fusion::FusedModelConfig model;
  dsp::FeatureKind feature_kind = dsp::FeatureKind::kLogMel;
  dsp::FeatureConfig feature_cfg;
  int task = 0;
  std::uint64_t seed = 0;
};

/// One per task: the full model plus the tokenizer and feature settings
/// it was trained with.
struct TaskSystem {
  SystemConfig config;
  fusion::FusedModel model;
  data::Tokenizer tokenizer;

  TaskSystem(SystemConfig cfg, data::Tokenizer tok);
};

nlohmann::json system_metadata(const TaskSystem& system, int stage);
SystemConfig system_config_from_metadata(const nlohmann::json& meta);

/// Runs one protocol stage in place. Stage 1 trains the time branch with
/// a temporary head, stage 2 the semantic branch likewise, stage 3
/// freezes both fine-tuned branches and trains the TF branch, the fusion
/// weights and the final classifier.
StageHistory run_stage(TaskSystem& system, int stage, const TaskData& data,
                       const TrainPlan& plan);

/// Accuracy of the system's full fused forward pass over items.
double system_accuracy(const TaskSystem& system,
                       const std::vector<TaskItem>& items,
                       const fusion::ModalityMask& mask = {});

/// Mean |w_m| * ||f_m||_2 over items, per modality (time, tf, sem).
std::array<double, 3> modality_importance(const TaskSystem& system,
                                          const std::vector<TaskItem>& items);

// ---------------------------------------------------------------------------
// Ensemble inference and evaluation
// ---------------------------------------------------------------------------

/// Arithmetic mean of the three per-task system outputs for one subject.
Eigen::Vector2d ensemble_predict(const std::array<Eigen::Vector2d, 3>& outputs);

struct PredictionRow {
  std::string sample_id;
  std::string subject_id;
  int label = 0;
  int predicted = 0;
  double p_at_risk = 0.0;
};

struct EvalMetrics {
  double accuracy = 0.0;
  int total = 0;
  int correct = 0;
  // confusion[truth][prediction]
  std::array<std::array<int, 2>, 2> confusion = {{{0, 0}, {0, 0}}};
  std::vector<PredictionRow> rows;
};

EvalMetrics evaluate(
    const std::function<Eigen::Vector2d(const TaskItem&)>& predictor,
    const std::vector<TaskItem>& items);

// ---------------------------------------------------------------------------
// Pipeline (manifest in, checkpoints + histories out)
// ---------------------------------------------------------------------------

struct PipelineOptions {
  std::filesystem::path manifest_path;
  std::filesystem::path out_dir;
  int task = 0;
  int first_stage = 1;
  int last_stage = 3;
  dsp::FeatureKind feature_kind = dsp::FeatureKind::kLogMel;
  dsp::FeatureConfig feature_cfg;
  TrainPlan plan;
  bool write_history = true;
};

struct PipelineResult {
  std::vector<StageHistory> histories;          // one per stage run
  double final_internal_val_accuracy = 0.0;     // of the last stage run
  std::filesystem::path last_checkpoint;
};

std::filesystem::path stage_checkpoint_path(const std::filesystem::path& dir,
                                            int task, int stage);

/// Runs stages [first_stage, last_stage] for one task, loading
/// prerequisite stage checkpoints from out_dir when the run does not
/// start at stage 1. Missing prerequisites raise ContractError.
PipelineResult run_pipeline(const PipelineOptions& options);

/// Rebuilds a trained system from a stage checkpoint.
TaskSystem load_system(const std::filesystem::path& ckpt_path);

}  // namespace trifuse::train
