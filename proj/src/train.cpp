// Copyright 2026 The Trifuse Authors
// Three-stage training protocol and evaluation
//
// Licensed under the Apache License, Version 2.0

#include "trifuse/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>
#include <utility>

#include "trifuse/errors.hpp"

namespace trifuse::train {

namespace {

double prob_loss(const Eigen::Vector2d& probs, int label) {
  return -std::log(std::max(probs[label], 1e-300));
}

int argmax2(const Eigen::Vector2d& probs) { return probs[1] > probs[0] ? 1 : 0; }

}  // namespace

// ---------------------------------------------------------------------------
// TrainPlan / Adam / EarlyStopper
// ---------------------------------------------------------------------------

double TrainPlan::lr(int stage, int task) const {
  if (task < 0 || task >= 3) throw ContractError("task must be 0, 1 or 2");
  switch (stage) {
    case 1:
      return stage1_lr[static_cast<std::size_t>(task)];
    case 2:
      return stage2_lr[static_cast<std::size_t>(task)];
    case 3:
      return stage3_lr[static_cast<std::size_t>(task)];
    default:
      throw ContractError("stage must be 1, 2 or 3");
  }
}

int TrainPlan::batch(int stage) const {
  if (stage < 1 || stage > 3) throw ContractError("stage must be 1, 2 or 3");
  return stage_batch[static_cast<std::size_t>(stage - 1)];
}

void TrainPlan::validate() const {
  for (int stage = 1; stage <= 3; ++stage) {
    for (int task = 0; task < 3; ++task) {
      if (lr(stage, task) <= 0.0) {
        throw ConfigError("learning rates must be positive");
      }
    }
    if (batch(stage) <= 0) throw ConfigError("batch sizes must be positive");
  }
  if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
  if (patience < 1) throw ConfigError("patience must be positive");
}

Adam::Adam(nn::ParamRefs params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const nn::Parameter* p : params_) {
    m_.push_back(Eigen::ArrayXd::Zero(p->size()));
    v_.push_back(Eigen::ArrayXd::Zero(p->size()));
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    nn::Parameter* p = params_[i];
    if (!p->updatable()) continue;
    const Eigen::ArrayXd& g = p->tensor.grad();
    if (g.size() == 0) continue;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.square();
    const Eigen::ArrayXd m_hat = m_[i] / bc1;
    const Eigen::ArrayXd v_hat = v_[i] / bc2;
    p->tensor.values_mut() -= lr * m_hat / (v_hat.sqrt() + cfg_.eps);
  }
}

void Adam::zero_grad() {
  for (nn::Parameter* p : params_) p->tensor.zero_grad();
}

EarlyStopper::EarlyStopper(int patience)
    : patience_(patience), best_loss_(std::numeric_limits<double>::infinity()) {}

bool EarlyStopper::observe(double val_loss) {
  ++epoch_;
  if (val_loss < best_loss_) {
    best_loss_ = val_loss;
    best_epoch_ = epoch_;
    epochs_since_best_ = 0;
    return true;
  }
  ++epochs_since_best_;
  return false;
}

void write_history_csv(const std::filesystem::path& path,
                       const StageHistory& history) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write history: " + path.string());
  os << "epoch,split,loss,accuracy\n";
  char buf[160];
  for (const EpochRow& row : history.rows) {
    std::snprintf(buf, sizeof(buf), "%d,train,%.9g,%.9g\n", row.epoch,
                  row.train_loss, row.train_accuracy);
    os << buf;
    std::snprintf(buf, sizeof(buf), "%d,internal_val,%.9g,%.9g\n", row.epoch,
                  row.val_loss, row.val_accuracy);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Data binding
// ---------------------------------------------------------------------------

TaskData build_task_data(const data::Manifest& manifest, int task,
                         const data::Tokenizer& tokenizer,
                         dsp::FeatureKind feature_kind,
                         const dsp::FeatureConfig& feature_cfg) {
  if (task < 0 || task >= data::kNumTasks) {
    throw ContractError("task must be 0, 1 or 2");
  }
  TaskData out;
  for (const data::SampleRecord& rec : manifest.records) {
    if (rec.task != task) continue;
    TaskItem item;
    item.sample_id = rec.id;
    item.subject_id = rec.subject_id;
    item.label = rec.label;
    item.audio = data::read_wav(manifest.resolve_audio(rec));
    item.feature = feature_kind == dsp::FeatureKind::kMfcc
                       ? dsp::mfcc(item.audio, feature_cfg)
                       : dsp::mel_spectrogram(item.audio, feature_cfg);
    item.tokens = tokenizer.encode(rec.transcript);
    std::vector<TaskItem>* bucket = nullptr;
    if (rec.split == "train") {
      bucket = &out.train;
    } else if (rec.split == "internal_val") {
      bucket = &out.internal_val;
    } else {
      bucket = &out.dev;
    }
    bucket->push_back(std::move(item));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generic fit loop
// ---------------------------------------------------------------------------

namespace {

std::vector<Eigen::ArrayXd> snapshot_values(const nn::ParamRefs& params) {
  std::vector<Eigen::ArrayXd> out;
  out.reserve(params.size());
  for (const nn::Parameter* p : params) out.push_back(p->tensor.values());
  return out;
}

void restore_values(const nn::ParamRefs& params,
                    const std::vector<Eigen::ArrayXd>& snapshot) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->tensor.values_mut() = snapshot[i];
  }
}

}  // namespace

StageHistory fit(const FitSpec& spec, const std::vector<TaskItem>& train_items,
                 const std::vector<TaskItem>& val_items, Pcg32& shuffle_rng) {
  if (train_items.empty()) throw InvalidInputError("empty training split");
  if (val_items.empty()) throw InvalidInputError("empty validation split");
  if (spec.batch < 1) throw ConfigError("batch must be positive");

  Adam optimizer(spec.trainable);
  EarlyStopper stopper(spec.patience);
  StageHistory history;
  std::vector<Eigen::ArrayXd> best = snapshot_values(spec.trainable);

  std::vector<std::size_t> order(train_items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= spec.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    int correct = 0;
    std::size_t cursor = 0;
    optimizer.zero_grad();
    while (cursor < order.size()) {
      const std::size_t batch_n =
          std::min(static_cast<std::size_t>(spec.batch),
                   order.size() - cursor);
      for (std::size_t b = 0; b < batch_n; ++b) {
        const TaskItem& item = train_items[order[cursor + b]];
        Eigen::Vector2d probs;
        Tensor loss = spec.loss_fn(item, &probs);
        loss_sum += loss.scalar_value();
        if (argmax2(probs) == item.label) ++correct;
        loss.backward(1.0 / static_cast<double>(batch_n));
      }
      optimizer.step(spec.lr);
      optimizer.zero_grad();
      cursor += batch_n;
    }

    double val_loss = 0.0;
    int val_correct = 0;
    for (const TaskItem& item : val_items) {
      const Eigen::Vector2d probs = spec.predict_fn(item);
      val_loss += prob_loss(probs, item.label);
      if (argmax2(probs) == item.label) ++val_correct;
    }
    val_loss /= static_cast<double>(val_items.size());

    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train_items.size());
    row.train_accuracy =
        static_cast<double>(correct) / static_cast<double>(train_items.size());
    row.val_loss = val_loss;
    row.val_accuracy = static_cast<double>(val_correct) /
                       static_cast<double>(val_items.size());
    history.rows.push_back(row);

    if (stopper.observe(val_loss)) {
      best = snapshot_values(spec.trainable);
    }
    if (stopper.should_stop()) break;
  }

  restore_values(spec.trainable, best);
  history.best_epoch = stopper.best_epoch();
  history.best_val_loss = stopper.best_loss();
  return history;
}

// ---------------------------------------------------------------------------
// Task systems and stages
// ---------------------------------------------------------------------------

TaskSystem::TaskSystem(SystemConfig cfg, data::Tokenizer tok)
    : config(std::move(cfg)),
      model([this] {
        Pcg32 rng(config.seed, 100 + static_cast<std::uint64_t>(config.task));
        return fusion::FusedModel(config.model, rng);
      }()),
      tokenizer(std::move(tok)) {}

namespace {

nlohmann::json feature_cfg_json(const dsp::FeatureConfig& cfg) {
  return {{"win_len_samples", cfg.win_len_samples},
          {"hop_samples", cfg.hop_samples},
          {"fft_size", cfg.fft_size},
          {"n_mels", cfg.n_mels},
          {"n_mfcc", cfg.n_mfcc},
          {"f_min_hz", cfg.f_min_hz},
          {"f_max_hz", cfg.f_max_hz},
          {"log_floor", cfg.log_floor}};
}

dsp::FeatureConfig feature_cfg_from_json(const nlohmann::json& j) {
  dsp::FeatureConfig cfg;
  cfg.win_len_samples = j.at("win_len_samples").get<int>();
  cfg.hop_samples = j.at("hop_samples").get<int>();
  cfg.fft_size = j.at("fft_size").get<int>();
  cfg.n_mels = j.at("n_mels").get<int>();
  cfg.n_mfcc = j.at("n_mfcc").get<int>();
  cfg.f_min_hz = j.at("f_min_hz").get<double>();
  cfg.f_max_hz = j.at("f_max_hz").get<double>();
  cfg.log_floor = j.at("log_floor").get<double>();
  return cfg;
}

nlohmann::json model_cfg_json(const fusion::FusedModelConfig& cfg) {
  nlohmann::json encoder = nlohmann::json::array();
  for (const branches::ConvSpec& spec : cfg.time.encoder) {
    encoder.push_back({{"channels", spec.channels},
                       {"kernel", spec.kernel},
                       {"stride", spec.stride}});
  }
  return {
      {"time",
       {{"encoder", encoder},
        {"n_layers", cfg.time.n_layers},
        {"hidden", cfg.time.hidden},
        {"ffn", cfg.time.ffn},
        {"heads", cfg.time.heads},
        {"d_embed", cfg.time.d_embed}}},
      {"tf",
       {{"channels", {cfg.tf.channels[0], cfg.tf.channels[1], cfg.tf.channels[2]}},
        {"input_bins", cfg.tf.input_bins},
        {"bilstm_hidden", cfg.tf.bilstm_hidden},
        {"d_embed", cfg.tf.d_embed}}},
      {"sem",
       {{"vocab_size", cfg.sem.vocab_size},
        {"d_model", cfg.sem.d_model},
        {"n_layers", cfg.sem.n_layers},
        {"ffn", cfg.sem.ffn},
        {"heads", cfg.sem.heads},
        {"max_seq_len", cfg.sem.max_seq_len},
        {"d_embed", cfg.sem.d_embed}}},
  };
}

fusion::FusedModelConfig model_cfg_from_json(const nlohmann::json& j) {
  fusion::FusedModelConfig cfg;
  cfg.time.encoder.clear();
  for (const auto& spec : j.at("time").at("encoder")) {
    cfg.time.encoder.push_back({spec.at("channels").get<Eigen::Index>(),
                                spec.at("kernel").get<Eigen::Index>(),
                                spec.at("stride").get<Eigen::Index>()});
  }
  cfg.time.n_layers = j.at("time").at("n_layers").get<Eigen::Index>();
  cfg.time.hidden = j.at("time").at("hidden").get<Eigen::Index>();
  cfg.time.ffn = j.at("time").at("ffn").get<Eigen::Index>();
  cfg.time.heads = j.at("time").at("heads").get<Eigen::Index>();
  cfg.time.d_embed = j.at("time").at("d_embed").get<Eigen::Index>();
  const auto& tf = j.at("tf");
  cfg.tf.channels = {tf.at("channels")[0].get<Eigen::Index>(),
                     tf.at("channels")[1].get<Eigen::Index>(),
                     tf.at("channels")[2].get<Eigen::Index>()};
  cfg.tf.input_bins = tf.at("input_bins").get<Eigen::Index>();
  cfg.tf.bilstm_hidden = tf.at("bilstm_hidden").get<Eigen::Index>();
  cfg.tf.d_embed = tf.at("d_embed").get<Eigen::Index>();
  const auto& sem = j.at("sem");
  cfg.sem.vocab_size = sem.at("vocab_size").get<Eigen::Index>();
  cfg.sem.d_model = sem.at("d_model").get<Eigen::Index>();
  cfg.sem.n_layers = sem.at("n_layers").get<Eigen::Index>();
  cfg.sem.ffn = sem.at("ffn").get<Eigen::Index>();
  cfg.sem.heads = sem.at("heads").get<Eigen::Index>();
  cfg.sem.max_seq_len = sem.at("max_seq_len").get<Eigen::Index>();
  cfg.sem.d_embed = sem.at("d_embed").get<Eigen::Index>();
  return cfg;
}

}  // namespace

nlohmann::json system_metadata(const TaskSystem& system, int stage) {
  return {{"format", "trifuse-system"},
          {"stage", stage},
          {"task", system.config.task},
          {"seed", system.config.seed},
          {"feature_kind",
           system.config.feature_kind == dsp::FeatureKind::kMfcc ? "mfcc"
                                                                 : "mel"},
          {"feature_config", feature_cfg_json(system.config.feature_cfg)},
          {"model_config", model_cfg_json(system.config.model)},
          {"tokenizer", system.tokenizer.to_json()}};
}

SystemConfig system_config_from_metadata(const nlohmann::json& meta) {
  SystemConfig cfg;
  cfg.task = meta.at("task").get<int>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  cfg.feature_kind = meta.at("feature_kind").get<std::string>() == "mfcc"
                         ? dsp::FeatureKind::kMfcc
                         : dsp::FeatureKind::kLogMel;
  cfg.feature_cfg = feature_cfg_from_json(meta.at("feature_config"));
  cfg.model = model_cfg_from_json(meta.at("model_config"));
  return cfg;
}

namespace {

void set_frozen_all(const nn::ParamRefs& params, bool frozen) {
  for (nn::Parameter* p : params) p->set_frozen(frozen);
}

}  // namespace

StageHistory run_stage(TaskSystem& system, int stage, const TaskData& data,
                       const TrainPlan& plan) {
  plan.validate();
  const int task = system.config.task;
  fusion::FusedModel& model = system.model;

  FitSpec spec;
  spec.lr = plan.lr(stage, task);
  spec.batch = plan.batch(stage);
  spec.max_epochs = plan.max_epochs;
  spec.patience = plan.patience;

  Pcg32 shuffle_rng(plan.seed, 300 + static_cast<std::uint64_t>(task) * 8 +
                                   static_cast<std::uint64_t>(stage));

  if (stage == 1) {
    // Fine-tune the time branch behind a temporary classification head.
    Pcg32 head_rng(plan.seed, 200 + static_cast<std::uint64_t>(task) * 8 + 1);
    auto head = std::make_shared<nn::Linear>("stage1_head",
                                             model.d_embed(), 2, head_rng);
    set_frozen_all(model.time_params(), false);
    spec.trainable = model.time_params();
    head->collect(spec.trainable);
    spec.loss_fn = [&model, head](const TaskItem& item,
                                  Eigen::Vector2d* probs_out) {
      const Tensor logits = head->forward(model.time_branch().forward(item.audio));
      if (probs_out != nullptr) {
        NoGradGuard guard;
        const Tensor p = softmax_rows(logits);
        *probs_out = {p.values()[0], p.values()[1]};
      }
      return cross_entropy(logits, item.label);
    };
    spec.predict_fn = [&model, head](const TaskItem& item) {
      NoGradGuard guard;
      const Tensor p =
          softmax_rows(head->forward(model.time_branch().forward(item.audio)));
      return Eigen::Vector2d{p.values()[0], p.values()[1]};
    };
    return fit(spec, data.train, data.internal_val, shuffle_rng);
  }

  if (stage == 2) {
    Pcg32 head_rng(plan.seed, 200 + static_cast<std::uint64_t>(task) * 8 + 2);
    auto head = std::make_shared<nn::Linear>("stage2_head",
                                             model.d_embed(), 2, head_rng);
    set_frozen_all(model.semantic_params(), false);
    spec.trainable = model.semantic_params();
    head->collect(spec.trainable);
    spec.loss_fn = [&model, head](const TaskItem& item,
                                  Eigen::Vector2d* probs_out) {
      const Tensor logits =
          head->forward(model.semantic_branch().forward(item.tokens));
      if (probs_out != nullptr) {
        NoGradGuard guard;
        const Tensor p = softmax_rows(logits);
        *probs_out = {p.values()[0], p.values()[1]};
      }
      return cross_entropy(logits, item.label);
    };
    spec.predict_fn = [&model, head](const TaskItem& item) {
      NoGradGuard guard;
      const Tensor p = softmax_rows(
          head->forward(model.semantic_branch().forward(item.tokens)));
      return Eigen::Vector2d{p.values()[0], p.values()[1]};
    };
    return fit(spec, data.train, data.internal_val, shuffle_rng);
  }

  if (stage != 3) throw ContractError("stage must be 1, 2 or 3");

  // Stage 3: freeze the fine-tuned branches, train everything else. The
  // frozen branches are constant for the whole stage, so their embeddings
  // are computed once per item.
  set_frozen_all(model.time_params(), true);
  set_frozen_all(model.semantic_params(), true);
  spec.trainable = model.tf_params();
  for (nn::Parameter* p : model.head_params()) spec.trainable.push_back(p);

  using FrozenPair = std::pair<Eigen::ArrayXd, Eigen::ArrayXd>;
  auto cache =
      std::make_shared<std::unordered_map<const TaskItem*, FrozenPair>>();
  auto frozen = [&model, cache](const TaskItem& item) -> const FrozenPair& {
    auto it = cache->find(&item);
    if (it == cache->end()) {
      NoGradGuard guard;
      FrozenPair pair{model.time_branch().forward(item.audio).values(),
                      model.semantic_branch().forward(item.tokens).values()};
      it = cache->emplace(&item, std::move(pair)).first;
    }
    return it->second;
  };
  auto fused_logits = [&model, frozen](const TaskItem& item) {
    const FrozenPair& cached = frozen(item);
    const Tensor f_time = Tensor::row_vector(cached.first);
    const Tensor f_sem = Tensor::row_vector(cached.second);
    const Tensor f_tf = model.tf_branch().forward(item.feature);
    const Tensor fused_vec =
        fusion::fuse(f_time, f_tf, f_sem, model.w_time().tensor,
                     model.w_tf().tensor, model.w_sem().tensor);
    return model.classifier().forward(fused_vec);
  };

  spec.loss_fn = [fused_logits](const TaskItem& item,
                                Eigen::Vector2d* probs_out) {
    const Tensor logits = fused_logits(item);
    if (probs_out != nullptr) {
      NoGradGuard guard;
      const Tensor p = softmax_rows(logits);
      *probs_out = {p.values()[0], p.values()[1]};
    }
    return cross_entropy(logits, item.label);
  };
  spec.predict_fn = [fused_logits](const TaskItem& item) {
    NoGradGuard guard;
    const Tensor p = softmax_rows(fused_logits(item));
    return Eigen::Vector2d{p.values()[0], p.values()[1]};
  };
  return fit(spec, data.train, data.internal_val, shuffle_rng);
}

double system_accuracy(const TaskSystem& system,
                       const std::vector<TaskItem>& items,
                       const fusion::ModalityMask& mask) {
  const EvalMetrics metrics = evaluate(
      [&system, &mask](const TaskItem& item) {
        return system.model.predict(item.audio, item.feature, item.tokens,
                                    mask);
      },
      items);
  return metrics.accuracy;
}

std::array<double, 3> modality_importance(const TaskSystem& system,
                                          const std::vector<TaskItem>& items) {
  if (items.empty()) throw InvalidInputError("empty evaluation set");
  NoGradGuard guard;
  std::array<double, 3> norm_sums = {0.0, 0.0, 0.0};
  for (const TaskItem& item : items) {
    const fusion::FusedModel::BranchOutputs outputs =
        system.model.branch_outputs(item.audio, item.feature, item.tokens);
    norm_sums[0] += std::sqrt(outputs.time.values().square().sum());
    norm_sums[1] += std::sqrt(outputs.tf.values().square().sum());
    norm_sums[2] += std::sqrt(outputs.sem.values().square().sum());
  }
  const double n = static_cast<double>(items.size());
  const fusion::FusedModel& model = system.model;
  return {std::abs(model.w_time().tensor.values()[0]) * norm_sums[0] / n,
          std::abs(model.w_tf().tensor.values()[0]) * norm_sums[1] / n,
          std::abs(model.w_sem().tensor.values()[0]) * norm_sums[2] / n};
}

// ---------------------------------------------------------------------------
// Ensemble and evaluation
// ---------------------------------------------------------------------------

Eigen::Vector2d ensemble_predict(
    const std::array<Eigen::Vector2d, 3>& outputs) {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const Eigen::Vector2d& p : outputs) {
    if (p[0] < 0.0 || p[1] < 0.0 || std::abs(p.sum() - 1.0) > 1e-6) {
      throw InvalidInputError("ensemble inputs must be probability vectors");
    }
    mean += p;
  }
  return mean / 3.0;
}

EvalMetrics evaluate(
    const std::function<Eigen::Vector2d(const TaskItem&)>& predictor,
    const std::vector<TaskItem>& items) {
  if (items.empty()) throw InvalidInputError("cannot evaluate an empty dataset");
  EvalMetrics metrics;
  metrics.total = static_cast<int>(items.size());
  for (const TaskItem& item : items) {
    const Eigen::Vector2d probs = predictor(item);
    const int predicted = argmax2(probs);
    if (predicted == item.label) ++metrics.correct;
    metrics.confusion[static_cast<std::size_t>(item.label)]
                     [static_cast<std::size_t>(predicted)] += 1;
    metrics.rows.push_back(
        {item.sample_id, item.subject_id, item.label, predicted, probs[1]});
  }
  metrics.accuracy =
      static_cast<double>(metrics.correct) / static_cast<double>(metrics.total);
  return metrics;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

std::filesystem::path stage_checkpoint_path(const std::filesystem::path& dir,
                                            int task, int stage) {
  return dir / ("task" + std::to_string(task) + "_stage" +
                std::to_string(stage) + ".ckpt");
}

namespace {

void save_system(TaskSystem& system, int stage,
                 const std::filesystem::path& path) {
  ckpt::save(ckpt::from_params(system.model.parameters(),
                               system_metadata(system, stage)),
             path);
}

}  // namespace

PipelineResult run_pipeline(const PipelineOptions& options) {
  if (options.first_stage < 1 || options.last_stage > 3 ||
      options.first_stage > options.last_stage) {
    throw ContractError("stage range must lie within 1..3");
  }
  options.plan.validate();

  const data::Manifest manifest = data::load_manifest(options.manifest_path);
  if (manifest.records.empty()) {
    throw DataError("manifest has no records: " +
                    options.manifest_path.string());
  }

  // Vocabulary from this task's training transcripts only.
  std::vector<std::string> train_texts;
  for (const data::SampleRecord& rec : manifest.records) {
    if (rec.task == options.task && rec.split == "train") {
      train_texts.push_back(rec.transcript);
    }
  }
  data::Tokenizer tokenizer = data::Tokenizer::build(train_texts);

  SystemConfig sys_cfg;
  sys_cfg.model.tf.input_bins =
      options.feature_kind == dsp::FeatureKind::kMfcc
          ? options.feature_cfg.n_mfcc
          : options.feature_cfg.n_mels;
  sys_cfg.model.sem.vocab_size = tokenizer.vocab_size();
  sys_cfg.feature_kind = options.feature_kind;
  sys_cfg.feature_cfg = options.feature_cfg;
  sys_cfg.task = options.task;
  sys_cfg.seed = options.plan.seed;

  TaskSystem system(sys_cfg, std::move(tokenizer));

  // Prerequisite stages must already exist on disk when resuming.
  for (int stage = 1; stage < options.first_stage; ++stage) {
    const std::filesystem::path path =
        stage_checkpoint_path(options.out_dir, options.task, stage);
    if (!std::filesystem::exists(path)) {
      throw ContractError("stage " + std::to_string(options.first_stage) +
                          " requires the stage " + std::to_string(stage) +
                          " checkpoint " + path.string());
    }
    const ckpt::Checkpoint prev = ckpt::load(path);
    if (stage == 1) {
      ckpt::load_into(prev, system.model.time_params());
    } else {
      ckpt::load_into(prev, system.model.semantic_params());
    }
  }

  const TaskData task_data =
      build_task_data(manifest, options.task, system.tokenizer,
                      options.feature_kind, options.feature_cfg);

  std::filesystem::create_directories(options.out_dir);
  PipelineResult result;
  for (int stage = options.first_stage; stage <= options.last_stage; ++stage) {
    StageHistory history = run_stage(system, stage, task_data, options.plan);
    const std::filesystem::path ckpt_path =
        stage_checkpoint_path(options.out_dir, options.task, stage);
    save_system(system, stage, ckpt_path);
    if (options.write_history) {
      write_history_csv(options.out_dir /
                            ("task" + std::to_string(options.task) + "_stage" +
                             std::to_string(stage) + "_history.csv"),
                        history);
    }
    result.histories.push_back(std::move(history));
    result.last_checkpoint = ckpt_path;
  }

  result.final_internal_val_accuracy =
      system_accuracy(system, task_data.internal_val);
  return result;
}

TaskSystem load_system(const std::filesystem::path& ckpt_path) {
  const ckpt::Checkpoint checkpoint = ckpt::load(ckpt_path);
  SystemConfig cfg = system_config_from_metadata(checkpoint.metadata);
  data::Tokenizer tokenizer =
      data::Tokenizer::from_json(checkpoint.metadata.at("tokenizer"));
  TaskSystem system(std::move(cfg), std::move(tokenizer));
  ckpt::load_into(checkpoint, system.model.parameters());
  return system;
}

}  // namespace trifuse::train
