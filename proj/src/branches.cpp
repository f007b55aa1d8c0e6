// Copyright 2026 The Trifuse Authors
// Embedding branches and full-scale parameter accounting
//
// Licensed under the Apache License, Version 2.0

#include "trifuse/branches.hpp"

#include <string>

#include "trifuse/errors.hpp"

namespace trifuse::branches {

// ---------------------------------------------------------------------------
// TimeBranch
// ---------------------------------------------------------------------------

TimeBranch::TimeBranch(const TimeBranchConfig& cfg, Pcg32& rng,
                       const std::string& prefix)
    : cfg_(cfg), proj_(prefix + ".proj", cfg.hidden, cfg.d_embed, rng) {
  if (cfg_.encoder.empty()) {
    throw ConfigError("time branch needs at least one conv layer");
  }
  if (cfg_.encoder.back().channels != cfg_.hidden) {
    throw ConfigError("last conv layer must emit transformer width");
  }
  if (cfg_.n_layers < 1) {
    throw ConfigError("time branch needs at least one transformer layer");
  }
  Eigen::Index in_channels = 1;
  for (std::size_t i = 0; i < cfg_.encoder.size(); ++i) {
    const ConvSpec& spec = cfg_.encoder[i];
    encoder_.emplace_back(prefix + ".enc." + std::to_string(i), in_channels,
                          spec.channels, spec.kernel, spec.stride, rng);
    in_channels = spec.channels;
  }
  const nn::TransformerEncoderLayerConfig layer_cfg{cfg_.hidden, cfg_.ffn,
                                                    cfg_.heads};
  for (Eigen::Index i = 0; i < cfg_.n_layers; ++i) {
    layers_.emplace_back(prefix + ".layers." + std::to_string(i), layer_cfg,
                         rng);
  }
}

Eigen::Index TimeBranch::frame_count(Eigen::Index n_samples) const {
  Eigen::Index len = n_samples;
  for (const nn::Conv1dLayer& conv : encoder_) {
    len = conv.out_len(len);
  }
  return len;
}

Eigen::Index TimeBranch::min_input_samples() const {
  // Invert the conv arithmetic: the shortest input yielding one frame.
  Eigen::Index len = 1;
  for (auto it = encoder_.rbegin(); it != encoder_.rend(); ++it) {
    len = (len - 1) * it->stride + it->kernel_width;
  }
  return len;
}

Tensor TimeBranch::forward(const dsp::AudioBuffer& audio) const {
  dsp::validate(audio);
  if (audio.samples.size() < min_input_samples()) {
    throw InvalidInputError(
        "waveform of " + std::to_string(audio.samples.size()) +
        " samples is shorter than the encoder receptive field (" +
        std::to_string(min_input_samples()) + ")");
  }
  Tensor x = Tensor::from_values({1, audio.samples.size()}, audio.samples);
  for (const nn::Conv1dLayer& conv : encoder_) {
    x = relu(conv.forward(x));
  }
  Tensor seq = transpose(x);  // [T, hidden]
  seq = add(seq, nn::sinusoidal_positions(seq.dim(0), cfg_.hidden));
  for (const nn::TransformerEncoderLayer& layer : layers_) {
    seq = layer.forward(seq);
  }
  return proj_.forward(mean_rows(seq));
}

void TimeBranch::collect(nn::ParamRefs& out) {
  for (nn::Conv1dLayer& conv : encoder_) conv.collect(out);
  for (nn::TransformerEncoderLayer& layer : layers_) layer.collect(out);
  proj_.collect(out);
}

std::int64_t TimeBranch::param_count() const {
  std::int64_t total = 0;
  Eigen::Index in_channels = 1;
  for (const ConvSpec& spec : cfg_.encoder) {
    total += nn::Conv1dLayer::count(in_channels, spec.channels, spec.kernel);
    in_channels = spec.channels;
  }
  total += cfg_.n_layers *
           nn::TransformerEncoderLayer::count(cfg_.hidden, cfg_.ffn);
  total += nn::Linear::count(cfg_.hidden, cfg_.d_embed);
  return total;
}

// ---------------------------------------------------------------------------
// TFBranch
// ---------------------------------------------------------------------------

namespace {
constexpr Eigen::Index kPoolFactor = 8;  // three 2x halvings
}

TFBranch::TFBranch(const TFBranchConfig& cfg, Pcg32& rng,
                   const std::string& prefix)
    : cfg_(cfg),
      bilstm_(prefix + ".bilstm",
              cfg.channels[2] * (cfg.input_bins / kPoolFactor),
              cfg.bilstm_hidden, rng),
      proj_(prefix + ".proj", 2 * cfg.bilstm_hidden, cfg.d_embed, rng) {
  if (cfg_.input_bins < kPoolFactor) {
    throw ConfigError("TF branch needs at least 8 input bins");
  }
  Eigen::Index in = 1;
  for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
    blocks_.emplace_back(prefix + ".conv." + std::to_string(i), in,
                         cfg_.channels[i], rng);
    in = cfg_.channels[i];
  }
}

Eigen::Index TFBranch::bilstm_input_size() const {
  return cfg_.channels[2] * (cfg_.input_bins / kPoolFactor);
}

Tensor TFBranch::forward(const dsp::FeatureMatrix& features) const {
  if (features.kind != dsp::FeatureKind::kLogMel &&
      features.kind != dsp::FeatureKind::kMfcc) {
    throw InvalidInputError("TF branch consumes log-Mel or MFCC features");
  }
  if (features.bins() != cfg_.input_bins) {
    throw ShapeError("TF branch configured for " +
                     std::to_string(cfg_.input_bins) + " bins, got " +
                     std::to_string(features.bins()));
  }
  const Eigen::Index frames = features.frames();
  if (frames < kPoolFactor) {
    throw InvalidInputError("TF branch needs at least 8 frames, got " +
                            std::to_string(frames));
  }

  // [1, bins, frames]: frequency is the height axis, time the width axis.
  Eigen::ArrayXd packed(cfg_.input_bins * frames);
  for (Eigen::Index f = 0; f < cfg_.input_bins; ++f) {
    for (Eigen::Index t = 0; t < frames; ++t) {
      packed[f * frames + t] = features.values(t, f);
    }
  }
  Tensor x = Tensor::from_values({1, cfg_.input_bins, frames},
                                 std::move(packed));
  for (const nn::Conv2dBlock& block : blocks_) {
    x = block.forward(x);
  }
  // Fold channels x frequency into the step feature vector.
  const Eigen::Index steps = x.dim(2);
  std::vector<Tensor> step_vecs;
  step_vecs.reserve(static_cast<std::size_t>(steps));
  for (Eigen::Index t = 0; t < steps; ++t) {
    step_vecs.push_back(channel_column(x, t));
  }
  return proj_.forward(bilstm_.last_hidden_steps(step_vecs));
}

void TFBranch::collect(nn::ParamRefs& out) {
  for (nn::Conv2dBlock& block : blocks_) block.collect(out);
  bilstm_.collect(out);
  proj_.collect(out);
}

std::int64_t TFBranch::param_count() const {
  std::int64_t total = 0;
  Eigen::Index in = 1;
  for (const Eigen::Index c : cfg_.channels) {
    total += nn::Conv2dBlock::count(in, c);
    in = c;
  }
  total += nn::BiLstm::count(bilstm_input_size(), cfg_.bilstm_hidden);
  total += nn::Linear::count(2 * cfg_.bilstm_hidden, cfg_.d_embed);
  return total;
}

// ---------------------------------------------------------------------------
// SemanticBranch
// ---------------------------------------------------------------------------

SemanticBranch::SemanticBranch(const SemanticBranchConfig& cfg, Pcg32& rng,
                               const std::string& prefix)
    : cfg_(cfg),
      embed_(prefix + ".embed", cfg.vocab_size, cfg.d_model, rng),
      proj_(prefix + ".proj", cfg.d_model, cfg.d_embed, rng) {
  if (cfg_.vocab_size < 3) {
    throw ConfigError("vocabulary must include pad/unk/cls");
  }
  if (cfg_.n_layers < 1) {
    throw ConfigError("semantic branch needs at least one transformer layer");
  }
  const nn::TransformerEncoderLayerConfig layer_cfg{cfg_.d_model, cfg_.ffn,
                                                    cfg_.heads};
  for (Eigen::Index i = 0; i < cfg_.n_layers; ++i) {
    layers_.emplace_back(prefix + ".layers." + std::to_string(i), layer_cfg,
                         rng);
  }
}

Tensor SemanticBranch::forward(const std::vector<int>& token_ids) const {
  constexpr int kPad = 0;
  constexpr int kUnk = 1;
  constexpr int kCls = 2;

  // Trailing pads carry no content; drop them so short transcripts stay
  // cheap. Any interior pad is masked below.
  std::size_t len = token_ids.size();
  while (len > 0 && token_ids[len - 1] == kPad) --len;
  if (static_cast<Eigen::Index>(len) > cfg_.max_seq_len) {
    throw InvalidInputError("token sequence longer than max_seq_len");
  }

  std::vector<int> seq;
  seq.reserve(len + 1);
  seq.push_back(kCls);
  for (std::size_t i = 0; i < len; ++i) {
    const int id = token_ids[i];
    seq.push_back((id < 0 || id >= cfg_.vocab_size) ? kUnk : id);
  }

  Tensor x = embed_.forward(seq);
  x = add(x, nn::sinusoidal_positions(x.dim(0), cfg_.d_model));
  std::vector<bool> key_valid(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    key_valid[i] = seq[i] != kPad;
  }
  for (const nn::TransformerEncoderLayer& layer : layers_) {
    x = layer.forward(x, &key_valid);
  }
  return proj_.forward(slice_rows(x, 0, 1));
}

void SemanticBranch::collect(nn::ParamRefs& out) {
  embed_.collect(out);
  for (nn::TransformerEncoderLayer& layer : layers_) layer.collect(out);
  proj_.collect(out);
}

std::int64_t SemanticBranch::param_count() const {
  return nn::Embedding::count(cfg_.vocab_size, cfg_.d_model) +
         cfg_.n_layers *
             nn::TransformerEncoderLayer::count(cfg_.d_model, cfg_.ffn) +
         nn::Linear::count(cfg_.d_model, cfg_.d_embed);
}

// ---------------------------------------------------------------------------
// Full-scale accounting
// ---------------------------------------------------------------------------

namespace {

// Reference dimensions of the published encoders the lightweight variants
// truncate. The time-domain reference is the 24-layer, 1024-wide stack
// with its 7-layer 512-channel strided conv front end; the semantic
// reference is the 12-layer, 768-wide Chinese-vocabulary encoder.
struct TimeScaleRef {
  std::int64_t hidden = 1024;
  std::int64_t ffn = 4096;
  std::int64_t full_layers = 24;
  std::int64_t light_layers = 4;

  std::int64_t front_end() const {
    // 7 conv layers, 512 channels, kernels 10/3/3/3/3/2/2, no biases,
    // group norm after the first layer.
    const std::int64_t convs = 512 * 1 * 10 + 4 * (512 * 512 * 3) +
                               2 * (512 * 512 * 2);
    const std::int64_t group_norm = 2 * 512;
    // Post-encoder layer norm + projection 512 -> 1024.
    const std::int64_t feature_proj = 2 * 512 + (512 * 1024 + 1024);
    // Grouped positional conv (kernel 128, 16 groups) + encoder layer norm.
    const std::int64_t pos_conv = 1024 * (1024 / 16) * 128 + 1024;
    const std::int64_t encoder_norm = 2 * 1024;
    return convs + group_norm + feature_proj + pos_conv + encoder_norm;
  }

  std::int64_t total(std::int64_t layers) const {
    return layers * nn::TransformerEncoderLayer::count(hidden, ffn) +
           front_end();
  }
};

struct SemanticScaleRef {
  std::int64_t hidden = 768;
  std::int64_t ffn = 3072;
  std::int64_t full_layers = 12;
  std::int64_t light_layers = 1;
  std::int64_t vocab = 21128;
  std::int64_t max_positions = 512;
  std::int64_t token_types = 2;

  std::int64_t embeddings() const {
    return vocab * hidden + max_positions * hidden + token_types * hidden +
           2 * hidden;  // token, position, type tables + embedding norm
  }
  std::int64_t pooler() const { return hidden * hidden + hidden; }
  std::int64_t total(std::int64_t layers) const {
    return layers * nn::TransformerEncoderLayer::count(hidden, ffn) +
           embeddings() + pooler();
  }
};

// Full-scale CRNN sizing for the proposed system: 128 Mel bins in,
// channels 16/32/64, BiLSTM hidden 256, projection to the 768-wide
// fusion embedding.
std::int64_t fullscale_crnn() {
  const std::int64_t convs = nn::Conv2dBlock::count(1, 16) +
                             nn::Conv2dBlock::count(16, 32) +
                             nn::Conv2dBlock::count(32, 64);
  const std::int64_t bilstm = nn::BiLstm::count(64 * (128 / 8), 256);
  const std::int64_t proj = nn::Linear::count(2 * 256, 768);
  return convs + bilstm + proj;
}

}  // namespace

std::int64_t count_fullscale_params(Role role, ScaleVariant scale) {
  if (role == Role::kTime) {
    const TimeScaleRef ref;
    return ref.total(scale == ScaleVariant::kFull ? ref.full_layers
                                                  : ref.light_layers);
  }
  const SemanticScaleRef ref;
  return ref.total(scale == ScaleVariant::kFull ? ref.full_layers
                                                : ref.light_layers);
}

FullScaleReport fullscale_report() {
  FullScaleReport report;
  report.time_full = count_fullscale_params(Role::kTime, ScaleVariant::kFull);
  report.time_lightweight =
      count_fullscale_params(Role::kTime, ScaleVariant::kLightweight);
  report.semantic_full =
      count_fullscale_params(Role::kSemantic, ScaleVariant::kFull);
  report.semantic_lightweight =
      count_fullscale_params(Role::kSemantic, ScaleVariant::kLightweight);
  report.tf_crnn = fullscale_crnn();

  // Alignment of the 1024-wide time embedding and 768-wide semantic
  // embedding onto a 768-wide fusion space, then a binary classifier.
  const std::int64_t align_time = nn::Linear::count(1024, 768);
  const std::int64_t align_sem = nn::Linear::count(768, 768);
  const std::int64_t baseline_classifier = nn::Linear::count(2 * 768, 2);
  const std::int64_t proposed_classifier = nn::Linear::count(3 * 768, 2);
  const std::int64_t fusion_weights = 3;

  report.baseline_total = report.time_full + report.semantic_full +
                          align_time + baseline_classifier;
  report.proposed_total = report.time_lightweight +
                          report.semantic_lightweight + report.tf_crnn +
                          align_time + align_sem + fusion_weights +
                          proposed_classifier;

  report.time_reduction =
      1.0 - static_cast<double>(report.time_lightweight) /
                static_cast<double>(report.time_full);
  report.semantic_reduction =
      1.0 - static_cast<double>(report.semantic_lightweight) /
                static_cast<double>(report.semantic_full);
  report.proposed_over_baseline =
      static_cast<double>(report.proposed_total) /
      static_cast<double>(report.baseline_total);
  return report;
}

}  // namespace trifuse::branches
