// Copyright 2026 The Trifuse Authors
// The three embedding branches (time-domain, time-frequency, semantic)
// and analytic parameter accounting at published encoder dimensions
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "trifuse/dsp.hpp"
#include "trifuse/nn.hpp"

namespace trifuse::branches {

/// One strided 1-D conv layer of the waveform front end.
struct ConvSpec {
  Eigen::Index channels;
  Eigen::Index kernel;
  Eigen::Index stride;
};

// ---------------------------------------------------------------------------
// Time-domain branch: strided conv front end over the raw waveform
// (total stride 320 = one frame per 20 ms) followed by a transformer
// encoder stack, mean pooling and a projection to the shared embedding.
// ---------------------------------------------------------------------------

struct TimeBranchConfig {
  std::vector<ConvSpec> encoder = {{64, 10, 5}, {64, 3, 2}, {64, 3, 2},
                                   {64, 3, 2},  {64, 3, 2}, {64, 2, 2},
                                   {64, 2, 2}};
  Eigen::Index n_layers = 4;
  Eigen::Index hidden = 64;
  Eigen::Index ffn = 256;
  Eigen::Index heads = 4;
  Eigen::Index d_embed = 64;
};

class TimeBranch {
 public:
  TimeBranch(const TimeBranchConfig& cfg, Pcg32& rng,
             const std::string& prefix = "time");

  /// [1, d_embed] embedding. Throws InvalidInputError when the waveform is
  /// shorter than the encoder receptive field.
  Tensor forward(const dsp::AudioBuffer& audio) const;

  /// Encoder output length for a waveform of n samples.
  Eigen::Index frame_count(Eigen::Index n_samples) const;
  /// Smallest waveform the conv stack accepts.
  Eigen::Index min_input_samples() const;

  void collect(nn::ParamRefs& out);
  std::int64_t param_count() const;
  const TimeBranchConfig& config() const { return cfg_; }

 private:
  TimeBranchConfig cfg_;
  std::vector<nn::Conv1dLayer> encoder_;
  std::vector<nn::TransformerEncoderLayer> layers_;
  nn::Linear proj_;
};

// ---------------------------------------------------------------------------
// Time-frequency branch: three conv blocks over the (log-Mel or MFCC)
// spectrogram, frequency axis folded into channels, BiLSTM endpoint
// summary, projection to the shared embedding.
// ---------------------------------------------------------------------------

struct TFBranchConfig {
  std::array<Eigen::Index, 3> channels = {16, 32, 64};
  Eigen::Index input_bins = 128;  // 128 for log-Mel, 40 for MFCC
  Eigen::Index bilstm_hidden = 64;
  Eigen::Index d_embed = 64;
};

class TFBranch {
 public:
  TFBranch(const TFBranchConfig& cfg, Pcg32& rng,
           const std::string& prefix = "tf");

  /// features: log-Mel or MFCC matrix with at least 8 frames.
  Tensor forward(const dsp::FeatureMatrix& features) const;

  /// BiLSTM input width after the conv stack: channels * (bins / 8).
  Eigen::Index bilstm_input_size() const;

  void collect(nn::ParamRefs& out);
  std::int64_t param_count() const;
  const TFBranchConfig& config() const { return cfg_; }

 private:
  TFBranchConfig cfg_;
  std::vector<nn::Conv2dBlock> blocks_;
  nn::BiLstm bilstm_;
  nn::Linear proj_;
};

// ---------------------------------------------------------------------------
// Semantic branch: character embedding + positional encoding + transformer
// encoder with a key-padding mask; the class-token vector is projected to
// the shared embedding.
// ---------------------------------------------------------------------------

struct SemanticBranchConfig {
  Eigen::Index vocab_size = 64;  // includes pad/unk/cls
  Eigen::Index d_model = 64;
  Eigen::Index n_layers = 1;
  Eigen::Index ffn = 256;
  Eigen::Index heads = 4;
  Eigen::Index max_seq_len = 256;
  Eigen::Index d_embed = 64;
};

class SemanticBranch {
 public:
  SemanticBranch(const SemanticBranchConfig& cfg, Pcg32& rng,
                 const std::string& prefix = "sem");

  /// token_ids: pad-terminated id sequence (ids >= vocab map to unk; an
  /// all-pad sequence encodes as the class token alone).
  Tensor forward(const std::vector<int>& token_ids) const;

  void collect(nn::ParamRefs& out);
  std::int64_t param_count() const;
  const SemanticBranchConfig& config() const { return cfg_; }

 private:
  SemanticBranchConfig cfg_;
  nn::Embedding embed_;
  std::vector<nn::TransformerEncoderLayer> layers_;
  nn::Linear proj_;
};

// ---------------------------------------------------------------------------
// Parameter accounting at the published encoder dimensions. These counts
// are analytic; nothing at this scale is instantiated.
// ---------------------------------------------------------------------------

enum class Role { kTime, kSemantic };
enum class ScaleVariant { kFull, kLightweight };

/// Encoder total at reference dimensions. Time: 1024-wide, 4096-ffn
/// transformer (24 layers full, 4 lightweight) plus the fixed waveform
/// front end. Semantic: 768-wide, 3072-ffn transformer (12 layers full,
/// 1 lightweight) plus embeddings and pooler at a 21128-entry vocabulary.
std::int64_t count_fullscale_params(Role role, ScaleVariant scale);

struct FullScaleReport {
  std::int64_t time_full = 0;
  std::int64_t time_lightweight = 0;
  std::int64_t semantic_full = 0;
  std::int64_t semantic_lightweight = 0;
  std::int64_t tf_crnn = 0;
  std::int64_t baseline_total = 0;
  std::int64_t proposed_total = 0;
  double time_reduction = 0.0;      // 1 - light/full
  double semantic_reduction = 0.0;  // 1 - light/full
  double proposed_over_baseline = 0.0;
};

/// Full system accounting: baseline (full encoders + alignment head +
/// classifier) vs the proposed lightweight three-branch system.
FullScaleReport fullscale_report();

}  // namespace trifuse::branches
