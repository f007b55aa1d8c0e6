// Copyright 2026 The Trifuse Authors
// Dynamic fusion block (learnable scalar modality weights), softmax
// classifier head, and full-model assembly
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>

#include "trifuse/branches.hpp"
#include "trifuse/dsp.hpp"
#include "trifuse/nn.hpp"

namespace trifuse::fusion {

/// concat(w_t * f_t, w_tf * f_tf, w_s * f_s) in that fixed order. The
/// weights are unconstrained scalars; all-ones reduces to plain
/// concatenation exactly.
Tensor fuse(const Tensor& f_time, const Tensor& f_tf, const Tensor& f_sem,
            const Tensor& w_time, const Tensor& w_tf, const Tensor& w_sem);

/// softmax(classifier(fused)): a probability 2-vector.
Tensor classify(const Tensor& fused, const nn::Linear& classifier);

/// Selects which modalities contribute; excluded ones are zeroed at the
/// fusion input (used by the ablation report).
struct ModalityMask {
  bool time = true;
  bool tf = true;
  bool sem = true;
};

struct FusedModelConfig {
  branches::TimeBranchConfig time;
  branches::TFBranchConfig tf;
  branches::SemanticBranchConfig sem;
};

/// The complete three-branch classifier. Fusion weights live in
/// checkpoints under the reserved names fusion.w_t / fusion.w_tf /
/// fusion.w_s, initialized to exactly 1.
class FusedModel {
 public:
  FusedModel(const FusedModelConfig& cfg, Pcg32& rng);

  struct BranchOutputs {
    Tensor time, tf, sem;  // each [1, d_embed]
  };
  BranchOutputs branch_outputs(const dsp::AudioBuffer& audio,
                               const dsp::FeatureMatrix& features,
                               const std::vector<int>& tokens) const;

  Tensor fused(const BranchOutputs& outputs,
               const ModalityMask& mask = {}) const;
  /// [1, 2] logits for the full pipeline.
  Tensor logits(const dsp::AudioBuffer& audio,
                const dsp::FeatureMatrix& features,
                const std::vector<int>& tokens,
                const ModalityMask& mask = {}) const;
  /// No-grad probability vector.
  Eigen::Vector2d predict(const dsp::AudioBuffer& audio,
                          const dsp::FeatureMatrix& features,
                          const std::vector<int>& tokens,
                          const ModalityMask& mask = {}) const;

  branches::TimeBranch& time_branch() { return time_; }
  branches::TFBranch& tf_branch() { return tf_; }
  branches::SemanticBranch& semantic_branch() { return sem_; }
  const branches::TimeBranch& time_branch() const { return time_; }
  const branches::TFBranch& tf_branch() const { return tf_; }
  const branches::SemanticBranch& semantic_branch() const { return sem_; }

  nn::Parameter& w_time() { return w_t_; }
  nn::Parameter& w_tf() { return w_tf_; }
  nn::Parameter& w_sem() { return w_s_; }
  const nn::Parameter& w_time() const { return w_t_; }
  const nn::Parameter& w_tf() const { return w_tf_; }
  const nn::Parameter& w_sem() const { return w_s_; }
  nn::Linear& classifier() { return classifier_; }
  const nn::Linear& classifier() const { return classifier_; }

  /// All parameters in a fixed order (time, tf, sem, fusion, classifier).
  nn::ParamRefs parameters();
  nn::ParamRefs time_params();
  nn::ParamRefs tf_params();
  nn::ParamRefs semantic_params();
  /// Fusion scalars + classifier.
  nn::ParamRefs head_params();

  std::int64_t param_count() const;
  const FusedModelConfig& config() const { return cfg_; }
  Eigen::Index d_embed() const { return cfg_.time.d_embed; }

 private:
  FusedModelConfig cfg_;
  branches::TimeBranch time_;
  branches::TFBranch tf_;
  branches::SemanticBranch sem_;
  nn::Parameter w_t_, w_tf_, w_s_;
  nn::Linear classifier_;
};

}  // namespace trifuse::fusion
