// Copyright 2026 The Trifuse Authors
// Dynamic fusion block and full-model assembly
//
// Licensed under the Apache License, Version 2.0

#include "trifuse/fusion.hpp"

#include "trifuse/errors.hpp"

namespace trifuse::fusion {

Tensor fuse(const Tensor& f_time, const Tensor& f_tf, const Tensor& f_sem,
            const Tensor& w_time, const Tensor& w_tf, const Tensor& w_sem) {
  if (f_time.size() != f_tf.size() || f_tf.size() != f_sem.size()) {
    throw ShapeError("fuse: branch embeddings must share one dimension");
  }
  if (w_time.size() != 1 || w_tf.size() != 1 || w_sem.size() != 1) {
    throw ShapeError("fuse: modality weights must be scalars");
  }
  return concat_cols(
      {mul(w_time, f_time), mul(w_tf, f_tf), mul(w_sem, f_sem)});
}

Tensor classify(const Tensor& fused, const nn::Linear& classifier) {
  if (fused.rank() != 2 || fused.dim(0) != 1 ||
      fused.dim(1) != classifier.in_features()) {
    throw ShapeError("classify: fused vector does not match classifier");
  }
  return softmax_rows(classifier.forward(fused));
}

FusedModel::FusedModel(const FusedModelConfig& cfg, Pcg32& rng)
    : cfg_(cfg),
      time_(cfg.time, rng, "time"),
      tf_(cfg.tf, rng, "tf"),
      sem_(cfg.sem, rng, "sem"),
      w_t_("fusion.w_t", Tensor::scalar(1.0, true)),
      w_tf_("fusion.w_tf", Tensor::scalar(1.0, true)),
      w_s_("fusion.w_s", Tensor::scalar(1.0, true)),
      classifier_("classifier", 3 * cfg.time.d_embed, 2, rng) {
  if (cfg.time.d_embed != cfg.tf.d_embed ||
      cfg.tf.d_embed != cfg.sem.d_embed) {
    throw ConfigError("branches must share the fusion embedding width");
  }
}

FusedModel::BranchOutputs FusedModel::branch_outputs(
    const dsp::AudioBuffer& audio, const dsp::FeatureMatrix& features,
    const std::vector<int>& tokens) const {
  return {time_.forward(audio), tf_.forward(features), sem_.forward(tokens)};
}

Tensor FusedModel::fused(const BranchOutputs& outputs,
                         const ModalityMask& mask) const {
  const Tensor f_t = mask.time ? outputs.time : scale(outputs.time, 0.0);
  const Tensor f_tf = mask.tf ? outputs.tf : scale(outputs.tf, 0.0);
  const Tensor f_s = mask.sem ? outputs.sem : scale(outputs.sem, 0.0);
  return fuse(f_t, f_tf, f_s, w_t_.tensor, w_tf_.tensor, w_s_.tensor);
}

Tensor FusedModel::logits(const dsp::AudioBuffer& audio,
                          const dsp::FeatureMatrix& features,
                          const std::vector<int>& tokens,
                          const ModalityMask& mask) const {
  return classifier_.forward(fused(branch_outputs(audio, features, tokens), mask));
}

Eigen::Vector2d FusedModel::predict(const dsp::AudioBuffer& audio,
                                    const dsp::FeatureMatrix& features,
                                    const std::vector<int>& tokens,
                                    const ModalityMask& mask) const {
  NoGradGuard guard;
  const Tensor probs = softmax_rows(logits(audio, features, tokens, mask));
  return {probs.values()[0], probs.values()[1]};
}

nn::ParamRefs FusedModel::parameters() {
  nn::ParamRefs out;
  time_.collect(out);
  tf_.collect(out);
  sem_.collect(out);
  out.push_back(&w_t_);
  out.push_back(&w_tf_);
  out.push_back(&w_s_);
  classifier_.collect(out);
  return out;
}

nn::ParamRefs FusedModel::time_params() {
  nn::ParamRefs out;
  time_.collect(out);
  return out;
}

nn::ParamRefs FusedModel::tf_params() {
  nn::ParamRefs out;
  tf_.collect(out);
  return out;
}

nn::ParamRefs FusedModel::semantic_params() {
  nn::ParamRefs out;
  sem_.collect(out);
  return out;
}

nn::ParamRefs FusedModel::head_params() {
  nn::ParamRefs out;
  out.push_back(&w_t_);
  out.push_back(&w_tf_);
  out.push_back(&w_s_);
  classifier_.collect(out);
  return out;
}

std::int64_t FusedModel::param_count() const {
  return time_.param_count() + tf_.param_count() + sem_.param_count() + 3 +
         nn::Linear::count(3 * cfg_.time.d_embed, 2);
}

}  // namespace trifuse::fusion
