// Copyright 2026 The Trifuse Authors
// Branch tests: shapes, receptive fields, truncation, masking, and the
// full-scale parameter-count brackets
//
// Licensed under the Apache License, Version 2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "trifuse/branches.hpp"
#include "trifuse/checkpoint.hpp"
#include "trifuse/errors.hpp"

using namespace trifuse;
using namespace trifuse::branches;

namespace {

dsp::AudioBuffer random_audio(Eigen::Index n, Pcg32& rng) {
  dsp::AudioBuffer audio;
  audio.samples.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    audio.samples[i] = rng.uniform(-0.99, 0.99);
  }
  return audio;
}

dsp::FeatureMatrix random_feature(Eigen::Index frames, Eigen::Index bins,
                                  dsp::FeatureKind kind, Pcg32& rng) {
  dsp::FeatureMatrix feat;
  feat.kind = kind;
  feat.values.resize(frames, bins);
  for (Eigen::Index f = 0; f < frames; ++f) {
    for (Eigen::Index b = 0; b < bins; ++b) {
      feat.values(f, b) = rng.uniform(-3.0, 3.0);
    }
  }
  return feat;
}

}  // namespace

TEST_CASE("time branch") {
  Pcg32 rng(1);
  const TimeBranchConfig cfg;  // desk defaults, total stride 320
  TimeBranch branch(cfg, rng);

  SUBCASE("one second of audio yields 49 encoder frames") {
    CHECK(branch.frame_count(16000) == 49);
  }

  SUBCASE("receptive field is 400 samples") {
    CHECK(branch.min_input_samples() == 400);
    CHECK(branch.frame_count(400) == 1);
  }

  SUBCASE("embedding dimension is fixed regardless of length") {
    for (const Eigen::Index n : {400, 1777, 16000}) {
      const Tensor out = branch.forward(random_audio(n, rng));
      CHECK(out.shape() == Shape{1, 64});
      CHECK(out.values().allFinite());
    }
  }

  SUBCASE("audio shorter than the receptive field is rejected") {
    CHECK_THROWS_AS(branch.forward(random_audio(399, rng)), InvalidInputError);
  }

  SUBCASE("forward is deterministic") {
    const dsp::AudioBuffer audio = random_audio(800, rng);
    const Tensor a = branch.forward(audio);
    const Tensor b = branch.forward(audio);
    CHECK(std::memcmp(a.values().data(), b.values().data(),
                      sizeof(double) * 64) == 0);
  }

  SUBCASE("instantiated parameters match the analytic count") {
    nn::ParamRefs params;
    branch.collect(params);
    CHECK(nn::instantiated_param_count(params) == branch.param_count());
  }
}

TEST_CASE("tf branch") {
  Pcg32 rng(2);
  TFBranchConfig cfg;  // 128 bins
  TFBranch branch(cfg, rng);

  SUBCASE("49x128 log-Mel maps through 64x16x6 to the embedding") {
    CHECK(branch.bilstm_input_size() == 64 * 16);
    const Tensor out = branch.forward(
        random_feature(49, 128, dsp::FeatureKind::kLogMel, rng));
    CHECK(out.shape() == Shape{1, 64});
  }

  SUBCASE("too few frames are rejected") {
    CHECK_THROWS_AS(
        branch.forward(random_feature(7, 128, dsp::FeatureKind::kLogMel, rng)),
        InvalidInputError);
  }

  SUBCASE("power features are rejected") {
    CHECK_THROWS_AS(
        branch.forward(random_feature(49, 128, dsp::FeatureKind::kPower, rng)),
        InvalidInputError);
  }

  SUBCASE("bin mismatch is a shape error") {
    CHECK_THROWS_AS(
        branch.forward(random_feature(49, 40, dsp::FeatureKind::kMfcc, rng)),
        ShapeError);
  }

  SUBCASE("an MFCC-sized branch accepts 40 bins") {
    TFBranchConfig mfcc_cfg;
    mfcc_cfg.input_bins = 40;
    TFBranch mfcc_branch(mfcc_cfg, rng);
    CHECK(mfcc_branch.bilstm_input_size() == 64 * 5);
    const Tensor out = mfcc_branch.forward(
        random_feature(24, 40, dsp::FeatureKind::kMfcc, rng));
    CHECK(out.shape() == Shape{1, 64});
  }

  SUBCASE("instantiated parameters match the analytic count") {
    nn::ParamRefs params;
    branch.collect(params);
    CHECK(nn::instantiated_param_count(params) == branch.param_count());
  }
}

TEST_CASE("semantic branch") {
  Pcg32 rng(3);
  SemanticBranchConfig cfg;
  cfg.vocab_size = 10;
  SemanticBranch branch(cfg, rng);

  SUBCASE("empty transcript still embeds (cls only)") {
    const std::vector<int> all_pad(256, 0);
    const Tensor out = branch.forward(all_pad);
    CHECK(out.shape() == Shape{1, 64});
    CHECK(out.values().allFinite());
  }

  SUBCASE("output is invariant to trailing pads") {
    std::vector<int> short_ids = {4, 7, 3, 9};
    std::vector<int> padded = short_ids;
    padded.resize(256, 0);
    const Tensor a = branch.forward(short_ids);
    const Tensor b = branch.forward(padded);
    CHECK((a.values() - b.values()).abs().maxCoeff() < 1e-12);
  }

  SUBCASE("out-of-vocabulary ids fold into unk instead of erroring") {
    const std::vector<int> weird = {4, 999, -3, 7};
    const std::vector<int> unked = {4, 1, 1, 7};
    const Tensor a = branch.forward(weird);
    const Tensor b = branch.forward(unked);
    CHECK((a.values() == b.values()).all());
  }

  SUBCASE("overlong sequences are rejected") {
    const std::vector<int> too_long(257, 5);
    CHECK_THROWS_AS(branch.forward(too_long), InvalidInputError);
  }

  SUBCASE("instantiated parameters match the analytic count") {
    nn::ParamRefs params;
    branch.collect(params);
    CHECK(nn::instantiated_param_count(params) == branch.param_count());
  }
}

TEST_CASE("encoder truncation on a real branch checkpoint") {
  Pcg32 rng(4);
  TimeBranchConfig cfg;
  cfg.encoder = {{8, 4, 2}, {8, 3, 2}};
  cfg.n_layers = 6;
  cfg.hidden = 8;
  cfg.ffn = 16;
  cfg.heads = 2;
  cfg.d_embed = 8;
  TimeBranch branch(cfg, rng);
  nn::ParamRefs params;
  branch.collect(params);
  const ckpt::Checkpoint full = ckpt::from_params(params, {{"probe", true}});

  const ckpt::Checkpoint cut = ckpt::truncate_encoder(full, "time.layers", 4);

  // Retained transformer layers and all non-layer records are bit-exact.
  int kept_layer_records = 0;
  for (const ckpt::ParamRecord& rec : cut.records) {
    const ckpt::ParamRecord* src = full.find(rec.name);
    REQUIRE(src != nullptr);
    CHECK(std::memcmp(rec.data.data(), src->data.data(),
                      rec.data.size() * sizeof(double)) == 0);
    if (rec.name.rfind("time.layers.", 0) == 0) ++kept_layer_records;
  }
  // 16 records per transformer layer (8 linear tensors + 2 norms, weights
  // and biases), times 4 kept layers.
  CHECK(kept_layer_records == 4 * 16);
  CHECK(cut.find("time.layers.4.wq.weight") == nullptr);
  CHECK(cut.find("time.layers.3.wq.weight") != nullptr);
  CHECK(cut.find("time.enc.0.kernel") != nullptr);
  CHECK(cut.find("time.proj.weight") != nullptr);

  // The truncated checkpoint loads into a 4-layer branch of the same shape.
  TimeBranchConfig small = cfg;
  small.n_layers = 4;
  Pcg32 rng2(5);
  TimeBranch small_branch(small, rng2);
  nn::ParamRefs small_params;
  small_branch.collect(small_params);
  ckpt::load_into(cut, small_params);
  for (nn::Parameter* p : small_params) {
    const ckpt::ParamRecord* src = full.find(p->name);
    REQUIRE(src != nullptr);
    CHECK(std::memcmp(p->tensor.values().data(), src->data.data(),
                      src->data.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("full-scale parameter brackets") {
  const FullScaleReport report = fullscale_report();

  // Time: 24 -> 4 layers, roughly an 80% reduction.
  CHECK(report.time_reduction >= 0.78);
  CHECK(report.time_reduction <= 0.84);

  // Semantic: 12 -> 1 layers, roughly 76%, lightweight total near 24.89M.
  CHECK(report.semantic_reduction >= 0.73);
  CHECK(report.semantic_reduction <= 0.79);
  CHECK(std::abs(static_cast<double>(report.semantic_lightweight) - 24.89e6) /
            24.89e6 <=
        0.08);

  // Whole proposed system vs the full-scale baseline: roughly 22%.
  CHECK(report.proposed_over_baseline >= 0.18);
  CHECK(report.proposed_over_baseline <= 0.26);

  // Reference anchors: ~315M full time encoder, ~110M-ish full semantic
  // encoder (within 8% of 110M at the documented vocabulary).
  CHECK(std::abs(static_cast<double>(report.time_full) - 315e6) / 315e6 < 0.01);
  CHECK(std::abs(static_cast<double>(report.semantic_full) - 110e6) / 110e6 <
        0.08);
}
