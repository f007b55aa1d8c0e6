// Copyright 2026 The Trifuse Authors
// Dataset plumbing: manifests, WAV I/O, character tokenizer and the
// synthetic corpus generator
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "trifuse/dsp.hpp"
#include "trifuse/rng.hpp"

namespace trifuse::data {

inline constexpr int kNumTasks = 3;
inline constexpr std::array<const char*, 3> kSplitNames = {"train",
                                                           "internal_val",
                                                           "dev"};

/// One utterance. task: 0/1/2 for the three elicitation prompts; label: 0
/// non-risk, 1 at-risk; split: train / internal_val / dev.
struct SampleRecord {
  std::string id;
  std::string subject_id;
  int task = 0;
  std::string audio_path;  // relative paths resolve against the manifest dir
  std::string transcript;
  int label = 0;
  std::string split;
};

struct Manifest {
  std::vector<SampleRecord> records;
  std::filesystem::path base_dir;
  std::vector<std::string> warnings;

  std::filesystem::path resolve_audio(const SampleRecord& rec) const;
};

/// Parses a JSON-lines manifest and validates it: well-formed lines, one
/// record per (subject, task), consistent labels per subject. Errors
/// carry the offending line number or id.
Manifest load_manifest(const std::filesystem::path& path);

/// Per split x task record counts and (when with_durations and the audio
/// files exist) total seconds of audio.
struct ManifestSummary {
  std::map<std::string, std::array<int, kNumTasks>> counts;
  std::map<std::string, std::array<double, kNumTasks>> seconds;
  bool has_durations = false;
};
ManifestSummary summarize(const Manifest& manifest, bool with_durations);

/// Reads a 16 kHz mono PCM16 RIFF/WAVE file; samples scale by 1/32768.
/// Anything else (other rates, stereo, float encodings) is a descriptive
/// DataError; there is no silent resampling.
dsp::AudioBuffer read_wav(const std::filesystem::path& path);

/// Writes 16-bit PCM mono. Samples clamp to [-1, 1] and map to
/// round(x * 32767).
void write_wav(const std::filesystem::path& path, const Eigen::ArrayXd& samples,
               int sample_rate_hz = dsp::kSampleRate);

/// Duration in seconds from the header only (no payload read).
double wav_duration_seconds(const std::filesystem::path& path);

std::vector<char32_t> decode_utf8(const std::string& s);
std::string encode_utf8(char32_t cp);

/// Character tokenizer with reserved ids pad=0, unk=1, cls=2. The
/// vocabulary is the sorted set of codepoints seen in the training-split
/// transcripts, so construction is deterministic.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kMaxSeqLen = 256;

  static Tokenizer build(const std::vector<std::string>& training_texts);

  /// Character ids, unknown characters mapped to unk, truncated and
  /// right-padded to max_len. No cls here; the semantic branch prepends it.
  std::vector<int> encode(const std::string& text, int max_len = kMaxSeqLen) const;
  std::string decode(const std::vector<int>& ids) const;

  int vocab_size() const { return 3 + static_cast<int>(id_to_cp_.size()); }

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);

 private:
  std::map<char32_t, int> cp_to_id_;
  std::vector<char32_t> id_to_cp_;  // index 0 is id 3
};

/// Synthetic corpus configuration. Informativeness 0 makes the modality
/// statistically independent of the label; 1 makes it cleanly separable.
struct SynthConfig {
  int n_subjects = 600;
  double audio_seconds = 1.0;
  double audio_informativeness = 1.0;     // drives the tone band
  double semantic_informativeness = 1.0;  // drives the unigram split
  double noise_level = 0.1;
  std::uint64_t seed = 0;
};

struct SynthResult {
  std::filesystem::path manifest_path;
  int n_records = 0;
};

/// Writes audio/{id}.wav files plus manifest.jsonl under out_dir. Labels
/// are balanced to within one subject and splits are stratified by label
/// (64% train, 16% internal_val, 20% dev). Bit-identical for a fixed seed.
SynthResult generate_synthetic(const SynthConfig& cfg,
                               const std::filesystem::path& out_dir);

}  // namespace trifuse::data
