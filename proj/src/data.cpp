// Copyright 2026 The Trifuse Authors
// Dataset plumbing
//
// Licensed under the Apache License, Version 2.0

#include "trifuse/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <utility>

#include "trifuse/errors.hpp"

namespace trifuse::data {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError(std::string("WAV truncated while reading ") + what);
  return v;
}

bool valid_split(const std::string& s) {
  for (const char* name : kSplitNames) {
    if (s == name) return true;
  }
  return false;
}

}  // namespace

std::filesystem::path Manifest::resolve_audio(const SampleRecord& rec) const {
  const std::filesystem::path p(rec.audio_path);
  return p.is_absolute() ? p : base_dir / p;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest: " + path.string());

  Manifest manifest;
  manifest.base_dir = path.has_parent_path() ? path.parent_path()
                                             : std::filesystem::path(".");

  std::set<std::pair<std::string, int>> seen;
  std::map<std::string, int> subject_label;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest line " + std::to_string(line_no) +
                      ": invalid JSON: " + e.what());
    }
    SampleRecord rec;
    try {
      rec.id = j.at("id").get<std::string>();
      rec.subject_id = j.at("subject_id").get<std::string>();
      rec.task = j.at("task").get<int>();
      rec.audio_path = j.at("audio_path").get<std::string>();
      rec.transcript = j.at("transcript").get<std::string>();
      rec.label = j.at("label").get<int>();
      rec.split = j.at("split").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest line " + std::to_string(line_no) +
                      ": missing or mistyped field: " + e.what());
    }
    if (rec.task < 0 || rec.task >= kNumTasks) {
      throw DataError("manifest line " + std::to_string(line_no) +
                      ": task must be 0, 1 or 2");
    }
    if (rec.label != 0 && rec.label != 1) {
      throw DataError("manifest line " + std::to_string(line_no) +
                      ": label must be 0 or 1");
    }
    if (!valid_split(rec.split)) {
      throw DataError("manifest line " + std::to_string(line_no) +
                      ": unknown split '" + rec.split + "'");
    }
    if (!seen.insert({rec.subject_id, rec.task}).second) {
      throw DataError("duplicate (subject, task) pair in record '" + rec.id +
                      "'");
    }
    const auto [it, inserted] = subject_label.emplace(rec.subject_id, rec.label);
    if (!inserted && it->second != rec.label) {
      throw DataError("subject '" + rec.subject_id +
                      "' has inconsistent labels across tasks");
    }
    manifest.records.push_back(std::move(rec));
  }
  if (manifest.records.empty()) {
    manifest.warnings.push_back("manifest is empty: " + path.string());
  }
  return manifest;
}

ManifestSummary summarize(const Manifest& manifest, bool with_durations) {
  ManifestSummary summary;
  for (const char* split : kSplitNames) {
    summary.counts[split] = {0, 0, 0};
    summary.seconds[split] = {0.0, 0.0, 0.0};
  }
  summary.has_durations = with_durations;
  for (const SampleRecord& rec : manifest.records) {
    summary.counts[rec.split][static_cast<std::size_t>(rec.task)] += 1;
    if (summary.has_durations) {
      try {
        summary.seconds[rec.split][static_cast<std::size_t>(rec.task)] +=
            wav_duration_seconds(manifest.resolve_audio(rec));
      } catch (const Error&) {
        summary.has_durations = false;
      }
    }
  }
  return summary;
}

// ---------------------------------------------------------------------------
// WAV
// ---------------------------------------------------------------------------

namespace {

struct WavInfo {
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t sample_rate = 0;
  std::uint16_t bits = 0;
  std::streampos data_offset;
  std::uint32_t data_size = 0;
};

WavInfo parse_wav_header(std::istream& is, const std::string& name) {
  char tag[4];
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "RIFF", 4) != 0) {
    throw DataError(name + ": not a RIFF file");
  }
  read_pod<std::uint32_t>(is, "RIFF size");
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "WAVE", 4) != 0) {
    throw DataError(name + ": not a WAVE file");
  }

  WavInfo info;
  bool have_fmt = false, have_data = false;
  while (is.read(tag, 4)) {
    const auto chunk_size = read_pod<std::uint32_t>(is, "chunk size");
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      info.format = read_pod<std::uint16_t>(is, "format");
      info.channels = read_pod<std::uint16_t>(is, "channels");
      info.sample_rate = read_pod<std::uint32_t>(is, "sample rate");
      read_pod<std::uint32_t>(is, "byte rate");
      read_pod<std::uint16_t>(is, "block align");
      info.bits = read_pod<std::uint16_t>(is, "bits per sample");
      if (chunk_size > 16) {
        is.seekg(chunk_size - 16 + (chunk_size % 2), std::ios::cur);
      } else if (chunk_size % 2) {
        is.seekg(1, std::ios::cur);
      }
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      info.data_offset = is.tellg();
      info.data_size = chunk_size;
      have_data = true;
      break;
    } else {
      is.seekg(chunk_size + (chunk_size % 2), std::ios::cur);
    }
  }
  if (!have_fmt || !have_data) {
    throw DataError(name + ": missing fmt or data chunk");
  }
  if (info.format != 1) {
    throw DataError(name + ": unsupported WAV encoding (PCM required)");
  }
  if (info.channels != 1) {
    throw DataError(name + ": " + std::to_string(info.channels) +
                    " channels (mono required)");
  }
  if (info.bits != 16) {
    throw DataError(name + ": " + std::to_string(info.bits) +
                    "-bit samples (16-bit required)");
  }
  if (info.sample_rate != dsp::kSampleRate) {
    throw DataError(name + ": sample rate " + std::to_string(info.sample_rate) +
                    " Hz (16000 required, no resampling)");
  }
  return info;
}

}  // namespace

dsp::AudioBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open WAV file: " + path.string());
  const WavInfo info = parse_wav_header(is, path.string());

  const std::uint32_t n = info.data_size / 2;
  std::vector<std::int16_t> pcm(n);
  is.seekg(info.data_offset);
  is.read(reinterpret_cast<char*>(pcm.data()),
          static_cast<std::streamsize>(n * sizeof(std::int16_t)));
  if (!is) throw DataError(path.string() + ": truncated sample data");

  dsp::AudioBuffer audio;
  audio.sample_rate_hz = dsp::kSampleRate;
  audio.samples.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    audio.samples[i] = static_cast<double>(pcm[i]) / 32768.0;
  }
  return audio;
}

void write_wav(const std::filesystem::path& path, const Eigen::ArrayXd& samples,
               int sample_rate_hz) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open WAV file for writing: " + path.string());

  const auto n = static_cast<std::uint32_t>(samples.size());
  const std::uint32_t data_size = n * 2;
  const std::uint32_t riff_size = 36 + data_size;
  const auto rate = static_cast<std::uint32_t>(sample_rate_hz);
  const std::uint32_t byte_rate = rate * 2;
  const std::uint16_t block_align = 2, channels = 1, bits = 16, pcm = 1;
  const std::uint32_t fmt_size = 16;

  os.write("RIFF", 4);
  os.write(reinterpret_cast<const char*>(&riff_size), 4);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  os.write(reinterpret_cast<const char*>(&fmt_size), 4);
  os.write(reinterpret_cast<const char*>(&pcm), 2);
  os.write(reinterpret_cast<const char*>(&channels), 2);
  os.write(reinterpret_cast<const char*>(&rate), 4);
  os.write(reinterpret_cast<const char*>(&byte_rate), 4);
  os.write(reinterpret_cast<const char*>(&block_align), 2);
  os.write(reinterpret_cast<const char*>(&bits), 2);
  os.write("data", 4);
  os.write(reinterpret_cast<const char*>(&data_size), 4);
  for (Eigen::Index i = 0; i < samples.size(); ++i) {
    const double clamped = std::clamp(samples[i], -1.0, 1.0);
    const auto v = static_cast<std::int16_t>(std::lround(clamped * 32767.0));
    os.write(reinterpret_cast<const char*>(&v), 2);
  }
  if (!os) throw DataError("failed writing WAV: " + path.string());
}

double wav_duration_seconds(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open WAV file: " + path.string());
  const WavInfo info = parse_wav_header(is, path.string());
  return static_cast<double>(info.data_size / 2) /
         static_cast<double>(info.sample_rate);
}

// ---------------------------------------------------------------------------
// UTF-8 and tokenizer
// ---------------------------------------------------------------------------

std::vector<char32_t> decode_utf8(const std::string& s) {
  std::vector<char32_t> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    char32_t cp;
    int n;
    if (c < 0x80) {
      cp = c;
      n = 1;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1Fu;
      n = 2;
    } else if ((c >> 4) == 0xE) {
      cp = c & 0x0Fu;
      n = 3;
    } else if ((c >> 3) == 0x1E) {
      cp = c & 0x07u;
      n = 4;
    } else {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    if (i + static_cast<std::size_t>(n) > s.size()) {
      out.push_back(0xFFFD);
      break;
    }
    bool ok = true;
    for (int k = 1; k < n; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + static_cast<std::size_t>(k)]);
      if ((cc >> 6) != 0x2) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (cc & 0x3Fu);
    }
    if (!ok) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += static_cast<std::size_t>(n);
  }
  return out;
}

std::string encode_utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& training_texts) {
  std::set<char32_t> chars;
  for (const std::string& text : training_texts) {
    for (const char32_t cp : decode_utf8(text)) chars.insert(cp);
  }
  Tokenizer tok;
  tok.id_to_cp_.assign(chars.begin(), chars.end());
  for (std::size_t i = 0; i < tok.id_to_cp_.size(); ++i) {
    tok.cp_to_id_[tok.id_to_cp_[i]] = 3 + static_cast<int>(i);
  }
  return tok;
}

std::vector<int> Tokenizer::encode(const std::string& text, int max_len) const {
  std::vector<int> ids(static_cast<std::size_t>(max_len), kPad);
  const std::vector<char32_t> cps = decode_utf8(text);
  const std::size_t n = std::min(cps.size(), static_cast<std::size_t>(max_len));
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = cp_to_id_.find(cps[i]);
    ids[i] = (it == cp_to_id_.end()) ? kUnk : it->second;
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (const int id : ids) {
    if (id == kPad || id == kCls) continue;
    if (id == kUnk) {
      out += '?';
      continue;
    }
    const std::size_t idx = static_cast<std::size_t>(id) - 3;
    if (idx >= id_to_cp_.size()) {
      throw InvalidInputError("token id out of range: " + std::to_string(id));
    }
    out += encode_utf8(id_to_cp_[idx]);
  }
  return out;
}

nlohmann::json Tokenizer::to_json() const {
  std::vector<std::uint32_t> cps;
  cps.reserve(id_to_cp_.size());
  for (const char32_t cp : id_to_cp_) cps.push_back(cp);
  return nlohmann::json{{"codepoints", cps}};
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  Tokenizer tok;
  for (const auto& v : j.at("codepoints")) {
    tok.id_to_cp_.push_back(static_cast<char32_t>(v.get<std::uint32_t>()));
  }
  for (std::size_t i = 0; i < tok.id_to_cp_.size(); ++i) {
    tok.cp_to_id_[tok.id_to_cp_[i]] = 3 + static_cast<int>(i);
  }
  return tok;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

namespace {

// Two disjoint character pools; the class-conditional unigram distributions
// interpolate between their union and one half.
const std::vector<std::string>& vocab_half(int label) {
  static const std::vector<std::string> half0 = {
      "a", "b", "c", "d", "e", "一", "二", "三", "四", "五"};
  static const std::vector<std::string> half1 = {
      "f", "g", "h", "i", "j", "六", "七", "八", "九", "十"};
  return label == 0 ? half0 : half1;
}

std::string synth_transcript(int label, double informativeness, Pcg32& rng) {
  const int len = 16 + static_cast<int>(rng.uniform_int(0, 24));
  std::string out;
  for (int i = 0; i < len; ++i) {
    const bool from_label_half = rng.next_double() < informativeness;
    const int half = from_label_half ? label : static_cast<int>(rng.uniform_int(0, 1));
    const auto& pool = vocab_half(half);
    out += pool[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
  }
  return out;
}

Eigen::ArrayXd synth_audio(int label, const SynthConfig& cfg, Pcg32& rng) {
  const auto n = static_cast<Eigen::Index>(
      std::llround(cfg.audio_seconds * dsp::kSampleRate));
  constexpr int kTones = 4;
  Eigen::ArrayXd signal = Eigen::ArrayXd::Zero(n);
  for (int tone = 0; tone < kTones; ++tone) {
    const bool informative = rng.next_double() < cfg.audio_informativeness;
    double f_lo = 700.0, f_hi = 3200.0;
    if (informative) {
      f_lo = label == 0 ? 700.0 : 2600.0;
      f_hi = label == 0 ? 1300.0 : 3200.0;
    }
    const double freq = rng.uniform(f_lo, f_hi);
    const double amp = rng.uniform(0.4, 1.0);
    const double phase = rng.uniform(0.0, kTwoPi);
    const double w = kTwoPi * freq / dsp::kSampleRate;
    for (Eigen::Index t = 0; t < n; ++t) {
      signal[t] += amp * std::sin(w * static_cast<double>(t) + phase);
    }
  }
  for (Eigen::Index t = 0; t < n; ++t) {
    signal[t] += cfg.noise_level * rng.normal();
  }
  const double peak = signal.abs().maxCoeff();
  if (peak > 0.0) signal *= 0.95 / peak;
  return signal;
}

}  // namespace

SynthResult generate_synthetic(const SynthConfig& cfg,
                               const std::filesystem::path& out_dir) {
  if (cfg.n_subjects < 1) throw ConfigError("need at least one subject");
  if (cfg.audio_seconds <= 0.0) throw ConfigError("audio_seconds must be positive");

  std::filesystem::create_directories(out_dir / "audio");

  // Balanced labels, then label-stratified split assignment.
  std::vector<int> labels(static_cast<std::size_t>(cfg.n_subjects));
  for (int i = 0; i < cfg.n_subjects; ++i) {
    labels[static_cast<std::size_t>(i)] = i % 2;
  }
  std::vector<std::string> splits(static_cast<std::size_t>(cfg.n_subjects));
  Pcg32 split_rng(cfg.seed, 0);
  for (int label = 0; label < 2; ++label) {
    std::vector<int> group;
    for (int i = 0; i < cfg.n_subjects; ++i) {
      if (labels[static_cast<std::size_t>(i)] == label) group.push_back(i);
    }
    split_rng.shuffle(group);
    const auto g = static_cast<int>(group.size());
    const int n_train = g * 64 / 100;
    const int n_val = g * 16 / 100;
    for (int k = 0; k < g; ++k) {
      const char* split = k < n_train                ? "train"
                          : k < n_train + n_val      ? "internal_val"
                                                     : "dev";
      splits[static_cast<std::size_t>(group[static_cast<std::size_t>(k)])] =
          split;
    }
  }

  std::ofstream manifest(out_dir / "manifest.jsonl");
  if (!manifest) {
    throw DataError("cannot write manifest under " + out_dir.string());
  }
  int n_records = 0;
  for (int subject = 0; subject < cfg.n_subjects; ++subject) {
    const int label = labels[static_cast<std::size_t>(subject)];
    char subject_id[16];
    std::snprintf(subject_id, sizeof(subject_id), "s%04d", subject);
    for (int task = 0; task < kNumTasks; ++task) {
      // One stream per (subject, task) so records are independent of
      // generation order.
      Pcg32 rng(cfg.seed,
                static_cast<std::uint64_t>(subject) * 8 +
                    static_cast<std::uint64_t>(task) + 1);
      char id[24];
      std::snprintf(id, sizeof(id), "%s_t%d", subject_id, task);
      const std::string wav_rel = std::string("audio/") + id + ".wav";
      write_wav(out_dir / wav_rel, synth_audio(label, cfg, rng));

      nlohmann::json j{
          {"id", id},
          {"subject_id", subject_id},
          {"task", task},
          {"audio_path", wav_rel},
          {"transcript",
           synth_transcript(label, cfg.semantic_informativeness, rng)},
          {"label", label},
          {"split", splits[static_cast<std::size_t>(subject)]},
      };
      manifest << j.dump() << "\n";
      ++n_records;
    }
  }
  manifest.close();
  return {out_dir / "manifest.jsonl", n_records};
}

}  // namespace trifuse::data
