// Copyright 2026 The Trifuse Authors
// Time-frequency feature extraction
//
// Licensed under the Apache License, Version 2.0

#include "trifuse/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "trifuse/errors.hpp"

namespace trifuse::dsp {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

Eigen::ArrayXd hann_window(Eigen::Index n) {
  Eigen::ArrayXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) /
                                static_cast<double>(n - 1));
  }
  return w;
}

bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

void validate(const AudioBuffer& audio) {
  if (audio.samples.size() == 0) {
    throw InvalidInputError("audio buffer is empty");
  }
  if (audio.sample_rate_hz != kSampleRate) {
    throw InvalidInputError("unsupported sample rate " +
                            std::to_string(audio.sample_rate_hz) +
                            " Hz (expected 16000)");
  }
  if (!audio.samples.allFinite()) {
    throw InvalidInputError("audio contains non-finite samples");
  }
  if ((audio.samples.abs() > 1.0).any()) {
    throw InvalidInputError("audio samples outside [-1, 1]");
  }
}

void validate(const FeatureConfig& cfg) {
  if (cfg.win_len_samples <= 0 || cfg.hop_samples <= 0) {
    throw ConfigError("window and hop must be positive");
  }
  if (cfg.win_len_samples > cfg.fft_size) {
    throw ConfigError("window longer than FFT size");
  }
  if (cfg.hop_samples > cfg.win_len_samples) {
    throw ConfigError("hop larger than window");
  }
  if (!power_of_two(cfg.fft_size)) {
    throw ConfigError("FFT size must be a power of two");
  }
  if (cfg.n_mfcc > cfg.n_mels) {
    throw ConfigError("n_mfcc exceeds n_mels");
  }
  if (cfg.n_mels < 1) {
    throw ConfigError("need at least one Mel band");
  }
  if (cfg.f_min_hz < 0.0 || cfg.f_max_hz <= cfg.f_min_hz) {
    throw ConfigError("require 0 <= f_min < f_max");
  }
  if (cfg.f_max_hz > kSampleRate / 2.0) {
    throw ConfigError("f_max above Nyquist");
  }
}

double hz_to_mel(double hz) {
  if (hz < 0.0) {
    throw InvalidInputError("negative frequency");
  }
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}

double mel_to_hz(double mel) {
  if (mel < 0.0) {
    throw InvalidInputError("negative mel value");
  }
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

Eigen::Index frame_count(Eigen::Index n_samples, const FeatureConfig& cfg) {
  if (n_samples <= 0) {
    throw InvalidInputError("frame_count of empty signal");
  }
  if (n_samples < cfg.win_len_samples) return 1;
  return 1 + (n_samples - cfg.win_len_samples) / cfg.hop_samples;
}

Eigen::MatrixXd frame_signal(const AudioBuffer& audio, const FeatureConfig& cfg) {
  validate(audio);
  validate(cfg);
  const Eigen::Index win = cfg.win_len_samples;
  const Eigen::Index hop = cfg.hop_samples;
  const Eigen::Index n = audio.samples.size();
  const Eigen::Index frames = frame_count(n, cfg);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(win, frames);
  for (Eigen::Index f = 0; f < frames; ++f) {
    const Eigen::Index start = f * hop;
    const Eigen::Index len = std::min(win, n - start);
    out.col(f).head(len) = audio.samples.segment(start, len);
  }
  return out;
}

Eigen::MatrixXd mel_filterbank(const FeatureConfig& cfg) {
  validate(cfg);
  const int n_bins = cfg.n_bins();
  const double mel_lo = hz_to_mel(cfg.f_min_hz);
  const double mel_hi = hz_to_mel(cfg.f_max_hz);

  // n_mels + 2 anchor points, equally spaced on the Mel axis.
  std::vector<double> hz_pts(static_cast<std::size_t>(cfg.n_mels) + 2);
  for (std::size_t i = 0; i < hz_pts.size(); ++i) {
    const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                    static_cast<double>(cfg.n_mels + 1);
    hz_pts[i] = mel_to_hz(mel);
  }
  for (std::size_t i = 1; i < hz_pts.size(); ++i) {
    if (hz_pts[i] <= hz_pts[i - 1]) {
      throw ConfigError("mel filter centers do not fit in [f_min, f_max]");
    }
  }

  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(cfg.n_mels, n_bins);
  const double bin_hz = static_cast<double>(kSampleRate) / cfg.fft_size;
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = hz_pts[static_cast<std::size_t>(m)];
    const double center = hz_pts[static_cast<std::size_t>(m) + 1];
    const double right = hz_pts[static_cast<std::size_t>(m) + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > left && f < center) {
        w = (f - left) / (center - left);
      } else if (f >= center && f < right) {
        w = (right - f) / (right - center);
      }
      fb(m, k) = w;
    }
  }
  return fb;
}

Eigen::MatrixXd dct_matrix(Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd dct(rows, cols);
  const double n = static_cast<double>(cols);
  for (Eigen::Index k = 0; k < rows; ++k) {
    const double s = (k == 0) ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (Eigen::Index i = 0; i < cols; ++i) {
      dct(k, i) = s * std::cos(kPi / n * (static_cast<double>(i) + 0.5) *
                               static_cast<double>(k));
    }
  }
  return dct;
}

void fft_radix2(std::vector<std::complex<double>>& buf) {
  const std::size_t n = buf.size();
  if (n == 0 || (n & (n - 1)) != 0) {
    throw ConfigError("FFT length must be a power of two");
  }
  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(buf[i], buf[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = buf[i + k];
        const std::complex<double> v = buf[i + k + len / 2] * w;
        buf[i + k] = u + v;
        buf[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

FeatureMatrix power_spectrogram(const AudioBuffer& audio, const FeatureConfig& cfg) {
  const Eigen::MatrixXd frames = frame_signal(audio, cfg);
  const Eigen::ArrayXd window = hann_window(cfg.win_len_samples);
  const Eigen::Index n_frames = frames.cols();
  const int n_bins = cfg.n_bins();

  FeatureMatrix out;
  out.kind = FeatureKind::kPower;
  out.config = cfg;
  out.values.resize(n_frames, n_bins);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(cfg.fft_size));
  for (Eigen::Index f = 0; f < n_frames; ++f) {
    const Eigen::ArrayXd windowed = frames.col(f).array() * window;
    for (int i = 0; i < cfg.fft_size; ++i) {
      buf[static_cast<std::size_t>(i)] =
          (i < cfg.win_len_samples) ? std::complex<double>(windowed[i], 0.0)
                                    : std::complex<double>(0.0, 0.0);
    }
    fft_radix2(buf);
    for (int k = 0; k < n_bins; ++k) {
      out.values(f, k) = std::norm(buf[static_cast<std::size_t>(k)]);
    }
  }
  return out;
}

FeatureMatrix mel_spectrogram(const AudioBuffer& audio, const FeatureConfig& cfg) {
  const FeatureMatrix power = power_spectrogram(audio, cfg);
  const Eigen::MatrixXd fb = mel_filterbank(cfg);
  FeatureMatrix out;
  out.kind = FeatureKind::kLogMel;
  out.config = cfg;
  out.values = ((power.values * fb.transpose()).array() + cfg.log_floor).log();
  return out;
}

FeatureMatrix mfcc(const AudioBuffer& audio, const FeatureConfig& cfg) {
  const FeatureMatrix log_mel = mel_spectrogram(audio, cfg);
  const Eigen::MatrixXd dct = dct_matrix(cfg.n_mfcc, cfg.n_mels);
  FeatureMatrix out;
  out.kind = FeatureKind::kMfcc;
  out.config = cfg;
  out.values = log_mel.values * dct.transpose();
  return out;
}

}  // namespace trifuse::dsp
