// Copyright 2026 The Trifuse Authors
// Time-frequency feature extraction: framing, power spectrogram,
// log-Mel spectrogram and MFCC
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <Eigen/Dense>
#include <complex>
#include <cstddef>
#include <vector>

namespace trifuse::dsp {

/// Every waveform in the project is mono PCM at this rate.
inline constexpr int kSampleRate = 16000;

/// Mono waveform, samples in [-1, 1].
struct AudioBuffer {
  Eigen::ArrayXd samples;
  int sample_rate_hz = kSampleRate;
};

/// Analysis configuration. Defaults: 40 ms window, 20 ms hop, 1024-point
/// FFT, 128 Mel bands over [0, 8000] Hz, 40 cepstral coefficients.
struct FeatureConfig {
  int win_len_samples = 640;
  int hop_samples = 320;
  int fft_size = 1024;
  int n_mels = 128;
  int n_mfcc = 40;
  double f_min_hz = 0.0;
  double f_max_hz = 8000.0;
  double log_floor = 1e-10;

  int n_bins() const { return fft_size / 2 + 1; }
};

enum class FeatureKind { kPower, kLogMel, kMfcc };

/// Frames x bins feature matrix together with the configuration that
/// produced it. Bin count is 513 for power, n_mels for log-Mel and
/// n_mfcc for MFCC.
struct FeatureMatrix {
  Eigen::MatrixXd values;  // frames x bins
  FeatureKind kind = FeatureKind::kPower;
  FeatureConfig config;

  Eigen::Index frames() const { return values.rows(); }
  Eigen::Index bins() const { return values.cols(); }
};

/// Throws InvalidInputError if the buffer is empty, not 16 kHz, or holds
/// non-finite / out-of-range samples.
void validate(const AudioBuffer& audio);

/// Throws ConfigError on inconsistent analysis parameters.
void validate(const FeatureConfig& cfg);

/// HTK Mel scale: 2595 * log10(1 + f / 700). Throws on negative input.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Number of analysis frames for a signal of n_samples. Signals shorter
/// than one window produce exactly one zero-padded frame.
Eigen::Index frame_count(Eigen::Index n_samples, const FeatureConfig& cfg);

/// Slices the signal into windows of win_len_samples every hop_samples.
/// Returns one frame per column: [win_len, frames]. Frame i starts at
/// sample i * hop. A signal shorter than one window is zero-padded on
/// the right.
Eigen::MatrixXd frame_signal(const AudioBuffer& audio, const FeatureConfig& cfg);

/// Triangular Mel filterbank, [n_mels, fft_size/2 + 1]. Peaks are 1 and
/// centers are equally spaced on the Mel axis between f_min and f_max.
Eigen::MatrixXd mel_filterbank(const FeatureConfig& cfg);

/// Orthonormal DCT-II basis, [rows, cols]: row k is
/// s(k) * cos(pi/cols * (n + 1/2) * k) with s(0) = sqrt(1/cols) and
/// s(k>0) = sqrt(2/cols).
Eigen::MatrixXd dct_matrix(Eigen::Index rows, Eigen::Index cols);

/// In-place iterative radix-2 FFT; size must be a power of two.
void fft_radix2(std::vector<std::complex<double>>& buf);

/// Hann-windowed squared-magnitude spectrogram over the non-redundant
/// bins, [frames, fft_size/2 + 1].
FeatureMatrix power_spectrogram(const AudioBuffer& audio, const FeatureConfig& cfg);

/// log(mel_filterbank * power + log_floor), [frames, n_mels].
FeatureMatrix mel_spectrogram(const AudioBuffer& audio, const FeatureConfig& cfg);

/// DCT-II of each log-Mel frame, keeping coefficients 0..n_mfcc-1.
FeatureMatrix mfcc(const AudioBuffer& audio, const FeatureConfig& cfg);

}  // namespace trifuse::dsp
