// Copyright 2026 The Trifuse Authors
// Layer library: linear, convolutions, BiLSTM, transformer encoder layer,
// embeddings, plus analytic parameter counting
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trifuse/rng.hpp"
#include "trifuse/tensor.hpp"

namespace trifuse::nn {

/// Named trainable tensor. Freezing removes it from both gradient
/// accumulation and optimizer updates; its values stay bit-identical for
/// the duration of the frozen stage.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string name_, Tensor tensor_)
      : name(std::move(name_)), tensor(std::move(tensor_)) {
    sync();
  }

  void set_frozen(bool value) {
    frozen = value;
    sync();
  }
  void set_trainable(bool value) {
    trainable = value;
    sync();
  }
  bool updatable() const { return trainable && !frozen; }
  Eigen::Index size() const { return tensor.size(); }

 private:
  void sync() { tensor.set_requires_grad(trainable && !frozen); }
};

using ParamRefs = std::vector<Parameter*>;

/// Glorot-uniform initialization: U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(Shape shape, Eigen::Index fan_in, Eigen::Index fan_out,
                      Pcg32& rng);

/// Deterministic sinusoidal positional table, [t, d], no parameters.
Tensor sinusoidal_positions(Eigen::Index t, Eigen::Index d);

// ---------------------------------------------------------------------------

struct Linear {
  Parameter weight;  // [in, out]
  Parameter bias;    // [1, out]

  Linear(const std::string& name, Eigen::Index in, Eigen::Index out, Pcg32& rng);
  /// x: [r, in] -> [r, out].
  Tensor forward(const Tensor& x) const;
  void collect(ParamRefs& out);
  Eigen::Index in_features() const { return weight.tensor.dim(0); }
  Eigen::Index out_features() const { return weight.tensor.dim(1); }

  static std::int64_t count(std::int64_t in, std::int64_t out) {
    return in * out + out;
  }
};

struct LayerNorm {
  Parameter gain;  // [1, d]
  Parameter bias;  // [1, d]

  LayerNorm(const std::string& name, Eigen::Index d);
  Tensor forward(const Tensor& x) const;
  void collect(ParamRefs& out);

  static std::int64_t count(std::int64_t d) { return 2 * d; }
};

// ---------------------------------------------------------------------------

struct TransformerEncoderLayerConfig {
  Eigen::Index hidden = 64;
  Eigen::Index ffn = 256;
  Eigen::Index heads = 4;
};

/// Post-norm encoder layer: multi-head self-attention + residual + layer
/// norm, then a two-layer relu feed-forward + residual + layer norm.
struct TransformerEncoderLayer {
  TransformerEncoderLayerConfig cfg;
  Linear wq, wk, wv, wo, ff1, ff2;
  LayerNorm ln1, ln2;

  TransformerEncoderLayer(const std::string& name,
                          const TransformerEncoderLayerConfig& cfg, Pcg32& rng);

  /// x: [T, hidden]. key_valid, when given, masks attention keys (false =
  /// position ignored by every query). Records the last attention maps
  /// (one [T, T] matrix per head) for inspection.
  Tensor forward(const Tensor& x,
                 const std::vector<bool>* key_valid = nullptr) const;

  void collect(ParamRefs& out);
  mutable std::vector<Eigen::MatrixXd> last_attention;

  static std::int64_t count(std::int64_t hidden, std::int64_t ffn) {
    // q, k, v, o projections with biases; two ffn layers; two layer norms.
    return 4 * (hidden * hidden + hidden) + hidden * ffn + ffn +
           ffn * hidden + hidden + 2 * (2 * hidden);
  }
};

// ---------------------------------------------------------------------------

/// Single LSTM cell with one bias vector. Gate order i, f, g, o; the
/// forget-gate bias starts at 1.
struct LstmCell {
  Eigen::Index input_size, hidden_size;
  Parameter w_x;  // [input, 4*hidden]
  Parameter w_h;  // [hidden, 4*hidden]
  Parameter b;    // [1, 4*hidden]

  LstmCell(const std::string& name, Eigen::Index input, Eigen::Index hidden,
           Pcg32& rng);

  struct State {
    Tensor h, c;  // each [1, hidden]
  };
  State initial_state() const;
  State step(const Tensor& x_t, const State& prev) const;
  void collect(ParamRefs& out);

  static std::int64_t count(std::int64_t input, std::int64_t hidden) {
    return 4 * (input * hidden + hidden * hidden + hidden);
  }
};

/// Bidirectional LSTM reduced to its endpoint summary:
/// concat(forward h_T, backward h_1).
struct BiLstm {
  LstmCell fwd, bwd;

  BiLstm(const std::string& name, Eigen::Index input, Eigen::Index hidden,
         Pcg32& rng);
  /// seq: [T, input] -> [1, 2*hidden].
  Tensor last_hidden(const Tensor& seq) const;
  /// Same computation over pre-sliced steps (each [1, input]).
  Tensor last_hidden_steps(const std::vector<Tensor>& steps) const;
  void collect(ParamRefs& out);

  static std::int64_t count(std::int64_t input, std::int64_t hidden) {
    return 2 * LstmCell::count(input, hidden);
  }
};

// ---------------------------------------------------------------------------

struct Conv1dLayer {
  Eigen::Index in_channels, out_channels, kernel_width, stride;
  Parameter kernel;  // [out, in*k]
  Parameter bias;    // [1, out]

  Conv1dLayer(const std::string& name, Eigen::Index in, Eigen::Index out,
              Eigen::Index k, Eigen::Index stride, Pcg32& rng);
  Tensor forward(const Tensor& x) const;
  Eigen::Index out_len(Eigen::Index in_len) const;
  void collect(ParamRefs& out);

  static std::int64_t count(std::int64_t in, std::int64_t out, std::int64_t k) {
    return out * in * k + out;
  }
};

/// conv2d 3x3 (zero padding, stride 1) -> relu -> max-pool 2x2. Spatial
/// dims halve (floor); inputs smaller than 2x2 are rejected.
struct Conv2dBlock {
  Eigen::Index in_channels, out_channels;
  Parameter kernel;  // [out, in*9]
  Parameter bias;    // [1, out]

  Conv2dBlock(const std::string& name, Eigen::Index in, Eigen::Index out,
              Pcg32& rng);
  Tensor forward(const Tensor& x) const;  // [in, F, T] -> [out, F/2, T/2]
  void collect(ParamRefs& out);

  static std::int64_t count(std::int64_t in, std::int64_t out) {
    return out * in * 9 + out;
  }
};

struct Embedding {
  Parameter table;  // [vocab, d]

  Embedding(const std::string& name, Eigen::Index vocab, Eigen::Index d,
            Pcg32& rng);
  Tensor forward(const std::vector<int>& ids) const;
  void collect(ParamRefs& out);

  static std::int64_t count(std::int64_t vocab, std::int64_t d) {
    return vocab * d;
  }
};

/// Sum of element counts over a parameter list; the instantiated side of
/// every analytic count() above.
std::int64_t instantiated_param_count(const ParamRefs& params);

}  // namespace trifuse::nn
