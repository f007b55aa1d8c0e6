// Copyright 2026 The Trifuse Authors
// Layer library
//
// Licensed under the Apache License, Version 2.0

#include "trifuse/nn.hpp"

#include <cmath>

#include "trifuse/errors.hpp"

namespace trifuse::nn {

namespace {
constexpr double kMaskBias = -1e30;
}

Tensor glorot_uniform(Shape shape, Eigen::Index fan_in, Eigen::Index fan_out,
                      Pcg32& rng) {
  Eigen::Index n = 1;
  for (const Eigen::Index d : shape) n *= d;
  const double bound =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Eigen::ArrayXd values(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    values[i] = rng.uniform(-bound, bound);
  }
  return Tensor::from_values(std::move(shape), std::move(values), true);
}

Tensor sinusoidal_positions(Eigen::Index t, Eigen::Index d) {
  Eigen::ArrayXd values(t * d);
  for (Eigen::Index pos = 0; pos < t; ++pos) {
    for (Eigen::Index i = 0; i < d; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) /
                              static_cast<double>(d);
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, exponent);
      values[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from_values({t, d}, std::move(values), false);
}

// ---------------------------------------------------------------------------

Linear::Linear(const std::string& name, Eigen::Index in, Eigen::Index out,
               Pcg32& rng)
    : weight(name + ".weight", glorot_uniform({in, out}, in, out, rng)),
      bias(name + ".bias", Tensor::zeros({1, out}, true)) {}

Tensor Linear::forward(const Tensor& x) const {
  return add_rowwise(matmul(x, weight.tensor), bias.tensor);
}

void Linear::collect(ParamRefs& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

LayerNorm::LayerNorm(const std::string& name, Eigen::Index d)
    : gain(name + ".gain",
           Tensor::from_values({1, d}, Eigen::ArrayXd::Ones(d), true)),
      bias(name + ".bias", Tensor::zeros({1, d}, true)) {}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layer_norm_rows(x, gain.tensor, bias.tensor);
}

void LayerNorm::collect(ParamRefs& out) {
  out.push_back(&gain);
  out.push_back(&bias);
}

// ---------------------------------------------------------------------------

TransformerEncoderLayer::TransformerEncoderLayer(
    const std::string& name, const TransformerEncoderLayerConfig& cfg_in,
    Pcg32& rng)
    : cfg(cfg_in),
      wq(name + ".wq", cfg.hidden, cfg.hidden, rng),
      wk(name + ".wk", cfg.hidden, cfg.hidden, rng),
      wv(name + ".wv", cfg.hidden, cfg.hidden, rng),
      wo(name + ".wo", cfg.hidden, cfg.hidden, rng),
      ff1(name + ".ff1", cfg.hidden, cfg.ffn, rng),
      ff2(name + ".ff2", cfg.ffn, cfg.hidden, rng),
      ln1(name + ".ln1", cfg.hidden),
      ln2(name + ".ln2", cfg.hidden) {
  if (cfg.hidden % cfg.heads != 0) {
    throw ConfigError("attention hidden size must divide by head count");
  }
  if (cfg.hidden <= 0 || cfg.ffn <= 0 || cfg.heads <= 0) {
    throw ConfigError("transformer layer dims must be positive");
  }
}

Tensor TransformerEncoderLayer::forward(
    const Tensor& x, const std::vector<bool>* key_valid) const {
  if (x.rank() != 2 || x.dim(1) != cfg.hidden) {
    throw ShapeError("transformer layer: input must be [T, hidden]");
  }
  const Eigen::Index t = x.dim(0);
  const Eigen::Index dk = cfg.hidden / cfg.heads;
  if (key_valid != nullptr &&
      static_cast<Eigen::Index>(key_valid->size()) != t) {
    throw ShapeError("transformer layer: mask length mismatch");
  }

  const Tensor q = wq.forward(x);
  const Tensor k = wk.forward(x);
  const Tensor v = wv.forward(x);

  Tensor mask_bias;
  if (key_valid != nullptr) {
    Eigen::ArrayXd m = Eigen::ArrayXd::Zero(t * t);
    for (Eigen::Index col = 0; col < t; ++col) {
      if (!(*key_valid)[static_cast<std::size_t>(col)]) {
        for (Eigen::Index row = 0; row < t; ++row) {
          m[row * t + col] = kMaskBias;
        }
      }
    }
    mask_bias = Tensor::from_values({t, t}, std::move(m), false);
  }

  last_attention.clear();
  std::vector<Tensor> contexts;
  contexts.reserve(static_cast<std::size_t>(cfg.heads));
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (Eigen::Index head = 0; head < cfg.heads; ++head) {
    const Tensor qh = slice_cols(q, head * dk, dk);
    const Tensor kh = slice_cols(k, head * dk, dk);
    const Tensor vh = slice_cols(v, head * dk, dk);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
    if (mask_bias.defined()) {
      scores = add(scores, mask_bias);
    }
    const Tensor att = softmax_rows(scores);
    last_attention.push_back(att.matrix());
    contexts.push_back(matmul(att, vh));
  }
  const Tensor attn_out = wo.forward(concat_cols(contexts));
  const Tensor h1 = ln1.forward(add(x, attn_out));
  const Tensor ff = ff2.forward(relu(ff1.forward(h1)));
  return ln2.forward(add(h1, ff));
}

void TransformerEncoderLayer::collect(ParamRefs& out) {
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
  ff1.collect(out);
  ff2.collect(out);
  ln1.collect(out);
  ln2.collect(out);
}

// ---------------------------------------------------------------------------

LstmCell::LstmCell(const std::string& name, Eigen::Index input,
                   Eigen::Index hidden, Pcg32& rng)
    : input_size(input),
      hidden_size(hidden),
      w_x(name + ".w_x",
          glorot_uniform({input, 4 * hidden}, input, 4 * hidden, rng)),
      w_h(name + ".w_h",
          glorot_uniform({hidden, 4 * hidden}, hidden, 4 * hidden, rng)),
      b(name + ".b", Tensor::zeros({1, 4 * hidden}, true)) {
  // Forget-gate bias 1 keeps early memory cells open.
  Eigen::ArrayXd& bv = b.tensor.values_mut();
  for (Eigen::Index i = hidden; i < 2 * hidden; ++i) bv[i] = 1.0;
}

LstmCell::State LstmCell::initial_state() const {
  return {Tensor::zeros({1, hidden_size}), Tensor::zeros({1, hidden_size})};
}

LstmCell::State LstmCell::step(const Tensor& x_t, const State& prev) const {
  const Tensor gates =
      add(add(matmul(x_t, w_x.tensor), matmul(prev.h, w_h.tensor)), b.tensor);
  const Eigen::Index h = hidden_size;
  const Tensor i = sigmoid(slice_cols(gates, 0, h));
  const Tensor f = sigmoid(slice_cols(gates, h, h));
  const Tensor g = trifuse::tanh(slice_cols(gates, 2 * h, h));
  const Tensor o = sigmoid(slice_cols(gates, 3 * h, h));
  const Tensor c = add(mul(f, prev.c), mul(i, g));
  return {mul(o, trifuse::tanh(c)), c};
}

void LstmCell::collect(ParamRefs& out) {
  out.push_back(&w_x);
  out.push_back(&w_h);
  out.push_back(&b);
}

BiLstm::BiLstm(const std::string& name, Eigen::Index input, Eigen::Index hidden,
               Pcg32& rng)
    : fwd(name + ".fwd", input, hidden, rng),
      bwd(name + ".bwd", input, hidden, rng) {}

Tensor BiLstm::last_hidden(const Tensor& seq) const {
  if (seq.rank() != 2 || seq.dim(1) != fwd.input_size) {
    throw ShapeError("bilstm: input must be [T, input_size]");
  }
  const Eigen::Index t = seq.dim(0);
  std::vector<Tensor> steps;
  steps.reserve(static_cast<std::size_t>(t));
  for (Eigen::Index i = 0; i < t; ++i) {
    steps.push_back(slice_rows(seq, i, 1));
  }
  return last_hidden_steps(steps);
}

Tensor BiLstm::last_hidden_steps(const std::vector<Tensor>& steps) const {
  if (steps.empty()) throw ShapeError("bilstm: empty sequence");
  for (const Tensor& s : steps) {
    if (s.rank() != 2 || s.dim(0) != 1 || s.dim(1) != fwd.input_size) {
      throw ShapeError("bilstm: each step must be [1, input_size]");
    }
  }
  LstmCell::State sf = fwd.initial_state();
  for (const Tensor& step : steps) {
    sf = fwd.step(step, sf);
  }
  LstmCell::State sb = bwd.initial_state();
  for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
    sb = bwd.step(*it, sb);
  }
  return concat_cols({sf.h, sb.h});
}

void BiLstm::collect(ParamRefs& out) {
  fwd.collect(out);
  bwd.collect(out);
}

// ---------------------------------------------------------------------------

Conv1dLayer::Conv1dLayer(const std::string& name, Eigen::Index in,
                         Eigen::Index out, Eigen::Index k, Eigen::Index stride_,
                         Pcg32& rng)
    : in_channels(in),
      out_channels(out),
      kernel_width(k),
      stride(stride_),
      kernel(name + ".kernel",
             glorot_uniform({out, in * k}, in * k, out * k, rng)),
      bias(name + ".bias", Tensor::zeros({1, out}, true)) {}

Tensor Conv1dLayer::forward(const Tensor& x) const {
  return conv1d(x, kernel.tensor, bias.tensor, in_channels, kernel_width,
                stride);
}

Eigen::Index Conv1dLayer::out_len(Eigen::Index in_len) const {
  if (in_len < kernel_width) {
    throw ShapeError("conv1d layer: input shorter than kernel");
  }
  return (in_len - kernel_width) / stride + 1;
}

void Conv1dLayer::collect(ParamRefs& out) {
  out.push_back(&kernel);
  out.push_back(&bias);
}

Conv2dBlock::Conv2dBlock(const std::string& name, Eigen::Index in,
                         Eigen::Index out, Pcg32& rng)
    : in_channels(in),
      out_channels(out),
      kernel(name + ".kernel",
             glorot_uniform({out, in * 9}, in * 9, out * 9, rng)),
      bias(name + ".bias", Tensor::zeros({1, out}, true)) {}

Tensor Conv2dBlock::forward(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(0) != in_channels) {
    throw ShapeError("conv block: input must be [in_channels, F, T]");
  }
  if (x.dim(1) < 2 || x.dim(2) < 2) {
    throw ShapeError("conv block: spatial dims must be at least 2");
  }
  return max_pool2d_2x2(relu(conv2d_same3x3(x, kernel.tensor, bias.tensor)));
}

void Conv2dBlock::collect(ParamRefs& out) {
  out.push_back(&kernel);
  out.push_back(&bias);
}

Embedding::Embedding(const std::string& name, Eigen::Index vocab,
                     Eigen::Index d, Pcg32& rng)
    : table(name + ".table", glorot_uniform({vocab, d}, vocab, d, rng)) {}

Tensor Embedding::forward(const std::vector<int>& ids) const {
  return embedding_lookup(table.tensor, ids);
}

void Embedding::collect(ParamRefs& out) { out.push_back(&table); }

std::int64_t instantiated_param_count(const ParamRefs& params) {
  std::int64_t total = 0;
  for (const Parameter* p : params) total += p->size();
  return total;
}

}  // namespace trifuse::nn
