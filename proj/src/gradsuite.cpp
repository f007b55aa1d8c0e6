// Copyright 2026 The Trifuse Authors
// Finite-difference verification suite
//
// Licensed under the Apache License, Version 2.0

#include "trifuse/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "trifuse/fusion.hpp"
#include "trifuse/nn.hpp"
#include "trifuse/tensor.hpp"

namespace trifuse::gradsuite {

namespace {

constexpr double kOpThreshold = 1e-6;
constexpr double kModelThreshold = 1e-5;
constexpr double kEps = 1e-5;

/// Uniform values in [-1, 1] kept away from zero so relu kinks stay far
/// outside the finite-difference window.
Eigen::ArrayXd random_values(Eigen::Index n, Pcg32& rng, double kink_margin = 0.0) {
  Eigen::ArrayXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double x = rng.uniform(-1.0, 1.0);
    if (kink_margin > 0.0 && std::abs(x) < kink_margin) {
      x += x >= 0.0 ? kink_margin : -kink_margin;
    }
    v[i] = x;
  }
  return v;
}

Tensor leaf(Shape shape, Pcg32& rng, double kink_margin = 0.0) {
  Eigen::Index n = 1;
  for (const Eigen::Index d : shape) n *= d;
  return Tensor::from_values(std::move(shape), random_values(n, rng, kink_margin),
                             true);
}

/// Fixed random projection weights; the loss of each instance is the dot
/// product of the flattened op output with these, so every output element
/// contributes and the loss is stable across repeated evaluations.
Tensor make_projection(Eigen::Index n, Pcg32& rng) {
  return Tensor::from_values({n, 1}, random_values(n, rng), false);
}

Tensor project(const Tensor& out, const Tensor& weights) {
  return matmul(reshape(out, {1, out.size()}), weights);
}

struct Runner {
  SuiteReport report;
  int instances = 20;
  std::uint64_t seed = 0;

  void run(const std::string& name, double threshold, int n_instances,
           const std::function<GradCheckDetail(Pcg32&)>& one_instance) {
    CheckResult result;
    result.name = name;
    result.threshold = threshold;
    result.instances = n_instances;
    Pcg32 rng(seed, std::hash<std::string>{}(name) & 0xffff);
    for (int i = 0; i < n_instances; ++i) {
      const GradCheckDetail detail = one_instance(rng);
      result.max_rel_error =
          std::max(result.max_rel_error, detail.max_rel_error_sized);
      result.max_abs_error_tiny =
          std::max(result.max_abs_error_tiny, detail.max_abs_error_tiny);
    }
    report.results.push_back(result);
  }

  /// A check that yields one scalar held to `threshold` directly.
  void run_scalar(const std::string& name, double threshold, int n_instances,
                  const std::function<double(Pcg32&)>& one_instance) {
    CheckResult result;
    result.name = name;
    result.threshold = threshold;
    result.instances = n_instances;
    Pcg32 rng(seed, std::hash<std::string>{}(name) & 0xffff);
    for (int i = 0; i < n_instances; ++i) {
      result.max_rel_error = std::max(result.max_rel_error, one_instance(rng));
    }
    report.results.push_back(result);
  }

  void op(const std::string& name,
          const std::function<GradCheckDetail(Pcg32&)>& one_instance) {
    run(name, kOpThreshold, instances, one_instance);
  }
};

GradCheckDetail check_full_model(Pcg32& rng) {
  // Tiny configuration that still exercises every structural element.
  fusion::FusedModelConfig cfg;
  cfg.time.encoder = {{8, 4, 2}, {8, 3, 2}, {8, 2, 2}};
  cfg.time.n_layers = 1;
  cfg.time.hidden = 8;
  cfg.time.ffn = 16;
  cfg.time.heads = 2;
  cfg.time.d_embed = 8;
  cfg.tf.channels = {2, 3, 4};
  cfg.tf.input_bins = 8;
  cfg.tf.bilstm_hidden = 4;
  cfg.tf.d_embed = 8;
  cfg.sem.vocab_size = 9;
  cfg.sem.d_model = 8;
  cfg.sem.n_layers = 1;
  cfg.sem.ffn = 16;
  cfg.sem.heads = 2;
  cfg.sem.max_seq_len = 16;
  cfg.sem.d_embed = 8;

  Pcg32 init_rng(rng.next_u32(), 7);
  fusion::FusedModel model(cfg, init_rng);

  dsp::AudioBuffer audio;
  audio.samples = 0.9 * random_values(48, rng);

  dsp::FeatureMatrix feature;
  feature.kind = dsp::FeatureKind::kLogMel;
  feature.values.resize(9, 8);
  for (Eigen::Index r = 0; r < 9; ++r) {
    for (Eigen::Index c = 0; c < 8; ++c) {
      feature.values(r, c) = rng.uniform(-2.0, 2.0);
    }
  }

  std::vector<int> tokens;
  for (int i = 0; i < 6; ++i) {
    tokens.push_back(static_cast<int>(rng.uniform_int(3, 8)));
  }
  const int label = static_cast<int>(rng.uniform_int(0, 1));

  // The attention key bias shifts every score of a query equally, so the
  // softmax cancels it: its true gradient is zero and finite differences
  // on it measure only rounding noise. It is asserted null separately.
  std::vector<Tensor> inputs;
  for (nn::Parameter* p : model.parameters()) {
    if (p->name.ends_with(".wk.bias")) continue;
    inputs.push_back(p->tensor);
  }

  Pcg32 sample_rng(rng.next_u32(), 11);
  return grad_check_detailed(
      [&]() {
        return cross_entropy(model.logits(audio, feature, tokens), label);
      },
      inputs, kEps, 1e-4, 5, &sample_rng);
}

/// |analytic| for the key bias after a backward pass; must be ~0.
double attention_key_bias_residual(Pcg32& rng) {
  Pcg32 init(rng.next_u32(), 3);
  nn::TransformerEncoderLayer layer("probe", {8, 16, 2}, init);
  Tensor x = leaf({4, 8}, rng);
  const Tensor w = make_projection(32, rng);
  layer.wk.bias.tensor.zero_grad();
  Tensor loss = project(layer.forward(x), w);
  loss.backward();
  const Eigen::ArrayXd& g = layer.wk.bias.tensor.grad();
  return g.size() == 0 ? 0.0 : g.abs().maxCoeff();
}

}  // namespace

bool SuiteReport::all_passed() const {
  return std::all_of(results.begin(), results.end(),
                     [](const CheckResult& r) { return r.passed(); });
}

SuiteReport run_suite(int instances_per_op, std::uint64_t seed) {
  Runner runner;
  runner.instances = instances_per_op;
  runner.seed = seed;

  runner.op("add", [](Pcg32& rng) {
    Tensor a = leaf({3, 4}, rng), b = leaf({3, 4}, rng);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(add(a, b), w); }, {a, b}, kEps);
  });
  runner.op("sub", [](Pcg32& rng) {
    Tensor a = leaf({3, 4}, rng), b = leaf({3, 4}, rng);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(sub(a, b), w); }, {a, b}, kEps);
  });
  runner.op("mul", [](Pcg32& rng) {
    Tensor a = leaf({3, 4}, rng), b = leaf({3, 4}, rng);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(mul(a, b), w); }, {a, b}, kEps);
  });
  runner.op("mul_scalar_broadcast", [](Pcg32& rng) {
    Tensor s = leaf({1, 1}, rng), b = leaf({2, 3}, rng);
    const Tensor w = make_projection(6, rng);
    return grad_check_detailed([&]() { return project(mul(s, b), w); }, {s, b}, kEps);
  });
  runner.op("scale", [](Pcg32& rng) {
    Tensor a = leaf({3, 4}, rng);
    const double c = rng.uniform(-2.0, 2.0);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(scale(a, c), w); }, {a}, kEps);
  });
  runner.op("add_rowwise", [](Pcg32& rng) {
    Tensor x = leaf({3, 4}, rng), row = leaf({1, 4}, rng);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(add_rowwise(x, row), w); },
                      {x, row}, kEps);
  });
  runner.op("matmul", [](Pcg32& rng) {
    Tensor a = leaf({2, 3}, rng), b = leaf({3, 4}, rng);
    const Tensor w = make_projection(8, rng);
    return grad_check_detailed([&]() { return project(matmul(a, b), w); }, {a, b},
                      kEps);
  });
  runner.op("transpose", [](Pcg32& rng) {
    Tensor a = leaf({3, 4}, rng);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(transpose(a), w); }, {a}, kEps);
  });
  runner.op("relu", [](Pcg32& rng) {
    Tensor a = leaf({3, 4}, rng, 0.05);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(relu(a), w); }, {a}, kEps);
  });
  runner.op("tanh", [](Pcg32& rng) {
    Tensor a = leaf({3, 4}, rng);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(trifuse::tanh(a), w); }, {a},
                      kEps);
  });
  runner.op("sigmoid", [](Pcg32& rng) {
    Tensor a = leaf({3, 4}, rng);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(sigmoid(a), w); }, {a}, kEps);
  });
  runner.op("softmax", [](Pcg32& rng) {
    Tensor a = leaf({3, 5}, rng);
    const Tensor w = make_projection(15, rng);
    return grad_check_detailed([&]() { return project(softmax_rows(a), w); }, {a},
                      kEps);
  });
  runner.op("layer_norm", [](Pcg32& rng) {
    Tensor x = leaf({3, 6}, rng);
    Tensor gain = leaf({1, 6}, rng);
    Tensor bias = leaf({1, 6}, rng);
    const Tensor w = make_projection(18, rng);
    return grad_check_detailed(
        [&]() { return project(layer_norm_rows(x, gain, bias), w); },
        {x, gain, bias}, kEps);
  });
  runner.op("embedding_lookup", [](Pcg32& rng) {
    Tensor table = leaf({6, 4}, rng);
    std::vector<int> ids;
    for (int i = 0; i < 5; ++i) {
      ids.push_back(static_cast<int>(rng.uniform_int(0, 5)));
    }
    const Tensor w = make_projection(20, rng);
    return grad_check_detailed(
        [&]() { return project(embedding_lookup(table, ids), w); }, {table},
        kEps);
  });
  runner.op("concat", [](Pcg32& rng) {
    Tensor a = leaf({2, 2}, rng), b = leaf({2, 3}, rng), c = leaf({2, 1}, rng);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(concat_cols({a, b, c}), w); },
                      {a, b, c}, kEps);
  });
  runner.op("slice_cols", [](Pcg32& rng) {
    Tensor a = leaf({3, 6}, rng);
    const Tensor w = make_projection(9, rng);
    return grad_check_detailed([&]() { return project(slice_cols(a, 1, 3), w); }, {a},
                      kEps);
  });
  runner.op("slice_rows", [](Pcg32& rng) {
    Tensor a = leaf({5, 3}, rng);
    const Tensor w = make_projection(6, rng);
    return grad_check_detailed([&]() { return project(slice_rows(a, 1, 2), w); }, {a},
                      kEps);
  });
  runner.op("mean_rows", [](Pcg32& rng) {
    Tensor a = leaf({4, 3}, rng);
    const Tensor w = make_projection(3, rng);
    return grad_check_detailed([&]() { return project(mean_rows(a), w); }, {a}, kEps);
  });
  runner.op("reshape", [](Pcg32& rng) {
    Tensor a = leaf({3, 4}, rng);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(reshape(a, {2, 6}), w); }, {a},
                      kEps);
  });
  runner.op("conv1d", [](Pcg32& rng) {
    Tensor x = leaf({2, 9}, rng);
    Tensor kernel = leaf({3, 6}, rng);
    Tensor bias = leaf({1, 3}, rng);
    const Tensor w = make_projection(12, rng);  // 3 channels x 4 steps
    return grad_check_detailed(
        [&]() { return project(conv1d(x, kernel, bias, 2, 3, 2), w); },
        {x, kernel, bias}, kEps);
  });
  runner.op("conv2d", [](Pcg32& rng) {
    Tensor x = leaf({2, 4, 5}, rng);
    Tensor kernel = leaf({3, 18}, rng);
    Tensor bias = leaf({1, 3}, rng);
    const Tensor w = make_projection(60, rng);
    return grad_check_detailed(
        [&]() { return project(conv2d_same3x3(x, kernel, bias), w); },
        {x, kernel, bias}, kEps);
  });
  runner.op("max_pool2d", [](Pcg32& rng) {
    Tensor x = leaf({2, 4, 4}, rng);
    const Tensor w = make_projection(8, rng);
    return grad_check_detailed([&]() { return project(max_pool2d_2x2(x), w); }, {x},
                      kEps);
  });
  runner.op("channel_column", [](Pcg32& rng) {
    Tensor x = leaf({2, 3, 4}, rng);
    const Eigen::Index t = rng.uniform_int(0, 3);
    const Tensor w = make_projection(6, rng);
    return grad_check_detailed([&]() { return project(channel_column(x, t), w); }, {x},
                      kEps);
  });
  runner.op("cross_entropy", [](Pcg32& rng) {
    Tensor logits = leaf({1, 4}, rng);
    const int label = static_cast<int>(rng.uniform_int(0, 3));
    return grad_check_detailed([&]() { return cross_entropy(logits, label); }, {logits},
                      kEps);
  });

  // Layer types.
  runner.run("layer/linear", kOpThreshold, instances_per_op, [](Pcg32& rng) {
    Pcg32 init(rng.next_u32(), 3);
    nn::Linear linear("probe", 4, 3, init);
    Tensor x = leaf({2, 4}, rng);
    const Tensor w = make_projection(6, rng);
    return grad_check_detailed([&]() { return project(linear.forward(x), w); },
                      {x, linear.weight.tensor, linear.bias.tensor}, kEps);
  });
  runner.run("layer/conv1d", kOpThreshold, instances_per_op, [](Pcg32& rng) {
    Pcg32 init(rng.next_u32(), 3);
    nn::Conv1dLayer conv("probe", 2, 3, 3, 2, init);
    Tensor x = leaf({2, 9}, rng);
    const Tensor w = make_projection(12, rng);
    return grad_check_detailed([&]() { return project(relu(conv.forward(x)), w); },
                      {x, conv.kernel.tensor, conv.bias.tensor}, kEps);
  });
  runner.run("layer/conv2d_block", kOpThreshold, instances_per_op,
             [](Pcg32& rng) {
               Pcg32 init(rng.next_u32(), 3);
               nn::Conv2dBlock block("probe", 2, 3, init);
               Tensor x = leaf({2, 4, 6}, rng);
               const Tensor w = make_projection(3 * 2 * 3, rng);
               return grad_check_detailed(
                   [&]() { return project(block.forward(x), w); },
                   {x, block.kernel.tensor, block.bias.tensor}, kEps);
             });
  runner.run("layer/lstm_cell", kOpThreshold, instances_per_op,
             [](Pcg32& rng) {
               Pcg32 init(rng.next_u32(), 3);
               nn::LstmCell cell("probe", 3, 4, init);
               Tensor x = leaf({1, 3}, rng);
               Tensor h = leaf({1, 4}, rng);
               Tensor c = leaf({1, 4}, rng);
               const Tensor w = make_projection(8, rng);
               return grad_check_detailed(
                   [&]() {
                     const auto state = cell.step(x, {h, c});
                     return project(concat_cols({state.h, state.c}), w);
                   },
                   {x, h, c, cell.w_x.tensor, cell.w_h.tensor, cell.b.tensor},
                   kEps);
             });
  runner.run("layer/bilstm", kOpThreshold,
             std::max(4, instances_per_op / 2), [](Pcg32& rng) {
               Pcg32 init(rng.next_u32(), 3);
               nn::BiLstm lstm("probe", 3, 2, init);
               Tensor seq = leaf({5, 3}, rng);
               const Tensor w = make_projection(4, rng);
               std::vector<Tensor> inputs = {seq};
               nn::ParamRefs params;
               lstm.collect(params);
               for (nn::Parameter* p : params) inputs.push_back(p->tensor);
               return grad_check_detailed(
                   [&]() { return project(lstm.last_hidden(seq), w); }, inputs,
                   kEps);
             });
  // The key bias is excluded from finite differencing in the transformer
  // checks (see attention_key_bias_residual) and verified null instead.
  runner.run("layer/transformer", kOpThreshold,
             std::max(4, instances_per_op / 2), [](Pcg32& rng) {
               Pcg32 init(rng.next_u32(), 3);
               nn::TransformerEncoderLayer layer("probe", {8, 16, 2}, init);
               Tensor x = leaf({4, 8}, rng);
               const Tensor w = make_projection(32, rng);
               std::vector<Tensor> inputs = {x};
               nn::ParamRefs params;
               layer.collect(params);
               for (nn::Parameter* p : params) {
                 if (p->name.ends_with(".wk.bias")) continue;
                 inputs.push_back(p->tensor);
               }
               return grad_check_detailed(
                   [&]() { return project(layer.forward(x), w); }, inputs,
                   kEps);
             });
  runner.run("layer/transformer_masked", kOpThreshold,
             std::max(4, instances_per_op / 2), [](Pcg32& rng) {
               Pcg32 init(rng.next_u32(), 3);
               nn::TransformerEncoderLayer layer("probe", {8, 16, 2}, init);
               Tensor x = leaf({5, 8}, rng);
               const std::vector<bool> mask = {true, true, true, false, false};
               const Tensor w = make_projection(24, rng);
               std::vector<Tensor> inputs = {x};
               nn::ParamRefs params;
               layer.collect(params);
               for (nn::Parameter* p : params) {
                 if (p->name.ends_with(".wk.bias")) continue;
                 inputs.push_back(p->tensor);
               }
               return grad_check_detailed(
                   [&]() {
                     // Only the valid positions feed the loss; masked rows
                     // of the output are not meaningful.
                     return project(slice_rows(layer.forward(x, &mask), 0, 3),
                                    w);
                   },
                   inputs, kEps);
             });
  runner.run_scalar("layer/attention_key_bias_null", 1e-12,
                    std::max(4, instances_per_op / 2),
                    attention_key_bias_residual);

  runner.run("model/fused_end_to_end", kModelThreshold, 3, check_full_model);

  return runner.report;
}

}  // namespace trifuse::gradsuite
