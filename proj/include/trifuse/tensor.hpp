// Copyright 2026 The Trifuse Authors
// Dense tensors with define-by-run reverse-mode differentiation
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <vector>

#include "trifuse/rng.hpp"

namespace trifuse {

using RowMatrixXd =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dimension list. Rank 2 ([rows, cols]) is the workhorse; rank 3
/// ([channels, height, width]) appears around the 2-D convolutions.
using Shape = std::vector<Eigen::Index>;

namespace detail {

struct TensorNode : std::enable_shared_from_this<TensorNode> {
  Shape shape;
  Eigen::ArrayXd values;  // row-major flattened
  Eigen::ArrayXd grad;    // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const TensorNode&)> backprop;

  Eigen::Index size() const { return values.size(); }
  void accumulate(const Eigen::ArrayXd& g);
};

/// Test hook: adds a constant offset inside relu's backward pass so the
/// gradient-check suite can demonstrate that it detects a broken op.
void set_backward_corruption(double offset);
double backward_corruption();

}  // namespace detail

/// Whether new ops record backward information (thread-local).
bool grad_mode_enabled();

/// RAII guard that disables graph recording, e.g. for validation passes.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Value-semantic handle to a graph node. Copies share the node. Leaf
/// tensors created with requires_grad=true accumulate gradients across
/// backward passes until zero_grad(). Every op validates that its result
/// is finite and throws NumericError otherwise.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_values(Shape shape, Eigen::ArrayXd values,
                            bool requires_grad = false);
  static Tensor from_matrix(const Eigen::MatrixXd& m, bool requires_grad = false);
  static Tensor row_vector(const Eigen::ArrayXd& v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  Eigen::Index dim(int i) const;
  Eigen::Index size() const;
  bool requires_grad() const;

  const Eigen::ArrayXd& values() const;
  /// Mutable access to a leaf's storage (optimizer updates, grad checks).
  Eigen::ArrayXd& values_mut();
  /// Gradient accumulated by backward(); empty array if none.
  const Eigen::ArrayXd& grad() const;
  void zero_grad();
  /// Leaf-only: toggles participation in autodiff.
  void set_requires_grad(bool requires_grad);

  double scalar_value() const;

  /// Rank-2 view of the flattened storage.
  Eigen::Map<const RowMatrixXd> matrix() const;

  /// Reverse-mode sweep from a scalar. seed is the gradient of the final
  /// objective w.r.t. this tensor (1/batch_size when averaging a batch).
  void backward(double seed = 1.0) const;

  detail::TensorNode* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}
  friend Tensor wrap_node(std::shared_ptr<detail::TensorNode> node);

  std::shared_ptr<detail::TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Forward op set. All functions build one graph node; gradients are exact.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product; one operand may be a 1-element tensor, which is
/// broadcast (used by the fusion scalars).
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// x: [r, c], row: [1, c]; adds row to every row of x.
Tensor add_rowwise(const Tensor& x, const Tensor& row);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// Row-wise softmax of a rank-2 tensor (the last axis).
Tensor softmax_rows(const Tensor& a);
/// Row-wise layer normalization with learnable gain/bias of shape [1, c].
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);
/// table: [vocab, d]; returns [ids.size(), d].
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
/// Concatenation along the last axis; all parts share the leading dim.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, Eigen::Index begin, Eigen::Index len);
Tensor slice_rows(const Tensor& x, Eigen::Index begin, Eigen::Index len);
/// Mean over axis 0: [r, c] -> [1, c].
Tensor mean_rows(const Tensor& x);
/// Same flat element order, new dims.
Tensor reshape(const Tensor& x, Shape shape);
/// x: [Cin, T] (row = channel); kernel: [Cout, Cin*K]; bias: [1, Cout].
/// Valid convolution with the given stride, no dilation.
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              Eigen::Index in_channels, Eigen::Index kernel_width,
              Eigen::Index stride);
/// x: [Cin, H, W]; kernel: [Cout, Cin*9]; bias: [1, Cout]. 3x3 kernel,
/// stride 1, zero padding, output spatial size equals input.
Tensor conv2d_same3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias);
/// x: [C, H, W] -> [C, floor(H/2), floor(W/2)], window 2x2, stride 2.
Tensor max_pool2d_2x2(const Tensor& x);
/// x: [C, H, W] -> [1, C*H]: the full channel/height column at width t.
Tensor channel_column(const Tensor& x, Eigen::Index t);
/// logits: [1, C]; returns the scalar -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, int label);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Compares analytic gradients of f against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for each checked coordinate of each
/// input, and returns the maximum of |a - n| / max(1e-8, |a| + |n|).
///
/// f must rebuild its graph from the current input values on every call.
/// When max_coords_per_input > 0 and an input is larger, a random subset
/// of coordinates (drawn from rng) is checked instead of all of them.
double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                  double eps = 1e-5, Eigen::Index max_coords_per_input = -1,
                  Pcg32* rng = nullptr);

/// Two-regime variant. Central differences carry an absolute noise floor
/// of roughly ulp(f)/(2 eps) (~1e-11 for O(1) losses), so the relative
/// formula is only meaningful where the gradient is larger than that
/// noise. Coordinates with |a| + |n| >= size_floor contribute to
/// max_rel_error_sized; the rest must agree absolutely to within
/// max_abs_error_tiny's threshold instead.
struct GradCheckDetail {
  double max_rel_error = 0.0;        // the plain formula, all coordinates
  double max_rel_error_sized = 0.0;  // coordinates with |a|+|n| >= floor
  double max_abs_error_tiny = 0.0;   // |a-n| over the remaining coordinates
};
GradCheckDetail grad_check_detailed(const std::function<Tensor()>& f,
                                    std::vector<Tensor> inputs,
                                    double eps = 1e-5,
                                    double size_floor = 1e-4,
                                    Eigen::Index max_coords_per_input = -1,
                                    Pcg32* rng = nullptr);

}  // namespace trifuse
