// Copyright 2026 The Trifuse Authors
// Dense tensors with define-by-run reverse-mode differentiation
//
// Licensed under the Apache License, Version 2.0

#include "trifuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>
#include <utility>

#include "trifuse/errors.hpp"

namespace trifuse {

namespace detail {

void TensorNode::accumulate(const Eigen::ArrayXd& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) grad = Eigen::ArrayXd::Zero(values.size());
  grad += g;
}

namespace {
double g_backward_corruption = 0.0;
}

void set_backward_corruption(double offset) { g_backward_corruption = offset; }
double backward_corruption() { return g_backward_corruption; }

}  // namespace detail

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

thread_local bool g_grad_mode = true;

Eigen::Index shape_size(const Shape& shape) {
  Eigen::Index n = 1;
  for (const Eigen::Index d : shape) n *= d;
  return n;
}

NodePtr make_leaf(Shape shape, Eigen::ArrayXd values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("tensor shape does not match value count");
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

/// Builds an op result. Records parents and the backward closure only when
/// grad mode is on and some parent participates in differentiation, so
/// constant subgraphs cost nothing and are freed eagerly.
Tensor wrap_op(const char* op, Shape shape, Eigen::ArrayXd values,
               std::vector<NodePtr> parents,
               std::function<void(const TensorNode&)> backprop);

Eigen::Map<const RowMatrixXd> mat_view(const TensorNode& n) {
  return {n.values.data(), n.shape[0], n.shape[1]};
}

Eigen::Map<const RowMatrixXd> mat_view(const Tensor& t) {
  return {t.values().data(), t.dim(0), t.dim(1)};
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + " tensor, got rank " +
                     std::to_string(t.rank()));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) {
    throw ShapeError(std::string(op) + ": undefined tensor");
  }
}

}  // namespace

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : prev_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = prev_; }

Tensor wrap_node(NodePtr node) { return Tensor(std::move(node)); }

namespace {

Tensor wrap_op(const char* op, Shape shape, Eigen::ArrayXd values,
               std::vector<NodePtr> parents,
               std::function<void(const TensorNode&)> backprop) {
  if (!values.allFinite()) {
    throw NumericError(std::string(op) + " produced non-finite values");
  }
  if (shape_size(shape) != values.size()) {
    throw ShapeError(std::string(op) + ": internal shape/value mismatch");
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  bool any_grad = false;
  if (g_grad_mode) {
    for (const NodePtr& p : parents) {
      if (p && p->requires_grad) {
        any_grad = true;
        break;
      }
    }
  }
  if (any_grad) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backprop = std::move(backprop);
  }
  return wrap_node(std::move(node));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::from_values(Shape shape, Eigen::ArrayXd values,
                           bool requires_grad) {
  if (!values.allFinite()) {
    throw NumericError("tensor initialized with non-finite values");
  }
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::from_matrix(const Eigen::MatrixXd& m, bool requires_grad) {
  RowMatrixXd rm = m;
  Eigen::ArrayXd flat =
      Eigen::Map<const Eigen::ArrayXd>(rm.data(), rm.size());
  return from_values({m.rows(), m.cols()}, std::move(flat), requires_grad);
}

Tensor Tensor::row_vector(const Eigen::ArrayXd& v, bool requires_grad) {
  return from_values({1, v.size()}, v, requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Eigen::ArrayXd one(1);
  one[0] = v;
  return from_values({1, 1}, std::move(one), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const Eigen::Index n = shape_size(shape);
  return from_values(std::move(shape), Eigen::ArrayXd::Zero(n), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }
Eigen::Index Tensor::dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
Eigen::Index Tensor::size() const { return node_->values.size(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }

const Eigen::ArrayXd& Tensor::values() const { return node_->values; }
Eigen::ArrayXd& Tensor::values_mut() { return node_->values; }

const Eigen::ArrayXd& Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.resize(0); }

void Tensor::set_requires_grad(bool requires_grad) {
  if (!node_->parents.empty()) {
    throw ContractError("set_requires_grad is only valid on leaf tensors");
  }
  node_->requires_grad = requires_grad;
}

double Tensor::scalar_value() const {
  if (size() != 1) throw ContractError("scalar_value on non-scalar tensor");
  return node_->values[0];
}

Eigen::Map<const RowMatrixXd> Tensor::matrix() const {
  if (rank() != 2) throw ShapeError("matrix() requires a rank-2 tensor");
  return mat_view(*node_);
}

void Tensor::backward(double seed) const {
  if (!defined()) throw ContractError("backward on undefined tensor");
  if (size() != 1) throw ContractError("backward requires a scalar loss");

  // Post-order DFS; reversed it yields children-before-parents.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      TensorNode* p = top.node->parents[top.next_parent++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(top.node);
      stack.pop_back();
    }
  }

  if (node_->grad.size() == 0) {
    node_->grad = Eigen::ArrayXd::Zero(1);
  }
  node_->grad[0] += seed;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop && n->grad.size() > 0) {
      n->backprop(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  return wrap_op("add", a.shape(), a.values() + b.values(),
                 {a.node()->shared_from_this(), b.node()->shared_from_this()},
                 [](const TensorNode& self) {
                   self.parents[0]->accumulate(self.grad);
                   self.parents[1]->accumulate(self.grad);
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  return wrap_op("sub", a.shape(), a.values() - b.values(),
                 {a.node()->shared_from_this(), b.node()->shared_from_this()},
                 [](const TensorNode& self) {
                   self.parents[0]->accumulate(self.grad);
                   self.parents[1]->accumulate(-self.grad);
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.size() == 1 && b.size() != 1) {
    const double s = a.values()[0];
    return wrap_op(
        "mul", b.shape(), s * b.values(),
        {a.node()->shared_from_this(), b.node()->shared_from_this()},
        [s](const TensorNode& self) {
          Eigen::ArrayXd ds(1);
          ds[0] = (self.grad * self.parents[1]->values).sum();
          self.parents[0]->accumulate(ds);
          self.parents[1]->accumulate(s * self.grad);
        });
  }
  if (b.size() == 1 && a.size() != 1) {
    const double s = b.values()[0];
    return wrap_op(
        "mul", a.shape(), s * a.values(),
        {a.node()->shared_from_this(), b.node()->shared_from_this()},
        [s](const TensorNode& self) {
          self.parents[0]->accumulate(s * self.grad);
          Eigen::ArrayXd ds(1);
          ds[0] = (self.grad * self.parents[0]->values).sum();
          self.parents[1]->accumulate(ds);
        });
  }
  require_same_shape(a, b, "mul");
  return wrap_op("mul", a.shape(), a.values() * b.values(),
                 {a.node()->shared_from_this(), b.node()->shared_from_this()},
                 [](const TensorNode& self) {
                   self.parents[0]->accumulate(self.grad * self.parents[1]->values);
                   self.parents[1]->accumulate(self.grad * self.parents[0]->values);
                 });
}

Tensor scale(const Tensor& a, double c) {
  require_defined(a, "scale");
  return wrap_op("scale", a.shape(), c * a.values(),
                 {a.node()->shared_from_this()},
                 [c](const TensorNode& self) {
                   self.parents[0]->accumulate(c * self.grad);
                 });
}

Tensor add_rowwise(const Tensor& x, const Tensor& row) {
  require_defined(x, "add_rowwise");
  require_defined(row, "add_rowwise");
  require_rank(x, 2, "add_rowwise");
  require_rank(row, 2, "add_rowwise");
  if (row.dim(0) != 1 || row.dim(1) != x.dim(1)) {
    throw ShapeError("add_rowwise: row must be [1, cols]");
  }
  const Eigen::Index rows = x.dim(0);
  const Eigen::Index cols = x.dim(1);
  RowMatrixXd out = mat_view(x);
  out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(row.values().data(), cols);
  return wrap_op(
      "add_rowwise", x.shape(),
      Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size()),
      {x.node()->shared_from_this(), row.node()->shared_from_this()},
      [rows, cols](const TensorNode& self) {
        self.parents[0]->accumulate(self.grad);
        Eigen::Map<const RowMatrixXd> g(self.grad.data(), rows, cols);
        Eigen::RowVectorXd col_sums = g.colwise().sum();
        self.parents[1]->accumulate(
            Eigen::Map<const Eigen::ArrayXd>(col_sums.data(), cols));
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree (" +
                     std::to_string(a.dim(1)) + " vs " +
                     std::to_string(b.dim(0)) + ")");
  }
  const Eigen::Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  RowMatrixXd out = mat_view(a) * mat_view(b);
  return wrap_op(
      "matmul", {m, n},
      Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size()),
      {a.node()->shared_from_this(), b.node()->shared_from_this()},
      [m, k, n](const TensorNode& self) {
        Eigen::Map<const RowMatrixXd> g(self.grad.data(), m, n);
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        if (pa->requires_grad) {
          RowMatrixXd da = g * mat_view(*pb).transpose();
          pa->accumulate(Eigen::Map<const Eigen::ArrayXd>(da.data(), m * k));
        }
        if (pb->requires_grad) {
          RowMatrixXd db = mat_view(*pa).transpose() * g;
          pb->accumulate(Eigen::Map<const Eigen::ArrayXd>(db.data(), k * n));
        }
      });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  require_rank(a, 2, "transpose");
  const Eigen::Index r = a.dim(0), c = a.dim(1);
  RowMatrixXd out = mat_view(a).transpose();
  return wrap_op(
      "transpose", {c, r},
      Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size()),
      {a.node()->shared_from_this()},
      [r, c](const TensorNode& self) {
        Eigen::Map<const RowMatrixXd> g(self.grad.data(), c, r);
        RowMatrixXd gt = g.transpose();
        self.parents[0]->accumulate(
            Eigen::Map<const Eigen::ArrayXd>(gt.data(), r * c));
      });
}

Tensor relu(const Tensor& a) {
  require_defined(a, "relu");
  return wrap_op("relu", a.shape(), a.values().max(0.0),
                 {a.node()->shared_from_this()},
                 [](const TensorNode& self) {
                   const Eigen::ArrayXd& x = self.parents[0]->values;
                   Eigen::ArrayXd g = (x > 0.0).select(self.grad, 0.0);
                   if (detail::backward_corruption() != 0.0) {
                     g += detail::backward_corruption();
                   }
                   self.parents[0]->accumulate(g);
                 });
}

Tensor tanh(const Tensor& a) {
  require_defined(a, "tanh");
  return wrap_op("tanh", a.shape(), a.values().tanh(),
                 {a.node()->shared_from_this()},
                 [](const TensorNode& self) {
                   self.parents[0]->accumulate(self.grad *
                                               (1.0 - self.values.square()));
                 });
}

Tensor sigmoid(const Tensor& a) {
  require_defined(a, "sigmoid");
  // 0.5 * (1 + tanh(x/2)) is stable for both signs.
  Eigen::ArrayXd y = 0.5 * (1.0 + (0.5 * a.values()).tanh());
  return wrap_op("sigmoid", a.shape(), std::move(y),
                 {a.node()->shared_from_this()},
                 [](const TensorNode& self) {
                   self.parents[0]->accumulate(
                       self.grad * self.values * (1.0 - self.values));
                 });
}

Tensor softmax_rows(const Tensor& a) {
  require_defined(a, "softmax");
  require_rank(a, 2, "softmax");
  const Eigen::Index r = a.dim(0), c = a.dim(1);
  Eigen::Map<const RowMatrixXd> x(a.values().data(), r, c);
  RowMatrixXd y(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    const Eigen::ArrayXd z = (x.row(i).array() - x.row(i).maxCoeff()).exp();
    y.row(i) = (z / z.sum()).matrix();
  }
  return wrap_op(
      "softmax", a.shape(),
      Eigen::Map<const Eigen::ArrayXd>(y.data(), y.size()),
      {a.node()->shared_from_this()},
      [r, c](const TensorNode& self) {
        Eigen::Map<const RowMatrixXd> yv(self.values.data(), r, c);
        Eigen::Map<const RowMatrixXd> gy(self.grad.data(), r, c);
        RowMatrixXd gx(r, c);
        for (Eigen::Index i = 0; i < r; ++i) {
          const double dot = (gy.row(i).array() * yv.row(i).array()).sum();
          gx.row(i) =
              (yv.row(i).array() * (gy.row(i).array() - dot)).matrix();
        }
        self.parents[0]->accumulate(
            Eigen::Map<const Eigen::ArrayXd>(gx.data(), gx.size()));
      });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps) {
  require_defined(x, "layer_norm");
  require_rank(x, 2, "layer_norm");
  require_rank(gain, 2, "layer_norm");
  require_rank(bias, 2, "layer_norm");
  const Eigen::Index r = x.dim(0), c = x.dim(1);
  if (gain.dim(0) != 1 || gain.dim(1) != c || bias.dim(0) != 1 ||
      bias.dim(1) != c) {
    throw ShapeError("layer_norm: gain/bias must be [1, cols]");
  }
  Eigen::Map<const RowMatrixXd> xv(x.values().data(), r, c);
  Eigen::Map<const Eigen::RowVectorXd> g(gain.values().data(), c);
  Eigen::Map<const Eigen::RowVectorXd> b(bias.values().data(), c);

  using RowArrayXd = Eigen::Array<double, 1, Eigen::Dynamic>;
  RowMatrixXd xhat(r, c);
  Eigen::ArrayXd inv_std(r);
  RowMatrixXd out(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    const double mean = xv.row(i).mean();
    const RowArrayXd centered = xv.row(i).array() - mean;
    const double var = centered.square().mean();
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (centered * inv_std[i]).matrix();
    out.row(i) = (xhat.row(i).array() * g.array() + b.array()).matrix();
  }
  return wrap_op(
      "layer_norm", x.shape(),
      Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size()),
      {x.node()->shared_from_this(), gain.node()->shared_from_this(),
       bias.node()->shared_from_this()},
      [r, c, xhat, inv_std](const TensorNode& self) {
        Eigen::Map<const RowMatrixXd> gy(self.grad.data(), r, c);
        Eigen::Map<const Eigen::RowVectorXd> gv(
            self.parents[1]->values.data(), c);
        if (self.parents[0]->requires_grad) {
          using RowArrayXd = Eigen::Array<double, 1, Eigen::Dynamic>;
          RowMatrixXd gx(r, c);
          for (Eigen::Index i = 0; i < r; ++i) {
            const RowArrayXd dxhat = gy.row(i).array() * gv.array();
            const double m1 = dxhat.mean();
            const double m2 = (dxhat * xhat.row(i).array()).mean();
            gx.row(i) =
                ((dxhat - m1 - xhat.row(i).array() * m2) * inv_std[i]).matrix();
          }
          self.parents[0]->accumulate(
              Eigen::Map<const Eigen::ArrayXd>(gx.data(), gx.size()));
        }
        if (self.parents[1]->requires_grad) {
          Eigen::RowVectorXd dg = (gy.array() * xhat.array()).colwise().sum();
          self.parents[1]->accumulate(
              Eigen::Map<const Eigen::ArrayXd>(dg.data(), c));
        }
        if (self.parents[2]->requires_grad) {
          Eigen::RowVectorXd db = gy.colwise().sum();
          self.parents[2]->accumulate(
              Eigen::Map<const Eigen::ArrayXd>(db.data(), c));
        }
      });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require_defined(table, "embedding_lookup");
  require_rank(table, 2, "embedding_lookup");
  const Eigen::Index vocab = table.dim(0), d = table.dim(1);
  const auto t = static_cast<Eigen::Index>(ids.size());
  if (t == 0) throw ShapeError("embedding_lookup: empty id sequence");
  for (const int id : ids) {
    if (id < 0 || id >= vocab) {
      throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  Eigen::Map<const RowMatrixXd> tab(table.values().data(), vocab, d);
  RowMatrixXd out(t, d);
  for (Eigen::Index i = 0; i < t; ++i) {
    out.row(i) = tab.row(ids[static_cast<std::size_t>(i)]);
  }
  return wrap_op(
      "embedding_lookup", {t, d},
      Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size()),
      {table.node()->shared_from_this()},
      [t, d, ids](const TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.size() == 0) p.grad = Eigen::ArrayXd::Zero(p.values.size());
        Eigen::Map<const RowMatrixXd> g(self.grad.data(), t, d);
        Eigen::Map<RowMatrixXd> pg(p.grad.data(), p.shape[0], d);
        for (Eigen::Index i = 0; i < t; ++i) {
          pg.row(ids[static_cast<std::size_t>(i)]) += g.row(i);
        }
      });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Eigen::Index rows = parts.front().dim(0);
  Eigen::Index total = 0;
  std::vector<NodePtr> parents;
  std::vector<Eigen::Index> widths;
  for (const Tensor& p : parts) {
    require_defined(p, "concat");
    require_rank(p, 2, "concat");
    if (p.dim(0) != rows) throw ShapeError("concat: leading dims disagree");
    widths.push_back(p.dim(1));
    total += p.dim(1);
    parents.push_back(p.node()->shared_from_this());
  }
  RowMatrixXd out(rows, total);
  Eigen::Index off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out.middleCols(off, widths[i]) = mat_view(parts[i]);
    off += widths[i];
  }
  return wrap_op(
      "concat", {rows, total},
      Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size()),
      std::move(parents),
      [rows, total, widths](const TensorNode& self) {
        Eigen::Map<const RowMatrixXd> g(self.grad.data(), rows, total);
        Eigen::Index off = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
          auto& p = *self.parents[i];
          if (p.requires_grad) {
            RowMatrixXd slice = g.middleCols(off, widths[i]);
            p.accumulate(
                Eigen::Map<const Eigen::ArrayXd>(slice.data(), slice.size()));
          }
          off += widths[i];
        }
      });
}

Tensor slice_cols(const Tensor& x, Eigen::Index begin, Eigen::Index len) {
  require_defined(x, "slice_cols");
  require_rank(x, 2, "slice_cols");
  const Eigen::Index r = x.dim(0), c = x.dim(1);
  if (begin < 0 || len <= 0 || begin + len > c) {
    throw ShapeError("slice_cols: range out of bounds");
  }
  RowMatrixXd out = mat_view(x).middleCols(begin, len);
  return wrap_op(
      "slice_cols", {r, len},
      Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size()),
      {x.node()->shared_from_this()},
      [r, c, begin, len](const TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.size() == 0) p.grad = Eigen::ArrayXd::Zero(p.values.size());
        Eigen::Map<RowMatrixXd> pg(p.grad.data(), r, c);
        Eigen::Map<const RowMatrixXd> g(self.grad.data(), r, len);
        pg.middleCols(begin, len) += g;
      });
}

Tensor slice_rows(const Tensor& x, Eigen::Index begin, Eigen::Index len) {
  require_defined(x, "slice_rows");
  require_rank(x, 2, "slice_rows");
  const Eigen::Index r = x.dim(0), c = x.dim(1);
  if (begin < 0 || len <= 0 || begin + len > r) {
    throw ShapeError("slice_rows: range out of bounds");
  }
  RowMatrixXd out = mat_view(x).middleRows(begin, len);
  return wrap_op(
      "slice_rows", {len, c},
      Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size()),
      {x.node()->shared_from_this()},
      [r, c, begin, len](const TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.size() == 0) p.grad = Eigen::ArrayXd::Zero(p.values.size());
        Eigen::Map<RowMatrixXd> pg(p.grad.data(), r, c);
        Eigen::Map<const RowMatrixXd> g(self.grad.data(), len, c);
        pg.middleRows(begin, len) += g;
      });
}

Tensor mean_rows(const Tensor& x) {
  require_defined(x, "mean_rows");
  require_rank(x, 2, "mean_rows");
  const Eigen::Index r = x.dim(0), c = x.dim(1);
  Eigen::RowVectorXd mean = mat_view(x).colwise().mean();
  return wrap_op(
      "mean_rows", {1, c}, Eigen::Map<const Eigen::ArrayXd>(mean.data(), c),
      {x.node()->shared_from_this()},
      [r, c](const TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.size() == 0) p.grad = Eigen::ArrayXd::Zero(p.values.size());
        Eigen::Map<RowMatrixXd> pg(p.grad.data(), r, c);
        Eigen::Map<const Eigen::RowVectorXd> g(self.grad.data(), c);
        pg.rowwise() += g / static_cast<double>(r);
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: element count mismatch");
  }
  return wrap_op("reshape", std::move(shape), x.values(),
                 {x.node()->shared_from_this()},
                 [](const TensorNode& self) {
                   self.parents[0]->accumulate(self.grad);
                 });
}

// ---------------------------------------------------------------------------
// Convolutions and pooling
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              Eigen::Index in_channels, Eigen::Index kernel_width,
              Eigen::Index stride) {
  require_defined(x, "conv1d");
  require_defined(kernel, "conv1d");
  require_defined(bias, "conv1d");
  require_rank(x, 2, "conv1d");
  require_rank(kernel, 2, "conv1d");
  if (x.dim(0) != in_channels) {
    throw ShapeError("conv1d: input channel count mismatch");
  }
  if (kernel.dim(1) != in_channels * kernel_width) {
    throw ShapeError("conv1d: kernel width/channel mismatch");
  }
  const Eigen::Index out_channels = kernel.dim(0);
  if (bias.size() != out_channels) {
    throw ShapeError("conv1d: bias size mismatch");
  }
  if (stride <= 0) throw ShapeError("conv1d: stride must be positive");
  const Eigen::Index t_in = x.dim(1);
  if (t_in < kernel_width) {
    throw ShapeError("conv1d: input shorter than kernel");
  }
  const Eigen::Index t_out = (t_in - kernel_width) / stride + 1;

  Eigen::Map<const RowMatrixXd> xv(x.values().data(), in_channels, t_in);
  RowMatrixXd patches(in_channels * kernel_width, t_out);
  for (Eigen::Index ci = 0; ci < in_channels; ++ci) {
    for (Eigen::Index k = 0; k < kernel_width; ++k) {
      for (Eigen::Index t = 0; t < t_out; ++t) {
        patches(ci * kernel_width + k, t) = xv(ci, t * stride + k);
      }
    }
  }
  RowMatrixXd out = mat_view(kernel) * patches;
  out.colwise() +=
      Eigen::Map<const Eigen::VectorXd>(bias.values().data(), out_channels);

  return wrap_op(
      "conv1d", {out_channels, t_out},
      Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size()),
      {x.node()->shared_from_this(), kernel.node()->shared_from_this(),
       bias.node()->shared_from_this()},
      [in_channels, kernel_width, stride, t_in, t_out, out_channels,
       patches](const TensorNode& self) {
        Eigen::Map<const RowMatrixXd> g(self.grad.data(), out_channels, t_out);
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pk.requires_grad) {
          RowMatrixXd dk = g * patches.transpose();
          pk.accumulate(Eigen::Map<const Eigen::ArrayXd>(dk.data(), dk.size()));
        }
        if (pb.requires_grad) {
          Eigen::VectorXd db = g.rowwise().sum();
          pb.accumulate(
              Eigen::Map<const Eigen::ArrayXd>(db.data(), out_channels));
        }
        if (px.requires_grad) {
          RowMatrixXd dpatches = mat_view(pk).transpose() * g;
          if (px.grad.size() == 0) {
            px.grad = Eigen::ArrayXd::Zero(px.values.size());
          }
          Eigen::Map<RowMatrixXd> dx(px.grad.data(), in_channels, t_in);
          for (Eigen::Index ci = 0; ci < in_channels; ++ci) {
            for (Eigen::Index k = 0; k < kernel_width; ++k) {
              for (Eigen::Index t = 0; t < t_out; ++t) {
                dx(ci, t * stride + k) += dpatches(ci * kernel_width + k, t);
              }
            }
          }
        }
      });
}

Tensor conv2d_same3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  require_defined(x, "conv2d");
  require_defined(kernel, "conv2d");
  require_defined(bias, "conv2d");
  require_rank(x, 3, "conv2d");
  require_rank(kernel, 2, "conv2d");
  const Eigen::Index cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (kernel.dim(1) != cin * 9) {
    throw ShapeError("conv2d: kernel expects Cin*9 columns");
  }
  const Eigen::Index cout = kernel.dim(0);
  if (bias.size() != cout) throw ShapeError("conv2d: bias size mismatch");

  const double* xd = x.values().data();
  auto at = [&](Eigen::Index c, Eigen::Index y, Eigen::Index xx) {
    return xd[(c * h + y) * w + xx];
  };
  RowMatrixXd patches(cin * 9, h * w);
  for (Eigen::Index c = 0; c < cin; ++c) {
    for (Eigen::Index dy = -1; dy <= 1; ++dy) {
      for (Eigen::Index dx = -1; dx <= 1; ++dx) {
        const Eigen::Index row = c * 9 + (dy + 1) * 3 + (dx + 1);
        for (Eigen::Index y = 0; y < h; ++y) {
          const Eigen::Index sy = y + dy;
          for (Eigen::Index xx = 0; xx < w; ++xx) {
            const Eigen::Index sx = xx + dx;
            patches(row, y * w + xx) =
                (sy >= 0 && sy < h && sx >= 0 && sx < w) ? at(c, sy, sx) : 0.0;
          }
        }
      }
    }
  }
  RowMatrixXd out = mat_view(kernel) * patches;
  out.colwise() +=
      Eigen::Map<const Eigen::VectorXd>(bias.values().data(), cout);

  return wrap_op(
      "conv2d", {cout, h, w},
      Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size()),
      {x.node()->shared_from_this(), kernel.node()->shared_from_this(),
       bias.node()->shared_from_this()},
      [cin, h, w, cout, patches](const TensorNode& self) {
        Eigen::Map<const RowMatrixXd> g(self.grad.data(), cout, h * w);
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pk.requires_grad) {
          RowMatrixXd dk = g * patches.transpose();
          pk.accumulate(Eigen::Map<const Eigen::ArrayXd>(dk.data(), dk.size()));
        }
        if (pb.requires_grad) {
          Eigen::VectorXd db = g.rowwise().sum();
          pb.accumulate(Eigen::Map<const Eigen::ArrayXd>(db.data(), cout));
        }
        if (px.requires_grad) {
          RowMatrixXd dpatches = mat_view(pk).transpose() * g;
          if (px.grad.size() == 0) {
            px.grad = Eigen::ArrayXd::Zero(px.values.size());
          }
          double* dx = px.grad.data();
          for (Eigen::Index c = 0; c < cin; ++c) {
            for (Eigen::Index dy = -1; dy <= 1; ++dy) {
              for (Eigen::Index dxx = -1; dxx <= 1; ++dxx) {
                const Eigen::Index row = c * 9 + (dy + 1) * 3 + (dxx + 1);
                for (Eigen::Index y = 0; y < h; ++y) {
                  const Eigen::Index sy = y + dy;
                  if (sy < 0 || sy >= h) continue;
                  for (Eigen::Index xx = 0; xx < w; ++xx) {
                    const Eigen::Index sx = xx + dxx;
                    if (sx < 0 || sx >= w) continue;
                    dx[(c * h + sy) * w + sx] += dpatches(row, y * w + xx);
                  }
                }
              }
            }
          }
        }
      });
}

Tensor max_pool2d_2x2(const Tensor& x) {
  require_defined(x, "max_pool2d");
  require_rank(x, 3, "max_pool2d");
  const Eigen::Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 2 || w < 2) {
    throw ShapeError("max_pool2d: spatial dims must be at least 2");
  }
  const Eigen::Index ho = h / 2, wo = w / 2;
  const double* xd = x.values().data();
  Eigen::ArrayXd out(c * ho * wo);
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(c * ho * wo));
  for (Eigen::Index ci = 0; ci < c; ++ci) {
    for (Eigen::Index y = 0; y < ho; ++y) {
      for (Eigen::Index xx = 0; xx < wo; ++xx) {
        double best = -std::numeric_limits<double>::infinity();
        Eigen::Index best_idx = 0;
        for (Eigen::Index dy = 0; dy < 2; ++dy) {
          for (Eigen::Index dx = 0; dx < 2; ++dx) {
            const Eigen::Index idx = (ci * h + 2 * y + dy) * w + 2 * xx + dx;
            if (xd[idx] > best) {
              best = xd[idx];
              best_idx = idx;
            }
          }
        }
        const Eigen::Index o = (ci * ho + y) * wo + xx;
        out[o] = best;
        argmax[static_cast<std::size_t>(o)] = best_idx;
      }
    }
  }
  return wrap_op(
      "max_pool2d", {c, ho, wo}, std::move(out),
      {x.node()->shared_from_this()},
      [argmax](const TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.size() == 0) p.grad = Eigen::ArrayXd::Zero(p.values.size());
        for (Eigen::Index o = 0; o < self.grad.size(); ++o) {
          p.grad[argmax[static_cast<std::size_t>(o)]] += self.grad[o];
        }
      });
}

Tensor channel_column(const Tensor& x, Eigen::Index t) {
  require_defined(x, "channel_column");
  require_rank(x, 3, "channel_column");
  const Eigen::Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (t < 0 || t >= w) throw ShapeError("channel_column: index out of range");
  Eigen::ArrayXd out(c * h);
  const double* xd = x.values().data();
  for (Eigen::Index ci = 0; ci < c; ++ci) {
    for (Eigen::Index y = 0; y < h; ++y) {
      out[ci * h + y] = xd[(ci * h + y) * w + t];
    }
  }
  return wrap_op(
      "channel_column", {1, c * h}, std::move(out),
      {x.node()->shared_from_this()},
      [c, h, w, t](const TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.size() == 0) p.grad = Eigen::ArrayXd::Zero(p.values.size());
        for (Eigen::Index ci = 0; ci < c; ++ci) {
          for (Eigen::Index y = 0; y < h; ++y) {
            p.grad[(ci * h + y) * w + t] += self.grad[ci * h + y];
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, int label) {
  require_defined(logits, "cross_entropy");
  require_rank(logits, 2, "cross_entropy");
  if (logits.dim(0) != 1) {
    throw ShapeError("cross_entropy expects a [1, C] logit row");
  }
  const Eigen::Index c = logits.dim(1);
  if (label < 0 || label >= c) {
    throw ContractError("cross_entropy: label out of range");
  }
  const Eigen::ArrayXd& z = logits.values();
  const double zmax = z.maxCoeff();
  const Eigen::ArrayXd shifted = z - zmax;
  const Eigen::ArrayXd ez = shifted.exp();
  const double denom = ez.sum();
  Eigen::ArrayXd probs = ez / denom;
  Eigen::ArrayXd loss(1);
  loss[0] = std::log(denom) - shifted[label];
  return wrap_op(
      "cross_entropy", {1, 1}, std::move(loss),
      {logits.node()->shared_from_this()},
      [probs, label](const TensorNode& self) {
        Eigen::ArrayXd g = probs * self.grad[0];
        g[label] -= self.grad[0];
        self.parents[0]->accumulate(g);
      });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckDetail grad_check_detailed(const std::function<Tensor()>& f,
                                    std::vector<Tensor> inputs, double eps,
                                    double size_floor,
                                    Eigen::Index max_coords_per_input,
                                    Pcg32* rng) {
  for (Tensor& t : inputs) t.zero_grad();
  Tensor loss = f();
  loss.backward();

  std::vector<Eigen::ArrayXd> analytic;
  analytic.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    analytic.push_back(t.grad().size() > 0
                           ? t.grad()
                           : Eigen::ArrayXd::Zero(t.size()).eval());
  }

  const auto eval = [&]() {
    NoGradGuard guard;
    return f().scalar_value();
  };

  GradCheckDetail detail;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Eigen::ArrayXd& vals = inputs[i].values_mut();
    std::vector<Eigen::Index> coords;
    if (max_coords_per_input > 0 && vals.size() > max_coords_per_input) {
      if (rng == nullptr) {
        throw ContractError("grad_check: sampling coordinates needs an rng");
      }
      std::vector<Eigen::Index> all(static_cast<std::size_t>(vals.size()));
      for (Eigen::Index k = 0; k < vals.size(); ++k) {
        all[static_cast<std::size_t>(k)] = k;
      }
      rng->shuffle(all);
      coords.assign(all.begin(), all.begin() + max_coords_per_input);
    } else {
      coords.resize(static_cast<std::size_t>(vals.size()));
      for (Eigen::Index k = 0; k < vals.size(); ++k) {
        coords[static_cast<std::size_t>(k)] = k;
      }
    }
    for (const Eigen::Index c : coords) {
      const double v0 = vals[c];
      vals[c] = v0 + eps;
      const double fp = eval();
      vals[c] = v0 - eps;
      const double fm = eval();
      vals[c] = v0;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i][c];
      const double magnitude = std::abs(a) + std::abs(numeric);
      const double rel = std::abs(a - numeric) / std::max(1e-8, magnitude);
      detail.max_rel_error = std::max(detail.max_rel_error, rel);
      if (magnitude >= size_floor) {
        detail.max_rel_error_sized = std::max(detail.max_rel_error_sized, rel);
      } else {
        detail.max_abs_error_tiny =
            std::max(detail.max_abs_error_tiny, std::abs(a - numeric));
      }
    }
  }
  return detail;
}

double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                  double eps, Eigen::Index max_coords_per_input, Pcg32* rng) {
  return grad_check_detailed(f, std::move(inputs), eps, 1e-4,
                             max_coords_per_input, rng)
      .max_rel_error;
}

}  // namespace trifuse
