#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "declip/tensor.hpp"

namespace declip {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
  Graph* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only tape. Nodes are stored in creation order, which is a valid
/// topological order because a node can only reference earlier nodes.
class Graph {
 public:
  /// Receives the gradient of the node's output and accumulates into parents.
  using BackwardFn = std::function<void(Graph&, const Tensor&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op output. The backward closure is dropped when no parent
  /// requires a gradient.
  Var record(Tensor value, std::span<const Var> parents, BackwardFn backward);

  /// Clears every gradient slot, seeds d(loss)/d(loss) = 1 and propagates in
  /// reverse creation order. Repeated calls give bitwise-identical results.
  void backward(Var loss);

  const Tensor& value(Var v) const { return nodes_[v.id_].value; }
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  /// Null when the node received no gradient.
  const Tensor* grad(Var v) const;

  /// Adds `delta` into v's gradient slot (no-op for nodes without requires_grad).
  void accumulate(Var v, const Tensor& delta);
  /// Mutable gradient slot, zero-initialized on first use.
  Tensor& grad_slot(Var v);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  void check_owner(Var v) const;

  std::vector<Node> nodes_;
};

// Differentiable operations. All matrix operands are rank-2; there is no
// implicit broadcasting, only the explicit row-vector forms below.

Var matmul(Var a, Var b);
/// a · bᵀ
Var matmul_bt(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a[m×n] + row[1×n] on every row.
Var add_row(Var a, Var row);
/// a[m×n] ⊙ row[1×n] on every row.
Var mul_row(Var a, Var row);

/// Per-row standardization (biased variance) without affine terms.
Var layer_norm_rows(Var x, double eps);
/// tanh approximation of GELU.
Var gelu(Var x);

Var softmax_rows(Var x, double temperature);
Var normalize_rows(Var x);
Var cosine_matrix(Var a, Var b);
Var kl_rows(Var p, Var q);

Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);

Var sum(Var x);
Var mean(Var x);

// Plain tensor kernels shared by the differentiable forms.

/// Row softmax of x / temperature with per-row max subtraction.
Tensor softmax_rows(const Tensor& x, double temperature);
/// Unit-norm rows; zero-norm rows are a degenerate-input error.
Tensor normalize_rows(const Tensor& x);
/// (i, j) = <a_i, b_j> / (|a_i| |b_j|)
Tensor cosine_matrix(const Tensor& a, const Tensor& b);

inline constexpr double kKlClamp = 1e-8;
inline constexpr double kStochasticTol = 1e-6;

/// Mean over rows of KL(p_i || q_i); q clamped below by 1e-8, 0·log0 = 0.
double kl_rows(const Tensor& p, const Tensor& q);
/// Throws ErrorKind::Distribution unless rows are nonnegative and sum to 1.
void require_row_stochastic(const Tensor& m, double tol, const char* what);

}  // namespace declip
