#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tlab/tensor.hpp"

namespace tlab {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
/// holds the node (see Tape::truncate).
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  MatMul,
  Transpose,
  Conv2d,
  Conv2dWeightGrad,
  FlipKernel,
  Relu,
  Sum,
  Mean,
  L2Norm,
  Square,
  Sqrt,
  Log,
  Exp,
  ReciprocalSafe,
  Softmax,
  SoftmaxCrossEntropy,
  Dot,
  Concat,
  SliceRows,
  PadRows,
  Reshape,
  BroadcastTo,
  SumTo,
  Gather,
  ScatterAdd,
};

const char* op_name(OpKind kind);

/// Ordered record of primitive operations. Single-writer: build and
/// differentiate a tape from one thread; distinct tapes are independent.
class Tape {
 public:
  struct Node {
    OpKind op = OpKind::Leaf;
    bool requires_grad = false;
    double scalar = 0.0;
    std::vector<std::uint32_t> inputs;
    std::vector<std::int64_t> ints;
    Tensor value;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Records an input. Rejects non-finite values.
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  std::size_t size() const { return nodes_.size(); }
  /// Drops every node recorded at or after `mark`; Vars into that range become dangling.
  void truncate(std::size_t mark);

  const Node& node(std::uint32_t id) const { return nodes_[id]; }

  Var push(OpKind op, std::vector<std::uint32_t> inputs, Tensor value, double scalar = 0.0,
           std::vector<std::int64_t> ints = {});

 private:
  std::vector<Node> nodes_;
};

enum class Reduction { Mean, Sum };

// Primitive operations. Each records one node and validates shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double factor);
Var matmul(Var a, Var b);
Var transpose(Var a);
/// Stride 1, odd square kernel, zero padding that preserves H and W.
/// x: (N, Cin, H, W), w: (Cout, Cin, k, k).
Var conv2d(Var x, Var w);
/// Gradient of <g, conv2d(x, w)> with respect to w, for kernel size k.
Var conv2d_weight_grad(Var x, Var g, std::size_t k);
/// (Cout, Cin, k, k) -> (Cin, Cout, k, k) with both spatial axes reversed.
Var flip_kernel(Var w);
Var relu(Var a);
Var sum(Var a);
Var mean(Var a);
Var l2_norm(Var a);
Var square(Var a);
Var sqrt(Var a);
Var log(Var a);
Var exp(Var a);
/// 1/x, with 0 mapped to 0.
Var reciprocal_safe(Var a);
/// Row-wise softmax of a (N, C) matrix.
Var softmax(Var logits);
/// Cross-entropy of softmax(logits) against target distributions (N, C); targets must be constant.
Var softmax_cross_entropy(Var logits, Var targets, Reduction reduction = Reduction::Mean);
Var dot(Var a, Var b);
/// Concatenation along the first axis.
Var concat(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var pad_rows(Var a, std::size_t begin, std::size_t total);
Var reshape(Var a, Shape shape);
/// Numpy-style broadcast (right-aligned, size-1 axes expand).
Var broadcast_to(Var a, Shape shape);
/// Adjoint of broadcast_to: sums the expanded axes away.
Var sum_to(Var a, Shape shape);
/// out[j] = index[j] >= 0 ? a.flat[index[j]] : 0, reshaped to `shape`.
Var gather(Var a, std::vector<std::int64_t> index, Shape shape);
/// Adjoint of gather: out.flat[index[j]] += a.flat[j]; output has `shape`.
Var scatter_add(Var a, std::vector<std::int64_t> index, Shape shape);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator-(Var a) { return scale(a, -1.0); }

/// x (N, F) + b (F) broadcast over rows; conv layouts use (N, C, H, W) + b (C).
Var add_bias(Var x, Var b);
/// Per-row Euclidean norm of a batch tensor: (N, ...) -> (N, 1).
Var row_norms(Var a);

/// Reverse-mode gradients of a scalar with respect to `wrt`.
/// With create_graph the results are differentiable Vars on the same tape;
/// otherwise they are constants and the intermediate backward nodes are discarded.
/// A var that is not an ancestor of `output` gets a zero gradient.
std::vector<Var> grad(Var output, std::span<const Var> wrt, bool create_graph);
std::vector<Tensor> grad_values(Var output, std::span<const Var> wrt);
Tensor grad_value(Var output, Var wrt);

/// Maps a leaf input to a scalar loss recorded on the same tape.
using ScalarFn = std::function<Var(Tape&, Var)>;

/// Hessian-vector product of `loss_at` at x along v, by differentiating
/// grad(loss) . v with create_graph.
Tensor hvp(const ScalarFn& loss_at, const Tensor& x, const Tensor& v);

/// Reusable Hessian-vector operator: the forward pass and first backward pass
/// are recorded once; each apply() only adds the second backward pass.
class HessianOperator {
 public:
  HessianOperator(const ScalarFn& loss_at, const Tensor& x);
  Tensor apply(const Tensor& v);
  const Tensor& gradient() const { return gradient_; }
  double loss() const { return loss_; }

 private:
  Tape tape_;
  Var x_;
  Var grad_;
  Tensor gradient_;
  double loss_ = 0.0;
  std::size_t mark_ = 0;
};

}  // namespace tlab
