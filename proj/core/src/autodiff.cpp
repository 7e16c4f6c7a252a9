#include "tlab/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"
#include "tlab/error.hpp"

namespace tlab {

const Tensor& Var::value() const { return tape_->node(id_).value; }
bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Scale: return "scale";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Conv2dWeightGrad: return "conv2d_weight_grad";
    case OpKind::FlipKernel: return "flip_kernel";
    case OpKind::Relu: return "relu";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::L2Norm: return "l2_norm";
    case OpKind::Square: return "square";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::ReciprocalSafe: return "reciprocal_safe";
    case OpKind::Softmax: return "softmax";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::Dot: return "dot";
    case OpKind::Concat: return "concat";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::PadRows: return "pad_rows";
    case OpKind::Reshape: return "reshape";
    case OpKind::BroadcastTo: return "broadcast_to";
    case OpKind::SumTo: return "sum_to";
    case OpKind::Gather: return "gather";
    case OpKind::ScatterAdd: return "scatter_add";
  }
  return "?";
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw DomainError("leaf tensor contains NaN or Inf");
  Node n;
  n.op = OpKind::Leaf;
  n.requires_grad = requires_grad;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Tape::truncate(std::size_t mark) {
  if (mark < nodes_.size()) nodes_.resize(mark);
}

Var Tape::push(OpKind op, std::vector<std::uint32_t> inputs, Tensor value, double scalar,
               std::vector<std::int64_t> ints) {
  Node n;
  n.op = op;
  n.scalar = scalar;
  for (auto i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  n.inputs = std::move(inputs);
  n.ints = std::move(ints);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

namespace {

Tape& same_tape(Var a, Var b, const char* what) {
  if (&a.tape() != &b.tape()) throw ValidationError(std::string(what) + ": operands live on different tapes");
  return a.tape();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename F>
Tensor map_unary(const Tensor& a, F&& f) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return Tensor::unchecked(a.shape(), std::move(out));
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F&& f) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return Tensor::unchecked(a.shape(), std::move(out));
}

double sum_values(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s;
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  return t.push(OpKind::Add, {a.id(), b.id()}, map_binary(a.value(), b.value(), std::plus<>()));
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  return t.push(OpKind::Sub, {a.id(), b.id()}, map_binary(a.value(), b.value(), std::minus<>()));
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  return t.push(OpKind::Mul, {a.id(), b.id()}, map_binary(a.value(), b.value(), std::multiplies<>()));
}

Var div(Var a, Var b) {
  Tape& t = same_tape(a, b, "div");
  require_same_shape(a.value(), b.value(), "div");
  for (double v : b.value().values())
    if (v == 0.0) throw DomainError("div by zero");
  return t.push(OpKind::Div, {a.id(), b.id()}, map_binary(a.value(), b.value(), std::divides<>()));
}

Var scale(Var a, double factor) {
  return a.tape().push(OpKind::Scale, {a.id()}, map_unary(a.value(), [factor](double v) { return v * factor; }),
                       factor);
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  return t.push(OpKind::MatMul, {a.id(), b.id()}, kernels::matmul(a.value(), b.value()));
}

Var transpose(Var a) { return a.tape().push(OpKind::Transpose, {a.id()}, kernels::transpose(a.value())); }

Var conv2d(Var x, Var w) {
  Tape& t = same_tape(x, w, "conv2d");
  return t.push(OpKind::Conv2d, {x.id(), w.id()}, kernels::conv2d(x.value(), w.value()));
}

Var conv2d_weight_grad(Var x, Var g, std::size_t k) {
  Tape& t = same_tape(x, g, "conv2d_weight_grad");
  return t.push(OpKind::Conv2dWeightGrad, {x.id(), g.id()}, kernels::conv2d_weight_grad(x.value(), g.value(), k),
                0.0, {static_cast<std::int64_t>(k)});
}

Var flip_kernel(Var w) { return w.tape().push(OpKind::FlipKernel, {w.id()}, kernels::flip_kernel(w.value())); }

Var relu(Var a) {
  // Exactly-zero inputs take the zero branch; the second derivative is zero everywhere.
  return a.tape().push(OpKind::Relu, {a.id()}, map_unary(a.value(), [](double v) { return v > 0.0 ? v : 0.0; }));
}

Var sum(Var a) { return a.tape().push(OpKind::Sum, {a.id()}, Tensor::scalar(sum_values(a.value()))); }

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return a.tape().push(OpKind::Mean, {a.id()}, Tensor::scalar(sum_values(a.value()) / n));
}

Var l2_norm(Var a) {
  return a.tape().push(OpKind::L2Norm, {a.id()}, Tensor::scalar(tlab::l2_norm(a.value())));
}

Var square(Var a) { return a.tape().push(OpKind::Square, {a.id()}, map_unary(a.value(), [](double v) { return v * v; })); }

Var sqrt(Var a) {
  for (double v : a.value().values())
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  return a.tape().push(OpKind::Sqrt, {a.id()}, map_unary(a.value(), [](double v) { return std::sqrt(v); }));
}

Var log(Var a) {
  for (double v : a.value().values())
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  return a.tape().push(OpKind::Log, {a.id()}, map_unary(a.value(), [](double v) { return std::log(v); }));
}

Var exp(Var a) {
  Tensor out = map_unary(a.value(), [](double v) { return std::exp(v); });
  if (!out.all_finite()) throw DomainError("exp overflow");
  return a.tape().push(OpKind::Exp, {a.id()}, std::move(out));
}

Var reciprocal_safe(Var a) {
  return a.tape().push(OpKind::ReciprocalSafe, {a.id()},
                       map_unary(a.value(), [](double v) { return v == 0.0 ? 0.0 : 1.0 / v; }));
}

Var softmax(Var logits) { return logits.tape().push(OpKind::Softmax, {logits.id()}, kernels::softmax_rows(logits.value())); }

Var softmax_cross_entropy(Var logits, Var targets, Reduction reduction) {
  Tape& t = same_tape(logits, targets, "softmax_cross_entropy");
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw DimensionError("softmax_cross_entropy needs (N, C) logits, got " + shape_str(z.shape()));
  require_same_shape(z, targets.value(), "softmax_cross_entropy");
  if (targets.requires_grad()) throw ValidationError("softmax_cross_entropy targets must be constant");
  const std::size_t n = z.dim(0), c = z.dim(1);
  const Tensor& p = targets.value();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* zi = z.data() + i * c;
    const double m = *std::max_element(zi, zi + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(zi[j] - m);
    const double lse = m + std::log(s);
    double mass = 0.0, cross = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      mass += p[i * c + j];
      cross += p[i * c + j] * zi[j];
    }
    total += mass * lse - cross;
  }
  const double factor = reduction == Reduction::Mean ? 1.0 / static_cast<double>(n) : 1.0;
  return t.push(OpKind::SoftmaxCrossEntropy, {logits.id(), targets.id()}, Tensor::scalar(total * factor), factor);
}

Var dot(Var a, Var b) {
  Tape& t = same_tape(a, b, "dot");
  require_same_shape(a.value(), b.value(), "dot");
  return t.push(OpKind::Dot, {a.id(), b.id()}, Tensor::scalar(tlab::dot(a.value(), b.value())));
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  std::vector<Tensor> values;
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) {
    same_tape(parts[0], p, "concat");
    values.push_back(p.value());
    ids.push_back(p.id());
  }
  return parts[0].tape().push(OpKind::Concat, std::move(ids), concat_rows(values));
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  return a.tape().push(OpKind::SliceRows, {a.id()}, a.value().rows(begin, count), 0.0,
                       {static_cast<std::int64_t>(begin), static_cast<std::int64_t>(count)});
}

Var pad_rows(Var a, std::size_t begin, std::size_t total) {
  const Tensor& v = a.value();
  if (v.rank() == 0 || begin + v.dim(0) > total) throw DimensionError("pad_rows range out of bounds");
  Shape s = v.shape();
  s[0] = total;
  Tensor out(s);
  const std::size_t stride = v.size() / v.dim(0);
  std::copy(v.values().begin(), v.values().end(), out.data() + begin * stride);
  return a.tape().push(OpKind::PadRows, {a.id()}, std::move(out), 0.0,
                       {static_cast<std::int64_t>(begin), static_cast<std::int64_t>(total)});
}

Var reshape(Var a, Shape shape) { return a.tape().push(OpKind::Reshape, {a.id()}, a.value().reshaped(std::move(shape))); }

Var broadcast_to(Var a, Shape shape) {
  return a.tape().push(OpKind::BroadcastTo, {a.id()}, kernels::broadcast_to(a.value(), shape));
}

Var sum_to(Var a, Shape shape) { return a.tape().push(OpKind::SumTo, {a.id()}, kernels::sum_to(a.value(), shape)); }

Var gather(Var a, std::vector<std::int64_t> index, Shape shape) {
  if (numel(shape) != index.size()) throw DimensionError("gather index count does not match output shape");
  const Tensor& v = a.value();
  std::vector<double> out(index.size());
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] >= static_cast<std::int64_t>(v.size())) throw DimensionError("gather index out of range");
    out[j] = index[j] < 0 ? 0.0 : v[static_cast<std::size_t>(index[j])];
  }
  return a.tape().push(OpKind::Gather, {a.id()}, Tensor::unchecked(std::move(shape), std::move(out)), 0.0,
                       std::move(index));
}

Var scatter_add(Var a, std::vector<std::int64_t> index, Shape shape) {
  const Tensor& v = a.value();
  if (v.size() != index.size()) throw DimensionError("scatter_add index count does not match input");
  Tensor out(std::move(shape));
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] >= static_cast<std::int64_t>(out.size())) throw DimensionError("scatter_add index out of range");
    if (index[j] >= 0) out[static_cast<std::size_t>(index[j])] += v[j];
  }
  return a.tape().push(OpKind::ScatterAdd, {a.id()}, std::move(out), 0.0, std::move(index));
}

Var add_bias(Var x, Var b) {
  const Shape& xs = x.shape();
  if (b.value().rank() != 1 || xs.size() < 2 || xs[1] != b.value().dim(0))
    throw DimensionError("add_bias shape mismatch: " + shape_str(xs) + " + " + shape_str(b.shape()));
  Shape bs(xs.size(), 1);
  bs[1] = xs[1];
  return add(x, broadcast_to(reshape(b, bs), xs));
}

Var row_norms(Var a) {
  const Shape& s = a.shape();
  if (s.empty()) throw DimensionError("row_norms needs a batch tensor");
  Var flat = reshape(a, {s[0], a.value().size() / s[0]});
  return sqrt(sum_to(square(flat), {s[0], 1}));
}

namespace {

// Input adjoints of node `id` given its output adjoint `g`; entries for unneeded inputs stay empty.
std::vector<Var> backward(Tape& t, std::uint32_t id, Var g, const std::vector<char>& need) {
  // Copy what we need: pushing new nodes may reallocate the node storage.
  const OpKind op = t.node(id).op;
  const std::vector<std::uint32_t> in = t.node(id).inputs;
  const std::vector<std::int64_t> ints = t.node(id).ints;
  const double scalar = t.node(id).scalar;
  const Var out(&t, id);
  auto input = [&](std::size_t j) { return Var(&t, in[j]); };
  std::vector<Var> r(in.size());

  switch (op) {
    case OpKind::Leaf:
      break;
    case OpKind::Add:
      if (need[0]) r[0] = g;
      if (need[1]) r[1] = g;
      break;
    case OpKind::Sub:
      if (need[0]) r[0] = g;
      if (need[1]) r[1] = scale(g, -1.0);
      break;
    case OpKind::Mul:
      if (need[0]) r[0] = mul(g, input(1));
      if (need[1]) r[1] = mul(g, input(0));
      break;
    case OpKind::Div:
      if (need[0]) r[0] = div(g, input(1));
      if (need[1]) r[1] = scale(mul(g, div(out, input(1))), -1.0);
      break;
    case OpKind::Scale:
      if (need[0]) r[0] = scale(g, scalar);
      break;
    case OpKind::MatMul:
      if (need[0]) r[0] = matmul(g, transpose(input(1)));
      if (need[1]) r[1] = matmul(transpose(input(0)), g);
      break;
    case OpKind::Transpose:
      if (need[0]) r[0] = transpose(g);
      break;
    case OpKind::Conv2d:
      if (need[0]) r[0] = conv2d(g, flip_kernel(input(1)));
      if (need[1]) r[1] = conv2d_weight_grad(input(0), g, input(1).value().dim(2));
      break;
    case OpKind::Conv2dWeightGrad:
      // <H, wgrad(x, gy)> = <gy, conv2d(x, H)>, bilinear in (x, gy).
      if (need[0]) r[0] = conv2d(input(1), flip_kernel(g));
      if (need[1]) r[1] = conv2d(input(0), g);
      break;
    case OpKind::FlipKernel:
      if (need[0]) r[0] = flip_kernel(g);
      break;
    case OpKind::Relu:
      if (need[0]) {
        const Tensor& x = input(0).value();
        Tensor mask(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : 0.0;
        r[0] = mul(g, t.constant(std::move(mask)));
      }
      break;
    case OpKind::Sum:
      if (need[0]) r[0] = broadcast_to(g, input(0).shape());
      break;
    case OpKind::Mean:
      if (need[0]) {
        const Shape s = input(0).shape();
        r[0] = scale(broadcast_to(g, s), 1.0 / static_cast<double>(numel(s)));
      }
      break;
    case OpKind::L2Norm:
      if (need[0]) r[0] = mul(input(0), broadcast_to(mul(g, reciprocal_safe(out)), input(0).shape()));
      break;
    case OpKind::Square:
      if (need[0]) r[0] = mul(g, scale(input(0), 2.0));
      break;
    case OpKind::Sqrt:
      if (need[0]) r[0] = mul(g, scale(reciprocal_safe(out), 0.5));
      break;
    case OpKind::Log:
      if (need[0]) r[0] = div(g, input(0));
      break;
    case OpKind::Exp:
      if (need[0]) r[0] = mul(g, out);
      break;
    case OpKind::ReciprocalSafe:
      if (need[0]) r[0] = scale(mul(g, square(out)), -1.0);
      break;
    case OpKind::Softmax:
      if (need[0]) {
        const Shape s = out.shape();
        Var gs = mul(g, out);
        Var row = broadcast_to(sum_to(gs, {s[0], 1}), s);
        r[0] = mul(out, sub(g, row));
      }
      break;
    case OpKind::SoftmaxCrossEntropy:
      if (need[0]) {
        Var z = input(0);
        Var resid = sub(softmax(z), input(1));
        r[0] = mul(broadcast_to(scale(g, scalar), z.shape()), resid);
      }
      if (need[1]) throw ValidationError("softmax_cross_entropy targets are not differentiable");
      break;
    case OpKind::Dot:
      if (need[0]) r[0] = mul(broadcast_to(g, input(0).shape()), input(1));
      if (need[1]) r[1] = mul(broadcast_to(g, input(1).shape()), input(0));
      break;
    case OpKind::Concat: {
      std::size_t offset = 0;
      for (std::size_t j = 0; j < in.size(); ++j) {
        const std::size_t rows = input(j).value().dim(0);
        if (need[j]) r[j] = slice_rows(g, offset, rows);
        offset += rows;
      }
      break;
    }
    case OpKind::SliceRows:
      if (need[0]) r[0] = pad_rows(g, static_cast<std::size_t>(ints[0]), input(0).value().dim(0));
      break;
    case OpKind::PadRows:
      if (need[0]) r[0] = slice_rows(g, static_cast<std::size_t>(ints[0]), input(0).value().dim(0));
      break;
    case OpKind::Reshape:
      if (need[0]) r[0] = reshape(g, input(0).shape());
      break;
    case OpKind::BroadcastTo:
      if (need[0]) r[0] = sum_to(g, input(0).shape());
      break;
    case OpKind::SumTo:
      if (need[0]) r[0] = broadcast_to(g, input(0).shape());
      break;
    case OpKind::Gather:
      if (need[0]) r[0] = scatter_add(g, ints, input(0).shape());
      break;
    case OpKind::ScatterAdd:
      if (need[0]) r[0] = gather(g, ints, input(0).shape());
      break;
  }
  return r;
}

}  // namespace

std::vector<Var> grad(Var output, std::span<const Var> wrt, bool create_graph) {
  Tape& t = output.tape();
  if (output.value().size() != 1)
    throw RankError("grad needs a scalar output, got shape " + shape_str(output.shape()));
  const std::uint32_t out_id = output.id();
  std::uint32_t lo = out_id;
  for (const auto& w : wrt) {
    if (&w.tape() != &t) throw ValidationError("grad: variable lives on a different tape");
    lo = std::min(lo, w.id());
  }

  // Nodes on some path from a wrt var to the output.
  std::vector<char> needed(out_id + 1, 0);
  for (const auto& w : wrt)
    if (w.id() <= out_id) needed[w.id()] = 1;
  for (std::uint32_t i = lo; i <= out_id; ++i) {
    if (needed[i]) continue;
    for (auto j : t.node(i).inputs)
      if (j >= lo && needed[j]) {
        needed[i] = 1;
        break;
      }
  }

  const std::size_t mark = t.size();
  std::vector<std::int64_t> adj(out_id + 1, -1);
  if (needed[out_id]) adj[out_id] = t.constant(Tensor::full(output.shape(), 1.0)).id();

  for (std::int64_t i = out_id; i >= static_cast<std::int64_t>(lo); --i) {
    const auto id = static_cast<std::uint32_t>(i);
    if (adj[id] < 0 || t.node(id).op == OpKind::Leaf) continue;
    const std::vector<std::uint32_t> inputs = t.node(id).inputs;
    std::vector<char> need(inputs.size());
    bool any = false;
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      need[j] = inputs[j] >= lo && needed[inputs[j]];
      any = any || need[j];
    }
    if (!any) continue;
    auto grads = backward(t, id, Var(&t, static_cast<std::uint32_t>(adj[id])), need);
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      if (!need[j]) continue;
      auto& slot = adj[inputs[j]];
      slot = slot < 0 ? grads[j].id() : add(Var(&t, static_cast<std::uint32_t>(slot)), grads[j]).id();
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  if (create_graph) {
    for (const auto& w : wrt) {
      const bool has = w.id() <= out_id && adj[w.id()] >= 0;
      result.push_back(has ? Var(&t, static_cast<std::uint32_t>(adj[w.id()])) : t.constant(Tensor(w.shape())));
    }
    return result;
  }
  std::vector<Tensor> values;
  values.reserve(wrt.size());
  for (const auto& w : wrt) {
    const bool has = w.id() <= out_id && adj[w.id()] >= 0;
    values.push_back(has ? t.node(static_cast<std::uint32_t>(adj[w.id()])).value : Tensor(w.shape()));
  }
  t.truncate(mark);
  for (auto& v : values) result.push_back(t.constant(std::move(v)));
  return result;
}

std::vector<Tensor> grad_values(Var output, std::span<const Var> wrt) {
  Tape& t = output.tape();
  const std::size_t mark = t.size();
  auto vars = grad(output, wrt, false);
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (auto& v : vars) out.push_back(v.value());
  t.truncate(mark);
  return out;
}

Tensor grad_value(Var output, Var wrt) {
  const Var w[] = {wrt};
  return std::move(grad_values(output, w)[0]);
}

Tensor hvp(const ScalarFn& loss_at, const Tensor& x, const Tensor& v) {
  HessianOperator h(loss_at, x);
  return h.apply(v);
}

HessianOperator::HessianOperator(const ScalarFn& loss_at, const Tensor& x) {
  x_ = tape_.leaf(x, true);
  Var loss = loss_at(tape_, x_);
  loss_ = loss.value().item();
  const Var w[] = {x_};
  grad_ = grad(loss, w, true)[0];
  gradient_ = grad_.value();
  mark_ = tape_.size();
}

Tensor HessianOperator::apply(const Tensor& v) {
  if (v.shape() != x_.shape())
    throw DimensionError("hvp direction shape " + shape_str(v.shape()) + " != " + shape_str(x_.shape()));
  Var s = dot(grad_, tape_.constant(v));
  Tensor hv = grad_value(s, x_);
  tape_.truncate(mark_);
  return hv;
}

}  // namespace tlab
