#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "clipo/tensor.hpp"

namespace clipo {

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so inputs
// always precede the operations that consume them; backward walks the tape
// once from the root towards the front.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Binds an existing tensor without copying it. When the tensor requires
  // grad, backward() accumulates into its grad buffer.
  Var leaf(Tensor& param);
  Var constant_ref(const Tensor& value);
  Var constant(Tensor value);

  // Appends an op result. `backward` is dropped when no input needs grad.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  // Adjoint buffer of a node (allocated on first access).
  std::span<double> adjoint(std::size_t id);
  std::span<const double> adjoint_or_empty(std::size_t id) const { return nodes_[id].adjoint; }

  // Seeds d(root)/d(root) = 1 and propagates to every requires_grad leaf.
  void backward(Var root);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor* param = nullptr;
    std::vector<double> adjoint;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };
  std::deque<Node> nodes_;
};

// Differentiable primitives. All inputs must live on the same tape.
namespace ops {

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
// a[m x n] + bias[n] on every row.
Var add_row(Var a, Var bias);
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var clamp(Var a, double lo, double hi);
Var minimum(Var a, Var b);
Var gelu(Var a);

// Rows of table[V x D] picked by ids.
Var gather_rows(Var table, std::span<const int> ids);
// Elements x[i, ids[i]] of a [T x V] matrix, or x[ids[k]] of a vector.
Var pick(Var x, std::span<const int> ids);
Var select(Var x, std::size_t index);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var row(Var x, std::size_t r);
Var stack_rows(std::span<const Var> rows);
Var concat(std::span<const Var> parts);

Var sum(Var a);
Var mean(Var a);
// Mean over axis 0 of a [T x D] matrix.
Var mean_axis(Var a);
Var dot(Var a, Var b);
Var matvec(Var w, Var x);

Var log_softmax(Var x);
Var logsumexp(Var x);
Var l2_normalize(Var x, double eps_norm = 1e-12);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Causal multi-head self-attention over [T x D] projections.
Var causal_attention(Var q, Var k, Var v, std::size_t heads);

}  // namespace ops

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-6);

}  // namespace clipo
