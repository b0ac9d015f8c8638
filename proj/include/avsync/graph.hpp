#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "avsync/tensor.hpp"

namespace avsync {

// Handle to a node of a Graph. Only meaningful for the graph that issued it.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

class Graph;

// Result of Graph::backward. Nodes that do not lie on a path to the loss
// report an all-zero gradient of their own shape.
class Gradients {
 public:
  Gradients(const Graph& graph, std::vector<Tensor> grads);
  const Tensor& operator[](Var v) const;

 private:
  const Graph* graph_;
  std::vector<Tensor> grads_;
  mutable std::vector<Tensor> zeros_;
};

// Tape-based reverse-mode differentiation. Nodes are appended in creation
// order, which is a topological order; backward walks the tape once in
// reverse. Only nodes downstream of an `input` carry gradients, so graphs
// built from `constant` parameters skip weight gradients entirely.
//
// `sign` has a zero local gradient and `clamp` passes gradient through only
// strictly inside [lo, hi].
class Graph {
 public:
  // in_grads[i] is null when input i does not require a gradient; non-null
  // buffers are zero-initialised and must be accumulated into.
  using BackwardFn = std::function<void(const Graph&, const Tensor& out_grad, std::span<Tensor* const> in_grads)>;

  Var input(Tensor value);
  Var constant(Tensor value);

  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  // Elementwise product; either operand may be a rank-0 scalar.
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var matmul(Var a, Var b);
  // m[i, j] + row[j] for a rank-2 m and rank-1 row.
  Var add_rows(Var m, Var row);
  Var relu(Var a);
  Var tanh(Var a);
  Var sqrt(Var a);
  Var log_softmax(Var a);
  Var mean(Var a, std::size_t axis);
  Var sum(Var a);
  Var clamp(Var a, double lo, double hi);
  Var sign(Var a);
  // 1-D tensor of a's elements at the given row-major offsets.
  Var gather(Var a, std::vector<std::size_t> flat_indices);
  Var concat(std::span<const Var> parts, std::size_t axis);
  Var reshape(Var a, Shape shape);

  Var custom(std::vector<Var> inputs, Tensor value, BackwardFn backward);

  Gradients backward(Var loss) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

using ScalarFunction = std::function<Var(Graph&, Var)>;

// Max over coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|), where
// g_fd are central differences with the given step.
double grad_check(const ScalarFunction& f, const Tensor& point, double step);
// Same, restricted to a subset of coordinates.
double grad_check(const ScalarFunction& f, const Tensor& point, double step,
                  std::span<const std::size_t> coordinates);

}  // namespace avsync
