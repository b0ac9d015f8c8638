#include "avsync/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "avsync/error.hpp"

namespace avsync {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  }
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Splits `shape` around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Gradients::Gradients(const Graph& graph, std::vector<Tensor> grads)
    : graph_(&graph), grads_(std::move(grads)), zeros_(grads_.size()) {}

const Tensor& Gradients::operator[](Var v) const {
  if (v.id >= grads_.size()) throw Error("gradient requested for a variable of another graph");
  if (grads_[v.id].shape() == graph_->shape(v)) return grads_[v.id];
  if (zeros_[v.id].shape() != graph_->shape(v)) zeros_[v.id] = Tensor(graph_->shape(v), 0.0);
  return zeros_[v.id];
}

Var Graph::push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = false;
  for (std::size_t in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) throw Error("variable does not belong to this graph");
  return nodes_[v.id];
}

Var Graph::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Var Graph::add(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same_shape("add", x, y);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return push(std::move(out), {a.id, b.id}, [](const Graph&, const Tensor& g, std::span<Tensor* const> in) {
    accumulate(in[0], g);
    accumulate(in[1], g);
  });
}

Var Graph::sub(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same_shape("sub", x, y);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return push(std::move(out), {a.id, b.id}, [](const Graph&, const Tensor& g, std::span<Tensor* const> in) {
    accumulate(in[0], g);
    if (in[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] -= g[i];
    }
  });
}

Var Graph::mul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  const bool x_scalar = x.rank() == 0;
  const bool y_scalar = y.rank() == 0;
  if (!x_scalar && !y_scalar) require_same_shape("mul", x, y);
  Tensor out(x_scalar ? y.shape() : x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[x_scalar ? 0 : i] * y[y_scalar ? 0 : i];
  return push(std::move(out), {a.id, b.id},
              [a, b, x_scalar, y_scalar](const Graph& gr, const Tensor& g, std::span<Tensor* const> in) {
                const Tensor& x = gr.value(a);
                const Tensor& y = gr.value(b);
                for (std::size_t i = 0; i < g.size(); ++i) {
                  if (in[0]) (*in[0])[x_scalar ? 0 : i] += g[i] * y[y_scalar ? 0 : i];
                  if (in[1]) (*in[1])[y_scalar ? 0 : i] += g[i] * x[x_scalar ? 0 : i];
                }
              });
}

Var Graph::scale(Var a, double factor) {
  Tensor out = value(a);
  for (double& v : out.data()) v *= factor;
  return push(std::move(out), {a.id}, [factor](const Graph&, const Tensor& g, std::span<Tensor* const> in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += factor * g[i];
  });
}

namespace {

void axpy(double s, const double* __restrict x, double* __restrict y, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) y[j] += s * x[j];
}

// c[m,n] += a[m,k] * b[k,n], skipping zero entries of a (common after relu).
// Columns are done in blocks of 8 held in registers; the summation order per
// element is the same as the plain loop.
void axpy_rows(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kBlock = 8;
  const std::size_t blocked = n - n % kBlock;
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j0 = 0; j0 < blocked; j0 += kBlock) {
      double acc[kBlock];
      for (std::size_t jj = 0; jj < kBlock; ++jj) acc[jj] = crow[j0 + jj];
      for (std::size_t p = 0; p < k; ++p) {
        const double s = arow[p];
        if (s == 0.0) continue;
        const double* brow = b + p * n + j0;
        for (std::size_t jj = 0; jj < kBlock; ++jj) acc[jj] += s * brow[jj];
      }
      for (std::size_t jj = 0; jj < kBlock; ++jj) crow[j0 + jj] = acc[jj];
    }
    if (blocked == n) continue;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = arow[p];
      if (s != 0.0) axpy(s, b + p * n + blocked, crow + blocked, n - blocked);
    }
  }
}

}  // namespace

Var Graph::matmul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw ShapeError("matmul: shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) +
                     " are incompatible");
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out(Shape{m, n}, 0.0);
  axpy_rows(x.data().data(), y.data().data(), out.data().data(), m, k, n);
  return push(std::move(out), {a.id, b.id}, [a, b, m, k, n](const Graph& gr, const Tensor& g, std::span<Tensor* const> in) {
    const double* xa = gr.value(a).data().data();
    const double* yb = gr.value(b).data().data();
    const double* ga = g.data().data();
    if (in[0]) {
      // dx = g * y^T, with y^T materialised so the inner loop is contiguous.
      std::vector<double> yt(k * n);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) yt[j * k + p] = yb[p * n + j];
      axpy_rows(ga, yt.data(), in[0]->data().data(), m, n, k);
    }
    if (in[1]) {
      // dy = x^T * g
      double* dy = in[1]->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = ga + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double s = xa[i * k + p];
          if (s == 0.0) continue;
          axpy(s, grow, dy + p * n, n);
        }
      }
    }
  });
}

Var Graph::add_rows(Var m, Var row) {
  const Tensor& x = value(m);
  const Tensor& r = value(row);
  if (x.rank() != 2 || r.rank() != 1 || x.dim(1) != r.dim(0)) {
    throw ShapeError("add_rows: shapes " + shape_str(x.shape()) + " and " + shape_str(r.shape()) +
                     " are incompatible");
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = x;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += r[j];
  return push(std::move(out), {m.id, row.id}, [rows, cols](const Graph&, const Tensor& g, std::span<Tensor* const> in) {
    accumulate(in[0], g);
    if (in[1]) {
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) (*in[1])[j] += g[i * cols + j];
    }
  });
}

Var Graph::relu(Var a) {
  Tensor out = value(a);
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return push(std::move(out), {a.id}, [a](const Graph& gr, const Tensor& g, std::span<Tensor* const> in) {
    const Tensor& x = gr.value(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) (*in[0])[i] += g[i];
  });
}

Var Graph::tanh(Var a) {
  Tensor out = value(a);
  for (double& v : out.data()) v = std::tanh(v);
  const std::size_t self = nodes_.size();
  return push(std::move(out), {a.id}, [self](const Graph& gr, const Tensor& g, std::span<Tensor* const> in) {
    const Tensor& y = gr.nodes_[self].value;
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var Graph::sqrt(Var a) {
  Tensor out = value(a);
  for (double& v : out.data()) {
    if (v < 0.0) throw DomainError("sqrt of negative value");
    v = std::sqrt(v);
  }
  const std::size_t self = nodes_.size();
  return push(std::move(out), {a.id}, [self](const Graph& gr, const Tensor& g, std::span<Tensor* const> in) {
    const Tensor& y = gr.nodes_[self].value;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (y[i] > 0.0) (*in[0])[i] += g[i] * 0.5 / y[i];
  });
}

Var Graph::log_softmax(Var a) {
  const Tensor& x = value(a);
  if (x.rank() == 0) throw ShapeError("log_softmax: needs rank >= 1, got " + shape_str(x.shape()));
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  Tensor out = x;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data().data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < cols; ++j) row[j] -= lse;
  }
  const std::size_t self = nodes_.size();
  return push(std::move(out), {a.id}, [self, rows, cols](const Graph& gr, const Tensor& g, std::span<Tensor* const> in) {
    const Tensor& y = gr.nodes_[self].value;
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < cols; ++j) gsum += g[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t i = r * cols + j;
        (*in[0])[i] += g[i] - std::exp(y[i]) * gsum;
      }
    }
  });
}

Var Graph::mean(Var a, std::size_t axis) {
  const Tensor& x = value(a);
  if (axis >= x.rank()) {
    throw ShapeError("mean: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape, 0.0);
  const double inv = 1.0 / static_cast<double>(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.extent + e) * s.inner + i] * inv;
  return push(std::move(out), {a.id}, [s, inv](const Graph&, const Tensor& g, std::span<Tensor* const> in) {
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i) (*in[0])[(o * s.extent + e) * s.inner + i] += g[o * s.inner + i] * inv;
  });
}

Var Graph::sum(Var a) {
  double total = 0.0;
  for (double v : value(a).data()) total += v;
  return push(Tensor::scalar(total), {a.id}, [](const Graph&, const Tensor& g, std::span<Tensor* const> in) {
    for (double& v : in[0]->data()) v += g[0];
  });
}

Var Graph::clamp(Var a, double lo, double hi) {
  if (lo > hi) throw Error("clamp: lower bound exceeds upper bound");
  Tensor out = value(a);
  for (double& v : out.data()) v = std::clamp(v, lo, hi);
  return push(std::move(out), {a.id}, [a, lo, hi](const Graph& gr, const Tensor& g, std::span<Tensor* const> in) {
    const Tensor& x = gr.value(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > lo && x[i] < hi) (*in[0])[i] += g[i];
  });
}

Var Graph::sign(Var a) {
  Tensor out = value(a);
  for (double& v : out.data()) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  return push(std::move(out), {a.id}, [](const Graph&, const Tensor&, std::span<Tensor* const>) {});
}

Var Graph::gather(Var a, std::vector<std::size_t> flat_indices) {
  const Tensor& x = value(a);
  Tensor out(Shape{flat_indices.size()});
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= x.size()) {
      throw ShapeError("gather: index " + std::to_string(flat_indices[i]) + " out of range for " +
                       shape_str(x.shape()));
    }
    out[i] = x[flat_indices[i]];
  }
  return push(std::move(out), {a.id},
              [idx = std::move(flat_indices)](const Graph&, const Tensor& g, std::span<Tensor* const> in) {
                for (std::size_t i = 0; i < idx.size(); ++i) (*in[0])[idx[i]] += g[i];
              });
}

Var Graph::concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = value(parts[0]).shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> extents;
  for (Var p : parts) {
    const Shape& s = value(p).shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw ShapeError("concat: shapes " + shape_str(first) + " and " + shape_str(s) + " are incompatible");
    out_shape[axis] += s[axis];
    ids.push_back(p.id);
    extents.push_back(s[axis]);
  }
  const AxisSplit os = split_axis(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& x = value(parts[k]);
    const std::size_t block = extents[k] * os.inner;
    for (std::size_t o = 0; o < os.outer; ++o)
      std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.data().begin() + static_cast<std::ptrdiff_t>(o * os.extent * os.inner + offset * os.inner));
    offset += extents[k];
  }
  return push(std::move(out), ids, [os, extents](const Graph&, const Tensor& g, std::span<Tensor* const> in) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      const std::size_t block = extents[k] * os.inner;
      if (in[k]) {
        for (std::size_t o = 0; o < os.outer; ++o)
          for (std::size_t i = 0; i < block; ++i)
            (*in[k])[o * block + i] += g[o * os.extent * os.inner + offset * os.inner + i];
      }
      offset += extents[k];
    }
  });
}

Var Graph::reshape(Var a, Shape shape) {
  Tensor out = value(a).reshaped(std::move(shape));
  return push(std::move(out), {a.id}, [](const Graph&, const Tensor& g, std::span<Tensor* const> in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
  });
}

Var Graph::custom(std::vector<Var> inputs, Tensor value, BackwardFn backward) {
  std::vector<std::size_t> ids;
  ids.reserve(inputs.size());
  for (Var v : inputs) {
    node(v);
    ids.push_back(v.id);
  }
  return push(std::move(value), std::move(ids), std::move(backward));
}

Gradients Graph::backward(Var loss) const {
  const Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(root.value.shape()));
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[loss.id] = Tensor(root.value.shape(), 1.0);
  std::vector<Tensor*> in_ptrs;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || grads[id].shape() != n.value.shape() || grads[id].size() == 0) continue;
    in_ptrs.assign(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const Node& src = nodes_[n.inputs[k]];
      if (!src.requires_grad) continue;
      Tensor& buf = grads[n.inputs[k]];
      if (buf.shape() != src.value.shape() || buf.size() != src.value.size()) buf = Tensor(src.value.shape(), 0.0);
      in_ptrs[k] = &buf;
    }
    n.backward(*this, grads[id], in_ptrs);
  }
  return Gradients(*this, std::move(grads));
}

double grad_check(const ScalarFunction& f, const Tensor& point, double step) {
  std::vector<std::size_t> all(point.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return grad_check(f, point, step, all);
}

double grad_check(const ScalarFunction& f, const Tensor& point, double step,
                  std::span<const std::size_t> coordinates) {
  if (!(step > 0.0)) throw Error("grad_check: step must be positive");
  Tensor analytic;
  {
    Graph g;
    Var x = g.input(point);
    Var y = f(g, x);
    analytic = g.backward(y)[x];
  }
  auto evaluate = [&](const Tensor& at) {
    Graph g;
    Var x = g.constant(at);
    return g.value(f(g, x)).item();
  };
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i : coordinates) {
    const double saved = probe[i];
    probe[i] = saved + step;
    const double up = evaluate(probe);
    probe[i] = saved - step;
    const double down = evaluate(probe);
    probe[i] = saved;
    const double fd = (up - down) / (2.0 * step);
    const double ad = analytic[i];
    worst = std::max(worst, std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd)));
  }
  return worst;
}

}  // namespace avsync
