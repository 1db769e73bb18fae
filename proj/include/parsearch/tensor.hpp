#pragma once

// Dense tensors and a tape-based reverse-mode autodiff graph.
//
// Tensors are plain row-major value arrays. A Graph records every op executed
// through it; backward() walks the record once in reverse and accumulates
// gradients into graph leaves and bound Parameters. Graphs are rebuilt per
// step and confined to the thread that built them.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "parsearch/rng.hpp"

namespace parsearch {

#ifdef PARSEARCH_FLOAT32
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = 0);
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows);
  static Tensor vector(std::initializer_list<Scalar> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  // 2-D view: last axis is columns, everything before it folds into rows.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }
  Scalar& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Scalar at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  Tensor reshaped(Shape shape) const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  void fill(Scalar v);
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

// A trainable tensor owned by a model. Graphs read `value` and accumulate
// into `grad` during backward.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
};

class Graph;

class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Receives the gradient of the op output and must *accumulate* into each
// non-null parent gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Leaf whose gradient is readable through grad() after backward().
  Var input(Tensor value);
  // Leaf bound to a model parameter; an untrainable binding is a constant.
  Var param(Parameter& p, bool trainable = true);

  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op);

  void backward(Var root);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id()].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
    bool leaf = false;
    const char* op = "";
  };

  std::deque<Node> nodes_;
};

// Element-wise / structural ops. All operands must belong to the same graph.
Var add(Var a, Var b);
Var add_bias(Var x, Var bias);  // bias broadcast over rows
Var scale(Var x, Scalar s);
Var relu(Var x);
Var sum(Var x);
// Sum_i w[i] * xs[i]; w holds one weight per term.
Var mix(std::span<const Var> xs, Var w);

Var matmul(Var a, Var b);     // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T
Var transpose(Var x);
Var reshape(Var x, Shape shape);

Var concat_rows(std::span<const Var> parts);  // time axis
Var slice_rows(Var x, std::size_t start, std::size_t count);

Var layer_norm(Var x, Var gain, Var bias, Scalar eps);
Var softmax(Var x, std::size_t axis);
Var cross_entropy(Var logits, std::span<const std::int32_t> targets);
Var embedding_lookup(Var table, std::span<const std::int32_t> ids);
// Inverted dropout; identity when p == 0. Draws one uniform per element.
Var dropout(Var x, Scalar p, CounterRng& rng);

struct AttentionShape {
  std::size_t lanes = 1;     // independent sequences stacked along rows
  std::size_t tgt_len = 1;   // query rows per lane
  std::size_t mem_len = 0;   // cached rows per lane preceding the queries
  std::size_t n_head = 1;
  std::size_t d_head = 1;
  std::size_t clamp_len = 0;
};

// Multi-head causal attention core.
//   q: [lanes*tgt_len, n_head*d_head]
//   k, v: [lanes*(mem_len+tgt_len), n_head*d_head]
//   rel_bias: [n_head, >= clamp_len+1], or an invalid Var for none
// Query t of a lane sees every memory row and current rows <= t. The logit
// for key-to-query distance d gets rel_bias[h, min(d, clamp_len)] added after
// the 1/sqrt(d_head) scaling. `probs_out`, when given, receives the
// pre-dropout weights as [lanes*n_head*tgt_len, mem_len+tgt_len].
Var causal_attention(Var q, Var k, Var v, Var rel_bias, const AttentionShape& shape,
                     Scalar dropout_p, CounterRng* rng, Tensor* probs_out = nullptr);

// Compares reverse-mode gradients of scalar-valued `f` at `x` against central
// differences; returns the max element-wise relative error with denominator
// max(|a|, |b|, 1e-8).
using ScalarFn = std::function<Var(Graph&, Var)>;
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-6);

}  // namespace parsearch
