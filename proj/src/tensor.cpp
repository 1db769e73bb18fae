#include "parsearch/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include "parsearch/error.hpp"

namespace parsearch {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<Scalar>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<Scalar> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<Scalar> values) {
  return Tensor({values.size()}, std::vector<Scalar>(values));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void Tensor::fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0);
  }
}

const Tensor& Var::value() const { return graph_->value(*this); }

// ---------------------------------------------------------------------------
// Graph

Var Graph::constant(Tensor value) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.leaf = true;
  n.op = "constant";
  return Var(this, nodes_.size() - 1);
}

Var Graph::input(Tensor value) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.leaf = true;
  n.requires_grad = true;
  n.op = "input";
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(Parameter& p, bool trainable) {
  Node& n = nodes_.emplace_back();
  n.value = p.value;
  n.leaf = true;
  n.requires_grad = trainable;
  n.param = trainable ? &p : nullptr;
  n.op = "param";
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op) {
  if (!value.all_finite()) {
    throw NumericError(std::string("op '") + op + "' produced a non-finite value");
  }
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.op = op;
  n.parents.reserve(parents.size());
  for (const Var& p : parents) {
    if (&p.graph() != this) throw ContractError(std::string("op '") + op + "' mixes graphs");
    n.parents.push_back(p.id());
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var root) {
  if (&root.graph() != this) throw ContractError("backward root belongs to another graph");
  Node& r = nodes_[root.id()];
  if (r.value.size() != 1) {
    throw ContractError("backward needs a scalar root, got " + shape_string(r.value.shape()));
  }
  if (!r.requires_grad) return;
  r.grad = Tensor(r.value.shape(), 1);

  std::vector<Tensor*> grad_in;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      grad_in.assign(n.parents.size(), nullptr);
      for (std::size_t j = 0; j < n.parents.size(); ++j) {
        Node& p = nodes_[n.parents[j]];
        if (!p.requires_grad) continue;
        if (p.grad.empty()) p.grad = Tensor(p.value.shape());
        grad_in[j] = &p.grad;
      }
      n.backward(n.grad, grad_in);
    }
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
      for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
    }
  }
  for (Node& n : nodes_) {
    if (n.leaf && n.requires_grad && n.grad.empty()) n.grad = Tensor(n.value.shape());
  }
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const Scalar* a, const Scalar* b, Scalar* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* ci = c + i * n;
    const Scalar* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar av = ai[p];
      const Scalar* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const Scalar* a, const Scalar* b, Scalar* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Scalar* bj = b + j * k;
      Scalar acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(const Scalar* a, const Scalar* b, Scalar* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const Scalar* ap = a + p * m;
    const Scalar* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const Scalar av = ap[i];
      Scalar* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Ops

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape("add", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.graph().record(std::move(out), {a, b},
                          [](const Tensor& g, std::span<Tensor* const> in) {
                            for (Tensor* t : in) {
                              if (!t) continue;
                              for (std::size_t i = 0; i < g.size(); ++i) (*t)[i] += g[i];
                            }
                          },
                          "add");
}

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  const std::size_t cols = xv.cols();
  if (bv.size() != cols) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " does not match " +
                         shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += bv[c];
  }
  return x.graph().record(std::move(out), {x, bias},
                          [cols](const Tensor& g, std::span<Tensor* const> in) {
                            if (in[0]) {
                              for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                            }
                            if (in[1]) {
                              for (std::size_t r = 0; r < g.rows(); ++r) {
                                for (std::size_t c = 0; c < cols; ++c) (*in[1])[c] += g.at(r, c);
                              }
                            }
                          },
                          "add_bias");
}

Var scale(Var x, Scalar s) {
  Tensor out = x.value();
  for (Scalar& v : out.values()) v *= s;
  return x.graph().record(std::move(out), {x},
                          [s](const Tensor& g, std::span<Tensor* const> in) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += s * g[i];
                          },
                          "scale");
}

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out = xv;
  for (Scalar& v : out.values()) v = v > 0 ? v : Scalar(0);
  return x.graph().record(std::move(out), {x},
                          [&xv](const Tensor& g, std::span<Tensor* const> in) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              if (xv[i] > 0) (*in[0])[i] += g[i];
                            }
                          },
                          "relu");
}

Var sum(Var x) {
  long double acc = 0;
  for (Scalar v : x.value().values()) acc += v;
  Tensor out({1}, static_cast<Scalar>(acc));
  return x.graph().record(std::move(out), {x},
                          [](const Tensor& g, std::span<Tensor* const> in) {
                            for (Scalar& v : in[0]->values()) v += g[0];
                          },
                          "sum");
}

Var mix(std::span<const Var> xs, Var w) {
  if (xs.empty()) throw ContractError("mix: no terms");
  const Tensor& wv = w.value();
  if (wv.size() != xs.size()) {
    throw DimensionError("mix: " + std::to_string(xs.size()) + " terms but weights " +
                         shape_string(wv.shape()));
  }
  const Tensor& first = xs[0].value();
  Tensor out(first.shape());
  std::vector<Var> parents(xs.begin(), xs.end());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor& xi = xs[i].value();
    require_same_shape("mix", first, xi);
    const Scalar wi = wv[i];
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += wi * xi[k];
  }
  parents.push_back(w);
  std::vector<const Tensor*> terms;
  for (const Var& x : xs) terms.push_back(&x.value());
  return w.graph().record(std::move(out), std::move(parents),
                          [terms, &wv](const Tensor& g, std::span<Tensor* const> in) {
                            const std::size_t n = terms.size();
                            for (std::size_t i = 0; i < n; ++i) {
                              if (in[i]) {
                                for (std::size_t k = 0; k < g.size(); ++k) (*in[i])[k] += wv[i] * g[k];
                              }
                              if (in[n]) {
                                Scalar acc = 0;
                                for (std::size_t k = 0; k < g.size(); ++k) acc += g[k] * (*terms[i])[k];
                                (*in[n])[i] += acc;
                              }
                            }
                          },
                          "mix");
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(av.shape()) + " by " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  return a.graph().record(std::move(out), {a, b},
                          [&av, &bv, m, k, n](const Tensor& g, std::span<Tensor* const> in) {
                            if (in[0]) gemm_nt(g.data(), bv.data(), in[0]->data(), m, n, k);
                            if (in[1]) gemm_tn(av.data(), g.data(), in[1]->data(), k, m, n);
                          },
                          "matmul");
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw DimensionError("matmul_nt: cannot multiply " + shape_string(av.shape()) + " by transpose of " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor out({m, n});
  gemm_nt(av.data(), bv.data(), out.data(), m, k, n);
  return a.graph().record(std::move(out), {a, b},
                          [&av, &bv, m, k, n](const Tensor& g, std::span<Tensor* const> in) {
                            // dA = G B, dB = G^T A
                            if (in[0]) gemm_nn(g.data(), bv.data(), in[0]->data(), m, n, k);
                            if (in[1]) gemm_tn(g.data(), av.data(), in[1]->data(), n, m, k);
                          },
                          "matmul_nt");
}

Var transpose(Var x) {
  const Tensor& xv = x.value();
  require_matrix("transpose", xv);
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = xv.at(i, j);
  }
  return x.graph().record(std::move(out), {x},
                          [r, c](const Tensor& g, std::span<Tensor* const> in) {
                            for (std::size_t i = 0; i < r; ++i) {
                              for (std::size_t j = 0; j < c; ++j) in[0]->at(i, j) += g.at(j, i);
                            }
                          },
                          "transpose");
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.graph().record(std::move(out), {x},
                          [](const Tensor& g, std::span<Tensor* const> in) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                          },
                          "reshape");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    if (t.rank() != 2 || t.cols() != cols) {
      throw DimensionError("concat_rows: part " + shape_string(t.shape()) + " does not have " +
                           std::to_string(cols) + " columns");
    }
    offsets.push_back(rows * cols);
    rows += t.rows();
  }
  Tensor out({rows, cols});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& t = parts[i].value();
    std::copy(t.data(), t.data() + t.size(), out.data() + offsets[i]);
  }
  return parts[0].graph().record(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                                 [offsets](const Tensor& g, std::span<Tensor* const> in) {
                                   for (std::size_t i = 0; i < in.size(); ++i) {
                                     if (!in[i]) continue;
                                     const Scalar* src = g.data() + offsets[i];
                                     for (std::size_t k = 0; k < in[i]->size(); ++k) (*in[i])[k] += src[k];
                                   }
                                 },
                                 "concat_rows");
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  require_matrix("slice_rows", xv);
  if (start + count > xv.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of " + shape_string(xv.shape()));
  }
  const std::size_t cols = xv.cols();
  Tensor out({count, cols});
  std::copy(xv.data() + start * cols, xv.data() + (start + count) * cols, out.data());
  return x.graph().record(std::move(out), {x},
                          [start, cols](const Tensor& g, std::span<Tensor* const> in) {
                            Scalar* dst = in[0]->data() + start * cols;
                            for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
                          },
                          "slice_rows");
}

Var layer_norm(Var x, Var gain, Var bias, Scalar eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (xv.rank() == 0 || d == 0) throw DimensionError("layer_norm: empty last dimension");
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.value().shape()) + "/" +
                         shape_string(bias.value().shape()) + " do not match last dim of " +
                         shape_string(xv.shape()));
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  const std::size_t rows = xv.rows();
  Tensor out(xv.shape());
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto rstd = std::make_shared<std::vector<Scalar>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* xr = xv.data() + r * d;
    Scalar mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<Scalar>(d);
    const Scalar s = Scalar(1) / std::sqrt(var + eps);
    (*rstd)[r] = s;
    for (std::size_t c = 0; c < d; ++c) {
      const Scalar h = (xr[c] - mean) * s;
      xhat->at(r, c) = h;
      out.at(r, c) = h * gv[c] + bv[c];
    }
  }
  return x.graph().record(
      std::move(out), {x, gain, bias},
      [xhat, rstd, &gv, d, rows](const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t r = 0; r < rows; ++r) {
          const Scalar* gr = g.data() + r * d;
          const Scalar* hr = xhat->data() + r * d;
          if (in[1]) {
            for (std::size_t c = 0; c < d; ++c) (*in[1])[c] += gr[c] * hr[c];
          }
          if (in[2]) {
            for (std::size_t c = 0; c < d; ++c) (*in[2])[c] += gr[c];
          }
          if (in[0]) {
            Scalar mean_dh = 0, mean_dh_h = 0;
            for (std::size_t c = 0; c < d; ++c) {
              const Scalar dh = gr[c] * gv[c];
              mean_dh += dh;
              mean_dh_h += dh * hr[c];
            }
            mean_dh /= static_cast<Scalar>(d);
            mean_dh_h /= static_cast<Scalar>(d);
            Scalar* dx = in[0]->data() + r * d;
            for (std::size_t c = 0; c < d; ++c) {
              dx[c] += (*rstd)[r] * (gr[c] * gv[c] - mean_dh - hr[c] * mean_dh_h);
            }
          }
        }
      },
      "layer_norm");
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(xv.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  const std::size_t n = xv.dim(axis);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      Scalar total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const Scalar e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  auto y = std::make_shared<Tensor>(out);
  return x.graph().record(
      std::move(out), {x},
      [y, outer, inner, n](const Tensor& g, std::span<Tensor* const> in) {
        const Tensor& yv = *y;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            Scalar dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += yv[base + j * inner] * g[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              (*in[0])[base + j * inner] += yv[base + j * inner] * (g[base + j * inner] - dot);
            }
          }
        }
      },
      "softmax");
}

Var cross_entropy(Var logits, std::span<const std::int32_t> targets) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_string(lv.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t t_count = lv.dim(0), vocab = lv.dim(1);
  if (t_count == 0) throw DimensionError("cross_entropy: no targets");
  auto probs = std::make_shared<Tensor>(lv.shape());
  long double total = 0;
  for (std::size_t t = 0; t < t_count; ++t) {
    const std::int32_t y = targets[t];
    if (y < 0 || static_cast<std::size_t>(y) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(y) + " at position " + std::to_string(t) +
                       " outside [0, " + std::to_string(vocab) + ")");
    }
    const Scalar* row = lv.data() + t * vocab;
    Scalar mx = *std::max_element(row, row + vocab);
    Scalar z = 0;
    for (std::size_t v = 0; v < vocab; ++v) {
      const Scalar e = std::exp(row[v] - mx);
      probs->at(t, v) = e;
      z += e;
    }
    for (std::size_t v = 0; v < vocab; ++v) probs->at(t, v) /= z;
    total += std::log(z) + mx - row[y];
  }
  Tensor out({1}, static_cast<Scalar>(total / static_cast<long double>(t_count)));
  std::vector<std::int32_t> ys(targets.begin(), targets.end());
  return logits.graph().record(
      std::move(out), {logits},
      [probs, ys = std::move(ys), vocab](const Tensor& g, std::span<Tensor* const> in) {
        const Scalar s = g[0] / static_cast<Scalar>(ys.size());
        for (std::size_t t = 0; t < ys.size(); ++t) {
          Scalar* dst = in[0]->data() + t * vocab;
          const Scalar* p = probs->data() + t * vocab;
          for (std::size_t v = 0; v < vocab; ++v) dst[v] += s * p[v];
          dst[ys[t]] -= s;
        }
      },
      "cross_entropy");
}

Var embedding_lookup(Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = table.value();
  require_matrix("embedding_lookup", tv);
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int32_t id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " at position " + std::to_string(i) +
                       " outside [0, " + std::to_string(vocab) + ")");
    }
    std::copy(tv.data() + id * d, tv.data() + (id + 1) * d, out.data() + i * d);
  }
  std::vector<std::int32_t> keep(ids.begin(), ids.end());
  return table.graph().record(std::move(out), {table},
                              [keep = std::move(keep), d](const Tensor& g, std::span<Tensor* const> in) {
                                for (std::size_t i = 0; i < keep.size(); ++i) {
                                  Scalar* dst = in[0]->data() + keep[i] * d;
                                  const Scalar* src = g.data() + i * d;
                                  for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                                }
                              },
                              "embedding_lookup");
}

Var dropout(Var x, Scalar p, CounterRng& rng) {
  if (p < 0 || p >= 1) throw ContractError("dropout: probability must be in [0, 1)");
  if (p == 0) return x;
  const Tensor& xv = x.value();
  auto mask = std::make_shared<std::vector<Scalar>>(xv.size());
  const Scalar keep_scale = Scalar(1) / (Scalar(1) - p);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = rng.next_uniform() < p ? Scalar(0) : keep_scale;
    out[i] = xv[i] * (*mask)[i];
  }
  return x.graph().record(std::move(out), {x},
                          [mask](const Tensor& g, std::span<Tensor* const> in) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * (*mask)[i];
                          },
                          "dropout");
}

Var causal_attention(Var q, Var k, Var v, Var rel_bias, const AttentionShape& s, Scalar dropout_p,
                     CounterRng* rng, Tensor* probs_out) {
  const std::size_t hd = s.n_head * s.d_head;
  const std::size_t klen = s.mem_len + s.tgt_len;
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.rank() != 2 || qv.dim(0) != s.lanes * s.tgt_len || qv.dim(1) != hd) {
    throw DimensionError("causal_attention: queries " + shape_string(qv.shape()) + " expected [" +
                         std::to_string(s.lanes * s.tgt_len) + "x" + std::to_string(hd) + "]");
  }
  const Shape kv_shape{s.lanes * klen, hd};
  if (kv.shape() != kv_shape || vv.shape() != kv_shape) {
    throw DimensionError("causal_attention: keys " + shape_string(kv.shape()) + " / values " +
                         shape_string(vv.shape()) + " expected " + shape_string(kv_shape));
  }
  const bool has_bias = rel_bias.valid();
  const Tensor* bv = has_bias ? &rel_bias.value() : nullptr;
  if (has_bias && (bv->rank() != 2 || bv->dim(0) != s.n_head || bv->dim(1) < s.clamp_len + 1)) {
    throw DimensionError("causal_attention: relative bias " + shape_string(bv->shape()) + " needs " +
                         std::to_string(s.n_head) + " rows and >= " + std::to_string(s.clamp_len + 1) + " columns");
  }
  if (dropout_p < 0 || dropout_p >= 1) throw ContractError("causal_attention: dropout must be in [0, 1)");
  const bool use_dropout = dropout_p > 0 && rng != nullptr;

  const Scalar scale_factor = Scalar(1) / std::sqrt(static_cast<Scalar>(s.d_head));
  const std::size_t rows = s.lanes * s.n_head * s.tgt_len;
  auto probs = std::make_shared<Tensor>(Shape{rows, klen});
  auto mask = use_dropout ? std::make_shared<Tensor>(Shape{rows, klen}) : nullptr;
  const Scalar keep_scale = use_dropout ? Scalar(1) / (Scalar(1) - dropout_p) : Scalar(1);
  Tensor out({s.lanes * s.tgt_len, hd});

  for (std::size_t b = 0; b < s.lanes; ++b) {
    for (std::size_t h = 0; h < s.n_head; ++h) {
      for (std::size_t t = 0; t < s.tgt_len; ++t) {
        const std::size_t row = (b * s.n_head + h) * s.tgt_len + t;
        Scalar* p = probs->data() + row * klen;
        const Scalar* qr = qv.data() + (b * s.tgt_len + t) * hd + h * s.d_head;
        const std::size_t visible = s.mem_len + t + 1;
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          const Scalar* kr = kv.data() + (b * klen + j) * hd + h * s.d_head;
          Scalar dot = 0;
          for (std::size_t c = 0; c < s.d_head; ++c) dot += qr[c] * kr[c];
          Scalar logit = dot * scale_factor;
          if (has_bias) logit += bv->at(h, std::min(visible - 1 - j, s.clamp_len));
          p[j] = logit;
          mx = std::max(mx, logit);
        }
        Scalar total = 0;
        for (std::size_t j = 0; j < visible; ++j) {
          p[j] = std::exp(p[j] - mx);
          total += p[j];
        }
        for (std::size_t j = 0; j < visible; ++j) p[j] /= total;
        Scalar* o = out.data() + (b * s.tgt_len + t) * hd + h * s.d_head;
        for (std::size_t j = 0; j < visible; ++j) {
          Scalar w = p[j];
          if (use_dropout) {
            const Scalar m = rng->next_uniform() < dropout_p ? Scalar(0) : keep_scale;
            mask->at(row, j) = m;
            w *= m;
          }
          const Scalar* vr = vv.data() + (b * klen + j) * hd + h * s.d_head;
          for (std::size_t c = 0; c < s.d_head; ++c) o[c] += w * vr[c];
        }
      }
    }
  }
  if (probs_out != nullptr) *probs_out = *probs;

  std::vector<Var> parents{q, k, v};
  if (has_bias) parents.push_back(rel_bias);
  return q.graph().record(
      std::move(out), std::move(parents),
      [probs, mask, s, hd, klen, scale_factor, has_bias, &qv, &kv, &vv](const Tensor& g,
                                                                         std::span<Tensor* const> in) {
        std::vector<Scalar> dp(klen);
        for (std::size_t b = 0; b < s.lanes; ++b) {
          for (std::size_t h = 0; h < s.n_head; ++h) {
            for (std::size_t t = 0; t < s.tgt_len; ++t) {
              const std::size_t row = (b * s.n_head + h) * s.tgt_len + t;
              const Scalar* p = probs->data() + row * klen;
              const std::size_t visible = s.mem_len + t + 1;
              const std::size_t qoff = (b * s.tgt_len + t) * hd + h * s.d_head;
              const Scalar* go = g.data() + qoff;
              // Through the weighted sum of values.
              Scalar dot = 0;
              for (std::size_t j = 0; j < visible; ++j) {
                const std::size_t koff = (b * klen + j) * hd + h * s.d_head;
                const Scalar m = mask ? mask->at(row, j) : Scalar(1);
                Scalar acc = 0;
                for (std::size_t c = 0; c < s.d_head; ++c) acc += go[c] * vv[koff + c];
                dp[j] = acc * m;
                dot += p[j] * dp[j];
                if (in[2]) {
                  const Scalar w = p[j] * m;
                  for (std::size_t c = 0; c < s.d_head; ++c) (*in[2])[koff + c] += w * go[c];
                }
              }
              // Through the softmax into logits.
              for (std::size_t j = 0; j < visible; ++j) {
                const Scalar dlogit = p[j] * (dp[j] - dot);
                if (has_bias && in[3]) in[3]->at(h, std::min(visible - 1 - j, s.clamp_len)) += dlogit;
                const Scalar dscaled = dlogit * scale_factor;
                const std::size_t koff = (b * klen + j) * hd + h * s.d_head;
                if (in[0]) {
                  for (std::size_t c = 0; c < s.d_head; ++c) (*in[0])[qoff + c] += dscaled * kv[koff + c];
                }
                if (in[1]) {
                  for (std::size_t c = 0; c < s.d_head; ++c) (*in[1])[koff + c] += dscaled * qv[qoff + c];
                }
              }
            }
          }
        }
      },
      "causal_attention");
}

// ---------------------------------------------------------------------------

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  Tensor analytic;
  {
    Graph g;
    Var xi = g.input(x);
    Var y = f(g, xi);
    if (y.value().size() != 1) {
      throw ContractError("grad_check: f must be scalar-valued, got " + shape_string(y.value().shape()));
    }
    g.backward(y);
    analytic = g.grad(xi);
  }
  auto eval = [&](const Tensor& at) {
    Graph g;
    return static_cast<double>(f(g, g.constant(at)).value()[0]);
  };
  double worst = 0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Scalar orig = probe[i];
    const Scalar hi = orig + static_cast<Scalar>(eps);
    const Scalar lo = orig - static_cast<Scalar>(eps);
    probe[i] = hi;
    const double up = eval(probe);
    probe[i] = lo;
    const double down = eval(probe);
    probe[i] = orig;
    // Divide by the step actually representable, not the nominal 2*eps.
    const double numeric = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace parsearch
