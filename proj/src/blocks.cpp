#include "parsearch/blocks.hpp"

#include <algorithm>

#include "parsearch/error.hpp"

namespace parsearch {

char block_code(BlockKind kind) {
  switch (kind) {
    case BlockKind::SelfAttention: return 's';
    case BlockKind::FeedForward: return 'f';
    case BlockKind::Identity: return 'i';
  }
  return '?';
}

std::string block_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::SelfAttention: return "attention";
    case BlockKind::FeedForward: return "feed_forward";
    case BlockKind::Identity: return "identity";
  }
  return "unknown";
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.d_model = 32;
  c.n_head = 2;
  c.d_head = 16;
  c.d_inner = 64;
  c.tgt_len = 32;
  c.mem_len = 32;
  c.clamp_len = 32;
  c.vocab_size = 32;
  c.n_layers = 8;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be >= 1");
  };
  positive(d_model, "d_model");
  positive(n_head, "n_head");
  positive(d_head, "d_head");
  positive(d_inner, "d_inner");
  positive(tgt_len, "tgt_len");
  positive(vocab_size, "vocab_size");
  positive(n_layers, "n_layers");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("dropout must be in [0, 1)");
  if (!(layer_norm_eps > 0)) throw ConfigError("layer_norm_eps must be positive");
}

namespace {

Parameter normal_param(std::string name, Shape shape, CounterRng& rng, double stddev) {
  Parameter p{std::move(name), Tensor(std::move(shape)), {}};
  for (Scalar& v : p.value.values()) v = static_cast<Scalar>(stddev * rng.next_normal());
  p.zero_grad();
  return p;
}

Parameter const_param(std::string name, Shape shape, Scalar fill) {
  Parameter p{std::move(name), Tensor(std::move(shape), fill), {}};
  p.zero_grad();
  return p;
}

constexpr double kInitStd = 0.02;

}  // namespace

AttentionParams AttentionParams::init(const ModelConfig& c, CounterRng& rng, const std::string& prefix) {
  const std::size_t d = c.d_model, hd = c.attn_width();
  AttentionParams p;
  p.ln_gain = const_param(prefix + "ln_gain", {d}, 1);
  p.ln_bias = const_param(prefix + "ln_bias", {d}, 0);
  p.w_q = normal_param(prefix + "w_q", {d, hd}, rng, kInitStd);
  p.b_q = const_param(prefix + "b_q", {hd}, 0);
  p.w_k = normal_param(prefix + "w_k", {d, hd}, rng, kInitStd);
  p.w_v = normal_param(prefix + "w_v", {d, hd}, rng, kInitStd);
  p.b_v = const_param(prefix + "b_v", {hd}, 0);
  p.w_o = normal_param(prefix + "w_o", {hd, d}, rng, kInitStd);
  p.b_o = const_param(prefix + "b_o", {d}, 0);
  p.rel_bias = const_param(prefix + "rel_bias", {c.n_head, c.clamp_len + 1}, 0);
  return p;
}

std::vector<Parameter*> AttentionParams::parameters() {
  return {&ln_gain, &ln_bias, &w_q, &b_q, &w_k, &w_v, &b_v, &w_o, &b_o, &rel_bias};
}

void AttentionParams::zero_weights() {
  for (Parameter* p : {&w_q, &b_q, &w_k, &w_v, &b_v, &w_o, &b_o, &rel_bias}) p->value.fill(0);
}

FeedForwardParams FeedForwardParams::init(const ModelConfig& c, CounterRng& rng, const std::string& prefix) {
  const std::size_t d = c.d_model;
  FeedForwardParams p;
  p.ln_gain = const_param(prefix + "ln_gain", {d}, 1);
  p.ln_bias = const_param(prefix + "ln_bias", {d}, 0);
  p.w_1 = normal_param(prefix + "w_1", {d, c.d_inner}, rng, kInitStd);
  p.b_1 = const_param(prefix + "b_1", {c.d_inner}, 0);
  p.w_2 = normal_param(prefix + "w_2", {c.d_inner, d}, rng, kInitStd);
  p.b_2 = const_param(prefix + "b_2", {d}, 0);
  return p;
}

std::vector<Parameter*> FeedForwardParams::parameters() { return {&ln_gain, &ln_bias, &w_1, &b_1, &w_2, &b_2}; }

void FeedForwardParams::zero_weights() {
  for (Parameter* p : {&w_1, &b_1, &w_2, &b_2}) p->value.fill(0);
}

AttentionVars AttentionVars::bind(Graph& g, AttentionParams& p, bool trainable) {
  return {g.param(p.ln_gain, trainable), g.param(p.ln_bias, trainable), g.param(p.w_q, trainable),
          g.param(p.b_q, trainable),     g.param(p.w_k, trainable),     g.param(p.w_v, trainable),
          g.param(p.b_v, trainable),     g.param(p.w_o, trainable),     g.param(p.b_o, trainable),
          g.param(p.rel_bias, trainable)};
}

FeedForwardVars FeedForwardVars::bind(Graph& g, FeedForwardParams& p, bool trainable) {
  return {g.param(p.ln_gain, trainable), g.param(p.ln_bias, trainable), g.param(p.w_1, trainable),
          g.param(p.b_1, trainable),     g.param(p.w_2, trainable),     g.param(p.b_2, trainable)};
}

namespace {

std::size_t lane_rows(const Tensor& x, std::size_t lanes, const ModelConfig& c, const char* op) {
  if (x.rank() != 2 || x.cols() != c.d_model) {
    throw DimensionError(std::string(op) + ": input " + shape_string(x.shape()) + " lacks d_model=" +
                         std::to_string(c.d_model) + " columns");
  }
  if (lanes == 0 || x.rows() % lanes != 0 || x.rows() == 0) {
    throw DimensionError(std::string(op) + ": " + std::to_string(x.rows()) + " rows do not split into " +
                         std::to_string(lanes) + " lanes");
  }
  return x.rows() / lanes;
}

}  // namespace

Var attention_forward(Var x, const Tensor& mem, const AttentionVars& p, const ModelConfig& c,
                      const ForwardContext& ctx) {
  Graph& g = x.graph();
  const std::size_t lanes = ctx.lanes;
  const std::size_t t_len = lane_rows(x.value(), lanes, c, "attention_forward");
  std::size_t m_len = 0;
  if (!mem.empty()) {
    if (mem.rank() != 2 || mem.cols() != c.d_model || mem.rows() % lanes != 0) {
      throw DimensionError("attention_forward: memory " + shape_string(mem.shape()) + " incompatible with d_model=" +
                           std::to_string(c.d_model) + " over " + std::to_string(lanes) + " lanes");
    }
    m_len = mem.rows() / lanes;
  }
  const Scalar eps = static_cast<Scalar>(c.layer_norm_eps);

  Var hx = layer_norm(x, p.ln_gain, p.ln_bias, eps);
  Var context = hx;
  if (m_len > 0) {
    Var hm = layer_norm(g.constant(mem), p.ln_gain, p.ln_bias, eps);
    std::vector<Var> parts;
    parts.reserve(2 * lanes);
    for (std::size_t b = 0; b < lanes; ++b) {
      parts.push_back(slice_rows(hm, b * m_len, m_len));
      parts.push_back(slice_rows(hx, b * t_len, t_len));
    }
    context = concat_rows(parts);
  }

  Var q = add_bias(matmul(hx, p.w_q), p.b_q);
  Var k = matmul(context, p.w_k);
  Var v = add_bias(matmul(context, p.w_v), p.b_v);

  // The clip distance may be lowered at evaluation time, never raised past
  // the trained table.
  const std::size_t wanted = ctx.clamp_len == kNoClampOverride ? c.clamp_len : ctx.clamp_len;
  const std::size_t clamp = std::min(wanted, p.rel_bias.value().cols() - 1);
  AttentionShape shape{lanes, t_len, m_len, c.n_head, c.d_head, clamp};
  const Scalar drop = ctx.training ? static_cast<Scalar>(c.dropout) : Scalar(0);
  Var a = causal_attention(q, k, v, p.rel_bias, shape, drop, ctx.rng, ctx.attention_probs);
  Var out = add_bias(matmul(a, p.w_o), p.b_o);
  return add(x, out);
}

Var feedforward_forward(Var x, const FeedForwardVars& p, const ModelConfig& c, const ForwardContext& ctx) {
  lane_rows(x.value(), ctx.lanes, c, "feedforward_forward");
  const Scalar drop = ctx.training && ctx.rng ? static_cast<Scalar>(c.dropout) : Scalar(0);
  Var h = layer_norm(x, p.ln_gain, p.ln_bias, static_cast<Scalar>(c.layer_norm_eps));
  Var u = relu(add_bias(matmul(h, p.w_1), p.b_1));
  if (drop > 0) u = dropout(u, drop, *ctx.rng);
  Var y = add_bias(matmul(u, p.w_2), p.b_2);
  if (drop > 0) y = dropout(y, drop, *ctx.rng);
  return add(x, y);
}

Tensor update_memory(const Tensor& mem, const Tensor& new_hidden, std::size_t lanes, std::size_t mem_len) {
  const std::size_t d = new_hidden.cols();
  if (lanes == 0 || new_hidden.rows() % lanes != 0) {
    throw DimensionError("update_memory: " + shape_string(new_hidden.shape()) + " does not split into " +
                         std::to_string(lanes) + " lanes");
  }
  const std::size_t t_len = new_hidden.rows() / lanes;
  std::size_t m_len = 0;
  if (!mem.empty()) {
    if (mem.cols() != d || mem.rows() % lanes != 0) {
      throw DimensionError("update_memory: memory " + shape_string(mem.shape()) + " vs new rows " +
                           shape_string(new_hidden.shape()));
    }
    m_len = mem.rows() / lanes;
  }
  const std::size_t keep = std::min(mem_len, m_len + t_len);
  Tensor out({lanes * keep, d});
  for (std::size_t b = 0; b < lanes; ++b) {
    // Row r of the lane's [mem ; new] stream, keeping the trailing `keep`.
    for (std::size_t r = 0; r < keep; ++r) {
      const std::size_t src = m_len + t_len - keep + r;
      const Scalar* from = src < m_len ? mem.data() + (b * m_len + src) * d
                                       : new_hidden.data() + (b * t_len + src - m_len) * d;
      std::copy(from, from + d, out.data() + (b * keep + r) * d);
    }
  }
  return out;
}

MemoryState MemoryState::empty(std::size_t n_layers, std::size_t lanes, std::size_t d_model) {
  MemoryState m;
  m.lanes = lanes;
  m.layers.assign(n_layers, Tensor({0, d_model}));
  return m;
}

void MemoryState::update(std::span<const Tensor> layer_inputs, std::size_t mem_len) {
  if (layer_inputs.size() != layers.size()) {
    throw DimensionError("MemoryState::update: " + std::to_string(layer_inputs.size()) + " inputs for " +
                         std::to_string(layers.size()) + " layers");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l] = update_memory(layers[l], layer_inputs[l], lanes, mem_len);
  }
  length = layers.empty() ? 0 : layers[0].rows() / lanes;
}

void MemoryState::clear() {
  for (Tensor& t : layers) t = Tensor({0, t.cols()});
  length = 0;
}

}  // namespace parsearch
