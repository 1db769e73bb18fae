#include "parsearch/model.hpp"

#include "parsearch/error.hpp"

namespace parsearch {

TokenHead TokenHead::init(const ModelConfig& c, CounterRng& rng) {
  TokenHead h;
  h.embedding = Parameter{"embedding", Tensor({c.vocab_size, c.d_model}), {}};
  for (Scalar& v : h.embedding.value.values()) v = static_cast<Scalar>(0.02 * rng.next_normal());
  h.embedding.zero_grad();
  h.out_bias = Parameter{"out_bias", Tensor({c.vocab_size}), {}};
  h.out_bias.zero_grad();
  return h;
}

std::vector<Parameter*> TokenHead::parameters() { return {&embedding, &out_bias}; }

TokenHeadVars TokenHeadVars::bind(Graph& g, TokenHead& head, bool trainable) {
  return {g.param(head.embedding, trainable), g.param(head.out_bias, trainable)};
}

Var embed_tokens(const TokenHeadVars& head, std::span<const std::int32_t> ids) {
  return embedding_lookup(head.embedding, ids);
}

Var output_logits(Var hidden, const TokenHeadVars& head) {
  return add_bias(matmul_nt(hidden, head.embedding), head.out_bias);
}

TransformerLM::TransformerLM(ArchSpec spec, ModelConfig config, std::uint64_t seed)
    : spec_(std::move(spec)), config_(config) {
  config_.n_layers = spec_.size();
  config_.validate();
  CounterRng rng(seed, 1);
  head_ = TokenHead::init(config_, rng);
  for (std::size_t l = 0; l < spec_.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    switch (spec_[l]) {
      case BlockKind::SelfAttention: layers_.emplace_back(AttentionParams::init(config_, rng, prefix)); break;
      case BlockKind::FeedForward: layers_.emplace_back(FeedForwardParams::init(config_, rng, prefix)); break;
      case BlockKind::Identity: layers_.emplace_back(std::monostate{}); break;
    }
  }
}

TransformerLM::TransformerLM(ArchSpec spec, ModelConfig config, TokenHead head, std::vector<LayerParams> layers)
    : spec_(std::move(spec)), config_(config), head_(std::move(head)), layers_(std::move(layers)) {
  config_.n_layers = spec_.size();
  config_.validate();
  if (layers_.size() != spec_.size()) throw ContractError("TransformerLM: layer count does not match spec");
  for (std::size_t l = 0; l < spec_.size(); ++l) {
    const bool ok = (spec_[l] == BlockKind::SelfAttention && std::holds_alternative<AttentionParams>(layers_[l])) ||
                    (spec_[l] == BlockKind::FeedForward && std::holds_alternative<FeedForwardParams>(layers_[l])) ||
                    (spec_[l] == BlockKind::Identity && std::holds_alternative<std::monostate>(layers_[l]));
    if (!ok) throw ContractError("TransformerLM: layer " + std::to_string(l) + " parameters do not match spec");
  }
}

SegmentOutput TransformerLM::forward(Graph& g, std::span<const std::int32_t> inputs, const MemoryState& mem,
                                     const ForwardContext& ctx, bool trainable) {
  if (mem.layers.size() != layers_.size()) {
    throw DimensionError("TransformerLM::forward: memory has " + std::to_string(mem.layers.size()) +
                         " layers, model has " + std::to_string(layers_.size()));
  }
  TokenHeadVars head = TokenHeadVars::bind(g, head_, trainable);
  SegmentOutput out;
  Var x = embed_tokens(head, inputs);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    out.layer_inputs.push_back(x.value());
    if (auto* a = std::get_if<AttentionParams>(&layers_[l])) {
      x = attention_forward(x, mem.layers[l], AttentionVars::bind(g, *a, trainable), config_, ctx);
    } else if (auto* f = std::get_if<FeedForwardParams>(&layers_[l])) {
      x = feedforward_forward(x, FeedForwardVars::bind(g, *f, trainable), config_, ctx);
    } else {
      x = identity_forward(x);
    }
  }
  out.logits = output_logits(x, head);
  return out;
}

std::vector<Parameter*> TransformerLM::parameters() {
  std::vector<Parameter*> out = head_.parameters();
  for (LayerParams& layer : layers_) {
    if (auto* a = std::get_if<AttentionParams>(&layer)) {
      for (Parameter* p : a->parameters()) out.push_back(p);
    } else if (auto* f = std::get_if<FeedForwardParams>(&layer)) {
      for (Parameter* p : f->parameters()) out.push_back(p);
    }
  }
  return out;
}

std::size_t TransformerLM::parameter_count() {
  std::size_t n = 0;
  for (Parameter* p : parameters()) n += p->value.size();
  return n;
}

}  // namespace parsearch
