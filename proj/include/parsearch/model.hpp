#pragma once

// Fixed-architecture language model: token embedding, a stack of blocks
// chosen by an ArchSpec, and an output layer tied to the embedding.

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "parsearch/archspec.hpp"
#include "parsearch/blocks.hpp"
#include "parsearch/tensor.hpp"

namespace parsearch {

struct TokenHead {
  Parameter embedding;  // [vocab, d_model], shared with the output projection
  Parameter out_bias;   // [vocab]

  static TokenHead init(const ModelConfig& config, CounterRng& rng);
  std::vector<Parameter*> parameters();
};

struct TokenHeadVars {
  Var embedding, out_bias;
  static TokenHeadVars bind(Graph& g, TokenHead& head, bool trainable);
};

Var embed_tokens(const TokenHeadVars& head, std::span<const std::int32_t> ids);
Var output_logits(Var hidden, const TokenHeadVars& head);

// Result of one segment forward.
struct SegmentOutput {
  Var logits;                       // [lanes*T, vocab]
  std::vector<Tensor> layer_inputs; // per layer, what fed it (memory candidates)
};

using LayerParams = std::variant<std::monostate, AttentionParams, FeedForwardParams>;

class TransformerLM {
 public:
  // n_layers in `config` is overwritten with spec.size().
  TransformerLM(ArchSpec spec, ModelConfig config, std::uint64_t seed);
  TransformerLM(ArchSpec spec, ModelConfig config, TokenHead head, std::vector<LayerParams> layers);

  const ArchSpec& spec() const { return spec_; }
  const ModelConfig& config() const { return config_; }

  // `inputs` are lane-major ids of lanes*T tokens.
  SegmentOutput forward(Graph& g, std::span<const std::int32_t> inputs, const MemoryState& mem,
                        const ForwardContext& ctx, bool trainable);

  std::vector<Parameter*> parameters();
  TokenHead& head() { return head_; }
  std::vector<LayerParams>& layers() { return layers_; }
  std::size_t parameter_count();

 private:
  ArchSpec spec_;
  ModelConfig config_;
  TokenHead head_;
  std::vector<LayerParams> layers_;
};

}  // namespace parsearch
