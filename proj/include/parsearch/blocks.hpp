#pragma once

// The three per-layer candidates of the search space, each a map
// [lanes*T, d_model] -> [lanes*T, d_model]:
//
//   attention:    y = x + SelfAttention(LayerNorm(x))
//   feed-forward: y = x + FeedForward(LayerNorm(x))
//   identity:     y = x
//
// Attention keys/values also cover a detached per-layer memory of earlier
// segments, so lanes must be contiguous across calls.

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "parsearch/rng.hpp"
#include "parsearch/tensor.hpp"

namespace parsearch {

enum class BlockKind { SelfAttention = 0, FeedForward = 1, Identity = 2 };

inline constexpr std::array<BlockKind, 3> kAllBlockKinds{BlockKind::SelfAttention, BlockKind::FeedForward,
                                                         BlockKind::Identity};

char block_code(BlockKind kind);  // 's', 'f', 'i'
std::string block_name(BlockKind kind);

struct ModelConfig {
  std::size_t d_model = 512;
  std::size_t n_head = 8;
  std::size_t d_head = 64;
  std::size_t d_inner = 2048;
  std::size_t tgt_len = 192;
  std::size_t mem_len = 192;
  std::size_t clamp_len = 400;
  double dropout = 0.0;
  std::size_t vocab_size = 267735;
  std::size_t n_layers = 32;
  double layer_norm_eps = 1e-5;

  // Small enough to train on a CPU in minutes.
  static ModelConfig desk();

  std::size_t attn_width() const { return n_head * d_head; }
  void validate() const;  // throws ConfigError
};

struct AttentionParams {
  Parameter ln_gain, ln_bias;
  Parameter w_q, b_q;
  Parameter w_k;  // no key bias: it shifts every logit of a query row equally
  Parameter w_v, b_v;
  Parameter w_o, b_o;
  Parameter rel_bias;  // [n_head, clamp_len + 1]

  static AttentionParams init(const ModelConfig& config, CounterRng& rng, const std::string& prefix);
  std::vector<Parameter*> parameters();
  void zero_weights();
};

struct FeedForwardParams {
  Parameter ln_gain, ln_bias;
  Parameter w_1, b_1, w_2, b_2;

  static FeedForwardParams init(const ModelConfig& config, CounterRng& rng, const std::string& prefix);
  std::vector<Parameter*> parameters();
  void zero_weights();
};

// Parameters bound into one graph.
struct AttentionVars {
  Var ln_gain, ln_bias, w_q, b_q, w_k, w_v, b_v, w_o, b_o, rel_bias;
  static AttentionVars bind(Graph& g, AttentionParams& p, bool trainable);
};

struct FeedForwardVars {
  Var ln_gain, ln_bias, w_1, b_1, w_2, b_2;
  static FeedForwardVars bind(Graph& g, FeedForwardParams& p, bool trainable);
};

inline constexpr std::size_t kNoClampOverride = static_cast<std::size_t>(-1);

struct ForwardContext {
  std::size_t lanes = 1;
  bool training = false;
  CounterRng* rng = nullptr;                // dropout stream, used only when training
  Tensor* attention_probs = nullptr;        // optional capture of attention weights
  std::size_t clamp_len = kNoClampOverride; // evaluation-time clip distance
};

// `mem` holds lanes*M rows (M may be 0; an empty tensor means no memory).
Var attention_forward(Var x, const Tensor& mem, const AttentionVars& p, const ModelConfig& config,
                      const ForwardContext& ctx);
Var feedforward_forward(Var x, const FeedForwardVars& p, const ModelConfig& config, const ForwardContext& ctx);
inline Var identity_forward(Var x) { return x; }

// Last mem_len rows per lane of [mem ; new_hidden], as a plain (detached) tensor.
Tensor update_memory(const Tensor& mem, const Tensor& new_hidden, std::size_t lanes, std::size_t mem_len);

struct MemoryState {
  std::vector<Tensor> layers;  // each [lanes*length, d_model]
  std::size_t lanes = 1;
  std::size_t length = 0;

  static MemoryState empty(std::size_t n_layers, std::size_t lanes, std::size_t d_model);
  // `layer_inputs[l]` is the hidden stream that fed layer l this segment.
  void update(std::span<const Tensor> layer_inputs, std::size_t mem_len);
  void clear();
};

}  // namespace parsearch
