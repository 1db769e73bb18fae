#pragma once

// Searchable network. Every layer owns one attention block, one feed-forward
// block and (implicitly) the identity, plus a row of three architecture
// logits. In mixed mode layer l computes
//
//   X^l = sum_i m[l,i] * F_i(X^{l-1}),   m[l,:] = softmax((theta[l,:] + g) / tau)
//
// with Gumbel noise g drawn fresh per step. In one-hot mode only the block
// named by a given ArchSpec runs.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "parsearch/archspec.hpp"
#include "parsearch/blocks.hpp"
#include "parsearch/model.hpp"
#include "parsearch/rng.hpp"
#include "parsearch/tensor.hpp"

namespace parsearch {

// Deterministic annealing of the Gumbel-Softmax temperature.
struct GumbelConfig {
  double tau_start = 5.0;
  double tau_end = 0.5;
  std::uint64_t rng_seed = 0;

  // Exponential interpolation; progress is clamped to [0, 1].
  double tau_at(double progress) const;
  void validate() const;
};

// Gumbel(0, 1) draws for one layer, keyed by (rng, counter).
std::array<Scalar, 3> gumbel_noise(const CounterRng& rng, std::uint64_t counter);

// Value-level Gumbel-Softmax; draws its noise from `rng`.
std::array<Scalar, 3> gumbel_softmax(const std::array<Scalar, 3>& logits, Scalar tau, CounterRng& rng);

// Differentiable in `theta_row` ([1, 3]); the noise is a constant.
Var gumbel_mix(Var theta_row, Scalar tau, const std::array<Scalar, 3>& noise);

struct SampledArch {
  ArchSpec spec;
  bool unconverged = false;  // some layer had a tied maximum
};

// Per-layer argmax, ties resolved attention > feed-forward > identity.
SampledArch sample_architecture(const Tensor& theta);

// True iff the trailing ceil(0.75 * stage_steps) snapshots are identical.
// stage_steps defaults to history.size().
bool convergence_check(std::span<const ArchSpec> history, std::optional<std::size_t> stage_steps = std::nullopt);

enum class MixMode { Mixed, OneHot };

struct SupernetOptions {
  MixMode mode = MixMode::Mixed;
  const ArchSpec* spec = nullptr;     // required for OneHot
  Scalar tau = 1;
  const CounterRng* noise_rng = nullptr;
  std::uint64_t noise_counter = 0;    // per-step key into noise_rng
  const Tensor* noise_override = nullptr;  // [L, 3] fixed noise, for tests
  bool train_weights = true;
  bool train_theta = true;
  Tensor* mix_weights_out = nullptr;  // receives [L, 3] mixing weights
};

class SuperNet {
 public:
  SuperNet(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::size_t n_layers() const { return config_.n_layers; }

  SegmentOutput forward(Graph& g, std::span<const std::int32_t> inputs, const MemoryState& mem,
                        const ForwardContext& ctx, const SupernetOptions& options);

  // Standalone model sharing (copies of) this supernet's weights.
  TransformerLM extract(const ArchSpec& spec) const;

  Parameter& theta() { return theta_; }
  const Parameter& theta() const { return theta_; }
  std::vector<Parameter*> weight_parameters();
  TokenHead& head() { return head_; }
  AttentionParams& attention(std::size_t l) { return attention_[l]; }
  FeedForwardParams& feed_forward(std::size_t l) { return feed_forward_[l]; }

 private:
  ModelConfig config_;
  TokenHead head_;
  std::vector<AttentionParams> attention_;
  std::vector<FeedForwardParams> feed_forward_;
  Parameter theta_;  // [L, 3], uniform (zero) at construction
};

}  // namespace parsearch
