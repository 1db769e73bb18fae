#pragma once

// Analytic parameter and FLOP counts. Matmuls cost 2*m*n*k; softmax,
// layer-norm and activation arithmetic is not counted.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "parsearch/archspec.hpp"
#include "parsearch/blocks.hpp"

namespace parsearch {

// LearnedBias: the attention block implemented in `blocks` (biased
// projections plus a [n_head, clamp_len+1] distance table).
// RelativeXL: the Transformer-XL relative attention layout (bias-free
// projections, a positional projection over all key positions, two per-head
// content/position bias vectors, an extra positional logit term).
enum class PositionScheme { LearnedBias, RelativeXL };

// Whether the output projection onto the vocabulary enters total_flops.
enum class SoftmaxCounting { Excluded, Full };

PositionScheme parse_position_scheme(std::string_view text);
std::string position_scheme_name(PositionScheme s);
SoftmaxCounting parse_softmax_counting(std::string_view text);
std::string softmax_counting_name(SoftmaxCounting s);

struct CostQuery {
  std::size_t tgt_len = 64;
  std::size_t mem_len = 640;
  std::size_t batch_size = 1;

  void validate() const;
};

struct CostOptions {
  PositionScheme position = PositionScheme::LearnedBias;
  SoftmaxCounting softmax = SoftmaxCounting::Full;
  // Memory keys/values are read from a cache instead of being re-projected.
  bool cached_kv = false;

  // Settings under which the Transformer-XL base layout is costed.
  static CostOptions reference();
};

struct BlockCost {
  std::size_t index = 0;
  BlockKind kind = BlockKind::Identity;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  std::uint64_t total_params = 0;
  std::uint64_t total_flops = 0;
  std::vector<BlockCost> per_block;
  std::uint64_t embedding_params = 0;  // tied embedding/output matrix plus output bias
  std::uint64_t softmax_flops = 0;     // output projection, reported either way
  bool softmax_counted = true;

  double gflops() const { return static_cast<double>(total_flops) * 1e-9; }
};

std::uint64_t attention_block_params(const ModelConfig& config, const CostOptions& options = {});
std::uint64_t feedforward_block_params(const ModelConfig& config);
std::uint64_t embedding_params(const ModelConfig& config);
std::uint64_t block_params(BlockKind kind, const ModelConfig& config, const CostOptions& options = {});

// Per sequence; the caller multiplies by batch size.
std::uint64_t attention_block_flops(const ModelConfig& config, const CostQuery& query, const CostOptions& options = {});
std::uint64_t feedforward_block_flops(const ModelConfig& config, const CostQuery& query);
std::uint64_t softmax_flops(const ModelConfig& config, const CostQuery& query);
std::uint64_t block_flops(BlockKind kind, const ModelConfig& config, const CostQuery& query,
                          const CostOptions& options = {});

// Parameter side only: flops fields are zero.
CostReport count_params(const ArchSpec& spec, const ModelConfig& config, const CostOptions& options = {});
// Parameters and FLOPs.
CostReport count_flops(const ArchSpec& spec, const ModelConfig& config, const CostQuery& query,
                       const CostOptions& options = {});

struct ScalingRow {
  std::size_t length = 0;
  std::size_t mem_len = 0;
  std::uint64_t flops = 0;
};

struct ScalingReport {
  BlockKind kind = BlockKind::Identity;
  std::vector<ScalingRow> rows;
  std::optional<double> exponent;  // undefined for identity (all zero)
};

// Sweeps tgt_len over `lengths` with mem_len = round(length * config.mem_len /
// config.tgt_len) and fits log(flops) = a + b*log(length) by least squares.
ScalingReport scaling_report(BlockKind kind, const ModelConfig& config, std::span<const std::size_t> lengths,
                             const CostOptions& options = {});

struct ComparisonRow {
  std::string arch;
  BlockCounts counts;
  std::uint64_t params = 0;
  double gflops = 0;
  double ratio = 0;  // flops relative to the first row
};

std::vector<ComparisonRow> compare_archs(std::span<const ArchSpec> specs, const ModelConfig& config,
                                         const CostQuery& query, const CostOptions& options = {});

// Columns arch,n_attn,n_ff,params,gflops,ratio.
std::string comparison_csv(std::span<const ComparisonRow> rows);
std::string comparison_json(std::span<const ComparisonRow> rows, const ModelConfig& config, const CostQuery& query,
                            const CostOptions& options);

}  // namespace parsearch
