#pragma once

// Two-stage alternating search. After a warmup that trains block weights
// with theta frozen at uniform, every epoch spends its leading steps on block
// weights (weight shard) and its trailing steps on theta (arch shard).

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "parsearch/archspec.hpp"
#include "parsearch/data.hpp"
#include "parsearch/numfmt.hpp"
#include "parsearch/optim.hpp"
#include "parsearch/supernet.hpp"

namespace parsearch {

enum class SearchPhase { Warmup, Weight, Arch };
std::string phase_name(SearchPhase phase);

enum class ArchPlacement { Trailing, Leading };
enum class ShardPolicy { Disjoint, Shared };

struct SearchSchedule {
  std::size_t warmup_steps = 10000;
  double arch_fraction = 0.2;
  std::size_t total_steps = 40000;
  std::size_t snapshot_every = 1;  // in arch steps
  std::size_t epoch_steps = 0;     // 0: derived from the shard sizes
  ArchPlacement placement = ArchPlacement::Trailing;

  // Warmup is a quarter of the budget, as in the full-scale 10k/40k split.
  static SearchSchedule scaled(std::size_t total_steps);

  void validate() const;
  std::size_t arch_steps_per_epoch(std::size_t epoch) const;
  SearchPhase phase_at(std::size_t step, std::size_t epoch) const;
  // Number of arch steps in [0, total_steps).
  std::size_t planned_arch_steps(std::size_t epoch) const;
};

struct SearchHyperparams {
  std::size_t batch_size = 128;
  double arch_lr = 1e-2;
  double arch_weight_decay = 5e-4;
  double weight_lr = 1e-2;
  double weight_weight_decay = 1e-4;
  OptimizerKind weight_optimizer = OptimizerKind::Sgd;
  OptimizerKind arch_optimizer = OptimizerKind::Sgd;
  double clip_norm = 0.0;
  ShardPolicy shards = ShardPolicy::Disjoint;

  static SearchHyperparams desk();
  void validate() const;
};

struct CorpusSplit {
  std::vector<std::int32_t> weight_shard;
  std::vector<std::int32_t> arch_shard;
};

// The trailing round(arch_fraction * n) tokens form the arch shard. The split
// is contiguous and depends on nothing but its inputs; `seed` is accepted for
// interface symmetry with shuffled policies.
CorpusSplit split_corpus(std::span<const std::int32_t> ids, double arch_fraction, std::uint64_t seed = 0);

struct StepRecord {
  std::size_t step = 0;
  SearchPhase phase = SearchPhase::Warmup;
  double loss = 0;
  double tau = 0;
  double grad_norm = 0;
};

// 64-bit FNV-1a over parameter names and value bytes.
std::uint64_t parameter_hash(std::span<Parameter* const> params);

class SearchState {
 public:
  SearchState(std::span<const std::int32_t> ids, const ModelConfig& config, const SearchSchedule& schedule,
              const SearchHyperparams& hyper, const GumbelConfig& gumbel, std::uint64_t seed);

  std::size_t step() const { return step_; }
  std::size_t epoch_steps() const { return epoch_; }
  SearchPhase current_phase() const { return schedule_.phase_at(step_, epoch_); }
  bool finished() const { return step_ >= schedule_.total_steps || stopped_; }
  double tau() const;

  // Runs the step the schedule calls for next.
  StepRecord advance();

  // One weight update on the next weight-shard batch; theta is not bound as
  // a trainable leaf, so it receives no gradient at all.
  double step_weight();
  // One theta update on the next arch-shard batch with block weights frozen.
  double step_arch();

  const std::vector<ArchSpec>& snapshots() const { return snapshots_; }
  const std::vector<Tensor>& theta_history() const { return theta_history_; }
  const std::vector<double>& loss_curve() const { return loss_curve_; }
  std::size_t planned_snapshots() const;
  bool converged() const;

  SuperNet& supernet() { return net_; }
  const SearchSchedule& schedule() const { return schedule_; }
  Optimizer& weight_optimizer() { return weight_opt_; }
  Optimizer& arch_optimizer() { return arch_opt_; }

 private:
  struct Validated;
  static Validated validate(std::span<const std::int32_t> ids, const ModelConfig& config,
                            const SearchSchedule& schedule, const SearchHyperparams& hyper, const GumbelConfig& gumbel);
  SearchState(Validated&& v, const SearchSchedule& schedule, const SearchHyperparams& hyper,
              const GumbelConfig& gumbel, std::uint64_t seed);

  struct Stream {
    SegmentBatcher batcher;
    MemoryState memory;
  };
  Batch next_batch(Stream& s);
  double run_segment(Stream& s, bool train_weights, bool train_theta);
  void check_finite(double loss, double norm, double lr) const;

  ModelConfig config_;
  SearchSchedule schedule_;
  SearchHyperparams hyper_;
  GumbelConfig gumbel_;
  SuperNet net_;
  std::vector<Parameter*> weights_;
  Optimizer weight_opt_;
  Optimizer arch_opt_;
  Stream weight_stream_;
  Stream arch_stream_;
  CounterRng noise_rng_;
  CounterRng dropout_rng_;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
  std::size_t arch_steps_ = 0;
  bool stopped_ = false;
  double last_grad_norm_ = 0;
  std::vector<ArchSpec> snapshots_;
  std::vector<Tensor> theta_history_;
  std::vector<double> loss_curve_;
};

struct SearchResult {
  ArchSpec final_spec;          // argmax of the final theta, identity included
  bool converged = false;
  bool unconverged_tie = false; // some layer of the final theta is tied
  std::size_t steps_run = 0;
  std::vector<Tensor> theta_history;
  std::vector<ArchSpec> snapshots;
  std::vector<double> loss_curve;
};

using SearchObserver = std::function<void(const StepRecord&, SearchState&)>;

SearchResult run_search(std::span<const std::int32_t> ids, const ModelConfig& config, const SearchSchedule& schedule,
                        const SearchHyperparams& hyper, const GumbelConfig& gumbel, std::uint64_t seed,
                        const SearchObserver& observer = {});

// Row-wise softmax of an [L, 3] theta.
Tensor theta_probabilities(const Tensor& theta);

// {"schema": 1, "arch", "layers", "converged", "steps", "loss_curve", "theta_history"}.
std::string search_report_json(const SearchResult& result);
// Columns snapshot,layer,p_attn,p_ff,p_identity.
std::string theta_history_csv(const SearchResult& result);

}  // namespace parsearch
