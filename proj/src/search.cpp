#include "parsearch/search.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include <json.hpp>

#include "parsearch/error.hpp"

namespace parsearch {

std::string phase_name(SearchPhase phase) {
  switch (phase) {
    case SearchPhase::Warmup: return "warmup";
    case SearchPhase::Weight: return "weight";
    case SearchPhase::Arch: return "arch";
  }
  return "unknown";
}

SearchSchedule SearchSchedule::scaled(std::size_t total_steps) {
  SearchSchedule s;
  s.total_steps = total_steps;
  s.warmup_steps = total_steps / 4;
  return s;
}

void SearchSchedule::validate() const {
  if (!(arch_fraction > 0 && arch_fraction < 1)) throw ConfigError("arch_fraction must be in (0, 1)");
  if (total_steps == 0) throw ConfigError("total_steps must be >= 1");
  if (warmup_steps >= total_steps) throw ConfigError("warmup_steps must be < total_steps");
  if (snapshot_every == 0) throw ConfigError("snapshot_every must be >= 1");
  if (epoch_steps == 1) throw ConfigError("epoch_steps must be >= 2 so both phases get a step");
}

std::size_t SearchSchedule::arch_steps_per_epoch(std::size_t epoch) const {
  const auto n = static_cast<std::size_t>(std::llround(arch_fraction * static_cast<double>(epoch)));
  return std::clamp<std::size_t>(n, 1, epoch - 1);
}

SearchPhase SearchSchedule::phase_at(std::size_t step, std::size_t epoch) const {
  if (step < warmup_steps) return SearchPhase::Warmup;
  if (epoch < 2) throw ContractError("SearchSchedule::phase_at: epoch must be >= 2 steps");
  const std::size_t k = (step - warmup_steps) % epoch;
  const std::size_t arch = arch_steps_per_epoch(epoch);
  const bool is_arch = placement == ArchPlacement::Trailing ? k >= epoch - arch : k < arch;
  return is_arch ? SearchPhase::Arch : SearchPhase::Weight;
}

std::size_t SearchSchedule::planned_arch_steps(std::size_t epoch) const {
  std::size_t n = 0;
  for (std::size_t s = warmup_steps; s < total_steps; ++s) {
    if (phase_at(s, epoch) == SearchPhase::Arch) ++n;
  }
  return n;
}

SearchHyperparams SearchHyperparams::desk() {
  SearchHyperparams h;
  h.batch_size = 16;
  h.weight_optimizer = OptimizerKind::Adam;
  h.arch_optimizer = OptimizerKind::Adam;
  h.weight_lr = 3e-3;
  h.arch_lr = 3e-2;
  h.clip_norm = 1.0;
  return h;
}

void SearchHyperparams::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(arch_lr > 0) || !(weight_lr > 0)) throw ConfigError("learning rates must be positive");
  if (!(arch_weight_decay >= 0) || !(weight_weight_decay >= 0)) throw ConfigError("weight decays must be >= 0");
  if (!(clip_norm >= 0)) throw ConfigError("clip_norm must be >= 0");
}

CorpusSplit split_corpus(std::span<const std::int32_t> ids, double arch_fraction, std::uint64_t) {
  if (!(arch_fraction > 0 && arch_fraction < 1)) throw ConfigError("arch_fraction must be in (0, 1)");
  const auto n_arch = static_cast<std::size_t>(std::llround(arch_fraction * static_cast<double>(ids.size())));
  if (ids.size() < 2 || n_arch == 0 || n_arch >= ids.size()) {
    throw ConfigError("corpus of " + std::to_string(ids.size()) + " tokens cannot be split at fraction " +
                      format_double(arch_fraction));
  }
  const std::size_t cut = ids.size() - n_arch;
  return {std::vector<std::int32_t>(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(cut)),
          std::vector<std::int32_t>(ids.begin() + static_cast<std::ptrdiff_t>(cut), ids.end())};
}

std::uint64_t parameter_hash(std::span<Parameter* const> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const Parameter* p : params) {
    feed(p->name.data(), p->name.size());
    feed(p->value.data(), p->value.size() * sizeof(Scalar));
  }
  return h;
}

struct SearchState::Validated {
  ModelConfig config;
  CorpusSplit split;
};

SearchState::Validated SearchState::validate(std::span<const std::int32_t> ids, const ModelConfig& config,
                                             const SearchSchedule& schedule, const SearchHyperparams& hyper,
                                             const GumbelConfig& gumbel) {
  if (ids.empty()) throw ConfigError("search corpus is empty");
  config.validate();
  schedule.validate();
  hyper.validate();
  gumbel.validate();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= config.vocab_size) {
      throw ConfigError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                        " is outside vocab_size " + std::to_string(config.vocab_size));
    }
  }
  Validated v{config, {}};
  if (hyper.shards == ShardPolicy::Disjoint) {
    v.split = split_corpus(ids, schedule.arch_fraction);
  } else {
    v.split = {std::vector<std::int32_t>(ids.begin(), ids.end()), std::vector<std::int32_t>(ids.begin(), ids.end())};
  }
  const std::size_t need = hyper.batch_size * (config.tgt_len + 1);
  if (v.split.weight_shard.size() < need || v.split.arch_shard.size() < need) {
    throw ConfigError("corpus too small: each shard needs at least batch_size*(tgt_len+1) = " +
                      std::to_string(need) + " tokens (weight shard " + std::to_string(v.split.weight_shard.size()) +
                      ", arch shard " + std::to_string(v.split.arch_shard.size()) + ")");
  }
  return v;
}

SearchState::SearchState(std::span<const std::int32_t> ids, const ModelConfig& config,
                         const SearchSchedule& schedule, const SearchHyperparams& hyper, const GumbelConfig& gumbel,
                         std::uint64_t seed)
    : SearchState(validate(ids, config, schedule, hyper, gumbel), schedule, hyper, gumbel, seed) {}

SearchState::SearchState(Validated&& v, const SearchSchedule& schedule, const SearchHyperparams& hyper,
                         const GumbelConfig& gumbel, std::uint64_t seed)
    : config_(v.config),
      schedule_(schedule),
      hyper_(hyper),
      gumbel_(gumbel),
      net_(config_, seed),
      weights_(net_.weight_parameters()),
      weight_opt_(weights_, OptimizerConfig{.kind = hyper.weight_optimizer,
                                            .lr = hyper.weight_lr,
                                            .weight_decay = hyper.weight_weight_decay,
                                            .clip_norm = hyper.clip_norm}),
      arch_opt_({&net_.theta()}, OptimizerConfig{.kind = hyper.arch_optimizer,
                                                 .lr = hyper.arch_lr,
                                                 .weight_decay = hyper.arch_weight_decay}),
      weight_stream_{SegmentBatcher(v.split.weight_shard, hyper.batch_size, config_.tgt_len),
                     MemoryState::empty(config_.n_layers, hyper.batch_size, config_.d_model)},
      arch_stream_{SegmentBatcher(v.split.arch_shard, hyper.batch_size, config_.tgt_len),
                   MemoryState::empty(config_.n_layers, hyper.batch_size, config_.d_model)},
      noise_rng_(CounterRng(seed, 3).fork(gumbel.rng_seed)),
      dropout_rng_(seed, 4) {
  epoch_ = schedule_.epoch_steps;
  if (epoch_ == 0) epoch_ = std::max<std::size_t>(2, weight_stream_.batcher.size() + arch_stream_.batcher.size());
}

double SearchState::tau() const {
  const std::size_t w = schedule_.warmup_steps;
  if (step_ <= w) return gumbel_.tau_start;
  const double span = static_cast<double>(schedule_.total_steps - w);
  return gumbel_.tau_at(static_cast<double>(step_ - w) / span);
}

Batch SearchState::next_batch(Stream& s) {
  if (!s.batcher.has_next()) {
    s.batcher.reset();
    s.memory.clear();
  }
  return *s.batcher.next();
}

void SearchState::check_finite(double loss, double norm, double lr) const {
  if (!std::isfinite(loss) || !std::isfinite(norm)) {
    throw TrainingAbort("search diverged at step " + std::to_string(step_) + " (" +
                        phase_name(current_phase()) + "): loss=" + format_double(loss) +
                        " lr=" + format_double(lr) + " grad_norm=" + format_double(norm));
  }
}

double SearchState::run_segment(Stream& s, bool train_weights, bool train_theta) {
  const Batch batch = next_batch(s);
  Graph g;
  ForwardContext ctx{batch.lanes, true, &dropout_rng_, nullptr};
  SupernetOptions opt;
  opt.mode = MixMode::Mixed;
  opt.tau = static_cast<Scalar>(tau());
  opt.noise_rng = &noise_rng_;
  opt.noise_counter = step_;
  opt.train_weights = train_weights;
  opt.train_theta = train_theta;
  SegmentOutput out;
  Var loss;
  try {
    out = net_.forward(g, batch.inputs, s.memory, ctx, opt);
    loss = cross_entropy(out.logits, batch.targets);
  } catch (const NumericError& e) {
    const double lr = train_weights ? weight_opt_.config().lr : arch_opt_.config().lr;
    throw TrainingAbort("search diverged at step " + std::to_string(step_) + " (" + phase_name(current_phase()) +
                        "): " + e.what() + " lr=" + format_double(lr) +
                        " grad_norm=" + format_double(last_grad_norm_));
  }
  const double value = loss.value()[0];
  g.backward(loss);
  s.memory.update(out.layer_inputs, config_.mem_len);
  return value;
}

double SearchState::step_weight() {
  weight_opt_.zero_grad();
  const double loss = run_segment(weight_stream_, true, false);
  last_grad_norm_ = weight_opt_.grad_norm();
  check_finite(loss, last_grad_norm_, weight_opt_.config().lr);
  weight_opt_.step();
  loss_curve_.push_back(loss);
  ++step_;
  return loss;
}

double SearchState::step_arch() {
  arch_opt_.zero_grad();
  const double loss = run_segment(arch_stream_, false, true);
  last_grad_norm_ = arch_opt_.grad_norm();
  check_finite(loss, last_grad_norm_, arch_opt_.config().lr);
  arch_opt_.step();
  loss_curve_.push_back(loss);
  ++step_;
  ++arch_steps_;
  if (arch_steps_ % schedule_.snapshot_every == 0) {
    snapshots_.push_back(sample_architecture(net_.theta().value).spec);
    theta_history_.push_back(net_.theta().value);
    if (convergence_check(snapshots_, planned_snapshots())) stopped_ = true;
  }
  return loss;
}

std::size_t SearchState::planned_snapshots() const {
  return std::max<std::size_t>(1, schedule_.planned_arch_steps(epoch_) / schedule_.snapshot_every);
}

bool SearchState::converged() const {
  return !snapshots_.empty() && convergence_check(snapshots_, planned_snapshots());
}

StepRecord SearchState::advance() {
  if (finished()) throw ContractError("SearchState::advance: search already finished");
  StepRecord r;
  r.step = step_;
  r.phase = current_phase();
  r.tau = tau();
  r.loss = r.phase == SearchPhase::Arch ? step_arch() : step_weight();
  r.grad_norm = last_grad_norm_;
  return r;
}

SearchResult run_search(std::span<const std::int32_t> ids, const ModelConfig& config, const SearchSchedule& schedule,
                        const SearchHyperparams& hyper, const GumbelConfig& gumbel, std::uint64_t seed,
                        const SearchObserver& observer) {
  SearchState state(ids, config, schedule, hyper, gumbel, seed);
  while (!state.finished()) {
    const StepRecord r = state.advance();
    if (observer) observer(r, state);
  }
  SearchResult out;
  const SampledArch sampled = sample_architecture(state.supernet().theta().value);
  out.final_spec = sampled.spec;
  out.unconverged_tie = sampled.unconverged;
  out.converged = state.converged();
  out.steps_run = state.step();
  out.theta_history = state.theta_history();
  out.snapshots = state.snapshots();
  out.loss_curve = state.loss_curve();
  return out;
}

Tensor theta_probabilities(const Tensor& theta) {
  Tensor p(theta.shape());
  for (std::size_t l = 0; l < theta.rows(); ++l) {
    double mx = theta.at(l, 0);
    for (std::size_t i = 1; i < theta.cols(); ++i) mx = std::max<double>(mx, theta.at(l, i));
    double total = 0;
    for (std::size_t i = 0; i < theta.cols(); ++i) total += std::exp(theta.at(l, i) - mx);
    for (std::size_t i = 0; i < theta.cols(); ++i) p.at(l, i) = static_cast<Scalar>(std::exp(theta.at(l, i) - mx) / total);
  }
  return p;
}

namespace {

std::string layer_codes(const ArchSpec& spec) {
  std::string s;
  for (BlockKind k : spec.blocks()) s += block_code(k);
  return s;
}

}  // namespace

std::string search_report_json(const SearchResult& r) {
  nlohmann::ordered_json j;
  j["schema"] = 1;
  const ArchSpec kept = compact(r.final_spec);
  j["arch"] = kept.empty() ? "" : format_arch(kept);
  j["layers"] = layer_codes(r.final_spec);
  j["converged"] = r.converged;
  j["tied"] = r.unconverged_tie;
  j["steps"] = r.steps_run;
  j["loss_curve"] = r.loss_curve;
  auto history = nlohmann::ordered_json::array();
  for (const Tensor& t : r.theta_history) {
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < t.rows(); ++l) rows.push_back({t.at(l, 0), t.at(l, 1), t.at(l, 2)});
    history.push_back(std::move(rows));
  }
  j["theta_history"] = std::move(history);
  return j.dump(2) + "\n";
}

std::string theta_history_csv(const SearchResult& r) {
  std::ostringstream out;
  out << "snapshot,layer,p_attn,p_ff,p_identity\n";
  for (std::size_t s = 0; s < r.theta_history.size(); ++s) {
    const Tensor p = theta_probabilities(r.theta_history[s]);
    for (std::size_t l = 0; l < p.rows(); ++l) {
      out << s << ',' << l << ',' << format_double(p.at(l, 0)) << ',' << format_double(p.at(l, 1)) << ','
          << format_double(p.at(l, 2)) << '\n';
    }
  }
  return out.str();
}

}  // namespace parsearch
