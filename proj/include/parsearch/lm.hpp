#pragma once

// Fixed-architecture training, evaluation and checkpoints.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "parsearch/data.hpp"
#include "parsearch/model.hpp"
#include "parsearch/optim.hpp"

namespace parsearch {

struct TrainConfig {
  OptimizerConfig optimizer{};
  std::size_t batch_size = 16;
  bool cosine_schedule = true;
  double lr_floor = 0.0;  // cosine end point as a fraction of optimizer.lr

  static TrainConfig desk();
  void validate() const;
};

struct TrainResult {
  TransformerLM model;
  std::vector<double> loss_curve;
};

using TrainObserver = std::function<void(std::size_t step, double loss)>;

// Requires an Identity-free spec (compact() first).
TrainResult train_fixed(const ArchSpec& spec, std::span<const std::int32_t> ids, const ModelConfig& config,
                        const TrainConfig& train, std::size_t steps, std::uint64_t seed,
                        const TrainObserver& observer = {});

struct EvalConfig {
  std::size_t tgt_len = 64;
  std::size_t mem_len = 640;
  std::size_t clamp_len = 400;
  std::size_t batch_size = 1;

  void validate() const;
};

struct EvalReport {
  double mean_nll = 0;  // nats per token
  double ppl = 0;
  double bpc = 0;
  std::size_t tokens = 0;
  std::size_t tgt_len = 0;
  std::size_t mem_len = 0;
  std::size_t clamp_len = 0;
};

// Folds `ids` into batch_size lanes and scores every next-token prediction,
// carrying memory across segments. The last segment of a lane may be short.
EvalReport evaluate(TransformerLM& model, std::span<const std::int32_t> ids, const EvalConfig& config);

nlohmann::ordered_json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

// Layer codes including 'i', e.g. "sfif".
std::string layer_string(const ArchSpec& spec);
ArchSpec parse_layer_string(std::string_view codes);

// Binary container; the layout is described in README.md.
void save_checkpoint(const std::string& path, TransformerLM& model, const Vocab* vocab = nullptr);

struct LoadedCheckpoint {
  TransformerLM model;
  std::optional<Vocab> vocab;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace parsearch
