#pragma once

// First-order optimizers over a fixed list of Parameters.

#include <string>
#include <string_view>
#include <vector>

#include "parsearch/tensor.hpp"

namespace parsearch {

enum class OptimizerKind { Sgd, Adam };

OptimizerKind parse_optimizer_kind(std::string_view text);
std::string optimizer_kind_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Sgd;
  double lr = 1e-2;
  double weight_decay = 0.0;  // decoupled: p -= lr * wd * p
  double momentum = 0.0;      // SGD only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping

  void validate() const;
};

class Optimizer {
 public:
  Optimizer(std::vector<Parameter*> params, OptimizerConfig config);

  const OptimizerConfig& config() const { return config_; }
  const std::vector<Parameter*>& parameters() const { return params_; }

  void zero_grad();
  double grad_norm() const;
  // Applies one update at learning rate config.lr * lr_scale and returns the
  // pre-clipping gradient norm.
  double step(double lr_scale = 1.0);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  OptimizerConfig config_;
  std::vector<std::vector<Scalar>> m_, v_;
  std::size_t t_ = 0;
};

// Cosine decay from 1 to `floor` over `total` steps.
double cosine_scale(std::size_t step, std::size_t total, double floor = 0.0);

}  // namespace parsearch
