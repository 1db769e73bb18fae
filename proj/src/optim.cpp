#include "parsearch/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "parsearch/error.hpp"

namespace parsearch {

OptimizerKind parse_optimizer_kind(std::string_view text) {
  if (text == "sgd") return OptimizerKind::Sgd;
  if (text == "adam") return OptimizerKind::Adam;
  throw ConfigError("optimizer must be 'sgd' or 'adam', got '" + std::string(text) + "'");
}

std::string optimizer_kind_name(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

void OptimizerConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
  if (!(weight_decay >= 0)) throw ConfigError("weight decay must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("adam eps must be positive");
  if (!(clip_norm >= 0)) throw ConfigError("clip_norm must be >= 0");
}

Optimizer::Optimizer(std::vector<Parameter*> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  const bool need_m = config_.kind == OptimizerKind::Adam || config_.momentum > 0;
  for (Parameter* p : params_) {
    if (need_m) m_.emplace_back(p->value.size(), Scalar(0));
    if (config_.kind == OptimizerKind::Adam) v_.emplace_back(p->value.size(), Scalar(0));
  }
}

void Optimizer::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

double Optimizer::grad_norm() const {
  long double total = 0;
  for (const Parameter* p : params_) {
    for (Scalar g : p->grad.values()) total += static_cast<long double>(g) * g;
  }
  return std::sqrt(static_cast<double>(total));
}

double Optimizer::step(double lr_scale) {
  const double norm = grad_norm();
  const double lr = config_.lr * lr_scale;
  double gscale = 1.0;
  if (config_.clip_norm > 0 && norm > config_.clip_norm) gscale = config_.clip_norm / norm;
  ++t_;
  const double wd = config_.weight_decay;
  const double bc1 = 1 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1 - std::pow(config_.beta2, static_cast<double>(t_));

  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.grad.size() != p.value.size()) {
      throw ContractError("optimizer: parameter '" + p.name + "' has no gradient buffer");
    }
    Scalar* w = p.value.data();
    const Scalar* g = p.grad.data();
    const std::size_t n = p.value.size();
    if (lr == 0) continue;
    for (std::size_t j = 0; j < n; ++j) {
      const double gj = g[j] * gscale;
      double update;
      if (config_.kind == OptimizerKind::Sgd) {
        if (config_.momentum > 0) {
          m_[i][j] = static_cast<Scalar>(config_.momentum * m_[i][j] + gj);
          update = m_[i][j];
        } else {
          update = gj;
        }
      } else {
        m_[i][j] = static_cast<Scalar>(config_.beta1 * m_[i][j] + (1 - config_.beta1) * gj);
        v_[i][j] = static_cast<Scalar>(config_.beta2 * v_[i][j] + (1 - config_.beta2) * gj * gj);
        update = (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + config_.eps);
      }
      w[j] = static_cast<Scalar>(w[j] - lr * (update + wd * w[j]));
    }
  }
  return norm;
}

double cosine_scale(std::size_t step, std::size_t total, double floor) {
  if (total == 0) return 1.0;
  const double p = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return floor + (1 - floor) * 0.5 * (1 + std::cos(std::numbers::pi * p));
}

}  // namespace parsearch
