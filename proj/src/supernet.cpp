#include "parsearch/supernet.hpp"

#include <algorithm>
#include <cmath>

#include "parsearch/error.hpp"

namespace parsearch {

double GumbelConfig::tau_at(double progress) const {
  const double p = std::clamp(progress, 0.0, 1.0);
  return tau_start * std::pow(tau_end / tau_start, p);
}

void GumbelConfig::validate() const {
  if (!(tau_end > 0) || !(tau_start >= tau_end)) {
    throw ConfigError("gumbel temperatures need tau_start >= tau_end > 0");
  }
}

std::array<Scalar, 3> gumbel_noise(const CounterRng& rng, std::uint64_t counter) {
  std::array<Scalar, 3> g{};
  for (std::size_t i = 0; i < 3; ++i) {
    const double u = rng.uniform(3 * counter + i);
    g[i] = static_cast<Scalar>(-std::log(-std::log(u)));
  }
  return g;
}

std::array<Scalar, 3> gumbel_softmax(const std::array<Scalar, 3>& logits, Scalar tau, CounterRng& rng) {
  if (!(tau > 0)) throw ContractError("gumbel_softmax: tau must be positive");
  std::array<Scalar, 3> z{};
  for (std::size_t i = 0; i < 3; ++i) {
    const Scalar g = static_cast<Scalar>(-std::log(-std::log(rng.next_uniform())));
    z[i] = (logits[i] + g) / tau;
  }
  const Scalar mx = *std::max_element(z.begin(), z.end());
  Scalar total = 0;
  for (Scalar& v : z) {
    v = std::exp(v - mx);
    total += v;
  }
  for (Scalar& v : z) v /= total;
  return z;
}

Var gumbel_mix(Var theta_row, Scalar tau, const std::array<Scalar, 3>& noise) {
  if (!(tau > 0)) throw ContractError("gumbel_softmax: tau must be positive");
  Graph& g = theta_row.graph();
  Var noisy = add(theta_row, g.constant(Tensor({1, 3}, {noise[0], noise[1], noise[2]})));
  return softmax(scale(noisy, Scalar(1) / tau), 1);
}

SampledArch sample_architecture(const Tensor& theta) {
  if (theta.rank() != 2 || theta.cols() != 3) {
    throw DimensionError("sample_architecture: theta " + shape_string(theta.shape()) + " is not [L x 3]");
  }
  SampledArch out;
  std::vector<BlockKind> blocks;
  for (std::size_t l = 0; l < theta.rows(); ++l) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i) {
      if (theta.at(l, i) > theta.at(l, best)) best = i;
    }
    for (std::size_t i = 0; i < 3; ++i) {
      if (i != best && theta.at(l, i) == theta.at(l, best)) out.unconverged = true;
    }
    blocks.push_back(kAllBlockKinds[best]);
  }
  out.spec = ArchSpec(std::move(blocks));
  return out;
}

bool convergence_check(std::span<const ArchSpec> history, std::optional<std::size_t> stage_steps) {
  if (history.empty()) throw ContractError("convergence_check: empty history");
  const std::size_t n = stage_steps.value_or(history.size());
  const std::size_t window = (3 * n + 3) / 4;  // ceil(0.75 n)
  if (window > history.size()) return false;
  const ArchSpec& last = history.back();
  return std::all_of(history.end() - static_cast<std::ptrdiff_t>(window), history.end(),
                     [&](const ArchSpec& s) { return s == last; });
}

SuperNet::SuperNet(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  CounterRng rng(seed, 2);
  head_ = TokenHead::init(config_, rng);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    attention_.push_back(AttentionParams::init(config_, rng, prefix + "attn."));
    feed_forward_.push_back(FeedForwardParams::init(config_, rng, prefix + "ff."));
  }
  theta_ = Parameter{"theta", Tensor({config_.n_layers, 3}), {}};
  theta_.zero_grad();
}

SegmentOutput SuperNet::forward(Graph& g, std::span<const std::int32_t> inputs, const MemoryState& mem,
                                const ForwardContext& ctx, const SupernetOptions& opt) {
  const std::size_t L = config_.n_layers;
  if (mem.layers.size() != L) {
    throw DimensionError("SuperNet::forward: memory has " + std::to_string(mem.layers.size()) + " layers, need " +
                         std::to_string(L));
  }
  const bool one_hot = opt.mode == MixMode::OneHot;
  if (one_hot) {
    if (opt.spec == nullptr) throw ContractError("SuperNet::forward: one-hot mode needs a spec");
    if (opt.spec->size() != L) {
      throw ContractError("SuperNet::forward: spec has " + std::to_string(opt.spec->size()) + " blocks, supernet " +
                          std::to_string(L) + " layers");
    }
  } else {
    if (!(opt.tau > 0)) throw ContractError("gumbel_softmax: tau must be positive");
    if (opt.noise_override) {
      if (opt.noise_override->shape() != Shape{L, 3}) {
        throw DimensionError("SuperNet::forward: noise override must be [L x 3]");
      }
    } else if (opt.noise_rng == nullptr) {
      throw ContractError("SuperNet::forward: mixed mode needs a noise source");
    }
  }

  TokenHeadVars head = TokenHeadVars::bind(g, head_, opt.train_weights);
  Var theta = one_hot ? Var{} : g.param(theta_, opt.train_theta);
  if (opt.mix_weights_out) *opt.mix_weights_out = Tensor({L, 3});

  SegmentOutput out;
  Var x = embed_tokens(head, inputs);
  for (std::size_t l = 0; l < L; ++l) {
    out.layer_inputs.push_back(x.value());
    if (one_hot) {
      switch ((*opt.spec)[l]) {
        case BlockKind::SelfAttention:
          x = attention_forward(x, mem.layers[l], AttentionVars::bind(g, attention_[l], opt.train_weights), config_,
                                ctx);
          break;
        case BlockKind::FeedForward:
          x = feedforward_forward(x, FeedForwardVars::bind(g, feed_forward_[l], opt.train_weights), config_, ctx);
          break;
        case BlockKind::Identity: x = identity_forward(x); break;
      }
      if (opt.mix_weights_out) opt.mix_weights_out->at(l, static_cast<std::size_t>((*opt.spec)[l])) = 1;
      continue;
    }
    std::array<Scalar, 3> noise{};
    if (opt.noise_override) {
      for (std::size_t i = 0; i < 3; ++i) noise[i] = opt.noise_override->at(l, i);
    } else {
      noise = gumbel_noise(*opt.noise_rng, opt.noise_counter * L + l);
    }
    Var weights = gumbel_mix(slice_rows(theta, l, 1), opt.tau, noise);
    if (opt.mix_weights_out) {
      for (std::size_t i = 0; i < 3; ++i) opt.mix_weights_out->at(l, i) = weights.value()[i];
    }
    const std::array<Var, 3> terms{
        attention_forward(x, mem.layers[l], AttentionVars::bind(g, attention_[l], opt.train_weights), config_, ctx),
        feedforward_forward(x, FeedForwardVars::bind(g, feed_forward_[l], opt.train_weights), config_, ctx),
        identity_forward(x)};
    x = mix(terms, weights);
  }
  out.logits = output_logits(x, head);
  return out;
}

TransformerLM SuperNet::extract(const ArchSpec& spec) const {
  if (spec.size() != config_.n_layers) {
    throw ContractError("SuperNet::extract: spec length " + std::to_string(spec.size()) + " != " +
                        std::to_string(config_.n_layers) + " layers");
  }
  std::vector<LayerParams> layers;
  for (std::size_t l = 0; l < spec.size(); ++l) {
    switch (spec[l]) {
      case BlockKind::SelfAttention: layers.emplace_back(attention_[l]); break;
      case BlockKind::FeedForward: layers.emplace_back(feed_forward_[l]); break;
      case BlockKind::Identity: layers.emplace_back(std::monostate{}); break;
    }
  }
  return TransformerLM(spec, config_, head_, std::move(layers));
}

std::vector<Parameter*> SuperNet::weight_parameters() {
  std::vector<Parameter*> out = head_.parameters();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    for (Parameter* p : attention_[l].parameters()) out.push_back(p);
    for (Parameter* p : feed_forward_[l].parameters()) out.push_back(p);
  }
  return out;
}

}  // namespace parsearch
