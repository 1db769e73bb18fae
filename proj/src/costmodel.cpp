#include "parsearch/costmodel.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "parsearch/error.hpp"
#include "parsearch/numfmt.hpp"

namespace parsearch {

PositionScheme parse_position_scheme(std::string_view text) {
  if (text == "learned_bias") return PositionScheme::LearnedBias;
  if (text == "relative_xl") return PositionScheme::RelativeXL;
  throw ConfigError("position scheme must be 'learned_bias' or 'relative_xl', got '" + std::string(text) + "'");
}

std::string position_scheme_name(PositionScheme s) {
  return s == PositionScheme::LearnedBias ? "learned_bias" : "relative_xl";
}

SoftmaxCounting parse_softmax_counting(std::string_view text) {
  if (text == "excluded") return SoftmaxCounting::Excluded;
  if (text == "full") return SoftmaxCounting::Full;
  throw ConfigError("softmax counting must be 'excluded' or 'full', got '" + std::string(text) + "'");
}

std::string softmax_counting_name(SoftmaxCounting s) { return s == SoftmaxCounting::Excluded ? "excluded" : "full"; }

void CostQuery::validate() const {
  if (tgt_len == 0) throw ConfigError("tgt_len must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
}

CostOptions CostOptions::reference() {
  CostOptions o;
  o.position = PositionScheme::RelativeXL;
  o.softmax = SoftmaxCounting::Excluded;
  return o;
}

std::uint64_t attention_block_params(const ModelConfig& c, const CostOptions& o) {
  const std::uint64_t d = c.d_model, hd = c.attn_width();
  const std::uint64_t layer_norm = 2 * d;
  if (o.position == PositionScheme::RelativeXL) {
    // q, k, v, output and positional projections, no biases; u and v vectors.
    return 5 * d * hd + 2 * hd + layer_norm;
  }
  // Query and value biases, output bias; keys carry none.
  return 3 * d * hd + hd * d + 2 * hd + d + layer_norm + static_cast<std::uint64_t>(c.n_head) * (c.clamp_len + 1);
}

std::uint64_t feedforward_block_params(const ModelConfig& c) {
  const std::uint64_t d = c.d_model, di = c.d_inner;
  return d * di + di + di * d + d + 2 * d;
}

std::uint64_t embedding_params(const ModelConfig& c) {
  return static_cast<std::uint64_t>(c.vocab_size) * c.d_model + c.vocab_size;
}

std::uint64_t block_params(BlockKind kind, const ModelConfig& c, const CostOptions& o) {
  switch (kind) {
    case BlockKind::SelfAttention: return attention_block_params(c, o);
    case BlockKind::FeedForward: return feedforward_block_params(c);
    case BlockKind::Identity: return 0;
  }
  return 0;
}

std::uint64_t attention_block_flops(const ModelConfig& c, const CostQuery& q, const CostOptions& o) {
  const std::uint64_t d = c.d_model, hd = c.attn_width();
  const std::uint64_t t = q.tgt_len, klen = q.tgt_len + q.mem_len;
  const std::uint64_t kv_rows = o.cached_kv ? t : klen;
  std::uint64_t f = 2 * t * d * hd          // queries
                    + 2 * 2 * kv_rows * d * hd  // keys and values
                    + 2 * t * hd * d        // output projection
                    + 2 * t * klen * hd     // logits
                    + 2 * t * klen * hd;    // weighted sum of values
  if (o.position == PositionScheme::RelativeXL) {
    f += 2 * klen * d * hd;    // positional projection
    f += 2 * t * klen * hd;    // positional logits
  }
  return f;
}

std::uint64_t feedforward_block_flops(const ModelConfig& c, const CostQuery& q) {
  return 2 * static_cast<std::uint64_t>(q.tgt_len) * c.d_model * c.d_inner * 2;
}

std::uint64_t softmax_flops(const ModelConfig& c, const CostQuery& q) {
  return 2 * static_cast<std::uint64_t>(q.tgt_len) * c.d_model * c.vocab_size;
}

std::uint64_t block_flops(BlockKind kind, const ModelConfig& c, const CostQuery& q, const CostOptions& o) {
  switch (kind) {
    case BlockKind::SelfAttention: return attention_block_flops(c, q, o);
    case BlockKind::FeedForward: return feedforward_block_flops(c, q);
    case BlockKind::Identity: return 0;
  }
  return 0;
}

CostReport count_params(const ArchSpec& spec, const ModelConfig& c, const CostOptions& o) {
  CostReport r;
  r.embedding_params = embedding_params(c);
  r.total_params = r.embedding_params;
  r.softmax_counted = o.softmax == SoftmaxCounting::Full;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    BlockCost b{i, spec[i], block_params(spec[i], c, o), 0};
    r.total_params += b.params;
    r.per_block.push_back(b);
  }
  return r;
}

CostReport count_flops(const ArchSpec& spec, const ModelConfig& c, const CostQuery& q, const CostOptions& o) {
  q.validate();
  CostReport r = count_params(spec, c, o);
  const std::uint64_t batch = q.batch_size;
  for (BlockCost& b : r.per_block) {
    b.flops = block_flops(b.kind, c, q, o) * batch;
    r.total_flops += b.flops;
  }
  r.softmax_flops = softmax_flops(c, q) * batch;
  if (r.softmax_counted) r.total_flops += r.softmax_flops;
  return r;
}

ScalingReport scaling_report(BlockKind kind, const ModelConfig& c, std::span<const std::size_t> lengths,
                             const CostOptions& o) {
  if (lengths.size() < 3) throw ContractError("scaling_report: need at least 3 lengths");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] == 0) throw ContractError("scaling_report: lengths must be >= 1");
    if (i > 0 && lengths[i] <= lengths[i - 1]) throw ContractError("scaling_report: lengths must be ascending");
  }
  const double mem_ratio = static_cast<double>(c.mem_len) / static_cast<double>(c.tgt_len);
  ScalingReport r;
  r.kind = kind;
  for (std::size_t n : lengths) {
    CostQuery q{n, static_cast<std::size_t>(std::llround(mem_ratio * static_cast<double>(n))), 1};
    r.rows.push_back({n, q.mem_len, block_flops(kind, c, q, o)});
  }
  if (kind == BlockKind::Identity) return r;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(r.rows.size());
  for (const ScalingRow& row : r.rows) {
    const double x = std::log(static_cast<double>(row.length));
    const double y = std::log(static_cast<double>(row.flops));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  r.exponent = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return r;
}

std::vector<ComparisonRow> compare_archs(std::span<const ArchSpec> specs, const ModelConfig& c, const CostQuery& q,
                                         const CostOptions& o) {
  if (specs.size() < 2) throw ContractError("compare_archs: need at least 2 specs");
  std::vector<ComparisonRow> rows;
  std::uint64_t base = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const CostReport r = count_flops(specs[i], c, q, o);
    ComparisonRow row;
    const ArchSpec kept = compact(specs[i]);
    row.arch = kept.empty() ? "" : format_arch(kept);
    row.counts = count_blocks(specs[i]);
    row.params = r.total_params;
    row.gflops = r.gflops();
    if (i == 0) base = r.total_flops;
    row.ratio = base == 0 ? 0.0 : static_cast<double>(r.total_flops) / static_cast<double>(base);
    rows.push_back(row);
  }
  return rows;
}

std::string comparison_csv(std::span<const ComparisonRow> rows) {
  std::ostringstream out;
  out << "arch,n_attn,n_ff,params,gflops,ratio\n";
  for (const ComparisonRow& r : rows) {
    out << '"' << r.arch << '"' << ',' << r.counts.n_attention << ',' << r.counts.n_ff << ',' << r.params << ','
        << format_double(r.gflops) << ',' << format_double(r.ratio) << '\n';
  }
  return out.str();
}

std::string comparison_json(std::span<const ComparisonRow> rows, const ModelConfig& c, const CostQuery& q,
                            const CostOptions& o) {
  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["query"] = {{"tgt_len", q.tgt_len}, {"mem_len", q.mem_len}, {"batch", q.batch_size}};
  j["config"] = {{"d_model", c.d_model}, {"n_head", c.n_head},         {"d_head", c.d_head},
                 {"d_inner", c.d_inner}, {"clamp_len", c.clamp_len},   {"vocab_size", c.vocab_size}};
  j["position"] = position_scheme_name(o.position);
  j["softmax"] = softmax_counting_name(o.softmax);
  j["cached_kv"] = o.cached_kv;
  auto arr = nlohmann::ordered_json::array();
  for (const ComparisonRow& r : rows) {
    arr.push_back({{"arch", r.arch},
                   {"n_attn", r.counts.n_attention},
                   {"n_ff", r.counts.n_ff},
                   {"params", r.params},
                   {"gflops", r.gflops},
                   {"ratio", r.ratio}});
  }
  j["rows"] = std::move(arr);
  return j.dump(2) + "\n";
}

}  // namespace parsearch
