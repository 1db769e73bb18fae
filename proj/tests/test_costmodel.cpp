#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "parsearch/archspec.hpp"
#include "parsearch/costmodel.hpp"
#include "parsearch/error.hpp"
#include "parsearch/model.hpp"
#include "parsearch/rng.hpp"

using namespace parsearch;

namespace {

constexpr BlockKind S = BlockKind::SelfAttention;
constexpr BlockKind F = BlockKind::FeedForward;
constexpr BlockKind I = BlockKind::Identity;

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 4;
  c.n_head = 1;
  c.d_head = 2;
  c.d_inner = 8;
  c.clamp_len = 3;
  c.vocab_size = 5;
  c.tgt_len = 3;
  c.mem_len = 2;
  return c;
}

ArchSpec random_spec(CounterRng& rng, std::size_t max_len, bool allow_identity) {
  const std::size_t n = 1 + rng.next_bits() % max_len;
  std::vector<BlockKind> blocks;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t r = rng.next_bits() % (allow_identity ? 3 : 2);
    blocks.push_back(r == 0 ? S : r == 1 ? F : I);
  }
  return ArchSpec(std::move(blocks));
}

std::uint64_t allocated_scalars(TransformerLM& model) {
  std::uint64_t n = 0;
  for (Parameter* p : model.parameters()) {
    std::uint64_t k = 1;
    for (std::size_t d : p->value.shape()) k *= d;
    n += k;
  }
  return n;
}

}  // namespace

TEST_CASE("block parameter counts by hand") {
  const ModelConfig c = small_config();
  // w1 32, b1 8, w2 32, b2 4, layer norm 8.
  CHECK(feedforward_block_params(c) == 84);
  // q, k, v 24; output 8; q and v biases 4; output bias 4; layer norm 8; bias table 4.
  CHECK(attention_block_params(c) == 52);
  // Five 4x2 projections 40; u and v vectors 4; layer norm 8.
  CHECK(attention_block_params(c, CostOptions::reference()) == 52);
  CHECK(embedding_params(c) == 25);
  CHECK(block_params(I, c) == 0);
}

TEST_CASE("block flop counts by hand") {
  const ModelConfig c = small_config();
  const CostQuery q{3, 2, 1};
  // q 48, k and v over 5 rows 160, output 48, logits 60, weighted sum 60.
  CHECK(attention_block_flops(c, q) == 376);
  CostOptions cached;
  cached.cached_kv = true;
  CHECK(attention_block_flops(c, q, cached) == 312);
  // Positional projection over 5 rows 80, positional logits 60.
  CHECK(attention_block_flops(c, q, CostOptions::reference()) == 516);
  CHECK(feedforward_block_flops(c, q) == 384);
  CHECK(softmax_flops(c, q) == 120);
  CHECK(block_flops(I, c, q) == 0);
}

TEST_CASE("reference parameter totals") {
  const ModelConfig c;
  const CostOptions ref = CostOptions::reference();
  const double base = static_cast<double>(count_params(parse_arch("(sf)x16"), c, ref).total_params);
  const double par = static_cast<double>(count_params(parse_arch("(sfff)x6 (f)x8"), c, ref).total_params);
  MESSAGE("params: " << base << " / " << par);
  CHECK(std::abs(base / 192e6 - 1) <= 0.05);
  CHECK(std::abs(par / 200e6 - 1) <= 0.05);
}

TEST_CASE("reference flop totals and ratio") {
  const ModelConfig c;
  const CostQuery q{64, 640, 1};
  const CostOptions ref = CostOptions::reference();
  const CostReport base = count_flops(parse_arch("(sf)x16"), c, q, ref);
  const CostReport par = count_flops(parse_arch("(sfff)x6 (f)x8"), c, q, ref);
  const double ratio = static_cast<double>(par.total_flops) / static_cast<double>(base.total_flops);
  MESSAGE("gflops: " << base.gflops() << " / " << par.gflops() << " ratio " << ratio);
  CHECK(std::abs(base.gflops() / 27 - 1) <= 0.15);
  CHECK(std::abs(par.gflops() / 17 - 1) <= 0.15);
  CHECK(std::abs(ratio / 0.630 - 1) <= 0.08);
  CHECK(base.softmax_flops > 0);
  CHECK_FALSE(base.softmax_counted);
}

TEST_CASE("analytic counts equal allocated model parameters") {
  CounterRng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    ModelConfig c;
    c.d_model = 1 + rng.next_bits() % 8;
    c.n_head = 1 + rng.next_bits() % 3;
    c.d_head = 1 + rng.next_bits() % 4;
    c.d_inner = 1 + rng.next_bits() % 12;
    c.clamp_len = rng.next_bits() % 6;
    c.vocab_size = 2 + rng.next_bits() % 10;
    c.tgt_len = 4;
    c.mem_len = 4;
    const ArchSpec spec = random_spec(rng, 6, true);
    c.n_layers = spec.size();
    TransformerLM model(spec, c, static_cast<std::uint64_t>(trial));
    INFO("trial " << trial);
    CHECK(count_params(spec, c).total_params == allocated_scalars(model));
    CHECK(model.parameter_count() == allocated_scalars(model));
  }
}

TEST_CASE("report totals equal the sum of their parts") {
  CounterRng rng(11);
  const ModelConfig c = ModelConfig::desk();
  const CostQuery q{32, 64, 2};
  for (int trial = 0; trial < 50; ++trial) {
    const ArchSpec spec = random_spec(rng, 16, true);
    for (const CostOptions& o : {CostOptions{}, CostOptions::reference()}) {
      const CostReport r = count_flops(spec, c, q, o);
      std::uint64_t params = r.embedding_params, flops = r.softmax_counted ? r.softmax_flops : 0;
      REQUIRE(r.per_block.size() == spec.size());
      for (std::size_t i = 0; i < spec.size(); ++i) {
        const BlockCost& b = r.per_block[i];
        CHECK(b.index == i);
        CHECK(b.kind == spec[i]);
        if (b.kind == I) {
          CHECK(b.params == 0);
          CHECK(b.flops == 0);
        }
        params += b.params;
        flops += b.flops;
      }
      CHECK(params == r.total_params);
      CHECK(flops == r.total_flops);
    }
  }
}

TEST_CASE("count_params leaves flops empty") {
  const CostReport r = count_params(parse_arch("(sf)x2"), ModelConfig::desk());
  CHECK(r.total_flops == 0);
  for (const BlockCost& b : r.per_block) CHECK(b.flops == 0);
}

TEST_CASE("batch size scales flops linearly") {
  const ModelConfig c = ModelConfig::desk();
  const ArchSpec spec = parse_arch("(sff)x3");
  const CostReport one = count_flops(spec, c, {16, 16, 1});
  const CostReport four = count_flops(spec, c, {16, 16, 4});
  CHECK(four.total_flops == 4 * one.total_flops);
  CHECK(four.total_params == one.total_params);
}

TEST_CASE("all-identity spec costs only the output layer") {
  const ModelConfig c = ModelConfig::desk();
  const CostQuery q{32, 32, 1};
  const CostReport r = count_flops(ArchSpec({I, I, I}), c, q);
  CHECK(r.total_flops == softmax_flops(c, q));
  CHECK(r.total_params == embedding_params(c));
  CHECK(count_flops(ArchSpec({I, I}), c, q, CostOptions::reference()).total_flops == 0);
}

TEST_CASE("concatenation is additive up to the shared embedding") {
  CounterRng rng(3);
  const ModelConfig c;
  const CostQuery q{64, 640, 1};
  for (int trial = 0; trial < 50; ++trial) {
    const ArchSpec a = random_spec(rng, 12, true);
    const ArchSpec b = random_spec(rng, 12, true);
    const CostReport ra = count_flops(a, c, q), rb = count_flops(b, c, q), rab = count_flops(a + b, c, q);
    CHECK(rab.total_params == ra.total_params + rb.total_params - ra.embedding_params);
    CHECK(rab.total_flops == ra.total_flops + rb.total_flops - ra.softmax_flops);
  }
}

TEST_CASE("adding a non-identity block strictly increases cost") {
  CounterRng rng(5);
  const ModelConfig c = ModelConfig::desk();
  const CostQuery q{32, 32, 1};
  for (int trial = 0; trial < 50; ++trial) {
    const ArchSpec spec = random_spec(rng, 10, true);
    const BlockKind extra = rng.next_bits() % 2 ? S : F;
    std::vector<BlockKind> blocks = spec.blocks();
    blocks.insert(blocks.begin() + static_cast<std::ptrdiff_t>(rng.next_bits() % (blocks.size() + 1)), extra);
    const CostReport before = count_flops(spec, c, q), after = count_flops(ArchSpec(blocks), c, q);
    CHECK(after.total_params > before.total_params);
    CHECK(after.total_flops > before.total_flops);
  }
}

TEST_CASE("swapping attention for feed-forward lowers flops at the inference query") {
  const ModelConfig c;
  const CostQuery q{64, 640, 1};
  for (const CostOptions& o : {CostOptions{}, CostOptions::reference()}) {
    const ArchSpec base = parse_arch("(sf)x16");
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (base[i] != S) continue;
      std::vector<BlockKind> blocks = base.blocks();
      blocks[i] = F;
      CHECK(count_flops(ArchSpec(blocks), c, q, o).total_flops < count_flops(base, c, q, o).total_flops);
    }
  }
}

TEST_CASE("scaling exponents") {
  const ModelConfig c = ModelConfig::desk();
  const std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
  const ScalingReport attn = scaling_report(S, c, lengths);
  const ScalingReport ff = scaling_report(F, c, lengths);
  const ScalingReport id = scaling_report(I, c, lengths);
  REQUIRE(attn.exponent.has_value());
  REQUIRE(ff.exponent.has_value());
  MESSAGE("attention exponent " << *attn.exponent);
  CHECK(*attn.exponent >= 1.8);
  CHECK(*attn.exponent <= 2.0);
  CHECK(*ff.exponent == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_FALSE(id.exponent.has_value());
  REQUIRE(attn.rows.size() == lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    CHECK(attn.rows[i].length == lengths[i]);
    CHECK(attn.rows[i].mem_len == lengths[i]);
    CHECK(id.rows[i].flops == 0);
    if (i > 0) CHECK(ff.rows[i].flops == 2 * ff.rows[i - 1].flops);
  }
}

TEST_CASE("scaling report scales memory with the sweep") {
  ModelConfig c = ModelConfig::desk();
  c.tgt_len = 64;
  c.mem_len = 640;
  const std::vector<std::size_t> lengths{10, 20, 40};
  const ScalingReport r = scaling_report(S, c, lengths);
  CHECK(r.rows[0].mem_len == 100);
  CHECK(r.rows[2].mem_len == 400);
}

TEST_CASE("scaling report preconditions") {
  const ModelConfig c = ModelConfig::desk();
  const std::vector<std::size_t> two{256, 512};
  const std::vector<std::size_t> unsorted{512, 256, 1024};
  const std::vector<std::size_t> zero{0, 1, 2};
  CHECK_THROWS_AS(scaling_report(S, c, two), ContractError);
  CHECK_THROWS_AS(scaling_report(S, c, unsorted), ContractError);
  CHECK_THROWS_AS(scaling_report(S, c, zero), ContractError);
}

TEST_CASE("compare_archs rows and ratios") {
  const ModelConfig c;
  const CostQuery q{64, 640, 1};
  const std::vector<ArchSpec> same{parse_arch("(sf)x16"), parse_arch("(sf)x16")};
  const std::vector<ComparisonRow> rows = compare_archs(same, c, q);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].ratio == 1.0);
  CHECK(rows[1].ratio == 1.0);
  CHECK(rows[0].arch == "(sf)x16");
  CHECK(rows[0].counts == BlockCounts{16, 16, 0});

  const std::vector<ArchSpec> pair{parse_arch("(sf)x16"), parse_arch("(sfff)x6 (f)x8")};
  const std::vector<ComparisonRow> t5 = compare_archs(pair, c, q, CostOptions::reference());
  CHECK(std::abs(t5[1].ratio / 0.630 - 1) <= 0.08);

  ModelConfig c24 = c;
  c24.n_layers = 24;
  const std::vector<ArchSpec> t3{parse_arch("(sf)x12"), parse_arch("(sff)x5 (f)x9")};
  for (const CostOptions& o : {CostOptions{}, CostOptions::reference()}) {
    const std::vector<ComparisonRow> r = compare_archs(t3, c24, q, o);
    CHECK(r[1].gflops < r[0].gflops);
    CHECK(r[1].ratio < 1.0);
  }

  const std::vector<ArchSpec> one{parse_arch("(f)x1")};
  CHECK_THROWS_AS(compare_archs(one, c, q), ContractError);
}

TEST_CASE("comparison csv and json") {
  const ModelConfig c = ModelConfig::desk();
  const CostQuery q{32, 32, 1};
  const std::vector<ArchSpec> specs{parse_arch("(sf)x4"), parse_arch("(sfff)x2")};
  const std::vector<ComparisonRow> rows = compare_archs(specs, c, q);
  const std::string csv = comparison_csv(rows);
  CHECK(csv.rfind("arch,n_attn,n_ff,params,gflops,ratio\n", 0) == 0);
  CHECK(csv.find("\"(sf)x4\",4,4,") != std::string::npos);
  CHECK(csv.find("\"(sfff)x2\",2,6,") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  const nlohmann::json j = nlohmann::json::parse(comparison_json(rows, c, q, CostOptions{}));
  CHECK(j["query"]["tgt_len"] == 32);
  CHECK(j["position"] == "learned_bias");
  CHECK(j["softmax"] == "full");
  REQUIRE(j["rows"].size() == 2);
  for (const char* key : {"arch", "n_attn", "n_ff", "params", "gflops", "ratio"}) CHECK(j["rows"][0].contains(key));
  CHECK(j["rows"][1]["params"] == rows[1].params);
  CHECK(j["rows"][0]["ratio"] == 1.0);
}

TEST_CASE("option names and query validation") {
  CHECK(parse_position_scheme("relative_xl") == PositionScheme::RelativeXL);
  CHECK(position_scheme_name(PositionScheme::LearnedBias) == "learned_bias");
  CHECK(parse_softmax_counting("excluded") == SoftmaxCounting::Excluded);
  CHECK_THROWS_AS(parse_position_scheme("absolute"), ConfigError);
  CHECK_THROWS_AS(parse_softmax_counting("partial"), ConfigError);
  CHECK_THROWS_AS(count_flops(parse_arch("(f)x1"), ModelConfig::desk(), CostQuery{0, 0, 1}), ConfigError);
  CHECK_THROWS_AS(count_flops(parse_arch("(f)x1"), ModelConfig::desk(), CostQuery{1, 0, 0}), ConfigError);
  CHECK_NOTHROW(count_flops(parse_arch("(s)x1"), ModelConfig::desk(), CostQuery{1, 0, 1}));
}
