#include "parsearch/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <memory>

#include "parsearch/blocks.hpp"

namespace parsearch {

namespace {

class Draw {
 public:
  explicit Draw(std::uint64_t seed) : rng_(seed, 11) {}

  std::size_t size(std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng_.next_bits() % (hi - lo + 1));
  }
  Tensor normal(Shape shape, double stddev = 1.0, double mean = 0.0) {
    Tensor t(std::move(shape));
    for (Scalar& v : t.values()) v = static_cast<Scalar>(mean + stddev * rng_.next_normal());
    return t;
  }
  // Normal entries pushed at least `gap` away from zero, so no element sits
  // on a kink within the finite-difference step.
  Tensor away_from_zero(Shape shape, double gap) {
    Tensor t = normal(std::move(shape));
    for (Scalar& v : t.values()) v = v >= 0 ? v + static_cast<Scalar>(gap) : v - static_cast<Scalar>(gap);
    return t;
  }
  std::vector<std::int32_t> ids(std::size_t n, std::size_t range) {
    std::vector<std::int32_t> out(n);
    for (auto& v : out) v = static_cast<std::int32_t>(rng_.next_bits() % range);
    return out;
  }
  std::uint64_t bits() { return rng_.next_bits(); }

 private:
  CounterRng rng_;
};

using Shared = std::shared_ptr<const Tensor>;

Shared share(Tensor t) { return std::make_shared<const Tensor>(std::move(t)); }

// Builds f(x) = sum(w .* (op(x) - op(x0))). Centering on the base output
// keeps f near zero, so rounding in f stays far below the finite-difference
// signal; w has magnitudes in [0.5, inf) so no output is projected away.
void add_case(std::vector<GradcheckCase>& out, Draw& d, std::string name, Tensor x, ScalarFn op) {
  Tensor base;
  {
    Graph g;
    base = op(g, g.constant(x)).value();
  }
  const std::size_t n = base.size();
  Tensor w = d.away_from_zero({n, 1}, 0.5);
  for (Scalar& v : base.values()) v = -v;
  auto neg_base = share(std::move(base));
  auto weights = share(std::move(w));
  ScalarFn f = [op, neg_base, weights, n](Graph& g, Var xv) {
    Var y = op(g, xv);
    Var centered = add(y, g.constant(*neg_base));
    return matmul(reshape(centered, {1, n}), g.constant(*weights));
  };
  out.push_back({std::move(name), std::move(f), std::move(x)});
}

void element_cases(Draw& d, std::vector<GradcheckCase>& out) {
  const std::size_t r = d.size(1, 16), c = d.size(1, 64);

  {
    auto other = share(d.normal({r, c}));
    add_case(out, d, "add", d.normal({r, c}), [=](Graph& g, Var x) { return add(x, g.constant(*other)); });
  }
  {
    auto bias = share(d.normal({c}));
    add_case(out, d, "add_bias/x", d.normal({r, c}),
             [=](Graph& g, Var x) { return add_bias(x, g.constant(*bias)); });
    auto xs = share(d.normal({r, c}));
    add_case(out, d, "add_bias/bias", d.normal({c}),
             [=](Graph& g, Var b) { return add_bias(g.constant(*xs), b); });
  }
  {
    const Scalar s = d.away_from_zero({1}, 0.5)[0];
    add_case(out, d, "scale", d.normal({r, c}), [=](Graph&, Var x) { return scale(x, s); });
  }
  {
    add_case(out, d, "relu", d.away_from_zero({r, c}, 1e-3), [=](Graph&, Var x) { return relu(x); });
  }
  add_case(out, d, "sum", d.normal({r, c}), [](Graph&, Var x) { return scale(sum(x), Scalar(1.5)); });
  {
    auto t1 = share(d.normal({r, c}));
    auto t2 = share(d.normal({r, c}));
    auto wts = share(d.normal({3}));
    add_case(out, d, "mix/terms", d.normal({r, c}), [=](Graph& g, Var x) {
      const std::array<Var, 3> terms{x, g.constant(*t1), g.constant(*t2)};
      return mix(terms, g.constant(*wts));
    });
    auto t0 = share(d.normal({r, c}));
    add_case(out, d, "mix/weights", d.normal({3}), [=](Graph& g, Var m) {
      const std::array<Var, 3> terms{g.constant(*t0), g.constant(*t1), g.constant(*t2)};
      return mix(terms, m);
    });
  }
  {
    add_case(out, d, "transpose", d.normal({r, c}), [=](Graph&, Var x) { return transpose(x); });
    add_case(out, d, "reshape", d.normal({r, c}), [=](Graph&, Var x) { return reshape(x, {c, r}); });
  }
  {
    const std::size_t r2 = d.size(1, 16);
    auto tail = share(d.normal({r2, c}));
    add_case(out, d, "concat_rows", d.normal({r, c}), [=](Graph& g, Var x) {
      const std::array<Var, 2> parts{g.constant(*tail), x};
      return concat_rows(parts);
    });
    const std::size_t start = d.size(0, r - 1);
    const std::size_t count = d.size(1, r - start);
    add_case(out, d, "slice_rows", d.normal({r, c}),
             [=](Graph&, Var x) { return slice_rows(x, start, count); });
  }
  {
    // Two-column rows normalize to +-1 whatever the input, leaving no gradient.
    const std::size_t dd = std::max<std::size_t>(c, 3);
    auto gain = share(d.normal({dd}, 0.3, 1.0));
    auto bias = share(d.normal({dd}));
    auto xv = share(d.normal({r, dd}));
    const Scalar eps = Scalar(1e-5);
    add_case(out, d, "layer_norm/x", d.normal({r, dd}), [=](Graph& g, Var x) {
      return layer_norm(x, g.constant(*gain), g.constant(*bias), eps);
    });
    add_case(out, d, "layer_norm/gain", d.normal({dd}, 0.3, 1.0), [=](Graph& g, Var gn) {
      return layer_norm(g.constant(*xv), gn, g.constant(*bias), eps);
    });
    add_case(out, d, "layer_norm/bias", d.normal({dd}), [=](Graph& g, Var b) {
      return layer_norm(g.constant(*xv), g.constant(*gain), b, eps);
    });
  }
  {
    add_case(out, d, "softmax/axis0", d.normal({r, c}), [=](Graph&, Var x) { return softmax(x, 0); });
    add_case(out, d, "softmax/axis1", d.normal({r, c}), [=](Graph&, Var x) { return softmax(x, 1); });
  }
  {
    const std::size_t v = std::max<std::size_t>(c, 2);
    auto targets = std::make_shared<const std::vector<std::int32_t>>(d.ids(r, v));
    add_case(out, d, "cross_entropy", d.normal({r, v}),
             [=](Graph&, Var logits) { return cross_entropy(logits, *targets); });
  }
  {
    const std::size_t vocab = d.size(1, 16);
    auto ids = std::make_shared<const std::vector<std::int32_t>>(d.ids(r, vocab));
    add_case(out, d, "embedding_lookup", d.normal({vocab, c}),
             [=](Graph&, Var table) { return embedding_lookup(table, *ids); });
  }
  {
    const std::uint64_t mask_seed = d.bits();
    add_case(out, d, "dropout", d.normal({r, c}), [=](Graph&, Var x) {
      CounterRng rng(mask_seed);
      return dropout(x, Scalar(0.3), rng);
    });
  }
  {
    const std::size_t m = d.size(1, 16), k = d.size(1, 64), nn = d.size(1, 16);
    auto a = share(d.normal({m, k}));
    auto b = share(d.normal({k, nn}));
    auto bt = share(d.normal({nn, k}));
    add_case(out, d, "matmul/a", d.normal({m, k}), [=](Graph& g, Var x) { return matmul(x, g.constant(*b)); });
    add_case(out, d, "matmul/b", d.normal({k, nn}),
             [=](Graph& g, Var x) { return matmul(g.constant(*a), x); });
    add_case(out, d, "matmul_nt/a", d.normal({m, k}),
             [=](Graph& g, Var x) { return matmul_nt(x, g.constant(*bt)); });
    add_case(out, d, "matmul_nt/b", d.normal({nn, k}),
             [=](Graph& g, Var x) { return matmul_nt(g.constant(*a), x); });
  }
}

void attention_core_cases(Draw& d, std::vector<GradcheckCase>& out) {
  AttentionShape s;
  s.lanes = d.size(1, 2);
  s.tgt_len = d.size(1, 4);
  s.mem_len = d.size(0, 3);
  s.n_head = d.size(1, 2);
  s.d_head = d.size(1, 4);
  s.clamp_len = d.size(1, 5);
  const std::size_t hd = s.n_head * s.d_head;
  const std::size_t qrows = s.lanes * s.tgt_len, krows = s.lanes * (s.mem_len + s.tgt_len);
  auto q = share(d.normal({qrows, hd}));
  auto k = share(d.normal({krows, hd}));
  auto v = share(d.normal({krows, hd}));
  auto bias = share(d.normal({s.n_head, s.clamp_len + 1}));
  const std::uint64_t mask_seed = d.bits();

  struct Inputs {
    Var q, k, v, b;
  };
  auto run = [=](Graph& g, Var x, int which, Scalar p) {
    Inputs in{g.constant(*q), g.constant(*k), g.constant(*v), g.constant(*bias)};
    switch (which) {
      case 0: in.q = x; break;
      case 1: in.k = x; break;
      case 2: in.v = x; break;
      default: in.b = x; break;
    }
    CounterRng rng(mask_seed);
    return causal_attention(in.q, in.k, in.v, in.b, s, p, &rng);
  };
  add_case(out, d, "causal_attention/q", *q, [=](Graph& g, Var x) { return run(g, x, 0, 0); });
  add_case(out, d, "causal_attention/k", *k, [=](Graph& g, Var x) { return run(g, x, 1, 0); });
  add_case(out, d, "causal_attention/v", *v, [=](Graph& g, Var x) { return run(g, x, 2, 0); });
  add_case(out, d, "causal_attention/rel_bias", *bias, [=](Graph& g, Var x) { return run(g, x, 3, 0); });
  add_case(out, d, "causal_attention/dropout", *q, [=](Graph& g, Var x) { return run(g, x, 0, Scalar(0.25)); });
}

ModelConfig tiny_config(Draw& d) {
  ModelConfig c;
  c.d_model = d.size(3, 8);
  c.n_head = d.size(1, 2);
  c.d_head = d.size(1, 4);
  c.d_inner = d.size(1, 8);
  c.clamp_len = d.size(1, 5);
  c.tgt_len = d.size(1, 4);
  c.mem_len = d.size(0, 3);
  c.vocab_size = 4;
  c.n_layers = 1;
  return c;
}

// Replaces parameters with O(1) random values so no gradient path vanishes.
void randomize(std::vector<Parameter*> params, Draw& d) {
  for (Parameter* p : params) {
    const bool gain = p->name.find("ln_gain") != std::string::npos;
    p->value = d.normal(p->value.shape(), 0.3, gain ? 1.0 : 0.0);
  }
}

void block_cases(Draw& d, std::vector<GradcheckCase>& out) {
  const ModelConfig c = tiny_config(d);
  const std::size_t lanes = d.size(1, 2);
  CounterRng init(d.bits());
  auto attn = std::make_shared<AttentionParams>(AttentionParams::init(c, init, "attn."));
  auto ff = std::make_shared<FeedForwardParams>(FeedForwardParams::init(c, init, "ff."));
  randomize(attn->parameters(), d);
  randomize(ff->parameters(), d);
  auto mem = share(c.mem_len == 0 ? Tensor({0, c.d_model}) : d.normal({lanes * c.mem_len, c.d_model}));
  auto x0 = share(d.normal({lanes * c.tgt_len, c.d_model}));
  const ForwardContext ctx{lanes, false, nullptr, nullptr};

  // index -1 differentiates the block input, otherwise the i-th parameter.
  auto attn_fn = [=](int index) {
    return [=](Graph& g, Var x) {
      AttentionVars p = AttentionVars::bind(g, *attn, false);
      std::array<Var*, 10> slots{&p.ln_gain, &p.ln_bias, &p.w_q, &p.b_q, &p.w_k,
                                 &p.w_v,     &p.b_v,     &p.w_o, &p.b_o, &p.rel_bias};
      Var input = g.constant(*x0);
      if (index < 0) {
        input = x;
      } else {
        *slots[static_cast<std::size_t>(index)] = x;
      }
      return attention_forward(input, *mem, p, c, ctx);
    };
  };
  auto ff_fn = [=](int index) {
    return [=](Graph& g, Var x) {
      FeedForwardVars p = FeedForwardVars::bind(g, *ff, false);
      std::array<Var*, 6> slots{&p.ln_gain, &p.ln_bias, &p.w_1, &p.b_1, &p.w_2, &p.b_2};
      Var input = g.constant(*x0);
      if (index < 0) {
        input = x;
      } else {
        *slots[static_cast<std::size_t>(index)] = x;
      }
      return feedforward_forward(input, p, c, ctx);
    };
  };

  add_case(out, d, "attention_forward/x", *x0, attn_fn(-1));
  const auto ap = attn->parameters();
  for (std::size_t i = 0; i < ap.size(); ++i) {
    add_case(out, d, "attention_forward/" + ap[i]->name.substr(5), ap[i]->value, attn_fn(static_cast<int>(i)));
  }
  add_case(out, d, "feedforward_forward/x", *x0, ff_fn(-1));
  const auto fp = ff->parameters();
  for (std::size_t i = 0; i < fp.size(); ++i) {
    add_case(out, d, "feedforward_forward/" + fp[i]->name.substr(3), fp[i]->value, ff_fn(static_cast<int>(i)));
  }
}

}  // namespace

std::vector<GradcheckCase> gradcheck_cases(std::uint64_t seed) {
  Draw d(seed);
  std::vector<GradcheckCase> out;
  element_cases(d, out);
  attention_core_cases(d, out);
  block_cases(d, out);
  return out;
}

std::vector<GradcheckSummary> run_gradcheck_suite(std::size_t seeds, double eps) {
  std::map<std::string, GradcheckSummary> by_name;
  std::vector<std::string> order;
  for (std::size_t s = 0; s < seeds; ++s) {
    for (const GradcheckCase& c : gradcheck_cases(s)) {
      auto [it, fresh] = by_name.try_emplace(c.name, GradcheckSummary{c.name, 0, 0});
      if (fresh) order.push_back(c.name);
      it->second.max_error = std::max(it->second.max_error, grad_check(c.f, c.x, eps));
      ++it->second.cases;
    }
  }
  std::vector<GradcheckSummary> out;
  for (const std::string& n : order) out.push_back(by_name[n]);
  return out;
}

}  // namespace parsearch
