#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "parsearch/error.hpp"
#include "parsearch/gradcheck.hpp"
#include "parsearch/tensor.hpp"

using namespace parsearch;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  CounterRng rng(seed);
  Tensor t(std::move(shape));
  for (Scalar& v : t.values()) v = static_cast<Scalar>(stddev * rng.next_normal());
  return t;
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= tol);
}

Tensor eval(const std::function<Var(Graph&)>& f) {
  Graph g;
  return f(g).value();
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rows() == 6);
  CHECK(t.cols() == 4);
  CHECK(shape_string(t.shape()) == "[2x3x4]");
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<Scalar>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(t.reshaped({5, 5}), DimensionError);
  CHECK(t.reshaped({4, 6}).shape() == Shape{4, 6});
}

TEST_CASE("matmul hand products") {
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(eval([&](Graph& g) { return matmul(g.constant(eye), g.constant(m)); }) == m);
  const Tensor p = eval([](Graph& g) {
    return matmul(g.constant(Tensor::matrix({{1, 2}})), g.constant(Tensor::matrix({{3}, {4}})));
  });
  CHECK(p == Tensor::matrix({{11}}));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Graph g;
  Var a = g.constant(Tensor({2, 3}));
  Var b = g.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("grad of sum(A*B) wrt A is ones * B^T") {
  const Tensor a = random_tensor({3, 4}, 1);
  const Tensor b = random_tensor({4, 5}, 2);
  Graph g;
  Var av = g.input(a);
  Var y = sum(matmul(av, g.constant(b)));
  g.backward(y);
  const Tensor& grad = g.grad(av);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      double row_sum = 0;
      for (std::size_t j = 0; j < 5; ++j) row_sum += b.at(k, j);
      CHECK(std::abs(grad.at(i, k) - row_sum) < 1e-12);
    }
  }
  const double err = grad_check([&](Graph& gg, Var x) { return sum(matmul(x, gg.constant(b))); }, a, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("layer_norm examples") {
  const Tensor ones = Tensor::matrix({{1, 1, 1, 1}});
  const Tensor gain = Tensor::vector({1, 1, 1, 1});
  const Tensor bias = Tensor::vector({0, 0, 0, 0});
  const Tensor y = eval([&](Graph& g) {
    return layer_norm(g.constant(ones), g.constant(gain), g.constant(bias), Scalar(1e-5));
  });
  check_close(y, Tensor::matrix({{0, 0, 0, 0}}), 0);

  const Tensor pm = eval([](Graph& g) {
    return layer_norm(g.constant(Tensor::matrix({{1, -1}})), g.constant(Tensor::vector({1, 1})),
                      g.constant(Tensor::vector({0, 0})), Scalar(1e-12));
  });
  check_close(pm, Tensor::matrix({{1, -1}}), 1e-9);

  Graph g;
  CHECK_THROWS_AS(layer_norm(g.constant(Tensor({2, 0})), g.constant(Tensor({0})), g.constant(Tensor({0})), 1e-5),
                  DimensionError);
}

TEST_CASE("layer_norm rows are standardized and its gradient matches finite differences") {
  const Tensor x = random_tensor({3, 8}, 3, 2.0);
  const Tensor gain(Shape{8}, 1), bias(Shape{8}, 0);
  const Tensor y = eval([&](Graph& g) {
    return layer_norm(g.constant(x), g.constant(gain), g.constant(bias), Scalar(1e-9));
  });
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, sq = 0;
    for (std::size_t c = 0; c < 8; ++c) mean += y.at(r, c);
    mean /= 8;
    for (std::size_t c = 0; c < 8; ++c) sq += (y.at(r, c) - mean) * (y.at(r, c) - mean);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(sq / 8 - 1) < 1e-6);
  }
  const Tensor w = random_tensor({3, 8}, 4);
  const Tensor g2 = random_tensor({8}, 5);
  auto f = [&](Graph& g, Var xv) {
    Var out = layer_norm(xv, g.constant(g2), g.constant(bias), Scalar(1e-5));
    return sum(matmul(reshape(out, {1, 24}), g.constant(w.reshaped({24, 1}))));
  };
  CHECK(grad_check(f, x, 1e-5) < 1e-5);
}

TEST_CASE("softmax examples") {
  const Tensor u = eval([](Graph& g) { return softmax(g.constant(Tensor::matrix({{0, 0, 0}})), 1); });
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(u[i] - 1.0 / 3) < 1e-15);

  const Tensor big = eval([](Graph& g) { return softmax(g.constant(Tensor::matrix({{1000, 0}})), 1); });
  CHECK(big.all_finite());
  CHECK(std::abs(big[0] - 1) < 1e-15);
  CHECK(big[1] < 1e-300);

  const Tensor l = eval([](Graph& g) {
    return softmax(g.constant(Tensor::matrix({{std::log(1.0), std::log(2.0), std::log(3.0)}})), 1);
  });
  check_close(l, Tensor::matrix({{1.0 / 6, 2.0 / 6, 3.0 / 6}}), 1e-15);

  Graph g;
  CHECK_THROWS_AS(softmax(g.constant(Tensor({2, 2})), 2), DimensionError);
}

TEST_CASE("softmax sums to one along either axis") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor x = random_tensor({7, 5}, seed, 10.0);
    const Tensor rows = eval([&](Graph& g) { return softmax(g.constant(x), 1); });
    const Tensor cols = eval([&](Graph& g) { return softmax(g.constant(x), 0); });
    for (std::size_t r = 0; r < 7; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        s += rows.at(r, c);
        CHECK(rows.at(r, c) > 0);
        CHECK(rows.at(r, c) < 1);
      }
      CHECK(std::abs(s - 1) < 1e-12);
    }
    for (std::size_t c = 0; c < 5; ++c) {
      double s = 0;
      for (std::size_t r = 0; r < 7; ++r) s += cols.at(r, c);
      CHECK(std::abs(s - 1) < 1e-12);
    }
  }
}

TEST_CASE("cross_entropy examples") {
  const std::vector<std::int32_t> targets{0, 3, 1};
  const Tensor zero({3, 4});
  const Tensor ce = eval([&](Graph& g) { return cross_entropy(g.constant(zero), targets); });
  CHECK(std::abs(ce[0] - std::log(4.0)) < 1e-12);

  Tensor sharp({3, 4}, -1000);
  for (std::size_t t = 0; t < 3; ++t) sharp.at(t, static_cast<std::size_t>(targets[t])) = 1000;
  CHECK(eval([&](Graph& g) { return cross_entropy(g.constant(sharp), targets); })[0] < 1e-12);

  const std::vector<std::int32_t> bad{0, 4, 1};
  Graph g;
  try {
    cross_entropy(g.constant(zero), bad);
    FAIL("expected IndexError");
  } catch (const IndexError& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
}

TEST_CASE("cross_entropy matches a scalar double loop") {
  const Tensor logits = random_tensor({5, 7}, 42, 3.0);
  const std::vector<std::int32_t> targets{6, 0, 3, 3, 1};
  double expected = 0;
  for (std::size_t t = 0; t < 5; ++t) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < 7; ++v) mx = std::max(mx, static_cast<double>(logits.at(t, v)));
    double z = 0;
    for (std::size_t v = 0; v < 7; ++v) z += std::exp(logits.at(t, v) - mx);
    expected += -(logits.at(t, static_cast<std::size_t>(targets[t])) - mx - std::log(z));
  }
  expected /= 5;
  const Tensor ce = eval([&](Graph& g) { return cross_entropy(g.constant(logits), targets); });
  CHECK(std::abs(ce[0] - expected) < 1e-13);
}

TEST_CASE("cross_entropy of uniform logits is ln V") {
  for (std::size_t v : {2u, 7u, 32u, 1000u}) {
    const std::vector<std::int32_t> targets(4, static_cast<std::int32_t>(v - 1));
    const Tensor ce = eval([&](Graph& g) { return cross_entropy(g.constant(Tensor({4, v}, 0.25)), targets); });
    CHECK(std::abs(ce[0] - std::log(static_cast<double>(v))) < 1e-12);
  }
}

TEST_CASE("cross_entropy after a two-layer net passes grad_check") {
  const Tensor x = random_tensor({6, 5}, 7);
  const Tensor w1 = random_tensor({5, 8}, 8, 0.5);
  const Tensor w2 = random_tensor({8, 4}, 9, 0.5);
  const std::vector<std::int32_t> targets{0, 1, 2, 3, 0, 1};
  auto f = [&](Graph& g, Var w) {
    Var h = relu(matmul(g.constant(x), w));
    return cross_entropy(matmul(h, g.constant(w2)), targets);
  };
  CHECK(grad_check(f, w1, 1e-5) < 1e-5);
}

TEST_CASE("grad_check catches a wrong backward") {
  // Forward is 2x but the backward claims the derivative is 3.
  auto wrong = [](Graph& g, Var x) {
    Tensor doubled = x.value();
    for (Scalar& v : doubled.values()) v *= 2;
    Var y = g.record(
        std::move(doubled), {x},
        [](const Tensor& go, std::span<Tensor* const> gi) {
          if (gi[0]) {
            for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += 3 * go[i];
          }
        },
        "wrong_double");
    return sum(y);
  };
  CHECK(grad_check(wrong, random_tensor({3, 3}, 1), 1e-5) > 1e-2);
  CHECK(grad_check([](Graph&, Var x) { return sum(x); }, random_tensor({4, 4}, 2)) < 1e-9);
}

TEST_CASE("grad_check preconditions") {
  const Tensor x({2, 2}, 1);
  CHECK_THROWS_AS(grad_check([](Graph&, Var v) { return v; }, x), ContractError);
  CHECK_THROWS_AS(grad_check([](Graph&, Var v) { return sum(v); }, x, 1e-2), ContractError);
  CHECK_THROWS_AS(grad_check([](Graph&, Var v) { return sum(v); }, x, 1e-9), ContractError);
}

TEST_CASE("element-wise and structural ops") {
  const Tensor a = Tensor::matrix({{1, -2}, {3, -4}});
  CHECK(eval([&](Graph& g) { return relu(g.constant(a)); }) == Tensor::matrix({{1, 0}, {3, 0}}));
  CHECK(eval([&](Graph& g) { return scale(g.constant(a), 2); }) == Tensor::matrix({{2, -4}, {6, -8}}));
  CHECK(eval([&](Graph& g) { return add(g.constant(a), g.constant(a)); }) == Tensor::matrix({{2, -4}, {6, -8}}));
  CHECK(eval([&](Graph& g) { return transpose(g.constant(a)); }) == Tensor::matrix({{1, 3}, {-2, -4}}));
  CHECK(eval([&](Graph& g) { return add_bias(g.constant(a), g.constant(Tensor::vector({10, 20}))); }) ==
        Tensor::matrix({{11, 18}, {13, 16}}));
  CHECK(eval([&](Graph& g) {
          const std::array<Var, 2> parts{g.constant(a), g.constant(Tensor::matrix({{5, 6}}))};
          return concat_rows(parts);
        }) == Tensor::matrix({{1, -2}, {3, -4}, {5, 6}}));
  CHECK(eval([&](Graph& g) { return slice_rows(g.constant(a), 1, 1); }) == Tensor::matrix({{3, -4}}));
  Graph g;
  CHECK_THROWS_AS(add(g.constant(a), g.constant(Tensor({2, 3}))), DimensionError);
  CHECK_THROWS_AS(slice_rows(g.constant(a), 1, 2), DimensionError);
}

TEST_CASE("embedding_lookup gathers rows and scatter-adds gradients") {
  const Tensor table = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  const std::vector<std::int32_t> ids{2, 0, 2};
  Graph g;
  Var t = g.input(table);
  Var rows = embedding_lookup(t, ids);
  CHECK(rows.value() == Tensor::matrix({{5, 6}, {1, 2}, {5, 6}}));
  g.backward(sum(rows));
  CHECK(g.grad(t) == Tensor::matrix({{1, 1}, {0, 0}, {2, 2}}));
  const std::vector<std::int32_t> bad{3};
  CHECK_THROWS_AS(embedding_lookup(t, bad), IndexError);
}

TEST_CASE("dropout is seeded and keeps the expectation") {
  const Tensor x(Shape{200, 50}, 1);
  CounterRng r1(5), r2(5);
  const Tensor a = eval([&](Graph& g) { return dropout(g.constant(x), Scalar(0.3), r1); });
  const Tensor b = eval([&](Graph& g) { return dropout(g.constant(x), Scalar(0.3), r2); });
  CHECK(a == b);
  double mean = 0;
  std::size_t zeros = 0;
  for (Scalar v : a.values()) {
    mean += v;
    if (v == 0) ++zeros;
    else CHECK(std::abs(v - 1 / 0.7) < 1e-12);
  }
  mean /= static_cast<double>(a.size());
  CHECK(std::abs(mean - 1) < 0.03);
  CHECK(std::abs(static_cast<double>(zeros) / a.size() - 0.3) < 0.02);
  CounterRng r3(5);
  CHECK(eval([&](Graph& g) { return dropout(g.constant(x), 0, r3); }) == x);
}

TEST_CASE("causal attention never reads the future") {
  AttentionShape s{1, 5, 2, 2, 3, 4};
  const Tensor q = random_tensor({5, 6}, 10);
  Tensor k = random_tensor({7, 6}, 11);
  Tensor v = random_tensor({7, 6}, 12);
  auto run = [&](const Tensor& kk, const Tensor& vv) {
    Graph g;
    return causal_attention(g.constant(q), g.constant(kk), g.constant(vv), Var{}, s, 0, nullptr).value();
  };
  const Tensor base = run(k, v);
  // Perturb the last key/value row (query position 4): rows 0..3 must not move.
  for (std::size_t c = 0; c < 6; ++c) {
    k.at(6, c) += 5;
    v.at(6, c) -= 3;
  }
  const Tensor moved = run(k, v);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < 6; ++c) CHECK(moved.at(t, c) == base.at(t, c));
  }
  bool last_changed = false;
  for (std::size_t c = 0; c < 6; ++c) last_changed = last_changed || moved.at(4, c) != base.at(4, c);
  CHECK(last_changed);
}

TEST_CASE("causal attention probabilities and relative bias") {
  AttentionShape s{1, 3, 1, 1, 2, 1};
  const Tensor q(Shape{3, 2}, 0);
  const Tensor kv = random_tensor({4, 2}, 3);
  Tensor probs;
  Graph g;
  const Tensor bias = Tensor::matrix({{std::log(2.0), 0}});
  causal_attention(g.constant(q), g.constant(kv), g.constant(kv), g.constant(bias), s, 0, nullptr, &probs);
  REQUIRE(probs.shape() == Shape{3, 4});
  // Zero queries: weights follow the bias only. Distance 0 gets weight 2, all
  // others (clamped to 1) weight 1.
  CHECK(std::abs(probs.at(0, 0) - 1.0 / 3) < 1e-12);
  CHECK(std::abs(probs.at(0, 1) - 2.0 / 3) < 1e-12);
  CHECK(probs.at(0, 2) == 0);
  CHECK(std::abs(probs.at(2, 3) - 2.0 / 5) < 1e-12);
  CHECK(std::abs(probs.at(2, 0) - 1.0 / 5) < 1e-12);
}

TEST_CASE("non-finite forward values raise NumericError") {
  Graph g;
  const Tensor big(Shape{1, 1}, std::numeric_limits<Scalar>::max());
  CHECK_THROWS_AS(scale(g.constant(big), 10), NumericError);
}

TEST_CASE("backward is deterministic") {
  const Tensor x = random_tensor({4, 6}, 9);
  const Tensor w = random_tensor({6, 3}, 10);
  auto grads = [&] {
    Graph g;
    Var wv = g.input(w);
    Var h = layer_norm(matmul(g.constant(x), wv), g.constant(Tensor({3}, 1)), g.constant(Tensor({3}, 0)), 1e-5);
    g.backward(cross_entropy(h, std::vector<std::int32_t>{0, 1, 2, 0}));
    return g.grad(wv);
  };
  CHECK(grads() == grads());
}

TEST_CASE("backward reaches every trainable leaf exactly once") {
  Parameter p{"p", Tensor::matrix({{1, 2}}), {}};
  p.zero_grad();
  Graph g;
  Var pv = g.param(p);
  Var y = add(pv, pv);
  g.backward(sum(scale(y, 3)));
  CHECK(p.grad == Tensor::matrix({{6, 6}}));
  Graph g2;
  Var frozen = g2.param(p, false);
  g2.backward(sum(frozen));
  CHECK(p.grad == Tensor::matrix({{6, 6}}));
}

TEST_CASE("every gradcheck case passes on a few seeds") {
  for (const GradcheckSummary& s : run_gradcheck_suite(5)) {
    INFO(s.name);
    CHECK(s.max_error < kGradcheckTolerance);
  }
}
