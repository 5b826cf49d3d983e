#include "doctest.h"

#include <cmath>
#include <random>

#include "codeunlearn/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace cu;
using cu::testing::grad_check;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(s), 0.0, true);
  std::normal_distribution<double> n(0.0, scale);
  for (double& x : t.data) x = n(rng);
  return t;
}

}  // namespace

TEST_CASE("matmul forward on identity cases") {
  Graph g(false);
  Var a = g.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  Var eye = g.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  CHECK(matmul(a, eye).value().data == std::vector<double>{1, 2, 3, 4});
  Var col = g.constant(Tensor({2, 1}, {5, 7}));
  CHECK(matmul(eye, col).value().data == std::vector<double>{5, 7});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Graph g(false);
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

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({3, 2}, rng);
  Tensor w = random_tensor({4, 2}, rng);
  auto build = [&](Graph& g) { return sum(mul(matmul(g.param(a), g.param(b)), g.constant(w))); };
  auto r = grad_check(build, {&a, &b});
  CHECK(r.rel_error <= 1e-6);
}

TEST_CASE("relu forward, gradient and idempotence") {
  Graph g;
  Tensor x({2}, {-1.0, 2.0}, true);
  Var xv = g.param(x);
  Var y = relu(xv);
  CHECK(y.value().data == std::vector<double>{0.0, 2.0});
  x.zero_grad();
  g.backward(sum(y));
  CHECK(x.grad == std::vector<double>{0.0, 1.0});

  Graph g2(false);
  Var z = relu(g2.constant(Tensor({2}, {0.0, 0.0})));
  CHECK(z.value().data == std::vector<double>{0.0, 0.0});

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Graph h(false);
    Var v = h.constant(random_tensor({5, 4}, rng));
    CHECK(relu(relu(v)).value().data == relu(v).value().data);
  }
}

TEST_CASE("layer_norm hand values and zero-variance rows") {
  Graph g(false);
  Var gain = g.constant(Tensor({2}, {1, 1}));
  Var bias = g.constant(Tensor({2}, {0, 0}));
  Var y = layer_norm(g.constant(Tensor({1, 2}, {1, 3})), gain, bias, 0.0);
  CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-12));

  Var g4 = g.constant(Tensor({4}, 1.0));
  Var b4 = g.constant(Tensor({4}, 0.0));
  Var c = layer_norm(g.constant(Tensor({1, 4}, 3.5)), g4, b4, 1e-5);
  for (double v : c.value().data) CHECK(v == 0.0);

  CHECK_THROWS_AS(layer_norm(g.constant(Tensor({1, 3}, 1.0)), gain, bias), DimensionError);
}

TEST_CASE("layer_norm output has zero mean and unit variance per row") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g(false);
    const std::size_t d = 2 + trial % 9;
    Var x = g.constant(random_tensor({3, d}, rng, 4.0));
    Var y = layer_norm(x, g.constant(Tensor({d}, 1.0)), g.constant(Tensor({d}, 0.0)), 1e-14);
    for (std::size_t r = 0; r < 3; ++r) {
      double m = 0.0, v = 0.0;
      for (std::size_t c = 0; c < d; ++c) m += y.value().at(r, c);
      m /= static_cast<double>(d);
      for (std::size_t c = 0; c < d; ++c) v += (y.value().at(r, c) - m) * (y.value().at(r, c) - m);
      v /= static_cast<double>(d);
      CHECK(std::abs(m) <= 1e-9);
      CHECK(std::abs(v - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("layer_norm gradient matches finite differences") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor gain = random_tensor({5}, rng);
  Tensor bias = random_tensor({5}, rng);
  Tensor w = random_tensor({3, 5}, rng);
  auto build = [&](Graph& g) {
    return sum(mul(layer_norm(g.param(x), g.param(gain), g.param(bias), 1e-5), g.constant(w)));
  };
  CHECK(grad_check(build, {&x, &gain, &bias}).rel_error <= 1e-5);
}

TEST_CASE("softmax_cross_entropy examples") {
  Graph g(false);
  const int t0[] = {0};
  CHECK(softmax_cross_entropy(g.constant(Tensor({1, 2}, {0, 0})), t0, -100).value()[0] ==
        doctest::Approx(0.6931471805599453).epsilon(1e-12));
  CHECK(softmax_cross_entropy(g.constant(Tensor({1, 2}, {10, -10})), t0, -100).value()[0] <= 1e-4);
  const int ignored[] = {-100, -100};
  CHECK(softmax_cross_entropy(g.constant(Tensor({2, 2}, {1, 2, 3, 4})), ignored, -100).value()[0] == 0.0);
  const int bad[] = {2};
  CHECK_THROWS_AS(softmax_cross_entropy(g.constant(Tensor({1, 2}, {0, 0})), bad, -100), IndexError);
}

TEST_CASE("backward seeds, accumulates and refuses misuse") {
  Tensor x({1}, {3.0}, true);
  {
    Graph g;
    x.zero_grad();
    Var xv = g.param(x);
    g.backward(sum(mul(xv, xv)));
    CHECK(x.grad[0] == doctest::Approx(6.0));
  }
  Tensor y({4}, {1, -2, 3, 0.5}, true);
  {
    Graph g;
    y.zero_grad();
    g.backward(sum(g.param(y)));
    CHECK(y.grad == std::vector<double>{1, 1, 1, 1});
  }
  {
    Graph g;
    Var v = g.param(y);
    CHECK_THROWS_AS(g.backward(v), ContractError);
  }
  {
    Graph g;
    Var loss = sum(g.param(y));
    g.backward(loss);
    CHECK_THROWS_AS(g.backward(loss), StateError);
    g.reset();
    g.backward(sum(g.param(y)));
  }
}

TEST_CASE("composite matmul-relu-cross-entropy gradient") {
  std::mt19937_64 rng(21);
  Tensor x = random_tensor({6, 4}, rng);
  Tensor w1 = random_tensor({4, 5}, rng);
  Tensor b1 = random_tensor({5}, rng);
  Tensor w2 = random_tensor({5, 3}, rng);
  const std::vector<int> targets{0, 2, 1, -1, 2, 0};
  auto build = [&](Graph& g) {
    Var h = relu(linear(g.param(x), g.param(w1), g.param(b1)));
    return softmax_cross_entropy(matmul(h, g.param(w2)), targets, -1);
  };
  CHECK(grad_check(build, {&x, &w1, &b1, &w2}).rel_error <= 1e-4);
}

TEST_CASE("attention gradient with padding and causal masks") {
  std::mt19937_64 rng(99);
  const std::size_t B = 2, Lq = 3, Lk = 4, d = 4;
  Tensor q = random_tensor({B * Lq, d}, rng);
  Tensor k = random_tensor({B * Lk, d}, rng);
  Tensor v = random_tensor({B * Lk, d}, rng);
  Tensor w = random_tensor({B * Lq, d}, rng);
  const std::vector<std::uint8_t> valid{1, 1, 1, 0, 1, 1, 0, 0};
  for (bool causal : {false, true}) {
    const AttentionShape shape{B, Lq, Lk, 2, causal};
    auto build = [&](Graph& g) {
      return sum(mul(attention(g.param(q), g.param(k), g.param(v), shape, valid), g.constant(w)));
    };
    CHECK(grad_check(build, {&q, &k, &v}).rel_error <= 1e-6);
  }
}

TEST_CASE("embedding, masked_mse and dropout gradients") {
  std::mt19937_64 rng(4);
  Tensor table = random_tensor({5, 3}, rng);
  Tensor other = random_tensor({4, 3}, rng);
  const std::vector<int> ids{4, 0, 4, 2};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  auto build = [&](Graph& g) {
    Var e = dropout(embedding(g.param(table), ids), 0.3, 17);
    return masked_mse(e, g.param(other), mask);
  };
  CHECK(grad_check(build, {&table, &other}).rel_error <= 1e-6);

  Graph g(false);
  const int bad_ids[] = {5};
  CHECK_THROWS_AS(embedding(g.param(table), bad_ids), IndexError);
}

TEST_CASE("adam_step closed forms and counters") {
  Tensor p({1}, {1.0}, true);
  std::vector<Tensor*> params{&p};
  AdamState st;
  st.lr = 0.1;
  p.grad = {1.0};
  adam_step(params, st);
  CHECK(p.data[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p.grad[0] == 0.0);
  CHECK(st.step == 1);

  Tensor q({3}, {1.0, -2.0, 0.5}, true);
  std::vector<Tensor*> qs{&q};
  AdamState st2;
  q.zero_grad();
  adam_step(qs, st2);
  CHECK(q.data == std::vector<double>{1.0, -2.0, 0.5});
  adam_step(qs, st2);
  CHECK(st2.step == 2);

  Tensor r({2}, 0.0, true);
  std::vector<Tensor*> rs{&r};
  AdamState st3;
  CHECK_THROWS_AS(adam_step(rs, st3), StateError);
}

TEST_CASE("forward results are bitwise deterministic") {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor w = random_tensor({6, 6}, rng);
  Tensor b = random_tensor({6}, rng);
  auto run = [&] {
    Graph g(false);
    Var h = linear(g.param(x), g.param(w), g.param(b));
    const AttentionShape shape{2, 2, 2, 3, true};
    const std::vector<std::uint8_t> valid(4, 1);
    return attention(h, h, h, shape, valid).value().data;
  };
  CHECK(run() == run());
}
