#include <cmath>
#include <random>

#include <doctest.h>

#include "avsync/error.hpp"
#include "avsync/graph.hpp"
#include "ops.hpp"

using namespace avsync;

TEST_CASE("tensor construction checks sizes") {
  CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  const Tensor t = Tensor::matrix(2, 2, {1, 2, 3, 4});
  CHECK(t.at(1, 0) == 3);
  CHECK(t.size() == 4);
  CHECK(shape_size({}) == 1);
  CHECK_THROWS_AS(Tensor::vector({1, 2}).item(), ShapeError);
}

TEST_CASE("forward examples") {
  Graph g;
  Var x = g.input(Tensor::vector({-1, 0, 2}));
  CHECK(g.value(g.relu(x)).values() == std::vector<double>{0, 0, 2});

  Var z = g.input(Tensor::vector({0, 0, 0}));
  for (double v : g.value(g.log_softmax(z)).data()) CHECK(v == doctest::Approx(-std::log(3.0)).epsilon(1e-15));

  Var a = g.input(Tensor(Shape{2, 3}, 1.0));
  Var b = g.input(Tensor(Shape{3, 4}, 1.0));
  CHECK(g.shape(g.matmul(a, b)) == Shape{2, 4});
  CHECK(g.value(g.matmul(a, b))[0] == 3.0);

  Var c = g.input(Tensor::vector({-3, 0.5, 9}));
  CHECK(g.value(g.clamp(c, -1, 1)).values() == std::vector<double>{-1, 0.5, 1});
  CHECK(g.value(g.sign(c)).values() == std::vector<double>{-1, 1, 1});
}

TEST_CASE("shape mismatch names both shapes") {
  Graph g;
  Var a = g.input(Tensor(Shape{2, 3}));
  Var b = g.input(Tensor(Shape{2, 2}));
  try {
    g.matmul(a, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(g.add(a, b), ShapeError);
}

TEST_CASE("backward examples") {
  Graph g;
  Var x = g.input(Tensor::vector({1, 2, 3}));
  const Gradients gr = g.backward(g.sum(g.mul(x, x)));
  CHECK(gr[x].values() == std::vector<double>{2, 4, 6});

  Graph h;
  Var y = h.input(Tensor::vector({-1, 2, 3}));
  const Gradients gs = h.backward(h.sum(h.sign(y)));
  CHECK(gs[y].values() == std::vector<double>{0, 0, 0});
}

TEST_CASE("non-scalar loss is rejected") {
  Graph g;
  Var x = g.input(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(g.backward(x), ShapeError);
}

TEST_CASE("parameters off the loss path get exactly zero gradient") {
  Graph g;
  Var x = g.input(Tensor::vector({1, 2}));
  Var unused = g.input(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  g.relu(unused);
  const Gradients gr = g.backward(g.sum(x));
  CHECK(gr[unused].shape() == Shape{2, 2});
  for (double v : gr[unused].data()) CHECK(v == 0.0);
}

TEST_CASE("clamp passes gradient only strictly inside the range") {
  Graph g;
  Var x = g.input(Tensor::vector({-2, -1, 0, 1, 2}));
  const Gradients gr = g.backward(g.sum(g.clamp(x, -1, 1)));
  CHECK(gr[x].values() == std::vector<double>{0, 0, 1, 0, 0});
}

TEST_CASE("grad_check examples") {
  const Tensor three = Tensor::vector({3.0});
  CHECK(grad_check([](Graph& g, Var x) { return g.sum(g.mul(x, x)); }, three, 1e-5) < 1e-8);
  CHECK(grad_check([](Graph& g, Var) { return g.sum(g.constant(Tensor::vector({1.0}))); }, three, 1e-5) == 0.0);
}

TEST_CASE("random two-layer network matches central differences") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor w1(Shape{4, 5}), w2(Shape{5, 3}), x(Shape{2, 4});
    for (double& v : w1.data()) v = n(rng);
    for (double& v : w2.data()) v = n(rng);
    for (double& v : x.data()) v = n(rng);
    auto f = [&](Graph& g, Var in) {
      Var h = g.tanh(g.matmul(in, g.constant(w1)));
      Var o = g.log_softmax(g.matmul(h, g.constant(w2)));
      return g.mean(g.mean(o, 1), 0);
    };
    CHECK(grad_check(f, x, 1e-5) < 1e-4);
  }
}

TEST_CASE("every differentiable op passes grad_check on random points") {
  for (const auto& op : test_ops::all_ops()) {
    CAPTURE(op.name);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const Tensor p = test_ops::random_point(op, seed);
      CHECK(grad_check(op.f, p, 1e-5) < 1e-4);
    }
  }
}

TEST_CASE("backward is bit-identical across runs") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor x(Shape{3, 4});
  for (double& v : x.data()) v = n(rng);
  auto run = [&] {
    Graph g;
    Var in = g.input(x);
    Var l = g.sum(g.tanh(g.matmul(in, g.reshape(in, Shape{4, 3}))));
    return g.backward(l)[in];
  };
  CHECK(run() == run());
}

TEST_CASE("gradient is linear in the loss") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor x(Shape{6});
  for (double& v : x.data()) v = n(rng);
  const double a = 1.7, b = -0.4;
  auto grad = [&](int which) {
    Graph g;
    Var in = g.input(x);
    Var f = g.sum(g.tanh(in));
    Var h = g.sum(g.mul(in, in));
    Var l = which == 0 ? f : which == 1 ? h : g.add(g.scale(f, a), g.scale(h, b));
    return g.backward(l)[in];
  };
  const Tensor gf = grad(0), gh = grad(1), gc = grad(2);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(gc[i] - (a * gf[i] + b * gh[i])) < 1e-12);
}

TEST_CASE("mean over a middle axis") {
  Graph g;
  Var x = g.input(Tensor(Shape{2, 3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}));
  const Tensor m = g.value(g.mean(x, 1));
  CHECK(m.shape() == Shape{2, 2});
  CHECK(m.values() == std::vector<double>{3, 4, 9, 10});
}

TEST_CASE("gather and concat") {
  Graph g;
  Var a = g.input(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var b = g.input(Tensor::matrix(2, 1, {5, 6}));
  const Var parts[] = {a, b};
  Var c = g.concat(parts, 1);
  CHECK(g.value(c).values() == std::vector<double>{1, 2, 5, 3, 4, 6});
  Var s = g.gather(c, {2, 5, 0});
  CHECK(g.value(s).values() == std::vector<double>{5, 6, 1});
  const Gradients gr = g.backward(g.sum(s));
  CHECK(gr[a].values() == std::vector<double>{1, 0, 0, 0});
  CHECK(gr[b].values() == std::vector<double>{1, 1});
}
