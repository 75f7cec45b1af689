#include <doctest.h>

#include "mtl/ops.hpp"

using namespace mtl;

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor<float>(Shape{}), tensor_error);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 0}), tensor_error);
  CHECK_THROWS_AS(Tensor<float>(Shape{3}, std::vector<float>{1.0f}), tensor_error);
  Tensor<float> s = Tensor<float>::scalar(2.5f);
  CHECK(s.shape == Shape{1});
  CHECK(s.item() == 2.5f);
  Tensor<float> t(Shape{2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(t.item(), tensor_error);
}

TEST_CASE("backward of sum gives ones") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{3}, {1.0, 2.0, 3.0}));
  auto s = sum(g, x);
  g.backward(s);
  for (int i = 0; i < 3; ++i) CHECK(g.grad(x.node)[i] == 1.0);
}

TEST_CASE("backward of sum of squares") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{2}, {1.0, 2.0}));
  auto s = sum(g, mul(g, x, x));
  g.backward(s);
  CHECK(g.grad(x.node)[0] == doctest::Approx(2.0));
  CHECK(g.grad(x.node)[1] == doctest::Approx(4.0));
}

TEST_CASE("backward rejects non-scalar roots and reuse") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{2}, {1.0, 2.0}));
  auto y = mul(g, x, x);
  CHECK_THROWS_AS(g.backward(y), graph_error);
  auto s = sum(g, y);
  g.backward(s);
  CHECK_THROWS_AS(g.backward(s), graph_error);  // tape already consumed
  g.reset();
  CHECK(g.size() == 0);
}

TEST_CASE("every node reachable from the root gets a grad buffer of its shape") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{2, 2}, {1.0, -2.0, 3.0, 0.5}));
  auto y = relu(g, x);
  auto z = sigmoid(g, y);
  auto s = mean(g, z);
  g.backward(s);
  for (int id = 0; id <= s.node; ++id)
    CHECK((int64_t)g.grad(id).size() == shape_numel(g.node_shape(id)));
}

TEST_CASE("gradients accumulate over all paths") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{1}, {3.0}));
  auto y = add(g, x, x);  // dy/dx = 2
  g.backward(sum(g, y));
  CHECK(g.grad(x.node)[0] == 2.0);
}

TEST_CASE("rng streams are deterministic and independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.u64() == b.u64());
  CHECK(mix_seed(1, stream::data, 0) != mix_seed(1, stream::init, 0));
  CHECK(mix_seed(1, stream::data, 0) != mix_seed(1, stream::data, 1));
  CHECK(mix_seed(1, stream::data, 7) == mix_seed(1, stream::data, 7));
}

TEST_CASE("seeded tensor fills") {
  Rng rng(7);
  auto u = rand_uniform<float>(Shape{1000}, rng, -2.0, 3.0);
  for (int64_t i = 0; i < u.numel(); ++i) {
    CHECK(u[i] >= -2.0f);
    CHECK(u[i] < 3.0f);
  }
  auto n = rand_normal<double>(Shape{4000}, rng, 1.0, 2.0);
  double m = 0;
  for (int64_t i = 0; i < n.numel(); ++i) m += n[i];
  m /= n.numel();
  CHECK(m == doctest::Approx(1.0).epsilon(0.2));
}

TEST_CASE("fisher_yates shuffle is deterministic and a permutation") {
  std::vector<int> v(100), w(100);
  for (int i = 0; i < 100; ++i) v[i] = w[i] = i;
  Rng r1(9), r2(9);
  fisher_yates(v, r1);
  fisher_yates(w, r2);
  CHECK(v == w);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("thread count does not change results bit for bit") {
  Rng rng(11);
  auto x = rand_uniform<float>(Shape{3, 8, 10, 10}, rng, -1.0, 1.0);
  auto w = rand_uniform<float>(Shape{16, 8, 3, 3}, rng, -1.0, 1.0);
  auto b = rand_uniform<float>(Shape{16}, rng, -1.0, 1.0);

  auto run = [&](int threads) {
    set_threads(threads);
    Graph<float> g;
    auto xt = g.leaf(x), wt = g.leaf(w), bt = g.leaf(b);
    auto y = conv2d(g, xt, wt, bt, 1, 1);
    auto s = sum(g, y);
    g.backward(s);
    std::vector<float> out = *y.data;
    out.insert(out.end(), g.grad(wt.node).begin(), g.grad(wt.node).end());
    out.insert(out.end(), g.grad(xt.node).begin(), g.grad(xt.node).end());
    set_threads(1);
    return out;
  };
  auto r1 = run(1), r4 = run(4);
  REQUIRE(r1.size() == r4.size());
  for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r4[i]);
}

TEST_CASE("elementwise plumbing") {
  Graph<double> g;
  auto a = g.leaf(Tensor<double>(Shape{3}, {1.0, 2.0, 3.0}));
  auto b = g.leaf(Tensor<double>(Shape{3}, {0.5, -1.0, 2.0}));
  auto c = add(g, a, b);
  CHECK(c[1] == 1.0);
  auto m = mul(g, a, b);
  CHECK(m[2] == 6.0);
  auto sc = scale(g, a, 2.0);
  CHECK(sc[0] == 2.0);
  CHECK(mean(g, a).item() == doctest::Approx(2.0));
  CHECK_THROWS_AS(add(g, a, g.leaf(Tensor<double>(Shape{2}))), tensor_error);
  CHECK_THROWS_AS(reshape(g, a, Shape{2, 2}), tensor_error);
  auto r = reshape(g, a, Shape{3, 1});
  CHECK(r.shape == Shape{3, 1});
}

TEST_CASE("log_softmax normalizes and is shift invariant") {
  Rng rng(3);
  auto x = rand_uniform<double>(Shape{2, 4, 3, 3}, rng, -2.0, 2.0);
  Graph<double> g;
  auto y = log_softmax(g, x);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 9; ++i) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += std::exp(y[((int64_t)n * 4 + k) * 9 + i]);
      CHECK(s == doctest::Approx(1.0));
    }
  Tensor<double> shifted(x.shape, *x.data);
  for (auto& v : *shifted.data) v += 7.25;
  auto y2 = log_softmax(g, shifted);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y2[i] == doctest::Approx(y[i]).epsilon(1e-9));
}

TEST_CASE("forward and backward are bit-deterministic across repeat runs") {
  auto run = [] {
    Rng rng(123);
    auto x = rand_uniform<float>(Shape{2, 4, 8, 8}, rng, -1.0, 1.0);
    auto w = rand_uniform<float>(Shape{4, 4, 3, 3}, rng, -0.5, 0.5);
    auto b = rand_uniform<float>(Shape{4}, rng);
    Graph<float> g;
    auto xt = g.leaf(x), wt = g.leaf(w), bt = g.leaf(b);
    auto y = relu(g, conv2d(g, xt, wt, bt, 1, 1));
    auto s = mean(g, y);
    g.backward(s);
    auto out = *y.data;
    out.insert(out.end(), g.grad(wt.node).begin(), g.grad(wt.node).end());
    return out;
  };
  auto a = run(), b = run();
  CHECK(a == b);
}
