#include <doctest.h>

#include "mtl/verify.hpp"

using namespace mtl;

TEST_CASE("conv2d identity 1x1 kernel") {
  Graph<float> g;
  Tensor<float> x(Shape{1, 1, 3, 3}, 1.0f);
  Tensor<float> w(Shape{1, 1, 1, 1}, {1.0f});
  Tensor<float> b(Shape{1}, {0.0f});
  auto y = conv2d(g, x, w, b, 1, 0);
  CHECK(y.shape == Shape{1, 1, 3, 3});
  for (int64_t i = 0; i < 9; ++i) CHECK(y[i] == 1.0f);
}

TEST_CASE("conv2d 3x3 all-ones sums nine ones") {
  Graph<float> g;
  Tensor<float> x(Shape{1, 1, 3, 3}, 1.0f);
  Tensor<float> w(Shape{1, 1, 3, 3}, 1.0f);
  Tensor<float> b(Shape{1}, {0.0f});
  auto y = conv2d(g, x, w, b, 1, 0);
  CHECK(y.shape == Shape{1, 1, 1, 1});
  CHECK(y[0] == 9.0f);
}

TEST_CASE("conv2d matches the six-loop reference on a strided padded case") {
  Rng rng(5);
  auto x = rand_uniform<float>(Shape{2, 3, 8, 8}, rng, -1.0, 1.0);
  auto w = rand_uniform<float>(Shape{4, 3, 3, 3}, rng, -1.0, 1.0);
  auto b = rand_uniform<float>(Shape{4}, rng, -1.0, 1.0);
  Graph<float> g;
  auto y = conv2d(g, x, w, b, 2, 1);
  std::vector<double> xd(x.data->begin(), x.data->end());
  std::vector<double> wd(w.data->begin(), w.data->end());
  std::vector<double> bd(b.data->begin(), b.data->end());
  std::vector<double> ref;
  verify::conv2d_reference(xd, wd, bd, ref, 2, 3, 8, 8, 4, 3, 3, 2, 1);
  REQUIRE((int64_t)ref.size() == y.numel());
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(std::abs((double)y[i] - ref[i]) < 1e-5);
}

TEST_CASE("conv2d rejects bad shapes with a diagnostic naming both") {
  Graph<float> g;
  Tensor<float> x(Shape{1, 2, 4, 4});
  Tensor<float> w(Shape{1, 3, 3, 3});
  Tensor<float> b(Shape{1});
  try {
    conv2d(g, x, w, b, 1, 0);
    FAIL("expected shape mismatch");
  } catch (const tensor_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("[1,2,4,4]") != std::string::npos);
    CHECK(msg.find("[1,3,3,3]") != std::string::npos);
  }
  Tensor<float> w2(Shape{1, 2, 5, 5});
  CHECK_THROWS_AS(conv2d(g, x, w2, b, 1, 0), tensor_error);  // kernel larger than input
  Tensor<float> w3(Shape{1, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(g, x, w3, b, 0, 0), tensor_error);
  CHECK_THROWS_AS(conv2d(g, x, w3, b, 1, -1), tensor_error);
}

TEST_CASE("relu values and subgradient") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{3}, {-1.0, 0.0, 2.0}));
  auto y = relu(g, x);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 2.0);

  Graph<double> g2;
  auto x2 = g2.leaf(Tensor<double>(Shape{2}, {-1.0, 2.0}));
  g2.backward(sum(g2, relu(g2, x2)));
  CHECK(g2.grad(x2.node)[0] == 0.0);
  CHECK(g2.grad(x2.node)[1] == 1.0);

  Graph<double> g3;  // all-positive input passes through unchanged
  auto x3 = g3.leaf(Tensor<double>(Shape{3}, {0.5, 1.0, 7.0}));
  auto y3 = relu(g3, x3);
  CHECK(*y3.data == *x3.data);
}

TEST_CASE("batch_norm on constant input gives beta") {
  Graph<float> g;
  Tensor<float> x(Shape{2, 1, 2, 2}, 3.7f);
  Tensor<float> gamma(Shape{1}, {1.0f});
  Tensor<float> beta(Shape{1}, {0.0f});
  Tensor<float> rm(Shape{1}), rv(Shape{1}, 1.0f);
  auto y = batch_norm(g, x, gamma, beta, rm, rv, true);
  // f32 summation leaves (x - mean) at rounding scale; the eps guard keeps
  // the quotient near zero instead of 0/0
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i]) < 2e-3f);

  Tensor<float> gamma0(Shape{1}, {0.0f});
  Tensor<float> betab(Shape{1}, {2.5f});
  auto y2 = batch_norm(g, x, gamma0, betab, rm, rv, true);
  for (int64_t i = 0; i < y2.numel(); ++i) CHECK(y2[i] == 2.5f);
}

TEST_CASE("batch_norm train output has unit moments per channel") {
  Rng rng(21);
  auto x = rand_uniform<double>(Shape{4, 2, 3, 3}, rng, -2.0, 5.0);
  Graph<double> g;
  Tensor<double> gamma(Shape{2}, 1.0), beta(Shape{2}), rm(Shape{2}), rv(Shape{2}, 1.0);
  auto y = batch_norm(g, x, gamma, beta, rm, rv, true);
  // recompute the moments from the output
  for (int c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    int64_t cnt = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 9; ++i) {
        m += y[((int64_t)n * 2 + c) * 9 + i];
        ++cnt;
      }
    m /= cnt;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 9; ++i) {
        double d = y[((int64_t)n * 2 + c) * 9 + i] - m;
        v += d * d;
      }
    v /= cnt;
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(v - 1.0) < 1e-3);
  }
}

TEST_CASE("batch_norm updates running stats with momentum 0.9 and eval uses them") {
  Graph<float> g;
  Tensor<float> x(Shape{1, 1, 2, 2}, {2.0f, 2.0f, 6.0f, 6.0f});  // mean 4, var 4
  Tensor<float> gamma(Shape{1}, {1.0f}), beta(Shape{1});
  Tensor<float> rm(Shape{1}), rv(Shape{1}, 1.0f);
  batch_norm(g, x, gamma, beta, rm, rv, true);
  CHECK(rm[0] == doctest::Approx(0.9f * 0.0f + 0.1f * 4.0f));
  CHECK(rv[0] == doctest::Approx(0.9f * 1.0f + 0.1f * 4.0f));

  auto y = batch_norm(g, x, gamma, beta, rm, rv, false);
  float inv = 1.0f / std::sqrt(rv[0] + 1e-5f);
  CHECK(y[0] == doctest::Approx((2.0f - rm[0]) * inv));
}

TEST_CASE("batch_norm rejects a single-element train batch") {
  Graph<float> g;
  Tensor<float> x(Shape{1, 3, 1, 1});
  Tensor<float> gamma(Shape{3}, 1.0f), beta(Shape{3}), rm(Shape{3}), rv(Shape{3}, 1.0f);
  CHECK_THROWS_AS(batch_norm(g, x, gamma, beta, rm, rv, true), tensor_error);
  CHECK_NOTHROW(batch_norm(g, x, gamma, beta, rm, rv, false));
}

TEST_CASE("global_avg_pool values") {
  Graph<float> g;
  Tensor<float> c(Shape{2, 3, 4, 4}, 1.25f);
  auto y = global_avg_pool(g, c);
  CHECK(y.shape == Shape{2, 3});
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(1.25f));

  Tensor<float> one(Shape{1, 2, 1, 1}, {3.0f, -1.0f});  // H=W=1 is an identity reshape
  auto y2 = global_avg_pool(g, one);
  CHECK(y2[0] == 3.0f);
  CHECK(y2[1] == -1.0f);

  Tensor<float> q(Shape{1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  CHECK(global_avg_pool(g, q)[0] == doctest::Approx(2.5f));
}

TEST_CASE("upsample_bilinear identity, constant, and reference") {
  Rng rng(2);
  auto x = rand_uniform<float>(Shape{1, 2, 3, 5}, rng);
  Graph<float> g;
  auto same = upsample_bilinear(g, x, 3, 5);
  CHECK(*same.data == *x.data);  // bit-identical

  Tensor<float> c(Shape{1, 1, 2, 2}, 0.75f);
  auto up = upsample_bilinear(g, c, 7, 9);
  for (int64_t i = 0; i < up.numel(); ++i) CHECK(up[i] == doctest::Approx(0.75f));

  Tensor<double> q(Shape{1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  Graph<double> gd;
  auto u4 = upsample_bilinear(gd, q, 4, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(u4[(int64_t)i * 4 + j] ==
            doctest::Approx(verify::bilinear_reference(*q.data, 2, 2, 4, 4, i, j)));

  CHECK_THROWS_AS(upsample_bilinear(g, x, 2, 5), tensor_error);  // no downsampling
}

TEST_CASE("linear identity, bias broadcast, and matmul reference") {
  Graph<float> g;
  Tensor<float> eye(Shape{3, 3});
  for (int i = 0; i < 3; ++i) (*eye.data)[i * 3 + i] = 1.0f;
  Rng rng(8);
  auto x = rand_uniform<float>(Shape{2, 3}, rng);
  Tensor<float> b0(Shape{3});
  auto y = linear(g, x, eye, b0);
  CHECK(*y.data == *x.data);

  Tensor<float> zeros(Shape{2, 3});
  Tensor<float> b(Shape{3}, {0.5f, -1.0f, 2.0f});
  auto y2 = linear(g, zeros, eye, b);
  for (int n = 0; n < 2; ++n)
    for (int m = 0; m < 3; ++m) CHECK(y2[(int64_t)n * 3 + m] == b[m]);

  auto a = rand_uniform<float>(Shape{3, 4}, rng, -1.0, 1.0);
  auto w = rand_uniform<float>(Shape{4, 2}, rng, -1.0, 1.0);
  auto bb = rand_uniform<float>(Shape{2}, rng, -1.0, 1.0);
  auto out = linear(g, a, w, bb);
  for (int n = 0; n < 3; ++n)
    for (int m = 0; m < 2; ++m) {
      double acc = bb[m];
      for (int d = 0; d < 4; ++d)
        acc += (double)a[(int64_t)n * 4 + d] * (double)w[(int64_t)d * 2 + m];
      CHECK(std::abs(out[(int64_t)n * 2 + m] - acc) < 1e-5);
    }

  Tensor<float> wbad(Shape{5, 2});
  CHECK_THROWS_AS(linear(g, a, wbad, bb), tensor_error);
}

TEST_CASE("gradcheck flags a deliberately wrong backward") {
  // a relu clone whose backward has the sign flipped; the checker must
  // reject it, otherwise it could not vouch for the real ops
  auto sabotaged = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
    const Tensor<double>& x = in[0];
    Tensor<double> y(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = std::max(0.0, x[i]);
    int xn = x.node;
    auto xv = x;
    int64_t n = x.numel();
    y.node = g.emit(Op::relu, {xn}, y, [xn, xv, n](Graph<double>& gg, int self) {
      const double* gy = gg.grad(self).data();
      double* dx = gg.grad(xn).data();
      for (int64_t i = 0; i < n; ++i)
        if (xv[i] > 0.0) dx[i] -= gy[i];  // wrong sign
    });
    return sum(g, y);
  };
  Rng rng(99);
  Tensor<double> x(Shape{6});
  for (auto& v : *x.data) v = rng.uniform() < 0.5 ? rng.uniform(-1.5, -0.2) : rng.uniform(0.2, 1.5);
  auto stats = verify::grad_check({x}, sabotaged);
  CHECK(!stats.pass);
}

TEST_CASE("gradcheck suite passes at reduced case count") {
  auto checks = verify::run_gradcheck(25);
  for (const auto& c : checks) {
    INFO(c.name << ": " << c.detail);
    CHECK(c.pass);
  }
}
