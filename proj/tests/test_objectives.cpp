#include <doctest.h>

#include "mtl/objectives.hpp"
#include "mtl/verify.hpp"

using namespace mtl;

TEST_CASE("weighted_ce of uniform logits is ln K") {
  Graph<double> g;
  Tensor<double> logits(Shape{2, 5, 3, 3});
  std::vector<uint8_t> target(18, 3);
  double l = weighted_ce(g, logits, target, ClassWeights<double>::uniform(5)).item();
  CHECK(std::abs(l - std::log(5.0)) < 1e-6);
}

TEST_CASE("weighted_ce saturates to zero on a confident correct prediction") {
  Graph<double> g;
  Tensor<double> logits(Shape{1, 5, 2, 2});
  std::vector<uint8_t> target(4, 2);
  for (int i = 0; i < 4; ++i) (*logits.data)[2 * 4 + i] = 30.0;
  double l = weighted_ce(g, logits, target, ClassWeights<double>::uniform(5)).item();
  CHECK(l >= 0.0);
  CHECK(l < 1e-9);
}

TEST_CASE("weighted_ce matches a pixelwise scalar reference") {
  // 2x2 mask with hand-set logits and weights [1,2,1,1,1]
  Rng rng(17);
  auto logits = rand_uniform<double>(Shape{1, 5, 2, 2}, rng, -2.0, 2.0);
  std::vector<uint8_t> target = {0, 1, 4, 2};
  ClassWeights<double> w{{1.0, 2.0, 1.0, 1.0, 1.0}};
  Graph<double> g;
  double got = weighted_ce(g, logits, target, w).item();

  double num = 0, z = 0;
  for (int px = 0; px < 4; ++px) {
    double mx = -1e300, se = 0;
    for (int k = 0; k < 5; ++k) mx = std::max(mx, (*logits.data)[k * 4 + px]);
    for (int k = 0; k < 5; ++k) se += std::exp((*logits.data)[k * 4 + px] - mx);
    double logp = (*logits.data)[target[px] * 4 + px] - mx - std::log(se);
    num += w.w[target[px]] * -logp;
    z += w.w[target[px]];
  }
  CHECK(got == doctest::Approx(num / z).epsilon(1e-12));
}

TEST_CASE("weighted_ce rejects out-of-range class indices naming the pixel") {
  Graph<double> g;
  Tensor<double> logits(Shape{1, 3, 2, 2});
  std::vector<uint8_t> target = {0, 1, 7, 2};
  try {
    weighted_ce(g, logits, target, ClassWeights<double>::uniform(3));
    FAIL("expected rejection");
  } catch (const tensor_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("7") != std::string::npos);
    CHECK(msg.find("(1,0)") != std::string::npos);  // row 1, col 0
  }
}

TEST_CASE("weighted_ce with uniform weights equals unweighted mean cross-entropy") {
  Rng rng(31);
  auto logits = rand_uniform<double>(Shape{2, 4, 3, 3}, rng, -3.0, 3.0);
  std::vector<uint8_t> target(18);
  for (auto& t : target) t = (uint8_t)rng.below(4);
  Graph<double> g;
  double weighted = weighted_ce(g, logits, target, ClassWeights<double>::uniform(4)).item();
  // plain mean of per-pixel CE
  auto ls = log_softmax(g, logits);
  double acc = 0;
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 9; ++i) acc += -ls[((int64_t)n * 4 + target[(int64_t)n * 9 + i]) * 9 + i];
  CHECK(weighted == doctest::Approx(acc / 18.0).epsilon(1e-6));
}

TEST_CASE("weighted_ce is invariant to constant logit shifts per pixel") {
  Rng rng(32);
  auto logits = rand_uniform<double>(Shape{1, 5, 2, 3}, rng, -2.0, 2.0);
  std::vector<uint8_t> target(6);
  for (auto& t : target) t = (uint8_t)rng.below(5);
  ClassWeights<double> w{{0.3, 2.0, 1.0, 0.5, 1.2}};
  Graph<double> g;
  double base = weighted_ce(g, logits, target, w).item();
  Tensor<double> shifted(logits.shape, *logits.data);
  for (int px = 0; px < 6; ++px) {
    double c = rng.uniform(-5.0, 5.0);
    for (int k = 0; k < 5; ++k) (*shifted.data)[k * 6 + px] += c;
  }
  double moved = weighted_ce(g, shifted, target, w).item();
  CHECK(std::abs(base - moved) < 1e-5);
}

TEST_CASE("bce_with_logit analytic values") {
  Graph<double> g;
  Tensor<double> z0(Shape{1, 1}, {0.0});
  CHECK(std::abs(bce_with_logit(g, z0, {1}).item() - std::log(2.0)) < 1e-6);

  Tensor<double> zbig(Shape{1, 1}, {30.0});
  CHECK(bce_with_logit(g, zbig, {1}).item() < 1e-9);

  Tensor<double> zneg(Shape{1, 1}, {-2.0});
  CHECK(bce_with_logit(g, zneg, {1}).item() ==
        doctest::Approx(std::log1p(std::exp(2.0))).epsilon(1e-9));  // ~2.12693
}

TEST_CASE("bce_with_logit validates inputs") {
  Graph<double> g;
  Tensor<double> z(Shape{2, 1});
  CHECK_THROWS_AS(bce_with_logit(g, z, {0}), tensor_error);
  CHECK_THROWS_AS(bce_with_logit(g, z, {0, 2}), tensor_error);
}

TEST_CASE("joint_loss endpoints and midpoint") {
  Graph<double> g;
  auto lc = g.leaf(Tensor<double>::scalar(2.0));
  auto ls = g.leaf(Tensor<double>::scalar(4.0));
  CHECK(joint_loss(g, lc, ls, 1.0).total.item() == 2.0);
  CHECK(joint_loss(g, lc, ls, 0.0).total.item() == 4.0);
  CHECK(joint_loss(g, lc, ls, 0.5).total.item() == 3.0);
  auto bundle = joint_loss(g, lc, ls, 0.25);
  CHECK(bundle.total.item() == 0.25 * bundle.l_cls + 0.75 * bundle.l_seg);
  CHECK_THROWS_AS(joint_loss(g, lc, ls, 1.5), tensor_error);
  CHECK_THROWS_AS(joint_loss(g, lc, ls, -0.1), tensor_error);
}

TEST_CASE("joint_loss is monotone in each component for fixed lambda") {
  Graph<double> g;
  auto a1 = g.leaf(Tensor<double>::scalar(1.0));
  auto a2 = g.leaf(Tensor<double>::scalar(1.5));
  auto b = g.leaf(Tensor<double>::scalar(2.0));
  CHECK(joint_loss(g, a2, b, 0.3).total.item() > joint_loss(g, a1, b, 0.3).total.item());
  CHECK(joint_loss(g, b, a2, 0.3).total.item() > joint_loss(g, b, a1, 0.3).total.item());
}

TEST_CASE("mean_dice simple values") {
  std::vector<uint8_t> gt = {0, 1, 2, 3, 4, 0, 1, 2};
  CHECK(mean_dice(gt, gt, 5).mean == 1.0);

  // disjoint lesion predictions score zero on those classes
  std::vector<uint8_t> p = {1, 0, 0, 0, 0, 0, 0, 0};
  std::vector<uint8_t> q = {0, 1, 0, 0, 0, 0, 0, 0};
  DiceResult d = mean_dice(p, q, 2);
  CHECK(d.per_class[1] == 0.0);

  // |P|=4, |G|=2, |P and G|=2 -> 2*2/(4+2)
  std::vector<uint8_t> pred(16, 0), gt2(16, 0);
  pred[0] = pred[1] = pred[2] = pred[3] = 1;
  gt2[0] = gt2[1] = 1;
  DiceResult d2 = mean_dice(pred, gt2, 5);
  CHECK(d2.per_class[1] == doctest::Approx(2.0 * 2.0 / 6.0).epsilon(1e-9));
}

TEST_CASE("mean_dice excludes classes absent from both masks") {
  std::vector<uint8_t> a(8, 0), b(8, 0);
  DiceResult d = mean_dice(a, b, 5);
  CHECK(d.present[0]);
  for (int k = 1; k < 5; ++k) CHECK(!d.present[k]);
  CHECK(d.mean == 1.0);  // only the healthy class participates
}

TEST_CASE("mean_dice is symmetric and relabeling invariant") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<uint8_t> a(32), b(32);
    for (auto& v : a) v = (uint8_t)rng.below(4);
    for (auto& v : b) v = (uint8_t)rng.below(4);
    CHECK(mean_dice(a, b, 4).mean == mean_dice(b, a, 4).mean);

    // permute class ids consistently in both masks
    std::vector<int> perm = {0, 1, 2, 3};
    fisher_yates(perm, rng);
    std::vector<uint8_t> ap(32), bp(32);
    for (int i = 0; i < 32; ++i) {
      ap[i] = (uint8_t)perm[a[i]];
      bp[i] = (uint8_t)perm[b[i]];
    }
    CHECK(mean_dice(ap, bp, 4).mean == doctest::Approx(mean_dice(a, b, 4).mean).epsilon(1e-12));
  }
  std::vector<uint8_t> c(3);
  CHECK_THROWS_AS(mean_dice(c, std::vector<uint8_t>(4), 2), tensor_error);
}

TEST_CASE("roc_auc analytic cases") {
  CHECK(roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
  CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), tensor_error);
}

TEST_CASE("roc_auc invariances") {
  Rng rng(44);
  std::vector<double> s(60);
  std::vector<int> y(60);
  for (auto& v : s) v = (double)rng.below(12) / 11.0;
  for (auto& v : y) v = (int)rng.below(2);
  y[0] = 1;
  y[1] = 0;
  double base = roc_auc(s, y);

  // strictly increasing transform preserves the ranking
  std::vector<double> warped(60);
  for (int i = 0; i < 60; ++i) warped[i] = std::exp(3.0 * s[i]) + 5.0;
  CHECK(roc_auc(warped, y) == base);

  // complementing labels flips the statistic
  std::vector<int> flipped(60);
  for (int i = 0; i < 60; ++i) flipped[i] = 1 - y[i];
  CHECK(roc_auc(s, flipped) == doctest::Approx(1.0 - base).epsilon(1e-12));

  // equals the pairwise oracle
  CHECK(roc_auc(s, y) == verify::roc_auc_pairwise(s, y));
}

TEST_CASE("compute_class_weights") {
  auto balanced = compute_class_weights<double>(std::vector<int64_t>{100, 100, 100, 100});
  for (double v : balanced.w) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

  // absent class hits the count floor but stays finite
  auto floored = compute_class_weights<double>(std::vector<int64_t>{10, 0, 10});
  for (double v : floored.w) CHECK(std::isfinite(v));
  CHECK(floored.w[1] > floored.w[0]);

  // counts [900,25,25,25,25]: weights proportional to 1/count, sum K
  std::vector<int64_t> counts = {900, 25, 25, 25, 25};
  auto w = compute_class_weights<double>(counts);
  double sum = 0;
  for (double v : w.w) sum += v;
  CHECK(sum == doctest::Approx(5.0).epsilon(1e-9));
  for (int k = 1; k < 5; ++k)
    CHECK(w.w[k] / w.w[0] == doctest::Approx(900.0 / 25.0).epsilon(1e-9));
}

TEST_CASE("loss gradients survive the oracle suite") {
  auto checks = verify::run_oracles();
  for (const auto& c : checks) {
    INFO(c.name << ": " << c.detail);
    CHECK(c.pass);
  }
}
