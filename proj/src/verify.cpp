#include "mtl/verify.hpp"

#include <cstdio>

namespace mtl::verify {

// ---------------------------------------------------------------------------
// references

void conv2d_reference(const std::vector<double>& x, const std::vector<double>& w,
                      const std::vector<double>& b, std::vector<double>& y, int N, int C, int H,
                      int W, int F, int KH, int KW, int stride, int pad) {
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  y.assign((size_t)N * F * OH * OW, 0.0);
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double acc = b[f];
          for (int c = 0; c < C; ++c)
            for (int kh = 0; kh < KH; ++kh)
              for (int kw = 0; kw < KW; ++kw) {
                int ih = oh * stride + kh - pad;
                int iw = ow * stride + kw - pad;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[(((size_t)n * C + c) * H + ih) * W + iw] *
                       w[(((size_t)f * C + c) * KH + kh) * KW + kw];
              }
          y[(((size_t)n * F + f) * OH + oh) * OW + ow] = acc;
        }
}

double roc_auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
  double num = 0.0;
  int64_t n_pos = 0, n_neg = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) continue;
    ++n_pos;
    for (size_t j = 0; j < labels.size(); ++j) {
      if (labels[j]) continue;
      if (scores[i] > scores[j])
        num += 1.0;
      else if (scores[i] == scores[j])
        num += 0.5;
    }
  }
  for (int v : labels) n_neg += !v;
  return num / ((double)n_pos * (double)n_neg);
}

DiceResult mean_dice_reference(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                               int k_classes) {
  DiceResult r;
  r.per_class.assign(k_classes, std::numeric_limits<double>::quiet_NaN());
  r.present.assign(k_classes, false);
  double acc = 0.0;
  int included = 0;
  for (int k = 0; k < k_classes; ++k) {
    std::vector<int64_t> p_set, g_set;
    for (size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == k) p_set.push_back((int64_t)i);
      if (gt[i] == k) g_set.push_back((int64_t)i);
    }
    if (p_set.empty() && g_set.empty()) continue;
    int64_t inter = 0;
    size_t a = 0, b = 0;
    while (a < p_set.size() && b < g_set.size()) {
      if (p_set[a] == g_set[b]) ++inter, ++a, ++b;
      else if (p_set[a] < g_set[b]) ++a;
      else ++b;
    }
    r.per_class[k] = 2.0 * (double)inter / (double)(p_set.size() + g_set.size());
    r.present[k] = true;
    acc += r.per_class[k];
    ++included;
  }
  r.mean = included > 0 ? acc / included : 0.0;
  return r;
}

double bilinear_reference(const std::vector<double>& in, int h, int w, int out_h, int out_w,
                          int i, int j) {
  auto src = [](int idx, int in_sz, int out_sz) {
    double s = (idx + 0.5) * (double)in_sz / out_sz - 0.5;
    return s < 0 ? 0.0 : s;
  };
  double sy = src(i, h, out_h), sx = src(j, w, out_w);
  int y0 = std::min((int)sy, h - 1), x0 = std::min((int)sx, w - 1);
  int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  double fy = sy - y0, fx = sx - x0;
  double top = in[(size_t)y0 * w + x0] * (1 - fx) + in[(size_t)y0 * w + x1] * fx;
  double bot = in[(size_t)y1 * w + x0] * (1 - fx) + in[(size_t)y1 * w + x1] * fx;
  return top * (1 - fy) + bot * fy;
}

// ---------------------------------------------------------------------------
// finite differences

GradStats grad_check(const std::vector<Tensor<double>>& inputs, const LossFn& make_loss, double h,
                     double rel_tol, double abs_floor) {
  // analytic pass
  Graph<double> g;
  std::vector<Tensor<double>> tracked;
  tracked.reserve(inputs.size());
  for (const auto& t : inputs) tracked.push_back(g.leaf(t));
  Tensor<double> loss = make_loss(g, tracked);
  check(loss.numel() == 1, "grad_check loss must be scalar");
  g.backward(loss);

  auto eval_at = [&](const std::vector<Tensor<double>>& pts) {
    Graph<double> gg;
    std::vector<Tensor<double>> tr;
    tr.reserve(pts.size());
    for (const auto& t : pts) tr.push_back(gg.leaf(t));
    return make_loss(gg, tr).item();
  };

  GradStats stats;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    const auto& analytic = g.grad(tracked[ti].node);
    for (int64_t e = 0; e < inputs[ti].numel(); ++e) {
      std::vector<Tensor<double>> probe;
      probe.reserve(inputs.size());
      for (const auto& t : inputs) probe.emplace_back(t.shape, *t.data);  // deep copies
      (*probe[ti].data)[e] = inputs[ti][e] + h;
      double up = eval_at(probe);
      (*probe[ti].data)[e] = inputs[ti][e] - h;
      double dn = eval_at(probe);
      double fd = (up - dn) / (2.0 * h);
      double a = analytic[e];
      double err = std::abs(a - fd);
      double denom = std::max({std::abs(a), std::abs(fd), 1e-3});
      stats.max_rel = std::max(stats.max_rel, err / denom);
      ++stats.checked;
      if (err > abs_floor && err > rel_tol * std::max(std::abs(a), std::abs(fd)))
        stats.pass = false;
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// suites

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor<double> rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return rand_uniform<double>(std::move(s), rng, lo, hi);
}

// Wraps an op in a fixed random linear functional so no gradient structure
// cancels out. The coefficients are drawn once per case; the probed
// function must stay identical across finite-difference evaluations.
using OpFn = std::function<Tensor<double>(Graph<double>&, const std::vector<Tensor<double>>&)>;

GradStats checked_op(Rng& rng, const std::vector<Tensor<double>>& inputs, const OpFn& op) {
  Graph<double> probe;
  std::vector<Tensor<double>> tracked;
  for (const auto& t : inputs) tracked.push_back(probe.leaf(t));
  Shape out_shape = op(probe, tracked).shape;
  Tensor<double> coef = rand_t(out_shape, rng);
  return grad_check(inputs, [coef, op](Graph<double>& g, const std::vector<Tensor<double>>& in) {
    return sum(g, mul(g, op(g, in), coef));
  });
}

Check gradcheck_op(const std::string& name, int cases, uint64_t salt,
                   const std::function<GradStats(Rng&)>& one_case) {
  double worst = 0.0;
  int64_t total = 0;
  for (int c = 0; c < cases; ++c) {
    Rng rng(mix_seed(0xC0FFEE, salt, (uint64_t)c));
    GradStats s = one_case(rng);
    worst = std::max(worst, s.max_rel);
    total += s.checked;
    if (!s.pass)
      return Check{name, false,
                   "case " + std::to_string(c) + ": max rel err " + fmt("%.3e", s.max_rel)};
  }
  return Check{name, true,
               std::to_string(cases) + " cases, " + std::to_string(total) +
                   " partials, max rel err " + fmt("%.3e", worst)};
}

GradStats conv_case(Rng& rng, int k) {
  int N = 1 + (int)rng.below(2), C = 1 + (int)rng.below(3), F = 1 + (int)rng.below(3);
  int stride = 1 + (int)rng.below(2), pad = (int)rng.below(2);
  int H = k + stride + (int)rng.below(3), W = k + stride + (int)rng.below(3);
  auto x = rand_t(Shape{N, C, H, W}, rng);
  auto w = rand_t(Shape{F, C, k, k}, rng);
  auto b = rand_t(Shape{F}, rng);
  return checked_op(rng, {x, w, b}, [stride, pad](Graph<double>& g, const auto& in) {
    return conv2d(g, in[0], in[1], in[2], stride, pad);
  });
}

}  // namespace

std::vector<Check> run_gradcheck(int cases_per_op) {
  std::vector<Check> out;

  out.push_back(gradcheck_op("gradcheck conv2d k=1", cases_per_op, 11,
                             [](Rng& rng) { return conv_case(rng, 1); }));
  out.push_back(gradcheck_op("gradcheck conv2d k=3", cases_per_op, 12,
                             [](Rng& rng) { return conv_case(rng, 3); }));

  out.push_back(gradcheck_op("gradcheck relu (off-kink)", cases_per_op, 13, [](Rng& rng) {
    Tensor<double> x(Shape{3, 4});
    for (auto& v : *x.data) {
      double mag = rng.uniform(0.2, 1.5);  // keep |x| >> h so fd never crosses 0
      v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return checked_op(rng, {x},
                      [](Graph<double>& g, const auto& in) { return relu(g, in[0]); });
  }));

  out.push_back(gradcheck_op("gradcheck batch_norm (train)", cases_per_op, 14, [](Rng& rng) {
    int N = 2, C = 1 + (int)rng.below(3), H = 2 + (int)rng.below(2), W = 2 + (int)rng.below(2);
    auto x = rand_t(Shape{N, C, H, W}, rng);
    auto gamma = rand_t(Shape{C}, rng, 0.5, 1.5);
    auto beta = rand_t(Shape{C}, rng, -0.5, 0.5);
    return checked_op(rng, {x, gamma, beta}, [C](Graph<double>& g, const auto& in) {
      Tensor<double> rm(Shape{C}), rv(Shape{C}, 1.0);
      return batch_norm(g, in[0], in[1], in[2], rm, rv, true);
    });
  }));

  out.push_back(gradcheck_op("gradcheck global_avg_pool", cases_per_op, 15, [](Rng& rng) {
    auto x = rand_t(Shape{2, 1 + (int)rng.below(3), 3, 4}, rng);
    return checked_op(rng, {x},
                      [](Graph<double>& g, const auto& in) { return global_avg_pool(g, in[0]); });
  }));

  out.push_back(gradcheck_op("gradcheck upsample_bilinear", cases_per_op, 16, [](Rng& rng) {
    int h = 2 + (int)rng.below(3), w = 2 + (int)rng.below(3);
    int oh = h + (int)rng.below(6), ow = w + (int)rng.below(6);
    auto x = rand_t(Shape{1, 2, h, w}, rng);
    return checked_op(rng, {x}, [oh, ow](Graph<double>& g, const auto& in) {
      return upsample_bilinear(g, in[0], oh, ow);
    });
  }));

  out.push_back(gradcheck_op("gradcheck linear", cases_per_op, 17, [](Rng& rng) {
    int N = 1 + (int)rng.below(3), D = 1 + (int)rng.below(5), M = 1 + (int)rng.below(4);
    auto x = rand_t(Shape{N, D}, rng);
    auto w = rand_t(Shape{D, M}, rng);
    auto b = rand_t(Shape{M}, rng);
    return checked_op(rng, {x, w, b}, [](Graph<double>& g, const auto& in) {
      return linear(g, in[0], in[1], in[2]);
    });
  }));

  out.push_back(gradcheck_op("gradcheck weighted_ce", cases_per_op, 18, [](Rng& rng) {
    int N = 1 + (int)rng.below(2), K = 2 + (int)rng.below(4), H = 2, W = 3;
    auto logits = rand_t(Shape{N, K, H, W}, rng, -2.0, 2.0);
    std::vector<uint8_t> target((size_t)N * H * W);
    for (auto& t : target) t = (uint8_t)rng.below((uint64_t)K);
    ClassWeights<double> wts;
    for (int k = 0; k < K; ++k) wts.w.push_back(rng.uniform(0.2, 3.0));
    return grad_check({logits}, [target, wts](Graph<double>& g, const auto& in) {
      return weighted_ce(g, in[0], target, wts);
    });
  }));

  out.push_back(gradcheck_op("gradcheck bce_with_logit", cases_per_op, 19, [](Rng& rng) {
    int N = 1 + (int)rng.below(6);
    auto logits = rand_t(Shape{N, 1}, rng, -3.0, 3.0);
    std::vector<int> labels(N);
    for (auto& v : labels) v = (int)rng.below(2);
    return grad_check({logits}, [labels](Graph<double>& g, const auto& in) {
      return bce_with_logit(g, in[0], labels);
    });
  }));

  out.push_back(gradcheck_op("gradcheck joint_loss", cases_per_op, 20, [](Rng& rng) {
    auto x = rand_t(Shape{4}, rng);
    auto y = rand_t(Shape{4}, rng);
    double lambda = rng.uniform();
    return grad_check({x, y}, [lambda](Graph<double>& g, const auto& in) {
      Tensor<double> lc = mean(g, mul(g, in[0], in[0]));
      Tensor<double> ls = mean(g, mul(g, in[1], in[1]));
      return joint_loss(g, lc, ls, lambda).total;
    });
  }));

  // backward linearity: grad(a*f + b*g) == a*grad f + b*grad g
  out.push_back([] {
    double worst = 0.0;
    for (int c = 0; c < 50; ++c) {
      Rng rng(mix_seed(0xC0FFEE, 21, (uint64_t)c));
      Tensor<double> x = rand_t(Shape{6}, rng);
      double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-2.0, 2.0);
      auto f = [](Graph<double>& g, const Tensor<double>& t) { return sum(g, mul(g, t, t)); };
      auto h = [](Graph<double>& g, const Tensor<double>& t) { return mean(g, sigmoid(g, t)); };
      Graph<double> g1;
      auto t1 = g1.leaf(x);
      g1.backward(add(g1, scale(g1, f(g1, t1), a), scale(g1, h(g1, t1), b)));
      Graph<double> g2;
      auto t2 = g2.leaf(x);
      g2.backward(f(g2, t2));
      Graph<double> g3;
      auto t3 = g3.leaf(x);
      g3.backward(h(g3, t3));
      for (int64_t i = 0; i < x.numel(); ++i) {
        double lhs = g1.grad(t1.node)[i];
        double rhs = a * g2.grad(t2.node)[i] + b * g3.grad(t3.node)[i];
        worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs)));
      }
    }
    return Check{"backward linearity", worst < 1e-6, "max rel err " + fmt("%.3e", worst)};
  }());

  return out;
}

std::vector<Check> run_oracles() {
  std::vector<Check> out;

  out.push_back([] {
    double worst = 0.0;
    for (int c = 0; c < 50; ++c) {
      Rng rng(mix_seed(0x0AC1E, 1, (uint64_t)c));
      int k = rng.below(2) ? 3 : 1;
      int stride = 1 + (int)rng.below(2), pad = (int)rng.below(2);
      int N = 1 + (int)rng.below(2), C = 1 + (int)rng.below(4), F = 1 + (int)rng.below(4);
      int H = k + stride + (int)rng.below(6), W = k + stride + (int)rng.below(6);
      Tensor<float> x = rand_uniform<float>(Shape{N, C, H, W}, rng, -1.0, 1.0);
      Tensor<float> w = rand_uniform<float>(Shape{F, C, k, k}, rng, -1.0, 1.0);
      Tensor<float> b = rand_uniform<float>(Shape{F}, rng, -1.0, 1.0);
      Graph<float> g;
      Tensor<float> y = conv2d(g, x, w, b, stride, pad);
      std::vector<double> xd(x.data->begin(), x.data->end());
      std::vector<double> wd(w.data->begin(), w.data->end());
      std::vector<double> bd(b.data->begin(), b.data->end());
      std::vector<double> ref;
      conv2d_reference(xd, wd, bd, ref, N, C, H, W, F, k, k, stride, pad);
      for (int64_t i = 0; i < y.numel(); ++i)
        worst = std::max(worst, std::abs((double)y[i] - ref[i]));
      if (worst > 1e-5)
        return Check{"conv2d vs six-loop reference", false,
                     "config " + std::to_string(c) + ": max abs diff " + fmt("%.3e", worst)};
    }
    return Check{"conv2d vs six-loop reference", true, "50 configs, max abs diff " + fmt("%.3e", worst)};
  }());

  out.push_back([] {
    for (int c = 0; c < 1000; ++c) {
      Rng rng(mix_seed(0x0AC1E, 2, (uint64_t)c));
      int n = 2 + (int)rng.below(499);
      std::vector<double> scores(n);
      std::vector<int> labels(n);
      // quantized scores force ties
      for (auto& s : scores) s = (double)rng.below(20) / 19.0;
      for (auto& l : labels) l = (int)rng.below(2);
      labels[0] = 1;
      labels[n - 1] = 0;
      double a = roc_auc(scores, labels);
      double b = roc_auc_pairwise(scores, labels);
      if (a != b)
        return Check{"roc_auc rank vs pairwise", false,
                     "instance " + std::to_string(c) + ": " + fmt("%.17g", a) + " vs " +
                         fmt("%.17g", b)};
    }
    return Check{"roc_auc rank vs pairwise", true, "1000 instances (n <= 500, with ties), exact"};
  }());

  out.push_back([] {
    for (int c = 0; c < 1000; ++c) {
      Rng rng(mix_seed(0x0AC1E, 3, (uint64_t)c));
      int k = 2 + (int)rng.below(5);
      int n = 16 + (int)rng.below(240);
      std::vector<uint8_t> pred(n), gt(n);
      // skew the draw so some classes go absent
      for (int i = 0; i < n; ++i) {
        pred[i] = (uint8_t)(rng.below(2) ? 0 : rng.below((uint64_t)k));
        gt[i] = (uint8_t)(rng.below(2) ? 0 : rng.below((uint64_t)k));
      }
      DiceResult a = mean_dice(pred, gt, k);
      DiceResult b = mean_dice_reference(pred, gt, k);
      bool same = a.mean == b.mean && a.present == b.present;
      for (int i = 0; same && i < k; ++i)
        if (a.present[i] && a.per_class[i] != b.per_class[i]) same = false;
      if (!same)
        return Check{"mean_dice vs set counting", false, "pair " + std::to_string(c) + " differs"};
    }
    return Check{"mean_dice vs set counting", true, "1000 mask pairs, exact"};
  }());

  out.push_back([] {
    Graph<double> g;
    // uniform logits over K=5 -> ln 5
    Tensor<double> logits(Shape{1, 5, 2, 2});
    std::vector<uint8_t> target(4, 2);
    double lnK = weighted_ce(g, logits, target, ClassWeights<double>::uniform(5)).item();
    if (std::abs(lnK - std::log(5.0)) > 1e-6)
      return Check{"analytic loss values", false, "uniform weighted_ce " + fmt("%.9f", lnK)};
    // bce at logit 0 -> ln 2
    Tensor<double> z(Shape{3, 1});
    double ln2 = bce_with_logit(g, z, {0, 1, 0}).item();
    if (std::abs(ln2 - std::log(2.0)) > 1e-6)
      return Check{"analytic loss values", false, "bce(0) " + fmt("%.9f", ln2)};
    // joint endpoints are exact; midpoint is exact arithmetic
    Tensor<double> lc = Tensor<double>::scalar(2.0), ls = Tensor<double>::scalar(4.0);
    auto lc_t = g.leaf(lc), ls_t = g.leaf(ls);
    if (joint_loss(g, lc_t, ls_t, 0.5).total.item() != 3.0)
      return Check{"analytic loss values", false, "joint(2,4,0.5) != 3"};
    if (joint_loss(g, lc_t, ls_t, 1.0).total.item() != 2.0)
      return Check{"analytic loss values", false, "lambda=1 endpoint not exact"};
    if (joint_loss(g, lc_t, ls_t, 0.0).total.item() != 4.0)
      return Check{"analytic loss values", false, "lambda=0 endpoint not exact"};
    return Check{"analytic loss values", true, "ln5, ln2, joint(2,4,0.5)=3, endpoints exact"};
  }());

  out.push_back([] {
    Rng rng(mix_seed(0x0AC1E, 4));
    // identity is bit-exact
    Tensor<float> x = rand_uniform<float>(Shape{1, 2, 5, 7}, rng);
    Graph<float> g;
    Tensor<float> same = upsample_bilinear(g, x, 5, 7);
    for (int64_t i = 0; i < x.numel(); ++i)
      if (same[i] != x[i]) return Check{"bilinear upsample reference", false, "identity not bit-exact"};
    // random upsizes match the scalar reference
    double worst = 0.0;
    for (int c = 0; c < 50; ++c) {
      Rng r2(mix_seed(0x0AC1E, 5, (uint64_t)c));
      int h = 2 + (int)r2.below(4), w = 2 + (int)r2.below(4);
      int oh = h + (int)r2.below(7), ow = w + (int)r2.below(7);
      Tensor<double> in = rand_uniform<double>(Shape{1, 1, h, w}, r2);
      Graph<double> gd;
      Tensor<double> up = upsample_bilinear(gd, in, oh, ow);
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j)
          worst = std::max(worst, std::abs(up[(int64_t)i * ow + j] -
                                           bilinear_reference(*in.data, h, w, oh, ow, i, j)));
    }
    if (worst > 1e-12)
      return Check{"bilinear upsample reference", false, "max abs diff " + fmt("%.3e", worst)};
    return Check{"bilinear upsample reference", true, "identity bit-exact; 50 upsizes match"};
  }());

  return out;
}

std::vector<Check> run_all() {
  std::vector<Check> out = run_gradcheck();
  std::vector<Check> oracles = run_oracles();
  out.insert(out.end(), oracles.begin(), oracles.end());
  return out;
}

bool all_pass(const std::vector<Check>& checks) {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

}  // namespace mtl::verify
