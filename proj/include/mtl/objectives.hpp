#pragma once

// Losses and metrics. The losses are tape ops (differentiable w.r.t. the
// logits); the metrics are plain functions over predictions.

#include <cstdint>
#include <optional>

#include "mtl/ops.hpp"

namespace mtl {

template <class T>
struct ClassWeights {
  std::vector<T> w;

  void validate() const {
    check(!w.empty(), "class weights must be non-empty");
    bool any_pos = false;
    for (T v : w) {
      check(std::isfinite((double)v) && v >= T(0), "class weights must be finite and >= 0");
      any_pos |= v > T(0);
    }
    check(any_pos, "class weights need at least one strictly positive entry");
  }

  static ClassWeights uniform(int k) { return ClassWeights{std::vector<T>((size_t)k, T(1))}; }
};

// ---------------------------------------------------------------------------
// weighted_ce: -(1/Z) * sum_pixels w[t] * log softmax(logits)[t],
// Z = sum_pixels w[t]. Dividing by the applied weight mass (not the pixel
// count) keeps the loss scale weight-invariant on balanced data.

template <class T>
Tensor<T> weighted_ce(Graph<T>& g, const Tensor<T>& seg_logits, const std::vector<uint8_t>& target,
                      const ClassWeights<T>& weights) {
  check(seg_logits.shape.size() == 4,
        "weighted_ce logits must be [N,K,H,W], got " + shape_str(seg_logits.shape));
  const int N = seg_logits.shape[0], K = seg_logits.shape[1];
  const int H = seg_logits.shape[2], W = seg_logits.shape[3];
  check((int64_t)target.size() == (int64_t)N * H * W,
        "weighted_ce target size " + std::to_string(target.size()) + " != N*H*W of " +
            shape_str(seg_logits.shape));
  check((int)weights.w.size() == K, "weighted_ce needs K=" + std::to_string(K) + " weights");
  weights.validate();

  const int64_t hw = (int64_t)H * W;
  const T* lp = seg_logits.ptr();
  // per-pixel log-softmax saved for the backward pass
  auto logp = std::make_shared<std::vector<T>>(seg_logits.numel());
  T num = T(0), z = T(0);
  for (int n = 0; n < N; ++n)
    for (int64_t i = 0; i < hw; ++i) {
      const int64_t base = (int64_t)n * K * hw + i;
      int t = target[(int64_t)n * hw + i];
      if (t >= K)
        throw tensor_error("weighted_ce class index " + std::to_string(t) + " out of range [0," +
                           std::to_string(K - 1) + "] at sample " + std::to_string(n) + " pixel (" +
                           std::to_string(i / W) + "," + std::to_string(i % W) + ")");
      T mx = lp[base];
      for (int k = 1; k < K; ++k) mx = std::max(mx, lp[base + k * hw]);
      T se = T(0);
      for (int k = 0; k < K; ++k) se += std::exp(lp[base + k * hw] - mx);
      T lse = mx + std::log(se);
      for (int k = 0; k < K; ++k) (*logp)[base + k * hw] = lp[base + k * hw] - lse;
      T wt = weights.w[t];
      num += wt * -(*logp)[base + (int64_t)t * hw];
      z += wt;
    }
  check(z > T(0), "weighted_ce: no pixel carries positive class weight");

  Tensor<T> y = Tensor<T>::scalar(num / z);
  int ln = seg_logits.node;
  auto wts = weights.w;
  auto tgt = std::make_shared<std::vector<uint8_t>>(target);
  y.node = g.emit(Op::weighted_ce, {ln}, y, [=](Graph<T>& gg, int self) {
    if (ln < 0) return;
    T gv = gg.grad(self)[0] / z;
    T* dl = gg.grad(ln).data();
    for (int n = 0; n < N; ++n)
      for (int64_t i = 0; i < hw; ++i) {
        const int64_t base = (int64_t)n * K * hw + i;
        int t = (*tgt)[(int64_t)n * hw + i];
        T wt = wts[t];
        if (wt == T(0)) continue;
        for (int k = 0; k < K; ++k) {
          T soft = std::exp((*logp)[base + k * hw]);
          dl[base + k * hw] += gv * wt * (soft - (k == t ? T(1) : T(0)));
        }
      }
  });
  return y;
}

// ---------------------------------------------------------------------------
// bce_with_logit: mean over the batch of the stable log-sum-exp form
//   max(z,0) - z*y + log(1 + exp(-|z|)).

template <class T>
Tensor<T> bce_with_logit(Graph<T>& g, const Tensor<T>& cls_logit, const std::vector<int>& labels) {
  check(cls_logit.shape.size() == 2 && cls_logit.shape[1] == 1,
        "bce_with_logit expects logits [N,1], got " + shape_str(cls_logit.shape));
  const int N = cls_logit.shape[0];
  check((int)labels.size() == N, "bce_with_logit needs one label per row");
  for (int v : labels) check(v == 0 || v == 1, "bce_with_logit labels must be 0/1");

  T acc = T(0);
  for (int n = 0; n < N; ++n) {
    T zv = cls_logit[n];
    T yv = (T)labels[n];
    acc += std::max(zv, T(0)) - zv * yv + std::log1p(std::exp(-std::abs(zv)));
  }
  Tensor<T> y = Tensor<T>::scalar(acc / (T)N);
  int ln = cls_logit.node;
  auto lv = cls_logit;
  auto lab = labels;
  y.node = g.emit(Op::bce_with_logit, {ln}, y, [=](Graph<T>& gg, int self) {
    if (ln < 0) return;
    T gv = gg.grad(self)[0] / (T)N;
    T* dl = gg.grad(ln).data();
    for (int n = 0; n < N; ++n) {
      T zv = lv[n];
      T sig = zv >= T(0) ? T(1) / (T(1) + std::exp(-zv)) : std::exp(zv) / (T(1) + std::exp(zv));
      dl[n] += gv * (sig - (T)lab[n]);
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// joint_loss: l_total = lambda * l_cls + (1 - lambda) * l_seg.
// The endpoints reduce exactly: scaling by 0/1 and adding 0 are exact in
// IEEE arithmetic, so lambda=1 routes zero gradient into the seg branch.

template <class T>
struct LossBundle {
  Tensor<T> total;
  T l_cls;
  T l_seg;
  T lambda;
};

template <class T>
LossBundle<T> joint_loss(Graph<T>& g, const Tensor<T>& l_cls, const Tensor<T>& l_seg, T lambda) {
  check(l_cls.numel() == 1 && l_seg.numel() == 1, "joint_loss expects scalar losses");
  check(lambda >= T(0) && lambda <= T(1),
        "lambda must be in [0,1], got " + std::to_string((double)lambda));
  Tensor<T> total = add(g, scale(g, l_cls, lambda), scale(g, l_seg, T(1) - lambda));
  return LossBundle<T>{total, l_cls.item(), l_seg.item(), lambda};
}

// ---------------------------------------------------------------------------
// mean Dice over class-index masks. Classes absent from both masks are
// excluded from the mean; predicting only absent classes correctly should
// not inflate the score.

struct DiceResult {
  double mean = 0.0;
  std::vector<double> per_class;  // NaN for excluded classes
  std::vector<bool> present;
};

inline DiceResult mean_dice(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                            int k_classes) {
  check(pred.size() == gt.size(), "mean_dice mask sizes differ: " + std::to_string(pred.size()) +
                                      " vs " + std::to_string(gt.size()));
  check(k_classes >= 1, "mean_dice needs K >= 1");
  std::vector<int64_t> p_count(k_classes, 0), g_count(k_classes, 0), inter(k_classes, 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    check(pred[i] < k_classes && gt[i] < k_classes,
          "mean_dice mask value out of range at index " + std::to_string(i));
    ++p_count[pred[i]];
    ++g_count[gt[i]];
    if (pred[i] == gt[i]) ++inter[pred[i]];
  }
  DiceResult r;
  r.per_class.assign(k_classes, std::numeric_limits<double>::quiet_NaN());
  r.present.assign(k_classes, false);
  double acc = 0.0;
  int included = 0;
  for (int k = 0; k < k_classes; ++k) {
    int64_t denom = p_count[k] + g_count[k];
    if (denom == 0) continue;
    r.per_class[k] = 2.0 * (double)inter[k] / (double)denom;
    r.present[k] = true;
    acc += r.per_class[k];
    ++included;
  }
  r.mean = included > 0 ? acc / included : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// ROC AUC via rank statistics with average ranks for ties; equals the
// pairwise concordance count with ties worth 0.5.

inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check(scores.size() == labels.size(), "roc_auc scores/labels length mismatch");
  int64_t n_pos = 0, n_neg = 0;
  for (int v : labels) {
    check(v == 0 || v == 1, "roc_auc labels must be 0/1");
    v ? ++n_pos : ++n_neg;
  }
  check(n_pos > 0 && n_neg > 0, "roc_auc undefined: needs at least one positive and one negative");

  std::vector<int> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = (int)i;
  std::sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * (double)((i + 1) + (j + 1));  // 1-based
    for (size_t t = i; t <= j; ++t)
      if (labels[order[t]]) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  return (pos_rank_sum - 0.5 * (double)n_pos * (double)(n_pos + 1)) / ((double)n_pos * (double)n_neg);
}

// ---------------------------------------------------------------------------
// Inverse-pixel-frequency class weights with a count floor of 1, normalized
// so the weights sum to K.

template <class T>
ClassWeights<T> compute_class_weights(const std::vector<int64_t>& pixel_counts) {
  const int k = (int)pixel_counts.size();
  check(k >= 1, "compute_class_weights needs at least one class");
  int64_t total = 0;
  for (int64_t c : pixel_counts) {
    check(c >= 0, "pixel counts must be non-negative");
    total += c;
  }
  check(total > 0, "compute_class_weights: empty dataset");
  std::vector<double> w(k);
  double wsum = 0.0;
  for (int i = 0; i < k; ++i) {
    w[i] = (double)total / ((double)k * (double)std::max<int64_t>(pixel_counts[i], 1));
    wsum += w[i];
  }
  ClassWeights<T> out;
  out.w.resize(k);
  for (int i = 0; i < k; ++i) out.w[i] = (T)(w[i] * (double)k / wsum);
  return out;
}

template <class T>
ClassWeights<T> compute_class_weights(const std::vector<std::vector<uint8_t>>& masks, int k_classes) {
  std::vector<int64_t> counts(k_classes, 0);
  for (const auto& m : masks)
    for (uint8_t v : m) {
      check(v < k_classes, "mask value out of range in compute_class_weights");
      ++counts[v];
    }
  return compute_class_weights<T>(counts);
}

}  // namespace mtl
