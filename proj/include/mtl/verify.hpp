#pragma once

// Reference implementations and verification suites. The references here
// are deliberately written as naive, independent computations (nested
// loops, pairwise counting, set arithmetic) so they can stand as oracles
// against the optimized op implementations.

#include <vector>

#include "mtl/objectives.hpp"

namespace mtl::verify {

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Check> run_gradcheck(int cases_per_op = 100);
std::vector<Check> run_oracles();
std::vector<Check> run_all();
bool all_pass(const std::vector<Check>& checks);

// Six nested loops over (n, f, oh, ow) x (c, kh, kw), double precision.
void conv2d_reference(const std::vector<double>& x, const std::vector<double>& w,
                      const std::vector<double>& b, std::vector<double>& y, int N, int C, int H,
                      int W, int F, int KH, int KW, int stride, int pad);

// O(n^2) pairwise concordance with ties worth 0.5.
double roc_auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels);

// Dice from explicit per-class pixel-index sets.
DiceResult mean_dice_reference(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                               int k_classes);

// Closed-form bilinear sample at one output location (align_corners=false).
double bilinear_reference(const std::vector<double>& in, int h, int w, int out_h, int out_w,
                          int i, int j);

// Central finite differences against analytic gradients for a scalar loss
// over a set of tracked inputs. Returns the worst relative error observed.
struct GradStats {
  double max_rel = 0.0;
  int64_t checked = 0;
  bool pass = true;
};

using LossFn =
    std::function<Tensor<double>(Graph<double>&, const std::vector<Tensor<double>>&)>;

GradStats grad_check(const std::vector<Tensor<double>>& inputs, const LossFn& make_loss,
                     double h = 1e-5, double rel_tol = 1e-6, double abs_floor = 1e-9);

}  // namespace mtl::verify
