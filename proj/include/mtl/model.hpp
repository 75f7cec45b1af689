#pragma once

// The shared-trunk architecture: a small pre-activation residual FCN
// producing one feature tensor per image, consumed by two heads:
//   - seg head: 1x1 transfer conv to K class logits, then bilinear
//     upsampling back to input resolution
//   - cls head: global average pooling, then a fully connected layer
//     producing a single cancer logit
// Both heads read the same trunk output from a single forward pass.

#include <utility>

#include "mtl/ops.hpp"

namespace mtl {

struct StageSpec {
  int blocks;
  int channels;
  int stride;  // applied by the first block of the stage
};

struct BackboneConfig {
  int in_channels = 1;
  int stem_channels = 16;
  int stem_stride = 2;
  std::vector<StageSpec> stages = {{2, 16, 1}, {2, 32, 2}, {2, 64, 1}};

  int total_stride() const {
    int s = stem_stride;
    for (const auto& st : stages) s *= st.stride;
    return s;
  }

  int feature_channels() const {
    return stages.empty() ? stem_channels : stages.back().channels;
  }

  void validate() const {
    check(in_channels > 0 && stem_channels > 0 && stem_stride >= 1, "invalid backbone stem config");
    check(!stages.empty(), "backbone needs at least one stage");
    for (const auto& st : stages)
      check(st.blocks >= 1 && st.channels > 0 && st.stride >= 1, "invalid backbone stage config");
  }
};

template <class T>
class MtlModel {
 public:
  struct Named {
    std::string name;
    Tensor<T> t;
  };

  // Leafed parameter handles for one recorded graph, aligned with params().
  struct Bound {
    std::vector<Tensor<T>> p;
  };

  MtlModel(BackboneConfig cfg, int k_classes, Rng* init_rng = nullptr)
      : cfg_(std::move(cfg)), k_(k_classes) {
    cfg_.validate();
    check(k_ >= 2, "need at least two segmentation classes");
    rng_ = init_rng;

    stem_ = make_conv("stem", cfg_.in_channels, cfg_.stem_channels, 3, cfg_.stem_stride, 1);
    int in_ch = cfg_.stem_channels;
    for (size_t si = 0; si < cfg_.stages.size(); ++si) {
      const StageSpec& st = cfg_.stages[si];
      std::vector<Block> stage;
      for (int bi = 0; bi < st.blocks; ++bi) {
        std::string base = "s" + std::to_string(si) + ".b" + std::to_string(bi);
        Block blk;
        int bin = bi == 0 ? in_ch : st.channels;
        blk.stride = bi == 0 ? st.stride : 1;
        blk.bn1 = make_bn(base + ".bn1", bin);
        blk.conv1 = make_conv(base + ".conv1", bin, st.channels, 3, blk.stride, 1);
        blk.bn2 = make_bn(base + ".bn2", st.channels);
        blk.conv2 = make_conv(base + ".conv2", st.channels, st.channels, 3, 1, 1);
        blk.has_proj = bin != st.channels || blk.stride != 1;
        if (blk.has_proj) blk.proj = make_conv(base + ".proj", bin, st.channels, 1, blk.stride, 0);
        stage.push_back(blk);
      }
      stages_.push_back(std::move(stage));
      in_ch = st.channels;
    }
    final_bn_ = make_bn("final_bn", in_ch);
    snet_ = make_conv("snet", in_ch, k_, 1, 1, 0);
    cnet_w_ = add_param("cnet.w", he_linear(in_ch, 1));
    cnet_b_ = add_param("cnet.b", Tensor<T>(Shape{1}));
    rng_ = nullptr;
  }

  const BackboneConfig& config() const { return cfg_; }
  int k_classes() const { return k_; }

  std::vector<Named>& params() { return params_; }
  const std::vector<Named>& params() const { return params_; }
  std::vector<Named>& buffers() { return buffers_; }
  const std::vector<Named>& buffers() const { return buffers_; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& np : params_) n += np.t.numel();
    return n;
  }

  Bound bind(Graph<T>& g) const {
    Bound b;
    b.p.reserve(params_.size());
    for (const auto& np : params_) b.p.push_back(g.leaf(np.t));
    return b;
  }

  // Shared trunk: image [N,in,H,W] -> feature tensor [N,Cf,H/s,W/s].
  Tensor<T> backbone_forward(Graph<T>& g, const Bound& b, const Tensor<T>& image,
                             bool train) const {
    check(image.shape.size() == 4 && image.shape[1] == cfg_.in_channels,
          "backbone expects [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
              shape_str(image.shape));
    const int s = cfg_.total_stride();
    check(image.shape[2] % s == 0 && image.shape[3] % s == 0,
          "backbone input " + shape_str(image.shape) + " spatial dims must be divisible by the total stride " +
              std::to_string(s));
    Tensor<T> x = run_conv(g, b, stem_, image);
    for (const auto& stage : stages_) {
      for (const Block& blk : stage) {
        Tensor<T> pre = relu(g, run_bn(g, b, blk.bn1, x, train));
        Tensor<T> h = run_conv(g, b, blk.conv1, pre);
        h = run_conv(g, b, blk.conv2, relu(g, run_bn(g, b, blk.bn2, h, train)));
        Tensor<T> skip = blk.has_proj ? run_conv(g, b, blk.proj, pre) : x;
        x = add(g, h, skip);
      }
    }
    return relu(g, run_bn(g, b, final_bn_, x, train));
  }

  // Seg head: dense K-class logits at input resolution (softmax lives in
  // the loss). Transfer conv first, then upsample, in that order.
  Tensor<T> snet_forward(Graph<T>& g, const Bound& b, const Tensor<T>& features, int out_h,
                         int out_w) const {
    Tensor<T> logits = run_conv(g, b, snet_, features);
    return upsample_bilinear(g, logits, out_h, out_w);
  }

  // Cls head: one logit per image; the sigmoid lives in the loss/metrics.
  Tensor<T> cnet_forward(Graph<T>& g, const Bound& b, const Tensor<T>& features) const {
    Tensor<T> pooled = global_avg_pool(g, features);
    return linear(g, pooled, b.p[cnet_w_], b.p[cnet_b_]);
  }

  // One trunk evaluation feeding both heads.
  std::pair<Tensor<T>, Tensor<T>> mtl_forward(Graph<T>& g, const Bound& b, const Tensor<T>& image,
                                              bool train) const {
    Tensor<T> features = backbone_forward(g, b, image, train);
    Tensor<T> seg = snet_forward(g, b, features, image.shape[2], image.shape[3]);
    Tensor<T> cls = cnet_forward(g, b, features);
    return {seg, cls};
  }

  // Number of conv2d nodes a single trunk pass records (audit helper).
  static int64_t backbone_conv_count(const BackboneConfig& cfg) {
    int64_t n = 1;  // stem
    int in_ch = cfg.stem_channels;
    for (const auto& st : cfg.stages) {
      for (int bi = 0; bi < st.blocks; ++bi) {
        int bin = bi == 0 ? in_ch : st.channels;
        int stride = bi == 0 ? st.stride : 1;
        n += 2 + ((bin != st.channels || stride != 1) ? 1 : 0);
      }
      in_ch = st.channels;
    }
    return n;
  }

  static int64_t analytic_param_count(const BackboneConfig& cfg, int k_classes) {
    auto conv_n = [](int cin, int cout, int k) { return (int64_t)cout * cin * k * k + cout; };
    auto bn_n = [](int c) { return (int64_t)2 * c; };
    int64_t n = conv_n(cfg.in_channels, cfg.stem_channels, 3);
    int in_ch = cfg.stem_channels;
    for (const auto& st : cfg.stages) {
      for (int bi = 0; bi < st.blocks; ++bi) {
        int bin = bi == 0 ? in_ch : st.channels;
        int stride = bi == 0 ? st.stride : 1;
        n += bn_n(bin) + conv_n(bin, st.channels, 3);
        n += bn_n(st.channels) + conv_n(st.channels, st.channels, 3);
        if (bin != st.channels || stride != 1) n += conv_n(bin, st.channels, 1);
      }
      in_ch = st.channels;
    }
    n += bn_n(in_ch);                      // final norm
    n += conv_n(in_ch, k_classes, 1);      // snet transfer
    n += (int64_t)in_ch * 1 + 1;           // cnet fc
    return n;
  }

 private:
  struct ConvRef {
    int w = -1, b = -1;
    int stride = 1, pad = 0;
  };
  struct BnRef {
    int gamma = -1, beta = -1;
    int rm = -1, rv = -1;  // buffer indices
  };
  struct Block {
    BnRef bn1;
    ConvRef conv1;
    BnRef bn2;
    ConvRef conv2;
    bool has_proj = false;
    ConvRef proj;
    int stride = 1;
  };

  int add_param(std::string name, Tensor<T> t) {
    params_.push_back(Named{std::move(name), std::move(t)});
    return (int)params_.size() - 1;
  }
  int add_buffer(std::string name, Tensor<T> t) {
    buffers_.push_back(Named{std::move(name), std::move(t)});
    return (int)buffers_.size() - 1;
  }

  Tensor<T> he_conv(int cin, int cout, int k) {
    Tensor<T> w(Shape{cout, cin, k, k});
    if (rng_) {
      double stddev = std::sqrt(2.0 / ((double)cin * k * k));
      for (auto& v : *w.data) v = (T)(stddev * rng_->normal());
    }
    return w;
  }

  Tensor<T> he_linear(int din, int dout) {
    Tensor<T> w(Shape{din, dout});
    if (rng_) {
      double stddev = std::sqrt(2.0 / (double)din);
      for (auto& v : *w.data) v = (T)(stddev * rng_->normal());
    }
    return w;
  }

  ConvRef make_conv(const std::string& base, int cin, int cout, int k, int stride, int pad) {
    ConvRef c;
    c.w = add_param(base + ".w", he_conv(cin, cout, k));
    c.b = add_param(base + ".b", Tensor<T>(Shape{cout}));
    c.stride = stride;
    c.pad = pad;
    return c;
  }

  BnRef make_bn(const std::string& base, int channels) {
    BnRef bn;
    bn.gamma = add_param(base + ".gamma", Tensor<T>(Shape{channels}, T(1)));
    bn.beta = add_param(base + ".beta", Tensor<T>(Shape{channels}));
    bn.rm = add_buffer(base + ".run_mean", Tensor<T>(Shape{channels}));
    bn.rv = add_buffer(base + ".run_var", Tensor<T>(Shape{channels}, T(1)));
    return bn;
  }

  Tensor<T> run_conv(Graph<T>& g, const Bound& b, const ConvRef& c, const Tensor<T>& x) const {
    return conv2d(g, x, b.p[c.w], b.p[c.b], c.stride, c.pad);
  }

  Tensor<T> run_bn(Graph<T>& g, const Bound& b, const BnRef& bn, const Tensor<T>& x,
                   bool train) const {
    // running stats are designated mutable state, shared with buffers()
    Tensor<T> rm = buffers_[bn.rm].t;
    Tensor<T> rv = buffers_[bn.rv].t;
    return batch_norm(g, x, b.p[bn.gamma], b.p[bn.beta], rm, rv, train);
  }

  BackboneConfig cfg_;
  int k_;
  Rng* rng_ = nullptr;  // only set during construction
  std::vector<Named> params_;
  std::vector<Named> buffers_;
  ConvRef stem_;
  std::vector<std::vector<Block>> stages_;
  BnRef final_bn_;
  ConvRef snet_;
  int cnet_w_ = -1, cnet_b_ = -1;
};

}  // namespace mtl
