#pragma once

// N-dimensional tensors on a dynamically recorded autodiff tape.
// Ops append nodes to a Graph; backward() sweeps the tape in reverse
// insertion order (which is a topological order by construction).

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mtl {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct tensor_error : std::runtime_error {
  explicit tensor_error(const std::string& m) : std::runtime_error(m) {}
};
struct graph_error : std::runtime_error {
  explicit graph_error(const std::string& m) : std::runtime_error(m) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw tensor_error(msg);
}

// ---------------------------------------------------------------------------
// Tensor: shape + shared contiguous row-major buffer + optional tape handle.
// Copies are shallow; buffers are immutable once an op produced them, except
// parameter buffers which the optimizer updates between steps.

template <class T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  int node = -1;  // id into the active Graph, -1 when untracked

  Tensor() : shape{1}, data(std::make_shared<std::vector<T>>(1, T(0))) {}

  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)) {
    check(!shape.empty(), "tensor shape must be non-empty");
    for (int d : shape) check(d > 0, "tensor dims must be positive, got " + shape_str(shape));
    data = std::make_shared<std::vector<T>>(shape_numel(shape), fill);
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)) {
    check(!shape.empty(), "tensor shape must be non-empty");
    check((int64_t)values.size() == shape_numel(shape),
          "tensor data length " + std::to_string(values.size()) + " != numel of " + shape_str(shape));
    data = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  int64_t numel() const { return shape_numel(shape); }
  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }
  T& operator[](int64_t i) { return (*data)[i]; }
  const T& operator[](int64_t i) const { return (*data)[i]; }

  T item() const {
    check(numel() == 1, "item() on non-scalar tensor " + shape_str(shape));
    return (*data)[0];
  }

  bool all_finite() const {
    for (const T& v : *data)
      if (!std::isfinite((double)v)) return false;
    return true;
  }
};

#ifndef NDEBUG
template <class T>
inline void debug_check_finite(const Tensor<T>& t, const char* where) {
  if (!t.all_finite()) throw tensor_error(std::string("non-finite value produced by ") + where);
}
#else
template <class T>
inline void debug_check_finite(const Tensor<T>&, const char*) {}
#endif

// ---------------------------------------------------------------------------
// Op kinds, recorded per node so tests can audit what a forward pass did.

enum class Op {
  leaf,
  conv2d,
  relu,
  batch_norm,
  global_avg_pool,
  upsample_bilinear,
  linear,
  add,
  mul,
  scale,
  sum,
  mean,
  reshape,
  sigmoid,
  log_softmax,
  weighted_ce,
  bce_with_logit,
};

// ---------------------------------------------------------------------------
// Graph: append-only tape. Parent ids always refer to earlier nodes.

template <class T>
class Graph {
 public:
  using BackFn = std::function<void(Graph&, int)>;

  // Track an existing buffer as a leaf. The returned tensor shares data.
  Tensor<T> leaf(const Tensor<T>& t) {
    Tensor<T> out = t;
    out.node = emit(Op::leaf, {}, out, nullptr);
    return out;
  }

  int emit(Op op, std::vector<int> parents, const Tensor<T>& value, BackFn back) {
    for (int p : parents)
      if (p >= 0 && p >= (int)nodes_.size())
        throw graph_error("parent node id out of range");
    nodes_.push_back(NodeRec{op, std::move(parents), value.shape, value.data, std::move(back)});
    return (int)nodes_.size() - 1;
  }

  // Reverse sweep from a scalar root. d(root)/d(root) = 1; gradients
  // accumulate by summation over all paths. One backward per recording.
  void backward(const Tensor<T>& root) {
    if (consumed_) throw graph_error("backward on a graph already consumed; record a fresh graph");
    if (root.node < 0 || root.node >= (int)nodes_.size())
      throw graph_error("backward root is not a node of this graph");
    if (shape_numel(nodes_[root.node].shape) != 1)
      throw graph_error("backward root must be scalar, got " + shape_str(nodes_[root.node].shape));
    grads_.assign(nodes_.size(), {});
    for (int i = 0; i <= root.node; ++i) grads_[i].assign(shape_numel(nodes_[i].shape), T(0));
    grads_[root.node][0] = T(1);
    for (int i = root.node; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back(*this, i);
    consumed_ = true;
  }

  bool consumed() const { return consumed_; }

  std::vector<T>& grad(int id) {
    if (id < 0 || id >= (int)grads_.size() || grads_[id].empty())
      throw graph_error("no gradient buffer for node " + std::to_string(id) + "; run backward first");
    return grads_[id];
  }

  const Shape& node_shape(int id) const { return nodes_.at(id).shape; }
  const std::vector<T>& node_value(int id) const { return *nodes_.at(id).value; }
  Op node_op(int id) const { return nodes_.at(id).op; }
  size_t size() const { return nodes_.size(); }

  int64_t count(Op op) const {
    int64_t n = 0;
    for (const auto& nd : nodes_) n += (nd.op == op);
    return n;
  }

  void reset() {
    nodes_.clear();
    grads_.clear();
    consumed_ = false;
  }

  // Accumulate v (scaled) into a parent's gradient buffer. No-op for
  // untracked parents (id < 0).
  void accumulate(int id, const std::vector<T>& v) {
    if (id < 0) return;
    auto& g = grad(id);
    assert(g.size() == v.size());
    for (size_t i = 0; i < v.size(); ++i) g[i] += v[i];
  }

 private:
  struct NodeRec {
    Op op;
    std::vector<int> parents;
    Shape shape;
    std::shared_ptr<std::vector<T>> value;
    BackFn back;
  };
  std::vector<NodeRec> nodes_;
  std::vector<std::vector<T>> grads_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Seeded RNG with fully specified transforms. mt19937_64 gives the same
// stream everywhere; the distribution math is pinned here rather than left
// to the standard library (std distributions are implementation-defined).

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t u64() { return eng_(); }

  double uniform() {  // [0, 1)
    return (double)(u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {  // Box-Muller, no cached spare
    double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  uint64_t below(uint64_t n) {  // [0, n), multiply-shift
    return (uint64_t)(((__uint128_t)u64() * n) >> 64);
  }

 private:
  std::mt19937_64 eng_;
};

// Derive independent sub-stream seeds from one master seed (splitmix64).
inline uint64_t mix_seed(uint64_t seed, uint64_t stream, uint64_t index = 0) {
  uint64_t z = seed;
  for (uint64_t salt : {stream, index}) {
    z += 0x9e3779b97f4a7c15ull + salt;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z = z ^ (z >> 31);
  }
  return z;
}

// Named sub-streams: one --seed fans out so e.g. changing epoch count
// never perturbs initialization.
namespace stream {
constexpr uint64_t data = 0xDA7Aull;
constexpr uint64_t init = 0x1217ull;
constexpr uint64_t shuffle = 0x5AFFull;
}  // namespace stream

template <class T>
inline Tensor<T> rand_uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  for (auto& v : *t.data) v = (T)rng.uniform(lo, hi);
  return t;
}

template <class T>
inline Tensor<T> rand_normal(Shape s, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  Tensor<T> t(std::move(s));
  for (auto& v : *t.data) v = (T)(mean + stddev * rng.normal());
  return t;
}

inline void fisher_yates(std::vector<int>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

// ---------------------------------------------------------------------------
// Optional intra-op parallelism. Work is split into contiguous index chunks
// with disjoint writes, so results are bit-identical for any thread count.

// Training allocates megabyte-scale scratch buffers every step; keep them
// on the heap instead of bouncing through mmap/munmap.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
}

inline int& thread_count() {
  static int n = 1;
  return n;
}

inline void set_threads(int n) {
  check(n >= 1, "thread count must be >= 1");
  thread_count() = n;
}

template <class F>
inline void parallel_for(int64_t n, F&& f) {
  int workers = thread_count();
  if (workers <= 1 || n < 2) {
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
  if ((int64_t)workers > n) workers = (int)n;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int64_t lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &f] {
      for (int64_t i = lo; i < hi; ++i) f(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace mtl
