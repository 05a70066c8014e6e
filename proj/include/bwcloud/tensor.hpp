#pragma once

// Reverse-mode differentiation over dense row-major double tensors.
//
// A Var is a handle to a graph node. Operations create new nodes that keep
// their parents alive and carry a closure that pushes the node's gradient
// back to them. Nodes that cannot reach a trainable leaf drop their parents
// immediately, so frozen sub-networks and no-grad evaluation retain nothing.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "bwcloud/error.hpp"

namespace bwcloud {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

namespace detail {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline thread_local bool grad_enabled = true;

/// C = op(A) op(B), or C += when accumulating. Operands are copied into
/// owned storage first: Eigen picks kernels by address alignment, and the
/// rounding must depend on shapes only for reruns to be bit-identical.
inline void gemm(const double* a, std::size_t ar, std::size_t ac, bool ta, const double* b, std::size_t br, std::size_t bc, bool tb,
                 double* c, bool accumulate) {
  const MatRM A = Eigen::Map<const MatRM>(a, ar, ac);
  const MatRM B = Eigen::Map<const MatRM>(b, br, bc);
  MatRM C;
  if (ta && tb) C.noalias() = A.transpose() * B.transpose();
  else if (ta) C.noalias() = A.transpose() * B;
  else if (tb) C.noalias() = A * B.transpose();
  else C.noalias() = A * B;
  const std::size_t m = static_cast<std::size_t>(C.size());
  const double* src = C.data();
  if (accumulate)
    for (std::size_t i = 0; i < m; ++i) c[i] += src[i];
  else
    std::copy(src, src + m, c);
}

/// out[c] += sum over rows of x[r, c], in row order.
inline void add_column_sums(const double* x, std::size_t rows, std::size_t cols, double* out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += x[r * cols + c];
}

inline void add_row_bias(double* x, std::size_t rows, std::size_t cols, const double* bias) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) x[r * cols + c] += bias[c];
}

}  // namespace detail

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  std::size_t backward_runs = 0;

  std::size_t size() const { return value.size(); }

  /// Gradient buffer, zero-filled on first touch.
  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size())
      fail(ErrorKind::shape, "value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Var(std::move(n));
  }

  static Var leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    Var v = constant(std::move(shape), std::move(values));
    v.node_->requires_grad = requires_grad;
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& mutable_value() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  void zero_grad() { node_->grad.clear(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  const char* op() const { return node_->op; }
  double item() const {
    if (size() != 1) fail(ErrorKind::shape, "item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an op result. The closure is kept only when gradients can flow.
inline Var make_result(Shape shape, std::vector<double> value, const char* op, std::vector<Var> parents,
                       std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (detail::grad_enabled)
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(n));
}

/// Accumulates d(root)/d(node) into every reachable node that requires grad.
/// Leaf gradients add onto whatever is already there.
inline void backward(const Var& root) {
  if (root.size() != 1) fail(ErrorKind::shape, "backward needs a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward_fn || node->grad.empty()) continue;
    node->backward_fn(*node);
    ++node->backward_runs;
  }
}

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) fail(ErrorKind::shape, "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(a.shape(), std::move(out), "add", {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) fail(ErrorKind::shape, "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(a.shape(), std::move(out), "mul", {a, b}, [](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    if (a.requires_grad) {
      auto& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.value[i];
    }
    if (b.requires_grad) {
      auto& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.value[i];
    }
  });
}

inline Var scale(const Var& x, double factor) {
  std::vector<double> out(x.value());
  for (auto& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), "scale", {x}, [factor](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value()) s += v;
  return make_result({1}, {s}, "sum", {x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Var mean(const Var& x) {
  if (x.size() == 0) fail(ErrorKind::shape, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline Var reshape(const Var& x, Shape shape) {
  if (numel(shape) != x.size()) fail(ErrorKind::shape, "reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  return make_result(std::move(shape), x.value(), "reshape", {x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Dense layers

/// y = x W + b over the last axis of x. W is [in, out], b is [out].
inline Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1 || x.shape().back() != w.dim(0) || b.dim(0) != w.dim(1))
    fail(ErrorKind::shape, "linear: input " + shape_str(x.shape()) + " incompatible with weights " + shape_str(w.shape()) +
                               " and bias " + shape_str(b.shape()));
  const std::size_t in = w.dim(0), out = w.dim(1), rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = out;
  std::vector<double> y(rows * out);
  detail::gemm(x.value().data(), rows, in, false, w.value().data(), in, out, false, y.data(), false);
  detail::add_row_bias(y.data(), rows, out, b.value().data());
  return make_result(std::move(shape), std::move(y), "linear", {x, w, b}, [rows, in, out](Node& self) {
    Node& x = *self.parents[0];
    Node& w = *self.parents[1];
    Node& b = *self.parents[2];
    const double* gy = self.grad.data();
    if (x.requires_grad) detail::gemm(gy, rows, out, false, w.value.data(), in, out, true, x.grad_buffer().data(), true);
    if (w.requires_grad) detail::gemm(x.value.data(), rows, in, true, gy, rows, out, false, w.grad_buffer().data(), true);
    if (b.requires_grad) detail::add_column_sums(gy, rows, out, b.grad_buffer().data());
  });
}

/// Running statistics of one batch-norm layer.
struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;
  bool initialized = false;
  bool frozen = false;

  static BatchNormStats fresh(std::size_t channels) { return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0), true, false}; }
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Normalizes each channel (last axis) over every other axis. Train mode uses
/// batch statistics and folds them into the running stats unless the stats are
/// frozen, in which case the layer behaves as in eval mode.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, Mode mode,
                      BatchNormOptions opt = {}) {
  if (x.rank() < 2 || gamma.rank() != 1 || x.shape().back() != gamma.size() || beta.size() != gamma.size())
    fail(ErrorKind::shape, "batch_norm: input " + shape_str(x.shape()) + " vs gamma " + shape_str(gamma.shape()));
  const std::size_t ch = gamma.size(), rows = x.size() / ch;
  if (rows == 0) fail(ErrorKind::shape, "batch_norm on empty batch");
  const bool use_batch = mode == Mode::train && !stats.frozen;
  if (!use_batch && !stats.initialized) fail(ErrorKind::uninitialized_stats, "batch_norm evaluated before any train-mode statistics");

  const auto& xv = x.value();
  std::vector<double> mu(ch, 0.0), inv_std(ch, 0.0);
  if (use_batch) {
    std::vector<double> var(ch, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < ch; ++c) mu[c] += xv[r * ch + c];
    for (auto& m : mu) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < ch; ++c) {
        const double d = xv[r * ch + c] - mu[c];
        var[c] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(rows);
    for (std::size_t c = 0; c < ch; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + opt.eps);
    if (!stats.initialized) stats = BatchNormStats::fresh(ch);
    const double unbias = rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
    for (std::size_t c = 0; c < ch; ++c) {
      stats.mean[c] = (1.0 - opt.momentum) * stats.mean[c] + opt.momentum * mu[c];
      stats.var[c] = (1.0 - opt.momentum) * stats.var[c] + opt.momentum * var[c] * unbias;
    }
  } else {
    if (stats.mean.size() != ch) fail(ErrorKind::shape, "batch_norm running stats have wrong channel count");
    mu = stats.mean;
    for (std::size_t c = 0; c < ch; ++c) inv_std[c] = 1.0 / std::sqrt(stats.var[c] + opt.eps);
  }

  std::vector<double> xhat(x.size()), y(x.size());
  const auto& g = gamma.value();
  const auto& bt = beta.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t i = r * ch + c;
      xhat[i] = (xv[i] - mu[c]) * inv_std[c];
      y[i] = g[c] * xhat[i] + bt[c];
    }

  return make_result(x.shape(), std::move(y), "batch_norm", {x, gamma, beta},
                     [rows, ch, use_batch, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node& x = *self.parents[0];
                       Node& gamma = *self.parents[1];
                       Node& beta = *self.parents[2];
                       const auto& gy = self.grad;
                       std::vector<double> dgamma(ch, 0.0), dbeta(ch, 0.0);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < ch; ++c) {
                           dbeta[c] += gy[r * ch + c];
                           dgamma[c] += gy[r * ch + c] * xhat[r * ch + c];
                         }
                       if (gamma.requires_grad) {
                         auto& gg = gamma.grad_buffer();
                         for (std::size_t c = 0; c < ch; ++c) gg[c] += dgamma[c];
                       }
                       if (beta.requires_grad) {
                         auto& gb = beta.grad_buffer();
                         for (std::size_t c = 0; c < ch; ++c) gb[c] += dbeta[c];
                       }
                       if (!x.requires_grad) return;
                       auto& gx = x.grad_buffer();
                       const auto& gv = gamma.value;
                       if (use_batch) {
                         const double n = static_cast<double>(rows);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < ch; ++c) {
                             const std::size_t i = r * ch + c;
                             gx[i] += gv[c] * inv_std[c] * (gy[i] - dbeta[c] / n - xhat[i] * dgamma[c] / n);
                           }
                       } else {
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < ch; ++c) gx[r * ch + c] += gy[r * ch + c] * gv[c] * inv_std[c];
                       }
                     });
}

enum class Activation { relu, leaky_relu };

inline constexpr double kLeakySlope = 0.2;

/// Backward uses derivative 0 for relu at exactly 0 and the slope for leaky
/// relu at exactly 0.
inline Var activation(const Var& x, Activation kind, double slope = kLeakySlope) {
  std::vector<double> out(x.value());
  const double neg = kind == Activation::relu ? 0.0 : slope;
  for (auto& v : out)
    if (v <= 0.0) v *= neg;
  return make_result(x.shape(), std::move(out), kind == Activation::relu ? "relu" : "leaky_relu", {x}, [neg](Node& self) {
    Node& x = *self.parents[0];
    auto& g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += x.value[i] > 0.0 ? self.grad[i] : neg * self.grad[i];
  });
}

/// Inverted dropout: survivors are scaled by 1 / (1 - p). Identity in eval mode.
template <typename Generator>
Var dropout(const Var& x, double p, Mode mode, Generator& rng) {
  if (!(p >= 0.0 && p < 1.0)) fail(ErrorKind::parameter, "dropout probability must lie in [0, 1)");
  if (mode == Mode::eval || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? s : 0.0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * mask[i];
  return make_result(x.shape(), std::move(out), "dropout", {x}, [mask = std::move(mask)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += mask[i] * self.grad[i];
  });
}

enum class Pool { max, avg };

/// [batch, points, ch] -> [batch, ch]. Max routes its gradient to the first
/// (lowest index) maximizer.
inline Var pool_points(const Var& x, Pool kind) {
  if (x.rank() != 3) fail(ErrorKind::shape, "pool_points expects [batch, points, ch], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), pts = x.dim(1), ch = x.dim(2);
  if (pts == 0) fail(ErrorKind::shape, "pool_points over zero points");
  const auto& xv = x.value();
  std::vector<double> out(batch * ch);
  if (kind == Pool::avg) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t p = 0; p < pts; ++p)
        for (std::size_t c = 0; c < ch; ++c) out[b * ch + c] += xv[(b * pts + p) * ch + c];
      for (std::size_t c = 0; c < ch; ++c) out[b * ch + c] /= static_cast<double>(pts);
    }
    return make_result({batch, ch}, std::move(out), "avg_pool", {x}, [batch, pts, ch](Node& self) {
      auto& g = self.parents[0]->grad_buffer();
      const double inv = 1.0 / static_cast<double>(pts);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < pts; ++p)
          for (std::size_t c = 0; c < ch; ++c) g[(b * pts + p) * ch + c] += self.grad[b * ch + c] * inv;
    });
  }
  std::vector<std::uint32_t> arg(batch * ch, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < ch; ++c) out[b * ch + c] = xv[b * pts * ch + c];
    for (std::size_t p = 1; p < pts; ++p)
      for (std::size_t c = 0; c < ch; ++c) {
        const double v = xv[(b * pts + p) * ch + c];
        if (v > out[b * ch + c]) {
          out[b * ch + c] = v;
          arg[b * ch + c] = static_cast<std::uint32_t>(p);
        }
      }
  }
  return make_result({batch, ch}, std::move(out), "max_pool", {x}, [batch, pts, ch, arg = std::move(arg)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c) g[(b * pts + arg[b * ch + c]) * ch + c] += self.grad[b * ch + c];
  });
}

/// Concatenates along the last axis; all leading dimensions must agree.
inline Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorKind::shape, "concat of nothing");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin(), p.shape().end() - 1) != lead)
      fail(ErrorKind::shape, "concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(v.begin() + r * widths[k], widths[k], out.begin() + r * total + offset);
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_result(std::move(shape), std::move(out), "concat", parts, [rows, total, widths](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (p.requires_grad) {
        auto& g = p.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) g[r * widths[k] + c] += self.grad[r * total + offset + c];
      }
      offset += widths[k];
    }
  });
}

/// Per-sample right multiplication: [batch, n, d] x [batch, d, d] -> [batch, n, d].
inline Var batched_transform(const Var& x, const Var& t) {
  if (x.rank() != 3 || t.rank() != 3 || t.dim(0) != x.dim(0) || t.dim(1) != x.dim(2) || t.dim(2) != x.dim(2))
    fail(ErrorKind::shape, "batched_transform: " + shape_str(x.shape()) + " by " + shape_str(t.shape()));
  const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    detail::gemm(x.value().data() + b * n * d, n, d, false, t.value().data() + b * d * d, d, d, false, out.data() + b * n * d, false);
  return make_result(x.shape(), std::move(out), "batched_transform", {x, t}, [batch, n, d](Node& self) {
    Node& x = *self.parents[0];
    Node& t = *self.parents[1];
    for (std::size_t b = 0; b < batch; ++b) {
      const double* gy = self.grad.data() + b * n * d;
      if (x.requires_grad)
        detail::gemm(gy, n, d, false, t.value.data() + b * d * d, d, d, true, x.grad_buffer().data() + b * n * d, true);
      if (t.requires_grad)
        detail::gemm(x.value.data() + b * n * d, n, d, true, gy, n, d, false, t.grad_buffer().data() + b * d * d, true);
    }
  });
}

// ---------------------------------------------------------------------------
// Graph ops for edge convolution

/// Neighbor table [batch, n, k] of within-sample point indices.
struct Neighbors {
  std::size_t batch = 0;
  std::size_t points = 0;
  std::size_t k = 0;
  std::vector<std::int32_t> index;

  std::int32_t at(std::size_t b, std::size_t i, std::size_t j) const { return index[(b * points + i) * k + j]; }
};

/// k nearest neighbors by squared Euclidean distance in feature space, self
/// excluded, ordered by (distance, index) so ties go to the lower index.
inline Neighbors knn_graph(const Var& features, std::size_t k) {
  if (features.rank() != 3) fail(ErrorKind::shape, "knn_graph expects [batch, n, ch], got " + shape_str(features.shape()));
  const std::size_t batch = features.dim(0), n = features.dim(1), ch = features.dim(2);
  if (k == 0 || k >= n) fail(ErrorKind::parameter, "knn_graph needs 0 < k < n (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  Neighbors nb{batch, n, k, std::vector<std::int32_t>(batch * n * k)};
  detail::MatRM gram(n, n);
  Eigen::RowVectorXd sq(n), dist(n);
  std::vector<std::pair<double, std::int32_t>> best(k);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* f = features.value().data() + b * n * ch;
    detail::gemm(f, n, ch, false, f, n, ch, true, gram.data(), false);
    sq = gram.diagonal().transpose();
    for (std::size_t i = 0; i < n; ++i) {
      dist = (sq.array() + sq(i)) - 2.0 * gram.row(i).array();
      // Candidates arrive in index order, so an equal distance never displaces
      // an earlier entry and a strict comparison keeps ties at the lower index.
      std::size_t filled = 0;
      double worst = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        const double d = dist(j);
        if (filled == k && !(d < worst)) continue;
        if (j == i) continue;
        std::size_t pos = filled < k ? filled++ : k - 1;
        while (pos > 0 && d < best[pos - 1].first) {
          best[pos] = best[pos - 1];
          --pos;
        }
        best[pos] = {d, static_cast<std::int32_t>(j)};
        if (filled == k) worst = best[k - 1].first;
      }
      for (std::size_t j = 0; j < k; ++j) nb.index[(b * n + i) * k + j] = best[j].second;
    }
  }
  return nb;
}

/// Edge convolution: for every edge (i, j) forms [x_i, x_j - x_i], applies one
/// shared linear map (weights [2*ch_in, ch_out]), batch norm over all edges,
/// leaky relu, then a max over the k neighbors of each point.
///
/// The linear map is evaluated per point rather than per edge:
///   [x_i, x_j - x_i] W = x_i (W_top - W_bottom) + x_j W_bottom
/// which is algebraically the same and k times cheaper.
inline Var edge_conv(const Var& x, const Neighbors& nb, const Var& w, const Var& b, const Var& gamma, const Var& beta,
                     BatchNormStats& stats, Mode mode, BatchNormOptions opt = {}, double slope = kLeakySlope) {
  if (x.rank() != 3) fail(ErrorKind::shape, "edge_conv expects [batch, n, ch], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), n = x.dim(1), cin = x.dim(2);
  if (w.rank() != 2 || w.dim(0) != 2 * cin || b.size() != w.dim(1) || gamma.size() != w.dim(1) || beta.size() != w.dim(1))
    fail(ErrorKind::shape, "edge_conv: input " + shape_str(x.shape()) + " incompatible with weights " + shape_str(w.shape()));
  if (nb.batch != batch || nb.points != n) fail(ErrorKind::graph, "edge_conv: neighbor table does not match features");
  for (auto j : nb.index)
    if (j < 0 || static_cast<std::size_t>(j) >= n) fail(ErrorKind::graph, "edge_conv: neighbor index " + std::to_string(j) + " out of range");
  const std::size_t cout = w.dim(1), k = nb.k, rows = batch * n;
  const double edges = static_cast<double>(rows * k);
  const bool use_batch = mode == Mode::train && !stats.frozen;
  if (!use_batch && !stats.initialized) fail(ErrorKind::uninitialized_stats, "edge_conv evaluated before any train-mode statistics");

  const double* wv = w.value().data();
  const double* w_bottom = wv + cin * cout;
  std::vector<double> w_center(cin * cout);
  for (std::size_t i = 0; i < cin * cout; ++i) w_center[i] = wv[i] - w_bottom[i];
  std::vector<double> P(rows * cout), Q(rows * cout);
  detail::gemm(x.value().data(), rows, cin, false, w_center.data(), cin, cout, false, P.data(), false);
  detail::add_row_bias(P.data(), rows, cout, b.value().data());
  detail::gemm(x.value().data(), rows, cin, false, w_bottom, cin, cout, false, Q.data(), false);

  auto edge_row = [&nb, n, k](std::size_t row, std::size_t j) {
    const std::size_t bidx = row / n;
    return bidx * n + static_cast<std::size_t>(nb.index[row * k + j]);
  };

  // One gather pass: neighbor sum, max and min of Q per (point, channel), plus
  // in-degree of every point. Batch statistics over all edges and the max over
  // k of a monotone response both follow from these aggregates.
  std::vector<double> S(rows * cout, 0.0), qmax(rows * cout), qmin(rows * cout);
  std::vector<double> amax(rows * cout, 0.0), amin(rows * cout, 0.0);
  std::vector<double> indeg(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double* sr = &S[r * cout];
    double* hi = &qmax[r * cout];
    double* lo = &qmin[r * cout];
    double* ahi = &amax[r * cout];
    double* alo = &amin[r * cout];
    const std::size_t r0 = edge_row(r, 0);
    indeg[r0] += 1.0;
    std::copy_n(&Q[r0 * cout], cout, hi);
    std::copy_n(&Q[r0 * cout], cout, lo);
    std::copy_n(&Q[r0 * cout], cout, sr);
    for (std::size_t j = 1; j < k; ++j) {
      const std::size_t rj = edge_row(r, j);
      indeg[rj] += 1.0;
      const double* q = &Q[rj * cout];
      const auto jj = static_cast<double>(j);
      for (std::size_t c = 0; c < cout; ++c) {
        const double v = q[c];
        sr[c] += v;
        const bool up = v > hi[c];
        const bool down = v < lo[c];
        hi[c] = up ? v : hi[c];
        ahi[c] = up ? jj : ahi[c];
        lo[c] = down ? v : lo[c];
        alo[c] = down ? jj : alo[c];
      }
    }
  }

  std::vector<double> mu(cout, 0.0), inv_std(cout, 0.0);
  if (use_batch) {
    std::vector<double> mp(cout, 0.0), mq(cout, 0.0), var(cout, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = &P[r * cout];
      const double* q = &Q[r * cout];
      const double d = indeg[r];
      for (std::size_t c = 0; c < cout; ++c) {
        mp[c] += p[c];
        mq[c] += d * q[c];
      }
    }
    for (std::size_t c = 0; c < cout; ++c) {
      mp[c] /= static_cast<double>(rows);
      mq[c] /= edges;
      mu[c] = mp[c] + mq[c];
    }
    // sum over edges of (u_i + v_j)^2 with u = P - mean_P, v = Q - mean_Q
    const double kd = static_cast<double>(k);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = &P[r * cout];
      const double* q = &Q[r * cout];
      const double* sr = &S[r * cout];
      const double d = indeg[r];
      for (std::size_t c = 0; c < cout; ++c) {
        const double u = p[c] - mp[c];
        const double v = q[c] - mq[c];
        var[c] += kd * u * u + d * v * v + 2.0 * u * (sr[c] - kd * mq[c]);
      }
    }
    for (auto& v : var) v = std::max(v / edges, 0.0);
    for (std::size_t c = 0; c < cout; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + opt.eps);
    if (!stats.initialized) stats = BatchNormStats::fresh(cout);
    const double unbias = edges > 1 ? edges / (edges - 1.0) : 1.0;
    for (std::size_t c = 0; c < cout; ++c) {
      stats.mean[c] = (1.0 - opt.momentum) * stats.mean[c] + opt.momentum * mu[c];
      stats.var[c] = (1.0 - opt.momentum) * stats.var[c] + opt.momentum * var[c] * unbias;
    }
  } else {
    mu = stats.mean;
    for (std::size_t c = 0; c < cout; ++c) inv_std[c] = 1.0 / std::sqrt(stats.var[c] + opt.eps);
  }

  // The per-edge response leaky(a e + d) is monotone in e, increasing when
  // gamma > 0 and decreasing when gamma < 0, so the winner over k neighbors is
  // the edge with the largest (or smallest) Q. First index wins ties.
  const auto& g = gamma.value();
  const auto& bt = beta.value();
  std::vector<double> out(rows * cout);
  std::vector<std::uint32_t> arg(rows * cout, 0);
  std::vector<double> sa(cout), sd(cout);
  for (std::size_t c = 0; c < cout; ++c) {
    sa[c] = g[c] * inv_std[c];
    sd[c] = bt[c] - sa[c] * mu[c];
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t r0 = edge_row(r, 0);
    for (std::size_t c = 0; c < cout; ++c) {
      const std::size_t i = r * cout + c;
      double q;
      if (sa[c] > 0.0) {
        q = qmax[i];
        arg[i] = static_cast<std::uint32_t>(amax[i]);
      } else if (sa[c] < 0.0) {
        q = qmin[i];
        arg[i] = static_cast<std::uint32_t>(amin[i]);
      } else {
        q = Q[r0 * cout + c];
      }
      const double y = sa[c] * (P[i] + q) + sd[c];
      out[i] = y > 0.0 ? y : slope * y;
    }
  }
  qmax = {};
  qmin = {};
  amax = {};
  amin = {};

  return make_result(
      {batch, n, cout}, std::move(out), "edge_conv", {x, w, b, gamma, beta},
      [=, nb = nb, P = std::move(P), Q = std::move(Q), S = std::move(S), indeg = std::move(indeg), mu = std::move(mu),
       inv_std = std::move(inv_std), arg = std::move(arg), w_center = std::move(w_center)](Node& self) {
        Node& x = *self.parents[0];
        Node& w = *self.parents[1];
        Node& b = *self.parents[2];
        Node& gamma = *self.parents[3];
        Node& beta = *self.parents[4];
        const auto& gv = gamma.value;
        const auto& bv = beta.value;
        auto erow = [&](std::size_t row, std::size_t j) { return (row / n) * n + static_cast<std::size_t>(nb.index[row * k + j]); };

        // Upstream gradient lands only on the winning edge of each (point, channel).
        std::vector<double> dy_win(rows * cout);
        std::vector<double> dgamma(cout, 0.0), dbeta(cout, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cout; ++c) {
            const std::size_t i = r * cout + c;
            const double e = P[i] + Q[erow(r, arg[i]) * cout + c];
            const double xh = (e - mu[c]) * inv_std[c];
            const double y = gv[c] * xh + bv[c];
            const double dy = self.grad[i] * (y > 0.0 ? 1.0 : slope);
            dy_win[i] = dy;
            dgamma[c] += dy * xh;
            dbeta[c] += dy;
          }
        if (gamma.requires_grad)
          for (std::size_t c = 0; c < cout; ++c) gamma.grad_buffer()[c] += dgamma[c];
        if (beta.requires_grad)
          for (std::size_t c = 0; c < cout; ++c) beta.grad_buffer()[c] += dbeta[c];
        if (!x.requires_grad && !w.requires_grad && !b.requires_grad) return;

        std::vector<double> s(cout);
        for (std::size_t c = 0; c < cout; ++c) s[c] = gv[c] * inv_std[c];
        // Winner scatter: dQ gets s * dy on the winning neighbor.
        std::vector<double> dP(rows * cout), dQ(rows * cout, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cout; ++c) {
            const std::size_t i = r * cout + c;
            const double de = s[c] * dy_win[i];
            dP[i] = de;
            dQ[erow(r, arg[i]) * cout + c] += de;
          }
        if (use_batch) {
          // Batch-statistics terms, summed over the k edges of each source point
          // (for dP) and over the incoming edges of each target point (for dQ):
          //   de_ij = s (dy_ij - m1 - xhat_ij m2)
          const double kd = static_cast<double>(k);
          std::vector<double> T(rows * cout, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* p = &P[r * cout];
            for (std::size_t j = 0; j < k; ++j) {
              double* t = &T[erow(r, j) * cout];
              for (std::size_t c = 0; c < cout; ++c) t[c] += p[c];
            }
          }
          std::vector<double> m1(cout), m2(cout);
          for (std::size_t c = 0; c < cout; ++c) {
            m1[c] = dbeta[c] / edges;
            m2[c] = dgamma[c] / edges;
          }
          for (std::size_t r = 0; r < rows; ++r) {
            const double d = indeg[r];
            for (std::size_t c = 0; c < cout; ++c) {
              const std::size_t i = r * cout + c;
              const double xsum_out = (kd * (P[i] - mu[c]) + S[i]) * inv_std[c];
              const double xsum_in = (T[i] - d * mu[c] + d * Q[i]) * inv_std[c];
              dP[i] -= s[c] * (kd * m1[c] + m2[c] * xsum_out);
              dQ[i] -= s[c] * (d * m1[c] + m2[c] * xsum_in);
            }
          }
        }

        const double* xv = x.value.data();
        if (b.requires_grad) detail::add_column_sums(dP.data(), rows, cout, b.grad_buffer().data());
        if (w.requires_grad) {
          double* gw = w.grad_buffer().data();
          std::vector<double> xt_dp(cin * cout), xt_dq(cin * cout);
          detail::gemm(xv, rows, cin, true, dP.data(), rows, cout, false, xt_dp.data(), false);
          detail::gemm(xv, rows, cin, true, dQ.data(), rows, cout, false, xt_dq.data(), false);
          for (std::size_t i = 0; i < cin * cout; ++i) {
            gw[i] += xt_dp[i];
            gw[cin * cout + i] += xt_dq[i] - xt_dp[i];
          }
        }
        if (x.requires_grad) {
          double* gx = x.grad_buffer().data();
          detail::gemm(dP.data(), rows, cout, false, w_center.data(), cin, cout, true, gx, true);
          detail::gemm(dQ.data(), rows, cout, false, w.value.data() + cin * cout, cin, cout, true, gx, true);
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

enum class Loss { huber, smooth_l1 };

/// Mean over the batch. Huber: 0.5 r^2 for |r| <= delta else delta (|r| - delta/2).
/// Smooth L1: 0.5 r^2 / beta for |r| < beta else |r| - beta/2.
inline Var regression_loss(const Var& pred, const std::vector<double>& target, Loss kind, double threshold = 1.0) {
  if (pred.size() == 0) fail(ErrorKind::parameter, "loss over an empty batch");
  if (pred.size() != target.size())
    fail(ErrorKind::shape, "loss: " + std::to_string(pred.size()) + " predictions vs " + std::to_string(target.size()) + " targets");
  if (!(threshold > 0.0)) fail(ErrorKind::parameter, "loss threshold must be positive");
  const std::size_t n = pred.size();
  double total = 0.0;
  std::vector<double> slope(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = pred.value()[i] - target[i];
    const double a = std::abs(r);
    if (kind == Loss::huber) {
      if (a <= threshold) {
        total += 0.5 * r * r;
        slope[i] = r;
      } else {
        total += threshold * (a - 0.5 * threshold);
        slope[i] = threshold * (r > 0 ? 1.0 : -1.0);
      }
    } else {
      if (a < threshold) {
        total += 0.5 * r * r / threshold;
        slope[i] = r / threshold;
      } else {
        total += a - 0.5 * threshold;
        slope[i] = r > 0 ? 1.0 : -1.0;
      }
    }
  }
  return make_result({1}, {total / static_cast<double>(n)}, kind == Loss::huber ? "huber" : "smooth_l1", {pred},
                     [slope = std::move(slope)](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       const double s = self.grad[0] / static_cast<double>(slope.size());
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * slope[i];
                     });
}

}  // namespace bwcloud
