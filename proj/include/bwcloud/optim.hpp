#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "bwcloud/error.hpp"
#include "bwcloud/rng.hpp"
#include "bwcloud/tensor.hpp"

namespace bwcloud {

/// Named trainable parameters plus batch-norm running statistics, both kept in
/// registration order.
class ParamStore {
 public:
  Var add(const std::string& name, Shape shape, std::vector<double> values) {
    if (index_.count(name)) fail(ErrorKind::config, "duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back({name, Var::leaf(std::move(shape), std::move(values), true)});
    return params_.back().var;
  }

  BatchNormStats& add_stats(const std::string& name, std::size_t channels) {
    if (stats_index_.count(name)) fail(ErrorKind::config, "duplicate batch-norm name " + name);
    stats_index_[name] = stats_.size();
    stats_.push_back({name, BatchNormStats::fresh(channels)});
    return stats_.back().stats;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Var get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::config, "unknown parameter " + name);
    return params_[it->second].var;
  }

  BatchNormStats& stats(const std::string& name) {
    auto it = stats_index_.find(name);
    if (it == stats_index_.end()) fail(ErrorKind::config, "unknown batch-norm stats " + name);
    return stats_[it->second].stats;
  }
  const BatchNormStats& stats(const std::string& name) const { return const_cast<ParamStore*>(this)->stats(name); }

  bool trainable(const std::string& name) const { return get(name).requires_grad(); }
  void set_trainable(const std::string& name, bool flag) { get(name).set_requires_grad(flag); }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  struct Entry {
    std::string name;
    Var var;
  };
  struct StatsEntry {
    std::string name;
    BatchNormStats stats;
  };

  const std::vector<Entry>& params() const { return params_; }
  std::vector<StatsEntry>& all_stats() { return stats_; }
  const std::vector<StatsEntry>& all_stats() const { return stats_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.size();
    return n;
  }

  /// Deep copy of every array (parameters and running stats).
  struct Snapshot {
    std::vector<std::vector<double>> params;
    std::vector<BatchNormStats> stats;
  };

  Snapshot snapshot() const {
    Snapshot s;
    for (const auto& p : params_) s.params.push_back(p.var.value());
    for (const auto& st : stats_) s.stats.push_back(st.stats);
    return s;
  }

  void restore(const Snapshot& s) {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].var.mutable_value() = s.params[i];
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      const bool frozen = stats_[i].stats.frozen;
      stats_[i].stats = s.stats[i];
      stats_[i].stats.frozen = frozen;
    }
  }

 private:
  std::vector<Entry> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<StatsEntry> stats_;
  std::map<std::string, std::size_t> stats_index_;
};

/// Kaiming-uniform weights for a [fan_in, fan_out] map feeding a (leaky) relu.
inline std::vector<double> kaiming_uniform(std::size_t fan_in, std::size_t fan_out, double negative_slope, std::uint64_t seed) {
  const double gain = std::sqrt(2.0 / (1.0 + negative_slope * negative_slope));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  Rng rng(seed);
  std::vector<double> w(fan_in * fan_out);
  for (auto& v : w) v = uniform(rng, -bound, bound);
  return w;
}

enum class OptimizerKind { adam, adamw };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adamw;
  std::size_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  std::map<std::string, Moments> moments;
};

/// One update of every trainable parameter that holds a gradient. AdamW
/// applies decoupled decay before the moment step; Adam folds weight decay
/// into the gradient. Frozen parameters are never touched.
inline void optimizer_step(ParamStore& params, OptimizerState& state) {
  for (const auto& p : params.params()) {
    if (!p.var.requires_grad() || !p.var.has_grad()) continue;
    for (double g : p.var.grad())
      if (!std::isfinite(g)) fail(ErrorKind::diverged, "non-finite gradient in parameter " + p.name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& p : params.params()) {
    if (!p.var.requires_grad() || !p.var.has_grad()) continue;
    Var var = p.var;
    auto& theta = var.mutable_value();
    const auto& grad = var.grad();
    auto& mom = state.moments[p.name];
    if (mom.m.size() != theta.size()) {
      mom.m.assign(theta.size(), 0.0);
      mom.v.assign(theta.size(), 0.0);
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double g = grad[i];
      if (state.kind == OptimizerKind::adamw)
        theta[i] -= state.lr * state.weight_decay * theta[i];
      else
        g += state.weight_decay * theta[i];
      mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
      mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      theta[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

/// Cosine one-cycle schedule: warm up from max_lr / div to max_lr over the
/// first `warmup_fraction` of the steps, then anneal to max_lr / final_div.
struct OneCycleSchedule {
  double max_lr = 1e-3;
  std::size_t total_steps = 2;
  double div = 25.0;
  double final_div = 1e4;
  double warmup_fraction = 0.3;

  double lr_at(std::size_t step) const {
    if (total_steps < 2) fail(ErrorKind::parameter, "one-cycle schedule needs at least 2 steps");
    const double start = max_lr / div;
    const double end = max_lr / final_div;
    const double peak = warmup_fraction * static_cast<double>(total_steps);
    const double last = static_cast<double>(total_steps - 1);
    const double t = std::min(static_cast<double>(step), last);
    if (t <= peak) {
      if (peak <= 0.0) return max_lr;
      return start + (max_lr - start) * 0.5 * (1.0 - std::cos(std::numbers::pi * t / peak));
    }
    const double span = last - peak;
    if (span <= 0.0) return end;
    return end + (max_lr - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * (t - peak) / span));
  }
};

/// Early-stopping and plateau bookkeeping. Improvement means a strictly lower
/// monitored value.
struct TrainControl {
  std::size_t early_patience = 15;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.5;
  double min_lr = 1e-7;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;
  std::size_t since_reduction = 0;

  void validate() const {
    if (early_patience < 1 || plateau_patience < 1) fail(ErrorKind::parameter, "patience must be at least 1");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail(ErrorKind::parameter, "plateau factor must lie in (0, 1)");
  }
};

enum class StopDecision { proceed, stop };

/// Records one validation value. Returns true when it is a new best.
inline bool observe_metric(TrainControl& control, double metric) {
  if (metric < control.best) {
    control.best = metric;
    control.since_improvement = 0;
    control.since_reduction = 0;
    return true;
  }
  ++control.since_improvement;
  ++control.since_reduction;
  return false;
}

inline StopDecision early_stop_check(TrainControl& control, double metric) {
  observe_metric(control, metric);
  return control.since_improvement >= control.early_patience ? StopDecision::stop : StopDecision::proceed;
}

/// Learning rate after the plateau rule has seen the latest epoch (call after
/// observe_metric). Cuts by `plateau_factor` once `plateau_patience` epochs
/// pass without improvement, never below min_lr.
inline double plateau_lr(TrainControl& control, double lr) {
  if (control.since_reduction >= control.plateau_patience) {
    control.since_reduction = 0;
    return std::max(lr * control.plateau_factor, control.min_lr);
  }
  return lr;
}

}  // namespace bwcloud
