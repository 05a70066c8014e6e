#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bwcloud/dataset.hpp"
#include "bwcloud/depth_io.hpp"
#include "bwcloud/error.hpp"
#include "bwcloud/kv.hpp"
#include "bwcloud/metrics.hpp"
#include "bwcloud/models.hpp"
#include "bwcloud/optim.hpp"
#include "bwcloud/pointcloud.hpp"
#include "bwcloud/rng.hpp"

namespace bwcloud {

// ---------------------------------------------------------------------------
// Execution

using Task = std::function<void()>;

/// Runs every task and returns once all have finished. The CLI supplies a
/// thread-pool executor; library code only ever goes through this hook.
using Executor = std::function<void(std::vector<Task>&)>;

inline void run_sequential(std::vector<Task>& tasks) {
  for (auto& t : tasks) t();
}

using Logger = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Designs and scenarios

enum class Design { single_source, joint, transfer };
enum class Scenario { none, medium, large, medium_plus_large };

inline std::string to_string(Design d) {
  switch (d) {
    case Design::single_source: return "single_source";
    case Design::joint: return "joint";
    case Design::transfer: return "transfer";
  }
  return "?";
}

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::none: return "none";
    case Scenario::medium: return "medium";
    case Scenario::large: return "large";
    case Scenario::medium_plus_large: return "medium_plus_large";
  }
  return "?";
}

inline Design parse_design(std::string_view s) {
  if (s == "single_source") return Design::single_source;
  if (s == "joint") return Design::joint;
  if (s == "transfer") return Design::transfer;
  fail(ErrorKind::config, "unknown design '" + std::string(s) + "'");
}

inline Scenario parse_scenario(std::string_view s) {
  if (s == "none") return Scenario::none;
  if (s == "medium") return Scenario::medium;
  if (s == "large") return Scenario::large;
  if (s == "medium_plus_large") return Scenario::medium_plus_large;
  fail(ErrorKind::config, "unknown scenario '" + std::string(s) + "'");
}

inline std::vector<std::string> external_farms(Scenario s) {
  switch (s) {
    case Scenario::none: return {};
    case Scenario::medium: return {"medium"};
    case Scenario::large: return {"large"};
    case Scenario::medium_plus_large: return {"medium", "large"};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Standardized clouds held in memory

/// Cows are keyed "farm/cow" because cow ids are only unique within a farm.
inline std::string cow_key(const std::string& farm, const std::string& cow) { return farm + "/" + cow; }

struct Sample {
  std::string farm_id;
  std::string cow_id;
  std::string frame_id;
  double weight_kg = 0.0;

  std::string cow() const { return cow_key(farm_id, cow_id); }
};

/// Every frame of the loaded farms, deprojected and preprocessed once.
class CloudBank {
 public:
  static constexpr std::size_t kFloats = kStandardPointCount * 3;

  /// Loads a farm: depth CSV -> clip -> deproject -> clean/normalize/standardize.
  void add_farm(const DatasetManifest& manifest, const CameraProfile& camera, std::uint64_t run_seed,
                const Executor& exec = run_sequential) {
    const std::size_t base = samples_.size();
    for (const auto& r : manifest.records) {
      if (r.farm_id != camera.farm_id)
        fail(ErrorKind::config, "manifest row for farm '" + r.farm_id + "' paired with camera '" + camera.farm_id + "'");
      if (index_.count(frame_key(r.farm_id, r.cow_id, r.frame_id)))
        fail(ErrorKind::manifest, "frame " + r.farm_id + "/" + r.cow_id + "/" + r.frame_id + " loaded twice");
      index_[frame_key(r.farm_id, r.cow_id, r.frame_id)] = samples_.size();
      samples_.push_back({r.farm_id, r.cow_id, r.frame_id, r.body_weight_kg});
    }
    data_.resize(samples_.size() * kFloats);
    std::vector<Task> tasks;
    const std::size_t chunk = 64;
    for (std::size_t lo = 0; lo < manifest.records.size(); lo += chunk) {
      tasks.push_back([&, lo] {
        const std::size_t hi = std::min(lo + chunk, manifest.records.size());
        for (std::size_t i = lo; i < hi; ++i) {
          const auto& r = manifest.records[i];
          const FrameId id{r.farm_id, r.cow_id, r.frame_id};
          const auto frame = clip_depth(load_depth_csv(manifest.resolve(r), id));
          const auto cloud = preprocess(deproject(frame, camera), run_seed);
          double* out = &data_[(base + i) * kFloats];
          for (std::size_t p = 0; p < kStandardPointCount; ++p) {
            out[3 * p] = cloud.points[p].x;
            out[3 * p + 1] = cloud.points[p].y;
            out[3 * p + 2] = cloud.points[p].z;
          }
        }
      });
    }
    exec(tasks);
  }

  /// Adds an already standardized cloud (tests, in-memory pipelines).
  void add_cloud(const Sample& s, const std::vector<double>& points) {
    if (points.size() != kFloats) fail(ErrorKind::contract, "cloud bank expects standardized clouds of 1024 points");
    if (index_.count(frame_key(s.farm_id, s.cow_id, s.frame_id))) fail(ErrorKind::manifest, "frame loaded twice");
    index_[frame_key(s.farm_id, s.cow_id, s.frame_id)] = samples_.size();
    samples_.push_back(s);
    data_.insert(data_.end(), points.begin(), points.end());
  }

  std::size_t size() const { return samples_.size(); }
  const Sample& sample(std::size_t i) const { return samples_[i]; }
  const double* points(std::size_t i) const { return &data_[i * kFloats]; }

  /// Sorted cow keys of one farm.
  std::vector<std::string> cows_of(const std::string& farm) const {
    std::set<std::string> s;
    for (const auto& x : samples_)
      if (x.farm_id == farm) s.insert(x.cow());
    return {s.begin(), s.end()};
  }

  /// Sample indices (bank order) of the listed cows.
  std::vector<std::size_t> frames_of(const std::vector<std::string>& cows) const {
    const std::set<std::string> wanted(cows.begin(), cows.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples_.size(); ++i)
      if (wanted.count(samples_[i].cow())) out.push_back(i);
    return out;
  }

  /// [n, 1024, 3] batch of the given samples.
  Var batch(const std::vector<std::size_t>& idx) const {
    std::vector<double> v(idx.size() * kFloats);
    for (std::size_t b = 0; b < idx.size(); ++b) std::copy_n(points(idx[b]), kFloats, v.begin() + b * kFloats);
    return Var::constant({idx.size(), kStandardPointCount, 3}, std::move(v));
  }

 private:
  static std::string frame_key(const std::string& f, const std::string& c, const std::string& fr) { return f + "/" + c + "/" + fr; }

  std::vector<Sample> samples_;
  std::vector<double> data_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Cow-level splits

/// Size of the held-out part: floor(n * percent / 100), at least 1; the first
/// part takes the rest and must also be non-empty.
inline std::pair<std::size_t, std::size_t> split_sizes(std::size_t n, std::size_t holdout_percent, const std::string& what) {
  const std::size_t held = std::max<std::size_t>(1, n * holdout_percent / 100);
  if (held >= n) fail(ErrorKind::partition, what + ": " + std::to_string(n) + " cows cannot fill both partitions");
  return {n - held, held};
}

inline std::vector<std::string> shuffled(std::vector<std::string> items, std::uint64_t seed) {
  std::sort(items.begin(), items.end());
  Rng rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[uniform_index(rng, i)]);
  return items;
}

struct CowSplit {
  std::vector<std::string> train;  // subtrain + val
  std::vector<std::string> test;
  std::vector<std::string> subtrain;
  std::vector<std::string> val;
};

/// 80:20 split of a cow pool into subtrain / validation.
inline void split_train_val(const std::vector<std::string>& pool, std::uint64_t seed, std::vector<std::string>& subtrain,
                            std::vector<std::string>& val) {
  const auto order = shuffled(pool, seed);
  const auto [n_sub, n_val] = split_sizes(order.size(), 20, "subtrain/validation split");
  subtrain.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_sub));
  val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_sub), order.end());
  std::sort(subtrain.begin(), subtrain.end());
  std::sort(val.begin(), val.end());
}

/// 60:40 train/test, then 80:20 subtrain/validation inside train. Each
/// partition is returned sorted.
inline CowSplit split_cows(const std::vector<std::string>& cows, std::uint64_t seed) {
  if (cows.size() < 5) fail(ErrorKind::partition, "need at least 5 cows to split, got " + std::to_string(cows.size()));
  if (std::set<std::string>(cows.begin(), cows.end()).size() != cows.size()) fail(ErrorKind::partition, "duplicate cow ids in split input");
  const auto order = shuffled(cows, seed);
  const auto [n_train, n_test] = split_sizes(order.size(), 40, "train/test split");
  CowSplit s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  split_train_val(s.train, derive_seed(seed, {"subtrain"}), s.subtrain, s.val);
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

// ---------------------------------------------------------------------------
// Hyperparameter grid

struct HyperCell {
  ModelConfig config;
  double lr = 1e-3;
  double weight_decay = 1e-4;

  std::string describe() const {
    std::ostringstream os;
    os << "lr=" << format_double(lr) << ";dropout=" << format_double(config.dropout) << ";wd=" << format_double(weight_decay)
       << ";emb=" << config.embedding_dim;
    if (config.kind == ModelKind::dgcnn) os << ";k=" << config.k_neighbors;
    else os << ";tnet=" << (config.feature_tnet ? "on" : "off");
    return os.str();
  }
};

/// Search lists per model. Enumeration order follows the table: learning rate
/// outermost, then dropout, then the model-specific axes.
struct HyperGrid {
  ModelKind kind = ModelKind::pointnet;
  std::vector<double> lr;
  std::vector<double> dropout;
  std::vector<double> weight_decay;
  std::vector<std::size_t> embedding_dim;
  std::vector<std::size_t> k_neighbors;  // dgcnn
  std::vector<bool> feature_tnet;        // pointnet

  static HyperGrid defaults(ModelKind kind) {
    HyperGrid g;
    g.kind = kind;
    g.lr = {1e-6, 1e-5, 1e-4, 1e-3};
    g.dropout = {0.2, 0.3, 0.4, 0.5};
    g.weight_decay = {1e-5, 1e-4, 1e-3, 1e-2};
    g.embedding_dim = {256, 512, 1024};
    g.k_neighbors = {15, 20};
    g.feature_tnet = {true, false};
    return g;
  }

  std::vector<HyperCell> cells() const {
    if (lr.empty() || dropout.empty() || weight_decay.empty() || embedding_dim.empty() ||
        (kind == ModelKind::dgcnn ? k_neighbors.empty() : feature_tnet.empty()))
      fail(ErrorKind::config, "hyperparameter grid has an empty axis");
    std::vector<HyperCell> out;
    const std::size_t n_special = kind == ModelKind::dgcnn ? k_neighbors.size() : feature_tnet.size();
    for (double l : lr)
      for (double d : dropout) {
        if (kind == ModelKind::dgcnn) {
          for (std::size_t s = 0; s < n_special; ++s)
            for (double w : weight_decay)
              for (auto e : embedding_dim) out.push_back(make(l, d, w, e, k_neighbors[s], false));
        } else {
          for (double w : weight_decay)
            for (auto e : embedding_dim)
              for (std::size_t s = 0; s < n_special; ++s) out.push_back(make(l, d, w, e, 20, feature_tnet[s]));
        }
      }
    return out;
  }

 private:
  HyperCell make(double l, double d, double w, std::size_t e, std::size_t k, bool tnet) const {
    HyperCell c;
    c.config.kind = kind;
    c.config.dropout = d;
    c.config.embedding_dim = e;
    c.config.k_neighbors = k;
    c.config.feature_tnet = tnet;
    c.config.validate();
    c.lr = l;
    c.weight_decay = w;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Training

enum class Schedule { onecycle, plateau };

struct TrainSettings {
  Schedule schedule = Schedule::plateau;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t max_epochs = 200;
  std::size_t batch_size = 32;
  Loss loss = Loss::smooth_l1;
  double loss_threshold = 1.0;
  TrainControl control;  // patience, plateau factor, min lr
  bool early_stop = true;
  std::string stage = "train";       // label used in error messages
  std::string forbidden_farm;        // leak guard: no batch may contain this farm
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_mape = std::numeric_limits<double>::quiet_NaN();
};

struct TrainReport {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_mape = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
  std::size_t batches_seen = 0;
};

/// Cow-level means of frame predictions. Every frame must belong to a cow in
/// `weights`; returns cow -> mean prediction.
inline std::map<std::string, double> aggregate_frames(const std::vector<std::string>& frame_cows, const std::vector<double>& preds,
                                                      const std::map<std::string, double>& weights) {
  if (frame_cows.size() != preds.size()) fail(ErrorKind::shape, "aggregate: frame and prediction counts differ");
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!weights.count(frame_cows[i])) fail(ErrorKind::manifest, "prediction for unknown cow " + frame_cows[i]);
    auto& a = acc[frame_cows[i]];
    a.first += preds[i];
    ++a.second;
  }
  std::map<std::string, double> out;
  for (const auto& [cow, a] : acc) out[cow] = a.first / static_cast<double>(a.second);
  return out;
}

struct FramePrediction {
  FrameId id;
  double kg = 0.0;
};

/// Per-cow mean of frame-level predictions, checked against a manifest.
inline std::map<std::string, double> aggregate_predictions(const std::vector<FramePrediction>& preds, const DatasetManifest& manifest) {
  std::set<std::string> frames;
  std::map<std::string, double> weights;
  for (const auto& r : manifest.records) {
    frames.insert(r.farm_id + "/" + r.cow_id + "/" + r.frame_id);
    weights[cow_key(r.farm_id, r.cow_id)] = r.body_weight_kg;
  }
  std::vector<std::string> cows;
  std::vector<double> kg;
  for (const auto& p : preds) {
    if (!frames.count(p.id.str())) fail(ErrorKind::manifest, "orphan frame prediction " + p.id.str());
    cows.push_back(cow_key(p.id.farm_id, p.id.cow_id));
    kg.push_back(p.kg);
  }
  return aggregate_frames(cows, kg, weights);
}

/// Cow-level truth and prediction vectors, ordered by cow key.
struct CowPredictions {
  std::vector<std::string> cows;
  std::vector<double> truth;
  std::vector<double> pred;
  std::vector<std::size_t> frames;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> idx, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t lo = 0; lo < idx.size(); lo += batch_size)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(std::min(lo + batch_size, idx.size())));
  // Batch norm cannot train on a single row; fold a trailing singleton into its predecessor.
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

/// Backbone features of the given samples in eval mode, [n, feature_dim].
inline std::vector<double> backbone_features(Model& model, const CloudBank& bank, const std::vector<std::size_t>& idx, std::size_t batch_size) {
  NoGradGuard guard;
  const std::size_t f = model.feature_dim();
  std::vector<double> out(idx.size() * f);
  for (std::size_t lo = 0; lo < idx.size(); lo += batch_size) {
    std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(std::min(lo + batch_size, idx.size())));
    const Var feats = model.backbone(bank.batch(part), Mode::eval);
    std::copy(feats.value().begin(), feats.value().end(), out.begin() + static_cast<std::ptrdiff_t>(lo * f));
  }
  return out;
}

inline Var feature_rows(const std::vector<double>& feats, std::size_t f, const std::vector<std::size_t>& rows) {
  std::vector<double> v(rows.size() * f);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(feats.begin() + static_cast<std::ptrdiff_t>(rows[i] * f), f, v.begin() + static_cast<std::ptrdiff_t>(i * f));
  return Var::constant({rows.size(), f}, std::move(v));
}

inline std::vector<double> head_predict_kg(Model& model, const std::vector<double>& feats, std::size_t n, std::size_t batch_size) {
  NoGradGuard guard;
  Rng unused(0);
  const std::size_t f = model.feature_dim();
  std::vector<double> out;
  out.reserve(n);
  for (std::size_t lo = 0; lo < n; lo += batch_size) {
    std::vector<std::size_t> rows;
    for (std::size_t i = lo; i < std::min(lo + batch_size, n); ++i) rows.push_back(i);
    const Var y = model.head(feature_rows(feats, f, rows), Mode::eval, unused);
    for (double v : y.value()) out.push_back(model.scaler().to_kg(v));
  }
  return out;
}

inline CowPredictions cow_level(const CloudBank& bank, const std::vector<std::size_t>& idx, const std::vector<double>& preds) {
  std::map<std::string, double> weights;
  std::vector<std::string> cows;
  for (auto i : idx) {
    weights[bank.sample(i).cow()] = bank.sample(i).weight_kg;
    cows.push_back(bank.sample(i).cow());
  }
  const auto means = aggregate_frames(cows, preds, weights);
  std::map<std::string, std::size_t> counts;
  for (const auto& c : cows) ++counts[c];
  CowPredictions out;
  for (const auto& [cow, p] : means) {
    out.cows.push_back(cow);
    out.truth.push_back(weights[cow]);
    out.pred.push_back(p);
    out.frames.push_back(counts[cow]);
  }
  return out;
}

inline double checked_mape(const CowPredictions& cp, const std::string& stage) {
  for (double p : cp.pred)
    if (!std::isfinite(p)) fail(ErrorKind::diverged, stage + ": non-finite prediction");
  return mape(cp.truth, cp.pred);
}

}  // namespace detail

/// Eval-mode frame predictions (kg) for the given samples.
inline std::vector<double> predict_frames(Model& model, const CloudBank& bank, const std::vector<std::size_t>& idx, std::size_t batch_size = 32) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t lo = 0; lo < idx.size(); lo += batch_size) {
    std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(std::min(lo + batch_size, idx.size())));
    for (double v : model.predict_kg(bank.batch(part))) out.push_back(v);
  }
  return out;
}

inline CowPredictions predict_cows(Model& model, const CloudBank& bank, const std::vector<std::size_t>& idx, std::size_t batch_size = 32) {
  return detail::cow_level(bank, idx, predict_frames(model, bank, idx, batch_size));
}

/// Minibatch training of whatever parameters are currently trainable.
///
/// With a validation set the monitored value is cow-level validation MAPE:
/// the best epoch's arrays are restored at the end, the plateau schedule (if
/// selected) reacts to it, and early stopping fires after `early_patience`
/// epochs without strict improvement. When the whole backbone is frozen the
/// backbone runs once per sample and only the head is iterated.
inline TrainReport train_model(Model& model, const CloudBank& bank, const std::vector<std::size_t>& train_idx,
                               const std::vector<std::size_t>& val_idx, const TrainSettings& settings, std::uint64_t seed) {
  if (train_idx.size() < 2) fail(ErrorKind::parameter, settings.stage + ": need at least 2 training frames");
  if (settings.batch_size < 2) fail(ErrorKind::parameter, settings.stage + ": batch size must be at least 2");
  settings.control.validate();
  if (!settings.forbidden_farm.empty())
    for (auto i : train_idx)
      if (bank.sample(i).farm_id == settings.forbidden_farm)
        fail(ErrorKind::contract, settings.stage + ": batch contains a frame of farm '" + settings.forbidden_farm + "'");

  TrainReport report;
  if (settings.max_epochs == 0) return report;
  Rng rng(seed);
  OptimizerState opt;
  opt.kind = OptimizerKind::adamw;
  opt.lr = settings.lr;
  opt.weight_decay = settings.weight_decay;
  TrainControl control = settings.control;

  const bool cached = model.backbone_frozen();
  const std::size_t f = model.feature_dim();
  std::vector<double> train_feats, val_feats;
  std::map<std::size_t, std::size_t> row_of;  // bank index -> feature row
  if (cached) {
    train_feats = detail::backbone_features(model, bank, train_idx, settings.batch_size);
    for (std::size_t r = 0; r < train_idx.size(); ++r) row_of[train_idx[r]] = r;
    if (!val_idx.empty()) val_feats = detail::backbone_features(model, bank, val_idx, settings.batch_size);
  }

  std::vector<double> target(bank.size(), 0.0);
  for (auto i : train_idx) target[i] = model.scaler().to_unit(bank.sample(i).weight_kg);

  const std::size_t per_epoch = detail::make_batches(train_idx, settings.batch_size).size();
  OneCycleSchedule cycle{settings.lr, std::max<std::size_t>(2, per_epoch * settings.max_epochs)};
  std::size_t step = 0;
  std::optional<ParamStore::Snapshot> best;

  for (std::size_t epoch = 1; epoch <= settings.max_epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (const auto& batch : detail::make_batches(order, settings.batch_size)) {
      if (settings.schedule == Schedule::onecycle) opt.lr = cycle.lr_at(step);
      std::vector<double> y;
      for (auto i : batch) y.push_back(target[i]);
      Var pred;
      if (cached) {
        std::vector<std::size_t> rows;
        for (auto i : batch) rows.push_back(row_of.at(i));
        pred = model.head(detail::feature_rows(train_feats, f, rows), Mode::train, rng);
      } else {
        pred = model.forward(bank.batch(batch), Mode::train, rng);
      }
      const Var loss = regression_loss(pred, y, settings.loss, settings.loss_threshold);
      if (!std::isfinite(loss.item())) fail(ErrorKind::diverged, settings.stage + ": non-finite loss at epoch " + std::to_string(epoch));
      model.params().zero_grad();
      backward(loss);
      try {
        optimizer_step(model.params(), opt);
      } catch (const Error& e) {
        fail(e.kind(), settings.stage + ": " + e.what());
      }
      loss_sum += loss.item() * static_cast<double>(batch.size());
      loss_n += batch.size();
      ++step;
      ++report.batches_seen;
    }

    EpochLog log{epoch, opt.lr, loss_sum / static_cast<double>(loss_n)};
    if (!val_idx.empty()) {
      const auto preds = cached ? detail::head_predict_kg(model, val_feats, val_idx.size(), settings.batch_size)
                                : predict_frames(model, bank, val_idx, settings.batch_size);
      log.val_mape = detail::checked_mape(detail::cow_level(bank, val_idx, preds), settings.stage);
      const bool improved = observe_metric(control, log.val_mape);
      if (improved) {
        best = model.params().snapshot();
        report.best_epoch = epoch;
        report.best_val_mape = log.val_mape;
      }
      if (settings.schedule == Schedule::plateau) opt.lr = plateau_lr(control, opt.lr);
      report.epochs.push_back(log);
      if (settings.early_stop && control.since_improvement >= control.early_patience) {
        report.stopped_early = true;
        break;
      }
    } else {
      report.epochs.push_back(log);
    }
  }
  if (best) model.params().restore(*best);
  return report;
}

// ---------------------------------------------------------------------------
// Search, two-stage training, fine-tuning

/// Knobs shared by every training run of an experiment.
struct Budget {
  std::size_t search_epochs = 20;    // one-cycle length of each grid cell
  std::size_t stage1_epochs = 200;   // head-only, early stopped
  std::size_t stage2_epochs = 200;   // full model, early stopped
  std::size_t finetune_epochs = 200; // per unfreeze option, early stopped
  std::size_t source_stage1_epochs = 200;  // two-stage training on external farms
  std::size_t source_stage2_epochs = 200;
  std::size_t batch_size = 32;
  TrainControl control;
};

struct SearchTrial {
  HyperCell cell;
  double val_mape = std::numeric_limits<double>::infinity();
  std::string diagnostic;
};

struct SearchResult {
  HyperCell best;
  double best_val_mape = std::numeric_limits<double>::quiet_NaN();
  std::vector<SearchTrial> trials;
};

/// Trains each cell on subtrain with a one-cycle schedule and keeps the
/// lowest cow-level validation MAPE; ties go to the earlier cell.
inline SearchResult grid_search(const HyperGrid& grid, const CloudBank& bank, const std::vector<std::size_t>& subtrain,
                                const std::vector<std::size_t>& val, const TargetScaler& scaler, const Budget& budget,
                                std::uint64_t seed, const std::string& forbidden_farm = "", const Executor& exec = run_sequential) {
  const auto cells = grid.cells();
  SearchResult result;
  if (cells.size() == 1) {
    result.best = cells[0];
    result.trials.push_back({cells[0], std::numeric_limits<double>::quiet_NaN(), "single cell"});
    return result;
  }
  result.trials.resize(cells.size());
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    tasks.push_back([&, i] {
      SearchTrial& t = result.trials[i];
      t.cell = cells[i];
      try {
        auto model = make_model(cells[i].config, derive_seed(seed, {"cell-init", std::to_string(i)}));
        model->scaler() = scaler;
        TrainSettings s;
        s.schedule = Schedule::onecycle;
        s.lr = cells[i].lr;
        s.weight_decay = cells[i].weight_decay;
        s.max_epochs = budget.search_epochs;
        s.batch_size = budget.batch_size;
        s.early_stop = false;
        s.stage = "grid cell " + cells[i].describe();
        s.forbidden_farm = forbidden_farm;
        train_model(*model, bank, subtrain, {}, s, derive_seed(seed, {"cell-train", std::to_string(i)}));
        t.val_mape = detail::checked_mape(predict_cows(*model, bank, val, budget.batch_size), s.stage);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::diverged) throw;
        t.val_mape = std::numeric_limits<double>::infinity();
        t.diagnostic = e.what();
      }
    });
  }
  exec(tasks);
  std::size_t best = cells.size();
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (std::isfinite(result.trials[i].val_mape) && (best == cells.size() || result.trials[i].val_mape < result.trials[best].val_mape)) best = i;
  if (best == cells.size()) {
    std::string diag;
    for (const auto& t : result.trials) diag += "\n  " + t.cell.describe() + ": " + t.diagnostic;
    fail(ErrorKind::search_failure, "every grid cell diverged:" + diag);
  }
  result.best = result.trials[best].cell;
  result.best_val_mape = result.trials[best].val_mape;
  return result;
}

struct TwoStageReport {
  TrainReport stage1;
  TrainReport stage2;
};

inline TrainSettings final_settings(const HyperCell& cell, std::size_t epochs, const Budget& budget, const std::string& stage) {
  TrainSettings s;
  s.schedule = Schedule::plateau;
  s.lr = cell.lr;
  s.weight_decay = cell.weight_decay;
  s.max_epochs = epochs;
  s.batch_size = budget.batch_size;
  s.control = budget.control;
  s.stage = stage;
  return s;
}

/// Stage 1 trains the head on a frozen backbone, stage 2 trains everything.
/// Both stages use reduce-on-plateau and early stopping on validation MAPE.
inline TwoStageReport two_stage_train(Model& model, const CloudBank& bank, const std::vector<std::size_t>& train,
                                      const std::vector<std::size_t>& val, const HyperCell& cell, const Budget& budget,
                                      std::uint64_t seed, const std::string& forbidden_farm = "") {
  TwoStageReport r;
  model.set_trainable(TrainableSpec::head_only());
  auto s1 = final_settings(cell, budget.stage1_epochs, budget, "stage 1");
  s1.forbidden_farm = forbidden_farm;
  r.stage1 = train_model(model, bank, train, val, s1, derive_seed(seed, {"stage1"}));
  model.set_trainable(TrainableSpec::full());
  auto s2 = final_settings(cell, budget.stage2_epochs, budget, "stage 2");
  s2.forbidden_farm = forbidden_farm;
  r.stage2 = train_model(model, bank, train, val, s2, derive_seed(seed, {"stage2"}));
  return r;
}

struct FinetuneTrial {
  TrainableSpec spec;
  double lr = 0.0;
  double val_mape = std::numeric_limits<double>::infinity();
};

struct FinetuneResult {
  std::unique_ptr<Model> model;
  TrainableSpec spec;
  double lr = 0.0;
  double val_mape = std::numeric_limits<double>::quiet_NaN();
  std::vector<FinetuneTrial> trials;
};

/// Fine-tunes a source checkpoint on the target farm. Every (learning rate,
/// unfreeze option) pair is trained on subtrain and scored by validation
/// MAPE; the winner (first on ties) is retrained from the checkpoint on the
/// full training split. Other hyperparameters come from `cell`. Targets are
/// standardized with the target training cows, not the source farm's.
inline FinetuneResult transfer_finetune(const Checkpoint& source, const HyperCell& cell, const CloudBank& bank,
                                        const std::vector<std::size_t>& subtrain, const std::vector<std::size_t>& val,
                                        const std::vector<std::size_t>& train, const std::vector<TrainableSpec>& options,
                                        const std::vector<double>& lrs, const Budget& budget, std::uint64_t seed,
                                        const Executor& exec = run_sequential) {
  if (!(source.config == cell.config)) fail(ErrorKind::incompatible_checkpoint, "fine-tune config differs from the source checkpoint");
  if (options.empty() || lrs.empty()) fail(ErrorKind::config, "fine-tune grid is empty");
  FinetuneResult result;
  struct Pair {
    TrainableSpec spec;
    double lr;
  };
  std::vector<Pair> pairs;
  for (double lr : lrs)
    for (const auto& o : options) pairs.push_back({o, lr});
  std::map<std::string, double> train_kg;
  for (auto i : train) train_kg[bank.sample(i).cow()] = bank.sample(i).weight_kg;
  std::vector<double> kg;
  for (const auto& [cow, w] : train_kg) kg.push_back(w);
  const TargetScaler scaler = TargetScaler::fit(kg);

  auto run = [&](const Pair& p, const std::vector<std::size_t>& fit, const std::string& tag) {
    auto model = model_from_checkpoint(source);
    model->scaler() = scaler;
    model->set_trainable(p.spec);
    HyperCell c = cell;
    c.lr = p.lr;
    auto s = final_settings(c, budget.finetune_epochs, budget, "fine-tune " + p.spec.label());
    auto rep = train_model(*model, bank, fit, val, s, derive_seed(seed, {tag, p.spec.label(), format_double(p.lr)}));
    return std::make_pair(std::move(model), rep);
  };

  if (pairs.size() == 1) {
    result.trials.push_back({pairs[0].spec, pairs[0].lr, std::numeric_limits<double>::quiet_NaN()});
  } else {
    result.trials.resize(pairs.size());
    std::vector<Task> tasks;
    for (std::size_t i = 0; i < pairs.size(); ++i)
      tasks.push_back([&, i] {
        result.trials[i] = {pairs[i].spec, pairs[i].lr, std::numeric_limits<double>::infinity()};
        try {
          result.trials[i].val_mape = run(pairs[i], subtrain, "ft-search").second.best_val_mape;
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::diverged) throw;
        }
      });
    exec(tasks);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < result.trials.size(); ++i)
    if (result.trials[i].val_mape < result.trials[best].val_mape) best = i;
  if (pairs.size() > 1 && !std::isfinite(result.trials[best].val_mape)) fail(ErrorKind::search_failure, "every fine-tune option diverged");
  auto [model, rep] = run(pairs[best], train, "ft-final");
  result.model = std::move(model);
  result.spec = pairs[best].spec;
  result.lr = pairs[best].lr;
  result.val_mape = rep.best_val_mape;
  return result;
}

// ---------------------------------------------------------------------------
// Plans

struct FarmSource {
  std::string manifest;
  std::string camera;
};

/// Declarative description of an experiment, read from key = value text.
struct ExperimentPlan {
  std::vector<Design> designs{Design::single_source, Design::joint, Design::transfer};
  std::vector<Scenario> scenarios{Scenario::medium, Scenario::large, Scenario::medium_plus_large};
  std::vector<ModelKind> models{ModelKind::pointnet, ModelKind::dgcnn};
  std::uint64_t master_seed = 20240611;
  std::size_t repeats = 5;
  std::string target_farm = "small";
  std::map<std::string, FarmSource> farms;
  std::map<ModelKind, HyperGrid> grids{{ModelKind::pointnet, HyperGrid::defaults(ModelKind::pointnet)},
                                       {ModelKind::dgcnn, HyperGrid::defaults(ModelKind::dgcnn)}};
  std::vector<double> finetune_lrs{1e-6, 1e-5, 1e-4, 1e-3};
  std::vector<TrainableSpec> unfreeze{TrainableSpec::head_only(), TrainableSpec::head_plus_last(1), TrainableSpec::head_plus_last(2),
                                      TrainableSpec::head_plus_last(3), TrainableSpec::full()};
  Budget budget;
  bool share_source = true;  // source-stage models depend only on (scenario, model), not on the repeat

  /// Design/scenario cells in report order. single_source ignores scenarios.
  std::vector<std::pair<Design, Scenario>> cells() const {
    std::vector<std::pair<Design, Scenario>> out;
    for (auto d : designs) {
      if (d == Design::single_source) {
        out.emplace_back(d, Scenario::none);
        continue;
      }
      for (auto s : scenarios)
        if (s != Scenario::none) out.emplace_back(d, s);
    }
    return out;
  }

  void validate() const {
    if (repeats < 1) fail(ErrorKind::config, "plan needs at least one repeat");
    if (models.empty() || designs.empty()) fail(ErrorKind::config, "plan names no models or designs");
    if (!farms.count(target_farm)) fail(ErrorKind::config, "plan has no manifest for target farm '" + target_farm + "'");
    for (const auto& [d, s] : cells())
      for (const auto& f : external_farms(s))
        if (!farms.count(f)) fail(ErrorKind::config, "scenario " + to_string(s) + " needs a manifest for farm '" + f + "'");
    bool needs_external = false, has_external = false;
    for (auto d : designs) needs_external = needs_external || d != Design::single_source;
    for (auto s : scenarios) has_external = has_external || s != Scenario::none;
    if (needs_external && !has_external)
      fail(ErrorKind::config, "joint/transfer designs need at least one external scenario");
    for (const auto& [k, g] : grids) g.cells();
  }
};

namespace detail {

template <typename T, typename F>
std::vector<T> parse_list(const std::string& text, F&& parse) {
  std::vector<T> out;
  for (const auto& item : split(text, ',')) {
    const auto t = trim(item);
    if (!t.empty()) out.push_back(parse(std::string(t)));
  }
  if (out.empty()) fail(ErrorKind::config, "empty list '" + text + "'");
  return out;
}

}  // namespace detail

inline ExperimentPlan parse_plan(std::string_view text, const std::string& base_dir, const std::string& origin) {
  const auto kv = KeyValues::parse(text, origin);
  ExperimentPlan p;
  auto path = [&](const std::string& v) {
    std::filesystem::path q(v);
    return (q.is_absolute() || base_dir.empty()) ? q.string() : (std::filesystem::path(base_dir) / q).string();
  };
  auto num = [&](const std::string& key, const std::string& v) { return parse_double(v, origin + " key " + key); };
  auto count = [&](const std::string& key, const std::string& v) {
    const auto x = parse_int(v, origin + " key " + key);
    if (x < 0) fail(ErrorKind::config, origin + ": " + key + " must be non-negative");
    return static_cast<std::size_t>(x);
  };
  for (const auto& [key, value] : kv.entries()) {
    if (key == "design") {
      p.designs = detail::parse_list<Design>(value, [](const std::string& s) { return parse_design(s); });
    } else if (key == "scenario") {
      p.scenarios = detail::parse_list<Scenario>(value, [](const std::string& s) { return parse_scenario(s); });
    } else if (key == "models") {
      p.models = detail::parse_list<ModelKind>(value, [](const std::string& s) { return parse_model_kind(s); });
    } else if (key == "master_seed") {
      p.master_seed = static_cast<std::uint64_t>(count(key, value));
    } else if (key == "repeats") {
      p.repeats = count(key, value);
    } else if (key == "target_farm") {
      p.target_farm = value;
    } else if (key == "share_source") {
      if (value != "true" && value != "false") fail(ErrorKind::config, origin + ": share_source must be true or false");
      p.share_source = value == "true";
    } else if (key.rfind("manifest.", 0) == 0) {
      p.farms[key.substr(9)].manifest = path(value);
    } else if (key.rfind("camera.", 0) == 0) {
      p.farms[key.substr(7)].camera = path(value);
    } else if (key.rfind("grid.", 0) == 0) {
      const auto parts = split(key, '.');
      if (parts.size() != 3) fail(ErrorKind::config, origin + ": grid keys look like grid.<model>.<axis>");
      auto& g = p.grids.at(parse_model_kind(parts[1]));
      const auto& axis = parts[2];
      auto reals = [&] { return detail::parse_list<double>(value, [&](const std::string& s) { return num(key, s); }); };
      auto counts = [&] { return detail::parse_list<std::size_t>(value, [&](const std::string& s) { return count(key, s); }); };
      if (axis == "lr") g.lr = reals();
      else if (axis == "dropout") g.dropout = reals();
      else if (axis == "weight_decay") g.weight_decay = reals();
      else if (axis == "embedding_dim") g.embedding_dim = counts();
      else if (axis == "k_neighbors") g.k_neighbors = counts();
      else if (axis == "feature_tnet")
        g.feature_tnet = detail::parse_list<bool>(value, [&](const std::string& s) {
          if (s != "on" && s != "off") fail(ErrorKind::config, origin + ": feature_tnet values are on/off");
          return s == "on";
        });
      else fail(ErrorKind::config, origin + ": unknown grid axis " + axis);
    } else if (key == "finetune.lr") {
      p.finetune_lrs = detail::parse_list<double>(value, [&](const std::string& s) { return num(key, s); });
    } else if (key == "finetune.unfreeze") {
      p.unfreeze = detail::parse_list<TrainableSpec>(value, [](const std::string& s) { return parse_trainable_spec(s); });
    } else if (key == "epochs.search") {
      p.budget.search_epochs = count(key, value);
    } else if (key == "epochs.stage1") {
      p.budget.stage1_epochs = count(key, value);
    } else if (key == "epochs.stage2") {
      p.budget.stage2_epochs = count(key, value);
    } else if (key == "epochs.source_stage1") {
      p.budget.source_stage1_epochs = count(key, value);
    } else if (key == "epochs.source_stage2") {
      p.budget.source_stage2_epochs = count(key, value);
    } else if (key == "epochs.finetune") {
      p.budget.finetune_epochs = count(key, value);
    } else if (key == "batch_size") {
      p.budget.batch_size = count(key, value);
    } else if (key == "early_patience") {
      p.budget.control.early_patience = count(key, value);
    } else if (key == "plateau_patience") {
      p.budget.control.plateau_patience = count(key, value);
    } else if (key == "plateau_factor") {
      p.budget.control.plateau_factor = num(key, value);
    } else {
      fail(ErrorKind::config, origin + ": unknown plan key " + key);
    }
  }
  for (const auto& [farm, src] : p.farms)
    if (src.manifest.empty() || src.camera.empty()) fail(ErrorKind::config, origin + ": farm '" + farm + "' needs both manifest and camera");
  p.budget.control.validate();
  p.validate();
  return p;
}

inline ExperimentPlan load_plan(const std::string& path) {
  return parse_plan(read_text_file(path), std::filesystem::path(path).parent_path().string(), path);
}

// ---------------------------------------------------------------------------
// Running the design matrix

struct RunResult {
  Design design = Design::single_source;
  Scenario scenario = Scenario::none;
  ModelKind model = ModelKind::pointnet;
  std::size_t repeat = 0;  // 1-based
  std::uint64_t repeat_seed = 0;
  std::string hyper;
  std::string unfreeze = "-";
  std::string finetune_lr = "-";
  CowPredictions test;
  std::vector<std::string> train_cows;  // every cow whose frames were used for fitting or selection
  double r2 = 0.0;
  double mape = 0.0;
};

struct JobTiming {
  std::string name;
  int phase = 0;
  double seconds = 0.0;
};

struct RepeatSplit {
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  CowSplit split;
};

struct RunOutput {
  std::vector<RunResult> results;
  std::vector<RepeatSplit> splits;
  std::vector<JobTiming> timings;
};

inline std::uint64_t repeat_seed(std::uint64_t master, std::size_t repeat) { return derive_seed(master, {"repeat", std::to_string(repeat)}); }

/// Loads every farm named in the plan into one bank.
inline CloudBank load_plan_farms(const ExperimentPlan& plan, const Executor& exec = run_sequential) {
  CloudBank bank;
  for (const auto& [farm, src] : plan.farms) {
    const auto manifest = load_manifest(src.manifest);
    const auto camera = load_camera_profile(src.camera);
    if (camera.farm_id != farm) fail(ErrorKind::config, "camera file " + src.camera + " is for farm '" + camera.farm_id + "', expected '" + farm + "'");
    for (const auto& r : manifest.records)
      if (r.farm_id != farm) fail(ErrorKind::config, "manifest " + src.manifest + " lists farm '" + r.farm_id + "', expected '" + farm + "'");
    bank.add_farm(manifest, camera, plan.master_seed, exec);
  }
  return bank;
}

namespace detail {

inline TargetScaler scaler_for(const CloudBank& bank, const std::vector<std::string>& cows) {
  std::map<std::string, double> w;
  for (std::size_t i = 0; i < bank.size(); ++i) w[bank.sample(i).cow()] = bank.sample(i).weight_kg;
  std::vector<double> kg;
  for (const auto& c : cows) kg.push_back(w.at(c));
  return TargetScaler::fit(kg);
}

inline std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  std::sort(a.begin(), a.end());
  return a;
}

struct SourceModel {
  Checkpoint checkpoint;
  HyperCell cell;
};

}  // namespace detail

/// Executes every (design, scenario, model, repeat) cell of the plan. Source
/// models for the transfer design run first (phase 1), then all repeat jobs
/// (phase 2). Results come back sorted in report order.
inline RunOutput run_design(const ExperimentPlan& plan, const CloudBank& bank, const Executor& exec = run_sequential,
                            const Logger& log = nullptr) {
  plan.validate();
  RunOutput out;
  std::mutex mu;
  auto say = [&](const std::string& s) {
    if (log) {
      std::lock_guard<std::mutex> lock(mu);
      log(s);
    }
  };
  auto timed = [&](const std::string& name, int phase, const std::function<void()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::lock_guard<std::mutex> lock(mu);
    out.timings.push_back({name, phase, sec});
  };

  const auto target_cows = bank.cows_of(plan.target_farm);
  for (std::size_t r = 1; r <= plan.repeats; ++r) {
    const auto seed = repeat_seed(plan.master_seed, r);
    out.splits.push_back({r, seed, split_cows(target_cows, seed)});
  }

  // Phase 1: source-stage models of the transfer design.
  std::map<std::string, detail::SourceModel> sources;
  auto source_key = [&](Scenario s, ModelKind m, std::size_t repeat) {
    return to_string(s) + "/" + std::string(to_string(m)) + "/" + std::to_string(plan.share_source ? 0 : repeat);
  };
  std::vector<Task> phase1;
  for (const auto& [design, scenario] : plan.cells()) {
    if (design != Design::transfer) continue;
    for (auto m : plan.models)
      for (std::size_t r = 1; r <= (plan.share_source ? 1 : plan.repeats); ++r) {
        const auto key = source_key(scenario, m, r);
        sources[key];
        phase1.push_back([&, scenario, m, r, key] {
          timed("source " + key, 1, [&] {
            const auto seed = plan.share_source ? derive_seed(plan.master_seed, {"source", to_string(scenario), to_string(m)})
                                                : derive_seed(repeat_seed(plan.master_seed, r), {"source", to_string(scenario), to_string(m)});
            std::vector<std::string> pool;
            for (const auto& f : external_farms(scenario)) pool = detail::concat(pool, bank.cows_of(f));
            std::vector<std::string> sub, val;
            split_train_val(pool, derive_seed(seed, {"split"}), sub, val);
            const auto scaler = detail::scaler_for(bank, pool);
            const auto search = grid_search(plan.grids.at(m), bank, bank.frames_of(sub), bank.frames_of(val), scaler, plan.budget,
                                            derive_seed(seed, {"search"}), plan.target_farm);
            auto model = make_model(search.best.config, derive_seed(seed, {"init"}));
            model->scaler() = scaler;
            Budget budget = plan.budget;
            budget.stage1_epochs = budget.source_stage1_epochs;
            budget.stage2_epochs = budget.source_stage2_epochs;
            const auto rep = two_stage_train(*model, bank, bank.frames_of(pool), bank.frames_of(val), search.best, budget,
                                             derive_seed(seed, {"train"}), plan.target_farm);
            say("source " + key + ": " + search.best.describe() + ", external val MAPE " + fmt(rep.stage2.best_val_mape, 3) + "%");
            auto& slot = sources.at(key);
            slot.checkpoint = capture_checkpoint(*model, {{"source_farms", to_string(scenario)}, {"seed", std::to_string(seed)}});
            slot.cell = search.best;
          });
        });
      }
  }
  exec(phase1);

  // Phase 2: one job per (design, scenario, model, repeat).
  std::vector<RunResult> results;
  for (const auto& [design, scenario] : plan.cells())
    for (auto m : plan.models)
      for (std::size_t r = 1; r <= plan.repeats; ++r) {
        RunResult res;
        res.design = design;
        res.scenario = scenario;
        res.model = m;
        res.repeat = r;
        res.repeat_seed = out.splits[r - 1].seed;
        results.push_back(res);
      }
  std::vector<Task> phase2;
  for (auto& res : results) {
    phase2.push_back([&] {
      const std::string name = to_string(res.design) + "/" + to_string(res.scenario) + "/" + std::string(to_string(res.model)) + "/r" + std::to_string(res.repeat);
      timed(name, 2, [&] {
        const CowSplit& split = out.splits[res.repeat - 1].split;
        const auto seed = derive_seed(res.repeat_seed, {to_string(res.design), to_string(res.scenario), to_string(res.model)});
        std::unique_ptr<Model> model;
        if (res.design == Design::transfer) {
          const auto& src = sources.at(source_key(res.scenario, res.model, res.repeat));
          auto ft = transfer_finetune(src.checkpoint, src.cell, bank, bank.frames_of(split.subtrain), bank.frames_of(split.val),
                                      bank.frames_of(split.train), plan.unfreeze, plan.finetune_lrs, plan.budget, seed);
          model = std::move(ft.model);
          res.hyper = src.cell.describe();
          res.unfreeze = ft.spec.label();
          res.finetune_lr = format_double(ft.lr);
          res.train_cows = split.train;
        } else {
          std::vector<std::string> pool = split.train, sub = split.subtrain, val = split.val;
          if (res.design == Design::joint) {
            for (const auto& f : external_farms(res.scenario)) pool = detail::concat(pool, bank.cows_of(f));
            split_train_val(pool, derive_seed(seed, {"joint-split"}), sub, val);
          }
          const auto scaler = detail::scaler_for(bank, pool);
          const auto search = grid_search(plan.grids.at(res.model), bank, bank.frames_of(sub), bank.frames_of(val), scaler, plan.budget,
                                          derive_seed(seed, {"search"}));
          model = make_model(search.best.config, derive_seed(seed, {"init"}));
          model->scaler() = scaler;
          two_stage_train(*model, bank, bank.frames_of(pool), bank.frames_of(val), search.best, plan.budget, derive_seed(seed, {"train"}));
          res.hyper = search.best.describe();
          res.train_cows = pool;
        }
        res.test = predict_cows(*model, bank, bank.frames_of(split.test), plan.budget.batch_size);
        res.r2 = r_squared(res.test.truth, res.test.pred);
        res.mape = mape(res.test.truth, res.test.pred);
        say(name + ": R2 " + fmt(res.r2, 4) + ", MAPE " + fmt(res.mape, 3) + "%");
      });
    });
  }
  exec(phase2);
  out.results = std::move(results);
  return out;
}

// ---------------------------------------------------------------------------
// Output files

inline std::vector<ResultRow> result_rows(const std::vector<RunResult>& results) {
  std::vector<ResultRow> rows;
  for (const auto& r : results) rows.push_back({to_string(r.design), to_string(r.scenario), std::string(to_string(r.model)), static_cast<int>(r.repeat), r.r2, r.mape});
  return rows;
}

inline std::string results_csv(const std::vector<RunResult>& results) {
  std::ostringstream os;
  os << "design,scenario,model,repeat,repeat_seed,hyperparameters,unfreeze,finetune_lr,n_test,r2,mape\n";
  for (const auto& r : results)
    os << to_string(r.design) << ',' << to_string(r.scenario) << ',' << to_string(r.model) << ',' << r.repeat << ',' << r.repeat_seed << ','
       << r.hyper << ',' << r.unfreeze << ',' << r.finetune_lr << ',' << r.test.cows.size() << ',' << format_double(r.r2) << ','
       << format_double(r.mape) << '\n';
  return os.str();
}

inline std::string predictions_csv(const std::vector<RunResult>& results) {
  std::ostringstream os;
  os << "design,scenario,model,repeat,cow,frames,true_kg,pred_kg\n";
  for (const auto& r : results)
    for (std::size_t i = 0; i < r.test.cows.size(); ++i)
      os << to_string(r.design) << ',' << to_string(r.scenario) << ',' << to_string(r.model) << ',' << r.repeat << ',' << r.test.cows[i] << ','
         << r.test.frames[i] << ',' << format_double(r.test.truth[i]) << ',' << format_double(r.test.pred[i]) << '\n';
  return os.str();
}

inline std::string splits_csv(const std::vector<RepeatSplit>& splits) {
  std::ostringstream os;
  os << "repeat,repeat_seed,cow,role\n";
  for (const auto& s : splits) {
    auto emit = [&](const std::vector<std::string>& cows, const char* role) {
      for (const auto& c : cows) os << s.repeat << ',' << s.seed << ',' << c << ',' << role << '\n';
    };
    emit(s.split.subtrain, "subtrain");
    emit(s.split.val, "val");
    emit(s.split.test, "test");
  }
  return os.str();
}

/// Parses results_csv output back into summary rows.
inline std::vector<ResultRow> parse_results_csv(std::string_view text, const std::string& origin) {
  std::vector<ResultRow> rows;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto f = split(line, ',');
    if (line_no == 1) {
      if (f.size() < 11 || f[0] != "design") fail(ErrorKind::format, origin + ": not a results file");
      continue;
    }
    const auto where = origin + " line " + std::to_string(line_no);
    if (f.size() != 11) fail(ErrorKind::format, where + ": expected 11 fields");
    rows.push_back({f[0], f[1], f[2], static_cast<int>(parse_int(f[3], where)), parse_double(f[9], where), parse_double(f[10], where)});
  }
  if (rows.empty()) fail(ErrorKind::empty_input, origin + ": no result rows");
  return rows;
}

/// Makespan of the recorded jobs on `workers` workers under greedy list
/// scheduling in submission order, with a barrier between phases.
inline double projected_makespan(const std::vector<JobTiming>& timings, std::size_t workers) {
  double total = 0.0;
  std::map<int, std::vector<double>> phases;
  for (const auto& t : timings) phases[t.phase].push_back(t.seconds);
  for (const auto& [phase, jobs] : phases) {
    std::vector<double> load(std::max<std::size_t>(1, workers), 0.0);
    for (double j : jobs) *std::min_element(load.begin(), load.end()) += j;
    total += *std::max_element(load.begin(), load.end());
  }
  return total;
}

}  // namespace bwcloud
