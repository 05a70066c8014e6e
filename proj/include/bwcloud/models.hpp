#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "bwcloud/binary_io.hpp"
#include "bwcloud/depth_io.hpp"
#include "bwcloud/error.hpp"
#include "bwcloud/kv.hpp"
#include "bwcloud/optim.hpp"
#include "bwcloud/pointcloud.hpp"
#include "bwcloud/tensor.hpp"

namespace bwcloud {

enum class ModelKind { pointnet, dgcnn };

inline std::string_view to_string(ModelKind kind) { return kind == ModelKind::pointnet ? "pointnet" : "dgcnn"; }

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "pointnet") return ModelKind::pointnet;
  if (s == "dgcnn") return ModelKind::dgcnn;
  fail(ErrorKind::config, "unknown model kind '" + std::string(s) + "'");
}

/// Architecture hyperparameters. feature_tnet only applies to PointNet and
/// k_neighbors only to DGCNN; both are still compared on checkpoint load.
struct ModelConfig {
  ModelKind kind = ModelKind::pointnet;
  std::size_t embedding_dim = 256;
  bool feature_tnet = false;
  std::size_t k_neighbors = 20;
  double dropout = 0.3;

  void validate() const {
    if (embedding_dim != 256 && embedding_dim != 512 && embedding_dim != 1024)
      fail(ErrorKind::config, "embedding_dim must be one of 256, 512, 1024");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail(ErrorKind::config, "dropout must lie in [0, 1)");
    if (kind == ModelKind::dgcnn && (k_neighbors == 0 || k_neighbors >= kStandardPointCount))
      fail(ErrorKind::config, "k_neighbors must lie in [1, 1024)");
  }

  bool operator==(const ModelConfig&) const = default;

  std::string describe() const {
    std::string s = std::string(to_string(kind)) + " emb=" + std::to_string(embedding_dim) + " dropout=" + format_double(dropout);
    if (kind == ModelKind::pointnet) s += std::string(" ftnet=") + (feature_tnet ? "on" : "off");
    if (kind == ModelKind::dgcnn) s += " k=" + std::to_string(k_neighbors);
    return s;
  }
};

/// One freezable unit of the network, numbered from the input.
struct LayerDesc {
  std::string name;
  std::vector<std::string> params;
  std::vector<std::string> stats;
  bool backbone = true;
  std::size_t depth = 0;
};

struct LayerRegistry {
  std::vector<LayerDesc> layers;

  std::size_t backbone_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.backbone ? 1 : 0;
    return n;
  }

  const LayerDesc& find(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return l;
    fail(ErrorKind::config, "no layer named " + name);
  }
};

struct TrainableSpec {
  enum class Kind { head_only, head_plus_last_n, full };
  Kind kind = Kind::full;
  std::size_t last_n = 0;

  static TrainableSpec head_only() { return {Kind::head_only, 0}; }
  static TrainableSpec head_plus_last(std::size_t n) { return {Kind::head_plus_last_n, n}; }
  static TrainableSpec full() { return {Kind::full, 0}; }

  std::string label() const {
    switch (kind) {
      case Kind::head_only: return "head_only";
      case Kind::head_plus_last_n: return "head_plus_last_" + std::to_string(last_n);
      case Kind::full: return "full";
    }
    return "?";
  }

  bool operator==(const TrainableSpec&) const = default;
};

inline TrainableSpec parse_trainable_spec(std::string_view s) {
  if (s == "head_only") return TrainableSpec::head_only();
  if (s == "full") return TrainableSpec::full();
  constexpr std::string_view prefix = "head_plus_last_";
  if (s.substr(0, prefix.size()) == prefix)
    return TrainableSpec::head_plus_last(static_cast<std::size_t>(parse_int(s.substr(prefix.size()), "unfreeze option")));
  fail(ErrorKind::config, "unknown unfreeze option '" + std::string(s) + "'");
}

/// Affine map between standardized regression targets and kilograms.
struct TargetScaler {
  double mean_kg = 0.0;
  double std_kg = 1.0;

  static TargetScaler fit(const std::vector<double>& kg) {
    if (kg.empty()) fail(ErrorKind::parameter, "cannot fit target scaler on no samples");
    double m = 0.0;
    for (double v : kg) m += v;
    m /= static_cast<double>(kg.size());
    double var = 0.0;
    for (double v : kg) var += (v - m) * (v - m);
    var /= static_cast<double>(kg.size());
    const double s = std::sqrt(var);
    return {m, s > 1e-9 ? s : 1.0};
  }

  double to_unit(double kg) const { return (kg - mean_kg) / std_kg; }
  double to_kg(double unit) const { return unit * std_kg + mean_kg; }
  bool operator==(const TargetScaler&) const = default;
};

/// Common machinery of both regressors: parameter store, layer registry,
/// freezing, and the backbone/head split.
class Model {
 public:
  virtual ~Model() = default;

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const LayerRegistry& registry() const { return registry_; }
  TargetScaler& scaler() { return scaler_; }
  const TargetScaler& scaler() const { return scaler_; }

  /// Width of the global descriptor handed to the head.
  virtual std::size_t feature_dim() const = 0;

  /// [batch, 1024, 3] -> [batch, feature_dim]
  virtual Var backbone(const Var& clouds, Mode mode) = 0;

  /// [batch, feature_dim] -> [batch] in standardized target units.
  virtual Var head(const Var& features, Mode mode, Rng& rng) = 0;

  Var forward(const Var& clouds, Mode mode, Rng& rng) {
    check_input(clouds);
    return head(backbone(clouds, mode), mode, rng);
  }

  /// Eval-mode predictions in kilograms.
  std::vector<double> predict_kg(const Var& clouds) {
    NoGradGuard guard;
    Rng unused(0);
    const Var out = forward(clouds, Mode::eval, unused);
    std::vector<double> kg(out.size());
    for (std::size_t i = 0; i < kg.size(); ++i) kg[i] = scaler_.to_kg(out.value()[i]);
    return kg;
  }

  /// Applies a freezing spec. Frozen layers also freeze their batch-norm
  /// running statistics and normalize with them.
  void set_trainable(const TrainableSpec& spec) {
    const std::size_t nb = registry_.backbone_count();
    if (spec.kind == TrainableSpec::Kind::head_plus_last_n && (spec.last_n == 0 || spec.last_n > nb))
      fail(ErrorKind::parameter, "last_n must lie in [1, " + std::to_string(nb) + "], got " + std::to_string(spec.last_n));
    for (const auto& layer : registry_.layers) {
      bool on = true;
      if (layer.backbone) {
        if (spec.kind == TrainableSpec::Kind::head_only) on = false;
        if (spec.kind == TrainableSpec::Kind::head_plus_last_n) on = layer.depth + spec.last_n >= nb;
      }
      for (const auto& p : layer.params) params_.set_trainable(p, on);
      for (const auto& s : layer.stats) params_.stats(s).frozen = !on;
    }
  }

  bool layer_trainable(const std::string& name) const {
    const auto& layer = registry_.find(name);
    return params_.trainable(layer.params.front());
  }

  bool backbone_frozen() const {
    for (const auto& layer : registry_.layers)
      if (layer.backbone && params_.trainable(layer.params.front())) return false;
    return true;
  }

  /// Concatenation of every backbone array (parameters, then running stats),
  /// for bit-exact freezing checks.
  std::vector<double> backbone_arrays() const {
    std::vector<double> out;
    for (const auto& layer : registry_.layers) {
      if (!layer.backbone) continue;
      for (const auto& p : layer.params) {
        const auto& v = params_.get(p).value();
        out.insert(out.end(), v.begin(), v.end());
      }
      for (const auto& s : layer.stats) {
        const auto& st = params_.stats(s);
        out.insert(out.end(), st.mean.begin(), st.mean.end());
        out.insert(out.end(), st.var.begin(), st.var.end());
      }
    }
    return out;
  }

 protected:
  Model(ModelConfig config, std::uint64_t seed) : config_(config), seed_(seed) { config_.validate(); }

  void check_input(const Var& clouds) const {
    if (clouds.rank() != 3 || clouds.dim(1) != kStandardPointCount || clouds.dim(2) != 3)
      fail(ErrorKind::contract, "model input must be standardized clouds [batch, 1024, 3], got " + shape_str(clouds.shape()));
  }

  std::uint64_t param_seed(const std::string& name) const { return derive_seed(seed_, {"init", name}); }

  /// Linear map + batch norm, registered under `name`.
  void add_dense(LayerDesc& layer, const std::string& name, std::size_t in, std::size_t out, double slope) {
    params_.add(name + ".weight", {in, out}, kaiming_uniform(in, out, slope, param_seed(name + ".weight")));
    params_.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
    params_.add(name + ".bn.gamma", {out}, std::vector<double>(out, 1.0));
    params_.add(name + ".bn.beta", {out}, std::vector<double>(out, 0.0));
    params_.add_stats(name + ".bn", out);
    for (const char* suffix : {".weight", ".bias", ".bn.gamma", ".bn.beta"}) layer.params.push_back(name + suffix);
    layer.stats.push_back(name + ".bn");
  }

  void add_linear(LayerDesc& layer, const std::string& name, std::size_t in, std::size_t out, double slope) {
    params_.add(name + ".weight", {in, out}, kaiming_uniform(in, out, slope, param_seed(name + ".weight")));
    params_.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
    layer.params.push_back(name + ".weight");
    layer.params.push_back(name + ".bias");
  }

  void push_layer(LayerDesc layer, bool backbone) {
    layer.backbone = backbone;
    layer.depth = registry_.layers.size();
    registry_.layers.push_back(std::move(layer));
  }

  Var dense(const std::string& name, const Var& x, Mode mode, Activation act) {
    const Var y = linear(x, params_.get(name + ".weight"), params_.get(name + ".bias"));
    const Var z = batch_norm(y, params_.get(name + ".bn.gamma"), params_.get(name + ".bn.beta"), params_.stats(name + ".bn"), mode);
    return activation(z, act);
  }

  Var plain(const std::string& name, const Var& x) { return linear(x, params_.get(name + ".weight"), params_.get(name + ".bias")); }

  ModelConfig config_;
  std::uint64_t seed_;
  ParamStore params_;
  LayerRegistry registry_;
  TargetScaler scaler_;
};

class PointNet final : public Model {
 public:
  PointNet(ModelConfig config, std::uint64_t seed) : Model(config, seed) {
    if (config.kind != ModelKind::pointnet) fail(ErrorKind::config, "PointNet built from a non-PointNet config");
    {
      LayerDesc l{"tnet_in"};
      add_tnet(l, "tnet_in", 3);
      push_layer(std::move(l), true);
    }
    const std::size_t widths[] = {3, 64, 128, 256, config.embedding_dim};
    for (int i = 0; i < 4; ++i) {
      if (i == 2 && config.feature_tnet) {
        LayerDesc l{"tnet_feat"};
        add_tnet(l, "tnet_feat", 128);
        push_layer(std::move(l), true);
      }
      LayerDesc l{"conv" + std::to_string(i + 1)};
      add_dense(l, l.name, widths[i], widths[i + 1], 0.0);
      push_layer(std::move(l), true);
    }
    {
      LayerDesc l{"fc1"};
      add_dense(l, "fc1", config.embedding_dim, 256, 0.0);
      push_layer(std::move(l), false);
    }
    {
      LayerDesc l{"fc2"};
      add_dense(l, "fc2", 256, 128, 0.0);
      push_layer(std::move(l), false);
    }
    {
      LayerDesc l{"fc3"};
      add_linear(l, "fc3", 128, 1, 0.0);
      push_layer(std::move(l), false);
    }
  }

  std::size_t feature_dim() const override { return config_.embedding_dim; }

  /// Spatial transformer predicting a d x d matrix from a [batch, n, d] input.
  /// The last linear map starts at zero weights with an identity bias, so an
  /// untrained transformer is the identity.
  void add_tnet(LayerDesc& layer, const std::string& prefix, std::size_t d) {
    add_dense(layer, prefix + ".conv1", d, 64, 0.0);
    add_dense(layer, prefix + ".conv2", 64, 128, 0.0);
    add_dense(layer, prefix + ".fc1", 128, 64, 0.0);
    std::vector<double> identity(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) identity[i * d + i] = 1.0;
    params_.add(prefix + ".fc2.weight", {64, d * d}, std::vector<double>(64 * d * d, 0.0));
    params_.add(prefix + ".fc2.bias", {d * d}, std::move(identity));
    layer.params.push_back(prefix + ".fc2.weight");
    layer.params.push_back(prefix + ".fc2.bias");
  }

  /// Predicted d x d transform, [batch, d, d].
  Var tnet(const std::string& prefix, const Var& x, Mode mode) {
    const std::size_t batch = x.dim(0), d = x.dim(2);
    Var h = dense(prefix + ".conv1", x, mode, Activation::relu);
    h = dense(prefix + ".conv2", h, mode, Activation::relu);
    h = pool_points(h, Pool::max);
    h = dense(prefix + ".fc1", h, mode, Activation::relu);
    h = plain(prefix + ".fc2", h);
    return reshape(h, {batch, d, d});
  }

  Var backbone(const Var& clouds, Mode mode) override {
    Var x = batched_transform(clouds, tnet("tnet_in", clouds, mode));
    x = dense("conv1", x, mode, Activation::relu);
    x = dense("conv2", x, mode, Activation::relu);
    if (config_.feature_tnet) x = batched_transform(x, tnet("tnet_feat", x, mode));
    x = dense("conv3", x, mode, Activation::relu);
    x = dense("conv4", x, mode, Activation::relu);
    return pool_points(x, Pool::max);
  }

  Var head(const Var& features, Mode mode, Rng& rng) override {
    Var h = dropout(dense("fc1", features, mode, Activation::relu), config_.dropout, mode, rng);
    h = dropout(dense("fc2", h, mode, Activation::relu), config_.dropout, mode, rng);
    h = plain("fc3", h);
    return reshape(h, {h.dim(0)});
  }
};

class Dgcnn final : public Model {
 public:
  static constexpr std::size_t kEdgeWidths[4] = {3, 32, 64, 128};

  Dgcnn(ModelConfig config, std::uint64_t seed) : Model(config, seed) {
    if (config.kind != ModelKind::dgcnn) fail(ErrorKind::config, "DGCNN built from a non-DGCNN config");
    for (int i = 0; i < 3; ++i) {
      LayerDesc l{"edge" + std::to_string(i + 1)};
      add_dense(l, l.name, 2 * kEdgeWidths[i], kEdgeWidths[i + 1], kLeakySlope);
      push_layer(std::move(l), true);
    }
    {
      LayerDesc l{"proj"};
      add_dense(l, "proj", 32 + 64 + 128, config.embedding_dim, kLeakySlope);
      push_layer(std::move(l), true);
    }
    {
      LayerDesc l{"fc1"};
      add_dense(l, "fc1", 2 * config.embedding_dim, 256, kLeakySlope);
      push_layer(std::move(l), false);
    }
    {
      LayerDesc l{"fc2"};
      add_dense(l, "fc2", 256, 64, kLeakySlope);
      push_layer(std::move(l), false);
    }
    {
      LayerDesc l{"fc3"};
      add_linear(l, "fc3", 64, 1, kLeakySlope);
      push_layer(std::move(l), false);
    }
  }

  std::size_t feature_dim() const override { return 2 * config_.embedding_dim; }

  Var edge_layer(const std::string& name, const Var& x, Mode mode) {
    const Neighbors nb = knn_graph(x, config_.k_neighbors);
    return edge_conv(x, nb, params_.get(name + ".weight"), params_.get(name + ".bias"), params_.get(name + ".bn.gamma"),
                     params_.get(name + ".bn.beta"), params_.stats(name + ".bn"), mode);
  }

  Var backbone(const Var& clouds, Mode mode) override {
    const Var e1 = edge_layer("edge1", clouds, mode);
    const Var e2 = edge_layer("edge2", e1, mode);
    const Var e3 = edge_layer("edge3", e2, mode);
    const Var emb = dense("proj", concat_last({e1, e2, e3}), mode, Activation::leaky_relu);
    return concat_last({pool_points(emb, Pool::max), pool_points(emb, Pool::avg)});
  }

  Var head(const Var& features, Mode mode, Rng& rng) override {
    Var h = dropout(dense("fc1", features, mode, Activation::leaky_relu), config_.dropout, mode, rng);
    h = dense("fc2", h, mode, Activation::leaky_relu);
    h = plain("fc3", h);
    return reshape(h, {h.dim(0)});
  }
};

inline std::unique_ptr<Model> make_model(const ModelConfig& config, std::uint64_t seed) {
  if (config.kind == ModelKind::pointnet) return std::make_unique<PointNet>(config, seed);
  return std::make_unique<Dgcnn>(config, seed);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  ModelConfig config;
  TargetScaler scaler;
  std::map<std::string, std::string> metadata;
  struct Array {
    std::string name;
    Shape shape;
    std::vector<double> values;
  };
  std::vector<Array> params;
  struct Stats {
    std::string name;
    BatchNormStats stats;
  };
  std::vector<Stats> stats;
};

inline Checkpoint capture_checkpoint(const Model& model, std::map<std::string, std::string> metadata = {}) {
  Checkpoint ck;
  ck.config = model.config();
  ck.scaler = model.scaler();
  ck.metadata = std::move(metadata);
  for (const auto& p : model.params().params()) ck.params.push_back({p.name, p.var.shape(), p.var.value()});
  for (const auto& s : model.params().all_stats()) ck.stats.push_back({s.name, s.stats});
  return ck;
}

/// Copies every array of `ck` into `model`. The architecture must match.
inline void restore_checkpoint(Model& model, const Checkpoint& ck) {
  if (ck.version != kCheckpointVersion) fail(ErrorKind::incompatible_checkpoint, "checkpoint version " + std::to_string(ck.version));
  if (!(ck.config == model.config()))
    fail(ErrorKind::incompatible_checkpoint, "checkpoint holds '" + ck.config.describe() + "' but model is '" + model.config().describe() + "'");
  auto& store = model.params();
  if (ck.params.size() != store.params().size() || ck.stats.size() != store.all_stats().size())
    fail(ErrorKind::incompatible_checkpoint, "checkpoint array manifest does not match the model");
  for (const auto& a : ck.params) {
    if (!store.contains(a.name)) fail(ErrorKind::incompatible_checkpoint, "unknown array " + a.name);
    Var v = store.get(a.name);
    if (v.shape() != a.shape) fail(ErrorKind::incompatible_checkpoint, "shape mismatch for " + a.name);
    v.mutable_value() = a.values;
  }
  for (const auto& s : ck.stats) {
    auto& dst = store.stats(s.name);
    const bool frozen = dst.frozen;
    dst = s.stats;
    dst.frozen = frozen;
  }
  model.scaler() = ck.scaler;
}

inline std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ck, std::uint64_t seed = 0) {
  auto model = make_model(ck.config, seed);
  restore_checkpoint(*model, ck);
  return model;
}

// Text header, terminated by a line "end", followed by the f64 payload.
inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  std::string header = "bwcloud-checkpoint " + std::to_string(ck.version) + "\n";
  header += "kind = " + std::string(to_string(ck.config.kind)) + "\n";
  header += "embedding_dim = " + std::to_string(ck.config.embedding_dim) + "\n";
  header += "feature_tnet = " + std::to_string(ck.config.feature_tnet ? 1 : 0) + "\n";
  header += "k_neighbors = " + std::to_string(ck.config.k_neighbors) + "\n";
  header += "dropout = " + format_double(ck.config.dropout) + "\n";
  header += "target_mean_kg = " + format_double(ck.scaler.mean_kg) + "\n";
  header += "target_std_kg = " + format_double(ck.scaler.std_kg) + "\n";
  for (const auto& [k, v] : ck.metadata) header += "meta." + k + " = " + v + "\n";
  std::size_t offset = 0;
  for (const auto& a : ck.params) {
    std::string dims;
    for (std::size_t i = 0; i < a.shape.size(); ++i) dims += (i ? "x" : "") + std::to_string(a.shape[i]);
    header += "param " + a.name + " " + dims + " " + std::to_string(offset) + "\n";
    offset += a.values.size();
  }
  for (const auto& s : ck.stats) {
    header += "stats " + s.name + " " + std::to_string(s.stats.mean.size()) + " " + std::to_string(offset) + " " +
              (s.stats.initialized ? "1" : "0") + "\n";
    offset += 2 * s.stats.mean.size();
  }
  header += "end\n";
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& a : ck.params)
    for (double v : a.values) put_f64(os, v);
  for (const auto& s : ck.stats) {
    for (double v : s.stats.mean) put_f64(os, v);
    for (double v : s.stats.var) put_f64(os, v);
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  Checkpoint ck;
  std::string line;
  if (!std::getline(is, line)) fail(ErrorKind::incompatible_checkpoint, "empty checkpoint");
  {
    std::istringstream ls(line);
    std::string magic;
    ls >> magic >> ck.version;
    if (magic != "bwcloud-checkpoint") fail(ErrorKind::incompatible_checkpoint, "not a checkpoint file");
    if (ck.version != kCheckpointVersion) fail(ErrorKind::incompatible_checkpoint, "unsupported checkpoint version " + std::to_string(ck.version));
  }
  std::string kv_text;
  struct Pending {
    bool is_stats;
    std::string name;
    Shape shape;
    bool initialized;
  };
  std::vector<Pending> manifest;
  while (std::getline(is, line)) {
    if (line == "end") break;
    if (line.rfind("param ", 0) == 0 || line.rfind("stats ", 0) == 0) {
      std::istringstream ls(line);
      std::string tag, name, dims;
      std::size_t offset = 0;
      ls >> tag >> name >> dims >> offset;
      Pending p{tag == "stats", name, {}, true};
      if (p.is_stats) {
        int init = 1;
        ls >> init;
        p.initialized = init != 0;
        p.shape = {static_cast<std::size_t>(parse_int(dims, "stats width"))};
      } else {
        for (const auto& d : split(dims, 'x')) p.shape.push_back(static_cast<std::size_t>(parse_int(d, "param shape")));
      }
      manifest.push_back(std::move(p));
    } else {
      kv_text += line + "\n";
    }
  }
  if (line != "end") fail(ErrorKind::incompatible_checkpoint, "truncated checkpoint header");
  const auto kv = KeyValues::parse(kv_text, "checkpoint header");
  ck.config.kind = parse_model_kind(kv.get("kind"));
  ck.config.embedding_dim = static_cast<std::size_t>(kv.integer("embedding_dim"));
  ck.config.feature_tnet = kv.integer("feature_tnet") != 0;
  ck.config.k_neighbors = static_cast<std::size_t>(kv.integer("k_neighbors"));
  ck.config.dropout = kv.number("dropout");
  ck.scaler.mean_kg = kv.number("target_mean_kg");
  ck.scaler.std_kg = kv.number("target_std_kg");
  for (const auto& [k, v] : kv.entries())
    if (k.rfind("meta.", 0) == 0) ck.metadata[k.substr(5)] = v;
  for (const auto& p : manifest) {
    if (p.is_stats) {
      BatchNormStats s;
      s.initialized = p.initialized;
      s.mean.resize(p.shape[0]);
      s.var.resize(p.shape[0]);
      ck.stats.push_back({p.name, std::move(s)});
    } else {
      ck.params.push_back({p.name, p.shape, std::vector<double>(numel(p.shape))});
    }
  }
  for (auto& a : ck.params)
    for (auto& v : a.values) v = get_f64(is);
  for (auto& s : ck.stats) {
    for (auto& v : s.stats.mean) v = get_f64(is);
    for (auto& v : s.stats.var) v = get_f64(is);
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot open " + path + " for writing");
  write_checkpoint(os, ck);
  if (!os) fail(ErrorKind::io, "write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace bwcloud
