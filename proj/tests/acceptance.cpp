#include <malloc.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <set>
#include <thread>

#include "bwcloud/experiments.hpp"
#include "bwcloud/synthetic.hpp"
#include "bwcloud/workers.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace bwcloud;
using bwtest::grad_check;
using bwtest::leaf;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail = what;
      pass = false;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fixed(double v, int digits) { return fmt(v, digits); }

std::string sci(double v) {
  std::ostringstream os;
  os.precision(2);
  os << std::scientific << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// 1. Gradients

Outcome gradients() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  auto dim = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  auto rnd = [&](std::size_t n, double lo = -1.0, double hi = 1.0) { return bwtest::random_values(rng, n, lo, hi); };
  std::map<std::string, double> worst;
  std::map<std::string, int> count;
  auto record = [&](const std::string& op, const bwtest::GradCheck& r) {
    worst[op] = std::max(worst[op], r.max_rel_error);
    ++count[op];
  };
  constexpr int kInstances = 20;
  for (int t = 0; t < kInstances; ++t) {
    const std::size_t n = dim(1, 8);
    auto v = [&] { return leaf({n}, rnd(n)); };
    record("add", grad_check([](const auto& in) { return add(in[0], in[1]); }, {v(), v()}, t));
    record("mul", grad_check([](const auto& in) { return mul(in[0], in[1]); }, {v(), v()}, t));
    record("scale", grad_check([](const auto& in) { return scale(in[0], -1.7); }, {v()}, t));
    record("sum", grad_check([](const auto& in) { return sum(in[0]); }, {v()}, t));
    record("mean", grad_check([](const auto& in) { return mean(in[0]); }, {v()}, t));
    record("reshape", grad_check([n](const auto& in) { return reshape(in[0], {1, n}); }, {v()}, t));
    for (auto kind : {Activation::relu, Activation::leaky_relu})
      record(kind == Activation::relu ? "relu" : "leaky_relu",
             grad_check([kind](const auto& in) { return activation(in[0], kind); }, {leaf({n}, bwtest::off_zero_values(rng, n))}, t));
    record("dropout", grad_check(
                          [t](const auto& in) {
                            Rng mask(static_cast<std::uint64_t>(t));
                            return dropout(in[0], 0.4, Mode::train, mask);
                          },
                          {v()}, t));

    const std::size_t rows = dim(1, 8), cin = dim(1, 8), cout = dim(1, 8);
    record("linear", grad_check([](const auto& in) { return linear(in[0], in[1], in[2]); },
                                {leaf({rows, cin}, rnd(rows * cin)), leaf({cin, cout}, rnd(cin * cout)), leaf({cout}, rnd(cout))}, t));

    const std::size_t batch = dim(2, 4), pts = dim(1, 4), ch = dim(1, 5);
    for (Mode mode : {Mode::train, Mode::eval}) {
      auto stats = BatchNormStats::fresh(ch);
      stats.mean = rnd(ch);
      stats.var = rnd(ch, 0.5, 2.0);
      record(mode == Mode::train ? "batch_norm(train)" : "batch_norm(eval)",
             grad_check(
                 [&](const auto& in) {
                   auto s = stats;
                   return batch_norm(in[0], in[1], in[2], s, mode);
                 },
                 {leaf({batch, pts, ch}, rnd(batch * pts * ch)), leaf({ch}, rnd(ch, 0.5, 1.5)), leaf({ch}, rnd(ch))}, t));
    }

    const std::size_t b = dim(1, 3), np = dim(1, 8), d = dim(1, 4), e = dim(1, 4);
    for (auto kind : {Pool::max, Pool::avg})
      record(kind == Pool::max ? "max_pool" : "avg_pool",
             grad_check([kind](const auto& in) { return pool_points(in[0], kind); }, {leaf({b, np, d}, rnd(b * np * d))}, t));
    record("concat", grad_check([](const auto& in) { return concat_last({in[0], in[1]}); },
                                {leaf({b, np, d}, rnd(b * np * d)), leaf({b, np, e}, rnd(b * np * e))}, t));
    record("batched_transform", grad_check([](const auto& in) { return batched_transform(in[0], in[1]); },
                                           {leaf({b, np, d}, rnd(b * np * d)), leaf({b, d, d}, rnd(b * d * d))}, t));

    const std::size_t gn = dim(3, 8), gk = dim(1, gn - 1);
    const Var probe = Var::constant({b, gn, d}, rnd(b * gn * d));
    const auto nb = knn_graph(probe, gk);
    for (Mode mode : {Mode::train, Mode::eval}) {
      auto stats = BatchNormStats::fresh(cout);
      stats.mean = rnd(cout);
      stats.var = rnd(cout, 0.5, 2.0);
      const auto gamma = bwtest::off_zero_values(rng, cout);
      record(mode == Mode::train ? "edge_conv(train)" : "edge_conv(eval)",
             grad_check(
                 [&](const auto& in) {
                   auto s = stats;
                   return edge_conv(in[0], nb, in[1], in[2], in[3], in[4], s, mode);
                 },
                 {leaf({b, gn, d}, probe.value()), leaf({2 * d, cout}, rnd(2 * d * cout)), leaf({cout}, rnd(cout)), leaf({cout}, gamma),
                  leaf({cout}, rnd(cout))},
                 t));
    }

    std::vector<double> target(n), pred(n);
    std::uniform_real_distribution<double> near(0.1, 0.8), far(1.2, 3.0);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < n; ++i) {
      target[i] = rnd(1)[0];
      const double r = coin(rng) ? near(rng) : far(rng);  // clear of the |r| = 1 kink
      pred[i] = target[i] + (coin(rng) ? r : -r);
    }
    for (auto kind : {Loss::huber, Loss::smooth_l1})
      record(kind == Loss::huber ? "huber" : "smooth_l1",
             grad_check([&](const auto& in) { return regression_loss(in[0], target, kind); }, {leaf({n}, pred)}, t));
  }
  const double elapsed = seconds_since(t0);
  double max_err = 0.0;
  for (const auto& [op, err] : worst) {
    o.require(err <= 1e-5, op + " rel error " + sci(err));
    o.require(count[op] >= kInstances, op + " has too few instances");
    max_err = std::max(max_err, err);
  }
  o.require(elapsed < 60.0, "took " + fixed(elapsed, 1) + " s");
  if (o.pass)
    o.detail = std::to_string(worst.size()) + " ops x " + std::to_string(kInstances) + " instances, max rel error " + sci(max_err);
  return o;
}

// ---------------------------------------------------------------------------
// 2. Geometry

Outcome geometry() {
  Outcome o;
  double worst_px = 0.0, worst_mm = 0.0;
  std::mt19937_64 rng(202);
  for (const auto& cam : {large_farm_camera(), medium_farm_camera(), small_farm_camera()}) {
    std::uniform_real_distribution<double> ux(0.0, cam.width - 1.0), uy(0.0, cam.height - 1.0), ud(300.0, cam.h_camera - 1.0);
    for (int i = 0; i < 10000; ++i) {
      const double x = ux(rng), y = uy(rng), depth = ud(rng);
      const Point3 p = deproject_pixel(x, y, depth, cam);
      const double dist = cam.h_camera - p.z;  // camera-to-point depth along the optical axis
      const double rx = cam.fx * p.x / p.z + cam.cx, ry = cam.fy * p.y / p.z + cam.cy;
      worst_px = std::max({worst_px, std::abs(rx - x), std::abs(ry - y)});
      o.require(std::abs(dist - depth) <= 1e-6, "depth does not round-trip on " + cam.farm_id);
    }
  }
  o.require(worst_px <= 1e-6, "reprojection error " + sci(worst_px) + " px");

  for (auto profile : {synthetic_large_profile(), synthetic_medium_profile(), synthetic_small_profile()}) {
    profile.depth_noise_mm = 0.0;
    profile.weight_noise_kg = 0.0;
    profile.camera_height_offset_mm = 0.0;  // a deliberate miscalibration, not noise
    for (int i = 0; i < 20; ++i) {
      const auto cow = sample_cow(profile, 303, i);
      const auto sf = generate_cow_frame(cow, profile, 303, 0);
      const auto cloud = deproject(sf.frame, profile.camera);
      const double c = std::cos(sf.pose.yaw), s = std::sin(sf.pose.yaw);
      for (const auto& q : cloud.points) {
        const double dx = q.x - sf.center_x, dy = q.y - sf.center_y;
        const double u = c * dx + s * dy, v = -s * dx + c * dy;
        const double f = u * u / (cow.a * cow.a) + v * v / (cow.b * cow.b) + q.z * q.z / (cow.c * cow.c) - 1.0;
        const double gu = 2 * u / (cow.a * cow.a), gv = 2 * v / (cow.b * cow.b), gz = 2 * q.z / (cow.c * cow.c);
        worst_mm = std::max(worst_mm, std::abs(f) / std::sqrt(gu * gu + gv * gv + gz * gz));
      }
    }
  }
  o.require(worst_mm <= 1.0, "surface distance " + fixed(worst_mm, 4) + " mm");
  if (o.pass) o.detail = "reprojection " + sci(worst_px) + " px over 3x10^4 pixels, surface distance " + sci(worst_mm) + " mm";
  return o;
}

// ---------------------------------------------------------------------------
// 3. Preprocessing

PointCloud random_cloud(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> off(-3000.0, 3000.0), u(-1.0, 1.0);
  const double scale = std::pow(10.0, std::uniform_real_distribution<double>(0.0, 3.5)(rng));
  const Point3 c{off(rng), off(rng), off(rng)};
  PointCloud cloud;
  cloud.stage = CloudStage::cleaned;
  for (std::size_t i = 0; i < n; ++i) cloud.points.push_back({c.x + scale * u(rng), c.y + scale * u(rng), c.z + scale * u(rng)});
  return cloud;
}

Outcome preprocessing() {
  Outcome o;
  std::mt19937_64 rng(303);
  double worst_centroid = 0.0, worst_radius = 0.0, worst_invariance = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 3000)(rng);
    const auto cloud = random_cloud(rng, n);
    const auto nc = normalize(cloud);
    Point3 m;
    double rmax = 0.0;
    for (const auto& p : nc.points) {
      m.x += p.x;
      m.y += p.y;
      m.z += p.z;
      rmax = std::max(rmax, p.norm());
    }
    const double k = 1.0 / static_cast<double>(n);
    worst_centroid = std::max(worst_centroid, Point3{m.x * k, m.y * k, m.z * k}.norm());
    worst_radius = std::max(worst_radius, std::abs(1.0 - rmax));
    o.require(rmax <= 1.0, "max radius above 1");

    const double a = std::uniform_real_distribution<double>(0.1, 10.0)(rng), shift = std::uniform_real_distribution<double>(-1000, 1000)(rng);
    auto moved = cloud;
    for (auto& p : moved.points) p = {a * p.x + shift, a * p.y - shift, a * p.z + 0.5 * shift};
    const auto nm = normalize(moved);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = nc.points[i];
      const auto& q = nm.points[i];
      worst_invariance = std::max({worst_invariance, std::abs(p.x - q.x), std::abs(p.y - q.y), std::abs(p.z - q.z)});
    }
  }
  o.require(worst_centroid <= 1e-9, "centroid " + sci(worst_centroid));
  o.require(worst_radius <= 1e-9, "max radius off by " + sci(worst_radius));
  o.require(worst_invariance <= 1e-9, "translation/scale invariance " + sci(worst_invariance));

  for (std::size_t n : {1u, 500u, 1023u, 1024u, 1025u, 2048u, 4999u}) {
    auto cloud = normalize(random_cloud(rng, std::max<std::size_t>(n, 2)));
    cloud.points.resize(n);
    const auto a = standardize(cloud, 77), b = standardize(cloud, 77);
    o.require(a.points == b.points && a.size() == kStandardPointCount, "standardize not deterministic for n=" + std::to_string(n));
  }
  const auto idx = standardize_indices(2048, kStandardPointCount, 5);
  bool stride = idx.size() == kStandardPointCount;
  for (std::size_t i = 0; stride && i < idx.size(); ++i) stride = idx[i] == 2 * i;
  o.require(stride, "n=2048 is not the stride-2 selection");
  if (o.pass)
    o.detail = "centroid " + sci(worst_centroid) + ", radius " + sci(worst_radius) + ", invariance " + sci(worst_invariance) + " on 1000 clouds";
  return o;
}

// ---------------------------------------------------------------------------
// 4. Model symmetry and freezing

std::vector<double> shape_cloud(double weight_kg, std::uint64_t seed) {
  Rng rng(seed);
  const double ratio = 0.25 + 0.5 * (weight_kg - 400.0) / 400.0;
  std::vector<double> v;
  for (std::size_t i = 0; i < kStandardPointCount; ++i) {
    const double u = uniform(rng, -1.0, 1.0), t = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double s = std::sqrt(1.0 - u * u);
    v.push_back(s * std::cos(t));
    v.push_back(ratio * s * std::sin(t));
    v.push_back(0.4 * u);
  }
  return v;
}

double permutation_gap(ModelKind kind, int clouds, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.embedding_dim = 256;
  cfg.feature_tnet = true;
  auto model = make_model(cfg, seed);
  std::mt19937_64 rng(seed);
  constexpr std::size_t kBatch = 10;
  const std::size_t floats = kStandardPointCount * 3;
  {
    NoGradGuard guard;
    Rng r(1);
    model->forward(Var::constant({kBatch, kStandardPointCount, 3}, bwtest::random_values(rng, kBatch * floats)), Mode::train, r);
  }
  double worst = 0.0;
  for (int done = 0; done < clouds; done += kBatch) {
    // Continuous uniform coordinates: exact distance ties have probability zero.
    const auto v = bwtest::random_values(rng, kBatch * floats);
    std::vector<double> shuffled(v.size());
    for (std::size_t b = 0; b < kBatch; ++b) {
      std::vector<std::size_t> perm(kStandardPointCount);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t p = 0; p < kStandardPointCount; ++p)
        for (std::size_t c = 0; c < 3; ++c) shuffled[b * floats + p * 3 + c] = v[b * floats + perm[p] * 3 + c];
    }
    const auto a = model->predict_kg(Var::constant({kBatch, kStandardPointCount, 3}, v));
    const auto z = model->predict_kg(Var::constant({kBatch, kStandardPointCount, 3}, shuffled));
    for (std::size_t b = 0; b < kBatch; ++b) worst = std::max(worst, std::abs(a[b] - z[b]) / std::max(1e-12, std::abs(a[b])));
  }
  return worst;
}

Outcome symmetry() {
  Outcome o;
  const double pn = permutation_gap(ModelKind::pointnet, 100, 404);
  const double dg = permutation_gap(ModelKind::dgcnn, 100, 405);
  o.require(pn <= 1e-6, "PointNet permutation gap " + sci(pn));
  o.require(dg <= 1e-6, "DGCNN permutation gap " + sci(dg));

  CloudBank bank;
  Rng wrng(406);
  for (int c = 0; c < 10; ++c) {
    const double w = uniform(wrng, 400.0, 800.0);
    for (int f = 0; f < 2; ++f) {
      const Sample s{"small", "C" + std::to_string(100 + c), "f" + std::to_string(f + 1), w};
      bank.add_cloud(s, shape_cloud(w, derive_seed(406, {s.cow_id, s.frame_id})));
    }
  }
  const auto split = split_cows(bank.cows_of("small"), 7);
  for (auto kind : {ModelKind::pointnet, ModelKind::dgcnn}) {
    HyperCell cell;
    cell.config.kind = kind;
    cell.config.embedding_dim = 256;
    cell.lr = 1e-3;
    cell.weight_decay = 1e-4;
    Budget budget;
    budget.stage1_epochs = 2;
    budget.stage2_epochs = 0;
    budget.finetune_epochs = 2;
    budget.batch_size = 4;
    auto model = make_model(cell.config, 11);
    model->scaler() = detail::scaler_for(bank, split.train);
    const auto before = model->backbone_arrays();
    two_stage_train(*model, bank, bank.frames_of(split.train), bank.frames_of(split.val), cell, budget, 12);
    o.require(model->backbone_arrays() == before, std::string(to_string(kind)) + " stage 1 changed the backbone");

    const auto ck = capture_checkpoint(*model);
    const auto ft = transfer_finetune(ck, cell, bank, bank.frames_of(split.subtrain), bank.frames_of(split.val), bank.frames_of(split.train),
                                      {TrainableSpec::head_only()}, {1e-3}, budget, 13);
    o.require(ft.model->backbone_arrays() == before, std::string(to_string(kind)) + " head-only fine-tuning changed the backbone");
  }
  if (o.pass) o.detail = "permutation gap PointNet " + sci(pn) + ", DGCNN " + sci(dg) + " on 100 clouds; frozen backbones bit-exact";
  return o;
}

// ---------------------------------------------------------------------------
// 5. Metrics

Outcome metrics() {
  Outcome o;
  std::mt19937_64 rng(505);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 200)(rng);
    std::uniform_real_distribution<double> w(250.0, 900.0), noise(-80.0, 80.0);
    std::vector<double> y(n), yh(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = w(rng);
      yh[i] = y[i] + noise(rng);
    }
    // Plain textbook forms, accumulated in long double.
    long double my = 0, ss_res = 0, ss_tot = 0, ape = 0;
    for (double v : y) my += v;
    my /= n;
    for (std::size_t i = 0; i < n; ++i) {
      ss_res += (y[i] - static_cast<long double>(yh[i])) * (y[i] - static_cast<long double>(yh[i]));
      ss_tot += (y[i] - my) * (y[i] - my);
      ape += std::abs((y[i] - static_cast<long double>(yh[i])) / y[i]);
    }
    const double r2 = static_cast<double>(1.0L - ss_res / ss_tot), mp = static_cast<double>(100.0L * ape / n);
    worst = std::max({worst, std::abs(r_squared(y, yh) - r2) / std::max(1.0, std::abs(r2)), std::abs(mape(y, yh) - mp) / std::max(1.0, mp)});
  }
  o.require(worst <= 1e-12, "naive oracle gap " + sci(worst));
  const std::vector<double> y{500, 600, 700}, yh{550, 600, 650};
  o.require(r_squared(y, yh) == 0.75, "worked R2 is " + format_double(r_squared(y, yh)));
  o.require(fmt(mape(y, yh), 6) == "5.714286", "worked MAPE is " + format_double(mape(y, yh)));
  if (o.pass) o.detail = "oracle gap " + sci(worst) + " on 1000 vectors; R2 0.75, MAPE 5.714286%";
  return o;
}

// ---------------------------------------------------------------------------
// Shared experiment plumbing

std::string fresh_dir(const fs::path& root, const std::string& name) {
  const auto p = root / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

FarmProfile sized(FarmProfile p, int cows, int frames) {
  p.n_cows = cows;
  p.frames_min = frames;
  p.frames_max = frames;
  return p;
}

std::string farm_lines(const GeneratedFarm& g, const std::string& farm) {
  return "manifest." + farm + " = " + g.manifest_path + "\ncamera." + farm + " = " + g.camera_path + "\n";
}

// ---------------------------------------------------------------------------
// 6. Synthetic transfer reproduction

const char* kTransferPlan = R"(
design = single_source, transfer
scenario = large
models = pointnet, dgcnn
repeats = 5
master_seed = 20240611
grid.pointnet.lr = 1e-3
grid.pointnet.dropout = 0.3
grid.pointnet.weight_decay = 1e-4
grid.pointnet.embedding_dim = 256
grid.pointnet.feature_tnet = off
grid.dgcnn.lr = 1e-3
grid.dgcnn.dropout = 0.3
grid.dgcnn.weight_decay = 1e-4
grid.dgcnn.embedding_dim = 256
grid.dgcnn.k_neighbors = 15
finetune.lr = 1e-3, 1e-4
finetune.unfreeze = head_only, full
epochs.stage1 = 60
epochs.stage2 = 60
epochs.finetune = 40
epochs.source_stage1 = 10
epochs.source_stage2 = 3
batch_size = 32
early_patience = 15
plateau_patience = 5
)";

Outcome transfer(const fs::path& work, std::size_t workers) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = fresh_dir(work, "transfer_data");
  const auto plan = parse_plan(std::string(kTransferPlan) + farm_lines(generate_farm(sized(synthetic_large_profile(), 800, 3), 61, data), "large") +
                                   farm_lines(generate_farm(sized(synthetic_small_profile(), 40, 3), 62, data), "small"),
                               data, "transfer plan");
  const Executor exec = thread_pool_executor(workers);
  const auto bank = load_plan_farms(plan, exec);
  const double setup = seconds_since(t0);
  const auto run = run_design(plan, bank, exec, [](const std::string& s) { std::cerr << "  [6] " << s << "\n"; });
  const double elapsed = seconds_since(t0);
  // Data generation and loading parallelize per frame, so they scale with workers too.
  const double projected = setup * static_cast<double>(workers) / 8.0 + projected_makespan(run.timings, 8);

  std::ostringstream detail;
  for (auto kind : {ModelKind::pointnet, ModelKind::dgcnn}) {
    std::map<Design, std::vector<double>> r2, mp;
    for (const auto& res : run.results)
      if (res.model == kind) {
        r2[res.design].push_back(res.r2);
        mp[res.design].push_back(res.mape);
      }
    const auto ss_r2 = mean_se(r2[Design::single_source]).mean, tl_r2 = mean_se(r2[Design::transfer]).mean;
    const auto ss_mp = mean_se(mp[Design::single_source]).mean, tl_mp = mean_se(mp[Design::transfer]).mean;
    const std::string name(to_string(kind));
    o.require(r2[Design::transfer].size() == 5 && r2[Design::single_source].size() == 5, name + " is missing repeats");
    o.require(tl_r2 >= ss_r2 + 0.05, name + " transfer R2 " + fixed(tl_r2, 3) + " vs single-source " + fixed(ss_r2, 3));
    o.require(tl_mp < ss_mp, name + " transfer MAPE " + fixed(tl_mp, 2) + "% vs single-source " + fixed(ss_mp, 2) + "%");
    detail << name << " R2 " << fixed(ss_r2, 3) << " -> " << fixed(tl_r2, 3) << ", MAPE " << fixed(ss_mp, 2) << "% -> " << fixed(tl_mp, 2)
           << "%; ";
  }
  o.require(projected <= 1800.0, "projected 8-worker runtime " + fixed(projected / 60.0, 1) + " min");
  detail << "measured " << fixed(elapsed / 60.0, 1) << " min on " << workers << " worker(s), projected " << fixed(projected / 60.0, 1)
         << " min on 8";
  o.detail = o.pass ? detail.str() : o.detail + " (" + detail.str() + ")";
  return o;
}

// ---------------------------------------------------------------------------
// 7. Harness hygiene

const char* kMatrixPlan = R"(
repeats = 2
master_seed = 77
grid.pointnet.lr = 1e-3
grid.pointnet.dropout = 0.3
grid.pointnet.weight_decay = 1e-4
grid.pointnet.embedding_dim = 256
grid.pointnet.feature_tnet = on
grid.dgcnn.lr = 1e-3
grid.dgcnn.dropout = 0.3
grid.dgcnn.weight_decay = 1e-4
grid.dgcnn.embedding_dim = 256
grid.dgcnn.k_neighbors = 15
finetune.lr = 1e-3
finetune.unfreeze = head_only, full
epochs.search = 1
epochs.stage1 = 1
epochs.stage2 = 1
epochs.finetune = 1
epochs.source_stage1 = 1
epochs.source_stage2 = 1
batch_size = 8
)";

Outcome hygiene(const fs::path& work, std::size_t workers) {
  Outcome o;
  const auto data = fresh_dir(work, "matrix_data");
  const auto plan = parse_plan(std::string(kMatrixPlan) + farm_lines(generate_farm(sized(synthetic_small_profile(), 20, 2), 71, data), "small") +
                                   farm_lines(generate_farm(sized(synthetic_medium_profile(), 10, 1), 72, data), "medium") +
                                   farm_lines(generate_farm(sized(synthetic_large_profile(), 10, 1), 73, data), "large"),
                               data, "matrix plan");
  const Executor exec = thread_pool_executor(workers);
  const auto bank = load_plan_farms(plan, exec);
  const auto first = run_design(plan, bank, exec);
  const auto second = run_design(plan, bank, exec);

  std::size_t overlaps = 0;
  std::map<std::size_t, std::set<std::vector<std::string>>> test_sets;
  for (const auto& res : first.results) {
    const std::set<std::string> train(res.train_cows.begin(), res.train_cows.end());
    for (const auto& c : res.test.cows) overlaps += train.count(c);
    auto cows = res.test.cows;
    for (auto f : res.test.frames) cows.push_back(bank.sample(f).frame_id + "@" + bank.sample(f).cow());
    test_sets[res.repeat].insert(cows);
  }
  o.require(overlaps == 0, std::to_string(overlaps) + " train/test overlaps");
  for (const auto& [r, sets] : test_sets) o.require(sets.size() == 1, "repeat " + std::to_string(r) + " has differing test sets");

  double gap = 0.0;
  o.require(first.results.size() == second.results.size(), "rerun has a different row count");
  for (std::size_t i = 0; i < std::min(first.results.size(), second.results.size()); ++i)
    gap = std::max({gap, std::abs(first.results[i].r2 - second.results[i].r2), std::abs(first.results[i].mape - second.results[i].mape)});
  o.require(gap <= 1e-10, "rerun metric gap " + sci(gap));
  o.require(splits_csv(first.splits) == splits_csv(second.splits), "rerun splits differ");
  if (o.pass)
    o.detail = std::to_string(first.results.size()) + " runs (3 designs x 3 scenarios x 2 models x 2 repeats), 0 overlaps, rerun gap " + sci(gap);
  return o;
}

// ---------------------------------------------------------------------------
// 8. Demo determinism

int shell(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::map<std::string, std::string> output_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != "run_manifest.txt" && e.path().filename() != "log.txt")
      out[fs::relative(e.path(), root).string()] = read_text_file(e.path().string());
  return out;
}

Outcome demo(const fs::path& work, const std::string& cli, const std::string& demo_dir) {
  Outcome o;
  std::vector<std::map<std::string, std::string>> runs;
  for (int i = 1; i <= 2; ++i) {
    const fs::path dir = fresh_dir(work, "demo_run" + std::to_string(i));
    for (const char* f : {"plan.txt", "small.txt", "large.txt"}) fs::copy_file(fs::path(demo_dir) / f, dir / f);
    const std::string log = " >> " + (dir / "log.txt").string() + " 2>&1";
    int rc = shell(cli + " synth --profile " + (dir / "small.txt").string() + " --profile " + (dir / "large.txt").string() + " --out " +
                   (dir / "data").string() + " --seed 7 --quiet" + log);
    o.require(rc == 0, "synth exited " + std::to_string(rc));
    rc = shell(cli + " experiment --plan " + (dir / "plan.txt").string() + " --out " + (dir / "out").string() + " --quiet" + log);
    o.require(rc == 0, "experiment exited " + std::to_string(rc));
    if (rc != 0) return o;
    runs.push_back(output_bytes(dir));
  }
  o.require(runs[0].count("out/results.csv") && runs[0].count("out/summary.txt"), "result files missing");
  o.require(runs[0] == runs[1], "the two runs differ");
  if (o.pass) o.detail = std::to_string(runs[0].size()) + " files byte-identical across two runs";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 512 << 20);

  CLI::App app{"Acceptance suite"};
  std::vector<int> only;
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  std::string work = (fs::temp_directory_path() / "bwcloud_acceptance").string();
  std::string cli = BWCLOUD_CLI_PATH, demo_dir = BWCLOUD_DEMO_DIR;
  app.add_option("--only", only, "Criteria to run (default all)")->delimiter(',')->check(CLI::Range(1, 8));
  app.add_option("--workers", workers, "Parallel workers")->check(CLI::PositiveNumber);
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--cli", cli, "bwcloud executable");
  app.add_option("--demo", demo_dir, "Demo plan directory");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradients", gradients},
      {"geometry", geometry},
      {"preprocessing", preprocessing},
      {"model symmetry", symmetry},
      {"metrics oracle", metrics},
      {"synthetic transfer", [&] { return transfer(work, workers); }},
      {"harness hygiene", [&] { return hygiene(work, workers); }},
      {"demo determinism", [&] { return demo(work, cli, demo_dir); }},
  };
  fs::create_directories(work);
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("threw ") + e.what();
    }
    all = all && o.pass;
    std::cout << "criterion " << id << " " << criteria[i].first << ": " << (o.pass ? "PASS" : "FAIL") << " (" << o.detail << ", "
              << fixed(seconds_since(t0), 1) << " s)" << std::endl;
  }
  return all ? 0 : 1;
}
