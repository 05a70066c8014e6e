#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "bwcloud/dataset.hpp"
#include "bwcloud/depth_io.hpp"
#include "bwcloud/error.hpp"
#include "bwcloud/kv.hpp"
#include "bwcloud/rng.hpp"

namespace bwcloud {

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  double lerp(double t) const { return lo + (hi - lo) * t; }
  bool operator==(const Range&) const = default;
};

/// Procedural farm: half-ellipsoid cows under a down-looking camera.
///
/// Body size is driven by one latent size s ~ U(size) shared by length, width
/// and height (each linearly interpolated over its range), so the shape
/// ratios, which survive unit-sphere normalization, carry the size signal.
struct FarmProfile {
  std::string farm_id = "synthetic";
  int n_cows = 40;
  int frames_min = 3;
  int frames_max = 3;
  CameraProfile camera;
  Range length_mm{1500.0, 2100.0};  // full body length, 2a
  Range width_mm{450.0, 700.0};     // full body width, 2b
  Range height_mm{1200.0, 1500.0};  // dorsal height above floor, c
  Range size{0.0, 1.0};             // latent size interval; shifting it shifts the farm
  double shape_jitter = 0.03;       // relative per-axis noise on top of the shared size
  double weight_k = 8.0e-7;         // kg per mm^3 of half-ellipsoid volume
  double weight_noise_kg = 15.0;
  double depth_noise_mm = 3.0;
  double camera_height_offset_mm = 0.0;  // true height minus calibrated height
  double max_yaw_deg = 10.0;
  int apex_jitter_px = 2;
  int min_cow_pixels = 200;

  void validate() const {
    const std::string who = "farm profile '" + farm_id + "'";
    camera.validate();
    if (n_cows < 1) fail(ErrorKind::parameter, who + ": n_cows must be positive");
    if (frames_min < 1 || frames_max < frames_min) fail(ErrorKind::parameter, who + ": need 1 <= frames_min <= frames_max");
    for (const auto* r : {&length_mm, &width_mm, &height_mm})
      if (!(r->lo > 0.0 && r->hi >= r->lo)) fail(ErrorKind::parameter, who + ": size ranges must be positive and ordered");
    if (!(size.hi >= size.lo)) fail(ErrorKind::parameter, who + ": size interval must be ordered");
    if (!(weight_k > 0.0)) fail(ErrorKind::parameter, who + ": weight_k must be positive");
    if (weight_noise_kg < 0.0 || depth_noise_mm < 0.0 || shape_jitter < 0.0)
      fail(ErrorKind::parameter, who + ": noise levels must be non-negative");
    if (max_yaw_deg < 0.0 || apex_jitter_px < 0 || min_cow_pixels < 1) fail(ErrorKind::parameter, who + ": bad pose settings");
  }
};

/// Camera preset scaled to a lower resolution (intrinsics and size times `factor`).
inline CameraProfile scaled_camera(const CameraProfile& base, double factor, const std::string& farm_id) {
  CameraProfile c = base;
  c.fx *= factor;
  c.fy *= factor;
  c.cx *= factor;
  c.cy *= factor;
  c.width = static_cast<int>(std::lround(base.width * factor));
  c.height = static_cast<int>(std::lround(base.height * factor));
  c.farm_id = farm_id;
  c.validate();
  return c;
}

inline CameraProfile camera_preset(const std::string& name) {
  if (name == "large") return large_farm_camera();
  if (name == "medium") return medium_farm_camera();
  if (name == "small") return small_farm_camera();
  fail(ErrorKind::config, "unknown camera preset '" + name + "' (expected large, medium or small)");
}

inline constexpr double kSyntheticCameraScale = 0.1;

// Default synthetic farms. The large farm is the external source; the small
// farm differs in size distribution and in a camera-height calibration error.
inline FarmProfile synthetic_large_profile() {
  FarmProfile p;
  p.farm_id = "large";
  p.n_cows = 800;
  p.camera = scaled_camera(large_farm_camera(), kSyntheticCameraScale, "large");
  p.size = {0.0, 1.0};
  return p;
}

inline FarmProfile synthetic_medium_profile() {
  FarmProfile p;
  p.farm_id = "medium";
  p.n_cows = 200;
  p.camera = scaled_camera(medium_farm_camera(), kSyntheticCameraScale, "medium");
  p.size = {0.1, 1.1};
  p.camera_height_offset_mm = -40.0;
  return p;
}

inline FarmProfile synthetic_small_profile() {
  FarmProfile p;
  p.farm_id = "small";
  p.n_cows = 40;
  p.camera = scaled_camera(small_farm_camera(), kSyntheticCameraScale, "small");
  p.size = {0.3, 1.2};
  p.camera_height_offset_mm = 80.0;
  return p;
}

/// Reads a profile as key = value text. `camera` names a camera preset that
/// is scaled by `camera_scale`; every other key overrides a default.
inline FarmProfile parse_farm_profile(std::string_view text, const std::string& origin) {
  const auto kv = KeyValues::parse(text, origin);
  FarmProfile p;
  const std::string preset = kv.get_or("camera", "small");
  if (preset == "small") p = synthetic_small_profile();
  else if (preset == "medium") p = synthetic_medium_profile();
  else if (preset == "large") p = synthetic_large_profile();
  else camera_preset(preset);  // throws for unknown names
  p.farm_id = kv.get_or("farm_id", p.farm_id);
  const double scale = kv.has("camera_scale") ? kv.number("camera_scale") : kSyntheticCameraScale;
  p.camera = scaled_camera(camera_preset(preset), scale, p.farm_id);
  auto num = [&](const char* key, double& field) {
    if (kv.has(key)) field = kv.number(key);
  };
  auto whole = [&](const char* key, int& field) {
    if (kv.has(key)) field = static_cast<int>(kv.integer(key));
  };
  whole("n_cows", p.n_cows);
  whole("frames_min", p.frames_min);
  whole("frames_max", p.frames_max);
  num("length_mm_min", p.length_mm.lo);
  num("length_mm_max", p.length_mm.hi);
  num("width_mm_min", p.width_mm.lo);
  num("width_mm_max", p.width_mm.hi);
  num("height_mm_min", p.height_mm.lo);
  num("height_mm_max", p.height_mm.hi);
  num("size_min", p.size.lo);
  num("size_max", p.size.hi);
  num("shape_jitter", p.shape_jitter);
  num("weight_k_kg_per_mm3", p.weight_k);
  num("weight_noise_kg", p.weight_noise_kg);
  num("depth_noise_mm", p.depth_noise_mm);
  num("camera_height_offset_mm", p.camera_height_offset_mm);
  num("max_yaw_deg", p.max_yaw_deg);
  whole("apex_jitter_px", p.apex_jitter_px);
  whole("min_cow_pixels", p.min_cow_pixels);
  for (const auto& [key, value] : kv.entries()) {
    static const std::set<std::string> known{"farm_id", "camera", "camera_scale", "n_cows", "frames_min", "frames_max",
                                             "length_mm_min", "length_mm_max", "width_mm_min", "width_mm_max", "height_mm_min",
                                             "height_mm_max", "size_min", "size_max", "shape_jitter", "weight_k_kg_per_mm3",
                                             "weight_noise_kg", "depth_noise_mm", "camera_height_offset_mm", "max_yaw_deg",
                                             "apex_jitter_px", "min_cow_pixels"};
    if (!known.count(key)) fail(ErrorKind::config, origin + ": unknown key " + key);
  }
  p.validate();
  return p;
}

/// Per-cow latent body: semi-axes in mm and the true weight.
struct CowParams {
  std::string cow_id;
  double a = 0.0;  // half length
  double b = 0.0;  // half width
  double c = 0.0;  // height
  double weight_kg = 0.0;
  double age_years = 0.0;
  int frames = 1;
};

inline double half_ellipsoid_volume(double a, double b, double c) { return 2.0 / 3.0 * std::numbers::pi * a * b * c; }

inline std::string cow_label(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "C%04d", index + 1);
  return buf;
}

inline CowParams sample_cow(const FarmProfile& profile, std::uint64_t seed, int index) {
  CowParams cow;
  cow.cow_id = cow_label(index);
  Rng rng(derive_seed(seed, {"synth-cow", profile.farm_id, cow.cow_id}));
  const double s = uniform(rng, profile.size.lo, profile.size.hi);
  auto jitter = [&] { return std::max(0.5, 1.0 + gaussian(rng, 0.0, profile.shape_jitter)); };
  cow.a = 0.5 * profile.length_mm.lerp(s) * jitter();
  cow.b = 0.5 * profile.width_mm.lerp(s) * jitter();
  cow.c = profile.height_mm.lerp(s) * jitter();
  cow.weight_kg = profile.weight_k * half_ellipsoid_volume(cow.a, cow.b, cow.c) + gaussian(rng, 0.0, profile.weight_noise_kg);
  if (!(cow.weight_kg > 0.0)) fail(ErrorKind::generation, "cow " + cow.cow_id + " drew a non-positive weight");
  cow.age_years = std::clamp(2.0 + 5.0 * s + gaussian(rng, 0.0, 0.5), 1.0, 12.0);
  cow.frames = profile.frames_min + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(profile.frames_max - profile.frames_min + 1)));
  return cow;
}

/// In-plane pose of one capture: yaw and the pixel the dorsal apex projects to.
struct FramePose {
  double yaw = 0.0;
  int apex_x = 0;
  int apex_y = 0;
};

struct SyntheticFrame {
  DepthFrame frame;
  double weight_kg = 0.0;
  FramePose pose;
  double center_x = 0.0;  // footprint center on the floor plane, mm
  double center_y = 0.0;
};

/// Largest ray parameter t at which t * (xn, yn, 1) meets the half-ellipsoid,
/// or a negative value when the ray misses it.
inline double ray_hit(double xn, double yn, double a, double b, double c, double cos_yaw, double sin_yaw, double mx, double my) {
  const double ux = cos_yaw * xn + sin_yaw * yn;
  const double uy = -sin_yaw * xn + cos_yaw * yn;
  const double wx = cos_yaw * mx + sin_yaw * my;
  const double wy = -sin_yaw * mx + cos_yaw * my;
  const double A = ux * ux / (a * a) + uy * uy / (b * b) + 1.0 / (c * c);
  const double B = -2.0 * (ux * wx / (a * a) + uy * wy / (b * b));
  const double C = wx * wx / (a * a) + wy * wy / (b * b) - 1.0;
  const double disc = B * B - 4.0 * A * C;
  if (disc < 0.0) return -1.0;
  return (-B + std::sqrt(disc)) / (2.0 * A);
}

/// Renders one capture. Rays follow the deprojection model: the point seen at
/// pixel (x', y') is Z * ((x' - cx)/fx, (y' - cy)/fy, 1) with Z the height above
/// the floor, so every rendered cow pixel deprojects onto the ellipsoid.
/// The true camera sits `camera_height_offset_mm` above the calibrated height.
inline SyntheticFrame generate_cow_frame(const CowParams& cow, const FarmProfile& profile, std::uint64_t seed, int frame_index) {
  const auto& cam = profile.camera;
  const std::string frame_id = "f" + std::to_string(frame_index + 1);
  Rng rng(derive_seed(seed, {"synth-frame", profile.farm_id, cow.cow_id, frame_id}));
  SyntheticFrame out;
  const double h_true = cam.h_camera + profile.camera_height_offset_mm;
  if (!(cow.c < h_true)) fail(ErrorKind::generation, "cow " + cow.cow_id + " is taller than the camera height");

  out.pose.yaw = uniform(rng, -profile.max_yaw_deg, profile.max_yaw_deg) * std::numbers::pi / 180.0;
  const int j = profile.apex_jitter_px;
  out.pose.apex_x = static_cast<int>(std::lround(cam.cx)) - j + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(2 * j + 1)));
  out.pose.apex_y = static_cast<int>(std::lround(cam.cy)) - j + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(2 * j + 1)));
  if (out.pose.apex_x < 0 || out.pose.apex_x >= cam.width || out.pose.apex_y < 0 || out.pose.apex_y >= cam.height)
    fail(ErrorKind::generation, "cow " + cow.cow_id + " apex falls outside the image");
  // Place the footprint so the apex (center, height c) lies on the apex pixel's ray.
  out.center_x = cow.c * (out.pose.apex_x - cam.cx) / cam.fx;
  out.center_y = cow.c * (out.pose.apex_y - cam.cy) / cam.fy;
  const double cy = std::cos(out.pose.yaw), sy = std::sin(out.pose.yaw);

  DepthFrame& f = out.frame;
  f.width = cam.width;
  f.height = cam.height;
  f.id = {profile.farm_id, cow.cow_id, frame_id};
  f.depth.assign(static_cast<std::size_t>(cam.width) * cam.height, h_true);
  int cow_pixels = 0;
  for (int y = 0; y < cam.height; ++y) {
    const double yn = (y - cam.cy) / cam.fy;
    for (int x = 0; x < cam.width; ++x) {
      const double xn = (x - cam.cx) / cam.fx;
      const double t = ray_hit(xn, yn, cow.a, cow.b, cow.c, cy, sy, out.center_x, out.center_y);
      if (!(t > 0.0)) continue;
      ++cow_pixels;
      double d = h_true - t;
      if (profile.depth_noise_mm > 0.0) d += gaussian(rng, 0.0, profile.depth_noise_mm);
      f.at(x, y) = std::max(d, 0.0);
    }
  }
  if (cow_pixels < profile.min_cow_pixels)
    fail(ErrorKind::generation, "cow " + cow.cow_id + " covers only " + std::to_string(cow_pixels) + " pixels");
  out.weight_kg = cow.weight_kg;
  return out;
}

/// Sum over deprojected points of the floor-plane area of their pixel
/// (Z^2 / (fx fy)); a rendered-size proxy.
inline double dorsal_area(const DepthFrame& frame, const CameraProfile& cam) {
  double area = 0.0;
  for (double d : frame.depth)
    if (!DepthFrame::missing(d) && d < cam.h_camera) {
      const double z = cam.h_camera - d;
      area += z * z / (cam.fx * cam.fy);
    }
  return area;
}

struct GeneratedFarm {
  DatasetManifest manifest;
  std::string manifest_path;
  std::string camera_path;
  std::vector<CowParams> cows;
};

/// Writes `<out>/<farm>/<cow>/<frame>.csv`, `<out>/<farm>_manifest.csv` and
/// `<out>/<farm>_camera.txt`. Output depends only on (profile, seed).
inline GeneratedFarm generate_farm(const FarmProfile& profile, std::uint64_t seed, const std::string& out_dir) {
  profile.validate();
  GeneratedFarm g;
  g.manifest.base_dir = out_dir;
  for (int i = 0; i < profile.n_cows; ++i) {
    CowParams cow = sample_cow(profile, seed, i);
    for (int k = 0; k < cow.frames; ++k) {
      const auto sf = generate_cow_frame(cow, profile, seed, k);
      const std::string rel = profile.farm_id + "/" + cow.cow_id + "/" + sf.frame.id.frame_id + ".csv";
      write_text_file((std::filesystem::path(out_dir) / rel).string(), depth_csv_text(sf.frame));
      g.manifest.records.push_back({cow.cow_id, profile.farm_id, cow.weight_kg, cow.age_years, rel, sf.frame.id.frame_id});
    }
    g.cows.push_back(std::move(cow));
  }
  // Round-trip the manifest through its text form so in-memory weights match the file.
  const std::string text = manifest_text(g.manifest);
  g.manifest_path = (std::filesystem::path(out_dir) / (profile.farm_id + "_manifest.csv")).string();
  g.camera_path = (std::filesystem::path(out_dir) / (profile.farm_id + "_camera.txt")).string();
  write_text_file(g.manifest_path, text);
  write_text_file(g.camera_path, camera_profile_text(profile.camera));
  g.manifest = parse_manifest(text, out_dir, g.manifest_path, false);
  return g;
}

}  // namespace bwcloud
