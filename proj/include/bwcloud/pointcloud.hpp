#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "bwcloud/binary_io.hpp"
#include "bwcloud/error.hpp"
#include "bwcloud/rng.hpp"

namespace bwcloud {

/// Identity of one captured frame.
struct FrameId {
  std::string farm_id;
  std::string cow_id;
  std::string frame_id;

  std::string str() const { return farm_id + "/" + cow_id + "/" + frame_id; }
  bool operator==(const FrameId&) const = default;
};

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
  double norm() const { return std::sqrt(x * x + y * y + z * z); }
  bool operator==(const Point3&) const = default;
};

enum class CloudStage : std::uint8_t { raw = 0, cleaned = 1, normalized = 2, standardized = 3 };

inline std::string_view to_string(CloudStage stage) {
  switch (stage) {
    case CloudStage::raw: return "raw";
    case CloudStage::cleaned: return "cleaned";
    case CloudStage::normalized: return "normalized";
    case CloudStage::standardized: return "standardized";
  }
  return "unknown";
}

/// Ordered point list. Coordinates are millimeters at stage raw/cleaned and
/// dimensionless after normalization.
struct PointCloud {
  std::vector<Point3> points;
  CloudStage stage = CloudStage::raw;
  FrameId id;

  std::size_t size() const { return points.size(); }
};

inline constexpr std::size_t kStandardPointCount = 1024;

inline PointCloud clean(const PointCloud& cloud) {
  if (cloud.stage != CloudStage::raw) fail(ErrorKind::contract, "clean expects a raw cloud, got " + std::string(to_string(cloud.stage)));
  PointCloud out;
  out.id = cloud.id;
  out.stage = CloudStage::cleaned;
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points)
    if (p.finite()) out.points.push_back(p);
  if (out.points.empty()) fail(ErrorKind::empty_cloud, "no finite points in frame " + cloud.id.str());
  return out;
}

/// Centers on the centroid and scales so the farthest point sits on the unit
/// sphere. The divisor is nudged up by a few ulps so the largest radius never
/// rounds above 1.
inline PointCloud normalize(const PointCloud& cloud) {
  if (cloud.stage != CloudStage::cleaned) fail(ErrorKind::contract, "normalize expects a cleaned cloud, got " + std::string(to_string(cloud.stage)));
  if (cloud.points.empty()) fail(ErrorKind::empty_cloud, "normalize on empty cloud " + cloud.id.str());

  const double n = static_cast<double>(cloud.points.size());
  Point3 centroid;
  for (const auto& p : cloud.points) {
    centroid.x += p.x;
    centroid.y += p.y;
    centroid.z += p.z;
  }
  centroid.x /= n;
  centroid.y /= n;
  centroid.z /= n;

  PointCloud out;
  out.id = cloud.id;
  out.stage = CloudStage::normalized;
  out.points.reserve(cloud.points.size());
  double radius = 0.0;
  for (const auto& p : cloud.points) {
    Point3 q{p.x - centroid.x, p.y - centroid.y, p.z - centroid.z};
    radius = std::max(radius, q.norm());
    out.points.push_back(q);
  }
  if (radius < 1e-9) fail(ErrorKind::degenerate_cloud, "all points coincide in frame " + cloud.id.str());

  const double divisor = radius * (1.0 + 4.0 * std::numeric_limits<double>::epsilon());
  for (auto& q : out.points) {
    q.x /= divisor;
    q.y /= divisor;
    q.z /= divisor;
  }
  return out;
}

/// Index selection behind standardize(): strided pass from 0 with step
/// floor(n / target), random completion without replacement if the stride
/// falls short, and seeded upsampling with replacement when n < target.
inline std::vector<std::size_t> standardize_indices(std::size_t n, std::size_t target, std::uint64_t seed) {
  if (target == 0) fail(ErrorKind::parameter, "standardize target must be positive");
  if (n == 0) fail(ErrorKind::empty_cloud, "standardize on empty cloud");

  std::vector<std::size_t> picked;
  picked.reserve(target);
  Rng rng(seed);
  if (n >= target) {
    const std::size_t stride = n / target;
    for (std::size_t i = 0; i < n && picked.size() < target; i += stride) picked.push_back(i);
    if (picked.size() < target) {
      std::vector<char> taken(n, 0);
      for (auto i : picked) taken[i] = 1;
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i]) rest.push_back(i);
      std::shuffle(rest.begin(), rest.end(), rng);
      rest.resize(target - picked.size());
      picked.insert(picked.end(), rest.begin(), rest.end());
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) picked.push_back(i);
    while (picked.size() < target) picked.push_back(uniform_index(rng, n));
  }
  return picked;
}

inline PointCloud standardize(const PointCloud& cloud, std::uint64_t seed, std::size_t target = kStandardPointCount) {
  if (cloud.stage != CloudStage::normalized) fail(ErrorKind::contract, "standardize expects a normalized cloud, got " + std::string(to_string(cloud.stage)));
  const auto indices = standardize_indices(cloud.points.size(), target, seed);
  PointCloud out;
  out.id = cloud.id;
  out.stage = CloudStage::standardized;
  out.points.reserve(indices.size());
  for (auto i : indices) out.points.push_back(cloud.points[i]);
  return out;
}

/// Seed for per-frame randomness; independent of processing order.
inline std::uint64_t frame_seed(std::uint64_t run_seed, const FrameId& id) {
  return derive_seed(run_seed, {id.farm_id, id.cow_id, id.frame_id});
}

/// clean -> normalize -> standardize.
inline PointCloud preprocess(const PointCloud& raw, std::uint64_t run_seed, std::size_t target = kStandardPointCount) {
  return standardize(normalize(clean(raw)), frame_seed(run_seed, raw.id), target);
}

// Binary layout: "BWPC", u32 version, u32 n_points, u8 stage, three
// length-prefixed identity strings, then n*3 little-endian f64.
inline constexpr std::uint32_t kCloudFormatVersion = 1;

inline void write_cloud(std::ostream& os, const PointCloud& cloud) {
  os.write("BWPC", 4);
  put_u32(os, kCloudFormatVersion);
  put_u32(os, static_cast<std::uint32_t>(cloud.points.size()));
  put_u8(os, static_cast<std::uint8_t>(cloud.stage));
  put_string(os, cloud.id.farm_id);
  put_string(os, cloud.id.cow_id);
  put_string(os, cloud.id.frame_id);
  for (const auto& p : cloud.points) {
    put_f64(os, p.x);
    put_f64(os, p.y);
    put_f64(os, p.z);
  }
}

inline PointCloud read_cloud(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "BWPC", 4) != 0) fail(ErrorKind::format, "not a point-cloud file (bad magic)");
  if (get_u32(is) != kCloudFormatVersion) fail(ErrorKind::format, "unsupported point-cloud version");
  const auto n = get_u32(is);
  const auto stage = get_u8(is);
  if (stage > 3) fail(ErrorKind::format, "invalid cloud stage tag");
  PointCloud cloud;
  cloud.stage = static_cast<CloudStage>(stage);
  cloud.id.farm_id = get_string(is);
  cloud.id.cow_id = get_string(is);
  cloud.id.frame_id = get_string(is);
  cloud.points.resize(n);
  for (auto& p : cloud.points) {
    p.x = get_f64(is);
    p.y = get_f64(is);
    p.z = get_f64(is);
  }
  return cloud;
}

inline void save_cloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot open " + path + " for writing");
  write_cloud(os, cloud);
  if (!os) fail(ErrorKind::io, "write failed for " + path);
}

inline PointCloud load_cloud(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open " + path);
  return read_cloud(is);
}

}  // namespace bwcloud
