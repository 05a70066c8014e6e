#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bwcloud/binary_io.hpp"
#include "bwcloud/error.hpp"
#include "bwcloud/kv.hpp"
#include "bwcloud/pointcloud.hpp"

namespace bwcloud {

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

/// Per-farm depth-camera calibration. Distances in millimeters, intrinsics in
/// pixels.
struct CameraProfile {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;
  double h_camera = 0.0;
  std::string farm_id;

  void validate() const {
    const std::string who = "camera profile '" + farm_id + "'";
    if (!(fx > 0.0) || !(fy > 0.0)) fail(ErrorKind::calibration, who + ": focal lengths must be positive");
    if (width <= 0 || height <= 0) fail(ErrorKind::calibration, who + ": resolution must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
      fail(ErrorKind::calibration, who + ": principal point outside the image");
    if (!(h_camera > 0.0)) fail(ErrorKind::calibration, who + ": camera height must be positive");
  }

  bool operator==(const CameraProfile&) const = default;
};

// Installed calibrations of the three study farms; heights converted from
// meters to millimeters.
inline CameraProfile large_farm_camera() { return {388.48, 388.48, 326.86, 240.69, 640, 480, 2520.0, "large"}; }
inline CameraProfile medium_farm_camera() { return {386.19, 385.79, 326.81, 246.99, 640, 480, 3050.0, "medium"}; }
inline CameraProfile small_farm_camera() { return {385.04, 384.57, 329.22, 241.01, 640, 480, 3000.0, "small"}; }

inline CameraProfile parse_camera_profile(std::string_view text, const std::string& origin) {
  const auto kv = KeyValues::parse(text, origin);
  CameraProfile p;
  p.fx = kv.number("fx");
  p.fy = kv.number("fy");
  p.cx = kv.number("cx");
  p.cy = kv.number("cy");
  p.width = static_cast<int>(kv.integer("width"));
  p.height = static_cast<int>(kv.integer("height"));
  p.h_camera = kv.number("h_camera_mm");
  p.farm_id = kv.get("farm_id");
  p.validate();
  return p;
}

inline CameraProfile load_camera_profile(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::io, "cannot open " + path);
  std::stringstream buffer;
  buffer << is.rdbuf();
  return parse_camera_profile(buffer.str(), path);
}

inline std::string camera_profile_text(const CameraProfile& p) {
  std::string out;
  out += "farm_id = " + p.farm_id + "\n";
  out += "fx = " + format_double(p.fx) + "\n";
  out += "fy = " + format_double(p.fy) + "\n";
  out += "cx = " + format_double(p.cx) + "\n";
  out += "cy = " + format_double(p.cy) + "\n";
  out += "width = " + std::to_string(p.width) + "\n";
  out += "height = " + std::to_string(p.height) + "\n";
  out += "h_camera_mm = " + format_double(p.h_camera) + "\n";
  return out;
}

/// One depth capture. Missing cells are NaN.
struct DepthFrame {
  int width = 0;
  int height = 0;
  std::vector<double> depth;  // row-major, row = image y
  FrameId id;

  double at(int x, int y) const { return depth[static_cast<std::size_t>(y) * width + x]; }
  double& at(int x, int y) { return depth[static_cast<std::size_t>(y) * width + x]; }
  static bool missing(double d) { return std::isnan(d); }
};

inline DepthFrame parse_depth_csv(std::string_view text, const FrameId& id) {
  DepthFrame frame;
  frame.id = id;
  auto lines = split(text, '\n');
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) fail(ErrorKind::empty_input, "depth csv for " + id.str() + " has no rows");

  std::size_t columns = 0;
  for (std::size_t row = 0; row < lines.size(); ++row) {
    std::string_view line = lines[row];
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::size_t count = 0;
    std::size_t start = 0;
    while (true) {
      const auto pos = line.find(',', start);
      auto cell = trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
      double value = std::numeric_limits<double>::quiet_NaN();
      if (!cell.empty()) {
        const auto* end = cell.data() + cell.size();
        auto [ptr, ec] = std::from_chars(cell.data(), end, value);
        if (ec != std::errc() || ptr != end)
          fail(ErrorKind::format, id.str() + " line " + std::to_string(row + 1) + ": bad cell '" + std::string(cell) + "'");
        if (!std::isfinite(value)) value = std::numeric_limits<double>::quiet_NaN();
      }
      frame.depth.push_back(value);
      ++count;
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
    if (row == 0) {
      columns = count;
    } else if (count != columns) {
      fail(ErrorKind::format, id.str() + " line " + std::to_string(row + 1) + ": expected " + std::to_string(columns) +
                                  " cells, found " + std::to_string(count));
    }
  }
  frame.width = static_cast<int>(columns);
  frame.height = static_cast<int>(lines.size());
  return frame;
}

inline DepthFrame load_depth_csv(const std::string& path, const FrameId& id) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open " + path);
  std::stringstream buffer;
  buffer << is.rdbuf();
  return parse_depth_csv(buffer.str(), id);
}

/// Writes a frame in the depth-CSV layout; missing cells become empty fields.
inline std::string depth_csv_text(const DepthFrame& frame, int decimals = 2) {
  std::string out;
  out.reserve(static_cast<std::size_t>(frame.width) * frame.height * 8);
  char buf[64];
  for (int y = 0; y < frame.height; ++y) {
    for (int x = 0; x < frame.width; ++x) {
      if (x) out += ',';
      const double d = frame.at(x, y);
      if (DepthFrame::missing(d)) continue;
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), d, std::chars_format::fixed, decimals);
      out.append(buf, ptr);
    }
    out += '\n';
  }
  return out;
}

inline DepthFrame clip_depth(const DepthFrame& frame, double lo = 0.0, double hi = 10000.0) {
  if (!(lo < hi)) fail(ErrorKind::parameter, "clip_depth requires lo < hi");
  DepthFrame out = frame;
  for (auto& d : out.depth)
    if (!DepthFrame::missing(d)) d = std::min(std::max(d, lo), hi);
  return out;
}

/// 224x224x3 tensor for external image backbones, stored HWC.
struct ImageTensor {
  static constexpr int kHeight = 224;
  static constexpr int kWidth = 224;
  static constexpr int kChannels = 3;
  std::vector<float> values = std::vector<float>(static_cast<std::size_t>(kHeight) * kWidth * kChannels, 0.0f);

  float at(int y, int x, int c) const { return values[(static_cast<std::size_t>(y) * kWidth + x) * kChannels + c]; }
};

inline constexpr double kDepthClipMax = 10000.0;

/// Bilinear sample with corner-aligned coordinates: output pixel i maps to
/// source coordinate i * (src - 1) / (dst - 1).
inline ImageTensor export_image_tensor(const DepthFrame& frame) {
  if (frame.width <= 0 || frame.height <= 0) fail(ErrorKind::empty_input, "image export of empty frame " + frame.id.str());
  std::vector<double> scaled(frame.depth.size());
  for (std::size_t i = 0; i < frame.depth.size(); ++i) {
    const double d = frame.depth[i];
    if (DepthFrame::missing(d)) {
      scaled[i] = 0.0;
      continue;
    }
    if (d > kDepthClipMax || d < 0.0)
      fail(ErrorKind::contract, "unclipped depth " + format_double(d) + " in " + frame.id.str() + "; apply clip_depth first");
    scaled[i] = d / kDepthClipMax;
  }

  auto source_coord = [](int i, int dst, int src) {
    if (src == 1 || dst == 1) return 0.0;
    return static_cast<double>(i) * (src - 1) / (dst - 1);
  };

  ImageTensor out;
  for (int y = 0; y < ImageTensor::kHeight; ++y) {
    const double sy = source_coord(y, ImageTensor::kHeight, frame.height);
    const int y0 = std::min(static_cast<int>(sy), frame.height - 1);
    const int y1 = std::min(y0 + 1, frame.height - 1);
    const double wy = sy - y0;
    for (int x = 0; x < ImageTensor::kWidth; ++x) {
      const double sx = source_coord(x, ImageTensor::kWidth, frame.width);
      const int x0 = std::min(static_cast<int>(sx), frame.width - 1);
      const int x1 = std::min(x0 + 1, frame.width - 1);
      const double wx = sx - x0;
      auto px = [&](int xx, int yy) { return scaled[static_cast<std::size_t>(yy) * frame.width + xx]; };
      const double top = px(x0, y0) * (1.0 - wx) + px(x1, y0) * wx;
      const double bottom = px(x0, y1) * (1.0 - wx) + px(x1, y1) * wx;
      const double v = std::clamp(top * (1.0 - wy) + bottom * wy, 0.0, 1.0);
      for (int c = 0; c < ImageTensor::kChannels; ++c)
        out.values[(static_cast<std::size_t>(y) * ImageTensor::kWidth + x) * ImageTensor::kChannels + c] = static_cast<float>(v);
    }
  }
  return out;
}

// 16-byte header: "BWIT", u32 version, u16 height, u16 width, u16 channels,
// u16 reserved; then H*W*C little-endian f32.
inline constexpr std::uint32_t kImageFormatVersion = 1;

inline void write_image_tensor(std::ostream& os, const ImageTensor& t) {
  os.write("BWIT", 4);
  put_u32(os, kImageFormatVersion);
  put_u16(os, ImageTensor::kHeight);
  put_u16(os, ImageTensor::kWidth);
  put_u16(os, ImageTensor::kChannels);
  put_u16(os, 0);
  for (float v : t.values) put_f32(os, v);
}

inline ImageTensor read_image_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "BWIT", 4) != 0) fail(ErrorKind::format, "not an image-tensor file (bad magic)");
  if (get_u32(is) != kImageFormatVersion) fail(ErrorKind::format, "unsupported image-tensor version");
  const auto h = get_u16(is), w = get_u16(is), c = get_u16(is);
  get_u16(is);
  if (h != ImageTensor::kHeight || w != ImageTensor::kWidth || c != ImageTensor::kChannels)
    fail(ErrorKind::format, "unexpected image-tensor shape");
  ImageTensor t;
  for (auto& v : t.values) v = get_f32(is);
  return t;
}

/// Pixel + depth -> 3D point. Height above the floor is Z = h_camera - D and
/// the normalized pixel ray is scaled by Z. Missing pixels and pixels at or
/// below the floor (D >= h_camera) emit nothing. Row-major output order.
inline PointCloud deproject(const DepthFrame& frame, const CameraProfile& profile) {
  profile.validate();
  if (frame.width != profile.width || frame.height != profile.height)
    fail(ErrorKind::calibration, "frame " + frame.id.str() + " is " + std::to_string(frame.width) + "x" + std::to_string(frame.height) +
                                     " but camera '" + profile.farm_id + "' is " + std::to_string(profile.width) + "x" +
                                     std::to_string(profile.height));
  PointCloud cloud;
  cloud.id = frame.id;
  cloud.stage = CloudStage::raw;
  for (int y = 0; y < frame.height; ++y) {
    const double yn = (y - profile.cy) / profile.fy;
    for (int x = 0; x < frame.width; ++x) {
      const double d = frame.at(x, y);
      if (DepthFrame::missing(d) || d >= profile.h_camera) continue;
      const double z = profile.h_camera - d;
      const double xn = (x - profile.cx) / profile.fx;
      cloud.points.push_back({z * xn, z * yn, z});
    }
  }
  return cloud;
}

/// deproject() for a single fractional pixel; used by tests and the renderer.
inline Point3 deproject_pixel(double x, double y, double depth, const CameraProfile& profile) {
  const double z = profile.h_camera - depth;
  return {z * (x - profile.cx) / profile.fx, z * (y - profile.cy) / profile.fy, z};
}

}  // namespace bwcloud
