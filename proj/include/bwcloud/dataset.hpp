#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bwcloud/depth_io.hpp"
#include "bwcloud/error.hpp"
#include "bwcloud/kv.hpp"

namespace bwcloud {

/// One manifest row: a single frame of one cow.
struct ManifestRecord {
  std::string cow_id;
  std::string farm_id;
  double body_weight_kg = 0.0;
  double age_years = 0.0;
  std::string frame_path;  // as written in the file
  std::string frame_id;    // file stem
};

/// Frames grouped by cow. Paths are resolved against `base_dir`.
struct DatasetManifest {
  std::string base_dir;
  std::vector<ManifestRecord> records;

  std::string resolve(const ManifestRecord& r) const {
    std::filesystem::path p(r.frame_path);
    if (p.is_absolute() || base_dir.empty()) return p.string();
    return (std::filesystem::path(base_dir) / p).string();
  }

  /// Distinct cow ids in first-appearance order.
  std::vector<std::string> cows() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& r : records)
      if (seen.insert(r.cow_id).second) out.push_back(r.cow_id);
    return out;
  }

  std::map<std::string, double> weights() const {
    std::map<std::string, double> out;
    for (const auto& r : records) out[r.cow_id] = r.body_weight_kg;
    return out;
  }

  std::set<std::string> farms() const {
    std::set<std::string> out;
    for (const auto& r : records) out.insert(r.farm_id);
    return out;
  }
};

inline constexpr const char* kManifestHeader = "cow_id,farm_id,body_weight_kg,age_years,frame_path";

/// Parses manifest text. Checks field counts, positive weights, one weight and
/// farm per cow, and (when `check_files`) that every frame file exists.
inline DatasetManifest parse_manifest(std::string_view text, const std::string& base_dir, const std::string& origin,
                                      bool check_files = true) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  std::map<std::string, std::pair<std::string, double>> per_cow;
  std::set<std::string> frames;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto where = origin + " line " + std::to_string(line_no);
    if (!header) {
      if (std::string(trim(line)) != kManifestHeader) fail(ErrorKind::manifest, where + ": expected header '" + kManifestHeader + "'");
      header = true;
      continue;
    }
    auto f = split(line, ',');
    if (f.size() != 5) fail(ErrorKind::manifest, where + ": expected 5 fields, got " + std::to_string(f.size()));
    for (auto& s : f) s = std::string(trim(s));
    ManifestRecord r;
    r.cow_id = f[0];
    r.farm_id = f[1];
    r.body_weight_kg = parse_double(f[2], where + " body_weight_kg");
    r.age_years = parse_double(f[3], where + " age_years");
    r.frame_path = f[4];
    r.frame_id = std::filesystem::path(r.frame_path).stem().string();
    if (r.cow_id.empty() || r.farm_id.empty() || r.frame_path.empty()) fail(ErrorKind::manifest, where + ": empty identifier");
    if (!(r.body_weight_kg > 0.0)) fail(ErrorKind::manifest, where + ": body weight must be positive");
    auto [it, fresh] = per_cow.try_emplace(r.cow_id, r.farm_id, r.body_weight_kg);
    if (!fresh && (it->second.first != r.farm_id || it->second.second != r.body_weight_kg))
      fail(ErrorKind::manifest, where + ": cow " + r.cow_id + " has conflicting farm or weight");
    if (!frames.insert(r.frame_path).second) fail(ErrorKind::manifest, where + ": duplicate frame " + r.frame_path);
    m.records.push_back(std::move(r));
  }
  if (!header) fail(ErrorKind::empty_input, origin + ": empty manifest");
  if (m.records.empty()) fail(ErrorKind::empty_input, origin + ": manifest lists no frames");
  if (check_files)
    for (const auto& r : m.records)
      if (!std::filesystem::exists(m.resolve(r))) fail(ErrorKind::manifest, origin + ": missing frame file " + m.resolve(r));
  return m;
}

inline DatasetManifest load_manifest(const std::string& path, bool check_files = true) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::io, "cannot open manifest " + path);
  std::stringstream buffer;
  buffer << is.rdbuf();
  return parse_manifest(buffer.str(), std::filesystem::path(path).parent_path().string(), path, check_files);
}

inline std::string manifest_text(const DatasetManifest& m) {
  std::string out = std::string(kManifestHeader) + "\n";
  char buf[64];
  for (const auto& r : m.records) {
    std::snprintf(buf, sizeof buf, "%.3f,%.2f", r.body_weight_kg, r.age_years);
    out += r.cow_id + "," + r.farm_id + "," + buf + "," + r.frame_path + "\n";
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot write " + path);
  os << text;
  if (!os) fail(ErrorKind::io, "write failed for " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open " + path);
  std::stringstream buffer;
  buffer << is.rdbuf();
  return buffer.str();
}

}  // namespace bwcloud
