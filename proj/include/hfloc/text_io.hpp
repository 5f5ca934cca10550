#pragma once

// Text list formats shared by the tools:
//   poses:   image_id qw qx qy qz tx ty tz      (world-to-camera)
//   cameras: image_id PINHOLE w h fx fy cx cy [k1]
// Blank lines and lines starting with '#' are skipped. Image ids may not
// repeat within one file.

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hfloc/error.hpp"
#include "hfloc/geometry.hpp"

namespace hfloc {

namespace detail {

inline std::vector<std::string> text_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw_error(ErrorCode::kIoError, "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    lines.push_back(line);
  }
  return lines;
}

inline double parse_double(const std::string& tok, const std::string& path) {
  size_t used = 0;
  double v;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    throw_error(ErrorCode::kParseError, path + ": bad number '" + tok + "'");
  }
  if (used != tok.size())
    throw_error(ErrorCode::kParseError, path + ": bad number '" + tok + "'");
  return v;
}

// Shortest digits that round-trip a double exactly.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::map<std::string, Pose> read_pose_list(const std::string& path) {
  std::map<std::string, Pose> poses;
  for (const std::string& line : detail::text_lines(path)) {
    std::istringstream ss(line);
    std::string id;
    std::vector<std::string> toks;
    ss >> id;
    for (std::string t; ss >> t;) toks.push_back(t);
    if (id.empty() || toks.size() != 7)
      throw_error(ErrorCode::kParseError, path + ": expected 'id qw qx qy qz tx ty tz'");
    double v[7];
    for (int i = 0; i < 7; ++i) v[i] = detail::parse_double(toks[size_t(i)], path);
    Pose p(Eigen::Quaterniond(v[0], v[1], v[2], v[3]), Eigen::Vector3d(v[4], v[5], v[6]));
    if (!poses.emplace(id, p).second)
      throw_error(ErrorCode::kParseError, path + ": duplicate image id " + id);
  }
  return poses;
}

inline void write_pose_list(const std::string& path,
                            const std::vector<std::pair<std::string, Pose>>& poses) {
  std::ofstream out(path);
  if (!out) throw_error(ErrorCode::kIoError, "cannot write " + path);
  for (const auto& [id, p] : poses) {
    out << id;
    for (double v : {p.q.w(), p.q.x(), p.q.y(), p.q.z(), p.t.x(), p.t.y(), p.t.z()})
      out << ' ' << detail::fmt_double(v);
    out << '\n';
  }
  if (!out) throw_error(ErrorCode::kIoError, "write failed for " + path);
}

// Camera grammar without the leading image id, reused inside pair files.
inline Camera parse_camera_spec(const std::vector<std::string>& toks,
                                const std::string& context) {
  if (toks.empty() || toks[0] != "PINHOLE")
    throw_error(ErrorCode::kParseError, context + ": camera model must be PINHOLE");
  if (toks.size() != 7 && toks.size() != 8)
    throw_error(ErrorCode::kParseError,
                context + ": expected 'PINHOLE w h fx fy cx cy [k1]'");
  double v[7] = {0, 0, 0, 0, 0, 0, 0};
  for (size_t i = 1; i < toks.size(); ++i)
    v[i - 1] = detail::parse_double(toks[i], context);
  double w = v[0], h = v[1];
  if (w < 1 || h < 1 || w != std::floor(w) || h != std::floor(h))
    throw_error(ErrorCode::kParseError, context + ": image size must be whole pixels");
  return Camera(v[2], v[3], v[4], v[5], int(w), int(h), v[6]);
}

inline Camera parse_camera_spec(const std::string& spec, const std::string& context) {
  std::istringstream ss(spec);
  std::vector<std::string> toks;
  for (std::string t; ss >> t;) toks.push_back(t);
  return parse_camera_spec(toks, context);
}

inline std::map<std::string, Camera> read_camera_list(const std::string& path) {
  std::map<std::string, Camera> cameras;
  for (const std::string& line : detail::text_lines(path)) {
    std::istringstream ss(line);
    std::string id;
    std::vector<std::string> toks;
    ss >> id;
    for (std::string t; ss >> t;) toks.push_back(t);
    if (id.empty())
      throw_error(ErrorCode::kParseError, path + ": missing image id");
    Camera cam = parse_camera_spec(toks, path);
    if (!cameras.emplace(id, cam).second)
      throw_error(ErrorCode::kParseError, path + ": duplicate image id " + id);
  }
  return cameras;
}

inline void write_camera_list(
    const std::string& path,
    const std::vector<std::pair<std::string, Camera>>& cameras) {
  std::ofstream out(path);
  if (!out) throw_error(ErrorCode::kIoError, "cannot write " + path);
  for (const auto& [id, c] : cameras) {
    out << id << " PINHOLE " << c.width << ' ' << c.height;
    for (double v : {c.fx, c.fy, c.cx, c.cy}) out << ' ' << detail::fmt_double(v);
    if (c.k1 != 0.0) out << ' ' << detail::fmt_double(c.k1);
    out << '\n';
  }
  if (!out) throw_error(ErrorCode::kIoError, "write failed for " + path);
}

// One id per line.
inline std::vector<std::string> read_id_list(const std::string& path) {
  return detail::text_lines(path);
}

inline void write_id_list(const std::string& path, const std::vector<std::string>& ids) {
  std::ofstream out(path);
  if (!out) throw_error(ErrorCode::kIoError, "cannot write " + path);
  for (const std::string& id : ids) out << id << '\n';
  if (!out) throw_error(ErrorCode::kIoError, "write failed for " + path);
}

// Image pairs, two ids per line.
inline std::vector<std::pair<std::string, std::string>> read_pair_list(
    const std::string& path) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const std::string& line : detail::text_lines(path)) {
    std::istringstream ss(line);
    std::string a, b, extra;
    ss >> a >> b;
    if (a.empty() || b.empty() || (ss >> extra))
      throw_error(ErrorCode::kParseError, path + ": expected 'id_a id_b'");
    pairs.emplace_back(a, b);
  }
  return pairs;
}

inline void write_pair_list(
    const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::ofstream out(path);
  if (!out) throw_error(ErrorCode::kIoError, "cannot write " + path);
  for (const auto& [a, b] : pairs) out << a << ' ' << b << '\n';
  if (!out) throw_error(ErrorCode::kIoError, "write failed for " + path);
}

}  // namespace hfloc
