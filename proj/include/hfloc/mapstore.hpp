#pragma once

// Sparse 3D map model: posed database images, triangulated points with
// tracks, and the image/point covisibility both directions. Everything is a
// plain value type; construction happens in map_build.hpp, persistence in
// map_io.hpp.

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hfloc/error.hpp"
#include "hfloc/features.hpp"
#include "hfloc/geometry.hpp"
#include "hfloc/retrieval.hpp"

namespace hfloc {

constexpr uint32_t kMapFormatVersion = 1;

struct DbImage {
  std::string image_id;
  Camera camera;
  Pose pose;  // world-to-camera
  LocalFeatureSet features;
  // keypoint index -> point id; ordered so iteration is deterministic.
  std::map<uint32_t, uint64_t> observations;
};

struct TrackElement {
  std::string image_id;
  uint32_t keypoint_idx = 0;

  bool operator==(const TrackElement&) const = default;
};

struct Point3D {
  uint64_t point_id = 0;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  std::vector<TrackElement> track;
  Eigen::VectorXf mean_descriptor;  // unit norm
};

struct SparseMap {
  uint32_t format_version = kMapFormatVersion;
  std::string metadata;  // free-form frame/scale annotation
  std::vector<DbImage> images;  // sorted by image_id
  std::vector<Point3D> points;  // sorted by point_id
  std::optional<PcaModel> pca;

  const DbImage* find_image(const std::string& id) const {
    auto it = std::lower_bound(
        images.begin(), images.end(), id,
        [](const DbImage& im, const std::string& key) { return im.image_id < key; });
    if (it == images.end() || it->image_id != id) return nullptr;
    return &*it;
  }

  const Point3D* find_point(uint64_t id) const {
    auto it = std::lower_bound(
        points.begin(), points.end(), id,
        [](const Point3D& p, uint64_t key) { return p.point_id < key; });
    if (it == points.end() || it->point_id != id) return nullptr;
    return &*it;
  }

  // Referential integrity: every observation has a matching track entry and
  // vice versa. Load paths call this and surface failures as CorruptFile.
  bool consistent() const {
    for (const Point3D& p : points) {
      for (const TrackElement& te : p.track) {
        const DbImage* im = find_image(te.image_id);
        if (!im) return false;
        auto it = im->observations.find(te.keypoint_idx);
        if (it == im->observations.end() || it->second != p.point_id) return false;
        if (te.keypoint_idx >= im->features.keypoints.size()) return false;
      }
    }
    size_t n_obs = 0;
    for (const DbImage& im : images) {
      for (const auto& [kp_idx, point_id] : im.observations) {
        const Point3D* p = find_point(point_id);
        if (!p) return false;
        if (kp_idx >= im.features.keypoints.size()) return false;
        ++n_obs;
      }
    }
    size_t n_track = 0;
    for (const Point3D& p : points) n_track += p.track.size();
    return n_obs == n_track;
  }
};

struct MapStats {
  size_t num_points = 0;
  double keypoints_per_image = 0;
  double matched_keypoint_ratio = 0;
  double mean_track_length = 0;
};

inline MapStats map_stats(const SparseMap& map) {
  if (map.images.empty()) throw_error(ErrorCode::kEmptyMap, "map has no images");
  MapStats s;
  s.num_points = map.points.size();
  size_t total_kps = 0, matched_kps = 0;
  for (const DbImage& im : map.images) {
    total_kps += im.features.keypoints.size();
    matched_kps += im.observations.size();
  }
  s.keypoints_per_image = double(total_kps) / double(map.images.size());
  s.matched_keypoint_ratio = total_kps == 0 ? 0.0 : double(matched_kps) / double(total_kps);
  size_t track_sum = 0;
  for (const Point3D& p : map.points) track_sum += p.track.size();
  s.mean_track_length = map.points.empty() ? 0.0 : double(track_sum) / double(map.points.size());
  return s;
}

// A retrieval cluster: prior frames connected through shared points, plus
// the union of the points they observe.
struct Place {
  std::vector<std::string> image_ids;  // sorted
  std::vector<uint64_t> point_ids;     // sorted
  double total_score = 0;
};

// Groups prior frames into connected components, where two frames are
// adjacent when they co-observe at least min_shared_points 3D points.
// Places come back ordered by descending total retrieval score (ties by
// smallest member image id) so the localizer can try the most promising
// cluster first.
inline std::vector<Place> covisibility_places(
    const SparseMap& map,
    const std::vector<std::pair<std::string, double>>& prior_frames,
    int min_shared_points = 1) {
  // Dedup while keeping the best score per frame.
  std::map<std::string, double> score;
  for (const auto& [id, s] : prior_frames) {
    auto [it, inserted] = score.emplace(id, s);
    if (!inserted) it->second = std::max(it->second, s);
  }

  std::vector<std::string> ids;
  std::vector<std::vector<uint64_t>> observed;  // sorted point ids per frame
  for (const auto& [id, s] : score) {
    const DbImage* im = map.find_image(id);
    if (!im) throw_error(ErrorCode::kUnknownImage, "prior frame " + id + " not in map");
    std::vector<uint64_t> pts;
    pts.reserve(im->observations.size());
    for (const auto& [kp, pid] : im->observations) pts.push_back(pid);
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    ids.push_back(id);
    observed.push_back(std::move(pts));
  }

  const size_t n = ids.size();
  std::vector<size_t> parent(n);
  for (size_t i = 0; i < n; ++i) parent[i] = i;
  std::function<size_t(size_t)> find = [&](size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };

  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      // Count shared points by merging the sorted lists.
      size_t a = 0, b = 0;
      int shared = 0;
      while (a < observed[i].size() && b < observed[j].size() && shared < min_shared_points) {
        if (observed[i][a] < observed[j][b]) ++a;
        else if (observed[i][a] > observed[j][b]) ++b;
        else { ++shared; ++a; ++b; }
      }
      if (shared >= min_shared_points) parent[find(i)] = find(j);
    }
  }

  std::map<size_t, Place> groups;
  for (size_t i = 0; i < n; ++i) {
    Place& pl = groups[find(i)];
    pl.image_ids.push_back(ids[i]);
    pl.total_score += score[ids[i]];
    pl.point_ids.insert(pl.point_ids.end(), observed[i].begin(), observed[i].end());
  }

  std::vector<Place> places;
  for (auto& [root, pl] : groups) {
    std::sort(pl.image_ids.begin(), pl.image_ids.end());
    std::sort(pl.point_ids.begin(), pl.point_ids.end());
    pl.point_ids.erase(std::unique(pl.point_ids.begin(), pl.point_ids.end()),
                       pl.point_ids.end());
    places.push_back(std::move(pl));
  }
  std::sort(places.begin(), places.end(), [](const Place& a, const Place& b) {
    if (a.total_score != b.total_score) return a.total_score > b.total_score;
    return a.image_ids.front() < b.image_ids.front();
  });
  return places;
}

}  // namespace hfloc
