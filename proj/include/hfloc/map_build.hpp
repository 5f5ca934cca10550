#pragma once

// Sparse map construction from posed feature sets: two-way ratio matching,
// epipolar verification against the known poses, track assembly by
// union-find, and two-view triangulation with an all-views reprojection
// gate. Deterministic: identical inputs give identical maps.

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hfloc/error.hpp"
#include "hfloc/features.hpp"
#include "hfloc/geometry.hpp"
#include "hfloc/mapstore.hpp"
#include "hfloc/matching.hpp"

namespace hfloc {

struct MapBuildConfig {
  double ratio = 0.9;
  double epipolar_px = 4.0;           // symmetric epipolar gate for matches
  double max_reprojection_px = 4.0;   // final all-views gate for points
  double min_triangulation_angle_deg = 1.0;
  int min_track_length = 2;

  void validate() const {
    if (!(ratio > 0 && ratio <= 1))
      throw_error(ErrorCode::kInvalidArgument, "ratio must be in (0, 1]");
    if (!(epipolar_px > 0) || !(max_reprojection_px > 0))
      throw_error(ErrorCode::kInvalidArgument, "pixel gates must be positive");
    if (min_track_length < 2)
      throw_error(ErrorCode::kInvalidArgument, "min_track_length must be >= 2");
  }
};

namespace detail {

struct UnionFind {
  std::vector<uint32_t> parent;

  explicit UnionFind(size_t n) : parent(n) {
    std::iota(parent.begin(), parent.end(), 0u);
  }
  uint32_t find(uint32_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(uint32_t a, uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) parent[b] = a; else parent[a] = b;  // smallest id wins: stable roots
  }
};

// Fundamental matrix mapping image a to lines in image b, from known poses.
inline Eigen::Matrix3d fundamental_from_poses(const Pose& pose_a, const Pose& pose_b,
                                              const Camera& cam_a, const Camera& cam_b) {
  Pose t_ba = pose_b * pose_a.inverse();
  Eigen::Matrix3d r = t_ba.rotation();
  Eigen::Vector3d t = t_ba.t;
  Eigen::Matrix3d tx;
  tx << 0, -t.z(), t.y(), t.z(), 0, -t.x(), -t.y(), t.x(), 0;
  Eigen::Matrix3d ka, kb;
  ka << cam_a.fx, 0, cam_a.cx, 0, cam_a.fy, cam_a.cy, 0, 0, 1;
  kb << cam_b.fx, 0, cam_b.cx, 0, cam_b.fy, cam_b.cy, 0, 0, 1;
  return kb.inverse().transpose() * tx * r * ka.inverse();
}

// The epipolar test runs on undistorted pixels so it stays a straight-line
// criterion under k1 distortion.
inline Eigen::Vector2d undistorted_pixel(const Camera& cam, const Eigen::Vector2d& px) {
  Eigen::Vector2d xn = cam.to_normalized(px);
  return Eigen::Vector2d(cam.fx * xn.x() + cam.cx, cam.fy * xn.y() + cam.cy);
}

inline double symmetric_epipolar_px(const Eigen::Matrix3d& f,
                                    const Eigen::Vector2d& px_a,
                                    const Eigen::Vector2d& px_b) {
  Eigen::Vector3d xa = px_a.homogeneous();
  Eigen::Vector3d xb = px_b.homogeneous();
  double num = std::abs(xb.dot(f * xa));
  Eigen::Vector3d lb = f * xa;
  Eigen::Vector3d la = f.transpose() * xb;
  double nb = lb.head<2>().norm();
  double na = la.head<2>().norm();
  if (nb < 1e-12 || na < 1e-12) return std::numeric_limits<double>::infinity();
  return std::max(num / nb, num / na);
}

}  // namespace detail

// Builds a sparse point map from database feature sets with known poses and
// cameras. `pairs` lists the image pairs to match (by image id); every
// feature set needs a pose and a camera entry. Points that fail the
// triangulation-angle or reprojection gates are dropped whole rather than
// kept with partial tracks.
inline SparseMap build_map(const std::vector<LocalFeatureSet>& features,
                           const std::map<std::string, Pose>& poses,
                           const std::map<std::string, Camera>& cameras,
                           const std::vector<std::pair<std::string, std::string>>& pairs,
                           const MapBuildConfig& config = {}) {
  config.validate();
  if (features.empty())
    throw_error(ErrorCode::kMissingFeatures, "no feature sets given");

  SparseMap map;
  map.images.reserve(features.size());
  for (const LocalFeatureSet& f : features) {
    auto pit = poses.find(f.image_id);
    if (pit == poses.end())
      throw_error(ErrorCode::kMissingPose, "no pose for image " + f.image_id);
    auto cit = cameras.find(f.image_id);
    if (cit == cameras.end())
      throw_error(ErrorCode::kMissingCamera, "no camera for image " + f.image_id);
    DbImage img;
    img.image_id = f.image_id;
    img.camera = cit->second;
    img.pose = pit->second;
    img.features = f;
    map.images.push_back(std::move(img));
  }
  std::sort(map.images.begin(), map.images.end(),
            [](const DbImage& a, const DbImage& b) { return a.image_id < b.image_id; });
  for (size_t i = 1; i < map.images.size(); ++i)
    if (map.images[i].image_id == map.images[i - 1].image_id)
      throw_error(ErrorCode::kInvalidArgument,
                  "duplicate image id " + map.images[i].image_id);

  std::map<std::string, uint32_t> index_of;
  std::vector<size_t> offset(map.images.size() + 1, 0);
  for (size_t i = 0; i < map.images.size(); ++i) {
    index_of[map.images[i].image_id] = uint32_t(i);
    offset[i + 1] = offset[i] + map.images[i].features.keypoints.size();
  }

  // Two-way ratio matching, mutual filter, then the epipolar gate.
  detail::UnionFind uf(offset.back());
  for (const auto& [id_a, id_b] : pairs) {
    auto ia_it = index_of.find(id_a);
    auto ib_it = index_of.find(id_b);
    if (ia_it == index_of.end() || ib_it == index_of.end())
      throw_error(ErrorCode::kMissingFeatures,
                  "pair references unknown image " +
                      (ia_it == index_of.end() ? id_a : id_b));
    if (id_a == id_b) continue;
    const DbImage& a = map.images[ia_it->second];
    const DbImage& b = map.images[ib_it->second];
    if (a.features.keypoints.empty() || b.features.keypoints.empty()) continue;

    MatchSet ab = match_ratio(a.features.descriptors, b.features.descriptors,
                              nullptr, config.ratio);
    MatchSet ba = match_ratio(b.features.descriptors, a.features.descriptors,
                              nullptr, config.ratio);
    std::vector<uint32_t> back(b.features.keypoints.size(), UINT32_MAX);
    for (const Match& m : ba.matches) back[m.query_idx] = uint32_t(m.target_id);

    Eigen::Matrix3d f = detail::fundamental_from_poses(a.pose, b.pose, a.camera, b.camera);
    for (const Match& m : ab.matches) {
      uint32_t kp_b = uint32_t(m.target_id);
      if (back[kp_b] != m.query_idx) continue;  // not mutual
      const Keypoint& ka = a.features.keypoints[m.query_idx];
      const Keypoint& kb = b.features.keypoints[kp_b];
      Eigen::Vector2d ua = detail::undistorted_pixel(a.camera, {ka.x, ka.y});
      Eigen::Vector2d ub = detail::undistorted_pixel(b.camera, {kb.x, kb.y});
      if (detail::symmetric_epipolar_px(f, ua, ub) > config.epipolar_px) continue;
      uf.unite(uint32_t(offset[ia_it->second] + m.query_idx),
               uint32_t(offset[ib_it->second] + kp_b));
    }
  }

  // Group keypoints into tracks, in ascending order of first member.
  std::map<uint32_t, std::vector<uint32_t>> components;
  for (uint32_t gid = 0; gid < offset.back(); ++gid)
    components[uf.find(gid)].push_back(gid);

  auto image_of = [&](uint32_t gid) {
    return uint32_t(std::upper_bound(offset.begin(), offset.end(), gid) -
                    offset.begin() - 1);
  };
  auto pixel_of = [&](uint32_t img, uint32_t kp) {
    const Keypoint& k = map.images[img].features.keypoints[kp];
    return Eigen::Vector2d(k.x, k.y);
  };
  auto triangulate_pair = [&](uint32_t img_i, uint32_t kp_i, uint32_t img_j,
                              uint32_t kp_j) {
    return triangulate_two_view(map.images[img_i].pose, map.images[img_j].pose,
                                map.images[img_i].camera, map.images[img_j].camera,
                                pixel_of(img_i, kp_i), pixel_of(img_j, kp_j),
                                config.min_triangulation_angle_deg);
  };

  struct Obs {
    uint32_t image;
    uint32_t kp;
  };
  uint64_t next_point_id = 0;
  for (const auto& [root, gids] : components) {
    (void)root;
    if (gids.size() < 2) continue;
    std::vector<Obs> obs;
    obs.reserve(gids.size());
    for (uint32_t gid : gids) {
      uint32_t img = image_of(gid);
      obs.push_back(Obs{img, uint32_t(gid - offset[img])});
    }

    // Rough position from the first pair of distinct images that
    // triangulates cleanly; used for conflict pruning and pair scoring.
    std::optional<Eigen::Vector3d> rough;
    for (size_t i = 0; i < obs.size() && !rough; ++i)
      for (size_t j = i + 1; j < obs.size() && !rough; ++j) {
        if (obs[i].image == obs[j].image) continue;
        Triangulation t = triangulate_pair(obs[i].image, obs[i].kp, obs[j].image, obs[j].kp);
        if (t.ok()) rough = t.point;
      }
    if (!rough) continue;

    // A track may reach the same image twice through transitive matches;
    // keep the observation that reprojects best.
    {
      std::map<uint32_t, Obs> best_per_image;
      for (const Obs& o : obs) {
        auto it = best_per_image.find(o.image);
        if (it == best_per_image.end()) {
          best_per_image.emplace(o.image, o);
          continue;
        }
        auto err = [&](const Obs& c) {
          auto px = project(map.images[c.image].pose, map.images[c.image].camera, *rough);
          return px ? (*px - pixel_of(c.image, c.kp)).norm()
                    : std::numeric_limits<double>::infinity();
        };
        if (err(o) < err(it->second)) it->second = o;
      }
      obs.clear();
      for (const auto& [img, o] : best_per_image) obs.push_back(o);
    }
    if (int(obs.size()) < config.min_track_length) continue;

    // Triangulate from the pair whose rays meet closest to a right angle.
    size_t best_i = 0, best_j = 1;
    double best_cos = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < obs.size(); ++i)
      for (size_t j = i + 1; j < obs.size(); ++j) {
        Eigen::Vector3d di = (map.images[obs[i].image].pose.center() - *rough).normalized();
        Eigen::Vector3d dj = (map.images[obs[j].image].pose.center() - *rough).normalized();
        double c = std::abs(di.dot(dj));
        if (c < best_cos) {
          best_cos = c;
          best_i = i;
          best_j = j;
        }
      }
    Triangulation tri = triangulate_pair(obs[best_i].image, obs[best_i].kp,
                                         obs[best_j].image, obs[best_j].kp);
    if (!tri.ok()) continue;

    // Strict gate: the whole track must reproject, or the point goes.
    bool all_ok = true;
    for (const Obs& o : obs) {
      auto px = project(map.images[o.image].pose, map.images[o.image].camera, tri.point);
      if (!px || (*px - pixel_of(o.image, o.kp)).norm() > config.max_reprojection_px) {
        all_ok = false;
        break;
      }
    }
    if (!all_ok) continue;

    Point3D point;
    point.point_id = next_point_id++;
    point.position = tri.point;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(map.images[obs[0].image].features.descriptors.cols());
    for (const Obs& o : obs) {
      point.track.push_back(TrackElement{map.images[o.image].image_id, o.kp});
      mean += map.images[o.image].features.descriptors.row(o.kp).cast<double>().transpose();
    }
    double norm = mean.norm();
    point.mean_descriptor =
        norm < 1e-12
            ? Eigen::VectorXf(map.images[obs[0].image].features.descriptors.row(obs[0].kp).transpose())
            : Eigen::VectorXf((mean / norm).cast<float>());
    for (const Obs& o : obs)
      map.images[o.image].observations[o.kp] = point.point_id;
    map.points.push_back(std::move(point));
  }
  return map;
}

}  // namespace hfloc
