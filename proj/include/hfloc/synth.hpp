#pragma once

// Synthetic scene generator. A box of 3D points with per-point descriptors
// is observed by a ring of cameras; rendering a view produces the same
// feature sets a real extractor would emit, plus the ground-truth
// keypoint-to-point assignment. Rendering is a pure function: the RNG
// stream is derived from the scene seed and the pose bits, so the same
// pose always renders identically.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hfloc/error.hpp"
#include "hfloc/features.hpp"
#include "hfloc/geometry.hpp"
#include "hfloc/io_util.hpp"

namespace hfloc {

struct SceneSpec {
  int num_points = 2000;
  double extent_m = 4.0;  // points fill [-extent/2, extent/2]^3
  int num_db_cameras = 20;
  int num_query_cameras = 10;
  Camera camera = Camera(500.0, 500.0, 320.0, 240.0, 640, 480);
  double pixel_noise_sigma = 0.0;
  double descriptor_noise_sigma = 0.0;
  double outlier_fraction = 0.0;  // spurious keypoints per true detection
  int descriptor_dim = 64;
  int global_dim = 256;
  uint64_t seed = 0;

  void validate() const {
    if (num_points < 1 || num_db_cameras < 1 || num_query_cameras < 0)
      throw_error(ErrorCode::kInvalidArgument, "scene counts must be positive");
    if (!(extent_m > 0))
      throw_error(ErrorCode::kInvalidArgument, "extent must be positive");
    if (descriptor_dim < 1 || global_dim < 1)
      throw_error(ErrorCode::kInvalidArgument, "descriptor dims must be positive");
    if (pixel_noise_sigma < 0 || descriptor_noise_sigma < 0)
      throw_error(ErrorCode::kInvalidArgument, "noise sigmas must be >= 0");
    if (outlier_fraction < 0 || outlier_fraction >= 1)
      throw_error(ErrorCode::kInvalidArgument, "outlier_fraction must be in [0, 1)");
  }
};

struct Scene {
  SceneSpec spec;
  std::vector<Eigen::Vector3d> points;
  std::vector<Eigen::Vector3d> normals;  // horizontal unit facings
  Eigen::MatrixXf descriptors;           // num_points x descriptor_dim, unit rows
  Eigen::MatrixXf global_contribs;       // num_points x global_dim, unit rows
  std::vector<Pose> db_poses;
  std::vector<Pose> query_poses;
};

struct RenderedView {
  LocalFeatureSet features;
  // (keypoint index, scene point index) for every non-spurious keypoint.
  std::vector<std::pair<uint32_t, uint32_t>> gt_observations;
};

inline std::string db_image_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "db_%04d", i);
  return buf;
}

inline std::string query_image_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "q_%04d", i);
  return buf;
}

// World-to-camera pose for a camera at `center` whose optical axis points at
// `target`, with image y running towards world -z (world z is up).
inline Pose look_at_pose(const Eigen::Vector3d& center, const Eigen::Vector3d& target) {
  Eigen::Vector3d forward = target - center;
  if (forward.norm() < 1e-12)
    throw_error(ErrorCode::kInvalidArgument, "look-at target coincides with center");
  forward.normalize();
  Eigen::Vector3d up(0, 0, 1);
  if (std::abs(forward.dot(up)) > 0.999) up = Eigen::Vector3d(0, 1, 0);
  Eigen::Vector3d right = forward.cross(up).normalized();
  Eigen::Vector3d down = forward.cross(right).normalized();
  Eigen::Matrix3d r_wc;
  r_wc.col(0) = right;
  r_wc.col(1) = down;
  r_wc.col(2) = forward;
  Eigen::Matrix3d r = r_wc.transpose();
  return Pose(Eigen::Quaterniond(r).normalized(), -(r * center));
}

namespace detail {

inline Eigen::MatrixXf random_unit_rows_f(std::mt19937_64& rng, int rows, int cols) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXf out(rows, cols);
  Eigen::VectorXd row(cols);
  for (int r = 0; r < rows; ++r) {
    do {
      for (int c = 0; c < cols; ++c) row(c) = gauss(rng);
    } while (row.norm() < 1e-9);
    out.row(r) = (row / row.norm()).cast<float>();
  }
  return out;
}

inline uint64_t pose_stream_seed(uint64_t scene_seed, const Pose& pose) {
  double buf[7] = {pose.q.w(), pose.q.x(), pose.q.y(), pose.q.z(),
                   pose.t.x(), pose.t.y(), pose.t.z()};
  unsigned char bytes[sizeof(buf)];
  std::memcpy(bytes, buf, sizeof(buf));
  return scene_seed ^ fnv1a64(bytes, sizeof(bytes));
}

}  // namespace detail

inline Scene make_scene(const SceneSpec& spec) {
  spec.validate();
  Scene scene;
  scene.spec = spec;
  std::mt19937_64 rng(spec.seed);

  const double half = spec.extent_m / 2.0;
  std::uniform_real_distribution<double> upos(-half, half);
  std::uniform_real_distribution<double> uangle(0.0, 2.0 * kPi);
  scene.points.reserve(spec.num_points);
  scene.normals.reserve(spec.num_points);
  for (int i = 0; i < spec.num_points; ++i) {
    scene.points.emplace_back(upos(rng), upos(rng), upos(rng));
    double phi = uangle(rng);
    scene.normals.emplace_back(std::cos(phi), std::sin(phi), 0.0);
  }

  scene.descriptors = detail::random_unit_rows_f(rng, spec.num_points, spec.descriptor_dim);
  scene.global_contribs = detail::random_unit_rows_f(rng, spec.num_points, spec.global_dim);

  // Cameras sit on a ring well outside the point box, looking inward at a
  // jittered centroid. Queries interleave between database stations.
  const double radius = 2.5 * spec.extent_m;
  std::uniform_real_distribution<double> jitter(-0.05 * spec.extent_m, 0.05 * spec.extent_m);
  auto ring_pose = [&](double angle) {
    Eigen::Vector3d center(radius * std::cos(angle), radius * std::sin(angle), jitter(rng));
    Eigen::Vector3d target(jitter(rng), jitter(rng), jitter(rng));
    return look_at_pose(center, target);
  };
  for (int i = 0; i < spec.num_db_cameras; ++i)
    scene.db_poses.push_back(ring_pose(2.0 * kPi * i / spec.num_db_cameras));
  for (int i = 0; i < spec.num_query_cameras; ++i)
    scene.query_poses.push_back(
        ring_pose(2.0 * kPi * (i + 0.5) / std::max(1, spec.num_query_cameras)));
  return scene;
}

// True iff the camera at `pose` sees scene point `idx`: inside the frustum,
// in front, and on the facing side of the point's normal.
inline bool point_visible(const Scene& scene, const Pose& pose, int idx) {
  const Eigen::Vector3d& x = scene.points[idx];
  if (scene.normals[idx].dot(pose.center() - x) <= 0) return false;
  auto px = project(pose, scene.spec.camera, x);
  return px.has_value() && scene.spec.camera.in_bounds(*px);
}

inline RenderedView render_view(const Scene& scene, const Pose& pose,
                                const std::string& image_id) {
  const SceneSpec& spec = scene.spec;
  const Camera& cam = spec.camera;
  std::mt19937_64 rng(detail::pose_stream_seed(spec.seed, pose));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uscore(0.0, 1.0);
  std::uniform_real_distribution<double> ux(0.0, cam.width - 1.0);
  std::uniform_real_distribution<double> uy(0.0, cam.height - 1.0);

  std::vector<int> visible;
  for (int i = 0; i < spec.num_points; ++i)
    if (point_visible(scene, pose, i)) visible.push_back(i);
  if (visible.empty())
    throw_error(ErrorCode::kNoVisiblePoints, "no scene points visible from pose");

  RenderedView view;
  view.features.image_id = image_id;
  std::vector<Eigen::VectorXf> descs;

  Eigen::VectorXd desc(spec.descriptor_dim);
  for (int i : visible) {
    float score = float(uscore(rng));
    Eigen::Vector2d px = *project(pose, cam, scene.points[i]);
    if (spec.pixel_noise_sigma > 0)
      px += spec.pixel_noise_sigma * Eigen::Vector2d(gauss(rng), gauss(rng));
    desc = scene.descriptors.row(i).cast<double>();
    if (spec.descriptor_noise_sigma > 0) {
      for (int c = 0; c < spec.descriptor_dim; ++c)
        desc(c) += spec.descriptor_noise_sigma * gauss(rng);
    }
    if (!cam.in_bounds(px)) continue;  // noise pushed it off the sensor
    double norm = desc.norm();
    if (norm < 1e-12) continue;
    view.gt_observations.emplace_back(uint32_t(view.features.keypoints.size()),
                                      uint32_t(i));
    view.features.keypoints.push_back(Keypoint{float(px.x()), float(px.y()), score});
    descs.push_back((desc / norm).cast<float>());
  }

  // Spurious detections: random location, random descriptor, no 3D point.
  int num_outliers = int(std::lround(spec.outlier_fraction * double(descs.size())));
  for (int k = 0; k < num_outliers; ++k) {
    Eigen::Vector2d px(ux(rng), uy(rng));
    do {
      for (int c = 0; c < spec.descriptor_dim; ++c) desc(c) = gauss(rng);
    } while (desc.norm() < 1e-9);
    view.features.keypoints.push_back(
        Keypoint{float(px.x()), float(px.y()), float(uscore(rng))});
    descs.push_back((desc / desc.norm()).cast<float>());
  }

  view.features.descriptors.resize(int(descs.size()), spec.descriptor_dim);
  for (size_t r = 0; r < descs.size(); ++r)
    view.features.descriptors.row(int(r)) = descs[r];

  // Global descriptor: the normalized sum of visible contributions plus a
  // small fixed perturbation, so images never collide exactly.
  Eigen::VectorXd g = Eigen::VectorXd::Zero(spec.global_dim);
  for (int i : visible) g += scene.global_contribs.row(i).cast<double>();
  if (g.norm() < 1e-12) g(0) = 1.0;
  g /= g.norm();
  for (int c = 0; c < spec.global_dim; ++c) g(c) += 0.01 * gauss(rng);
  g /= g.norm();
  view.features.global_descriptor = g.cast<float>();
  return view;
}

}  // namespace hfloc
