#pragma once

// Pose / camera primitives. Conventions used everywhere:
//  - poses are world-to-camera: x_cam = R * x_world + t
//  - quaternions are stored (w, x, y, z) and kept unit norm
//  - pixel coordinates have the origin at the top-left corner, x right, y down

#include <Eigen/Dense>
#include <cmath>
#include <optional>

#include "hfloc/error.hpp"

namespace hfloc {

constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

struct Pose {
  Eigen::Quaterniond q = Eigen::Quaterniond::Identity();  // world-to-camera
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Pose() = default;
  Pose(const Eigen::Quaterniond& q_in, const Eigen::Vector3d& t_in)
      : q(q_in.normalized()), t(t_in) {}

  static Pose Identity() { return Pose(); }

  Eigen::Vector3d apply(const Eigen::Vector3d& x_world) const {
    return q * x_world + t;
  }

  // Camera center in world coordinates.
  Eigen::Vector3d center() const { return q.conjugate() * (-t); }

  Pose inverse() const {
    Eigen::Quaterniond qi = q.conjugate();
    return Pose(qi, qi * (-t));
  }

  Eigen::Matrix3d rotation() const { return q.toRotationMatrix(); }
};

// Composition: (a * b).apply(x) == a.apply(b.apply(x)).
inline Pose operator*(const Pose& a, const Pose& b) {
  return Pose(a.q * b.q, a.q * b.t + a.t);
}

// Angle between two rotations in degrees, in [0, 180]. The asin form is
// numerically stable near zero where the acos-of-trace form loses digits.
inline double rotation_angle_deg(const Eigen::Quaterniond& a,
                                 const Eigen::Quaterniond& b) {
  Eigen::Quaterniond e = a * b.conjugate();
  double v = e.vec().norm();
  // |vec| = |sin(theta/2)| <= 1 up to rounding.
  return rad2deg(2.0 * std::asin(std::min(1.0, v)));
}

inline double rotation_angle_deg(const Pose& a, const Pose& b) {
  return rotation_angle_deg(a.q, b.q);
}

// Pinhole camera with an optional single radial distortion coefficient.
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  double k1 = 0;

  Camera() = default;
  Camera(double fx_, double fy_, double cx_, double cy_, int w, int h,
         double k1_ = 0.0)
      : fx(fx_), fy(fy_), cx(cx_), cy(cy_), width(w), height(h), k1(k1_) {
    if (!(fx > 0) || !(fy > 0))
      throw_error(ErrorCode::kInvalidArgument, "focal lengths must be positive");
    if (w <= 0 || h <= 0)
      throw_error(ErrorCode::kInvalidArgument, "image size must be positive");
  }

  // Normalized camera coords -> pixel, applying distortion.
  Eigen::Vector2d to_pixel(const Eigen::Vector2d& xn) const {
    double r2 = xn.squaredNorm();
    double d = 1.0 + k1 * r2;
    return {fx * d * xn.x() + cx, fy * d * xn.y() + cy};
  }

  // Pixel -> normalized camera coords, undoing distortion. k1 is small in
  // practice, so a short fixed-point iteration is enough.
  Eigen::Vector2d to_normalized(const Eigen::Vector2d& px) const {
    Eigen::Vector2d xd((px.x() - cx) / fx, (px.y() - cy) / fy);
    if (k1 == 0.0) return xd;
    Eigen::Vector2d xu = xd;
    for (int i = 0; i < 10; ++i) {
      double d = 1.0 + k1 * xu.squaredNorm();
      xu = xd / d;
    }
    return xu;
  }

  // Unit bearing vector for a pixel. z > 0 by construction.
  Eigen::Vector3d bearing(const Eigen::Vector2d& px) const {
    Eigen::Vector2d xn = to_normalized(px);
    return Eigen::Vector3d(xn.x(), xn.y(), 1.0).normalized();
  }

  bool in_bounds(const Eigen::Vector2d& px) const {
    return px.x() >= 0.0 && px.x() < width && px.y() >= 0.0 && px.y() < height;
  }
};

// World point -> pixel. Empty when the point is on or behind the principal
// plane; callers treat that as an outlier, not an error.
inline std::optional<Eigen::Vector2d> project(const Pose& pose,
                                              const Camera& camera,
                                              const Eigen::Vector3d& x_world) {
  Eigen::Vector3d xc = pose.apply(x_world);
  if (xc.z() <= 1e-9) return std::nullopt;
  return camera.to_pixel(xc.hnormalized());
}

struct Triangulation {
  enum class Status { kOk, kDegenerateBaseline, kRayDivergence };

  Status status = Status::kOk;
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  Eigen::Vector2d residual_a = Eigen::Vector2d::Zero();  // pixel units
  Eigen::Vector2d residual_b = Eigen::Vector2d::Zero();

  bool ok() const { return status == Status::kOk; }
};

// Two-view DLT triangulation on undistorted normalized coordinates.
// Degenerate baselines and rays meeting below min_angle_deg are reported in
// the status; both are expected outcomes during map construction.
inline Triangulation triangulate_two_view(const Pose& pose_a, const Pose& pose_b,
                                          const Camera& cam_a, const Camera& cam_b,
                                          const Eigen::Vector2d& px_a,
                                          const Eigen::Vector2d& px_b,
                                          double min_angle_deg = 1.0) {
  Triangulation out;

  Eigen::Vector3d ca = pose_a.center();
  Eigen::Vector3d cb = pose_b.center();
  if ((ca - cb).norm() <= 1e-6) {
    out.status = Triangulation::Status::kDegenerateBaseline;
    return out;
  }

  Eigen::Matrix<double, 3, 4> pa, pb;
  pa.leftCols<3>() = pose_a.rotation();
  pa.col(3) = pose_a.t;
  pb.leftCols<3>() = pose_b.rotation();
  pb.col(3) = pose_b.t;

  Eigen::Vector2d na = cam_a.to_normalized(px_a);
  Eigen::Vector2d nb = cam_b.to_normalized(px_b);

  Eigen::Matrix4d A;
  A.row(0) = na.x() * pa.row(2) - pa.row(0);
  A.row(1) = na.y() * pa.row(2) - pa.row(1);
  A.row(2) = nb.x() * pb.row(2) - pb.row(0);
  A.row(3) = nb.y() * pb.row(2) - pb.row(1);

  Eigen::JacobiSVD<Eigen::Matrix4d> svd(A, Eigen::ComputeFullV);
  Eigen::Vector4d h = svd.matrixV().col(3);
  if (std::abs(h(3)) < 1e-12) {
    // Point at infinity: rays are effectively parallel.
    out.status = Triangulation::Status::kRayDivergence;
    return out;
  }
  out.point = h.head<3>() / h(3);

  Eigen::Vector3d ra = out.point - ca;
  Eigen::Vector3d rb = out.point - cb;
  double denom = ra.norm() * rb.norm();
  if (denom < 1e-12) {
    out.status = Triangulation::Status::kRayDivergence;
    return out;
  }
  double cos_angle = std::clamp(ra.dot(rb) / denom, -1.0, 1.0);
  double angle_deg = rad2deg(std::acos(cos_angle));
  if (angle_deg < min_angle_deg) {
    out.status = Triangulation::Status::kRayDivergence;
    return out;
  }

  auto proj_a = project(pose_a, cam_a, out.point);
  auto proj_b = project(pose_b, cam_b, out.point);
  if (!proj_a || !proj_b) {
    // Behind one of the cameras: rays met on the wrong side.
    out.status = Triangulation::Status::kRayDivergence;
    return out;
  }
  out.residual_a = *proj_a - px_a;
  out.residual_b = *proj_b - px_b;
  return out;
}

// Plane-to-plane homography, normalized so m(2,2) == 1 whenever possible.
struct Homography {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();

  Homography() = default;
  explicit Homography(const Eigen::Matrix3d& m_in) : m(m_in) {
    if (std::abs(m.determinant()) < 1e-12)
      throw_error(ErrorCode::kDegenerateConfiguration, "homography is singular");
    if (std::abs(m(2, 2)) > 1e-12) m /= m(2, 2);
  }

  Homography inverse() const { return Homography(Eigen::Matrix3d(m.inverse())); }
};

// Empty when the mapped point lands on the line at infinity.
inline std::optional<Eigen::Vector2d> apply_homography(const Homography& h,
                                                       const Eigen::Vector2d& p) {
  Eigen::Vector3d q = h.m * p.homogeneous();
  if (std::abs(q.z()) <= 1e-12) return std::nullopt;
  return q.hnormalized();
}

}  // namespace hfloc
