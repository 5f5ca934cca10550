#pragma once

// Absolute pose solvers: minimal P3P and P3P-within-RANSAC with a fixed
// Gauss-Newton polish. Everything is seeded and tie-broken explicitly so a
// given input and seed always produce the bit-identical estimate.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "hfloc/error.hpp"
#include "hfloc/geometry.hpp"

namespace hfloc {

namespace detail {

// Real roots of a polynomial with ascending coefficients, degree <= 4, via
// the companion matrix. Tiny leading coefficients are trimmed first.
inline std::vector<double> real_roots(std::vector<double> coeffs) {
  double scale = 0;
  for (double c : coeffs) scale = std::max(scale, std::abs(c));
  if (scale == 0) return {};
  while (coeffs.size() > 1 && std::abs(coeffs.back()) < 1e-14 * scale)
    coeffs.pop_back();
  const int deg = int(coeffs.size()) - 1;
  if (deg < 1) return {};
  if (deg == 1) return {-coeffs[0] / coeffs[1]};

  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(deg, deg);
  for (int i = 0; i < deg; ++i) companion(i, deg - 1) = -coeffs[i] / coeffs[deg];
  companion.block(1, 0, deg - 1, deg - 1).setIdentity();

  Eigen::EigenSolver<Eigen::MatrixXd> eig(companion, false);
  std::vector<double> roots;
  for (int i = 0; i < deg; ++i) {
    std::complex<double> r = eig.eigenvalues()(i);
    if (std::abs(r.imag()) <= 1e-8 * (1.0 + std::abs(r.real())))
      roots.push_back(r.real());
  }

  // Two Newton steps per root to shake off companion-matrix rounding.
  auto eval = [&](double x, double* dfdx) {
    double f = 0, df = 0;
    for (int i = deg; i >= 0; --i) {
      df = df * x + f;
      f = f * x + coeffs[i];
    }
    *dfdx = df;
    return f;
  };
  for (double& r : roots) {
    for (int it = 0; it < 2; ++it) {
      double df;
      double f = eval(r, &df);
      if (std::abs(df) > 1e-14) r -= f / df;
    }
  }
  std::sort(roots.begin(), roots.end());
  return roots;
}

// Rigid transform Y = R X + t from three point pairs (Kabsch).
inline Pose rigid_from_three(const std::array<Eigen::Vector3d, 3>& x_world,
                             const std::array<Eigen::Vector3d, 3>& y_cam) {
  Eigen::Vector3d xc = (x_world[0] + x_world[1] + x_world[2]) / 3.0;
  Eigen::Vector3d yc = (y_cam[0] + y_cam[1] + y_cam[2]) / 3.0;
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (int i = 0; i < 3; ++i)
    h += (x_world[i] - xc) * (y_cam[i] - yc).transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant();
  Eigen::Matrix3d r = svd.matrixV() * d * svd.matrixU().transpose();
  return Pose(Eigen::Quaterniond(r), yc - r * xc);
}

// P3P candidates for three bearing vectors and three world points, by the
// classical distance-elimination route: with u = s2/s1 and v = s3/s1 the
// law-of-cosines system reduces to a quartic in v. No degeneracy checks
// here; the public wrapper and the RANSAC loop guard their own inputs.
inline std::vector<Pose> p3p_candidates(const std::array<Eigen::Vector3d, 3>& f,
                                        const std::array<Eigen::Vector3d, 3>& x) {
  const double a = (x[1] - x[2]).norm();
  const double b = (x[0] - x[2]).norm();
  const double c = (x[0] - x[1]).norm();
  if (a <= 0 || b <= 0 || c <= 0) return {};

  const double ca = f[1].dot(f[2]);
  const double cb = f[0].dot(f[2]);
  const double cg = f[0].dot(f[1]);
  const double A = (a * a) / (b * b);
  const double B = (c * c) / (b * b);

  // N(v) = (A-B-1) v^2 - 2 (A-B) cb v + (A-B+1), D(v) = 2 (cg - ca v),
  // quartic: N^2 - 2 cg N D + D^2 (1 - B (1 + v^2 - 2 cb v)) = 0.
  const std::array<double, 3> N = {A - B + 1.0, -2.0 * (A - B) * cb, A - B - 1.0};
  const std::array<double, 2> D = {2.0 * cg, -2.0 * ca};
  const std::array<double, 3> Q = {1.0 - B, 2.0 * B * cb, -B};

  std::vector<double> quartic(5, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) quartic[i + j] += N[i] * N[j];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) quartic[i + j] -= 2.0 * cg * N[i] * D[j];
  std::array<double, 3> DD = {D[0] * D[0], 2.0 * D[0] * D[1], D[1] * D[1]};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) quartic[i + j] += DD[i] * Q[j];

  // The quartic squares the system, which costs precision near repeated
  // roots; polish each (u, v) with Newton on the original two constraints.
  auto polish = [&](double& u, double& v) {
    for (int it = 0; it < 10; ++it) {
      const double q = 1.0 + v * v - 2.0 * v * cb;
      const double g1 = u * u + v * v - 2.0 * u * v * ca - A * q;
      const double g2 = u * u + 1.0 - 2.0 * u * cg - B * q;
      const double j11 = 2.0 * u - 2.0 * v * ca;
      const double j12 = 2.0 * v - 2.0 * u * ca - A * (2.0 * v - 2.0 * cb);
      const double j21 = 2.0 * u - 2.0 * cg;
      const double j22 = -B * (2.0 * v - 2.0 * cb);
      const double det = j11 * j22 - j12 * j21;
      if (std::abs(det) < 1e-14) break;
      const double du = (g1 * j22 - g2 * j12) / det;
      const double dv = (j11 * g2 - j21 * g1) / det;
      u -= du;
      v -= dv;
      if (std::abs(du) + std::abs(dv) < 1e-15) break;
    }
  };

  std::vector<std::pair<double, double>> uv;
  for (double v : real_roots(quartic)) {
    if (!(v > 0)) continue;
    const double denom_u = 2.0 * (cg - ca * v);
    if (std::abs(denom_u) < 1e-12) continue;
    double u = ((A - B - 1.0) * v * v - 2.0 * (A - B) * cb * v + (A - B + 1.0)) / denom_u;
    if (!(u > 0)) continue;
    polish(u, v);
    if (!(u > 0) || !(v > 0)) continue;
    bool dup = false;
    for (const auto& [pu, pv] : uv)
      if (std::abs(u - pu) + std::abs(v - pv) <= 1e-9 * (1.0 + std::abs(u) + std::abs(v)))
        dup = true;
    if (!dup) uv.emplace_back(u, v);
  }

  std::vector<Pose> poses;
  for (const auto& [u, v] : uv) {
    const double s1_sq = (b * b) / (1.0 + v * v - 2.0 * v * cb);
    if (!(s1_sq > 0)) continue;
    const double s1 = std::sqrt(s1_sq);
    std::array<Eigen::Vector3d, 3> y = {s1 * f[0], u * s1 * f[1], v * s1 * f[2]};
    poses.push_back(rigid_from_three(x, y));
  }
  return poses;
}

}  // namespace detail

// Minimal absolute pose from three 2D-3D correspondences. Up to four
// candidates; each reprojects the inputs exactly (to solver precision).
// Collinear points and coincident pixels have no unique interpretation and
// are rejected.
inline std::vector<Pose> p3p_minimal(const Camera& camera,
                                     const std::array<Eigen::Vector2d, 3>& pixels,
                                     const std::array<Eigen::Vector3d, 3>& points) {
  Eigen::Vector3d cross = (points[1] - points[0]).cross(points[2] - points[0]);
  if (0.5 * cross.norm() <= 1e-9)
    throw_error(ErrorCode::kDegenerateConfiguration, "3D points are collinear");
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j)
      if ((pixels[i] - pixels[j]).norm() <= 1e-9)
        throw_error(ErrorCode::kDegenerateConfiguration, "duplicate pixels");

  std::array<Eigen::Vector3d, 3> f = {camera.bearing(pixels[0]),
                                      camera.bearing(pixels[1]),
                                      camera.bearing(pixels[2])};
  return detail::p3p_candidates(f, points);
}

struct RansacConfig {
  double reproj_threshold_px = 10.0;
  int min_inliers = 12;
  int max_iterations = 5000;
  double confidence = 0.999;
  uint64_t seed = 0;
  int refine_iterations = 10;

  void validate() const {
    if (min_inliers < 4)
      throw_error(ErrorCode::kInvalidArgument, "min_inliers must be >= 4");
    if (!(reproj_threshold_px > 0))
      throw_error(ErrorCode::kInvalidArgument, "reprojection threshold must be positive");
    if (!(confidence > 0.0 && confidence < 1.0))
      throw_error(ErrorCode::kInvalidArgument, "confidence must be in (0, 1)");
    if (max_iterations < 1)
      throw_error(ErrorCode::kInvalidArgument, "max_iterations must be >= 1");
  }
};

struct PoseEstimate {
  Pose pose;
  bool success = false;
  std::vector<uint32_t> inlier_indices;  // ascending
  int num_inliers = 0;
  double mean_residual_px = 0;  // over the reported inliers
  int iterations = 0;           // RANSAC iterations actually run
};

namespace detail {

// Gauss-Newton on reprojection residuals over the given subset, at most
// max_iters steps. Rotation updates are applied on the left in so(3).
inline Pose refine_pose(Pose pose, const Camera& cam,
                        const std::vector<Eigen::Vector2d>& pixels,
                        const std::vector<Eigen::Vector3d>& points,
                        const std::vector<uint32_t>& subset, int max_iters) {
  auto cost_of = [&](const Pose& p) {
    double cost = 0;
    for (uint32_t i : subset) {
      auto px = project(p, cam, points[i]);
      if (!px) {
        cost += 1e12;  // a subset point went behind the camera
        continue;
      }
      cost += (*px - pixels[i]).squaredNorm();
    }
    return cost;
  };

  double cost = cost_of(pose);
  for (int iter = 0; iter < max_iters; ++iter) {
    Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> jtr = Eigen::Matrix<double, 6, 1>::Zero();
    for (uint32_t i : subset) {
      Eigen::Vector3d xc = pose.apply(points[i]);
      if (xc.z() <= 1e-9) continue;
      const double z_inv = 1.0 / xc.z();
      Eigen::Vector2d xn = xc.hnormalized();
      const double r2 = xn.squaredNorm();
      const double d = 1.0 + cam.k1 * r2;

      Eigen::Vector2d px(cam.fx * d * xn.x() + cam.cx, cam.fy * d * xn.y() + cam.cy);
      Eigen::Vector2d res = px - pixels[i];

      Eigen::Matrix2d ddist = d * Eigen::Matrix2d::Identity() +
                              2.0 * cam.k1 * xn * xn.transpose();
      Eigen::Matrix2d k;
      k << cam.fx, 0, 0, cam.fy;
      Eigen::Matrix<double, 2, 3> dxn;
      dxn << z_inv, 0, -xn.x() * z_inv, 0, z_inv, -xn.y() * z_inv;
      Eigen::Matrix<double, 2, 3> jpt = k * ddist * dxn;

      Eigen::Vector3d rx = xc - pose.t;  // R * X
      Eigen::Matrix3d skew;
      skew << 0, -rx.z(), rx.y(), rx.z(), 0, -rx.x(), -rx.y(), rx.x(), 0;

      Eigen::Matrix<double, 2, 6> j;
      j.leftCols<3>() = -jpt * skew;
      j.rightCols<3>() = jpt;

      jtj += j.transpose() * j;
      jtr += j.transpose() * res;
    }

    Eigen::Matrix<double, 6, 1> delta = jtj.ldlt().solve(-jtr);
    if (!delta.allFinite()) break;
    if (delta.norm() < 1e-14) break;

    Eigen::Vector3d omega = delta.head<3>();
    Pose next = pose;
    double angle = omega.norm();
    if (angle > 0) {
      Eigen::Quaterniond dq(Eigen::AngleAxisd(angle, omega / angle));
      next.q = (dq * pose.q).normalized();
    }
    next.t = pose.t + delta.tail<3>();

    double next_cost = cost_of(next);
    if (!(next_cost < cost)) break;  // step made it worse: stop deterministically
    pose = next;
    cost = next_cost;
  }
  return pose;
}

}  // namespace detail

// P3P + RANSAC + Gauss-Newton absolute pose. Inliers are correspondences
// whose reprojection under the candidate lands within the threshold (points
// behind the camera are outliers). The best candidate by inlier count (ties
// by lower mean inlier residual) is refined on its inliers, and the inlier
// set is re-evaluated under the refined pose before reporting. success
// requires num_inliers >= cfg.min_inliers.
inline PoseEstimate pnp_ransac(const Camera& camera,
                               const std::vector<Eigen::Vector2d>& pixels,
                               const std::vector<Eigen::Vector3d>& points,
                               const RansacConfig& cfg) {
  cfg.validate();
  if (pixels.size() != points.size())
    throw_error(ErrorCode::kDimensionMismatch, "pixel/point counts differ");
  const size_t n = pixels.size();
  if (n < 4)
    throw_error(ErrorCode::kTooFewCorrespondences,
                "need at least 4 correspondences, got " + std::to_string(n));

  std::vector<Eigen::Vector3d> bearings(n);
  for (size_t i = 0; i < n; ++i) bearings[i] = camera.bearing(pixels[i]);

  auto evaluate = [&](const Pose& pose, std::vector<uint32_t>* inliers) {
    double err_sum = 0;
    inliers->clear();
    for (size_t i = 0; i < n; ++i) {
      auto px = project(pose, camera, points[i]);
      if (!px) continue;
      double err = (*px - pixels[i]).norm();
      if (err <= cfg.reproj_threshold_px) {
        inliers->push_back(uint32_t(i));
        err_sum += err;
      }
    }
    return inliers->empty() ? 0.0 : err_sum / double(inliers->size());
  };

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<size_t> pick(0, n - 1);

  Pose best_pose;
  int best_count = 0;
  double best_mean = std::numeric_limits<double>::infinity();
  std::vector<uint32_t> inliers, best_inliers;

  int iterations_needed = cfg.max_iterations;
  int iter = 0;
  for (; iter < iterations_needed; ++iter) {
    size_t i0 = pick(rng), i1, i2;
    do { i1 = pick(rng); } while (i1 == i0);
    do { i2 = pick(rng); } while (i2 == i0 || i2 == i1);

    std::array<Eigen::Vector3d, 3> xs = {points[i0], points[i1], points[i2]};
    Eigen::Vector3d cross = (xs[1] - xs[0]).cross(xs[2] - xs[0]);
    if (0.5 * cross.norm() <= 1e-9) continue;
    if ((pixels[i0] - pixels[i1]).norm() <= 1e-9 ||
        (pixels[i0] - pixels[i2]).norm() <= 1e-9 ||
        (pixels[i1] - pixels[i2]).norm() <= 1e-9)
      continue;

    std::array<Eigen::Vector3d, 3> fs = {bearings[i0], bearings[i1], bearings[i2]};
    for (const Pose& candidate : detail::p3p_candidates(fs, xs)) {
      double mean = evaluate(candidate, &inliers);
      int count = int(inliers.size());
      if (count > best_count || (count == best_count && mean < best_mean)) {
        best_count = count;
        best_mean = mean;
        best_pose = candidate;
        best_inliers = inliers;

        // Adaptive termination: enough iterations that drawing one
        // all-inlier sample is likely at the requested confidence.
        double w = double(count) / double(n);
        double p_good = w * w * w;
        if (p_good >= 1.0 - 1e-12) {
          iterations_needed = iter + 1;
        } else if (p_good > 0) {
          double needed = std::log(1.0 - cfg.confidence) / std::log(1.0 - p_good);
          iterations_needed = int(std::min<double>(cfg.max_iterations,
                                                   std::max(needed, 1.0)));
        }
      }
    }
  }

  PoseEstimate est;
  est.iterations = iter;
  if (best_count < 3) return est;  // no usable candidate at all

  est.pose = detail::refine_pose(best_pose, camera, pixels, points, best_inliers,
                                 cfg.refine_iterations);
  est.mean_residual_px = evaluate(est.pose, &est.inlier_indices);
  est.num_inliers = int(est.inlier_indices.size());
  est.success = est.num_inliers >= cfg.min_inliers;
  return est;
}

}  // namespace hfloc
