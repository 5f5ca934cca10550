#pragma once

// Local feature containers and the detector post-processing steps that turn
// raw network outputs (score maps, dense descriptor grids) into sparse sets:
// radius NMS + top-k selection and bilinear descriptor sampling.

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "hfloc/error.hpp"

namespace hfloc {

struct Keypoint {
  float x = 0, y = 0;
  float score = 0;
};

// Sparse features of one image. Descriptor rows and the global descriptor
// are unit L2 norm; matching relies on that to turn dot products into
// distances.
struct LocalFeatureSet {
  std::string image_id;
  std::vector<Keypoint> keypoints;
  Eigen::MatrixXf descriptors;        // keypoints.size() x dim
  Eigen::VectorXf global_descriptor;  // may be empty for purely local use
};

// Dense descriptor grid at 1/stride resolution, one row per cell in
// row-major (y * width + x) order.
struct DenseDescriptorMap {
  int height = 0, width = 0;  // grid cells, not pixels
  int stride = 8;
  Eigen::MatrixXf values;  // (height * width) x dim

  int dim() const { return static_cast<int>(values.cols()); }
};

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> l2_normalize(
    const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  double n = v.template cast<double>().norm();
  if (n < 1e-12) throw_error(ErrorCode::kZeroVector, "cannot normalize zero vector");
  return (v.template cast<double>() / n).template cast<Scalar>();
}

// Greedy radius NMS followed by top-k: walk keypoints in descending score
// (ties by (y, x) so the result does not depend on input order) and keep a
// point only when no already-kept point lies within `radius`. Returns
// indices into `keypoints` in selection order, at most k of them, so callers
// can slice descriptor rows to match.
inline std::vector<size_t> nms_topk(const std::vector<Keypoint>& keypoints,
                                    double radius, size_t k) {
  std::vector<size_t> order(keypoints.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const Keypoint& ka = keypoints[a];
    const Keypoint& kb = keypoints[b];
    if (ka.score != kb.score) return ka.score > kb.score;
    if (ka.y != kb.y) return ka.y < kb.y;
    if (ka.x != kb.x) return ka.x < kb.x;
    return a < b;
  });

  const double r2 = radius * radius;
  std::vector<size_t> kept;
  for (size_t idx : order) {
    if (kept.size() >= k) break;
    const Keypoint& c = keypoints[idx];
    bool suppressed = false;
    for (size_t j : kept) {
      double dx = double(c.x) - keypoints[j].x;
      double dy = double(c.y) - keypoints[j].y;
      if (dx * dx + dy * dy <= r2) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

// Convenience: apply nms_topk and slice keypoints/descriptors accordingly.
inline LocalFeatureSet filter_features(const LocalFeatureSet& f, double radius,
                                       size_t k) {
  std::vector<size_t> kept = nms_topk(f.keypoints, radius, k);
  LocalFeatureSet out;
  out.image_id = f.image_id;
  out.global_descriptor = f.global_descriptor;
  out.keypoints.reserve(kept.size());
  out.descriptors.resize(static_cast<Eigen::Index>(kept.size()), f.descriptors.cols());
  for (size_t i = 0; i < kept.size(); ++i) {
    out.keypoints.push_back(f.keypoints[kept[i]]);
    if (f.descriptors.rows() > 0)
      out.descriptors.row(static_cast<Eigen::Index>(i)) =
          f.descriptors.row(static_cast<Eigen::Index>(kept[i]));
  }
  return out;
}

// Bilinear descriptor lookup on the dense grid. A keypoint at pixel (x, y)
// maps to grid coordinates ((x - (s-1)/2) / s, (y - (s-1)/2) / s), i.e. cell
// centers sit at pixel (s-1)/2 + s*i; coordinates are clamped at the border.
// Sampled rows are re-normalized since interpolation shrinks unit vectors.
inline Eigen::MatrixXf sample_descriptors_bilinear(
    const std::vector<Keypoint>& keypoints, const DenseDescriptorMap& map) {
  if (map.width <= 0 || map.height <= 0 || map.values.rows() != Eigen::Index(map.width) * map.height)
    throw_error(ErrorCode::kShapeMismatch, "dense map dimensions inconsistent");

  const int d = map.dim();
  Eigen::MatrixXf out(keypoints.size(), d);
  const double s = map.stride;
  const double offset = (s - 1.0) / 2.0;

  for (size_t i = 0; i < keypoints.size(); ++i) {
    double gx = (keypoints[i].x - offset) / s;
    double gy = (keypoints[i].y - offset) / s;
    gx = std::clamp(gx, 0.0, double(map.width - 1));
    gy = std::clamp(gy, 0.0, double(map.height - 1));

    int x0 = std::min(int(std::floor(gx)), map.width - 2 >= 0 ? map.width - 2 : 0);
    int y0 = std::min(int(std::floor(gy)), map.height - 2 >= 0 ? map.height - 2 : 0);
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    int x1 = std::min(x0 + 1, map.width - 1);
    int y1 = std::min(y0 + 1, map.height - 1);
    double ax = gx - x0;
    double ay = gy - y0;

    Eigen::VectorXd v =
        (1 - ax) * (1 - ay) * map.values.row(y0 * map.width + x0).cast<double>() +
        ax * (1 - ay) * map.values.row(y0 * map.width + x1).cast<double>() +
        (1 - ax) * ay * map.values.row(y1 * map.width + x0).cast<double>() +
        ax * ay * map.values.row(y1 * map.width + x1).cast<double>();
    out.row(i) = l2_normalize(v).cast<float>();
  }
  return out;
}

}  // namespace hfloc
