#pragma once

// Coarse-to-fine localization: retrieve nearest database images by global
// descriptor, merge them into covisible places, match 2D-3D inside each
// place, and solve the pose; the first place that yields enough inliers
// wins, so most queries never touch the lower-ranked places.

#include <Eigen/Dense>
#include <chrono>
#include <string>
#include <vector>

#include "hfloc/error.hpp"
#include "hfloc/features.hpp"
#include "hfloc/geometry.hpp"
#include "hfloc/mapstore.hpp"
#include "hfloc/matching.hpp"
#include "hfloc/pose.hpp"
#include "hfloc/retrieval.hpp"

namespace hfloc {

struct LocalizeConfig {
  int knn = 10;                // database neighbors to retrieve
  double ratio = 0.9;          // 2D-3D matching ratio gate
  RansacConfig ransac;
  int max_keypoints = 2000;    // query keypoint budget before matching
  double nms_radius = 4.0;
  MatchAgainst mode = MatchAgainst::kAllObservations;
  int covis_min_shared = 1;

  void validate() const {
    if (knn < 1) throw_error(ErrorCode::kInvalidArgument, "knn must be >= 1");
    if (!(ratio > 0 && ratio <= 1))
      throw_error(ErrorCode::kInvalidArgument, "ratio must be in (0, 1]");
    if (max_keypoints < 1)
      throw_error(ErrorCode::kInvalidArgument, "max_keypoints must be >= 1");
    if (nms_radius < 0)
      throw_error(ErrorCode::kInvalidArgument, "nms_radius must be >= 0");
    ransac.validate();
  }
};

struct LocalizeTimings {
  double feature_load_ms = 0;  // filled by callers that load from disk
  double global_ms = 0;
  double clustering_ms = 0;
  double matching_ms = 0;
  double pnp_ms = 0;
  double total_ms = 0;
};

struct LocalizationResult {
  PoseEstimate estimate;
  int place_index = -1;        // place that produced the estimate
  int num_places_tried = 0;
  std::vector<RetrievalResult> prior_frames;
  LocalizeTimings timings;

  bool success() const { return estimate.success; }
};

// Index rows follow map image order. Global descriptors go through the
// map's PCA projection when one is stored, otherwise they are used as-is
// after renormalization.
inline Eigen::VectorXd reduce_global(const SparseMap& map, const Eigen::VectorXf& g) {
  Eigen::VectorXd gd = g.cast<double>();
  if (map.pca) return reduce(*map.pca, gd);
  return l2_normalize(gd);
}

inline GlobalIndex build_global_index(const SparseMap& map) {
  if (map.images.empty()) throw_error(ErrorCode::kEmptyMap, "map has no images");
  GlobalIndex index;
  index.image_ids.reserve(map.images.size());
  Eigen::VectorXd first = reduce_global(map, map.images[0].features.global_descriptor);
  index.vectors.resize(Eigen::Index(map.images.size()), first.size());
  for (size_t i = 0; i < map.images.size(); ++i) {
    index.image_ids.push_back(map.images[i].image_id);
    index.vectors.row(Eigen::Index(i)) =
        reduce_global(map, map.images[i].features.global_descriptor).transpose();
  }
  return index;
}

inline LocalizationResult localize(const SparseMap& map, const GlobalIndex& index,
                                   const LocalFeatureSet& query, const Camera& camera,
                                   const LocalizeConfig& config = {}) {
  config.validate();
  if (map.images.empty()) throw_error(ErrorCode::kEmptyMap, "map has no images");

  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };
  auto t_total = clock::now();

  LocalizationResult result;
  LocalFeatureSet pruned = filter_features(query, config.nms_radius,
                                           size_t(config.max_keypoints));

  auto t_global = clock::now();
  Eigen::VectorXd reduced = reduce_global(map, query.global_descriptor);
  result.prior_frames = knn_retrieve(index, reduced, config.knn);
  result.timings.global_ms = ms_since(t_global);

  auto t_cluster = clock::now();
  std::vector<std::pair<std::string, double>> priors;
  priors.reserve(result.prior_frames.size());
  for (const RetrievalResult& r : result.prior_frames)
    priors.emplace_back(r.image_id, r.similarity);
  std::vector<Place> places = covisibility_places(map, priors, config.covis_min_shared);
  result.timings.clustering_ms = ms_since(t_cluster);

  PoseEstimate best;
  int best_place = -1;
  for (size_t pi = 0; pi < places.size(); ++pi) {
    if (places[pi].point_ids.empty()) continue;

    auto t_match = clock::now();
    std::vector<Correspondence2D3D> corr =
        assemble_2d3d(pruned, places[pi], map, config.ratio, config.mode);
    result.timings.matching_ms += ms_since(t_match);
    ++result.num_places_tried;
    if (int(corr.size()) < 4) continue;

    std::vector<Eigen::Vector2d> pixels;
    std::vector<Eigen::Vector3d> points;
    pixels.reserve(corr.size());
    points.reserve(corr.size());
    for (const Correspondence2D3D& c : corr) {
      pixels.push_back(c.pixel);
      points.push_back(c.point);
    }
    auto t_pnp = clock::now();
    PoseEstimate est = pnp_ransac(camera, pixels, points, config.ransac);
    result.timings.pnp_ms += ms_since(t_pnp);

    if (est.success) {
      result.estimate = est;
      result.place_index = int(pi);
      result.timings.total_ms = ms_since(t_total);
      return result;
    }
    if (est.num_inliers > best.num_inliers) {
      best = est;
      best_place = int(pi);
    }
  }

  result.estimate = best;  // best failed attempt, success stays false
  result.place_index = best_place;
  result.timings.total_ms = ms_since(t_total);
  return result;
}

}  // namespace hfloc
