#pragma once

// Descriptor matching. match_ratio implements nearest-neighbor search with
// the ratio test, plus the 2D-3D variant where the test is waived when the
// two nearest candidates are observations of the same 3D point (rejecting a
// match because a landmark looks like itself only throws information away).

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "hfloc/error.hpp"
#include "hfloc/features.hpp"
#include "hfloc/mapstore.hpp"

namespace hfloc {

struct Match {
  uint32_t query_idx = 0;
  // Target keypoint index in 2D-2D mode, point id in 2D-3D mode.
  uint64_t target_id = 0;
  double distance = 0;  // L2 between unit descriptors
};

struct MatchSet {
  std::vector<Match> matches;  // ascending query_idx, one entry per query
};

inline double descriptor_distance_from_similarity(double sim) {
  return std::sqrt(std::max(0.0, 2.0 - 2.0 * sim));
}

// Ratio-test matching of unit descriptor rows. Similarities come from a
// chunked GEMM laid out (chunk x queries) column-major so the per-query
// top-2 scan runs over contiguous memory; this is what keeps desk-scale
// matching (2k x 100k, D=256) under the single-threaded budget. Nearest
// neighbors tie toward the smaller target index. With target_point_ids
// given, the ratio test is skipped when both neighbors observe the same
// point and matches carry point ids instead of target indices.
inline MatchSet match_ratio(const Eigen::MatrixXf& query,
                            const Eigen::MatrixXf& target,
                            const std::vector<uint64_t>* target_point_ids,
                            double ratio) {
  if (query.cols() != target.cols())
    throw_error(ErrorCode::kDimensionMismatch, "descriptor dims differ");
  if (target_point_ids && Eigen::Index(target_point_ids->size()) != target.rows())
    throw_error(ErrorCode::kDimensionMismatch, "point id count != target rows");

  const Eigen::Index n = query.rows();
  const Eigen::Index m = target.rows();
  MatchSet out;
  if (n == 0 || m == 0) return out;

  std::vector<float> best1(n, -2.0f), best2(n, -2.0f);
  std::vector<Eigen::Index> idx1(n, -1), idx2(n, -1);

  const Eigen::Index chunk = 4096;
  Eigen::MatrixXf sims(std::min(chunk, m), n);
  for (Eigen::Index c0 = 0; c0 < m; c0 += chunk) {
    const Eigen::Index bc = std::min(chunk, m - c0);
    sims.topRows(bc).noalias() = target.middleRows(c0, bc) * query.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      const float* col = sims.col(i).data();
      float b1 = best1[i], b2 = best2[i];
      Eigen::Index i1 = idx1[i], i2 = idx2[i];
      for (Eigen::Index j = 0; j < bc; ++j) {
        const float s = col[j];
        if (s > b1) {
          b2 = b1;
          i2 = i1;
          b1 = s;
          i1 = c0 + j;
        } else if (s > b2) {
          b2 = s;
          i2 = c0 + j;
        }
      }
      best1[i] = b1;
      best2[i] = b2;
      idx1[i] = i1;
      idx2[i] = i2;
    }
  }

  out.matches.reserve(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d1 = descriptor_distance_from_similarity(best1[i]);
    bool accept;
    if (m == 1) {
      accept = true;  // no second neighbor to test against
    } else if (target_point_ids &&
               (*target_point_ids)[idx1[i]] == (*target_point_ids)[idx2[i]]) {
      accept = true;
    } else {
      const double d2 = descriptor_distance_from_similarity(best2[i]);
      accept = d1 < ratio * d2;
    }
    if (accept) {
      const uint64_t id = target_point_ids ? (*target_point_ids)[idx1[i]]
                                           : uint64_t(idx1[i]);
      out.matches.push_back({uint32_t(i), id, d1});
    }
  }
  return out;
}

struct Correspondence2D3D {
  uint32_t query_kp_idx = 0;
  uint64_t point_id = 0;
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
};

enum class MatchAgainst {
  kAllObservations,  // one target row per track observation
  kPointMean,        // one target row per point (mean descriptor)
};

// Builds the 2D-3D correspondences between a query image and one place.
// Target rows are laid out point by point (ascending point id, track order
// within a point) so nearest-neighbor ties stay deterministic. Each query
// keypoint yields at most one correspondence.
inline std::vector<Correspondence2D3D> assemble_2d3d(
    const LocalFeatureSet& query, const Place& place, const SparseMap& map,
    double ratio, MatchAgainst mode = MatchAgainst::kAllObservations) {
  if (place.point_ids.empty())
    throw_error(ErrorCode::kEmptyPlace, "place has no points");

  const Eigen::Index d = query.descriptors.cols();
  Eigen::Index rows = 0;
  for (uint64_t pid : place.point_ids) {
    const Point3D* p = map.find_point(pid);
    if (!p) throw_error(ErrorCode::kCorruptFile, "place references unknown point");
    rows += mode == MatchAgainst::kPointMean ? 1 : Eigen::Index(p->track.size());
  }

  Eigen::MatrixXf target(rows, d);
  std::vector<uint64_t> point_ids(rows);
  Eigen::Index r = 0;
  for (uint64_t pid : place.point_ids) {
    const Point3D* p = map.find_point(pid);
    if (mode == MatchAgainst::kPointMean) {
      if (p->mean_descriptor.size() != d)
        throw_error(ErrorCode::kDimensionMismatch, "mean descriptor dim mismatch");
      target.row(r) = p->mean_descriptor.transpose();
      point_ids[r] = pid;
      ++r;
    } else {
      for (const TrackElement& te : p->track) {
        const DbImage* im = map.find_image(te.image_id);
        if (!im || im->features.descriptors.cols() != d)
          throw_error(ErrorCode::kDimensionMismatch, "observation descriptor dim mismatch");
        target.row(r) = im->features.descriptors.row(te.keypoint_idx);
        point_ids[r] = pid;
        ++r;
      }
    }
  }

  MatchSet ms = match_ratio(query.descriptors, target, &point_ids, ratio);
  std::vector<Correspondence2D3D> out;
  out.reserve(ms.matches.size());
  for (const Match& mch : ms.matches) {
    const Point3D* p = map.find_point(mch.target_id);
    const Keypoint& kp = query.keypoints[mch.query_idx];
    out.push_back({mch.query_idx, mch.target_id,
                   Eigen::Vector2d(kp.x, kp.y), p->position});
  }
  return out;
}

}  // namespace hfloc
