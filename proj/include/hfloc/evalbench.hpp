#pragma once

// Evaluation toolkit: detector and descriptor metrics over image pairs with
// pixel-level ground truth (a homography or depth plus relative pose),
// homography and relative-pose recovery rates, and localization recall at
// error tiers. Metric implementations here stay deliberately simple (plain
// double loops) so they can serve as references for the tuned engine paths.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hfloc/error.hpp"
#include "hfloc/features.hpp"
#include "hfloc/geometry.hpp"
#include "hfloc/io_util.hpp"
#include "hfloc/pose.hpp"

namespace hfloc {

// ---------------------------------------------------------------------------
// Depth maps

struct DepthMap {
  uint32_t width = 0;
  uint32_t height = 0;
  std::vector<float> values;  // row-major; values <= 0 mark invalid pixels

  float at(int x, int y) const { return values[size_t(y) * width + size_t(x)]; }

  // Depth under a subpixel position, by nearest-pixel lookup.
  std::optional<double> depth_at(const Eigen::Vector2d& px) const {
    int x = int(std::lround(px.x()));
    int y = int(std::lround(px.y()));
    if (x < 0 || y < 0 || x >= int(width) || y >= int(height)) return std::nullopt;
    float d = at(x, y);
    if (!(d > 0)) return std::nullopt;
    return double(d);
  }
};

namespace detail {
constexpr char kDepthMagic[4] = {'H', 'F', 'N', 'D'};
}

inline std::vector<char> serialize_depth(const DepthMap& d) {
  if (d.values.size() != size_t(d.width) * size_t(d.height))
    throw_error(ErrorCode::kShapeMismatch, "depth buffer does not match dimensions");
  ByteWriter w;
  w.bytes(detail::kDepthMagic, 4);
  w.u32(d.width);
  w.u32(d.height);
  for (float v : d.values) w.f32(v);
  return w.data();
}

inline DepthMap parse_depth(const std::vector<char>& buf) {
  ByteReader r(buf.data(), buf.size());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, detail::kDepthMagic, 4) != 0)
    throw_error(ErrorCode::kCorruptFile, "not a depth file");
  DepthMap d;
  d.width = r.u32();
  d.height = r.u32();
  uint64_t n = uint64_t(d.width) * uint64_t(d.height);
  if (r.remaining() != n * 4)
    throw_error(ErrorCode::kCorruptFile, "depth payload size mismatch");
  d.values.reserve(n);
  for (uint64_t i = 0; i < n; ++i) d.values.push_back(r.f32());
  return d;
}

inline void write_depth_file(const std::string& path, const DepthMap& d) {
  write_file_bytes(path, serialize_depth(d));
}

inline DepthMap read_depth_file(const std::string& path) {
  return parse_depth(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Pair ground truth: where does a pixel of image A truly land in image B?

struct HomographyGt {
  Homography h_ab;
  Homography h_ba;
  int width_a = 0, height_a = 0;
  int width_b = 0, height_b = 0;

  HomographyGt() = default;
  HomographyGt(const Homography& h, int wa, int ha, int wb, int hb)
      : h_ab(h), h_ba(h.inverse()), width_a(wa), height_a(ha), width_b(wb), height_b(hb) {
    if (wa < 1 || ha < 1 || wb < 1 || hb < 1)
      throw_error(ErrorCode::kInvalidArgument, "image bounds must be positive");
  }

  std::optional<Eigen::Vector2d> to_b(const Eigen::Vector2d& px) const {
    auto q = apply_homography(h_ab, px);
    if (!q || q->x() < 0 || q->y() < 0 || q->x() > width_b - 1 || q->y() > height_b - 1)
      return std::nullopt;
    return q;
  }
  std::optional<Eigen::Vector2d> to_a(const Eigen::Vector2d& px) const {
    auto q = apply_homography(h_ba, px);
    if (!q || q->x() < 0 || q->y() < 0 || q->x() > width_a - 1 || q->y() > height_a - 1)
      return std::nullopt;
    return q;
  }
};

struct SfmGt {
  DepthMap depth_a;
  DepthMap depth_b;
  Pose pose_ab;  // x_b = pose_ab.apply(x_a)
  Camera camera_a;
  Camera camera_b;
  double depth_tolerance = 0.05;  // relative consistency gate for occlusion

  std::optional<Eigen::Vector2d> to_b(const Eigen::Vector2d& px) const {
    return reproject(px, depth_a, depth_b, pose_ab, camera_a, camera_b);
  }
  std::optional<Eigen::Vector2d> to_a(const Eigen::Vector2d& px) const {
    return reproject(px, depth_b, depth_a, pose_ab.inverse(), camera_b, camera_a);
  }

 private:
  std::optional<Eigen::Vector2d> reproject(const Eigen::Vector2d& px,
                                           const DepthMap& depth_src,
                                           const DepthMap& depth_dst, const Pose& pose,
                                           const Camera& cam_src,
                                           const Camera& cam_dst) const {
    auto d = depth_src.depth_at(px);
    if (!d) return std::nullopt;
    Eigen::Vector2d xn = cam_src.to_normalized(px);
    Eigen::Vector3d x_src(*d * xn.x(), *d * xn.y(), *d);
    Eigen::Vector3d x_dst = pose.apply(x_src);
    if (x_dst.z() <= 1e-9) return std::nullopt;
    Eigen::Vector2d px_dst = cam_dst.to_pixel(x_dst.hnormalized());
    if (!cam_dst.in_bounds(px_dst)) return std::nullopt;
    auto d_dst = depth_dst.depth_at(px_dst);
    if (!d_dst) return std::nullopt;
    if (std::abs(x_dst.z() - *d_dst) / *d_dst > depth_tolerance)
      return std::nullopt;  // occluded in the destination view
    return px_dst;
  }
};

// ---------------------------------------------------------------------------
// Detector metrics

struct KeypointMetrics {
  double repeatability = 0;          // correct / visible, both directions pooled
  double localization_error_px = 0;  // mean pixel error over the correct ones
  int num_visible = 0;
  int num_correct = 0;
};

namespace detail {

inline void shape_check(const LocalFeatureSet& f) {
  if (size_t(f.descriptors.rows()) != f.keypoints.size())
    throw_error(ErrorCode::kShapeMismatch, "descriptor rows do not match keypoints");
}

template <typename MapFn>
void nearest_keypoint_direction(const std::vector<Keypoint>& src,
                                const std::vector<Keypoint>& dst, MapFn&& to_dst,
                                double eps_px, int* visible, int* correct,
                                double* err_sum) {
  for (const Keypoint& kp : src) {
    auto gt = to_dst(Eigen::Vector2d(kp.x, kp.y));
    if (!gt) continue;
    ++*visible;
    double best = std::numeric_limits<double>::infinity();
    for (const Keypoint& cand : dst)
      best = std::min(best, (Eigen::Vector2d(cand.x, cand.y) - *gt).norm());
    if (best <= eps_px) {
      ++*correct;
      *err_sum += best;
    }
  }
}

}  // namespace detail

template <typename Gt>
KeypointMetrics keypoint_metrics(const LocalFeatureSet& a, const LocalFeatureSet& b,
                                 const Gt& gt, double eps_px = 3.0) {
  if (!(eps_px > 0)) throw_error(ErrorCode::kInvalidArgument, "eps_px must be positive");
  KeypointMetrics m;
  double err_sum = 0;
  detail::nearest_keypoint_direction(
      a.keypoints, b.keypoints, [&](const Eigen::Vector2d& p) { return gt.to_b(p); },
      eps_px, &m.num_visible, &m.num_correct, &err_sum);
  detail::nearest_keypoint_direction(
      b.keypoints, a.keypoints, [&](const Eigen::Vector2d& p) { return gt.to_a(p); },
      eps_px, &m.num_visible, &m.num_correct, &err_sum);
  if (m.num_visible == 0)
    throw_error(ErrorCode::kNoVisibleKeypoints, "no keypoints are covisible");
  m.repeatability = double(m.num_correct) / double(m.num_visible);
  m.localization_error_px = m.num_correct ? err_sum / double(m.num_correct) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Descriptor metrics

struct DescriptorMetrics {
  double matching_score = 0;          // correct NN matches / visible, pooled
  double mean_average_precision = 0;  // over A-side visible keypoints
  int num_visible = 0;
};

namespace detail {

// Descriptor NN by similarity, ties to the smaller index. Double precision
// accumulation keeps the ranking independent of summation order.
inline std::vector<int> nn_by_descriptor(const Eigen::MatrixXf& q, const Eigen::MatrixXf& t) {
  std::vector<int> nn(size_t(q.rows()), -1);
  for (int i = 0; i < q.rows(); ++i) {
    Eigen::VectorXd qi = q.row(i).cast<double>();
    double best = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < t.rows(); ++j) {
      double s = qi.dot(t.row(j).cast<double>());
      if (s > best) {
        best = s;
        nn[size_t(i)] = j;
      }
    }
  }
  return nn;
}

template <typename MapFn>
void matching_score_direction(const LocalFeatureSet& src, const LocalFeatureSet& dst,
                              MapFn&& to_dst, double eps_px, int* visible, int* correct) {
  std::vector<int> nn = nn_by_descriptor(src.descriptors, dst.descriptors);
  for (size_t i = 0; i < src.keypoints.size(); ++i) {
    auto gt = to_dst(Eigen::Vector2d(src.keypoints[i].x, src.keypoints[i].y));
    if (!gt) continue;
    ++*visible;
    if (nn[i] < 0) continue;
    const Keypoint& kp = dst.keypoints[size_t(nn[i])];
    if ((Eigen::Vector2d(kp.x, kp.y) - *gt).norm() <= eps_px) ++*correct;
  }
}

}  // namespace detail

template <typename Gt>
DescriptorMetrics descriptor_metrics(const LocalFeatureSet& a, const LocalFeatureSet& b,
                                     const Gt& gt, double eps_px = 3.0) {
  if (!(eps_px > 0)) throw_error(ErrorCode::kInvalidArgument, "eps_px must be positive");
  detail::shape_check(a);
  detail::shape_check(b);
  if (a.descriptors.cols() != b.descriptors.cols())
    throw_error(ErrorCode::kDimensionMismatch, "descriptor dims differ");

  DescriptorMetrics m;
  int correct = 0;
  detail::matching_score_direction(
      a, b, [&](const Eigen::Vector2d& p) { return gt.to_b(p); }, eps_px,
      &m.num_visible, &correct);
  detail::matching_score_direction(
      b, a, [&](const Eigen::Vector2d& p) { return gt.to_a(p); }, eps_px,
      &m.num_visible, &correct);
  if (m.num_visible == 0)
    throw_error(ErrorCode::kNoVisibleKeypoints, "no keypoints are covisible");
  m.matching_score = double(correct) / double(m.num_visible);

  // mAP, A to B: rank all B keypoints by similarity per visible A keypoint;
  // relevant targets are those within eps of the true position. AP uses the
  // precision at every relevant rank over the full relevant count.
  double ap_sum = 0;
  int ap_queries = 0;
  for (size_t i = 0; i < a.keypoints.size(); ++i) {
    auto gt_pos = gt.to_b(Eigen::Vector2d(a.keypoints[i].x, a.keypoints[i].y));
    if (!gt_pos) continue;
    ++ap_queries;
    Eigen::VectorXd qi = a.descriptors.row(int(i)).cast<double>();
    std::vector<std::pair<double, int>> ranked;
    ranked.reserve(size_t(b.descriptors.rows()));
    for (int j = 0; j < b.descriptors.rows(); ++j)
      ranked.emplace_back(-qi.dot(b.descriptors.row(j).cast<double>()), j);
    std::sort(ranked.begin(), ranked.end());

    int total_relevant = 0;
    for (const Keypoint& kp : b.keypoints)
      if ((Eigen::Vector2d(kp.x, kp.y) - *gt_pos).norm() <= eps_px) ++total_relevant;
    if (total_relevant == 0) continue;  // AP is 0, nothing to add

    int hits = 0;
    double ap = 0;
    for (size_t k = 0; k < ranked.size(); ++k) {
      const Keypoint& kp = b.keypoints[size_t(ranked[k].second)];
      if ((Eigen::Vector2d(kp.x, kp.y) - *gt_pos).norm() <= eps_px) {
        ++hits;
        ap += double(hits) / double(k + 1);
      }
    }
    ap_sum += ap / double(total_relevant);
  }
  m.mean_average_precision = ap_queries ? ap_sum / double(ap_queries) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Homography estimation and recall

namespace detail {

// Normalized DLT. Returns the unnormalized 3x3, or nothing when the
// configuration is too degenerate to solve.
inline std::optional<Eigen::Matrix3d> dlt_homography(
    const std::vector<Eigen::Vector2d>& pa, const std::vector<Eigen::Vector2d>& pb) {
  const size_t n = pa.size();
  if (n < 4 || pb.size() != n) return std::nullopt;

  auto normalizer = [](const std::vector<Eigen::Vector2d>& pts) -> std::optional<Eigen::Matrix3d> {
    Eigen::Vector2d c = Eigen::Vector2d::Zero();
    for (const auto& p : pts) c += p;
    c /= double(pts.size());
    double mean_dist = 0;
    for (const auto& p : pts) mean_dist += (p - c).norm();
    mean_dist /= double(pts.size());
    if (mean_dist < 1e-9) return std::nullopt;
    double s = std::sqrt(2.0) / mean_dist;
    Eigen::Matrix3d t;
    t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
    return t;
  };
  auto ta = normalizer(pa);
  auto tb = normalizer(pb);
  if (!ta || !tb) return std::nullopt;

  Eigen::MatrixXd m(2 * n, 9);
  for (size_t i = 0; i < n; ++i) {
    Eigen::Vector3d x = *ta * pa[i].homogeneous();
    Eigen::Vector3d y = *tb * pb[i].homogeneous();
    m.row(2 * i) << 0, 0, 0, -x.x(), -x.y(), -1, y.y() * x.x(), y.y() * x.y(), y.y();
    m.row(2 * i + 1) << x.x(), x.y(), 1, 0, 0, 0, -y.x() * x.x(), -y.x() * x.y(), -y.x();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullV);
  Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return Eigen::Matrix3d(tb->inverse() * hn * *ta);
}

}  // namespace detail

// RANSAC over 4-point DLT samples with a final refit on the inliers.
// Deterministic for a fixed seed.
inline std::optional<Homography> estimate_homography_ransac(
    const std::vector<Eigen::Vector2d>& pa, const std::vector<Eigen::Vector2d>& pb,
    double threshold_px = 3.0, uint64_t seed = 0, int max_iterations = 1000,
    double confidence = 0.999) {
  const size_t n = pa.size();
  if (n < 4 || pb.size() != n) return std::nullopt;

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, n - 1);

  auto inliers_of = [&](const Homography& h, std::vector<size_t>* idx) {
    idx->clear();
    for (size_t i = 0; i < n; ++i) {
      auto q = apply_homography(h, pa[i]);
      if (q && (*q - pb[i]).norm() <= threshold_px) idx->push_back(i);
    }
  };

  std::vector<size_t> inliers, best_inliers;
  int needed = max_iterations;
  for (int iter = 0; iter < needed; ++iter) {
    size_t s[4];
    s[0] = pick(rng);
    do { s[1] = pick(rng); } while (s[1] == s[0]);
    do { s[2] = pick(rng); } while (s[2] == s[0] || s[2] == s[1]);
    do { s[3] = pick(rng); } while (s[3] == s[0] || s[3] == s[1] || s[3] == s[2]);

    std::vector<Eigen::Vector2d> sa, sb;
    for (size_t k = 0; k < 4; ++k) {
      sa.push_back(pa[s[k]]);
      sb.push_back(pb[s[k]]);
    }
    auto hm = detail::dlt_homography(sa, sb);
    if (!hm) continue;
    std::optional<Homography> h;
    try {
      h = Homography(*hm);
    } catch (const Error&) {
      continue;  // singular sample
    }
    inliers_of(*h, &inliers);
    if (inliers.size() > best_inliers.size()) {
      best_inliers = inliers;
      double w = double(inliers.size()) / double(n);
      double p_good = w * w * w * w;
      if (p_good >= 1.0 - 1e-12) {
        needed = iter + 1;
      } else if (p_good > 0) {
        double want = std::log(1.0 - confidence) / std::log(1.0 - p_good);
        needed = int(std::min<double>(max_iterations, std::max(want, 1.0)));
      }
    }
  }
  if (best_inliers.size() < 4) return std::nullopt;

  std::vector<Eigen::Vector2d> ia, ib;
  for (size_t i : best_inliers) {
    ia.push_back(pa[i]);
    ib.push_back(pb[i]);
  }
  auto refit = detail::dlt_homography(ia, ib);
  if (refit) {
    try {
      return Homography(*refit);
    } catch (const Error&) {
    }
  }
  return std::nullopt;
}

namespace detail {

// Mutual descriptor NN matches as (pixel_a, pixel_b) lists.
inline void mutual_pixel_matches(const LocalFeatureSet& a, const LocalFeatureSet& b,
                                 std::vector<Eigen::Vector2d>* pa,
                                 std::vector<Eigen::Vector2d>* pb,
                                 std::vector<uint32_t>* idx_a = nullptr) {
  shape_check(a);
  shape_check(b);
  if (a.descriptors.cols() != b.descriptors.cols())
    throw_error(ErrorCode::kDimensionMismatch, "descriptor dims differ");
  std::vector<int> ab = nn_by_descriptor(a.descriptors, b.descriptors);
  std::vector<int> ba = nn_by_descriptor(b.descriptors, a.descriptors);
  for (size_t i = 0; i < ab.size(); ++i) {
    if (ab[i] < 0 || ba[size_t(ab[i])] != int(i)) continue;
    pa->emplace_back(a.keypoints[i].x, a.keypoints[i].y);
    pb->emplace_back(b.keypoints[size_t(ab[i])].x, b.keypoints[size_t(ab[i])].y);
    if (idx_a) idx_a->push_back(uint32_t(i));
  }
}

}  // namespace detail

struct HomographyPair {
  LocalFeatureSet a;
  LocalFeatureSet b;
  HomographyGt gt;
};

// Fraction of pairs whose estimated homography lands the four image-A
// corners within corner_px of the ground-truth mapping, on average.
inline double homography_recall(const std::vector<HomographyPair>& pairs,
                                double inlier_threshold_px = 3.0,
                                double corner_px = 3.0, uint64_t seed = 0) {
  if (pairs.empty()) throw_error(ErrorCode::kInvalidArgument, "no pairs given");
  int correct = 0;
  for (size_t pi = 0; pi < pairs.size(); ++pi) {
    const HomographyPair& pair = pairs[pi];
    std::vector<Eigen::Vector2d> pa, pb;
    detail::mutual_pixel_matches(pair.a, pair.b, &pa, &pb);
    if (pa.size() < 4) continue;
    auto est = estimate_homography_ransac(pa, pb, inlier_threshold_px,
                                          seed ^ fnv1a64(pair.a.image_id));
    if (!est) continue;

    const double w = pair.gt.width_a - 1.0;
    const double h = pair.gt.height_a - 1.0;
    const Eigen::Vector2d corners[4] = {{0, 0}, {w, 0}, {0, h}, {w, h}};
    double err_sum = 0;
    bool ok = true;
    for (const Eigen::Vector2d& c : corners) {
      auto pe = apply_homography(*est, c);
      auto pg = apply_homography(pair.gt.h_ab, c);
      if (!pe || !pg) {
        ok = false;
        break;
      }
      err_sum += (*pe - *pg).norm();
    }
    if (ok && err_sum / 4.0 < corner_px) ++correct;
  }
  return double(correct) / double(pairs.size());
}

struct SfmPair {
  LocalFeatureSet a;
  LocalFeatureSet b;
  SfmGt gt;
};

// Fraction of pairs whose relative pose, recovered by matching descriptors
// and solving 2D-3D against depth-lifted points of image A, lands within
// the given error bounds.
inline double relpose_recall(const std::vector<SfmPair>& pairs, double max_pos_m = 0.25,
                             double max_rot_deg = 2.0, uint64_t seed = 0) {
  if (pairs.empty()) throw_error(ErrorCode::kInvalidArgument, "no pairs given");
  RansacConfig cfg;
  cfg.reproj_threshold_px = 8.0;
  cfg.min_inliers = 4;
  cfg.confidence = 0.999;
  cfg.max_iterations = 1000;

  int correct = 0;
  for (size_t pi = 0; pi < pairs.size(); ++pi) {
    const SfmPair& pair = pairs[pi];
    std::vector<Eigen::Vector2d> pa, pb;
    detail::mutual_pixel_matches(pair.a, pair.b, &pa, &pb);

    std::vector<Eigen::Vector2d> pixels;
    std::vector<Eigen::Vector3d> points;
    for (size_t i = 0; i < pa.size(); ++i) {
      auto d = pair.gt.depth_a.depth_at(pa[i]);
      if (!d) continue;
      Eigen::Vector2d xn = pair.gt.camera_a.to_normalized(pa[i]);
      points.emplace_back(*d * xn.x(), *d * xn.y(), *d);
      pixels.push_back(pb[i]);
    }
    if (pixels.size() < 4) continue;

    cfg.seed = seed ^ fnv1a64(pair.a.image_id);
    PoseEstimate est = pnp_ransac(pair.gt.camera_b, pixels, points, cfg);
    if (!est.success) continue;
    double rot = rotation_angle_deg(est.pose, pair.gt.pose_ab);
    double pos = (est.pose.center() - pair.gt.pose_ab.center()).norm();
    if (rot <= max_rot_deg && pos <= max_pos_m) ++correct;
  }
  return double(correct) / double(pairs.size());
}

// ---------------------------------------------------------------------------
// Localization recall

struct LocalizationTier {
  double max_position_m = 0;
  double max_rotation_deg = 0;
};

inline std::vector<LocalizationTier> default_localization_tiers() {
  return {{0.25, 2.0}, {0.5, 5.0}, {5.0, 10.0}};
}

struct LocalizationSample {
  bool success = false;
  Pose estimate;
  Pose ground_truth;
};

// Percent of queries within each tier, in [0, 100]. Failed queries count
// against every tier.
inline std::vector<double> localization_recall(
    const std::vector<LocalizationSample>& samples,
    const std::vector<LocalizationTier>& tiers = default_localization_tiers()) {
  if (samples.empty()) throw_error(ErrorCode::kInvalidArgument, "no samples given");
  if (tiers.empty()) throw_error(ErrorCode::kInvalidArgument, "no tiers given");
  std::vector<double> recall(tiers.size(), 0.0);
  for (const LocalizationSample& s : samples) {
    if (!s.success) continue;
    double pos = (s.estimate.center() - s.ground_truth.center()).norm();
    double rot = rotation_angle_deg(s.estimate, s.ground_truth);
    for (size_t t = 0; t < tiers.size(); ++t)
      if (pos <= tiers[t].max_position_m && rot <= tiers[t].max_rotation_deg)
        recall[t] += 1.0;
  }
  for (double& r : recall) r = 100.0 * r / double(samples.size());
  return recall;
}

// Cumulative error curve: fraction of samples with error <= threshold, per
// threshold. Encode failures as +infinity so they never count.
inline std::vector<std::pair<double, double>> cumulative_curve(
    const std::vector<double>& errors, const std::vector<double>& thresholds) {
  if (errors.empty()) throw_error(ErrorCode::kInvalidArgument, "no errors given");
  std::vector<std::pair<double, double>> curve;
  curve.reserve(thresholds.size());
  for (double t : thresholds) {
    size_t n = 0;
    for (double e : errors) n += e <= t;
    curve.emplace_back(t, double(n) / double(errors.size()));
  }
  return curve;
}

}  // namespace hfloc
