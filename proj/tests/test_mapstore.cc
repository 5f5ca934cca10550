#include "hfloc/map_build.hpp"

#include <gtest/gtest.h>

#include <map>
#include <set>

#include "hfloc/map_io.hpp"
#include "hfloc/mapstore.hpp"
#include "hfloc/synth.hpp"
#include "test_util.hpp"

namespace hfloc {
namespace {

// Hand-buildable map: images with n keypoints each and explicit tracks.
SparseMap hand_map(const std::vector<std::pair<std::string, int>>& image_kps,
                   const std::vector<std::vector<TrackElement>>& tracks) {
  SparseMap map;
  for (const auto& [id, n] : image_kps) {
    DbImage im;
    im.image_id = id;
    im.camera = testutil::default_camera();
    im.pose = Pose::Identity();
    for (int i = 0; i < n; ++i)
      im.features.keypoints.push_back(Keypoint{float(10 * i), float(5 * i), 1.0f});
    im.features.descriptors = Eigen::MatrixXf::Identity(n, std::max(n, 4));
    im.features.global_descriptor = Eigen::VectorXf::Unit(4, 0);
    map.images.push_back(std::move(im));
  }
  std::sort(map.images.begin(), map.images.end(),
            [](const DbImage& a, const DbImage& b) { return a.image_id < b.image_id; });
  for (size_t t = 0; t < tracks.size(); ++t) {
    Point3D p;
    p.point_id = t;
    p.position = Eigen::Vector3d(double(t), 0, 5);
    p.track = tracks[t];
    p.mean_descriptor = Eigen::VectorXf::Unit(4, int(t) % 4);
    for (const TrackElement& te : p.track) {
      auto it = std::find_if(map.images.begin(), map.images.end(),
                             [&](const DbImage& im) { return im.image_id == te.image_id; });
      it->observations[te.keypoint_idx] = p.point_id;
    }
    map.points.push_back(std::move(p));
  }
  return map;
}

TEST(MapstoreStats, HandFixtureExact) {
  // 2 images x 5 keypoints, 3 points with track length 2 each:
  // 6 of 10 keypoints matched.
  SparseMap map = hand_map({{"a", 5}, {"b", 5}},
                           {{{"a", 0}, {"b", 0}},
                            {{"a", 1}, {"b", 1}},
                            {{"a", 2}, {"b", 2}}});
  ASSERT_TRUE(map.consistent());
  MapStats s = map_stats(map);
  EXPECT_EQ(s.num_points, 3u);
  EXPECT_DOUBLE_EQ(s.keypoints_per_image, 5.0);
  EXPECT_DOUBLE_EQ(s.matched_keypoint_ratio, 0.6);
  EXPECT_DOUBLE_EQ(s.mean_track_length, 2.0);
}

TEST(MapstoreStats, EmptyMapThrows) {
  SparseMap map;
  try {
    map_stats(map);
    FAIL() << "expected EmptyMap";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyMap);
  }
}

TEST(MapstoreStats, RatioGrowsWithObservations) {
  SparseMap sparse = hand_map({{"a", 5}, {"b", 5}}, {{{"a", 0}, {"b", 0}}});
  SparseMap dense = hand_map({{"a", 5}, {"b", 5}},
                             {{{"a", 0}, {"b", 0}}, {{"a", 1}, {"b", 1}}});
  EXPECT_LT(map_stats(sparse).matched_keypoint_ratio,
            map_stats(dense).matched_keypoint_ratio);
}

TEST(MapstoreCovis, DisjointAndMergedPlaces) {
  // a,b share point 0; c stands alone.
  SparseMap map = hand_map({{"a", 2}, {"b", 2}, {"c", 2}},
                           {{{"a", 0}, {"b", 0}}, {{"c", 0}, {"c", 1}}});
  auto places = covisibility_places(map, {{"a", 0.9}, {"b", 0.8}, {"c", 0.5}});
  ASSERT_EQ(places.size(), 2u);
  EXPECT_EQ(places[0].image_ids, (std::vector<std::string>{"a", "b"}));
  EXPECT_DOUBLE_EQ(places[0].total_score, 1.7);
  EXPECT_EQ(places[0].point_ids, (std::vector<uint64_t>{0}));
  EXPECT_EQ(places[1].image_ids, (std::vector<std::string>{"c"}));
  EXPECT_EQ(places[1].point_ids, (std::vector<uint64_t>{1}));
}

TEST(MapstoreCovis, ChainMergesTransitively) {
  SparseMap map = hand_map({{"a", 2}, {"b", 2}, {"c", 2}},
                           {{{"a", 0}, {"b", 0}}, {{"b", 1}, {"c", 0}}});
  auto places = covisibility_places(map, {{"a", 0.5}, {"b", 0.4}, {"c", 0.3}});
  ASSERT_EQ(places.size(), 1u);
  EXPECT_EQ(places[0].image_ids, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(places[0].point_ids, (std::vector<uint64_t>{0, 1}));
}

TEST(MapstoreCovis, MinSharedPointsSplits) {
  // a and b share exactly one point.
  SparseMap map = hand_map({{"a", 3}, {"b", 3}},
                           {{{"a", 0}, {"b", 0}}, {{"a", 1}, {"a", 2}}});
  EXPECT_EQ(covisibility_places(map, {{"a", 1.0}, {"b", 0.9}}, 1).size(), 1u);
  EXPECT_EQ(covisibility_places(map, {{"a", 1.0}, {"b", 0.9}}, 2).size(), 2u);
}

TEST(MapstoreCovis, DuplicatePriorKeepsBestScore) {
  SparseMap map = hand_map({{"a", 2}}, {{{"a", 0}, {"a", 1}}});
  auto places = covisibility_places(map, {{"a", 0.3}, {"a", 0.8}, {"a", 0.5}});
  ASSERT_EQ(places.size(), 1u);
  EXPECT_DOUBLE_EQ(places[0].total_score, 0.8);
}

TEST(MapstoreCovis, UnknownImageThrows) {
  SparseMap map = hand_map({{"a", 2}}, {});
  try {
    covisibility_places(map, {{"nope", 1.0}});
    FAIL() << "expected UnknownImage";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownImage);
  }
}

// Oracle: covisibility clustering is connected components by BFS over the
// shared-point graph.
TEST(MapstoreCovis, MatchesBfsOracleOnRandomMaps) {
  auto rng = testutil::rng(301);
  for (int trial = 0; trial < 200; ++trial) {
    int num_images = 3 + int(rng() % 6);
    int num_points = 5 + int(rng() % 26);
    int min_shared = 1 + int(rng() % 3);

    std::vector<std::pair<std::string, int>> imgs;
    for (int i = 0; i < num_images; ++i)
      imgs.emplace_back(std::string("im") + char('a' + i), num_points);
    // Random tracks: each point observed by a random subset of images.
    std::vector<std::vector<TrackElement>> tracks;
    for (int p = 0; p < num_points; ++p) {
      std::vector<TrackElement> track;
      for (int i = 0; i < num_images; ++i)
        if (rng() % 3 == 0) track.push_back(TrackElement{imgs[i].first, uint32_t(p)});
      if (track.empty()) track.push_back(TrackElement{imgs[0].first, uint32_t(p)});
      tracks.push_back(track);
    }
    SparseMap map = hand_map(imgs, tracks);
    ASSERT_TRUE(map.consistent());

    std::vector<std::pair<std::string, double>> priors;
    for (int i = 0; i < num_images; ++i)
      if (rng() % 4 != 0)
        priors.emplace_back(imgs[i].first, double(rng() % 1000) / 1000.0);
    if (priors.empty()) priors.emplace_back(imgs[0].first, 0.5);

    auto places = covisibility_places(map, priors, min_shared);

    // BFS oracle over the prior frames.
    auto points_of = [&](const std::string& id) {
      std::set<uint64_t> pts;
      for (const auto& [kp, pid] : map.find_image(id)->observations) pts.insert(pid);
      return pts;
    };
    auto shared = [&](const std::string& a, const std::string& b) {
      std::set<uint64_t> pa = points_of(a);
      int n = 0;
      for (uint64_t p : points_of(b)) n += pa.count(p) > 0;
      return n;
    };
    std::vector<std::string> ids;
    for (const auto& [id, s] : priors)
      if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
    std::set<std::set<std::string>> oracle_groups;
    std::set<std::string> seen;
    for (const std::string& start : ids) {
      if (seen.count(start)) continue;
      std::set<std::string> group;
      std::vector<std::string> queue{start};
      while (!queue.empty()) {
        std::string cur = queue.back();
        queue.pop_back();
        if (!group.insert(cur).second) continue;
        for (const std::string& other : ids)
          if (!group.count(other) && shared(cur, other) >= min_shared)
            queue.push_back(other);
      }
      for (const std::string& g : group) seen.insert(g);
      oracle_groups.insert(group);
    }

    std::set<std::set<std::string>> got_groups;
    for (const Place& pl : places)
      got_groups.insert(std::set<std::string>(pl.image_ids.begin(), pl.image_ids.end()));
    EXPECT_EQ(got_groups, oracle_groups) << "trial " << trial;

    // Scores are descending and point sets are the union over members.
    for (size_t i = 1; i < places.size(); ++i)
      EXPECT_GE(places[i - 1].total_score, places[i].total_score);
    for (const Place& pl : places) {
      std::set<uint64_t> want;
      for (const std::string& id : pl.image_ids)
        for (uint64_t p : points_of(id)) want.insert(p);
      EXPECT_EQ(std::set<uint64_t>(pl.point_ids.begin(), pl.point_ids.end()), want);
    }
  }
}

// Three cameras on an arc looking at a point cloud; exact projections.
struct BuildFixture {
  std::vector<Eigen::Vector3d> gt_points;
  std::vector<LocalFeatureSet> features;
  std::map<std::string, Pose> poses;
  std::map<std::string, Camera> cameras;
  std::vector<std::pair<std::string, std::string>> pairs;
};

BuildFixture make_build_fixture(int num_points, double pixel_sigma, uint64_t seed,
                                const std::vector<double>& angles_deg = {0, 30, 60}) {
  BuildFixture fx;
  auto rng = testutil::rng(seed);
  std::uniform_real_distribution<double> upos(-1.5, 1.5);
  std::normal_distribution<double> noise(0.0, 1.0);
  Camera cam = testutil::default_camera();

  std::vector<std::string> ids;
  for (size_t i = 0; i < angles_deg.size(); ++i) {
    std::string id(1, char('a' + i));
    ids.push_back(id);
    double th = deg2rad(angles_deg[i]);
    fx.poses.emplace(id, look_at_pose(Eigen::Vector3d(10 * std::cos(th),
                                                      10 * std::sin(th), 0.2),
                                      Eigen::Vector3d::Zero()));
    fx.cameras.emplace(id, cam);
  }

  Eigen::MatrixXf descs = testutil::random_unit_rows(rng, num_points, 32);
  std::vector<LocalFeatureSet> sets(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) sets[i].image_id = ids[i];

  for (int p = 0; p < num_points; ++p) {
    Eigen::Vector3d x(upos(rng), upos(rng), upos(rng));
    fx.gt_points.push_back(x);
    for (size_t i = 0; i < ids.size(); ++i) {
      auto px = project(fx.poses.at(ids[i]), cam, x);
      Eigen::Vector2d obs = *px;
      if (pixel_sigma > 0) obs += pixel_sigma * Eigen::Vector2d(noise(rng), noise(rng));
      sets[i].keypoints.push_back(Keypoint{float(obs.x()), float(obs.y()), 1.0f});
    }
  }
  for (size_t i = 0; i < ids.size(); ++i) {
    sets[i].descriptors = descs;
    sets[i].global_descriptor = Eigen::VectorXf::Unit(8, int(i));
    fx.features.push_back(std::move(sets[i]));
  }
  for (size_t i = 0; i < ids.size(); ++i)
    for (size_t j = i + 1; j < ids.size(); ++j) fx.pairs.emplace_back(ids[i], ids[j]);
  return fx;
}

TEST(MapstoreBuild, NoiselessRecoversEveryPoint) {
  BuildFixture fx = make_build_fixture(200, 0.0, 401);
  SparseMap map = build_map(fx.features, fx.poses, fx.cameras, fx.pairs);
  ASSERT_TRUE(map.consistent());
  ASSERT_EQ(map.points.size(), 200u);
  for (const Point3D& p : map.points) {
    EXPECT_EQ(p.track.size(), 3u);
    // Keypoint index in image "a" identifies the source point.
    uint32_t src = p.track[0].keypoint_idx;
    EXPECT_EQ(p.track[0].image_id, "a");
    EXPECT_LT((p.position - fx.gt_points[src]).norm(), 1e-4);
    EXPECT_NEAR(p.mean_descriptor.norm(), 1.0, 1e-5);
  }
  MapStats s = map_stats(map);
  EXPECT_DOUBLE_EQ(s.matched_keypoint_ratio, 1.0);
  EXPECT_DOUBLE_EQ(s.mean_track_length, 3.0);
}

TEST(MapstoreBuild, SingleImageYieldsNoPoints) {
  BuildFixture fx = make_build_fixture(50, 0.0, 402);
  std::vector<LocalFeatureSet> one{fx.features[0]};
  SparseMap map = build_map(one, fx.poses, fx.cameras, {});
  EXPECT_TRUE(map.consistent());
  EXPECT_TRUE(map.points.empty());
  EXPECT_DOUBLE_EQ(map_stats(map).matched_keypoint_ratio, 0.0);
}

TEST(MapstoreBuild, MissingInputsThrow) {
  BuildFixture fx = make_build_fixture(10, 0.0, 403);
  auto poses = fx.poses;
  poses.erase("b");
  try {
    build_map(fx.features, poses, fx.cameras, fx.pairs);
    FAIL() << "expected MissingPose";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingPose);
  }
  auto cams = fx.cameras;
  cams.erase("c");
  try {
    build_map(fx.features, fx.poses, cams, fx.pairs);
    FAIL() << "expected MissingCamera";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingCamera);
  }
  auto pairs = fx.pairs;
  pairs.emplace_back("a", "zzz");
  try {
    build_map(fx.features, fx.poses, fx.cameras, pairs);
    FAIL() << "expected MissingFeatures";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingFeatures);
  }
}

TEST(MapstoreBuild, NoisyRecoversMostPointsWithinBound) {
  const double sigma = 1.0;
  BuildFixture fx = make_build_fixture(200, sigma, 404);
  MapBuildConfig cfg;
  cfg.epipolar_px = 8.0;
  cfg.max_reprojection_px = 8.0;
  SparseMap map = build_map(fx.features, fx.poses, fx.cameras, fx.pairs, cfg);
  ASSERT_TRUE(map.consistent());
  EXPECT_GE(map.points.size(), 190u);  // >= 95% of 200 survive the gates

  // Monte-Carlo bound: re-triangulate each recovered point 50 times from
  // the widest camera pair with fresh noise; the map's error should stay
  // within 3x that RMS.
  auto noise_rng = testutil::rng(9090);
  std::normal_distribution<double> noise(0.0, sigma);
  const Pose& pa = fx.poses.at("a");
  const Pose& pc = fx.poses.at("c");
  const Camera& cam = fx.cameras.at("a");
  int within = 0;
  for (const Point3D& p : map.points) {
    uint32_t src = p.track[0].keypoint_idx;
    const Eigen::Vector3d& gt = fx.gt_points[src];
    double sq_sum = 0;
    for (int s = 0; s < 50; ++s) {
      Eigen::Vector2d qa = *project(pa, cam, gt) + sigma * Eigen::Vector2d(noise(noise_rng), noise(noise_rng));
      Eigen::Vector2d qc = *project(pc, cam, gt) + sigma * Eigen::Vector2d(noise(noise_rng), noise(noise_rng));
      Triangulation t = triangulate_two_view(pa, pc, cam, cam, qa, qc);
      if (t.ok()) sq_sum += (t.point - gt).squaredNorm();
    }
    double rms = std::sqrt(sq_sum / 50.0);
    if ((p.position - gt).norm() <= 3.0 * rms) ++within;
  }
  EXPECT_GE(double(within), 0.95 * double(map.points.size()));
}

TEST(MapstoreBuild, ReprojectionGateHolds) {
  BuildFixture fx = make_build_fixture(150, 1.0, 405);
  MapBuildConfig cfg;
  cfg.epipolar_px = 8.0;
  cfg.max_reprojection_px = 8.0;
  SparseMap map = build_map(fx.features, fx.poses, fx.cameras, fx.pairs, cfg);
  for (const Point3D& p : map.points) {
    for (const TrackElement& te : p.track) {
      const DbImage* im = map.find_image(te.image_id);
      ASSERT_NE(im, nullptr);
      auto px = project(im->pose, im->camera, p.position);
      ASSERT_TRUE(px.has_value());
      const Keypoint& kp = im->features.keypoints[te.keypoint_idx];
      EXPECT_LE((*px - Eigen::Vector2d(kp.x, kp.y)).norm(), cfg.max_reprojection_px + 1e-9);
    }
  }
}

TEST(MapstoreBuild, SameImageConflictKeepsBetterResidual) {
  // One 3D point seen by images a, b, c. Image a carries a second keypoint
  // whose descriptor also matches transitively (via c), at a worse pixel.
  Camera cam = testutil::default_camera();
  Eigen::Vector3d x(0.2, -0.1, 0.3);
  std::map<std::string, Pose> poses;
  std::map<std::string, Camera> cameras;
  for (int i = 0; i < 3; ++i) {
    std::string id(1, char('a' + i));
    double th = deg2rad(30.0 * i);
    poses.emplace(id, look_at_pose(Eigen::Vector3d(8 * std::cos(th), 8 * std::sin(th), 0.1),
                                   Eigen::Vector3d::Zero()));
    cameras.emplace(id, cam);
  }

  auto unit = [](std::initializer_list<float> v) {
    Eigen::VectorXf d(8);
    int i = 0;
    for (float f : v) d(i++) = f;
    return d.normalized().eval();
  };
  Eigen::VectorXf a0 = unit({1, 0.10f, 0, 0, 0, 0, 0, 0});
  Eigen::VectorXf a1 = unit({1, -0.10f, 0, 0, 0, 0, 0, 0});
  Eigen::VectorXf b0 = unit({1, 0.12f, 0, 0, 0, 0, 0, 0});
  Eigen::VectorXf c0 = unit({1, -0.12f, 0, 0, 0, 0, 0, 0});

  std::vector<LocalFeatureSet> feats(3);
  const char* ids[3] = {"a", "b", "c"};
  Eigen::VectorXf fillers[3] = {Eigen::VectorXf::Unit(8, 2), Eigen::VectorXf::Unit(8, 3),
                                Eigen::VectorXf::Unit(8, 4)};
  for (int i = 0; i < 3; ++i) {
    feats[i].image_id = ids[i];
    Eigen::Vector2d px = *project(poses.at(ids[i]), cam, x);
    feats[i].keypoints.push_back(Keypoint{float(px.x()), float(px.y()), 1.0f});
    if (i == 0)  // the conflicting duplicate, 3px off
      feats[i].keypoints.push_back(Keypoint{float(px.x() + 3.0), float(px.y()), 0.9f});
    feats[i].keypoints.push_back(Keypoint{50.0f, 60.0f, 0.5f});
    int n = int(feats[i].keypoints.size());
    feats[i].descriptors.resize(n, 8);
    feats[i].descriptors.row(0) = (i == 0 ? a0 : (i == 1 ? b0 : c0)).transpose();
    if (i == 0) feats[i].descriptors.row(1) = a1.transpose();
    feats[i].descriptors.row(n - 1) = fillers[i].transpose();
    feats[i].global_descriptor = Eigen::VectorXf::Unit(4, i);
  }

  MapBuildConfig cfg;
  cfg.epipolar_px = 10.0;
  cfg.max_reprojection_px = 10.0;
  SparseMap map = build_map(feats, poses, cameras,
                            {{"a", "b"}, {"b", "c"}, {"a", "c"}}, cfg);
  ASSERT_TRUE(map.consistent());
  ASSERT_EQ(map.points.size(), 1u);
  const Point3D& p = map.points[0];
  EXPECT_EQ(p.track.size(), 3u);
  for (const TrackElement& te : p.track)
    if (te.image_id == "a") EXPECT_EQ(te.keypoint_idx, 0u);  // better residual won
  EXPECT_LT((p.position - x).norm(), 1e-4);
}

TEST(MapstoreIo, RoundTripIsBitExact) {
  BuildFixture fx = make_build_fixture(60, 0.5, 406);
  MapBuildConfig cfg;
  cfg.epipolar_px = 8.0;
  cfg.max_reprojection_px = 8.0;
  SparseMap map = build_map(fx.features, fx.poses, fx.cameras, fx.pairs, cfg);
  map.metadata = "arc fixture, metric scale";

  auto rng = testutil::rng(407);
  Eigen::MatrixXd globals(10, 16);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 16; ++c) globals(r, c) = gauss(rng);
  map.pca = fit_pca(globals, 4);

  std::vector<char> buf = serialize_map(map);
  SparseMap loaded = parse_map(buf);

  EXPECT_EQ(loaded.metadata, map.metadata);
  ASSERT_EQ(loaded.images.size(), map.images.size());
  for (size_t i = 0; i < map.images.size(); ++i) {
    const DbImage& a = map.images[i];
    const DbImage& b = loaded.images[i];
    EXPECT_EQ(a.image_id, b.image_id);
    EXPECT_EQ(a.camera.fx, b.camera.fx);
    EXPECT_EQ(a.camera.k1, b.camera.k1);
    EXPECT_EQ(a.camera.width, b.camera.width);
    EXPECT_EQ(a.pose.q.coeffs(), b.pose.q.coeffs());
    EXPECT_EQ(a.pose.t, b.pose.t);
    ASSERT_EQ(a.features.keypoints.size(), b.features.keypoints.size());
    for (size_t k = 0; k < a.features.keypoints.size(); ++k) {
      EXPECT_EQ(a.features.keypoints[k].x, b.features.keypoints[k].x);
      EXPECT_EQ(a.features.keypoints[k].score, b.features.keypoints[k].score);
    }
    EXPECT_TRUE(a.features.descriptors.isApprox(b.features.descriptors, 0));
    EXPECT_TRUE(a.features.global_descriptor.isApprox(b.features.global_descriptor, 0));
    EXPECT_EQ(a.observations, b.observations);
  }
  ASSERT_EQ(loaded.points.size(), map.points.size());
  for (size_t i = 0; i < map.points.size(); ++i) {
    EXPECT_EQ(loaded.points[i].point_id, map.points[i].point_id);
    EXPECT_EQ(loaded.points[i].position, map.points[i].position);
    EXPECT_EQ(loaded.points[i].track, map.points[i].track);
    EXPECT_TRUE(loaded.points[i].mean_descriptor.isApprox(map.points[i].mean_descriptor, 0));
  }
  ASSERT_TRUE(loaded.pca.has_value());
  EXPECT_TRUE(loaded.pca->mean.isApprox(map.pca->mean, 0));
  EXPECT_TRUE(loaded.pca->basis.isApprox(map.pca->basis, 0));
  EXPECT_TRUE(loaded.pca->eigenvalues.isApprox(map.pca->eigenvalues, 0));
  EXPECT_EQ(loaded.pca->reduced_rank, map.pca->reduced_rank);

  // Strongest form: re-serializing reproduces the identical byte stream.
  EXPECT_EQ(serialize_map(loaded), buf);
}

TEST(MapstoreIo, EmptyMapRoundTrips) {
  SparseMap map;
  map.metadata = "empty";
  SparseMap loaded = parse_map(serialize_map(map));
  EXPECT_TRUE(loaded.images.empty());
  EXPECT_TRUE(loaded.points.empty());
  EXPECT_FALSE(loaded.pca.has_value());
  EXPECT_EQ(loaded.metadata, "empty");
}

TEST(MapstoreIo, TruncationRejected) {
  BuildFixture fx = make_build_fixture(20, 0.0, 408);
  SparseMap map = build_map(fx.features, fx.poses, fx.cameras, fx.pairs);
  std::vector<char> buf = serialize_map(map);
  for (size_t keep : {buf.size() - 1, buf.size() / 2, size_t(40), size_t(3)}) {
    std::vector<char> cut(buf.begin(), buf.begin() + keep);
    try {
      parse_map(cut);
      FAIL() << "expected CorruptFile at size " << keep;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kCorruptFile);
    }
  }
}

TEST(MapstoreIo, AnySingleByteFlipRejected) {
  BuildFixture fx = make_build_fixture(15, 0.0, 409);
  SparseMap map = build_map(fx.features, fx.poses, fx.cameras, fx.pairs);
  std::vector<char> buf = serialize_map(map);
  auto rng = testutil::rng(410);
  std::vector<size_t> positions = {0, 1, 4, 5, buf.size() - 1, buf.size() - 4};
  for (int i = 0; i < 40; ++i) positions.push_back(rng() % buf.size());
  for (size_t pos : positions) {
    std::vector<char> bad = buf;
    bad[pos] = char(bad[pos] ^ 0x5a);
    try {
      parse_map(bad);
      FAIL() << "expected CorruptFile at byte " << pos;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kCorruptFile) << "byte " << pos;
    }
  }
}

TEST(MapstoreIo, FutureVersionRejected) {
  SparseMap map = hand_map({{"a", 2}}, {{{"a", 0}, {"a", 1}}});
  std::vector<char> buf = serialize_map(map);
  // Bump the version field (offset 4, little-endian u32) and refresh the
  // trailing checksum so only the version check can object.
  buf[4] = char(uint8_t(buf[4]) + 1);
  uint32_t crc = crc32_bytes(buf.data(), buf.size() - 4);
  for (int i = 0; i < 4; ++i) buf[buf.size() - 4 + i] = char((crc >> (8 * i)) & 0xff);
  try {
    parse_map(buf);
    FAIL() << "expected VersionMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kVersionMismatch);
  }
}

TEST(MapstoreIo, FileRoundTrip) {
  BuildFixture fx = make_build_fixture(25, 0.0, 411);
  SparseMap map = build_map(fx.features, fx.poses, fx.cameras, fx.pairs);
  std::string path = testing::TempDir() + "/hfloc_map_roundtrip.hfnm";
  write_map_file(path, map);
  SparseMap loaded = read_map_file(path);
  EXPECT_EQ(serialize_map(loaded), serialize_map(map));
  std::remove(path.c_str());
}

}  // namespace
}  // namespace hfloc
