// hfloc: command-line front end for the localization toolkit. Subcommands
// cover synthetic scene generation, map construction and inspection,
// localization with a per-stage timing report, the local-feature and
// localization evaluation suites, and the distillation gradient check.
//
// Exit codes: 0 success, 1 domain error (one-line diagnostic on stderr),
// 2 usage error. Usage errors are raised before any output file is opened.

#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "hfloc/distill.hpp"
#include "hfloc/evalbench.hpp"
#include "hfloc/feature_io.hpp"
#include "hfloc/localizer.hpp"
#include "hfloc/map_build.hpp"
#include "hfloc/map_io.hpp"
#include "hfloc/synth.hpp"
#include "hfloc/text_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("HFLOC_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc ? int(hc) : 1;
}

// Runs job(0..n-1) on a worker pool and hands results to emit in index
// order (reordering buffer), so output files are identical for any thread
// count. The first exception aborts the pool and is rethrown here.
template <typename Result, typename Job, typename Emit>
void run_ordered(size_t n, int threads, Job&& job, Emit&& emit) {
  if (n == 0) return;
  if (threads <= 1 || n == 1) {
    for (size_t i = 0; i < n; ++i) {
      Result r = job(i);
      emit(r);
    }
    return;
  }

  std::mutex mu;
  std::condition_variable cv;
  std::vector<std::unique_ptr<Result>> slots(n);
  std::exception_ptr failure;
  std::atomic<size_t> next{0};

  auto worker = [&] {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= n) return;
      {
        std::lock_guard<std::mutex> lk(mu);
        if (failure) return;
      }
      try {
        auto r = std::make_unique<Result>(job(i));
        std::lock_guard<std::mutex> lk(mu);
        slots[i] = std::move(r);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu);
        if (!failure) failure = std::current_exception();
      }
      cv.notify_all();
    }
  };

  std::vector<std::thread> pool;
  size_t num_workers = std::min<size_t>(size_t(threads), n);
  pool.reserve(num_workers);
  for (size_t t = 0; t < num_workers; ++t) pool.emplace_back(worker);

  try {
    std::unique_lock<std::mutex> lk(mu);
    for (size_t done = 0; done < n; ++done) {
      cv.wait(lk, [&] { return slots[done] != nullptr || failure; });
      if (failure) break;
      std::unique_ptr<Result> r = std::move(slots[done]);
      lk.unlock();
      emit(*r);
      lk.lock();
    }
  } catch (...) {
    std::lock_guard<std::mutex> lk(mu);
    if (!failure) failure = std::current_exception();
  }
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

hfloc::LocalFeatureSet load_feature_set(const std::string& dir, const std::string& id) {
  return hfloc::read_feature_file((fs::path(dir) / (id + ".hfnf")).string()).features;
}

json parse_json_line(const std::string& line, const std::string& context) {
  try {
    return json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    hfloc::throw_error(hfloc::ErrorCode::kParseError, context + ": " + e.what());
  }
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& context) {
  for (const auto& item : j.items())
    if (!known.count(item.key()))
      hfloc::throw_error(hfloc::ErrorCode::kParseError,
                         context + ": unknown key '" + item.key() + "'");
}

// ---------------------------------------------------------------------------
// synth

struct SynthOpts {
  std::string spec_path;
  std::string out_dir;
};

hfloc::SceneSpec parse_scene_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) hfloc::throw_error(hfloc::ErrorCode::kIoError, "cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    hfloc::throw_error(hfloc::ErrorCode::kParseError, path + ": " + e.what());
  }
  reject_unknown_keys(j,
                      {"num_points", "extent_m", "num_db_cameras", "num_query_cameras",
                       "camera", "pixel_noise_sigma", "descriptor_noise_sigma",
                       "outlier_fraction", "descriptor_dim", "global_dim", "seed"},
                      path);
  hfloc::SceneSpec spec;
  try {
    if (j.contains("num_points")) spec.num_points = j["num_points"].get<int>();
    if (j.contains("extent_m")) spec.extent_m = j["extent_m"].get<double>();
    if (j.contains("num_db_cameras")) spec.num_db_cameras = j["num_db_cameras"].get<int>();
    if (j.contains("num_query_cameras"))
      spec.num_query_cameras = j["num_query_cameras"].get<int>();
    if (j.contains("camera"))
      spec.camera = hfloc::parse_camera_spec(j["camera"].get<std::string>(), path);
    if (j.contains("pixel_noise_sigma"))
      spec.pixel_noise_sigma = j["pixel_noise_sigma"].get<double>();
    if (j.contains("descriptor_noise_sigma"))
      spec.descriptor_noise_sigma = j["descriptor_noise_sigma"].get<double>();
    if (j.contains("outlier_fraction"))
      spec.outlier_fraction = j["outlier_fraction"].get<double>();
    if (j.contains("descriptor_dim")) spec.descriptor_dim = j["descriptor_dim"].get<int>();
    if (j.contains("global_dim")) spec.global_dim = j["global_dim"].get<int>();
    if (j.contains("seed")) spec.seed = j["seed"].get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    hfloc::throw_error(hfloc::ErrorCode::kParseError, path + ": " + e.what());
  }
  spec.validate();
  return spec;
}

void run_synth(const SynthOpts& opts) {
  hfloc::SceneSpec spec = parse_scene_spec(opts.spec_path);
  hfloc::Scene scene = hfloc::make_scene(spec);

  fs::path out(opts.out_dir);
  fs::create_directories(out / "features");

  std::vector<std::pair<std::string, hfloc::Pose>> db_poses, query_poses;
  std::vector<std::pair<std::string, hfloc::Camera>> cameras;
  std::vector<std::string> db_ids, query_ids;
  json gt_obs = json::object();

  auto emit_view = [&](const std::string& id, const hfloc::Pose& pose) {
    hfloc::RenderedView rv = hfloc::render_view(scene, pose, id);
    hfloc::write_feature_file((out / "features" / (id + ".hfnf")).string(), rv.features);
    json arr = json::array();
    for (const auto& [kp, pt] : rv.gt_observations) arr.push_back(json{kp, pt});
    gt_obs[id] = std::move(arr);
    cameras.emplace_back(id, spec.camera);
  };

  for (int i = 0; i < spec.num_db_cameras; ++i) {
    std::string id = hfloc::db_image_id(i);
    emit_view(id, scene.db_poses[size_t(i)]);
    db_poses.emplace_back(id, scene.db_poses[size_t(i)]);
    db_ids.push_back(id);
  }
  for (int i = 0; i < spec.num_query_cameras; ++i) {
    std::string id = hfloc::query_image_id(i);
    emit_view(id, scene.query_poses[size_t(i)]);
    query_poses.emplace_back(id, scene.query_poses[size_t(i)]);
    query_ids.push_back(id);
  }

  std::vector<std::pair<std::string, std::string>> pairs;
  for (size_t i = 0; i < db_ids.size(); ++i)
    for (size_t j = i + 1; j < db_ids.size(); ++j) pairs.emplace_back(db_ids[i], db_ids[j]);

  hfloc::write_pose_list((out / "db_poses.txt").string(), db_poses);
  hfloc::write_pose_list((out / "query_gt_poses.txt").string(), query_poses);
  hfloc::write_camera_list((out / "cameras.txt").string(), cameras);
  hfloc::write_pair_list((out / "pairs.txt").string(), pairs);
  hfloc::write_id_list((out / "db_images.txt").string(), db_ids);
  hfloc::write_id_list((out / "queries.txt").string(), query_ids);
  {
    std::ofstream go(out / "gt_observations.json");
    if (!go) hfloc::throw_error(hfloc::ErrorCode::kIoError, "cannot write gt_observations.json");
    go << gt_obs.dump(2) << '\n';
  }

  std::printf("scene: %d points, %d db views, %d queries -> %s\n", spec.num_points,
              spec.num_db_cameras, spec.num_query_cameras, opts.out_dir.c_str());
}

// ---------------------------------------------------------------------------
// build-map

struct BuildMapOpts {
  std::string features_dir, poses_path, cameras_path, pairs_path, out_path;
  std::string metadata;
  double ratio = 0.9;
  double epipolar_px = 4.0;
  double reproj_px = 4.0;
  double min_angle_deg = 1.0;
  int min_track = 2;
  int pca_dim = 1024;
};

void run_build_map(const BuildMapOpts& opts) {
  auto poses = hfloc::read_pose_list(opts.poses_path);
  if (poses.empty())
    hfloc::throw_error(hfloc::ErrorCode::kParseError, opts.poses_path + ": no poses");
  auto cameras = hfloc::read_camera_list(opts.cameras_path);
  auto pairs = hfloc::read_pair_list(opts.pairs_path);

  std::vector<hfloc::LocalFeatureSet> features;
  features.reserve(poses.size());
  for (const auto& [id, pose] : poses) features.push_back(load_feature_set(opts.features_dir, id));

  hfloc::MapBuildConfig cfg;
  cfg.ratio = opts.ratio;
  cfg.epipolar_px = opts.epipolar_px;
  cfg.max_reprojection_px = opts.reproj_px;
  cfg.min_triangulation_angle_deg = opts.min_angle_deg;
  cfg.min_track_length = opts.min_track;

  hfloc::SparseMap map = hfloc::build_map(features, poses, cameras, pairs, cfg);
  map.metadata = opts.metadata;

  if (opts.pca_dim > 0) {
    Eigen::Index g = map.images[0].features.global_descriptor.size();
    bool uniform = g > 0;
    for (const auto& im : map.images)
      uniform = uniform && im.features.global_descriptor.size() == g;
    if (!uniform)
      hfloc::throw_error(hfloc::ErrorCode::kDimensionMismatch,
                         "global descriptor dims differ across images");
    if (map.images.size() < 2) {
      std::printf("pca: skipped (needs at least 2 images)\n");
    } else {
      Eigen::MatrixXd m(Eigen::Index(map.images.size()), g);
      for (size_t i = 0; i < map.images.size(); ++i)
        m.row(Eigen::Index(i)) = map.images[i].features.global_descriptor.cast<double>();
      hfloc::PcaModel model = hfloc::fit_pca(m, opts.pca_dim);
      if (model.output_dim() < 1) {
        std::printf("pca: skipped (degenerate global descriptors)\n");
      } else {
        if (model.reduced_rank)
          std::printf("pca: requested %d dims, kept %d (rank limit)\n", opts.pca_dim,
                      model.output_dim());
        map.pca = std::move(model);
      }
    }
  }

  hfloc::write_map_file(opts.out_path, map);

  hfloc::MapStats s = hfloc::map_stats(map);
  std::printf("map: %zu images, %zu points -> %s\n", map.images.size(), map.points.size(),
              opts.out_path.c_str());
  std::printf("keypoints_per_image: %s\n", hfloc::detail::fmt_double(s.keypoints_per_image).c_str());
  std::printf("matched_keypoint_ratio: %s\n",
              hfloc::detail::fmt_double(s.matched_keypoint_ratio).c_str());
  std::printf("mean_track_length: %s\n", hfloc::detail::fmt_double(s.mean_track_length).c_str());
}

// ---------------------------------------------------------------------------
// map-stats

void run_map_stats(const std::string& map_path) {
  hfloc::SparseMap map = hfloc::read_map_file(map_path);
  hfloc::MapStats s = hfloc::map_stats(map);
  std::printf("num_points: %zu\n", s.num_points);
  std::printf("keypoints_per_image: %s\n", hfloc::detail::fmt_double(s.keypoints_per_image).c_str());
  std::printf("matched_keypoint_ratio: %s\n",
              hfloc::detail::fmt_double(s.matched_keypoint_ratio).c_str());
  std::printf("mean_track_length: %s\n", hfloc::detail::fmt_double(s.mean_track_length).c_str());
}

// ---------------------------------------------------------------------------
// localize

struct LocalizeOpts {
  std::string map_path, features_dir, cameras_path, queries_path, out_path;
  int knn = 10;
  double ratio = 0.9;
  double reproj_px = 10.0;
  int min_inliers = 12;
  int max_iters = 5000;
  int max_kpts = 2000;
  double nms_radius = 4.0;
  int covis_min_shared = 1;
  uint64_t seed = 0;
  int threads = 0;
};

void run_localize(const LocalizeOpts& opts) {
  hfloc::SparseMap map = hfloc::read_map_file(opts.map_path);
  hfloc::GlobalIndex index = hfloc::build_global_index(map);
  auto cameras = hfloc::read_camera_list(opts.cameras_path);
  std::vector<std::string> ids = hfloc::read_id_list(opts.queries_path);
  if (ids.empty())
    hfloc::throw_error(hfloc::ErrorCode::kInvalidArgument, "query list is empty");

  hfloc::LocalizeConfig base;
  base.knn = opts.knn;
  base.ratio = opts.ratio;
  base.ransac.reproj_threshold_px = opts.reproj_px;
  base.ransac.min_inliers = opts.min_inliers;
  base.ransac.max_iterations = opts.max_iters;
  base.max_keypoints = opts.max_kpts;
  base.nms_radius = opts.nms_radius;
  base.covis_min_shared = opts.covis_min_shared;
  base.validate();
  base.ransac.validate();

  std::ofstream out(opts.out_path);
  if (!out) hfloc::throw_error(hfloc::ErrorCode::kIoError, "cannot write " + opts.out_path);

  struct QueryOutcome {
    std::string line;
    hfloc::LocalizeTimings timings;
    bool success = false;
  };

  auto job = [&](size_t i) -> QueryOutcome {
    const std::string& id = ids[i];
    auto t0 = std::chrono::steady_clock::now();
    hfloc::LocalFeatureSet query = load_feature_set(opts.features_dir, id);
    double load_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    auto cam = cameras.find(id);
    if (cam == cameras.end())
      hfloc::throw_error(hfloc::ErrorCode::kMissingCamera, "no camera for query " + id);

    hfloc::LocalizeConfig cfg = base;
    // Per-query seed, so results do not depend on scheduling or thread count.
    cfg.ransac.seed = opts.seed ^ hfloc::fnv1a64(id);
    hfloc::LocalizationResult res = hfloc::localize(map, index, query, cam->second, cfg);
    res.timings.feature_load_ms = load_ms;
    res.timings.total_ms += load_ms;

    const hfloc::Pose& p = res.estimate.pose;
    json line;
    line["image_id"] = id;
    line["success"] = res.success();
    line["qw"] = p.q.w();
    line["qx"] = p.q.x();
    line["qy"] = p.q.y();
    line["qz"] = p.q.z();
    line["tx"] = p.t.x();
    line["ty"] = p.t.y();
    line["tz"] = p.t.z();
    line["num_inliers"] = res.estimate.num_inliers;
    line["num_places_tried"] = res.num_places_tried;
    json t;
    t["feature_load"] = res.timings.feature_load_ms;
    t["global_search"] = res.timings.global_ms;
    t["clustering"] = res.timings.clustering_ms;
    t["local_matching"] = res.timings.matching_ms;
    t["pnp"] = res.timings.pnp_ms;
    t["total"] = res.timings.total_ms;
    line["timings_ms"] = std::move(t);
    return {line.dump(), res.timings, res.success()};
  };

  hfloc::LocalizeTimings sum;
  size_t num_success = 0;
  auto emit = [&](const QueryOutcome& r) {
    out << r.line << '\n';
    sum.feature_load_ms += r.timings.feature_load_ms;
    sum.global_ms += r.timings.global_ms;
    sum.clustering_ms += r.timings.clustering_ms;
    sum.matching_ms += r.timings.matching_ms;
    sum.pnp_ms += r.timings.pnp_ms;
    sum.total_ms += r.timings.total_ms;
    num_success += r.success ? 1 : 0;
  };
  run_ordered<QueryOutcome>(ids.size(), resolve_threads(opts.threads), job, emit);

  out.flush();
  if (!out) hfloc::throw_error(hfloc::ErrorCode::kIoError, "write failed for " + opts.out_path);

  const double n = double(ids.size());
  std::printf("localized %zu/%zu queries -> %s\n", num_success, ids.size(),
              opts.out_path.c_str());
  std::printf("%-18s %10s\n", "stage", "mean_ms");
  std::printf("%-18s %10.3f\n", "feature_load", sum.feature_load_ms / n);
  std::printf("%-18s %10.3f\n", "global_search", sum.global_ms / n);
  std::printf("%-18s %10.3f\n", "covis_clustering", sum.clustering_ms / n);
  std::printf("%-18s %10.3f\n", "local_matching", sum.matching_ms / n);
  std::printf("%-18s %10.3f\n", "pnp", sum.pnp_ms / n);
  std::printf("%-18s %10.3f\n", "total", sum.total_ms / n);
}

// ---------------------------------------------------------------------------
// eval-local

struct EvalLocalOpts {
  std::string pairs_path, features_dir, mode, out_path;
  double eps_kp = 3.0;
  double eps_desc = 0.0;   // 0 = mode default (3 planar, 5 sfm)
  int max_kpts = 0;        // 0 = mode default (300 planar, 1000 sfm)
  double nms_radius = 0.0;
  double inlier_px = 3.0;
  double corner_px = 3.0;
  double max_pos_m = 0.25;
  double max_rot_deg = 2.0;
  uint64_t seed = 0;
  int threads = 0;
};

void run_eval_local(const EvalLocalOpts& opts) {
  const bool sfm = opts.mode == "sfm";
  const double eps_desc = opts.eps_desc > 0 ? opts.eps_desc : (sfm ? 5.0 : 3.0);
  const size_t budget = opts.max_kpts > 0 ? size_t(opts.max_kpts) : (sfm ? 1000 : 300);

  std::vector<std::string> lines = hfloc::detail::text_lines(opts.pairs_path);
  if (lines.empty())
    hfloc::throw_error(hfloc::ErrorCode::kParseError, opts.pairs_path + ": no pairs");
  fs::path base_dir = fs::path(opts.pairs_path).parent_path();

  struct PairOutcome {
    json entry;
    bool has_metrics = false;
    hfloc::KeypointMetrics km;
    hfloc::DescriptorMetrics dm;
    std::optional<hfloc::HomographyPair> hp;
    std::optional<hfloc::SfmPair> sp;
  };

  auto job = [&](size_t i) -> PairOutcome {
    std::string context = opts.pairs_path + ":" + std::to_string(i + 1);
    json j = parse_json_line(lines[i], context);

    PairOutcome r;
    std::string id_a, id_b;
    try {
      id_a = j.at("a").get<std::string>();
      id_b = j.at("b").get<std::string>();
      hfloc::LocalFeatureSet fa =
          hfloc::filter_features(load_feature_set(opts.features_dir, id_a), opts.nms_radius, budget);
      hfloc::LocalFeatureSet fb =
          hfloc::filter_features(load_feature_set(opts.features_dir, id_b), opts.nms_radius, budget);

      auto metrics = [&](const auto& gt) {
        try {
          r.km = hfloc::keypoint_metrics(fa, fb, gt, opts.eps_kp);
          r.dm = hfloc::descriptor_metrics(fa, fb, gt, eps_desc);
          r.has_metrics = true;
        } catch (const hfloc::Error& e) {
          if (e.code() != hfloc::ErrorCode::kNoVisibleKeypoints) throw;
        }
      };

      if (sfm) {
        reject_unknown_keys(
            j, {"a", "b", "depth_a", "depth_b", "pose_ab", "camera_a", "camera_b"}, context);
        auto depth_path = [&](const std::string& p) {
          fs::path fp(p);
          return fp.is_absolute() ? fp.string() : (base_dir / fp).string();
        };
        hfloc::SfmGt gt;
        gt.depth_a = hfloc::read_depth_file(depth_path(j.at("depth_a").get<std::string>()));
        gt.depth_b = hfloc::read_depth_file(depth_path(j.at("depth_b").get<std::string>()));
        auto pv = j.at("pose_ab").get<std::vector<double>>();
        if (pv.size() != 7)
          hfloc::throw_error(hfloc::ErrorCode::kParseError,
                             context + ": pose_ab needs 7 numbers (qw qx qy qz tx ty tz)");
        gt.pose_ab = hfloc::Pose(Eigen::Quaterniond(pv[0], pv[1], pv[2], pv[3]),
                                 Eigen::Vector3d(pv[4], pv[5], pv[6]));
        gt.camera_a = hfloc::parse_camera_spec(j.at("camera_a").get<std::string>(), context);
        gt.camera_b = hfloc::parse_camera_spec(j.at("camera_b").get<std::string>(), context);
        metrics(gt);
        r.sp = hfloc::SfmPair{fa, fb, std::move(gt)};
      } else {
        reject_unknown_keys(j, {"a", "b", "h", "size_a", "size_b"}, context);
        auto hv = j.at("h").get<std::vector<double>>();
        if (hv.size() != 9)
          hfloc::throw_error(hfloc::ErrorCode::kParseError,
                             context + ": h needs 9 numbers (row-major)");
        Eigen::Matrix3d hm;
        hm << hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], hv[8];
        auto sa = j.at("size_a").get<std::vector<int>>();
        auto sb = j.at("size_b").get<std::vector<int>>();
        if (sa.size() != 2 || sb.size() != 2)
          hfloc::throw_error(hfloc::ErrorCode::kParseError,
                             context + ": size_a/size_b need [width, height]");
        hfloc::HomographyGt gt(hfloc::Homography(hm), sa[0], sa[1], sb[0], sb[1]);
        metrics(gt);
        r.hp = hfloc::HomographyPair{fa, fb, gt};
      }
    } catch (const nlohmann::json::exception& e) {
      hfloc::throw_error(hfloc::ErrorCode::kParseError, context + ": " + e.what());
    }

    r.entry["a"] = id_a;
    r.entry["b"] = id_b;
    if (r.has_metrics) {
      r.entry["num_visible"] = r.km.num_visible;
      r.entry["repeatability"] = r.km.repeatability;
      r.entry["localization_error_px"] = r.km.localization_error_px;
      r.entry["matching_score"] = r.dm.matching_score;
      r.entry["mAP"] = r.dm.mean_average_precision;
    } else {
      r.entry["num_visible"] = 0;
      r.entry["repeatability"] = nullptr;
      r.entry["localization_error_px"] = nullptr;
      r.entry["matching_score"] = nullptr;
      r.entry["mAP"] = nullptr;
    }
    return r;
  };

  json pair_entries = json::array();
  std::vector<hfloc::HomographyPair> hps;
  std::vector<hfloc::SfmPair> sps;
  double sum_rep = 0, sum_mle = 0, sum_ms = 0, sum_map = 0;
  size_t num_scored = 0;
  auto emit = [&](PairOutcome& r) {
    pair_entries.push_back(std::move(r.entry));
    if (r.has_metrics) {
      sum_rep += r.km.repeatability;
      sum_mle += r.km.localization_error_px;
      sum_ms += r.dm.matching_score;
      sum_map += r.dm.mean_average_precision;
      ++num_scored;
    }
    if (r.hp) hps.push_back(std::move(*r.hp));
    if (r.sp) sps.push_back(std::move(*r.sp));
  };
  run_ordered<PairOutcome>(lines.size(), resolve_threads(opts.threads), job, emit);

  double recall = sfm ? hfloc::relpose_recall(sps, opts.max_pos_m, opts.max_rot_deg, opts.seed)
                      : hfloc::homography_recall(hps, opts.inlier_px, opts.corner_px, opts.seed);

  json report;
  report["mode"] = opts.mode;
  report["num_pairs"] = lines.size();
  report["eps_kp_px"] = opts.eps_kp;
  report["eps_desc_px"] = eps_desc;
  report["keypoint_budget"] = budget;
  report["nms_radius_px"] = opts.nms_radius;
  // Each source keypoint is judged against its own reprojection; several may
  // share one target.
  report["repeatability_semantics"] = "many-to-one";
  report["pairs"] = std::move(pair_entries);
  if (num_scored) {
    const double n = double(num_scored);
    report["mean_repeatability"] = sum_rep / n;
    report["mean_localization_error_px"] = sum_mle / n;
    report["mean_matching_score"] = sum_ms / n;
    report["mean_mAP"] = sum_map / n;
  } else {
    report["mean_repeatability"] = nullptr;
    report["mean_localization_error_px"] = nullptr;
    report["mean_matching_score"] = nullptr;
    report["mean_mAP"] = nullptr;
  }
  if (sfm) {
    report["relpose_recall"] = recall;
    report["recall_max_pos_m"] = opts.max_pos_m;
    report["recall_max_rot_deg"] = opts.max_rot_deg;
  } else {
    report["homography_recall"] = recall;
    report["recall_corner_px"] = opts.corner_px;
    report["recall_inlier_px"] = opts.inlier_px;
  }

  std::ofstream out(opts.out_path);
  if (!out) hfloc::throw_error(hfloc::ErrorCode::kIoError, "cannot write " + opts.out_path);
  out << report.dump(2) << '\n';
  if (!out) hfloc::throw_error(hfloc::ErrorCode::kIoError, "write failed for " + opts.out_path);

  if (num_scored)
    std::printf("%zu pairs | repeatability %.4f | MLE %.3f px | matching score %.4f | mAP %.4f\n",
                lines.size(), sum_rep / double(num_scored), sum_mle / double(num_scored),
                sum_ms / double(num_scored), sum_map / double(num_scored));
  else
    std::printf("%zu pairs | no covisible keypoints\n", lines.size());
  std::printf("%s: %.4f -> %s\n", sfm ? "relpose_recall" : "homography_recall", recall,
              opts.out_path.c_str());
}

// ---------------------------------------------------------------------------
// eval-loc

struct EvalLocOpts {
  std::string results_path, gt_path;
  std::string tiers_spec = "0.25:2,0.5:5,5:10";
  std::string curve_out, report_out;  // optional
};

std::vector<hfloc::LocalizationTier> parse_tiers(const std::string& spec) {
  std::vector<hfloc::LocalizationTier> tiers;
  std::istringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ',')) {
    size_t colon = part.find(':');
    if (colon == std::string::npos)
      hfloc::throw_error(hfloc::ErrorCode::kParseError,
                         "tier '" + part + "' must be pos_m:rot_deg");
    hfloc::LocalizationTier t;
    t.max_position_m = hfloc::detail::parse_double(part.substr(0, colon), "tiers");
    t.max_rotation_deg = hfloc::detail::parse_double(part.substr(colon + 1), "tiers");
    if (!(t.max_position_m > 0) || !(t.max_rotation_deg > 0))
      hfloc::throw_error(hfloc::ErrorCode::kParseError, "tier bounds must be positive");
    tiers.push_back(t);
  }
  if (tiers.empty())
    hfloc::throw_error(hfloc::ErrorCode::kParseError, "no tiers given");
  return tiers;
}

void run_eval_loc(const EvalLocOpts& opts) {
  std::vector<hfloc::LocalizationTier> tiers = parse_tiers(opts.tiers_spec);
  auto gt = hfloc::read_pose_list(opts.gt_path);

  std::vector<hfloc::LocalizationSample> samples;
  std::vector<std::string> ids;
  for (const std::string& line : hfloc::detail::text_lines(opts.results_path)) {
    std::string context = opts.results_path + ":" + std::to_string(samples.size() + 1);
    json j = parse_json_line(line, context);
    hfloc::LocalizationSample s;
    std::string id;
    try {
      id = j.at("image_id").get<std::string>();
      s.success = j.at("success").get<bool>();
      s.estimate = hfloc::Pose(
          Eigen::Quaterniond(j.at("qw").get<double>(), j.at("qx").get<double>(),
                             j.at("qy").get<double>(), j.at("qz").get<double>()),
          Eigen::Vector3d(j.at("tx").get<double>(), j.at("ty").get<double>(),
                          j.at("tz").get<double>()));
    } catch (const nlohmann::json::exception& e) {
      hfloc::throw_error(hfloc::ErrorCode::kParseError, context + ": " + e.what());
    }
    auto it = gt.find(id);
    if (it == gt.end())
      hfloc::throw_error(hfloc::ErrorCode::kMissingGroundTruth, "no ground truth for " + id);
    s.ground_truth = it->second;
    samples.push_back(s);
    ids.push_back(id);
  }
  if (samples.empty())
    hfloc::throw_error(hfloc::ErrorCode::kParseError, opts.results_path + ": no results");

  std::vector<double> recall = hfloc::localization_recall(samples, tiers);
  for (size_t t = 0; t < tiers.size(); ++t) {
    long hits = std::lround(recall[t] * double(samples.size()) / 100.0);
    std::printf("recall @ (%g m, %g deg): %.2f%%  (%ld/%zu)\n", tiers[t].max_position_m,
                tiers[t].max_rotation_deg, recall[t], hits, samples.size());
  }

  std::vector<double> pos_errors;
  pos_errors.reserve(samples.size());
  for (const auto& s : samples)
    pos_errors.push_back(s.success
                             ? (s.estimate.center() - s.ground_truth.center()).norm()
                             : std::numeric_limits<double>::infinity());

  if (!opts.curve_out.empty()) {
    std::vector<double> thresholds;
    for (double e : pos_errors)
      if (std::isfinite(e)) thresholds.push_back(e);
    std::sort(thresholds.begin(), thresholds.end());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    auto curve = hfloc::cumulative_curve(pos_errors, thresholds);
    std::ofstream out(opts.curve_out);
    if (!out) hfloc::throw_error(hfloc::ErrorCode::kIoError, "cannot write " + opts.curve_out);
    out << "threshold_m,fraction\n";
    for (const auto& [t, f] : curve)
      out << hfloc::detail::fmt_double(t) << ',' << hfloc::detail::fmt_double(f) << '\n';
    if (!out) hfloc::throw_error(hfloc::ErrorCode::kIoError, "write failed for " + opts.curve_out);
  }

  if (!opts.report_out.empty()) {
    json report;
    report["num_queries"] = samples.size();
    json jt = json::array();
    for (size_t t = 0; t < tiers.size(); ++t) {
      json e;
      e["max_position_m"] = tiers[t].max_position_m;
      e["max_rotation_deg"] = tiers[t].max_rotation_deg;
      e["recall_percent"] = recall[t];
      jt.push_back(std::move(e));
    }
    report["tiers"] = std::move(jt);
    std::ofstream out(opts.report_out);
    if (!out) hfloc::throw_error(hfloc::ErrorCode::kIoError, "cannot write " + opts.report_out);
    out << report.dump(2) << '\n';
    if (!out) hfloc::throw_error(hfloc::ErrorCode::kIoError, "write failed for " + opts.report_out);
  }
}

// ---------------------------------------------------------------------------
// distill-check

struct DistillCheckOpts {
  uint64_t seed = 0;
  int trials = 100;
  double tol = 1e-5;
};

hfloc::DistillBatch random_distill_batch(std::mt19937_64& g) {
  int locations = 4 + int(g() % 12);
  int desc = 3 + int(g() % 6);
  int classes = 3 + int(g() % 5);
  int global_dim = 4 + int(g() % 8);
  std::normal_distribution<double> n;
  hfloc::DistillBatch b;
  b.global_student.resize(global_dim);
  b.global_teacher.resize(global_dim);
  for (int i = 0; i < global_dim; ++i) {
    b.global_student(i) = n(g);
    b.global_teacher(i) = n(g);
  }
  b.local_student.resize(locations, desc);
  b.local_teacher.resize(locations, desc);
  b.logits_student.resize(locations, classes);
  b.probs_teacher.resize(locations, classes);
  for (int r = 0; r < locations; ++r) {
    for (int c = 0; c < desc; ++c) {
      b.local_student(r, c) = n(g);
      b.local_teacher(r, c) = n(g);
    }
    double sum = 0;
    for (int c = 0; c < classes; ++c) {
      b.logits_student(r, c) = n(g);
      double v = std::exp(n(g));
      b.probs_teacher(r, c) = v;
      sum += v;
    }
    b.probs_teacher.row(r) /= sum;
  }
  return b;
}

int run_distill_check(const DistillCheckOpts& opts) {
  std::mt19937_64 g(opts.seed);
  std::normal_distribution<double> n;
  const double h = 1e-4;
  double max_rel = 0, max_stat = 0;

  auto rel = [](double a, double f) {
    return std::abs(a - f) / std::max({1.0, std::abs(a), std::abs(f)});
  };

  for (int trial = 0; trial < opts.trials; ++trial) {
    hfloc::DistillBatch b = random_distill_batch(g);
    hfloc::TaskWeights w{n(g) * 0.5, n(g) * 0.5, n(g) * 0.5};
    hfloc::DistillGradients grad = hfloc::multitask_loss_grad(b, w);

    auto fd_weight = [&](double hfloc::TaskWeights::* field, double analytic) {
      hfloc::TaskWeights wp = w, wm = w;
      wp.*field += h;
      wm.*field -= h;
      double fd = (hfloc::multitask_loss(b, wp) - hfloc::multitask_loss(b, wm)) / (2 * h);
      max_rel = std::max(max_rel, rel(analytic, fd));
    };
    fd_weight(&hfloc::TaskWeights::w1, grad.dw1);
    fd_weight(&hfloc::TaskWeights::w2, grad.dw2);
    fd_weight(&hfloc::TaskWeights::w3, grad.dw3);

    for (Eigen::Index i = 0; i < b.global_student.size(); ++i) {
      hfloc::DistillBatch bp = b, bm = b;
      bp.global_student(i) += h;
      bm.global_student(i) -= h;
      double fd = (hfloc::multitask_loss(bp, w) - hfloc::multitask_loss(bm, w)) / (2 * h);
      max_rel = std::max(max_rel, rel(grad.d_global(i), fd));
    }
    for (Eigen::Index r = 0; r < b.local_student.rows(); ++r)
      for (Eigen::Index c = 0; c < b.local_student.cols(); ++c) {
        hfloc::DistillBatch bp = b, bm = b;
        bp.local_student(r, c) += h;
        bm.local_student(r, c) -= h;
        double fd = (hfloc::multitask_loss(bp, w) - hfloc::multitask_loss(bm, w)) / (2 * h);
        max_rel = std::max(max_rel, rel(grad.d_local(r, c), fd));
      }
    for (Eigen::Index r = 0; r < b.logits_student.rows(); ++r)
      for (Eigen::Index c = 0; c < b.logits_student.cols(); ++c) {
        hfloc::DistillBatch bp = b, bm = b;
        bp.logits_student(r, c) += h;
        bm.logits_student(r, c) -= h;
        double fd = (hfloc::multitask_loss(bp, w) - hfloc::multitask_loss(bm, w)) / (2 * h);
        max_rel = std::max(max_rel, rel(grad.d_logits(r, c), fd));
      }

    // Stationarity: dL/dw_i vanishes at w_i = ln(residual_i). The residuals
    // fall out of the gradient at the origin, dw_i(0) = 1 - residual_i.
    hfloc::DistillGradients g0 = hfloc::multitask_loss_grad(b, {0, 0, 0});
    double r_g = 1.0 - g0.dw1, r_l = 1.0 - g0.dw2, c2 = 1.0 - g0.dw3;
    if (r_g > 0 && r_l > 0 && c2 > 0) {
      hfloc::DistillGradients gs =
          hfloc::multitask_loss_grad(b, {std::log(r_g), std::log(r_l), std::log(c2)});
      max_stat = std::max({max_stat, std::abs(gs.dw1), std::abs(gs.dw2), std::abs(gs.dw3)});
    }
  }

  std::printf("gradient check: %d trials, h = %g\n", opts.trials, h);
  std::printf("max relative gradient error: %.3e  (tolerance %g)\n", max_rel, opts.tol);
  std::printf("max stationarity residual at w = ln r: %.3e\n", max_stat);
  bool ok = max_rel < opts.tol && max_stat < 1e-8;
  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hfloc: hierarchical localization toolkit"};
  app.require_subcommand(1);
  // One config file for all subcommands, keys under [subcommand] sections.
  // Values behave like flags (range checks apply) but explicit flags win.
  app.set_config("--config", "", "INI config file with [subcommand] sections; flags win");
  app.allow_config_extras(CLI::config_extras_mode::error);

  SynthOpts synth;
  CLI::App* sub_synth = app.add_subcommand("synth", "Generate a synthetic scene dataset");
  sub_synth->add_option("--spec", synth.spec_path, "Scene spec JSON")
      ->required()
      ->check(CLI::ExistingFile);
  sub_synth->add_option("--out", synth.out_dir, "Output directory")->required();
  sub_synth->fallthrough();

  BuildMapOpts bm;
  CLI::App* sub_bm = app.add_subcommand("build-map", "Triangulate a sparse map from posed features");
  sub_bm->add_option("--features", bm.features_dir, "Directory of .hfnf files")
      ->required()
      ->check(CLI::ExistingDirectory);
  sub_bm->add_option("--poses", bm.poses_path, "Database pose list")
      ->required()
      ->check(CLI::ExistingFile);
  sub_bm->add_option("--cameras", bm.cameras_path, "Camera list")
      ->required()
      ->check(CLI::ExistingFile);
  sub_bm->add_option("--pairs", bm.pairs_path, "Image pairs to match")
      ->required()
      ->check(CLI::ExistingFile);
  sub_bm->add_option("--out", bm.out_path, "Output map file")->required();
  sub_bm->add_option("--ratio", bm.ratio, "Two-way matching ratio threshold")
      ->capture_default_str()
      ->check(CLI::Range(1e-6, 1.0));
  sub_bm->add_option("--epipolar-px", bm.epipolar_px, "Symmetric epipolar gate in pixels")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub_bm->add_option("--reproj-px", bm.reproj_px, "Reprojection gate in pixels")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub_bm->add_option("--min-angle-deg", bm.min_angle_deg, "Minimum triangulation angle")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  sub_bm->add_option("--min-track", bm.min_track, "Minimum track length")
      ->capture_default_str()
      ->check(CLI::Range(2, 1000000));
  sub_bm->add_option("--pca-dim", bm.pca_dim, "Global PCA dimensions, 0 to disable")
      ->capture_default_str()
      ->check(CLI::Range(0, 1 << 20));
  sub_bm->add_option("--metadata", bm.metadata, "Free-form map annotation")
      ->capture_default_str();
  sub_bm->fallthrough();

  std::string ms_map;
  CLI::App* sub_ms = app.add_subcommand("map-stats", "Print statistics of a map file");
  sub_ms->add_option("--map", ms_map, "Map file")->required()->check(CLI::ExistingFile);
  sub_ms->fallthrough();

  LocalizeOpts loc;
  CLI::App* sub_loc = app.add_subcommand("localize", "Localize queries against a map");
  sub_loc->add_option("--map", loc.map_path, "Map file")->required()->check(CLI::ExistingFile);
  sub_loc->add_option("--features", loc.features_dir, "Directory of .hfnf files")
      ->required()
      ->check(CLI::ExistingDirectory);
  sub_loc->add_option("--cameras", loc.cameras_path, "Camera list")
      ->required()
      ->check(CLI::ExistingFile);
  sub_loc->add_option("--queries", loc.queries_path, "Query id list")
      ->required()
      ->check(CLI::ExistingFile);
  sub_loc->add_option("--out", loc.out_path, "Results JSONL path")->required();
  sub_loc->add_option("--knn", loc.knn, "Prior frames to retrieve")
      ->capture_default_str()
      ->check(CLI::Range(1, 1000000));
  sub_loc->add_option("--ratio", loc.ratio, "2D-3D matching ratio threshold")
      ->capture_default_str()
      ->check(CLI::Range(1e-6, 1.0));
  sub_loc->add_option("--reproj-px", loc.reproj_px, "RANSAC reprojection threshold")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub_loc->add_option("--min-inliers", loc.min_inliers, "Minimum inliers for success")
      ->capture_default_str()
      ->check(CLI::Range(4, 1000000));
  sub_loc->add_option("--max-iters", loc.max_iters, "RANSAC iteration cap")
      ->capture_default_str()
      ->check(CLI::Range(1, 100000000));
  sub_loc->add_option("--max-kpts", loc.max_kpts, "Query keypoint budget")
      ->capture_default_str()
      ->check(CLI::Range(1, 100000000));
  sub_loc->add_option("--nms-radius", loc.nms_radius, "Keypoint NMS radius in pixels")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  sub_loc->add_option("--covis-min-shared", loc.covis_min_shared,
                      "Shared points required to merge prior frames")
      ->capture_default_str()
      ->check(CLI::Range(1, 1000000));
  sub_loc->add_option("--seed", loc.seed, "Base RANSAC seed")->capture_default_str();
  sub_loc->add_option("--threads", loc.threads,
                      "Worker threads (0 = HFLOC_THREADS or hardware)")
      ->capture_default_str()
      ->check(CLI::Range(0, 4096));
  sub_loc->fallthrough();

  EvalLocalOpts el;
  CLI::App* sub_el = app.add_subcommand("eval-local", "Local-feature metrics over image pairs");
  sub_el->add_option("--pairs", el.pairs_path, "Pair list JSONL")
      ->required()
      ->check(CLI::ExistingFile);
  sub_el->add_option("--features", el.features_dir, "Directory of .hfnf files")
      ->required()
      ->check(CLI::ExistingDirectory);
  sub_el->add_option("--mode", el.mode, "Ground-truth kind")
      ->required()
      ->check(CLI::IsMember({"homography", "sfm"}));
  sub_el->add_option("--out", el.out_path, "Report JSON path")->required();
  sub_el->add_option("--eps-kp", el.eps_kp, "Keypoint correctness threshold in pixels")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub_el->add_option("--eps-desc", el.eps_desc,
                     "Descriptor correctness threshold, 0 = mode default (3 planar, 5 sfm)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  sub_el->add_option("--max-kpts", el.max_kpts,
                     "Keypoint budget, 0 = mode default (300 planar, 1000 sfm)")
      ->capture_default_str()
      ->check(CLI::Range(0, 100000000));
  sub_el->add_option("--nms-radius", el.nms_radius, "Keypoint NMS radius in pixels")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  sub_el->add_option("--inlier-px", el.inlier_px, "Homography RANSAC inlier threshold")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub_el->add_option("--corner-px", el.corner_px, "Mean corner error for homography recall")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub_el->add_option("--max-pos-m", el.max_pos_m, "Position bound for relpose recall")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub_el->add_option("--max-rot-deg", el.max_rot_deg, "Rotation bound for relpose recall")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub_el->add_option("--seed", el.seed, "Base RANSAC seed")->capture_default_str();
  sub_el->add_option("--threads", el.threads,
                     "Worker threads (0 = HFLOC_THREADS or hardware)")
      ->capture_default_str()
      ->check(CLI::Range(0, 4096));
  sub_el->fallthrough();

  EvalLocOpts eq;
  CLI::App* sub_eq = app.add_subcommand("eval-loc", "Localization recall against ground truth");
  sub_eq->add_option("--results", eq.results_path, "Results JSONL from localize")
      ->required()
      ->check(CLI::ExistingFile);
  sub_eq->add_option("--gt", eq.gt_path, "Ground-truth pose list")
      ->required()
      ->check(CLI::ExistingFile);
  sub_eq->add_option("--tiers", eq.tiers_spec, "Error tiers as pos_m:rot_deg,...")
      ->capture_default_str();
  sub_eq->add_option("--curve-out", eq.curve_out, "Cumulative position-error curve CSV");
  sub_eq->add_option("--out", eq.report_out, "Recall report JSON");
  sub_eq->fallthrough();

  DistillCheckOpts dc;
  CLI::App* sub_dc = app.add_subcommand("distill-check", "Gradient-check the distillation loss");
  sub_dc->add_option("--seed", dc.seed, "RNG seed")->capture_default_str();
  sub_dc->add_option("--trials", dc.trials, "Number of random batches")
      ->capture_default_str()
      ->check(CLI::Range(1, 1000000));
  sub_dc->add_option("--tol", dc.tol, "Max relative gradient error allowed")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub_dc->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "hfloc: " << e.what() << "\n";
    std::cerr << "Run 'hfloc --help' or 'hfloc <subcommand> --help' for usage.\n";
    return 2;
  }

  try {
    if (sub_synth->parsed()) run_synth(synth);
    else if (sub_bm->parsed()) run_build_map(bm);
    else if (sub_ms->parsed()) run_map_stats(ms_map);
    else if (sub_loc->parsed()) run_localize(loc);
    else if (sub_el->parsed()) run_eval_local(el);
    else if (sub_eq->parsed()) run_eval_loc(eq);
    else if (sub_dc->parsed()) return run_distill_check(dc);
  } catch (const hfloc::Error& e) {
    std::cerr << "hfloc: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "hfloc: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
