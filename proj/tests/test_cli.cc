// Drives the installed binary end to end through std::system: exit codes,
// the synth -> build-map -> localize -> eval-loc pipeline, output
// determinism across thread counts, and the config-file precedence rules.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "hfloc/evalbench.hpp"
#include "hfloc/feature_io.hpp"
#include "hfloc/geometry.hpp"
#include "hfloc/text_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int run_cli(const std::string& args, const std::string& stdout_path = "/dev/null",
            const std::string& stderr_path = "/dev/null") {
  std::string cmd = std::string(HFLOC_CLI_PATH) + " " + args + " > " + stdout_path +
                    " 2> " + stderr_path;
  int status = std::system(cmd.c_str());
  if (status == -1 || !WIFEXITED(status)) return -1;
  return WEXITSTATUS(status);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  std::vector<json> lines;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) lines.push_back(json::parse(line));
  return lines;
}

// Same result lines modulo the timing fields.
void expect_same_results(const fs::path& a, const fs::path& b) {
  std::vector<json> la = read_jsonl(a), lb = read_jsonl(b);
  ASSERT_EQ(la.size(), lb.size());
  for (size_t i = 0; i < la.size(); ++i) {
    la[i].erase("timings_ms");
    lb[i].erase("timings_ms");
    EXPECT_EQ(la[i], lb[i]) << "line " << i;
  }
}

// ---------------------------------------------------------------------------
// Exit codes and usage handling (no dataset needed)

TEST(CliUsage, HelpExitsZero) {
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("localize --help"), 0);
  EXPECT_EQ(run_cli("eval-local --help"), 0);
}

TEST(CliUsage, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli(""), 2);                     // missing subcommand
  EXPECT_EQ(run_cli("bogus"), 2);                // unknown subcommand
  EXPECT_EQ(run_cli("localize"), 2);             // missing required flags
  EXPECT_EQ(run_cli("map-stats --nonsense x"), 2);
  EXPECT_EQ(run_cli("distill-check --trials 0"), 2);   // range check
  EXPECT_EQ(run_cli("distill-check --trials abc"), 2); // type check
}

TEST(CliUsage, UsageErrorLeavesNoOutputFile) {
  fs::path out = fs::path(testing::TempDir()) / "hfloc_usage_leftover.jsonl";
  fs::remove(out);
  EXPECT_EQ(run_cli("localize --map /nonexistent.hfnm --features /tmp --cameras /dev/null "
                    "--queries /dev/null --out " + out.string() + " --ratio 7"),
            2);  // --ratio out of range
  EXPECT_FALSE(fs::exists(out));
}

TEST(CliUsage, DomainErrorsExitOne) {
  fs::path dir = fs::path(testing::TempDir()) / "hfloc_cli_domain";
  fs::create_directories(dir);
  write_text(dir / "garbage.hfnm", "this is not a map");
  fs::path err = dir / "stderr.txt";
  EXPECT_EQ(run_cli("map-stats --map " + (dir / "garbage.hfnm").string(), "/dev/null",
                    err.string()),
            1);
  std::string msg = read_text(err);
  EXPECT_NE(msg.find("hfloc:"), std::string::npos);
  EXPECT_EQ(std::count(msg.begin(), msg.end(), '\n'), 1);  // one-line diagnostic

  write_text(dir / "spec.json", "{\"no_such_key\": 1}");
  EXPECT_EQ(run_cli("synth --spec " + (dir / "spec.json").string() + " --out " +
                    (dir / "out").string()),
            1);
}

TEST(CliUsage, DistillCheckPasses) {
  fs::path out = fs::path(testing::TempDir()) / "hfloc_distill_out.txt";
  EXPECT_EQ(run_cli("distill-check --seed 7 --trials 10", out.string()), 0);
  std::string text = read_text(out);
  EXPECT_NE(text.find("max relative gradient error"), std::string::npos);
  EXPECT_NE(text.find("PASS"), std::string::npos);
  // An impossible tolerance must flip the exit code.
  EXPECT_EQ(run_cli("distill-check --seed 7 --trials 10 --tol 1e-300"), 1);
}

// ---------------------------------------------------------------------------
// Pipeline on a shared synthetic dataset

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::path(testing::TempDir()) / "hfloc_cli_pipeline";
    fs::remove_all(root_);
    fs::create_directories(root_);
    write_text(root_ / "spec.json",
               "{\"num_points\": 500, \"num_db_cameras\": 8, \"num_query_cameras\": 3,\n"
               " \"descriptor_dim\": 16, \"global_dim\": 32, \"seed\": 11}");
    ASSERT_EQ(run_cli("synth --spec " + (root_ / "spec.json").string() + " --out " +
                      (root_ / "data").string()),
              0);
    ASSERT_EQ(run_cli("build-map --features " + (root_ / "data/features").string() +
                      " --poses " + (root_ / "data/db_poses.txt").string() + " --cameras " +
                      (root_ / "data/cameras.txt").string() + " --pairs " +
                      (root_ / "data/pairs.txt").string() + " --out " +
                      (root_ / "map.hfnm").string() + " --pca-dim 16"),
              0);
  }

  static std::string data(const std::string& rel) { return (root_ / "data" / rel).string(); }
  static std::string at(const std::string& rel) { return (root_ / rel).string(); }

  static std::string localize_args(const std::string& out, const std::string& extra = "") {
    return "localize --map " + at("map.hfnm") + " --features " + data("features") +
           " --cameras " + data("cameras.txt") + " --queries " + data("queries.txt") +
           " --out " + out + " --reproj-px 5 " + extra;
  }

  static fs::path root_;
};

fs::path CliPipeline::root_;

TEST_F(CliPipeline, SynthEmitsCompleteDataset) {
  for (const char* f : {"cameras.txt", "db_poses.txt", "query_gt_poses.txt", "pairs.txt",
                        "db_images.txt", "queries.txt", "gt_observations.json"})
    EXPECT_TRUE(fs::exists(root_ / "data" / f)) << f;
  auto ids = hfloc::read_id_list(data("db_images.txt"));
  ASSERT_EQ(ids.size(), 8u);
  for (const std::string& id : ids)
    EXPECT_TRUE(fs::exists(root_ / "data" / "features" / (id + ".hfnf"))) << id;
  // 8 choose 2 exhaustive pairs.
  EXPECT_EQ(hfloc::read_pair_list(data("pairs.txt")).size(), 28u);
  json gt = json::parse(read_text(root_ / "data" / "gt_observations.json"));
  EXPECT_EQ(gt.size(), 11u);  // db + query views
}

TEST_F(CliPipeline, MapStatsPrintsFourStats) {
  fs::path out = root_ / "stats.txt";
  ASSERT_EQ(run_cli("map-stats --map " + at("map.hfnm"), out.string()), 0);
  std::string text = read_text(out);
  for (const char* key : {"num_points:", "keypoints_per_image:", "matched_keypoint_ratio:",
                          "mean_track_length:"})
    EXPECT_NE(text.find(key), std::string::npos) << key;
}

TEST_F(CliPipeline, LocalizeSucceedsAndReportsTimings) {
  fs::path coutp = root_ / "loc_stdout.txt";
  ASSERT_EQ(run_cli(localize_args(at("results.jsonl")), coutp.string()), 0);
  std::vector<json> lines = read_jsonl(root_ / "results.jsonl");
  ASSERT_EQ(lines.size(), 3u);
  for (const json& line : lines) {
    EXPECT_TRUE(line.at("success").get<bool>());
    EXPECT_GE(line.at("num_inliers").get<int>(), 12);
    const json& t = line.at("timings_ms");
    double sum = t.at("feature_load").get<double>() + t.at("global_search").get<double>() +
                 t.at("clustering").get<double>() + t.at("local_matching").get<double>() +
                 t.at("pnp").get<double>();
    EXPECT_LE(sum, t.at("total").get<double>() + 1.0);  // stage sum within bookkeeping slack
  }
  // Input order preserved.
  auto ids = hfloc::read_id_list(data("queries.txt"));
  for (size_t i = 0; i < ids.size(); ++i)
    EXPECT_EQ(lines[i].at("image_id").get<std::string>(), ids[i]);
  std::string table = read_text(coutp);
  for (const char* stage : {"global_search", "covis_clustering", "local_matching", "pnp", "total"})
    EXPECT_NE(table.find(stage), std::string::npos) << stage;
}

TEST_F(CliPipeline, ResultsDeterministicAcrossThreadCounts) {
  ASSERT_EQ(run_cli(localize_args(at("res_t1.jsonl"), "--threads 1 --seed 42")), 0);
  ASSERT_EQ(run_cli(localize_args(at("res_t4.jsonl"), "--threads 4 --seed 42")), 0);
  expect_same_results(root_ / "res_t1.jsonl", root_ / "res_t4.jsonl");
  // Env fallback path computes the same thing.
  std::string cmd = "HFLOC_THREADS=3 " + std::string(HFLOC_CLI_PATH) + " " +
                    localize_args(at("res_env.jsonl"), "--seed 42") + " > /dev/null 2>&1";
  ASSERT_EQ(WEXITSTATUS(std::system(cmd.c_str())), 0);
  expect_same_results(root_ / "res_t1.jsonl", root_ / "res_env.jsonl");
}

TEST_F(CliPipeline, ConfigFileLosesToFlags) {
  write_text(root_ / "loc.ini", "[localize]\nseed=42\n");
  ASSERT_EQ(run_cli(localize_args(at("res_cfg.jsonl"), "--config " + at("loc.ini"))), 0);
  expect_same_results(root_ / "res_t1.jsonl", root_ / "res_cfg.jsonl");

  // The flag must win over the config value.
  write_text(root_ / "loc2.ini", "[localize]\nseed=777\n");
  ASSERT_EQ(run_cli(localize_args(at("res_cfg2.jsonl"),
                                  "--seed 42 --config " + at("loc2.ini"))),
            0);
  expect_same_results(root_ / "res_t1.jsonl", root_ / "res_cfg2.jsonl");

  // Misspelled config keys are rejected, out-of-range values too.
  write_text(root_ / "loc3.ini", "[localize]\nsede=42\n");
  EXPECT_EQ(run_cli(localize_args(at("res_cfg3.jsonl"), "--config " + at("loc3.ini"))), 2);
  write_text(root_ / "loc4.ini", "[localize]\nratio=7\n");
  EXPECT_EQ(run_cli(localize_args(at("res_cfg4.jsonl"), "--config " + at("loc4.ini"))), 2);
}

TEST_F(CliPipeline, EvalLocReportsFullRecall) {
  ASSERT_EQ(run_cli(localize_args(at("res_eval.jsonl"))), 0);
  fs::path coutp = root_ / "evalloc_stdout.txt";
  ASSERT_EQ(run_cli("eval-loc --results " + at("res_eval.jsonl") + " --gt " +
                    data("query_gt_poses.txt") + " --curve-out " + at("curve.csv") +
                    " --out " + at("loc_report.json"),
                    coutp.string()),
            0);
  json report = json::parse(read_text(root_ / "loc_report.json"));
  EXPECT_EQ(report.at("num_queries").get<int>(), 3);
  ASSERT_EQ(report.at("tiers").size(), 3u);
  for (const json& tier : report.at("tiers"))
    EXPECT_DOUBLE_EQ(tier.at("recall_percent").get<double>(), 100.0);

  // Curve is monotone and ends at fraction 1.
  std::ifstream curve(root_ / "curve.csv");
  std::string header;
  std::getline(curve, header);
  EXPECT_EQ(header, "threshold_m,fraction");
  double last = 0;
  int rows = 0;
  for (std::string line; std::getline(curve, line);) {
    size_t comma = line.find(',');
    double frac = std::stod(line.substr(comma + 1));
    EXPECT_GE(frac, last);
    last = frac;
    ++rows;
  }
  EXPECT_GT(rows, 0);
  EXPECT_DOUBLE_EQ(last, 1.0);
}

TEST_F(CliPipeline, EvalLocMissingGroundTruthFails) {
  ASSERT_EQ(run_cli(localize_args(at("res_nogt.jsonl"))), 0);
  write_text(root_ / "empty_gt.txt", "# none\n");
  EXPECT_EQ(run_cli("eval-loc --results " + at("res_nogt.jsonl") + " --gt " +
                    at("empty_gt.txt")),
            1);
  EXPECT_EQ(run_cli("eval-loc --results " + at("res_nogt.jsonl") + " --gt " +
                    data("query_gt_poses.txt") + " --tiers 0.25-2"),
            1);  // malformed tier spec
}

TEST_F(CliPipeline, EvalLocalHomographyIdentityPair) {
  write_text(root_ / "hpairs.jsonl",
             "{\"a\": \"db_0000\", \"b\": \"db_0000\", \"h\": [1,0,0,0,1,0,0,0,1], "
             "\"size_a\": [640,480], \"size_b\": [640,480]}\n");
  ASSERT_EQ(run_cli("eval-local --pairs " + at("hpairs.jsonl") + " --features " +
                    data("features") + " --mode homography --out " + at("hreport.json")),
            0);
  json report = json::parse(read_text(root_ / "hreport.json"));
  EXPECT_EQ(report.at("mode"), "homography");
  EXPECT_DOUBLE_EQ(report.at("mean_repeatability").get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(report.at("mean_localization_error_px").get<double>(), 0.0);
  EXPECT_DOUBLE_EQ(report.at("mean_matching_score").get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(report.at("homography_recall").get<double>(), 1.0);
  EXPECT_EQ(report.at("keypoint_budget").get<int>(), 300);
  EXPECT_EQ(report.at("repeatability_semantics"), "many-to-one");

  // Unknown pair keys are rejected.
  write_text(root_ / "hpairs_bad.jsonl",
             "{\"a\": \"db_0000\", \"b\": \"db_0000\", \"h\": [1,0,0,0,1,0,0,0,1], "
             "\"size_a\": [640,480], \"size_b\": [640,480], \"oops\": 1}\n");
  EXPECT_EQ(run_cli("eval-local --pairs " + at("hpairs_bad.jsonl") + " --features " +
                    data("features") + " --mode homography --out " + at("hreport2.json")),
            1);
}

// ---------------------------------------------------------------------------
// SfM-mode evaluation on a constructed plane scene

TEST(CliSfmEval, PlanePairScoresPerfectly) {
  fs::path dir = fs::path(testing::TempDir()) / "hfloc_cli_sfm";
  fs::remove_all(dir);
  fs::create_directories(dir / "features");

  hfloc::Camera cam(500, 500, 320, 240, 640, 480);
  Eigen::Quaterniond q(Eigen::AngleAxisd(hfloc::deg2rad(5.0), Eigen::Vector3d::UnitY()));
  hfloc::Pose pose_ab(q, Eigen::Vector3d(0.5, 0.1, 0.0));
  const double plane_z = 5.0;

  hfloc::DepthMap depth_a;
  depth_a.width = 640;
  depth_a.height = 480;
  depth_a.values.assign(640 * 480, float(plane_z));
  hfloc::DepthMap depth_b;
  depth_b.width = 640;
  depth_b.height = 480;
  Eigen::Vector3d n = pose_ab.rotation() * Eigen::Vector3d::UnitZ();
  double offset = plane_z + n.dot(pose_ab.t);
  for (int y = 0; y < 480; ++y)
    for (int x = 0; x < 640; ++x) {
      Eigen::Vector2d xn = cam.to_normalized({double(x), double(y)});
      double denom = n.dot(Eigen::Vector3d(xn.x(), xn.y(), 1.0));
      depth_b.values.push_back(denom > 1e-9 ? float(offset / denom) : 0.0f);
    }
  hfloc::write_depth_file((dir / "depth_a.hfnd").string(), depth_a);
  hfloc::write_depth_file((dir / "depth_b.hfnd").string(), depth_b);

  hfloc::SfmGt gt;
  gt.depth_a = depth_a;
  gt.depth_b = depth_b;
  gt.pose_ab = pose_ab;
  gt.camera_a = cam;
  gt.camera_b = cam;

  hfloc::LocalFeatureSet fa, fb;
  fa.image_id = "a";
  fb.image_id = "b";
  std::vector<Eigen::MatrixXf> rows;
  int idx = 0;
  std::vector<Eigen::Vector2d> pts_a, pts_b;
  for (double x = 140; x <= 520; x += 40)
    for (double y = 110; y <= 380; y += 45) {
      auto pb = gt.to_b({x, y});
      if (!pb) continue;
      pts_a.emplace_back(x, y);
      pts_b.push_back(*pb);
      ++idx;
    }
  ASSERT_GE(idx, 30);
  Eigen::MatrixXf descs = Eigen::MatrixXf::Identity(idx, std::max(idx, 32));
  fa.descriptors = descs;
  fb.descriptors = descs;
  for (int i = 0; i < idx; ++i) {
    fa.keypoints.push_back({float(pts_a[size_t(i)].x()), float(pts_a[size_t(i)].y()), 1.0f});
    fb.keypoints.push_back({float(pts_b[size_t(i)].x()), float(pts_b[size_t(i)].y()), 1.0f});
  }
  fa.global_descriptor = Eigen::VectorXf::Unit(4, 0);
  fb.global_descriptor = Eigen::VectorXf::Unit(4, 1);
  hfloc::write_feature_file((dir / "features" / "a.hfnf").string(), fa);
  hfloc::write_feature_file((dir / "features" / "b.hfnf").string(), fb);

  // One relative depth path, one absolute, to cover both resolutions.
  std::ostringstream pair;
  pair << "{\"a\": \"a\", \"b\": \"b\", \"depth_a\": \"depth_a.hfnd\", \"depth_b\": \""
       << (dir / "depth_b.hfnd").string()
       << "\", \"pose_ab\": [" << q.w() << ", " << q.x() << ", " << q.y() << ", " << q.z()
       << ", 0.5, 0.1, 0.0], \"camera_a\": \"PINHOLE 640 480 500 500 320 240\", "
          "\"camera_b\": \"PINHOLE 640 480 500 500 320 240\"}\n";
  write_text(dir / "pairs.jsonl", pair.str());

  ASSERT_EQ(run_cli("eval-local --pairs " + (dir / "pairs.jsonl").string() + " --features " +
                    (dir / "features").string() + " --mode sfm --out " +
                    (dir / "report.json").string()),
            0);
  json report = json::parse(read_text(dir / "report.json"));
  EXPECT_EQ(report.at("mode"), "sfm");
  EXPECT_DOUBLE_EQ(report.at("eps_desc_px").get<double>(), 5.0);
  EXPECT_EQ(report.at("keypoint_budget").get<int>(), 1000);
  EXPECT_DOUBLE_EQ(report.at("mean_repeatability").get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(report.at("mean_matching_score").get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(report.at("relpose_recall").get<double>(), 1.0);
}

}  // namespace
