#pragma once

// Binary map container. Layout:
//
//   magic "HFNM" | u32 version | u32 num_sections
//   num_sections x { tag[4] | u64 offset | u64 length }
//   section payloads
//   u32 crc32 over everything above
//
// Sections: "meta" (annotation string), "imgs" (images with cameras, poses,
// features, observations), "pnts" (points with tracks and mean
// descriptors), "covs" (per-image observed point ids, redundant with "imgs"
// and cross-checked on load), "pca " (optional retrieval projection).
// The checksum is verified before anything is parsed, so any single
// corrupted byte is rejected as CorruptFile rather than misread.

#include <cstdint>
#include <cstring>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hfloc/error.hpp"
#include "hfloc/io_util.hpp"
#include "hfloc/mapstore.hpp"
#include "hfloc/retrieval.hpp"

namespace hfloc {

namespace detail {

constexpr char kMapMagic[4] = {'H', 'F', 'N', 'M'};

inline void write_features(ByteWriter& w, const LocalFeatureSet& f) {
  w.u64(f.keypoints.size());
  for (const Keypoint& kp : f.keypoints) {
    w.f32(kp.x);
    w.f32(kp.y);
    w.f32(kp.score);
  }
  w.u32(uint32_t(f.descriptors.cols()));
  for (int r = 0; r < f.descriptors.rows(); ++r)
    for (int c = 0; c < f.descriptors.cols(); ++c) w.f32(f.descriptors(r, c));
  w.u32(uint32_t(f.global_descriptor.size()));
  for (int c = 0; c < f.global_descriptor.size(); ++c) w.f32(f.global_descriptor(c));
}

inline LocalFeatureSet read_features(ByteReader& r, const std::string& image_id) {
  LocalFeatureSet f;
  f.image_id = image_id;
  uint64_t n = r.u64();
  f.keypoints.reserve(n);
  for (uint64_t i = 0; i < n; ++i) {
    Keypoint kp;
    kp.x = r.f32();
    kp.y = r.f32();
    kp.score = r.f32();
    f.keypoints.push_back(kp);
  }
  uint32_t d = r.u32();
  f.descriptors.resize(Eigen::Index(n), d);
  for (uint64_t i = 0; i < n; ++i)
    for (uint32_t c = 0; c < d; ++c) f.descriptors(Eigen::Index(i), c) = r.f32();
  uint32_t g = r.u32();
  f.global_descriptor.resize(g);
  for (uint32_t c = 0; c < g; ++c) f.global_descriptor(c) = r.f32();
  return f;
}

}  // namespace detail

inline std::vector<char> serialize_map(const SparseMap& map) {
  ByteWriter meta;
  meta.str(map.metadata);

  ByteWriter imgs;
  imgs.u64(map.images.size());
  for (const DbImage& im : map.images) {
    imgs.str(im.image_id);
    imgs.f64(im.camera.fx);
    imgs.f64(im.camera.fy);
    imgs.f64(im.camera.cx);
    imgs.f64(im.camera.cy);
    imgs.f64(im.camera.k1);
    imgs.u32(uint32_t(im.camera.width));
    imgs.u32(uint32_t(im.camera.height));
    imgs.f64(im.pose.q.w());
    imgs.f64(im.pose.q.x());
    imgs.f64(im.pose.q.y());
    imgs.f64(im.pose.q.z());
    imgs.f64(im.pose.t.x());
    imgs.f64(im.pose.t.y());
    imgs.f64(im.pose.t.z());
    detail::write_features(imgs, im.features);
    imgs.u64(im.observations.size());
    for (const auto& [kp_idx, point_id] : im.observations) {
      imgs.u32(kp_idx);
      imgs.u64(point_id);
    }
  }

  std::map<std::string, uint32_t> image_index;
  for (size_t i = 0; i < map.images.size(); ++i)
    image_index[map.images[i].image_id] = uint32_t(i);

  ByteWriter pnts;
  pnts.u64(map.points.size());
  for (const Point3D& p : map.points) {
    pnts.u64(p.point_id);
    pnts.f64(p.position.x());
    pnts.f64(p.position.y());
    pnts.f64(p.position.z());
    pnts.u64(p.track.size());
    for (const TrackElement& te : p.track) {
      auto it = image_index.find(te.image_id);
      if (it == image_index.end())
        throw_error(ErrorCode::kInvalidArgument,
                    "track references unknown image " + te.image_id);
      pnts.u32(it->second);
      pnts.u32(te.keypoint_idx);
    }
    pnts.u32(uint32_t(p.mean_descriptor.size()));
    for (int c = 0; c < p.mean_descriptor.size(); ++c) pnts.f32(p.mean_descriptor(c));
  }

  ByteWriter covs;
  for (const DbImage& im : map.images) {
    std::set<uint64_t> ids;
    for (const auto& [kp_idx, point_id] : im.observations) ids.insert(point_id);
    covs.u64(ids.size());
    for (uint64_t id : ids) covs.u64(id);
  }

  ByteWriter pca;
  pca.u8(map.pca.has_value() ? 1 : 0);
  if (map.pca) {
    pca.u32(uint32_t(map.pca->output_dim()));
    pca.u32(uint32_t(map.pca->input_dim()));
    for (int c = 0; c < map.pca->mean.size(); ++c) pca.f64(map.pca->mean(c));
    for (int r = 0; r < map.pca->basis.rows(); ++r)
      for (int c = 0; c < map.pca->basis.cols(); ++c) pca.f64(map.pca->basis(r, c));
    for (int c = 0; c < map.pca->eigenvalues.size(); ++c) pca.f64(map.pca->eigenvalues(c));
    pca.u8(map.pca->reduced_rank ? 1 : 0);
  }

  const std::pair<const char*, const ByteWriter*> sections[] = {
      {"meta", &meta}, {"imgs", &imgs}, {"pnts", &pnts}, {"covs", &covs}, {"pca ", &pca}};
  const size_t num_sections = std::size(sections);
  const size_t header_size = 4 + 4 + 4 + num_sections * (4 + 8 + 8);

  ByteWriter out;
  out.bytes(detail::kMapMagic, 4);
  out.u32(map.format_version);
  out.u32(uint32_t(num_sections));
  size_t offset = header_size;
  for (const auto& [tag, w] : sections) {
    out.bytes(tag, 4);
    out.u64(offset);
    out.u64(w->size());
    offset += w->size();
  }
  for (const auto& [tag, w] : sections) out.bytes(w->data().data(), w->size());

  std::vector<char> buf = out.data();
  uint32_t crc = crc32_bytes(buf.data(), buf.size());
  for (int i = 0; i < 4; ++i) buf.push_back(char((crc >> (8 * i)) & 0xff));
  return buf;
}

inline SparseMap parse_map(const std::vector<char>& buf) {
  if (buf.size() < 16 + 5 * 20)
    throw_error(ErrorCode::kCorruptFile, "map file too short");

  // Checksum first: a failed CRC means nothing else can be trusted.
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= uint32_t(uint8_t(buf[buf.size() - 4 + i])) << (8 * i);
  if (crc32_bytes(buf.data(), buf.size() - 4) != stored)
    throw_error(ErrorCode::kCorruptFile, "map checksum mismatch");

  const size_t payload_end = buf.size() - 4;
  ByteReader header(buf.data(), payload_end);
  char magic[4];
  header.bytes(magic, 4);
  if (std::memcmp(magic, detail::kMapMagic, 4) != 0)
    throw_error(ErrorCode::kCorruptFile, "not a map file");
  uint32_t version = header.u32();
  if (version != kMapFormatVersion)
    throw_error(ErrorCode::kVersionMismatch,
                "map format version " + std::to_string(version) + ", expected " +
                    std::to_string(kMapFormatVersion));

  uint32_t num_sections = header.u32();
  std::map<std::string, std::pair<uint64_t, uint64_t>> table;
  for (uint32_t i = 0; i < num_sections; ++i) {
    char tag[5] = {0};
    header.bytes(tag, 4);
    uint64_t off = header.u64();
    uint64_t len = header.u64();
    if (off > payload_end || len > payload_end - off)
      throw_error(ErrorCode::kCorruptFile, "section out of bounds");
    if (!table.emplace(std::string(tag, 4), std::make_pair(off, len)).second)
      throw_error(ErrorCode::kCorruptFile, "duplicate section tag");
  }
  auto section = [&](const char* tag) {
    auto it = table.find(tag);
    if (it == table.end())
      throw_error(ErrorCode::kCorruptFile, std::string("missing section ") + tag);
    return ByteReader(buf.data() + it->second.first, it->second.second);
  };
  auto done = [](ByteReader& r, const char* tag) {
    if (r.remaining() != 0)
      throw_error(ErrorCode::kCorruptFile, std::string("trailing bytes in ") + tag);
  };

  SparseMap map;
  map.format_version = version;

  ByteReader meta = section("meta");
  map.metadata = meta.str();
  done(meta, "meta");

  ByteReader imgs = section("imgs");
  uint64_t num_images = imgs.u64();
  map.images.reserve(num_images);
  for (uint64_t i = 0; i < num_images; ++i) {
    DbImage im;
    im.image_id = imgs.str();
    double fx = imgs.f64(), fy = imgs.f64(), cx = imgs.f64(), cy = imgs.f64();
    double k1 = imgs.f64();
    uint32_t w = imgs.u32(), h = imgs.u32();
    im.camera = Camera(fx, fy, cx, cy, int(w), int(h), k1);
    double qw = imgs.f64(), qx = imgs.f64(), qy = imgs.f64(), qz = imgs.f64();
    im.pose.q = Eigen::Quaterniond(qw, qx, qy, qz);
    // Sequenced reads: constructor argument evaluation order is unspecified.
    double tx = imgs.f64(), ty = imgs.f64(), tz = imgs.f64();
    im.pose.t = Eigen::Vector3d(tx, ty, tz);
    im.features = detail::read_features(imgs, im.image_id);
    uint64_t num_obs = imgs.u64();
    for (uint64_t k = 0; k < num_obs; ++k) {
      uint32_t kp_idx = imgs.u32();
      uint64_t point_id = imgs.u64();
      im.observations[kp_idx] = point_id;
    }
    map.images.push_back(std::move(im));
  }
  done(imgs, "imgs");

  ByteReader pnts = section("pnts");
  uint64_t num_points = pnts.u64();
  map.points.reserve(num_points);
  for (uint64_t i = 0; i < num_points; ++i) {
    Point3D p;
    p.point_id = pnts.u64();
    double px = pnts.f64(), py = pnts.f64(), pz = pnts.f64();
    p.position = Eigen::Vector3d(px, py, pz);
    uint64_t track_len = pnts.u64();
    for (uint64_t k = 0; k < track_len; ++k) {
      uint32_t img_idx = pnts.u32();
      uint32_t kp_idx = pnts.u32();
      if (img_idx >= map.images.size())
        throw_error(ErrorCode::kCorruptFile, "track references missing image");
      p.track.push_back(TrackElement{map.images[img_idx].image_id, kp_idx});
    }
    uint32_t d = pnts.u32();
    p.mean_descriptor.resize(d);
    for (uint32_t c = 0; c < d; ++c) p.mean_descriptor(c) = pnts.f32();
    map.points.push_back(std::move(p));
  }
  done(pnts, "pnts");

  ByteReader covs = section("covs");
  for (const DbImage& im : map.images) {
    std::set<uint64_t> expected;
    for (const auto& [kp_idx, point_id] : im.observations) expected.insert(point_id);
    uint64_t n = covs.u64();
    if (n != expected.size())
      throw_error(ErrorCode::kCorruptFile, "covisibility section disagrees with images");
    for (uint64_t id : expected)
      if (covs.u64() != id)
        throw_error(ErrorCode::kCorruptFile, "covisibility section disagrees with images");
  }
  done(covs, "covs");

  ByteReader pca = section("pca ");
  uint8_t has_pca = pca.u8();
  if (has_pca > 1) throw_error(ErrorCode::kCorruptFile, "bad pca flag");
  if (has_pca) {
    PcaModel model;
    uint32_t k = pca.u32();
    uint32_t g = pca.u32();
    model.mean.resize(g);
    for (uint32_t c = 0; c < g; ++c) model.mean(c) = pca.f64();
    model.basis.resize(k, g);
    for (uint32_t r = 0; r < k; ++r)
      for (uint32_t c = 0; c < g; ++c) model.basis(r, c) = pca.f64();
    model.eigenvalues.resize(k);
    for (uint32_t c = 0; c < k; ++c) model.eigenvalues(c) = pca.f64();
    model.reduced_rank = pca.u8() != 0;
    map.pca = std::move(model);
  }
  done(pca, "pca ");

  for (size_t i = 1; i < map.images.size(); ++i)
    if (!(map.images[i - 1].image_id < map.images[i].image_id))
      throw_error(ErrorCode::kCorruptFile, "images not sorted by id");
  for (size_t i = 1; i < map.points.size(); ++i)
    if (!(map.points[i - 1].point_id < map.points[i].point_id))
      throw_error(ErrorCode::kCorruptFile, "points not sorted by id");
  if (!map.consistent())
    throw_error(ErrorCode::kCorruptFile, "map referential integrity check failed");
  return map;
}

inline void write_map_file(const std::string& path, const SparseMap& map) {
  write_file_bytes(path, serialize_map(map));
}

inline SparseMap read_map_file(const std::string& path) {
  return parse_map(read_file_bytes(path));
}

}  // namespace hfloc
