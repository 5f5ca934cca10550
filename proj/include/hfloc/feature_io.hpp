#pragma once

// Per-image feature container, magic "HFNF". Layout (little-endian):
//   magic[4] version:u32 id_len:u32 id[id_len]
//   N:u32 (x:f32 y:f32 score:f32) * N
//   D:u32 f32[N*D] row-major descriptors
//   G:u32 f32[G] global descriptor
//   dense_flag:u8, if 1: stride:u32 Hc:u32 Wc:u32 f32[Hc*Wc*D]

#include <optional>
#include <string>

#include "hfloc/features.hpp"
#include "hfloc/io_util.hpp"

namespace hfloc {

constexpr uint32_t kFeatureFormatVersion = 1;

struct FeatureFile {
  LocalFeatureSet features;
  std::optional<DenseDescriptorMap> dense;
};

inline std::vector<char> serialize_features(
    const LocalFeatureSet& f,
    const std::optional<DenseDescriptorMap>& dense = std::nullopt) {
  const uint32_t n = static_cast<uint32_t>(f.keypoints.size());
  uint32_t d = static_cast<uint32_t>(f.descriptors.cols());
  if (n > 0 && f.descriptors.rows() != Eigen::Index(n))
    throw_error(ErrorCode::kShapeMismatch, "descriptor rows != keypoint count");
  if (dense) {
    if (n > 0 && dense->dim() != int(d))
      throw_error(ErrorCode::kShapeMismatch, "dense map dim != descriptor dim");
    if (n == 0) d = static_cast<uint32_t>(dense->dim());
  }

  ByteWriter w;
  w.bytes("HFNF", 4);
  w.u32(kFeatureFormatVersion);
  w.str(f.image_id);
  w.u32(n);
  for (const Keypoint& kp : f.keypoints) {
    w.f32(kp.x);
    w.f32(kp.y);
    w.f32(kp.score);
  }
  w.u32(d);
  for (uint32_t i = 0; i < n; ++i)
    for (uint32_t j = 0; j < d; ++j) w.f32(f.descriptors(i, j));
  w.u32(static_cast<uint32_t>(f.global_descriptor.size()));
  for (Eigen::Index i = 0; i < f.global_descriptor.size(); ++i)
    w.f32(f.global_descriptor(i));

  if (dense) {
    w.u8(1);
    w.u32(static_cast<uint32_t>(dense->stride));
    w.u32(static_cast<uint32_t>(dense->height));
    w.u32(static_cast<uint32_t>(dense->width));
    for (Eigen::Index r = 0; r < dense->values.rows(); ++r)
      for (Eigen::Index c = 0; c < dense->values.cols(); ++c)
        w.f32(dense->values(r, c));
  } else {
    w.u8(0);
  }
  return w.data();
}

inline FeatureFile parse_features(const std::vector<char>& buf) {
  ByteReader r(buf);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "HFNF", 4) != 0)
    throw_error(ErrorCode::kCorruptFile, "bad feature file magic");
  uint32_t version = r.u32();
  if (version != kFeatureFormatVersion)
    throw_error(ErrorCode::kVersionMismatch,
                "feature file version " + std::to_string(version));

  FeatureFile out;
  out.features.image_id = r.str();
  uint32_t n = r.u32();
  out.features.keypoints.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    out.features.keypoints[i].x = r.f32();
    out.features.keypoints[i].y = r.f32();
    out.features.keypoints[i].score = r.f32();
  }
  uint32_t d = r.u32();
  out.features.descriptors.resize(n, d);
  for (uint32_t i = 0; i < n; ++i)
    for (uint32_t j = 0; j < d; ++j) out.features.descriptors(i, j) = r.f32();
  uint32_t g = r.u32();
  out.features.global_descriptor.resize(g);
  for (uint32_t i = 0; i < g; ++i) out.features.global_descriptor(i) = r.f32();

  uint8_t dense_flag = r.u8();
  if (dense_flag == 1) {
    DenseDescriptorMap m;
    m.stride = static_cast<int>(r.u32());
    m.height = static_cast<int>(r.u32());
    m.width = static_cast<int>(r.u32());
    if (m.stride <= 0 || m.height <= 0 || m.width <= 0)
      throw_error(ErrorCode::kCorruptFile, "bad dense map header");
    m.values.resize(Eigen::Index(m.height) * m.width, d);
    for (Eigen::Index r_i = 0; r_i < m.values.rows(); ++r_i)
      for (Eigen::Index c_i = 0; c_i < m.values.cols(); ++c_i)
        m.values(r_i, c_i) = r.f32();
    out.dense = std::move(m);
  } else if (dense_flag != 0) {
    throw_error(ErrorCode::kCorruptFile, "bad dense map flag");
  }
  if (r.remaining() != 0)
    throw_error(ErrorCode::kCorruptFile, "trailing bytes in feature file");
  return out;
}

inline void write_feature_file(
    const std::string& path, const LocalFeatureSet& f,
    const std::optional<DenseDescriptorMap>& dense = std::nullopt) {
  write_file_bytes(path, serialize_features(f, dense));
}

inline FeatureFile read_feature_file(const std::string& path) {
  return parse_features(read_file_bytes(path));
}

}  // namespace hfloc
