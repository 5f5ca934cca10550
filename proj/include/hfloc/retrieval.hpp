#pragma once

// Global-descriptor retrieval: PCA projection of pooled image descriptors
// and exact k-NN search over the reduced database vectors.

#include <Eigen/Dense>
#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "hfloc/error.hpp"

namespace hfloc {

struct PcaModel {
  Eigen::VectorXd mean;         // input dimension G
  Eigen::MatrixXd basis;        // k x G, orthonormal rows, strongest first
  Eigen::VectorXd eigenvalues;  // sample covariance eigenvalues, descending
  bool reduced_rank = false;    // set when k had to shrink below the request

  int input_dim() const { return static_cast<int>(mean.size()); }
  int output_dim() const { return static_cast<int>(basis.rows()); }
};

// Fits PCA on descriptor rows (one per reference image). k is clipped to
// the numerical rank of the centered data; when that loses components the
// model is still returned, flagged reduced_rank, rather than failing the
// whole build. No whitening: distances in the reduced space stay comparable
// across models.
inline PcaModel fit_pca(const Eigen::MatrixXd& descriptors, int k) {
  const Eigen::Index m = descriptors.rows();
  const Eigen::Index g = descriptors.cols();
  if (m < 2) throw_error(ErrorCode::kInvalidArgument, "PCA needs at least 2 rows");
  if (k < 1) throw_error(ErrorCode::kInvalidArgument, "PCA output dim must be >= 1");

  PcaModel model;
  model.mean = descriptors.colwise().mean();
  Eigen::MatrixXd centered = descriptors.rowwise() - model.mean.transpose();

  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();

  // Numerical rank with the usual relative threshold.
  const double tol = std::max(m, g) * Eigen::NumTraits<double>::epsilon() *
                     (sv.size() > 0 ? sv(0) : 0.0);
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol && sv(i) > 0.0) ++rank;

  int k_eff = std::min<int>(k, rank);
  model.reduced_rank = k_eff < k;

  model.basis.resize(k_eff, g);
  model.eigenvalues.resize(k_eff);
  for (int i = 0; i < k_eff; ++i) {
    Eigen::VectorXd dir = svd.matrixV().col(i);
    // Sign convention: the largest-magnitude entry is positive, so the
    // basis does not flip between runs or BLAS backends.
    Eigen::Index imax = 0;
    dir.cwiseAbs().maxCoeff(&imax);
    if (dir(imax) < 0) dir = -dir;
    model.basis.row(i) = dir.transpose();
    model.eigenvalues(i) = sv(i) * sv(i) / double(m - 1);
  }
  return model;
}

// Projects and re-normalizes a global descriptor. The re-normalization
// keeps dot products usable as similarities after the dimensionality cut.
inline Eigen::VectorXd reduce(const PcaModel& model, const Eigen::VectorXd& d) {
  if (d.size() != model.mean.size())
    throw_error(ErrorCode::kDimensionMismatch, "descriptor dim does not match PCA model");
  Eigen::VectorXd p = model.basis * (d - model.mean);
  double n = p.norm();
  if (n < 1e-12)
    throw_error(ErrorCode::kZeroVector, "projection has zero norm");
  return p / n;
}

struct GlobalIndex {
  std::vector<std::string> image_ids;  // row order
  Eigen::MatrixXd vectors;             // one reduced unit vector per row

  int dim() const { return static_cast<int>(vectors.cols()); }
  size_t size() const { return image_ids.size(); }
};

struct RetrievalResult {
  std::string image_id;
  double similarity = 0;
};

// Exact top-k by dot product (vectors are unit norm, so this is the L2
// ranking). Ties break toward the smaller image id.
inline std::vector<RetrievalResult> knn_retrieve(const GlobalIndex& index,
                                                 const Eigen::VectorXd& query,
                                                 int k_nn) {
  if (index.size() == 0) throw_error(ErrorCode::kEmptyIndex, "retrieval index is empty");
  if (query.size() != index.vectors.cols())
    throw_error(ErrorCode::kDimensionMismatch, "query dim does not match index");
  if (k_nn < 1) throw_error(ErrorCode::kInvalidArgument, "k_nn must be >= 1");

  Eigen::VectorXd sims = index.vectors * query;
  std::vector<size_t> order(index.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (sims(a) != sims(b)) return sims(a) > sims(b);
    return index.image_ids[a] < index.image_ids[b];
  });

  size_t n = std::min<size_t>(k_nn, index.size());
  std::vector<RetrievalResult> out(n);
  for (size_t i = 0; i < n; ++i)
    out[i] = {index.image_ids[order[i]], sims(order[i])};
  return out;
}

}  // namespace hfloc
