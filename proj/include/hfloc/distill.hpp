#pragma once

// Multi-task distillation objective with homoscedastic task weighting:
//
//   L = e^{-w1} r_g + e^{-w2} r_l + 2 e^{-w3} c + (w1 + w2 + w3)
//
// where r_g is the squared global-descriptor residual, r_l the squared
// local-descriptor residual averaged over spatial locations, and c the
// soft cross-entropy between the student's detector distribution and the
// teacher's, also averaged over locations. The exponential weights make the
// task scales learnable; the additive w terms keep the weights bounded
// (dL/dw_i = 0 at w_i = ln r_i).

#include <Eigen/Core>
#include <cmath>

#include "hfloc/error.hpp"

namespace hfloc {

// One training sample. Local maps are stored one spatial location per row;
// the detector logits/probabilities have their own channel count.
struct DistillBatch {
  Eigen::VectorXd global_student;
  Eigen::VectorXd global_teacher;
  Eigen::MatrixXd local_student;   // locations x descriptor channels
  Eigen::MatrixXd local_teacher;
  Eigen::MatrixXd logits_student;  // locations x detector channels
  Eigen::MatrixXd probs_teacher;   // rows on the simplex
};

struct TaskWeights {
  double w1 = 0, w2 = 0, w3 = 0;
};

struct DistillGradients {
  double dw1 = 0, dw2 = 0, dw3 = 0;
  Eigen::VectorXd d_global;   // wrt global_student
  Eigen::MatrixXd d_local;    // wrt local_student
  Eigen::MatrixXd d_logits;   // wrt logits_student
};

namespace detail {

inline void check_batch(const DistillBatch& b) {
  if (b.global_student.size() != b.global_teacher.size())
    throw_error(ErrorCode::kShapeMismatch, "global descriptor dims differ");
  if (b.local_student.rows() != b.local_teacher.rows() ||
      b.local_student.cols() != b.local_teacher.cols())
    throw_error(ErrorCode::kShapeMismatch, "local descriptor maps differ in shape");
  if (b.logits_student.rows() != b.probs_teacher.rows() ||
      b.logits_student.cols() != b.probs_teacher.cols())
    throw_error(ErrorCode::kShapeMismatch, "detector maps differ in shape");
  if (b.local_student.rows() != b.logits_student.rows())
    throw_error(ErrorCode::kShapeMismatch, "local and detector maps disagree on locations");
  if (b.logits_student.rows() == 0 || b.logits_student.cols() == 0)
    throw_error(ErrorCode::kShapeMismatch, "detector map is empty");
  for (Eigen::Index r = 0; r < b.probs_teacher.rows(); ++r) {
    double sum = 0;
    for (Eigen::Index c = 0; c < b.probs_teacher.cols(); ++c) {
      double v = b.probs_teacher(r, c);
      if (v < -1e-12)
        throw_error(ErrorCode::kNonSimplexTarget, "negative teacher probability");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw_error(ErrorCode::kNonSimplexTarget, "teacher row does not sum to 1");
  }
}

// Row-wise log-softmax via the log-sum-exp shift; safe for logits of any
// magnitude.
inline Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd out(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    double zmax = z.row(r).maxCoeff();
    double lse = std::log((z.row(r).array() - zmax).exp().sum()) + zmax;
    out.row(r) = z.row(r).array() - lse;
  }
  return out;
}

struct Residuals {
  double r_g = 0, r_l = 0, c = 0;
  Eigen::MatrixXd log_probs_student;
};

inline Residuals residuals(const DistillBatch& b) {
  Residuals res;
  res.r_g = (b.global_student - b.global_teacher).squaredNorm();
  const double locations = double(b.local_student.rows());
  res.r_l = (b.local_student - b.local_teacher).squaredNorm() /
            (locations > 0 ? locations : 1.0);
  res.log_probs_student = log_softmax_rows(b.logits_student);
  res.c = -(b.probs_teacher.array() * res.log_probs_student.array()).sum() /
          double(b.logits_student.rows());
  return res;
}

}  // namespace detail

inline double multitask_loss(const DistillBatch& batch, const TaskWeights& w) {
  detail::check_batch(batch);
  detail::Residuals r = detail::residuals(batch);
  return std::exp(-w.w1) * r.r_g + std::exp(-w.w2) * r.r_l +
         2.0 * std::exp(-w.w3) * r.c + (w.w1 + w.w2 + w.w3);
}

// Analytic gradients of multitask_loss wrt the weights and every student
// quantity. The teacher side is a fixed target.
inline DistillGradients multitask_loss_grad(const DistillBatch& batch,
                                            const TaskWeights& w) {
  detail::check_batch(batch);
  detail::Residuals r = detail::residuals(batch);

  DistillGradients g;
  const double e1 = std::exp(-w.w1);
  const double e2 = std::exp(-w.w2);
  const double e3 = std::exp(-w.w3);
  const double locations = double(batch.logits_student.rows());

  g.dw1 = -e1 * r.r_g + 1.0;
  g.dw2 = -e2 * r.r_l + 1.0;
  g.dw3 = -2.0 * e3 * r.c + 1.0;

  g.d_global = 2.0 * e1 * (batch.global_student - batch.global_teacher);
  g.d_local = (2.0 * e2 / locations) * (batch.local_student - batch.local_teacher);

  Eigen::MatrixXd probs_student = r.log_probs_student.array().exp();
  g.d_logits = (2.0 * e3 / locations) * (probs_student - batch.probs_teacher);
  return g;
}

}  // namespace hfloc
