#pragma once

#include <cmath>
#include <string>

#include "mcr_stitch/error.hpp"
#include "mcr_stitch/linalg.hpp"

namespace mcr {

struct LossGrad {
  double value = 0.0;
  Matrix grad_x;  // d loss / d first argument
  Matrix grad_z;  // d loss / d second argument (left empty when not requested)
};

enum class IntraForm {
  squared,  // (1/2)(1/B) sum ||d||^2
  norm,     // (1/2)(1/B) sum ||d||, gradient guarded by kNormGuard
};

inline constexpr double kNormGuard = 1e-12;

// Gap-closing loss between f_l outputs and their same-space overlap targets.
// Only the gradient w.r.t. `fl_out` is produced; the target is a frozen embedding.
inline LossGrad intra_mcr_loss(const Matrix& fl_out, const Matrix& target, IntraForm form = IntraForm::squared) {
  if (fl_out.rows() != target.rows() || fl_out.cols() != target.cols()) {
    throw ShapeError("intra loss shape mismatch");
  }
  if (fl_out.rows() < 1) throw ShapeError("intra loss needs B >= 1");
  const double b = static_cast<double>(fl_out.rows());
  const Matrix diff = fl_out - target;
  LossGrad out;
  if (form == IntraForm::squared) {
    out.value = 0.5 * diff.squaredNorm() / b;
    out.grad_x = diff / b;
  } else {
    const Vector norms = diff.rowwise().norm();
    out.value = 0.5 * norms.sum() / b;
    out.grad_x = diff;
    for (Eigen::Index i = 0; i < diff.rows(); ++i) out.grad_x.row(i) /= 2.0 * b * std::max(norms(i), kNormGuard);
  }
  return out;
}

inline void require_unit_rows(const Matrix& m, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (std::abs(n - 1.0) > 1e-5) {
      throw Error(std::string(what) + ": row " + std::to_string(i) + " is not unit-normalized (norm " +
                  std::to_string(n) + ")");
    }
  }
}

// Symmetric InfoNCE with diagonal positives in both directions:
// -(1/2B) sum_i [log softmax_row(S/tau)_ii + log softmax_col(S/tau)_ii], S = x z^T.
inline LossGrad info_nce(const Matrix& x, const Matrix& z, double tau2, bool want_grad_z = false) {
  if (x.rows() != z.rows() || x.cols() != z.cols()) throw ShapeError("InfoNCE shape mismatch");
  if (x.rows() < 1) throw ShapeError("InfoNCE needs B >= 1");
  if (!(tau2 > 0.0)) throw ConfigError("tau2 must be positive");
  require_unit_rows(x, "InfoNCE x");
  require_unit_rows(z, "InfoNCE z");

  const Eigen::Index n = x.rows();
  const double b = static_cast<double>(n);
  const Matrix logits = (x * z.transpose()) / tau2;

  // Row softmax (x_i against all z_j) and column softmax (z_j against all x_i).
  Matrix p_row(n, n);
  Matrix p_col(n, n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = logits.row(i).maxCoeff();
    const auto e = (logits.row(i).array() - m).exp();
    const double s = e.sum();
    p_row.row(i) = e / s;
    loss -= logits(i, i) - m - std::log(s);
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    const double m = logits.col(j).maxCoeff();
    const auto e = (logits.col(j).array() - m).exp();
    const double s = e.sum();
    p_col.col(j) = e / s;
    loss -= logits(j, j) - m - std::log(s);
  }

  LossGrad out;
  out.value = loss / (2.0 * b);
  Matrix d_logits = (p_row + p_col) / (2.0 * b);
  d_logits.diagonal().array() -= 1.0 / b;
  out.grad_x = d_logits * z / tau2;
  if (want_grad_z) out.grad_z = d_logits.transpose() * x / tau2;
  return out;
}

// Backward of y = x / ||x|| row-wise, given y and the norms of x.
inline Matrix normalize_rows_backward(const Matrix& y, const Vector& norms, const Matrix& grad_y) {
  Matrix grad_x(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double proj = y.row(i).dot(grad_y.row(i));
    grad_x.row(i) = (grad_y.row(i) - proj * y.row(i)) / norms(i);
  }
  return grad_x;
}

}  // namespace mcr
