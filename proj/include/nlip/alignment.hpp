#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "nlip/errors.hpp"
#include "nlip/param_store.hpp"

namespace nlip {

inline constexpr double kTauMin = 1e-3;
inline constexpr double kTauMax = 10.0;
inline constexpr double kTauInit = 0.07;

/// s(i, j) = v_i . t_j / tau. One matrix serves both directions: rows are
/// image-to-text, columns text-to-image.
struct SimilarityBlock {
  Matrix s;
  std::vector<std::int64_t> batch_ids;
  double tau = kTauInit;
};

struct PerSampleLosses {
  Vector itc_x;
  Vector itc_y;
  Vector combined;  // (itc_x + itc_y) / 2
};

struct ContrastiveResult {
  double loss = 0.0;
  PerSampleLosses per_sample;
  Matrix d_s;  // d loss / d s
};

inline void check_unit_rows(const Matrix& m, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    if (std::abs(m.row(i).norm() - 1.0) > 1e-4)
      throw ContractError(std::string(what) + " embedding " + std::to_string(i) + " is not unit norm");
}

inline SimilarityBlock similarity_block(const Matrix& img, const Matrix& txt, double tau,
                                        std::vector<std::int64_t> batch_ids = {}) {
  if (img.rows() < 1 || img.rows() != txt.rows() || img.cols() != txt.cols())
    throw ShapeError("similarity block needs B >= 1 matched image/text embeddings");
  if (!(tau > 0.0)) throw RangeError("temperature must be positive");
  check_unit_rows(img, "image");
  check_unit_rows(txt, "text");
  return {(img * txt.transpose()) / tau, std::move(batch_ids), tau};
}

namespace detail {

inline void check_finite(const Matrix& s) {
  if (!s.allFinite()) throw ContractError("similarity block contains non-finite entries");
}

/// Row-wise log-softmax with max subtraction.
inline Matrix log_softmax_rows(const Matrix& s) {
  Matrix out(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    const double lse = m + std::log((s.row(i).array() - m).exp().sum());
    out.row(i) = s.row(i).array() - lse;
  }
  return out;
}

inline ContrastiveResult assemble(const Vector& lx, const Vector& ly, const Matrix& dx, const Matrix& dy) {
  const double b = static_cast<double>(lx.size());
  ContrastiveResult r;
  r.per_sample.itc_x = lx;
  r.per_sample.itc_y = ly;
  r.per_sample.combined = 0.5 * (lx + ly);
  r.loss = (lx.sum() + ly.sum()) / (2.0 * b);
  r.d_s = (dx + dy.transpose()) / (2.0 * b);
  return r;
}

}  // namespace detail

/// Symmetric in-batch contrastive loss: L_i^x = -log softmax_row(s)_ii,
/// L_i^y the same over columns, total = sum(L^x + L^y) / 2B.
inline ContrastiveResult itc_loss(const SimilarityBlock& block) {
  const Matrix& s = block.s;
  detail::check_finite(s);
  const Eigen::Index b = s.rows();
  Matrix lx_all = detail::log_softmax_rows(s);
  Matrix ly_all = detail::log_softmax_rows(s.transpose());
  Vector lx(b), ly(b);
  Matrix dx = lx_all.array().exp().matrix();
  Matrix dy = ly_all.array().exp().matrix();
  for (Eigen::Index i = 0; i < b; ++i) {
    lx(i) = -lx_all(i, i);
    ly(i) = -ly_all(i, i);
    dx(i, i) -= 1.0;
    dy(i, i) -= 1.0;
  }
  return detail::assemble(lx, ly, dx, dy);
}

/// Noise-adaptive contrastive loss. The one-hot alignment target of pair i is
/// smoothed to (1 - w_i) on the positive and w_i / (B - 1) on each in-batch
/// negative, and each direction is the cross-entropy against that target.
/// w = 0 reproduces itc_loss.
inline ContrastiveResult nitc_loss(const SimilarityBlock& block, const Vector& w) {
  const Matrix& s = block.s;
  detail::check_finite(s);
  const Eigen::Index b = s.rows();
  if (w.size() != b) throw ShapeError("smoothing-rate vector length differs from batch size");
  for (Eigen::Index i = 0; i < b; ++i) {
    if (!(w(i) >= 0.0 && w(i) < 1.0)) throw RangeError("smoothing rate outside [0, 1)");
    if (b == 1 && w(i) > 0.0) throw RangeError("a positive smoothing rate needs at least two pairs in the batch");
  }
  Matrix target = Matrix::Zero(b, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    if (b > 1) target.row(i).setConstant(w(i) / static_cast<double>(b - 1));
    target(i, i) = 1.0 - w(i);
  }
  const auto direction = [&](const Matrix& logits, Vector& loss, Matrix& grad) {
    Matrix logp = detail::log_softmax_rows(logits);
    loss.resize(b);
    for (Eigen::Index i = 0; i < b; ++i) loss(i) = -(target.row(i).array() * logp.row(i).array()).sum();
    grad = logp.array().exp().matrix() - target;
  };
  Vector lx, ly;
  Matrix dx, dy;
  direction(s, lx, dx);
  direction(s.transpose(), ly, dy);
  return detail::assemble(lx, ly, dx, dy);
}

struct SimilarityGrads {
  Matrix d_img;
  Matrix d_txt;
  double d_tau = 0.0;
};

/// Chain rule from d loss / d s back to the embeddings and the temperature.
inline SimilarityGrads similarity_backward(const Matrix& img, const Matrix& txt, const SimilarityBlock& block,
                                           const Matrix& d_s) {
  SimilarityGrads g;
  g.d_img = (d_s * txt) / block.tau;
  g.d_txt = (d_s.transpose() * img) / block.tau;
  g.d_tau = -(d_s.array() * block.s.array()).sum() / block.tau;
  return g;
}

/// L = L_IR + alpha * L_LM + beta * L_(N)ITC.
inline double total_loss(double ir, double lm, double nitc, double alpha, double beta) {
  return ir + alpha * lm + beta * nitc;
}

}  // namespace nlip
