#pragma once

// Dense kernels shared by the encoder forward/backward passes. Everything is
// row-major in meaning: one row per sequence position.

#include <cmath>
#include <limits>

#include <Eigen/Core>

namespace attnguide::ops {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Sinusoidal position code: even dims sin(pos / 10000^(2i/d)), odd dims the
/// matching cos.
template <typename Scalar = double>
Vector<Scalar> positional_encoding(std::size_t position, std::size_t d_model) {
  Vector<Scalar> pe(static_cast<Eigen::Index>(d_model));
  for (std::size_t k = 0; k < d_model; ++k) {
    const std::size_t i = k / 2;
    const Scalar angle = static_cast<Scalar>(position) /
                         std::pow(Scalar(10000), Scalar(2 * i) / static_cast<Scalar>(d_model));
    pe[static_cast<Eigen::Index>(k)] = (k % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return pe;
}

/// Row-wise softmax over the first `valid_cols` columns; the remaining columns
/// behave as if their scores were -inf and receive exactly 0.
template <typename Derived>
Matrix<typename Derived::Scalar> masked_softmax_rows(const Eigen::MatrixBase<Derived>& scores,
                                                     Eigen::Index valid_cols) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> out = Matrix<Scalar>::Zero(scores.rows(), scores.cols());
  if (valid_cols <= 0) return out;
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const auto row = scores.row(r).head(valid_cols);
    const Scalar mx = row.maxCoeff();
    auto e = (row.array() - mx).exp();
    out.row(r).head(valid_cols) = e / e.sum();
  }
  return out;
}

/// Gradient of the scores given the softmax output and the output gradient.
template <typename DA, typename DG>
Matrix<typename DA::Scalar> softmax_rows_backward(const Eigen::MatrixBase<DA>& probs,
                                                  const Eigen::MatrixBase<DG>& grad_out) {
  const auto dot = (probs.array() * grad_out.array()).rowwise().sum();
  return (probs.array() * (grad_out.array().colwise() - dot)).matrix();
}

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> normalized;
  Vector<Scalar> inv_std;
};

template <typename DX, typename DG, typename DB>
Matrix<typename DX::Scalar> layer_norm(const Eigen::MatrixBase<DX>& x,
                                       const Eigen::MatrixBase<DG>& gain,
                                       const Eigen::MatrixBase<DB>& bias,
                                       LayerNormCache<typename DX::Scalar>& cache,
                                       typename DX::Scalar eps = 1e-5) {
  using Scalar = typename DX::Scalar;
  const Vector<Scalar> mean = x.rowwise().mean();
  Matrix<Scalar> centered = x.colwise() - mean;
  const Vector<Scalar> var = centered.array().square().rowwise().mean();
  cache.inv_std = (var.array() + eps).rsqrt();
  cache.normalized = centered.array().colwise() * cache.inv_std.array();
  Matrix<Scalar> y = cache.normalized.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

/// Returns dL/dx; accumulates dL/dgain and dL/dbias (1 x d).
template <typename Scalar, typename DY, typename DG>
Matrix<Scalar> layer_norm_backward(const Eigen::MatrixBase<DY>& grad_out,
                                   const Eigen::MatrixBase<DG>& gain,
                                   const LayerNormCache<Scalar>& cache, Matrix<Scalar>& grad_gain,
                                   Matrix<Scalar>& grad_bias) {
  const auto& xhat = cache.normalized;
  grad_gain += (grad_out.array() * xhat.array()).colwise().sum().matrix();
  grad_bias += grad_out.colwise().sum();
  const Matrix<Scalar> dxhat = grad_out.array().rowwise() * gain.row(0).array();
  const Vector<Scalar> mean_d = dxhat.rowwise().mean();
  const Vector<Scalar> mean_dx = (dxhat.array() * xhat.array()).rowwise().mean();
  Matrix<Scalar> dx = dxhat.colwise() - mean_d;
  dx -= (xhat.array().colwise() * mean_dx.array()).matrix();
  return dx.array().colwise() * cache.inv_std.array();
}

}  // namespace attnguide::ops
