#pragma once

// Equivariance embeddings are stored flattened: each row of a B x 3d' matrix
// is one 3 x d' block laid out row-major (first d' entries are block row 0).

#include <Eigen/Dense>

#include <span>

#include "gazeclr/errors.hpp"
#include "gazeclr/geometry.hpp"

namespace gazeclr {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using Block3 = Eigen::Matrix<S, 3, Eigen::Dynamic, Eigen::RowMajor>;

/// d' for a flattened equivariance embedding width.
inline Eigen::Index equivariant_width(Eigen::Index flat_dim) {
  if (flat_dim <= 0 || flat_dim % 3 != 0) {
    throw ConfigError("model.heads.out_dim", "equivariance embedding width must be a positive multiple of 3");
  }
  return flat_dim / 3;
}

/// z_bar = R * z_hat for a single 3 x d' block.
template <typename S>
Block3<S> rotate_embedding(const Block3<S>& z_hat, const RotationMatrix& r) {
  return r.matrix().cast<S>() * z_hat;
}

/// View a flattened row as its 3 x d' block.
template <typename S>
Eigen::Map<const Block3<S>> as_block(const RowMatrix<S>& flat, Eigen::Index row) {
  const Eigen::Index dp = equivariant_width(flat.cols());
  return Eigen::Map<const Block3<S>>(flat.row(row).data(), 3, dp);
}

/// Rotates every row of a B x 3d' matrix by its own rotation.
template <typename S>
RowMatrix<S> rotate_rows(const RowMatrix<S>& z_hat, std::span<const RotationMatrix> rotations) {
  if (static_cast<Eigen::Index>(rotations.size()) != z_hat.rows()) {
    throw ShapeError("rotate_rows: one rotation per row required");
  }
  const Eigen::Index dp = equivariant_width(z_hat.cols());
  RowMatrix<S> out(z_hat.rows(), z_hat.cols());
  for (Eigen::Index b = 0; b < z_hat.rows(); ++b) {
    Eigen::Map<Block3<S>>(out.row(b).data(), 3, dp) =
        rotations[static_cast<std::size_t>(b)].matrix().template cast<S>() * as_block(z_hat, b);
  }
  return out;
}

/// Inverse map for gradients: d/dz_hat = R^T * d/dz_bar, row by row.
template <typename S>
RowMatrix<S> unrotate_rows(const RowMatrix<S>& grad_bar, std::span<const RotationMatrix> rotations) {
  if (static_cast<Eigen::Index>(rotations.size()) != grad_bar.rows()) {
    throw ShapeError("unrotate_rows: one rotation per row required");
  }
  const Eigen::Index dp = equivariant_width(grad_bar.cols());
  RowMatrix<S> out(grad_bar.rows(), grad_bar.cols());
  for (Eigen::Index b = 0; b < grad_bar.rows(); ++b) {
    Eigen::Map<Block3<S>>(out.row(b).data(), 3, dp) =
        rotations[static_cast<std::size_t>(b)].matrix().transpose().template cast<S>() *
        as_block(grad_bar, b);
  }
  return out;
}

}  // namespace gazeclr
