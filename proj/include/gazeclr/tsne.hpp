#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "gazeclr/errors.hpp"

namespace gazeclr {

struct TsneConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(perplexity > 0.0)) throw ConfigError("diagnostics.tsne.perplexity", "must be positive");
    if (iterations < 1) throw ConfigError("diagnostics.tsne.iterations", "must be at least 1");
    if (!(learning_rate > 0.0)) throw ConfigError("diagnostics.tsne.learning_rate", "must be positive");
  }
};

namespace detail {

/// Conditional affinities p_{j|i} for one row, bisecting the Gaussian
/// precision until the row entropy matches log(perplexity).
inline void tsne_row_affinities(const Eigen::MatrixXd& d2, Eigen::Index i, double perplexity, Eigen::VectorXd& row) {
  const Eigen::Index n = d2.rows();
  const double target = std::log(perplexity);
  double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < 200; ++iter) {
    double min_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) min_d = std::min(min_d, d2(i, j));
    }
    double sum = 0.0, weighted = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      row(j) = j == i ? 0.0 : std::exp(-beta * (d2(i, j) - min_d));
      sum += row(j);
      weighted += row(j) * (d2(i, j) - min_d);
    }
    const double entropy = std::log(sum) + beta * weighted / sum;
    row /= sum;
    const double diff = entropy - target;
    if (std::abs(diff) < 1e-5) return;
    if (diff > 0.0) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
    } else {
      hi = beta;
      beta = 0.5 * (beta + lo);
    }
  }
}

}  // namespace detail

/// Exact t-SNE of the rows of `x` into 2-D. The result is affinely rescaled
/// so that both coordinates span [0, 1].
inline Eigen::MatrixXd tsne_2d(const Eigen::MatrixXd& x, const TsneConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, 2);
  if (n < 2) return y;

  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * x * x.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  d2 = d2.cwiseMax(0.0);

  const double perplexity = std::min(cfg.perplexity, static_cast<double>(n - 1) / 3.0 + 1e-9);
  Eigen::MatrixXd p(n, n);
  Eigen::VectorXd row(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    detail::tsne_row_affinities(d2, i, std::max(perplexity, 1.0), row);
    p.row(i) = row.transpose();
  }
  p = (p + p.transpose()).eval() / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> init(0.0, 1e-4);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i, 0) = init(rng);
    y(i, 1) = init(rng);
  }
  Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(n, 2);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);
  Eigen::MatrixXd num(n, n);
  Eigen::MatrixXd grad(n, 2);

  for (int it = 0; it < cfg.iterations; ++it) {
    const double exaggeration = it < cfg.exaggeration_iterations ? cfg.early_exaggeration : 1.0;
    const double momentum = it < cfg.exaggeration_iterations ? 0.5 : 0.8;
    const Eigen::VectorXd ysq = y.rowwise().squaredNorm();
    num = (-2.0 * y * y.transpose()).colwise() + ysq;
    num.rowwise() += ysq.transpose();
    num = (num.array() + 1.0).inverse().matrix();
    num.diagonal().setZero();
    const double z = num.sum();
    // dC/dy_i = 4 sum_j (p_ij - q_ij) num_ij (y_i - y_j)
    const Eigen::MatrixXd w = ((exaggeration * p).array() - num.array() / z).matrix().cwiseProduct(num);
    grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int c = 0; c < 2; ++c) {
        const bool same_sign = (grad(i, c) > 0.0) == (velocity(i, c) > 0.0);
        gains(i, c) = same_sign ? std::max(gains(i, c) * 0.8, 0.01) : gains(i, c) + 0.2;
      }
    }
    velocity = momentum * velocity - cfg.learning_rate * gains.cwiseProduct(grad);
    y += velocity;
    y.rowwise() -= y.colwise().mean();
  }

  for (int c = 0; c < 2; ++c) {
    const double lo = y.col(c).minCoeff();
    const double span = y.col(c).maxCoeff() - lo;
    if (span > 0.0) {
      y.col(c) = ((y.col(c).array() - lo) / span).matrix();
    } else {
      y.col(c).setConstant(0.5);
    }
  }
  return y;
}

}  // namespace gazeclr
