#pragma once

// NT-Xent family used for Stage-I pre-training plus the Stage-II angular loss.
//
// For anchors A and positives P (both B x d) the per-anchor loss is
//   l_b = -log sim(a_b, p_b) / (sum_{l != b} sim(a_b, a_l) + sum_l sim(a_b, p_l))
// with sim(r, s) = exp(cos(r, s) / tau). The invariance loss uses (z, z')
// and the equivariance loss uses rotated, flattened blocks (z_bar_i, z_bar_j).

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

#include "gazeclr/embedding.hpp"
#include "gazeclr/errors.hpp"
#include "gazeclr/geometry.hpp"

namespace gazeclr {

struct LossConfig {
  double tau = 0.1;
  bool include_invariance = true;
  bool include_equivariance = true;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("train.tau", "temperature must be > 0");
    if (!include_invariance && !include_equivariance) {
      throw ConfigError("train.variant", "at least one loss term must be enabled");
    }
  }
};

template <typename DerivedR, typename DerivedS>
typename DerivedR::Scalar similarity(const Eigen::MatrixBase<DerivedR>& r, const Eigen::MatrixBase<DerivedS>& s,
                                     double tau) {
  using S = typename DerivedR::Scalar;
  const S nr = r.norm();
  const S ns = s.norm();
  if (!(nr > S(0)) || !(ns > S(0))) throw InvalidDirection("similarity of a zero embedding");
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be > 0");
  return std::exp(r.dot(s) / (nr * ns) / S(tau));
}

namespace detail {

template <typename S>
void check_pair(const RowMatrix<S>& a, const RowMatrix<S>& p) {
  if (a.rows() == 0) throw EmptyBatchError("contrastive loss over an empty batch");
  if (a.rows() != p.rows() || a.cols() != p.cols()) {
    throw ShapeError("contrastive loss: anchor and positive sets differ in shape");
  }
}

template <typename S>
RowMatrix<S> normalize_rows(const RowMatrix<S>& m, Eigen::Matrix<S, Eigen::Dynamic, 1>& norms) {
  norms = m.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms[i] > S(0)) || !std::isfinite(norms[i])) {
      throw InvalidDirection("contrastive loss: zero or non-finite embedding row");
    }
  }
  return norms.cwiseInverse().asDiagonal() * m;
}

// (g - (g . u) u) / n for every row: gradient through x -> x / |x|.
template <typename S>
RowMatrix<S> project_normalization(const RowMatrix<S>& g_unit, const RowMatrix<S>& unit,
                                   const Eigen::Matrix<S, Eigen::Dynamic, 1>& norms) {
  const Eigen::Matrix<S, Eigen::Dynamic, 1> radial = (g_unit.cwiseProduct(unit)).rowwise().sum();
  RowMatrix<S> out = g_unit - radial.asDiagonal() * unit;
  return norms.cwiseInverse().asDiagonal() * out;
}

}  // namespace detail

/// Sum over all anchors of the NT-Xent loss, with optional input gradients.
template <typename S>
struct NtXentResult {
  S loss_sum = S(0);
  RowMatrix<S> grad_anchors;
  RowMatrix<S> grad_positives;
};

template <typename S>
NtXentResult<S> nt_xent_batch(const RowMatrix<S>& anchors, const RowMatrix<S>& positives, double tau,
                              bool with_gradients) {
  detail::check_pair(anchors, positives);
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be > 0");
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  const Eigen::Index batch = anchors.rows();
  const S inv_tau = S(1) / S(tau);

  Vec na, np;
  const RowMatrix<S> a = detail::normalize_rows(anchors, na);
  const RowMatrix<S> p = detail::normalize_rows(positives, np);
  const RowMatrix<S> logits_aa = (a * a.transpose()) * inv_tau;
  const RowMatrix<S> logits_ap = (a * p.transpose()) * inv_tau;

  NtXentResult<S> out;
  RowMatrix<S> w_aa, w_ap;
  if (with_gradients) {
    w_aa = RowMatrix<S>::Zero(batch, batch);
    w_ap = RowMatrix<S>::Zero(batch, batch);
  }
  for (Eigen::Index b = 0; b < batch; ++b) {
    S top = logits_ap(b, 0);
    for (Eigen::Index l = 0; l < batch; ++l) {
      top = std::max(top, logits_ap(b, l));
      if (l != b) top = std::max(top, logits_aa(b, l));
    }
    S denom = S(0);
    for (Eigen::Index l = 0; l < batch; ++l) {
      if (l != b) denom += std::exp(logits_aa(b, l) - top);
      denom += std::exp(logits_ap(b, l) - top);
    }
    const S lse = top + std::log(denom);
    out.loss_sum += lse - logits_ap(b, b);
    if (with_gradients) {
      for (Eigen::Index l = 0; l < batch; ++l) {
        if (l != b) w_aa(b, l) = std::exp(logits_aa(b, l) - lse);
        w_ap(b, l) = std::exp(logits_ap(b, l) - lse);
      }
      w_ap(b, b) -= S(1);
    }
  }
  if (with_gradients) {
    const RowMatrix<S> g_a = ((w_aa + w_aa.transpose()) * a + w_ap * p) * inv_tau;
    const RowMatrix<S> g_p = (w_ap.transpose() * a) * inv_tau;
    out.grad_anchors = detail::project_normalization(g_a, a, na);
    out.grad_positives = detail::project_normalization(g_p, p, np);
  }
  return out;
}

/// NT-Xent for a single anchor row `b` (log-sum-exp evaluation).
template <typename S>
S nt_xent(const RowMatrix<S>& anchors, const RowMatrix<S>& positives, Eigen::Index b, double tau) {
  detail::check_pair(anchors, positives);
  if (b < 0 || b >= anchors.rows()) throw RangeError("anchor index out of range");
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be > 0");
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  Vec na, np;
  const RowMatrix<S> a = detail::normalize_rows(anchors, na);
  const RowMatrix<S> p = detail::normalize_rows(positives, np);
  const S inv_tau = S(1) / S(tau);
  const Vec self = (a * a.row(b).transpose()) * inv_tau;
  const Vec cross = (p * a.row(b).transpose()) * inv_tau;
  S top = cross.maxCoeff();
  for (Eigen::Index l = 0; l < self.size(); ++l) {
    if (l != b) top = std::max(top, self[l]);
  }
  S denom = S(0);
  for (Eigen::Index l = 0; l < self.size(); ++l) {
    if (l != b) denom += std::exp(self[l] - top);
    denom += std::exp(cross[l] - top);
  }
  return top + std::log(denom) - cross[b];
}

/// Invariance loss for anchor b over a pair of augmented batches (z, z').
template <typename S>
S invariance_loss(const RowMatrix<S>& z, const RowMatrix<S>& z_prime, Eigen::Index b, const LossConfig& cfg) {
  cfg.validate();
  return nt_xent(z, z_prime, b, cfg.tau);
}

/// Equivariance loss for anchor b between rotated, flattened views i and j.
template <typename S>
S equivariance_loss(const RowMatrix<S>& z_bar_i, const RowMatrix<S>& z_bar_j, Eigen::Index b,
                    const LossConfig& cfg) {
  cfg.validate();
  return nt_xent(z_bar_i, z_bar_j, b, cfg.tau);
}

/// Projector outputs for one batch, indexed by view.
///
/// z and z_prime feed the invariance path (one matrix per view, B x d);
/// z_hat holds flattened B x 3d' equivariance embeddings before rotation.
template <typename S>
struct EmbeddingBatch {
  std::vector<RowMatrix<S>> z;
  std::vector<RowMatrix<S>> z_prime;
  std::vector<RowMatrix<S>> z_hat;

  Eigen::Index batch_size() const {
    if (!z_hat.empty()) return z_hat.front().rows();
    if (!z.empty()) return z.front().rows();
    return 0;
  }
};

/// Per-view, per-sample effective rotations: rotations[i][b].
using ViewRotations = std::vector<std::vector<RotationMatrix>>;

/// Expands one rotation per view to every batch row.
inline ViewRotations broadcast_rotations(std::span<const RotationMatrix> per_view, Eigen::Index batch) {
  ViewRotations out;
  out.reserve(per_view.size());
  for (const auto& r : per_view) out.emplace_back(static_cast<std::size_t>(batch), r);
  return out;
}

template <typename S>
struct OverallLossResult {
  S loss = S(0);
  std::vector<RowMatrix<S>> grad_z;
  std::vector<RowMatrix<S>> grad_z_prime;
  std::vector<RowMatrix<S>> grad_z_hat;
};

namespace detail {

template <typename S>
void validate_batch(const EmbeddingBatch<S>& batch, const ViewRotations& rotations, const LossConfig& cfg) {
  cfg.validate();
  const std::size_t views = rotations.size();
  if (views == 0) throw MissingViewError("overall loss needs at least one view");
  const Eigen::Index bsz = batch.batch_size();
  if (bsz == 0) throw EmptyBatchError("overall loss over an empty batch");
  if (cfg.include_invariance) {
    if (batch.z.size() != views || batch.z_prime.size() != views) {
      throw MissingViewError("invariance path is missing embeddings for some views");
    }
    for (std::size_t i = 0; i < views; ++i) {
      if (batch.z[i].rows() != bsz || batch.z_prime[i].rows() != bsz ||
          batch.z[i].cols() != batch.z_prime[i].cols()) {
        throw ShapeError("invariance embeddings differ in shape across views");
      }
    }
  }
  if (cfg.include_equivariance) {
    if (batch.z_hat.size() != views) {
      throw MissingViewError("equivariance path is missing embeddings for some views");
    }
    for (std::size_t i = 0; i < views; ++i) {
      if (batch.z_hat[i].rows() != bsz || batch.z_hat[i].cols() != batch.z_hat[0].cols()) {
        throw ShapeError("equivariance embeddings differ in shape across views");
      }
      if (static_cast<Eigen::Index>(rotations[i].size()) != bsz) {
        throw MissingViewError("missing effective rotations for some batch rows");
      }
    }
    equivariant_width(batch.z_hat[0].cols());
  }
}

}  // namespace detail

/// Symmetrized batch objective:
///   (1 / 2B) sum_i sum_b [ L_I(z_i, z'_i) + L_I(z'_i, z_i) + sum_{j != i} L_E(z_bar_i, z_bar_j) ]
/// Invariance terms are dropped when cfg.include_invariance is false.
template <typename S>
OverallLossResult<S> overall_loss_with_gradients(const EmbeddingBatch<S>& batch, const ViewRotations& rotations,
                                                 const LossConfig& cfg, bool with_gradients = true) {
  detail::validate_batch(batch, rotations, cfg);
  const std::size_t views = rotations.size();
  const Eigen::Index bsz = batch.batch_size();
  const S scale = S(1) / (S(2) * S(bsz));

  OverallLossResult<S> out;
  S total = S(0);
  if (cfg.include_invariance) {
    for (std::size_t i = 0; i < views; ++i) {
      auto fwd = nt_xent_batch(batch.z[i], batch.z_prime[i], cfg.tau, with_gradients);
      auto bwd = nt_xent_batch(batch.z_prime[i], batch.z[i], cfg.tau, with_gradients);
      total += fwd.loss_sum + bwd.loss_sum;
      if (with_gradients) {
        out.grad_z.push_back((fwd.grad_anchors + bwd.grad_positives) * scale);
        out.grad_z_prime.push_back((fwd.grad_positives + bwd.grad_anchors) * scale);
      }
    }
  }
  if (cfg.include_equivariance && views > 1) {
    std::vector<RowMatrix<S>> z_bar;
    z_bar.reserve(views);
    for (std::size_t i = 0; i < views; ++i) z_bar.push_back(rotate_rows(batch.z_hat[i], rotations[i]));
    std::vector<RowMatrix<S>> grad_bar;
    if (with_gradients) {
      for (std::size_t i = 0; i < views; ++i) grad_bar.push_back(RowMatrix<S>::Zero(bsz, z_bar[i].cols()));
    }
    for (std::size_t i = 0; i < views; ++i) {
      for (std::size_t j = 0; j < views; ++j) {
        if (i == j) continue;
        auto term = nt_xent_batch(z_bar[i], z_bar[j], cfg.tau, with_gradients);
        total += term.loss_sum;
        if (with_gradients) {
          grad_bar[i] += term.grad_anchors;
          grad_bar[j] += term.grad_positives;
        }
      }
    }
    if (with_gradients) {
      for (std::size_t i = 0; i < views; ++i) {
        out.grad_z_hat.push_back(unrotate_rows<S>(grad_bar[i] * scale, rotations[i]));
      }
    }
  } else if (cfg.include_equivariance && with_gradients) {
    for (std::size_t i = 0; i < views; ++i) {
      out.grad_z_hat.push_back(RowMatrix<S>::Zero(bsz, batch.z_hat[i].cols()));
    }
  }
  out.loss = total * scale;
  return out;
}

template <typename S>
S overall_loss(const EmbeddingBatch<S>& batch, const ViewRotations& rotations, const LossConfig& cfg) {
  return overall_loss_with_gradients(batch, rotations, cfg, false).loss;
}

/// Convenience overload: one rotation per view shared by all batch rows.
template <typename S>
S overall_loss(const EmbeddingBatch<S>& batch, std::span<const RotationMatrix> per_view, const LossConfig& cfg) {
  return overall_loss(batch, broadcast_rotations(per_view, batch.batch_size()), cfg);
}

/// Stage-II supervised loss in degrees.
inline double angular_loss(const GazeDirection& g, const GazeDirection& g_hat) { return angular_error_deg(g, g_hat); }

/// Angular loss of a (pitch, yaw) prediction against a unit target, with its
/// derivatives with respect to pitch and yaw.
struct AngularLossGrad {
  double loss_deg = 0.0;
  double d_pitch = 0.0;
  double d_yaw = 0.0;
};

inline AngularLossGrad angular_loss_pitch_yaw(const Vec3& target, double pitch, double yaw) {
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const Vec3 pred(-cp * sy, -sp, -cp * cy);
  const Vec3 t = target.normalized();
  const double c = std::clamp(t.dot(pred), -1.0, 1.0);
  AngularLossGrad out;
  out.loss_deg = kRadToDeg * std::acos(c);
  // d acos(c)/dc is unbounded at |c| = 1; cap near the boundary.
  const double s = std::sqrt(std::max(1.0 - c * c, 1e-12));
  const double dl_dc = -kRadToDeg / s;
  const Vec3 dp_dpitch(sp * sy, -cp, sp * cy);
  const Vec3 dp_dyaw(-cp * cy, 0.0, cp * sy);
  out.d_pitch = dl_dc * t.dot(dp_dpitch);
  out.d_yaw = dl_dc * t.dot(dp_dyaw);
  return out;
}

}  // namespace gazeclr
