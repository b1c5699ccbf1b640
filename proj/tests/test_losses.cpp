#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gazeclr/losses.hpp"
#include "oracles/nt_xent_reference.hpp"
#include "support/test_util.hpp"

namespace gazeclr {
namespace {

using M = RowMatrix<double>;
using testing::random_matrix;
using testing::random_rotation;
using testing::to_rows;

// log((2 + e) / e), evaluated by hand from the two-sample orthogonal batch.
constexpr double kTwoSampleOrthogonal = 0.551444713932051;

TEST(Similarity, Cases) {
  Eigen::Vector2d r(1, 0), s(1, 1);
  EXPECT_NEAR(similarity(r, r, 0.1), std::exp(10.0), 1e-9);
  EXPECT_NEAR(similarity(r, Eigen::Vector2d(0, 3), 1.0), 1.0, 1e-15);
  EXPECT_NEAR(similarity(r, s, 1.0), 2.028114981647472, 1e-12);
  EXPECT_EQ(similarity(r, s, 0.5), similarity(s, r, 0.5));
  EXPECT_THROW(similarity(r, Eigen::Vector2d(0, 0), 1.0), InvalidDirection);
}

TEST(InvarianceLoss, SingleSampleIsZero) {
  std::mt19937_64 rng(1);
  const M z = random_matrix(rng, 1, 6), zp = random_matrix(rng, 1, 6);
  EXPECT_EQ(invariance_loss(z, zp, 0, LossConfig{}), 0.0);
}

TEST(InvarianceLoss, TwoSampleHandCase) {
  M z(2, 2);
  z << 1, 0, 0, 1;
  LossConfig cfg;
  cfg.tau = 1.0;
  EXPECT_NEAR(invariance_loss(z, z, 0, cfg), kTwoSampleOrthogonal, 1e-12);
  EXPECT_NEAR(invariance_loss(z, z, 1, cfg), kTwoSampleOrthogonal, 1e-12);
  EXPECT_NEAR(reference::nt_xent_reference(to_rows(z), to_rows(z), 1, 1.0), kTwoSampleOrthogonal, 1e-12);
}

TEST(InvarianceLoss, Errors) {
  std::mt19937_64 rng(2);
  EXPECT_THROW(invariance_loss(random_matrix(rng, 3, 4), random_matrix(rng, 3, 5), 0, LossConfig{}), ShapeError);
  EXPECT_THROW(invariance_loss(M(0, 4), M(0, 4), 0, LossConfig{}), EmptyBatchError);
  LossConfig bad;
  bad.tau = 0.0;
  EXPECT_THROW(invariance_loss(random_matrix(rng, 2, 4), random_matrix(rng, 2, 4), 0, bad), ConfigError);
}

TEST(InvarianceLoss, MatchesReferenceOnRandomInstances) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> bdist(1, 8), ddist(1, 16);
  for (int t = 0; t < 200; ++t) {
    const int b = bdist(rng), d = ddist(rng);
    const double tau = std::array<double, 3>{0.1, 0.5, 1.0}[t % 3];
    M z = random_matrix(rng, b, d), zp = random_matrix(rng, b, d);
    z.rowwise().normalize();
    zp.rowwise().normalize();
    LossConfig cfg;
    cfg.tau = tau;
    for (int anchor = 0; anchor < b; ++anchor) {
      ASSERT_NEAR(invariance_loss(z, zp, anchor, cfg),
                  reference::nt_xent_reference(to_rows(z), to_rows(zp), anchor, tau), 1e-10);
    }
  }
}

TEST(EquivarianceLoss, CollapsesAndMatchesInvarianceAlgebra) {
  std::mt19937_64 rng(4);
  const M one = random_matrix(rng, 1, 9);
  EXPECT_EQ(equivariance_loss(one, one, 0, LossConfig{}), 0.0);

  // Identity rotations on an orthogonal two-row batch reproduce the hand case.
  M zhat = M::Zero(2, 6);
  zhat(0, 0) = 1.0;
  zhat(1, 1) = 1.0;
  const std::vector<RotationMatrix> ident(2, RotationMatrix::identity());
  const M zbar = rotate_rows(zhat, ident);
  LossConfig cfg;
  cfg.tau = 1.0;
  EXPECT_NEAR(equivariance_loss(zbar, zbar, 0, cfg), kTwoSampleOrthogonal, 1e-12);
}

TEST(EquivarianceLoss, MatchesReferenceAfterRotation) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const int b = 1 + t % 8, dp = 1 + t % 5;
    const M zi = random_matrix(rng, b, 3 * dp), zj = random_matrix(rng, b, 3 * dp);
    std::vector<RotationMatrix> ri, rj;
    for (int k = 0; k < b; ++k) {
      ri.push_back(random_rotation(rng));
      rj.push_back(random_rotation(rng));
    }
    const M bi = rotate_rows(zi, ri), bj = rotate_rows(zj, rj);
    reference::Rows ref_i, ref_j;
    for (int k = 0; k < b; ++k) {
      std::vector<double> flat_i(zi.row(k).data(), zi.row(k).data() + zi.cols());
      std::vector<double> flat_j(zj.row(k).data(), zj.row(k).data() + zj.cols());
      ref_i.push_back(reference::rotate_flat(to_rows(ri[k].matrix()), flat_i));
      ref_j.push_back(reference::rotate_flat(to_rows(rj[k].matrix()), flat_j));
    }
    LossConfig cfg;
    cfg.tau = 0.5;
    for (int anchor = 0; anchor < b; ++anchor) {
      ASSERT_NEAR(equivariance_loss(bi, bj, anchor, cfg), reference::nt_xent_reference(ref_i, ref_j, anchor, 0.5),
                  1e-10);
    }
  }
}

struct RandomInstance {
  EmbeddingBatch<double> batch;
  ViewRotations rotations;
};

RandomInstance make_instance(std::mt19937_64& rng, int views, int b, int d, int dp) {
  RandomInstance inst;
  for (int i = 0; i < views; ++i) {
    inst.batch.z.push_back(random_matrix(rng, b, d));
    inst.batch.z_prime.push_back(random_matrix(rng, b, d));
    inst.batch.z_hat.push_back(random_matrix(rng, b, 3 * dp));
    std::vector<RotationMatrix> rs;
    for (int k = 0; k < b; ++k) rs.push_back(random_rotation(rng));
    inst.rotations.push_back(rs);
  }
  return inst;
}

double reference_of(const RandomInstance& inst, double tau, bool inv) {
  std::vector<reference::Rows> z, zp, zh;
  std::vector<std::vector<reference::Mat3Rows>> rot;
  for (std::size_t i = 0; i < inst.rotations.size(); ++i) {
    z.push_back(to_rows(inst.batch.z[i]));
    zp.push_back(to_rows(inst.batch.z_prime[i]));
    zh.push_back(to_rows(inst.batch.z_hat[i]));
    std::vector<reference::Mat3Rows> rs;
    for (const auto& r : inst.rotations[i]) rs.push_back(to_rows(r.matrix()));
    rot.push_back(rs);
  }
  return reference::overall_loss_reference(z, zp, zh, rot, tau, inv);
}

TEST(OverallLoss, SingleSampleIsZero) {
  std::mt19937_64 rng(6);
  auto inst = make_instance(rng, 3, 1, 5, 2);
  LossConfig cfg;
  EXPECT_EQ(overall_loss(inst.batch, inst.rotations, cfg), 0.0);
  cfg.include_invariance = false;
  EXPECT_EQ(overall_loss(inst.batch, inst.rotations, cfg), 0.0);
}

TEST(OverallLoss, SingleViewReducesToInvariance) {
  std::mt19937_64 rng(7);
  auto inst = make_instance(rng, 1, 5, 6, 2);
  LossConfig cfg;
  double expected = 0.0;
  for (int b = 0; b < 5; ++b) {
    expected += invariance_loss(inst.batch.z[0], inst.batch.z_prime[0], b, cfg);
    expected += invariance_loss(inst.batch.z_prime[0], inst.batch.z[0], b, cfg);
  }
  EXPECT_NEAR(overall_loss(inst.batch, inst.rotations, cfg), expected / 10.0, 1e-12);
}

TEST(OverallLoss, MatchesLoopOracle) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 40; ++t) {
    const int views = 2 + t % 3;
    auto inst = make_instance(rng, views, 1 + t % 8, 4 + t % 13, 1 + t % 4);
    for (bool inv : {true, false}) {
      LossConfig cfg;
      cfg.tau = std::array<double, 3>{0.1, 0.5, 1.0}[t % 3];
      cfg.include_invariance = inv;
      ASSERT_NEAR(overall_loss(inst.batch, inst.rotations, cfg), reference_of(inst, cfg.tau, inv), 1e-10);
    }
  }
}

TEST(OverallLoss, MissingViewData) {
  std::mt19937_64 rng(9);
  auto inst = make_instance(rng, 3, 4, 5, 2);
  inst.batch.z_hat.pop_back();
  EXPECT_THROW(overall_loss(inst.batch, inst.rotations, LossConfig{}), MissingViewError);
}

TEST(OverallLoss, GlobalFrameInvariance) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 20; ++t) {
    auto inst = make_instance(rng, 4, 6, 8, 3);
    const double base = overall_loss(inst.batch, inst.rotations, LossConfig{});
    const auto q = random_rotation(rng);
    for (auto& view : inst.rotations)
      for (auto& r : view) r = compose(q, r);
    EXPECT_NEAR(overall_loss(inst.batch, inst.rotations, LossConfig{}), base, 1e-9);
  }
}

TEST(OverallLoss, PermutationInvariance) {
  std::mt19937_64 rng(11);
  auto inst = make_instance(rng, 3, 7, 6, 2);
  const double base = overall_loss(inst.batch, inst.rotations, LossConfig{});
  std::vector<int> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  RandomInstance p = inst;
  for (std::size_t i = 0; i < 3; ++i) {
    for (int b = 0; b < 7; ++b) {
      p.batch.z[i].row(b) = inst.batch.z[i].row(perm[b]);
      p.batch.z_prime[i].row(b) = inst.batch.z_prime[i].row(perm[b]);
      p.batch.z_hat[i].row(b) = inst.batch.z_hat[i].row(perm[b]);
      p.rotations[i][b] = inst.rotations[i][perm[b]];
    }
  }
  // Sums are reordered, so agreement is to rounding.
  EXPECT_NEAR(overall_loss(p.batch, p.rotations, LossConfig{}), base, 1e-12);
}

TEST(InvarianceLoss, LowerTemperatureLowersLossWhenPositiveDominates) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 20; ++t) {
    M z = random_matrix(rng, 5, 8);
    M zp = z + 0.05 * random_matrix(rng, 5, 8);
    for (int b = 0; b < 5; ++b) {
      // Skip anchors where the positive is not the strict cosine maximum.
      M zn = z.rowwise().normalized(), pn = zp.rowwise().normalized();
      const double pos = zn.row(b).dot(pn.row(b));
      bool dominant = true;
      for (int l = 0; l < 5; ++l) {
        if (l != b && zn.row(b).dot(zn.row(l)) >= pos) dominant = false;
        if (l != b && zn.row(b).dot(pn.row(l)) >= pos) dominant = false;
      }
      if (!dominant) continue;
      double previous = std::numeric_limits<double>::infinity();
      for (double tau : {2.0, 1.0, 0.5, 0.2, 0.1}) {
        LossConfig cfg;
        cfg.tau = tau;
        const double l = invariance_loss(z, zp, b, cfg);
        EXPECT_LT(l, previous);
        previous = l;
      }
    }
  }
}

double entry_fd(RandomInstance inst, const LossConfig& cfg, int which, std::size_t view, int r, int c, double h) {
  auto& m = which == 0 ? inst.batch.z[view] : which == 1 ? inst.batch.z_prime[view] : inst.batch.z_hat[view];
  const double orig = m(r, c);
  m(r, c) = orig + h;
  const double up = overall_loss(inst.batch, inst.rotations, cfg);
  m(r, c) = orig - h;
  const double down = overall_loss(inst.batch, inst.rotations, cfg);
  return (up - down) / (2 * h);
}

TEST(OverallLoss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 4; ++t) {
    auto inst = make_instance(rng, 2 + t % 2, 3 + t, 4, 2);
    LossConfig cfg;
    cfg.tau = 0.5;
    const auto res = overall_loss_with_gradients(inst.batch, inst.rotations, cfg);
    for (std::size_t v = 0; v < inst.rotations.size(); ++v) {
      for (int which = 0; which < 3; ++which) {
        const M& g = which == 0 ? res.grad_z[v] : which == 1 ? res.grad_z_prime[v] : res.grad_z_hat[v];
        for (int r = 0; r < g.rows(); ++r) {
          for (int c = 0; c < g.cols(); ++c) {
            const double fd = entry_fd(inst, cfg, which, v, r, c, 1e-5);
            ASSERT_NEAR(g(r, c), fd, 1e-4 * std::max(1.0, std::abs(fd)));
          }
        }
      }
    }
  }
}

TEST(AngularLoss, DelegatesToGeometry) {
  const auto a = pitch_yaw_to_vector(0.1, 0.2), b = pitch_yaw_to_vector(-0.1, 0.25);
  EXPECT_EQ(angular_loss(a, b), angular_error_deg(a, b));
}

TEST(AngularLoss, PitchYawGradient) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  for (int t = 0; t < 50; ++t) {
    const Vec3 target = pitch_yaw_to_vector(u(rng), u(rng)).vector();
    const double p = u(rng), y = u(rng);
    const auto g = angular_loss_pitch_yaw(target, p, y);
    const double h = 1e-6;
    const double dp = (angular_loss_pitch_yaw(target, p + h, y).loss_deg -
                       angular_loss_pitch_yaw(target, p - h, y).loss_deg) / (2 * h);
    const double dy = (angular_loss_pitch_yaw(target, p, y + h).loss_deg -
                       angular_loss_pitch_yaw(target, p, y - h).loss_deg) / (2 * h);
    EXPECT_NEAR(g.d_pitch, dp, 1e-5 * std::max(1.0, std::abs(dp)));
    EXPECT_NEAR(g.d_yaw, dy, 1e-5 * std::max(1.0, std::abs(dy)));
    EXPECT_NEAR(g.loss_deg, angular_error_deg(target, pitch_yaw_to_vector(p, y).vector()), 1e-9);
  }
}

}  // namespace
}  // namespace gazeclr
