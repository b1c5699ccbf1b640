#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "gazeclr/geometry.hpp"
#include "support/test_util.hpp"

namespace gazeclr {
namespace {

constexpr double kPi = std::numbers::pi;

TEST(PitchYaw, ZeroLooksDownNegativeZ) {
  const auto g = pitch_yaw_to_vector(0.0, 0.0);
  EXPECT_DOUBLE_EQ(g.vector().x(), 0.0);
  EXPECT_DOUBLE_EQ(g.vector().y(), 0.0);
  EXPECT_DOUBLE_EQ(g.vector().z(), -1.0);
}

TEST(PitchYaw, NearPoleApproachesNegativeY) {
  for (double eps : {1e-2, 1e-4, 1e-6}) {
    const auto g = pitch_yaw_to_vector(kPi / 2 - eps, 0.0);
    EXPECT_NEAR(g.vector().y(), -1.0, eps * eps);
  }
}

TEST(PitchYaw, RoundTripSpecificValue) {
  const auto py = vector_to_pitch_yaw(pitch_yaw_to_vector(0.1, 0.2));
  EXPECT_NEAR(py.pitch, 0.1, 1e-9);
  EXPECT_NEAR(py.yaw, 0.2, 1e-9);
}

TEST(PitchYaw, RoundTripGrid) {
  for (double pitch = -1.5; pitch <= 1.5; pitch += 0.05) {
    for (double yaw = -3.1; yaw <= 3.14; yaw += 0.05) {
      const auto py = vector_to_pitch_yaw(pitch_yaw_to_vector(pitch, yaw));
      ASSERT_NEAR(py.pitch, pitch, 1e-9) << pitch << "," << yaw;
      ASSERT_NEAR(py.yaw, yaw, 1e-9) << pitch << "," << yaw;
    }
  }
}

TEST(PitchYaw, InverseCases) {
  auto py = vector_to_pitch_yaw(Vec3(0, 0, -1));
  EXPECT_DOUBLE_EQ(py.pitch, 0.0);
  EXPECT_DOUBLE_EQ(py.yaw, 0.0);
  py = vector_to_pitch_yaw(Vec3(-std::sin(0.3), 0.0, -std::cos(0.3)));
  EXPECT_NEAR(py.pitch, 0.0, 1e-15);
  EXPECT_NEAR(py.yaw, 0.3, 1e-15);
  EXPECT_THROW(vector_to_pitch_yaw(Vec3(0, -1, 0)), DegeneratePoleError);
}

TEST(AngularError, BasicCases) {
  EXPECT_DOUBLE_EQ(angular_error_deg(Vec3(0, 0, -1), Vec3(0, 0, -1)), 0.0);
  EXPECT_NEAR(angular_error_deg(Vec3(1, 0, 0), Vec3(0, 1, 0)), 90.0, 1e-12);
  EXPECT_NEAR(angular_error_deg(Vec3(0, 0, -1), Vec3(0, 0, 1)), 180.0, 1e-12);
  EXPECT_THROW(angular_error_deg(Vec3::Zero(), Vec3(0, 0, 1)), InvalidDirection);
  // Unnormalized inputs are normalized internally.
  EXPECT_NEAR(angular_error_deg(Vec3(3, 0, 0), Vec3(0, 0.1, 0)), 90.0, 1e-12);
}

TEST(AngularError, SymmetricAndRotationInvariant) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  for (int t = 0; t < 200; ++t) {
    const Vec3 a(n(rng), n(rng), n(rng));
    const Vec3 b(n(rng), n(rng), n(rng));
    EXPECT_EQ(angular_error_deg(a, b), angular_error_deg(b, a));
    EXPECT_EQ(angular_error_deg(a, a), 0.0);
    const auto r = testing::random_rotation(rng);
    EXPECT_NEAR(angular_error_deg(r.apply(a), r.apply(b)), angular_error_deg(a, b), 1e-9);
  }
}

TEST(AngularError, RotatingTowardTargetDecreasesError) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  for (int t = 0; t < 100; ++t) {
    const Vec3 a = Vec3(n(rng), n(rng), n(rng)).normalized();
    const Vec3 b = Vec3(n(rng), n(rng), n(rng)).normalized();
    const double err = angular_error_deg(a, b);
    if (err < 1.0 || err > 179.0) continue;
    const Vec3 axis = b.cross(a).normalized();
    const double theta = 0.5 * err * kDegToRad;
    const Vec3 b2 = Eigen::AngleAxisd(theta, axis) * b;
    EXPECT_LT(angular_error_deg(a, b2), err);
  }
}

TEST(RotationMatrix, ValidatesInvariants) {
  Mat3 reflect = Mat3::Identity();
  reflect(2, 2) = -1.0;
  EXPECT_THROW(RotationMatrix{reflect}, InvariantViolation);
  Mat3 scaled = 1.01 * Mat3::Identity();
  EXPECT_THROW(RotationMatrix{scaled}, InvariantViolation);

  // Near-misses within 1e-6 are repaired onto SO(3).
  std::mt19937_64 rng(3);
  const auto r = testing::random_rotation(rng);
  Mat3 noisy = r.matrix();
  noisy(0, 1) += 3e-7;
  const RotationMatrix repaired(noisy);
  EXPECT_LE(RotationMatrix::orthonormality_error(repaired.matrix()), 1e-9);
  EXPECT_NEAR((repaired.matrix() - r.matrix()).cwiseAbs().maxCoeff(), 0.0, 1e-6);
}

TEST(EffectiveRotation, IdentityChains) {
  std::mt19937_64 rng(5);
  const auto r = testing::random_rotation(rng);
  EXPECT_TRUE(effective_rotation(RotationMatrix::identity(), RotationMatrix::identity()).matrix().isApprox(Mat3::Identity()));
  EXPECT_EQ(effective_rotation(r, RotationMatrix::identity()).matrix(), r.matrix());
}

TEST(EffectiveRotation, MatchesExplicitMultiply) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    const auto r = testing::random_rotation(rng);
    const auto m = testing::random_rotation(rng);
    const auto e = effective_rotation(r, m);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += r.matrix()(i, k) * m.matrix()(j, k);
        EXPECT_NEAR(e.matrix()(i, j), acc, 1e-14);
      }
    }
    EXPECT_LE(RotationMatrix::orthonormality_error(e.matrix()), 1e-9);
  }
}

TEST(EffectiveRotation, FrameTags) {
  const RotationMatrix r(Mat3::Identity(), "cam0", "screen");
  const RotationMatrix m(Mat3::Identity(), "cam0", "cam0_norm");
  const auto e = effective_rotation(r, m);
  EXPECT_EQ(e.from_frame(), "cam0_norm");
  EXPECT_EQ(e.to_frame(), "screen");
  const RotationMatrix bad(Mat3::Identity(), "cam1", "cam1_norm");
  EXPECT_THROW(effective_rotation(r, bad), InvalidArgument);
}

std::vector<LabeledView> consistent_views(std::mt19937_64& rng, const Vec3& screen_gaze, int n) {
  std::vector<LabeledView> views;
  for (int i = 0; i < n; ++i) {
    const auto r = testing::random_rotation(rng);
    views.push_back({r, GazeDirection::normalized(r.matrix().transpose() * screen_gaze)});
  }
  return views;
}

TEST(MultiviewConsistency, ConsistentGroupIsZero) {
  std::mt19937_64 rng(1);
  const auto views = consistent_views(rng, Vec3(0.2, -0.1, -1.0), 4);
  EXPECT_NEAR(check_multiview_consistency(views), 0.0, 1e-6);
}

TEST(MultiviewConsistency, IdenticalViews) {
  const LabeledView v{RotationMatrix::identity(), pitch_yaw_to_vector(0.1, -0.2)};
  const std::vector<LabeledView> views{v, v, v};
  EXPECT_EQ(check_multiview_consistency(views), 0.0);
}

TEST(MultiviewConsistency, DetectsFiveDegreePerturbation) {
  std::mt19937_64 rng(2);
  auto views = consistent_views(rng, Vec3(-0.1, 0.3, -1.0), 4);
  const Vec3 g = views[2].gaze.vector();
  const Vec3 axis = g.unitOrthogonal();
  views[2].gaze = GazeDirection::normalized(Eigen::AngleAxisd(5.0 * kDegToRad, axis) * g);
  EXPECT_GE(check_multiview_consistency(views), 5.0 - 1e-6);
}

TEST(MultiviewConsistency, NeedsTwoViews) {
  std::vector<LabeledView> one{{RotationMatrix::identity(), GazeDirection()}};
  EXPECT_THROW(check_multiview_consistency(one), InsufficientViewsError);
}

}  // namespace
}  // namespace gazeclr
