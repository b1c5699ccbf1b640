#pragma once

// 3-D gaze and rotation math.
//
// Angle convention (normalized camera, -z forward, y down):
//   v = (-cos(pitch) sin(yaw), -sin(pitch), -cos(pitch) cos(yaw))
// so (0, 0) looks straight down the optical axis and positive pitch looks up.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <utility>

#include "gazeclr/errors.hpp"

namespace gazeclr {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;
inline constexpr double kDegToRad = std::numbers::pi / 180.0;

/// Pitch/yaw pair in radians.
struct PitchYaw {
  double pitch = 0.0;
  double yaw = 0.0;
};

/// Unit 3-vector tagged with the frame it is expressed in.
class GazeDirection {
 public:
  static constexpr double kUnitTolerance = 1e-9;

  GazeDirection() : vector_(0.0, 0.0, -1.0) {}

  /// Takes an already-unit vector; throws InvariantViolation otherwise.
  GazeDirection(const Vec3& unit_vector, std::string frame)
      : vector_(unit_vector), frame_(std::move(frame)) {
    if (!vector_.allFinite() || std::abs(vector_.norm() - 1.0) > kUnitTolerance) {
      throw InvariantViolation("gaze direction is not a unit vector");
    }
  }

  /// Normalizes an arbitrary nonzero vector.
  static GazeDirection normalized(const Vec3& v, std::string frame = "") {
    const double n = v.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw InvalidDirection("cannot normalize a zero or non-finite direction");
    }
    return GazeDirection(v / n, std::move(frame));
  }

  const Vec3& vector() const noexcept { return vector_; }
  const std::string& frame() const noexcept { return frame_; }

 private:
  Vec3 vector_;
  std::string frame_;
};

/// Proper rotation (orthonormal, det +1) mapping `from_frame` into `to_frame`.
class RotationMatrix {
 public:
  static constexpr double kTolerance = 1e-9;
  /// Inputs off by less than this are projected back onto SO(3).
  static constexpr double kRepairTolerance = 1e-6;

  RotationMatrix() : m_(Mat3::Identity()) {}

  explicit RotationMatrix(const Mat3& m, std::string from_frame = "", std::string to_frame = "")
      : m_(m), from_(std::move(from_frame)), to_(std::move(to_frame)) {
    const double err = orthonormality_error(m_);
    if (err <= kTolerance) return;
    if (err <= kRepairTolerance && m_.determinant() > 0.0) {
      Eigen::JacobiSVD<Mat3> svd(m_, Eigen::ComputeFullU | Eigen::ComputeFullV);
      m_ = svd.matrixU() * svd.matrixV().transpose();
      if (orthonormality_error(m_) <= kTolerance) return;
    }
    throw InvariantViolation("matrix is not a proper rotation (orthonormality/determinant error " +
                             std::to_string(err) + ")");
  }

  static RotationMatrix identity(std::string from_frame = "", std::string to_frame = "") {
    return RotationMatrix(Mat3::Identity(), std::move(from_frame), std::move(to_frame));
  }

  /// Rotation by `angle_rad` about `axis` (any nonzero vector).
  static RotationMatrix axis_angle(const Vec3& axis, double angle_rad, std::string from_frame = "",
                                   std::string to_frame = "") {
    if (!(axis.norm() > 0.0)) throw InvalidArgument("rotation axis must be nonzero");
    return RotationMatrix(Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix(),
                          std::move(from_frame), std::move(to_frame));
  }

  const Mat3& matrix() const noexcept { return m_; }
  const std::string& from_frame() const noexcept { return from_; }
  const std::string& to_frame() const noexcept { return to_; }

  RotationMatrix transpose() const {
    RotationMatrix r;
    r.m_ = m_.transpose();
    r.from_ = to_;
    r.to_ = from_;
    return r;
  }

  Vec3 apply(const Vec3& v) const { return m_ * v; }

  /// max(|m^T m - I|_inf, |det m - 1|)
  static double orthonormality_error(const Mat3& m) {
    const double ortho = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
    return std::max(ortho, std::abs(m.determinant() - 1.0));
  }

 private:
  Mat3 m_;
  std::string from_;
  std::string to_;
};

/// Composition `a * b`: applies b first. Frame tags chain when both are known.
inline RotationMatrix compose(const RotationMatrix& a, const RotationMatrix& b) {
  if (!a.from_frame().empty() && !b.to_frame().empty() && a.from_frame() != b.to_frame()) {
    throw InvalidArgument("frame chain mismatch: '" + b.to_frame() + "' -> '" + a.from_frame() + "'");
  }
  return RotationMatrix(a.matrix() * b.matrix(), b.from_frame(), a.to_frame());
}

inline GazeDirection pitch_yaw_to_vector(double pitch, double yaw, std::string frame = "") {
  const double cp = std::cos(pitch);
  Vec3 v(-cp * std::sin(yaw), -std::sin(pitch), -cp * std::cos(yaw));
  // Unit by construction up to rounding; renormalize so the 1e-9 invariant always holds.
  return GazeDirection(v / v.norm(), std::move(frame));
}

inline GazeDirection pitch_yaw_to_vector(const PitchYaw& py, std::string frame = "") {
  return pitch_yaw_to_vector(py.pitch, py.yaw, std::move(frame));
}

inline PitchYaw vector_to_pitch_yaw(const Vec3& g) {
  const double n = g.norm();
  if (!(n > 0.0)) throw InvalidDirection("zero gaze vector");
  const Vec3 u = g / n;
  if (std::abs(u.y()) >= 1.0 || (u.x() == 0.0 && u.z() == 0.0)) {
    throw DegeneratePoleError("yaw is undefined at the pole |g_y| = 1");
  }
  return {-std::asin(std::clamp(u.y(), -1.0, 1.0)), std::atan2(-u.x(), -u.z())};
}

inline PitchYaw vector_to_pitch_yaw(const GazeDirection& g) { return vector_to_pitch_yaw(g.vector()); }

/// Angle between two directions in degrees; inputs need not be unit length.
///
/// Equal to acos(g . g_hat / (|g| |g_hat|)), evaluated as 2 atan2(|u - w|, |u + w|) on the
/// normalized inputs: accurate near 0 and 180 degrees, exactly symmetric, and exactly 0
/// for identical inputs.
inline double angular_error_deg(const Vec3& g, const Vec3& g_hat) {
  const double ng = g.norm();
  const double nh = g_hat.norm();
  if (!(ng > 0.0) || !(nh > 0.0) || !std::isfinite(ng) || !std::isfinite(nh)) {
    throw InvalidDirection("angular error of a zero or non-finite direction");
  }
  const Vec3 u = g / ng;
  const Vec3 w = g_hat / nh;
  return kRadToDeg * 2.0 * std::atan2((u - w).norm(), (u + w).norm());
}

inline double angular_error_deg(const GazeDirection& g, const GazeDirection& g_hat) {
  return angular_error_deg(g.vector(), g_hat.vector());
}

/// R_C^S * M^{-1}: maps the normalized-camera frame into the screen frame.
///
/// `r_cam_to_screen` maps original camera -> screen and `m_norm` maps
/// original camera -> normalized camera.
inline RotationMatrix effective_rotation(const RotationMatrix& r_cam_to_screen,
                                         const RotationMatrix& m_norm) {
  if (!r_cam_to_screen.from_frame().empty() && !m_norm.from_frame().empty() &&
      r_cam_to_screen.from_frame() != m_norm.from_frame()) {
    throw InvalidArgument("frame chain mismatch: R starts at '" + r_cam_to_screen.from_frame() +
                          "' but M starts at '" + m_norm.from_frame() + "'");
  }
  return RotationMatrix(r_cam_to_screen.matrix() * m_norm.matrix().transpose(), m_norm.to_frame(),
                        r_cam_to_screen.to_frame());
}

/// Per-view label together with the rotation taking its frame to the common frame.
struct LabeledView {
  RotationMatrix rotation;
  GazeDirection gaze;
};

/// Largest pairwise angle (degrees) between the views' labels once mapped
/// into the common frame; zero for a geometrically consistent group.
inline double check_multiview_consistency(std::span<const LabeledView> views) {
  if (views.size() < 2) {
    throw InsufficientViewsError("multi-view consistency needs at least 2 labeled views");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    const Vec3 gi = views[i].rotation.apply(views[i].gaze.vector());
    for (std::size_t j = i + 1; j < views.size(); ++j) {
      const Vec3 gj = views[j].rotation.apply(views[j].gaze.vector());
      worst = std::max(worst, angular_error_deg(gi, gj));
    }
  }
  return worst;
}

}  // namespace gazeclr
