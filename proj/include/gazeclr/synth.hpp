#pragma once

// Synthetic multi-view gaze data.
//
// A latent screen-frame gaze direction is drawn per (participant, timestamp).
// Each camera view sees it through a fixed rig rotation and a small per-frame
// normalization rotation; the view's image shows a dark disk whose position is
// linear in the view's (yaw, pitch) label over a textured, participant-specific
// background with per-frame photometric noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "gazeclr/data.hpp"
#include "gazeclr/errors.hpp"
#include "gazeclr/geometry.hpp"
#include "gazeclr/image.hpp"

namespace gazeclr {

struct SynthConfig {
  int participants = 5;
  int groups_per_participant = 400;
  int views = 4;
  int image_size = 64;
  std::uint64_t seed = 0;
  /// Latent gaze is uniform over a cone of this half-angle about -z.
  double cone_half_angle_deg = 40.0;
  /// Upper bound on per-frame normalization rotation angles.
  double norm_jitter_deg = 5.0;
  /// All participants replay one latent gaze sequence (seeded by `seed` only).
  bool shared_gaze = false;
  std::string participant_prefix = "p";
  /// Disk displacement per degree: S * disk_travel / label_range_deg.
  double label_range_deg = 75.0;
  double disk_travel = 0.38;
  double disk_radius = 0.11;

  void validate() const {
    if (views < 2) throw InsufficientViewsError("synthetic data needs at least 2 views");
    if (participants < 1) throw ConfigError("synth.participants", "must be positive");
    if (groups_per_participant < 1) throw ConfigError("synth.groups_per_participant", "must be positive");
    if (image_size < 8) throw ConfigError("synth.image_size", "must be at least 8");
    if (!(cone_half_angle_deg > 0.0 && cone_half_angle_deg < 80.0)) {
      throw ConfigError("synth.cone_half_angle_deg", "must lie in (0, 80)");
    }
  }
};

/// Appearance parameters fixed per participant.
struct SynthAppearance {
  std::array<float, 3> base{};
  std::array<float, 3> disk{};
  struct Grating {
    double fx, fy, phase, amplitude;
    std::array<float, 3> mix;
  };
  std::vector<Grating> gratings;
  /// Person-specific offset of the disk, in pixels per unit image side.
  double offset_x = 0.0, offset_y = 0.0;
};

namespace detail {

inline std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  h -= std::floor(h);
  const double h6 = h * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r, g, b;
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

inline SynthAppearance make_appearance(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SynthAppearance a;
  a.base = detail::hsv_to_rgb(u(rng), 0.3 + 0.35 * u(rng), 0.55 + 0.2 * u(rng));
  a.disk = detail::hsv_to_rgb(u(rng), 0.5, 0.12);
  const int n = 3;
  for (int i = 0; i < n; ++i) {
    const double theta = 2 * std::numbers::pi * u(rng);
    const double freq = 2.0 + 5.0 * u(rng);
    SynthAppearance::Grating g{freq * std::cos(theta), freq * std::sin(theta), 2 * std::numbers::pi * u(rng),
                               0.03 + 0.04 * u(rng), {}};
    for (auto& m : g.mix) m = static_cast<float>(0.4 + 0.6 * u(rng));
    a.gratings.push_back(g);
  }
  a.offset_x = 0.03 * (2 * u(rng) - 1);
  a.offset_y = 0.03 * (2 * u(rng) - 1);
  return a;
}

/// Disk center (x, y) in pixels for a per-view label.
inline std::array<double, 2> disk_center(const SynthConfig& cfg, const SynthAppearance& a, const PitchYaw& label) {
  const double s = cfg.image_size;
  const double k = cfg.disk_travel * s / cfg.label_range_deg;
  const double x = s / 2 + k * label.yaw * kRadToDeg + a.offset_x * s;
  const double y = s / 2 - k * label.pitch * kRadToDeg + a.offset_y * s;
  const double r = cfg.disk_radius * s;
  return {std::clamp(x, r, s - r), std::clamp(y, r, s - r)};
}

/// Renders one view. `frame_rng` supplies the per-image photometric noise.
inline Image render_view(const SynthConfig& cfg, const SynthAppearance& a, const PitchYaw& label, Rng& frame_rng) {
  const int s = cfg.image_size;
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double brightness = 0.05 * n01(frame_rng);
  std::array<double, 3> gain{};
  for (auto& g : gain) g = 0.9 + 0.2 * u(frame_rng);
  const double drift = 2 * std::numbers::pi * u(frame_rng);
  const auto center = disk_center(cfg, a, label);
  const double radius = cfg.disk_radius * s;

  Image img(s, s);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double fx = (x + 0.5) / s, fy = (y + 0.5) / s;
      std::array<double, 3> c{a.base[0], a.base[1], a.base[2]};
      for (std::size_t gi = 0; gi < a.gratings.size(); ++gi) {
        const auto& g = a.gratings[gi];
        const double phase = g.phase + (gi == 0 ? drift : 0.0);
        const double w = g.amplitude * std::sin(2 * std::numbers::pi * (g.fx * fx + g.fy * fy) + phase);
        for (int ch = 0; ch < 3; ++ch) c[static_cast<std::size_t>(ch)] += w * g.mix[static_cast<std::size_t>(ch)];
      }
      const double dist = std::hypot(x + 0.5 - center[0], y + 0.5 - center[1]);
      const double alpha = std::clamp(radius + 0.5 - dist, 0.0, 1.0);
      for (int ch = 0; ch < 3; ++ch) {
        const auto k = static_cast<std::size_t>(ch);
        double v = (1 - alpha) * c[k] + alpha * a.disk[k];
        v = v * gain[k] + brightness + 0.02 * n01(frame_rng);
        img.at(y, x, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

/// Camera-to-screen rotation of view `v`: view 0 is the reference camera, the
/// others sit to the sides, above and below it.
inline RotationMatrix rig_rotation(int v) {
  static const std::array<std::pair<Vec3, double>, 6> rig{{
      {Vec3::UnitY(), 0.0},
      {Vec3::UnitY(), 25.0},
      {Vec3::UnitY(), -25.0},
      {Vec3::UnitX(), 20.0},
      {Vec3::UnitX(), -20.0},
      {Vec3(1, 1, 0), 30.0},
  }};
  if (v == 0) return RotationMatrix::identity();
  if (v < static_cast<int>(rig.size())) {
    return RotationMatrix::axis_angle(rig[static_cast<std::size_t>(v)].first,
                                      rig[static_cast<std::size_t>(v)].second * kDegToRad);
  }
  Rng rng(detail::mix_seed(0xC0FFEE, static_cast<std::uint64_t>(v)));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Vec3 axis(u(rng), u(rng), 0.2 * u(rng));
  return RotationMatrix::axis_angle(axis, (15.0 + 7.5 * (u(rng) + 1.0)) * kDegToRad);
}

inline std::string view_name(int v) { return "cam" + std::to_string(v); }

/// Writes `<out_dir>/manifest.jsonl` and `<out_dir>/images/...`; returns the loaded manifest.
inline DatasetManifest synth_generate(const fs::path& out_dir, const SynthConfig& cfg) {
  cfg.validate();
  fs::create_directories(out_dir / "images");
  DatasetManifest m;
  m.root = out_dir;
  const double cos_cap = std::cos(cfg.cone_half_angle_deg * kDegToRad);
  const double tan_cap = std::tan(cfg.cone_half_angle_deg * kDegToRad);
  std::vector<RotationMatrix> rig;
  for (int v = 0; v < cfg.views; ++v) rig.push_back(rig_rotation(v));

  for (int p = 0; p < cfg.participants; ++p) {
    char pname[32];
    std::snprintf(pname, sizeof pname, "%s%03d", cfg.participant_prefix.c_str(), p);
    const std::string participant = pname;
    Rng appearance_rng(detail::mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(p)));
    const SynthAppearance look = make_appearance(appearance_rng);
    Rng gaze_rng(cfg.shared_gaze ? detail::mix_seed(cfg.seed, 7) : detail::mix_seed(cfg.seed, 5000 + static_cast<std::uint64_t>(p)));
    Rng frame_rng(detail::mix_seed(cfg.seed, 9000 + static_cast<std::uint64_t>(p)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    fs::create_directories(out_dir / "images" / participant);

    for (int t = 0; t < cfg.groups_per_participant; ++t) {
      const double cz = cos_cap + (1.0 - cos_cap) * u(gaze_rng);
      const double phi = 2 * std::numbers::pi * u(gaze_rng);
      const double sz = std::sqrt(std::max(0.0, 1.0 - cz * cz));
      const Vec3 g_screen(sz * std::cos(phi), sz * std::sin(phi), -cz);
      const std::array<double, 2> pog{0.5 + g_screen.x() / cz / (2 * tan_cap), 0.5 + g_screen.y() / cz / (2 * tan_cap)};

      for (int v = 0; v < cfg.views; ++v) {
        std::normal_distribution<double> n01;
        const Vec3 axis(n01(frame_rng), n01(frame_rng), n01(frame_rng));
        const double angle = cfg.norm_jitter_deg * kDegToRad * u(frame_rng);
        const RotationMatrix norm = RotationMatrix::axis_angle(axis, angle);
        const Mat3 effective = rig[static_cast<std::size_t>(v)].matrix() * norm.matrix().transpose();
        const Vec3 label = (effective.transpose() * g_screen).normalized();
        const Image img = render_view(cfg, look, vector_to_pitch_yaw(label), frame_rng);

        ManifestRecord r;
        r.participant = participant;
        r.timestamp = t;
        r.view = view_name(v);
        char rel[96];
        std::snprintf(rel, sizeof rel, "images/%s/%05d_%s.png", participant.c_str(), t, r.view.c_str());
        r.image_path = rel;
        write_png(out_dir / r.image_path, ImageU8::quantize(img));
        r.rot = rig[static_cast<std::size_t>(v)].matrix();
        r.norm = norm.matrix();
        r.gaze = label;
        r.pog = pog;
        m.records.push_back(std::move(r));
      }
    }
  }
  write_manifest(out_dir / "manifest.jsonl", m);
  return load_manifest(out_dir / "manifest.jsonl");
}

}  // namespace gazeclr
