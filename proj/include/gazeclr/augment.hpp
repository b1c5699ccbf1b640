#pragma once

// Appearance augmentations applied to contrastive views. The pipeline order is
// fixed: crop+resize, gaussian blur, color jitter, grayscale, autocontrast.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "gazeclr/errors.hpp"
#include "gazeclr/image.hpp"

namespace gazeclr {

using Rng = std::mt19937_64;

struct AugmentationConfig {
  /// Fraction of the image area kept by the random crop.
  double crop_scale_min = 0.8;
  double crop_scale_max = 1.0;

  double blur_probability = 0.5;
  /// Kernel size as a fraction of the image side (rounded to the next odd size, at least 3).
  double blur_kernel_fraction = 0.1;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;

  double jitter_probability = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;

  double grayscale_probability = 0.2;
  double autocontrast_probability = 0.5;

  /// Every transform disabled: augment() returns its input unchanged.
  static AugmentationConfig identity() {
    AugmentationConfig c;
    c.crop_scale_min = c.crop_scale_max = 1.0;
    c.blur_probability = c.jitter_probability = c.grayscale_probability = c.autocontrast_probability = 0.0;
    return c;
  }

  /// Photometric transforms only (no crop).
  static AugmentationConfig photometric() {
    AugmentationConfig c;
    c.crop_scale_min = c.crop_scale_max = 1.0;
    return c;
  }

  void validate() const {
    auto prob = [](double p, const char* key) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(key, "probability must lie in [0, 1]");
    };
    prob(blur_probability, "augmentation.blur_probability");
    prob(jitter_probability, "augmentation.jitter_probability");
    prob(grayscale_probability, "augmentation.grayscale_probability");
    prob(autocontrast_probability, "augmentation.autocontrast_probability");
    if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
      throw ConfigError("augmentation.crop_scale", "crop scale range must satisfy 0 < min <= max <= 1");
    }
    if (!(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max)) {
      throw ConfigError("augmentation.blur_sigma", "blur sigma range must satisfy 0 < min <= max");
    }
    if (!(blur_kernel_fraction > 0.0 && blur_kernel_fraction <= 1.0)) {
      throw ConfigError("augmentation.blur_kernel_fraction", "kernel fraction must lie in (0, 1]");
    }
    if (brightness < 0.0 || contrast < 0.0 || saturation < 0.0) {
      throw ConfigError("augmentation.color_jitter", "jitter strengths must be non-negative");
    }
    if (hue < 0.0 || hue > 0.5) throw ConfigError("augmentation.hue", "hue strength must lie in [0, 0.5]");
  }
};

namespace detail {

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline bool coin(Rng& rng, double p) {
  // Always consume one draw so the stream layout does not depend on p.
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return u < p;
}

inline float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

/// Bilinear resample of the window [x0, x0 + cw) x [y0, y0 + ch) to out_h x out_w
/// (pixel-center alignment).
inline Image crop_resize(const Image& src, double x0, double y0, double cw, double ch, int out_h, int out_w) {
  Image out(out_h, out_w);
  const double sx = cw / out_w, sy = ch / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp(y0 + (y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int iy = std::min(static_cast<int>(fy), src.height - 1);
    const int iy1 = std::min(iy + 1, src.height - 1);
    const float wy = static_cast<float>(fy - iy);
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp(x0 + (x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int ix = std::min(static_cast<int>(fx), src.width - 1);
      const int ix1 = std::min(ix + 1, src.width - 1);
      const float wx = static_cast<float>(fx - ix);
      for (int c = 0; c < 3; ++c) {
        const float top = src.at(iy, ix, c) * (1 - wx) + src.at(iy, ix1, c) * wx;
        const float bot = src.at(iy1, ix, c) * (1 - wx) + src.at(iy1, ix1, c) * wx;
        out.at(y, x, c) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

inline int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

/// Separable gaussian blur with reflect padding.
inline Image gaussian_blur(const Image& src, int ksize, double sigma) {
  const int r = ksize / 2;
  std::vector<float> k(static_cast<std::size_t>(ksize));
  double total = 0.0;
  for (int i = -r; i <= r; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + r)] = static_cast<float>(v);
    total += v;
  }
  for (auto& v : k) v = static_cast<float>(v / total);

  Image tmp(src.height, src.width), out(src.height, src.width);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * src.at(y, reflect(x + i, src.width), c);
        tmp.at(y, x, c) = acc;
      }
    }
  }
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp.at(reflect(y + i, src.height), x, c);
        out.at(y, x, c) = acc;
      }
    }
  }
  return out;
}

inline void adjust_brightness(Image& img, float f) {
  for (auto& v : img.data) v = clamp01(v * f);
}

inline void adjust_contrast(Image& img, float f) {
  double mean = 0.0;
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    mean += luminance(img.data[3 * p], img.data[3 * p + 1], img.data[3 * p + 2]);
  }
  const float m = static_cast<float>(mean / static_cast<double>(img.pixels()));
  for (auto& v : img.data) v = clamp01(f * v + (1.0f - f) * m);
}

inline void adjust_saturation(Image& img, float f) {
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    float* px = &img.data[3 * p];
    const float g = luminance(px[0], px[1], px[2]);
    for (int c = 0; c < 3; ++c) px[c] = clamp01(f * px[c] + (1.0f - f) * g);
  }
}

/// Rotates hue by `shift` of a full turn (HSV space).
inline void adjust_hue(Image& img, float shift) {
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    float* px = &img.data[3 * p];
    const float r = px[0], g = px[1], b = px[2];
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const float delta = mx - mn;
    if (delta <= 0.0f) continue;
    float h;
    if (mx == r) {
      h = std::fmod((g - b) / delta, 6.0f);
    } else if (mx == g) {
      h = (b - r) / delta + 2.0f;
    } else {
      h = (r - g) / delta + 4.0f;
    }
    h = h / 6.0f + shift;
    h -= std::floor(h);
    const float s = delta / mx, v = mx;
    const float h6 = h * 6.0f;
    const int sector = static_cast<int>(h6) % 6;
    const float f = h6 - std::floor(h6);
    const float pp = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    std::array<float, 3> rgb{};
    switch (sector) {
      case 0: rgb = {v, t, pp}; break;
      case 1: rgb = {q, v, pp}; break;
      case 2: rgb = {pp, v, t}; break;
      case 3: rgb = {pp, q, v}; break;
      case 4: rgb = {t, pp, v}; break;
      default: rgb = {v, pp, q}; break;
    }
    for (int c = 0; c < 3; ++c) px[c] = clamp01(rgb[static_cast<std::size_t>(c)]);
  }
}

inline void to_grayscale(Image& img) {
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    float* px = &img.data[3 * p];
    const float g = clamp01(luminance(px[0], px[1], px[2]));
    px[0] = px[1] = px[2] = g;
  }
}

/// Per-channel min/max stretch to [0, 1]; flat channels are left alone.
inline void autocontrast(Image& img) {
  for (int c = 0; c < 3; ++c) {
    float mn = 1.0f, mx = 0.0f;
    for (std::size_t p = 0; p < img.pixels(); ++p) {
      mn = std::min(mn, img.data[3 * p + c]);
      mx = std::max(mx, img.data[3 * p + c]);
    }
    if (!(mx > mn)) continue;
    const float scale = 1.0f / (mx - mn);
    for (std::size_t p = 0; p < img.pixels(); ++p) {
      img.data[3 * p + c] = clamp01((img.data[3 * p + c] - mn) * scale);
    }
  }
}

}  // namespace detail

/// One random draw from the augmentation family. `rng` is advanced; the same
/// rng state and config always give the same output.
inline Image augment(const Image& image, const AugmentationConfig& cfg, Rng& rng) {
  Image out = image;

  // crop + resize (square relative to the image aspect)
  const double scale = cfg.crop_scale_min == cfg.crop_scale_max ? cfg.crop_scale_min
                                                                : detail::uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max);
  const double side = std::sqrt(scale);
  const double cw = side * image.width, ch = side * image.height;
  const double x0 = detail::uniform(rng, 0.0, 1.0) * (image.width - cw);
  const double y0 = detail::uniform(rng, 0.0, 1.0) * (image.height - ch);
  if (scale < 1.0) out = detail::crop_resize(image, x0, y0, cw, ch, image.height, image.width);

  // gaussian blur
  const bool blur = detail::coin(rng, cfg.blur_probability);
  const double sigma = detail::uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);
  if (blur) {
    int k = static_cast<int>(std::ceil(cfg.blur_kernel_fraction * std::min(image.width, image.height)));
    if (k % 2 == 0) ++k;
    k = std::max(k, 3);
    out = detail::gaussian_blur(out, k, sigma);
  }

  // color jitter, factors applied in a random order
  const bool jitter = detail::coin(rng, cfg.jitter_probability);
  std::array<int, 4> order{0, 1, 2, 3};
  for (int i = 3; i > 0; --i) {
    const int j = static_cast<int>(std::uniform_int_distribution<int>(0, i)(rng));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  const float fb = static_cast<float>(detail::uniform(rng, std::max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness));
  const float fc = static_cast<float>(detail::uniform(rng, std::max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast));
  const float fs = static_cast<float>(detail::uniform(rng, std::max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation));
  const float fh = static_cast<float>(detail::uniform(rng, -cfg.hue, cfg.hue));
  if (jitter) {
    for (int op : order) {
      switch (op) {
        case 0: if (cfg.brightness > 0) detail::adjust_brightness(out, fb); break;
        case 1: if (cfg.contrast > 0) detail::adjust_contrast(out, fc); break;
        case 2: if (cfg.saturation > 0) detail::adjust_saturation(out, fs); break;
        default: if (cfg.hue > 0) detail::adjust_hue(out, fh); break;
      }
    }
  }

  if (detail::coin(rng, cfg.grayscale_probability)) detail::to_grayscale(out);
  if (detail::coin(rng, cfg.autocontrast_probability)) detail::autocontrast(out);
  return out;
}

}  // namespace gazeclr
