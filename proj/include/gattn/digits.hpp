#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gattn/common.hpp"
#include "gattn/rng.hpp"

namespace gattn {

/// A set of 28x28 single-channel digit images with labels, the unit the
/// cluttered generator draws from (either parsed MNIST IDX files or the
/// procedural corpus below).
struct DigitPool {
  std::int64_t count = 0;
  std::vector<std::uint8_t> images;  // count * 28 * 28, row-major
  std::vector<std::uint8_t> labels;  // count
};

namespace digits_detail {

struct Pt {
  double x, y;
};

using Stroke = std::vector<Pt>;

inline void arc(Stroke& s, double cx, double cy, double rx, double ry, double deg0, double deg1,
                int n) {
  for (int i = 0; i <= n; ++i) {
    const double a = (deg0 + (deg1 - deg0) * i / n) * 3.14159265358979323846 / 180.0;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
}

/// Digit skeletons as polylines in a unit box, x right, y down.
inline std::vector<Stroke> skeleton(int digit) {
  std::vector<Stroke> strokes;
  switch (digit) {
    case 0: {
      Stroke s;
      arc(s, 0.5, 0.5, 0.26, 0.37, 0, 360, 20);
      strokes.push_back(std::move(s));
      break;
    }
    case 1: {
      strokes.push_back({{0.38, 0.28}, {0.55, 0.12}});
      strokes.push_back({{0.55, 0.12}, {0.55, 0.88}});
      break;
    }
    case 2: {
      Stroke top;
      arc(top, 0.5, 0.34, 0.24, 0.22, 170, 350, 10);
      strokes.push_back(std::move(top));
      strokes.push_back({{0.73, 0.41}, {0.27, 0.86}});
      strokes.push_back({{0.27, 0.86}, {0.76, 0.86}});
      break;
    }
    case 3: {
      Stroke top, bot;
      arc(top, 0.47, 0.31, 0.22, 0.19, 150, 390, 12);
      arc(bot, 0.47, 0.67, 0.25, 0.21, -30, 210, 12);
      strokes.push_back(std::move(top));
      strokes.push_back(std::move(bot));
      break;
    }
    case 4: {
      strokes.push_back({{0.56, 0.12}, {0.22, 0.6}});
      strokes.push_back({{0.22, 0.6}, {0.8, 0.6}});
      strokes.push_back({{0.64, 0.12}, {0.64, 0.88}});
      break;
    }
    case 5: {
      strokes.push_back({{0.72, 0.13}, {0.31, 0.13}});
      strokes.push_back({{0.31, 0.13}, {0.3, 0.45}});
      Stroke bowl;
      arc(bowl, 0.46, 0.64, 0.25, 0.22, -110, 150, 12);
      strokes.push_back(std::move(bowl));
      break;
    }
    case 6: {
      strokes.push_back({{0.66, 0.12}, {0.45, 0.3}, {0.33, 0.5}, {0.29, 0.68}});
      Stroke loop;
      arc(loop, 0.5, 0.67, 0.21, 0.2, 180, 540, 14);
      strokes.push_back(std::move(loop));
      break;
    }
    case 7: {
      strokes.push_back({{0.24, 0.14}, {0.77, 0.14}});
      strokes.push_back({{0.77, 0.14}, {0.42, 0.88}});
      break;
    }
    case 8: {
      Stroke top, bot;
      arc(top, 0.5, 0.3, 0.19, 0.17, 0, 360, 14);
      arc(bot, 0.5, 0.66, 0.23, 0.21, 0, 360, 14);
      strokes.push_back(std::move(top));
      strokes.push_back(std::move(bot));
      break;
    }
    case 9: {
      Stroke loop;
      arc(loop, 0.48, 0.33, 0.2, 0.19, 0, 360, 14);
      strokes.push_back(std::move(loop));
      strokes.push_back({{0.68, 0.33}, {0.67, 0.6}, {0.58, 0.88}});
      break;
    }
    default:
      throw ValueError("skeleton: digit must be 0..9, got " + std::to_string(digit));
  }
  return strokes;
}

inline double seg_dist(double px, double py, const Pt& a, const Pt& b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = px - a.x, wy = py - a.y;
  const double vv = vx * vx + vy * vy;
  double t = vv > 0 ? (wx * vx + wy * vy) / vv : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace digits_detail

/// Rasterizes one digit instance into a 28x28 grayscale image. Each draw
/// applies a random affine distortion (rotation, anisotropic scale, shear),
/// per-vertex jitter, and a random stroke thickness and brightness, giving
/// unbounded distinct instances per class.
inline std::array<std::uint8_t, 28 * 28> render_digit(int digit, Rng& rng) {
  using digits_detail::Pt;
  auto strokes = digits_detail::skeleton(digit);

  const double rot = rng.uniform(-0.22, 0.22);
  const double sx = rng.uniform(0.78, 1.12);
  const double sy = rng.uniform(0.78, 1.12);
  const double shear = rng.uniform(-0.2, 0.2);
  const double jitter = 0.012;
  const double cr = std::cos(rot), sr = std::sin(rot);
  for (auto& s : strokes)
    for (auto& p : s) {
      double x = p.x - 0.5 + rng.normal(0.0, jitter);
      double y = p.y - 0.5 + rng.normal(0.0, jitter);
      x += shear * y;
      const double xr = sx * (cr * x - sr * y);
      const double yr = sy * (sr * x + cr * y);
      p = {xr + 0.5, yr + 0.5};
    }

  // Unit box maps to a 20x20 core centered in the 28x28 frame (2 px of
  // extra placement jitter); the cluttered canvas adds the real translation.
  const double core = 20.0;
  const double ox = 4.0 + rng.uniform(-1.5, 1.5);
  const double oy = 4.0 + rng.uniform(-1.5, 1.5);
  const double half_thick = rng.uniform(0.85, 1.45);
  const double aa = 0.85;
  const double brightness = rng.uniform(0.78, 1.0);

  std::array<std::uint8_t, 28 * 28> img{};
  for (int py = 0; py < 28; ++py) {
    for (int px = 0; px < 28; ++px) {
      const double ux = (px + 0.5 - ox) / core;
      const double uy = (py + 0.5 - oy) / core;
      double d = 1e9;
      for (const auto& s : strokes)
        for (std::size_t i = 0; i + 1 < s.size(); ++i)
          d = std::min(d, digits_detail::seg_dist(ux, uy, s[i], s[i + 1]));
      const double dpx = d * core;  // distance in pixels
      const double v = std::clamp((half_thick + aa - dpx) / aa, 0.0, 1.0);
      img[static_cast<std::size_t>(py * 28 + px)] =
          static_cast<std::uint8_t>(std::lround(255.0 * brightness * v));
    }
  }
  return img;
}

/// Deterministic corpus of digit instances with uniformly drawn labels.
inline DigitPool make_digit_corpus(std::int64_t count, std::uint64_t seed) {
  if (count < 1) throw ValueError("make_digit_corpus: count must be >= 1");
  DigitPool pool;
  pool.count = count;
  pool.images.resize(static_cast<std::size_t>(count) * 28 * 28);
  pool.labels.resize(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng(hash_combine(seed, static_cast<std::uint64_t>(i)));
    const int label = static_cast<int>(rng.below(10));
    const auto img = render_digit(label, rng);
    std::copy(img.begin(), img.end(), pool.images.begin() + i * 28 * 28);
    pool.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(label);
  }
  return pool;
}

}  // namespace gattn
