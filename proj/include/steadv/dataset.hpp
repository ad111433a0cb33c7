#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "steadv/image.hpp"
#include "steadv/render.hpp"
#include "steadv/rng.hpp"

namespace steadv {

struct LabeledImage {
  Image image;  // HxWx3 in [0,1]
  int label = 0;
};

// A scene for the patch threat model: a background with a planar billboard
// quad the adversary controls. The scene label depends only on the
// background style; billboard content carries no label information.
struct Scene {
  Image background;                       // 64x64x3
  std::array<Vec2, 4> billboard_corners;  // TL,TR,BR,BL, convex
  Image base_patch;                       // benign art, 24x24x3
  int label = 0;
};

inline constexpr int kClassImageSize = 32;
inline constexpr int kSceneSize = 64;
inline constexpr int kPatchSize = 24;

namespace detail {

inline void set_px(Image& img, int y, int x, const double rgb[3]) {
  for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(std::clamp(rgb[c], 0.0, 1.0));
}

inline void lerp_px(Image& img, int y, int x, const double rgb[3], double t) {
  for (int c = 0; c < 3; ++c) {
    double v = img.at(y, x, c) * (1.0 - t) + rgb[c] * t;
    img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
}

// Shape membership in centered coordinates, radius r.
inline bool shape_inside(int kind, double dx, double dy, double r) {
  switch (kind) {
    case 0:  // disc
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::max(std::fabs(dx), std::fabs(dy)) <= 0.82 * r;
    case 2:  // triangle, apex up
      return dy <= 0.72 * r && std::fabs(dx) <= (dy + r) * 0.62;
    case 3:  // plus
      return (std::fabs(dx) <= 0.34 * r && std::fabs(dy) <= r) ||
             (std::fabs(dy) <= 0.34 * r && std::fabs(dx) <= r);
    case 4: {  // ring
      double q = dx * dx + dy * dy;
      return q <= r * r && q >= 0.3 * r * r;
    }
    case 5:  // diamond
      return std::fabs(dx) + std::fabs(dy) <= 1.15 * r;
    case 6:  // horizontal bars
      return std::max(std::fabs(dx), std::fabs(dy)) <= r &&
             (static_cast<int>(std::floor((dy + r) / (r * 0.67))) % 2 == 0);
    case 7:  // checker
      return std::max(std::fabs(dx), std::fabs(dy)) <= r &&
             ((static_cast<int>(std::floor((dx + r) / r)) +
               static_cast<int>(std::floor((dy + r) / r))) % 2 == 0);
    default:
      return false;
  }
}

// 2x2 supersampled coverage of the class shape at pixel (x, y).
inline double shape_coverage(int kind, int x, int y, double cx, double cy, double r) {
  int hits = 0;
  for (int sy = 0; sy < 2; ++sy)
    for (int sx = 0; sx < 2; ++sx)
      if (shape_inside(kind, x + 0.25 + 0.5 * sx - cx, y + 0.25 + 0.5 * sy - cy, r)) ++hits;
  return hits / 4.0;
}

inline double quad_area(const std::array<Vec2, 4>& q) {
  double a = 0;
  for (int i = 0; i < 4; ++i) {
    const Vec2& p0 = q[static_cast<std::size_t>(i)];
    const Vec2& p1 = q[static_cast<std::size_t>((i + 1) % 4)];
    a += p0.x * p1.y - p1.x * p0.y;
  }
  return std::fabs(a) / 2.0;
}

inline bool quad_convex(const std::array<Vec2, 4>& q) {
  for (int i = 0; i < 4; ++i) {
    const Vec2& a = q[static_cast<std::size_t>(i)];
    const Vec2& b = q[static_cast<std::size_t>((i + 1) % 4)];
    const Vec2& c = q[static_cast<std::size_t>((i + 2) % 4)];
    double cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
    if (cross <= 0) return false;  // positive orientation in y-down coords
  }
  return true;
}

}  // namespace detail

inline bool valid_billboard_quad(const std::array<Vec2, 4>& q, int scene_size) {
  for (const Vec2& p : q)
    if (p.x < 1.0 || p.y < 1.0 || p.x > scene_size - 1.0 || p.y > scene_size - 1.0) return false;
  if (!detail::quad_convex(q)) return false;
  double area = detail::quad_area(q);
  double scene_area = static_cast<double>(scene_size) * scene_size;
  return area > 4.0 && area >= 0.08 * scene_area && area <= 0.25 * scene_area;
}

// Soft-blob abstract painting; also used for randomized billboard content
// when training the scene classifier.
inline Image random_painting(Rng& rng, int h, int w) {
  Image img(Shape{h, w, 3});
  double c0[3], c1[3];
  hsv_to_rgb(rng.uniform(), rng.uniform(0.25, 0.55), rng.uniform(0.55, 0.9), c0);
  hsv_to_rgb(rng.uniform(), rng.uniform(0.25, 0.55), rng.uniform(0.55, 0.9), c1);
  for (int y = 0; y < h; ++y) {
    double t = static_cast<double>(y) / (h - 1);
    double row[3] = {c0[0] * (1 - t) + c1[0] * t, c0[1] * (1 - t) + c1[1] * t,
                     c0[2] * (1 - t) + c1[2] * t};
    for (int x = 0; x < w; ++x) detail::set_px(img, y, x, row);
  }
  int blobs = 4 + rng.uniform_int(4);
  for (int bIdx = 0; bIdx < blobs; ++bIdx) {
    double bx = rng.uniform(0, w), by = rng.uniform(0, h);
    double sigma = rng.uniform(2.5, 6.0);
    double strength = rng.uniform(0.5, 0.9);
    double col[3];
    hsv_to_rgb(rng.uniform(), rng.uniform(0.35, 0.8), rng.uniform(0.5, 1.0), col);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
        detail::lerp_px(img, y, x, col, strength * std::exp(-d2 / (2 * sigma * sigma)));
      }
  }
  return img;
}

inline Image green_placeholder_patch(int h = kPatchSize, int w = kPatchSize) {
  Image img(Shape{h, w, 3});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = 0.05f;
      img.at(y, x, 1) = 0.72f;
      img.at(y, x, 2) = 0.15f;
    }
  return img;
}

// K distinguishable classes keyed on the foreground shape kind; the shape
// hue is drawn per image (for K > 8 the hue half-circle disambiguates the
// repeated shapes), so color alone carries no label signal and the
// classifier has to read geometry. Labels cycle round-robin, so class
// balance is exact up to the remainder.
inline std::vector<LabeledImage> generate_classification_set(std::uint64_t seed, int count,
                                                             int num_classes) {
  if (num_classes < 2 || num_classes > 16)
    throw ConfigError("generate_classification_set: classes must be in [2,16]");
  if (count < 1) throw ConfigError("generate_classification_set: count must be >= 1");
  const int n = kClassImageSize;
  std::vector<LabeledImage> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    int label = i % num_classes;
    Rng rng(mix_seed(seed, 0x11, static_cast<std::uint64_t>(i)));
    Image img(Shape{n, n, 3});

    double bg_hue = rng.uniform();
    double bg0[3], bg1[3];
    hsv_to_rgb(bg_hue, rng.uniform(0.1, 0.4), rng.uniform(0.35, 0.55), bg0);
    hsv_to_rgb(bg_hue + rng.uniform(-0.15, 0.15), rng.uniform(0.1, 0.4), rng.uniform(0.5, 0.7),
               bg1);
    double gx = rng.uniform(-1, 1), gy = rng.uniform(-1, 1);
    double gnorm = std::max(1e-6, std::fabs(gx) + std::fabs(gy));
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double t = 0.5 + 0.5 * (gx * (x - n / 2.0) + gy * (y - n / 2.0)) / (gnorm * n);
        t = std::clamp(t, 0.0, 1.0);
        double px[3];
        for (int c = 0; c < 3; ++c)
          px[c] = bg0[c] * (1 - t) + bg1[c] * t + rng.uniform(-0.06, 0.06);
        detail::set_px(img, y, x, px);
      }

    // background clutter: soft blobs in background-like colors
    for (int b = 0; b < 2; ++b) {
      double bx = rng.uniform(0, n), by = rng.uniform(0, n);
      double br = rng.uniform(3.0, 4.5);
      double col[3];
      hsv_to_rgb(rng.uniform(), rng.uniform(0.1, 0.4), rng.uniform(0.35, 0.7), col);
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
          double a = 0.4 * std::exp(-d2 / (2 * br * br));
          if (a > 0.01) detail::lerp_px(img, y, x, col, a);
        }
    }

    double cx = n / 2.0 + rng.uniform(-3, 3);
    double cy = n / 2.0 + rng.uniform(-3, 3);
    double r = rng.uniform(9.2, 10.8);
    double hue = num_classes <= 8 ? rng.uniform()
                                  : (label / 8) * 0.5 + rng.uniform(0.05, 0.45);
    double col[3];
    hsv_to_rgb(hue, rng.uniform(0.75, 0.9), rng.uniform(0.8, 0.95), col);
    int kind = label % 8;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double cov = detail::shape_coverage(kind, x, y, cx, cy, r);
        if (cov > 0) detail::lerp_px(img, y, x, col, cov);
      }

    out.push_back(LabeledImage{std::move(img), label});
  }
  return out;
}

// Scenes: class-hued sky/ground/building layout plus a billboard quad
// covering 8-25% of the scene and a benign painting as the base patch.
inline std::vector<Scene> generate_scene_set(std::uint64_t seed, int count, int num_classes) {
  if (num_classes < 2 || num_classes > 16)
    throw ConfigError("generate_scene_set: classes must be in [2,16]");
  if (count < 1) throw ConfigError("generate_scene_set: count must be >= 1");
  const int n = kSceneSize;
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    int label = i % num_classes;
    Rng rng(mix_seed(seed, 0x22, static_cast<std::uint64_t>(i)));
    Scene scene;
    scene.label = label;
    Image& img = scene.background;
    img = Image(Shape{n, n, 3});

    double hue = static_cast<double>(label) / num_classes;
    int horizon = 28 + rng.uniform_int(12);
    double sky0[3], sky1[3];
    hsv_to_rgb(hue, 0.45, 0.92, sky0);
    hsv_to_rgb(hue, 0.18, 1.0, sky1);
    double ground[3];
    hsv_to_rgb(hue + 0.13, 0.4, 0.42, ground);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double px[3];
        if (y < horizon) {
          double t = static_cast<double>(y) / horizon;
          for (int c = 0; c < 3; ++c)
            px[c] = sky0[c] * (1 - t) + sky1[c] * t + rng.uniform(-0.02, 0.02);
        } else {
          double stripe = ((y / 3) % 2 == 0) ? 0.03 : -0.03;
          for (int c = 0; c < 3; ++c) px[c] = ground[c] + stripe + rng.uniform(-0.03, 0.03);
        }
        detail::set_px(img, y, x, px);
      }

    int buildings = 3 + rng.uniform_int(4);
    for (int bIdx = 0; bIdx < buildings; ++bIdx) {
      int x0 = rng.uniform_int(n - 8);
      int bw = 6 + rng.uniform_int(9);
      int top = std::max(2, horizon - 8 - rng.uniform_int(18));
      double col[3];
      hsv_to_rgb(hue + rng.uniform(-0.06, 0.06), 0.25, 0.2 + rng.uniform(0.0, 0.25), col);
      for (int y = top; y < horizon; ++y)
        for (int x = x0; x < std::min(n, x0 + bw); ++x) detail::set_px(img, y, x, col);
    }

    for (int attempt = 0;; ++attempt) {
      if (attempt >= 1000) throw Error("generate_scene_set: could not place billboard quad");
      double cx = rng.uniform(20, n - 20), cy = rng.uniform(22, n - 22);
      double a = rng.uniform(8, 13), b = rng.uniform(7, 11);
      std::array<Vec2, 4> q = {Vec2{cx - a, cy - b}, Vec2{cx + a, cy - b}, Vec2{cx + a, cy + b},
                               Vec2{cx - a, cy + b}};
      for (Vec2& p : q) {
        p.x += rng.uniform(-2.5, 2.5);
        p.y += rng.uniform(-2.5, 2.5);
      }
      if (valid_billboard_quad(q, n)) {
        scene.billboard_corners = q;
        break;
      }
    }

    // dark board behind the patch, for exports and edge pixels
    Homography h =
        solve_homography(rect_corners(kPatchSize, kPatchSize), scene.billboard_corners);
    Homography inv = h.inverse();
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        Vec2 s = inv.apply(Vec2{x + 0.5, y + 0.5});
        if (s.x >= -0.5 && s.x <= kPatchSize + 0.5 && s.y >= -0.5 && s.y <= kPatchSize + 0.5) {
          double dark[3] = {0.12, 0.12, 0.12};
          detail::set_px(img, y, x, dark);
        }
      }

    scene.base_patch = random_painting(rng, kPatchSize, kPatchSize);
    out.push_back(std::move(scene));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export: PPM images plus a one-record-per-line manifest.
// ---------------------------------------------------------------------------

inline void export_classification_set(const std::string& dir,
                                      const std::vector<LabeledImage>& set) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw IoError("export: cannot write manifest in " + dir);
  char name[32];
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    write_ppm(dir + "/" + name, set[i].image);
    manifest << name << " " << set[i].label << "\n";
  }
}

inline void export_scene_set(const std::string& dir, const std::vector<Scene>& set) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw IoError("export: cannot write manifest in " + dir);
  char name[40];
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::snprintf(name, sizeof(name), "scene_%05zu.ppm", i);
    write_ppm(dir + "/" + name, set[i].background);
    std::snprintf(name, sizeof(name), "scene_%05zu_patch.ppm", i);
    write_ppm(dir + "/" + name, set[i].base_patch);
    std::snprintf(name, sizeof(name), "scene_%05zu.ppm", i);
    manifest << name << " " << set[i].label;
    for (const Vec2& p : set[i].billboard_corners) manifest << " " << p.x << " " << p.y;
    manifest << "\n";
  }
}

}  // namespace steadv
