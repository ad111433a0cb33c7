#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "steadv/dataset.hpp"
#include "steadv/image.hpp"
#include "steadv/render.hpp"
#include "steadv/rng.hpp"

namespace steadv {

enum class StageKind {
  color_shift,            // per-channel affine, camera
  gamma,                  // power curve, camera
  printer_palette,        // nearest-color quantization to a perturbed lattice, printer
  lens_blur,              // separable binomial low-pass, camera optics
  sensor_noise,           // fixed per-image additive gaussian field, camera
  quantize8,              // 8-bit grid, round half up, camera
  perspective_recapture   // capture under one jittered homography, crop back by another, camera
};

struct StageSpec {
  StageKind kind = StageKind::quantize8;
  int palette_colors = 512;
  bool dither = true;
  int blur_passes = 2;
  double noise_sigma = 0.01;
  double jitter_px = 1.0;

  static StageSpec color_shift() { return StageSpec{StageKind::color_shift, 0, false, 0, 0, 0}; }
  static StageSpec gamma() { return StageSpec{StageKind::gamma, 0, false, 0, 0, 0}; }
  static StageSpec printer_palette(int colors = 512, bool dither = true) {
    return StageSpec{StageKind::printer_palette, colors, dither, 0, 0, 0};
  }
  static StageSpec lens_blur(int passes = 2) {
    return StageSpec{StageKind::lens_blur, 0, false, passes, 0, 0};
  }
  static StageSpec sensor_noise(double sigma = 0.01) {
    return StageSpec{StageKind::sensor_noise, 0, false, 0, sigma, 0};
  }
  static StageSpec quantize8() { return StageSpec{StageKind::quantize8, 0, false, 0, 0, 0}; }
  static StageSpec perspective_recapture(double jitter = 1.0) {
    return StageSpec{StageKind::perspective_recapture, 0, false, 0, 0, jitter};
  }
};

inline bool stage_monotone(StageKind k) {
  return k == StageKind::color_shift || k == StageKind::gamma || k == StageKind::sensor_noise ||
         k == StageKind::quantize8;
}

inline bool stage_is_printer(StageKind k) { return k == StageKind::printer_palette; }

inline const char* stage_name(StageKind k) {
  switch (k) {
    case StageKind::color_shift: return "colorshift";
    case StageKind::gamma: return "gamma";
    case StageKind::printer_palette: return "palette";
    case StageKind::lens_blur: return "blur";
    case StageKind::sensor_noise: return "noise";
    case StageKind::quantize8: return "quantize8";
    case StageKind::perspective_recapture: return "recapture";
  }
  return "?";
}

namespace detail {

inline const int kBayer4[4][4] = {
    {0, 8, 2, 10}, {12, 4, 14, 6}, {3, 11, 1, 9}, {15, 7, 13, 5}};

// separable binomial low-pass, clamp-to-edge
template <typename T>
Array<T> binomial_blur(const Array<T>& img, int passes) {
  int h = img.dim(0), w = img.dim(1);
  Array<T> out = img;
  Array<T> tmp(img.shape());
  for (int p = 0; p < passes; ++p) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          int xl = x > 0 ? x - 1 : 0;
          int xr = x < w - 1 ? x + 1 : w - 1;
          tmp.at(y, x, c) = static_cast<T>(0.25 * out.at(y, xl, c) + 0.5 * out.at(y, x, c) +
                                           0.25 * out.at(y, xr, c));
        }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          int yu = y > 0 ? y - 1 : 0;
          int yd = y < h - 1 ? y + 1 : h - 1;
          out.at(y, x, c) = static_cast<T>(0.25 * tmp.at(yu, x, c) + 0.5 * tmp.at(y, x, c) +
                                           0.25 * tmp.at(yd, x, c));
        }
  }
  return out;
}

template <typename T>
Array<T> warp_full_nearest(const Array<T>& img, const Homography& h) {
  int H = img.dim(0), W = img.dim(1);
  Array<T> out(img.shape());
  Homography inv = h.inverse();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      Vec2 s = inv.apply(Vec2{x + 0.5, y + 0.5});
      int sx = warp::nn_index(s.x, W);  // clamp to edge
      int sy = warp::nn_index(s.y, H);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  return out;
}

}  // namespace detail

// A pure, seeded image->image pipeline. Never touches a tape: attacks can
// only see through it via the straight-through substitution.
class DistortionChain {
 public:
  DistortionChain() = default;

  DistortionChain(std::vector<StageSpec> specs, std::uint64_t seed) : seed_(seed) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      ResolvedStage st;
      st.spec = specs[i];
      Rng rng(mix_seed(seed, 1000 + i));
      switch (st.spec.kind) {
        case StageKind::color_shift:
          for (int c = 0; c < 3; ++c) {
            st.shift_a[c] = rng.uniform(0.9, 1.1);
            st.shift_b[c] = rng.uniform(-0.05, 0.05);
          }
          break;
        case StageKind::gamma:
          st.gamma = rng.uniform(0.8, 1.25);
          break;
        case StageKind::printer_palette: {
          int p = st.spec.palette_colors;
          if (p < 2) throw ConfigError("palette: need at least 2 colors");
          int lattice = 2;
          while (lattice * lattice * lattice < p) ++lattice;
          st.spread = 1.0 / lattice;
          std::vector<int> cells(static_cast<std::size_t>(lattice * lattice * lattice));
          for (std::size_t c = 0; c < cells.size(); ++c) cells[c] = static_cast<int>(c);
          for (int k = 0; k < p; ++k) {  // partial Fisher-Yates
            int j = k + rng.uniform_int(static_cast<int>(cells.size()) - k);
            std::swap(cells[static_cast<std::size_t>(k)], cells[static_cast<std::size_t>(j)]);
          }
          st.palette.resize(static_cast<std::size_t>(p) * 3);
          for (int k = 0; k < p; ++k) {
            int cell = cells[static_cast<std::size_t>(k)];
            int r = cell / (lattice * lattice);
            int g = (cell / lattice) % lattice;
            int b = cell % lattice;
            int idx[3] = {r, g, b};
            for (int c = 0; c < 3; ++c) {
              double v = (idx[c] + 0.5) / lattice + rng.uniform(-0.35, 0.35) / lattice;
              st.palette[static_cast<std::size_t>(k) * 3 + c] =
                  static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
          }
          break;
        }
        case StageKind::lens_blur:
          if (st.spec.blur_passes < 1) throw ConfigError("blur: passes must be >= 1");
          break;
        case StageKind::sensor_noise:
          if (st.spec.noise_sigma < 0) throw ConfigError("noise: sigma must be >= 0");
          break;
        case StageKind::quantize8:
          break;
        case StageKind::perspective_recapture:
          if (st.spec.jitter_px < 0) throw ConfigError("recapture: jitter must be >= 0");
          break;
      }
      stages_.push_back(std::move(st));
    }
  }

  // The calibrated default: survives benign classification but wipes out
  // digitally optimized perturbations.
  static DistortionChain standard(std::uint64_t seed) {
    return DistortionChain({StageSpec::color_shift(), StageSpec::gamma(),
                            StageSpec::printer_palette(512, true), StageSpec::lens_blur(2),
                            StageSpec::sensor_noise(0.01), StageSpec::perspective_recapture(1.0),
                            StageSpec::quantize8()},
                           seed);
  }

  // Pixelwise monotone subset, used by the gradient-sign fidelity checks.
  static DistortionChain monotone(std::uint64_t seed, double sigma = 0.01) {
    return DistortionChain({StageSpec::color_shift(), StageSpec::gamma(),
                            StageSpec::sensor_noise(sigma), StageSpec::quantize8()},
                           seed);
  }

  bool empty() const { return stages_.empty(); }
  std::uint64_t seed() const { return seed_; }

  std::vector<StageSpec> stages() const {
    std::vector<StageSpec> out;
    for (const auto& st : stages_) out.push_back(st.spec);
    return out;
  }

  bool pixelwise_monotone() const {
    for (const auto& st : stages_)
      if (!stage_monotone(st.spec.kind)) return false;
    return true;
  }

  Image apply(const Image& image, int image_index) const {
    Image out = image;
    for (std::size_t si = 0; si < stages_.size(); ++si)
      out = apply_stage(stages_[si], out, image_index, static_cast<int>(si));
    return out;
  }

  // Patch threat model: printer stages hit the patch alone, the composite is
  // nearest-neighbor, camera stages hit the whole scene.
  Image apply_patch_pipeline(const Scene& scene, const Image& patch, int image_index) const {
    if (!patch.same_shape(scene.base_patch))
      throw ShapeError("apply_patch_pipeline: patch shape " + shape_str(patch.shape()) +
                       " does not match scene patch " + shape_str(scene.base_patch.shape()));
    Image printed = patch;
    for (std::size_t si = 0; si < stages_.size(); ++si)
      if (stage_is_printer(stages_[si].spec.kind))
        printed = apply_stage(stages_[si], printed, image_index, static_cast<int>(si));
    Homography h = solve_homography(rect_corners(patch.dim(1), patch.dim(0)),
                                    scene.billboard_corners);
    Image composite = composite_nearest(printed, scene.background, h);
    for (std::size_t si = 0; si < stages_.size(); ++si)
      if (!stage_is_printer(stages_[si].spec.kind))
        composite = apply_stage(stages_[si], composite, image_index, static_cast<int>(si));
    return composite;
  }

  // Resolved constants, echoed into run reports.
  std::string describe() const {
    std::ostringstream os;
    os << "seed=" << seed_;
    for (const auto& st : stages_) {
      os << " | " << stage_name(st.spec.kind);
      switch (st.spec.kind) {
        case StageKind::color_shift:
          os << " a=[" << st.shift_a[0] << "," << st.shift_a[1] << "," << st.shift_a[2] << "] b=["
             << st.shift_b[0] << "," << st.shift_b[1] << "," << st.shift_b[2] << "]";
          break;
        case StageKind::gamma:
          os << " g=" << st.gamma;
          break;
        case StageKind::printer_palette:
          os << " colors=" << st.spec.palette_colors << " dither=" << (st.spec.dither ? "on" : "off")
             << " spread=" << st.spread;
          break;
        case StageKind::lens_blur:
          os << " passes=" << st.spec.blur_passes;
          break;
        case StageKind::sensor_noise:
          os << " sigma=" << st.spec.noise_sigma;
          break;
        case StageKind::quantize8:
          break;
        case StageKind::perspective_recapture:
          os << " jitter=" << st.spec.jitter_px;
          break;
      }
    }
    return os.str();
  }

 private:
  struct ResolvedStage {
    StageSpec spec;
    double shift_a[3] = {1, 1, 1};
    double shift_b[3] = {0, 0, 0};
    double gamma = 1.0;
    std::vector<float> palette;  // P x rgb
    double spread = 0.0;
  };

  Image apply_stage(const ResolvedStage& st, const Image& img, int image_index,
                    int stage_index) const {
    int h = img.dim(0), w = img.dim(1);
    switch (st.spec.kind) {
      case StageKind::color_shift: {
        Image out(img.shape());
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
              double v = st.shift_a[c] * img.at(y, x, c) + st.shift_b[c];
              out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        return out;
      }
      case StageKind::gamma: {
        Image out(img.shape());
        for (std::int64_t i = 0; i < img.size(); ++i)
          out[i] = static_cast<float>(std::pow(static_cast<double>(img[i]), st.gamma));
        return out;
      }
      case StageKind::printer_palette: {
        Image out(img.shape());
        int p = static_cast<int>(st.palette.size() / 3);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            double off = 0.0;
            if (st.spec.dither)
              off = ((detail::kBayer4[y % 4][x % 4] + 0.5) / 16.0 - 0.5) * st.spread;
            double q[3];
            for (int c = 0; c < 3; ++c)
              q[c] = std::clamp(static_cast<double>(img.at(y, x, c)) + off, 0.0, 1.0);
            int best = 0;
            double best_d = 1e30;
            for (int k = 0; k < p; ++k) {
              const float* col = &st.palette[static_cast<std::size_t>(k) * 3];
              double d0 = q[0] - col[0], d1 = q[1] - col[1], d2 = q[2] - col[2];
              double d = d0 * d0 + d1 * d1 + d2 * d2;
              if (d < best_d) {
                best_d = d;
                best = k;
              }
            }
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = st.palette[static_cast<std::size_t>(best) * 3 + c];
          }
        return out;
      }
      case StageKind::lens_blur:
        return detail::binomial_blur(img, st.spec.blur_passes);
      case StageKind::sensor_noise: {
        Rng rng(mix_seed(seed_, 2000 + static_cast<std::uint64_t>(stage_index),
                         static_cast<std::uint64_t>(image_index)));
        Image out(img.shape());
        for (std::int64_t i = 0; i < img.size(); ++i) {
          double v = img[i] + st.spec.noise_sigma * rng.gaussian();
          out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
        return out;
      }
      case StageKind::quantize8: {
        Image out(img.shape());
        for (std::int64_t i = 0; i < img.size(); ++i)
          out[i] = static_cast<float>(
              std::floor(static_cast<double>(img[i]) * 255.0 + 0.5) / 255.0);
        return out;
      }
      case StageKind::perspective_recapture: {
        // The camera sees the image under a small perspective (true corners
        // land on `captured_at`); the extractor re-crops using its own,
        // independently jittered corner detections. The residual homography
        // between the two is the imperfect crop: up to ~j px misalignment.
        Rng rng(mix_seed(seed_, 2000 + static_cast<std::uint64_t>(stage_index),
                         static_cast<std::uint64_t>(image_index)));
        double j = st.spec.jitter_px / 2.0;  // each draw, so total misalignment <= jitter_px
        std::array<Vec2, 4> src = rect_corners(w, h);
        std::array<Vec2, 4> captured_at = src;
        std::array<Vec2, 4> detected_at = src;
        for (Vec2& pnt : captured_at) {
          pnt.x += rng.uniform(-j, j);
          pnt.y += rng.uniform(-j, j);
        }
        for (Vec2& pnt : detected_at) {
          pnt.x += rng.uniform(-j, j);
          pnt.y += rng.uniform(-j, j);
        }
        Image captured = detail::warp_full_nearest(img, solve_homography(src, captured_at));
        return detail::warp_full_nearest(captured, solve_homography(detected_at, src));
      }
    }
    return img;
  }

  std::vector<ResolvedStage> stages_;
  std::uint64_t seed_ = 0;
};

}  // namespace steadv
