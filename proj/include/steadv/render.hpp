#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "steadv/autograd.hpp"

namespace steadv {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

// 3x3 projective transform, stored row-major and normalized so m[8] == 1.
class Homography {
 public:
  Homography() : m_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}

  static Homography from_rows(const std::array<double, 9>& m) {
    Homography h;
    if (std::fabs(m[8]) < 1e-12) throw RenderError("homography: cannot normalize, m33 ~ 0");
    for (int i = 0; i < 9; ++i) h.m_[i] = m[i] / m[8];
    return h;
  }

  double at(int r, int c) const { return m_[static_cast<std::size_t>(r) * 3 + c]; }

  Vec2 apply(Vec2 p) const {
    double w = m_[6] * p.x + m_[7] * p.y + m_[8];
    return Vec2{(m_[0] * p.x + m_[1] * p.y + m_[2]) / w, (m_[3] * p.x + m_[4] * p.y + m_[5]) / w};
  }

  double det() const {
    return m_[0] * (m_[4] * m_[8] - m_[5] * m_[7]) - m_[1] * (m_[3] * m_[8] - m_[5] * m_[6]) +
           m_[2] * (m_[3] * m_[7] - m_[4] * m_[6]);
  }

  Homography inverse() const {
    double d = det();
    if (std::fabs(d) < 1e-12) throw RenderError("homography: singular, |det| < 1e-12");
    std::array<double, 9> inv;
    inv[0] = (m_[4] * m_[8] - m_[5] * m_[7]) / d;
    inv[1] = (m_[2] * m_[7] - m_[1] * m_[8]) / d;
    inv[2] = (m_[1] * m_[5] - m_[2] * m_[4]) / d;
    inv[3] = (m_[5] * m_[6] - m_[3] * m_[8]) / d;
    inv[4] = (m_[0] * m_[8] - m_[2] * m_[6]) / d;
    inv[5] = (m_[2] * m_[3] - m_[0] * m_[5]) / d;
    inv[6] = (m_[3] * m_[7] - m_[4] * m_[6]) / d;
    inv[7] = (m_[1] * m_[6] - m_[0] * m_[7]) / d;
    inv[8] = (m_[0] * m_[4] - m_[1] * m_[3]) / d;
    return from_rows(inv);
  }

 private:
  std::array<double, 9> m_;
};

inline std::array<Vec2, 4> rect_corners(double w, double h) {
  return {Vec2{0, 0}, Vec2{w, 0}, Vec2{w, h}, Vec2{0, h}};
}

namespace detail {

// Gaussian elimination with partial pivoting on the 8x9 augmented system.
inline void solve8(double a[8][9], double out[8]) {
  for (int col = 0; col < 8; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 8; ++r)
      if (std::fabs(a[r][col]) > std::fabs(a[pivot][col])) pivot = r;
    if (std::fabs(a[pivot][col]) < 1e-12)
      throw RenderError("solve_homography: singular system (collinear points)");
    if (pivot != col)
      for (int c = col; c < 9; ++c) std::swap(a[pivot][c], a[col][c]);
    for (int r = col + 1; r < 8; ++r) {
      double f = a[r][col] / a[col][col];
      for (int c = col; c < 9; ++c) a[r][c] -= f * a[col][c];
    }
  }
  for (int r = 7; r >= 0; --r) {
    double acc = a[r][8];
    for (int c = r + 1; c < 8; ++c) acc -= a[r][c] * out[c];
    out[r] = acc / a[r][r];
  }
}

}  // namespace detail

// Solves the 8-unknown direct linear system mapping src corners onto dst
// corners, with h33 fixed to 1.
inline Homography solve_homography(const std::array<Vec2, 4>& src, const std::array<Vec2, 4>& dst) {
  double a[8][9] = {};
  for (int i = 0; i < 4; ++i) {
    double x = src[static_cast<std::size_t>(i)].x, y = src[static_cast<std::size_t>(i)].y;
    double u = dst[static_cast<std::size_t>(i)].x, v = dst[static_cast<std::size_t>(i)].y;
    double* r0 = a[2 * i];
    double* r1 = a[2 * i + 1];
    r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
    r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
  }
  double h[8];
  detail::solve8(a, h);
  return Homography::from_rows({h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0});
}

// Pixel centers sit at integer coordinates + 0.5; a point p is inside an
// image of size HxW when 0 <= p.x < W and 0 <= p.y < H.
namespace warp {

inline int nn_index(double coord, int limit) {
  int i = static_cast<int>(std::floor(coord));
  return i < 0 ? 0 : (i >= limit ? limit - 1 : i);
}

struct BilinearTap {
  int x0, y0, x1, y1;
  double fx, fy;
};

inline BilinearTap bilinear_tap(double sx, double sy, int w, int h) {
  double u = sx - 0.5, v = sy - 0.5;
  double xf = std::floor(u), yf = std::floor(v);
  BilinearTap t;
  t.fx = u - xf;
  t.fy = v - yf;
  auto clampi = [](int i, int lim) { return i < 0 ? 0 : (i >= lim ? lim - 1 : i); };
  t.x0 = clampi(static_cast<int>(xf), w);
  t.x1 = clampi(static_cast<int>(xf) + 1, w);
  t.y0 = clampi(static_cast<int>(yf), h);
  t.y1 = clampi(static_cast<int>(yf) + 1, h);
  return t;
}

}  // namespace warp

// Nearest-neighbor composite of patch into bg under H (patch -> bg coords).
// This is the non-differentiable side; the differentiable warp below uses
// bilinear sampling, and the mismatch between the two is intentional.
template <typename T>
Array<T> composite_nearest(const Array<T>& patch, const Array<T>& bg, const Homography& h) {
  int ph = patch.dim(0), pw = patch.dim(1);
  int bh = bg.dim(0), bw = bg.dim(1);
  Array<T> out = bg;
  Homography inv = h.inverse();
  for (int y = 0; y < bh; ++y) {
    for (int x = 0; x < bw; ++x) {
      Vec2 s = inv.apply(Vec2{x + 0.5, y + 0.5});
      if (s.x < 0.0 || s.x >= pw || s.y < 0.0 || s.y >= ph) continue;
      int sx = warp::nn_index(s.x, pw);
      int sy = warp::nn_index(s.y, ph);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = patch.at(sy, sx, c);
    }
  }
  return out;
}

// Forward value of the differentiable warp; shared by the tape op and the
// tape-free evaluation path.
template <typename T>
Array<T> warp_bilinear(const Array<T>& patch, const Array<T>& bg, const Homography& h) {
  int ph = patch.dim(0), pw = patch.dim(1);
  int bh = bg.dim(0), bw = bg.dim(1);
  Array<T> out = bg;
  Homography inv = h.inverse();
  for (int y = 0; y < bh; ++y) {
    for (int x = 0; x < bw; ++x) {
      Vec2 s = inv.apply(Vec2{x + 0.5, y + 0.5});
      if (s.x < 0.0 || s.x >= pw || s.y < 0.0 || s.y >= ph) continue;
      warp::BilinearTap t = warp::bilinear_tap(s.x, s.y, pw, ph);
      for (int c = 0; c < 3; ++c) {
        double v00 = patch.at(t.y0, t.x0, c), v01 = patch.at(t.y0, t.x1, c);
        double v10 = patch.at(t.y1, t.x0, c), v11 = patch.at(t.y1, t.x1, c);
        double top = v00 * (1.0 - t.fx) + v01 * t.fx;
        double bot = v10 * (1.0 - t.fx) + v11 * t.fx;
        out.at(y, x, c) = static_cast<T>(top * (1.0 - t.fy) + bot * t.fy);
      }
    }
  }
  return out;
}

// Routes an upstream gradient on the composite back onto patch pixels using
// the same taps as warp_bilinear. Used by the warp_into backward rule and
// directly by gradient-factorization checks.
template <typename T>
Array<T> warp_grad_to_patch(const Array<T>& gout, const Shape& patch_shape, const Homography& h) {
  int ph = patch_shape[0], pw = patch_shape[1];
  int bh = gout.dim(0), bw = gout.dim(1);
  Array<T> gpatch(patch_shape);
  Homography inv = h.inverse();
  for (int y = 0; y < bh; ++y) {
    for (int x = 0; x < bw; ++x) {
      Vec2 s = inv.apply(Vec2{x + 0.5, y + 0.5});
      if (s.x < 0.0 || s.x >= pw || s.y < 0.0 || s.y >= ph) continue;
      warp::BilinearTap t = warp::bilinear_tap(s.x, s.y, pw, ph);
      for (int c = 0; c < 3; ++c) {
        T g = gout.at(y, x, c);
        gpatch.at(t.y0, t.x0, c) += g * static_cast<T>((1.0 - t.fx) * (1.0 - t.fy));
        gpatch.at(t.y0, t.x1, c) += g * static_cast<T>(t.fx * (1.0 - t.fy));
        gpatch.at(t.y1, t.x0, c) += g * static_cast<T>((1.0 - t.fx) * t.fy);
        gpatch.at(t.y1, t.x1, c) += g * static_cast<T>(t.fx * t.fy);
      }
    }
  }
  return gpatch;
}

// Differentiable perspective warp of the patch into the scene. Gradients
// reach patch pixels only; the scene background is the environment and is
// treated as a constant. Pixels outside the projected quad copy scene_bg.
template <typename T>
Tensor<T> warp_into(const Tensor<T>& patch, const Tensor<T>& scene_bg, const Homography& h) {
  detail::check_same_tape("warp_into", patch, scene_bg);
  const Array<T>& pv = patch.value();
  const Array<T>& bv = scene_bg.value();
  if (pv.rank() != 3 || pv.dim(2) != 3 || bv.rank() != 3 || bv.dim(2) != 3)
    throw ShapeError("warp_into: expected HxWx3 patch and scene, got " + shape_str(pv.shape()) +
                     " and " + shape_str(bv.shape()));
  for (const Vec2& corner : rect_corners(pv.dim(1), pv.dim(0))) {
    Vec2 m = h.apply(corner);
    if (m.x < 0.0 || m.x > bv.dim(1) || m.y < 0.0 || m.y > bv.dim(0))
      throw RenderError("warp_into: homography maps a patch corner outside the scene");
  }
  int pi = patch.id();
  Shape pshape = pv.shape();
  return patch.tape()->record(warp_bilinear(pv, bv, h), {pi, scene_bg.id()},
                              [pi, pshape, h](Tape<T>& tp, int self) {
                                if (!tp.requires_grad(pi)) return;
                                Array<T> gp = warp_grad_to_patch(tp.grad_buffer(self), pshape, h);
                                detail::accumulate(tp.grad_buffer(pi), gp);
                              });
}

}  // namespace steadv
