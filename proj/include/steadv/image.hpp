#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>

#include "steadv/array.hpp"
#include "steadv/errors.hpp"

namespace steadv {

// Images are H x W x 3 arrays with values in [0,1].
using Image = Array<float>;

inline int quantize8(double v) {
  v = std::min(1.0, std::max(0.0, v));
  return std::min(255, static_cast<int>(std::floor(v * 255.0 + 0.5)));  // round half up
}

inline void write_ppm(const std::string& path, const Image& img) {
  if (img.rank() != 3 || img.dim(2) != 3)
    throw ShapeError("ppm: expected HxWx3 image, got " + shape_str(img.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("ppm: cannot open for write: " + path);
  os << "P6\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
  for (std::int64_t i = 0; i < img.size(); ++i) {
    unsigned char b = static_cast<unsigned char>(quantize8(img[i]));
    os.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!os) throw IoError("ppm: write failed: " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("ppm: cannot open: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw IoError("ppm: unsupported format " + magic + " in " + path);
  int w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  if (maxval != 255) throw IoError("ppm: only 8-bit images supported: " + path);
  is.get();  // single whitespace after header
  Image img(Shape{h, w, 3});
  for (std::int64_t i = 0; i < img.size(); ++i) {
    int c = is.get();
    if (c < 0) throw IoError("ppm: truncated pixel data: " + path);
    img[i] = static_cast<float>(c) / 255.0f;
  }
  return img;
}

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  double r = std::fabs(h * 6.0 - 3.0) - 1.0;
  double g = 2.0 - std::fabs(h * 6.0 - 2.0);
  double b = 2.0 - std::fabs(h * 6.0 - 4.0);
  double p[3] = {std::clamp(r, 0.0, 1.0), std::clamp(g, 0.0, 1.0), std::clamp(b, 0.0, 1.0)};
  for (int i = 0; i < 3; ++i) rgb[i] = ((p[i] - 1.0) * s + 1.0) * v;
}

template <typename T>
Array<T> clamp01(const Array<T>& a) {
  Array<T> out = a;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::min(T(1), std::max(T(0), out[i]));
  return out;
}

}  // namespace steadv
