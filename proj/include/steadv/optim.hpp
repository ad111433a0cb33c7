#pragma once

#include <cmath>
#include <cstdint>

#include "steadv/array.hpp"

namespace steadv {

template <typename T>
struct AdamState {
  Array<T> m, v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void step(Array<T>& param, const Array<T>& grad, double lr) {
    if (m.empty()) {
      m = Array<T>(param.shape());
      v = Array<T>(param.shape());
    }
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::int64_t i = 0; i < param.size(); ++i) {
      double g = static_cast<double>(grad[i]);
      double mi = beta1 * m[i] + (1.0 - beta1) * g;
      double vi = beta2 * v[i] + (1.0 - beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      param[i] -= static_cast<T>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
  }
};

template <typename T>
void sgd_step(Array<T>& param, const Array<T>& grad, double lr) {
  for (std::int64_t i = 0; i < param.size(); ++i)
    param[i] -= static_cast<T>(lr * static_cast<double>(grad[i]));
}

}  // namespace steadv
