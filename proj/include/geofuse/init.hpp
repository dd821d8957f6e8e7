#pragma once

#include <cmath>

#include "geofuse/rng.hpp"
#include "geofuse/tensor.hpp"

namespace geofuse {

/// Normal weights with std gain * sqrt(2 / fan_in).
template <typename T>
Tensor<T> he_normal(const Shape& shape, int fan_in, Rng& rng, double gain = 1.0) {
  Tensor<T> t(shape);
  const double sd = gain * std::sqrt(2.0 / fan_in);
  for (auto& v : t.storage()) v = static_cast<T>(sd * rng.normal());
  return t;
}

}  // namespace geofuse
