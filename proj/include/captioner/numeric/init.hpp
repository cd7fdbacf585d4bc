#pragma once

#include <cmath>
#include <cstddef>

#include "captioner/errors.hpp"
#include "captioner/numeric/matrix.hpp"
#include "captioner/numeric/rng.hpp"

namespace captioner {

inline double glorot_limit(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

/// fan_in×fan_out matrix with entries uniform on [-L, L], L = sqrt(6/(fan_in+fan_out)).
template <typename Real = double>
Matrix<Real> glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  if (fan_in == 0 || fan_out == 0) {
    throw InvalidArgument("glorot_uniform: fan dimensions must be >= 1");
  }
  const double limit = glorot_limit(fan_in, fan_out);
  Matrix<Real> w(fan_in, fan_out);
  for (auto& v : w.data()) v = static_cast<Real>(rng.uniform(-limit, limit));
  return w;
}

}  // namespace captioner
