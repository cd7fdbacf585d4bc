#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "captioner/errors.hpp"
#include "captioner/numeric/matrix.hpp"

namespace captioner {

template <typename Real>
Real sigmoid(Real x) {
  // Split by sign so exp never overflows.
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <typename Real>
std::vector<Real> softmax(std::span<const Real> scores) {
  if (scores.empty()) throw InvalidArgument("softmax: empty input");
  const Real peak = *std::max_element(scores.begin(), scores.end());
  std::vector<Real> out(scores.size());
  Real total = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - peak);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

template <typename Real>
std::vector<Real> softmax(const std::vector<Real>& scores) {
  return softmax(std::span<const Real>(scores));
}

// log(sum(exp(x))) with max subtraction.
template <typename Real>
Real log_sum_exp(std::span<const Real> xs) {
  const Real peak = *std::max_element(xs.begin(), xs.end());
  Real total = 0;
  for (Real x : xs) total += std::exp(x - peak);
  return peak + std::log(total);
}

/// Mean over masked-in rows of -log softmax(logits[t])[targets[t]]; 0 when
/// nothing is masked in. Masked-out rows are never read.
template <typename Real>
Real masked_cross_entropy(const Matrix<Real>& logits, std::span<const std::size_t> targets,
                          const std::vector<bool>& mask) {
  if (targets.size() != logits.rows() || mask.size() != logits.rows()) {
    throw ShapeError("masked_cross_entropy: " + std::to_string(logits.rows()) + " rows, " +
                     std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) +
                     " mask entries");
  }
  Real total = 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    if (!mask[t]) continue;
    if (targets[t] >= logits.cols()) {
      throw InvalidArgument("masked_cross_entropy: target id " + std::to_string(targets[t]) +
                            " >= vocabulary size " + std::to_string(logits.cols()));
    }
    const auto row = logits.row(t);
    total += log_sum_exp(row) - row[targets[t]];
    ++count;
  }
  return count == 0 ? Real(0) : total / static_cast<Real>(count);
}

}  // namespace captioner
