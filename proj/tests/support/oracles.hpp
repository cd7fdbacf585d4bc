#pragma once

// Test-only oracles. Nothing here calls into the tape, so gradients checked
// against these are verified by an independent route.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "captioner/dataset.hpp"
#include "captioner/model.hpp"
#include "captioner/numeric/matrix.hpp"

namespace captioner::testing {

/// Central differences of f with respect to every entry of `x`.
inline Matrix<double> central_difference(const std::function<double()>& f, Matrix<double>& x, double h = 1e-5) {
  Matrix<double> g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f();
    x[i] = saved - h;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// |a - n| / max(|a|, |n|), with the denominator floored at 1e-6. Central
// differences at h = 1e-5 carry ~1e-11 of round-off for O(1) losses, so
// below the floor entries are held to an absolute error of 1e-10 instead.
inline constexpr double kRelativeErrorFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelativeErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

inline double max_relative_error(const Matrix<double>& analytic, const Matrix<double>& numeric) {
  double worst = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i]));
  return worst;
}

namespace ref {

using Vec = std::vector<double>;

inline Vec row_times(const Vec& x, const Matrix<double>& w) {
  Vec out(w.cols(), 0.0);
  for (std::size_t k = 0; k < w.rows(); ++k)
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += x[k] * w(k, j);
  return out;
}

inline Vec plus(Vec a, const Matrix<double>& bias) {
  for (std::size_t j = 0; j < a.size(); ++j) a[j] += bias[j];
  return a;
}

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Straight-line loop implementation of the decoder's teacher-forced loss.
inline double teacher_forced_loss(const Matrix<double>& features, const EncodedCaption& enc,
                                  const ModelParams<double>& p, std::size_t steps) {
  const std::size_t positions = features.rows();
  std::vector<Vec> projected(positions);
  for (std::size_t i = 0; i < positions; ++i) {
    Vec f(features.row(i).begin(), features.row(i).end());
    projected[i] = plus(row_times(f, p.proj_w), p.proj_b);
    for (auto& v : projected[i]) v = std::max(0.0, v);
  }
  const std::size_t units = p.gru_uz.rows();
  Vec h(units, 0.0);
  double total = 0;
  std::size_t scored = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    // attention
    const Vec query = plus(row_times(h, p.attn_hid_w), p.attn_b);
    Vec scores(positions);
    for (std::size_t i = 0; i < positions; ++i) {
      Vec key = row_times(projected[i], p.attn_feat_w);
      double score = 0;
      for (std::size_t a = 0; a < key.size(); ++a) score += std::tanh(key[a] + query[a]) * p.attn_v[a];
      scores[i] = score;
    }
    const double peak = *std::max_element(scores.begin(), scores.end());
    double z = 0;
    for (auto& v : scores) z += (v = std::exp(v - peak));
    Vec context(projected[0].size(), 0.0);
    for (std::size_t i = 0; i < positions; ++i)
      for (std::size_t j = 0; j < context.size(); ++j) context[j] += scores[i] / z * projected[i][j];

    // input = [embedding | context]
    Vec x(p.embedding.row(enc.ids[s]).begin(), p.embedding.row(enc.ids[s]).end());
    x.insert(x.end(), context.begin(), context.end());

    // GRU
    const Vec xz = row_times(x, p.gru_wz), hz = row_times(h, p.gru_uz);
    const Vec xr = row_times(x, p.gru_wr), hr = row_times(h, p.gru_ur);
    Vec zg(units), rg(units), rh(units);
    for (std::size_t j = 0; j < units; ++j) {
      zg[j] = sig(xz[j] + hz[j] + p.gru_bz[j]);
      rg[j] = sig(xr[j] + hr[j] + p.gru_br[j]);
      rh[j] = rg[j] * h[j];
    }
    const Vec xh = row_times(x, p.gru_wh), hh = row_times(rh, p.gru_uh);
    Vec next(units);
    for (std::size_t j = 0; j < units; ++j) {
      const double cand = std::tanh(xh[j] + hh[j] + p.gru_bh[j]);
      next[j] = (1 - zg[j]) * h[j] + zg[j] * cand;
    }
    h = next;

    const Vec logits = plus(row_times(h, p.out_w), p.out_b);
    if (enc.mask[s + 1]) {
      const double lp = *std::max_element(logits.begin(), logits.end());
      double lz = 0;
      for (double l : logits) lz += std::exp(l - lp);
      total += lp + std::log(lz) - logits[enc.ids[s + 1]];
      ++scored;
    }
  }
  return scored == 0 ? 0.0 : total / static_cast<double>(scored);
}

}  // namespace ref
}  // namespace captioner::testing
