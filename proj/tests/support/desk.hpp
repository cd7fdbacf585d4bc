#pragma once

#include "captioner/dataset.hpp"
#include "captioner/model.hpp"
#include "captioner/numeric/rng.hpp"

namespace captioner::testing {

// Small dimensions for gradient checks: P=4, C=8, proj=6, attn=5, embed=7, gru=8, V=10, L=4.
inline constexpr std::size_t kDeskPositions = 4;

inline ModelConfig desk_config() {
  ModelConfig c;
  c.feature_dim = 8;
  c.proj_dim = 6;
  c.attn_dim = 5;
  c.embed_dim = 7;
  c.gru_units = 8;
  c.vocab_size = 10;
  c.max_len = 4;
  return c;
}

inline Matrix<double> random_features(std::size_t p, std::size_t c, Rng& rng) {
  Matrix<double> f(p, c);
  for (auto& v : f.data()) v = rng.uniform(0.0, 1.0);
  return f;
}

// Glorot weights plus random (non-zero) biases so every tensor is exercised.
inline ModelParams<double> random_params(const ModelConfig& c, Rng& rng) {
  auto p = ModelParams<double>::init(c, rng);
  for (auto* b : {&p.proj_b, &p.attn_b, &p.gru_bz, &p.gru_br, &p.gru_bh, &p.out_b}) {
    for (auto& v : b->data()) v = rng.uniform(-0.5, 0.5);
  }
  return p;
}

}  // namespace captioner::testing
