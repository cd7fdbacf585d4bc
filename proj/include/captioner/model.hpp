#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "captioner/binary_io.hpp"
#include "captioner/dataset.hpp"
#include "captioner/errors.hpp"
#include "captioner/features.hpp"
#include "captioner/numeric/init.hpp"
#include "captioner/numeric/matrix.hpp"
#include "captioner/numeric/rng.hpp"
#include "captioner/numeric/tape.hpp"

namespace captioner {

/// Layer widths. `feature_dim` is the backbone channel count C and
/// `backbone` names the backbone the model was trained on (empty when the
/// features did not come from a named backbone).
struct ModelConfig {
  std::size_t feature_dim = 1280;
  std::size_t proj_dim = 256;
  std::size_t attn_dim = 512;
  std::size_t embed_dim = 256;
  std::size_t gru_units = 512;
  std::size_t vocab_size = 4;
  std::size_t max_len = 2;
  std::string backbone;

  std::size_t gru_input_dim() const noexcept { return embed_dim + proj_dim; }

  void check() const {
    if (feature_dim == 0 || proj_dim == 0 || attn_dim == 0 || embed_dim == 0 || gru_units == 0) {
      throw InvalidArgument("model dimensions must be >= 1");
    }
    if (vocab_size < Vocabulary::kNumSpecial) throw InvalidArgument("vocab_size must be >= 4");
    if (max_len < 2) throw InvalidArgument("max_len must be >= 2");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Every trainable tensor. Vectors are stored as 1×n rows; weight matrices
/// are (input × output) so a layer is `x · W + b`.
template <typename Real = double>
struct ModelParams {
  Matrix<Real> proj_w, proj_b;
  Matrix<Real> attn_feat_w, attn_hid_w, attn_b, attn_v;
  Matrix<Real> embedding;
  Matrix<Real> gru_wz, gru_wr, gru_wh;
  Matrix<Real> gru_uz, gru_ur, gru_uh;
  Matrix<Real> gru_bz, gru_br, gru_bh;
  Matrix<Real> out_w, out_b;

  /// Glorot-uniform weights, zero biases, drawn in declaration order.
  static ModelParams init(const ModelConfig& c, Rng& rng) {
    c.check();
    ModelParams p;
    const auto g = [&](std::size_t in, std::size_t out) { return glorot_uniform<Real>(in, out, rng); };
    p.proj_w = g(c.feature_dim, c.proj_dim);
    p.proj_b = Matrix<Real>(1, c.proj_dim);
    p.attn_feat_w = g(c.proj_dim, c.attn_dim);
    p.attn_hid_w = g(c.gru_units, c.attn_dim);
    p.attn_b = Matrix<Real>(1, c.attn_dim);
    p.attn_v = g(c.attn_dim, 1);
    p.embedding = g(c.vocab_size, c.embed_dim);
    p.gru_wz = g(c.gru_input_dim(), c.gru_units);
    p.gru_wr = g(c.gru_input_dim(), c.gru_units);
    p.gru_wh = g(c.gru_input_dim(), c.gru_units);
    p.gru_uz = g(c.gru_units, c.gru_units);
    p.gru_ur = g(c.gru_units, c.gru_units);
    p.gru_uh = g(c.gru_units, c.gru_units);
    p.gru_bz = Matrix<Real>(1, c.gru_units);
    p.gru_br = Matrix<Real>(1, c.gru_units);
    p.gru_bh = Matrix<Real>(1, c.gru_units);
    p.out_w = g(c.gru_units, c.vocab_size);
    p.out_b = Matrix<Real>(1, c.vocab_size);
    return p;
  }

  ModelParams zeros_like() const {
    ModelParams z = *this;
    for (auto& [name, m] : z.tensors()) m->fill(Real(0));
    return z;
  }

  std::vector<std::pair<std::string, Matrix<Real>*>> tensors() {
    return {{"proj_w", &proj_w},         {"proj_b", &proj_b},   {"attn_feat_w", &attn_feat_w},
            {"attn_hid_w", &attn_hid_w}, {"attn_b", &attn_b},   {"attn_v", &attn_v},
            {"embedding", &embedding},   {"gru_wz", &gru_wz},   {"gru_wr", &gru_wr},
            {"gru_wh", &gru_wh},         {"gru_uz", &gru_uz},   {"gru_ur", &gru_ur},
            {"gru_uh", &gru_uh},         {"gru_bz", &gru_bz},   {"gru_br", &gru_br},
            {"gru_bh", &gru_bh},         {"out_w", &out_w},     {"out_b", &out_b}};
  }

  std::vector<std::pair<std::string, const Matrix<Real>*>> tensors() const {
    std::vector<std::pair<std::string, const Matrix<Real>*>> out;
    for (auto& [name, m] : const_cast<ModelParams*>(this)->tensors()) out.emplace_back(name, m);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors()) n += m->size();
    return n;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Shapes every tensor must have under `c`.
inline std::vector<std::pair<std::size_t, std::size_t>> expected_shapes(const ModelConfig& c) {
  const auto in = c.gru_input_dim();
  return {{c.feature_dim, c.proj_dim}, {1, c.proj_dim},       {c.proj_dim, c.attn_dim},   {c.gru_units, c.attn_dim},
          {1, c.attn_dim},             {c.attn_dim, 1},        {c.vocab_size, c.embed_dim}, {in, c.gru_units},
          {in, c.gru_units},           {in, c.gru_units},      {c.gru_units, c.gru_units}, {c.gru_units, c.gru_units},
          {c.gru_units, c.gru_units},  {1, c.gru_units},       {1, c.gru_units},           {1, c.gru_units},
          {c.gru_units, c.vocab_size}, {1, c.vocab_size}};
}

// ------------------------------------------------------------------ graph

/// Parameters recorded on a tape.
struct BoundParams {
  Var proj_w, proj_b;
  Var attn_feat_w, attn_hid_w, attn_b, attn_v;
  Var embedding;
  Var gru_wz, gru_wr, gru_wh, gru_uz, gru_ur, gru_uh, gru_bz, gru_br, gru_bh;
  Var out_w, out_b;
  std::size_t vocab_size = 0;
};

/// Records every parameter on `tape`; gradients go to `grads` when given.
template <typename Real>
BoundParams bind(Tape<Real>& tape, const ModelParams<Real>& p, ModelParams<Real>* grads = nullptr) {
  const auto param = [&](const Matrix<Real>& value, Matrix<Real> ModelParams<Real>::*member) {
    return tape.parameter(value, grads != nullptr ? &(grads->*member) : nullptr);
  };
  using P = ModelParams<Real>;
  BoundParams b;
  b.proj_w = param(p.proj_w, &P::proj_w);
  b.proj_b = param(p.proj_b, &P::proj_b);
  b.attn_feat_w = param(p.attn_feat_w, &P::attn_feat_w);
  b.attn_hid_w = param(p.attn_hid_w, &P::attn_hid_w);
  b.attn_b = param(p.attn_b, &P::attn_b);
  b.attn_v = param(p.attn_v, &P::attn_v);
  b.embedding = param(p.embedding, &P::embedding);
  b.gru_wz = param(p.gru_wz, &P::gru_wz);
  b.gru_wr = param(p.gru_wr, &P::gru_wr);
  b.gru_wh = param(p.gru_wh, &P::gru_wh);
  b.gru_uz = param(p.gru_uz, &P::gru_uz);
  b.gru_ur = param(p.gru_ur, &P::gru_ur);
  b.gru_uh = param(p.gru_uh, &P::gru_uh);
  b.gru_bz = param(p.gru_bz, &P::gru_bz);
  b.gru_br = param(p.gru_br, &P::gru_br);
  b.gru_bh = param(p.gru_bh, &P::gru_bh);
  b.out_w = param(p.out_w, &P::out_w);
  b.out_b = param(p.out_b, &P::out_b);
  b.vocab_size = p.embedding.rows();
  return b;
}

namespace graph {

// relu(features · W_proj + b), P×proj.
template <typename Real>
Var project(Tape<Real>& t, const BoundParams& b, Var features) {
  const auto& f = t.value(features);
  const auto& w = t.value(b.proj_w);
  if (f.cols() != w.rows()) {
    throw ShapeError("feature channels " + std::to_string(f.cols()) + " != projection input " +
                     std::to_string(w.rows()));
  }
  return t.relu(t.add_row(t.matmul(features, b.proj_w), b.proj_b));
}

// projected · W_feat; independent of the decoder step so it is computed once per image.
template <typename Real>
Var attention_keys(Tape<Real>& t, const BoundParams& b, Var projected) {
  return t.matmul(projected, b.attn_feat_w);
}

struct Attention {
  Var context;  // 1×proj
  Var weights;  // 1×P
};

// score_i = v · tanh(keys_i + hidden · W_hid + b); weights = softmax(scores);
// context = Σ_i weights_i · projected_i.
template <typename Real>
Attention attend(Tape<Real>& t, const BoundParams& b, Var projected, Var keys, Var hidden) {
  const auto& h = t.value(hidden);
  if (h.rows() != 1 || h.cols() != t.value(b.attn_hid_w).rows()) {
    throw ShapeError("hidden state " + h.shape_string() + " does not match attention input " +
                     std::to_string(t.value(b.attn_hid_w).rows()));
  }
  const Var query = t.add(t.matmul(hidden, b.attn_hid_w), b.attn_b);
  const Var scores = t.matmul(t.tanh(t.add_row(keys, query)), b.attn_v);  // P×1
  const Var weights = t.softmax_rows(t.transpose(scores));
  return {t.matmul(weights, projected), weights};
}

template <typename Real>
Var gru(Tape<Real>& t, const BoundParams& b, Var x, Var h) {
  const auto& xv = t.value(x);
  const auto& hv = t.value(h);
  if (xv.rows() != 1 || xv.cols() != t.value(b.gru_wz).rows() || hv.rows() != 1 ||
      hv.cols() != t.value(b.gru_uz).rows()) {
    throw ShapeError("gru: input " + xv.shape_string() + ", hidden " + hv.shape_string());
  }
  const auto gate = [&](Var w, Var u, Var bias, Var state) {
    return t.add(t.add(t.matmul(x, w), t.matmul(state, u)), bias);
  };
  const Var z = t.sigmoid(gate(b.gru_wz, b.gru_uz, b.gru_bz, h));
  const Var r = t.sigmoid(gate(b.gru_wr, b.gru_ur, b.gru_br, h));
  const Var candidate = t.tanh(gate(b.gru_wh, b.gru_uh, b.gru_bh, t.mul(r, h)));
  return t.add(t.mul(t.affine(z, Real(-1), Real(1)), h), t.mul(z, candidate));
}

struct Step {
  Var logits;   // 1×V
  Var hidden;   // 1×units
  Var weights;  // 1×P
};

template <typename Real>
Step decoder_step(Tape<Real>& t, const BoundParams& b, TokenId prev_token, Var hidden, Var projected, Var keys) {
  if (prev_token >= b.vocab_size) {
    throw InvalidArgument("token id " + std::to_string(prev_token) + " >= vocab size " + std::to_string(b.vocab_size));
  }
  const auto att = attend(t, b, projected, keys, hidden);
  const Var x = t.concat_cols(t.embedding(b.embedding, prev_token), att.context);
  const Var next = gru(t, b, x, hidden);
  const Var logits = t.add(t.matmul(next, b.out_w), b.out_b);
  return {logits, next, att.weights};
}

template <typename Real>
Var zero_hidden(Tape<Real>& t, const BoundParams& b) {
  return t.constant(Matrix<Real>(1, t.value(b.gru_uz).rows()));
}

struct TeacherForced {
  Var logits;                // steps×V
  Var loss;                  // 1×1
  std::vector<Var> weights;  // one 1×P per step
};

/// Feeds ids[t] and scores ids[t+1] for t < steps; the loss mask is the
/// caption mask shifted by one so START is never a target.
template <typename Real>
TeacherForced teacher_forced(Tape<Real>& t, const BoundParams& b, Var features, const EncodedCaption& enc,
                             std::size_t steps) {
  if (enc.ids.size() < 2 || steps == 0 || steps > enc.ids.size() - 1) {
    throw InvalidArgument("teacher_forced: need 1 <= steps <= max_len - 1");
  }
  const Var projected = project(t, b, features);
  const Var keys = attention_keys(t, b, projected);
  Var hidden = zero_hidden(t, b);
  std::vector<Var> rows;
  TeacherForced out;
  std::vector<std::size_t> targets;
  std::vector<bool> mask;
  for (std::size_t s = 0; s < steps; ++s) {
    const auto step = decoder_step(t, b, enc.ids[s], hidden, projected, keys);
    hidden = step.hidden;
    rows.push_back(step.logits);
    out.weights.push_back(step.weights);
    targets.push_back(enc.ids[s + 1]);
    mask.push_back(enc.mask[s + 1]);
  }
  out.logits = t.concat_rows(rows);
  out.loss = t.cross_entropy(out.logits, std::move(targets), std::move(mask));
  return out;
}

/// Steps up to and including the one that predicts END.
inline std::size_t scored_steps(const EncodedCaption& enc) {
  const std::size_t len = enc.length();
  return len < 2 ? 1 : len - 1;
}

}  // namespace graph

// ------------------------------------------------------ value-level API

template <typename Real>
Matrix<Real> project_features(const Matrix<Real>& features, const ModelParams<Real>& p) {
  Tape<Real> t;
  const auto b = bind(t, p);
  return t.value(graph::project(t, b, t.constant(features)));
}

template <typename Real>
Matrix<Real> project_features(const FeatureGrid& grid, const ModelParams<Real>& p) {
  return project_features(grid.values.cast<Real>(), p);
}

template <typename Real>
struct AttentionOutput {
  Matrix<Real> context;  // 1×proj
  Matrix<Real> weights;  // 1×P
};

template <typename Real>
AttentionOutput<Real> attention_step(const Matrix<Real>& projected, const Matrix<Real>& hidden,
                                     const ModelParams<Real>& p) {
  if (projected.cols() != p.attn_feat_w.rows()) {
    throw ShapeError("projected features " + projected.shape_string() + " do not match attention input " +
                     std::to_string(p.attn_feat_w.rows()));
  }
  Tape<Real> t;
  const auto b = bind(t, p);
  const Var proj = t.constant(projected);
  const auto att = graph::attend(t, b, proj, graph::attention_keys(t, b, proj), t.constant(hidden));
  return {t.value(att.context), t.value(att.weights)};
}

template <typename Real>
Matrix<Real> gru_cell(const Matrix<Real>& x, const Matrix<Real>& h, const ModelParams<Real>& p) {
  Tape<Real> t;
  const auto b = bind(t, p);
  return t.value(graph::gru(t, b, t.constant(x), t.constant(h)));
}

template <typename Real>
struct StepOutput {
  Matrix<Real> logits;        // 1×V
  Matrix<Real> hidden;        // 1×units
  Matrix<Real> attn_weights;  // 1×P
};

template <typename Real>
StepOutput<Real> decoder_step(TokenId prev_token, const Matrix<Real>& hidden, const Matrix<Real>& projected,
                              const ModelParams<Real>& p) {
  if (projected.cols() != p.attn_feat_w.rows()) {
    throw ShapeError("projected features " + projected.shape_string() + " do not match attention input");
  }
  Tape<Real> t;
  const auto b = bind(t, p);
  const Var proj = t.constant(projected);
  const auto s = graph::decoder_step(t, b, prev_token, t.constant(hidden), proj, graph::attention_keys(t, b, proj));
  return {t.value(s.logits), t.value(s.hidden), t.value(s.weights)};
}

template <typename Real>
struct TeacherForcedOutput {
  Matrix<Real> logits;     // (max_len-1)×V
  Matrix<Real> attention;  // (max_len-1)×P
  Real loss = 0;
};

template <typename Real>
TeacherForcedOutput<Real> forward_teacher_forced(const Matrix<Real>& features, const EncodedCaption& enc,
                                                 const ModelParams<Real>& p) {
  Tape<Real> t;
  const auto b = bind(t, p);
  const auto tf = graph::teacher_forced(t, b, t.constant(features), enc, enc.ids.size() - 1);
  TeacherForcedOutput<Real> out{t.value(tf.logits), Matrix<Real>(tf.weights.size(), features.rows()),
                                t.value(tf.loss)[0]};
  for (std::size_t s = 0; s < tf.weights.size(); ++s) {
    const auto w = t.value(tf.weights[s]).data();
    std::copy(w.begin(), w.end(), out.attention.row(s).begin());
  }
  return out;
}

template <typename Real>
TeacherForcedOutput<Real> forward_teacher_forced(const FeatureGrid& grid, const EncodedCaption& enc,
                                                 const ModelParams<Real>& p) {
  return forward_teacher_forced(grid.values.cast<Real>(), enc, p);
}

/// Loss of one example, stopping after the step that predicts END. Equal to
/// forward_teacher_forced(...).loss because later steps are masked out.
template <typename Real>
Real example_loss(const Matrix<Real>& features, const EncodedCaption& enc, const ModelParams<Real>& p) {
  Tape<Real> t;
  const auto b = bind(t, p);
  return t.value(graph::teacher_forced(t, b, t.constant(features), enc, graph::scored_steps(enc)).loss)[0];
}

// ------------------------------------------------------------ checkpoint

namespace ckpt {
inline constexpr std::array<char, 4> kMagic{'C', 'K', 'P', 'T'};
inline constexpr std::uint16_t kVersion = 1;
}  // namespace ckpt

/// Versioned container: magic, version, config, then per tensor its name,
/// shape and 64-bit values, all little-endian. Returns bytes written.
template <typename Real>
std::size_t save_params(const ModelConfig& config, const ModelParams<Real>& params, std::ostream& out) {
  binary::Writer w(out);
  w.bytes(ckpt::kMagic.data(), ckpt::kMagic.size());
  w.u16(ckpt::kVersion);
  w.str16(config.backbone);
  for (std::size_t v : {config.feature_dim, config.proj_dim, config.attn_dim, config.embed_dim, config.gru_units,
                        config.vocab_size, config.max_len}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  const auto tensors = params.tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    w.str16(name);
    w.u32(static_cast<std::uint32_t>(m->rows()));
    w.u32(static_cast<std::uint32_t>(m->cols()));
    for (Real v : m->data()) w.f64(static_cast<double>(v));
  }
  return w.count();
}

template <typename Real = double>
struct Checkpoint {
  ModelConfig config;
  ModelParams<Real> params;
};

template <typename Real = double>
Checkpoint<Real> load_checkpoint(std::istream& in) {
  binary::Reader r(in);
  std::array<char, 4> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != ckpt::kMagic) throw BadMagic("not a checkpoint (bad magic)");
  const auto version = r.u16();
  if (version != ckpt::kVersion) {
    throw UnsupportedVersion("checkpoint version " + std::to_string(version) + " not supported");
  }
  Checkpoint<Real> c;
  c.config.backbone = r.str16();
  c.config.feature_dim = r.u32();
  c.config.proj_dim = r.u32();
  c.config.attn_dim = r.u32();
  c.config.embed_dim = r.u32();
  c.config.gru_units = r.u32();
  c.config.vocab_size = r.u32();
  c.config.max_len = r.u32();
  c.config.check();

  const auto shapes = expected_shapes(c.config);
  auto tensors = c.params.tensors();
  const auto count = r.u32();
  if (count != tensors.size()) {
    throw ShapeMismatch("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                        std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto name = r.str16();
    const auto rows = r.u32();
    const auto cols = r.u32();
    if (name != tensors[i].first) {
      throw ShapeMismatch("checkpoint tensor " + std::to_string(i) + " is \"" + name + "\", expected \"" +
                          tensors[i].first + "\"");
    }
    if (rows != shapes[i].first || cols != shapes[i].second) {
      throw ShapeMismatch("tensor " + name + " is " + std::to_string(rows) + "x" + std::to_string(cols) +
                          ", config implies " + std::to_string(shapes[i].first) + "x" +
                          std::to_string(shapes[i].second));
    }
    Matrix<Real> m(rows, cols);
    for (auto& v : m.data()) v = static_cast<Real>(r.f64());
    *tensors[i].second = std::move(m);
  }
  return c;
}

/// Loads params and requires the stored config to equal `expected`.
template <typename Real = double>
ModelParams<Real> load_params(std::istream& in, const ModelConfig& expected) {
  auto c = load_checkpoint<Real>(in);
  if (!(c.config == expected)) {
    throw ConfigMismatch("checkpoint config (vocab " + std::to_string(c.config.vocab_size) + ", backbone \"" +
                         c.config.backbone + "\") does not match the requested model (vocab " +
                         std::to_string(expected.vocab_size) + ", backbone \"" + expected.backbone + "\")");
  }
  return std::move(c.params);
}

}  // namespace captioner
