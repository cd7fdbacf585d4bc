#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "captioner/dataset.hpp"
#include "captioner/errors.hpp"
#include "captioner/features.hpp"
#include "captioner/model.hpp"
#include "captioner/numeric/rng.hpp"
#include "captioner/numeric/tape.hpp"

namespace captioner {

// ------------------------------------------------------------------- Adam

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates per tensor plus the step counter.
template <typename Real = double>
struct AdamState {
  std::vector<Matrix<Real>> first;
  std::vector<Matrix<Real>> second;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam step over parallel lists of tensors.
template <typename Real>
void adam_update(std::span<Matrix<Real>* const> params, std::span<const Matrix<Real>* const> grads,
                 AdamState<Real>& state, double lr, const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) throw ShapeError("adam_update: parameter/gradient count mismatch");
  if (state.first.empty()) {
    for (const auto* p : params) {
      state.first.emplace_back(p->rows(), p->cols());
      state.second.emplace_back(p->rows(), p->cols());
    }
  }
  if (state.first.size() != params.size()) throw ShapeError("adam_update: optimizer state does not match params");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], *grads[i], "adam_update");
    require_same_shape(*params[i], state.first[i], "adam_update state");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    const auto g = grads[i]->data();
    auto m = state.first[i].data();
    auto v = state.second[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = cfg.beta1 * static_cast<double>(m[k]) + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * static_cast<double>(v[k]) + (1.0 - cfg.beta2) * gk * gk;
      m[k] = static_cast<Real>(mk);
      v[k] = static_cast<Real>(vk);
      const double m_hat = mk / correction1;
      const double v_hat = vk / correction2;
      p[k] -= static_cast<Real>(lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
    }
  }
}

template <typename Real>
void adam_update(ModelParams<Real>& params, const ModelParams<Real>& grads, AdamState<Real>& state, double lr,
                 const AdamConfig& cfg = {}) {
  std::vector<Matrix<Real>*> ps;
  std::vector<const Matrix<Real>*> gs;
  for (auto& [name, m] : params.tensors()) ps.push_back(m);
  for (const auto& [name, m] : grads.tensors()) gs.push_back(m);
  adam_update<Real>(ps, gs, state, lr, cfg);
}

// --------------------------------------------------------------- training

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_dir;  // empty: keep checkpoints in memory only
  std::optional<Backbone> backbone;
  double clip_norm = 0.0;  // <= 0 disables clipping
  bool record_wall_time = true;

  void check() const {
    if (epochs == 0) throw InvalidArgument("epochs must be >= 1");
    if (batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
  }
};

/// A training pair ready for the model: features already cast to Real.
template <typename Real = double>
struct Example {
  std::string image_id;
  std::optional<Backbone> backbone;
  Matrix<Real> features;
  EncodedCaption caption;
};

template <typename Real = double>
Example<Real> make_example(const FeatureGrid& grid, EncodedCaption caption) {
  return {grid.image_id, grid.backbone, grid.values.cast<Real>(), std::move(caption)};
}

template <typename Real>
Real global_norm(const ModelParams<Real>& g) {
  Real total = 0;
  for (const auto& [name, m] : g.tensors()) {
    for (Real v : m->data()) total += v * v;
  }
  return std::sqrt(total);
}

/// Mean teacher-forced loss of `batch` and its gradient, accumulated into
/// `grads` (which is overwritten). Examples are reduced in order.
template <typename Real>
Real batch_loss_and_gradient(std::span<const Example<Real>> batch, const ModelParams<Real>& params,
                             ModelParams<Real>& grads) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  grads = params.zeros_like();
  Real total = 0;
  for (const auto& ex : batch) {
    Tape<Real> t;
    const auto b = bind(t, params, &grads);
    const auto tf = graph::teacher_forced(t, b, t.constant(ex.features), ex.caption, graph::scored_steps(ex.caption));
    t.backward(tf.loss);
    total += t.value(tf.loss)[0];
  }
  const Real scale = Real(1) / static_cast<Real>(batch.size());
  for (auto& [name, m] : grads.tensors()) {
    for (auto& v : m->data()) v *= scale;
  }
  return total * scale;
}

/// One optimizer step on `batch`; returns the loss before the update.
template <typename Real>
Real train_step(std::span<const Example<Real>> batch, ModelParams<Real>& params, AdamState<Real>& opt,
                const TrainConfig& config) {
  if (batch.empty()) throw InvalidArgument("train_step: empty batch");
  if (config.backbone) {
    for (const auto& ex : batch) {
      if (ex.backbone && *ex.backbone != *config.backbone) {
        throw ConfigMismatch("example " + ex.image_id + " uses backbone " + std::string(spec_of(*ex.backbone).name) +
                             ", training expects " + std::string(spec_of(*config.backbone).name));
      }
    }
  }
  ModelParams<Real> grads;
  const Real loss = batch_loss_and_gradient(batch, params, grads);
  if (!std::isfinite(static_cast<double>(loss))) throw InvalidState("training diverged: non-finite loss");
  if (config.clip_norm > 0.0) {
    const Real norm = global_norm(grads);
    if (norm > static_cast<Real>(config.clip_norm)) {
      const Real scale = static_cast<Real>(config.clip_norm) / norm;
      for (auto& [name, m] : grads.tensors()) {
        for (auto& v : m->data()) v *= scale;
      }
    }
  }
  adam_update(params, grads, opt, config.learning_rate, config.adam);
  return loss;
}

/// Mean per-example loss; reads params only.
template <typename Real>
Real evaluate_loss(std::span<const Example<Real>> examples, const ModelParams<Real>& params) {
  if (examples.empty()) throw InvalidArgument("evaluate_loss: no examples");
  Real total = 0;
  for (const auto& ex : examples) total += example_loss(ex.features, ex.caption, params);
  return total / static_cast<Real>(examples.size());
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double wall_time = 0;  // seconds
};

/// Epoch with the lowest validation loss (earliest on ties); 1-based.
inline std::size_t select_best(const std::vector<EpochRecord>& history) {
  if (history.empty()) throw InvalidArgument("select_best: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i].val_loss < history[best].val_loss) best = i;
  }
  return history[best].epoch;
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t epoch) {
  return dir / ("epoch_" + std::to_string(epoch) + ".bin");
}

template <typename Real>
void write_checkpoint_file(const std::filesystem::path& path, const ModelConfig& config,
                           const ModelParams<Real>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  save_params(config, params, out);
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

template <typename Real = double>
Checkpoint<Real> read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return load_checkpoint<Real>(in);
}

template <typename Real = double>
struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  std::filesystem::path best_checkpoint;  // empty when no checkpoint_dir
  ModelParams<Real> best_params;
};

/// Full-epoch training. Each epoch shuffles the training set with a seed
/// derived from (seed, epoch), steps through it in batches, measures the
/// validation loss, and writes `epoch_<n>.bin`. Afterwards the `best` marker
/// names the epoch with the lowest validation loss.
///
/// `params` and `opt` are updated in place, so an IO failure leaves the
/// trained state with the caller.
template <typename Real>
FitResult<Real> fit(std::span<const Example<Real>> train, std::span<const Example<Real>> val,
                    const ModelConfig& model_config, ModelParams<Real>& params, AdamState<Real>& opt,
                    const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.check();
  if (train.empty() || val.empty()) throw InvalidArgument("fit: training and validation sets must be non-empty");
  if (!config.checkpoint_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(config.checkpoint_dir, ec);
    if (ec) throw IoError("cannot create " + config.checkpoint_dir.string() + ": " + ec.message());
  }

  FitResult<Real> result;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train.size());
  std::vector<Example<Real>> batch;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffler(mix_seed(config.seed, epoch));
    shuffler.shuffle(std::span<std::size_t>(order));

    double train_total = 0;
    std::size_t steps = 0;
    for (std::size_t at = 0; at < order.size(); at += config.batch_size) {
      batch.clear();
      for (std::size_t k = at; k < std::min(order.size(), at + config.batch_size); ++k) batch.push_back(train[order[k]]);
      train_total += static_cast<double>(train_step(std::span<const Example<Real>>(batch), params, opt, config));
      ++steps;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_total / static_cast<double>(steps);
    rec.val_loss = static_cast<double>(evaluate_loss(val, params));
    if (config.record_wall_time) {
      rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    }
    result.history.push_back(rec);
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      result.best_params = params;
    }
    if (!config.checkpoint_dir.empty()) {
      write_checkpoint_file(checkpoint_path(config.checkpoint_dir, epoch), model_config, params);
    }
    if (on_epoch) on_epoch(rec);
  }

  result.best_epoch = select_best(result.history);
  if (!config.checkpoint_dir.empty()) {
    result.best_checkpoint = checkpoint_path(config.checkpoint_dir, result.best_epoch);
    const auto marker = config.checkpoint_dir / "best";
    std::ofstream out(marker, std::ios::trunc);
    out << result.best_epoch << '\n';
    if (!out) throw IoError("cannot write " + marker.string());
  }
  return result;
}

// ---------------------------------------------------------------- history

inline void export_history(const std::vector<EpochRecord>& history, std::ostream& sink) {
  sink << "epoch,train_loss,val_loss,wall_time\n";
  std::ostringstream row;
  row << std::fixed << std::setprecision(6);
  for (const auto& r : history) {
    row.str("");
    row << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.wall_time << '\n';
    sink << row.str();
  }
  if (!sink) throw IoError("failed writing loss history");
}

inline std::vector<EpochRecord> parse_history(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,val_loss,wall_time") {
    throw ParseError(ParseError::npos, "history CSV: unexpected header");
  }
  std::vector<EpochRecord> out;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    EpochRecord r;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(fields >> r.epoch >> c1 >> r.train_loss >> c2 >> r.val_loss >> c3 >> r.wall_time) || c1 != ',' ||
        c2 != ',' || c3 != ',') {
      throw ParseError(row, "history CSV: malformed row \"" + line + "\"");
    }
    out.push_back(r);
    ++row;
  }
  return out;
}

}  // namespace captioner
