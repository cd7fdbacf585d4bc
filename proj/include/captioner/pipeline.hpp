#pragma once

// File-level commands behind the `captioner` tool. Each command reads and
// writes plain files so the stages can run separately.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "captioner/dataset.hpp"
#include "captioner/errors.hpp"
#include "captioner/eval.hpp"
#include "captioner/features.hpp"
#include "captioner/model.hpp"
#include "captioner/numeric/rng.hpp"
#include "captioner/trainer.hpp"
#include "captioner/version.hpp"

namespace captioner::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ------------------------------------------------------------ file helpers

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ParseError(ParseError::npos, path.string() + ": " + e.what());
  }
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline std::string lines_text(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

inline FeatureGrid read_grid_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file " + path.string());
  return read_grid(in);
}

inline fs::path grid_path(const fs::path& features_root, Backbone backbone, const std::string& image_id) {
  return features_root / std::string(spec_of(backbone).name) / grid_filename(image_id);
}

// ------------------------------------------------------------------ ingest

struct IngestOptions {
  fs::path annotations;
  fs::path out_dir;
  std::uint64_t seed = 0;
  double train_ratio = 0.8;
  std::size_t top_k = 50;
};

struct IngestSummary {
  std::size_t records = 0;
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t vocab_size = 0;
  std::size_t max_len = 0;
};

/// Writes vocab.txt, annotations.json, train.txt/val.txt (image ids),
/// frequency_top.csv/frequency_least.csv and dataset.json.
inline IngestSummary ingest(const IngestOptions& opt) {
  const auto records = parse_annotations(read_text(opt.annotations));
  if (records.empty()) throw InvalidArgument("annotation file has no records");
  const auto vocab = build_vocab(records);
  Rng rng(opt.seed);
  const auto parts = split(records, opt.train_ratio, rng);
  const auto max_len = required_max_len(records);

  std::ostringstream vocab_text;
  vocab.write(vocab_text);
  write_text(opt.out_dir / "vocab.txt", vocab_text.str());
  write_text(opt.out_dir / "annotations.json", annotations_to_json(records));

  std::vector<std::string> train_ids, val_ids;
  for (const auto& r : parts.train) train_ids.push_back(r.image_id);
  for (const auto& r : parts.val) val_ids.push_back(r.image_id);
  write_text(opt.out_dir / "train.txt", lines_text(train_ids));
  write_text(opt.out_dir / "val.txt", lines_text(val_ids));

  const auto table = frequency_report(records);
  const auto csv = [](const FrequencyTable& t) {
    std::string out = "token,count\n";
    for (const auto& [tok, n] : t) out += tok + "," + std::to_string(n) + "\n";
    return out;
  };
  write_text(opt.out_dir / "frequency_top.csv", csv(frequency_head(table, opt.top_k)));
  write_text(opt.out_dir / "frequency_least.csv", csv(frequency_tail(table, opt.top_k)));

  IngestSummary s{records.size(), parts.train.size(), parts.val.size(), vocab.size(), max_len};
  json meta;
  meta["engine_version"] = kEngineVersion;
  meta["records"] = s.records;
  meta["train"] = s.train;
  meta["val"] = s.val;
  meta["vocab_size"] = s.vocab_size;
  meta["max_len"] = s.max_len;
  meta["seed"] = opt.seed;
  meta["train_ratio"] = opt.train_ratio;
  write_text(opt.out_dir / "dataset.json", meta.dump(2) + "\n");
  return s;
}

/// An ingested dataset directory.
struct Dataset {
  std::vector<CaptionRecord> records;
  std::map<std::string, std::string> caption_of;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  Vocabulary vocab;
  std::size_t max_len = 0;

  std::vector<CaptionRecord> subset(const std::vector<std::string>& ids) const {
    std::vector<CaptionRecord> out;
    for (const auto& id : ids) {
      auto it = caption_of.find(id);
      if (it == caption_of.end()) throw MissingData("split lists unknown image " + id);
      out.push_back({id, it->second});
    }
    return out;
  }
};

inline Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  d.records = parse_annotations(read_text(dir / "annotations.json"));
  for (const auto& r : d.records) d.caption_of[r.image_id] = r.caption;
  d.train_ids = read_lines(dir / "train.txt");
  d.val_ids = read_lines(dir / "val.txt");
  std::istringstream vocab_in(read_text(dir / "vocab.txt"));
  d.vocab = Vocabulary::read(vocab_in);
  d.max_len = read_json(dir / "dataset.json").at("max_len").get<std::size_t>();
  return d;
}

// ---------------------------------------------------------- synth-features

struct SynthOptions {
  std::vector<std::string> image_ids;
  Backbone backbone = Backbone::efficientnet_b0;
  std::uint64_t seed = 0;
  fs::path out_dir;  // features root; files land in <out_dir>/<backbone>/
};

/// Image ids of an ingested dataset directory (train then val) or of a
/// plain one-id-per-line manifest file.
inline std::vector<std::string> manifest_ids(const fs::path& manifest) {
  if (fs::is_directory(manifest)) {
    auto ids = read_lines(manifest / "train.txt");
    const auto val = read_lines(manifest / "val.txt");
    ids.insert(ids.end(), val.begin(), val.end());
    return ids;
  }
  return read_lines(manifest);
}

inline std::vector<fs::path> synth_features(const SynthOptions& opt) {
  std::vector<fs::path> written;
  for (const auto& id : opt.image_ids) {
    Rng rng(synth_seed(opt.seed, id));
    const auto grid = synth_grid(opt.backbone, id, rng);
    const auto path = grid_path(opt.out_dir, opt.backbone, id);
    std::ostringstream bytes;
    write_grid(grid, bytes);
    write_text(path, bytes.str());
    written.push_back(path);
  }
  return written;
}

// ------------------------------------------------------------------- train

struct TrainOptions {
  fs::path data_dir;
  fs::path features_dir;
  fs::path out_dir;
  Backbone backbone = Backbone::efficientnet_b0;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::size_t max_len = 0;  // 0: take it from the dataset
  std::size_t proj_dim = 256;
  std::size_t attn_dim = 512;
  std::size_t embed_dim = 256;
  std::size_t gru_units = 512;
  double clip_norm = 0.0;
  bool record_wall_time = true;
};

/// Everything needed to rerun a training job.
inline json run_manifest(const TrainOptions& o, const ModelConfig& mc) {
  json j;
  j["engine_version"] = kEngineVersion;
  j["data_dir"] = o.data_dir.string();
  j["features_dir"] = o.features_dir.string();
  j["vocab_path"] = (o.data_dir / "vocab.txt").string();
  j["out_dir"] = o.out_dir.string();
  j["seed"] = o.seed;
  j["train"] = {{"backbone", std::string(spec_of(o.backbone).name)},
                {"epochs", o.epochs},
                {"batch_size", o.batch_size},
                {"learning_rate", o.learning_rate},
                {"adam_beta1", AdamConfig{}.beta1},
                {"adam_beta2", AdamConfig{}.beta2},
                {"adam_epsilon", AdamConfig{}.epsilon},
                {"clip_norm", o.clip_norm},
                {"record_wall_time", o.record_wall_time}};
  j["model"] = {{"feature_dim", mc.feature_dim}, {"proj_dim", mc.proj_dim},     {"attn_dim", mc.attn_dim},
                {"embed_dim", mc.embed_dim},     {"gru_units", mc.gru_units},   {"vocab_size", mc.vocab_size},
                {"max_len", mc.max_len},         {"backbone", mc.backbone}};
  return j;
}

inline TrainOptions options_from_manifest(const json& j) {
  try {
    TrainOptions o;
    o.data_dir = j.at("data_dir").get<std::string>();
    o.features_dir = j.at("features_dir").get<std::string>();
    o.out_dir = j.at("out_dir").get<std::string>();
    o.seed = j.at("seed").get<std::uint64_t>();
    const auto& t = j.at("train");
    o.backbone = backbone_by_name(t.at("backbone").get<std::string>()).id;
    o.epochs = t.at("epochs").get<std::size_t>();
    o.batch_size = t.at("batch_size").get<std::size_t>();
    o.learning_rate = t.at("learning_rate").get<double>();
    o.clip_norm = t.at("clip_norm").get<double>();
    o.record_wall_time = t.at("record_wall_time").get<bool>();
    const auto& m = j.at("model");
    o.max_len = m.at("max_len").get<std::size_t>();
    o.proj_dim = m.at("proj_dim").get<std::size_t>();
    o.attn_dim = m.at("attn_dim").get<std::size_t>();
    o.embed_dim = m.at("embed_dim").get<std::size_t>();
    o.gru_units = m.at("gru_units").get<std::size_t>();
    return o;
  } catch (const json::exception& e) {
    throw ParseError(ParseError::npos, std::string("run manifest: ") + e.what());
  }
}

struct TrainOutcome {
  FitResult<double> fit;
  ModelConfig model_config;
};

inline std::vector<Example<double>> load_examples(const std::vector<CaptionRecord>& records, const Vocabulary& vocab,
                                                  const fs::path& features_dir, Backbone backbone,
                                                  std::size_t max_len) {
  // Check every file first so a missing grid fails before any work starts.
  for (const auto& r : records) {
    if (!fs::exists(grid_path(features_dir, backbone, r.image_id))) {
      throw MissingData("no feature grid for image " + r.image_id + " at " +
                        grid_path(features_dir, backbone, r.image_id).string());
    }
  }
  std::vector<Example<double>> out;
  for (const auto& r : records) {
    const auto grid = read_grid_file(grid_path(features_dir, backbone, r.image_id));
    if (grid.backbone != backbone) {
      throw ConfigMismatch("feature file for " + r.image_id + " holds " + std::string(spec_of(grid.backbone).name));
    }
    out.push_back(make_example<double>(grid, encode(vocab, r.caption, max_len)));
  }
  return out;
}

inline TrainOutcome train(const TrainOptions& opt, std::ostream& log = std::cout) {
  const auto data = load_dataset(opt.data_dir);
  const std::size_t max_len = opt.max_len == 0 ? data.max_len : opt.max_len;
  const auto& spec = spec_of(opt.backbone);

  ModelConfig mc;
  mc.feature_dim = spec.channels;
  mc.proj_dim = opt.proj_dim;
  mc.attn_dim = opt.attn_dim;
  mc.embed_dim = opt.embed_dim;
  mc.gru_units = opt.gru_units;
  mc.vocab_size = data.vocab.size();
  mc.max_len = max_len;
  mc.backbone = std::string(spec.name);
  mc.check();

  TrainConfig tc;
  tc.epochs = opt.epochs;
  tc.batch_size = opt.batch_size;
  tc.learning_rate = opt.learning_rate;
  tc.seed = opt.seed;
  tc.checkpoint_dir = opt.out_dir / "ckpt";
  tc.backbone = opt.backbone;
  tc.clip_norm = opt.clip_norm;
  tc.record_wall_time = opt.record_wall_time;
  tc.check();

  const auto train_set = load_examples(data.subset(data.train_ids), data.vocab, opt.features_dir, opt.backbone, max_len);
  const auto val_set = load_examples(data.subset(data.val_ids), data.vocab, opt.features_dir, opt.backbone, max_len);
  if (train_set.empty() || val_set.empty()) throw InvalidArgument("training and validation splits must be non-empty");

  write_text(opt.out_dir / "manifest.json", run_manifest(opt, mc).dump(2) + "\n");

  Rng init_rng(mix_seed(opt.seed, 0x1d1d));
  auto params = ModelParams<double>::init(mc, init_rng);
  AdamState<double> opt_state;
  auto result = fit<double>(train_set, val_set, mc, params, opt_state, tc, [&](const EpochRecord& r) {
    log << "epoch " << r.epoch << " train_loss " << format_half_up(r.train_loss, 6) << " val_loss "
        << format_half_up(r.val_loss, 6) << '\n';
  });

  std::ostringstream csv;
  export_history(result.history, csv);
  write_text(opt.out_dir / "history.csv", csv.str());
  log << "best epoch " << result.best_epoch << " -> " << result.best_checkpoint.string() << '\n';
  return {std::move(result), mc};
}

// -------------------------------------------------------------------- eval

struct EvalOptions {
  fs::path checkpoint;
  fs::path data_dir;
  fs::path features_dir;
  std::string split = "val";
  fs::path out_dir;
};

inline Checkpoint<double> load_checkpoint_for(const fs::path& path, const Vocabulary& vocab) {
  auto ck = read_checkpoint_file<double>(path);
  if (ck.config.vocab_size != vocab.size()) {
    throw ConfigMismatch("checkpoint vocab size " + std::to_string(ck.config.vocab_size) + " != vocabulary size " +
                         std::to_string(vocab.size()));
  }
  return ck;
}

inline std::size_t decode_budget(const ModelConfig& c) { return c.max_len - 1; }

/// Writes <split>_examples.jsonl and <split>_summary.json.
inline BleuReport evaluate(const EvalOptions& opt) {
  if (opt.split != "train" && opt.split != "val") throw InvalidArgument("split must be train or val");
  const auto data = load_dataset(opt.data_dir);
  const auto ck = load_checkpoint_for(opt.checkpoint, data.vocab);
  const auto backbone = backbone_by_name(ck.config.backbone).id;
  const auto records = data.subset(opt.split == "train" ? data.train_ids : data.val_ids);

  std::map<std::string, FeatureGrid> grids;
  for (const auto& r : records) {
    const auto path = grid_path(opt.features_dir, backbone, r.image_id);
    if (!fs::exists(path)) throw MissingData("no feature grid for image " + r.image_id + " at " + path.string());
    grids.emplace(r.image_id, read_grid_file(path));
  }
  const auto report = corpus_bleu(
      records,
      [&](const std::string& id) -> const FeatureGrid* {
        auto it = grids.find(id);
        return it == grids.end() ? nullptr : &it->second;
      },
      ck.params, data.vocab, decode_budget(ck.config));

  std::ostringstream jsonl;
  write_per_example_jsonl(report, jsonl);
  write_text(opt.out_dir / (opt.split + "_examples.jsonl"), jsonl.str());
  json summary;
  summary["split"] = opt.split;
  summary["checkpoint"] = opt.checkpoint.string();
  summary["backbone"] = ck.config.backbone;
  summary["examples"] = report.per_example.size();
  summary["corpus_bleu1"] = report.corpus_average;
  write_text(opt.out_dir / (opt.split + "_summary.json"), summary.dump(2) + "\n");
  return report;
}

// ----------------------------------------------------------------- caption

struct CaptionOptions {
  fs::path checkpoint;
  fs::path feature_file;
  fs::path vocab;
  fs::path attention_out;  // empty: do not write
};

struct CaptionResult {
  std::vector<std::string> tokens;
  std::vector<std::vector<double>> attention;
};

inline CaptionResult caption(const CaptionOptions& opt) {
  std::istringstream vocab_in(read_text(opt.vocab));
  const auto vocab = Vocabulary::read(vocab_in);
  const auto ck = load_checkpoint_for(opt.checkpoint, vocab);
  const auto grid = read_grid_file(opt.feature_file);
  const auto& spec = spec_of(grid.backbone);
  if (ck.config.backbone != spec.name) {
    throw ConfigMismatch("feature file is " + std::string(spec.name) + " but the checkpoint was trained on " +
                         ck.config.backbone);
  }
  const auto decoded = greedy_decode(grid.values, ck.params, decode_budget(ck.config));
  CaptionResult out;
  for (TokenId id : decoded.ids) out.tokens.push_back(vocab.token_of(id));
  for (const auto& row : decoded.attention) out.attention.emplace_back(row.data().begin(), row.data().end());

  if (!opt.attention_out.empty()) {
    json j;
    j["image_id"] = grid.image_id;
    j["caption"] = join_tokens(out.tokens);
    j["tokens"] = out.tokens;
    j["attention"] = out.attention;
    write_text(opt.attention_out, j.dump(2) + "\n");
  }
  return out;
}

// ------------------------------------------------------------------ report

struct ReportRow {
  std::string architecture;
  fs::path train_summary;
  fs::path val_summary;
};

inline std::string report(const std::vector<ReportRow>& rows) {
  std::vector<ModelComparison> models;
  for (const auto& r : rows) {
    ModelComparison m;
    m.architecture = r.architecture;
    m.train.corpus_average = read_json(r.train_summary).at("corpus_bleu1").get<double>();
    m.val.corpus_average = read_json(r.val_summary).at("corpus_bleu1").get<double>();
    models.push_back(std::move(m));
  }
  std::ostringstream out;
  comparison_report(models, out);
  return out.str();
}

}  // namespace captioner::pipeline
