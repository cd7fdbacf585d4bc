// captioner: ingest annotations, synthesize features, train, evaluate,
// caption single images and build comparison reports.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 IO error.

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "captioner/errors.hpp"
#include "captioner/features.hpp"
#include "captioner/pipeline.hpp"
#include "captioner/version.hpp"

namespace {

namespace fs = std::filesystem;
namespace pl = captioner::pipeline;

constexpr int kUsage = 1;
constexpr int kDataError = 2;
constexpr int kIoError = 3;

std::vector<std::string> backbone_names() {
  std::vector<std::string> names;
  for (const auto& s : captioner::kBackbones) names.emplace_back(s.name);
  return names;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention GRU image-captioning engine"};
  app.set_version_flag("--version", captioner::kEngineVersion);
  app.require_subcommand(1);

  // ingest
  pl::IngestOptions ingest;
  auto* cmd_ingest = app.add_subcommand("ingest", "Parse annotations, build the vocabulary and split the data");
  cmd_ingest->add_option("annotations", ingest.annotations, "Annotation JSON file")->required()->check(CLI::ExistingFile);
  cmd_ingest->add_option("--out", ingest.out_dir, "Output dataset directory")->required();
  cmd_ingest->add_option("--seed", ingest.seed, "Split shuffle seed")->capture_default_str();
  cmd_ingest->add_option("--train-ratio", ingest.train_ratio, "Training fraction")->capture_default_str();
  cmd_ingest->add_option("--top-k", ingest.top_k, "Rows in each frequency report")->capture_default_str();

  // synth-features
  pl::SynthOptions synth;
  fs::path synth_manifest;
  auto* cmd_synth = app.add_subcommand("synth-features", "Write deterministic synthetic feature grids");
  cmd_synth->add_option("--manifest", synth_manifest, "Dataset directory or file with one image id per line")
      ->required()
      ->check(CLI::ExistingPath);
  std::string synth_backbone;
  cmd_synth->add_option("--backbone", synth_backbone, "Backbone")->required()->check(CLI::IsMember(backbone_names()));
  cmd_synth->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  cmd_synth->add_option("--out", synth.out_dir, "Features root (files go to <out>/<backbone>/)")->required();

  // train
  pl::TrainOptions train;
  fs::path train_manifest;
  bool no_wall_time = false;
  auto* cmd_train = app.add_subcommand("train", "Train the decoder and write checkpoints");
  cmd_train->add_option("--manifest", train_manifest, "Rerun from a run manifest (other flags ignored except --out)")
      ->check(CLI::ExistingFile);
  cmd_train->add_option("--data", train.data_dir, "Dataset directory from ingest");
  cmd_train->add_option("--features", train.features_dir, "Features root");
  cmd_train->add_option("--out", train.out_dir, "Run output directory")->required();
  std::string train_backbone = "efficientnet-b0";
  cmd_train->add_option("--backbone", train_backbone, "Backbone")
      ->check(CLI::IsMember(backbone_names()))
      ->capture_default_str();
  cmd_train->add_option("--epochs", train.epochs, "Epochs")->capture_default_str();
  cmd_train->add_option("--batch-size", train.batch_size, "Batch size")->capture_default_str();
  cmd_train->add_option("--lr", train.learning_rate, "Adam learning rate")->capture_default_str();
  cmd_train->add_option("--seed", train.seed, "Seed for init and shuffling")->capture_default_str();
  cmd_train->add_option("--max-len", train.max_len, "Sequence length incl. START/END (0 = from dataset)")
      ->capture_default_str();
  cmd_train->add_option("--proj-dim", train.proj_dim, "Feature projection width")->capture_default_str();
  cmd_train->add_option("--attn-dim", train.attn_dim, "Attention width")->capture_default_str();
  cmd_train->add_option("--embed-dim", train.embed_dim, "Word embedding width")->capture_default_str();
  cmd_train->add_option("--gru-units", train.gru_units, "GRU hidden units")->capture_default_str();
  cmd_train->add_option("--clip-norm", train.clip_norm, "Clip gradients to this global norm (0 = off)")
      ->capture_default_str();
  cmd_train->add_flag("--no-wall-time", no_wall_time, "Write 0 for wall_time so history files are reproducible");

  // eval
  pl::EvalOptions eval;
  auto* cmd_eval = app.add_subcommand("eval", "Greedy-decode a split and score BLEU-1");
  cmd_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  cmd_eval->add_option("--data", eval.data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  cmd_eval->add_option("--features", eval.features_dir, "Features root")->required();
  cmd_eval->add_option("--split", eval.split, "train or val")->check(CLI::IsMember({"train", "val"}))->capture_default_str();
  cmd_eval->add_option("--out", eval.out_dir, "Output directory")->required();

  // caption
  pl::CaptionOptions cap;
  auto* cmd_caption = app.add_subcommand("caption", "Caption one feature file");
  cmd_caption->add_option("--checkpoint", cap.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  cmd_caption->add_option("--features", cap.feature_file, "FGRD feature file")->required()->check(CLI::ExistingFile);
  cmd_caption->add_option("--vocab", cap.vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  cmd_caption->add_option("--attention-out", cap.attention_out, "Write per-step attention weights as JSON");

  // report
  std::vector<std::string> report_rows;
  fs::path report_out;
  auto* cmd_report = app.add_subcommand("report", "Compare models: architecture,bleu_train,bleu_val");
  cmd_report->add_option("--model", report_rows, "NAME:TRAIN_SUMMARY.json:VAL_SUMMARY.json (repeatable)")
      ->required();
  cmd_report->add_option("--out", report_out, "CSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*cmd_ingest) {
      const auto s = pl::ingest(ingest);
      std::cout << "records " << s.records << " train " << s.train << " val " << s.val << " vocab " << s.vocab_size
                << " max_len " << s.max_len << '\n';
    } else if (*cmd_synth) {
      synth.backbone = captioner::backbone_by_name(synth_backbone).id;
      synth.image_ids = pl::manifest_ids(synth_manifest);
      const auto files = pl::synth_features(synth);
      std::cout << "wrote " << files.size() << " feature files\n";
    } else if (*cmd_train) {
      if (!train_manifest.empty()) {
        const auto out_dir = train.out_dir;
        train = pl::options_from_manifest(pl::read_json(train_manifest));
        train.out_dir = out_dir;
      } else {
        if (train.data_dir.empty() || train.features_dir.empty()) {
          std::cerr << "train: --data and --features are required without --manifest\n";
          return kUsage;
        }
        train.backbone = captioner::backbone_by_name(train_backbone).id;
        train.record_wall_time = !no_wall_time;
      }
      pl::train(train);
    } else if (*cmd_eval) {
      const auto r = pl::evaluate(eval);
      std::cout << eval.split << " corpus BLEU-1 " << captioner::format_half_up(r.corpus_average, 2) << " over "
                << r.per_example.size() << " examples\n";
    } else if (*cmd_caption) {
      const auto r = pl::caption(cap);
      std::cout << captioner::join_tokens(r.tokens) << '\n';
    } else if (*cmd_report) {
      std::vector<pl::ReportRow> rows;
      for (const auto& spec : report_rows) {
        const auto a = spec.find(':');
        const auto b = a == std::string::npos ? a : spec.find(':', a + 1);
        if (b == std::string::npos) {
          std::cerr << "report: --model expects NAME:TRAIN_SUMMARY:VAL_SUMMARY, got " << spec << '\n';
          return kUsage;
        }
        rows.push_back({spec.substr(0, a), spec.substr(a + 1, b - a - 1), spec.substr(b + 1)});
      }
      const auto csv = pl::report(rows);
      if (report_out.empty()) {
        std::cout << csv;
      } else {
        pl::write_text(report_out, csv);
      }
    }
  } catch (const captioner::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIoError;
  } catch (const captioner::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }
  return 0;
}
