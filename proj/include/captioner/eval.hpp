#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "captioner/dataset.hpp"
#include "captioner/errors.hpp"
#include "captioner/features.hpp"
#include "captioner/model.hpp"
#include "captioner/numeric/tape.hpp"

namespace captioner {

template <typename Real = double>
struct Decoded {
  std::vector<TokenId> ids;              // excludes START/END/PAD
  std::vector<Matrix<Real>> attention;   // one 1×P row per decoder step taken
};

/// Greedy argmax decoding from START with a zero hidden state. At most
/// `max_steps` tokens are generated; decoding stops early when END wins.
/// Ties go to the lowest token id.
template <typename Real>
Decoded<Real> greedy_decode(const Matrix<Real>& features, const ModelParams<Real>& params, std::size_t max_steps) {
  Decoded<Real> out;
  Tape<Real> t;
  const auto b = bind(t, params);
  const Var projected = graph::project(t, b, t.constant(features));
  const Var keys = graph::attention_keys(t, b, projected);
  Var hidden = graph::zero_hidden(t, b);
  TokenId prev = Vocabulary::kStart;
  for (std::size_t s = 0; s < max_steps; ++s) {
    const auto step = graph::decoder_step(t, b, prev, hidden, projected, keys);
    hidden = step.hidden;
    out.attention.push_back(t.value(step.weights));
    const auto logits = t.value(step.logits).data();
    TokenId best = 0;
    for (TokenId i = 1; i < logits.size(); ++i) {
      if (logits[i] > logits[best]) best = i;
    }
    if (best == Vocabulary::kEnd) break;
    if (!Vocabulary::is_special(best)) out.ids.push_back(best);
    prev = best;
  }
  return out;
}

template <typename Real>
std::vector<std::string> greedy_caption(const FeatureGrid& grid, const ModelParams<Real>& params,
                                        const Vocabulary& vocab, std::size_t max_steps) {
  std::vector<std::string> tokens;
  for (TokenId id : greedy_decode(grid.values.cast<Real>(), params, max_steps).ids) tokens.push_back(vocab.token_of(id));
  return tokens;
}

/// Unigram BLEU as a percentage: clipped precision times the brevity penalty.
inline double bleu1(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference) {
  if (reference.empty()) throw InvalidArgument("bleu1: empty reference");
  if (hypothesis.empty()) return 0.0;
  std::map<std::string_view, std::size_t> ref_counts;
  for (const auto& w : reference) ++ref_counts[w];
  std::map<std::string_view, std::size_t> hyp_counts;
  for (const auto& w : hypothesis) ++hyp_counts[w];
  std::size_t clipped = 0;
  for (const auto& [w, n] : hyp_counts) {
    auto it = ref_counts.find(w);
    if (it != ref_counts.end()) clipped += std::min(n, it->second);
  }
  const double hyp_len = static_cast<double>(hypothesis.size());
  const double ref_len = static_cast<double>(reference.size());
  const double precision = static_cast<double>(clipped) / hyp_len;
  const double brevity = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * brevity * precision;
}

struct ScoredExample {
  std::string image_id;
  std::vector<std::string> hypothesis;
  std::vector<std::string> reference;
  double bleu1 = 0;
};

struct BleuReport {
  std::vector<ScoredExample> per_example;
  double corpus_average = 0;
};

/// Arithmetic mean of per-example scores (0 for an empty report).
inline double average_score(const std::vector<ScoredExample>& examples) {
  if (examples.empty()) return 0.0;
  double total = 0;
  for (const auto& e : examples) total += e.bleu1;
  return total / static_cast<double>(examples.size());
}

using GridLookup = std::function<const FeatureGrid*(const std::string& image_id)>;

/// Decodes every record's image and scores it against its caption.
template <typename Real>
BleuReport corpus_bleu(const std::vector<CaptionRecord>& records, const GridLookup& grid_for,
                       const ModelParams<Real>& params, const Vocabulary& vocab, std::size_t max_steps) {
  BleuReport report;
  for (const auto& rec : records) {
    const FeatureGrid* grid = grid_for(rec.image_id);
    if (grid == nullptr) throw MissingData("no feature grid for image " + rec.image_id);
    ScoredExample ex;
    ex.image_id = rec.image_id;
    ex.hypothesis = greedy_caption(*grid, params, vocab, max_steps);
    ex.reference = tokenize(rec.caption);
    ex.bleu1 = bleu1(ex.hypothesis, ex.reference);
    report.per_example.push_back(std::move(ex));
  }
  report.corpus_average = average_score(report.per_example);
  return report;
}

/// `v` with `decimals` fraction digits, rounding half away from zero on the
/// shortest decimal representation (so 73.385 prints as 73.39).
inline std::string format_half_up(double v, int decimals) {
  char buf[512];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  if (res.ec != std::errc()) throw InvalidArgument("format_half_up: value out of range");
  std::string s(buf, res.ptr);
  bool negative = false;
  if (!s.empty() && s[0] == '-') {
    negative = true;
    s.erase(0, 1);
  }
  const auto dot = s.find('.');
  std::string int_part = dot == std::string::npos ? s : s.substr(0, dot);
  std::string frac = dot == std::string::npos ? "" : s.substr(dot + 1);
  const bool round_up = frac.size() > static_cast<std::size_t>(decimals) && frac[decimals] >= '5';
  frac.resize(static_cast<std::size_t>(decimals), '0');
  std::string digits = int_part + frac;
  if (round_up) {
    std::size_t i = digits.size();
    while (i > 0) {
      --i;
      if (digits[i] == '9') {
        digits[i] = '0';
      } else {
        ++digits[i];
        break;
      }
      if (i == 0) digits.insert(digits.begin(), '1');
    }
  }
  const std::size_t int_len = digits.size() - static_cast<std::size_t>(decimals);
  std::string out = digits.substr(0, int_len);
  if (decimals > 0) out += "." + digits.substr(int_len);
  const bool zero = out.find_first_not_of("0.") == std::string::npos;
  return (negative && !zero ? "-" : "") + out;
}

struct ModelComparison {
  std::string architecture;
  BleuReport train;
  BleuReport val;
};

/// `architecture,bleu_train,bleu_val` CSV, rows in input order.
inline void comparison_report(const std::vector<ModelComparison>& rows, std::ostream& sink) {
  if (rows.empty()) throw InvalidArgument("comparison_report: no models");
  sink << "architecture,bleu_train,bleu_val\n";
  for (const auto& r : rows) {
    sink << r.architecture << ',' << format_half_up(r.train.corpus_average, 2) << ','
         << format_half_up(r.val.corpus_average, 2) << '\n';
  }
  if (!sink) throw IoError("failed writing comparison report");
}

struct ComparisonRow {
  std::string architecture;
  double bleu_train = 0;
  double bleu_val = 0;
};

inline std::vector<ComparisonRow> parse_comparison_report(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "architecture,bleu_train,bleu_val") {
    throw ParseError(ParseError::npos, "comparison report: unexpected header");
  }
  std::vector<ComparisonRow> rows;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c2 = line.rfind(',');
    const auto c1 = c2 == std::string::npos || c2 == 0 ? std::string::npos : line.rfind(',', c2 - 1);
    if (c1 == std::string::npos) throw ParseError(index, "comparison report: malformed row");
    try {
      rows.push_back({line.substr(0, c1), std::stod(line.substr(c1 + 1, c2 - c1 - 1)), std::stod(line.substr(c2 + 1))});
    } catch (const std::logic_error&) {
      throw ParseError(index, "comparison report: bad number in \"" + line + "\"");
    }
    ++index;
  }
  return rows;
}

/// One JSON object per line: image_id, hypothesis, reference, bleu1.
inline void write_per_example_jsonl(const BleuReport& report, std::ostream& sink) {
  for (const auto& e : report.per_example) {
    nlohmann::ordered_json j;
    j["image_id"] = e.image_id;
    j["hypothesis"] = join_tokens(e.hypothesis);
    j["reference"] = join_tokens(e.reference);
    j["bleu1"] = e.bleu1;
    sink << j.dump() << '\n';
  }
  if (!sink) throw IoError("failed writing per-example scores");
}

}  // namespace captioner
