#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "captioner/errors.hpp"
#include "captioner/numeric/rng.hpp"

namespace captioner {

/// One image/caption pair from an annotation file.
struct CaptionRecord {
  std::string image_id;
  std::string caption;

  friend bool operator==(const CaptionRecord&, const CaptionRecord&) = default;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Parses a JSON array of {"caption": string, "image_id": string} objects.
inline std::vector<CaptionRecord> parse_annotations(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(ParseError::npos, std::string("malformed annotation JSON: ") + e.what());
  }
  if (!doc.is_array()) throw ParseError(ParseError::npos, "annotation document must be a JSON array");

  std::vector<CaptionRecord> records;
  records.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& item = doc[i];
    if (!item.is_object()) throw ParseError(i, "expected an object");
    for (const char* field : {"caption", "image_id"}) {
      if (!item.contains(field)) throw ParseError(i, std::string("missing field \"") + field + "\"");
      if (!item[field].is_string()) throw ParseError(i, std::string("field \"") + field + "\" must be a string");
    }
    CaptionRecord rec{item["image_id"].get<std::string>(), item["caption"].get<std::string>()};
    if (detail::trim(rec.image_id).empty()) throw ParseError(i, "empty image_id");
    if (detail::trim(rec.caption).empty()) throw ParseError(i, "empty caption");
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::string annotations_to_json(const std::vector<CaptionRecord>& records) {
  auto doc = nlohmann::json::array();
  for (const auto& r : records) doc.push_back({{"caption", r.caption}, {"image_id", r.image_id}});
  return doc.dump(2) + "\n";
}

/// Lowercases ASCII, splits on whitespace and strips punctuation from both
/// ends of each token. Stopwords and conjunctions are kept.
inline std::vector<std::string> tokenize(std::string_view caption) {
  std::vector<std::string> tokens;
  std::string current;
  const auto flush = [&] {
    std::size_t begin = 0;
    std::size_t end = current.size();
    const auto punct = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };
    while (begin < end && punct(current[begin])) ++begin;
    while (end > begin && punct(current[end - 1])) --end;
    if (end > begin) tokens.push_back(current.substr(begin, end - begin));
    current.clear();
  };
  for (char c : caption) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::isspace(uc)) {
      flush();
    } else {
      current.push_back(uc < 0x80 ? static_cast<char>(std::tolower(uc)) : c);
    }
  }
  flush();
  return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i != 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

using TokenId = std::size_t;

/// Token <-> id map. Ids 0..3 are reserved for the special tokens.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kStart = 1;
  static constexpr TokenId kEnd = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kNumSpecial = 4;

  Vocabulary() : tokens_{"<pad>", "<start>", "<end>", "<unk>"} {
    for (TokenId i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  /// Adds `token` if unseen; returns its id either way.
  TokenId add(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    const TokenId id = tokens_.size();
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  std::size_t size() const noexcept { return tokens_.size(); }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  TokenId id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token_of(TokenId id) const {
    if (id >= tokens_.size()) throw InvalidArgument("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  static bool is_special(TokenId id) noexcept { return id < kNumSpecial; }

  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  /// One token per line; line number is the id.
  void write(std::ostream& out) const {
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary read(std::istream& in) {
    Vocabulary v;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line_no < kNumSpecial) {
        if (line != v.tokens_[line_no]) {
          throw ParseError(line_no, "vocabulary line " + std::to_string(line_no) + " must be " + v.tokens_[line_no]);
        }
      } else {
        if (line.empty() || v.contains(line)) {
          throw ParseError(line_no, "vocabulary line " + std::to_string(line_no) + " is empty or duplicated");
        }
        v.add(line);
      }
      ++line_no;
    }
    if (line_no < kNumSpecial) throw ParseError(ParseError::npos, "vocabulary file is missing special tokens");
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Special tokens first, then every distinct token in order of first occurrence.
inline Vocabulary build_vocab(const std::vector<CaptionRecord>& records) {
  if (records.empty()) throw InvalidArgument("build_vocab: no records");
  Vocabulary vocab;
  for (const auto& r : records) {
    for (const auto& tok : tokenize(r.caption)) vocab.add(tok);
  }
  return vocab;
}

/// Fixed-length id sequence [START, tokens..., END, PAD...] with a mask that
/// is true through END.
struct EncodedCaption {
  std::vector<TokenId> ids;
  std::vector<bool> mask;

  std::size_t max_len() const noexcept { return ids.size(); }
  std::size_t length() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }

  friend bool operator==(const EncodedCaption&, const EncodedCaption&) = default;
};

inline EncodedCaption encode_tokens(const Vocabulary& vocab, const std::vector<std::string>& tokens,
                                    std::size_t max_len) {
  if (tokens.size() + 2 > max_len) {
    throw LengthError("caption has " + std::to_string(tokens.size()) + " tokens; max_len " +
                      std::to_string(max_len) + " allows " + std::to_string(max_len < 2 ? 0 : max_len - 2));
  }
  EncodedCaption enc{std::vector<TokenId>(max_len, Vocabulary::kPad), std::vector<bool>(max_len, false)};
  enc.ids[0] = Vocabulary::kStart;
  for (std::size_t i = 0; i < tokens.size(); ++i) enc.ids[i + 1] = vocab.id_of(tokens[i]);
  enc.ids[tokens.size() + 1] = Vocabulary::kEnd;
  std::fill(enc.mask.begin(), enc.mask.begin() + static_cast<std::ptrdiff_t>(tokens.size() + 2), true);
  return enc;
}

inline EncodedCaption encode(const Vocabulary& vocab, std::string_view caption, std::size_t max_len) {
  return encode_tokens(vocab, tokenize(caption), max_len);
}

/// Tokens between START and END; specials are dropped.
inline std::vector<std::string> decode(const Vocabulary& vocab, const EncodedCaption& enc) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < enc.ids.size() && enc.mask[i]; ++i) {
    const TokenId id = enc.ids[i];
    if (id == Vocabulary::kEnd) break;
    if (!Vocabulary::is_special(id)) out.push_back(vocab.token_of(id));
  }
  return out;
}

/// Longest tokenized caption + 2 (START and END).
inline std::size_t required_max_len(const std::vector<CaptionRecord>& records) {
  std::size_t longest = 0;
  for (const auto& r : records) longest = std::max(longest, tokenize(r.caption).size());
  return longest + 2;
}

struct Split {
  std::vector<CaptionRecord> train;
  std::vector<CaptionRecord> val;
};

/// Seeded shuffle, then the first floor(train_ratio·N) records go to training.
inline Split split(const std::vector<CaptionRecord>& records, double train_ratio, Rng& rng) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw InvalidArgument("split: train_ratio must be in (0, 1)");
  if (records.size() < 2) throw InvalidArgument("split: need at least 2 records");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));

  // The epsilon keeps products like 0.29*100 = 28.999999999999996 on the right side of floor.
  const auto n_train =
      static_cast<std::size_t>(std::floor(train_ratio * static_cast<double>(records.size()) + 1e-9));
  Split out;
  out.train.reserve(n_train);
  out.val.reserve(records.size() - n_train);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.train : out.val).push_back(records[order[i]]);
  }
  return out;
}

using FrequencyTable = std::vector<std::pair<std::string, std::size_t>>;

/// Token counts, descending by count with lexicographic tiebreak.
inline FrequencyTable frequency_report(const std::vector<CaptionRecord>& records) {
  std::map<std::string, std::size_t> counts;
  for (const auto& r : records) {
    for (auto& tok : tokenize(r.caption)) ++counts[std::move(tok)];
  }
  FrequencyTable table(counts.begin(), counts.end());
  std::stable_sort(table.begin(), table.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return table;
}

inline FrequencyTable frequency_head(const FrequencyTable& table, std::size_t k) {
  return FrequencyTable(table.begin(), table.begin() + static_cast<std::ptrdiff_t>(std::min(k, table.size())));
}

inline FrequencyTable frequency_tail(const FrequencyTable& table, std::size_t k) {
  return FrequencyTable(table.end() - static_cast<std::ptrdiff_t>(std::min(k, table.size())), table.end());
}

}  // namespace captioner
