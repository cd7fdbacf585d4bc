#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "captioner/eval.hpp"
#include "support/desk.hpp"

using namespace captioner;
using namespace captioner::testing;

namespace {

using Tokens = std::vector<std::string>;

// Clipped matches by sorting both sides and merging, instead of counting maps.
double bleu1_oracle(Tokens hyp, Tokens ref) {
  if (hyp.empty()) return 0.0;
  const double h = static_cast<double>(hyp.size());
  const double r = static_cast<double>(ref.size());
  std::sort(hyp.begin(), hyp.end());
  std::sort(ref.begin(), ref.end());
  std::size_t i = 0, j = 0, matches = 0;
  while (i < hyp.size() && j < ref.size()) {
    if (hyp[i] == ref[j]) {
      ++matches, ++i, ++j;
    } else if (hyp[i] < ref[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const double bp = h < r ? std::exp(1.0 - r / h) : 1.0;
  return 100.0 * bp * static_cast<double>(matches) / h;
}

Tokens random_tokens(Rng& rng, std::size_t max_len, std::size_t alphabet) {
  Tokens t(1 + rng.below(max_len));
  for (auto& w : t) w = std::string(1, static_cast<char>('a' + rng.below(alphabet)));
  return t;
}

}  // namespace

TEST(Bleu1, HandDerivedValues) {
  EXPECT_DOUBLE_EQ(bleu1({"a", "b", "c"}, {"a", "b", "c"}), 100.0);
  EXPECT_NEAR(bleu1({"a", "a", "b"}, {"a", "b", "c"}), 66.6667, 1e-4);
  EXPECT_NEAR(bleu1({"a"}, {"a", "b", "c"}), 13.5335, 1e-4);
  EXPECT_EQ(bleu1({}, {"a"}), 0.0);
  EXPECT_THROW(bleu1({"a"}, {}), InvalidArgument);
}

TEST(Bleu1, PublishedInferenceExamples) {
  // Two validation captions shown with their scores (reported truncated to 2 decimals).
  const double beach = bleu1(tokenize("selalu ada dan angin di pantai parangtritis"),
                             tokenize("menikmati ombak dan angin di pantai parangtritis"));
  EXPECT_NEAR(beach, 500.0 / 7.0, 1e-12);
  EXPECT_EQ(std::floor(beach * 100) / 100, 71.42);
  const double jeep = bleu1(tokenize("wisata merapi kaliadem private jeep tour yogyakarta"),
                            tokenize("wisata jeep gunung merapi sleman"));
  EXPECT_NEAR(jeep, 300.0 / 7.0, 1e-12);
  EXPECT_EQ(std::floor(jeep * 100) / 100, 42.85);
}

TEST(Bleu1, PropertySuite) {
  Rng rng(31337);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto hyp = random_tokens(rng, 10, 6);
    const auto ref = random_tokens(rng, 10, 6);
    const double s = bleu1(hyp, ref);
    ASSERT_GE(s, 0.0);
    ASSERT_LE(s, 100.0);
    ASSERT_NEAR(s, bleu1_oracle(hyp, ref), 1e-12);
    ASSERT_DOUBLE_EQ(bleu1(hyp, hyp), 100.0);
    auto shuffled = hyp;
    rng.shuffle(std::span<std::string>(shuffled));
    ASSERT_DOUBLE_EQ(bleu1(shuffled, ref), s);
  }
}

TEST(GreedyDecode, BudgetAndSpecials) {
  Rng rng(1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    const auto p = random_params(desk_config(), r);
    const auto f = random_features(4, 8, r);
    for (std::size_t budget : {0u, 1u, 3u, 12u}) {
      const auto d = greedy_decode(f, p, budget);
      EXPECT_LE(d.ids.size(), budget);
      EXPECT_LE(d.attention.size(), budget);
      for (TokenId id : d.ids) EXPECT_FALSE(Vocabulary::is_special(id));
      for (const auto& w : d.attention) {
        double total = 0;
        for (double v : w.data()) total += v;
        EXPECT_NEAR(total, 1.0, 1e-9);
      }
    }
  }
}

TEST(GreedyDecode, TiesGoToLowestId) {
  Rng rng(2);
  auto p = random_params(desk_config(), rng);
  p.out_w.fill(0.0);
  p.out_b.fill(0.0);
  p.out_b[7] = 1.0;
  p.out_b[5] = 1.0;
  const auto d = greedy_decode(random_features(4, 8, rng), p, 3);
  EXPECT_EQ(d.ids, (std::vector<TokenId>{5, 5, 5}));

  p.out_b[Vocabulary::kEnd] = 2.0;
  EXPECT_TRUE(greedy_decode(random_features(4, 8, rng), p, 3).ids.empty());
}

TEST(GreedyDecode, Deterministic) {
  Rng rng(3);
  const auto p = random_params(desk_config(), rng);
  const auto f = random_features(4, 8, rng);
  const auto a = greedy_decode(f, p, 6);
  const auto b = greedy_decode(f, p, 6);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.attention, b.attention);
}

TEST(CorpusBleu, AverageAndMissingGrid) {
  Rng rng(4);
  auto c = desk_config();
  c.feature_dim = 512;
  c.max_len = 5;
  const std::vector<CaptionRecord> records{{"a.jpg", "w x"}, {"b.jpg", "y z y"}, {"c.jpg", "x"}};
  Vocabulary vocab;
  for (const char* w : {"w", "x", "y", "z", "q", "r"}) vocab.add(w);
  const auto p = random_params(c, rng);
  std::map<std::string, FeatureGrid> grids;
  for (const auto& r : records) grids[r.image_id] = synth_grid(Backbone::vgg16, r.image_id, rng);
  const GridLookup lookup = [&](const std::string& id) -> const FeatureGrid* {
    auto it = grids.find(id);
    return it == grids.end() ? nullptr : &it->second;
  };
  const auto report = corpus_bleu(records, lookup, p, vocab, 4);
  ASSERT_EQ(report.per_example.size(), 3u);
  double mean = 0;
  for (const auto& e : report.per_example) {
    EXPECT_GE(e.bleu1, 0.0);
    EXPECT_LE(e.bleu1, 100.0);
    EXPECT_EQ(e.bleu1, bleu1(e.hypothesis, e.reference));
    mean += e.bleu1 / 3;
  }
  EXPECT_NEAR(report.corpus_average, mean, 1e-12);

  const auto single = corpus_bleu(std::vector<CaptionRecord>{records[1]}, lookup, p, vocab, 4);
  EXPECT_EQ(single.corpus_average, single.per_example[0].bleu1);

  grids.erase("b.jpg");
  try {
    corpus_bleu(records, lookup, p, vocab, 4);
    FAIL() << "expected MissingData";
  } catch (const MissingData& e) {
    EXPECT_NE(std::string(e.what()).find("b.jpg"), std::string::npos);
  }
}

TEST(FormatHalfUp, Rounding) {
  EXPECT_EQ(format_half_up(73.385, 2), "73.39");
  EXPECT_EQ(format_half_up(2.675, 2), "2.68");
  EXPECT_EQ(format_half_up(24.51, 2), "24.51");
  EXPECT_EQ(format_half_up(99.995, 2), "100.00");
  EXPECT_EQ(format_half_up(0.004, 2), "0.00");
  EXPECT_EQ(format_half_up(100.0, 2), "100.00");
  EXPECT_EQ(format_half_up(0.1234565, 6), "0.123457");
  EXPECT_EQ(format_half_up(-1.005, 2), "-1.01");
}

TEST(ComparisonReport, Layout) {
  ModelComparison b0{"EfficientNetB0", {}, {}};
  b0.train.corpus_average = 73.385;
  b0.val.corpus_average = 24.51;
  std::ostringstream one;
  comparison_report({b0}, one);
  EXPECT_EQ(one.str(), "architecture,bleu_train,bleu_val\nEfficientNetB0,73.39,24.51\n");
  EXPECT_THROW(comparison_report({}, one), InvalidArgument);
}

TEST(ComparisonReport, ParseBackPreservesOrderAndValues) {
  Rng rng(5);
  std::vector<ModelComparison> models;
  for (const char* name : {"EfficientNetB4", "EfficientNetB0", "VGG16", "InceptionV3"}) {
    ModelComparison m{name, {}, {}};
    m.train.corpus_average = rng.uniform(0, 100);
    m.val.corpus_average = rng.uniform(0, 100);
    models.push_back(m);
  }
  std::stringstream csv;
  comparison_report(models, csv);
  const auto rows = parse_comparison_report(csv);
  ASSERT_EQ(rows.size(), models.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].architecture, models[i].architecture);
    EXPECT_NEAR(rows[i].bleu_train, models[i].train.corpus_average, 0.005);
    EXPECT_NEAR(rows[i].bleu_val, models[i].val.corpus_average, 0.005);
  }
}

TEST(PerExampleJsonl, OneObjectPerLine) {
  BleuReport r;
  r.per_example.push_back({"x.jpg", {"a", "b"}, {"a", "c"}, 50.0});
  r.per_example.push_back({"y.jpg", {}, {"d"}, 0.0});
  std::ostringstream out;
  write_per_example_jsonl(r, out);
  EXPECT_EQ(out.str(),
            "{\"image_id\":\"x.jpg\",\"hypothesis\":\"a b\",\"reference\":\"a c\",\"bleu1\":50.0}\n"
            "{\"image_id\":\"y.jpg\",\"hypothesis\":\"\",\"reference\":\"d\",\"bleu1\":0.0}\n");
}
