#include <gtest/gtest.h>

#include <sstream>

#include "sei/corpus.hpp"
#include "sei/rng.hpp"
#include "support/synthetic.hpp"

namespace {

std::vector<sei::StudyRecord> parse(const std::string& text) {
  std::istringstream in(text);
  return sei::parse_corpus(in);
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const sei::ValidationError& e) {
    return e.what();
  }
  return "";
}

const char* kThree =
    R"({"study_id":"s1","findings":"AICD in place.","indication":null,"entities":[{"tokens":"AICD","label":"ANAT-DP","start_ix":0,"end_ix":0}],"labels14":null}
{"study_id":"s2","findings":"No pleural effusion.","indication":"cough","entities":[],"labels14":[0,0,0,0,0,0,0,0,0,1,0,0,0,0]}

{"study_id":"s3","findings":"Heart size normal.","entities":[]}
)";

}  // namespace

TEST(LoadCorpus, ParsesRecordsInFileOrder) {
  const auto recs = parse(kThree);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].study_id, "s1");
  EXPECT_EQ(recs[1].study_id, "s2");
  EXPECT_EQ(recs[2].study_id, "s3");
  EXPECT_EQ(recs[0].report.tokens, (std::vector<std::string>{"aicd", "in", "place", "."}));
  EXPECT_EQ(recs[0].report.sentence_ends, (std::vector<std::size_t>{3}));
  EXPECT_FALSE(recs[0].indication.has_value());
  EXPECT_EQ(*recs[1].indication, "cough");
  ASSERT_TRUE(recs[1].labels14.has_value());
  EXPECT_EQ((*recs[1].labels14)[9], 1);
  EXPECT_FALSE(recs[2].labels14.has_value());
}

TEST(LoadCorpus, UnknownLabelIsNamed) {
  const auto msg = error_of(
      R"({"study_id":"s1","findings":"a b.","entities":[{"tokens":"a","label":"OBS-XX","start_ix":0,"end_ix":0}]})");
  EXPECT_NE(msg.find("OBS-XX"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
}

TEST(LoadCorpus, SpanOutOfBoundsRejected) {
  const auto msg = error_of(
      R"({"study_id":"s1","findings":"a b.","entities":[{"tokens":"b . c","label":"OBS-DP","start_ix":1,"end_ix":3}]})");
  EXPECT_NE(msg.find("out of bounds"), std::string::npos) << msg;
}

TEST(LoadCorpus, SpanLengthMustMatchTokenCount) {
  const auto msg = error_of(
      R"({"study_id":"s1","findings":"a b c.","entities":[{"tokens":"a b","label":"OBS-DP","start_ix":0,"end_ix":2}]})");
  EXPECT_NE(msg.find("spans 3 tokens"), std::string::npos) << msg;
}

TEST(LoadCorpus, MalformedLineNamesLineAndField) {
  EXPECT_NE(error_of("{\"study_id\":\"a\",\"findings\":\"x\"}\n{oops").find("line 2"), std::string::npos);
  const auto msg = error_of(R"({"study_id":"a"})");
  EXPECT_NE(msg.find("findings"), std::string::npos) << msg;
  EXPECT_NE(error_of(R"({"study_id":"a","findings":"x","labels14":[1,0]})").find("labels14"), std::string::npos);
  EXPECT_NE(error_of(R"({"study_id":"a","findings":"x","labels14":[2,0,0,0,0,0,0,0,0,0,0,0,0,0]})").find("labels14"),
            std::string::npos);
}

TEST(LoadCorpus, DuplicateIdsRejected) {
  EXPECT_NE(error_of("{\"study_id\":\"a\",\"findings\":\"x\"}\n{\"study_id\":\"a\",\"findings\":\"y\"}").find("duplicate"),
            std::string::npos);
}

TEST(LoadCorpus, MissingFileIsIoError) {
  EXPECT_THROW(sei::load_corpus("/nonexistent/corpus.jsonl"), sei::IoError);
}

TEST(LoadCorpus, RoundTripReproducesRecords) {
  sei::SplitMix64 rng(11);
  std::string text;
  std::vector<sei::StudyRecord> originals;
  for (int i = 0; i < 50; ++i) {
    auto r = sei::testing::random_record(rng, "s" + std::to_string(i));
    if (i % 3 == 0) r.indication = "History: cough";
    if (i % 4 == 0) {
      sei::LabelVector v{};
      v[i % 14] = 1;
      r.labels14 = v;
    }
    if (i % 5 == 0) r.embedding = std::vector<float>{0.25f, -1.5f, 3.14159f};
    originals.push_back(r);
    text += sei::serialize_record(r) + "\n";
  }
  const auto back = parse(text);
  ASSERT_EQ(back.size(), originals.size());
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back[i], originals[i]) << "record " << i;
}

TEST(FilterCorpus, DropsEmptyShortAndJunkWithReasons) {
  sei::CorpusFilterConfig cfg{3, {"is subnitted"}};
  std::vector<sei::StudyRecord> recs;
  auto add = [&](const std::string& id, const std::string& text) {
    sei::StudyRecord r;
    r.study_id = id;
    r.report = sei::make_report(id, text);
    recs.push_back(r);
  };
  add("empty", "   ");
  add("junk", "Portable supine chest radiograph__at 23:16 is subnitted.");
  add("short", "Stable.");
  std::string long_text;
  for (int i = 0; i < 49; ++i) long_text += "word ";
  long_text += ".";
  add("normal", long_text);

  const auto out = sei::filter_corpus(recs, cfg);
  ASSERT_EQ(out.kept.size(), 1u);
  EXPECT_EQ(out.kept[0].study_id, "normal");
  ASSERT_EQ(out.dropped.size(), 3u);
  EXPECT_EQ(out.dropped[0].reason, "empty");
  EXPECT_EQ(out.dropped[1].reason, "junk:is subnitted");
  EXPECT_EQ(out.dropped[2].reason, "too_short");
}

TEST(FilterCorpus, JunkMatchIsCaseInsensitive) {
  sei::StudyRecord r;
  r.study_id = "x";
  r.report = sei::make_report("x", "Chest radiograph IS SUBNITTED for review.");
  EXPECT_EQ(sei::filter_corpus({r}, {0, {"is subnitted"}}).dropped.size(), 1u);
}

TEST(FilterCorpus, IdempotentAndPartitioning) {
  sei::SplitMix64 rng(5);
  std::vector<sei::StudyRecord> recs;
  for (int i = 0; i < 200; ++i) {
    sei::testing::SyntheticOptions o;
    o.min_words = 0;
    o.max_sentences = 2;
    recs.push_back(sei::testing::random_record(rng, std::to_string(i), o));
  }
  const sei::CorpusFilterConfig cfg{6, {"pneumothorax"}};
  const auto first = sei::filter_corpus(recs, cfg);
  EXPECT_EQ(first.kept.size() + first.dropped.size(), recs.size());
  EXPECT_FALSE(first.kept.empty());
  EXPECT_FALSE(first.dropped.empty());
  const auto second = sei::filter_corpus(first.kept, cfg);
  EXPECT_TRUE(second.dropped.empty());
  EXPECT_EQ(second.kept, first.kept);
}

TEST(LabelCsv, ParsesWithAndWithoutHeader) {
  std::istringstream in("study_id,l1,l2,l3,l4,l5,l6,l7,l8,l9,l10,l11,l12,l13,l14\ns1,1,0,0,0,0,0,0,0,0,0,0,0,0,1\n");
  const auto m = sei::parse_label_csv(in);
  ASSERT_EQ(m.count("s1"), 1u);
  EXPECT_EQ(m.at("s1")[0], 1);
  EXPECT_EQ(m.at("s1")[13], 1);
  std::istringstream bad("s1,1,0\n");
  EXPECT_THROW(sei::parse_label_csv(bad), sei::ValidationError);
}
