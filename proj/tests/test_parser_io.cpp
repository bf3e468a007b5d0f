#include <gtest/gtest.h>

#include <sstream>

#include "rstlora/parser_io.hpp"
#include "support.hpp"

using namespace rstlora;

namespace {

const char* kTwoEdu = R"({"doc_id":"d","token_count":4,"edus":[[0,2],[2,4]],"relations":[%s]})";

std::string record(const std::string& relations) {
  char buf[512];
  std::snprintf(buf, sizeof buf, kTwoEdu, relations.c_str());
  return buf;
}

std::string error_of(const std::string& text) {
  try {
    parse_record(text);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(LoadParse, SparseEntryDensifies) {
  const auto p = parse_record(record(R"({"i":0,"j":1,"type":"Expansion","p":0.8})"));
  ASSERT_EQ(p.n_edu, 2u);
  ASSERT_EQ(p.k_relations, 4u);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(p.at(i, j, k), (i == 0 && j == 1 && k == 3) ? 0.8 : 0.0);
}

TEST(LoadParse, RawLabelMapsToGroup) {
  const auto p = parse_record(record(R"({"i":1,"j":0,"type":"Elaboration","p":0.4})"));
  EXPECT_EQ(p.at(1, 0, 3), 0.4);
}

TEST(LoadParse, DiagonalRejected) {
  EXPECT_NE(error_of(record(R"({"i":1,"j":1,"type":"Temporal","p":0.3})")).find("diagonal must be zero"),
            std::string::npos);
}

TEST(LoadParse, OutOfRangeRejected) {
  EXPECT_NE(error_of(record(R"({"i":0,"j":1,"type":"Temporal","p":1.2})")).find("probability out of range"),
            std::string::npos);
}

TEST(LoadParse, MalformedJsonCarriesLine) {
  std::istringstream in(record("") + "\n\n{not json\n");
  try {
    read_parses(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(LoadParse, UnknownLabelRejected) {
  EXPECT_THROW(parse_record(record(R"({"i":0,"j":1,"type":"Sarcasm","p":0.3})")), SchemaError);
}

TEST(LoadParse, OverlappingSpansRejected) {
  const std::string text = R"({"doc_id":"d","token_count":4,"edus":[[0,3],[2,4]],"relations":[]})";
  EXPECT_NE(error_of(text).find("spans overlap"), std::string::npos);
}

TEST(LoadParse, CustomTypesNeedMatchingK) {
  const std::string ok =
      R"({"doc_id":"d","token_count":2,"edus":[[0,1],[1,2]],"k":2,"types":["A","B"],"labels":{},"relations":[{"i":0,"j":1,"type":"B","p":0.5}]})";
  const auto p = parse_record(ok);
  EXPECT_EQ(p.k_relations, 2u);
  EXPECT_EQ(p.at(0, 1, 1), 0.5);
  const std::string missing = R"({"doc_id":"d","token_count":2,"edus":[[0,1],[1,2]],"k":2,"relations":[]})";
  EXPECT_THROW(parse_record(missing), SchemaError);
}

TEST(LoadParse, FileRoundTrip) {
  const auto dir = support::temp_dir("parser_io");
  Rng rng(5);
  std::vector<ParseOutput> parses;
  for (int d = 0; d < 4; ++d) parses.push_back(support::random_parse(rng, 2 + d));
  {
    std::ofstream out(dir / "p.jsonl");
    write_parses(out, parses);
  }
  EXPECT_EQ(load_parses((dir / "p.jsonl").string()), parses);
  EXPECT_THROW(load_parse((dir / "p.jsonl").string()), DataError);
  EXPECT_THROW(load_parses((dir / "missing.jsonl").string()), DataError);
}

TEST(Validate, ZeroTensorIsValid) {
  ParseOutput p(EDUSegmentation{"d", {{0, 2}, {2, 3}, {3, 5}}, 5}, 4);
  EXPECT_TRUE(validate(p).empty());
}

TEST(Validate, OverlapReported) {
  ParseOutput p(EDUSegmentation{"d", {{0, 3}, {2, 5}}, 5}, 4);
  const auto r = validate(p);
  EXPECT_NE(std::find(r.begin(), r.end(), "spans overlap"), r.end());
}

TEST(Validate, NonzeroDiagonalReported) {
  ParseOutput p(EDUSegmentation{"d", {{0, 1}, {1, 2}, {2, 3}}, 3}, 4);
  p.at(2, 2, 0) = 0.1;
  const auto r = validate(p);
  EXPECT_NE(std::find(r.begin(), r.end(), "nonzero diagonal"), r.end());
}

TEST(Validate, GapAndOverrunReported) {
  ParseOutput p(EDUSegmentation{"d", {{0, 1}, {2, 6}}, 5}, 4);
  const auto r = validate(p);
  EXPECT_NE(std::find(r.begin(), r.end(), "spans not contiguous"), r.end());
  EXPECT_NE(std::find(r.begin(), r.end(), "span exceeds token_count"), r.end());
}

TEST(ParseProperty, SerializeRoundTripIsExact) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = support::random_parse(rng, support::draw_size(rng, 1, 9), uniform(rng));
    ASSERT_TRUE(validate(p).empty());
    EXPECT_EQ(parse_record(serialize(p)), p) << "trial " << trial;
  }
}

TEST(Synth, DeterministicBytes) {
  SynthConfig cfg;
  cfg.n_docs = 30;
  cfg.noise_rate = 0.3;
  std::ostringstream a, b;
  for (const auto& d : synth_parse(cfg)) a << serialize(d.parse) << corpus_record(d, Vocabulary{}).dump();
  for (const auto& d : synth_parse(cfg)) b << serialize(d.parse) << corpus_record(d, Vocabulary{}).dump();
  EXPECT_EQ(a.str(), b.str());
}

TEST(Synth, NucleusCountRounding) {
  EXPECT_EQ(planted_nucleus_count(0.3, 10), 3u);
  EXPECT_EQ(planted_nucleus_count(0.3, 5), 2u);  // 1.5 rounds up
  SynthConfig cfg;
  cfg.n_edu_min = cfg.n_edu_max = 10;
  cfg.tokens_per_edu_max = 3;
  cfg.n_docs = 20;
  for (const auto& d : synth_parse(cfg)) EXPECT_EQ(std::count(d.is_nucleus.begin(), d.is_nucleus.end(), true), 3);
}

TEST(Synth, NucleusRowsCarryMoreMass) {
  SynthConfig cfg;
  cfg.n_docs = 200;
  cfg.shared_row_relation = false;
  for (const auto& d : synth_parse(cfg)) {
    const auto& p = d.parse;
    double nuc = 1e9, sat = -1;
    for (std::size_t i = 0; i < p.n_edu; ++i) {
      double mass = 0;
      for (std::size_t j = 0; j < p.n_edu; ++j)
        for (std::size_t k = 0; k < p.k_relations; ++k) mass += p.at(i, j, k);
      mass /= static_cast<double>(p.n_edu - 1);
      if (d.is_nucleus[i])
        nuc = std::min(nuc, mass);
      else
        sat = std::max(sat, mass);
    }
    EXPECT_GE(nuc, sat) << p.segmentation.doc_id;
  }
}

TEST(Synth, DocumentsAreValidAndSummariesAreNuclei) {
  SynthConfig cfg;
  cfg.n_docs = 50;
  cfg.noise_rate = 0.5;
  for (const auto& d : synth_parse(cfg)) {
    EXPECT_TRUE(validate(d.parse).empty());
    EXPECT_EQ(d.tokens.size(), d.parse.segmentation.token_count);
    std::vector<int> expect;
    for (std::size_t e = 0; e < d.parse.n_edu; ++e)
      if (d.is_nucleus[e])
        for (auto t = d.parse.segmentation.spans[e].start; t < d.parse.segmentation.spans[e].end; ++t)
          expect.push_back(d.tokens[t]);
    EXPECT_EQ(d.summary, expect);
  }
}

TEST(Synth, RejectsBadConfig) {
  SynthConfig cfg;
  cfg.nucleus_prob = {0.3, 0.9};  // overlaps the satellite range
  EXPECT_THROW(synth_parse(cfg), ConfigError);
  cfg = SynthConfig{};
  cfg.vocab_size = 10;
  EXPECT_THROW(synth_parse(cfg), ConfigError);
}

TEST(Vocabulary, EncodeDecodeRoundTrip) {
  Vocabulary v;
  const std::vector<int> ids{Vocabulary::kBos, 4, 17, 63, Vocabulary::kEos};
  EXPECT_EQ(v.encode(v.decode(ids)), ids);
  EXPECT_THROW(v.id("w64"), DataError);
  EXPECT_THROW(v.id("hello"), DataError);
}
