#pragma once

// Serialized RST-parser output: loading, validation, and a synthetic
// planted-nucleus corpus generator.
//
// File format (JSON Lines, one document per line):
//   {"doc_id": str, "token_count": int, "edus": [[start, end), ...], "k": int,
//    "labels": {raw_label: grouped_type, ...}, "types": [grouped_type, ...],
//    "relations": [{"i": int, "j": int, "type": str, "p": float}, ...]}
// Only nonzero cells are listed; an absent cell has probability 0.
// "types" fixes the channel order and may be omitted when k == 4, in which
// case the default grouping order is used.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rstlora/errors.hpp"
#include "rstlora/random.hpp"

namespace rstlora {

using json = nlohmann::json;

struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::size_t length() const noexcept { return end - start; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct EDUSegmentation {
  std::string doc_id;
  std::vector<TokenSpan> spans;
  std::size_t token_count = 0;
  friend bool operator==(const EDUSegmentation&, const EDUSegmentation&) = default;
};

/// Grouped relation types in channel order.
inline const std::vector<std::string>& default_relation_types() {
  static const std::vector<std::string> types{"Temporal", "Contingency", "Comparison", "Expansion"};
  return types;
}

/// Raw parser label -> grouped type.
inline const std::map<std::string, std::string>& default_label_map() {
  static const std::map<std::string, std::string> labels{
      {"Asynchronous", "Temporal"}, {"Synchronous", "Temporal"},
      {"Cause", "Contingency"},     {"Condition", "Contingency"},
      {"Contrast", "Comparison"},   {"Concession", "Comparison"},
      {"Explanation", "Expansion"}, {"Elaboration", "Expansion"},
      {"Conjunction", "Expansion"},
  };
  return labels;
}

/// Dense n_edu x n_edu x k probability tensor plus the segmentation it
/// refers to. probs(i, j, k) is the probability that EDU i is the nucleus of
/// EDU j under relation group k.
struct ParseOutput {
  EDUSegmentation segmentation;
  std::size_t n_edu = 0;
  std::size_t k_relations = 4;
  std::vector<double> probs;
  std::map<std::string, std::string> label_map = default_label_map();
  std::vector<std::string> relation_types = default_relation_types();

  ParseOutput() = default;
  ParseOutput(EDUSegmentation seg, std::size_t k)
      : segmentation(std::move(seg)), n_edu(segmentation.spans.size()), k_relations(k),
        probs(n_edu * n_edu * k, 0.0) {}

  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return probs[(i * n_edu + j) * k_relations + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return probs[(i * n_edu + j) * k_relations + k];
  }

  /// Channel index of a raw label or grouped type name.
  std::size_t relation_index(const std::string& label) const {
    std::string group = label;
    if (auto it = label_map.find(label); it != label_map.end()) group = it->second;
    auto pos = std::find(relation_types.begin(), relation_types.end(), group);
    if (pos == relation_types.end()) throw SchemaError("unknown relation label '" + label + "'");
    return static_cast<std::size_t>(pos - relation_types.begin());
  }

  friend bool operator==(const ParseOutput&, const ParseOutput&) = default;
};

/// Every violated invariant, one message each. Empty iff valid.
inline std::vector<std::string> validate(const ParseOutput& parse) {
  std::vector<std::string> report;
  const auto& seg = parse.segmentation;
  if (seg.spans.empty()) report.emplace_back("no EDU spans");
  bool overlap = false, gap = false, empty = false, overrun = false;
  for (std::size_t s = 0; s < seg.spans.size(); ++s) {
    const auto& span = seg.spans[s];
    if (span.end <= span.start) empty = true;
    if (span.end > seg.token_count) overrun = true;
    if (s == 0) {
      if (span.start != 0) report.emplace_back("first span must start at 0");
      continue;
    }
    const auto prev_end = seg.spans[s - 1].end;
    if (span.start < prev_end) overlap = true;
    if (span.start > prev_end) gap = true;
  }
  if (overlap) report.emplace_back("spans overlap");
  if (gap) report.emplace_back("spans not contiguous");
  if (empty) report.emplace_back("empty span");
  if (overrun) report.emplace_back("span exceeds token_count");
  if (parse.n_edu != seg.spans.size()) report.emplace_back("n_edu does not match span count");
  if (parse.k_relations == 0) report.emplace_back("k must be positive");
  if (parse.relation_types.size() != parse.k_relations)
    report.emplace_back("relation type list does not match k");
  for (const auto& [raw, group] : parse.label_map) {
    if (std::find(parse.relation_types.begin(), parse.relation_types.end(), group) ==
        parse.relation_types.end()) {
      report.emplace_back("label '" + raw + "' maps to unknown type '" + group + "'");
    }
  }
  if (parse.probs.size() != parse.n_edu * parse.n_edu * parse.k_relations) {
    report.emplace_back("probability tensor size mismatch");
    return report;
  }
  bool range = false, diagonal = false;
  for (std::size_t i = 0; i < parse.n_edu; ++i)
    for (std::size_t j = 0; j < parse.n_edu; ++j)
      for (std::size_t k = 0; k < parse.k_relations; ++k) {
        const double p = parse.at(i, j, k);
        if (!(p >= 0.0 && p <= 1.0)) range = true;
        if (i == j && p != 0.0) diagonal = true;
      }
  if (range) report.emplace_back("probability out of range");
  if (diagonal) report.emplace_back("nonzero diagonal");
  return report;
}

inline json to_json(const ParseOutput& parse) {
  json edus = json::array();
  for (const auto& s : parse.segmentation.spans) edus.push_back({s.start, s.end});
  json relations = json::array();
  for (std::size_t i = 0; i < parse.n_edu; ++i)
    for (std::size_t j = 0; j < parse.n_edu; ++j)
      for (std::size_t k = 0; k < parse.k_relations; ++k) {
        const double p = parse.at(i, j, k);
        if (p != 0.0) relations.push_back({{"i", i}, {"j", j}, {"type", parse.relation_types[k]}, {"p", p}});
      }
  json labels = json::object();
  for (const auto& [raw, group] : parse.label_map) labels[raw] = group;
  return json{{"doc_id", parse.segmentation.doc_id},
              {"token_count", parse.segmentation.token_count},
              {"edus", edus},
              {"k", parse.k_relations},
              {"labels", labels},
              {"types", parse.relation_types},
              {"relations", relations}};
}

inline std::string serialize(const ParseOutput& parse) { return to_json(parse).dump(); }

/// Decodes one JSONL record. `line` is only used for error messages.
inline ParseOutput parse_record(const std::string& text, std::size_t line = 1) {
  json rec;
  try {
    rec = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(line, std::string("malformed JSON: ") + e.what());
  }
  const auto fail_schema = [line](const std::string& what) {
    throw SchemaError("line " + std::to_string(line) + ": " + what);
  };
  try {
    EDUSegmentation seg;
    seg.doc_id = rec.at("doc_id").get<std::string>();
    seg.token_count = rec.at("token_count").get<std::size_t>();
    for (const auto& e : rec.at("edus")) {
      if (!e.is_array() || e.size() != 2) throw ParseError(line, "edu span must be [start, end]");
      seg.spans.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>()});
    }
    const auto k = rec.value("k", std::size_t{4});
    ParseOutput parse(std::move(seg), k);
    if (rec.contains("labels")) {
      parse.label_map.clear();
      for (const auto& [raw, group] : rec.at("labels").items()) parse.label_map[raw] = group.get<std::string>();
    }
    if (rec.contains("types")) {
      parse.relation_types = rec.at("types").get<std::vector<std::string>>();
    } else if (k != default_relation_types().size()) {
      fail_schema("\"types\" is required when k != 4");
    }
    if (parse.relation_types.size() != k) fail_schema("relation type list does not match k");
    for (const auto& r : rec.value("relations", json::array())) {
      const auto i = r.at("i").get<std::size_t>();
      const auto j = r.at("j").get<std::size_t>();
      const double p = r.at("p").get<double>();
      if (i >= parse.n_edu || j >= parse.n_edu) fail_schema("relation index out of range");
      if (!(p >= 0.0 && p <= 1.0)) fail_schema("probability out of range");
      if (i == j && p != 0.0) fail_schema("diagonal must be zero");
      std::size_t channel = 0;
      try {
        channel = parse.relation_index(r.at("type").get<std::string>());
      } catch (const SchemaError& e) {
        fail_schema(e.what());
      }
      parse.at(i, j, channel) = p;
    }
    if (auto report = validate(parse); !report.empty()) fail_schema(report.front());
    return parse;
  } catch (const json::exception& e) {
    throw ParseError(line, std::string("bad record: ") + e.what());
  }
}

inline std::vector<ParseOutput> read_parses(std::istream& in) {
  std::vector<ParseOutput> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_record(text, line));
  }
  return out;
}

inline std::vector<ParseOutput> load_parses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open parse file '" + path + "'");
  return read_parses(in);
}

/// Single-document convenience; the file must hold exactly one record.
inline ParseOutput load_parse(const std::string& path) {
  auto all = load_parses(path);
  if (all.size() != 1) throw DataError("expected one document in '" + path + "', found " + std::to_string(all.size()));
  return std::move(all.front());
}

inline void write_parses(std::ostream& out, const std::vector<ParseOutput>& parses) {
  for (const auto& p : parses) out << serialize(p) << '\n';
}

// ---------------------------------------------------------------------------
// Toy vocabulary: whitespace tokenizer over a fixed integer vocabulary.

struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kSep = 2;
  static constexpr int kEos = 3;
  static constexpr int kFirstContent = 4;

  std::size_t size = 64;

  std::string word(int id) const {
    switch (id) {
      case kPad: return "<pad>";
      case kBos: return "<s>";
      case kSep: return "<sep>";
      case kEos: return "</s>";
      default: return "w" + std::to_string(id);
    }
  }

  int id(const std::string& word) const {
    if (word == "<pad>") return kPad;
    if (word == "<s>") return kBos;
    if (word == "<sep>") return kSep;
    if (word == "</s>") return kEos;
    if (word.size() > 1 && word[0] == 'w') {
      try {
        std::size_t used = 0;
        const int v = std::stoi(word.substr(1), &used);
        if (used == word.size() - 1 && v >= kFirstContent && static_cast<std::size_t>(v) < size) return v;
      } catch (const std::exception&) {
      }
    }
    throw DataError("token '" + word + "' is not in the vocabulary");
  }

  std::vector<int> encode(const std::string& text) const {
    std::istringstream in(text);
    std::vector<int> ids;
    std::string w;
    while (in >> w) ids.push_back(id(w));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Synthetic planted-nucleus corpus.

struct Range {
  double lo = 0;
  double hi = 0;
};

struct SynthConfig {
  std::size_t n_docs = 300;
  std::size_t n_edu_min = 5;
  std::size_t n_edu_max = 8;
  std::size_t tokens_per_edu_min = 2;
  std::size_t tokens_per_edu_max = 4;
  double nucleus_ratio = 0.3;
  Range nucleus_prob{0.55, 0.95};
  Range satellite_prob{0.05, 0.45};
  /// Each EDU, as nucleus, supports all others under one relation group;
  /// otherwise the group is drawn per cell.
  bool shared_row_relation = true;
  /// Fraction of cells where the simulated parser is unsure. An unsure
  /// nucleus cell is drawn from ambiguous_prob, an unsure satellite cell from
  /// its mirror [1 - hi, 1 - lo]; a range below 0.5 makes the parser lean the
  /// wrong way. Zero keeps the nucleus and satellite ranges disjoint.
  double noise_rate = 0.0;
  Range ambiguous_prob{0.3, 0.7};
  std::size_t k_relations = 4;
  std::size_t vocab_size = 64;
  std::uint64_t seed = 13;

  void validate() const {
    if (n_docs == 0) throw ConfigError("synth: n_docs must be positive");
    if (n_edu_min < 2 || n_edu_min > n_edu_max) throw ConfigError("synth: need 2 <= n_edu_min <= n_edu_max");
    if (tokens_per_edu_min < 1 || tokens_per_edu_min > tokens_per_edu_max)
      throw ConfigError("synth: need 1 <= tokens_per_edu_min <= tokens_per_edu_max");
    if (!(nucleus_ratio > 0.0 && nucleus_ratio < 1.0)) throw ConfigError("synth: nucleus_ratio must be in (0,1)");
    const auto ordered = [](Range r) { return r.lo >= 0.0 && r.lo <= r.hi && r.hi <= 1.0; };
    if (!ordered(nucleus_prob) || !ordered(satellite_prob))
      throw ConfigError("synth: probability ranges must be ordered subsets of [0,1]");
    if (!(satellite_prob.hi < nucleus_prob.lo))
      throw ConfigError("synth: satellite range must lie strictly below the nucleus range");
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw ConfigError("synth: noise_rate must lie in [0, 1]");
    if (!ordered(ambiguous_prob)) throw ConfigError("synth: ambiguous_prob must be an ordered subset of [0,1]");
    if (k_relations == 0) throw ConfigError("synth: k_relations must be positive");
    if (k_relations != default_relation_types().size())
      throw ConfigError("synth: only the default four relation groups are supported");
    const auto content = vocab_size > Vocabulary::kFirstContent ? vocab_size - Vocabulary::kFirstContent : 0;
    if (content < n_edu_max * tokens_per_edu_max)
      throw ConfigError("synth: vocabulary too small for distinct document tokens");
  }
};

/// Round-half-up of ratio * n.
inline std::size_t planted_nucleus_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
}

struct SynthDocument {
  ParseOutput parse;
  std::vector<int> tokens;
  std::vector<int> summary;
  /// One entry per summary sentence (nucleus EDU), as token counts.
  std::vector<std::size_t> summary_sentence_lengths;
  std::vector<bool> is_nucleus;  // per EDU
};

/// Successor map shared by every document of a corpus: EDUs are runs along
/// a fixed random cycle over the content vocabulary, so within-EDU bigrams
/// are corpus-level regularities while EDU choice is per-document.
inline std::vector<int> successor_cycle(std::size_t vocab_size, std::uint64_t seed) {
  std::vector<int> order;
  for (int t = Vocabulary::kFirstContent; t < static_cast<int>(vocab_size); ++t) order.push_back(t);
  auto rng = make_rng(seed, "synth.cycle");
  shuffle(order.begin(), order.end(), rng);
  std::vector<int> next(vocab_size, -1);
  for (std::size_t i = 0; i < order.size(); ++i) next[order[i]] = order[(i + 1) % order.size()];
  return next;
}

inline std::vector<SynthDocument> synth_parse(const SynthConfig& cfg) {
  cfg.validate();
  const auto next = successor_cycle(cfg.vocab_size, cfg.seed);
  std::vector<SynthDocument> docs;
  docs.reserve(cfg.n_docs);
  for (std::size_t d = 0; d < cfg.n_docs; ++d) {
    auto rng = make_rng(cfg.seed, "synth.doc", d);
    const auto n_edu = static_cast<std::size_t>(
        uniform_int(rng, static_cast<std::int64_t>(cfg.n_edu_min), static_cast<std::int64_t>(cfg.n_edu_max)));
    const auto n_nuc = planted_nucleus_count(cfg.nucleus_ratio, n_edu);
    if (n_nuc == 0) throw ConfigError("synth: nucleus count rounds to 0 for n_edu=" + std::to_string(n_edu));

    SynthDocument doc;
    EDUSegmentation seg;
    seg.doc_id = "doc" + std::to_string(d);
    std::vector<bool> used(cfg.vocab_size, false);
    for (std::size_t e = 0; e < n_edu; ++e) {
      const auto len = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(cfg.tokens_per_edu_min),
                                                            static_cast<std::int64_t>(cfg.tokens_per_edu_max)));
      // Pick a start whose run of `len` tokens is unused in this document.
      std::vector<int> run;
      for (int attempt = 0;; ++attempt) {
        run.clear();
        int t = static_cast<int>(uniform_int(rng, Vocabulary::kFirstContent, static_cast<std::int64_t>(cfg.vocab_size) - 1));
        bool ok = true;
        for (std::size_t i = 0; i < len; ++i, t = next[t]) {
          if (used[t]) {
            ok = false;
            break;
          }
          run.push_back(t);
        }
        if (ok) break;
        if (attempt > 10000) throw ConfigError("synth: could not place distinct EDU tokens; enlarge vocab_size");
      }
      const auto start = doc.tokens.size();
      for (int t : run) {
        used[t] = true;
        doc.tokens.push_back(t);
      }
      seg.spans.push_back({start, doc.tokens.size()});
    }
    seg.token_count = doc.tokens.size();

    std::vector<std::size_t> order(n_edu);
    for (std::size_t i = 0; i < n_edu; ++i) order[i] = i;
    shuffle(order.begin(), order.end(), rng);
    doc.is_nucleus.assign(n_edu, false);
    for (std::size_t i = 0; i < n_nuc; ++i) doc.is_nucleus[order[i]] = true;

    ParseOutput parse(std::move(seg), cfg.k_relations);
    for (std::size_t i = 0; i < n_edu; ++i) {
      const Range r = doc.is_nucleus[i] ? cfg.nucleus_prob : cfg.satellite_prob;
      const auto last = static_cast<std::int64_t>(cfg.k_relations) - 1;
      const auto row_k = static_cast<std::size_t>(uniform_int(rng, 0, last));
      for (std::size_t j = 0; j < n_edu; ++j) {
        if (i == j) continue;
        const auto k = cfg.shared_row_relation ? row_k : static_cast<std::size_t>(uniform_int(rng, 0, last));
        const bool unsure = cfg.noise_rate > 0.0 && uniform(rng) < cfg.noise_rate;
        Range draw = r;
        if (unsure)
          draw = doc.is_nucleus[i] ? cfg.ambiguous_prob : Range{1.0 - cfg.ambiguous_prob.hi, 1.0 - cfg.ambiguous_prob.lo};
        parse.at(i, j, k) = uniform(rng, draw.lo, draw.hi);
      }
    }
    for (std::size_t i = 0; i < n_edu; ++i) {
      if (!doc.is_nucleus[i]) continue;
      const auto& span = parse.segmentation.spans[i];
      for (std::size_t t = span.start; t < span.end; ++t) doc.summary.push_back(doc.tokens[t]);
      doc.summary_sentence_lengths.push_back(span.length());
    }
    doc.parse = std::move(parse);
    docs.push_back(std::move(doc));
  }
  return docs;
}

/// Corpus text record: {"doc_id", "document", "summary"}; summary sentences
/// (one per nucleus EDU) are newline-separated.
inline json corpus_record(const SynthDocument& doc, const Vocabulary& vocab) {
  std::string summary;
  std::size_t pos = 0;
  for (std::size_t s = 0; s < doc.summary_sentence_lengths.size(); ++s) {
    if (s) summary += '\n';
    std::vector<int> sent(doc.summary.begin() + static_cast<std::ptrdiff_t>(pos),
                          doc.summary.begin() + static_cast<std::ptrdiff_t>(pos + doc.summary_sentence_lengths[s]));
    summary += vocab.decode(sent);
    pos += doc.summary_sentence_lengths[s];
  }
  return json{{"doc_id", doc.parse.segmentation.doc_id}, {"document", vocab.decode(doc.tokens)}, {"summary", summary}};
}

}  // namespace rstlora
