#pragma once

// ROUGE-N, ROUGE-L and summary-level ROUGE-Lsum over whitespace tokens.
// Preprocessing: lowercase + whitespace split, no stemming. Sentences for
// ROUGE-Lsum are newline-separated.

#include <algorithm>
#include <cctype>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rstlora/errors.hpp"

namespace rstlora {

using Tokens = std::vector<std::string>;

struct RougeScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  // Integer evidence behind the ratios: matches / candidate units / reference units.
  std::size_t matches = 0;
  std::size_t candidate_units = 0;
  std::size_t reference_units = 0;
};

inline RougeScore make_score(std::size_t matches, std::size_t cand, std::size_t ref) {
  RougeScore s;
  s.matches = matches;
  s.candidate_units = cand;
  s.reference_units = ref;
  s.precision = cand ? static_cast<double>(matches) / static_cast<double>(cand) : 0.0;
  s.recall = ref ? static_cast<double>(matches) / static_cast<double>(ref) : 0.0;
  s.f1 = (s.precision + s.recall) > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline Tokens tokenize(const std::string& text) {
  std::string lower = text;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  std::istringstream in(lower);
  Tokens out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

inline std::vector<Tokens> split_sentences(const std::string& text) {
  std::vector<Tokens> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto toks = tokenize(line);
    if (!toks.empty()) out.push_back(std::move(toks));
  }
  return out;
}

inline std::map<Tokens, std::size_t> ngram_counts(const Tokens& toks, std::size_t n) {
  std::map<Tokens, std::size_t> counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[Tokens(toks.begin() + i, toks.begin() + i + n)];
  return counts;
}

/// Clipped n-gram overlap.
inline RougeScore rouge_n(const Tokens& candidate, const Tokens& reference, std::size_t n) {
  if (n == 0) throw ConfigError("rouge_n: n must be >= 1");
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  std::size_t overlap = 0;
  for (const auto& [gram, c] : cand)
    if (auto it = ref.find(gram); it != ref.end()) overlap += std::min(c, it->second);
  const auto total = [n](const Tokens& t) { return t.size() >= n ? t.size() - n + 1 : 0; };
  return make_score(overlap, total(candidate), total(reference));
}

/// Dynamic-programming LCS table, (|a|+1) x (|b|+1).
inline std::vector<std::vector<std::size_t>> lcs_table(const Tokens& a, const Tokens& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
  return t;
}

inline RougeScore rouge_l(const Tokens& candidate, const Tokens& reference) {
  const auto t = lcs_table(candidate, reference);
  return make_score(t[candidate.size()][reference.size()], candidate.size(), reference.size());
}

/// Positions of `ref` that take part in one LCS with `cand`.
inline std::vector<std::size_t> lcs_reference_positions(const Tokens& ref, const Tokens& cand) {
  const auto t = lcs_table(ref, cand);
  std::vector<std::size_t> pos;
  std::size_t i = ref.size(), j = cand.size();
  while (i > 0 && j > 0) {
    if (ref[i - 1] == cand[j - 1]) {
      pos.push_back(i - 1);
      --i;
      --j;
    } else if (t[i - 1][j] >= t[i][j - 1]) {
      --i;
    } else {
      --j;
    }
  }
  std::reverse(pos.begin(), pos.end());
  return pos;
}

/// Summary-level LCS: for each reference sentence, the union of its LCS
/// tokens against every candidate sentence, with hits clipped by the token
/// counts remaining on both sides.
inline RougeScore rouge_lsum(const std::vector<Tokens>& candidate, const std::vector<Tokens>& reference) {
  std::map<std::string, std::size_t> cand_left, ref_left;
  std::size_t cand_total = 0, ref_total = 0;
  for (const auto& s : candidate)
    for (const auto& w : s) {
      ++cand_left[w];
      ++cand_total;
    }
  for (const auto& s : reference)
    for (const auto& w : s) {
      ++ref_left[w];
      ++ref_total;
    }
  std::size_t hits = 0;
  for (const auto& ref_sent : reference) {
    std::vector<bool> in_union(ref_sent.size(), false);
    for (const auto& cand_sent : candidate)
      for (std::size_t p : lcs_reference_positions(ref_sent, cand_sent)) in_union[p] = true;
    for (std::size_t p = 0; p < ref_sent.size(); ++p) {
      if (!in_union[p]) continue;
      const auto& w = ref_sent[p];
      if (cand_left[w] > 0 && ref_left[w] > 0) {
        ++hits;
        --cand_left[w];
        --ref_left[w];
      }
    }
  }
  return make_score(hits, cand_total, ref_total);
}

struct DocumentScores {
  RougeScore rouge1, rouge2, rougeL, rougeLsum;
};

inline DocumentScores score_document(const std::string& candidate, const std::string& reference) {
  const auto c = tokenize(candidate), r = tokenize(reference);
  return {rouge_n(c, r, 1), rouge_n(c, r, 2), rouge_l(c, r), rouge_lsum(split_sentences(candidate), split_sentences(reference))};
}

struct EvalReport {
  static constexpr int kSchemaVersion = 1;
  std::vector<DocumentScores> documents;
  double rouge1 = 0, rouge2 = 0, rougeL = 0, rougeLsum = 0;  // corpus-mean F1
  std::size_t doc_count() const { return documents.size(); }
};

inline EvalReport evaluate_corpus(const std::vector<std::pair<std::string, std::string>>& pairs) {
  if (pairs.empty()) throw DataError("evaluate_corpus: no candidate/reference pairs");
  EvalReport report;
  for (const auto& [cand, ref] : pairs) report.documents.push_back(score_document(cand, ref));
  const auto mean = [&](auto field) {
    double s = 0;
    for (const auto& d : report.documents) s += field(d);
    return s / static_cast<double>(report.documents.size());
  };
  report.rouge1 = mean([](const DocumentScores& d) { return d.rouge1.f1; });
  report.rouge2 = mean([](const DocumentScores& d) { return d.rouge2.f1; });
  report.rougeL = mean([](const DocumentScores& d) { return d.rougeL.f1; });
  report.rougeLsum = mean([](const DocumentScores& d) { return d.rougeLsum.f1; });
  return report;
}

inline nlohmann::json to_json(const RougeScore& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json docs = nlohmann::json::array();
  for (const auto& d : r.documents)
    docs.push_back({{"rouge1", to_json(d.rouge1)},
                    {"rouge2", to_json(d.rouge2)},
                    {"rougeL", to_json(d.rougeL)},
                    {"rougeLsum", to_json(d.rougeLsum)}});
  return {{"schema_version", EvalReport::kSchemaVersion},
          {"doc_count", r.doc_count()},
          {"mean_f1", {{"rouge1", r.rouge1}, {"rouge2", r.rouge2}, {"rougeL", r.rougeL}, {"rougeLsum", r.rougeLsum}}},
          {"documents", docs}};
}

}  // namespace rstlora
