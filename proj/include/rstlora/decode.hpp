#pragma once

// Beam search with length normalization and n-gram blocking.
//   score(hypothesis) = sum log p / length^length_penalty
// where length counts generated tokens including the end-of-sequence token.
// N-gram blocking only looks at generated tokens, never at the prompt.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "rstlora/backbone.hpp"
#include "rstlora/gamma.hpp"
#include "rstlora/parser_io.hpp"

namespace rstlora {

struct DecodeConfig {
  std::size_t beam_size = 4;
  double length_penalty = 3.0;
  std::size_t no_repeat_ngram = 3;
  std::size_t max_length = 16;

  void validate() const {
    if (beam_size < 1) throw ConfigError("decode: beam_size must be >= 1");
    if (max_length < 1) throw ConfigError("decode: max_length must be >= 1");
  }
};

inline double length_normalized_score(double logprob, std::size_t length, double penalty) {
  return logprob / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), penalty);
}

/// Tokens that would complete an n-gram already present in `seq`.
inline std::vector<int> banned_tokens(const std::vector<int>& seq, std::size_t n) {
  std::vector<int> banned;
  if (n == 0 || seq.size() + 1 < n) return banned;
  if (n == 1) return seq;
  const std::size_t prefix_start = seq.size() - (n - 1);
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    if (std::equal(seq.begin() + i, seq.begin() + i + n - 1, seq.begin() + prefix_start))
      banned.push_back(seq[i + n - 1]);
  }
  return banned;
}

/// Log-probabilities of the next token given the generated prefix.
using NextTokenFn = std::function<std::vector<double>(const std::vector<int>&)>;

inline std::vector<double> log_softmax(std::vector<double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double v : logits) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  for (double& v : logits) v -= lz;
  return logits;
}

inline std::vector<int> greedy_search(const NextTokenFn& next, const DecodeConfig& cfg, int eos) {
  cfg.validate();
  std::vector<int> out;
  while (out.size() < cfg.max_length) {
    auto lp = next(out);
    for (int b : banned_tokens(out, cfg.no_repeat_ngram)) lp[static_cast<std::size_t>(b)] = -std::numeric_limits<double>::infinity();
    const auto best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    if (best == eos) break;
    out.push_back(best);
  }
  return out;
}

inline std::vector<int> beam_search(const NextTokenFn& next, const DecodeConfig& cfg, int eos) {
  cfg.validate();
  struct Hyp {
    std::vector<int> tokens;
    double logprob = 0;
  };
  struct Done {
    std::vector<int> tokens;  // without eos
    double score;
  };
  std::vector<Hyp> live{Hyp{}};
  std::vector<Done> finished;
  for (std::size_t step = 0; step < cfg.max_length && !live.empty(); ++step) {
    std::vector<Hyp> cands;
    for (const auto& h : live) {
      auto lp = next(h.tokens);
      auto banned = banned_tokens(h.tokens, cfg.no_repeat_ngram);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (!std::isfinite(lp[v])) continue;
        if (std::find(banned.begin(), banned.end(), static_cast<int>(v)) != banned.end()) continue;
        Hyp c{h.tokens, h.logprob + lp[v]};
        c.tokens.push_back(static_cast<int>(v));
        cands.push_back(std::move(c));
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Hyp& a, const Hyp& b) { return a.logprob > b.logprob; });
    std::vector<Hyp> next_live;
    for (std::size_t rank = 0; rank < cands.size() && next_live.size() < cfg.beam_size; ++rank) {
      auto& c = cands[rank];
      if (c.tokens.back() == eos) {
        if (rank < cfg.beam_size) {
          const std::size_t len = c.tokens.size();
          c.tokens.pop_back();
          finished.push_back({std::move(c.tokens), length_normalized_score(c.logprob, len, cfg.length_penalty)});
        }
        continue;
      }
      next_live.push_back(std::move(c));
    }
    live = std::move(next_live);
    if (finished.size() >= cfg.beam_size) break;
  }
  for (auto& h : live) {
    const std::size_t len = h.tokens.size();
    finished.push_back({std::move(h.tokens), length_normalized_score(h.logprob, len, cfg.length_penalty)});
  }
  if (finished.empty()) return {};
  const auto best = std::max_element(finished.begin(), finished.end(),
                                     [](const Done& a, const Done& b) { return a.score < b.score; });
  return best->tokens;
}

// ---------------------------------------------------------------------------
// Model binding

/// Builds the decoder input for a document and generated prefix.
template <typename T>
ModelInput<T> make_input(bool seq2seq, const std::vector<int>& document, const std::vector<int>& prefix,
                         const Matrix<T>* gamma) {
  ModelInput<T> in;
  in.gamma = gamma;
  if (seq2seq) {
    in.source = document;
    in.tokens.push_back(Vocabulary::kBos);
    in.tokens.insert(in.tokens.end(), prefix.begin(), prefix.end());
    in.segment_boundary = 0;
  } else {
    in.tokens.push_back(Vocabulary::kBos);
    in.tokens.insert(in.tokens.end(), document.begin(), document.end());
    in.segment_boundary = in.tokens.size();
    in.tokens.push_back(Vocabulary::kSep);
    in.tokens.insert(in.tokens.end(), prefix.begin(), prefix.end());
  }
  return in;
}

/// Document position offset inside the model input.
inline std::size_t document_offset(bool seq2seq) { return seq2seq ? 0 : 1; }

template <typename T>
void check_generation_fits(const AdaptedModel<T>& model, std::size_t doc_len, const DecodeConfig& cfg) {
  const std::size_t needed = model.is_seq2seq() ? std::max(doc_len, cfg.max_length + 1) : doc_len + cfg.max_length + 2;
  if (model.is_seq2seq() ? needed > model.max_seq_len() : doc_len + cfg.max_length + 2 > model.max_seq_len())
    throw ShapeError("generate: document length " + std::to_string(doc_len) + " + max_length " +
                     std::to_string(cfg.max_length) + " exceeds max_seq_len " + std::to_string(model.max_seq_len()));
}

template <typename T>
NextTokenFn model_next_token(const AdaptedModel<T>& model, const std::vector<int>& document, const Matrix<T>* gamma) {
  return [&model, &document, gamma](const std::vector<int>& prefix) {
    const auto in = make_input<T>(model.is_seq2seq(), document, prefix, gamma);
    const auto lg = model.last_logits(in);
    auto lp = log_softmax(std::vector<double>(lg.begin(), lg.end()));
    // Scaffolding tokens are never generated.
    for (int t : {Vocabulary::kPad, Vocabulary::kBos, Vocabulary::kSep})
      if (static_cast<std::size_t>(t) < lp.size()) lp[static_cast<std::size_t>(t)] = -std::numeric_limits<double>::infinity();
    return lp;
  };
}

template <typename T>
std::vector<int> generate(const AdaptedModel<T>& model, const std::vector<int>& document, const GammaMatrix<T>* gamma,
                          const DecodeConfig& cfg) {
  check_generation_fits(model, document.size(), cfg);
  return beam_search(model_next_token(model, document, gamma ? &gamma->values : nullptr), cfg, Vocabulary::kEos);
}

template <typename T>
std::vector<int> generate_greedy(const AdaptedModel<T>& model, const std::vector<int>& document,
                                 const GammaMatrix<T>* gamma, const DecodeConfig& cfg) {
  check_generation_fits(model, document.size(), cfg);
  return greedy_search(model_next_token(model, document, gamma ? &gamma->values : nullptr), cfg, Vocabulary::kEos);
}

}  // namespace rstlora
