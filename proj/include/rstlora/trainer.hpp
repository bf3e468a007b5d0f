#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "rstlora/backbone.hpp"
#include "rstlora/decode.hpp"
#include "rstlora/metrics.hpp"
#include "rstlora/optim.hpp"

namespace rstlora {

enum class Precision { f32, f64 };

inline Precision parse_precision(std::string_view s) {
  if (s == "32" || s == "f32" || s == "float32") return Precision::f32;
  if (s == "64" || s == "f64" || s == "float64") return Precision::f64;
  throw ConfigError("unknown precision '" + std::string(s) + "' (expected 32 or 64)");
}

struct TrainConfig {
  double lr = 5e-5;
  double warmup_ratio = 0.2;
  AdamConfig adam{};
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  std::size_t early_stopping_patience = 5;
  std::uint64_t seed = 42;
  Precision precision = Precision::f32;
  /// Stop after this many optimizer steps (0 = no cap).
  std::size_t max_steps = 0;
  /// Decode validation documents with the full beam instead of greedy.
  bool beam_validation = false;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw ConfigError("train: warmup_ratio must lie in [0, 1]");
    if (early_stopping_patience < 1) throw ConfigError("train: patience must be >= 1");
    if (batch_size < 1 || epochs < 1) throw ConfigError("train: epochs and batch_size must be >= 1");
  }
};

/// A document, its reference summary, and the gamma rows the model reads.
template <typename T>
struct Example {
  std::vector<int> document;
  std::vector<int> summary;
  std::string reference;  // summary text, sentences newline-separated
  GammaMatrix<T> gamma;   // empty values = no injection
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_r2_f1 = 0;
};

template <typename T>
struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  std::vector<NamedLowRank<T>> best_weights;
  std::vector<double> step_losses;  // mean token loss per optimizer step
  std::size_t steps = 0;
};

/// Epoch with the highest validation Rouge-2 F1; ties go to the earliest.
inline std::size_t select_checkpoint(const std::vector<std::pair<std::size_t, double>>& log) {
  if (log.empty()) throw DataError("select_checkpoint: empty metric log");
  auto best = log.front();
  for (const auto& entry : log)
    if (entry.second > best.second || (entry.second == best.second && entry.first < best.first)) best = entry;
  return best.first;
}

/// Decoder input and per-position targets for teacher forcing.
template <typename T>
std::pair<ModelInput<T>, std::vector<int>> teacher_forcing(bool seq2seq, const Example<T>& ex) {
  const Matrix<T>* gamma = ex.gamma.values.empty() ? nullptr : &ex.gamma.values;
  ModelInput<T> in = make_input<T>(seq2seq, ex.document, ex.summary, gamma);
  std::vector<int> targets(in.tokens.size(), -1);
  const std::size_t first = seq2seq ? 0 : in.segment_boundary;  // position of <s> or <sep>
  for (std::size_t s = 0; s <= ex.summary.size(); ++s)
    targets[first + s] = s < ex.summary.size() ? ex.summary[s] : Vocabulary::kEos;
  return {std::move(in), std::move(targets)};
}

template <typename T>
std::vector<int> decode_example(const AdaptedModel<T>& model, const Example<T>& ex, const DecodeConfig& cfg,
                                bool beam) {
  const GammaMatrix<T>* g = ex.gamma.values.empty() ? nullptr : &ex.gamma;
  return beam ? generate(model, ex.document, g, cfg) : generate_greedy(model, ex.document, g, cfg);
}

template <typename T>
EvalReport evaluate_model(const AdaptedModel<T>& model, const std::vector<Example<T>>& set, const DecodeConfig& cfg,
                          const Vocabulary& vocab, bool beam = true, std::vector<std::string>* candidates = nullptr) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& ex : set) {
    auto out = vocab.decode(decode_example(model, ex, cfg, beam));
    if (candidates) candidates->push_back(out);
    pairs.emplace_back(std::move(out), ex.reference);
  }
  return evaluate_corpus(pairs);
}

/// Fine-tunes the adapters. On return the model holds the best checkpoint.
template <typename T>
TrainResult<T> train(AdaptedModel<T>& model, const std::vector<Example<T>>& train_set,
                     const std::vector<Example<T>>& val_set, const TrainConfig& cfg, const DecodeConfig& decode,
                     const Vocabulary& vocab) {
  cfg.validate();
  decode.validate();
  if (train_set.empty() || val_set.empty()) throw DataError("train: training and validation splits must be non-empty");

  const bool seq2seq = model.is_seq2seq();
  std::vector<LowRank<T>*> params;
  for (auto* p : model.adapters()) params.push_back(&*p->lora);
  AdamW<T> opt(cfg.adam);
  auto order_rng = make_rng(cfg.seed, "train.order");
  auto dropout_rng = make_rng(cfg.seed, "train.dropout");

  const std::size_t batches = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total_steps = batches * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  TrainResult<T> result;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  auto grads = model.zero_grads();
  double best_val = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs && result.steps < total_steps; ++epoch) {
    shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0;
    std::size_t epoch_tokens = 0;
    for (std::size_t b = 0; b < batches && result.steps < total_steps; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(lo + cfg.batch_size, order.size());
      std::vector<std::pair<ModelInput<T>, std::vector<int>>> batch;
      std::size_t tokens = 0;
      for (std::size_t i = lo; i < hi; ++i) {
        batch.push_back(teacher_forcing(seq2seq, train_set[order[i]]));
        tokens += train_set[order[i]].summary.size() + 1;
      }
      for (auto& g : grads) g.zero();
      const T weight = T{1} / static_cast<T>(tokens);
      double loss = 0;
      for (const auto& [in, targets] : batch)
        loss += static_cast<double>(model.loss_and_grad(in, targets, weight, grads, &dropout_rng));
      if (!std::isfinite(loss)) throw DivergenceError("non-finite loss at step " + std::to_string(result.steps));
      opt.step(params, grads, scheduled_lr(result.steps, total_steps, cfg.lr, cfg.warmup_ratio));
      ++result.steps;
      result.step_losses.push_back(loss / static_cast<double>(tokens));
      epoch_loss += loss;
      epoch_tokens += tokens;
    }
    EpochLog entry{epoch, epoch_tokens ? epoch_loss / static_cast<double>(epoch_tokens) : 0.0, 0.0};
    entry.val_r2_f1 = evaluate_model(model, val_set, decode, vocab, cfg.beam_validation).rouge2;
    result.log.push_back(entry);
    if (entry.val_r2_f1 > best_val) {
      best_val = entry.val_r2_f1;
      result.best_epoch = epoch;
      result.best_weights = model.snapshot();
      since_best = 0;
    } else if (++since_best >= cfg.early_stopping_patience) {
      break;
    }
  }
  model.restore(result.best_weights);
  return result;
}

}  // namespace rstlora
