#pragma once

// Experiment runner: corpus -> gamma per condition -> adapter training ->
// beam-decoded test evaluation, one sub-run directory per
// (rank, condition, seed) plus a consolidated comparison table.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <array>
#include <filesystem>
#include <functional>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "rstlora/ablation.hpp"
#include "rstlora/config.hpp"
#include "rstlora/rst_distribution.hpp"
#include "rstlora/trainer.hpp"

namespace rstlora {

inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Conditions

struct Condition {
  enum class Kind { vanilla, variant, pattern, mask_parse, mask_gamma };
  Kind kind = Kind::variant;
  Variant variant = Variant::p_w;
  PatternKind pattern = PatternKind::random;
  double fraction = 0.0;
  std::string label;

  bool uses_gamma() const { return kind != Kind::vanilla; }
};

/// vanilla | b_wo | b_w | p_wo | p_w | even | odd | random |
/// mask:F[:variant] | mask_gamma:F[:variant]
inline Condition parse_condition(const std::string& text) {
  Condition c;
  c.label = text;
  if (text == "vanilla") {
    c.kind = Condition::Kind::vanilla;
    return c;
  }
  if (text == "even" || text == "odd" || text == "random") {
    c.kind = Condition::Kind::pattern;
    c.pattern = parse_pattern_kind(text);
    return c;
  }
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    c.variant = parse_variant(text);
    return c;
  }
  const std::string head = text.substr(0, colon);
  if (head != "mask" && head != "mask_gamma") throw ConfigError("unknown condition '" + text + "'");
  c.kind = head == "mask" ? Condition::Kind::mask_parse : Condition::Kind::mask_gamma;
  std::string rest = text.substr(colon + 1);
  const auto second = rest.find(':');
  if (second != std::string::npos) {
    c.variant = parse_variant(rest.substr(second + 1));
    rest = rest.substr(0, second);
  }
  try {
    std::size_t used = 0;
    c.fraction = std::stod(rest, &used);
    if (used != rest.size()) throw std::invalid_argument(rest);
  } catch (const std::exception&) {
    throw ConfigError("condition '" + text + "': bad mask fraction");
  }
  MaskSpec{c.fraction, 0}.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Configuration

struct CorpusConfig {
  SynthConfig synth;
  std::size_t n_train = 200;
  std::size_t n_val = 50;
  std::size_t n_test = 50;
  // Optional external inputs (JSONL); when set, synthesis is skipped.
  std::string parse_file;
  std::string text_file;
};

struct ExperimentConfig {
  std::string name = "experiment";
  CorpusConfig corpus;
  BackboneConfig backbone;
  LoRAConfig lora;
  InjectionOptions injection;
  ChannelLayout layout = ChannelLayout::kTile;
  MergeOptions merge;
  TrainConfig train;
  DecodeConfig decode;
  std::vector<std::string> conditions{"p_w"};
  std::vector<std::uint64_t> seeds{42};
  std::vector<std::size_t> ranks;  // empty: lora.rank only

  std::vector<std::size_t> rank_list() const { return ranks.empty() ? std::vector<std::size_t>{lora.rank} : ranks; }

  void validate() const {
    corpus.synth.validate();
    backbone.validate();
    lora.validate();
    train.validate();
    decode.validate();
    if (conditions.empty()) throw ConfigError("experiment: no conditions");
    if (seeds.empty()) throw ConfigError("experiment: no seeds");
    for (const auto& c : conditions) parse_condition(c);
    if (corpus.n_train == 0 || corpus.n_val == 0 || corpus.n_test == 0)
      throw ConfigError("corpus: train, val and test sizes must be positive");
    if (corpus.parse_file.empty() != corpus.text_file.empty())
      throw ConfigError("corpus: parse_file and text_file must be given together");
    if (!(merge.threshold > 0.0 && merge.threshold <= 1.0)) throw ConfigError("merge: threshold must lie in (0, 1]");
  }
};

namespace detail {

inline Range read_range(const Settings& s, const std::string& key, Range fallback) {
  const auto v = s.get_doubles(key, {fallback.lo, fallback.hi});
  if (v.size() != 2) throw ConfigError(key + ": expected [lo, hi]");
  return {v[0], v[1]};
}

inline std::string fmt_range(Range r) {
  std::ostringstream o;
  o << '[' << r.lo << ", " << r.hi << ']';
  return o.str();
}

template <typename V>
std::string fmt_list(const std::vector<V>& v, bool quote) {
  std::ostringstream o;
  o << '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) o << ", ";
    if (quote) o << '"';
    o << v[i];
    if (quote) o << '"';
  }
  o << ']';
  return o.str();
}

}  // namespace detail

/// Reads every section; unknown keys are rejected.
inline ExperimentConfig experiment_config(const Settings& s) {
  ExperimentConfig c;
  c.name = s.get_string("experiment.name", c.name);
  c.conditions = s.get_list("experiment.conditions", c.conditions);
  c.seeds.clear();
  for (auto v : s.get_sizes("experiment.seeds", {42})) c.seeds.push_back(v);
  c.ranks = s.get_sizes("experiment.ranks", {});

  auto& y = c.corpus.synth;
  c.corpus.n_train = s.get_size("corpus.n_train", c.corpus.n_train);
  c.corpus.n_val = s.get_size("corpus.n_val", c.corpus.n_val);
  c.corpus.n_test = s.get_size("corpus.n_test", c.corpus.n_test);
  c.corpus.parse_file = s.get_string("corpus.parse_file", "");
  c.corpus.text_file = s.get_string("corpus.text_file", "");
  y.n_docs = c.corpus.n_train + c.corpus.n_val + c.corpus.n_test;
  y.n_edu_min = s.get_size("corpus.n_edu_min", y.n_edu_min);
  y.n_edu_max = s.get_size("corpus.n_edu_max", y.n_edu_max);
  y.tokens_per_edu_min = s.get_size("corpus.tokens_per_edu_min", y.tokens_per_edu_min);
  y.tokens_per_edu_max = s.get_size("corpus.tokens_per_edu_max", y.tokens_per_edu_max);
  y.nucleus_ratio = s.get_double("corpus.nucleus_ratio", y.nucleus_ratio);
  y.nucleus_prob = detail::read_range(s, "corpus.nucleus_prob", y.nucleus_prob);
  y.satellite_prob = detail::read_range(s, "corpus.satellite_prob", y.satellite_prob);
  y.ambiguous_prob = detail::read_range(s, "corpus.ambiguous_prob", y.ambiguous_prob);
  y.noise_rate = s.get_double("corpus.noise_rate", y.noise_rate);
  y.shared_row_relation = s.get_bool("corpus.shared_row_relation", y.shared_row_relation);
  y.vocab_size = s.get_size("corpus.vocab_size", y.vocab_size);
  y.seed = s.get_u64("corpus.seed", y.seed);

  auto& b = c.backbone;
  b.architecture = parse_architecture(s.get_string("backbone.architecture", to_string(b.architecture)));
  b.layers = s.get_size("backbone.layers", b.layers);
  b.heads = s.get_size("backbone.heads", b.heads);
  b.d_model = s.get_size("backbone.d_model", b.d_model);
  b.d_ff = s.get_size("backbone.d_ff", b.d_ff);
  b.max_seq_len = s.get_size("backbone.max_seq_len", b.max_seq_len);
  b.init_std = s.get_double("backbone.init_std", b.init_std);
  b.logit_scale = s.get_double("backbone.logit_scale", b.logit_scale);
  b.seed = s.get_u64("backbone.seed", b.seed);
  b.vocab_size = y.vocab_size;

  auto& l = c.lora;
  l.rank = s.get_size("lora.rank", l.rank);
  l.alpha = s.get_double("lora.alpha", l.alpha);
  l.dropout = s.get_double("lora.dropout", l.dropout);
  l.target_layers = s.get_list("lora.target_layers", l.target_layers);
  c.injection.first_layer_only = s.get_bool("lora.first_layer_only", c.injection.first_layer_only);
  c.injection.gamma_sites = s.get_list("lora.gamma_sites", c.injection.gamma_sites);
  const auto layout = s.get_string("lora.channel_layout", "tile");
  if (layout != "tile" && layout != "band") throw ConfigError("lora.channel_layout: expected tile or band");
  c.layout = layout == "tile" ? ChannelLayout::kTile : ChannelLayout::kBand;

  c.merge.include_diagonal = s.get_bool("merge.include_diagonal", c.merge.include_diagonal);
  c.merge.binarize_after_merge = s.get_bool("merge.binarize_after_merge", c.merge.binarize_after_merge);
  c.merge.threshold = s.get_double("merge.threshold", c.merge.threshold);

  auto& t = c.train;
  t.lr = s.get_double("train.lr", t.lr);
  t.warmup_ratio = s.get_double("train.warmup_ratio", t.warmup_ratio);
  t.adam.beta1 = s.get_double("train.beta1", t.adam.beta1);
  t.adam.beta2 = s.get_double("train.beta2", t.adam.beta2);
  t.adam.epsilon = s.get_double("train.epsilon", t.adam.epsilon);
  t.adam.weight_decay = s.get_double("train.weight_decay", t.adam.weight_decay);
  t.epochs = s.get_size("train.epochs", t.epochs);
  t.batch_size = s.get_size("train.batch_size", t.batch_size);
  t.early_stopping_patience = s.get_size("train.patience", t.early_stopping_patience);
  t.max_steps = s.get_size("train.max_steps", t.max_steps);
  t.beam_validation = s.get_bool("train.beam_validation", t.beam_validation);
  t.precision = parse_precision(s.get_string("train.precision", "32"));

  auto& d = c.decode;
  d.beam_size = s.get_size("decode.beam_size", d.beam_size);
  d.length_penalty = s.get_double("decode.length_penalty", d.length_penalty);
  d.no_repeat_ngram = s.get_size("decode.no_repeat_ngram", d.no_repeat_ngram);
  d.max_length = s.get_size("decode.max_length", d.max_length);

  s.reject_unknown();
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  Settings s = path.empty() ? Settings() : Settings::load(path);
  for (const auto& o : overrides) s.apply_override(o);
  return experiment_config(s);
}

/// Resolved configuration in the same format it is read from; reading the
/// snapshot back yields an identical configuration.
inline std::string to_ini(const ExperimentConfig& c) {
  std::ostringstream o;
  o.precision(17);
  const auto& y = c.corpus.synth;
  const auto& b = c.backbone;
  const auto& l = c.lora;
  const auto& t = c.train;
  const auto& d = c.decode;
  const auto yes = [](bool v) { return v ? "true" : "false"; };
  o << "[experiment]\n"
    << "name = \"" << c.name << "\"\n"
    << "conditions = " << detail::fmt_list(c.conditions, true) << "\n"
    << "seeds = " << detail::fmt_list(c.seeds, false) << "\n";
  if (!c.ranks.empty()) o << "ranks = " << detail::fmt_list(c.ranks, false) << "\n";
  o << "\n[corpus]\n"
    << "n_train = " << c.corpus.n_train << "\nn_val = " << c.corpus.n_val << "\nn_test = " << c.corpus.n_test << "\n";
  if (!c.corpus.parse_file.empty())
    o << "parse_file = \"" << c.corpus.parse_file << "\"\ntext_file = \"" << c.corpus.text_file << "\"\n";
  o << "n_edu_min = " << y.n_edu_min << "\nn_edu_max = " << y.n_edu_max << "\n"
    << "tokens_per_edu_min = " << y.tokens_per_edu_min << "\ntokens_per_edu_max = " << y.tokens_per_edu_max << "\n"
    << "nucleus_ratio = " << y.nucleus_ratio << "\n"
    << "nucleus_prob = " << detail::fmt_range(y.nucleus_prob) << "\n"
    << "satellite_prob = " << detail::fmt_range(y.satellite_prob) << "\n"
    << "ambiguous_prob = " << detail::fmt_range(y.ambiguous_prob) << "\n"
    << "noise_rate = " << y.noise_rate << "\n"
    << "shared_row_relation = " << yes(y.shared_row_relation) << "\n"
    << "vocab_size = " << y.vocab_size << "\nseed = " << y.seed << "\n";
  o << "\n[backbone]\n"
    << "architecture = \"" << to_string(b.architecture) << "\"\n"
    << "layers = " << b.layers << "\nheads = " << b.heads << "\nd_model = " << b.d_model << "\nd_ff = " << b.d_ff
    << "\nmax_seq_len = " << b.max_seq_len << "\ninit_std = " << b.init_std << "\nlogit_scale = " << b.logit_scale
    << "\nseed = " << b.seed << "\n";
  o << "\n[lora]\n"
    << "rank = " << l.rank << "\nalpha = " << l.alpha << "\ndropout = " << l.dropout << "\n"
    << "target_layers = " << detail::fmt_list(l.target_layers, true) << "\n"
    << "first_layer_only = " << yes(c.injection.first_layer_only) << "\n"
    << "gamma_sites = " << detail::fmt_list(c.injection.gamma_sites, true) << "\n"
    << "channel_layout = \"" << (c.layout == ChannelLayout::kTile ? "tile" : "band") << "\"\n";
  o << "\n[merge]\n"
    << "include_diagonal = " << yes(c.merge.include_diagonal) << "\n"
    << "binarize_after_merge = " << yes(c.merge.binarize_after_merge) << "\n"
    << "threshold = " << c.merge.threshold << "\n";
  o << "\n[train]\n"
    << "lr = " << t.lr << "\nwarmup_ratio = " << t.warmup_ratio << "\nbeta1 = " << t.adam.beta1
    << "\nbeta2 = " << t.adam.beta2 << "\nepsilon = " << t.adam.epsilon << "\nweight_decay = " << t.adam.weight_decay
    << "\nepochs = " << t.epochs << "\nbatch_size = " << t.batch_size << "\npatience = " << t.early_stopping_patience
    << "\nmax_steps = " << t.max_steps << "\nbeam_validation = " << yes(t.beam_validation)
    << "\nprecision = \"" << (t.precision == Precision::f32 ? "32" : "64") << "\"\n";
  o << "\n[decode]\n"
    << "beam_size = " << d.beam_size << "\nlength_penalty = " << d.length_penalty
    << "\nno_repeat_ngram = " << d.no_repeat_ngram << "\nmax_length = " << d.max_length << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Corpus

struct CorpusDoc {
  ParseOutput parse;
  std::vector<int> tokens;
  std::vector<int> summary;
  std::string reference;  // newline per summary sentence
};

struct Corpus {
  std::vector<CorpusDoc> train, val, test;
  std::size_t vocab_size = 0;
};

namespace detail {

inline std::vector<CorpusDoc> read_text_records(const std::vector<ParseOutput>& parses, const std::string& path,
                                                const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open corpus text file '" + path + "'");
  std::map<std::string, std::pair<std::string, std::string>> texts;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      texts[j.at("doc_id").get<std::string>()] = {j.at("document").get<std::string>(), j.at("summary").get<std::string>()};
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(n, std::string("bad corpus record: ") + e.what());
    }
  }
  std::vector<CorpusDoc> out;
  for (const auto& p : parses) {
    auto it = texts.find(p.segmentation.doc_id);
    if (it == texts.end()) throw DataError("no text record for doc_id '" + p.segmentation.doc_id + "'");
    CorpusDoc d{p, vocab.encode(it->second.first), {}, it->second.second};
    d.summary = vocab.encode(d.reference);
    if (d.tokens.size() != p.segmentation.token_count)
      throw DataError("doc '" + p.segmentation.doc_id + "': token count disagrees with its segmentation");
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace detail

inline Corpus build_corpus(const CorpusConfig& cfg) {
  Corpus c;
  c.vocab_size = cfg.synth.vocab_size;
  Vocabulary vocab{cfg.synth.vocab_size};
  std::vector<CorpusDoc> docs;
  if (!cfg.parse_file.empty()) {
    docs = detail::read_text_records(load_parses(cfg.parse_file), cfg.text_file, vocab);
  } else {
    SynthConfig s = cfg.synth;
    s.n_docs = cfg.n_train + cfg.n_val + cfg.n_test;
    for (auto& d : synth_parse(s)) {
      std::string ref = corpus_record(d, vocab)["summary"];
      docs.push_back({std::move(d.parse), std::move(d.tokens), std::move(d.summary), std::move(ref)});
    }
  }
  if (docs.size() < cfg.n_train + cfg.n_val + cfg.n_test)
    throw DataError("corpus has " + std::to_string(docs.size()) + " documents; splits need " +
                    std::to_string(cfg.n_train + cfg.n_val + cfg.n_test));
  auto at = [&](std::size_t lo, std::size_t n) {
    return std::vector<CorpusDoc>(docs.begin() + static_cast<std::ptrdiff_t>(lo),
                                  docs.begin() + static_cast<std::ptrdiff_t>(lo + n));
  };
  c.train = at(0, cfg.n_train);
  c.val = at(cfg.n_train, cfg.n_val);
  c.test = at(cfg.n_train + cfg.n_val, cfg.n_test);
  return c;
}

// ---------------------------------------------------------------------------
// Gamma per condition

/// Gamma rows for one document. Seeded transforms use a per-document stream
/// derived from the run seed, so every condition of a seed sees the same
/// draws for the same document.
template <typename T>
GammaMatrix<T> condition_gamma(const Condition& cond, const CorpusDoc& doc, std::size_t doc_index, std::uint64_t seed,
                               const ExperimentConfig& cfg) {
  const bool seq2seq = cfg.backbone.architecture == Architecture::seq2seq;
  const std::size_t offset = document_offset(seq2seq);
  const std::size_t rows = cfg.backbone.max_seq_len, d = cfg.backbone.d_model;
  const std::uint64_t doc_seed = mix_seed(seed, doc_index);
  switch (cond.kind) {
    case Condition::Kind::vanilla:
      return {};
    case Condition::Kind::pattern: {
      const auto pat = gamma_pattern<T>(cond.pattern, doc.tokens.size(), d, doc_seed);
      return place_gamma(pat.values, rows, offset);
    }
    case Condition::Kind::mask_parse: {
      const auto masked = mask_parse(doc.parse, {cond.fraction, doc_seed});
      return project_gamma<T>(make_variant(masked, cond.variant, cfg.merge), masked.segmentation, rows, d, offset,
                              cfg.layout);
    }
    case Condition::Kind::mask_gamma: {
      const auto g = project_gamma<T>(make_variant(doc.parse, cond.variant, cfg.merge), doc.parse.segmentation, rows,
                                      d, offset, cfg.layout);
      return mask_gamma(g, {cond.fraction, doc_seed});
    }
    case Condition::Kind::variant:
      break;
  }
  return project_gamma<T>(make_variant(doc.parse, cond.variant, cfg.merge), doc.parse.segmentation, rows, d, offset,
                          cfg.layout);
}

template <typename T>
std::vector<Example<T>> make_examples(const std::vector<CorpusDoc>& docs, std::size_t first_index,
                                      const Condition& cond, std::uint64_t seed, const ExperimentConfig& cfg) {
  std::vector<Example<T>> out;
  out.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto& d = docs[i];
    out.push_back({d.tokens, d.summary, d.reference, condition_gamma<T>(cond, d, first_index + i, seed, cfg)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files and manifests

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw DataError("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << bytes;
  if (!out) throw DataError("write failed for '" + p.string() + "'");
}

/// Fixed-precision decimal, so tables are byte-stable.
inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// manifest.json listing every other file in `dir` with its SHA-256.
inline void write_manifest(const std::filesystem::path& dir, const std::string& command, const nlohmann::json& config,
                           const nlohmann::json& seed, const nlohmann::json& inputs) {
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  nlohmann::json outputs = nlohmann::json::object();
  for (const auto& n : names) outputs[n] = sha256_hex(read_file(dir / n));
  nlohmann::json m{{"command", command},   {"config", config},   {"seed", seed},
                   {"inputs", inputs},     {"outputs", outputs}, {"tool_version", kToolVersion}};
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

/// Files whose hashes disagree with the manifest, plus files it omits.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  const auto m = nlohmann::json::parse(read_file(dir / "manifest.json"));
  std::vector<std::string> bad;
  for (const auto& [name, hash] : m.at("outputs").items())
    if (!std::filesystem::exists(dir / name) || sha256_hex(read_file(dir / name)) != hash.get<std::string>())
      bad.push_back(name);
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto n = e.path().filename().string();
    if (e.is_regular_file() && n != "manifest.json" && !m.at("outputs").contains(n)) bad.push_back(n);
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Sub-runs

struct SubRunResult {
  std::string condition;
  std::size_t rank = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  int exit_code = 0;
  EvalReport test;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::string dir;

  static SubRunResult start(std::string condition, std::size_t rank, std::uint64_t seed, std::string dir) {
    SubRunResult r;
    r.condition = std::move(condition);
    r.rank = rank;
    r.seed = seed;
    r.dir = std::move(dir);
    return r;
  }
};

inline std::string subrun_name(const std::string& condition, std::size_t rank, std::uint64_t seed, bool with_rank) {
  std::string c = condition;
  std::replace(c.begin(), c.end(), ':', '-');
  return (with_rank ? "r" + std::to_string(rank) + "_" : std::string()) + c + "_seed" + std::to_string(seed);
}

template <typename T>
SubRunResult train_condition(const ExperimentConfig& cfg, const Corpus& corpus, const std::string& condition,
                             std::size_t rank, std::uint64_t seed, const std::filesystem::path& dir) {
  auto r = SubRunResult::start(condition, rank, seed, dir.string());
  const Condition cond = parse_condition(condition);

  ExperimentConfig run = cfg;
  run.lora.rank = rank;
  // The frozen backbone is shared by every run (it plays the pretrained
  // model); the run seed drives adapter init, batch order and dropout.
  run.train.seed = seed;

  const auto train_set = make_examples<T>(corpus.train, 0, cond, seed, run);
  const auto val_set = make_examples<T>(corpus.val, corpus.train.size(), cond, seed, run);
  const auto test_set = make_examples<T>(corpus.test, corpus.train.size() + corpus.val.size(), cond, seed, run);

  auto model = attach_lora(build_backbone<T>(run.backbone), run.lora, cond.uses_gamma(), run.injection, seed);
  const auto frozen_before = model.backbone().frozen_checksum();
  Vocabulary vocab{corpus.vocab_size};
  auto result = train(model, train_set, val_set, run.train, run.decode, vocab);
  if (model.backbone().frozen_checksum() != frozen_before) throw DataError("frozen backbone changed during training");

  std::vector<std::string> candidates;
  r.test = evaluate_model(model, test_set, run.decode, vocab, true, &candidates);
  r.best_epoch = result.best_epoch;
  r.epochs_run = result.log.size();
  r.ok = true;

  std::filesystem::create_directories(dir);
  write_file(dir / "config.ini", to_ini(run));
  std::string csv = "epoch,train_loss,val_r2_f1\n";
  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : result.log) {
    csv += std::to_string(e.epoch) + "," + fixed(e.train_loss, 8) + "," + fixed(e.val_r2_f1, 8) + "\n";
    log.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_r2_f1", e.val_r2_f1}});
  }
  write_file(dir / "metrics.csv", csv);
  write_file(dir / "metrics.json", log.dump(2) + "\n");
  {
    std::ostringstream ck(std::ios::binary);
    write_adapters(ck, run.lora, result.best_weights,
                   {{"condition", condition}, {"seed", seed}, {"best_epoch", result.best_epoch}});
    write_file(dir / "checkpoint.rstl", ck.str());
  }
  std::string cands;
  for (const auto& c : candidates) cands += c + "\n";
  write_file(dir / "test_candidates.txt", cands);
  nlohmann::json report{{"condition", condition},
                        {"rank", rank},
                        {"seed", seed},
                        {"best_epoch", result.best_epoch},
                        {"epochs_run", r.epochs_run},
                        {"steps", result.steps},
                        {"trainable_params", model.trainable_param_count()},
                        {"frozen_params", model.backbone().frozen_param_count()},
                        {"test", to_json(r.test)}};
  write_file(dir / "report.json", report.dump(2) + "\n");
  return r;
}

/// One sub-run; failures are captured rather than thrown, and still leave a
/// manifest and an error record in the directory.
inline SubRunResult run_condition(const ExperimentConfig& cfg, const Corpus& corpus, const std::string& condition,
                                  std::size_t rank, std::uint64_t seed, const std::filesystem::path& dir,
                                  const std::string& command = "train") {
  auto r = SubRunResult::start(condition, rank, seed, dir.string());
  try {
    r = cfg.train.precision == Precision::f64 ? train_condition<double>(cfg, corpus, condition, rank, seed, dir)
                                              : train_condition<float>(cfg, corpus, condition, rank, seed, dir);
  } catch (const Error& e) {
    r.ok = false;
    r.error = e.what();
    r.exit_code = static_cast<int>(e.code());
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
    r.exit_code = static_cast<int>(ExitCode::kData);
  }
  std::filesystem::create_directories(dir);
  if (!r.ok) {
    write_file(dir / "config.ini", to_ini(cfg));
    write_file(dir / "error.json",
               nlohmann::json{{"condition", condition}, {"rank", rank}, {"seed", seed}, {"error", r.error}}.dump(2) +
                   "\n");
  }
  nlohmann::json inputs = nlohmann::json::object();
  if (!cfg.corpus.parse_file.empty()) inputs = {{"parse_file", cfg.corpus.parse_file}, {"text_file", cfg.corpus.text_file}};
  write_manifest(dir, command, {{"condition", condition}, {"rank", rank}, {"ini", to_ini(cfg)}}, seed, inputs);
  return r;
}

// ---------------------------------------------------------------------------
// Consolidation

struct ComparisonRow {
  std::string condition;
  std::size_t rank = 0;
  std::size_t runs = 0;
  std::size_t failed = 0;
  std::array<double, 4> mean{};  // r1, r2, rl, rlsum
  std::array<double, 4> sd{};
  std::vector<std::pair<std::uint64_t, double>> r2_by_seed;
};

inline double sample_sd(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Rows follow (rank, condition) in configuration order, independent of the
/// order in which sub-runs finished.
inline std::vector<ComparisonRow> consolidate(const ExperimentConfig& cfg, const std::vector<SubRunResult>& runs) {
  std::vector<ComparisonRow> rows;
  for (std::size_t rank : cfg.rank_list())
    for (const auto& cond : cfg.conditions) {
      ComparisonRow row;
      row.condition = cond;
      row.rank = rank;
      std::array<std::vector<double>, 4> vals;
      for (std::uint64_t seed : cfg.seeds) {
        auto it = std::find_if(runs.begin(), runs.end(), [&](const SubRunResult& r) {
          return r.condition == cond && r.rank == rank && r.seed == seed;
        });
        if (it == runs.end() || !it->ok) {
          ++row.failed;
          continue;
        }
        ++row.runs;
        vals[0].push_back(it->test.rouge1);
        vals[1].push_back(it->test.rouge2);
        vals[2].push_back(it->test.rougeL);
        vals[3].push_back(it->test.rougeLsum);
        row.r2_by_seed.emplace_back(seed, it->test.rouge2);
      }
      for (std::size_t m = 0; m < 4; ++m) {
        double s = 0;
        for (double x : vals[m]) s += x;
        row.mean[m] = vals[m].empty() ? 0.0 : s / static_cast<double>(vals[m].size());
        row.sd[m] = sample_sd(vals[m], row.mean[m]);
      }
      rows.push_back(std::move(row));
    }
  return rows;
}

inline std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::string out =
      "condition,rank,runs,failed,rouge1_mean,rouge1_sd,rouge2_mean,rouge2_sd,rougeL_mean,rougeL_sd,rougeLsum_mean,"
      "rougeLsum_sd\n";
  for (const auto& r : rows) {
    out += r.condition + "," + std::to_string(r.rank) + "," + std::to_string(r.runs) + "," + std::to_string(r.failed);
    for (std::size_t m = 0; m < 4; ++m) out += "," + fixed(r.mean[m]) + "," + fixed(r.sd[m]);
    out += "\n";
  }
  return out;
}

inline nlohmann::json comparison_json(const std::vector<ComparisonRow>& rows) {
  static const char* names[] = {"rouge1", "rouge2", "rougeL", "rougeLsum"};
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row{{"condition", r.condition}, {"rank", r.rank}, {"runs", r.runs}, {"failed", r.failed}};
    for (std::size_t m = 0; m < 4; ++m) row[names[m]] = {{"mean", fixed(r.mean[m])}, {"sd", fixed(r.sd[m])}};
    nlohmann::json seeds = nlohmann::json::object();
    for (const auto& [seed, v] : r.r2_by_seed) seeds[std::to_string(seed)] = fixed(v);
    row["rouge2_by_seed"] = seeds;
    out.push_back(row);
  }
  return out;
}

struct PipelineResult {
  std::vector<SubRunResult> runs;
  std::vector<ComparisonRow> rows;
  std::size_t failures = 0;
  int exit_code() const {
    if (failures == 0) return 0;
    for (const auto& r : runs)
      if (!r.ok) return r.exit_code ? r.exit_code : static_cast<int>(ExitCode::kData);
    return static_cast<int>(ExitCode::kData);
  }
};

using ProgressFn = std::function<void(const SubRunResult&)>;

/// Runs every (rank, condition, seed) under `out_dir` and writes the
/// comparison table (CSV + JSON), the config snapshot and a manifest.
inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                   const std::string& command = "experiment", const ProgressFn& progress = {}) {
  cfg.validate();
  const Corpus corpus = build_corpus(cfg.corpus);
  std::filesystem::create_directories(out_dir);
  PipelineResult res;
  const bool with_rank = !cfg.ranks.empty();
  for (std::size_t rank : cfg.rank_list())
    for (const auto& cond : cfg.conditions)
      for (std::uint64_t seed : cfg.seeds) {
        const auto dir = out_dir / "runs" / subrun_name(cond, rank, seed, with_rank);
        std::filesystem::remove_all(dir);
        res.runs.push_back(run_condition(cfg, corpus, cond, rank, seed, dir, command));
        if (!res.runs.back().ok) ++res.failures;
        if (progress) progress(res.runs.back());
      }
  res.rows = consolidate(cfg, res.runs);
  write_file(out_dir / "config.ini", to_ini(cfg));
  write_file(out_dir / "comparison.csv", comparison_csv(res.rows));
  write_file(out_dir / "comparison.json", comparison_json(res.rows).dump(2) + "\n");
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : res.runs)
    runs.push_back({{"dir", std::filesystem::relative(r.dir, out_dir).string()},
                    {"condition", r.condition},
                    {"rank", r.rank},
                    {"seed", r.seed},
                    {"ok", r.ok},
                    {"error", r.error}});
  write_file(out_dir / "runs.json", runs.dump(2) + "\n");
  nlohmann::json inputs = nlohmann::json::object();
  if (!cfg.corpus.parse_file.empty()) inputs = {{"parse_file", cfg.corpus.parse_file}, {"text_file", cfg.corpus.text_file}};
  write_manifest(out_dir, command, {{"ini", to_ini(cfg)}}, cfg.seeds, inputs);
  return res;
}

}  // namespace rstlora
