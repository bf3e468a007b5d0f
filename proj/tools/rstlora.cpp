// rstlora command-line driver.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rstlora/experiment.hpp"

namespace fs = std::filesystem;
using namespace rstlora;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 42;
  bool seed_set = false;
  std::string precision;
  std::string out_dir = "out";
  std::string config;
  std::vector<std::string> overrides;
  std::string parse_file;
  bool include_diagonal = false;
  bool binarize_after_merge = false;
};

ExperimentConfig resolve_config(const Globals& g) {
  std::vector<std::string> ov = g.overrides;
  if (!g.precision.empty()) ov.push_back("train.precision=" + g.precision);
  if (g.include_diagonal) ov.push_back("merge.include_diagonal=true");
  if (g.binarize_after_merge) ov.push_back("merge.binarize_after_merge=true");
  return load_experiment_config(g.config, ov);
}

MergeOptions merge_options(const Globals& g) {
  MergeOptions m;
  m.include_diagonal = g.include_diagonal;
  m.binarize_after_merge = g.binarize_after_merge;
  return m;
}

std::vector<ParseOutput> require_parses(const Globals& g) {
  if (g.parse_file.empty()) throw ConfigError("--parse-file is required");
  return load_parses(g.parse_file);
}

/// One summary per line: a JSON string, or an object with "summary".
std::vector<std::string> read_summaries(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::vector<std::string> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      out.push_back(j.is_string() ? j.get<std::string>() : j.at("summary").get<std::string>());
    } catch (const json::exception& e) {
      throw ParseError(n, path + ": " + e.what());
    }
  }
  return out;
}

void print_run(const SubRunResult& r) {
  std::cerr << (r.ok ? "ok    " : "FAIL  ") << r.dir;
  if (r.ok)
    std::cerr << "  R1 " << fixed(r.test.rouge1, 4) << "  R2 " << fixed(r.test.rouge2, 4) << "  RL "
              << fixed(r.test.rougeL, 4) << "  best epoch " << r.best_epoch;
  else
    std::cerr << "  " << r.error;
  std::cerr << "\n";
}

int cmd_synth(const Globals& g) {
  auto cfg = resolve_config(g);
  if (g.seed_set) cfg.corpus.synth.seed = g.seed;
  SynthConfig s = cfg.corpus.synth;
  s.n_docs = cfg.corpus.n_train + cfg.corpus.n_val + cfg.corpus.n_test;
  const auto docs = synth_parse(s);
  Vocabulary vocab{s.vocab_size};
  fs::create_directories(g.out_dir);
  std::ostringstream parses, texts;
  for (const auto& d : docs) {
    parses << serialize(d.parse) << "\n";
    texts << corpus_record(d, vocab).dump() << "\n";
  }
  write_file(fs::path(g.out_dir) / "parses.jsonl", parses.str());
  write_file(fs::path(g.out_dir) / "corpus.jsonl", texts.str());
  write_file(fs::path(g.out_dir) / "config.ini", to_ini(cfg));
  write_manifest(g.out_dir, "synth", {{"ini", to_ini(cfg)}}, s.seed, json::object());
  std::cerr << "wrote " << docs.size() << " documents to " << g.out_dir << "\n";
  return 0;
}

int cmd_validate(const Globals& g) {
  if (g.parse_file.empty()) throw ConfigError("--parse-file is required");
  std::ifstream in(g.parse_file);
  if (!in) throw ConfigError("cannot open '" + g.parse_file + "'");
  std::string line;
  std::size_t bad = 0, total = 0;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++total;
    try {
      parse_record(line, n);
    } catch (const DataError& e) {
      ++bad;
      std::cout << e.what() << "\n";
    }
  }
  std::cout << total - bad << "/" << total << " records valid\n";
  return bad ? static_cast<int>(ExitCode::kData) : 0;
}

int cmd_build(const Globals& g, const std::string& variant) {
  const auto parses = require_parses(g);
  const auto merge = merge_options(g);
  std::vector<Variant> variants;
  if (variant == "all")
    variants = {Variant::b_wo, Variant::b_w, Variant::p_wo, Variant::p_w};
  else
    variants = {parse_variant(variant)};
  fs::create_directories(g.out_dir);
  for (auto v : variants) {
    std::ostringstream out;
    for (const auto& p : parses) {
      json j = to_json(make_variant(p, v, merge));
      j["doc_id"] = p.segmentation.doc_id;
      out << j.dump() << "\n";
    }
    write_file(fs::path(g.out_dir) / ("distributions_" + to_string(v) + ".jsonl"), out.str());
  }
  write_manifest(g.out_dir, "build",
                 {{"variant", variant},
                  {"include_diagonal", merge.include_diagonal},
                  {"binarize_after_merge", merge.binarize_after_merge}},
                 nullptr, {{"parse_file", g.parse_file}});
  return 0;
}

int cmd_gamma(const Globals& g, const std::string& variant, std::size_t d_model, std::size_t seq_len,
              std::size_t offset, const std::string& layout, const std::string& out_file) {
  const auto parses = require_parses(g);
  const auto merge = merge_options(g);
  const auto lay = layout == "band" ? ChannelLayout::kBand : ChannelLayout::kTile;
  if (layout != "band" && layout != "tile") throw ConfigError("--layout must be tile or band");
  const auto one = [&](const ParseOutput& p) {
    const std::size_t rows = seq_len ? seq_len : p.segmentation.token_count + offset;
    return project_gamma<float>(make_variant(p, variant, merge), p.segmentation, rows, d_model, offset, lay);
  };
  if (!out_file.empty()) {
    if (parses.size() != 1) throw ConfigError("--out needs a parse file with exactly one document");
    save_rstg(out_file, one(parses.front()));
    return 0;
  }
  fs::create_directories(g.out_dir);
  for (const auto& p : parses) save_rstg((fs::path(g.out_dir) / (p.segmentation.doc_id + ".rstg")).string(), one(p));
  write_manifest(g.out_dir, "gamma", {{"variant", variant}, {"d_model", d_model}, {"layout", layout}}, nullptr,
                 {{"parse_file", g.parse_file}});
  return 0;
}

int cmd_train(const Globals& g, const std::string& condition) {
  auto cfg = resolve_config(g);
  if (!condition.empty()) cfg.conditions = {condition};
  parse_condition(cfg.conditions.front());
  const auto corpus = build_corpus(cfg.corpus);
  const std::uint64_t seed = g.seed_set ? g.seed : cfg.seeds.front();
  const auto dir = fs::path(g.out_dir) / subrun_name(cfg.conditions.front(), cfg.lora.rank, seed, false);
  fs::remove_all(dir);
  const auto r = run_condition(cfg, corpus, cfg.conditions.front(), cfg.lora.rank, seed, dir, "train");
  print_run(r);
  return r.ok ? 0 : r.exit_code;
}

template <typename T>
int generate_impl(const ExperimentConfig& cfg, const std::string& checkpoint, const std::string& condition,
                  std::uint64_t seed, const std::string& split, const std::string& out_file) {
  const auto corpus = build_corpus(cfg.corpus);
  const auto cond = parse_condition(condition);
  const auto ckpt = load_adapters<T>(checkpoint);
  auto model = attach_lora(build_backbone<T>(cfg.backbone), ckpt.config, cond.uses_gamma(), cfg.injection);
  model.restore(ckpt.layers);
  const std::vector<CorpusDoc>* docs = &corpus.test;
  std::size_t first = corpus.train.size() + corpus.val.size();
  if (split == "val") {
    docs = &corpus.val;
    first = corpus.train.size();
  } else if (split == "train") {
    docs = &corpus.train;
    first = 0;
  } else if (split != "test") {
    throw ConfigError("--split must be train, val or test");
  }
  const auto examples = make_examples<T>(*docs, first, cond, seed, cfg);
  Vocabulary vocab{corpus.vocab_size};
  std::ostringstream out;
  for (const auto& ex : examples) out << json(vocab.decode(decode_example(model, ex, cfg.decode, true))).dump() << "\n";
  write_file(out_file, out.str());
  return 0;
}

int cmd_generate(const Globals& g, const std::string& checkpoint, const std::string& condition,
                 const std::string& split, const std::string& out_file) {
  auto cfg = resolve_config(g);
  const std::uint64_t seed = g.seed_set ? g.seed : cfg.seeds.front();
  return cfg.train.precision == Precision::f64 ? generate_impl<double>(cfg, checkpoint, condition, seed, split, out_file)
                                               : generate_impl<float>(cfg, checkpoint, condition, seed, split, out_file);
}

int cmd_eval(const std::string& cands, const std::string& refs, const std::string& out_file) {
  const auto c = read_summaries(cands);
  const auto r = read_summaries(refs);
  if (c.size() != r.size())
    throw DataError("candidate count " + std::to_string(c.size()) + " != reference count " + std::to_string(r.size()));
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::size_t i = 0; i < c.size(); ++i) pairs.emplace_back(c[i], r[i]);
  const auto report = evaluate_corpus(pairs);
  const std::string text = to_json(report).dump(2) + "\n";
  if (out_file.empty())
    std::cout << text;
  else
    write_file(out_file, text);
  std::cerr << "R1 " << fixed(report.rouge1, 4) << "  R2 " << fixed(report.rouge2, 4) << "  RL "
            << fixed(report.rougeL, 4) << "  RLsum " << fixed(report.rougeLsum, 4) << "\n";
  return 0;
}

int cmd_ablate(const Globals& g, const std::string& kind, double mask, bool mask_set, std::size_t seq_len,
               std::size_t d_model, const std::string& out_file) {
  if (mask_set == !kind.empty()) throw ConfigError("ablate: give exactly one of --kind or --mask");
  if (!kind.empty()) {
    if (out_file.empty()) throw ConfigError("ablate --kind needs --out");
    if (seq_len == 0 || d_model == 0) throw ConfigError("ablate --kind needs --seq-len and --d-model");
    save_rstg(out_file, gamma_pattern<float>(parse_pattern_kind(kind), seq_len, d_model, g.seed));
    return 0;
  }
  const auto parses = require_parses(g);
  std::ostringstream out;
  for (std::size_t i = 0; i < parses.size(); ++i)
    out << serialize(mask_parse(parses[i], {mask, mix_seed(g.seed, i)})) << "\n";
  if (out_file.empty()) {
    fs::create_directories(g.out_dir);
    write_file(fs::path(g.out_dir) / "masked_parses.jsonl", out.str());
    write_manifest(g.out_dir, "ablate", {{"mask", mask}}, g.seed, {{"parse_file", g.parse_file}});
  } else {
    write_file(out_file, out.str());
  }
  return 0;
}

int cmd_pipeline(const Globals& g, const std::string& command, const std::vector<std::size_t>& ranks) {
  auto cfg = resolve_config(g);
  if (g.seed_set) cfg.seeds = {g.seed};
  if (command == "sweep") {
    if (!ranks.empty()) cfg.ranks = ranks;
    if (cfg.ranks.empty()) cfg.ranks = {2, 4, 8, 16};
  }
  const auto res = run_pipeline(cfg, g.out_dir, command, print_run);
  std::cout << comparison_csv(res.rows);
  if (res.failures) std::cerr << res.failures << " sub-run(s) failed\n";
  return res.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discourse-weighted low-rank adapters: data, training and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Run seed")->each([&](const std::string&) { g.seed_set = true; });
  app.add_option("--precision", g.precision, "Arithmetic precision: 32 or 64");
  app.add_option("--out-dir", g.out_dir, "Output directory");
  app.add_option("--config", g.config, "Experiment config file");
  app.add_option("--set", g.overrides, "Config override section.key=value (repeatable)");
  app.add_option("--parse-file", g.parse_file, "Parser output (JSONL)");
  app.add_flag("--merge-include-diagonal", g.include_diagonal, "Average over all n EDUs instead of the n-1 others");
  app.add_flag("--binarize-after-merge", g.binarize_after_merge, "Threshold the averaged index instead of the raw tensor");

  auto* synth = app.add_subcommand("synth", "Generate a planted-nucleus corpus");
  auto* validate = app.add_subcommand("validate", "Check a parse file against the schema");

  std::string variant = "all";
  auto* build = app.add_subcommand("build", "Compute RST distributions");
  build->add_option("--variant", variant, "b_wo, b_w, p_wo, p_w or all");

  std::string gvariant = "p_w", layout = "tile", gout;
  std::size_t gd = 32, gseq = 0, goff = 0;
  auto* gamma = app.add_subcommand("gamma", "Project distributions to token-level gamma (.rstg)");
  gamma->add_option("--variant", gvariant, "b_wo, b_w, p_wo or p_w");
  gamma->add_option("--d-model", gd, "Hidden width");
  gamma->add_option("--seq-len", gseq, "Rows (default: offset + tokens)");
  gamma->add_option("--doc-offset", goff, "Row of the first document token");
  gamma->add_option("--layout", layout, "Channel layout: tile or band");
  gamma->add_option("--out", gout, "Single output file (one-document parse files)");

  std::string condition;
  auto* train = app.add_subcommand("train", "Train one condition and evaluate it");
  train->add_option("--variant,--condition", condition, "Condition (p_w, random, mask:0.2, vanilla, ...)");

  std::string checkpoint, gen_cond = "p_w", split = "test", gen_out = "candidates.jsonl";
  auto* generate = app.add_subcommand("generate", "Decode a split with a trained checkpoint");
  generate->add_option("--checkpoint", checkpoint, "Adapter checkpoint (.rstl)")->required();
  generate->add_option("--variant,--condition", gen_cond, "Condition the checkpoint was trained with");
  generate->add_option("--split", split, "train, val or test");
  generate->add_option("--out", gen_out, "Output JSONL of candidate strings");

  std::string cands, refs, eval_out;
  auto* eval = app.add_subcommand("eval", "Score candidates against references");
  eval->add_option("--cands", cands, "Candidates (JSONL)")->required();
  eval->add_option("--refs", refs, "References (JSONL)")->required();
  eval->add_option("--out", eval_out, "Report path (default: stdout)");

  std::string kind, ab_out;
  double mask = 0;
  std::size_t ab_seq = 0, ab_d = 0;
  auto* ablate = app.add_subcommand("ablate", "Control patterns and parser masking");
  ablate->add_option("--kind", kind, "even, odd or random");
  auto* mask_opt = ablate->add_option("--mask", mask, "Fraction of off-diagonal cells to replace");
  ablate->add_option("--seq-len", ab_seq, "Rows for --kind");
  ablate->add_option("--d-model", ab_d, "Columns for --kind");
  ablate->add_option("--out", ab_out, "Output file");

  std::vector<std::size_t> ranks;
  auto* sweep = app.add_subcommand("sweep", "Rank sweep over the configured conditions");
  sweep->add_option("--ranks", ranks, "Ranks (default 2 4 8 16)")->delimiter(',');
  auto* experiment = app.add_subcommand("experiment", "Run every condition x seed and consolidate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*synth) return cmd_synth(g);
    if (*validate) return cmd_validate(g);
    if (*build) return cmd_build(g, variant);
    if (*gamma) return cmd_gamma(g, gvariant, gd, gseq, goff, layout, gout);
    if (*train) return cmd_train(g, condition);
    if (*generate) return cmd_generate(g, checkpoint, gen_cond, split, gen_out);
    if (*eval) return cmd_eval(cands, refs, eval_out);
    if (*ablate) return cmd_ablate(g, kind, mask, mask_opt->count() > 0, ab_seq, ab_d, ab_out);
    if (*sweep) return cmd_pipeline(g, "sweep", ranks);
    if (*experiment) return cmd_pipeline(g, "experiment", {});
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}
