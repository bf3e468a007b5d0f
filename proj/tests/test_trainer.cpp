#include <gtest/gtest.h>

#include "rstlora/ablation.hpp"
#include "rstlora/trainer.hpp"
#include "support.hpp"

using namespace rstlora;

namespace {

// Deterministic pseudo-model: log-probs depend only on the prefix.
NextTokenFn toy_lm(std::size_t vocab, std::uint64_t seed, int eos) {
  return [=](const std::vector<int>& prefix) {
    std::uint64_t h = seed;
    for (int t : prefix) h = mix_seed(h, static_cast<std::uint64_t>(t));
    Rng rng(h);
    std::vector<double> logits(vocab);
    for (auto& v : logits) v = normal(rng, 0.0, 2.0);
    logits[static_cast<std::size_t>(eos)] += static_cast<double>(prefix.size()) * 0.4 - 1.0;
    return log_softmax(logits);
  };
}

struct SmallTask {
  std::vector<Example<float>> train, val;
  Vocabulary vocab;
  BackboneConfig backbone;
  LoRAConfig lora;
};

SmallTask small_task() {
  SmallTask t;
  SynthConfig s;
  s.n_docs = 180;
  s.n_edu_min = 3;
  s.n_edu_max = 5;
  s.tokens_per_edu_max = 3;
  s.vocab_size = 40;
  t.vocab.size = s.vocab_size;
  t.backbone.vocab_size = s.vocab_size;
  t.backbone.d_model = 32;
  t.backbone.d_ff = 64;
  t.backbone.max_seq_len = 40;
  t.lora.dropout = 0.0;
  const auto docs = synth_parse(s);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto& d = docs[i];
    Example<float> ex{d.tokens, d.summary, corpus_record(d, t.vocab)["summary"],
                      project_gamma<float>(make_variant(d.parse, Variant::p_w), d.parse.segmentation, 40, 32, 1)};
    (i < 160 ? t.train : t.val).push_back(std::move(ex));
  }
  return t;
}

}  // namespace

TEST(SelectCheckpoint, ArgmaxWithEarliestTie) {
  EXPECT_EQ(select_checkpoint({{1, 0.10}, {2, 0.30}, {3, 0.25}}), 2u);
  EXPECT_EQ(select_checkpoint({{1, 0.30}, {2, 0.30}}), 1u);
  EXPECT_EQ(select_checkpoint({{2, 0.30}, {1, 0.30}}), 1u);
  EXPECT_THROW(select_checkpoint({}), DataError);
}

TEST(SelectCheckpoint, PropertyAgainstBruteForce) {
  Rng rng(4);
  for (int t = 0; t < 500; ++t) {
    std::vector<std::pair<std::size_t, double>> log;
    const auto n = support::draw_size(rng, 1, 12);
    for (std::size_t e = 1; e <= n; ++e) log.emplace_back(e, static_cast<double>(uniform_int(rng, 0, 4)) / 4.0);
    double best = -1;
    std::size_t want = 0;
    for (const auto& [e, v] : log)
      if (v > best) best = v, want = e;
    shuffle(log.begin(), log.end(), rng);
    EXPECT_EQ(select_checkpoint(log), want);
  }
}

TEST(Schedule, WarmupThenCosine) {
  EXPECT_DOUBLE_EQ(scheduled_lr(0, 100, 1.0, 0.2), 0.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(10, 100, 1.0, 0.2), 0.5);
  EXPECT_DOUBLE_EQ(scheduled_lr(20, 100, 1.0, 0.2), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(40, 100, 1.0, 0.2), 0.8535533905932737);
  EXPECT_DOUBLE_EQ(scheduled_lr(60, 100, 1.0, 0.2), 0.5);
  EXPECT_NEAR(scheduled_lr(100, 100, 1.0, 0.2), 0.0, 1e-15);
}

TEST(AdamW, SingleStepByHand) {
  LowRank<double> p{Matrix<double>(1, 1, 1.0), Matrix<double>(1, 1, -2.0)};
  std::vector<LowRankGrad<double>> g{{Matrix<double>(1, 1, 0.5), Matrix<double>(1, 1, 0.0)}};
  AdamW<double> opt;  // wd 0.1, eps 1e-9
  opt.step({&p}, g, 0.1);
  // decoupled decay: 1 - 0.1*0.1 = 0.99, then the bias-corrected step 0.1 * 0.5/(0.5 + 1e-9)
  EXPECT_NEAR(p.down(0, 0), 0.99 - 0.1 * 0.5 / (0.5 + 1e-9), 1e-12);
  EXPECT_NEAR(p.up(0, 0), -2.0 * 0.99, 1e-12);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Decode, BannedTokens) {
  EXPECT_EQ(banned_tokens({5, 6, 7, 5, 6}, 3), (std::vector<int>{7}));
  EXPECT_TRUE(banned_tokens({5, 6}, 3).empty());
  EXPECT_EQ(banned_tokens({4, 9}, 1), (std::vector<int>{4, 9}));
  EXPECT_TRUE(banned_tokens({1, 1, 1}, 0).empty());
}

TEST(Decode, BeamOfOneIsGreedy) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    DecodeConfig cfg;
    cfg.beam_size = 1;
    cfg.max_length = 12;
    cfg.no_repeat_ngram = seed % 4;
    const auto lm = toy_lm(9, seed, 3);
    EXPECT_EQ(beam_search(lm, cfg, 3), greedy_search(lm, cfg, 3)) << seed;
  }
}

TEST(Decode, NoRepeatedTrigrams) {
  // strongly prefers cycling 5 6 7
  const NextTokenFn cyc = [](const std::vector<int>& prefix) {
    std::vector<double> logits(10, 0.0);
    const int want = prefix.empty() ? 5 : (prefix.back() == 7 ? 5 : prefix.back() + 1);
    if (want >= 5 && want <= 7) logits[static_cast<std::size_t>(want)] = 8.0;
    logits[3] = -5.0;
    return log_softmax(logits);
  };
  for (std::size_t beam : {1u, 4u}) {
    DecodeConfig cfg;
    cfg.beam_size = beam;
    cfg.max_length = 20;
    const auto out = beam_search(cyc, cfg, 3);
    ASSERT_GE(out.size(), 6u);
    std::set<std::vector<int>> seen;
    for (std::size_t i = 0; i + 3 <= out.size(); ++i)
      EXPECT_TRUE(seen.insert({out[i], out[i + 1], out[i + 2]}).second) << "beam " << beam;
  }
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    DecodeConfig cfg;
    cfg.max_length = 25;
    const auto out = beam_search(toy_lm(6, seed, 3), cfg, 3);
    std::set<std::vector<int>> seen;
    for (std::size_t i = 0; i + 3 <= out.size(); ++i) EXPECT_TRUE(seen.insert({out[i], out[i + 1], out[i + 2]}).second);
  }
}

TEST(Decode, LengthPenaltyFavoursLongerOutputs) {
  for (double lp : {-0.5, -3.0, -10.0})
    for (std::size_t len = 1; len < 20; ++len) {
      EXPECT_LT(length_normalized_score(lp, len, 3.0), length_normalized_score(lp, len + 1, 3.0));
      EXPECT_EQ(length_normalized_score(lp, len, 0.0), lp);
    }
  std::size_t shorter = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    DecodeConfig flat, steep;
    flat.length_penalty = 0.0;
    steep.length_penalty = 3.0;
    flat.max_length = steep.max_length = 15;
    const auto lm = toy_lm(8, seed, 3);
    if (beam_search(lm, steep, 3).size() < beam_search(lm, flat, 3).size()) ++shorter;
  }
  EXPECT_EQ(shorter, 0u);
}

TEST(Decode, ModelBeamOfOneIsGreedy) {
  auto t = small_task();
  auto model = attach_lora(build_backbone<float>(t.backbone), t.lora, true);
  Rng rng(3);
  for (auto* p : model.adapters())
    p->lora->up = support::random_matrix<float>(rng, p->lora->up.rows(), p->lora->up.cols(), -0.5, 0.5);
  DecodeConfig cfg;
  cfg.beam_size = 1;
  cfg.max_length = 10;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& ex = t.val[i];
    const auto out = generate(model, ex.document, &ex.gamma, cfg);
    EXPECT_EQ(out, generate_greedy(model, ex.document, &ex.gamma, cfg));
    for (int tok : out) EXPECT_TRUE(tok != Vocabulary::kPad && tok != Vocabulary::kBos && tok != Vocabulary::kSep);
  }
  cfg.max_length = 100;
  EXPECT_THROW(generate(model, t.val[0].document, &t.val[0].gamma, cfg), ShapeError);
}

TEST(Train, LossDecreasesAndBackboneStaysFrozen) {
  auto t = small_task();
  auto model = attach_lora(build_backbone<float>(t.backbone), t.lora, true);
  const auto frozen = model.backbone().frozen_checksum();
  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.epochs = 20;
  cfg.max_steps = 200;
  cfg.seed = 42;
  cfg.early_stopping_patience = 100;
  DecodeConfig dec;
  dec.max_length = 10;
  const std::vector<Example<float>> val(t.val.begin(), t.val.begin() + 4);
  const auto res = train(model, t.train, val, cfg, dec, t.vocab);
  ASSERT_EQ(res.steps, 200u);
  ASSERT_EQ(res.step_losses.size(), 200u);
  const auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 10; ++i) s += res.step_losses[i];
    return s / 10;
  };
  EXPECT_LT(window(190), window(0));
  EXPECT_LT(res.step_losses.back(), res.step_losses.front());
  EXPECT_EQ(model.backbone().frozen_checksum(), frozen);
  std::vector<std::pair<std::size_t, double>> log;
  for (const auto& e : res.log) log.emplace_back(e.epoch, e.val_r2_f1);
  EXPECT_EQ(res.best_epoch, select_checkpoint(log));
}

TEST(Train, IdenticalSeedsGiveIdenticalTrajectories) {
  auto t = small_task();
  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.epochs = 2;
  cfg.seed = 9;
  DecodeConfig dec;
  dec.max_length = 8;
  auto lc = t.lora;
  lc.dropout = 0.1;
  const std::vector<Example<float>> val(t.val.begin(), t.val.begin() + 3);
  auto run = [&] {
    auto model = attach_lora(build_backbone<float>(t.backbone), lc, true);
    return train(model, t.train, val, cfg, dec, t.vocab);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.step_losses, b.step_losses);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].val_r2_f1, b.log[i].val_r2_f1);
}

TEST(Train, EarlyStoppingAndValidation) {
  auto t = small_task();
  TrainConfig cfg;
  cfg.lr = 1e-9;  // nothing improves after the first epoch
  cfg.epochs = 10;
  cfg.early_stopping_patience = 2;
  DecodeConfig dec;
  dec.max_length = 6;
  const std::vector<Example<float>> val(t.val.begin(), t.val.begin() + 2);
  auto model = attach_lora(build_backbone<float>(t.backbone), t.lora, true);
  const auto res = train(model, t.train, val, cfg, dec, t.vocab);
  EXPECT_LT(res.log.size(), 10u);
  EXPECT_EQ(res.best_epoch, 1u);
  cfg.lr = 0;
  EXPECT_THROW(train(model, t.train, val, cfg, dec, t.vocab), ConfigError);
  cfg.lr = 1e-3;
  EXPECT_THROW(train(model, t.train, {}, cfg, dec, t.vocab), DataError);
}

TEST(Train, DivergenceIsReported) {
  auto t = small_task();
  TrainConfig cfg;
  cfg.lr = 1e30;
  cfg.warmup_ratio = 0.0;
  cfg.epochs = 3;
  DecodeConfig dec;
  dec.max_length = 4;
  const std::vector<Example<float>> val(t.val.begin(), t.val.begin() + 1);
  auto model = attach_lora(build_backbone<float>(t.backbone), t.lora, true);
  EXPECT_THROW(train(model, t.train, val, cfg, dec, t.vocab), DivergenceError);
}
