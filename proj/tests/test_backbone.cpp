#include <gtest/gtest.h>

#include "rstlora/decode.hpp"
#include "rstlora/trainer.hpp"
#include "support.hpp"

using namespace rstlora;

namespace {

BackboneConfig small(Architecture arch = Architecture::decoder_only) {
  BackboneConfig c;
  c.architecture = arch;
  c.layers = 2;
  c.heads = 2;
  c.d_model = 16;
  c.d_ff = 24;
  c.vocab_size = 20;
  c.max_seq_len = 24;
  c.seed = 3;
  return c;
}

LoRAConfig lora(std::vector<std::string> targets = {"q", "k", "v", "o"}) {
  LoRAConfig l;
  l.rank = 4;
  l.alpha = 8;
  l.dropout = 0.0;
  l.target_layers = std::move(targets);
  return l;
}

template <typename T>
void randomize_adapters(AdaptedModel<T>& m, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto* p : m.adapters()) {
    p->lora->up = support::random_matrix<T>(rng, p->lora->up.rows(), p->lora->up.cols(), -scale, scale);
  }
}

const std::vector<int> kDoc{4, 5, 6, 7, 8, 9, 10};
const std::vector<int> kSummary{5, 8, 11};

template <typename T>
Matrix<T> doc_gamma(std::size_t seq, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return place_gamma(support::random_matrix<T>(rng, kDoc.size(), d, 0.0, 1.5), seq, 1).values;
}

}  // namespace

TEST(Backbone, ParamCountMatchesEnumeration) {
  for (auto arch : {Architecture::decoder_only, Architecture::seq2seq}) {
    auto c = small(arch);
    for (std::size_t layers : {1u, 3u}) {
      c.layers = layers;
      EXPECT_EQ(build_backbone<float>(c).frozen_param_count(), backbone_param_count(c));
    }
  }
}

TEST(Backbone, DeterministicWeights) {
  EXPECT_EQ(build_backbone<float>(small()).frozen_checksum(), build_backbone<float>(small()).frozen_checksum());
  auto other = small();
  other.seed = 4;
  EXPECT_NE(build_backbone<float>(small()).frozen_checksum(), build_backbone<float>(other).frozen_checksum());
}

TEST(Backbone, RejectsIndivisibleHeads) {
  auto c = small();
  c.d_model = 32;
  c.heads = 5;
  EXPECT_THROW(build_backbone<float>(c), ConfigError);
}

TEST(AttachLora, FreshAdaptersLeaveOutputsUnchanged) {
  for (auto arch : {Architecture::decoder_only, Architecture::seq2seq}) {
    const auto net = build_backbone<double>(small(arch));
    const auto model = attach_lora(net, lora({"q", "k", "v", "o", "up", "down"}), true);
    const auto g = doc_gamma<double>(24, 16, 1);
    const auto in = make_input<double>(arch == Architecture::seq2seq, kDoc, kSummary, &g);
    EXPECT_EQ(model.logits(in), backbone_logits(net, in));
  }
}

TEST(AttachLora, TrainableCountIsSumOfRankTimesDims) {
  const auto model = attach_lora(build_backbone<float>(small()), lora(), true);
  std::vector<std::pair<std::size_t, std::size_t>> dims;
  for (const auto* p : model.adapters()) dims.emplace_back(p->in_dim(), p->out_dim());
  EXPECT_EQ(dims.size(), 8u);
  EXPECT_EQ(model.trainable_param_count(), trainable_param_count(lora(), dims));
  EXPECT_EQ(model.trainable_param_count(), 8u * 4 * (16 + 16));
}

TEST(AttachLora, AdapterSeedLeavesBackboneAlone) {
  const auto net = build_backbone<float>(small());
  const auto a = attach_lora(net, lora(), true, {}, 7), b = attach_lora(net, lora(), true, {}, 8);
  EXPECT_EQ(a.backbone().frozen_checksum(), b.backbone().frozen_checksum());
  EXPECT_NE(a.adapters()[0]->lora->down, b.adapters()[0]->lora->down);
  EXPECT_EQ(a.adapters()[0]->lora->down, attach_lora(net, lora(), true, {}, 7).adapters()[0]->lora->down);
  // unset falls back to the backbone seed
  EXPECT_EQ(attach_lora(net, lora(), true).adapters()[0]->lora->down,
            attach_lora(net, lora(), true, {}, small().seed).adapters()[0]->lora->down);
}

TEST(AttachLora, UnknownTargetIsAnError) {
  EXPECT_THROW(attach_lora(build_backbone<float>(small()), lora({"q", "gate"}), true), ConfigError);
}

TEST(AttachLora, GammaReachesOnlyDocumentSideQkv) {
  const auto dec = attach_lora(build_backbone<float>(small()), lora({"q", "k", "v", "o", "up", "down"}), true);
  for (const auto& name : dec.gamma_targets()) {
    const auto kind = name.substr(name.rfind('.') + 1);
    EXPECT_TRUE(kind == "q" || kind == "k" || kind == "v") << name;
  }
  EXPECT_EQ(dec.gamma_targets().size(), 6u);
  const auto s2s = attach_lora(build_backbone<float>(small(Architecture::seq2seq)), lora(), true);
  for (const auto& name : s2s.gamma_targets()) EXPECT_EQ(name.rfind("encoder.", 0), 0u) << name;
  EXPECT_EQ(s2s.gamma_targets().size(), 6u);
  EXPECT_TRUE(attach_lora(build_backbone<float>(small()), lora(), false).gamma_targets().empty());
  InjectionOptions first;
  first.first_layer_only = true;
  EXPECT_EQ(attach_lora(build_backbone<float>(small()), lora(), true, first).gamma_targets().size(), 3u);
}

TEST(AdaptedModel, ZeroGammaEqualsNoGamma) {
  auto model = attach_lora(build_backbone<double>(small()), lora(), true);
  randomize_adapters(model, 2);
  const Matrix<double> zero(24, 16);
  EXPECT_EQ(model.logits(make_input<double>(false, kDoc, kSummary, &zero)),
            model.logits(make_input<double>(false, kDoc, kSummary, nullptr)));
}

TEST(AdaptedModel, GammaMattersOnlyWhenEnabled) {
  auto on = attach_lora(build_backbone<double>(small()), lora(), true);
  randomize_adapters(on, 2);
  auto off = attach_lora(build_backbone<double>(small()), lora(), false);
  randomize_adapters(off, 2);
  const auto g = doc_gamma<double>(24, 16, 5);
  const auto with = make_input<double>(false, kDoc, kSummary, &g);
  const auto without = make_input<double>(false, kDoc, kSummary, nullptr);
  EXPECT_NE(on.logits(with), on.logits(without));
  EXPECT_EQ(off.logits(with), off.logits(without));
  EXPECT_EQ(off.logits(without), on.logits(without));
}

TEST(AdaptedModel, MergedBackboneMatchesAdapters) {
  auto model = attach_lora(build_backbone<double>(small()), lora({"q", "k", "v", "o", "up", "down"}), false);
  randomize_adapters(model, 7);
  const auto merged = model.merged_backbone();
  const auto in = make_input<double>(false, kDoc, kSummary, nullptr);
  const auto a = model.logits(in), b = backbone_logits(merged, in);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-9);
}

TEST(AdaptedModel, LossGradientsMatchFiniteDifferences) {
  for (auto arch : {Architecture::decoder_only, Architecture::seq2seq}) {
    auto model = attach_lora(build_backbone<double>(small(arch)), lora({"q", "v", "up"}), true);
    randomize_adapters(model, 11, 0.2);
    const bool s2s = arch == Architecture::seq2seq;
    const auto g = s2s ? place_gamma(doc_gamma<double>(24, 16, 3).slice_rows(1, 8), 24, 0).values
                       : doc_gamma<double>(24, 16, 3);
    Example<double> ex{kDoc, kSummary, "", {g, 0, 0}};
    const auto [in, targets] = teacher_forcing(s2s, ex);
    auto grads = model.zero_grads();
    model.loss_and_grad(in, targets, 1.0, grads, nullptr);
    Rng pick(1);
    const double eps = 1e-6;
    for (std::size_t a = 0; a < model.adapters().size(); ++a) {
      auto& lr = *model.adapters()[a]->lora;
      for (int probe = 0; probe < 4; ++probe) {
        const bool use_down = probe % 2 == 0;
        auto& w = use_down ? lr.down : lr.up;
        const auto& gw = use_down ? grads[a].down : grads[a].up;
        const auto i = support::draw_size(pick, 0, w.size() - 1);
        const double keep = w.data()[i];
        auto scratch = model.zero_grads();
        w.data()[i] = keep + eps;
        const double lp = model.loss_and_grad(in, targets, 1.0, scratch, nullptr);
        w.data()[i] = keep - eps;
        const double lm = model.loss_and_grad(in, targets, 1.0, scratch, nullptr);
        w.data()[i] = keep;
        const double fd = (lp - lm) / (2 * eps);
        EXPECT_NEAR(gw.data()[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << model.adapters()[a]->name;
      }
    }
  }
}

TEST(AdaptedModel, SnapshotRestoreAndCopy) {
  auto model = attach_lora(build_backbone<float>(small()), lora(), true);
  randomize_adapters(model, 1);
  const auto snap = model.snapshot();
  auto copy = model;
  randomize_adapters(model, 2);
  const auto in = make_input<float>(false, kDoc, kSummary, nullptr);
  EXPECT_NE(model.logits(in), copy.logits(in));
  model.restore(snap);
  EXPECT_EQ(model.logits(in), copy.logits(in));
}

TEST(AdaptedModel, ReferenceConfigFractionBelowHalfPercent) {
  BackboneConfig c;
  c.layers = 4;
  c.heads = 4;
  c.d_model = 256;
  c.d_ff = 1024;
  c.vocab_size = 50265;
  c.max_seq_len = 8;
  LoRAConfig l;  // r = 8 on q, k, v, o
  const auto model = attach_lora(build_backbone<float>(c), l, true);
  const double trainable = static_cast<double>(model.trainable_param_count());
  const double total = trainable + static_cast<double>(model.backbone().frozen_param_count());
  EXPECT_EQ(model.trainable_param_count(), 4u * 4 * 8 * (256 + 256));
  EXPECT_LT(trainable / total, 0.005);
}
