#include <gtest/gtest.h>

#include "rstlora/ablation.hpp"
#include "support.hpp"

using namespace rstlora;

namespace {

std::size_t changed_cells(const ParseOutput& a, const ParseOutput& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.probs.size(); ++i) n += a.probs[i] != b.probs[i];
  return n;
}

}  // namespace

TEST(Pattern, EvenOddParity) {
  EXPECT_EQ(gamma_pattern<double>(PatternKind::even, 2, 2).values, Matrix<double>(2, 2, {1, 0, 1, 0}));
  EXPECT_EQ(gamma_pattern<double>(PatternKind::odd, 2, 2).values, Matrix<double>(2, 2, {0, 1, 0, 1}));
  const auto e = gamma_pattern<double>(PatternKind::even, 3, 5), o = gamma_pattern<double>(PatternKind::odd, 3, 5);
  for (std::size_t i = 0; i < e.values.size(); ++i) EXPECT_EQ(e.values.data()[i] + o.values.data()[i], 1.0);
}

TEST(Pattern, RandomIsSeededAndBounded) {
  const auto a = gamma_pattern<double>(PatternKind::random, 6, 4, 77);
  EXPECT_EQ(a.values, gamma_pattern<double>(PatternKind::random, 6, 4, 77).values);
  EXPECT_NE(a.values, gamma_pattern<double>(PatternKind::random, 6, 4, 78).values);
  for (double v : a.values.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(parse_pattern_kind("stripes"), ConfigError);
}

TEST(MaskParse, FractionZeroIsIdentity) {
  Rng rng(1);
  const auto p = support::random_parse(rng, 5);
  EXPECT_EQ(mask_parse(p, {0.0, 3}), p);
}

TEST(MaskParse, FullMaskKeepsDiagonal) {
  Rng rng(2);
  const auto p = support::random_parse(rng, 6);
  const auto m = mask_parse(p, {1.0, 3});
  EXPECT_TRUE(validate(m).empty());
  EXPECT_EQ(changed_cells(p, m), 6u * 5 * 4);
}

TEST(MaskParse, QuarterOfTwelveCells) {
  ParseOutput p(EDUSegmentation{"d", {{0, 1}, {1, 2}, {2, 3}}, 3}, 2);
  p.relation_types = {"A", "B"};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 2; ++k)
        if (i != j) p.at(i, j, k) = 2.0;  // sentinel outside the draw range
  EXPECT_EQ(masked_cell_count(p, 0.25), 3u);
  EXPECT_EQ(changed_cells(p, mask_parse(p, {0.25, 5})), 3u);
}

TEST(MaskParse, RejectsBadFraction) {
  Rng rng(3);
  const auto p = support::random_parse(rng, 3);
  EXPECT_THROW(mask_parse(p, {1.5, 0}), ConfigError);
  EXPECT_THROW(mask_parse(p, {-0.1, 0}), ConfigError);
}

TEST(MaskProperty, ExactCountDiagonalAndReproducible) {
  Rng rng(99);
  for (int t = 0; t < 300; ++t) {
    auto p = support::random_parse(rng, support::draw_size(rng, 2, 8), 0.0);
    for (auto& v : p.probs)
      if (v != 0.0) v = 2.0;  // every off-diagonal cell becomes a sentinel
    const double f = uniform(rng);
    const auto seed = static_cast<std::uint64_t>(uniform_int(rng, 0, 1 << 20));
    const auto m = mask_parse(p, {f, seed});
    const std::size_t cells = p.n_edu * (p.n_edu - 1) * 4;
    EXPECT_EQ(changed_cells(p, m), static_cast<std::size_t>(std::floor(f * static_cast<double>(cells) + 0.5)));
    for (std::size_t i = 0; i < p.n_edu; ++i)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(m.at(i, i, k), 0.0);
    EXPECT_EQ(m, mask_parse(p, {f, seed}));
  }
}

TEST(MaskGamma, TouchesOnlyDocumentRegion) {
  const auto g = place_gamma(Matrix<double>(4, 3, 5.0), 8, 2);
  const auto m = mask_gamma(g, {0.5, 4});
  std::size_t changed = 0;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      if (r < 2 || r >= 6) {
        EXPECT_EQ(m.values(r, c), 0.0);
      }
      changed += m.values(r, c) != g.values(r, c);
    }
  EXPECT_EQ(changed, 6u);
  EXPECT_TRUE(check_gamma(m).empty());
}
