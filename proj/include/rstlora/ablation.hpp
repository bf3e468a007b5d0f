#pragma once

// Control conditions and parser-degradation transforms.

#include <numeric>
#include <string_view>

#include "rstlora/gamma.hpp"
#include "rstlora/parser_io.hpp"
#include "rstlora/random.hpp"

namespace rstlora {

enum class PatternKind { even, odd, random };

inline PatternKind parse_pattern_kind(std::string_view s) {
  if (s == "even") return PatternKind::even;
  if (s == "odd") return PatternKind::odd;
  if (s == "random") return PatternKind::random;
  throw ConfigError("unknown ablation kind '" + std::string(s) + "' (expected even, odd or random)");
}

/// Even/odd parity is taken over the 0-based row-major flattened index;
/// random entries are i.i.d. Uniform[0, 1).
template <typename T>
GammaMatrix<T> gamma_pattern(PatternKind kind, std::size_t seq_len, std::size_t d_model, std::uint64_t seed = 0) {
  auto g = zero_gamma<T>(seq_len, d_model);
  auto vals = g.values.values();
  if (kind == PatternKind::random) {
    auto rng = make_rng(seed, "ablation.random");
    for (auto& v : vals) v = static_cast<T>(uniform(rng));
    return g;
  }
  const std::size_t want = kind == PatternKind::even ? 0 : 1;
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = (i % 2 == want) ? T{1} : T{0};
  return g;
}

struct MaskSpec {
  double fraction = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("mask fraction must lie in [0, 1]");
  }
};

/// round-half-up(fraction * off-diagonal cell count)
inline std::size_t masked_cell_count(const ParseOutput& parse, double fraction) {
  const std::size_t cells = parse.n_edu * (parse.n_edu - (parse.n_edu > 0 ? 1 : 0)) * parse.k_relations;
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(cells) + 0.5));
}

/// Replaces a seeded uniform choice of off-diagonal cells with fresh
/// Uniform[0, 1) draws. The diagonal stays zero.
inline ParseOutput mask_parse(const ParseOutput& parse, const MaskSpec& spec) {
  spec.validate();
  ParseOutput out = parse;
  std::vector<std::size_t> cells;
  for (std::size_t i = 0; i < parse.n_edu; ++i)
    for (std::size_t j = 0; j < parse.n_edu; ++j)
      if (i != j)
        for (std::size_t k = 0; k < parse.k_relations; ++k) cells.push_back((i * parse.n_edu + j) * parse.k_relations + k);
  const std::size_t m = masked_cell_count(parse, spec.fraction);
  auto rng = make_rng(spec.seed, "ablation.mask");
  // Partial Fisher-Yates: the first m entries are the selection.
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(i), static_cast<std::int64_t>(cells.size()) - 1));
    std::swap(cells[i], cells[j]);
  }
  for (std::size_t i = 0; i < m; ++i) out.probs[cells[i]] = uniform(rng);
  return out;
}

/// Masks the document region of a gamma matrix directly (sensitivity
/// comparison against masking the parse).
template <typename T>
GammaMatrix<T> mask_gamma(const GammaMatrix<T>& g, const MaskSpec& spec) {
  spec.validate();
  GammaMatrix<T> out = g;
  const std::size_t width = g.d_model();
  std::vector<std::size_t> cells((g.doc_end - g.doc_start) * width);
  std::iota(cells.begin(), cells.end(), g.doc_start * width);
  const auto m = static_cast<std::size_t>(std::floor(spec.fraction * static_cast<double>(cells.size()) + 0.5));
  auto rng = make_rng(spec.seed, "ablation.mask_gamma");
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(i), static_cast<std::int64_t>(cells.size()) - 1));
    std::swap(cells[i], cells[j]);
  }
  for (std::size_t i = 0; i < m; ++i) out.values.data()[cells[i]] = static_cast<T>(uniform(rng));
  return out;
}

}  // namespace rstlora
