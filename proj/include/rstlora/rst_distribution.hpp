#pragma once

#include <string>
#include <string_view>

#include "rstlora/parser_io.hpp"
#include "rstlora/tensor.hpp"

namespace rstlora {

/// Binary vs probabilistic, without vs with relation labels.
enum class Variant { b_wo, b_w, p_wo, p_w };

inline Variant parse_variant(std::string_view tag) {
  if (tag == "b_wo") return Variant::b_wo;
  if (tag == "b_w") return Variant::b_w;
  if (tag == "p_wo") return Variant::p_wo;
  if (tag == "p_w") return Variant::p_w;
  throw ConfigError("unknown variant '" + std::string(tag) + "' (expected b_wo, b_w, p_wo or p_w)");
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::b_wo: return "b_wo";
    case Variant::b_w: return "b_w";
    case Variant::p_wo: return "p_wo";
    case Variant::p_w: return "p_w";
  }
  return "?";
}

inline bool label_aware(Variant v) { return v == Variant::b_w || v == Variant::p_w; }
inline bool binary(Variant v) { return v == Variant::b_w || v == Variant::b_wo; }

struct MergeOptions {
  /// Average over all n_edu columns instead of the n_edu - 1 off-diagonal ones.
  bool include_diagonal = false;
  /// Threshold the merged indices instead of the raw tensor.
  bool binarize_after_merge = false;
  double threshold = 0.5;
};

/// Per-EDU importance indices. values is n_edu x k for label-aware variants
/// and n_edu x 1 otherwise.
struct RSTDistribution {
  Variant variant = Variant::p_w;
  Matrix<double> values;

  std::size_t n_edu() const { return values.rows(); }
  std::size_t width() const { return values.cols(); }
};

/// out(i, k) = mean over j != i of probs(i, j, k).
inline Matrix<double> importance_index(const ParseOutput& parse, bool include_diagonal = false) {
  if (parse.n_edu < 2) throw DataError("degenerate document '" + parse.segmentation.doc_id + "': need at least 2 EDUs");
  const std::size_t n = parse.n_edu, kr = parse.k_relations;
  Matrix<double> out(n, kr);
  const double denom = static_cast<double>(include_diagonal ? n : n - 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < kr; ++k) {
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) sum += parse.at(i, j, k);
      out(i, k) = sum / denom;
    }
  return out;
}

/// Off-diagonal cells >= threshold become 1, all others 0.
inline ParseOutput binarize_tensor(const ParseOutput& parse, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("binarize threshold must lie in (0, 1]");
  ParseOutput out = parse;
  for (std::size_t i = 0; i < parse.n_edu; ++i)
    for (std::size_t j = 0; j < parse.n_edu; ++j)
      for (std::size_t k = 0; k < parse.k_relations; ++k)
        out.at(i, j, k) = (i != j && parse.at(i, j, k) >= threshold) ? 1.0 : 0.0;
  return out;
}

/// Row means across the relation axis.
inline Matrix<double> collapse_labels(const Matrix<double>& values) {
  Matrix<double> out(values.rows(), 1);
  if (values.cols() == 0) return out;
  for (std::size_t i = 0; i < values.rows(); ++i) {
    double sum = 0.0;
    for (double v : values.row(i)) sum += v;
    out(i, 0) = sum / static_cast<double>(values.cols());
  }
  return out;
}

inline RSTDistribution make_variant(const ParseOutput& parse, Variant variant, const MergeOptions& opts = {}) {
  Matrix<double> labelled;
  if (!binary(variant)) {
    labelled = importance_index(parse, opts.include_diagonal);
  } else if (!opts.binarize_after_merge) {
    labelled = importance_index(binarize_tensor(parse, opts.threshold), opts.include_diagonal);
  } else {
    if (!(opts.threshold > 0.0 && opts.threshold <= 1.0)) throw ConfigError("binarize threshold must lie in (0, 1]");
    labelled = importance_index(parse, opts.include_diagonal);
    for (auto& v : labelled.values()) v = v >= opts.threshold ? 1.0 : 0.0;
  }
  RSTDistribution dist;
  dist.variant = variant;
  dist.values = label_aware(variant) ? std::move(labelled) : collapse_labels(labelled);
  return dist;
}

inline RSTDistribution make_variant(const ParseOutput& parse, std::string_view tag, const MergeOptions& opts = {}) {
  return make_variant(parse, parse_variant(tag), opts);
}

/// Text form shared with the gamma header: variant, shape, row-major values.
inline json to_json(const RSTDistribution& dist) {
  return json{{"variant", to_string(dist.variant)},
              {"shape", {dist.values.rows(), dist.values.cols()}},
              {"values", std::vector<double>(dist.values.values().begin(), dist.values.values().end())}};
}

inline RSTDistribution distribution_from_json(const json& j) {
  try {
    RSTDistribution dist;
    dist.variant = parse_variant(j.at("variant").get<std::string>());
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw DataError("distribution shape must have two entries");
    dist.values = Matrix<double>(shape[0], shape[1], j.at("values").get<std::vector<double>>());
    return dist;
  } catch (const json::exception& e) {
    throw DataError(std::string("bad distribution record: ") + e.what());
  }
}

}  // namespace rstlora
