#pragma once

// Token-level gamma matrices (seq_len x d_model) broadcast from EDU-level
// importance indices, plus the little-endian .rstg container:
//   "RSTG" | u16 version=1 | u32 seq_len | u32 d_model | u32 doc_start |
//   u32 doc_end | f32 values[seq_len * d_model] (row-major)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "rstlora/rst_distribution.hpp"
#include "rstlora/tensor.hpp"

namespace rstlora {

/// How a k-vector of relation channels fills d_model columns.
enum class ChannelLayout {
  kTile,  // column c takes channel c mod k
  kBand,  // k contiguous bands of ceil(d/k) columns
};

template <typename T>
struct GammaMatrix {
  Matrix<T> values;
  std::size_t doc_start = 0;
  std::size_t doc_end = 0;  // exclusive

  std::size_t seq_len() const { return values.rows(); }
  std::size_t d_model() const { return values.cols(); }

  template <typename U>
  GammaMatrix<U> cast() const {
    return {values.template cast<U>(), doc_start, doc_end};
  }
};

template <typename T>
GammaMatrix<T> zero_gamma(std::size_t seq_len, std::size_t d_model) {
  if (seq_len == 0 || d_model == 0) throw ShapeError("zero_gamma: dimensions must be positive");
  return {Matrix<T>(seq_len, d_model), 0, seq_len};
}

inline std::size_t channel_for_column(std::size_t col, std::size_t d_model, std::size_t k, ChannelLayout layout) {
  if (layout == ChannelLayout::kTile) return col % k;
  const std::size_t band = (d_model + k - 1) / k;
  return std::min(col / band, k - 1);
}

template <typename T>
GammaMatrix<T> project_gamma(const RSTDistribution& dist, const EDUSegmentation& seg, std::size_t seq_len,
                             std::size_t d_model, std::size_t doc_offset,
                             ChannelLayout layout = ChannelLayout::kTile) {
  if (d_model == 0) throw ShapeError("project_gamma: d_model must be positive");
  if (doc_offset + seg.token_count > seq_len)
    throw ShapeError("project_gamma: segmentation overruns seq_len (" + std::to_string(doc_offset + seg.token_count) +
                     " > " + std::to_string(seq_len) + ")");
  if (dist.n_edu() != seg.spans.size()) throw ShapeError("project_gamma: distribution rows != EDU count");
  const std::size_t k = dist.width();
  GammaMatrix<T> g{Matrix<T>(seq_len, d_model), doc_offset, doc_offset + seg.token_count};
  for (std::size_t e = 0; e < seg.spans.size(); ++e) {
    for (std::size_t t = seg.spans[e].start; t < seg.spans[e].end; ++t) {
      auto row = g.values.row(doc_offset + t);
      for (std::size_t c = 0; c < d_model; ++c) {
        const double v = k == 1 ? dist.values(e, 0) : dist.values(e, channel_for_column(c, d_model, k, layout));
        row[c] = static_cast<T>(v);
      }
    }
  }
  return g;
}

/// Embeds a doc-sized pattern (rows = document tokens) at doc_offset inside
/// a seq_len-row matrix; everything else is zero.
template <typename T>
GammaMatrix<T> place_gamma(const Matrix<T>& doc_rows, std::size_t seq_len, std::size_t doc_offset) {
  if (doc_offset + doc_rows.rows() > seq_len) throw ShapeError("place_gamma: pattern overruns seq_len");
  GammaMatrix<T> g{Matrix<T>(seq_len, doc_rows.cols()), doc_offset, doc_offset + doc_rows.rows()};
  for (std::size_t r = 0; r < doc_rows.rows(); ++r)
    std::copy(doc_rows.row(r).begin(), doc_rows.row(r).end(), g.values.row(doc_offset + r).begin());
  return g;
}

/// Invariant violations: negativity, non-zero rows outside the document
/// region, and (when a segmentation is given) rows differing within an EDU.
template <typename T>
std::vector<std::string> check_gamma(const GammaMatrix<T>& g, const EDUSegmentation* seg = nullptr) {
  std::vector<std::string> report;
  if (g.doc_start > g.doc_end || g.doc_end > g.seq_len()) report.emplace_back("doc_region out of bounds");
  bool negative = false, outside = false;
  for (std::size_t r = 0; r < g.seq_len(); ++r) {
    const bool in_doc = r >= g.doc_start && r < g.doc_end;
    for (T v : g.values.row(r)) {
      if (!(v >= T{0})) negative = true;
      if (!in_doc && v != T{0}) outside = true;
    }
  }
  if (negative) report.emplace_back("negative gamma entry");
  if (outside) report.emplace_back("nonzero gamma outside doc_region");
  if (seg != nullptr) {
    for (const auto& span : seg->spans) {
      for (std::size_t t = span.start + 1; t < span.end; ++t) {
        const auto a = g.values.row(g.doc_start + span.start), b = g.values.row(g.doc_start + t);
        if (!std::equal(a.begin(), a.end(), b.begin())) {
          report.emplace_back("rows differ within an EDU span");
          return report;
        }
      }
    }
  }
  return report;
}

namespace detail {

template <typename U>
void put_le(std::ostream& out, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(std::istream& in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw DataError("unexpected end of binary stream");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<U>(v);
}

inline void put_f32(std::ostream& out, float f) { put_le(out, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& in) { return std::bit_cast<float>(get_le<std::uint32_t>(in)); }

}  // namespace detail

template <typename T>
void write_rstg(std::ostream& out, const GammaMatrix<T>& g) {
  out.write("RSTG", 4);
  detail::put_le<std::uint16_t>(out, 1);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.seq_len()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.d_model()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.doc_start));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.doc_end));
  for (T v : g.values.values()) detail::put_f32(out, static_cast<float>(v));
}

template <typename T>
GammaMatrix<T> read_rstg(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || std::string(magic.data(), 4) != "RSTG") throw DataError("not an RSTG gamma file");
  const auto version = detail::get_le<std::uint16_t>(in);
  if (version != 1) throw DataError("unsupported RSTG version " + std::to_string(version));
  const auto seq_len = detail::get_le<std::uint32_t>(in);
  const auto d_model = detail::get_le<std::uint32_t>(in);
  GammaMatrix<T> g;
  g.doc_start = detail::get_le<std::uint32_t>(in);
  g.doc_end = detail::get_le<std::uint32_t>(in);
  g.values = Matrix<T>(seq_len, d_model);
  for (auto& v : g.values.values()) v = static_cast<T>(detail::get_f32(in));
  return g;
}

template <typename T>
void save_rstg(const std::string& path, const GammaMatrix<T>& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_rstg(out, g);
}

template <typename T>
GammaMatrix<T> load_rstg(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_rstg<T>(in);
}

}  // namespace rstlora
