#pragma once

// Small generators shared by the property tests. Everything is driven by a
// seeded Rng so failures replay.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rstlora/parser_io.hpp"
#include "rstlora/random.hpp"
#include "rstlora/tensor.hpp"

namespace rstlora::support {

inline std::size_t draw_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

template <typename T>
Matrix<T> random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double lo = -1.0, double hi = 1.0) {
  Matrix<T> m(rows, cols);
  for (auto& v : m.values()) v = static_cast<T>(uniform(rng, lo, hi));
  return m;
}

inline EDUSegmentation random_segmentation(Rng& rng, std::size_t n_edu, std::size_t max_len = 4) {
  EDUSegmentation seg;
  seg.doc_id = "g";
  std::size_t pos = 0;
  for (std::size_t e = 0; e < n_edu; ++e) {
    const auto len = draw_size(rng, 1, max_len);
    seg.spans.push_back({pos, pos + len});
    pos += len;
  }
  seg.token_count = pos;
  return seg;
}

/// Random valid parse; `sparsity` is the chance an off-diagonal cell stays 0.
inline ParseOutput random_parse(Rng& rng, std::size_t n_edu, double sparsity = 0.3) {
  ParseOutput p(random_segmentation(rng, n_edu), 4);
  for (std::size_t i = 0; i < n_edu; ++i)
    for (std::size_t j = 0; j < n_edu; ++j)
      for (std::size_t k = 0; k < 4; ++k)
        if (i != j && uniform(rng) >= sparsity) p.at(i, j, k) = uniform(rng);
  return p;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("rstlora_test_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace rstlora::support
