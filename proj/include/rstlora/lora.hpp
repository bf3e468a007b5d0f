#pragma once

// Low-rank adapter math. A projection with input width A and output width B
// keeps its frozen weight W (A x B) and gains a trainable pair
// down (A x r), up (r x B):
//
//   vanilla:  h = x W + (alpha / r) * (x down) up
//   injected: h = x W + (alpha / r) * ((x . (1 + gamma)) down) up
//
// gamma only ever touches the low-rank path; the base path sees x as is.
// Dropout (training only) is applied after modulation.

#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rstlora/gamma.hpp"
#include "rstlora/random.hpp"
#include "rstlora/tensor.hpp"

namespace rstlora {

struct LoRAConfig {
  std::size_t rank = 8;
  double alpha = 32.0;
  double dropout = 0.1;
  std::vector<std::string> target_layers{"q", "k", "v", "o"};

  double scale() const { return alpha / static_cast<double>(rank); }

  void validate() const {
    if (rank < 1) throw ConfigError("lora: rank must be >= 1");
    if (!(alpha > 0.0)) throw ConfigError("lora: alpha must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("lora: dropout must lie in [0, 1)");
  }

  void check_dims(std::size_t in_dim, std::size_t out_dim) const {
    if (rank >= std::min(in_dim, out_dim))
      throw ConfigError("lora: rank " + std::to_string(rank) + " must be < min(" + std::to_string(in_dim) + ", " +
                        std::to_string(out_dim) + ")");
  }
};

template <typename T>
struct LowRank {
  Matrix<T> down;  // A x r
  Matrix<T> up;    // r x B

  std::size_t rank() const { return down.cols(); }

  /// down ~ N(0, 1/A), up = 0, so the initial delta is exactly zero.
  static LowRank init(std::size_t in_dim, std::size_t out_dim, std::size_t rank, Rng& rng) {
    LowRank lr{Matrix<T>(in_dim, rank), Matrix<T>(rank, out_dim)};
    const double sd = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (auto& v : lr.down.values()) v = static_cast<T>(normal(rng, 0.0, sd));
    return lr;
  }
};

template <typename T>
struct LowRankGrad {
  Matrix<T> down;
  Matrix<T> up;

  static LowRankGrad zeros_like(const LowRank<T>& lr) {
    return {Matrix<T>(lr.down.rows(), lr.down.cols()), Matrix<T>(lr.up.rows(), lr.up.cols())};
  }
  void zero() {
    down.fill(T{0});
    up.fill(T{0});
  }
};

/// Saved activations of one low-rank evaluation.
template <typename T>
struct LowRankCache {
  Matrix<T> input;   // modulated (and dropped) input u
  Matrix<T> hidden;  // z = u down
  Matrix<T> factor;  // du/dx elementwise; empty means identity
};

/// Per-projection knobs for the shared low-rank kernel.
template <typename T>
struct LowRankCall {
  const Matrix<T>* gamma = nullptr;  // rows >= x.rows(); only the first x.rows() rows are read
  T scale = T{1};
  T dropout = T{0};
  Rng* rng = nullptr;  // non-null enables dropout
};

/// h += scale * (drop(x . (1 + gamma)) down) up
template <typename T>
void lowrank_forward(const Matrix<T>& x, const LowRank<T>& lr, const LowRankCall<T>& call, Matrix<T>& h,
                     LowRankCache<T>* cache = nullptr) {
  detail::require(x.cols() == lr.down.rows(), "lora: input width != A");
  detail::require(h.rows() == x.rows() && h.cols() == lr.up.cols(), "lora: output shape mismatch");
  const bool modulate = call.gamma != nullptr;
  if (modulate)
    detail::require(call.gamma->cols() == x.cols() && call.gamma->rows() >= x.rows(), "lora: gamma shape != input shape");
  const bool drop = call.rng != nullptr && call.dropout > T{0};

  Matrix<T> u = x;
  Matrix<T> factor;
  if (modulate || drop) factor = Matrix<T>(x.rows(), x.cols(), T{1});
  if (modulate) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto g = call.gamma->row(i);
      auto f = factor.row(i);
      for (std::size_t j = 0; j < x.cols(); ++j) f[j] = T{1} + g[j];
    }
  }
  if (drop) {
    const T keep_scale = T{1} / (T{1} - call.dropout);
    for (auto& f : factor.values()) f = uniform(*call.rng) < static_cast<double>(call.dropout) ? T{0} : f * keep_scale;
  }
  if (!factor.empty()) {
    T* up = u.data();
    const T* fp = factor.data();
    for (std::size_t i = 0; i < u.size(); ++i) up[i] *= fp[i];
  }
  Matrix<T> z = matmul(u, lr.down);
  Matrix<T> delta = matmul(z, lr.up);
  axpy(h, call.scale, delta);
  if (cache != nullptr) {
    cache->input = std::move(u);
    cache->hidden = std::move(z);
    cache->factor = std::move(factor);
  }
}

/// Accumulates parameter gradients into `grad` and input gradient into `dx`.
template <typename T>
void lowrank_backward(const Matrix<T>& dh, const LowRank<T>& lr, T scale, const LowRankCache<T>& cache,
                      LowRankGrad<T>& grad, Matrix<T>* dx) {
  // d up = scale z^T dh ; dz = scale dh up^T ; d down = u^T dz ; du = dz down^T
  Matrix<T> sdh = scaled(dh, scale);
  matmul_tn_acc(cache.hidden, sdh, grad.up);
  Matrix<T> dz = matmul_nt(sdh, lr.up);
  matmul_tn_acc(cache.input, dz, grad.down);
  if (dx == nullptr) return;
  Matrix<T> du = matmul_nt(dz, lr.down);
  if (!cache.factor.empty()) {
    T* d = du.data();
    const T* f = cache.factor.data();
    for (std::size_t i = 0; i < du.size(); ++i) d[i] *= f[i];
  }
  add_inplace(*dx, du);
}

// ---------------------------------------------------------------------------
// Stand-alone adapter (one frozen projection plus its low-rank pair).

template <typename T>
struct LoRAAdapter {
  Matrix<T> base_weight;  // frozen, A x B
  LowRank<T> low_rank;
  LoRAConfig config;

  static LoRAAdapter create(Matrix<T> base, const LoRAConfig& cfg, Rng& rng) {
    cfg.validate();
    cfg.check_dims(base.rows(), base.cols());
    auto lr = LowRank<T>::init(base.rows(), base.cols(), cfg.rank, rng);
    return {std::move(base), std::move(lr), cfg};
  }

  T scale() const { return static_cast<T>(config.scale()); }
};

namespace detail {

template <typename T>
LowRankCall<T> adapter_call(const LoRAAdapter<T>& a, const Matrix<T>* gamma, Rng* train_rng) {
  return {gamma, a.scale(), static_cast<T>(a.config.dropout), train_rng};
}

template <typename T>
const Matrix<T>& checked_gamma(const Matrix<T>& x, const GammaMatrix<T>& gamma) {
  require(gamma.values.same_shape(x), "forward_rst: gamma shape != input shape");
  for (T v : gamma.values.values())
    if (!(v >= T{0})) throw ContractError("forward_rst: gamma must be non-negative");
  return gamma.values;
}

}  // namespace detail

/// Low-rank term alone, without the base projection.
template <typename T>
Matrix<T> adapter_path(const Matrix<T>& x, const Matrix<T>* gamma, const LoRAAdapter<T>& a, Rng* train_rng = nullptr) {
  Matrix<T> h(x.rows(), a.base_weight.cols());
  lowrank_forward(x, a.low_rank, detail::adapter_call(a, gamma, train_rng), h);
  return h;
}

/// Pass `train_rng` to enable adapter dropout; null means eval mode.
template <typename T>
Matrix<T> forward_vanilla(const Matrix<T>& x, const LoRAAdapter<T>& a, Rng* train_rng = nullptr) {
  detail::require(x.cols() == a.base_weight.rows(), "forward_vanilla: input width != A");
  Matrix<T> h = matmul(x, a.base_weight);
  lowrank_forward(x, a.low_rank, detail::adapter_call(a, static_cast<const Matrix<T>*>(nullptr), train_rng), h);
  return h;
}

template <typename T>
Matrix<T> forward_rst(const Matrix<T>& x, const GammaMatrix<T>& gamma, const LoRAAdapter<T>& a,
                      Rng* train_rng = nullptr) {
  detail::require(x.cols() == a.base_weight.rows(), "forward_rst: input width != A");
  const Matrix<T>& g = detail::checked_gamma(x, gamma);
  Matrix<T> h = matmul(x, a.base_weight);
  lowrank_forward(x, a.low_rank, detail::adapter_call(a, &g, train_rng), h);
  return h;
}

/// Gradients of sum(dh . h) for the injected forward in eval mode.
template <typename T>
struct AdapterGradients {
  Matrix<T> d_down;
  Matrix<T> d_up;
  Matrix<T> d_x;
};

template <typename T>
AdapterGradients<T> backward_rst(const Matrix<T>& x, const GammaMatrix<T>& gamma, const LoRAAdapter<T>& a,
                                 const Matrix<T>& dh) {
  const Matrix<T>& g = detail::checked_gamma(x, gamma);
  detail::require(dh.rows() == x.rows() && dh.cols() == a.base_weight.cols(), "backward_rst: dh shape mismatch");
  LowRankCache<T> cache;
  Matrix<T> h(x.rows(), a.base_weight.cols());
  lowrank_forward(x, a.low_rank, detail::adapter_call(a, &g, static_cast<Rng*>(nullptr)), h, &cache);
  auto grad = LowRankGrad<T>::zeros_like(a.low_rank);
  Matrix<T> dx = matmul_nt(dh, a.base_weight);
  lowrank_backward(dh, a.low_rank, a.scale(), cache, grad, &dx);
  return {std::move(grad.down), std::move(grad.up), std::move(dx)};
}

/// (alpha / r) * down * up
template <typename T>
Matrix<T> delta_weight(const LoRAAdapter<T>& a) {
  return scaled(matmul(a.low_rank.down, a.low_rank.up), a.scale());
}

template <typename T>
Matrix<T> merged_weight(const LoRAAdapter<T>& a) {
  Matrix<T> w = a.base_weight;
  add_inplace(w, delta_weight(a));
  return w;
}

/// Sum over layers of r (A + B).
inline std::size_t trainable_param_count(const LoRAConfig& cfg,
                                         const std::vector<std::pair<std::size_t, std::size_t>>& layer_dims) {
  cfg.validate();
  std::size_t total = 0;
  for (const auto& [a, b] : layer_dims) {
    cfg.check_dims(a, b);
    total += cfg.rank * (a + b);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Adapter checkpoint container:
//   "RSTL" | u16 version=1 | u32 header_bytes | JSON header |
//   per layer (header order): down then up as little-endian f32, row-major.
// The header carries the LoRA config and each layer's name and shapes.

template <typename T>
struct NamedLowRank {
  std::string name;
  LowRank<T> weights;
};

template <typename T>
void write_adapters(std::ostream& out, const LoRAConfig& cfg, const std::vector<NamedLowRank<T>>& layers,
                    const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header{{"config",
                         {{"rank", cfg.rank},
                          {"alpha", cfg.alpha},
                          {"dropout", cfg.dropout},
                          {"target_layers", cfg.target_layers}}},
                        {"layers", nlohmann::json::array()},
                        {"extra", extra}};
  for (const auto& l : layers)
    header["layers"].push_back({{"name", l.name},
                                {"down", {l.weights.down.rows(), l.weights.down.cols()}},
                                {"up", {l.weights.up.rows(), l.weights.up.cols()}}});
  const std::string text = header.dump();
  out.write("RSTL", 4);
  detail::put_le<std::uint16_t>(out, 1);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& l : layers) {
    for (T v : l.weights.down.values()) detail::put_f32(out, static_cast<float>(v));
    for (T v : l.weights.up.values()) detail::put_f32(out, static_cast<float>(v));
  }
}

template <typename T>
struct AdapterCheckpoint {
  LoRAConfig config;
  std::vector<NamedLowRank<T>> layers;
  nlohmann::json extra;
};

template <typename T>
AdapterCheckpoint<T> read_adapters(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || std::string(magic.data(), 4) != "RSTL") throw DataError("not an RSTL adapter checkpoint");
  if (const auto v = detail::get_le<std::uint16_t>(in); v != 1)
    throw DataError("unsupported checkpoint version " + std::to_string(v));
  const auto len = detail::get_le<std::uint32_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw DataError("truncated checkpoint header");
  AdapterCheckpoint<T> ckpt;
  try {
    const auto header = nlohmann::json::parse(text);
    const auto& c = header.at("config");
    ckpt.config.rank = c.at("rank").get<std::size_t>();
    ckpt.config.alpha = c.at("alpha").get<double>();
    ckpt.config.dropout = c.at("dropout").get<double>();
    ckpt.config.target_layers = c.at("target_layers").get<std::vector<std::string>>();
    ckpt.extra = header.value("extra", nlohmann::json::object());
    for (const auto& l : header.at("layers")) {
      const auto d = l.at("down").get<std::array<std::size_t, 2>>();
      const auto u = l.at("up").get<std::array<std::size_t, 2>>();
      ckpt.layers.push_back({l.at("name").get<std::string>(), {Matrix<T>(d[0], d[1]), Matrix<T>(u[0], u[1])}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad checkpoint header: ") + e.what());
  }
  for (auto& l : ckpt.layers) {
    for (auto& v : l.weights.down.values()) v = static_cast<T>(detail::get_f32(in));
    for (auto& v : l.weights.up.values()) v = static_cast<T>(detail::get_f32(in));
  }
  return ckpt;
}

template <typename T>
void save_adapters(const std::string& path, const LoRAConfig& cfg, const std::vector<NamedLowRank<T>>& layers,
                   const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_adapters(out, cfg, layers, extra);
}

template <typename T>
AdapterCheckpoint<T> load_adapters(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_adapters<T>(in);
}

}  // namespace rstlora
