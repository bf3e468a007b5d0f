#pragma once

// Toy pre-LayerNorm transformer in two flavours (encoder-decoder and
// decoder-only). Every weight is frozen; trainable state lives only in the
// low-rank pairs attached to named projections.
//
// Layer naming:
//   decoder-only: layer{i}.self_attn.{q,k,v,o}, layer{i}.ffn.{up,down}
//   seq2seq:      encoder.layer{i}.self_attn.*, encoder.layer{i}.ffn.*,
//                 decoder.layer{i}.self_attn.*, decoder.layer{i}.cross_attn.*,
//                 decoder.layer{i}.ffn.*
//
// Embeddings: x = E[token] + PE(position) + S[segment]; output logits are
// tied to E and scaled by 1/sqrt(d_model).

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "rstlora/lora.hpp"
#include "rstlora/random.hpp"
#include "rstlora/tensor.hpp"

namespace rstlora {

enum class Architecture { seq2seq, decoder_only };

inline Architecture parse_architecture(std::string_view s) {
  if (s == "seq2seq") return Architecture::seq2seq;
  if (s == "decoder_only") return Architecture::decoder_only;
  throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

inline std::string to_string(Architecture a) { return a == Architecture::seq2seq ? "seq2seq" : "decoder_only"; }

struct BackboneConfig {
  Architecture architecture = Architecture::decoder_only;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 1;
  /// Std-dev of the frozen projection weights; 0 means 1/sqrt(fan_in).
  double init_std = 0.0;
  /// Output logits are (h . E[t]) * logit_scale / sqrt(d_model).
  double logit_scale = 1.0;

  void validate() const {
    if (layers < 1 || heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || max_seq_len < 1)
      throw ConfigError("backbone: all sizes must be >= 1");
    if (d_model % heads != 0)
      throw ConfigError("backbone: d_model (" + std::to_string(d_model) + ") is not divisible by heads (" +
                        std::to_string(heads) + ")");
    if (!(init_std >= 0.0)) throw ConfigError("backbone: init_std must be non-negative");
    if (!(logit_scale > 0.0)) throw ConfigError("backbone: logit_scale must be positive");
  }
};

/// Closed-form parameter count of the frozen backbone.
inline std::size_t backbone_param_count(const BackboneConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t ln = 2 * d;
  const std::size_t attn = ln + 4 * (d * d + d);
  const std::size_t ffn = ln + (d * f + f) + (f * d + d);
  const std::size_t embed = c.vocab_size * d + 2 * d;
  if (c.architecture == Architecture::decoder_only) return embed + c.layers * (attn + ffn) + ln;
  return embed + c.layers * (attn + ffn) + ln + c.layers * (2 * attn + ffn) + ln;
}

template <typename T>
struct Projection {
  std::string name;
  Matrix<T> weight;  // in x out
  std::vector<T> bias;
  std::optional<LowRank<T>> lora;
  bool receives_gamma = false;
  std::size_t adapter_index = 0;

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }
};

template <typename T>
struct LayerNormParams {
  std::vector<T> gain;
  std::vector<T> bias;
};

template <typename T>
struct AttentionBlock {
  LayerNormParams<T> norm;
  Projection<T> q, k, v, o;
};

template <typename T>
struct FeedForwardBlock {
  LayerNormParams<T> norm;
  Projection<T> up, down;
};

template <typename T>
struct TransformerLayer {
  AttentionBlock<T> self_attn;
  std::optional<AttentionBlock<T>> cross_attn;
  FeedForwardBlock<T> ffn;
};

/// Evaluation switches shared by one forward pass.
template <typename T>
struct PassContext {
  T lora_scale = T{1};
  T dropout = T{0};
  Rng* rng = nullptr;  // non-null: training mode (adapter dropout on)
  bool inject = false;
};

template <typename T>
class Transformer {
 public:
  explicit Transformer(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    auto rng = make_rng(cfg.seed, "backbone.init");
    const std::size_t d = cfg.d_model;
    token_embedding_ = Matrix<T>(cfg.vocab_size, d);
    for (auto& v : token_embedding_.values()) v = static_cast<T>(normal(rng));
    segment_embedding_ = Matrix<T>(2, d);
    for (auto& v : segment_embedding_.values()) v = static_cast<T>(normal(rng));
    const std::string enc_prefix = cfg.architecture == Architecture::seq2seq ? "encoder." : "";
    for (std::size_t i = 0; i < cfg.layers; ++i)
      first_stack_.push_back(make_layer(enc_prefix + "layer" + std::to_string(i), false, rng));
    first_norm_ = make_norm();
    if (cfg.architecture == Architecture::seq2seq) {
      for (std::size_t i = 0; i < cfg.layers; ++i)
        decoder_stack_.push_back(make_layer("decoder.layer" + std::to_string(i), true, rng));
      decoder_norm_ = make_norm();
    }
    positional_ = Matrix<T>(cfg.max_seq_len, d);
    for (std::size_t p = 0; p < cfg.max_seq_len; ++p)
      for (std::size_t j = 0; j < d; j += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(d));
        positional_(p, j) = static_cast<T>(std::sin(static_cast<double>(p) * freq));
        if (j + 1 < d) positional_(p, j + 1) = static_cast<T>(std::cos(static_cast<double>(p) * freq));
      }
  }

  const BackboneConfig& config() const { return cfg_; }
  bool is_seq2seq() const { return cfg_.architecture == Architecture::seq2seq; }

  /// Every named projection, in a fixed order.
  std::vector<Projection<T>*> projections() {
    std::vector<Projection<T>*> out;
    const auto add_attn = [&out](AttentionBlock<T>& a) {
      out.insert(out.end(), {&a.q, &a.k, &a.v, &a.o});
    };
    for (auto* stack : {&first_stack_, &decoder_stack_})
      for (auto& layer : *stack) {
        add_attn(layer.self_attn);
        if (layer.cross_attn) add_attn(*layer.cross_attn);
        out.push_back(&layer.ffn.up);
        out.push_back(&layer.ffn.down);
      }
    return out;
  }

  std::vector<const Projection<T>*> projections() const {
    auto mut = const_cast<Transformer*>(this)->projections();
    return {mut.begin(), mut.end()};
  }

  /// Counts every frozen scalar by enumerating the stored tensors.
  std::size_t frozen_param_count() const {
    std::size_t n = token_embedding_.size() + segment_embedding_.size();
    for (const auto* p : projections()) n += p->weight.size() + p->bias.size();
    const auto norms = [&n](const LayerNormParams<T>& ln) { n += ln.gain.size() + ln.bias.size(); };
    for (const auto* stack : {&first_stack_, &decoder_stack_})
      for (const auto& layer : *stack) {
        norms(layer.self_attn.norm);
        if (layer.cross_attn) norms(layer.cross_attn->norm);
        norms(layer.ffn.norm);
      }
    norms(first_norm_);
    if (is_seq2seq()) norms(decoder_norm_);
    return n;
  }

  std::size_t adapter_param_count() const {
    std::size_t n = 0;
    for (const auto* p : projections())
      if (p->lora) n += p->lora->down.size() + p->lora->up.size();
    return n;
  }

  /// FNV checksum over all frozen tensors.
  std::uint64_t frozen_checksum() const {
    std::uint64_t h = checksum(token_embedding_);
    h = checksum(segment_embedding_, h);
    for (const auto* p : projections()) {
      h = checksum(p->weight, h);
      h = checksum(Matrix<T>(1, p->bias.size(), p->bias), h);
    }
    return h;
  }

  // ---- forward / backward ------------------------------------------------

  struct ProjCache {
    LowRankCache<T> lr;
  };

  struct NormCache {
    Matrix<T> xhat;
    std::vector<T> inv_std;
  };

  struct AttnCache {
    NormCache norm;
    ProjCache q, k, v, o;
    Matrix<T> qv, kv, vv;        // projected queries/keys/values
    std::vector<Matrix<T>> prob;  // per head, N x M
    bool causal = false;
  };

  struct FfnCache {
    NormCache norm;
    ProjCache up, down;
    Matrix<T> pre;  // pre-activation
  };

  struct LayerCache {
    AttnCache self;
    std::optional<AttnCache> cross;
    FfnCache ffn;
  };

  struct StackCache {
    std::vector<LayerCache> layers;
    NormCache final_norm;
  };

  /// Per-adapter gradients, indexed by Projection::adapter_index.
  using GradSet = std::vector<LowRankGrad<T>>;

  Matrix<T> embed(const std::vector<int>& tokens, std::size_t segment_boundary) const {
    if (tokens.size() > cfg_.max_seq_len)
      throw ShapeError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                       std::to_string(cfg_.max_seq_len));
    const std::size_t d = cfg_.d_model;
    Matrix<T> x(tokens.size(), d);
    for (std::size_t p = 0; p < tokens.size(); ++p) {
      const int t = tokens[p];
      if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size) throw DataError("token id out of vocabulary");
      const auto e = token_embedding_.row(static_cast<std::size_t>(t));
      const auto s = segment_embedding_.row(p >= segment_boundary ? 1 : 0);
      const auto pe = positional_.row(p);
      auto r = x.row(p);
      for (std::size_t j = 0; j < d; ++j) r[j] = e[j] + pe[j] + s[j];
    }
    return x;
  }

  /// Runs a stack over x in place. `memory` is the encoder output for
  /// cross-attention (decoder stack of seq2seq only).
  void run_stack(bool decoder_stack, Matrix<T>& x, const Matrix<T>* gamma, const Matrix<T>* memory, bool causal,
                 const PassContext<T>& ctx, StackCache* cache) const {
    const auto& stack = decoder_stack ? decoder_stack_ : first_stack_;
    if (cache) cache->layers.resize(stack.size());
    for (std::size_t li = 0; li < stack.size(); ++li) {
      const auto& layer = stack[li];
      LayerCache* lc = cache ? &cache->layers[li] : nullptr;
      {
        Matrix<T> a = attention(layer.self_attn, x, nullptr, gamma, causal, ctx, lc ? &lc->self : nullptr);
        add_inplace(x, a);
      }
      if (layer.cross_attn) {
        if (lc) lc->cross.emplace();
        Matrix<T> a = attention(*layer.cross_attn, x, memory, nullptr, false, ctx, lc ? &*lc->cross : nullptr);
        add_inplace(x, a);
      }
      Matrix<T> f = feed_forward(layer.ffn, x, gamma, ctx, lc ? &lc->ffn : nullptr);
      add_inplace(x, f);
    }
    x = layer_norm(decoder_stack ? decoder_norm_ : first_norm_, x, cache ? &cache->final_norm : nullptr);
  }

  /// Backward through a stack; dx holds d(loss)/d(stack output) on entry and
  /// d(loss)/d(stack input) on exit. Cross-attention memory gradients are
  /// accumulated into dmemory when given.
  void backward_stack(bool decoder_stack, Matrix<T>& dx, const StackCache& cache, const PassContext<T>& ctx,
                      GradSet& grads, Matrix<T>* dmemory) const {
    const auto& stack = decoder_stack ? decoder_stack_ : first_stack_;
    dx = layer_norm_backward(decoder_stack ? decoder_norm_ : first_norm_, dx, cache.final_norm);
    for (std::size_t li = stack.size(); li-- > 0;) {
      const auto& layer = stack[li];
      const auto& lc = cache.layers[li];
      add_inplace(dx, feed_forward_backward(layer.ffn, dx, lc.ffn, ctx, grads));
      if (layer.cross_attn) {
        Matrix<T> dmem(dmemory ? dmemory->rows() : 0, cfg_.d_model);
        add_inplace(dx, attention_backward(*layer.cross_attn, dx, *lc.cross, ctx, grads, &dmem));
        if (dmemory) add_inplace(*dmemory, dmem);
      }
      add_inplace(dx, attention_backward(layer.self_attn, dx, lc.self, ctx, grads, nullptr));
    }
  }

  /// Tied output projection for selected rows of a normalized hidden state.
  Matrix<T> project_logits(const Matrix<T>& hidden) const {
    Matrix<T> logits = matmul_nt(hidden, token_embedding_);
    const T s = static_cast<T>(cfg_.logit_scale / std::sqrt(static_cast<double>(cfg_.d_model)));
    for (auto& v : logits.values()) v *= s;
    return logits;
  }

  /// d(loss)/d(hidden) from d(loss)/d(logits).
  Matrix<T> project_logits_backward(const Matrix<T>& dlogits) const {
    const T s = static_cast<T>(cfg_.logit_scale / std::sqrt(static_cast<double>(cfg_.d_model)));
    return scaled(matmul(dlogits, token_embedding_), s);
  }

 private:
  LayerNormParams<T> make_norm() const {
    return {std::vector<T>(cfg_.d_model, T{1}), std::vector<T>(cfg_.d_model, T{0})};
  }

  Projection<T> make_projection(std::string name, std::size_t in, std::size_t out, Rng& rng) const {
    Projection<T> p;
    p.name = std::move(name);
    p.weight = Matrix<T>(in, out);
    const double sd = cfg_.init_std > 0.0 ? cfg_.init_std : 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : p.weight.values()) v = static_cast<T>(normal(rng, 0.0, sd));
    p.bias.assign(out, T{0});
    return p;
  }

  AttentionBlock<T> make_attention(const std::string& prefix, Rng& rng) const {
    const std::size_t d = cfg_.d_model;
    return {make_norm(), make_projection(prefix + ".q", d, d, rng), make_projection(prefix + ".k", d, d, rng),
            make_projection(prefix + ".v", d, d, rng), make_projection(prefix + ".o", d, d, rng)};
  }

  TransformerLayer<T> make_layer(const std::string& prefix, bool with_cross, Rng& rng) const {
    TransformerLayer<T> layer;
    layer.self_attn = make_attention(prefix + ".self_attn", rng);
    if (with_cross) layer.cross_attn = make_attention(prefix + ".cross_attn", rng);
    layer.ffn = {make_norm(), make_projection(prefix + ".ffn.up", cfg_.d_model, cfg_.d_ff, rng),
                 make_projection(prefix + ".ffn.down", cfg_.d_ff, cfg_.d_model, rng)};
    return layer;
  }

  static Matrix<T> layer_norm(const LayerNormParams<T>& p, const Matrix<T>& x, NormCache* cache) {
    const std::size_t n = x.rows(), d = x.cols();
    Matrix<T> y(n, d);
    if (cache) {
      cache->xhat = Matrix<T>(n, d);
      cache->inv_std.assign(n, T{0});
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = x.row(i);
      T mean{0};
      for (T v : r) mean += v;
      mean /= static_cast<T>(d);
      T var{0};
      for (T v : r) var += (v - mean) * (v - mean);
      var /= static_cast<T>(d);
      const T inv = T{1} / std::sqrt(var + static_cast<T>(1e-5));
      auto out = y.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        const T xh = (r[j] - mean) * inv;
        out[j] = xh * p.gain[j] + p.bias[j];
        if (cache) cache->xhat(i, j) = xh;
      }
      if (cache) cache->inv_std[i] = inv;
    }
    return y;
  }

  static Matrix<T> layer_norm_backward(const LayerNormParams<T>& p, const Matrix<T>& dy, const NormCache& cache) {
    const std::size_t n = dy.rows(), d = dy.cols();
    Matrix<T> dx(n, d);
    std::vector<T> g(d);
    for (std::size_t i = 0; i < n; ++i) {
      T mean_g{0}, mean_gx{0};
      for (std::size_t j = 0; j < d; ++j) {
        g[j] = dy(i, j) * p.gain[j];
        mean_g += g[j];
        mean_gx += g[j] * cache.xhat(i, j);
      }
      mean_g /= static_cast<T>(d);
      mean_gx /= static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j)
        dx(i, j) = cache.inv_std[i] * (g[j] - mean_g - cache.xhat(i, j) * mean_gx);
    }
    return dx;
  }

  static Matrix<T> project(const Projection<T>& p, const Matrix<T>& x, const Matrix<T>* gamma,
                           const PassContext<T>& ctx, ProjCache* cache) {
    Matrix<T> y = matmul(x, p.weight);
    add_row_vector(y, std::span<const T>(p.bias));
    if (p.lora) {
      LowRankCall<T> call{(ctx.inject && p.receives_gamma) ? gamma : nullptr, ctx.lora_scale, ctx.dropout, ctx.rng};
      lowrank_forward(x, *p.lora, call, y, cache ? &cache->lr : nullptr);
    }
    return y;
  }

  static Matrix<T> project_backward(const Projection<T>& p, const Matrix<T>& dy, const ProjCache& cache,
                                    const PassContext<T>& ctx, GradSet& grads) {
    Matrix<T> dx = matmul_nt(dy, p.weight);
    if (p.lora) lowrank_backward(dy, *p.lora, ctx.lora_scale, cache.lr, grads[p.adapter_index], &dx);
    return dx;
  }

  /// Multi-head attention with its own pre-norm on the query side. For
  /// cross-attention `memory` supplies keys/values (already normalized by
  /// the encoder's final norm).
  Matrix<T> attention(const AttentionBlock<T>& blk, const Matrix<T>& x, const Matrix<T>* memory,
                      const Matrix<T>* gamma, bool causal, const PassContext<T>& ctx, AttnCache* cache) const {
    Matrix<T> h = layer_norm(blk.norm, x, cache ? &cache->norm : nullptr);
    const Matrix<T>& kv_in = memory ? *memory : h;
    const Matrix<T>* kv_gamma = memory ? nullptr : gamma;
    Matrix<T> q = project(blk.q, h, gamma, ctx, cache ? &cache->q : nullptr);
    Matrix<T> k = project(blk.k, kv_in, kv_gamma, ctx, cache ? &cache->k : nullptr);
    Matrix<T> v = project(blk.v, kv_in, kv_gamma, ctx, cache ? &cache->v : nullptr);
    const std::size_t n = q.rows(), m = k.rows(), heads = cfg_.heads, dh = cfg_.d_model / heads;
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
    Matrix<T> out(n, cfg_.d_model);
    if (cache) {
      cache->prob.assign(heads, Matrix<T>());
      cache->causal = causal;
    }
    std::vector<T> scores(m);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      Matrix<T> prob(n, m);
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t limit = causal ? std::min(i + 1, m) : m;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < limit; ++j) {
          T s{0};
          for (std::size_t c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        T z{0};
        for (std::size_t j = 0; j < limit; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        for (std::size_t j = 0; j < limit; ++j) {
          const T pr = scores[j] / z;
          prob(i, j) = pr;
          for (std::size_t c = 0; c < dh; ++c) out(i, off + c) += pr * v(j, off + c);
        }
      }
      if (cache) cache->prob[hd] = std::move(prob);
    }
    Matrix<T> y = project(blk.o, out, nullptr, ctx, cache ? &cache->o : nullptr);
    if (cache) {
      cache->qv = std::move(q);
      cache->kv = std::move(k);
      cache->vv = std::move(v);
    }
    return y;
  }

  Matrix<T> attention_backward(const AttentionBlock<T>& blk, const Matrix<T>& dy, const AttnCache& cache,
                               const PassContext<T>& ctx, GradSet& grads, Matrix<T>* dmemory) const {
    Matrix<T> dctx = project_backward(blk.o, dy, cache.o, ctx, grads);
    const auto& q = cache.qv;
    const auto& k = cache.kv;
    const auto& v = cache.vv;
    const std::size_t n = q.rows(), m = k.rows(), heads = cfg_.heads, dh = cfg_.d_model / heads;
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
    Matrix<T> dq(n, cfg_.d_model), dk(m, cfg_.d_model), dv(m, cfg_.d_model);
    std::vector<T> dp(m);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const auto& prob = cache.prob[hd];
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t limit = cache.causal ? std::min(i + 1, m) : m;
        T dot{0};
        for (std::size_t j = 0; j < limit; ++j) {
          T s{0};
          for (std::size_t c = 0; c < dh; ++c) {
            s += dctx(i, off + c) * v(j, off + c);
            dv(j, off + c) += prob(i, j) * dctx(i, off + c);
          }
          dp[j] = s;
          dot += s * prob(i, j);
        }
        for (std::size_t j = 0; j < limit; ++j) {
          const T ds = prob(i, j) * (dp[j] - dot) * inv_sqrt;
          if (ds == T{0}) continue;
          for (std::size_t c = 0; c < dh; ++c) {
            dq(i, off + c) += ds * k(j, off + c);
            dk(j, off + c) += ds * q(i, off + c);
          }
        }
      }
    }
    Matrix<T> dh_in = project_backward(blk.q, dq, cache.q, ctx, grads);
    Matrix<T> dkv = project_backward(blk.k, dk, cache.k, ctx, grads);
    add_inplace(dkv, project_backward(blk.v, dv, cache.v, ctx, grads));
    if (dmemory) {
      add_inplace(*dmemory, dkv);
    } else {
      add_inplace(dh_in, dkv);
    }
    return layer_norm_backward(blk.norm, dh_in, cache.norm);
  }

  Matrix<T> feed_forward(const FeedForwardBlock<T>& blk, const Matrix<T>& x, const Matrix<T>* gamma,
                         const PassContext<T>& ctx, FfnCache* cache) const {
    Matrix<T> h = layer_norm(blk.norm, x, cache ? &cache->norm : nullptr);
    Matrix<T> pre = project(blk.up, h, gamma, ctx, cache ? &cache->up : nullptr);
    Matrix<T> act = pre;
    for (auto& v : act.values()) v = std::max(v, T{0});
    Matrix<T> y = project(blk.down, act, nullptr, ctx, cache ? &cache->down : nullptr);
    if (cache) cache->pre = std::move(pre);
    return y;
  }

  Matrix<T> feed_forward_backward(const FeedForwardBlock<T>& blk, const Matrix<T>& dy, const FfnCache& cache,
                                  const PassContext<T>& ctx, GradSet& grads) const {
    Matrix<T> dact = project_backward(blk.down, dy, cache.down, ctx, grads);
    for (std::size_t i = 0; i < dact.size(); ++i)
      if (cache.pre.data()[i] <= T{0}) dact.data()[i] = T{0};
    Matrix<T> dh = project_backward(blk.up, dact, cache.up, ctx, grads);
    return layer_norm_backward(blk.norm, dh, cache.norm);
  }

  BackboneConfig cfg_;
  Matrix<T> token_embedding_;
  Matrix<T> segment_embedding_;
  Matrix<T> positional_;
  std::vector<TransformerLayer<T>> first_stack_;  // decoder-only stack, or the encoder
  LayerNormParams<T> first_norm_;
  std::vector<TransformerLayer<T>> decoder_stack_;  // seq2seq only
  LayerNormParams<T> decoder_norm_;
};

template <typename T>
Transformer<T> build_backbone(const BackboneConfig& cfg) {
  return Transformer<T>(cfg);
}

// ---------------------------------------------------------------------------
// Adapted model

struct InjectionOptions {
  bool rst_enabled = true;
  /// Restrict gamma to the first layer's projections.
  bool first_layer_only = false;
  /// Projection kinds (suffixes) that receive gamma.
  std::vector<std::string> gamma_sites{"q", "k", "v"};
};

namespace detail {

inline bool name_matches(const std::string& name, const std::string& target) {
  if (name == target) return true;
  return name.size() > target.size() && name.compare(name.size() - target.size(), target.size(), target) == 0 &&
         name[name.size() - target.size() - 1] == '.';
}

}  // namespace detail

/// One training/inference example. For decoder-only models `tokens` is
/// <s> document <sep> summary and gamma rows align with it; for seq2seq,
/// `source` is the document (gamma rows align with it) and `tokens` is the
/// decoder input <s> summary.
template <typename T>
struct ModelInput {
  std::vector<int> source;
  std::vector<int> tokens;
  std::size_t segment_boundary = 0;  // decoder-only: first position of segment 1
  const Matrix<T>* gamma = nullptr;
};

template <typename T>
class AdaptedModel {
 public:
  AdaptedModel(Transformer<T> net, LoRAConfig lora, InjectionOptions inject, std::uint64_t seed)
      : net_(std::move(net)), lora_(std::move(lora)), inject_(std::move(inject)) {
    lora_.validate();
    auto rng = make_rng(seed, "lora.init");
    std::set<std::string> matched;
    std::size_t index = 0;
    for (auto* p : net_.projections()) {
      bool hit = false;
      for (const auto& t : lora_.target_layers)
        if (detail::name_matches(p->name, t)) {
          hit = true;
          matched.insert(t);
        }
      if (!hit) continue;
      lora_.check_dims(p->in_dim(), p->out_dim());
      p->lora = LowRank<T>::init(p->in_dim(), p->out_dim(), lora_.rank, rng);
      p->adapter_index = index++;
      p->receives_gamma = inject_.rst_enabled && document_aligned(p->name);
      if (p->receives_gamma) gamma_targets_.insert(p->name);
      adapters_.push_back(p);
    }
    for (const auto& t : lora_.target_layers)
      if (!matched.count(t)) throw ConfigError("attach_lora: unknown target layer '" + t + "'");
  }

  AdaptedModel(const AdaptedModel& o) : net_(o.net_), lora_(o.lora_), inject_(o.inject_), gamma_targets_(o.gamma_targets_) {
    relink();
  }
  AdaptedModel& operator=(const AdaptedModel& o) {
    if (this != &o) {
      net_ = o.net_;
      lora_ = o.lora_;
      inject_ = o.inject_;
      gamma_targets_ = o.gamma_targets_;
      relink();
    }
    return *this;
  }
  AdaptedModel(AdaptedModel&& o)
      : net_(std::move(o.net_)), lora_(std::move(o.lora_)), inject_(std::move(o.inject_)),
        gamma_targets_(std::move(o.gamma_targets_)) {
    relink();
  }

  const Transformer<T>& backbone() const { return net_; }
  const LoRAConfig& lora_config() const { return lora_; }
  const InjectionOptions& injection() const { return inject_; }
  bool rst_enabled() const { return inject_.rst_enabled; }
  const std::set<std::string>& gamma_targets() const { return gamma_targets_; }
  std::size_t max_seq_len() const { return net_.config().max_seq_len; }
  std::size_t d_model() const { return net_.config().d_model; }
  bool is_seq2seq() const { return net_.is_seq2seq(); }

  std::vector<Projection<T>*>& adapters() { return adapters_; }
  std::vector<const Projection<T>*> adapters() const { return {adapters_.begin(), adapters_.end()}; }

  std::size_t trainable_param_count() const { return net_.adapter_param_count(); }

  /// Backbone with every adapter folded into its base weight (W + dW) and
  /// the adapters removed.
  Transformer<T> merged_backbone() const {
    Transformer<T> out = net_;
    const T scale = static_cast<T>(lora_.scale());
    for (auto* p : out.projections()) {
      if (!p->lora) continue;
      add_inplace(p->weight, scaled(matmul(p->lora->down, p->lora->up), scale));
      p->lora.reset();
      p->receives_gamma = false;
    }
    return out;
  }

  typename Transformer<T>::GradSet zero_grads() const {
    typename Transformer<T>::GradSet g;
    for (const auto* p : adapters_) g.push_back(LowRankGrad<T>::zeros_like(*p->lora));
    return g;
  }

  std::vector<NamedLowRank<T>> snapshot() const {
    std::vector<NamedLowRank<T>> out;
    for (const auto* p : adapters_) out.push_back({p->name, *p->lora});
    return out;
  }

  void restore(const std::vector<NamedLowRank<T>>& weights) {
    for (const auto& w : weights) {
      auto it = std::find_if(adapters_.begin(), adapters_.end(), [&](auto* p) { return p->name == w.name; });
      if (it == adapters_.end()) throw DataError("checkpoint layer '" + w.name + "' is not an adapter of this model");
      if (!(*it)->lora->down.same_shape(w.weights.down) || !(*it)->lora->up.same_shape(w.weights.up))
        throw ShapeError("checkpoint layer '" + w.name + "' has mismatched shapes");
      *(*it)->lora = w.weights;
    }
  }

  /// Logits for every decoder position (eval mode).
  Matrix<T> logits(const ModelInput<T>& in) const {
    PassContext<T> ctx = context(nullptr);
    Matrix<T> hidden = hidden_states(in, ctx, nullptr);
    return net_.project_logits(hidden);
  }

  /// Logits of the last decoder position only.
  std::vector<T> last_logits(const ModelInput<T>& in) const {
    PassContext<T> ctx = context(nullptr);
    Matrix<T> hidden = hidden_states(in, ctx, nullptr);
    Matrix<T> last = hidden.slice_rows(hidden.rows() - 1, hidden.rows());
    Matrix<T> lg = net_.project_logits(last);
    return {lg.values().begin(), lg.values().end()};
  }

  /// Sum of token cross-entropies over positions with target >= 0. Adds
  /// weight * d(sum)/d(adapter) into grads. Dropout is active iff rng.
  T loss_and_grad(const ModelInput<T>& in, const std::vector<int>& targets, T weight,
                  typename Transformer<T>::GradSet& grads, Rng* rng) const {
    PassContext<T> ctx = context(rng);
    Cache cache;
    Matrix<T> hidden = hidden_states(in, ctx, &cache);
    if (targets.size() != hidden.rows()) throw ShapeError("targets length != decoder length");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (targets[i] >= 0) rows.push_back(i);
    Matrix<T> picked(rows.size(), hidden.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(hidden.row(rows[r]).begin(), hidden.row(rows[r]).end(), picked.row(r).begin());
    Matrix<T> lg = net_.project_logits(picked);
    T loss{0};
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto row = lg.row(r);
      const T mx = *std::max_element(row.begin(), row.end());
      T z{0};
      for (auto& v : row) {
        v = std::exp(v - mx);
        z += v;
      }
      const auto tgt = static_cast<std::size_t>(targets[rows[r]]);
      loss += -(std::log(row[tgt]) - std::log(z));
      for (auto& v : row) v = v / z * weight;
      row[tgt] -= weight;
    }
    Matrix<T> dpicked = net_.project_logits_backward(lg);
    Matrix<T> dhidden(hidden.rows(), hidden.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(dpicked.row(r).begin(), dpicked.row(r).end(), dhidden.row(rows[r]).begin());
    backward(dhidden, cache, ctx, grads);
    return loss;
  }

 private:
  struct Cache {
    typename Transformer<T>::StackCache first;
    typename Transformer<T>::StackCache decoder;
    Matrix<T> memory;
  };

  PassContext<T> context(Rng* rng) const {
    return {static_cast<T>(lora_.scale()), static_cast<T>(lora_.dropout), rng, inject_.rst_enabled};
  }

  bool document_aligned(const std::string& name) const {
    // Only self-attention/ffn inputs of the stack that reads the document.
    const bool seq2seq = net_.is_seq2seq();
    if (seq2seq && name.rfind("encoder.", 0) != 0) return false;
    if (name.find("cross_attn") != std::string::npos) return false;
    if (inject_.first_layer_only) {
      const std::string first = seq2seq ? "encoder.layer0." : "layer0.";
      if (name.rfind(first, 0) != 0) return false;
    }
    for (const auto& site : inject_.gamma_sites)
      if (detail::name_matches(name, site)) return true;
    return false;
  }

  void relink() {
    adapters_.clear();
    std::vector<Projection<T>*> all = net_.projections();
    std::vector<Projection<T>*> with;
    for (auto* p : all)
      if (p->lora) with.push_back(p);
    std::sort(with.begin(), with.end(), [](auto* a, auto* b) { return a->adapter_index < b->adapter_index; });
    adapters_ = std::move(with);
  }

  const Matrix<T>* checked_gamma(const ModelInput<T>& in, std::size_t rows) const {
    if (in.gamma == nullptr || !inject_.rst_enabled) return nullptr;
    if (in.gamma->rows() < rows || in.gamma->cols() != net_.config().d_model)
      throw ShapeError("gamma shape does not cover the layer input");
    return in.gamma;
  }

  Matrix<T> hidden_states(const ModelInput<T>& in, const PassContext<T>& ctx, Cache* cache) const {
    if (!net_.is_seq2seq()) {
      Matrix<T> x = net_.embed(in.tokens, in.segment_boundary);
      net_.run_stack(false, x, checked_gamma(in, in.tokens.size()), nullptr, true, ctx,
                     cache ? &cache->first : nullptr);
      return x;
    }
    Matrix<T> mem = net_.embed(in.source, in.source.size());
    net_.run_stack(false, mem, checked_gamma(in, in.source.size()), nullptr, false, ctx,
                   cache ? &cache->first : nullptr);
    Matrix<T> x = net_.embed(in.tokens, 0);
    net_.run_stack(true, x, nullptr, &mem, true, ctx, cache ? &cache->decoder : nullptr);
    if (cache) cache->memory = std::move(mem);
    return x;
  }

  void backward(Matrix<T>& dhidden, const Cache& cache, const PassContext<T>& ctx,
                typename Transformer<T>::GradSet& grads) const {
    if (!net_.is_seq2seq()) {
      net_.backward_stack(false, dhidden, cache.first, ctx, grads, nullptr);
      return;
    }
    Matrix<T> dmem(cache.memory.rows(), cache.memory.cols());
    net_.backward_stack(true, dhidden, cache.decoder, ctx, grads, &dmem);
    net_.backward_stack(false, dmem, cache.first, ctx, grads, nullptr);
  }

  Transformer<T> net_;
  LoRAConfig lora_;
  InjectionOptions inject_;
  std::set<std::string> gamma_targets_;
  std::vector<Projection<T>*> adapters_;
};

/// Freezes the backbone and zero-initializes adapters on every target layer.
/// Adapter init draws from `adapter_seed`, or the backbone seed if unset.
template <typename T>
AdaptedModel<T> attach_lora(Transformer<T> model, const LoRAConfig& cfg, bool rst_enabled,
                            InjectionOptions inject = {}, std::optional<std::uint64_t> adapter_seed = std::nullopt) {
  inject.rst_enabled = rst_enabled;
  const auto seed = adapter_seed.value_or(model.config().seed);
  return AdaptedModel<T>(std::move(model), cfg, std::move(inject), seed);
}

/// Frozen-backbone logits (no adapters) for comparison with the adapted model.
template <typename T>
Matrix<T> backbone_logits(const Transformer<T>& net, const ModelInput<T>& in) {
  LoRAConfig none;
  none.target_layers.clear();
  AdaptedModel<T> plain(net, none, InjectionOptions{false, false, {}}, net.config().seed);
  return plain.logits(in);
}

}  // namespace rstlora
