#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "rstlora/lora.hpp"

namespace rstlora {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-9;
  double weight_decay = 0.1;
};

/// Linear warm-up from 0 to `base` over round(warmup_ratio * total) steps,
/// then cosine decay to 0 at `total`.
inline double scheduled_lr(std::size_t step, std::size_t total, double base, double warmup_ratio) {
  if (total == 0) return 0.0;
  const auto warm = static_cast<std::size_t>(std::floor(warmup_ratio * static_cast<double>(total) + 0.5));
  if (step < warm) return base * static_cast<double>(step) / static_cast<double>(warm);
  if (total <= warm) return base;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

/// Adam with decoupled weight decay over a list of low-rank pairs.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<LowRank<T>*>& params, const std::vector<LowRankGrad<T>>& grads, double lr) {
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.push_back(LowRankGrad<T>::zeros_like(*p));
        v_.push_back(LowRankGrad<T>::zeros_like(*p));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      update(params[i]->down, grads[i].down, m_[i].down, v_[i].down, lr, c1, c2);
      update(params[i]->up, grads[i].up, m_[i].up, v_[i].up, lr, c1, c2);
    }
  }

  std::size_t steps() const { return t_; }

 private:
  void update(Matrix<T>& w, const Matrix<T>& g, Matrix<T>& m, Matrix<T>& v, double lr, double c1, double c2) {
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = g.data()[i];
      T& mi = m.data()[i];
      T& vi = v.data()[i];
      mi = b1 * mi + (T{1} - b1) * gi;
      vi = b2 * vi + (T{1} - b2) * gi * gi;
      const double mhat = static_cast<double>(mi) / c1;
      const double vhat = static_cast<double>(vi) / c2;
      double wi = static_cast<double>(w.data()[i]);
      wi -= lr * cfg_.weight_decay * wi;
      wi -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      w.data()[i] = static_cast<T>(wi);
    }
  }

  AdamConfig cfg_;
  std::vector<LowRankGrad<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace rstlora
