#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "rlcore/networks.hpp"

namespace rlcore {

// Gradient descent with Adam-style first/second-moment accumulation
// (beta1=0.9, beta2=0.999, eps=1e-8). Operates directly on a ParamStore's
// trainable entries; the same optimizer contract backs PPO, distillation and
// the RND predictor.
class Adam {
 public:
  // The filter limits the optimizer to a parameter subset (e.g. the RND
  // predictor gets its own optimizer and learning rate).
  explicit Adam(ParamStore& store, float lr = 1e-3f,
                const std::function<bool(const Param&)>& filter = {})
      : store_(&store), lr_(lr) {
    const auto& params = store.entries();
    for (size_t i = 0; i < params.size(); ++i) {
      if (!params[i].trainable) continue;
      if (filter && !filter(params[i])) continue;
      indices_.push_back(i);
      m_.emplace_back(params[i].value.numel(), 0.0f);
      v_.emplace_back(params[i].value.numel(), 0.0f);
    }
  }

  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }

  void step() {
    ++t_;
    const float bc1 = 1.0f - std::pow(0.9f, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(0.999f, static_cast<float>(t_));
    const auto& params = store_->entries();
    for (size_t k = 0; k < indices_.size(); ++k) {
      const auto& p = params[indices_[k]];
      if (p.value.grad().empty()) continue;
      auto data = const_cast<Param&>(p).value.mutable_data();
      auto grad = p.value.grad();
      for (size_t j = 0; j < data.size(); ++j) {
        const float g = grad[j];
        m_[k][j] = 0.9f * m_[k][j] + 0.1f * g;
        v_[k][j] = 0.999f * v_[k][j] + 0.001f * g * g;
        const float mhat = m_[k][j] / bc1;
        const float vhat = v_[k][j] / bc2;
        data[j] -= lr_ * mhat / (std::sqrt(vhat) + 1e-8f);
      }
    }
  }

 private:
  ParamStore* store_;
  float lr_;
  int64_t t_ = 0;
  std::vector<size_t> indices_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

// Scales all trainable gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline float clip_grad_norm(ParamStore& store, float max_norm) {
  double sq = 0.0;
  for (const auto& p : store.entries()) {
    if (!p.trainable) continue;
    for (float g : p.value.grad()) sq += static_cast<double>(g) * g;
  }
  const float norm = static_cast<float>(std::sqrt(sq));
  if (norm > max_norm && norm > 0.0f) {
    const float scale = max_norm / norm;
    for (auto& p : store.entries()) {
      auto& grad = const_cast<Param&>(p).value.impl()->grad;
      for (auto& g : grad) g *= scale;
    }
  }
  return norm;
}

}  // namespace rlcore
