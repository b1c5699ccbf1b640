#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>

#include "gazeclr/errors.hpp"
#include "gazeclr/nn/tensor.hpp"

namespace gazeclr::nn {

/// Cosine-annealed learning rate: lr0 (1 + cos(pi step / total)) / 2.
inline double cosine_lr(long step, long total_steps, double lr0) {
  if (total_steps <= 0) throw RangeError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw RangeError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  if (step == total_steps) return 0.0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

/// SGD with heavy-ball momentum and L2 weight decay (PyTorch semantics):
///   v <- mu v + (g + wd w);  w <- w - lr v
template <typename T>
class Sgd {
 public:
  Sgd(ParameterList<T> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (auto* p : params_) {
      if (p->trainable) velocity_[p] = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(p->size());
    }
  }

  void step(double lr) {
    const T mu = T(momentum_), wd = T(weight_decay_), rate = T(lr);
    for (auto* p : params_) {
      if (!p->trainable) continue;
      auto& v = velocity_.at(p);
      if (wd != T(0)) {
        v = mu * v + p->grad + wd * p->value;
      } else {
        v = mu * v + p->grad;
      }
      p->value -= rate * v;
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  const ParameterList<T>& parameters() const noexcept { return params_; }

 private:
  ParameterList<T> params_;
  double momentum_, weight_decay_;
  std::unordered_map<Parameter<T>*, Eigen::Matrix<T, Eigen::Dynamic, 1>> velocity_;
};

}  // namespace gazeclr::nn
