// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "comer/tensor.hpp"

namespace comer {

// SGD with classical momentum and decoupled-from-nothing weight decay folded
// into the gradient:
//   v <- momentum * v + (grad + weight_decay * param)
//   param <- param - lr * v
template <typename T>
class Sgd {
  public:
    Sgd(std::vector<Tensor<T>> params, T lr, T momentum, T weight_decay)
        : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
        velocity_.reserve(params_.size());
        for (const auto& p : params_) velocity_.emplace_back(size_t(p.size()), T(0));
    }

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }

    void step() {
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            check_as<StateError>(p.has_grad(), "sgd: parameter has no gradient");
            T* v = velocity_[i].data();
            T* w = p.mutable_values().data();
            const T* g = p.grad().data();
            Index n = p.size();
            ArrMap<T> mv(v, n);
            mv = momentum_ * mv + (ConstArrMap<T>(g, n) + weight_decay_ * ConstArrMap<T>(w, n));
            ArrMap<T>(w, n) -= lr_ * mv;
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // Momentum state, exposed so checkpoints can persist and restore it.
    const std::vector<std::vector<T>>& velocity() const { return velocity_; }
    std::vector<std::vector<T>>& mutable_velocity() { return velocity_; }

  private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> velocity_;
    T lr_, momentum_, weight_decay_;
};

}  // namespace comer
