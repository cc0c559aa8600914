#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "defyolo/tensor.hpp"

namespace defyolo {

// SGD with classic momentum and decoupled-from-nothing weight decay folded
// into the gradient:  v <- momentum*v + g + wd*w;  w <- w - lr*v
template <typename T>
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<TensorPtr<T>> params, T lr, T momentum = T(0), T weight_decay = T(0))
        : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
        if (!(lr > T(0))) throw std::invalid_argument("sgd: lr must be positive");
        if (momentum < T(0) || momentum >= T(1))
            throw std::invalid_argument("sgd: momentum must be in [0,1)");
        if (weight_decay < T(0)) throw std::invalid_argument("sgd: weight_decay must be >= 0");
        buffers_.reserve(params_.size());
        for (auto& p : params_) buffers_.emplace_back(p->size(), T(0));
    }

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }

    void step() {
        for (std::size_t t = 0; t < params_.size(); ++t) {
            auto& p = *params_[t];
            auto& v = buffers_[t];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const T g = p.grad[i] + weight_decay_ * p.data[i];
                v[i] = momentum_ * v[i] + g;
                p.data[i] -= lr_ * v[i];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

private:
    std::vector<TensorPtr<T>> params_;
    std::vector<std::vector<T>> buffers_;
    T lr_, momentum_, weight_decay_;
};

// Per-epoch learning rate: linear ramp 0 -> lr0 across the warmup epochs,
// then cosine from lr0 down to lr_final. `epoch` may be fractional so the
// schedule can advance per optimizer step.
inline double lr_schedule(double epoch, double warmup_epochs, double total_epochs, double lr0,
                          double lr_final) {
    if (epoch < 0.0 || epoch > total_epochs)
        throw std::invalid_argument("lr_schedule: step out of range");
    if (warmup_epochs > 0.0 && epoch < warmup_epochs) return lr0 * (epoch / warmup_epochs);
    const double span = total_epochs - warmup_epochs;
    const double t = span > 0.0 ? (epoch - warmup_epochs) / span : 1.0;
    return lr_final + (lr0 - lr_final) * (1.0 + std::cos(M_PI * t)) / 2.0;
}

}  // namespace defyolo
