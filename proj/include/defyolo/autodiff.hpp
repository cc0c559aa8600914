#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "defyolo/tensor.hpp"

namespace defyolo {

// Reverse-mode tape. Ops append one node in execution order as they run;
// execution order is a topological order of the value graph, so replaying the
// nodes backwards propagates gradients correctly and visits each node once.
// Multi-consumer tensors accumulate additively because every backward rule
// does "+=" into the input grad buffers.
template <typename T>
class Tape {
public:
    void record(const char* op_id, std::function<void()> backward_fn) {
        nodes_.push_back(Node{op_id, std::move(backward_fn)});
    }

    // Seeds d(loss)/d(loss)=1 and runs all recorded rules in reverse order.
    void backward(const TensorPtr<T>& loss) {
        if (!loss->is_scalar())
            throw std::runtime_error("backward: loss must be scalar, got " + loss->shape.str());
        if (!loss->requires_grad)
            throw std::runtime_error("backward: loss does not require grad");
        loss->grad[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    }

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        const char* op_id;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
};

// True when the output of an op reading these inputs should itself be
// differentiable (some input is on the tape).
template <typename T>
inline bool needs_grad(Tape<T>* tape, std::initializer_list<const TensorPtr<T>*> ins) {
    if (!tape) return false;
    for (auto* p : ins)
        if (*p && (*p)->requires_grad) return true;
    return false;
}

// Central-difference gradient check. `forward` must rebuild its graph on a
// fresh tape every call and return a scalar loss; the listed inputs are
// perturbed elementwise. Returns max over elements of |a-n|/max(1,|a|,|n|).
// Double precision only; single-precision differences drown in rounding.
inline double grad_check(const std::function<TensorPtr<double>(Tape<double>&)>& forward,
                         const std::vector<TensorPtr<double>>& inputs, double eps) {
    if (eps < 1e-6 || eps > 1e-3)
        throw std::invalid_argument("grad_check: eps must be in [1e-6, 1e-3]");

    for (auto& in : inputs) in->zero_grad();
    Tape<double> tape;
    auto loss = forward(tape);
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) analytic.push_back(in->grad);

    double max_err = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto& x = inputs[t]->data;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double keep = x[i];
            x[i] = keep + eps;
            Tape<double> tp;
            double fp = forward(tp)->scalar();
            x[i] = keep - eps;
            Tape<double> tm;
            double fm = forward(tm)->scalar();
            x[i] = keep;

            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[t][i];
            double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace defyolo
