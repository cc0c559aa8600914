#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "defyolo/autodiff.hpp"
#include "defyolo/tensor.hpp"

namespace defyolo {

// All ops are pure: they allocate and return a fresh output tensor and, when
// given a tape and a differentiable input, record one backward rule. Passing
// tape=nullptr runs inference-only. Shape errors throw std::invalid_argument.

enum class BinaryKind { Add, Sub, Mul, Div, Min, Max };
enum class UnaryKind { Neg, Exp, Log, Sqrt, Square, Atan, Sigmoid, Silu, Softplus };

template <typename T>
TensorPtr<T> elementwise(Tape<T>* tape, BinaryKind kind, const TensorPtr<T>& a,
                         const TensorPtr<T>& b);
template <typename T>
TensorPtr<T> elementwise_scalar(Tape<T>* tape, BinaryKind kind, const TensorPtr<T>& a, T s);

template <typename T>
TensorPtr<T> add(Tape<T>* t, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    return elementwise(t, BinaryKind::Add, a, b);
}
template <typename T>
TensorPtr<T> sub(Tape<T>* t, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    return elementwise(t, BinaryKind::Sub, a, b);
}
template <typename T>
TensorPtr<T> mul(Tape<T>* t, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    return elementwise(t, BinaryKind::Mul, a, b);
}

template <typename T>
TensorPtr<T> unary(Tape<T>* tape, UnaryKind kind, const TensorPtr<T>& x);

template <typename T>
TensorPtr<T> clamp(Tape<T>* tape, const TensorPtr<T>& x, T lo, T hi);

template <typename T>
TensorPtr<T> sum_all(Tape<T>* tape, const TensorPtr<T>& x);

// --- shape plumbing ---

template <typename T>
TensorPtr<T> flatten_hw(Tape<T>* tape, const TensorPtr<T>& x);  // (n,c,h,w)->(n,c,1,hw)

template <typename T>
TensorPtr<T> concat_channels(Tape<T>* tape, const std::vector<TensorPtr<T>>& xs);

template <typename T>
TensorPtr<T> concat_w(Tape<T>* tape, const std::vector<TensorPtr<T>>& xs);

template <typename T>
TensorPtr<T> slice_channels(Tape<T>* tape, const TensorPtr<T>& x, int c0, int c1);

// Gathers columns (b, a) of an anchor-major tensor (B,C,1,A) into (1,C,1,P).
template <typename T>
TensorPtr<T> gather_w(Tape<T>* tape, const TensorPtr<T>& x,
                      const std::vector<std::pair<int, int>>& picks);

// Max over the channel axis; gradient routes to the first maximizing channel.
template <typename T>
TensorPtr<T> channel_max(Tape<T>* tape, const TensorPtr<T>& x);

template <typename T>
TensorPtr<T> softmax_channel(Tape<T>* tape, const TensorPtr<T>& x);

// --- convolution ---

template <typename T>
struct ConvParams {
    TensorPtr<T> weight;            // (c_out, c_in, k, k), k in {1,3}
    TensorPtr<T> bias;              // (1, c_out, 1, 1) or null
    int stride = 1;
    int padding = 0;

    int c_out() const { return weight->shape.n; }
    int c_in() const { return weight->shape.c; }
    int k() const { return weight->shape.h; }
};

template <typename T>
struct DeformConvParams {
    ConvParams<T> base;
    ConvParams<T> offset;  // predicts 2*k*k channels: (dy,dx) per tap
};

template <typename T>
Shape4 conv_out_shape(const Shape4& in, const ConvParams<T>& p);

template <typename T>
TensorPtr<T> conv2d(Tape<T>* tape, const TensorPtr<T>& x, const ConvParams<T>& p);

template <typename T>
TensorPtr<T> deform_conv2d(Tape<T>* tape, const TensorPtr<T>& x, const DeformConvParams<T>& p);

// Single-plane bilinear lookup; coordinates at or beyond one pixel outside
// the plane contribute zero, matching zero padding.
template <typename T>
T bilinear_sample(const T* plane, int h, int w, T y, T x);

// d(sample)/dy, d(sample)/dx at (y, x).
template <typename T>
void bilinear_coord_grad(const T* plane, int h, int w, T y, T x, T& gy, T& gx);

// --- batch norm ---

template <typename T>
struct BnParams {
    TensorPtr<T> gamma;         // (1,c,1,1)
    TensorPtr<T> beta;          // (1,c,1,1)
    TensorPtr<T> running_mean;  // (1,c,1,1), buffer
    TensorPtr<T> running_var;   // (1,c,1,1), buffer, > 0
    T eps = T(1e-5);
    T momentum = T(0.03);
};

// Training mode normalizes with batch statistics and folds them into the
// running buffers; inference mode uses the running buffers.
template <typename T>
TensorPtr<T> batchnorm2d(Tape<T>* tape, const TensorPtr<T>& x, BnParams<T>& p, bool training);

// --- pooling / resampling ---

template <typename T>
TensorPtr<T> maxpool2d(Tape<T>* tape, const TensorPtr<T>& x, int k = 5, int stride = 1,
                       int pad = 2);

template <typename T>
TensorPtr<T> upsample_nearest2x(Tape<T>* tape, const TensorPtr<T>& x);

// --- fused loss kernels ---

// sum_i w_i * (softplus(x_i) - x_i * t_i); weights may be null (all ones).
template <typename T>
TensorPtr<T> bce_with_logits_sum(Tape<T>* tape, const TensorPtr<T>& logits,
                                 const TensorPtr<T>& targets, const TensorPtr<T>& weights);

// Distribution-focal expectation: logits (1, 4*reg_max, 1, P) -> (1,4,1,P),
// each side decoded as sum_j j * softmax(logits_side)_j.
template <typename T>
TensorPtr<T> dfl_expect(Tape<T>* tape, const TensorPtr<T>& dist_logits, int reg_max);

// Interpolated cross entropy on the two bins bracketing each target.
// dist_logits (1,4*reg_max,1,P), targets (1,4,1,P), weights (1,1,1,P).
template <typename T>
TensorPtr<T> dfl_loss_sum(Tape<T>* tape, const TensorPtr<T>& dist_logits,
                          const TensorPtr<T>& targets, const TensorPtr<T>& weights, int reg_max);

// --- dense kernels used by the conv path (exposed for tests/benchmarks) ---
namespace detail {

// C(m,n) += A(m,k) * B(k,n), all row-major contiguous. Deterministic for any
// thread count: parallelism is over disjoint row blocks of C.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int m, int k, int n);

// C(m,n) += A(k,m)^T * B(k,n)
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int m, int k, int n);

// C(m,n) += A(m,k) * B(n,k)^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int m, int k, int n);

}  // namespace detail

}  // namespace defyolo
