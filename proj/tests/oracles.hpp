#pragma once

// Independent reference implementations used only by tests. These stay
// deliberately naive (nested loops, direct formulas) so they cannot share a
// bug with the library's optimized paths.

#include <algorithm>
#include <cmath>
#include <vector>

#include "defyolo/tensor.hpp"

namespace oracle {

// Direct six-loop convolution with zero padding.
template <typename T>
defyolo::TensorPtr<T> conv2d_naive(const defyolo::TensorPtr<T>& x,
                                   const defyolo::TensorPtr<T>& w,
                                   const defyolo::TensorPtr<T>& bias, int stride, int pad) {
    const int N = x->shape.n, C = x->shape.c, H = x->shape.h, W = x->shape.w;
    const int Co = w->shape.n, k = w->shape.h;
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    auto out = defyolo::make_tensor<T>(N, Co, Ho, Wo);
    for (int n = 0; n < N; ++n)
        for (int oc = 0; oc < Co; ++oc)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    T acc = bias ? bias->data[oc] : T(0);
                    for (int ic = 0; ic < C; ++ic)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += w->at(oc, ic, ky, kx) * x->at(n, ic, iy, ix);
                            }
                    out->at(n, oc, oy, ox) = acc;
                }
    return out;
}

template <typename T>
defyolo::TensorPtr<T> maxpool_naive(const defyolo::TensorPtr<T>& x, int k, int stride, int pad) {
    const int N = x->shape.n, C = x->shape.c, H = x->shape.h, W = x->shape.w;
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    auto out = defyolo::make_tensor<T>(N, C, Ho, Wo);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    T best = T(0);
                    bool seen = false;
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = oy * stride - pad + ky;
                            const int ix = ox * stride - pad + kx;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            const T v = x->at(n, c, iy, ix);
                            if (!seen || v > best) best = v, seen = true;
                        }
                    out->at(n, c, oy, ox) = best;
                }
    return out;
}

// Four-term bilinear formula written out directly.
template <typename T>
T bilinear_naive(const T* plane, int h, int w, T y, T x) {
    auto px = [&](int yy, int xx) -> T {
        return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? plane[yy * w + xx] : T(0);
    };
    if (y <= T(-1) || y >= T(h) || x <= T(-1) || x >= T(w)) return T(0);
    const int y0 = (int)std::floor(y), x0 = (int)std::floor(x);
    const T a = y - y0, b = x - x0;
    return px(y0, x0) * (1 - a) * (1 - b) + px(y0, x0 + 1) * (1 - a) * b +
           px(y0 + 1, x0) * a * (1 - b) + px(y0 + 1, x0 + 1) * a * b;
}

}  // namespace oracle
