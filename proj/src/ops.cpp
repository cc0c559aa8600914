#include "defyolo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace defyolo {

namespace {
int g_threads = 0;
}

void set_num_threads(int n) { g_threads = n; }

int num_threads() {
    if (g_threads > 0) return g_threads;
    if (const char* env = std::getenv("DEFYOLO_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
#ifdef _OPENMP
    return omp_get_num_procs();
#else
    return 1;
#endif
}

namespace detail {

template <typename T>
void transpose(const T* src, T* dst, int rows, int cols) {
    constexpr int B = 32;
    for (int r0 = 0; r0 < rows; r0 += B)
        for (int c0 = 0; c0 < cols; c0 += B) {
            int r1 = std::min(r0 + B, rows), c1 = std::min(c0 + B, cols);
            for (int r = r0; r < r1; ++r)
                for (int c = c0; c < c1; ++c) dst[(std::size_t)c * rows + r] = src[(std::size_t)r * cols + c];
        }
}

// Row-blocked axpy GEMM. Each thread owns disjoint rows of C, so results are
// bit-identical for any thread count.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    constexpr int MR = 8;
    const int nblocks = (m + MR - 1) / MR;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) if (nblocks > 1)
#endif
    for (int blk = 0; blk < nblocks; ++blk) {
        const int i0 = blk * MR;
        const int ib = std::min(MR, m - i0);
        for (int kk = 0; kk < k; ++kk) {
            const T* brow = b + (std::size_t)kk * n;
            for (int r = 0; r < ib; ++r) {
                const T av = a[(std::size_t)(i0 + r) * k + kk];
                if (av == T(0)) continue;
                T* crow = c + (std::size_t)(i0 + r) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    std::vector<T> at((std::size_t)m * k);
    transpose(a, at.data(), k, m);
    gemm_acc(at.data(), b, c, m, k, n);
}

template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    std::vector<T> bt((std::size_t)k * n);
    transpose(b, bt.data(), n, k);
    gemm_acc(a, bt.data(), c, m, k, n);
}

template void transpose<float>(const float*, float*, int, int);
template void transpose<double>(const double*, double*, int, int);
template void gemm_acc<float>(const float*, const float*, float*, int, int, int);
template void gemm_acc<double>(const double*, const double*, double*, int, int, int);
template void gemm_tn_acc<float>(const float*, const float*, float*, int, int, int);
template void gemm_tn_acc<double>(const double*, const double*, double*, int, int, int);
template void gemm_nt_acc<float>(const float*, const float*, float*, int, int, int);
template void gemm_nt_acc<double>(const double*, const double*, double*, int, int, int);

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / unary
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_same_shape(const TensorPtr<T>& a, const TensorPtr<T>& b, const char* op) {
    if (a->shape != b->shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->shape.str() +
                                    " vs " + b->shape.str());
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

template <typename T>
TensorPtr<T> elementwise(Tape<T>* tape, BinaryKind kind, const TensorPtr<T>& a,
                         const TensorPtr<T>& b) {
    check_same_shape(a, b, "elementwise");
    auto out = make_tensor<T>(a->shape);
    const std::size_t n = a->size();
    const T* pa = a->data.data();
    const T* pb = b->data.data();
    T* po = out->data.data();
    switch (kind) {
        case BinaryKind::Add:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
            break;
        case BinaryKind::Sub:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
            break;
        case BinaryKind::Mul:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
            break;
        case BinaryKind::Div:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
            break;
        case BinaryKind::Min:
            for (std::size_t i = 0; i < n; ++i) po[i] = std::min(pa[i], pb[i]);
            break;
        case BinaryKind::Max:
            for (std::size_t i = 0; i < n; ++i) po[i] = std::max(pa[i], pb[i]);
            break;
    }
    if (needs_grad(tape, {&a, &b})) {
        out->set_requires_grad(true);
        tape->record("elementwise", [kind, a, b, out]() {
            const std::size_t n = out->size();
            const T* g = out->grad.data();
            const T* pa = a->data.data();
            const T* pb = b->data.data();
            T* ga = a->requires_grad ? a->grad.data() : nullptr;
            T* gb = b->requires_grad ? b->grad.data() : nullptr;
            for (std::size_t i = 0; i < n; ++i) {
                switch (kind) {
                    case BinaryKind::Add:
                        if (ga) ga[i] += g[i];
                        if (gb) gb[i] += g[i];
                        break;
                    case BinaryKind::Sub:
                        if (ga) ga[i] += g[i];
                        if (gb) gb[i] -= g[i];
                        break;
                    case BinaryKind::Mul:
                        if (ga) ga[i] += g[i] * pb[i];
                        if (gb) gb[i] += g[i] * pa[i];
                        break;
                    case BinaryKind::Div:
                        if (ga) ga[i] += g[i] / pb[i];
                        if (gb) gb[i] -= g[i] * pa[i] / (pb[i] * pb[i]);
                        break;
                    case BinaryKind::Min:
                        if (pa[i] <= pb[i]) {
                            if (ga) ga[i] += g[i];
                        } else if (gb) {
                            gb[i] += g[i];
                        }
                        break;
                    case BinaryKind::Max:
                        if (pa[i] >= pb[i]) {
                            if (ga) ga[i] += g[i];
                        } else if (gb) {
                            gb[i] += g[i];
                        }
                        break;
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> elementwise_scalar(Tape<T>* tape, BinaryKind kind, const TensorPtr<T>& a, T s) {
    auto out = make_tensor<T>(a->shape);
    const std::size_t n = a->size();
    const T* pa = a->data.data();
    T* po = out->data.data();
    switch (kind) {
        case BinaryKind::Add:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + s;
            break;
        case BinaryKind::Sub:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - s;
            break;
        case BinaryKind::Mul:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * s;
            break;
        case BinaryKind::Div:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / s;
            break;
        case BinaryKind::Min:
            for (std::size_t i = 0; i < n; ++i) po[i] = std::min(pa[i], s);
            break;
        case BinaryKind::Max:
            for (std::size_t i = 0; i < n; ++i) po[i] = std::max(pa[i], s);
            break;
    }
    if (needs_grad(tape, {&a})) {
        out->set_requires_grad(true);
        tape->record("elementwise_scalar", [kind, a, s, out]() {
            const std::size_t n = out->size();
            const T* g = out->grad.data();
            const T* pa = a->data.data();
            T* ga = a->grad.data();
            for (std::size_t i = 0; i < n; ++i) {
                switch (kind) {
                    case BinaryKind::Add:
                    case BinaryKind::Sub:
                        ga[i] += g[i];
                        break;
                    case BinaryKind::Mul:
                        ga[i] += g[i] * s;
                        break;
                    case BinaryKind::Div:
                        ga[i] += g[i] / s;
                        break;
                    case BinaryKind::Min:
                        if (pa[i] <= s) ga[i] += g[i];
                        break;
                    case BinaryKind::Max:
                        if (pa[i] >= s) ga[i] += g[i];
                        break;
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> unary(Tape<T>* tape, UnaryKind kind, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    const std::size_t n = x->size();
    const T* px = x->data.data();
    T* po = out->data.data();
    switch (kind) {
        case UnaryKind::Neg:
            for (std::size_t i = 0; i < n; ++i) po[i] = -px[i];
            break;
        case UnaryKind::Exp:
            for (std::size_t i = 0; i < n; ++i) po[i] = std::exp(px[i]);
            break;
        case UnaryKind::Log:
            for (std::size_t i = 0; i < n; ++i) po[i] = std::log(px[i]);
            break;
        case UnaryKind::Sqrt:
            for (std::size_t i = 0; i < n; ++i) po[i] = std::sqrt(px[i]);
            break;
        case UnaryKind::Square:
            for (std::size_t i = 0; i < n; ++i) po[i] = px[i] * px[i];
            break;
        case UnaryKind::Atan:
            for (std::size_t i = 0; i < n; ++i) po[i] = std::atan(px[i]);
            break;
        case UnaryKind::Sigmoid:
            for (std::size_t i = 0; i < n; ++i) po[i] = stable_sigmoid(px[i]);
            break;
        case UnaryKind::Silu:
            for (std::size_t i = 0; i < n; ++i) po[i] = px[i] * stable_sigmoid(px[i]);
            break;
        case UnaryKind::Softplus:
            for (std::size_t i = 0; i < n; ++i) po[i] = stable_softplus(px[i]);
            break;
    }
    if (needs_grad(tape, {&x})) {
        out->set_requires_grad(true);
        tape->record("unary", [kind, x, out]() {
            const std::size_t n = out->size();
            const T* g = out->grad.data();
            const T* px = x->data.data();
            const T* po = out->data.data();
            T* gx = x->grad.data();
            for (std::size_t i = 0; i < n; ++i) {
                T d;
                switch (kind) {
                    case UnaryKind::Neg: d = T(-1); break;
                    case UnaryKind::Exp: d = po[i]; break;
                    case UnaryKind::Log: d = T(1) / px[i]; break;
                    case UnaryKind::Sqrt: d = T(0.5) / po[i]; break;
                    case UnaryKind::Square: d = T(2) * px[i]; break;
                    case UnaryKind::Atan: d = T(1) / (T(1) + px[i] * px[i]); break;
                    case UnaryKind::Sigmoid: d = po[i] * (T(1) - po[i]); break;
                    case UnaryKind::Silu: {
                        T s = stable_sigmoid(px[i]);
                        d = s + px[i] * s * (T(1) - s);
                        break;
                    }
                    case UnaryKind::Softplus: d = stable_sigmoid(px[i]); break;
                    default: d = T(0); break;
                }
                gx[i] += g[i] * d;
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> clamp(Tape<T>* tape, const TensorPtr<T>& x, T lo, T hi) {
    auto out = make_tensor<T>(x->shape);
    const std::size_t n = x->size();
    for (std::size_t i = 0; i < n; ++i) out->data[i] = std::min(std::max(x->data[i], lo), hi);
    if (needs_grad(tape, {&x})) {
        out->set_requires_grad(true);
        tape->record("clamp", [x, out, lo, hi]() {
            for (std::size_t i = 0; i < out->size(); ++i)
                if (x->data[i] >= lo && x->data[i] <= hi) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sum_all(Tape<T>* tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(1, 1, 1, 1);
    T acc = T(0);
    for (T v : x->data) acc += v;
    out->data[0] = acc;
    if (needs_grad(tape, {&x})) {
        out->set_requires_grad(true);
        tape->record("sum_all", [x, out]() {
            const T g = out->grad[0];
            for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> flatten_hw(Tape<T>* tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape.n, x->shape.c, 1, x->shape.h * x->shape.w);
    out->data = x->data;  // identical row-major layout
    if (needs_grad(tape, {&x})) {
        out->set_requires_grad(true);
        tape->record("flatten_hw", [x, out]() {
            for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> concat_channels(Tape<T>* tape, const std::vector<TensorPtr<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
    int ctot = 0;
    for (auto& x : xs) {
        if (x->shape.n != xs[0]->shape.n || x->shape.h != xs[0]->shape.h ||
            x->shape.w != xs[0]->shape.w)
            throw std::invalid_argument("concat_channels: spatial/batch mismatch " +
                                        x->shape.str() + " vs " + xs[0]->shape.str());
        ctot += x->shape.c;
    }
    auto out = make_tensor<T>(xs[0]->shape.n, ctot, xs[0]->shape.h, xs[0]->shape.w);
    const std::size_t plane = (std::size_t)xs[0]->shape.h * xs[0]->shape.w;
    for (int in = 0; in < out->shape.n; ++in) {
        std::size_t coff = 0;
        for (auto& x : xs) {
            std::memcpy(out->data.data() + (in * (std::size_t)ctot + coff) * plane,
                        x->data.data() + (std::size_t)in * x->shape.c * plane,
                        x->shape.c * plane * sizeof(T));
            coff += x->shape.c;
        }
    }
    bool any = false;
    for (auto& x : xs) any = any || (tape && x->requires_grad);
    if (any) {
        out->set_requires_grad(true);
        tape->record("concat_channels", [xs, out, plane, ctot]() {
            for (int in = 0; in < out->shape.n; ++in) {
                std::size_t coff = 0;
                for (auto& x : xs) {
                    if (x->requires_grad) {
                        const T* g = out->grad.data() + (in * (std::size_t)ctot + coff) * plane;
                        T* gx = x->grad.data() + (std::size_t)in * x->shape.c * plane;
                        for (std::size_t i = 0; i < x->shape.c * plane; ++i) gx[i] += g[i];
                    }
                    coff += x->shape.c;
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> concat_w(Tape<T>* tape, const std::vector<TensorPtr<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_w: empty input list");
    int wtot = 0;
    for (auto& x : xs) {
        if (x->shape.n != xs[0]->shape.n || x->shape.c != xs[0]->shape.c ||
            x->shape.h != xs[0]->shape.h)
            throw std::invalid_argument("concat_w: shape mismatch");
        wtot += x->shape.w;
    }
    auto out = make_tensor<T>(xs[0]->shape.n, xs[0]->shape.c, xs[0]->shape.h, wtot);
    const int rows = out->shape.n * out->shape.c * out->shape.h;
    for (int r = 0; r < rows; ++r) {
        std::size_t woff = 0;
        for (auto& x : xs) {
            std::memcpy(out->data.data() + (std::size_t)r * wtot + woff,
                        x->data.data() + (std::size_t)r * x->shape.w, x->shape.w * sizeof(T));
            woff += x->shape.w;
        }
    }
    bool any = false;
    for (auto& x : xs) any = any || (tape && x->requires_grad);
    if (any) {
        out->set_requires_grad(true);
        tape->record("concat_w", [xs, out, rows, wtot]() {
            for (int r = 0; r < rows; ++r) {
                std::size_t woff = 0;
                for (auto& x : xs) {
                    if (x->requires_grad) {
                        const T* g = out->grad.data() + (std::size_t)r * wtot + woff;
                        T* gx = x->grad.data() + (std::size_t)r * x->shape.w;
                        for (int i = 0; i < x->shape.w; ++i) gx[i] += g[i];
                    }
                    woff += x->shape.w;
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> slice_channels(Tape<T>* tape, const TensorPtr<T>& x, int c0, int c1) {
    if (c0 < 0 || c1 > x->shape.c || c0 >= c1)
        throw std::invalid_argument("slice_channels: bad range");
    auto out = make_tensor<T>(x->shape.n, c1 - c0, x->shape.h, x->shape.w);
    const std::size_t plane = (std::size_t)x->shape.h * x->shape.w;
    for (int in = 0; in < x->shape.n; ++in)
        std::memcpy(out->data.data() + (std::size_t)in * out->shape.c * plane,
                    x->data.data() + ((std::size_t)in * x->shape.c + c0) * plane,
                    (c1 - c0) * plane * sizeof(T));
    if (needs_grad(tape, {&x})) {
        out->set_requires_grad(true);
        tape->record("slice_channels", [x, out, c0, plane]() {
            for (int in = 0; in < x->shape.n; ++in) {
                const T* g = out->grad.data() + (std::size_t)in * out->shape.c * plane;
                T* gx = x->grad.data() + ((std::size_t)in * x->shape.c + c0) * plane;
                for (std::size_t i = 0; i < out->shape.c * plane; ++i) gx[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> gather_w(Tape<T>* tape, const TensorPtr<T>& x,
                      const std::vector<std::pair<int, int>>& picks) {
    if (x->shape.h != 1) throw std::invalid_argument("gather_w: expects (B,C,1,A) layout");
    const int C = x->shape.c, A = x->shape.w;
    auto out = make_tensor<T>(1, C, 1, (int)picks.size());
    for (std::size_t p = 0; p < picks.size(); ++p) {
        auto [b, a] = picks[p];
        for (int ch = 0; ch < C; ++ch)
            out->data[(std::size_t)ch * picks.size() + p] =
                x->data[((std::size_t)b * C + ch) * A + a];
    }
    if (needs_grad(tape, {&x})) {
        out->set_requires_grad(true);
        tape->record("gather_w", [x, out, picks, C, A]() {
            for (std::size_t p = 0; p < picks.size(); ++p) {
                auto [b, a] = picks[p];
                for (int ch = 0; ch < C; ++ch)
                    x->grad[((std::size_t)b * C + ch) * A + a] +=
                        out->grad[(std::size_t)ch * picks.size() + p];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> channel_max(Tape<T>* tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape.n, 1, x->shape.h, x->shape.w);
    const std::size_t plane = (std::size_t)x->shape.h * x->shape.w;
    auto argmax = std::make_shared<std::vector<int>>(x->shape.n * plane);
    for (int in = 0; in < x->shape.n; ++in)
        for (std::size_t i = 0; i < plane; ++i) {
            const T* base = x->data.data() + (std::size_t)in * x->shape.c * plane + i;
            T best = base[0];
            int bc = 0;
            for (int c = 1; c < x->shape.c; ++c)
                if (base[(std::size_t)c * plane] > best) {
                    best = base[(std::size_t)c * plane];
                    bc = c;
                }
            out->data[in * plane + i] = best;
            (*argmax)[in * plane + i] = bc;
        }
    if (needs_grad(tape, {&x})) {
        out->set_requires_grad(true);
        tape->record("channel_max", [x, out, argmax, plane]() {
            for (int in = 0; in < x->shape.n; ++in)
                for (std::size_t i = 0; i < plane; ++i) {
                    int bc = (*argmax)[in * plane + i];
                    x->grad[((std::size_t)in * x->shape.c + bc) * plane + i] +=
                        out->grad[in * plane + i];
                }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> softmax_channel(Tape<T>* tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    const std::size_t plane = (std::size_t)x->shape.h * x->shape.w;
    const int C = x->shape.c;
    for (int in = 0; in < x->shape.n; ++in)
        for (std::size_t i = 0; i < plane; ++i) {
            const T* px = x->data.data() + (std::size_t)in * C * plane + i;
            T* po = out->data.data() + (std::size_t)in * C * plane + i;
            T mx = px[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, px[(std::size_t)c * plane]);
            T z = T(0);
            for (int c = 0; c < C; ++c) {
                T e = std::exp(px[(std::size_t)c * plane] - mx);
                po[(std::size_t)c * plane] = e;
                z += e;
            }
            for (int c = 0; c < C; ++c) po[(std::size_t)c * plane] /= z;
        }
    if (needs_grad(tape, {&x})) {
        out->set_requires_grad(true);
        tape->record("softmax_channel", [x, out, plane, C]() {
            for (int in = 0; in < x->shape.n; ++in)
                for (std::size_t i = 0; i < plane; ++i) {
                    const T* po = out->data.data() + (std::size_t)in * C * plane + i;
                    const T* g = out->grad.data() + (std::size_t)in * C * plane + i;
                    T dot = T(0);
                    for (int c = 0; c < C; ++c)
                        dot += g[(std::size_t)c * plane] * po[(std::size_t)c * plane];
                    T* gx = x->grad.data() + (std::size_t)in * C * plane + i;
                    for (int c = 0; c < C; ++c)
                        gx[(std::size_t)c * plane] +=
                            po[(std::size_t)c * plane] * (g[(std::size_t)c * plane] - dot);
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void validate_conv(const Shape4& in, const ConvParams<T>& p) {
    const int k = p.k();
    if (k != 1 && k != 3) throw std::invalid_argument("conv2d: kernel must be 1 or 3");
    if (p.weight->shape.h != p.weight->shape.w)
        throw std::invalid_argument("conv2d: kernel must be square");
    if (in.c != p.c_in())
        throw std::invalid_argument("conv2d: channel mismatch, input has " +
                                    std::to_string(in.c) + " channels, weight expects " +
                                    std::to_string(p.c_in()));
    if (p.stride <= 0 || p.padding < 0) throw std::invalid_argument("conv2d: bad stride/pad");
    int ho = (in.h + 2 * p.padding - k) / p.stride + 1;
    int wo = (in.w + 2 * p.padding - k) / p.stride + 1;
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: nonpositive output size");
    if (p.bias &&
        (p.bias->shape.c != p.c_out() || p.bias->shape.n != 1 || p.bias->shape.h != 1 ||
         p.bias->shape.w != 1))
        throw std::invalid_argument("conv2d: bias shape mismatch");
}

template <typename T>
void im2col(const T* img, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            T* col) {
    const std::size_t hw = (std::size_t)Ho * Wo;
    for (int ic = 0; ic < C; ++ic)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                T* dst = col + ((std::size_t)(ic * k + ky) * k + kx) * hw;
                const T* src = img + (std::size_t)ic * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    T* drow = dst + (std::size_t)oy * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(drow, drow + Wo, T(0));
                        continue;
                    }
                    const T* srow = src + (std::size_t)iy * W;
                    if (stride == 1) {
                        const int x0 = std::max(0, pad - kx);
                        const int x1 = std::min(Wo, W + pad - kx);
                        std::fill(drow, drow + std::min(x0, Wo), T(0));
                        for (int ox = x0; ox < x1; ++ox) drow[ox] = srow[ox - pad + kx];
                        std::fill(drow + std::max(x0, x1), drow + Wo, T(0));
                    } else {
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            drow[ox] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
                        }
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
                T* img) {
    const std::size_t hw = (std::size_t)Ho * Wo;
    for (int ic = 0; ic < C; ++ic)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const T* src = col + ((std::size_t)(ic * k + ky) * k + kx) * hw;
                T* dst = img + (std::size_t)ic * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    const T* srow = src + (std::size_t)oy * Wo;
                    T* drow = dst + (std::size_t)iy * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) drow[ix] += srow[ox];
                    }
                }
            }
}

}  // namespace

template <typename T>
Shape4 conv_out_shape(const Shape4& in, const ConvParams<T>& p) {
    const int k = p.k();
    return Shape4{in.n, p.c_out(), (in.h + 2 * p.padding - k) / p.stride + 1,
                  (in.w + 2 * p.padding - k) / p.stride + 1};
}

template <typename T>
TensorPtr<T> conv2d(Tape<T>* tape, const TensorPtr<T>& x, const ConvParams<T>& p) {
    validate_conv(x->shape, p);
    const Shape4 os = conv_out_shape(x->shape, p);
    const int k = p.k(), C = x->shape.c, H = x->shape.h, W = x->shape.w;
    const int Ho = os.h, Wo = os.w, Co = os.c;
    const std::size_t hw = (std::size_t)Ho * Wo;
    const std::size_t K = (std::size_t)C * k * k;

    auto out = make_tensor<T>(os);
    std::vector<T> col(K * hw);
    for (int in = 0; in < x->shape.n; ++in) {
        im2col(x->plane(in, 0), C, H, W, k, p.stride, p.padding, Ho, Wo, col.data());
        T* o = out->plane(in, 0);
        detail::gemm_acc(p.weight->data.data(), col.data(), o, Co, (int)K, (int)hw);
        if (p.bias)
            for (int oc = 0; oc < Co; ++oc) {
                const T b = p.bias->data[oc];
                T* row = o + (std::size_t)oc * hw;
                for (std::size_t i = 0; i < hw; ++i) row[i] += b;
            }
    }

    if (needs_grad(tape, {&x, &p.weight, &p.bias})) {
        out->set_requires_grad(true);
        auto w = p.weight;
        auto b = p.bias;
        const int stride = p.stride, pad = p.padding;
        tape->record("conv2d", [x, w, b, out, k, C, H, W, Ho, Wo, Co, K, hw, stride, pad]() {
            std::vector<T> col(K * hw);
            std::vector<T> dcol(K * hw);
            for (int in = 0; in < x->shape.n; ++in) {
                const T* g = out->grad.data() + (std::size_t)in * Co * hw;
                if (w->requires_grad) {
                    im2col(x->data.data() + (std::size_t)in * C * H * W, C, H, W, k, stride, pad,
                           Ho, Wo, col.data());
                    detail::gemm_nt_acc(g, col.data(), w->grad.data(), Co, (int)hw, (int)K);
                }
                if (x->requires_grad) {
                    std::fill(dcol.begin(), dcol.end(), T(0));
                    detail::gemm_tn_acc(w->data.data(), g, dcol.data(), (int)K, Co, (int)hw);
                    col2im_add(dcol.data(), C, H, W, k, stride, pad, Ho, Wo,
                               x->grad.data() + (std::size_t)in * C * H * W);
                }
                if (b && b->requires_grad)
                    for (int oc = 0; oc < Co; ++oc) {
                        T acc = T(0);
                        const T* row = g + (std::size_t)oc * hw;
                        for (std::size_t i = 0; i < hw; ++i) acc += row[i];
                        b->grad[oc] += acc;
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// bilinear sampling + deformable convolution
// ---------------------------------------------------------------------------

template <typename T>
T bilinear_sample(const T* plane, int h, int w, T y, T x) {
    if (y <= T(-1) || y >= T(h) || x <= T(-1) || x >= T(w)) return T(0);
    const int y0 = (int)std::floor(y), x0 = (int)std::floor(x);
    const int y1 = y0 + 1, x1 = x0 + 1;
    const T ly = y - T(y0), lx = x - T(x0);
    const T hy = T(1) - ly, hx = T(1) - lx;
    T v = T(0);
    if (y0 >= 0 && x0 >= 0) v += hy * hx * plane[(std::size_t)y0 * w + x0];
    if (y0 >= 0 && x1 < w) v += hy * lx * plane[(std::size_t)y0 * w + x1];
    if (y1 < h && x0 >= 0) v += ly * hx * plane[(std::size_t)y1 * w + x0];
    if (y1 < h && x1 < w) v += ly * lx * plane[(std::size_t)y1 * w + x1];
    return v;
}

template <typename T>
void bilinear_coord_grad(const T* plane, int h, int w, T y, T x, T& gy, T& gx) {
    gy = T(0);
    gx = T(0);
    if (y <= T(-1) || y >= T(h) || x <= T(-1) || x >= T(w)) return;
    const int y0 = (int)std::floor(y), x0 = (int)std::floor(x);
    const int y1 = y0 + 1, x1 = x0 + 1;
    const T ly = y - T(y0), lx = x - T(x0);
    const T hy = T(1) - ly, hx = T(1) - lx;
    T v00 = (y0 >= 0 && x0 >= 0) ? plane[(std::size_t)y0 * w + x0] : T(0);
    T v01 = (y0 >= 0 && x1 < w) ? plane[(std::size_t)y0 * w + x1] : T(0);
    T v10 = (y1 < h && x0 >= 0) ? plane[(std::size_t)y1 * w + x0] : T(0);
    T v11 = (y1 < h && x1 < w) ? plane[(std::size_t)y1 * w + x1] : T(0);
    gy = hx * (v10 - v00) + lx * (v11 - v01);
    gx = hy * (v01 - v00) + ly * (v11 - v10);
}

namespace {

// col[(ic*k*k + tap) * hw + pos] = bilinear(x[ic], base_y + dy, base_x + dx)
template <typename T>
void deform_im2col(const T* img, const T* offsets, int C, int H, int W, int k, int stride,
                   int pad, int Ho, int Wo, T* col) {
    const std::size_t hw = (std::size_t)Ho * Wo;
    const int taps = k * k;
    for (int ic = 0; ic < C; ++ic)
        for (int t = 0; t < taps; ++t) {
            const int ky = t / k, kx = t % k;
            T* dst = col + ((std::size_t)ic * taps + t) * hw;
            const T* dy_map = offsets + (std::size_t)(2 * t) * hw;
            const T* dx_map = offsets + (std::size_t)(2 * t + 1) * hw;
            const T* plane = img + (std::size_t)ic * H * W;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const std::size_t pos = (std::size_t)oy * Wo + ox;
                    const T py = T(oy * stride - pad + ky) + dy_map[pos];
                    const T px = T(ox * stride - pad + kx) + dx_map[pos];
                    dst[pos] = bilinear_sample(plane, H, W, py, px);
                }
        }
}

}  // namespace

template <typename T>
TensorPtr<T> deform_conv2d(Tape<T>* tape, const TensorPtr<T>& x, const DeformConvParams<T>& p) {
    validate_conv(x->shape, p.base);
    const int k = p.base.k();
    if (p.offset.c_out() != 2 * k * k)
        throw std::invalid_argument("deform_conv2d: offset branch must output 2*k*k channels, has " +
                                    std::to_string(p.offset.c_out()));
    if (p.offset.k() != k || p.offset.stride != p.base.stride ||
        p.offset.padding != p.base.padding)
        throw std::invalid_argument("deform_conv2d: offset branch geometry must match base conv");

    // The offset field is itself a standard convolution of the input.
    TensorPtr<T> offsets = conv2d(tape, x, p.offset);

    const Shape4 os = conv_out_shape(x->shape, p.base);
    const int C = x->shape.c, H = x->shape.h, W = x->shape.w;
    const int Ho = os.h, Wo = os.w, Co = os.c;
    const std::size_t hw = (std::size_t)Ho * Wo;
    const std::size_t K = (std::size_t)C * k * k;

    auto out = make_tensor<T>(os);
    std::vector<T> col(K * hw);
    for (int in = 0; in < x->shape.n; ++in) {
        deform_im2col(x->plane(in, 0), offsets->plane(in, 0), C, H, W, k, p.base.stride,
                      p.base.padding, Ho, Wo, col.data());
        T* o = out->plane(in, 0);
        detail::gemm_acc(p.base.weight->data.data(), col.data(), o, Co, (int)K, (int)hw);
        if (p.base.bias)
            for (int oc = 0; oc < Co; ++oc) {
                const T b = p.base.bias->data[oc];
                T* row = o + (std::size_t)oc * hw;
                for (std::size_t i = 0; i < hw; ++i) row[i] += b;
            }
    }

    if (needs_grad(tape, {&x, &p.base.weight, &p.base.bias, &offsets})) {
        out->set_requires_grad(true);
        auto w = p.base.weight;
        auto b = p.base.bias;
        const int stride = p.base.stride, pad = p.base.padding;
        tape->record("deform_conv2d",
                     [x, w, b, offsets, out, k, C, H, W, Ho, Wo, Co, K, hw, stride, pad]() {
            const int taps = k * k;
            std::vector<T> col(K * hw);
            std::vector<T> dcol(K * hw);
            for (int in = 0; in < x->shape.n; ++in) {
                const T* g = out->grad.data() + (std::size_t)in * Co * hw;
                const T* off = offsets->data.data() + (std::size_t)in * 2 * taps * hw;
                const T* img = x->data.data() + (std::size_t)in * C * H * W;

                deform_im2col(img, off, C, H, W, k, stride, pad, Ho, Wo, col.data());
                if (w->requires_grad)
                    detail::gemm_nt_acc(g, col.data(), w->grad.data(), Co, (int)hw, (int)K);

                std::fill(dcol.begin(), dcol.end(), T(0));
                detail::gemm_tn_acc(w->data.data(), g, dcol.data(), (int)K, Co, (int)hw);

                T* gx = x->requires_grad ? x->grad.data() + (std::size_t)in * C * H * W : nullptr;
                T* goff = offsets->requires_grad
                              ? offsets->grad.data() + (std::size_t)in * 2 * taps * hw
                              : nullptr;
                for (int ic = 0; ic < C; ++ic)
                    for (int t = 0; t < taps; ++t) {
                        const int ky = t / k, kx = t % k;
                        const T* dc = dcol.data() + ((std::size_t)ic * taps + t) * hw;
                        const T* dy_map = off + (std::size_t)(2 * t) * hw;
                        const T* dx_map = off + (std::size_t)(2 * t + 1) * hw;
                        const T* plane = img + (std::size_t)ic * H * W;
                        for (int oy = 0; oy < Ho; ++oy)
                            for (int ox = 0; ox < Wo; ++ox) {
                                const std::size_t pos = (std::size_t)oy * Wo + ox;
                                const T gc = dc[pos];
                                if (gc == T(0)) continue;
                                const T py = T(oy * stride - pad + ky) + dy_map[pos];
                                const T px = T(ox * stride - pad + kx) + dx_map[pos];
                                if (py <= T(-1) || py >= T(H) || px <= T(-1) || px >= T(W))
                                    continue;
                                const int y0 = (int)std::floor(py), x0 = (int)std::floor(px);
                                const int y1 = y0 + 1, x1 = x0 + 1;
                                const T ly = py - T(y0), lx = px - T(x0);
                                const T hy = T(1) - ly, hx = T(1) - lx;
                                if (gx) {
                                    if (y0 >= 0 && x0 >= 0)
                                        gx[(std::size_t)ic * H * W + y0 * W + x0] += gc * hy * hx;
                                    if (y0 >= 0 && x1 < W)
                                        gx[(std::size_t)ic * H * W + y0 * W + x1] += gc * hy * lx;
                                    if (y1 < H && x0 >= 0)
                                        gx[(std::size_t)ic * H * W + y1 * W + x0] += gc * ly * hx;
                                    if (y1 < H && x1 < W)
                                        gx[(std::size_t)ic * H * W + y1 * W + x1] += gc * ly * lx;
                                }
                                if (goff) {
                                    T gy, gxx;
                                    bilinear_coord_grad(plane, H, W, py, px, gy, gxx);
                                    goff[(std::size_t)(2 * t) * hw + pos] += gc * gy;
                                    goff[(std::size_t)(2 * t + 1) * hw + pos] += gc * gxx;
                                }
                            }
                    }
                if (b && b->requires_grad)
                    for (int oc = 0; oc < Co; ++oc) {
                        T acc = T(0);
                        const T* row = g + (std::size_t)oc * hw;
                        for (std::size_t i = 0; i < hw; ++i) acc += row[i];
                        b->grad[oc] += acc;
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> batchnorm2d(Tape<T>* tape, const TensorPtr<T>& x, BnParams<T>& p, bool training) {
    const int C = x->shape.c;
    if (p.gamma->shape.c != C || p.beta->shape.c != C || p.running_mean->shape.c != C ||
        p.running_var->shape.c != C)
        throw std::invalid_argument("batchnorm2d: channel mismatch");
    for (T v : p.running_var->data)
        if (!(v > T(0))) throw std::runtime_error("batchnorm2d: running_var must stay positive");

    const std::size_t plane = (std::size_t)x->shape.h * x->shape.w;
    const std::size_t cnt = (std::size_t)x->shape.n * plane;  // reduce count per channel
    if (training && cnt <= 1)
        throw std::runtime_error("batchnorm2d: training with a single element per channel is degenerate");

    auto out = make_tensor<T>(x->shape);
    auto mean = std::make_shared<std::vector<T>>(C, T(0));
    auto invstd = std::make_shared<std::vector<T>>(C, T(0));

    if (training) {
        for (int c = 0; c < C; ++c) {
            T m = T(0);
            for (int in = 0; in < x->shape.n; ++in) {
                const T* px = x->plane(in, c);
                for (std::size_t i = 0; i < plane; ++i) m += px[i];
            }
            m /= T(cnt);
            T v = T(0);
            for (int in = 0; in < x->shape.n; ++in) {
                const T* px = x->plane(in, c);
                for (std::size_t i = 0; i < plane; ++i) v += (px[i] - m) * (px[i] - m);
            }
            v /= T(cnt);
            (*mean)[c] = m;
            (*invstd)[c] = T(1) / std::sqrt(v + p.eps);
            // running stats use the unbiased variance
            T vu = v * T(cnt) / T(cnt - 1);
            p.running_mean->data[c] = (T(1) - p.momentum) * p.running_mean->data[c] + p.momentum * m;
            p.running_var->data[c] = (T(1) - p.momentum) * p.running_var->data[c] + p.momentum * vu;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            (*mean)[c] = p.running_mean->data[c];
            (*invstd)[c] = T(1) / std::sqrt(p.running_var->data[c] + p.eps);
        }
    }

    for (int in = 0; in < x->shape.n; ++in)
        for (int c = 0; c < C; ++c) {
            const T m = (*mean)[c], is = (*invstd)[c];
            const T gma = p.gamma->data[c], bta = p.beta->data[c];
            const T* px = x->plane(in, c);
            T* po = out->plane(in, c);
            for (std::size_t i = 0; i < plane; ++i) po[i] = (px[i] - m) * is * gma + bta;
        }

    if (needs_grad(tape, {&x, &p.gamma, &p.beta})) {
        out->set_requires_grad(true);
        auto gamma = p.gamma;
        auto beta = p.beta;
        tape->record("batchnorm2d", [x, gamma, beta, out, mean, invstd, training, plane, cnt, C]() {
            for (int c = 0; c < C; ++c) {
                const T m = (*mean)[c], is = (*invstd)[c];
                T sum_g = T(0), sum_gx = T(0);
                for (int in = 0; in < x->shape.n; ++in) {
                    const T* g = out->grad.data() + ((std::size_t)in * C + c) * plane;
                    const T* px = x->data.data() + ((std::size_t)in * C + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_g += g[i];
                        sum_gx += g[i] * (px[i] - m) * is;
                    }
                }
                if (gamma->requires_grad) gamma->grad[c] += sum_gx;
                if (beta->requires_grad) beta->grad[c] += sum_g;
                if (x->requires_grad) {
                    const T gma = gamma->data[c];
                    for (int in = 0; in < x->shape.n; ++in) {
                        const T* g = out->grad.data() + ((std::size_t)in * C + c) * plane;
                        const T* px = x->data.data() + ((std::size_t)in * C + c) * plane;
                        T* gx = x->grad.data() + ((std::size_t)in * C + c) * plane;
                        if (training) {
                            for (std::size_t i = 0; i < plane; ++i) {
                                const T xhat = (px[i] - m) * is;
                                gx[i] += gma * is *
                                         (g[i] - sum_g / T(cnt) - xhat * sum_gx / T(cnt));
                            }
                        } else {
                            for (std::size_t i = 0; i < plane; ++i) gx[i] += gma * is * g[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> maxpool2d(Tape<T>* tape, const TensorPtr<T>& x, int k, int stride, int pad) {
    if (pad >= k) throw std::invalid_argument("maxpool2d: pad must be < k");
    const int H = x->shape.h, W = x->shape.w;
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("maxpool2d: nonpositive output size");

    auto out = make_tensor<T>(x->shape.n, x->shape.c, Ho, Wo);
    auto arg = std::make_shared<std::vector<int>>(out->size());
    const int planes = x->shape.n * x->shape.c;
    for (int pc = 0; pc < planes; ++pc) {
        const T* src = x->data.data() + (std::size_t)pc * H * W;
        T* dst = out->data.data() + (std::size_t)pc * Ho * Wo;
        int* am = arg->data() + (std::size_t)pc * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                T best = T(0);
                int bi = -1;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        const T v = src[(std::size_t)iy * W + ix];
                        if (bi < 0 || v > best) {
                            best = v;
                            bi = iy * W + ix;
                        }
                    }
                }
                dst[(std::size_t)oy * Wo + ox] = best;
                am[(std::size_t)oy * Wo + ox] = bi;
            }
    }
    if (needs_grad(tape, {&x})) {
        out->set_requires_grad(true);
        tape->record("maxpool2d", [x, out, arg, H, W, Ho, Wo, planes]() {
            for (int pc = 0; pc < planes; ++pc) {
                const T* g = out->grad.data() + (std::size_t)pc * Ho * Wo;
                const int* am = arg->data() + (std::size_t)pc * Ho * Wo;
                T* gx = x->grad.data() + (std::size_t)pc * H * W;
                for (std::size_t i = 0; i < (std::size_t)Ho * Wo; ++i)
                    if (am[i] >= 0) gx[am[i]] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> upsample_nearest2x(Tape<T>* tape, const TensorPtr<T>& x) {
    const int H = x->shape.h, W = x->shape.w;
    auto out = make_tensor<T>(x->shape.n, x->shape.c, 2 * H, 2 * W);
    const int planes = x->shape.n * x->shape.c;
    for (int pc = 0; pc < planes; ++pc) {
        const T* src = x->data.data() + (std::size_t)pc * H * W;
        T* dst = out->data.data() + (std::size_t)pc * 4 * H * W;
        for (int y = 0; y < 2 * H; ++y) {
            const T* srow = src + (std::size_t)(y / 2) * W;
            T* drow = dst + (std::size_t)y * 2 * W;
            for (int xx = 0; xx < 2 * W; ++xx) drow[xx] = srow[xx / 2];
        }
    }
    if (needs_grad(tape, {&x})) {
        out->set_requires_grad(true);
        tape->record("upsample_nearest2x", [x, out, H, W, planes]() {
            for (int pc = 0; pc < planes; ++pc) {
                const T* g = out->grad.data() + (std::size_t)pc * 4 * H * W;
                T* gx = x->grad.data() + (std::size_t)pc * H * W;
                for (int y = 0; y < 2 * H; ++y)
                    for (int xx = 0; xx < 2 * W; ++xx)
                        gx[(std::size_t)(y / 2) * W + xx / 2] += g[(std::size_t)y * 2 * W + xx];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// fused loss kernels
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> bce_with_logits_sum(Tape<T>* tape, const TensorPtr<T>& logits,
                                 const TensorPtr<T>& targets, const TensorPtr<T>& weights) {
    check_same_shape(logits, targets, "bce_with_logits_sum");
    if (weights) check_same_shape(logits, weights, "bce_with_logits_sum(weights)");
    auto out = make_tensor<T>(1, 1, 1, 1);
    T acc = T(0);
    for (std::size_t i = 0; i < logits->size(); ++i) {
        const T x = logits->data[i], t = targets->data[i];
        const T w = weights ? weights->data[i] : T(1);
        acc += w * (stable_softplus(x) - x * t);
    }
    out->data[0] = acc;
    if (needs_grad(tape, {&logits})) {
        out->set_requires_grad(true);
        tape->record("bce_with_logits_sum", [logits, targets, weights, out]() {
            const T g = out->grad[0];
            for (std::size_t i = 0; i < logits->size(); ++i) {
                const T w = weights ? weights->data[i] : T(1);
                logits->grad[i] +=
                    g * w * (stable_sigmoid(logits->data[i]) - targets->data[i]);
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> dfl_expect(Tape<T>* tape, const TensorPtr<T>& dist_logits, int reg_max) {
    if (dist_logits->shape.c != 4 * reg_max || dist_logits->shape.h != 1)
        throw std::invalid_argument("dfl_expect: expects (n, 4*reg_max, 1, p)");
    const int P = dist_logits->shape.w, N = dist_logits->shape.n;
    auto out = make_tensor<T>(N, 4, 1, P);
    auto probs = std::make_shared<std::vector<T>>(dist_logits->size());
    for (int in = 0; in < N; ++in)
        for (int s = 0; s < 4; ++s)
            for (int pp = 0; pp < P; ++pp) {
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < reg_max; ++j)
                    mx = std::max(mx, dist_logits->at(in, s * reg_max + j, 0, pp));
                T z = T(0);
                for (int j = 0; j < reg_max; ++j) {
                    T e = std::exp(dist_logits->at(in, s * reg_max + j, 0, pp) - mx);
                    (*probs)[dist_logits->index(in, s * reg_max + j, 0, pp)] = e;
                    z += e;
                }
                T ev = T(0);
                for (int j = 0; j < reg_max; ++j) {
                    T& pj = (*probs)[dist_logits->index(in, s * reg_max + j, 0, pp)];
                    pj /= z;
                    ev += T(j) * pj;
                }
                out->at(in, s, 0, pp) = ev;
            }
    if (needs_grad(tape, {&dist_logits})) {
        out->set_requires_grad(true);
        tape->record("dfl_expect", [dist_logits, out, probs, reg_max, P, N]() {
            for (int in = 0; in < N; ++in)
                for (int s = 0; s < 4; ++s)
                    for (int pp = 0; pp < P; ++pp) {
                        const T g = out->grad[out->index(in, s, 0, pp)];
                        if (g == T(0)) continue;
                        const T ev = out->data[out->index(in, s, 0, pp)];
                        for (int j = 0; j < reg_max; ++j) {
                            const std::size_t idx = dist_logits->index(in, s * reg_max + j, 0, pp);
                            dist_logits->grad[idx] += g * (*probs)[idx] * (T(j) - ev);
                        }
                    }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> dfl_loss_sum(Tape<T>* tape, const TensorPtr<T>& dist_logits,
                          const TensorPtr<T>& targets, const TensorPtr<T>& weights, int reg_max) {
    if (dist_logits->shape.c != 4 * reg_max || dist_logits->shape.h != 1 ||
        dist_logits->shape.n != 1)
        throw std::invalid_argument("dfl_loss_sum: expects (1, 4*reg_max, 1, p)");
    const int P = dist_logits->shape.w;
    if (targets->shape.c != 4 || targets->shape.w != P || weights->shape.w != P)
        throw std::invalid_argument("dfl_loss_sum: target/weight shape mismatch");

    // Bracketing bins: bl = floor(t), br = bl+1. Targets at or above
    // reg_max-1 are clamped just below so br stays in range; an exactly
    // integral target puts all its mass on bl.
    auto out = make_tensor<T>(1, 1, 1, 1);
    T acc = T(0);
    for (int s = 0; s < 4; ++s)
        for (int pp = 0; pp < P; ++pp) {
            T t = targets->at(0, s, 0, pp);
            t = std::min(std::max(t, T(0)), T(reg_max - 1) - T(1e-4));
            const int bl = (int)std::floor(t);
            const T wr = t - T(bl), wl = T(1) - wr;
            T mx = -std::numeric_limits<T>::infinity();
            for (int j = 0; j < reg_max; ++j)
                mx = std::max(mx, dist_logits->at(0, s * reg_max + j, 0, pp));
            T z = T(0);
            for (int j = 0; j < reg_max; ++j)
                z += std::exp(dist_logits->at(0, s * reg_max + j, 0, pp) - mx);
            const T lse = mx + std::log(z);
            const T w = weights->at(0, 0, 0, pp);
            acc += w * (wl * (lse - dist_logits->at(0, s * reg_max + bl, 0, pp)) +
                        wr * (lse - dist_logits->at(0, s * reg_max + bl + 1, 0, pp)));
        }
    out->data[0] = acc;
    if (needs_grad(tape, {&dist_logits})) {
        out->set_requires_grad(true);
        tape->record("dfl_loss_sum", [dist_logits, targets, weights, out, reg_max, P]() {
            const T g = out->grad[0];
            for (int s = 0; s < 4; ++s)
                for (int pp = 0; pp < P; ++pp) {
                    T t = targets->at(0, s, 0, pp);
                    t = std::min(std::max(t, T(0)), T(reg_max - 1) - T(1e-4));
                    const int bl = (int)std::floor(t);
                    const T wr = t - T(bl), wl = T(1) - wr;
                    T mx = -std::numeric_limits<T>::infinity();
                    for (int j = 0; j < reg_max; ++j)
                        mx = std::max(mx, dist_logits->at(0, s * reg_max + j, 0, pp));
                    T z = T(0);
                    for (int j = 0; j < reg_max; ++j)
                        z += std::exp(dist_logits->at(0, s * reg_max + j, 0, pp) - mx);
                    const T w = weights->at(0, 0, 0, pp);
                    for (int j = 0; j < reg_max; ++j) {
                        const T pj =
                            std::exp(dist_logits->at(0, s * reg_max + j, 0, pp) - mx) / z;
                        T d = pj;  // d(lse)/dlogit * (wl+wr), and wl+wr == 1
                        if (j == bl) d -= wl;
                        if (j == bl + 1) d -= wr;
                        dist_logits->grad[dist_logits->index(0, s * reg_max + j, 0, pp)] +=
                            g * w * d;
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define DEFYOLO_INSTANTIATE(T)                                                                  \
    template TensorPtr<T> elementwise<T>(Tape<T>*, BinaryKind, const TensorPtr<T>&,             \
                                         const TensorPtr<T>&);                                  \
    template TensorPtr<T> elementwise_scalar<T>(Tape<T>*, BinaryKind, const TensorPtr<T>&, T);  \
    template TensorPtr<T> unary<T>(Tape<T>*, UnaryKind, const TensorPtr<T>&);                   \
    template TensorPtr<T> clamp<T>(Tape<T>*, const TensorPtr<T>&, T, T);                        \
    template TensorPtr<T> sum_all<T>(Tape<T>*, const TensorPtr<T>&);                            \
    template TensorPtr<T> flatten_hw<T>(Tape<T>*, const TensorPtr<T>&);                         \
    template TensorPtr<T> concat_channels<T>(Tape<T>*, const std::vector<TensorPtr<T>>&);       \
    template TensorPtr<T> concat_w<T>(Tape<T>*, const std::vector<TensorPtr<T>>&);              \
    template TensorPtr<T> slice_channels<T>(Tape<T>*, const TensorPtr<T>&, int, int);           \
    template TensorPtr<T> gather_w<T>(Tape<T>*, const TensorPtr<T>&,                            \
                                      const std::vector<std::pair<int, int>>&);                 \
    template TensorPtr<T> channel_max<T>(Tape<T>*, const TensorPtr<T>&);                        \
    template TensorPtr<T> softmax_channel<T>(Tape<T>*, const TensorPtr<T>&);                    \
    template Shape4 conv_out_shape<T>(const Shape4&, const ConvParams<T>&);                     \
    template TensorPtr<T> conv2d<T>(Tape<T>*, const TensorPtr<T>&, const ConvParams<T>&);       \
    template TensorPtr<T> deform_conv2d<T>(Tape<T>*, const TensorPtr<T>&,                       \
                                           const DeformConvParams<T>&);                         \
    template T bilinear_sample<T>(const T*, int, int, T, T);                                    \
    template void bilinear_coord_grad<T>(const T*, int, int, T, T, T&, T&);                     \
    template TensorPtr<T> batchnorm2d<T>(Tape<T>*, const TensorPtr<T>&, BnParams<T>&, bool);    \
    template TensorPtr<T> maxpool2d<T>(Tape<T>*, const TensorPtr<T>&, int, int, int);           \
    template TensorPtr<T> upsample_nearest2x<T>(Tape<T>*, const TensorPtr<T>&);                 \
    template TensorPtr<T> bce_with_logits_sum<T>(Tape<T>*, const TensorPtr<T>&,                 \
                                                 const TensorPtr<T>&, const TensorPtr<T>&);     \
    template TensorPtr<T> dfl_expect<T>(Tape<T>*, const TensorPtr<T>&, int);                    \
    template TensorPtr<T> dfl_loss_sum<T>(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&,   \
                                          const TensorPtr<T>&, int);

DEFYOLO_INSTANTIATE(float)
DEFYOLO_INSTANTIATE(double)

#undef DEFYOLO_INSTANTIATE

}  // namespace defyolo
