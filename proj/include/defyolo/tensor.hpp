#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace defyolo {

struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    bool operator==(const Shape4& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape4& o) const { return !(*this == o); }
    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

// Dense rank-4 array, NCHW row-major. The gradient buffer is allocated only
// when requires_grad is set; accumulation into it is always "+=", zeroing is
// the caller's job.
template <typename T>
struct Tensor4 {
    Shape4 shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;

    Tensor4() = default;
    explicit Tensor4(Shape4 s, T fill = T(0))
        : shape(s), data(s.numel(), fill) {}
    Tensor4(int n, int c, int h, int w, T fill = T(0))
        : Tensor4(Shape4{n, c, h, w}, fill) {}

    std::size_t size() const { return data.size(); }

    std::size_t index(int in, int ic, int iy, int ix) const {
        return ((static_cast<std::size_t>(in) * shape.c + ic) * shape.h + iy) * shape.w + ix;
    }
    T& at(int in, int ic, int iy, int ix) { return data[index(in, ic, iy, ix)]; }
    const T& at(int in, int ic, int iy, int ix) const { return data[index(in, ic, iy, ix)]; }

    void set_requires_grad(bool rg) {
        requires_grad = rg;
        if (rg) {
            grad.assign(data.size(), T(0));
        } else {
            grad.clear();
        }
    }
    void zero_grad() {
        if (requires_grad) grad.assign(data.size(), T(0));
    }

    const T* plane(int in, int ic) const {
        return data.data() + index(in, ic, 0, 0);
    }
    T* plane(int in, int ic) { return data.data() + index(in, ic, 0, 0); }

    bool is_scalar() const {
        return shape.n == 1 && shape.c == 1 && shape.h == 1 && shape.w == 1;
    }
    T scalar() const {
        if (!is_scalar()) throw std::runtime_error("tensor is not scalar " + shape.str());
        return data[0];
    }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor4<T>>;

template <typename T>
TensorPtr<T> make_tensor(Shape4 s, bool requires_grad = false) {
    auto t = std::make_shared<Tensor4<T>>(s);
    if (requires_grad) t->set_requires_grad(true);
    return t;
}

template <typename T>
TensorPtr<T> make_tensor(int n, int c, int h, int w, bool requires_grad = false) {
    return make_tensor<T>(Shape4{n, c, h, w}, requires_grad);
}

template <typename T>
TensorPtr<T> make_scalar(T v) {
    auto t = make_tensor<T>(1, 1, 1, 1);
    t->data[0] = v;
    return t;
}

// Deterministic RNG. mt19937_64 plus hand-rolled uniform/normal mappings so
// that generated streams are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    double uniform() {  // [0,1)
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    }
    double normal(double mean = 0.0, double sd = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + sd * spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return mean + sd * u * m;
    }
    Rng fork(std::uint64_t stream) {  // independent child stream
        Rng r(next_u64() ^ (stream * 0xd1342543de82ef95ULL + 1));
        return r;
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

template <typename T>
void fill_uniform(Tensor4<T>& t, Rng& rng, double lo, double hi) {
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_normal(Tensor4<T>& t, Rng& rng, double mean, double sd) {
    for (auto& v : t.data) v = static_cast<T>(rng.normal(mean, sd));
}

// Kaiming-uniform for a conv weight shaped (c_out, c_in, k, k).
template <typename T>
void fill_kaiming(Tensor4<T>& t, Rng& rng) {
    double fan_in = static_cast<double>(t.shape.c) * t.shape.h * t.shape.w;
    double bound = std::sqrt(6.0 / fan_in);
    fill_uniform(t, rng, -bound, bound);
}

// Worker-thread count used by the kernels. 0 means "use all hardware threads".
void set_num_threads(int n);
int num_threads();

template <typename T>
bool all_finite(const Tensor4<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

}  // namespace defyolo
