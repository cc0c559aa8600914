#include "doctest.h"

#include "defyolo/tensor.hpp"

using namespace defyolo;

TEST_CASE("tensor shape and storage agree") {
    Tensor4<float> t(2, 3, 4, 5);
    CHECK(t.size() == 120);
    CHECK(t.shape.numel() == t.data.size());
    t.at(1, 2, 3, 4) = 7.f;
    CHECK(t.data.back() == 7.f);
}

TEST_CASE("grad buffer mirrors the data shape") {
    auto t = make_tensor<double>(1, 2, 3, 3, true);
    CHECK(t->grad.size() == t->data.size());
    t->set_requires_grad(false);
    CHECK(t->grad.empty());
}

TEST_CASE("rng streams are reproducible") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42), d(43);
    CHECK(c.next_u64() != d.next_u64());
}

TEST_CASE("rng normal has sane moments") {
    Rng r(7);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double v = r.normal();
        s += v;
        s2 += v * v;
    }
    CHECK(std::abs(s / n) < 0.03);
    CHECK(std::abs(s2 / n - 1.0) < 0.05);
}

TEST_CASE("uniform stays inside its bounds") {
    Rng r(11);
    for (int i = 0; i < 1000; ++i) {
        double v = r.uniform(-2.0, 3.0);
        CHECK(v >= -2.0);
        CHECK(v < 3.0);
        int k = r.uniform_int(1, 4);
        CHECK(k >= 1);
        CHECK(k <= 4);
    }
}

TEST_CASE("kaiming bound follows fan-in") {
    Rng r(3);
    Tensor4<float> w(8, 4, 3, 3);
    fill_kaiming(w, r);
    const float bound = std::sqrt(6.0f / (4 * 9));
    for (float v : w.data) {
        CHECK(v <= bound);
        CHECK(v >= -bound);
    }
}
