#include "doctest.h"

#include <cmath>

#include "defyolo/ops.hpp"
#include "oracles.hpp"

using namespace defyolo;

namespace {

template <typename T>
ConvParams<T> random_conv(Rng& rng, int cin, int cout, int k, int stride, int pad,
                          bool bias = false) {
    ConvParams<T> p;
    p.weight = make_tensor<T>(cout, cin, k, k);
    fill_kaiming(*p.weight, rng);
    if (bias) {
        p.bias = make_tensor<T>(1, cout, 1, 1);
        fill_uniform(*p.bias, rng, -0.5, 0.5);
    }
    p.stride = stride;
    p.padding = pad;
    return p;
}

}  // namespace

TEST_CASE("3x3 all-ones kernel over all-ones 3x3 input sums to 9") {
    auto x = make_tensor<double>(1, 1, 3, 3);
    std::fill(x->data.begin(), x->data.end(), 1.0);
    ConvParams<double> p;
    p.weight = make_tensor<double>(1, 1, 3, 3);
    std::fill(p.weight->data.begin(), p.weight->data.end(), 1.0);
    auto out = conv2d<double>(nullptr, x, p);
    CHECK(out->shape == Shape4{1, 1, 1, 1});
    CHECK(out->data[0] == doctest::Approx(9.0));
}

TEST_CASE("1x1 identity kernel reproduces the input") {
    Rng rng(5);
    auto x = make_tensor<double>(1, 1, 4, 4);
    fill_normal(*x, rng, 0.0, 1.0);
    ConvParams<double> p;
    p.weight = make_tensor<double>(1, 1, 1, 1);
    p.weight->data[0] = 1.0;
    auto out = conv2d<double>(nullptr, x, p);
    for (std::size_t i = 0; i < x->size(); ++i) CHECK(out->data[i] == x->data[i]);
}

TEST_CASE("conv2d matches the nested-loop reference on random shapes") {
    Rng rng(17);
    struct Cfg { int n, cin, cout, h, w, k, s, pad; bool bias; };
    std::vector<Cfg> cfgs = {
        {1, 2, 3, 5, 5, 3, 1, 1, false}, {2, 3, 4, 7, 6, 3, 2, 1, true},
        {1, 4, 2, 5, 5, 1, 1, 0, true},  {2, 1, 5, 8, 8, 3, 1, 0, false},
        {1, 3, 3, 6, 9, 3, 2, 1, true},
    };
    for (int rep = 0; rep < 10; ++rep)
        for (auto& c : cfgs) {
            auto x = make_tensor<double>(c.n, c.cin, c.h, c.w);
            fill_normal(*x, rng, 0.0, 1.0);
            auto p = random_conv<double>(rng, c.cin, c.cout, c.k, c.s, c.pad, c.bias);
            auto got = conv2d<double>(nullptr, x, p);
            auto want = oracle::conv2d_naive(x, p.weight, p.bias, c.s, c.pad);
            REQUIRE(got->shape == want->shape);
            for (std::size_t i = 0; i < got->size(); ++i)
                CHECK(got->data[i] == doctest::Approx(want->data[i]).epsilon(1e-10));
        }
}

TEST_CASE("conv2d rejects channel mismatch and degenerate output") {
    Rng rng(1);
    auto x = make_tensor<double>(1, 2, 4, 4);
    auto p = random_conv<double>(rng, 3, 4, 3, 1, 1);
    CHECK_THROWS_AS(conv2d<double>(nullptr, x, p), std::invalid_argument);
    auto tiny = make_tensor<double>(1, 3, 2, 2);
    auto p2 = random_conv<double>(rng, 3, 4, 3, 1, 0);
    CHECK_THROWS_AS(conv2d<double>(nullptr, tiny, p2), std::invalid_argument);
}

TEST_CASE("bilinear sampling hits lattice points exactly") {
    Rng rng(4);
    auto x = make_tensor<double>(1, 1, 5, 6);
    fill_normal(*x, rng, 0.0, 1.0);
    CHECK(bilinear_sample(x->plane(0, 0), 5, 6, 2.0, 3.0) == x->at(0, 0, 2, 3));
    CHECK(bilinear_sample(x->plane(0, 0), 5, 6, 1.5, 2.0) ==
          doctest::Approx((x->at(0, 0, 1, 2) + x->at(0, 0, 2, 2)) / 2));
}

TEST_CASE("bilinear sampling matches the direct four-term formula") {
    Rng rng(21);
    auto x = make_tensor<double>(1, 1, 7, 7);
    fill_normal(*x, rng, 0.0, 2.0);
    for (int i = 0; i < 200; ++i) {
        double y = rng.uniform(-2.0, 9.0), xx = rng.uniform(-2.0, 9.0);
        CHECK(bilinear_sample(x->plane(0, 0), 7, 7, y, xx) ==
              doctest::Approx(oracle::bilinear_naive(x->plane(0, 0), 7, 7, y, xx))
                  .epsilon(1e-12));
    }
}

TEST_CASE("bilinear sampling is Lipschitz with constant 2*max|f|") {
    Rng rng(31);
    auto x = make_tensor<double>(1, 1, 6, 6);
    fill_normal(*x, rng, 0.0, 1.0);
    double fmax = 0;
    for (double v : x->data) fmax = std::max(fmax, std::abs(v));
    const double lip = 2.0 * fmax;
    for (int i = 0; i < 500; ++i) {
        double y = rng.uniform(-0.5, 6.0), xx = rng.uniform(-0.5, 6.0);
        double eps = rng.uniform(0.0, 0.5);
        double a = bilinear_sample(x->plane(0, 0), 6, 6, y, xx);
        double b = bilinear_sample(x->plane(0, 0), 6, 6, y + eps, xx);
        CHECK(std::abs(a - b) <= lip * eps + 1e-12);
    }
}

TEST_CASE("deformable conv with zero offsets reduces to standard conv bit-for-bit") {
    Rng rng(8);
    for (int rep = 0; rep < 5; ++rep) {
        auto x = make_tensor<double>(2, 3, 6, 6);
        fill_normal(*x, rng, 0.0, 1.0);
        DeformConvParams<double> dp;
        dp.base = random_conv<double>(rng, 3, 4, 3, 1, 1, true);
        dp.offset = ConvParams<double>{make_tensor<double>(18, 3, 3, 3),
                                       make_tensor<double>(1, 18, 1, 1), 1, 1};
        auto got = deform_conv2d<double>(nullptr, x, dp);
        auto want = conv2d<double>(nullptr, x, dp.base);
        REQUIRE(got->shape == want->shape);
        for (std::size_t i = 0; i < got->size(); ++i) CHECK(got->data[i] == want->data[i]);
    }
}

TEST_CASE("constant (0,+1) offsets equal a conv of the column-shifted input") {
    // pad 0 keeps every sampling site interior, where the shift identity is exact
    Rng rng(13);
    auto x = make_tensor<double>(1, 2, 6, 6);
    fill_normal(*x, rng, 0.0, 1.0);

    DeformConvParams<double> dp;
    dp.base = random_conv<double>(rng, 2, 3, 3, 1, 0);
    // offset branch: zero weights, bias (dy,dx) = (0,1) per tap
    dp.offset = ConvParams<double>{make_tensor<double>(18, 2, 3, 3),
                                   make_tensor<double>(1, 18, 1, 1), 1, 0};
    for (int t = 0; t < 9; ++t) dp.offset.bias->data[2 * t + 1] = 1.0;
    auto got = deform_conv2d<double>(nullptr, x, dp);

    // shift input left one column, zero-filling the right edge
    auto xs = make_tensor<double>(1, 2, 6, 6);
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 6; ++y)
            for (int xx = 0; xx < 5; ++xx) xs->at(0, c, y, xx) = x->at(0, c, y, xx + 1);
    auto want = conv2d<double>(nullptr, xs, dp.base);
    for (std::size_t i = 0; i < got->size(); ++i)
        CHECK(got->data[i] == doctest::Approx(want->data[i]).epsilon(1e-12));
}

TEST_CASE("deform_conv2d rejects a malformed offset branch") {
    Rng rng(2);
    auto x = make_tensor<double>(1, 2, 5, 5);
    DeformConvParams<double> dp;
    dp.base = random_conv<double>(rng, 2, 3, 3, 1, 1);
    dp.offset = random_conv<double>(rng, 2, 17, 3, 1, 1);  // needs 18 channels
    CHECK_THROWS_AS(deform_conv2d<double>(nullptr, x, dp), std::invalid_argument);
}

TEST_CASE("batchnorm inference with unit stats is the identity") {
    Rng rng(6);
    auto x = make_tensor<double>(2, 3, 4, 4);
    fill_normal(*x, rng, 0.0, 1.0);
    BnParams<double> p;
    p.gamma = make_tensor<double>(1, 3, 1, 1);
    p.beta = make_tensor<double>(1, 3, 1, 1);
    p.running_mean = make_tensor<double>(1, 3, 1, 1);
    p.running_var = make_tensor<double>(1, 3, 1, 1);
    std::fill(p.gamma->data.begin(), p.gamma->data.end(), 1.0);
    std::fill(p.running_var->data.begin(), p.running_var->data.end(), 1.0);
    p.eps = 0;
    auto out = batchnorm2d<double>(nullptr, x, p, false);
    for (std::size_t i = 0; i < x->size(); ++i)
        CHECK(out->data[i] == doctest::Approx(x->data[i]).epsilon(1e-12));
}

TEST_CASE("batchnorm training output is standardized per channel") {
    Rng rng(61);
    auto x = make_tensor<double>(2, 3, 4, 4);
    fill_normal(*x, rng, 3.0, 2.0);
    BnParams<double> p;
    p.gamma = make_tensor<double>(1, 3, 1, 1);
    p.beta = make_tensor<double>(1, 3, 1, 1);
    p.running_mean = make_tensor<double>(1, 3, 1, 1);
    p.running_var = make_tensor<double>(1, 3, 1, 1);
    std::fill(p.gamma->data.begin(), p.gamma->data.end(), 1.0);
    std::fill(p.running_var->data.begin(), p.running_var->data.end(), 1.0);
    auto out = batchnorm2d<double>(nullptr, x, p, true);
    for (int c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < 16; ++i) m += out->plane(n, c)[i];
        m /= 32;
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < 16; ++i)
                v += (out->plane(n, c)[i] - m) * (out->plane(n, c)[i] - m);
        v /= 32;
        CHECK(std::abs(m) < 1e-5);
        CHECK(std::abs(v - 1.0) < 1e-4);
        CHECK(p.running_mean->data[c] != 0.0);  // stats were folded in
    }
}

TEST_CASE("batchnorm training rejects a single-element batch") {
    auto x = make_tensor<double>(1, 2, 1, 1);
    BnParams<double> p;
    p.gamma = make_tensor<double>(1, 2, 1, 1);
    p.beta = make_tensor<double>(1, 2, 1, 1);
    p.running_mean = make_tensor<double>(1, 2, 1, 1);
    p.running_var = make_tensor<double>(1, 2, 1, 1);
    std::fill(p.running_var->data.begin(), p.running_var->data.end(), 1.0);
    CHECK_THROWS(batchnorm2d<double>(nullptr, x, p, true));
}

TEST_CASE("silu and sigmoid fixed points") {
    auto x = make_tensor<double>(1, 1, 1, 1);
    x->data = {0.0};
    CHECK(unary<double>(nullptr, UnaryKind::Silu, x)->data[0] == 0.0);
    CHECK(unary<double>(nullptr, UnaryKind::Sigmoid, x)->data[0] == 0.5);
}

TEST_CASE("softmax of uniform logits over 16 bins is 1/16 everywhere") {
    auto x = make_tensor<double>(1, 16, 1, 1);
    std::fill(x->data.begin(), x->data.end(), 0.7);
    auto out = softmax_channel<double>(nullptr, x);
    for (double v : out->data) CHECK(v == doctest::Approx(1.0 / 16).epsilon(1e-12));
}

TEST_CASE("maxpool of a constant plane is constant") {
    auto x = make_tensor<double>(1, 1, 6, 6);
    std::fill(x->data.begin(), x->data.end(), 2.5);
    auto out = maxpool2d<double>(nullptr, x, 5, 1, 2);
    for (double v : out->data) CHECK(v == 2.5);
}

TEST_CASE("a single peak propagates to every window containing it") {
    auto x = make_tensor<double>(1, 1, 7, 7);
    x->at(0, 0, 3, 3) = 10.0;
    auto out = maxpool2d<double>(nullptr, x, 5, 1, 2);
    for (int y = 1; y <= 5; ++y)
        for (int xx = 1; xx <= 5; ++xx) CHECK(out->at(0, 0, y, xx) == 10.0);
    CHECK(out->at(0, 0, 0, 0) == 0.0);
}

TEST_CASE("maxpool matches the nested-loop reference") {
    Rng rng(77);
    for (int rep = 0; rep < 20; ++rep) {
        auto x = make_tensor<double>(2, 2, 9, 8);
        fill_normal(*x, rng, 0.0, 1.0);
        auto got = maxpool2d<double>(nullptr, x, 5, 1, 2);
        auto want = oracle::maxpool_naive(x, 5, 1, 2);
        REQUIRE(got->shape == want->shape);
        for (std::size_t i = 0; i < got->size(); ++i) CHECK(got->data[i] == want->data[i]);
    }
}

TEST_CASE("maxpool backward conserves gradient mass") {
    Rng rng(78);
    auto x = make_tensor<double>(1, 2, 6, 6, true);
    fill_normal(*x, rng, 0.0, 1.0);
    Tape<double> tape;
    auto y = maxpool2d(&tape, x, 5, 1, 2);
    auto r = make_tensor<double>(y->shape);
    fill_uniform(*r, rng, 0.5, 1.5);
    auto loss = sum_all(&tape, mul(&tape, y, r));
    tape.backward(loss);
    double in_mass = 0, out_mass = 0;
    for (double g : x->grad) in_mass += g;
    for (double g : r->data) out_mass += g;  // upstream grad of y is r
    CHECK(in_mass == doctest::Approx(out_mass).epsilon(1e-9));
}

TEST_CASE("upsample repeats each value into a 2x2 block") {
    auto x = make_tensor<double>(1, 2, 2, 2);
    for (std::size_t i = 0; i < x->size(); ++i) x->data[i] = double(i);
    auto out = upsample_nearest2x<double>(nullptr, x);
    CHECK(out->shape == Shape4{1, 2, 4, 4});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 4; ++y)
            for (int xx = 0; xx < 4; ++xx)
                CHECK(out->at(0, c, y, xx) == x->at(0, c, y / 2, xx / 2));
}

TEST_CASE("concat stacks channels in argument order and splits grads back") {
    Rng rng(9);
    auto a = make_tensor<double>(1, 2, 8, 8, true);
    auto b = make_tensor<double>(1, 3, 8, 8, true);
    fill_normal(*a, rng, 0, 1);
    fill_normal(*b, rng, 0, 1);
    Tape<double> tape;
    auto c = concat_channels(&tape, {a, b});
    CHECK(c->shape == Shape4{1, 5, 8, 8});
    CHECK(c->at(0, 0, 3, 3) == a->at(0, 0, 3, 3));
    CHECK(c->at(0, 2, 3, 3) == b->at(0, 0, 3, 3));

    auto r = make_tensor<double>(c->shape);
    fill_normal(*r, rng, 0, 1);
    tape.backward(sum_all(&tape, mul(&tape, c, r)));
    CHECK(a->grad[a->index(0, 1, 2, 2)] == r->at(0, 1, 2, 2));
    CHECK(b->grad[b->index(0, 2, 2, 2)] == r->at(0, 4, 2, 2));
}

TEST_CASE("concat rejects spatial mismatch") {
    auto a = make_tensor<double>(1, 2, 8, 8);
    auto b = make_tensor<double>(1, 2, 4, 4);
    CHECK_THROWS_AS(concat_channels<double>(nullptr, {a, b}), std::invalid_argument);
}

TEST_CASE("channel_max picks the first maximizing channel") {
    auto x = make_tensor<double>(1, 3, 1, 2);
    // column 0: tie between channels 0 and 2; column 1: channel 1 wins
    x->at(0, 0, 0, 0) = 5;
    x->at(0, 2, 0, 0) = 5;
    x->at(0, 1, 0, 1) = 7;
    x->set_requires_grad(true);
    Tape<double> tape;
    auto y = channel_max(&tape, x);
    CHECK(y->at(0, 0, 0, 0) == 5);
    CHECK(y->at(0, 0, 0, 1) == 7);
    tape.backward(sum_all(&tape, y));
    CHECK(x->grad[x->index(0, 0, 0, 0)] == 1.0);
    CHECK(x->grad[x->index(0, 2, 0, 0)] == 0.0);
    CHECK(x->grad[x->index(0, 1, 0, 1)] == 1.0);
}

TEST_CASE("gather_w pulls anchor columns across the batch") {
    auto x = make_tensor<double>(2, 3, 1, 4);
    for (std::size_t i = 0; i < x->size(); ++i) x->data[i] = double(i);
    auto out = gather_w<double>(nullptr, x, {{0, 1}, {1, 3}});
    CHECK(out->shape == Shape4{1, 3, 1, 2});
    for (int c = 0; c < 3; ++c) {
        CHECK(out->at(0, c, 0, 0) == x->at(0, c, 0, 1));
        CHECK(out->at(0, c, 0, 1) == x->at(1, c, 0, 3));
    }
}

TEST_CASE("dfl_expect decodes uniform logits to 7.5 and a spike to its bin") {
    auto logits = make_tensor<double>(1, 64, 1, 1);
    auto out = dfl_expect<double>(nullptr, logits, 16);
    for (int s = 0; s < 4; ++s) CHECK(out->at(0, s, 0, 0) == doctest::Approx(7.5));

    std::fill(logits->data.begin(), logits->data.end(), 0.0);
    for (int s = 0; s < 4; ++s) logits->at(0, s * 16 + 3, 0, 0) = 40.0;
    out = dfl_expect<double>(nullptr, logits, 16);
    for (int s = 0; s < 4; ++s) CHECK(out->at(0, s, 0, 0) == doctest::Approx(3.0).epsilon(1e-9));
}
