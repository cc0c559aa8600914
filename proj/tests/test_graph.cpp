#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "defyolo/graph.hpp"

using namespace defyolo;

namespace {

ModelConfig tiny_config(bool deform_sppf = false, bool deform_c2f = false) {
    ModelConfig cfg;
    cfg.width_multiple = 0.25;
    cfg.input_size = 64;
    cfg.deform_sppf = deform_sppf;
    cfg.deform_c2f = deform_c2f;
    return cfg;
}

}  // namespace

TEST_CASE("baseline graph hits the published parameter and flop budget") {
    ModelConfig cfg;  // v8-s scaling, nc=4, 640 input
    auto g = LayerGraph<float>::build(cfg, 1);
    const auto params = g.count_params();
    CHECK(params == 11137132);
    CHECK(std::abs((double)params / 11.137e6 - 1.0) < 0.01);
    const double gflops = g.count_gflops(640);
    CHECK(std::abs(gflops / 28.7 - 1.0) < 0.05);
    CHECK(g.num_deform_blocks() == 0);
}

TEST_CASE("full deform configuration carries exactly seven deformable blocks") {
    ModelConfig cfg;
    cfg.deform_sppf = true;
    cfg.deform_c2f = true;
    auto g = LayerGraph<float>::build(cfg, 1);
    CHECK(g.num_deform_blocks() == 7);
    // offset branches add parameters on top of the baseline
    ModelConfig base;
    auto gb = LayerGraph<float>::build(base, 1);
    CHECK(g.count_params() > gb.count_params());
}

TEST_CASE("detect head emits 4*reg_max + nc channels per scale") {
    ModelConfig cfg;
    CHECK(cfg.head_channels() == 68);
    auto g = LayerGraph<float>::build(tiny_config(), 3);
    auto x = make_tensor<float>(1, 3, 64, 64);
    auto out = g.forward(nullptr, x, false);
    CHECK(out.p3->shape == Shape4{1, 68, 8, 8});
    CHECK(out.p4->shape == Shape4{1, 68, 4, 4});
    CHECK(out.p5->shape == Shape4{1, 68, 2, 2});
}

TEST_CASE("a single CBS holds k*k*cin*cout conv weights plus 2*cout norm terms") {
    ModelConfig cfg;
    auto g = LayerGraph<float>::build(cfg, 1);
    // layer 0 is a 3->32 CBS with k=3: 864 + 64
    auto rows = g.shape_table(640);
    CHECK(rows[0].params == 3 * 3 * 3 * 32 + 2 * 32);
    // the closed form for a 3x3 16->32 block
    CHECK(3 * 3 * 16 * 32 + 2 * 32 == 4672);
}

TEST_CASE("modified C2f layers keep their configured output channels") {
    ModelConfig cfg;
    cfg.deform_c2f = true;
    auto g = LayerGraph<float>::build(cfg, 1);
    auto rows = g.shape_table(640);
    CHECK(rows[4].shape.c == 128);
    CHECK(rows[6].shape.c == 256);
    CHECK(rows[15].shape.c == 128);
    CHECK(rows[18].shape.c == 256);
    CHECK(rows[21].shape.c == 512);
    // detect feature maps at 640: 80/40/20
    CHECK(rows[15].shape.h == 80);
    CHECK(rows[18].shape.h == 40);
    CHECK(rows[21].shape.h == 20);
}

TEST_CASE("deform graph with zero offsets reproduces the baseline forward") {
    auto base = LayerGraph<double>::build(tiny_config(), 11);
    auto deform = LayerGraph<double>::build(tiny_config(true, true), 11);
    deform.copy_matching_weights(base);  // same seed already matches; belt and braces

    Rng rng(5);
    for (int rep = 0; rep < 3; ++rep) {
        auto x = make_tensor<double>(1, 3, 64, 64);
        fill_uniform(*x, rng, 0.0, 1.0);
        auto a = base.forward(nullptr, x, false);
        auto b = deform.forward(nullptr, x, false);
        double diff = 0;
        for (std::size_t i = 0; i < a.p3->size(); ++i)
            diff = std::max(diff, std::abs(a.p3->data[i] - b.p3->data[i]));
        for (std::size_t i = 0; i < a.p5->size(); ++i)
            diff = std::max(diff, std::abs(a.p5->data[i] - b.p5->data[i]));
        CHECK(diff == 0.0);  // bit-for-bit at zero offsets
    }
}

TEST_CASE("forward is deterministic and batch entries do not leak") {
    auto g = LayerGraph<float>::build(tiny_config(), 21);
    Rng rng(9);
    auto x1 = make_tensor<float>(1, 3, 64, 64);
    auto x2 = make_tensor<float>(1, 3, 64, 64);
    fill_uniform(*x1, rng, 0.0, 1.0);
    fill_uniform(*x2, rng, 0.0, 1.0);

    auto a1 = g.forward(nullptr, x1, false);
    auto a1b = g.forward(nullptr, x1, false);
    for (std::size_t i = 0; i < a1.p3->size(); ++i)
        CHECK(a1.p3->data[i] == a1b.p3->data[i]);

    auto xb = make_tensor<float>(2, 3, 64, 64);
    std::copy(x1->data.begin(), x1->data.end(), xb->data.begin());
    std::copy(x2->data.begin(), x2->data.end(), xb->data.begin() + x1->size());
    auto ab = g.forward(nullptr, xb, false);
    auto a2 = g.forward(nullptr, x2, false);
    const std::size_t plane = a1.p3->size();
    for (std::size_t i = 0; i < plane; ++i) {
        CHECK(ab.p3->data[i] == a1.p3->data[i]);
        CHECK(ab.p3->data[plane + i] == a2.p3->data[i]);
    }
}

TEST_CASE("forward rejects the wrong input size") {
    auto g = LayerGraph<float>::build(tiny_config(), 2);
    auto bad = make_tensor<float>(1, 3, 32, 32);
    CHECK_THROWS_AS((void)g.forward(nullptr, bad, false), std::invalid_argument);
    auto bad_c = make_tensor<float>(1, 1, 64, 64);
    CHECK_THROWS_AS((void)g.forward(nullptr, bad_c, false), std::invalid_argument);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    auto g = LayerGraph<float>::build(tiny_config(), 31);
    const std::string path = "/tmp/defyolo_test_ckpt.bin";
    g.save(path);
    auto g2 = LayerGraph<float>::build(tiny_config(), 99);  // different init
    g2.load(path);

    Rng rng(3);
    auto x = make_tensor<float>(1, 3, 64, 64);
    fill_uniform(*x, rng, 0.0, 1.0);
    auto a = g.forward(nullptr, x, false);
    auto b = g2.forward(nullptr, x, false);
    for (std::size_t i = 0; i < a.p3->size(); ++i) CHECK(a.p3->data[i] == b.p3->data[i]);
    for (std::size_t i = 0; i < a.p5->size(); ++i) CHECK(a.p5->data[i] == b.p5->data[i]);
    std::remove(path.c_str());
}

TEST_CASE("truncated checkpoint fails cleanly without touching the graph") {
    auto g = LayerGraph<float>::build(tiny_config(), 41);
    const std::string path = "/tmp/defyolo_test_trunc.bin";
    g.save(path);
    // chop the file
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
    in.close();
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), (std::streamsize)(bytes.size() / 2));
    out.close();

    auto g2 = LayerGraph<float>::build(tiny_config(), 42);
    const float before = g2.registry()[0].second->data[0];
    CHECK_THROWS_AS(g2.load(path), std::runtime_error);
    CHECK(g2.registry()[0].second->data[0] == before);
    std::remove(path.c_str());
}

TEST_CASE("loading a baseline checkpoint into a deform graph names the missing tensor") {
    auto base = LayerGraph<float>::build(tiny_config(), 51);
    const std::string path = "/tmp/defyolo_test_base.bin";
    base.save(path);
    auto deform = LayerGraph<float>::build(tiny_config(true, true), 51);
    try {
        deform.load(path);
        FAIL("expected a missing-tensor error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("bad magic is rejected") {
    const std::string path = "/tmp/defyolo_test_magic.bin";
    std::ofstream out(path, std::ios::binary);
    out << "NOPE furthermore this is not a checkpoint";
    out.close();
    auto g = LayerGraph<float>::build(tiny_config(), 61);
    CHECK_THROWS_AS(g.load(path), std::runtime_error);
    std::remove(path.c_str());
}
