#include "defyolo/graph.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace defyolo {

int ModelConfig::scaled_channels(int c) const {
    double scaled = std::min(c, max_channels) * width_multiple;
    return static_cast<int>(std::ceil(scaled / 8.0) * 8.0);
}

int ModelConfig::scaled_repeats(int n) const {
    return std::max(1, (int)std::lround(n * depth_multiple));
}

const char* block_kind_name(BlockKind k) {
    switch (k) {
        case BlockKind::Cbs: return "CBS";
        case BlockKind::C2f: return "C2f";
        case BlockKind::Sppf: return "SPPF";
        case BlockKind::Upsample: return "Upsample";
        case BlockKind::Concat: return "Concat";
        case BlockKind::Detect: return "Detect";
    }
    return "?";
}

namespace {

// YOLOv8 layer table (nominal channels, scaled at build time). The paper's
// layer indices 4/6/15/18/21 refer to the C2f rows of this table.
struct TableRow {
    BlockKind kind;
    std::vector<int> from;  // -1 means previous layer
    int c = 0;
    int n = 0;
    bool shortcut = false;
    int k = 0, s = 0;
};

const std::vector<TableRow>& v8_table() {
    static const std::vector<TableRow> t = {
        {BlockKind::Cbs, {-1}, 64, 0, false, 3, 2},      // 0  P1
        {BlockKind::Cbs, {-1}, 128, 0, false, 3, 2},     // 1  P2
        {BlockKind::C2f, {-1}, 128, 3, true},            // 2
        {BlockKind::Cbs, {-1}, 256, 0, false, 3, 2},     // 3  P3
        {BlockKind::C2f, {-1}, 256, 6, true},            // 4
        {BlockKind::Cbs, {-1}, 512, 0, false, 3, 2},     // 5  P4
        {BlockKind::C2f, {-1}, 512, 6, true},            // 6
        {BlockKind::Cbs, {-1}, 1024, 0, false, 3, 2},    // 7  P5
        {BlockKind::C2f, {-1}, 1024, 3, true},           // 8
        {BlockKind::Sppf, {-1}, 1024},                   // 9
        {BlockKind::Upsample, {-1}},                     // 10
        {BlockKind::Concat, {-1, 6}},                    // 11
        {BlockKind::C2f, {-1}, 512, 3, false},           // 12
        {BlockKind::Upsample, {-1}},                     // 13
        {BlockKind::Concat, {-1, 4}},                    // 14
        {BlockKind::C2f, {-1}, 256, 3, false},           // 15 (P3 head in)
        {BlockKind::Cbs, {-1}, 256, 0, false, 3, 2},     // 16
        {BlockKind::Concat, {-1, 12}},                   // 17
        {BlockKind::C2f, {-1}, 512, 3, false},           // 18 (P4 head in)
        {BlockKind::Cbs, {-1}, 512, 0, false, 3, 2},     // 19
        {BlockKind::Concat, {-1, 9}},                    // 20
        {BlockKind::C2f, {-1}, 1024, 3, false},          // 21 (P5 head in)
        {BlockKind::Detect, {15, 18, 21}},               // 22
    };
    return t;
}

bool is_deform_c2f_layer(int idx) {
    return idx == 4 || idx == 6 || idx == 15 || idx == 18 || idx == 21;
}

template <typename T>
ConvParams<T> make_conv(Rng& rng, int cin, int cout, int k, int stride, bool bias,
                        bool zero_init = false) {
    ConvParams<T> p;
    p.weight = make_tensor<T>(cout, cin, k, k);
    if (!zero_init) fill_kaiming(*p.weight, rng);
    if (bias) p.bias = make_tensor<T>(1, cout, 1, 1);
    p.stride = stride;
    p.padding = k / 2;
    return p;
}

template <typename T>
BnParams<T> make_bn(int c) {
    BnParams<T> p;
    p.gamma = make_tensor<T>(1, c, 1, 1);
    p.beta = make_tensor<T>(1, c, 1, 1);
    p.running_mean = make_tensor<T>(1, c, 1, 1);
    p.running_var = make_tensor<T>(1, c, 1, 1);
    std::fill(p.gamma->data.begin(), p.gamma->data.end(), T(1));
    std::fill(p.running_var->data.begin(), p.running_var->data.end(), T(1));
    return p;
}

template <typename T>
CbsBlock<T> make_cbs(Rng& rng, int cin, int cout, int k, int stride, bool deform) {
    CbsBlock<T> b;
    b.conv = make_conv<T>(rng, cin, cout, k, stride, /*bias=*/false);
    if (deform) {
        // zero-initialized so the initial behavior equals the standard conv
        b.offset = make_conv<T>(rng, cin, 2 * k * k, k, stride, /*bias=*/true,
                                /*zero_init=*/true);
    }
    b.bn = make_bn<T>(cout);
    return b;
}

template <typename T>
BottleneckBlock<T> make_bottleneck(Rng& rng, int c, bool shortcut, bool deform) {
    BottleneckBlock<T> b;
    b.cv1 = make_cbs<T>(rng, c, c, 3, 1, deform);
    b.cv2 = make_cbs<T>(rng, c, c, 3, 1, deform);
    b.shortcut = shortcut;
    return b;
}

std::int64_t conv_flops(int cin, int cout, int k, Shape4 out, bool bias) {
    std::int64_t hw = (std::int64_t)out.h * out.w;
    return (2LL * k * k * cin + (bias ? 1 : 0)) * cout * hw;
}

// bn(2) + silu(5) per element
std::int64_t cbs_tail_flops(int cout, Shape4 out) {
    return 7LL * cout * out.h * out.w;
}

std::int64_t deform_extra_flops(int cin, int k, Shape4 out) {
    std::int64_t hw = (std::int64_t)out.h * out.w;
    std::int64_t taps = (std::int64_t)k * k;
    std::int64_t offset_conv = (2LL * k * k * cin + 1) * (2 * taps) * hw;
    std::int64_t sampling = 8LL * taps * cin * hw;  // bilinear per tap per channel
    return offset_conv + sampling;
}

}  // namespace

// ---------------------------------------------------------------------------
// block forwards
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> CbsBlock<T>::forward(Tape<T>* tape, const TensorPtr<T>& x, bool training) {
    TensorPtr<T> y;
    if (offset) {
        DeformConvParams<T> dp{conv, *offset};
        y = deform_conv2d(tape, x, dp);
    } else {
        y = conv2d(tape, x, conv);
    }
    y = batchnorm2d(tape, y, bn, training);
    return unary(tape, UnaryKind::Silu, y);
}

template <typename T>
TensorPtr<T> BottleneckBlock<T>::forward(Tape<T>* tape, const TensorPtr<T>& x, bool training) {
    auto y = cv2.forward(tape, cv1.forward(tape, x, training), training);
    if (shortcut) return add(tape, x, y);
    return y;
}

template <typename T>
TensorPtr<T> C2fBlock<T>::forward(Tape<T>* tape, const TensorPtr<T>& x, bool training) {
    auto y = cv1.forward(tape, x, training);
    std::vector<TensorPtr<T>> parts;
    parts.push_back(slice_channels(tape, y, 0, hidden));
    parts.push_back(slice_channels(tape, y, hidden, 2 * hidden));
    for (auto& b : m) parts.push_back(b.forward(tape, parts.back(), training));
    return cv2.forward(tape, concat_channels(tape, parts), training);
}

template <typename T>
TensorPtr<T> SppfBlock<T>::forward(Tape<T>* tape, const TensorPtr<T>& x, bool training) {
    auto a = cv1.forward(tape, x, training);
    auto p1 = maxpool2d(tape, a, 5, 1, 2);
    auto p2 = maxpool2d(tape, p1, 5, 1, 2);
    auto p3 = maxpool2d(tape, p2, 5, 1, 2);
    return cv2.forward(tape, concat_channels(tape, {a, p1, p2, p3}), training);
}

template <typename T>
TensorPtr<T> DetectScale<T>::forward(Tape<T>* tape, const TensorPtr<T>& x, bool training) {
    auto b = conv2d(tape, box2.forward(tape, box1.forward(tape, x, training), training), box3);
    auto c = conv2d(tape, cls2.forward(tape, cls1.forward(tape, x, training), training), cls3);
    return concat_channels(tape, {b, c});
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

template <typename T>
LayerGraph<T> LayerGraph<T>::build(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.num_classes <= 0 || cfg.reg_max <= 0 || cfg.input_size % 32 != 0)
        throw std::invalid_argument("model config: nc/reg_max positive, input divisible by 32");

    LayerGraph g;
    g.cfg_ = cfg;
    Rng rng(seed);

    const auto& table = v8_table();
    std::vector<int> ch;  // realized output channels per layer

    for (int idx = 0; idx < (int)table.size(); ++idx) {
        const auto& row = table[idx];
        Layer<T> layer;
        layer.kind = row.kind;
        if (idx > 0) {  // layer 0 reads the graph input
            for (int f : row.from) layer.from.push_back(f < 0 ? idx + f : f);
            for (int f : layer.from)
                if (f < 0 || f >= idx)
                    throw std::logic_error("layer table: from-index must precede the layer");
        }

        const int cin = idx == 0 ? 3 : ch[layer.from[0]];
        switch (row.kind) {
            case BlockKind::Cbs: {
                const int cout = cfg.scaled_channels(row.c);
                layer.cbs = std::make_shared<CbsBlock<T>>(
                    make_cbs<T>(rng, cin, cout, row.k, row.s, false));
                layer.channels_out = cout;
                break;
            }
            case BlockKind::C2f: {
                const int cout = cfg.scaled_channels(row.c);
                const int n = cfg.scaled_repeats(row.n);
                const bool deform = cfg.deform_c2f && is_deform_c2f_layer(idx);
                auto blk = std::make_shared<C2fBlock<T>>();
                blk->hidden = cout / 2;
                blk->cv1 = make_cbs<T>(rng, cin, cout, 1, 1, false);
                for (int i = 0; i < n; ++i)
                    blk->m.push_back(make_bottleneck<T>(rng, blk->hidden, row.shortcut, deform));
                blk->cv2 = make_cbs<T>(rng, (2 + n) * blk->hidden, cout, 1, 1, false);
                layer.c2f = blk;
                layer.channels_out = cout;
                layer.deform = deform;
                break;
            }
            case BlockKind::Sppf: {
                const int cout = cfg.scaled_channels(row.c);
                const int hidden = cin / 2;
                auto blk = std::make_shared<SppfBlock<T>>();
                blk->cv1 = make_cbs<T>(rng, cin, hidden, 1, 1, cfg.deform_sppf);
                blk->cv2 = make_cbs<T>(rng, hidden * 4, cout, 1, 1, cfg.deform_sppf);
                layer.sppf = blk;
                layer.channels_out = cout;
                layer.deform = cfg.deform_sppf;
                break;
            }
            case BlockKind::Upsample:
                layer.channels_out = cin;
                break;
            case BlockKind::Concat: {
                int c = 0;
                for (int f : layer.from) c += ch[f];
                layer.channels_out = c;
                break;
            }
            case BlockKind::Detect: {
                const int ch0 = ch[layer.from[0]];
                const int c2 = std::max({16, ch0 / 4, 4 * cfg.reg_max});
                const int c3 = std::max(ch0, std::min(cfg.num_classes, 100));
                for (std::size_t s = 0; s < layer.from.size(); ++s) {
                    const int ci = ch[layer.from[s]];
                    DetectScale<T> ds;
                    ds.box1 = make_cbs<T>(rng, ci, c2, 3, 1, false);
                    ds.box2 = make_cbs<T>(rng, c2, c2, 3, 1, false);
                    ds.box3 = make_conv<T>(rng, c2, 4 * cfg.reg_max, 1, 1, true);
                    ds.cls1 = make_cbs<T>(rng, ci, c3, 3, 1, false);
                    ds.cls2 = make_cbs<T>(rng, c3, c3, 3, 1, false);
                    ds.cls3 = make_conv<T>(rng, c3, cfg.num_classes, 1, 1, true);
                    // prior-style head bias: boxes start near small distances,
                    // class logits start near the expected object density
                    std::fill(ds.box3.bias->data.begin(), ds.box3.bias->data.end(), T(1));
                    const double stride = kStrides[s];
                    const double prior =
                        std::log(5.0 / cfg.num_classes / std::pow(cfg.input_size / stride, 2));
                    std::fill(ds.cls3.bias->data.begin(), ds.cls3.bias->data.end(), T(prior));
                    layer.detect.push_back(std::move(ds));
                }
                layer.channels_out = cfg.head_channels();
                break;
            }
        }
        ch.push_back(layer.channels_out);
        g.layers_.push_back(std::move(layer));
    }

    g.last_use_.assign(g.layers_.size(), -1);
    for (int idx = 0; idx < (int)g.layers_.size(); ++idx)
        for (int f : g.layers_[idx].from) g.last_use_[f] = std::max(g.last_use_[f], idx);

    g.register_params();
    return g;
}

template <typename T>
void LayerGraph<T>::register_params() {
    registry_.clear();
    auto reg = [&](const std::string& name, const TensorPtr<T>& t, bool trainable = true) {
        registry_.push_back({ParamInfo{name, trainable}, t});
    };
    auto reg_conv = [&](const std::string& p, ConvParams<T>& c) {
        reg(p + ".weight", c.weight);
        if (c.bias) reg(p + ".bias", c.bias);
    };
    auto reg_cbs = [&](const std::string& p, CbsBlock<T>& b) {
        reg_conv(p + ".conv", b.conv);
        if (b.offset) reg_conv(p + ".offset", *b.offset);
        reg(p + ".bn.gamma", b.bn.gamma);
        reg(p + ".bn.beta", b.bn.beta);
        reg(p + ".bn.running_mean", b.bn.running_mean, false);
        reg(p + ".bn.running_var", b.bn.running_var, false);
    };

    for (int idx = 0; idx < (int)layers_.size(); ++idx) {
        auto& l = layers_[idx];
        const std::string base = std::to_string(idx);
        switch (l.kind) {
            case BlockKind::Cbs:
                reg_cbs(base, *l.cbs);
                break;
            case BlockKind::C2f:
                reg_cbs(base + ".cv1", l.c2f->cv1);
                for (std::size_t i = 0; i < l.c2f->m.size(); ++i) {
                    reg_cbs(base + ".m" + std::to_string(i) + ".cv1", l.c2f->m[i].cv1);
                    reg_cbs(base + ".m" + std::to_string(i) + ".cv2", l.c2f->m[i].cv2);
                }
                reg_cbs(base + ".cv2", l.c2f->cv2);
                break;
            case BlockKind::Sppf:
                reg_cbs(base + ".cv1", l.sppf->cv1);
                reg_cbs(base + ".cv2", l.sppf->cv2);
                break;
            case BlockKind::Detect:
                for (std::size_t s = 0; s < l.detect.size(); ++s) {
                    const std::string sp = base + ".s" + std::to_string(s);
                    reg_cbs(sp + ".box1", l.detect[s].box1);
                    reg_cbs(sp + ".box2", l.detect[s].box2);
                    reg_conv(sp + ".box3", l.detect[s].box3);
                    reg_cbs(sp + ".cls1", l.detect[s].cls1);
                    reg_cbs(sp + ".cls2", l.detect[s].cls2);
                    reg_conv(sp + ".cls3", l.detect[s].cls3);
                }
                break;
            default:
                break;
        }
    }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

template <typename T>
typename LayerGraph<T>::Outputs LayerGraph<T>::forward(Tape<T>* tape, const TensorPtr<T>& input,
                                                       bool training) {
    if (input->shape.c != 3 || input->shape.h != cfg_.input_size ||
        input->shape.w != cfg_.input_size)
        throw std::invalid_argument("forward: expected input (N,3," +
                                    std::to_string(cfg_.input_size) + "," +
                                    std::to_string(cfg_.input_size) + "), got " +
                                    input->shape.str());

    auto expected = shape_table(cfg_.input_size);
    std::vector<TensorPtr<T>> acts(layers_.size());
    Outputs out;

    for (int idx = 0; idx < (int)layers_.size(); ++idx) {
        auto& l = layers_[idx];
        const TensorPtr<T>& x0 = l.from.empty() ? input : acts[l.from[0]];
        TensorPtr<T> y;
        switch (l.kind) {
            case BlockKind::Cbs:
                y = l.cbs->forward(tape, x0, training);
                break;
            case BlockKind::C2f:
                y = l.c2f->forward(tape, x0, training);
                break;
            case BlockKind::Sppf:
                y = l.sppf->forward(tape, x0, training);
                break;
            case BlockKind::Upsample:
                y = upsample_nearest2x(tape, x0);
                break;
            case BlockKind::Concat: {
                std::vector<TensorPtr<T>> xs;
                for (int f : l.from) xs.push_back(acts[f]);
                y = concat_channels(tape, xs);
                break;
            }
            case BlockKind::Detect:
                out.p3 = l.detect[0].forward(tape, acts[l.from[0]], training);
                out.p4 = l.detect[1].forward(tape, acts[l.from[1]], training);
                out.p5 = l.detect[2].forward(tape, acts[l.from[2]], training);
                y = out.p3;
                break;
        }
        if (y->shape.c != expected[idx].shape.c || y->shape.h != expected[idx].shape.h ||
            y->shape.w != expected[idx].shape.w)
            throw std::logic_error("layer " + std::to_string(idx) + " produced " +
                                   y->shape.str() + ", shape table says " +
                                   expected[idx].shape.str());
        acts[idx] = y;
        if (!tape)  // free activations no later layer consumes
            for (int j = 0; j <= idx; ++j)
                if (last_use_[j] <= idx && last_use_[j] >= 0) acts[j].reset();
    }
    return out;
}

// ---------------------------------------------------------------------------
// accounting
// ---------------------------------------------------------------------------

template <typename T>
std::vector<LayerShapeRow> LayerGraph<T>::shape_table(int input_size) const {
    std::vector<LayerShapeRow> rows;
    std::vector<Shape4> shapes;
    auto params_of = [&](int idx) {
        std::int64_t p = 0;
        const std::string prefix = std::to_string(idx) + ".";
        for (auto& [info, t] : registry_)
            if (info.trainable && info.name.rfind(prefix, 0) == 0) p += (std::int64_t)t->size();
        return p;
    };
    for (int idx = 0; idx < (int)layers_.size(); ++idx) {
        auto& l = layers_[idx];
        Shape4 in = idx == 0 ? Shape4{1, 3, input_size, input_size} : shapes[l.from[0]];
        Shape4 s = in;
        switch (l.kind) {
            case BlockKind::Cbs:
                s = conv_out_shape(in, l.cbs->conv);
                break;
            case BlockKind::C2f:
                s = Shape4{in.n, l.channels_out, in.h, in.w};
                break;
            case BlockKind::Sppf:
                s = Shape4{in.n, l.channels_out, in.h, in.w};
                break;
            case BlockKind::Upsample:
                s = Shape4{in.n, in.c, in.h * 2, in.w * 2};
                break;
            case BlockKind::Concat:
                s = Shape4{in.n, l.channels_out, in.h, in.w};
                break;
            case BlockKind::Detect:
                s = Shape4{in.n, l.channels_out, in.h, in.w};  // finest scale
                break;
        }
        shapes.push_back(s);
        rows.push_back({idx, block_kind_name(l.kind), s, params_of(idx)});
    }
    return rows;
}

template <typename T>
std::int64_t LayerGraph<T>::count_params() const {
    std::int64_t p = 0;
    for (auto& [info, t] : registry_)
        if (info.trainable) p += (std::int64_t)t->size();
    return p;
}

template <typename T>
double LayerGraph<T>::count_gflops(int input_size) const {
    std::vector<Shape4> shapes;
    std::int64_t flops = 0;

    auto cbs_flops = [&](const CbsBlock<T>& b, Shape4 in) {
        Shape4 out = conv_out_shape(in, b.conv);
        flops += conv_flops(b.conv.c_in(), b.conv.c_out(), b.conv.k(), out, (bool)b.conv.bias);
        flops += cbs_tail_flops(b.conv.c_out(), out);
        if (b.offset) flops += deform_extra_flops(b.conv.c_in(), b.conv.k(), out);
        return out;
    };

    for (int idx = 0; idx < (int)layers_.size(); ++idx) {
        auto& l = layers_[idx];
        Shape4 in = idx == 0 ? Shape4{1, 3, input_size, input_size} : shapes[l.from[0]];
        Shape4 out = in;
        switch (l.kind) {
            case BlockKind::Cbs:
                out = cbs_flops(*l.cbs, in);
                break;
            case BlockKind::C2f: {
                out = cbs_flops(l.c2f->cv1, in);
                Shape4 half{in.n, l.c2f->hidden, in.h, in.w};
                for (auto& b : l.c2f->m) {
                    cbs_flops(b.cv1, half);
                    cbs_flops(b.cv2, half);
                    if (b.shortcut) flops += (std::int64_t)half.c * half.h * half.w;
                }
                Shape4 cat{in.n, (int)(2 + l.c2f->m.size()) * l.c2f->hidden, in.h, in.w};
                out = cbs_flops(l.c2f->cv2, cat);
                break;
            }
            case BlockKind::Sppf: {
                Shape4 a = cbs_flops(l.sppf->cv1, in);
                flops += 3 * 24LL * a.c * a.h * a.w;  // three 5x5 pools
                Shape4 cat{in.n, a.c * 4, a.h, a.w};
                out = cbs_flops(l.sppf->cv2, cat);
                break;
            }
            case BlockKind::Upsample:
                out = Shape4{in.n, in.c, in.h * 2, in.w * 2};
                break;
            case BlockKind::Concat:
                out = Shape4{in.n, l.channels_out, in.h, in.w};
                break;
            case BlockKind::Detect: {
                for (std::size_t s = 0; s < l.detect.size(); ++s) {
                    Shape4 si = shapes[l.from[s]];
                    Shape4 b1 = cbs_flops(l.detect[s].box1, si);
                    Shape4 b2 = cbs_flops(l.detect[s].box2, b1);
                    flops += conv_flops(l.detect[s].box3.c_in(), l.detect[s].box3.c_out(), 1, b2,
                                        true);
                    Shape4 c1 = cbs_flops(l.detect[s].cls1, si);
                    Shape4 c2 = cbs_flops(l.detect[s].cls2, c1);
                    flops += conv_flops(l.detect[s].cls3.c_in(), l.detect[s].cls3.c_out(), 1, c2,
                                        true);
                }
                out = Shape4{in.n, l.channels_out, in.h, in.w};
                break;
            }
        }
        shapes.push_back(out);
    }
    return (double)flops / 1e9;
}

template <typename T>
int LayerGraph<T>::num_deform_blocks() const {
    int n = 0;
    for (auto& l : layers_) {
        if (l.kind == BlockKind::Sppf && l.deform) n += 2;  // its two CBS blocks
        if (l.kind == BlockKind::C2f && l.deform) n += 1;
    }
    return n;
}

template <typename T>
std::vector<TensorPtr<T>> LayerGraph<T>::trainable_params() const {
    std::vector<TensorPtr<T>> out;
    for (auto& [info, t] : registry_)
        if (info.trainable) out.push_back(t);
    return out;
}

template <typename T>
void LayerGraph<T>::set_requires_grad(bool rg) {
    for (auto& [info, t] : registry_)
        if (info.trainable) t->set_requires_grad(rg);
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'E', 'F', 'Y'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
    os.write((const char*)b, 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read((char*)b, 4);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return (std::uint32_t)b[0] | ((std::uint32_t)b[1] << 8) | ((std::uint32_t)b[2] << 16) |
           ((std::uint32_t)b[3] << 24);
}

}  // namespace

template <typename T>
void LayerGraph<T>::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, (std::uint32_t)registry_.size());
    for (auto& [info, t] : registry_) {
        write_u32(os, (std::uint32_t)info.name.size());
        os.write(info.name.data(), (std::streamsize)info.name.size());
        write_u32(os, (std::uint32_t)t->shape.n);
        write_u32(os, (std::uint32_t)t->shape.c);
        write_u32(os, (std::uint32_t)t->shape.h);
        write_u32(os, (std::uint32_t)t->shape.w);
        std::vector<float> buf(t->data.begin(), t->data.end());
        os.write((const char*)buf.data(), (std::streamsize)(buf.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <typename T>
void LayerGraph<T>::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const std::uint32_t version = read_u32(is);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = read_u32(is);

    // Stage everything first so a bad file leaves the graph untouched.
    std::map<std::string, std::pair<Shape4, std::vector<float>>> staged;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = read_u32(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        Shape4 s{(int)read_u32(is), (int)read_u32(is), (int)read_u32(is), (int)read_u32(is)};
        std::vector<float> data(s.numel());
        is.read((char*)data.data(), (std::streamsize)(data.size() * sizeof(float)));
        if (!is) throw std::runtime_error("checkpoint: truncated file at tensor " + name);
        staged[name] = {s, std::move(data)};
    }

    for (auto& [info, t] : registry_) {
        auto it = staged.find(info.name);
        if (it == staged.end())
            throw std::runtime_error("checkpoint: missing tensor " + info.name);
        if (!(it->second.first == t->shape))
            throw std::runtime_error("checkpoint: shape mismatch for " + info.name +
                                     ": file has " + it->second.first.str() +
                                     ", model expects " + t->shape.str());
    }
    if (staged.size() != registry_.size())
        for (auto& [name, _] : staged) {
            bool known = false;
            for (auto& [info, t] : registry_) known = known || info.name == name;
            if (!known) throw std::runtime_error("checkpoint: unexpected tensor " + name);
        }

    for (auto& [info, t] : registry_) {
        auto& data = staged[info.name].second;
        for (std::size_t i = 0; i < data.size(); ++i) t->data[i] = (T)data[i];
    }
}

template <typename T>
void LayerGraph<T>::copy_matching_weights(const LayerGraph& src) {
    std::map<std::string, TensorPtr<T>> by_name;
    for (auto& [info, t] : src.registry_) by_name[info.name] = t;
    for (auto& [info, t] : registry_) {
        auto it = by_name.find(info.name);
        if (it != by_name.end() && it->second->shape == t->shape) t->data = it->second->data;
    }
}

template struct CbsBlock<float>;
template struct CbsBlock<double>;
template struct BottleneckBlock<float>;
template struct BottleneckBlock<double>;
template struct C2fBlock<float>;
template struct C2fBlock<double>;
template struct SppfBlock<float>;
template struct SppfBlock<double>;
template struct DetectScale<float>;
template struct DetectScale<double>;
template class LayerGraph<float>;
template class LayerGraph<double>;

}  // namespace defyolo
