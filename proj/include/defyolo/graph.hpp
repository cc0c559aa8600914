#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "defyolo/ops.hpp"

namespace defyolo {

struct ModelConfig {
    double depth_multiple = 0.33;
    double width_multiple = 0.50;
    int max_channels = 1024;
    int num_classes = 4;
    int reg_max = 16;
    int input_size = 640;
    bool deform_sppf = false;
    bool deform_c2f = false;
    bool focal_loss = false;

    int scaled_channels(int c) const;
    int scaled_repeats(int n) const;
    int head_channels() const { return 4 * reg_max + num_classes; }
};

enum class BlockKind { Cbs, C2f, Sppf, Upsample, Concat, Detect };

const char* block_kind_name(BlockKind k);

// Conv + BatchNorm + SiLU; deformable when the offset branch is present.
template <typename T>
struct CbsBlock {
    ConvParams<T> conv;
    std::optional<ConvParams<T>> offset;
    BnParams<T> bn;

    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, bool training);
};

template <typename T>
struct BottleneckBlock {
    CbsBlock<T> cv1, cv2;
    bool shortcut = false;

    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, bool training);
};

// Split-transform-concat: 1x1 in, n bottlenecks chained on the second half,
// every intermediate kept and concatenated, 1x1 out.
template <typename T>
struct C2fBlock {
    CbsBlock<T> cv1, cv2;
    std::vector<BottleneckBlock<T>> m;
    int hidden = 0;

    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, bool training);
};

// 1x1 down, three chained 5x5 stride-1 maxpools (receptive fields 5/9/13),
// concat, 1x1 out.
template <typename T>
struct SppfBlock {
    CbsBlock<T> cv1, cv2;

    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, bool training);
};

template <typename T>
struct DetectScale {
    CbsBlock<T> box1, box2;
    ConvParams<T> box3;
    CbsBlock<T> cls1, cls2;
    ConvParams<T> cls3;

    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, bool training);
};

template <typename T>
struct Layer {
    BlockKind kind;
    std::vector<int> from;  // absolute indices of input layers
    int channels_out = 0;
    std::shared_ptr<CbsBlock<T>> cbs;
    std::shared_ptr<C2fBlock<T>> c2f;
    std::shared_ptr<SppfBlock<T>> sppf;
    std::vector<DetectScale<T>> detect;
    bool deform = false;
};

struct ParamInfo {
    std::string name;
    bool trainable = true;
};

struct LayerShapeRow {
    int index;
    std::string kind;
    Shape4 shape;
    std::int64_t params;
};

template <typename T>
class LayerGraph {
public:
    static LayerGraph build(const ModelConfig& cfg, std::uint64_t seed);

    struct Outputs {
        TensorPtr<T> p3, p4, p5;  // (N, 4*reg_max+nc, S/8|16|32, ...) raw logits
    };

    Outputs forward(Tape<T>* tape, const TensorPtr<T>& input, bool training);

    const ModelConfig& config() const { return cfg_; }
    static constexpr int kStrides[3] = {8, 16, 32};

    std::int64_t count_params() const;  // trainable parameters only
    double count_gflops(int input_size) const;
    std::vector<LayerShapeRow> shape_table(int input_size) const;
    int num_deform_blocks() const;

    // Parameter registry, ordered; names are stable across builds of the
    // same config.
    std::vector<TensorPtr<T>> trainable_params() const;
    const std::vector<std::pair<ParamInfo, TensorPtr<T>>>& registry() const { return registry_; }
    void set_requires_grad(bool rg);

    // Checkpoint: "DEFY", u32 version, u32 tensor count, then per tensor
    // name-length/name/4xu32 shape/f32 little-endian payload.
    void save(const std::string& path) const;
    void load(const std::string& path);

    // Copies weights whose names match from another graph (used to share base
    // weights between the plain and deformable variants).
    void copy_matching_weights(const LayerGraph& src);

private:
    ModelConfig cfg_;
    std::vector<Layer<T>> layers_;
    std::vector<std::pair<ParamInfo, TensorPtr<T>>> registry_;
    std::vector<int> last_use_;  // highest layer index consuming each output

    void register_params();
};

using LayerGraphF = LayerGraph<float>;
using LayerGraphD = LayerGraph<double>;

}  // namespace defyolo
