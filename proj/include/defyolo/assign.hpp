#pragma once

#include <array>
#include <vector>

#include "defyolo/boxes.hpp"

namespace defyolo {

struct GroundTruthBox {
    int class_id = 0;
    Box box;  // model-input pixel space
};

struct AnchorPoint {
    double cx = 0, cy = 0;
    int stride = 8;
};

// Anchor-free grid: one point per feature cell, center (col+0.5)*stride, in
// scale order (finest first), row-major within a scale.
std::vector<AnchorPoint> make_anchor_points(const std::vector<int>& strides, int input_size);

struct AssignConfig {
    int topk = 10;
    double score_pow = 0.5;  // alignment metric m = score^0.5 * iou^6.0
    double iou_pow = 6.0;
};

struct AnchorAssignment {
    int gt_index = -1;    // -1: negative anchor
    double weight = 0.0;  // normalized alignment weight, (0,1] for positives
};

// Task-aligned top-k assignment. Candidates are anchors whose center lies
// inside the GT box; the top-k candidates per GT by m = score^a * iou^b
// become positives; an anchor contested by several GTs goes to the one with
// the larger m (ties to the lower GT index).
std::vector<AnchorAssignment> assign_targets(
    const std::vector<std::vector<double>>& cls_scores,      // [anchor][class], probabilities
    const std::vector<std::array<double, 4>>& pred_boxes,    // [anchor] xyxy pixels
    const std::vector<GroundTruthBox>& gts,
    const std::vector<AnchorPoint>& anchors, const AssignConfig& cfg);

}  // namespace defyolo
