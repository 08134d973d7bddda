#pragma once

#include "yolomed/model.hpp"

namespace yolomed {

struct GridSpec {
    int stride = 8;
    long h = 0, w = 0;
};

struct PositiveCell {
    int scale = 0;        // 0..2
    long cell = 0;        // row-major index into the scale grid
    BoundingBox gt;       // matched ground-truth box
};

// Positive-cell lists per scale plus dense objectness targets.
struct Assignment {
    std::vector<PositiveCell> positives;
    std::array<std::vector<double>, 3> obj_targets;  // h*w per scale
};

// Scale selection by sqrt(box area): <64 px -> stride 8, [64,128) -> 16,
// >=128 -> 32. The positive for each box is the cell containing the box
// center on its scale (the only cell whose regression range covers the
// target); when two boxes claim the same cell the closer center wins.
Assignment assign_targets(const std::vector<BoundingBox>& gt_boxes,
                          const std::array<GridSpec, 3>& grids);

// Mean sigmoid focal loss; targets are {0,1} and alpha weights positives.
Var focal_loss(const Var& logits, const Tensor& targets, double alpha, double gamma);

// Mean of 1 - CIoU over paired boxes [P,4] (x1,y1,x2,y2).
Var ciou_loss(const Var& pred_xyxy, const Tensor& gt_xyxy);

// Mean per-pixel cross-entropy with logits; sigmoid form for two classes.
Var seg_ce_loss(const Var& seg_logits, const std::vector<const SegmentationMask*>& masks);

struct LossBreakdown {
    double l_class = 0, l_obj = 0, l_box = 0, l_ce = 0, l_global = 0;
};

struct GlobalLoss {
    Var value;
    LossBreakdown parts;
};

GlobalLoss global_loss(const ModelOutputs& out, const std::vector<Assignment>& assignments,
                       const std::vector<const SegmentationMask*>& masks, const ModelConfig& cfg);

}  // namespace yolomed
