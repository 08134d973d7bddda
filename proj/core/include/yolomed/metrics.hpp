#pragma once

#include <functional>
#include <limits>

#include "yolomed/decoders.hpp"
#include "yolomed/model.hpp"

namespace yolomed {

struct EvalReport {
    double ap50 = 0.0;
    double ap95 = 0.0;       // AP at the single 0.95 IoU threshold
    double ap_coco = 0.0;    // AP averaged over IoU 0.5:0.05:0.95
    double pa = 0.0;
    double mean_iou = 0.0;
    double fps = 0.0;
    std::vector<double> per_class_ap50;

    std::string to_json() const;
};

// 4x4 Pearson correlations between pooled CSTI outputs
// (x_det1_hat, x_det2_hat, x_det3_hat, x_seg_hat).
struct CorrelationMap {
    std::array<std::array<double, 4>, 4> values{};
};

double box_iou(const BoundingBox& a, const BoundingBox& b);

// Greedy one-to-one matching at iou_thresh, 101-point interpolated AP,
// averaged over classes with at least one ground truth. NaN when the whole
// set has no ground truth.
double average_precision(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<BoundingBox>>& gts, double iou_thresh,
                         int num_classes, std::vector<double>* per_class = nullptr);

double pixel_accuracy(const SegmentationMask& pred, const SegmentationMask& gt);

// Per-class IoU averaged over classes present in pred or gt.
double mean_iou(const SegmentationMask& pred, const SegmentationMask& gt, int num_classes);

struct LatencyStats {
    double fps_mean = 0.0;
    double latency_p50_ms = 0.0;
    double latency_p95_ms = 0.0;
    std::string hardware;
};

// Wall-clock per single forward pass after warmup.
LatencyStats benchmark_latency(const std::function<void()>& forward_once, int warmup_iters,
                               int timed_iters);

// Runs the model on one sample and correlates channel-averaged CSTI outputs
// on a common stride-8 grid. Zero-variance maps yield NaN entries.
CorrelationMap csti_correlation_map(YoloMedNet& net, const ImageSample& sample);

// Correlations from already-computed CSTI outputs (single image in batch).
CorrelationMap csti_correlation_from_outputs(const ModelOutputs& out);

}  // namespace yolomed
