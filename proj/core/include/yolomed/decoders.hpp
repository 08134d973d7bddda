#pragma once

#include <memory>
#include <optional>

#include "yolomed/datamodel.hpp"
#include "yolomed/encoder.hpp"

namespace yolomed {

// Per-scale head outputs (batched, NCHW logits).
struct ScalePrediction {
    Var cls;  // [N,C,h,w]
    Var obj;  // [N,1,h,w]
    Var box;  // [N,4,h,w]  (tx, ty, tw, th)
};

struct Detection {
    BoundingBox box;
    double score = 0.0;
    int class_id = 0;
};

// One scale of raw predictions for a single image, detached from the tape.
struct RawScale {
    Tensor cls;  // [C,h,w]
    Tensor obj;  // [1,h,w]
    Tensor box;  // [4,h,w]
    int stride = 8;
};

class Pan : public nn::Module {
public:
    Pan(const ModelConfig& cfg, nn::Rng& rng);
    std::array<Var, 3> forward(const NeckOutput& neck, bool training);

private:
    nn::ConvBlock out1_, down3_, mid4_, down4_, mid5_;
};

// Elementwise additive fusion of a head input with its CSTI counterpart.
// A null x_hat (CSTI disabled) passes x through untouched.
Var fuse_features(const Var& x, const Var& x_hat);

class DetectionHead : public nn::Module {
public:
    DetectionHead(long in_ch, long hidden_ch, int num_classes, bool decoupled, nn::Rng& rng);
    ScalePrediction forward(const Var& x, bool training);

private:
    bool decoupled_;
    int num_classes_;
    // decoupled branch
    std::unique_ptr<nn::ConvBlock> stem_, cls_conv_, reg_conv_;
    std::unique_ptr<nn::Conv2d> cls_pred_, box_pred_, obj_pred_;
    // coupled fallback: one 1x1 conv emitting C+5 channels
    std::unique_ptr<nn::Conv2d> coupled_;
};

class SegHead : public nn::Module {
public:
    SegHead(long in_ch, int num_seg_classes, nn::Rng& rng);

    // Two rounds of integration+upsampling: stride 8 -> H/2 x W/2 x 32.
    Var forward_pre(const Var& p2_path, bool training);
    // Final round on the (optionally fused) H/2 map up to full-resolution logits.
    Var forward_post(const Var& x_seg_fused, bool training);
    Var forward(const Var& p2_path, const Var& x_hat_seg, bool training);

private:
    nn::ConvBlock round1_, round2_, round3_;
    nn::Conv2d out_;
};

// Anchor-free decode: center = (cell + sigmoid(tx,ty))*s, size = exp(tw,th)*s,
// score = sigmoid(obj)*sigmoid(cls); confidence filter then class-wise NMS.
std::vector<Detection> decode_detections(const std::vector<RawScale>& raw, double conf_thresh,
                                         double nms_iou, int image_w, int image_h);

// Inverse of the decode formula for a box whose center lies in `cell` at `stride`.
std::array<double, 4> encode_box(const BoundingBox& box, long cell_x, long cell_y, int stride);

std::vector<Detection> nms_classwise(std::vector<Detection> dets, double iou_thresh);

}  // namespace yolomed
