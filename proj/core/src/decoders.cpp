#include "yolomed/decoders.hpp"

#include <algorithm>
#include <cmath>

namespace yolomed {

using namespace ag;

Pan::Pan(const ModelConfig& cfg, nn::Rng& rng)
    : out1_(cfg.neck_channels[0], cfg.neck_channels[0], 3, 1, rng),
      down3_(cfg.neck_channels[0], cfg.neck_channels[1], 3, 2, rng),
      mid4_(cfg.neck_channels[1], cfg.neck_channels[1], 3, 1, rng),
      down4_(cfg.neck_channels[1], cfg.neck_channels[2], 3, 2, rng),
      mid5_(cfg.neck_channels[2], cfg.neck_channels[2], 3, 1, rng) {
    register_child("out1", &out1_);
    register_child("down3", &down3_);
    register_child("mid4", &mid4_);
    register_child("down4", &down4_);
    register_child("mid5", &mid5_);
}

std::array<Var, 3> Pan::forward(const NeckOutput& neck, bool training) {
    Var x1 = out1_.forward(neck.p3, training);
    Var t4 = add(down3_.forward(neck.p3, training), neck.p4);
    Var x2 = mid4_.forward(t4, training);
    Var t5 = add(down4_.forward(x2, training), neck.p5);
    Var x3 = mid5_.forward(t5, training);
    return {x1, x2, x3};
}

Var fuse_features(const Var& x, const Var& x_hat) {
    if (!x_hat) return x;
    if (!x->value.same_shape(x_hat->value))
        throw std::invalid_argument("fuse_features: shape mismatch " + x->value.shape_str() +
                                    " vs " + x_hat->value.shape_str());
    return add(x, x_hat);
}

DetectionHead::DetectionHead(long in_ch, long hidden_ch, int num_classes, bool decoupled,
                             nn::Rng& rng)
    : decoupled_(decoupled), num_classes_(num_classes) {
    if (decoupled_) {
        stem_ = std::make_unique<nn::ConvBlock>(in_ch, hidden_ch, 1, 1, rng);
        cls_conv_ = std::make_unique<nn::ConvBlock>(hidden_ch, hidden_ch, 3, 1, rng);
        reg_conv_ = std::make_unique<nn::ConvBlock>(hidden_ch, hidden_ch, 3, 1, rng);
        cls_pred_ = std::make_unique<nn::Conv2d>(hidden_ch, num_classes, 1, 1, rng);
        box_pred_ = std::make_unique<nn::Conv2d>(hidden_ch, 4, 1, 1, rng);
        obj_pred_ = std::make_unique<nn::Conv2d>(hidden_ch, 1, 1, 1, rng);
        register_child("stem", stem_.get());
        register_child("cls_conv", cls_conv_.get());
        register_child("reg_conv", reg_conv_.get());
        register_child("cls_pred", cls_pred_.get());
        register_child("box_pred", box_pred_.get());
        register_child("obj_pred", obj_pred_.get());
        obj_pred_->bias_->value.fill(-4.0);  // low initial objectness prior
    } else {
        coupled_ = std::make_unique<nn::Conv2d>(in_ch, num_classes + 5, 1, 1, rng);
        register_child("coupled", coupled_.get());
        coupled_->bias_->value[num_classes] = -4.0;  // objectness channel
    }
}

ScalePrediction DetectionHead::forward(const Var& x, bool training) {
    if (decoupled_) {
        Var s = stem_->forward(x, training);
        Var c = cls_conv_->forward(s, training);
        Var r = reg_conv_->forward(s, training);
        return {cls_pred_->forward(c), obj_pred_->forward(r), box_pred_->forward(r)};
    }
    Var y = coupled_->forward(x);
    return {slice(y, 1, 0, num_classes_), slice(y, 1, num_classes_, 1),
            slice(y, 1, num_classes_ + 1, 4)};
}

SegHead::SegHead(long in_ch, int num_seg_classes, nn::Rng& rng)
    : round1_(in_ch, 64, 3, 1, rng),
      round2_(64, 32, 3, 1, rng),
      round3_(32, 16, 3, 1, rng),
      out_(16, num_seg_classes, 1, 1, rng) {
    register_child("round1", &round1_);
    register_child("round2", &round2_);
    register_child("round3", &round3_);
    register_child("out", &out_);
}

Var SegHead::forward_pre(const Var& p2_path, bool training) {
    Var x = upsample_nearest2x(round1_.forward(p2_path, training));  // stride 8 -> 4
    return upsample_nearest2x(round2_.forward(x, training));         // stride 4 -> 2, 32 ch
}

Var SegHead::forward_post(const Var& x_seg_fused, bool training) {
    Var x = upsample_nearest2x(round3_.forward(x_seg_fused, training));  // stride 2 -> 1
    return out_.forward(x);
}

Var SegHead::forward(const Var& p2_path, const Var& x_hat_seg, bool training) {
    Var x_seg = forward_pre(p2_path, training);
    return forward_post(fuse_features(x_seg, x_hat_seg), training);
}

std::array<double, 4> encode_box(const BoundingBox& box, long cell_x, long cell_y, int stride) {
    auto logit = [](double p) {
        p = std::clamp(p, 1e-9, 1.0 - 1e-9);
        return std::log(p / (1.0 - p));
    };
    const double s = static_cast<double>(stride);
    return {logit(box.cx() / s - static_cast<double>(cell_x)),
            logit(box.cy() / s - static_cast<double>(cell_y)),
            std::log(box.width() / s), std::log(box.height() / s)};
}

namespace {
double iou_xyxy(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}
}  // namespace

std::vector<Detection> nms_classwise(std::vector<Detection> dets, double iou_thresh) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    std::vector<bool> removed(dets.size(), false);
    for (size_t i = 0; i < dets.size(); ++i) {
        if (removed[i]) continue;
        kept.push_back(dets[i]);
        for (size_t j = i + 1; j < dets.size(); ++j) {
            if (removed[j] || dets[j].class_id != dets[i].class_id) continue;
            if (iou_xyxy(dets[i].box, dets[j].box) >= iou_thresh) removed[j] = true;
        }
    }
    return kept;
}

std::vector<Detection> decode_detections(const std::vector<RawScale>& raw, double conf_thresh,
                                         double nms_iou, int image_w, int image_h) {
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    std::vector<Detection> cands;
    for (const auto& scale : raw) {
        const long C = scale.cls.dim(0), h = scale.cls.dim(1), w = scale.cls.dim(2);
        const double s = static_cast<double>(scale.stride);
        for (long cy = 0; cy < h; ++cy)
            for (long cx = 0; cx < w; ++cx) {
                const long cell = cy * w + cx;
                const double obj_p = sig(scale.obj[cell]);
                if (obj_p < conf_thresh) continue;  // score <= obj_p, cheap reject
                for (long c = 0; c < C; ++c) {
                    const double score = obj_p * sig(scale.cls[c * h * w + cell]);
                    if (score < conf_thresh) continue;
                    const double bx = (static_cast<double>(cx) + sig(scale.box[0 * h * w + cell])) * s;
                    const double by = (static_cast<double>(cy) + sig(scale.box[1 * h * w + cell])) * s;
                    const double bw = std::exp(scale.box[2 * h * w + cell]) * s;
                    const double bh = std::exp(scale.box[3 * h * w + cell]) * s;
                    Detection d;
                    d.box.x_min = std::clamp(bx - bw / 2.0, 0.0, static_cast<double>(image_w));
                    d.box.y_min = std::clamp(by - bh / 2.0, 0.0, static_cast<double>(image_h));
                    d.box.x_max = std::clamp(bx + bw / 2.0, 0.0, static_cast<double>(image_w));
                    d.box.y_max = std::clamp(by + bh / 2.0, 0.0, static_cast<double>(image_h));
                    d.box.class_id = static_cast<int>(c);
                    d.score = score;
                    d.class_id = static_cast<int>(c);
                    if (d.box.valid()) cands.push_back(d);
                }
            }
    }
    return nms_classwise(std::move(cands), nms_iou);
}

}  // namespace yolomed
