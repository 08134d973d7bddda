#pragma once

#include "yolomed/csti.hpp"
#include "yolomed/decoders.hpp"

namespace yolomed {

struct ModelOutputs {
    std::array<ScalePrediction, 3> det;
    Var seg_logits;  // [N, K, H, W]
    // CSTI outputs, kept for the correlation diagnostic; null when disabled.
    std::array<Var, 3> x_det_hat;
    Var x_seg_hat;
};

// The full multi-task network: shared encoder, PAN + detection heads,
// segmentation head, optional cross-scale task-interaction fusion.
class YoloMedNet : public nn::Module {
public:
    explicit YoloMedNet(const ModelConfig& cfg);

    ModelOutputs forward(const Var& image, bool training);

    // Per-scale raw prediction tensors for image n of the last batch layout.
    std::vector<RawScale> raw_scales(const ModelOutputs& out, long n) const;

    const ModelConfig& config() const { return cfg_; }

    Encoder encoder;
    Pan pan;
    std::array<std::unique_ptr<DetectionHead>, 3> heads;
    SegHead seg_head;
    std::unique_ptr<Csti> csti;  // null when use_csti is false

private:
    YoloMedNet(const ModelConfig& cfg, nn::Rng rng);

    ModelConfig cfg_;
};

}  // namespace yolomed
