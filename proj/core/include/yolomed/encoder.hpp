#pragma once

#include <memory>

#include "yolomed/config.hpp"
#include "yolomed/nn.hpp"

namespace yolomed {

using ag::Tensor;
using ag::Var;

// Neck features at strides (8,16,32). p2_path is the stride-8 tap feeding
// the segmentation head.
struct NeckOutput {
    Var p3, p4, p5;
    Var p2_path;
};

namespace detail {

// Standard residual bottleneck used inside CSP stages.
class Bottleneck : public nn::Module {
public:
    Bottleneck(long channels, nn::Rng& rng);
    Var forward(const Var& x, bool training);

private:
    nn::ConvBlock cv1_, cv2_;
};

// Downsample then split-transform-merge with a cross-stage partial connection.
class CspStage : public nn::Module {
public:
    CspStage(long in_ch, long out_ch, int depth, nn::Rng& rng);
    Var forward(const Var& x, bool training);

private:
    nn::ConvBlock down_, split_main_, split_cross_, merge_;
    std::vector<std::unique_ptr<Bottleneck>> blocks_;
};

}  // namespace detail

class Backbone : public nn::Module {
public:
    Backbone(const ModelConfig& cfg, nn::Rng& rng);

    // Input [N,3,H,W] normalized to [0,1]; returns c3/c4/c5 at strides 8/16/32.
    std::array<Var, 3> forward(const Var& image, bool training);

private:
    nn::ConvBlock stem_;
    detail::CspStage stage1_, stage2_, stage3_, stage4_;
};

// Parallel max pools {5,9,13} concatenated with identity, projected back.
class Spp : public nn::Module {
public:
    Spp(long channels, nn::Rng& rng);
    Var forward(const Var& c5, bool training);

private:
    nn::ConvBlock project_;
};

class Fpn : public nn::Module {
public:
    Fpn(const ModelConfig& cfg, nn::Rng& rng);
    NeckOutput forward(const Var& c3, const Var& c4, const Var& c5_spp, bool training);

private:
    nn::ConvBlock lat5_, lat4m_, out4_, lat4_, lat3m_, out3_, out5_;
};

class Encoder : public nn::Module {
public:
    Encoder(const ModelConfig& cfg, nn::Rng& rng);
    NeckOutput forward(const Var& image, bool training);

    Backbone backbone;
    Spp spp;
    Fpn fpn;
};

}  // namespace yolomed
