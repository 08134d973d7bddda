#include "yolomed/encoder.hpp"

namespace yolomed {

using namespace ag;

namespace detail {

Bottleneck::Bottleneck(long channels, nn::Rng& rng)
    : cv1_(channels, channels, 1, 1, rng), cv2_(channels, channels, 3, 1, rng) {
    register_child("cv1", &cv1_);
    register_child("cv2", &cv2_);
}

Var Bottleneck::forward(const Var& x, bool training) {
    return add(x, cv2_.forward(cv1_.forward(x, training), training));
}

CspStage::CspStage(long in_ch, long out_ch, int depth, nn::Rng& rng)
    : down_(in_ch, out_ch, 3, 2, rng),
      split_main_(out_ch, out_ch / 2, 1, 1, rng),
      split_cross_(out_ch, out_ch / 2, 1, 1, rng),
      merge_(out_ch, out_ch, 1, 1, rng) {
    register_child("down", &down_);
    register_child("split_main", &split_main_);
    register_child("split_cross", &split_cross_);
    register_child("merge", &merge_);
    for (int i = 0; i < depth; ++i) {
        blocks_.push_back(std::make_unique<Bottleneck>(out_ch / 2, rng));
        register_child("block" + std::to_string(i), blocks_.back().get());
    }
}

Var CspStage::forward(const Var& x, bool training) {
    Var d = down_.forward(x, training);
    Var main = split_main_.forward(d, training);
    Var cross = split_cross_.forward(d, training);
    for (auto& b : blocks_) main = b->forward(main, training);
    return merge_.forward(concat({main, cross}, 1), training);
}

}  // namespace detail

namespace {
long stage_channels(const ModelConfig& cfg, int i) {
    // strides (2,4,8,16,32) carry (n3/4, n3/2, n3, n4, n5) channels
    const long n3 = cfg.neck_channels[0];
    switch (i) {
        case 0: return std::max<long>(4, n3 / 4);
        case 1: return std::max<long>(4, n3 / 2);
        case 2: return n3;
        case 3: return cfg.neck_channels[1];
        default: return cfg.neck_channels[2];
    }
}
}  // namespace

Backbone::Backbone(const ModelConfig& cfg, nn::Rng& rng)
    : stem_(3, stage_channels(cfg, 0), 3, 2, rng),
      stage1_(stage_channels(cfg, 0), stage_channels(cfg, 1), 1, rng),
      stage2_(stage_channels(cfg, 1), stage_channels(cfg, 2), 2, rng),
      stage3_(stage_channels(cfg, 2), stage_channels(cfg, 3), 2, rng),
      stage4_(stage_channels(cfg, 3), stage_channels(cfg, 4), 1, rng) {
    register_child("stem", &stem_);
    register_child("stage1", &stage1_);
    register_child("stage2", &stage2_);
    register_child("stage3", &stage3_);
    register_child("stage4", &stage4_);
}

std::array<Var, 3> Backbone::forward(const Var& image, bool training) {
    if (image.get() == nullptr || image->value.ndim() != 4 || image->value.dim(1) != 3)
        throw std::invalid_argument("Backbone: expected [N,3,H,W] input");
    if (image->value.dim(2) % 32 != 0 || image->value.dim(3) % 32 != 0)
        throw std::invalid_argument("Backbone: input size must be divisible by 32");
    if (!image->value.all_finite())
        throw std::invalid_argument("Backbone: non-finite input pixel");
    Var x = stem_.forward(image, training);
    x = stage1_.forward(x, training);
    Var c3 = stage2_.forward(x, training);
    Var c4 = stage3_.forward(c3, training);
    Var c5 = stage4_.forward(c4, training);
    return {c3, c4, c5};
}

Spp::Spp(long channels, nn::Rng& rng) : project_(channels * 4, channels, 1, 1, rng) {
    register_child("project", &project_);
}

Var Spp::forward(const Var& c5, bool training) {
    Var m5 = maxpool2d_same(c5, 5);
    Var m9 = maxpool2d_same(c5, 9);
    Var m13 = maxpool2d_same(c5, 13);
    return project_.forward(concat({c5, m5, m9, m13}, 1), training);
}

Fpn::Fpn(const ModelConfig& cfg, nn::Rng& rng)
    : lat5_(cfg.neck_channels[2], cfg.neck_channels[1], 1, 1, rng),
      lat4m_(cfg.neck_channels[1], cfg.neck_channels[1], 1, 1, rng),
      out4_(cfg.neck_channels[1], cfg.neck_channels[1], 3, 1, rng),
      lat4_(cfg.neck_channels[1], cfg.neck_channels[0], 1, 1, rng),
      lat3m_(cfg.neck_channels[0], cfg.neck_channels[0], 1, 1, rng),
      out3_(cfg.neck_channels[0], cfg.neck_channels[0], 3, 1, rng),
      out5_(cfg.neck_channels[2], cfg.neck_channels[2], 3, 1, rng) {
    register_child("lat5", &lat5_);
    register_child("lat4m", &lat4m_);
    register_child("out4", &out4_);
    register_child("lat4", &lat4_);
    register_child("lat3m", &lat3m_);
    register_child("out3", &out3_);
    register_child("out5", &out5_);
}

NeckOutput Fpn::forward(const Var& c3, const Var& c4, const Var& c5_spp, bool training) {
    Var p5 = out5_.forward(c5_spp, training);
    Var t4 = add(upsample_nearest2x(lat5_.forward(c5_spp, training)),
                 lat4m_.forward(c4, training));
    Var p4 = out4_.forward(t4, training);
    Var t3 = add(upsample_nearest2x(lat4_.forward(p4, training)), lat3m_.forward(c3, training));
    Var p3 = out3_.forward(t3, training);
    return {p3, p4, p5, p3};
}

Encoder::Encoder(const ModelConfig& cfg, nn::Rng& rng)
    : backbone(cfg, rng), spp(cfg.neck_channels[2], rng), fpn(cfg, rng) {
    register_child("backbone", &backbone);
    register_child("spp", &spp);
    register_child("fpn", &fpn);
}

NeckOutput Encoder::forward(const Var& image, bool training) {
    auto [c3, c4, c5] = backbone.forward(image, training);
    Var c5s = spp.forward(c5, training);
    return fpn.forward(c3, c4, c5s, training);
}

}  // namespace yolomed
