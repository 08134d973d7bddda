#include "yolomed/model.hpp"

namespace yolomed {

using namespace ag;

namespace {
nn::Rng make_rng(const ModelConfig& cfg) { return nn::Rng(cfg.seed); }
}  // namespace

YoloMedNet::YoloMedNet(const ModelConfig& cfg)
    : YoloMedNet([&cfg] {
          ModelConfig c = cfg;
          c.validate();
          return c;
      }(), make_rng(cfg)) {}

// delegating helper so a single Rng threads through construction order
YoloMedNet::YoloMedNet(const ModelConfig& cfg, nn::Rng rng)
    : encoder(cfg, rng),
      pan(cfg, rng),
      seg_head(cfg.neck_channels[0], cfg.num_seg_classes, rng),
      cfg_(cfg) {
    register_child("encoder", &encoder);
    register_child("pan", &pan);
    for (int i = 0; i < 3; ++i) {
        heads[static_cast<size_t>(i)] = std::make_unique<DetectionHead>(
            cfg.neck_channels[static_cast<size_t>(i)], cfg.neck_channels[0],
            cfg.num_det_classes, cfg.use_dh, rng);
        register_child("head" + std::to_string(i + 1), heads[static_cast<size_t>(i)].get());
    }
    register_child("seg_head", &seg_head);
    if (cfg.use_csti) {
        csti = std::make_unique<Csti>(cfg, rng);
        register_child("csti", csti.get());
    }
}

ModelOutputs YoloMedNet::forward(const Var& image, bool training) {
    NeckOutput neck = encoder.forward(image, training);
    std::array<Var, 3> x_det = pan.forward(neck, training);
    Var x_seg = seg_head.forward_pre(neck.p2_path, training);

    ModelOutputs out;
    if (csti) {
        auto [det_hat, seg_hat] = csti->forward(x_det, x_seg);
        out.x_det_hat = det_hat;
        out.x_seg_hat = seg_hat;
    }
    for (int i = 0; i < 3; ++i) {
        Var fused = fuse_features(x_det[static_cast<size_t>(i)],
                                  out.x_det_hat[static_cast<size_t>(i)]);
        out.det[static_cast<size_t>(i)] =
            heads[static_cast<size_t>(i)]->forward(fused, training);
    }
    out.seg_logits = seg_head.forward_post(fuse_features(x_seg, out.x_seg_hat), training);
    return out;
}

std::vector<RawScale> YoloMedNet::raw_scales(const ModelOutputs& out, long n) const {
    std::vector<RawScale> raw;
    for (int i = 0; i < 3; ++i) {
        const ScalePrediction& p = out.det[static_cast<size_t>(i)];
        const long C = p.cls->value.dim(1), h = p.cls->value.dim(2), w = p.cls->value.dim(3);
        RawScale r;
        r.stride = cfg_.strides[static_cast<size_t>(i)];
        auto extract = [n](const Var& v, long ch, long h, long w) {
            Tensor t({ch, h, w});
            const double* src = v->value.data() + n * ch * h * w;
            std::copy(src, src + ch * h * w, t.data());
            return t;
        };
        r.cls = extract(p.cls, C, h, w);
        r.obj = extract(p.obj, 1, h, w);
        r.box = extract(p.box, 4, h, w);
        raw.push_back(std::move(r));
    }
    return raw;
}

}  // namespace yolomed
