#include "yolomed/config.hpp"

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include <cmath>
#include <stdexcept>

namespace yolomed {

using nlohmann::json;

void ModelConfig::finalize() {
    auto scaled = [this](int c) {
        return std::max(4, static_cast<int>(std::lround(width_mult * c)));
    };
    neck_channels = {scaled(128), scaled(256), scaled(512)};
    validate();
}

void ModelConfig::validate() const {
    if (input_size <= 0 || input_size % 32 != 0)
        throw std::invalid_argument("ModelConfig: input_size must be a positive multiple of 32");
    if (num_det_classes < 1 || num_seg_classes < 2)
        throw std::invalid_argument("ModelConfig: class counts out of range");
    if (std::fabs(alpha1 + alpha2 + alpha3 - 1.0) > 1e-9)
        throw std::invalid_argument("ModelConfig: alpha weights must sum to 1");
    if (std::fabs(beta1 + beta2 - 1.0) > 1e-9)
        throw std::invalid_argument("ModelConfig: beta weights must sum to 1");
    if (token_dim < attn_heads || token_dim % attn_heads != 0)
        throw std::invalid_argument("ModelConfig: token_dim must be divisible by attn_heads");
}

std::string ModelConfig::to_json() const {
    json j;
    j["input_size"] = input_size;
    j["num_det_classes"] = num_det_classes;
    j["num_seg_classes"] = num_seg_classes;
    j["use_dh"] = use_dh;
    j["use_csti"] = use_csti;
    j["token_dim"] = token_dim;
    j["attn_heads"] = attn_heads;
    j["ffn_ratio"] = ffn_ratio;
    j["width_mult"] = width_mult;
    j["neck_channels"] = neck_channels;
    j["alpha1"] = alpha1;
    j["alpha2"] = alpha2;
    j["alpha3"] = alpha3;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["focal_alpha"] = focal_alpha;
    j["focal_gamma"] = focal_gamma;
    j["lr0"] = lr0;
    j["momentum"] = momentum;
    j["weight_decay"] = weight_decay;
    j["scheduler_t0"] = scheduler_t0;
    j["scheduler_t_mult"] = scheduler_t_mult;
    j["warmup_epochs"] = warmup_epochs;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["hflip_prob"] = hflip_prob;
    j["eval_conf_thresh"] = eval_conf_thresh;
    j["infer_conf_thresh"] = infer_conf_thresh;
    j["nms_iou"] = nms_iou;
    j["seed"] = seed;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig c;
    auto get = [&j](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("input_size", c.input_size);
    get("num_det_classes", c.num_det_classes);
    get("num_seg_classes", c.num_seg_classes);
    get("use_dh", c.use_dh);
    get("use_csti", c.use_csti);
    get("token_dim", c.token_dim);
    get("attn_heads", c.attn_heads);
    get("ffn_ratio", c.ffn_ratio);
    get("width_mult", c.width_mult);
    get("neck_channels", c.neck_channels);
    get("alpha1", c.alpha1);
    get("alpha2", c.alpha2);
    get("alpha3", c.alpha3);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("focal_alpha", c.focal_alpha);
    get("focal_gamma", c.focal_gamma);
    get("lr0", c.lr0);
    get("momentum", c.momentum);
    get("weight_decay", c.weight_decay);
    get("scheduler_t0", c.scheduler_t0);
    get("scheduler_t_mult", c.scheduler_t_mult);
    get("warmup_epochs", c.warmup_epochs);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("hflip_prob", c.hflip_prob);
    get("eval_conf_thresh", c.eval_conf_thresh);
    get("infer_conf_thresh", c.infer_conf_thresh);
    get("nms_iou", c.nms_iou);
    get("seed", c.seed);
    c.validate();
    return c;
}

ModelConfig ModelConfig::from_yaml_file(const std::string& path) {
    YAML::Node y = YAML::LoadFile(path);
    ModelConfig c;
    auto get = [&y](const char* key, auto& field) {
        if (y[key]) field = y[key].as<std::decay_t<decltype(field)>>();
    };
    get("input_size", c.input_size);
    get("num_det_classes", c.num_det_classes);
    get("num_seg_classes", c.num_seg_classes);
    get("use_dh", c.use_dh);
    get("use_csti", c.use_csti);
    get("token_dim", c.token_dim);
    get("attn_heads", c.attn_heads);
    get("ffn_ratio", c.ffn_ratio);
    get("width_mult", c.width_mult);
    get("alpha1", c.alpha1);
    get("alpha2", c.alpha2);
    get("alpha3", c.alpha3);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("focal_alpha", c.focal_alpha);
    get("focal_gamma", c.focal_gamma);
    get("lr0", c.lr0);
    get("momentum", c.momentum);
    get("weight_decay", c.weight_decay);
    get("scheduler_t0", c.scheduler_t0);
    get("scheduler_t_mult", c.scheduler_t_mult);
    get("warmup_epochs", c.warmup_epochs);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("hflip_prob", c.hflip_prob);
    get("eval_conf_thresh", c.eval_conf_thresh);
    get("infer_conf_thresh", c.infer_conf_thresh);
    get("nms_iou", c.nms_iou);
    get("seed", c.seed);
    c.finalize();
    return c;
}

}  // namespace yolomed
