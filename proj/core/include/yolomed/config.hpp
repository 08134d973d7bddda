#pragma once

#include <array>
#include <string>

namespace yolomed {

// Every architecture/training hyperparameter in one place. Ablation toggles
// use_dh / use_csti select the Table-3 style variants.
struct ModelConfig {
    int input_size = 256;  // H = W, multiple of 32
    int num_det_classes = 1;
    int num_seg_classes = 2;

    bool use_dh = true;
    bool use_csti = true;

    int token_dim = 64;
    int attn_heads = 4;
    double ffn_ratio = 2.0;

    std::array<int, 3> strides{8, 16, 32};
    double width_mult = 1.0;  // scales neck/backbone channels below
    std::array<int, 3> neck_channels{128, 256, 512};

    // composite loss weights
    double alpha1 = 1.0 / 3.0, alpha2 = 1.0 / 3.0, alpha3 = 1.0 / 3.0;
    double beta1 = 0.5, beta2 = 0.5;
    double focal_alpha = 0.25, focal_gamma = 2.0;

    // optimizer / scheduler
    double lr0 = 1e-2;
    double momentum = 0.937;
    double weight_decay = 5e-4;
    int scheduler_t0 = 10;  // epochs, first cosine cycle
    int scheduler_t_mult = 2;
    int warmup_epochs = 3;
    int epochs = 100;
    int batch_size = 8;
    double hflip_prob = 0.5;

    // eval / inference thresholds
    double eval_conf_thresh = 0.001;
    double infer_conf_thresh = 0.25;
    double nms_iou = 0.65;

    unsigned long long seed = 0;

    // Applies width_mult to the default channel triple and checks invariants.
    void finalize();
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& json);
    static ModelConfig from_yaml_file(const std::string& path);
};

}  // namespace yolomed
