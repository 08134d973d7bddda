#pragma once

#include "yolomed/checkpoint.hpp"
#include "yolomed/losses.hpp"
#include "yolomed/metrics.hpp"

namespace yolomed {

// Linear warmup from lr0/100 over the first warmup epochs, then cosine
// annealing with warm restarts (first cycle T0 epochs, length multiplier
// T_mult, floor lr0/100).
double lr_schedule(long step, long steps_per_epoch, const ModelConfig& cfg);

// SGD with momentum; weight decay is skipped for biases and norm params.
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<nn::NamedParam> params, double momentum, double weight_decay);
    void step(double lr);
    void zero_grad();

private:
    std::vector<nn::NamedParam> params_;
    std::vector<ag::Tensor> velocity_;
    double momentum_, weight_decay_;
};

struct TrainResult {
    std::string last_checkpoint;
    std::string best_checkpoint;
    std::string log_csv;
    LossBreakdown final_loss;
    double best_val_metric = 0.0;  // val AP50 + meanIoU
};

// Full training loop over pre-split datasets. max_steps < 0 trains
// cfg.epochs epochs; otherwise stops after that many optimizer steps.
TrainResult train(const ModelConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                  const std::string& out_dir, long max_steps = -1, int val_every_epochs = 1);

// Loads root/{images,masks,annotations.json}, splits 70/15/15, trains.
TrainResult train_from_root(const ModelConfig& cfg, const std::string& data_root,
                            const std::string& out_dir);

EvalReport evaluate_net(YoloMedNet& net, const Dataset& split);
EvalReport evaluate(const std::string& checkpoint_path, const Dataset& split);

struct InferResult {
    std::string detections_json;
    std::string mask_png;
    std::string overlay_png;
    std::vector<Detection> detections;
};

InferResult infer(const std::string& checkpoint_path, const std::string& image_path,
                  const std::string& out_dir);

// One optimizer step on a fixed batch; exposed for ablation/structure tests.
LossBreakdown train_single_step(YoloMedNet& net, SgdOptimizer& opt, const Dataset& batch,
                                double lr);

// Batch assembly shared by training and tests: letterbox + optional flip.
struct PreparedBatch {
    ag::Tensor input;  // [B,3,S,S]
    std::vector<Assignment> assignments;
    std::vector<SegmentationMask> masks;
    std::vector<std::string> ids;
};
PreparedBatch prepare_batch(const Dataset& ds, const std::vector<size_t>& indices,
                            const ModelConfig& cfg, nn::Rng* aug_rng);

std::array<GridSpec, 3> grids_for(const ModelConfig& cfg);

}  // namespace yolomed
