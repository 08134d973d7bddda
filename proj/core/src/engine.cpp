#include "yolomed/engine.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "yolomed/preprocess.hpp"

namespace yolomed {

namespace fs = std::filesystem;
using namespace ag;
using nlohmann::json;

double lr_schedule(long step, long steps_per_epoch, const ModelConfig& cfg) {
    if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
    const double lr_min = cfg.lr0 / 100.0;
    const long warmup_steps = static_cast<long>(cfg.warmup_epochs) * steps_per_epoch;
    if (step < warmup_steps)
        return lr_min + (cfg.lr0 - lr_min) * static_cast<double>(step) /
                            static_cast<double>(warmup_steps);
    double t = static_cast<double>(step - warmup_steps) / static_cast<double>(steps_per_epoch);
    double cycle = static_cast<double>(cfg.scheduler_t0);
    while (t >= cycle) {
        t -= cycle;
        cycle *= static_cast<double>(cfg.scheduler_t_mult);
    }
    const double frac = 0.5 * (1.0 + std::cos(M_PI * t / cycle));
    return cfg.lr0 * frac + lr_min * (1.0 - frac);
}

SgdOptimizer::SgdOptimizer(std::vector<nn::NamedParam> params, double momentum,
                           double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.var->value.shape());
}

void SgdOptimizer::zero_grad() {
    for (auto& p : params_) p.var->zero_grad();
}

void SgdOptimizer::step(double lr) {
    for (size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        if (!p.var->grad.numel()) continue;
        Tensor& v = velocity_[k];
        const double wd = p.decay ? weight_decay_ : 0.0;
        for (long i = 0; i < v.numel(); ++i) {
            const double g = p.var->grad[i] + wd * p.var->value[i];
            v[i] = momentum_ * v[i] + g;
            p.var->value[i] -= lr * v[i];
        }
    }
}

std::array<GridSpec, 3> grids_for(const ModelConfig& cfg) {
    std::array<GridSpec, 3> grids;
    for (int i = 0; i < 3; ++i) {
        grids[static_cast<size_t>(i)].stride = cfg.strides[static_cast<size_t>(i)];
        grids[static_cast<size_t>(i)].h = cfg.input_size / cfg.strides[static_cast<size_t>(i)];
        grids[static_cast<size_t>(i)].w = grids[static_cast<size_t>(i)].h;
    }
    return grids;
}

PreparedBatch prepare_batch(const Dataset& ds, const std::vector<size_t>& indices,
                            const ModelConfig& cfg, nn::Rng* aug_rng) {
    const long B = static_cast<long>(indices.size());
    const long S = cfg.input_size;
    PreparedBatch batch;
    batch.input = Tensor({B, 3, S, S});
    const auto grids = grids_for(cfg);
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    for (long b = 0; b < B; ++b) {
        const ImageSample& sample = ds.samples[indices[static_cast<size_t>(b)]];
        LetterboxInfo info;
        Tensor img = letterbox_image(sample, cfg.input_size, &info);
        SegmentationMask mask = letterbox_mask(sample.mask, cfg.input_size);
        std::vector<BoundingBox> boxes;
        for (const auto& box : sample.boxes) boxes.push_back(letterbox_box(box, info));

        if (aug_rng && coin(*aug_rng) < cfg.hflip_prob) hflip_inplace(img, mask, boxes);

        std::copy(img.data(), img.data() + img.numel(), batch.input.data() + b * 3 * S * S);
        batch.assignments.push_back(assign_targets(boxes, grids));
        batch.masks.push_back(std::move(mask));
        batch.ids.push_back(sample.id);
    }
    return batch;
}

namespace {

LossBreakdown run_batch(YoloMedNet& net, SgdOptimizer& opt, const PreparedBatch& batch,
                        const ModelConfig& cfg, double lr) {
    opt.zero_grad();
    Var input = constant(batch.input);
    ModelOutputs out = net.forward(input, /*training=*/true);
    std::vector<const SegmentationMask*> masks;
    for (const auto& m : batch.masks) masks.push_back(&m);
    GlobalLoss loss = global_loss(out, batch.assignments, masks, cfg);
    if (!std::isfinite(loss.parts.l_global)) {
        std::string ids;
        for (const auto& id : batch.ids) ids += " " + id;
        throw std::runtime_error("train: non-finite loss; offending batch ids:" + ids);
    }
    ag::backward(loss.value);
    opt.step(lr);
    return loss.parts;
}

SegmentationMask argmax_mask(const Tensor& seg_logits, long n) {
    const long K = seg_logits.dim(1), H = seg_logits.dim(2), W = seg_logits.dim(3);
    SegmentationMask m;
    m.height = static_cast<int>(H);
    m.width = static_cast<int>(W);
    m.data.resize(static_cast<size_t>(H * W));
    for (long i = 0; i < H * W; ++i) {
        long best = 0;
        double best_v = seg_logits[(n * K) * H * W + i];
        for (long k = 1; k < K; ++k) {
            const double v = seg_logits[(n * K + k) * H * W + i];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        m.data[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
    }
    return m;
}

SegmentationMask unletterbox_mask(const SegmentationMask& boxed, const LetterboxInfo& info,
                                  int orig_w, int orig_h) {
    SegmentationMask out;
    out.height = orig_h;
    out.width = orig_w;
    out.data.resize(static_cast<size_t>(orig_h) * orig_w);
    for (int y = 0; y < orig_h; ++y)
        for (int x = 0; x < orig_w; ++x) {
            int by = std::clamp(static_cast<int>(y * info.scale) + info.pad_y, 0,
                                boxed.height - 1);
            int bx = std::clamp(static_cast<int>(x * info.scale) + info.pad_x, 0,
                                boxed.width - 1);
            out.at(y, x) = boxed.at(by, bx);
        }
    return out;
}

}  // namespace

LossBreakdown train_single_step(YoloMedNet& net, SgdOptimizer& opt, const Dataset& batch,
                                double lr) {
    std::vector<size_t> idx(batch.size());
    std::iota(idx.begin(), idx.end(), 0);
    PreparedBatch prepared = prepare_batch(batch, idx, net.config(), nullptr);
    return run_batch(net, opt, prepared, net.config(), lr);
}

EvalReport evaluate_net(YoloMedNet& net, const Dataset& split) {
    if (split.empty()) throw std::invalid_argument("evaluate: empty split");
    const ModelConfig& cfg = net.config();
    NoGradGuard ng;

    std::vector<std::vector<Detection>> all_dets;
    std::vector<std::vector<BoundingBox>> all_gts;
    double pa_sum = 0.0, miou_sum = 0.0;
    double forward_seconds = 0.0;

    for (const auto& sample : split.samples) {
        LetterboxInfo info;
        Tensor img = letterbox_image(sample, cfg.input_size, &info);
        Var input = constant(img.reshaped({1, 3, cfg.input_size, cfg.input_size}));
        const auto t0 = std::chrono::steady_clock::now();
        ModelOutputs out = net.forward(input, /*training=*/false);
        forward_seconds +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        auto raw = net.raw_scales(out, 0);
        std::vector<Detection> dets = decode_detections(raw, cfg.eval_conf_thresh, cfg.nms_iou,
                                                        cfg.input_size, cfg.input_size);
        for (auto& d : dets) {
            const int cls = d.box.class_id;
            d.box = unletterbox_box(d.box, info, sample.width, sample.height);
            d.box.class_id = cls;
        }
        all_dets.push_back(std::move(dets));
        all_gts.push_back(sample.boxes);

        SegmentationMask pred =
            unletterbox_mask(argmax_mask(out.seg_logits->value, 0), info, sample.width,
                             sample.height);
        pa_sum += pixel_accuracy(pred, sample.mask);
        miou_sum += mean_iou(pred, sample.mask, split.num_seg_classes);
    }

    EvalReport report;
    report.ap50 = average_precision(all_dets, all_gts, 0.50, split.num_det_classes,
                                    &report.per_class_ap50);
    report.ap95 = average_precision(all_dets, all_gts, 0.95, split.num_det_classes);
    double coco = 0.0;
    for (int k = 0; k < 10; ++k)
        coco += average_precision(all_dets, all_gts, 0.50 + 0.05 * k, split.num_det_classes);
    report.ap_coco = coco / 10.0;
    report.pa = pa_sum / static_cast<double>(split.size());
    report.mean_iou = miou_sum / static_cast<double>(split.size());
    report.fps = static_cast<double>(split.size()) / std::max(forward_seconds, 1e-9);
    return report;
}

EvalReport evaluate(const std::string& checkpoint_path, const Dataset& split) {
    auto net = load_checkpoint(checkpoint_path);
    return evaluate_net(*net, split);
}

TrainResult train(const ModelConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                  const std::string& out_dir, long max_steps, int val_every_epochs) {
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    fs::create_directories(out_dir);

    YoloMedNet net(cfg);
    SgdOptimizer opt(net.parameters(), cfg.momentum, cfg.weight_decay);

    const long steps_per_epoch =
        (static_cast<long>(train_set.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = max_steps >= 0 ? max_steps
                                            : steps_per_epoch * static_cast<long>(cfg.epochs);

    TrainResult result;
    result.last_checkpoint = (fs::path(out_dir) / "last.ckpt").string();
    result.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
    result.log_csv = (fs::path(out_dir) / "train_log.csv").string();

    std::ofstream log(result.log_csv);
    log << "step,lr,l_class,l_obj,l_box,l_ce,l_global\n";

    nn::Rng shuffle_rng(cfg.seed + 1);
    nn::Rng aug_rng(cfg.seed + 2);
    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    long step = 0;
    double best_metric = -1.0;
    while (step < total_steps) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (size_t pos = 0; pos < order.size() && step < total_steps;
             pos += static_cast<size_t>(cfg.batch_size)) {
            std::vector<size_t> indices(
                order.begin() + static_cast<long>(pos),
                order.begin() + static_cast<long>(std::min(pos + cfg.batch_size, order.size())));
            PreparedBatch batch = prepare_batch(train_set, indices, cfg,
                                                cfg.hflip_prob > 0.0 ? &aug_rng : nullptr);
            const double lr = lr_schedule(step, steps_per_epoch, cfg);
            result.final_loss = run_batch(net, opt, batch, cfg, lr);
            log << step << "," << lr << "," << result.final_loss.l_class << ","
                << result.final_loss.l_obj << "," << result.final_loss.l_box << ","
                << result.final_loss.l_ce << "," << result.final_loss.l_global << "\n";
            ++step;
        }
        save_checkpoint(net, result.last_checkpoint);
        const long epoch = step / std::max<long>(steps_per_epoch, 1);
        if (!val_set.empty() && val_every_epochs > 0 && epoch % val_every_epochs == 0) {
            EvalReport val = evaluate_net(net, val_set);
            const double metric = (std::isnan(val.ap50) ? 0.0 : val.ap50) + val.mean_iou;
            if (metric > best_metric) {
                best_metric = metric;
                save_checkpoint(net, result.best_checkpoint);
            }
        }
    }
    if (best_metric < 0.0) save_checkpoint(net, result.best_checkpoint);
    result.best_val_metric = std::max(best_metric, 0.0);
    log.flush();
    return result;
}

TrainResult train_from_root(const ModelConfig& cfg, const std::string& data_root,
                            const std::string& out_dir) {
    Dataset ds = load_dataset(data_root, (fs::path(data_root) / "annotations.json").string(),
                              cfg.num_seg_classes);
    auto [train_set, val_set, test_set] = split_dataset(ds, {0.70, 0.15, 0.15}, cfg.seed);
    return train(cfg, train_set, val_set, out_dir);
}

InferResult infer(const std::string& checkpoint_path, const std::string& image_path,
                  const std::string& out_dir) {
    cv::Mat bgr = cv::imread(image_path, cv::IMREAD_COLOR);
    if (bgr.empty()) throw std::runtime_error("infer: unreadable image " + image_path);
    fs::create_directories(out_dir);

    auto net = load_checkpoint(checkpoint_path);
    const ModelConfig& cfg = net->config();

    ImageSample sample;
    sample.id = fs::path(image_path).stem().string();
    sample.height = bgr.rows;
    sample.width = bgr.cols;
    sample.image.resize(static_cast<size_t>(bgr.rows) * bgr.cols * 3);
    for (int y = 0; y < bgr.rows; ++y)
        for (int x = 0; x < bgr.cols; ++x) {
            const cv::Vec3b px = bgr.at<cv::Vec3b>(y, x);
            const size_t base = (static_cast<size_t>(y) * bgr.cols + x) * 3;
            sample.image[base + 0] = px[2];
            sample.image[base + 1] = px[1];
            sample.image[base + 2] = px[0];
        }

    NoGradGuard ng;
    LetterboxInfo info;
    Tensor img = letterbox_image(sample, cfg.input_size, &info);
    Var input = constant(img.reshaped({1, 3, cfg.input_size, cfg.input_size}));
    ModelOutputs out = net->forward(input, /*training=*/false);

    InferResult result;
    auto raw = net->raw_scales(out, 0);
    result.detections = decode_detections(raw, cfg.infer_conf_thresh, cfg.nms_iou,
                                          cfg.input_size, cfg.input_size);
    for (auto& d : result.detections) {
        const int cls = d.box.class_id;
        d.box = unletterbox_box(d.box, info, sample.width, sample.height);
        d.box.class_id = cls;
    }

    SegmentationMask pred =
        unletterbox_mask(argmax_mask(out.seg_logits->value, 0), info, sample.width,
                         sample.height);

    // detections JSON
    json records = json::array();
    for (const auto& d : result.detections)
        records.push_back({{"id", sample.id},
                           {"class_id", d.class_id},
                           {"score", d.score},
                           {"box", {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}}});
    result.detections_json = (fs::path(out_dir) / (sample.id + "_detections.json")).string();
    std::ofstream(result.detections_json) << records.dump(2);

    // mask PNG (single channel, nonzero = foreground)
    cv::Mat mask_img(sample.height, sample.width, CV_8UC1);
    for (int y = 0; y < sample.height; ++y)
        for (int x = 0; x < sample.width; ++x)
            mask_img.at<uint8_t>(y, x) = pred.at(y, x) ? 255 : 0;
    result.mask_png = (fs::path(out_dir) / (sample.id + "_mask.png")).string();
    cv::imwrite(result.mask_png, mask_img);

    // overlay: mask tint + boxes, detection and segmentation in one figure
    cv::Mat overlay = bgr.clone();
    for (int y = 0; y < sample.height; ++y)
        for (int x = 0; x < sample.width; ++x)
            if (pred.at(y, x)) {
                cv::Vec3b& px = overlay.at<cv::Vec3b>(y, x);
                px[1] = static_cast<uint8_t>(std::min(255, px[1] + 80));
            }
    for (const auto& d : result.detections) {
        cv::rectangle(overlay,
                      cv::Point(static_cast<int>(d.box.x_min), static_cast<int>(d.box.y_min)),
                      cv::Point(static_cast<int>(d.box.x_max), static_cast<int>(d.box.y_max)),
                      cv::Scalar(0, 0, 255), 2);
        cv::putText(overlay, std::to_string(d.class_id) + ":" + std::to_string(d.score).substr(0, 4),
                    cv::Point(static_cast<int>(d.box.x_min), static_cast<int>(d.box.y_min) - 3),
                    cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 255), 1);
    }
    result.overlay_png = (fs::path(out_dir) / (sample.id + "_overlay.png")).string();
    cv::imwrite(result.overlay_png, overlay);
    return result;
}

}  // namespace yolomed
