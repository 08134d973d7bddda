// Command-line front end: train / eval / infer / bench / csti-corr.
#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "yolomed/engine.hpp"

namespace fs = std::filesystem;
using namespace yolomed;

namespace {

ModelConfig load_config(const std::string& config_path) {
    ModelConfig cfg;
    if (!config_path.empty()) {
        cfg = ModelConfig::from_yaml_file(config_path);
    } else {
        cfg.finalize();
    }
    if (const char* env_seed = std::getenv("YOLOMED_SEED")) {
        cfg.seed = std::stoull(env_seed);
    }
    cfg.validate();
    return cfg;
}

std::tuple<Dataset, Dataset, Dataset> load_splits(const std::string& data_root,
                                                  const ModelConfig& cfg) {
    Dataset ds = load_dataset(data_root, (fs::path(data_root) / "annotations.json").string(),
                              cfg.num_seg_classes);
    return split_dataset(ds, {0.70, 0.15, 0.15}, cfg.seed);
}

ImageSample read_image_sample(const std::string& image_path) {
    cv::Mat bgr = cv::imread(image_path, cv::IMREAD_COLOR);
    if (bgr.empty()) throw std::runtime_error("cannot read image " + image_path);
    ImageSample s;
    s.id = fs::path(image_path).stem().string();
    s.height = bgr.rows;
    s.width = bgr.cols;
    s.image.resize(static_cast<size_t>(bgr.rows) * bgr.cols * 3);
    for (int y = 0; y < bgr.rows; ++y)
        for (int x = 0; x < bgr.cols; ++x) {
            const cv::Vec3b px = bgr.at<cv::Vec3b>(y, x);
            const size_t base = (static_cast<size_t>(y) * bgr.cols + x) * 3;
            s.image[base + 0] = px[2];
            s.image[base + 1] = px[1];
            s.image[base + 2] = px[0];
        }
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-task lesion detection + segmentation network"};
    app.require_subcommand(1);

    std::string config_path, data_root, out_dir = "runs", checkpoint, image_path, split = "test";
    bool no_csti = false, no_dh = false;
    int warmup = 5, iters = 30;

    auto* train_cmd = app.add_subcommand("train", "Train on root/{images,masks,annotations.json}");
    train_cmd->add_option("--config", config_path, "YAML config file");
    train_cmd->add_option("--data", data_root, "dataset root")->required();
    train_cmd->add_option("--out", out_dir, "output directory");
    train_cmd->add_flag("--no-csti", no_csti, "disable the cross-scale fusion module");
    train_cmd->add_flag("--no-dh", no_dh, "use the coupled detection head");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    eval_cmd->add_option("--ckpt", checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--data", data_root, "dataset root")->required();
    eval_cmd->add_option("--split", split, "train|val|test");
    eval_cmd->add_option("--config", config_path, "YAML config (split seed/classes)");

    auto* infer_cmd = app.add_subcommand("infer", "Run one image, write JSON + mask + overlay");
    infer_cmd->add_option("--ckpt", checkpoint, "checkpoint file")->required();
    infer_cmd->add_option("--image", image_path, "input image")->required();
    infer_cmd->add_option("--out", out_dir, "output directory");

    auto* bench_cmd = app.add_subcommand("bench", "Forward-pass latency statistics");
    bench_cmd->add_option("--config", config_path, "YAML config file");
    bench_cmd->add_option("--ckpt", checkpoint, "optional checkpoint");
    bench_cmd->add_option("--warmup", warmup, "warmup iterations");
    bench_cmd->add_option("--iters", iters, "timed iterations (>= 10)");

    auto* corr_cmd = app.add_subcommand("csti-corr",
                                        "Cross-scale fusion-output correlation diagnostic");
    corr_cmd->add_option("--ckpt", checkpoint, "checkpoint file")->required();
    corr_cmd->add_option("--image", image_path, "input image")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) {
            ModelConfig cfg = load_config(config_path);
            if (no_csti) cfg.use_csti = false;
            if (no_dh) cfg.use_dh = false;
            TrainResult result = train_from_root(cfg, data_root, out_dir);
            std::cout << "final loss " << result.final_loss.l_global << "\n"
                      << "last checkpoint: " << result.last_checkpoint << "\n"
                      << "best checkpoint: " << result.best_checkpoint << "\n"
                      << "log: " << result.log_csv << "\n";
        } else if (*eval_cmd) {
            ModelConfig cfg = load_config(config_path);
            auto [train_set, val_set, test_set] = load_splits(data_root, cfg);
            const Dataset& ds = split == "train" ? train_set : split == "val" ? val_set : test_set;
            EvalReport report = evaluate(checkpoint, ds);
            std::cout << report.to_json() << "\n";
        } else if (*infer_cmd) {
            InferResult result = infer(checkpoint, image_path, out_dir);
            std::cout << result.detections.size() << " detections\n"
                      << result.detections_json << "\n"
                      << result.mask_png << "\n"
                      << result.overlay_png << "\n";
        } else if (*bench_cmd) {
            std::unique_ptr<YoloMedNet> net;
            if (!checkpoint.empty()) {
                net = load_checkpoint(checkpoint);
            } else {
                net = std::make_unique<YoloMedNet>(load_config(config_path));
            }
            const long S = net->config().input_size;
            ag::NoGradGuard ng;
            ag::Var input = ag::constant(ag::Tensor({1, 3, S, S}));
            LatencyStats stats = benchmark_latency(
                [&] { net->forward(input, /*training=*/false); }, warmup, iters);
            std::cout << "hardware: " << stats.hardware << "\n"
                      << "fps_mean: " << stats.fps_mean << "\n"
                      << "latency_p50_ms: " << stats.latency_p50_ms << "\n"
                      << "latency_p95_ms: " << stats.latency_p95_ms << "\n";
        } else if (*corr_cmd) {
            auto net = load_checkpoint(checkpoint);
            ImageSample sample = read_image_sample(image_path);
            CorrelationMap cm = csti_correlation_map(*net, sample);
            const char* names[4] = {"det1", "det2", "det3", "seg"};
            std::cout << "     ";
            for (const char* n : names) std::cout << "\t" << n;
            std::cout << "\n";
            for (int i = 0; i < 4; ++i) {
                std::cout << names[i];
                for (int j = 0; j < 4; ++j) std::cout << "\t" << cm.values[i][j];
                std::cout << "\n";
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
