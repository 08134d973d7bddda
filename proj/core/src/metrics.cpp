#include "yolomed/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "yolomed/preprocess.hpp"

namespace yolomed {

using nlohmann::json;

std::string EvalReport::to_json() const {
    json j;
    j["ap50"] = ap50;
    j["ap95"] = ap95;                // AP at IoU 0.95 (literal reading)
    j["ap_coco_50_95"] = ap_coco;    // AP averaged over IoU 0.5:0.05:0.95
    j["pa"] = pa;
    j["mean_iou"] = mean_iou;
    j["fps"] = fps;
    j["per_class_ap50"] = per_class_ap50;
    return j.dump(2);
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

double average_precision(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<BoundingBox>>& gts, double iou_thresh,
                         int num_classes, std::vector<double>* per_class) {
    if (dets.size() != gts.size())
        throw std::invalid_argument("average_precision: per-image list size mismatch");
    if (per_class) per_class->assign(static_cast<size_t>(num_classes),
                                     std::numeric_limits<double>::quiet_NaN());

    double ap_sum = 0.0;
    int classes_with_gt = 0;
    for (int cls = 0; cls < num_classes; ++cls) {
        long total_gt = 0;
        for (const auto& g : gts)
            for (const auto& b : g)
                if (b.class_id == cls) ++total_gt;
        if (total_gt == 0) continue;
        ++classes_with_gt;

        struct Cand {
            double score;
            size_t image;
            const Detection* det;
        };
        std::vector<Cand> cands;
        for (size_t img = 0; img < dets.size(); ++img)
            for (const auto& d : dets[img])
                if (d.class_id == cls) cands.push_back({d.score, img, &d});
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Cand& a, const Cand& b) { return a.score > b.score; });

        std::vector<std::vector<bool>> used(gts.size());
        for (size_t img = 0; img < gts.size(); ++img)
            used[img].assign(gts[img].size(), false);

        std::vector<bool> is_tp(cands.size(), false);
        for (size_t i = 0; i < cands.size(); ++i) {
            const auto& c = cands[i];
            double best_iou = 0.0;
            long best_j = -1;
            for (size_t j = 0; j < gts[c.image].size(); ++j) {
                if (used[c.image][j] || gts[c.image][j].class_id != cls) continue;
                const double iou = box_iou(c.det->box, gts[c.image][j]);
                if (iou >= iou_thresh && iou > best_iou) {
                    best_iou = iou;
                    best_j = static_cast<long>(j);
                }
            }
            if (best_j >= 0) {
                is_tp[i] = true;
                used[c.image][static_cast<size_t>(best_j)] = true;
            }
        }

        std::vector<double> precision(cands.size()), recall(cands.size());
        long tp = 0;
        for (size_t i = 0; i < cands.size(); ++i) {
            if (is_tp[i]) ++tp;
            precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
            recall[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
        }

        // 101-point interpolation
        double ap = 0.0;
        for (int k = 0; k <= 100; ++k) {
            const double r = static_cast<double>(k) / 100.0;
            double p_max = 0.0;
            for (size_t i = 0; i < cands.size(); ++i)
                if (recall[i] >= r) p_max = std::max(p_max, precision[i]);
            ap += p_max;
        }
        ap /= 101.0;
        ap_sum += ap;
        if (per_class) (*per_class)[static_cast<size_t>(cls)] = ap;
    }
    if (classes_with_gt == 0) return std::numeric_limits<double>::quiet_NaN();
    return ap_sum / static_cast<double>(classes_with_gt);
}

double pixel_accuracy(const SegmentationMask& pred, const SegmentationMask& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw std::invalid_argument("pixel_accuracy: dim mismatch");
    long match = 0;
    for (size_t i = 0; i < pred.data.size(); ++i)
        if (pred.data[i] == gt.data[i]) ++match;
    return static_cast<double>(match) / static_cast<double>(pred.data.size());
}

double mean_iou(const SegmentationMask& pred, const SegmentationMask& gt, int num_classes) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw std::invalid_argument("mean_iou: dim mismatch");
    std::vector<long> tp(static_cast<size_t>(num_classes), 0);
    std::vector<long> fp(static_cast<size_t>(num_classes), 0);
    std::vector<long> fn(static_cast<size_t>(num_classes), 0);
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const uint8_t p = pred.data[i], g = gt.data[i];
        if (p == g) {
            ++tp[p];
        } else {
            ++fp[p];
            ++fn[g];
        }
    }
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        const long denom = tp[c] + fp[c] + fn[c];
        if (denom == 0) continue;  // class absent from both
        sum += static_cast<double>(tp[c]) / static_cast<double>(denom);
        ++present;
    }
    if (present == 0) throw std::runtime_error("mean_iou: no classes present");
    return sum / static_cast<double>(present);
}

LatencyStats benchmark_latency(const std::function<void()>& forward_once, int warmup_iters,
                               int timed_iters) {
    if (timed_iters < 10) throw std::invalid_argument("benchmark_latency: need >= 10 iterations");
    for (int i = 0; i < warmup_iters; ++i) forward_once();
    std::vector<double> latency_ms;
    latency_ms.reserve(static_cast<size_t>(timed_iters));
    for (int i = 0; i < timed_iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        forward_once();
        const auto t1 = std::chrono::steady_clock::now();
        latency_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::vector<double> sorted = latency_ms;
    std::sort(sorted.begin(), sorted.end());
    double mean = 0.0;
    for (double v : latency_ms) mean += v;
    mean /= static_cast<double>(latency_ms.size());

    LatencyStats stats;
    stats.fps_mean = 1000.0 / mean;
    stats.latency_p50_ms = sorted[sorted.size() / 2];
    stats.latency_p95_ms = sorted[static_cast<size_t>(0.95 * (sorted.size() - 1))];
    std::ifstream cpuinfo("/proc/cpuinfo");
    std::string line;
    stats.hardware = "unknown";
    while (std::getline(cpuinfo, line)) {
        if (line.rfind("model name", 0) == 0) {
            const auto pos = line.find(':');
            if (pos != std::string::npos) stats.hardware = line.substr(pos + 2);
            break;
        }
    }
    return stats;
}

namespace {

// channel-average and nearest-resize a [C,h,w] slice onto a common grid
std::vector<double> pooled_map(const ag::Tensor& t, long n, long target_h, long target_w) {
    const long C = t.dim(1), h = t.dim(2), w = t.dim(3);
    std::vector<double> out(static_cast<size_t>(target_h * target_w), 0.0);
    for (long y = 0; y < target_h; ++y) {
        const long sy = y * h / target_h;
        for (long x = 0; x < target_w; ++x) {
            const long sx = x * w / target_w;
            double acc = 0.0;
            for (long c = 0; c < C; ++c) acc += t[((n * C + c) * h + sy) * w + sx];
            out[static_cast<size_t>(y * target_w + x)] = acc / static_cast<double>(C);
        }
    }
    return out;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va <= 0.0 || vb <= 0.0) return std::numeric_limits<double>::quiet_NaN();
    return cov / std::sqrt(va * vb);
}

}  // namespace

CorrelationMap csti_correlation_from_outputs(const ModelOutputs& out) {
    if (!out.x_seg_hat) throw std::runtime_error("csti_correlation: CSTI outputs missing");
    const long target_h = out.x_det_hat[0]->value.dim(2);
    const long target_w = out.x_det_hat[0]->value.dim(3);
    std::array<std::vector<double>, 4> maps;
    for (int i = 0; i < 3; ++i)
        maps[static_cast<size_t>(i)] =
            pooled_map(out.x_det_hat[static_cast<size_t>(i)]->value, 0, target_h, target_w);
    maps[3] = pooled_map(out.x_seg_hat->value, 0, target_h, target_w);

    CorrelationMap cm;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            cm.values[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                pearson(maps[static_cast<size_t>(i)], maps[static_cast<size_t>(j)]);
    return cm;
}

CorrelationMap csti_correlation_map(YoloMedNet& net, const ImageSample& sample) {
    if (!net.csti) throw std::runtime_error("csti_correlation_map: model built without CSTI");
    ag::NoGradGuard ng;
    ag::Tensor img = letterbox_image(sample, net.config().input_size);
    const long S = net.config().input_size;
    ag::Var input = ag::constant(img.reshaped({1, 3, S, S}));
    ModelOutputs out = net.forward(input, /*training=*/false);
    return csti_correlation_from_outputs(out);
}

}  // namespace yolomed
