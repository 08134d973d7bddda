#include "yolomed/datamodel.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <stdexcept>

namespace yolomed {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string stem_of(const fs::path& p) { return p.stem().string(); }

}  // namespace

Dataset load_dataset(const std::string& root_path, const std::string& annotation_file,
                     int num_seg_classes) {
    const fs::path root(root_path);
    const fs::path images_dir = root / "images";
    const fs::path masks_dir = root / "masks";
    if (!fs::is_directory(images_dir) || !fs::is_directory(masks_dir))
        throw std::runtime_error("load_dataset: expected " + images_dir.string() + " and " +
                                 masks_dir.string());

    json ann;
    {
        std::ifstream in(annotation_file);
        if (!in) throw std::runtime_error("load_dataset: cannot open " + annotation_file);
        in >> ann;
    }

    std::vector<fs::path> image_files;
    for (const auto& e : fs::directory_iterator(images_dir)) {
        const auto ext = e.path().extension().string();
        if (ext == ".jpg" || ext == ".jpeg" || ext == ".png") image_files.push_back(e.path());
    }
    std::sort(image_files.begin(), image_files.end());
    if (image_files.empty()) throw std::runtime_error("load_dataset: no images under " + images_dir.string());

    Dataset ds;
    ds.num_seg_classes = num_seg_classes;
    int max_class = 0;

    for (const auto& img_path : image_files) {
        const std::string id = stem_of(img_path);
        cv::Mat bgr = cv::imread(img_path.string(), cv::IMREAD_COLOR);
        if (bgr.empty()) throw std::runtime_error("load_dataset: unreadable image " + img_path.string());

        const fs::path mask_path = masks_dir / (id + ".png");
        if (!fs::exists(mask_path))
            throw std::runtime_error("load_dataset: missing mask for image id '" + id + "'");
        cv::Mat mask = cv::imread(mask_path.string(), cv::IMREAD_GRAYSCALE);
        if (mask.empty()) throw std::runtime_error("load_dataset: unreadable mask " + mask_path.string());
        if (mask.rows != bgr.rows || mask.cols != bgr.cols)
            throw std::runtime_error("load_dataset: mask dims differ from image for id '" + id + "'");

        ImageSample s;
        s.id = id;
        s.height = bgr.rows;
        s.width = bgr.cols;
        s.image.resize(static_cast<size_t>(s.height) * s.width * 3);
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                const cv::Vec3b px = bgr.at<cv::Vec3b>(y, x);
                const size_t base = (static_cast<size_t>(y) * s.width + x) * 3;
                s.image[base + 0] = px[2];  // to RGB
                s.image[base + 1] = px[1];
                s.image[base + 2] = px[0];
            }

        s.mask.height = s.height;
        s.mask.width = s.width;
        s.mask.data.resize(static_cast<size_t>(s.height) * s.width);
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                uint8_t v = mask.at<uint8_t>(y, x);
                if (num_seg_classes == 2) v = v ? 1 : 0;
                if (v >= num_seg_classes)
                    throw std::runtime_error("load_dataset: mask value out of range for id '" + id + "'");
                s.mask.at(y, x) = v;
            }

        if (ann.contains(id)) {
            for (const auto& b : ann.at(id)) {
                if (!b.is_array() || b.size() != 5)
                    throw std::runtime_error("load_dataset: malformed annotation entry for id '" + id + "'");
                BoundingBox box;
                box.x_min = std::clamp(b[0].get<double>(), 0.0, static_cast<double>(s.width));
                box.y_min = std::clamp(b[1].get<double>(), 0.0, static_cast<double>(s.height));
                box.x_max = std::clamp(b[2].get<double>(), 0.0, static_cast<double>(s.width));
                box.y_max = std::clamp(b[3].get<double>(), 0.0, static_cast<double>(s.height));
                box.class_id = b[4].get<int>();
                if (!box.valid()) {
                    std::cerr << "warning: skipping degenerate box on image '" << id << "'\n";
                    continue;
                }
                max_class = std::max(max_class, box.class_id);
                s.boxes.push_back(box);
            }
        }
        ds.samples.push_back(std::move(s));
    }

    ds.num_det_classes = max_class + 1;
    return ds;
}

std::tuple<Dataset, Dataset, Dataset> split_dataset(const Dataset& ds,
                                                    std::array<double, 3> ratios,
                                                    unsigned long long seed) {
    if (std::fabs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
        throw std::invalid_argument("split_dataset: ratios must sum to 1");
    const long n = static_cast<long>(ds.size());
    const long n_train = std::lround(static_cast<double>(n) * ratios[0]);
    const long n_val = std::lround(static_cast<double>(n) * ratios[1]);
    const long n_test = n - n_train - n_val;
    if (n_train <= 0 || n_val <= 0 || n_test <= 0)
        throw std::runtime_error("split_dataset: a split would be empty (N=" + std::to_string(n) + ")");

    std::vector<size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    auto take = [&](long begin, long count) {
        Dataset part;
        part.num_det_classes = ds.num_det_classes;
        part.num_seg_classes = ds.num_seg_classes;
        for (long i = begin; i < begin + count; ++i)
            part.samples.push_back(ds.samples[order[static_cast<size_t>(i)]]);
        return part;
    };
    return {take(0, n_train), take(n_train, n_val), take(n_train + n_val, n_test)};
}

}  // namespace yolomed
