#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "yolomed/config.hpp"

namespace yolomed {

struct BoundingBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    int class_id = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x_min + x_max); }
    double cy() const { return 0.5 * (y_min + y_max); }
    bool valid() const { return x_min < x_max && y_min < y_max && class_id >= 0; }
};

struct SegmentationMask {
    int height = 0, width = 0;
    std::vector<uint8_t> data;  // H*W class ids, 0 = background

    uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
    uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
};

struct ImageSample {
    std::string id;
    int height = 0, width = 0;
    std::vector<uint8_t> image;  // H*W*3 RGB, row-major
    std::vector<BoundingBox> boxes;
    SegmentationMask mask;
};

struct Dataset {
    std::vector<ImageSample> samples;
    int num_det_classes = 1;
    int num_seg_classes = 2;

    bool empty() const { return samples.empty(); }
    size_t size() const { return samples.size(); }
};

// Expects root/images/*.jpg|png, root/masks/*.png (matching stems) and a JSON
// annotation file mapping image id -> list of [x_min, y_min, x_max, y_max, class_id].
Dataset load_dataset(const std::string& root_path, const std::string& annotation_file,
                     int num_seg_classes = 2);

// Seeded shuffle then contiguous cut. Train and val sizes are round(N*r);
// test takes the remainder so the three parts always partition the input.
std::tuple<Dataset, Dataset, Dataset> split_dataset(const Dataset& ds,
                                                    std::array<double, 3> ratios,
                                                    unsigned long long seed);

}  // namespace yolomed
