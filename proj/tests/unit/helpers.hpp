#pragma once

#include <random>
#include <vector>

#include "yolomed/datamodel.hpp"
#include "yolomed/tensor.hpp"

namespace testutil {

inline yolomed::ag::Tensor random_tensor(std::vector<long> shape, std::mt19937_64& rng,
                                         double lo = -1.0, double hi = 1.0) {
    yolomed::ag::Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (long i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

// One sample: gray background, a single bright rectangle that is both the
// box annotation and the foreground mask.
inline yolomed::ImageSample rect_sample(const std::string& id, int size, int x0, int y0, int x1,
                                        int y1) {
    yolomed::ImageSample s;
    s.id = id;
    s.width = size;
    s.height = size;
    s.image.assign(static_cast<size_t>(size) * size * 3, 40);
    s.mask.width = size;
    s.mask.height = size;
    s.mask.data.assign(static_cast<size_t>(size) * size, 0);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            const size_t base = (static_cast<size_t>(y) * size + x) * 3;
            s.image[base + 0] = 230;
            s.image[base + 1] = 60;
            s.image[base + 2] = 60;
            s.mask.at(y, x) = 1;
        }
    yolomed::BoundingBox box;
    box.x_min = x0;
    box.y_min = y0;
    box.x_max = x1;
    box.y_max = y1;
    box.class_id = 0;
    s.boxes.push_back(box);
    return s;
}

// Deterministic n-sample rectangle dataset at the given square size.
inline yolomed::Dataset rect_dataset(int n, int size, unsigned long long seed) {
    std::mt19937_64 rng(seed);
    yolomed::Dataset ds;
    ds.num_det_classes = 1;
    ds.num_seg_classes = 2;
    std::uniform_int_distribution<int> pos(size / 8, size / 2);
    std::uniform_int_distribution<int> extent(size / 4, size / 2);
    for (int i = 0; i < n; ++i) {
        const int x0 = pos(rng), y0 = pos(rng);
        const int x1 = std::min(size - 2, x0 + extent(rng));
        const int y1 = std::min(size - 2, y0 + extent(rng));
        ds.samples.push_back(rect_sample("sample_" + std::to_string(i), size, x0, y0, x1, y1));
    }
    return ds;
}

}  // namespace testutil
