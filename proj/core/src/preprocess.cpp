#include "yolomed/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace yolomed {

using ag::Tensor;

LetterboxInfo letterbox_params(int width, int height, int out_size) {
    LetterboxInfo info;
    info.out_size = out_size;
    info.scale = static_cast<double>(out_size) / std::max(width, height);
    const int new_w = static_cast<int>(std::round(width * info.scale));
    const int new_h = static_cast<int>(std::round(height * info.scale));
    info.pad_x = (out_size - new_w) / 2;
    info.pad_y = (out_size - new_h) / 2;
    return info;
}

Tensor letterbox_image(const ImageSample& sample, int input_size, LetterboxInfo* info_out) {
    const LetterboxInfo info = letterbox_params(sample.width, sample.height, input_size);
    if (info_out) *info_out = info;
    const int new_w = static_cast<int>(std::round(sample.width * info.scale));
    const int new_h = static_cast<int>(std::round(sample.height * info.scale));
    Tensor out = Tensor::full({3, input_size, input_size}, 114.0 / 255.0);
    for (int y = 0; y < new_h; ++y) {
        const int sy = std::min(sample.height - 1,
                                static_cast<int>(static_cast<double>(y) / info.scale));
        for (int x = 0; x < new_w; ++x) {
            const int sx = std::min(sample.width - 1,
                                    static_cast<int>(static_cast<double>(x) / info.scale));
            const size_t src = (static_cast<size_t>(sy) * sample.width + sx) * 3;
            for (int c = 0; c < 3; ++c)
                out[(static_cast<long>(c) * input_size + y + info.pad_y) * input_size + x +
                    info.pad_x] = sample.image[src + static_cast<size_t>(c)] / 255.0;
        }
    }
    return out;
}

SegmentationMask letterbox_mask(const SegmentationMask& mask, int input_size) {
    const LetterboxInfo info = letterbox_params(mask.width, mask.height, input_size);
    const int new_w = static_cast<int>(std::round(mask.width * info.scale));
    const int new_h = static_cast<int>(std::round(mask.height * info.scale));
    SegmentationMask out;
    out.height = input_size;
    out.width = input_size;
    out.data.assign(static_cast<size_t>(input_size) * input_size, 0);
    for (int y = 0; y < new_h; ++y) {
        const int sy = std::min(mask.height - 1,
                                static_cast<int>(static_cast<double>(y) / info.scale));
        for (int x = 0; x < new_w; ++x) {
            const int sx = std::min(mask.width - 1,
                                    static_cast<int>(static_cast<double>(x) / info.scale));
            out.at(y + info.pad_y, x + info.pad_x) = mask.at(sy, sx);
        }
    }
    return out;
}

BoundingBox letterbox_box(const BoundingBox& box, const LetterboxInfo& info) {
    BoundingBox out = box;
    out.x_min = box.x_min * info.scale + info.pad_x;
    out.y_min = box.y_min * info.scale + info.pad_y;
    out.x_max = box.x_max * info.scale + info.pad_x;
    out.y_max = box.y_max * info.scale + info.pad_y;
    return out;
}

BoundingBox unletterbox_box(const BoundingBox& box, const LetterboxInfo& info, int orig_w,
                            int orig_h) {
    BoundingBox out = box;
    out.x_min = std::clamp((box.x_min - info.pad_x) / info.scale, 0.0, static_cast<double>(orig_w));
    out.y_min = std::clamp((box.y_min - info.pad_y) / info.scale, 0.0, static_cast<double>(orig_h));
    out.x_max = std::clamp((box.x_max - info.pad_x) / info.scale, 0.0, static_cast<double>(orig_w));
    out.y_max = std::clamp((box.y_max - info.pad_y) / info.scale, 0.0, static_cast<double>(orig_h));
    return out;
}

void hflip_inplace(Tensor& chw_image, SegmentationMask& mask, std::vector<BoundingBox>& boxes) {
    const long S = chw_image.dim(1);
    for (long c = 0; c < 3; ++c)
        for (long y = 0; y < S; ++y)
            for (long x = 0; x < S / 2; ++x)
                std::swap(chw_image[(c * S + y) * S + x], chw_image[(c * S + y) * S + (S - 1 - x)]);
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width / 2; ++x)
            std::swap(mask.at(y, x), mask.at(y, mask.width - 1 - x));
    for (auto& b : boxes) {
        const double x_min = static_cast<double>(S) - b.x_max;
        const double x_max = static_cast<double>(S) - b.x_min;
        b.x_min = x_min;
        b.x_max = x_max;
    }
}

}  // namespace yolomed
