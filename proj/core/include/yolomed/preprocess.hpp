#pragma once

#include "yolomed/datamodel.hpp"
#include "yolomed/tensor.hpp"

namespace yolomed {

// Aspect-preserving resize with gray padding to a square network input.
struct LetterboxInfo {
    double scale = 1.0;
    int pad_x = 0, pad_y = 0;
    int out_size = 0;
};

LetterboxInfo letterbox_params(int width, int height, int out_size);

// [3, S, S] tensor normalized to [0,1] (divide by 255, no mean/std shift).
ag::Tensor letterbox_image(const ImageSample& sample, int input_size,
                           LetterboxInfo* info = nullptr);

// Nearest-neighbor mask warp into letterbox space (padding = background).
SegmentationMask letterbox_mask(const SegmentationMask& mask, int input_size);

BoundingBox letterbox_box(const BoundingBox& box, const LetterboxInfo& info);
BoundingBox unletterbox_box(const BoundingBox& box, const LetterboxInfo& info, int orig_w,
                            int orig_h);

// Horizontal flip of an already-letterboxed training sample.
void hflip_inplace(ag::Tensor& chw_image, SegmentationMask& mask,
                   std::vector<BoundingBox>& boxes);

}  // namespace yolomed
