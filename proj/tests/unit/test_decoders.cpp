#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "yolomed/decoders.hpp"
#include "yolomed/metrics.hpp"

using namespace yolomed;

namespace {

RawScale empty_scale(int num_classes, long h, long w, int stride) {
    RawScale raw;
    raw.cls = ag::Tensor::full({num_classes, h, w}, -1e9);
    raw.obj = ag::Tensor::full({1, h, w}, -1e9);
    raw.box = ag::Tensor({4, h, w});
    raw.stride = stride;
    return raw;
}

}  // namespace

TEST_CASE("decode yields an empty list when no cell is confident") {
    std::vector<RawScale> raw{empty_scale(1, 8, 8, 8)};
    CHECK(decode_detections(raw, 0.001, 0.65, 64, 64).empty());
}

TEST_CASE("decode one confident cell to the closed-form box") {
    // cell (4,4) at stride 8, zero offsets: center = (4.5*8, 4.5*8) = (36, 36)
    std::vector<RawScale> raw{empty_scale(1, 8, 8, 8)};
    raw[0].obj[(0 * 8 + 4) * 8 + 4] = 1e9;
    raw[0].cls[(0 * 8 + 4) * 8 + 4] = 1e9;
    auto dets = decode_detections(raw, 0.001, 0.65, 64, 64);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].score == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(dets[0].box.cx() == doctest::Approx(36.0).epsilon(1e-9));
    CHECK(dets[0].box.cy() == doctest::Approx(36.0).epsilon(1e-9));
    CHECK(dets[0].box.width() == doctest::Approx(8.0).epsilon(1e-9));
    CHECK(dets[0].box.height() == doctest::Approx(8.0).epsilon(1e-9));
    CHECK(dets[0].class_id == 0);
}

TEST_CASE("nms keeps the higher-scoring of two identical boxes") {
    Detection a, b;
    a.box = {10, 10, 20, 20, 0};
    a.score = 0.9;
    b.box = {10, 10, 20, 20, 0};
    b.score = 0.8;
    auto kept = nms_classwise({b, a}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);
}

TEST_CASE("nms output is score-sorted with pairwise overlap below threshold") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> coord(0, 50), len(5, 30), score(0, 1);
    std::vector<Detection> dets;
    for (int i = 0; i < 60; ++i) {
        Detection d;
        d.box.x_min = coord(rng);
        d.box.y_min = coord(rng);
        d.box.x_max = d.box.x_min + len(rng);
        d.box.y_max = d.box.y_min + len(rng);
        d.class_id = i % 2;
        d.box.class_id = d.class_id;
        d.score = score(rng);
        dets.push_back(d);
    }
    auto kept = nms_classwise(dets, 0.5);
    for (size_t i = 1; i < kept.size(); ++i) CHECK(kept[i - 1].score >= kept[i].score);
    for (size_t i = 0; i < kept.size(); ++i)
        for (size_t j = i + 1; j < kept.size(); ++j)
            if (kept[i].class_id == kept[j].class_id)
                CHECK(box_iou(kept[i].box, kept[j].box) < 0.5);
}

TEST_CASE("decode inverts encode within 1e-4 px") {
    std::mt19937_64 rng(12);
    // centers far enough from the image edge that no box is clipped
    std::uniform_real_distribution<double> center(60, 200), size(6, 80);
    for (int trial = 0; trial < 50; ++trial) {
        const int stride = (trial % 3 == 0) ? 8 : (trial % 3 == 1) ? 16 : 32;
        BoundingBox box;
        const double cx = center(rng), cy = center(rng), w = size(rng), h = size(rng);
        box.x_min = cx - w / 2;
        box.x_max = cx + w / 2;
        box.y_min = cy - h / 2;
        box.y_max = cy + h / 2;
        const long cell_x = static_cast<long>(cx / stride);
        const long cell_y = static_cast<long>(cy / stride);
        auto t = encode_box(box, cell_x, cell_y, stride);

        const long grid = 256 / stride;
        RawScale raw = empty_scale(1, grid, grid, stride);
        raw.obj[(0 * grid + cell_y) * grid + cell_x] = 1e9;
        raw.cls[(0 * grid + cell_y) * grid + cell_x] = 1e9;
        for (int k = 0; k < 4; ++k) raw.box[(k * grid + cell_y) * grid + cell_x] = t[k];
        auto dets = decode_detections({raw}, 0.5, 0.65, 1000, 1000);
        REQUIRE(dets.size() == 1);
        CHECK(std::fabs(dets[0].box.x_min - box.x_min) < 1e-4);
        CHECK(std::fabs(dets[0].box.y_min - box.y_min) < 1e-4);
        CHECK(std::fabs(dets[0].box.x_max - box.x_max) < 1e-4);
        CHECK(std::fabs(dets[0].box.y_max - box.y_max) < 1e-4);
    }
}

TEST_CASE("feature fusion is additive with a bitwise passthrough when absent") {
    std::mt19937_64 rng(13);
    ag::Var x = ag::make_var(testutil::random_tensor({1, 4, 3, 3}, rng));
    ag::Var zero = ag::make_var(ag::Tensor({1, 4, 3, 3}));

    ag::Tensor with_zero = fuse_features(x, zero)->value;
    for (long i = 0; i < with_zero.numel(); ++i) CHECK(with_zero[i] == x->value[i]);

    ag::Tensor doubled = fuse_features(x, x)->value;
    for (long i = 0; i < doubled.numel(); ++i)
        CHECK(doubled[i] == doctest::Approx(2.0 * x->value[i]).epsilon(1e-12));

    ag::Var passthrough = fuse_features(x, nullptr);
    CHECK(passthrough.get() == x.get());  // same node, bitwise identical

    ag::Var mismatched = ag::make_var(ag::Tensor({1, 4, 2, 2}));
    CHECK_THROWS(fuse_features(x, mismatched));
}

TEST_CASE("detection head shape contract, both variants") {
    std::mt19937_64 data_rng(14);
    ag::Var x = ag::make_var(testutil::random_tensor({1, 16, 8, 8}, data_rng));
    for (bool decoupled : {true, false}) {
        nn::Rng rng(15);
        DetectionHead head(16, 16, 1, decoupled, rng);
        ScalePrediction pred = head.forward(x, false);
        CHECK(pred.cls->value.shape() == std::vector<long>({1, 1, 8, 8}));
        CHECK(pred.obj->value.shape() == std::vector<long>({1, 1, 8, 8}));
        CHECK(pred.box->value.shape() == std::vector<long>({1, 4, 8, 8}));

        // determinism across calls
        ScalePrediction again = head.forward(x, false);
        for (long i = 0; i < pred.cls->value.numel(); ++i)
            CHECK(pred.cls->value[i] == again.cls->value[i]);
    }
}

TEST_CASE("coupled head has fewer parameters than the decoupled head") {
    nn::Rng rng_a(16), rng_b(16);
    DetectionHead decoupled(16, 16, 1, true, rng_a);
    DetectionHead coupled(16, 16, 1, false, rng_b);
    CHECK(coupled.parameter_count() < decoupled.parameter_count());
    CHECK(coupled.parameter_count() == 16 * (1 + 5) + 6);  // 1x1 conv, C+5 outputs
}

TEST_CASE("segmentation head: two rounds to half resolution, final round to full") {
    ModelConfig cfg;
    cfg.input_size = 64;
    cfg.width_mult = 0.125;
    cfg.finalize();
    nn::Rng rng(17);
    SegHead head(cfg.neck_channels[0], cfg.num_seg_classes, rng);
    std::mt19937_64 data_rng(18);
    ag::Var p2 = ag::make_var(testutil::random_tensor({1, cfg.neck_channels[0], 8, 8}, data_rng));

    ag::Var pre = head.forward_pre(p2, false);
    CHECK(pre->value.shape() == std::vector<long>({1, 32, 32, 32}));  // H/2 x W/2 x 32

    ag::Var logits = head.forward_post(pre, false);
    CHECK(logits->value.shape() == std::vector<long>({1, 2, 64, 64}));

    // fusing a zero map is numerically identical to no fusion
    ag::Var zero = ag::make_var(ag::Tensor({1, 32, 32, 32}));
    ag::Tensor fused = head.forward(p2, zero, false)->value;
    ag::Tensor plain = head.forward(p2, nullptr, false)->value;
    for (long i = 0; i < fused.numel(); ++i) CHECK(fused[i] == plain[i]);

    ag::Var bad = ag::make_var(ag::Tensor({1, 32, 16, 16}));
    CHECK_THROWS(head.forward(p2, bad, false));
}

TEST_CASE("pyramid aggregation keeps the neck shape contract") {
    ModelConfig cfg;
    cfg.input_size = 64;
    cfg.width_mult = 0.125;
    cfg.finalize();
    nn::Rng rng(19);
    Pan pan(cfg, rng);
    std::mt19937_64 data_rng(20);
    NeckOutput neck;
    neck.p3 = ag::make_var(testutil::random_tensor({1, cfg.neck_channels[0], 8, 8}, data_rng));
    neck.p4 = ag::make_var(testutil::random_tensor({1, cfg.neck_channels[1], 4, 4}, data_rng));
    neck.p5 = ag::make_var(testutil::random_tensor({1, cfg.neck_channels[2], 2, 2}, data_rng));
    neck.p2_path = neck.p3;
    auto outs = pan.forward(neck, false);
    CHECK(outs[0]->value.shape() == std::vector<long>({1, cfg.neck_channels[0], 8, 8}));
    CHECK(outs[1]->value.shape() == std::vector<long>({1, cfg.neck_channels[1], 4, 4}));
    CHECK(outs[2]->value.shape() == std::vector<long>({1, cfg.neck_channels[2], 2, 2}));
}
