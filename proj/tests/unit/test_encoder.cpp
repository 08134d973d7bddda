#include <doctest.h>

#include <limits>

#include "helpers.hpp"
#include "yolomed/encoder.hpp"

using namespace yolomed;

namespace {

ModelConfig small_cfg(int input_size, double width = 0.125) {
    ModelConfig cfg;
    cfg.input_size = input_size;
    cfg.width_mult = width;
    cfg.finalize();
    return cfg;
}

void zero_all_parameters(nn::Module& m) {
    for (auto& p : m.parameters()) p.var->value.fill(0.0);
}

}  // namespace

TEST_CASE("backbone stage strides divide the input size") {
    ModelConfig cfg = small_cfg(64);
    nn::Rng rng(0);
    Backbone backbone(cfg, rng);
    std::mt19937_64 data_rng(1);
    ag::Var img = ag::make_var(testutil::random_tensor({1, 3, 64, 64}, data_rng, 0.0, 1.0));
    auto [c3, c4, c5] = backbone.forward(img, false);
    CHECK(c3->value.dim(2) == 8);   // 64 / 8
    CHECK(c4->value.dim(2) == 4);   // 64 / 16
    CHECK(c5->value.dim(2) == 2);   // 64 / 32
    CHECK(c3->value.dim(3) == 8);
    CHECK(c3->value.all_finite());
}

TEST_CASE("backbone input contract errors") {
    ModelConfig cfg = small_cfg(64);
    nn::Rng rng(0);
    Backbone backbone(cfg, rng);
    CHECK_THROWS(backbone.forward(ag::make_var(ag::Tensor({1, 1, 64, 64})), false));
    CHECK_THROWS(backbone.forward(ag::make_var(ag::Tensor({1, 3, 48, 48})), false));
    ag::Tensor bad({1, 3, 64, 64});
    bad[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS(backbone.forward(ag::make_var(bad), false));
}

TEST_CASE("spatial pyramid pooling preserves shape, handles 1x1, keeps constants") {
    nn::Rng rng(0);
    Spp spp(16, rng);
    std::mt19937_64 data_rng(2);
    ag::Var c5 = ag::make_var(testutil::random_tensor({1, 16, 4, 4}, data_rng));
    CHECK(spp.forward(c5, false)->value.shape() == std::vector<long>({1, 16, 4, 4}));

    ag::Var single = ag::make_var(testutil::random_tensor({1, 16, 1, 1}, data_rng));
    CHECK(spp.forward(single, false)->value.shape() == std::vector<long>({1, 16, 1, 1}));

    // the pooling stage itself maps a constant to the same constant
    ag::Var constant = ag::make_var(ag::Tensor::full({1, 16, 6, 6}, 0.75));
    for (int k : {5, 9, 13}) {
        ag::Tensor pooled = ag::maxpool2d_same(constant, k)->value;
        for (long i = 0; i < pooled.numel(); ++i) CHECK(pooled[i] == 0.75);
    }
}

TEST_CASE("neck outputs the configured channel triple at strides 8/16/32") {
    for (int size : {64, 128}) {
        ModelConfig cfg = small_cfg(size, 0.25);
        nn::Rng rng(3);
        Encoder encoder(cfg, rng);
        std::mt19937_64 data_rng(4);
        ag::Var img = ag::make_var(
            testutil::random_tensor({1, 3, size, size}, data_rng, 0.0, 1.0));
        NeckOutput neck = encoder.forward(img, false);
        CHECK(neck.p3->value.shape() ==
              std::vector<long>({1, cfg.neck_channels[0], size / 8, size / 8}));
        CHECK(neck.p4->value.shape() ==
              std::vector<long>({1, cfg.neck_channels[1], size / 16, size / 16}));
        CHECK(neck.p5->value.shape() ==
              std::vector<long>({1, cfg.neck_channels[2], size / 32, size / 32}));
        CHECK(neck.p2_path->value.shape() == neck.p3->value.shape());
    }
}

TEST_CASE("zero weights and zero input produce zero neck outputs") {
    ModelConfig cfg = small_cfg(64);
    nn::Rng rng(5);
    Encoder encoder(cfg, rng);
    zero_all_parameters(encoder);
    ag::Var img = ag::make_var(ag::Tensor({1, 3, 64, 64}));
    NeckOutput neck = encoder.forward(img, false);
    for (const auto& v : {neck.p3, neck.p4, neck.p5})
        CHECK(v->value.max_abs() == 0.0);
}

TEST_CASE("eval forward is deterministic") {
    ModelConfig cfg = small_cfg(64);
    nn::Rng rng(6);
    Encoder encoder(cfg, rng);
    std::mt19937_64 data_rng(7);
    ag::Var img = ag::make_var(testutil::random_tensor({1, 3, 64, 64}, data_rng, 0.0, 1.0));
    ag::Tensor a = encoder.forward(img, false).p3->value;
    ag::Tensor b = encoder.forward(img, false).p3->value;
    for (long i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}
