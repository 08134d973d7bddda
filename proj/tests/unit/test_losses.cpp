#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "yolomed/engine.hpp"
#include "yolomed/losses.hpp"

using namespace yolomed;

namespace {

std::array<GridSpec, 3> grids_256() {
    return {GridSpec{8, 32, 32}, GridSpec{16, 16, 16}, GridSpec{32, 8, 8}};
}

ModelConfig mini_cfg() {
    ModelConfig cfg;
    cfg.input_size = 64;
    cfg.width_mult = 0.125;
    cfg.seed = 3;
    cfg.finalize();
    return cfg;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("target assignment selects scale by box size and marks the center cell") {
    // 32x32 box centered at (100,100): sqrt(area)=32 < 64 -> stride-8 grid
    BoundingBox box{84, 84, 116, 116, 0};
    Assignment a = assign_targets({box}, grids_256());
    bool found_center = false;
    for (const auto& p : a.positives) {
        CHECK(p.scale == 0);
        if (p.cell == 12 * 32 + 12) found_center = true;
    }
    CHECK(found_center);
    CHECK(a.obj_targets[0][12 * 32 + 12] == 1.0);
    CHECK(a.obj_targets[1] == std::vector<double>(16 * 16, 0.0));
    CHECK(a.obj_targets[2] == std::vector<double>(8 * 8, 0.0));
}

TEST_CASE("target assignment medium and large scale ranges") {
    // sqrt(area) = 80 -> stride 16
    BoundingBox medium{60, 60, 140, 140, 0};
    Assignment am = assign_targets({medium}, grids_256());
    for (const auto& p : am.positives) CHECK(p.scale == 1);
    CHECK_FALSE(am.positives.empty());

    // image-spanning box at 640 -> stride 32
    std::array<GridSpec, 3> grids640{GridSpec{8, 80, 80}, GridSpec{16, 40, 40},
                                     GridSpec{32, 20, 20}};
    BoundingBox huge{0, 0, 640, 640, 0};
    Assignment al = assign_targets({huge}, grids640);
    for (const auto& p : al.positives) CHECK(p.scale == 2);
    CHECK_FALSE(al.positives.empty());
}

TEST_CASE("no ground truth means no positives and zero objectness targets") {
    Assignment a = assign_targets({}, grids_256());
    CHECK(a.positives.empty());
    for (const auto& t : a.obj_targets)
        for (double v : t) CHECK(v == 0.0);
}

TEST_CASE("zero-area boxes are skipped") {
    BoundingBox degenerate{50, 50, 50, 80, 0};
    Assignment a = assign_targets({degenerate}, grids_256());
    CHECK(a.positives.empty());
}

TEST_CASE("each box claims exactly its center-containing cell") {
    BoundingBox box{64, 64, 128, 128, 0};  // sqrt(area)=64 -> stride 16, center (96,96)
    Assignment a = assign_targets({box}, grids_256());
    REQUIRE(a.positives.size() == 1);
    CHECK(a.positives[0].scale == 1);
    CHECK(a.positives[0].cell == 6 * 16 + 6);

    // objectness target is set only for that cell
    long set = 0;
    for (const auto& t : a.obj_targets)
        for (double v : t)
            if (v == 1.0) ++set;
    CHECK(set == 1);

    // two boxes claiming the same cell: the one whose center is closer to the
    // cell center (104,104) wins
    BoundingBox other{70, 70, 134, 134, 0};  // sqrt(area)=64 -> scale 1, center (102,102)
    Assignment b = assign_targets({box, other}, grids_256());
    REQUIRE(b.positives.size() == 1);
    CHECK(b.positives[0].cell == 6 * 16 + 6);
    CHECK(b.positives[0].gt.x_min == other.x_min);
}

TEST_CASE("focal loss with gamma 0 and alpha 0.5 is half of binary cross-entropy") {
    std::mt19937_64 rng(1);
    ag::Tensor logits_t = testutil::random_tensor({20}, rng, -4, 4);
    ag::Tensor targets({20});
    std::uniform_int_distribution<int> bit(0, 1);
    for (long i = 0; i < 20; ++i) targets[i] = bit(rng);

    double bce = 0.0;
    for (long i = 0; i < 20; ++i) {
        const double p = sigmoid(logits_t[i]);
        bce += targets[i] > 0.5 ? -std::log(p) : -std::log(1.0 - p);
    }
    bce /= 20.0;
    double focal = focal_loss(ag::make_var(logits_t), targets, 0.5, 0.0)->value[0];
    CHECK(std::fabs(focal - 0.5 * bce) < 1e-7);
}

TEST_CASE("focal loss closed-form spot values") {
    // confident correct prediction is nearly free
    ag::Tensor one({1});
    one[0] = 1.0;
    ag::Tensor strong({1});
    strong[0] = 20.0;
    CHECK(focal_loss(ag::make_var(strong), one, 0.25, 2.0)->value[0] < 1e-6);

    // zero logit, positive target: 0.25 * 0.5^2 * ln 2
    ag::Tensor zero({1});
    CHECK(focal_loss(ag::make_var(zero), one, 0.25, 2.0)->value[0] ==
          doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("focal loss never decreases when the true-class logit drops") {
    ag::Tensor target({1});
    target[0] = 1.0;
    double prev = -1.0;
    for (double logit = 6.0; logit >= -6.0; logit -= 0.25) {
        ag::Tensor l({1});
        l[0] = logit;
        const double loss = focal_loss(ag::make_var(l), target, 0.25, 2.0)->value[0];
        CHECK(loss >= prev);
        prev = loss;
    }
}

TEST_CASE("focal loss rejects non-binary targets") {
    ag::Tensor logits({2}), targets({2});
    targets[0] = 0.5;
    CHECK_THROWS(focal_loss(ag::make_var(logits), targets, 0.25, 2.0));
}

TEST_CASE("overlap-aware box loss closed forms") {
    ag::Tensor box({1, 4});
    box[0] = 10;
    box[1] = 20;
    box[2] = 50;
    box[3] = 70;
    CHECK(ciou_loss(ag::make_var(box), box)->value[0] == doctest::Approx(0.0).epsilon(1e-7));

    // unit squares offset by 2: IoU 0, center distance 2, enclosing diag^2 = 10
    ag::Tensor pred({1, 4}), gt({1, 4});
    pred[0] = 0;
    pred[1] = 0;
    pred[2] = 1;
    pred[3] = 1;
    gt[0] = 2;
    gt[1] = 0;
    gt[2] = 3;
    gt[3] = 1;
    CHECK(ciou_loss(ag::make_var(pred), gt)->value[0] ==
          doctest::Approx(1.0 + 4.0 / 10.0).epsilon(1e-7));
}

TEST_CASE("box loss is non-negative over ten thousand random pairs") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> coord(0, 200), len(0.5, 100);
    for (int i = 0; i < 10000; ++i) {
        ag::Tensor pred({1, 4}), gt({1, 4});
        pred[0] = coord(rng);
        pred[1] = coord(rng);
        pred[2] = pred[0] + len(rng);
        pred[3] = pred[1] + len(rng);
        gt[0] = coord(rng);
        gt[1] = coord(rng);
        gt[2] = gt[0] + len(rng);
        gt[3] = gt[1] + len(rng);
        CHECK(ciou_loss(ag::make_var(pred), gt)->value[0] >= 0.0);
    }
}

TEST_CASE("segmentation loss closed forms on tiny masks") {
    SegmentationMask mask;
    mask.height = 2;
    mask.width = 2;
    mask.data = {1, 1, 1, 0};
    std::vector<const SegmentationMask*> masks{&mask};

    // logits +20 on the true class everywhere -> loss ~ 0
    ag::Tensor right({1, 2, 2, 2});
    for (long i = 0; i < 4; ++i) {
        right[i] = mask.data[static_cast<size_t>(i)] ? -20.0 : 20.0;      // background channel
        right[4 + i] = mask.data[static_cast<size_t>(i)] ? 20.0 : -20.0;  // foreground channel
    }
    CHECK(seg_ce_loss(ag::make_var(right), masks)->value[0] < 1e-6);

    // all-zero logits, binary mask -> ln 2
    ag::Tensor uniform({1, 2, 2, 2});
    CHECK(seg_ce_loss(ag::make_var(uniform), masks)->value[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // one confidently wrong pixel dominates: hand-computed value
    ag::Tensor wrong({1, 2, 2, 2});
    for (long i = 0; i < 4; ++i) {
        wrong[i] = 0.0;
        wrong[4 + i] = 20.0;  // predicts foreground everywhere; pixel 3 is background
    }
    auto softplus = [](double x) { return std::log1p(std::exp(-std::fabs(x))) + std::max(x, 0.0); };
    const double expected = (3.0 * (softplus(20.0) - 20.0) + softplus(20.0)) / 4.0;
    CHECK(seg_ce_loss(ag::make_var(wrong), masks)->value[0] ==
          doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("segmentation loss rejects out-of-range classes") {
    SegmentationMask mask;
    mask.height = 1;
    mask.width = 1;
    mask.data = {2};
    std::vector<const SegmentationMask*> masks{&mask};
    ag::Tensor logits({1, 2, 1, 1});
    CHECK_THROWS(seg_ce_loss(ag::make_var(logits), masks));
}

TEST_CASE("composite loss honours the weighted combination identity") {
    // pure arithmetic with the default weights
    const double lc = 0.6, lo = 0.3, lb = 0.9, lce = 0.4;
    const double combined = 0.5 * ((lc + lo + lb) / 3.0) + 0.5 * lce;
    CHECK(combined == doctest::Approx((lc + lo + lb) / 6.0 + lce / 2.0).epsilon(1e-12));
    CHECK(combined == doctest::Approx(0.5).epsilon(1e-12));

    // the identity holds on real model outputs
    ModelConfig cfg = mini_cfg();
    YoloMedNet net(cfg);
    SgdOptimizer opt(net.parameters(), cfg.momentum, cfg.weight_decay);
    Dataset batch = testutil::rect_dataset(2, 64, 21);
    LossBreakdown parts = train_single_step(net, opt, batch, 1e-4);
    const double expected = cfg.beta1 * (cfg.alpha1 * parts.l_class + cfg.alpha2 * parts.l_obj +
                                         cfg.alpha3 * parts.l_box) +
                            cfg.beta2 * parts.l_ce;
    CHECK(std::fabs(parts.l_global - expected) < 1e-6);
    CHECK(parts.l_class >= 0.0);
    CHECK(parts.l_obj >= 0.0);
    CHECK(parts.l_box >= 0.0);
    CHECK(parts.l_ce >= 0.0);
}

TEST_CASE("zero segmentation weight silences the segmentation gradient") {
    ModelConfig cfg = mini_cfg();
    cfg.beta1 = 1.0;
    cfg.beta2 = 0.0;
    YoloMedNet net(cfg);
    Dataset batch = testutil::rect_dataset(1, 64, 22);
    PreparedBatch prepared = prepare_batch(batch, {0}, cfg, nullptr);
    ag::Var input = ag::constant(prepared.input);
    ModelOutputs out = net.forward(input, true);
    std::vector<const SegmentationMask*> masks{&prepared.masks[0]};
    GlobalLoss loss = global_loss(out, prepared.assignments, masks, cfg);
    ag::backward(loss.value);

    std::vector<nn::NamedParam> seg_params;
    net.seg_head.named_parameters("seg_head", seg_params);
    // the final segmentation projection feeds only l_ce, so its gradient must vanish
    for (const auto& p : seg_params)
        if (p.name.find("out") != std::string::npos)
            for (long i = 0; i < p.var->grad.numel(); ++i) CHECK(p.var->grad[i] == 0.0);
}

TEST_CASE("empty image keeps objectness and segmentation terms only") {
    ModelConfig cfg = mini_cfg();
    YoloMedNet net(cfg);
    ImageSample blank;
    blank.id = "blank";
    blank.width = 64;
    blank.height = 64;
    blank.image.assign(static_cast<size_t>(64) * 64 * 3, 0);
    blank.mask.width = 64;
    blank.mask.height = 64;
    blank.mask.data.assign(64 * 64, 0);
    Dataset ds;
    ds.samples.push_back(blank);

    PreparedBatch prepared = prepare_batch(ds, {0}, cfg, nullptr);
    ag::Var input = ag::constant(prepared.input);
    ModelOutputs out = net.forward(input, true);
    std::vector<const SegmentationMask*> masks{&prepared.masks[0]};
    GlobalLoss loss = global_loss(out, prepared.assignments, masks, cfg);
    CHECK(loss.parts.l_class == 0.0);
    CHECK(loss.parts.l_box == 0.0);
    CHECK(loss.parts.l_global ==
          doctest::Approx(loss.parts.l_obj / 6.0 + loss.parts.l_ce / 2.0).epsilon(1e-9));
    CHECK(loss.parts.l_global >= 0.0);
}
