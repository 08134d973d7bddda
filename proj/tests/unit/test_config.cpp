#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "yolomed/config.hpp"

using namespace yolomed;

TEST_CASE("config invariants are enforced") {
    ModelConfig cfg;
    cfg.finalize();

    ModelConfig bad_size = cfg;
    bad_size.input_size = 100;
    CHECK_THROWS(bad_size.validate());

    ModelConfig bad_alpha = cfg;
    bad_alpha.alpha1 = 0.5;
    CHECK_THROWS(bad_alpha.validate());

    ModelConfig bad_beta = cfg;
    bad_beta.beta1 = 0.7;
    CHECK_THROWS(bad_beta.validate());

    ModelConfig bad_heads = cfg;
    bad_heads.attn_heads = 5;
    CHECK_THROWS(bad_heads.validate());
}

TEST_CASE("width multiplier scales the channel triple with a floor") {
    ModelConfig cfg;
    cfg.width_mult = 0.25;
    cfg.finalize();
    CHECK(cfg.neck_channels == std::array<int, 3>{32, 64, 128});
    cfg.width_mult = 0.01;
    cfg.finalize();
    CHECK(cfg.neck_channels == std::array<int, 3>{4, 4, 5});
    cfg.width_mult = 1.0;
    cfg.finalize();
    CHECK(cfg.neck_channels == std::array<int, 3>{128, 256, 512});
}

TEST_CASE("json round trip preserves every field") {
    ModelConfig cfg;
    cfg.input_size = 128;
    cfg.width_mult = 0.5;
    cfg.use_dh = false;
    cfg.seed = 1234;
    cfg.lr0 = 0.02;
    cfg.finalize();
    ModelConfig back = ModelConfig::from_json(cfg.to_json());
    CHECK(back.input_size == 128);
    CHECK(back.width_mult == 0.5);
    CHECK_FALSE(back.use_dh);
    CHECK(back.seed == 1234);
    CHECK(back.lr0 == 0.02);
    CHECK(back.neck_channels == cfg.neck_channels);
    CHECK(back.to_json() == cfg.to_json());
}

TEST_CASE("yaml file loads and applies the width multiplier") {
    const std::string path = "test_cfg.yaml";
    {
        std::ofstream out(path);
        out << "input_size: 64\n"
               "width_mult: 0.125\n"
               "use_csti: false\n"
               "seed: 9\n"
               "hflip_prob: 0.0\n";
    }
    ModelConfig cfg = ModelConfig::from_yaml_file(path);
    CHECK(cfg.input_size == 64);
    CHECK_FALSE(cfg.use_csti);
    CHECK(cfg.seed == 9);
    CHECK(cfg.hflip_prob == 0.0);
    CHECK(cfg.neck_channels == std::array<int, 3>{16, 32, 64});
    std::remove(path.c_str());
}
