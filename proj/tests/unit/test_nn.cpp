#include <doctest.h>

#include "helpers.hpp"
#include "yolomed/nn.hpp"

using namespace yolomed;
using namespace yolomed::nn;

TEST_CASE("module registers hierarchical parameter names") {
    Rng rng(0);
    ConvBlock block(3, 8, 3, 1, rng);
    std::vector<NamedParam> params;
    block.named_parameters("block", params);
    std::vector<std::string> names;
    for (const auto& p : params) names.push_back(p.name);
    CHECK(std::find(names.begin(), names.end(), "block.conv.weight") != names.end());
    CHECK(std::find(names.begin(), names.end(), "block.bn.gamma") != names.end());
    CHECK(std::find(names.begin(), names.end(), "block.bn.beta") != names.end());
}

TEST_CASE("weight decay excluded for biases and norm params") {
    Rng rng(0);
    ConvBlock block(3, 8, 3, 1, rng);
    for (const auto& p : block.parameters()) {
        if (p.name.find("bn.") != std::string::npos || p.name.find("bias") != std::string::npos) {
            CHECK_FALSE(p.decay);
        } else {
            CHECK(p.decay);
        }
    }
    Linear lin(4, 4, rng);
    for (const auto& p : lin.parameters()) CHECK(p.decay == (p.name == "weight"));
}

TEST_CASE("parameter count matches tensor sizes") {
    Rng rng(1);
    Conv2d conv(3, 8, 3, 1, rng, /*bias=*/true);
    CHECK(conv.parameter_count() == 8 * 3 * 3 * 3 + 8);
    Conv2d nobias(3, 8, 1, 1, rng, /*bias=*/false);
    CHECK(nobias.parameter_count() == 8 * 3);
    Linear lin(10, 5, rng);
    CHECK(lin.parameter_count() == 55);
}

TEST_CASE("deterministic init from a fixed seed") {
    Rng rng_a(42), rng_b(42);
    Conv2d a(3, 4, 3, 1, rng_a), b(3, 4, 3, 1, rng_b);
    for (long i = 0; i < a.weight->value.numel(); ++i)
        CHECK(a.weight->value[i] == b.weight->value[i]);
}

TEST_CASE("conv block forward shape and zero_grad") {
    Rng rng(2);
    ConvBlock block(3, 8, 3, 2, rng);
    std::mt19937_64 data_rng(3);
    ag::Var x = ag::make_var(testutil::random_tensor({1, 3, 8, 8}, data_rng));
    ag::Var y = block.forward(x, true);
    CHECK(y->value.shape() == std::vector<long>({1, 8, 4, 4}));
    ag::backward(ag::sum_all(ag::square(y)));
    bool any_nonzero = false;
    for (const auto& p : block.parameters())
        for (long i = 0; i < p.var->grad.numel(); ++i)
            if (p.var->grad[i] != 0.0) any_nonzero = true;
    CHECK(any_nonzero);
    block.zero_grad();
    for (const auto& p : block.parameters())
        for (long i = 0; i < p.var->grad.numel(); ++i) CHECK(p.var->grad[i] == 0.0);
}

TEST_CASE("batch norm buffers are registered for checkpointing") {
    Rng rng(4);
    BatchNorm2d bn(6);
    std::vector<NamedBuffer> buffers;
    bn.named_buffers("bn", buffers);
    REQUIRE(buffers.size() == 2);
    CHECK(buffers[0].name == "bn.running_mean");
    CHECK(buffers[1].name == "bn.running_var");
}
