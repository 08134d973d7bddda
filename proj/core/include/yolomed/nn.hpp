#pragma once

#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "yolomed/autograd.hpp"

namespace yolomed::nn {

using ag::Tensor;
using ag::Var;

using Rng = std::mt19937_64;

struct NamedParam {
    std::string name;
    Var var;
    bool decay;  // false for biases and norm affine params
};

struct NamedBuffer {
    std::string name;
    Tensor* tensor;
};

// Base for anything that owns parameters. Children are registered so
// checkpoint names are hierarchical (e.g. "encoder.backbone.stem.conv.weight").
class Module {
public:
    Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;
    virtual ~Module() = default;

    void register_parameter(const std::string& name, Var v, bool decay);
    void register_buffer(const std::string& name, Tensor* t);
    void register_child(const std::string& name, Module* m);

    void named_parameters(const std::string& prefix, std::vector<NamedParam>& out) const;
    void named_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) const;
    std::vector<NamedParam> parameters() const;

    long parameter_count() const;
    void zero_grad();

private:
    std::vector<NamedParam> params_;
    std::vector<NamedBuffer> buffers_;
    std::vector<std::pair<std::string, Module*>> children_;
};

Tensor kaiming_uniform(std::vector<long> shape, long fan_in, Rng& rng);

class Conv2d : public Module {
public:
    Conv2d() = default;
    Conv2d(long in_ch, long out_ch, int kernel, int stride, Rng& rng, bool bias = true);

    Var forward(const Var& x) const;

    Var weight, bias_;
    int stride = 1, pad = 0;
    bool has_bias = true;
};

class BatchNorm2d : public Module {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(long channels);

    Var forward(const Var& x, bool training);

    Var gamma, beta;
    Tensor running_mean, running_var;
};

// conv -> batch norm -> SiLU, the standard block of the backbone/neck
class ConvBlock : public Module {
public:
    ConvBlock() = default;
    ConvBlock(long in_ch, long out_ch, int kernel, int stride, Rng& rng);

    Var forward(const Var& x, bool training);

    Conv2d conv;
    BatchNorm2d bn;
};

class Linear : public Module {
public:
    Linear() = default;
    Linear(long in_dim, long out_dim, Rng& rng);

    Var forward(const Var& x) const;

    Var weight, bias_;
};

class LayerNorm : public Module {
public:
    LayerNorm() = default;
    explicit LayerNorm(long dim);

    Var forward(const Var& x) const;

    Var gamma, beta;
};

}  // namespace yolomed::nn
