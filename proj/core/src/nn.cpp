#include "yolomed/nn.hpp"

#include <cmath>

namespace yolomed::nn {

void Module::register_parameter(const std::string& name, Var v, bool decay) {
    v->requires_grad = true;
    params_.push_back({name, std::move(v), decay});
}

void Module::register_buffer(const std::string& name, Tensor* t) {
    buffers_.push_back({name, t});
}

void Module::register_child(const std::string& name, Module* m) {
    children_.emplace_back(name, m);
}

void Module::named_parameters(const std::string& prefix, std::vector<NamedParam>& out) const {
    for (const auto& p : params_)
        out.push_back({prefix.empty() ? p.name : prefix + "." + p.name, p.var, p.decay});
    for (const auto& [name, child] : children_)
        child->named_parameters(prefix.empty() ? name : prefix + "." + name, out);
}

void Module::named_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) const {
    for (const auto& b : buffers_)
        out.push_back({prefix.empty() ? b.name : prefix + "." + b.name, b.tensor});
    for (const auto& [name, child] : children_)
        child->named_buffers(prefix.empty() ? name : prefix + "." + name, out);
}

std::vector<NamedParam> Module::parameters() const {
    std::vector<NamedParam> out;
    named_parameters("", out);
    return out;
}

long Module::parameter_count() const {
    long n = 0;
    for (const auto& p : parameters()) n += p.var->value.numel();
    return n;
}

void Module::zero_grad() {
    for (auto& p : parameters()) p.var->zero_grad();
}

Tensor kaiming_uniform(std::vector<long> shape, long fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(std::max<long>(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (long i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

Conv2d::Conv2d(long in_ch, long out_ch, int kernel, int stride_, Rng& rng, bool bias)
    : stride(stride_), pad(kernel / 2), has_bias(bias) {
    weight = ag::make_var(kaiming_uniform({out_ch, in_ch, kernel, kernel},
                                          in_ch * kernel * kernel, rng));
    bias_ = ag::make_var(Tensor({out_ch}));
    register_parameter("weight", weight, true);
    if (has_bias) register_parameter("bias", bias_, false);
}

Var Conv2d::forward(const Var& x) const {
    return ag::conv2d(x, weight, bias_, stride, pad);
}

BatchNorm2d::BatchNorm2d(long channels)
    : running_mean(Tensor({channels})), running_var(Tensor::full({channels}, 1.0)) {
    gamma = ag::make_var(Tensor::full({channels}, 1.0));
    beta = ag::make_var(Tensor({channels}));
    register_parameter("gamma", gamma, false);
    register_parameter("beta", beta, false);
    register_buffer("running_mean", &running_mean);
    register_buffer("running_var", &running_var);
}

Var BatchNorm2d::forward(const Var& x, bool training) {
    return ag::batch_norm2d(x, gamma, beta, running_mean, running_var, training);
}

ConvBlock::ConvBlock(long in_ch, long out_ch, int kernel, int stride, Rng& rng)
    : conv(in_ch, out_ch, kernel, stride, rng, /*bias=*/false), bn(out_ch) {
    register_child("conv", &conv);
    register_child("bn", &bn);
}

Var ConvBlock::forward(const Var& x, bool training) {
    return ag::silu(bn.forward(conv.forward(x), training));
}

Linear::Linear(long in_dim, long out_dim, Rng& rng) {
    weight = ag::make_var(kaiming_uniform({out_dim, in_dim}, in_dim, rng));
    bias_ = ag::make_var(Tensor({out_dim}));
    register_parameter("weight", weight, true);
    register_parameter("bias", bias_, false);
}

Var Linear::forward(const Var& x) const { return ag::linear(x, weight, bias_); }

LayerNorm::LayerNorm(long dim) {
    gamma = ag::make_var(Tensor::full({dim}, 1.0));
    beta = ag::make_var(Tensor({dim}));
    register_parameter("gamma", gamma, false);
    register_parameter("beta", beta, false);
}

Var LayerNorm::forward(const Var& x) const {
    return ag::layer_norm_lastdim(x, gamma, beta);
}

}  // namespace yolomed::nn
