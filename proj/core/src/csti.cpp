#include "yolomed/csti.hpp"

#include <cmath>

namespace yolomed {

using namespace ag;

TokenSequence concat_tokens(const TokenSequence& a, const TokenSequence& b) {
    if (!a.tokens || !b.tokens || a.manifest.empty() || b.manifest.empty())
        throw std::invalid_argument("concat_tokens: both sequences must be non-empty");
    if (a.tokens->value.dim(2) != b.tokens->value.dim(2))
        throw std::invalid_argument("concat_tokens: token dim mismatch");
    TokenSequence out;
    out.tokens = concat({a.tokens, b.tokens}, 1);
    out.manifest = a.manifest;
    out.manifest.insert(out.manifest.end(), b.manifest.begin(), b.manifest.end());
    return out;
}

TransformerLayer::TransformerLayer(long dim, int heads_, double ffn_ratio, nn::Rng& rng)
    : q_proj(dim, dim, rng),
      k_proj(dim, dim, rng),
      v_proj(dim, dim, rng),
      out_proj(dim, dim, rng),
      ln(dim),
      ffn1(dim, static_cast<long>(std::lround(ffn_ratio * static_cast<double>(dim))), rng),
      ffn2(static_cast<long>(std::lround(ffn_ratio * static_cast<double>(dim))), dim, rng),
      heads(heads_) {
    register_child("q_proj", &q_proj);
    register_child("k_proj", &k_proj);
    register_child("v_proj", &v_proj);
    register_child("out_proj", &out_proj);
    register_child("ln", &ln);
    register_child("ffn1", &ffn1);
    register_child("ffn2", &ffn2);
}

Var TransformerLayer::forward(const Var& tokens) {
    const long dim = tokens->value.dim(2);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim / heads));
    Var q = split_heads(q_proj.forward(tokens), heads);
    Var k = split_heads(k_proj.forward(tokens), heads);
    Var v = split_heads(v_proj.forward(tokens), heads);
    Var attn = softmax_lastdim(mul_scalar(matmul(q, transpose_last2(k)), scale));
    Var mhsa = out_proj.forward(merge_heads(matmul(attn, v), heads));
    Var v1 = add(mhsa, tokens);                              // residual, no pre-norm
    Var ffn = ffn2.forward(gelu(ffn1.forward(ln.forward(v1))));
    return add(ffn, v1);
}

Tensor TransformerLayer::attention_weights(const Var& tokens) const {
    NoGradGuard ng;
    const long dim = tokens->value.dim(2);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim / heads));
    Var q = split_heads(q_proj.forward(tokens), heads);
    Var k = split_heads(k_proj.forward(tokens), heads);
    Var attn = softmax_lastdim(mul_scalar(matmul(q, transpose_last2(k)), scale));
    return attn->value;
}

Csti::Csti(const ModelConfig& cfg, nn::Rng& rng)
    : transformer(cfg.token_dim, cfg.attn_heads, cfg.ffn_ratio, rng),
      token_dim_(cfg.token_dim),
      tok_seg_(32, cfg.token_dim, 3, 2, rng),
      detok_seg_(cfg.token_dim, 32, 3, 1, rng) {
    register_child("transformer", &transformer);
    for (int i = 0; i < 3; ++i) {
        tok_det_[static_cast<size_t>(i)] =
            std::make_unique<nn::Conv2d>(cfg.neck_channels[static_cast<size_t>(i)], cfg.token_dim,
                                         1, 1, rng);
        detok_det_[static_cast<size_t>(i)] =
            std::make_unique<nn::Conv2d>(cfg.token_dim, cfg.neck_channels[static_cast<size_t>(i)],
                                         1, 1, rng);
        register_child("tok_det" + std::to_string(i + 1), tok_det_[static_cast<size_t>(i)].get());
        register_child("detok_det" + std::to_string(i + 1),
                       detok_det_[static_cast<size_t>(i)].get());
    }
    register_child("tok_seg", &tok_seg_);
    register_child("detok_seg", &detok_seg_);
}

TokenSequence Csti::tokenize_detection(const std::array<Var, 3>& x_det) {
    TokenSequence seq;
    std::vector<Var> parts;
    for (int i = 0; i < 3; ++i) {
        const Var& x = x_det[static_cast<size_t>(i)];
        Var std64 = tok_det_[static_cast<size_t>(i)]->forward(x);
        parts.push_back(nchw_to_tokens(std64));
        seq.manifest.push_back({"det" + std::to_string(i + 1), x->value.dim(2), x->value.dim(3),
                                x->value.dim(1)});
    }
    seq.tokens = concat(parts, 1);
    return seq;
}

TokenSequence Csti::tokenize_segmentation(const Var& x_seg) {
    if (x_seg->value.dim(2) % 2 != 0 || x_seg->value.dim(3) % 2 != 0)
        throw std::invalid_argument("tokenize_segmentation: spatial dims must be even");
    Var down = tok_seg_.forward(x_seg);  // H/2 x W/2 x 32 -> H/4 x W/4 x token_dim
    TokenSequence seq;
    seq.tokens = nchw_to_tokens(down);
    seq.manifest.push_back({"seg", down->value.dim(2), down->value.dim(3), x_seg->value.dim(1)});
    return seq;
}

std::pair<std::array<Var, 3>, Var> Csti::detokenize(const TokenSequence& v_hat) {
    if (v_hat.manifest.size() != 4)
        throw std::invalid_argument("detokenize: manifest must have exactly four sources");
    long total = 0;
    for (const auto& m : v_hat.manifest) total += m.h * m.w;
    if (total != v_hat.tokens->value.dim(1))
        throw std::invalid_argument("detokenize: manifest length does not match token count");

    std::array<Var, 3> x_det;
    Var x_seg;
    long off = 0;
    for (size_t i = 0; i < v_hat.manifest.size(); ++i) {
        const auto& m = v_hat.manifest[i];
        Var part = slice(v_hat.tokens, 1, off, m.h * m.w);
        off += m.h * m.w;
        Var grid = tokens_to_nchw(part, token_dim_, m.h, m.w);
        if (m.tag == "seg") {
            x_seg = detok_seg_.forward(upsample_nearest2x(grid));  // H/4 -> H/2, 32 ch
        } else {
            x_det[i] = detok_det_[i]->forward(grid);
        }
    }
    return {x_det, x_seg};
}

std::pair<std::array<Var, 3>, Var> Csti::forward(const std::array<Var, 3>& x_det,
                                                 const Var& x_seg) {
    TokenSequence v = concat_tokens(tokenize_detection(x_det), tokenize_segmentation(x_seg));
    TokenSequence v_hat;
    v_hat.tokens = transformer.forward(v.tokens);
    v_hat.manifest = v.manifest;
    return detokenize(v_hat);
}

}  // namespace yolomed
