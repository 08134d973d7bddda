#pragma once

#include <memory>
#include <string>

#include "yolomed/encoder.hpp"

namespace yolomed {

struct TokenManifestEntry {
    std::string tag;  // det1 | det2 | det3 | seg
    long h = 0, w = 0;
    long channels = 0;  // original channel count before standardization
};

// n x token_dim flattened multi-scale tokens plus the shape manifest needed
// to invert the flattening.
struct TokenSequence {
    Var tokens;  // [N, n, token_dim]
    std::vector<TokenManifestEntry> manifest;

    long length() const { return tokens ? tokens->value.dim(1) : 0; }
};

TokenSequence concat_tokens(const TokenSequence& a, const TokenSequence& b);

// Residual MHSA + MLP block over the joint token sequence (no positional
// encoding; LN only on the MLP path).
class TransformerLayer : public nn::Module {
public:
    TransformerLayer(long dim, int heads, double ffn_ratio, nn::Rng& rng);

    Var forward(const Var& tokens);

    // Row-stochastic attention weights for the given input, [B*heads, n, n].
    Tensor attention_weights(const Var& tokens) const;

    nn::Linear q_proj, k_proj, v_proj, out_proj;
    nn::LayerNorm ln;
    nn::Linear ffn1, ffn2;
    int heads;
};

class Csti : public nn::Module {
public:
    Csti(const ModelConfig& cfg, nn::Rng& rng);

    TokenSequence tokenize_detection(const std::array<Var, 3>& x_det);
    TokenSequence tokenize_segmentation(const Var& x_seg);
    std::pair<std::array<Var, 3>, Var> detokenize(const TokenSequence& v_hat);

    // tokenize -> concat -> transformer -> detokenize
    std::pair<std::array<Var, 3>, Var> forward(const std::array<Var, 3>& x_det, const Var& x_seg);

    TransformerLayer transformer;

private:
    long token_dim_;
    std::array<std::unique_ptr<nn::Conv2d>, 3> tok_det_;
    nn::Conv2d tok_seg_;
    std::array<std::unique_ptr<nn::Conv2d>, 3> detok_det_;
    nn::Conv2d detok_seg_;
};

}  // namespace yolomed
