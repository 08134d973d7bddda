#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "yolomed/tensor.hpp"

namespace yolomed::ag {

struct Node;
using Var = std::shared_ptr<Node>;

// One value in the computation tape. Gradients accumulate into `grad`
// during backward(); leaf nodes created with requires_grad keep theirs.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor(value.shape());
    }
    void zero_grad() {
        if (grad.numel()) grad.fill(0.0);
    }
};

Var make_var(Tensor value, bool requires_grad = false);
Var constant(Tensor value);

// Thread-local switch; when off, ops skip building the tape.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// Runs reverse-mode accumulation from a scalar root.
void backward(const Var& root);

// ---- elementwise, same shape ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var minimum(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);

// ---- scalar variants ----
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var rsub_scalar(double c, const Var& a);  // c - a

// ---- unary ----
Var neg(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var sqrt_(const Var& a);
Var square(const Var& a);
Var pow_scalar(const Var& a, double p);
Var atan_(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);
Var softplus(const Var& a);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);

// ---- shape ----
Var reshape(const Var& a, std::vector<long> shape);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& a, int axis, long start, long len);
Var index_select_rows(const Var& a, const std::vector<long>& rows);  // a: [R, C]

// [N,C,H,W] -> [N, H*W, C] and back
Var nchw_to_tokens(const Var& a);
Var tokens_to_nchw(const Var& a, long channels, long h, long w);

// [B,n,d] -> [B*h, n, d/h] and back
Var split_heads(const Var& a, int heads);
Var merge_heads(const Var& a, int heads);

Var transpose_last2(const Var& a);  // [B,m,n] -> [B,n,m]

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);              // [B,m,k] x [B,k,n]
Var linear(const Var& x, const Var& w, const Var& b);  // x [...,in], w [out,in], b [out]

// ---- normalized ----
Var softmax_lastdim(const Var& a);
Var layer_norm_lastdim(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// ---- conv / pooling / resize, NCHW ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var maxpool2d_same(const Var& x, int kernel);  // stride 1, max over valid window
Var upsample_nearest2x(const Var& x);

// Batch statistics normalization with train/eval switch. In training mode
// uses per-channel batch moments and updates the running buffers in place.
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta,
                 Tensor& running_mean, Tensor& running_var, bool training,
                 double momentum = 0.1, double eps = 1e-5);

// Mean softmax cross-entropy of row logits [M,K] against integer labels.
Var cross_entropy_rows(const Var& logits, const std::vector<long>& labels);

}  // namespace yolomed::ag
