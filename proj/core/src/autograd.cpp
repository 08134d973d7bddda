#include "yolomed/autograd.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <unordered_set>

namespace yolomed::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool rg = false;
    if (g_grad_enabled)
        for (const auto& p : parents)
            if (p->requires_grad) rg = true;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(back);
    }
    return n;
}

template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
    Tensor out(a->value.shape());
    const long n = out.numel();
    const double* x = a->value.data();
    for (long i = 0; i < n; ++i) out[i] = f(x[i]);
    Var pa = a;
    return make_op(std::move(out), {a}, [pa, df](Node& self) {
        pa->ensure_grad();
        const long n = self.value.numel();
        for (long i = 0; i < n; ++i)
            pa->grad[i] += self.grad[i] * df(pa->value[i], self.value[i]);
    });
}

// dfa/dfb take (xa, xb) and give the partials.
template <class F, class DFA, class DFB>
Var binary(const Var& a, const Var& b, F f, DFA dfa, DFB dfb) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument("elementwise op: shape mismatch " +
                                    a->value.shape_str() + " vs " + b->value.shape_str());
    Tensor out(a->value.shape());
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] = f(a->value[i], b->value[i]);
    Var pa = a, pb = b;
    return make_op(std::move(out), {a, b}, [pa, pb, dfa, dfb](Node& self) {
        const long n = self.value.numel();
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (long i = 0; i < n; ++i)
                pa->grad[i] += self.grad[i] * dfa(pa->value[i], pb->value[i]);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (long i = 0; i < n; ++i)
                pb->grad[i] += self.grad[i] * dfb(pa->value[i], pb->value[i]);
        }
    });
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var make_var(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var constant(Tensor value) { return make_var(std::move(value), false); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    // iterative post-order topo sort over the requires_grad subgraph
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.numel()) n->backward_fn(*n);
    }
}

// ---- elementwise ----

Var add(const Var& a, const Var& b) {
    return binary(a, b, [](double x, double y) { return x + y; },
                  [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}
Var sub(const Var& a, const Var& b) {
    return binary(a, b, [](double x, double y) { return x - y; },
                  [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}
Var mul(const Var& a, const Var& b) {
    return binary(a, b, [](double x, double y) { return x * y; },
                  [](double, double y) { return y; }, [](double x, double) { return x; });
}
Var div(const Var& a, const Var& b) {
    return binary(a, b, [](double x, double y) { return x / y; },
                  [](double, double y) { return 1.0 / y; },
                  [](double x, double y) { return -x / (y * y); });
}
Var minimum(const Var& a, const Var& b) {
    return binary(a, b, [](double x, double y) { return std::min(x, y); },
                  [](double x, double y) { return x <= y ? 1.0 : 0.0; },
                  [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}
Var maximum(const Var& a, const Var& b) {
    return binary(a, b, [](double x, double y) { return std::max(x, y); },
                  [](double x, double y) { return x >= y ? 1.0 : 0.0; },
                  [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Var add_scalar(const Var& a, double c) {
    return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
Var mul_scalar(const Var& a, double c) {
    return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}
Var rsub_scalar(double c, const Var& a) {
    return unary(a, [c](double x) { return c - x; }, [](double, double) { return -1.0; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }
Var exp_(const Var& a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
Var log_(const Var& a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
Var sqrt_(const Var& a) {
    return unary(a, [](double x) { return std::sqrt(x); },
                 [](double, double y) { return 0.5 / y; });
}
Var square(const Var& a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
Var pow_scalar(const Var& a, double p) {
    return unary(a, [p](double x) { return std::pow(x, p); },
                 [p](double x, double) { return x == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}
Var atan_(const Var& a) {
    return unary(a, [](double x) { return std::atan(x); },
                 [](double x, double) { return 1.0 / (1.0 + x * x); });
}
Var sigmoid(const Var& a) {
    return unary(a, sigmoid_d, [](double, double y) { return y * (1.0 - y); });
}
Var silu(const Var& a) {
    return unary(a, [](double x) { return x * sigmoid_d(x); },
                 [](double x, double) {
                     double s = sigmoid_d(x);
                     return s * (1.0 + x * (1.0 - s));
                 });
}
Var relu(const Var& a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
Var gelu(const Var& a) {
    constexpr double kInvSqrt2 = 0.7071067811865475;
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    return unary(a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                 [=](double x, double) {
                     return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
                            x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
                 });
}
Var softplus(const Var& a) {
    return unary(a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
                 [](double x, double) { return sigmoid_d(x); });
}

// ---- reductions ----

Var sum_all(const Var& a) {
    double s = 0.0;
    for (long i = 0; i < a->value.numel(); ++i) s += a->value[i];
    Var pa = a;
    return make_op(Tensor::scalar(s), {a}, [pa](Node& self) {
        pa->ensure_grad();
        const double g = self.grad[0];
        for (long i = 0; i < pa->value.numel(); ++i) pa->grad[i] += g;
    });
}

Var mean_all(const Var& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

// ---- shape ----

Var reshape(const Var& a, std::vector<long> shape) {
    Tensor out = a->value.reshaped(std::move(shape));
    Var pa = a;
    return make_op(std::move(out), {a}, [pa](Node& self) {
        pa->ensure_grad();
        for (long i = 0; i < self.value.numel(); ++i) pa->grad[i] += self.grad[i];
    });
}

namespace {
// outer/inner split around an axis
struct AxisView {
    long outer, axis, inner;
};
AxisView axis_view(const std::vector<long>& shape, int axis) {
    AxisView v{1, shape[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}
}  // namespace

Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    auto shape = xs[0]->value.shape();
    long total = 0;
    for (const auto& x : xs) {
        if (x->value.ndim() != static_cast<int>(shape.size()))
            throw std::invalid_argument("concat: rank mismatch");
        for (int i = 0; i < x->value.ndim(); ++i)
            if (i != axis && x->value.dim(i) != shape[static_cast<size_t>(i)])
                throw std::invalid_argument("concat: shape mismatch off-axis");
        total += x->value.dim(axis);
    }
    shape[static_cast<size_t>(axis)] = total;
    Tensor out(shape);
    AxisView ov = axis_view(shape, axis);
    long off = 0;
    for (const auto& x : xs) {
        AxisView xv = axis_view(x->value.shape(), axis);
        for (long o = 0; o < ov.outer; ++o) {
            const double* src = x->value.data() + o * xv.axis * xv.inner;
            double* dst = out.data() + (o * ov.axis + off) * ov.inner;
            std::copy(src, src + xv.axis * xv.inner, dst);
        }
        off += xv.axis;
    }
    std::vector<Var> parents = xs;
    return make_op(std::move(out), parents, [parents, axis, ov](Node& self) {
        long off = 0;
        for (const auto& x : parents) {
            AxisView xv = axis_view(x->value.shape(), axis);
            if (x->requires_grad) {
                x->ensure_grad();
                for (long o = 0; o < ov.outer; ++o) {
                    const double* src = self.grad.data() + (o * ov.axis + off) * ov.inner;
                    double* dst = x->grad.data() + o * xv.axis * xv.inner;
                    for (long i = 0; i < xv.axis * xv.inner; ++i) dst[i] += src[i];
                }
            }
            off += xv.axis;
        }
    });
}

Var slice(const Var& a, int axis, long start, long len) {
    auto shape = a->value.shape();
    if (start < 0 || start + len > shape[static_cast<size_t>(axis)])
        throw std::out_of_range("slice: range out of bounds");
    AxisView av = axis_view(shape, axis);
    auto out_shape = shape;
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out(out_shape);
    for (long o = 0; o < av.outer; ++o) {
        const double* src = a->value.data() + (o * av.axis + start) * av.inner;
        std::copy(src, src + len * av.inner, out.data() + o * len * av.inner);
    }
    Var pa = a;
    return make_op(std::move(out), {a}, [pa, av, start, len](Node& self) {
        pa->ensure_grad();
        for (long o = 0; o < av.outer; ++o) {
            const double* src = self.grad.data() + o * len * av.inner;
            double* dst = pa->grad.data() + (o * av.axis + start) * av.inner;
            for (long i = 0; i < len * av.inner; ++i) dst[i] += src[i];
        }
    });
}

Var index_select_rows(const Var& a, const std::vector<long>& rows) {
    if (a->value.ndim() != 2) throw std::invalid_argument("index_select_rows: need 2D");
    const long C = a->value.dim(1);
    Tensor out({static_cast<long>(rows.size()), C});
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= a->value.dim(0))
            throw std::out_of_range("index_select_rows: row out of range");
        std::copy(a->value.data() + rows[r] * C, a->value.data() + (rows[r] + 1) * C,
                  out.data() + static_cast<long>(r) * C);
    }
    Var pa = a;
    return make_op(std::move(out), {a}, [pa, rows, C](Node& self) {
        pa->ensure_grad();
        for (size_t r = 0; r < rows.size(); ++r)
            for (long c = 0; c < C; ++c)
                pa->grad[rows[r] * C + c] += self.grad[static_cast<long>(r) * C + c];
    });
}

Var nchw_to_tokens(const Var& a) {
    const long N = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2), W = a->value.dim(3);
    Tensor out({N, H * W, C});
    for (long n = 0; n < N; ++n)
        for (long c = 0; c < C; ++c)
            for (long hw = 0; hw < H * W; ++hw)
                out[(n * H * W + hw) * C + c] = a->value[(n * C + c) * H * W + hw];
    Var pa = a;
    return make_op(std::move(out), {a}, [pa, N, C, H, W](Node& self) {
        pa->ensure_grad();
        for (long n = 0; n < N; ++n)
            for (long c = 0; c < C; ++c)
                for (long hw = 0; hw < H * W; ++hw)
                    pa->grad[(n * C + c) * H * W + hw] += self.grad[(n * H * W + hw) * C + c];
    });
}

Var tokens_to_nchw(const Var& a, long channels, long h, long w) {
    const long N = a->value.dim(0);
    if (a->value.dim(1) != h * w || a->value.dim(2) != channels)
        throw std::invalid_argument("tokens_to_nchw: shape mismatch");
    Tensor out({N, channels, h, w});
    for (long n = 0; n < N; ++n)
        for (long c = 0; c < channels; ++c)
            for (long hw = 0; hw < h * w; ++hw)
                out[(n * channels + c) * h * w + hw] = a->value[(n * h * w + hw) * channels + c];
    Var pa = a;
    return make_op(std::move(out), {a}, [pa, N, channels, h, w](Node& self) {
        pa->ensure_grad();
        for (long n = 0; n < N; ++n)
            for (long c = 0; c < channels; ++c)
                for (long hw = 0; hw < h * w; ++hw)
                    pa->grad[(n * h * w + hw) * channels + c] +=
                        self.grad[(n * channels + c) * h * w + hw];
    });
}

Var split_heads(const Var& a, int heads) {
    const long B = a->value.dim(0), n = a->value.dim(1), d = a->value.dim(2);
    if (d % heads != 0) throw std::invalid_argument("split_heads: d not divisible by heads");
    const long dh = d / heads;
    Tensor out({B * heads, n, dh});
    for (long b = 0; b < B; ++b)
        for (long hh = 0; hh < heads; ++hh)
            for (long i = 0; i < n; ++i)
                for (long j = 0; j < dh; ++j)
                    out[((b * heads + hh) * n + i) * dh + j] =
                        a->value[(b * n + i) * d + hh * dh + j];
    Var pa = a;
    return make_op(std::move(out), {a}, [pa, B, n, d, heads, dh](Node& self) {
        pa->ensure_grad();
        for (long b = 0; b < B; ++b)
            for (long hh = 0; hh < heads; ++hh)
                for (long i = 0; i < n; ++i)
                    for (long j = 0; j < dh; ++j)
                        pa->grad[(b * n + i) * d + hh * dh + j] +=
                            self.grad[((b * heads + hh) * n + i) * dh + j];
    });
}

Var merge_heads(const Var& a, int heads) {
    const long Bh = a->value.dim(0), n = a->value.dim(1), dh = a->value.dim(2);
    if (Bh % heads != 0) throw std::invalid_argument("merge_heads: batch not divisible");
    const long B = Bh / heads, d = dh * heads;
    Tensor out({B, n, d});
    for (long b = 0; b < B; ++b)
        for (long hh = 0; hh < heads; ++hh)
            for (long i = 0; i < n; ++i)
                for (long j = 0; j < dh; ++j)
                    out[(b * n + i) * d + hh * dh + j] =
                        a->value[((b * heads + hh) * n + i) * dh + j];
    Var pa = a;
    return make_op(std::move(out), {a}, [pa, B, n, d, heads, dh](Node& self) {
        pa->ensure_grad();
        for (long b = 0; b < B; ++b)
            for (long hh = 0; hh < heads; ++hh)
                for (long i = 0; i < n; ++i)
                    for (long j = 0; j < dh; ++j)
                        pa->grad[((b * heads + hh) * n + i) * dh + j] +=
                            self.grad[(b * n + i) * d + hh * dh + j];
    });
}

Var transpose_last2(const Var& a) {
    if (a->value.ndim() != 3) throw std::invalid_argument("transpose_last2: need 3D");
    const long B = a->value.dim(0), m = a->value.dim(1), n = a->value.dim(2);
    Tensor out({B, n, m});
    for (long b = 0; b < B; ++b)
        for (long i = 0; i < m; ++i)
            for (long j = 0; j < n; ++j)
                out[(b * n + j) * m + i] = a->value[(b * m + i) * n + j];
    Var pa = a;
    return make_op(std::move(out), {a}, [pa, B, m, n](Node& self) {
        pa->ensure_grad();
        for (long b = 0; b < B; ++b)
            for (long i = 0; i < m; ++i)
                for (long j = 0; j < n; ++j)
                    pa->grad[(b * m + i) * n + j] += self.grad[(b * n + j) * m + i];
    });
}

// ---- linear algebra ----

Var matmul(const Var& a, const Var& b) {
    if (a->value.ndim() != 3 || b->value.ndim() != 3 || a->value.dim(0) != b->value.dim(0) ||
        a->value.dim(2) != b->value.dim(1))
        throw std::invalid_argument("matmul: incompatible shapes " + a->value.shape_str() +
                                    " x " + b->value.shape_str());
    const long B = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2), n = b->value.dim(2);
    Tensor out({B, m, n});
    for (long i = 0; i < B; ++i) {
        CMatMap A(a->value.data() + i * m * k, m, k);
        CMatMap Bm(b->value.data() + i * k * n, k, n);
        MatMap O(out.data() + i * m * n, m, n);
        O.noalias() = A * Bm;
    }
    Var pa = a, pb = b;
    return make_op(std::move(out), {a, b}, [pa, pb, B, m, k, n](Node& self) {
        for (long i = 0; i < B; ++i) {
            CMatMap G(self.grad.data() + i * m * n, m, n);
            CMatMap A(pa->value.data() + i * m * k, m, k);
            CMatMap Bm(pb->value.data() + i * k * n, k, n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                MatMap dA(pa->grad.data() + i * m * k, m, k);
                dA.noalias() += G * Bm.transpose();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                MatMap dB(pb->grad.data() + i * k * n, k, n);
                dB.noalias() += A.transpose() * G;
            }
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const long in = w->value.dim(1), out_dim = w->value.dim(0);
    if (x->value.dim(x->value.ndim() - 1) != in)
        throw std::invalid_argument("linear: input dim mismatch");
    const long M = x->value.numel() / in;
    auto out_shape = x->value.shape();
    out_shape.back() = out_dim;
    Tensor out(out_shape);
    {
        CMatMap X(x->value.data(), M, in);
        CMatMap W(w->value.data(), out_dim, in);
        MatMap Y(out.data(), M, out_dim);
        Y.noalias() = X * W.transpose();
        for (long i = 0; i < M; ++i)
            for (long j = 0; j < out_dim; ++j) out[i * out_dim + j] += b->value[j];
    }
    Var px = x, pw = w, pb = b;
    return make_op(std::move(out), {x, w, b}, [px, pw, pb, M, in, out_dim](Node& self) {
        CMatMap G(self.grad.data(), M, out_dim);
        CMatMap X(px->value.data(), M, in);
        CMatMap W(pw->value.data(), out_dim, in);
        if (px->requires_grad) {
            px->ensure_grad();
            MatMap dX(px->grad.data(), M, in);
            dX.noalias() += G * W;
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            MatMap dW(pw->grad.data(), out_dim, in);
            dW.noalias() += G.transpose() * X;
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (long i = 0; i < M; ++i)
                for (long j = 0; j < out_dim; ++j) pb->grad[j] += self.grad[i * out_dim + j];
        }
    });
}

// ---- normalized ----

Var softmax_lastdim(const Var& a) {
    const long D = a->value.dim(a->value.ndim() - 1);
    const long R = a->value.numel() / D;
    Tensor out(a->value.shape());
    for (long r = 0; r < R; ++r) {
        const double* x = a->value.data() + r * D;
        double* y = out.data() + r * D;
        double mx = x[0];
        for (long i = 1; i < D; ++i) mx = std::max(mx, x[i]);
        double s = 0.0;
        for (long i = 0; i < D; ++i) {
            y[i] = std::exp(x[i] - mx);
            s += y[i];
        }
        for (long i = 0; i < D; ++i) y[i] /= s;
    }
    Var pa = a;
    return make_op(std::move(out), {a}, [pa, R, D](Node& self) {
        pa->ensure_grad();
        for (long r = 0; r < R; ++r) {
            const double* y = self.value.data() + r * D;
            const double* g = self.grad.data() + r * D;
            double dot = 0.0;
            for (long i = 0; i < D; ++i) dot += g[i] * y[i];
            double* dx = pa->grad.data() + r * D;
            for (long i = 0; i < D; ++i) dx[i] += (g[i] - dot) * y[i];
        }
    });
}

Var layer_norm_lastdim(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const long D = x->value.dim(x->value.ndim() - 1);
    if (gamma->value.numel() != D || beta->value.numel() != D)
        throw std::invalid_argument("layer_norm: affine size mismatch");
    const long R = x->value.numel() / D;
    Tensor out(x->value.shape());
    auto xhat = std::make_shared<Tensor>(x->value.shape());
    auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(R));
    for (long r = 0; r < R; ++r) {
        const double* xr = x->value.data() + r * D;
        double mean = 0.0;
        for (long i = 0; i < D; ++i) mean += xr[i];
        mean /= static_cast<double>(D);
        double var = 0.0;
        for (long i = 0; i < D; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<double>(D);
        const double is = 1.0 / std::sqrt(var + eps);
        (*invstd)[static_cast<size_t>(r)] = is;
        for (long i = 0; i < D; ++i) {
            const double xh = (xr[i] - mean) * is;
            (*xhat)[r * D + i] = xh;
            out[r * D + i] = xh * gamma->value[i] + beta->value[i];
        }
    }
    Var px = x, pg = gamma, pb = beta;
    return make_op(std::move(out), {x, gamma, beta}, [px, pg, pb, xhat, invstd, R, D](Node& self) {
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        if (px->requires_grad) px->ensure_grad();
        for (long r = 0; r < R; ++r) {
            const double* g = self.grad.data() + r * D;
            const double* xh = xhat->data() + r * D;
            double sum_g = 0.0, sum_gx = 0.0;
            for (long i = 0; i < D; ++i) {
                const double gg = g[i] * pg->value[i];
                sum_g += gg;
                sum_gx += gg * xh[i];
            }
            if (px->requires_grad) {
                const double is = (*invstd)[static_cast<size_t>(r)];
                double* dx = px->grad.data() + r * D;
                for (long i = 0; i < D; ++i) {
                    const double gg = g[i] * pg->value[i];
                    dx[i] += is * (gg - (sum_g + xh[i] * sum_gx) / static_cast<double>(D));
                }
            }
            if (pg->requires_grad)
                for (long i = 0; i < D; ++i) pg->grad[i] += g[i] * xh[i];
            if (pb->requires_grad)
                for (long i = 0; i < D; ++i) pb->grad[i] += g[i];
        }
    });
}

// ---- conv / pooling ----

namespace {

void im2col(const double* x, long C, long H, long W, int kh, int kw, int stride, int pad,
            long Ho, long Wo, double* cols) {
    // cols layout: [C*kh*kw, Ho*Wo]
    for (long c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                double* row = cols + ((c * kh + ki) * kw + kj) * Ho * Wo;
                for (long oi = 0; oi < Ho; ++oi) {
                    const long ii = oi * stride - pad + ki;
                    for (long oj = 0; oj < Wo; ++oj) {
                        const long jj = oj * stride - pad + kj;
                        row[oi * Wo + oj] = (ii >= 0 && ii < H && jj >= 0 && jj < W)
                                                ? x[(c * H + ii) * W + jj]
                                                : 0.0;
                    }
                }
            }
}

void col2im_acc(const double* cols, long C, long H, long W, int kh, int kw, int stride, int pad,
                long Ho, long Wo, double* dx) {
    for (long c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                const double* row = cols + ((c * kh + ki) * kw + kj) * Ho * Wo;
                for (long oi = 0; oi < Ho; ++oi) {
                    const long ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) continue;
                    for (long oj = 0; oj < Wo; ++oj) {
                        const long jj = oj * stride - pad + kj;
                        if (jj < 0 || jj >= W) continue;
                        dx[(c * H + ii) * W + jj] += row[oi * Wo + oj];
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const long N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const long Co = w->value.dim(0), Ci = w->value.dim(1);
    const int kh = static_cast<int>(w->value.dim(2)), kw = static_cast<int>(w->value.dim(3));
    if (Ci != C)
        throw std::invalid_argument("conv2d: channel mismatch, input " + x->value.shape_str() +
                                    " weight " + w->value.shape_str());
    const long Ho = (H + 2 * pad - kh) / stride + 1;
    const long Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: output collapses to zero");
    const long K = C * kh * kw;
    Tensor out({N, Co, Ho, Wo});
    std::vector<double> cols(static_cast<size_t>(K * Ho * Wo));
    CMatMap Wm(w->value.data(), Co, K);
    for (long n = 0; n < N; ++n) {
        im2col(x->value.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
        CMatMap Cm(cols.data(), K, Ho * Wo);
        MatMap O(out.data() + n * Co * Ho * Wo, Co, Ho * Wo);
        O.noalias() = Wm * Cm;
        for (long co = 0; co < Co; ++co)
            O.row(co).array() += b->value[co];
    }
    Var px = x, pw = w, pb = b;
    return make_op(std::move(out), {x, w, b},
                   [px, pw, pb, N, C, H, W, Co, kh, kw, stride, pad, Ho, Wo, K](Node& self) {
        std::vector<double> cols(static_cast<size_t>(K * Ho * Wo));
        std::vector<double> dcols(static_cast<size_t>(K * Ho * Wo));
        CMatMap Wm(pw->value.data(), Co, K);
        if (px->requires_grad) px->ensure_grad();
        if (pw->requires_grad) pw->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (long n = 0; n < N; ++n) {
            CMatMap G(self.grad.data() + n * Co * Ho * Wo, Co, Ho * Wo);
            if (pw->requires_grad) {
                im2col(px->value.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo,
                       cols.data());
                CMatMap Cm(cols.data(), K, Ho * Wo);
                MatMap dW(pw->grad.data(), Co, K);
                dW.noalias() += G * Cm.transpose();
            }
            if (pb->requires_grad)
                for (long co = 0; co < Co; ++co)
                    pb->grad[co] += G.row(co).sum();
            if (px->requires_grad) {
                MatMap dC(dcols.data(), K, Ho * Wo);
                dC.noalias() = Wm.transpose() * G;
                col2im_acc(dcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                           px->grad.data() + n * C * H * W);
            }
        }
    });
}

Var maxpool2d_same(const Var& x, int kernel) {
    const long N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const int half = kernel / 2;
    Tensor out({N, C, H, W});
    auto argmax = std::make_shared<std::vector<long>>(static_cast<size_t>(out.numel()));
    for (long nc = 0; nc < N * C; ++nc) {
        const double* xp = x->value.data() + nc * H * W;
        double* yp = out.data() + nc * H * W;
        long* am = argmax->data() + nc * H * W;
        for (long i = 0; i < H; ++i)
            for (long j = 0; j < W; ++j) {
                double best = -std::numeric_limits<double>::infinity();
                long bi = -1;
                for (long ii = std::max<long>(0, i - half); ii <= std::min<long>(H - 1, i + half); ++ii)
                    for (long jj = std::max<long>(0, j - half); jj <= std::min<long>(W - 1, j + half); ++jj) {
                        const double v = xp[ii * W + jj];
                        if (v > best) {
                            best = v;
                            bi = ii * W + jj;
                        }
                    }
                yp[i * W + j] = best;
                am[i * W + j] = bi;
            }
    }
    Var pa = x;
    return make_op(std::move(out), {x}, [pa, argmax, N, C, H, W](Node& self) {
        pa->ensure_grad();
        for (long nc = 0; nc < N * C; ++nc) {
            const long base = nc * H * W;
            for (long i = 0; i < H * W; ++i)
                pa->grad[base + (*argmax)[static_cast<size_t>(base + i)]] += self.grad[base + i];
        }
    });
}

Var upsample_nearest2x(const Var& x) {
    const long N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (long nc = 0; nc < N * C; ++nc) {
        const double* xp = x->value.data() + nc * H * W;
        double* yp = out.data() + nc * 4 * H * W;
        for (long i = 0; i < 2 * H; ++i)
            for (long j = 0; j < 2 * W; ++j) yp[i * 2 * W + j] = xp[(i / 2) * W + (j / 2)];
    }
    Var pa = x;
    return make_op(std::move(out), {x}, [pa, N, C, H, W](Node& self) {
        pa->ensure_grad();
        for (long nc = 0; nc < N * C; ++nc) {
            const double* gp = self.grad.data() + nc * 4 * H * W;
            double* dp = pa->grad.data() + nc * H * W;
            for (long i = 0; i < 2 * H; ++i)
                for (long j = 0; j < 2 * W; ++j) dp[(i / 2) * W + (j / 2)] += gp[i * 2 * W + j];
        }
    });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum, double eps) {
    const long N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const long M = N * H * W;
    Tensor out({N, C, H, W});
    if (!training) {
        Tensor invstd({C});
        for (long c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(running_var[c] + eps);
        for (long n = 0; n < N; ++n)
            for (long c = 0; c < C; ++c) {
                const double a = gamma->value[c] * invstd[c];
                const double bb = beta->value[c] - a * running_mean[c];
                const double* xp = x->value.data() + (n * C + c) * H * W;
                double* yp = out.data() + (n * C + c) * H * W;
                for (long i = 0; i < H * W; ++i) yp[i] = a * xp[i] + bb;
            }
        Var px = x, pg = gamma, pb = beta;
        auto is = std::make_shared<Tensor>(invstd);
        Tensor rm = running_mean;
        return make_op(std::move(out), {x, gamma, beta}, [px, pg, pb, is, rm, N, C, H, W](Node& self) {
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (long n = 0; n < N; ++n)
                for (long c = 0; c < C; ++c) {
                    const long base = (n * C + c) * H * W;
                    for (long i = 0; i < H * W; ++i) {
                        const double g = self.grad[base + i];
                        if (px->requires_grad)
                            px->grad[base + i] += g * pg->value[c] * (*is)[c];
                        if (pg->requires_grad)
                            pg->grad[c] += g * (px->value[base + i] - rm[c]) * (*is)[c];
                        if (pb->requires_grad) pb->grad[c] += g;
                    }
                }
        });
    }
    // training: batch statistics
    auto mean = std::make_shared<Tensor>(Tensor({C}));
    auto invstd = std::make_shared<Tensor>(Tensor({C}));
    auto xhat = std::make_shared<Tensor>(Tensor({N, C, H, W}));
    for (long c = 0; c < C; ++c) {
        double m = 0.0;
        for (long n = 0; n < N; ++n) {
            const double* xp = x->value.data() + (n * C + c) * H * W;
            for (long i = 0; i < H * W; ++i) m += xp[i];
        }
        m /= static_cast<double>(M);
        double v = 0.0;
        for (long n = 0; n < N; ++n) {
            const double* xp = x->value.data() + (n * C + c) * H * W;
            for (long i = 0; i < H * W; ++i) v += (xp[i] - m) * (xp[i] - m);
        }
        v /= static_cast<double>(M);
        (*mean)[c] = m;
        (*invstd)[c] = 1.0 / std::sqrt(v + eps);
        const double unbiased = M > 1 ? v * static_cast<double>(M) / static_cast<double>(M - 1) : v;
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * m;
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
        for (long n = 0; n < N; ++n) {
            const double* xp = x->value.data() + (n * C + c) * H * W;
            double* xh = xhat->data() + (n * C + c) * H * W;
            double* yp = out.data() + (n * C + c) * H * W;
            for (long i = 0; i < H * W; ++i) {
                xh[i] = (xp[i] - m) * (*invstd)[c];
                yp[i] = xh[i] * gamma->value[c] + beta->value[c];
            }
        }
    }
    Var px = x, pg = gamma, pb = beta;
    return make_op(std::move(out), {x, gamma, beta},
                   [px, pg, pb, xhat, invstd, N, C, H, W, M](Node& self) {
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (long c = 0; c < C; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (long n = 0; n < N; ++n) {
                const long base = (n * C + c) * H * W;
                for (long i = 0; i < H * W; ++i) {
                    sum_g += self.grad[base + i];
                    sum_gx += self.grad[base + i] * (*xhat)[base + i];
                }
            }
            if (pg->requires_grad) pg->grad[c] += sum_gx;
            if (pb->requires_grad) pb->grad[c] += sum_g;
            if (px->requires_grad) {
                const double scale = pg->value[c] * (*invstd)[c] / static_cast<double>(M);
                for (long n = 0; n < N; ++n) {
                    const long base = (n * C + c) * H * W;
                    for (long i = 0; i < H * W; ++i)
                        px->grad[base + i] += scale * (static_cast<double>(M) * self.grad[base + i] -
                                                       sum_g - (*xhat)[base + i] * sum_gx);
                }
            }
        }
    });
}

Var cross_entropy_rows(const Var& logits, const std::vector<long>& labels) {
    const long M = logits->value.dim(0), K = logits->value.dim(1);
    if (static_cast<long>(labels.size()) != M)
        throw std::invalid_argument("cross_entropy_rows: label count mismatch");
    double total = 0.0;
    auto probs = std::make_shared<Tensor>(Tensor({M, K}));
    for (long r = 0; r < M; ++r) {
        if (labels[static_cast<size_t>(r)] < 0 || labels[static_cast<size_t>(r)] >= K)
            throw std::out_of_range("cross_entropy_rows: label out of range");
        const double* x = logits->value.data() + r * K;
        double mx = x[0];
        for (long i = 1; i < K; ++i) mx = std::max(mx, x[i]);
        double s = 0.0;
        for (long i = 0; i < K; ++i) s += std::exp(x[i] - mx);
        const double lse = mx + std::log(s);
        total += lse - x[labels[static_cast<size_t>(r)]];
        for (long i = 0; i < K; ++i) (*probs)[r * K + i] = std::exp(x[i] - lse);
    }
    Var pl = logits;
    return make_op(Tensor::scalar(total / static_cast<double>(M)), {logits},
                   [pl, probs, labels, M, K](Node& self) {
        pl->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(M);
        for (long r = 0; r < M; ++r)
            for (long i = 0; i < K; ++i)
                pl->grad[r * K + i] +=
                    g * ((*probs)[r * K + i] - (i == labels[static_cast<size_t>(r)] ? 1.0 : 0.0));
    });
}

}  // namespace yolomed::ag
