#pragma once

#include <cmath>
#include <cstdint>

#include "mpq/tensor.hpp"

namespace mpq {

// Rounding convention used everywhere quantized values are produced:
// nearest integer, ties away from zero.
inline float round_ties_away(float x) { return std::round(x); }

namespace detail {

inline TensorPtr unary(const char* op, const TensorPtr& x,
                       const std::function<float(float)>& f,
                       const std::function<float(float, float)>& df_times_up) {
    check_finite(op, *x);
    auto out = make_tensor(x->shape);
    for (std::size_t i = 0; i < x->numel(); ++i) out->v[i] = f(x->v[i]);
    if (x->tracked()) {
        out->parents = {x};
        auto xp = x;
        out->backward_fn = [xp, df_times_up](Tensor& self) {
            for (std::size_t i = 0; i < self.numel(); ++i)
                xp->g[i] += df_times_up(xp->v[i], self.g[i]);
        };
    }
    return out;
}

inline TensorPtr binary_elemwise(const char* op, const TensorPtr& a, const TensorPtr& b,
                                 const std::function<float(float, float)>& f,
                                 const std::function<float(float, float, float)>& da,
                                 const std::function<float(float, float, float)>& db) {
    check_same_shape(op, *a, *b);
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < a->numel(); ++i) out->v[i] = f(a->v[i], b->v[i]);
    if (a->tracked() || b->tracked()) {
        out->parents = {a, b};
        auto ap = a, bp = b;
        out->backward_fn = [ap, bp, da, db](Tensor& self) {
            for (std::size_t i = 0; i < self.numel(); ++i) {
                if (ap->tracked()) ap->g[i] += da(ap->v[i], bp->v[i], self.g[i]);
                if (bp->tracked()) bp->g[i] += db(ap->v[i], bp->v[i], self.g[i]);
            }
        };
    }
    return out;
}

}  // namespace detail

inline TensorPtr relu(const TensorPtr& x) {
    return detail::unary("relu", x,
                         [](float v) { return v > 0.f ? v : 0.f; },
                         [](float v, float up) { return v > 0.f ? up : 0.f; });
}

// max(x, c) elementwise with a constant threshold; subgradient 0 at the kink.
inline TensorPtr max_scalar(const TensorPtr& x, float c) {
    return detail::unary("max_scalar", x,
                         [c](float v) { return v > c ? v : c; },
                         [c](float v, float up) { return v > c ? up : 0.f; });
}

inline TensorPtr square(const TensorPtr& x) {
    return detail::unary("square", x,
                         [](float v) { return v * v; },
                         [](float v, float up) { return 2.f * v * up; });
}

inline TensorPtr sqrt_op(const TensorPtr& x) {
    return detail::unary("sqrt", x,
                         [](float v) { return std::sqrt(v); },
                         [](float v, float up) {
                             float s = std::sqrt(v);
                             return s > 0.f ? up / (2.f * s) : 0.f;
                         });
}

inline TensorPtr scale(const TensorPtr& x, float c) {
    return detail::unary("scale", x,
                         [c](float v) { return c * v; },
                         [c](float, float up) { return c * up; });
}

// Forward rounds to nearest (ties away from zero); backward is identity.
inline TensorPtr ste_round(const TensorPtr& x) {
    return detail::unary("ste_round", x,
                         [](float v) { return round_ties_away(v); },
                         [](float, float up) { return up; });
}

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_elemwise("add", a, b,
        [](float x, float y) { return x + y; },
        [](float, float, float up) { return up; },
        [](float, float, float up) { return up; });
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_elemwise("sub", a, b,
        [](float x, float y) { return x - y; },
        [](float, float, float up) { return up; },
        [](float, float, float up) { return -up; });
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_elemwise("mul", a, b,
        [](float x, float y) { return x * y; },
        [](float, float y, float up) { return y * up; },
        [](float x, float, float up) { return x * up; });
}

inline TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_elemwise("div", a, b,
        [](float x, float y) { return x / y; },
        [](float, float y, float up) { return up / y; },
        [](float x, float y, float up) { return -x / (y * y) * up; });
}

// Mean over all elements -> scalar.
inline TensorPtr mean(const TensorPtr& x) {
    check_finite("mean", *x);
    double acc = 0.0;
    for (float v : x->v) acc += v;
    auto out = make_scalar(static_cast<float>(acc / static_cast<double>(x->numel())));
    if (x->tracked()) {
        out->parents = {x};
        auto xp = x;
        out->backward_fn = [xp](Tensor& self) {
            float up = self.g[0] / static_cast<float>(xp->numel());
            for (std::size_t i = 0; i < xp->numel(); ++i) xp->g[i] += up;
        };
    }
    return out;
}

inline TensorPtr sum(const TensorPtr& x) {
    check_finite("sum", *x);
    double acc = 0.0;
    for (float v : x->v) acc += v;
    auto out = make_scalar(static_cast<float>(acc));
    if (x->tracked()) {
        out->parents = {x};
        auto xp = x;
        out->backward_fn = [xp](Tensor& self) {
            for (std::size_t i = 0; i < xp->numel(); ++i) xp->g[i] += self.g[0];
        };
    }
    return out;
}

// A [m,k] x B [k,n] -> [m,n]
inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a->shape) +
                                    " x " + shape_str(b->shape));
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = make_tensor({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p)
                acc += static_cast<double>(a->v[i * k + p]) * b->v[p * n + j];
            out->v[i * n + j] = static_cast<float>(acc);
        }
    if (a->tracked() || b->tracked()) {
        out->parents = {a, b};
        auto ap = a, bp = b;
        out->backward_fn = [ap, bp, m, k, n](Tensor& self) {
            if (ap->tracked())
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j)
                            acc += static_cast<double>(self.g[i * n + j]) * bp->v[p * n + j];
                        ap->g[i * k + p] += static_cast<float>(acc);
                    }
            if (bp->tracked())
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += static_cast<double>(ap->v[i * k + p]) * self.g[i * n + j];
                        bp->g[p * n + j] += static_cast<float>(acc);
                    }
        };
    }
    return out;
}

// x [N,C,H,W], w [O,C,kh,kw], stride s, zero padding p -> [N,O,Ho,Wo]
inline TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, int stride, int pad) {
    if (x->shape.size() != 4 || w->shape.size() != 4 || x->shape[1] != w->shape[1])
        throw std::invalid_argument("conv2d: incompatible shapes " + shape_str(x->shape) +
                                    " * " + shape_str(w->shape));
    const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int O = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    auto out = make_tensor({N, O, Ho, Wo});
    auto at_x = [&](int n, int c, int i, int j) -> float {
        return x->v[((static_cast<std::size_t>(n) * C + c) * H + i) * W + j];
    };
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int oi = 0; oi < Ho; ++oi)
                for (int oj = 0; oj < Wo; ++oj) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                int ii = oi * stride - pad + ki;
                                int jj = oj * stride - pad + kj;
                                if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                                acc += static_cast<double>(at_x(n, c, ii, jj)) *
                                       w->v[((static_cast<std::size_t>(o) * C + c) * kh + ki) * kw + kj];
                            }
                    out->v[((static_cast<std::size_t>(n) * O + o) * Ho + oi) * Wo + oj] =
                        static_cast<float>(acc);
                }
    if (x->tracked() || w->tracked()) {
        out->parents = {x, w};
        auto xp = x, wp = w;
        out->backward_fn = [xp, wp, N, C, H, W, O, kh, kw, Ho, Wo, stride, pad](Tensor& self) {
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o)
                    for (int oi = 0; oi < Ho; ++oi)
                        for (int oj = 0; oj < Wo; ++oj) {
                            float up = self.g[((static_cast<std::size_t>(n) * O + o) * Ho + oi) * Wo + oj];
                            if (up == 0.f) continue;
                            for (int c = 0; c < C; ++c)
                                for (int ki = 0; ki < kh; ++ki)
                                    for (int kj = 0; kj < kw; ++kj) {
                                        int ii = oi * stride - pad + ki;
                                        int jj = oj * stride - pad + kj;
                                        if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                                        std::size_t xi = ((static_cast<std::size_t>(n) * C + c) * H + ii) * W + jj;
                                        std::size_t wi = ((static_cast<std::size_t>(o) * C + c) * kh + ki) * kw + kj;
                                        if (xp->tracked()) xp->g[xi] += up * wp->v[wi];
                                        if (wp->tracked()) wp->g[wi] += up * xp->v[xi];
                                    }
                        }
        };
    }
    return out;
}

// Broadcast a channel vector over [N,C] or [N,C,H,W]; used for biases and
// the per-channel affine heads.
inline TensorPtr add_channel(const TensorPtr& x, const TensorPtr& bias) {
    const int C = x->shape.size() >= 2 ? x->shape[1] : 0;
    if (bias->shape.size() != 1 || bias->shape[0] != C)
        throw std::invalid_argument("add_channel: bias " + shape_str(bias->shape) +
                                    " does not match input " + shape_str(x->shape));
    std::size_t spatial = x->numel() / (static_cast<std::size_t>(x->shape[0]) * C);
    auto out = make_tensor(x->shape);
    for (std::size_t i = 0; i < x->numel(); ++i)
        out->v[i] = x->v[i] + bias->v[(i / spatial) % C];
    if (x->tracked() || bias->tracked()) {
        out->parents = {x, bias};
        auto xp = x, bp = bias;
        out->backward_fn = [xp, bp, C, spatial](Tensor& self) {
            for (std::size_t i = 0; i < self.numel(); ++i) {
                if (xp->tracked()) xp->g[i] += self.g[i];
                if (bp->tracked()) bp->g[(i / spatial) % C] += self.g[i];
            }
        };
    }
    return out;
}

inline TensorPtr mul_channel(const TensorPtr& x, const TensorPtr& gain) {
    const int C = x->shape.size() >= 2 ? x->shape[1] : 0;
    if (gain->shape.size() != 1 || gain->shape[0] != C)
        throw std::invalid_argument("mul_channel: gain " + shape_str(gain->shape) +
                                    " does not match input " + shape_str(x->shape));
    std::size_t spatial = x->numel() / (static_cast<std::size_t>(x->shape[0]) * C);
    auto out = make_tensor(x->shape);
    for (std::size_t i = 0; i < x->numel(); ++i)
        out->v[i] = x->v[i] * gain->v[(i / spatial) % C];
    if (x->tracked() || gain->tracked()) {
        out->parents = {x, gain};
        auto xp = x, gp = gain;
        out->backward_fn = [xp, gp, C, spatial](Tensor& self) {
            for (std::size_t i = 0; i < self.numel(); ++i) {
                std::size_t c = (i / spatial) % C;
                if (xp->tracked()) xp->g[i] += self.g[i] * gp->v[c];
                if (gp->tracked()) gp->g[c] += self.g[i] * xp->v[i];
            }
        };
    }
    return out;
}

inline TensorPtr reshape(const TensorPtr& x, std::vector<int> shape) {
    if (Tensor::numel_of(shape) != x->numel())
        throw std::invalid_argument("reshape: element count mismatch");
    auto out = make_tensor(std::move(shape));
    out->v = x->v;
    if (x->tracked()) {
        out->parents = {x};
        auto xp = x;
        out->backward_fn = [xp](Tensor& self) {
            for (std::size_t i = 0; i < self.numel(); ++i) xp->g[i] += self.g[i];
        };
    }
    return out;
}

// Stops gradient flow; value is shared.
inline TensorPtr detach(const TensorPtr& x) {
    auto out = make_tensor(x->shape);
    out->v = x->v;
    return out;
}

// Channel-wise mean and (biased) variance over batch x spatial positions.
struct ChannelStats {
    std::vector<double> mean, var;
};

inline ChannelStats channel_stats(const Tensor& x) {
    const int C = x.shape.size() >= 2 ? x.shape[1] : 1;
    std::size_t spatial = x.numel() / (static_cast<std::size_t>(x.shape[0]) * C);
    std::size_t per_c = x.numel() / C;
    ChannelStats s;
    s.mean.assign(C, 0.0);
    s.var.assign(C, 0.0);
    for (std::size_t i = 0; i < x.numel(); ++i) s.mean[(i / spatial) % C] += x.v[i];
    for (int c = 0; c < C; ++c) s.mean[c] /= static_cast<double>(per_c);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        std::size_t c = (i / spatial) % C;
        double d = x.v[i] - s.mean[c];
        s.var[c] += d * d;
    }
    for (int c = 0; c < C; ++c) s.var[c] /= static_cast<double>(per_c);
    return s;
}

// (x - mu_c) / sqrt(var_c + eps) using the batch's own statistics; the
// gradient accounts for the dependence of mu/var on x (batchnorm algebra
// without the affine part).
inline TensorPtr channel_standardize(const TensorPtr& x, float eps) {
    if (x->shape.size() < 2)
        throw std::invalid_argument("channel_standardize: input needs a channel axis, got " +
                                    shape_str(x->shape));
    const int C = x->shape[1];
    std::size_t spatial = x->numel() / (static_cast<std::size_t>(x->shape[0]) * C);
    std::size_t per_c = x->numel() / C;
    auto st = channel_stats(*x);
    auto out = make_tensor(x->shape);
    std::vector<float> inv_std(C);
    for (int c = 0; c < C; ++c)
        inv_std[c] = static_cast<float>(1.0 / std::sqrt(st.var[c] + eps));
    for (std::size_t i = 0; i < x->numel(); ++i) {
        std::size_t c = (i / spatial) % C;
        out->v[i] = (x->v[i] - static_cast<float>(st.mean[c])) * inv_std[c];
    }
    if (x->tracked()) {
        out->parents = {x};
        auto xp = x;
        auto xhat = out->v;  // frozen copy for the backward rule
        out->backward_fn = [xp, xhat, inv_std, C, spatial, per_c](Tensor& self) {
            // dL/dx = inv_std * (g - mean_c(g) - xhat * mean_c(g*xhat))
            std::vector<double> g_mean(C, 0.0), gx_mean(C, 0.0);
            for (std::size_t i = 0; i < self.numel(); ++i) {
                std::size_t c = (i / spatial) % C;
                g_mean[c] += self.g[i];
                gx_mean[c] += static_cast<double>(self.g[i]) * xhat[i];
            }
            for (int c = 0; c < C; ++c) {
                g_mean[c] /= static_cast<double>(per_c);
                gx_mean[c] /= static_cast<double>(per_c);
            }
            for (std::size_t i = 0; i < self.numel(); ++i) {
                std::size_t c = (i / spatial) % C;
                xp->g[i] += inv_std[c] * static_cast<float>(self.g[i] - g_mean[c] -
                                                            xhat[i] * gx_mean[c]);
            }
        };
    }
    return out;
}

// Mean softmax cross-entropy over the batch; logits [N,K], integer labels.
inline TensorPtr softmax_cross_entropy(const TensorPtr& logits, const std::vector<int>& labels) {
    if (logits->shape.size() != 2)
        throw std::invalid_argument("softmax_cross_entropy: logits must be [N,K], got " +
                                    shape_str(logits->shape));
    const int N = logits->shape[0], K = logits->shape[1];
    if (static_cast<int>(labels.size()) != N)
        throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    std::vector<float> probs(static_cast<std::size_t>(N) * K);
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        if (labels[n] < 0 || labels[n] >= K)
            throw std::invalid_argument("softmax_cross_entropy: label out of range");
        float mx = logits->v[n * K];
        for (int k = 1; k < K; ++k) mx = std::max(mx, logits->v[n * K + k]);
        double z = 0.0;
        for (int k = 0; k < K; ++k) {
            probs[n * K + k] = std::exp(logits->v[n * K + k] - mx);
            z += probs[n * K + k];
        }
        for (int k = 0; k < K; ++k) probs[n * K + k] = static_cast<float>(probs[n * K + k] / z);
        loss -= std::log(std::max(static_cast<double>(probs[n * K + labels[n]]), 1e-30));
    }
    auto out = make_scalar(static_cast<float>(loss / N));
    if (logits->tracked()) {
        out->parents = {logits};
        auto lp = logits;
        out->backward_fn = [lp, probs, labels, N, K](Tensor& self) {
            float up = self.g[0] / N;
            for (int n = 0; n < N; ++n)
                for (int k = 0; k < K; ++k)
                    lp->g[n * K + k] += up * (probs[n * K + k] - (labels[n] == k ? 1.f : 0.f));
        };
    }
    return out;
}

}  // namespace mpq
