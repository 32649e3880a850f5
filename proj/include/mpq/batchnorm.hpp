#pragma once

#include "mpq/ops.hpp"

namespace mpq {

// Per-channel batch normalization with running statistics. Training mode
// normalizes with batch stats and updates running mean/var (momentum 0.1);
// inference mode normalizes with the stored running stats.
struct BatchNormState {
    std::vector<float> running_mean, running_var;
    TensorPtr gamma, beta;  // learnable affine
    float momentum = 0.1f;
    float eps = 1e-5f;

    explicit BatchNormState(int channels = 0) { reset(channels); }

    void reset(int channels) {
        running_mean.assign(channels, 0.f);
        running_var.assign(channels, 1.f);
        gamma = make_param({std::max(channels, 1)}, std::vector<float>(std::max(channels, 1), 1.f));
        beta = make_param({std::max(channels, 1)}, std::vector<float>(std::max(channels, 1), 0.f));
        if (channels == 0) gamma = beta = nullptr;
    }

    int channels() const { return static_cast<int>(running_mean.size()); }
};

inline TensorPtr batchnorm(const TensorPtr& x, BatchNormState& bn, bool training) {
    if (x->shape.size() < 2 || x->shape[1] != bn.channels())
        throw std::invalid_argument("batchnorm: input " + shape_str(x->shape) +
                                    " does not match " + std::to_string(bn.channels()) +
                                    " channels");
    TensorPtr xhat;
    if (training) {
        auto stats = channel_stats(*x);
        for (int c = 0; c < bn.channels(); ++c) {
            bn.running_mean[c] = (1.f - bn.momentum) * bn.running_mean[c] +
                                 bn.momentum * static_cast<float>(stats.mean[c]);
            bn.running_var[c] = (1.f - bn.momentum) * bn.running_var[c] +
                                bn.momentum * static_cast<float>(stats.var[c]);
        }
        xhat = channel_standardize(x, bn.eps);
    } else {
        const int C = bn.channels();
        std::size_t spatial = x->numel() / (static_cast<std::size_t>(x->shape[0]) * C);
        auto out = make_tensor(x->shape);
        std::vector<float> inv_std(C);
        for (int c = 0; c < C; ++c)
            inv_std[c] = 1.f / std::sqrt(bn.running_var[c] + bn.eps);
        for (std::size_t i = 0; i < x->numel(); ++i) {
            std::size_t c = (i / spatial) % C;
            out->v[i] = (x->v[i] - bn.running_mean[c]) * inv_std[c];
        }
        if (x->tracked()) {
            out->parents = {x};
            auto xp = x;
            out->backward_fn = [xp, inv_std, C, spatial](Tensor& self) {
                for (std::size_t i = 0; i < self.numel(); ++i)
                    xp->g[i] += self.g[i] * inv_std[(i / spatial) % C];
            };
        }
        xhat = out;
    }
    return add_channel(mul_channel(xhat, bn.gamma), bn.beta);
}

}  // namespace mpq
