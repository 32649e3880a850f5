#pragma once

#include <unordered_map>

#include "mpq/tensor.hpp"

namespace mpq {

// Linear warm-up to base_lr, then cosine decay to zero over the remaining steps.
inline float cosine_lr(long step, long total_steps, float base_lr, long warmup_steps) {
    if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be > 0");
    if (step < 0 || step > total_steps) throw std::invalid_argument("cosine_lr: step out of range");
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<float>(step) / static_cast<float>(warmup_steps);
    double denom = static_cast<double>(total_steps - warmup_steps);
    double progress = denom > 0 ? static_cast<double>(step - warmup_steps) / denom : 1.0;
    return static_cast<float>(base_lr * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

// SGD with momentum: v <- m*v + g + wd*p ; p <- p - lr*v.
// Per-parameter weight-decay multipliers let the fairness rule zero the decay
// term for latent weights updated from small-bit samples.
class SgdOptimizer {
public:
    float base_lr = 0.04f;
    float momentum = 0.9f;
    float weight_decay = 2.5e-5f;
    long step_count = 0;

    void register_param(const TensorPtr& p) {
        if (!p || !p->requires_grad)
            throw std::invalid_argument("sgd: only requires_grad tensors can be registered");
        if (buffers_.count(p.get())) return;
        params_.push_back(p);
        buffers_[p.get()] = std::vector<float>(p->numel(), 0.f);
    }

    const std::vector<TensorPtr>& params() const { return params_; }

    // decay_mult: per-parameter override of the weight-decay coefficient
    // multiplier; absent means 1.
    void step(float lr, const std::unordered_map<const Tensor*, float>& decay_mult = {}) {
        for (auto& p : params_) {
            if (p->g.size() != p->v.size())
                throw std::runtime_error("sgd: parameter '" + p->name + "' has no gradient");
            float dm = 1.f;
            if (auto it = decay_mult.find(p.get()); it != decay_mult.end()) dm = it->second;
            auto& buf = buffers_[p.get()];
            for (std::size_t i = 0; i < p->numel(); ++i) {
                buf[i] = momentum * buf[i] + p->g[i] + weight_decay * dm * p->v[i];
                p->v[i] -= lr * buf[i];
            }
        }
        ++step_count;
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    std::vector<float>& buffer(const Tensor* p) { return buffers_.at(p); }
    const std::vector<float>& buffer(const Tensor* p) const { return buffers_.at(p); }

private:
    std::vector<TensorPtr> params_;
    std::unordered_map<const Tensor*, std::vector<float>> buffers_;
};

}  // namespace mpq
