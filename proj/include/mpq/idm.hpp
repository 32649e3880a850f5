#pragma once

#include "mpq/ops.hpp"

namespace mpq {

// Feature alignment head: channel-standardized features of the small-bit
// branch are affinely adapted, rectified at Q, and pulled toward the
// max-bit reference treated the same way. The reference tensor is detached
// by the caller; gradients flow into the small-bit branch and all four
// head parameter vectors.
struct IdmHead {
    TensorPtr gain_s, shift_s;  // small-bit branch
    TensorPtr gain_h, shift_h;  // high-bit (reference) branch
    float rectify_q = 0.f;
    float eps_stab = 1e-5f;

    IdmHead() = default;
    explicit IdmHead(int channels) {
        gain_s = make_param({channels}, std::vector<float>(channels, 1.f));
        shift_s = make_param({channels}, std::vector<float>(channels, 0.f));
        gain_h = make_param({channels}, std::vector<float>(channels, 1.f));
        shift_h = make_param({channels}, std::vector<float>(channels, 0.f));
    }

    int channels() const { return gain_s ? gain_s->shape[0] : 0; }

    std::vector<TensorPtr> params() const { return {gain_s, shift_s, gain_h, shift_h}; }
};

inline TensorPtr standardize(const TensorPtr& x, float eps_stab) {
    return channel_standardize(x, eps_stab);
}

// RMS distance between the rectified adapted branches:
// sqrt(mean((max(Q, std(O_S)*eta_S + xi_S) - max(Q, std(O_H)*eta_H + xi_H))^2))
inline TensorPtr idm_loss(const TensorPtr& o_s, const TensorPtr& o_h, const IdmHead& head) {
    check_same_shape("idm_loss", *o_s, *o_h);
    auto branch = [&](const TensorPtr& o, const TensorPtr& gain, const TensorPtr& shift) {
        auto adapted = add_channel(mul_channel(standardize(o, head.eps_stab), gain), shift);
        return max_scalar(adapted, head.rectify_q);
    };
    auto a = branch(o_s, head.gain_s, head.shift_s);
    auto b = branch(o_h, head.gain_h, head.shift_h);
    return sqrt_op(mean(square(sub(a, b))));
}

// IDM is applied to layer l iff the sampled weight bit is the smallest
// currently-unfrozen candidate of that layer.
inline bool idm_site_active(int sampled_bw, const std::vector<int>& unfrozen_candidates) {
    if (unfrozen_candidates.empty()) return false;
    int smallest = *std::min_element(unfrozen_candidates.begin(), unfrozen_candidates.end());
    return sampled_bw == smallest;
}

}  // namespace mpq
